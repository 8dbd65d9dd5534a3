#include "innerlm/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "innerlm/sha256.hpp"

namespace innerlm {

namespace {

constexpr char kMagic[8] = {'I', 'L', 'M', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw IoError("checkpoint: truncated file");
    return v;
}

void read_exact(std::istream& in, void* dst, size_t n) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!in) throw IoError("checkpoint: truncated file");
}

}  // namespace

void to_json(nlohmann::json& j, const Provenance& p) {
    j = nlohmann::json{{"stage", p.stage},
                       {"seed", p.seed},
                       {"step", p.step},
                       {"data", p.data},
                       {"backbone_hash", p.backbone_hash},
                       {"ref_text_loss_bits", nullptr},
                       {"ref_greedy", p.ref_greedy}};
    if (p.ref_text_loss_bits) j["ref_text_loss_bits"] = *p.ref_text_loss_bits;
}

void from_json(const nlohmann::json& j, Provenance& p) {
    j.at("stage").get_to(p.stage);
    j.at("seed").get_to(p.seed);
    j.at("step").get_to(p.step);
    j.at("data").get_to(p.data);
    j.at("backbone_hash").get_to(p.backbone_hash);
    if (j.contains("ref_text_loss_bits") && !j.at("ref_text_loss_bits").is_null())
        p.ref_text_loss_bits = j.at("ref_text_loss_bits").get<uint32_t>();
    else
        p.ref_text_loss_bits.reset();
    if (j.contains("ref_greedy")) j.at("ref_greedy").get_to(p.ref_greedy);
}

void save_checkpoint(Model<float>& model, const Provenance& prov, const std::string& path) {
    nlohmann::json header;
    header["format_version"] = kVersion;
    header["backbone"] = model.backbone.cfg;
    if (model.adaptor)
        header["adaptor"] = model.adaptor->cfg;
    else
        header["adaptor"] = nullptr;
    header["provenance"] = prov;
    const std::string header_bytes = header.dump();  // canonical: sorted keys, no whitespace

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    out.write(kMagic, sizeof(kMagic));
    write_pod(out, kVersion);
    write_pod(out, static_cast<uint64_t>(header_bytes.size()));
    out.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));

    uint32_t count = 0;
    visit_params(model, [&](const std::string&, Tensor<float>&) { ++count; });
    write_pod(out, count);
    visit_params(model, [&](const std::string& name, Tensor<float>& t) {
        write_pod(out, static_cast<uint16_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod(out, static_cast<uint8_t>(0));  // dtype: f32
        write_pod(out, static_cast<uint8_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) write_pod(out, static_cast<uint32_t>(t.dim(i)));
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(static_cast<size_t>(t.numel()) * sizeof(float)));
    });

    const auto digest = Sha256::hash(header_bytes.data(), header_bytes.size());
    out.write(reinterpret_cast<const char*>(digest.data()), static_cast<std::streamsize>(digest.size()));
    if (!out) throw IoError("checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open '" + path + "'");

    char magic[8];
    read_exact(in, magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw FormatError("checkpoint: bad magic, not a checkpoint file");
    const uint32_t version = read_pod<uint32_t>(in);
    if (version != kVersion)
        throw FormatError("checkpoint: unsupported format version " + std::to_string(version));

    const uint64_t header_len = read_pod<uint64_t>(in);
    std::string header_bytes(header_len, '\0');
    read_exact(in, header_bytes.data(), header_len);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_bytes);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("checkpoint: invalid header JSON: ") + e.what());
    }

    Checkpoint ck;
    const BackboneConfig bcfg = header.at("backbone").get<BackboneConfig>();
    ck.model.backbone = build_backbone<float>(bcfg);
    if (!header.at("adaptor").is_null()) {
        const AdaptorConfig acfg = header.at("adaptor").get<AdaptorConfig>();
        ck.model.adaptor = init_adaptor(ck.model.backbone, acfg);
    }
    ck.provenance = header.at("provenance").get<Provenance>();

    std::unordered_map<std::string, Tensor<float>*> by_name;
    visit_params(ck.model, [&](const std::string& name, Tensor<float>& t) { by_name[name] = &t; });

    const uint32_t count = read_pod<uint32_t>(in);
    if (count != by_name.size())
        throw FormatError("checkpoint: tensor count " + std::to_string(count) + " does not match model (" +
                          std::to_string(by_name.size()) + ")");
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t name_len = read_pod<uint16_t>(in);
        std::string name(name_len, '\0');
        read_exact(in, name.data(), name_len);
        const uint8_t dtype = read_pod<uint8_t>(in);
        if (dtype != 0) throw FormatError("checkpoint: unsupported dtype tag " + std::to_string(dtype));
        const uint8_t rank = read_pod<uint8_t>(in);
        Shape shape(rank);
        for (uint8_t r = 0; r < rank; ++r) shape[r] = static_cast<int>(read_pod<uint32_t>(in));
        auto it = by_name.find(name);
        if (it == by_name.end()) throw FormatError("checkpoint: unexpected tensor '" + name + "'");
        Tensor<float>& t = *it->second;
        if (t.shape() != shape)
            throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(shape) +
                              ", model expects " + shape_str(t.shape()));
        read_exact(in, t.data(), static_cast<size_t>(t.numel()) * sizeof(float));
        by_name.erase(it);
    }
    if (!by_name.empty())
        throw FormatError("checkpoint: missing tensor '" + by_name.begin()->first + "'");

    std::array<uint8_t, 32> trailer{};
    read_exact(in, trailer.data(), trailer.size());
    const auto digest = Sha256::hash(header_bytes.data(), header_bytes.size());
    if (trailer != digest) throw FormatError("checkpoint: header hash mismatch");
    in.peek();
    if (!in.eof()) throw FormatError("checkpoint: trailing bytes after hash trailer");

    // A loaded model is a frozen artifact until a stage sets its trainable set.
    visit_params(ck.model, [](const std::string&, Tensor<float>& t) { t.set_trainable(false); });
    return ck;
}

}  // namespace innerlm
