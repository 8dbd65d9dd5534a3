#include "innerlm/data.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "innerlm/base64.hpp"
#include "innerlm/rng.hpp"

namespace innerlm {

namespace {

// Per-sample seed so output i is a pure function of (seed, i) and shards can
// generate in parallel.
uint64_t mix_seed(uint64_t seed, uint64_t index) {
    uint64_t z = seed ^ (0x9e3779b97f4a7c15ull * (index + 1));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

constexpr int kCellPx = 4;     // shapes occupy one 4x4-pixel tile
constexpr int kGridCells = 4;  // 4x4 placement grid on a 16x16 image
constexpr float kIntensityValues[3] = {0.35f, 0.65f, 0.95f};

struct PlacedShape {
    int type = 0;       // 0 square, 1 cross, 2 disc
    int intensity = 0;  // 0 dim, 1 mid, 2 bright
    int cell_r = 0;
    int cell_c = 0;
};

struct Scene {
    std::vector<PlacedShape> shapes;  // canonical order: (cell_r, cell_c)
};

// Coarse 3-band position of a cell center along one axis of a 16px image.
int coarse_band(int cell) { return (cell * kCellPx + kCellPx / 2) * 3 / 16; }

int position_token(const PlacedShape& s) {
    return vocab::POS_BASE + coarse_band(s.cell_r) * 3 + coarse_band(s.cell_c);
}

Box shape_box(const PlacedShape& s, int image_size) {
    Box b;
    b.x1 = static_cast<float>(s.cell_c * kCellPx) / image_size;
    b.y1 = static_cast<float>(s.cell_r * kCellPx) / image_size;
    b.x2 = static_cast<float>(s.cell_c * kCellPx + kCellPx) / image_size;
    b.y2 = static_cast<float>(s.cell_r * kCellPx + kCellPx) / image_size;
    return b;
}

// 1-3 shapes on distinct cells with pairwise-distinct (type, intensity) pairs,
// so any shape is uniquely identified by its attributes and every labeling is
// a deterministic function of the image.
Scene gen_scene(Rng& rng) {
    const double u = rng.uniform();
    const int k = u < 0.55 ? 1 : (u < 0.90 ? 2 : 3);
    std::vector<int> cells(kGridCells * kGridCells);
    for (size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
    rng.shuffle(cells);
    std::vector<int> combos(9);
    for (size_t i = 0; i < combos.size(); ++i) combos[i] = static_cast<int>(i);
    rng.shuffle(combos);
    Scene scene;
    for (int i = 0; i < k; ++i) {
        PlacedShape s;
        s.type = combos[static_cast<size_t>(i)] / 3;
        s.intensity = combos[static_cast<size_t>(i)] % 3;
        s.cell_r = cells[static_cast<size_t>(i)] / kGridCells;
        s.cell_c = cells[static_cast<size_t>(i)] % kGridCells;
        scene.shapes.push_back(s);
    }
    std::sort(scene.shapes.begin(), scene.shapes.end(), [](const PlacedShape& a, const PlacedShape& b) {
        return a.cell_r != b.cell_r ? a.cell_r < b.cell_r : a.cell_c < b.cell_c;
    });
    return scene;
}

GridImage render_scene(const Scene& scene, int image_size) {
    GridImage img;
    img.width = image_size;
    img.height = image_size;
    img.pixels.assign(static_cast<size_t>(image_size) * image_size, 0.0f);
    for (const auto& s : scene.shapes) {
        const float v = kIntensityValues[s.intensity];
        const int oy = s.cell_r * kCellPx, ox = s.cell_c * kCellPx;
        for (int dy = 0; dy < kCellPx; ++dy) {
            for (int dx = 0; dx < kCellPx; ++dx) {
                bool on = false;
                switch (s.type) {
                    case 0: on = dy == 0 || dy == kCellPx - 1 || dx == 0 || dx == kCellPx - 1; break;
                    case 1: on = (dy == 1 || dy == 2) || (dx == 1 || dx == 2); break;
                    default: on = true; break;
                }
                if (on) img.at(oy + dy, ox + dx) = v;
            }
        }
    }
    return img;
}

std::vector<int> caption_tokens(const Scene& scene) {
    std::vector<int> out;
    for (const auto& s : scene.shapes) {
        out.push_back(vocab::SHAPE_BASE + s.type);
        out.push_back(vocab::INTENSITY_BASE + s.intensity);
        out.push_back(position_token(s));
    }
    out.push_back(vocab::EOS);
    return out;
}

Sample finish_sample(SampleKind kind, std::optional<GridImage> image, std::vector<int> prompt,
                     std::vector<int> response, std::vector<Box> boxes = {}) {
    Sample s;
    s.kind = kind;
    s.image = std::move(image);
    s.prompt_ids = std::move(prompt);
    s.response_ids = std::move(response);
    s.loss_mask = make_loss_mask(s.prompt_ids.size(), s.response_ids.size());
    s.boxes = std::move(boxes);
    return s;
}

}  // namespace

std::string sample_kind_name(SampleKind k) {
    switch (k) {
        case SampleKind::Text: return "text";
        case SampleKind::Caption: return "caption";
        case SampleKind::Instruction: return "instruction";
        default: return "grounding";
    }
}

SampleKind sample_kind_from_name(const std::string& name) {
    if (name == "text") return SampleKind::Text;
    if (name == "caption") return SampleKind::Caption;
    if (name == "instruction") return SampleKind::Instruction;
    if (name == "grounding") return SampleKind::Grounding;
    throw FormatError("unknown sample kind '" + name + "'");
}

std::vector<int> encode_box_tokens(const Box& box) {
    std::vector<int> out;
    out.push_back(vocab::BOX_OPEN);
    const float coords[4] = {box.x1, box.y1, box.x2, box.y2};
    for (float c : coords) {
        int q = static_cast<int>(std::lround(static_cast<double>(c) * 100.0));
        q = std::clamp(q, 0, 99);
        out.push_back(vocab::DIGIT_BASE + q / 10);
        out.push_back(vocab::DIGIT_BASE + q % 10);
    }
    out.push_back(vocab::BOX_CLOSE);
    return out;
}

std::optional<Box> decode_box_tokens(const std::vector<int>& ids, size_t begin, size_t* consumed) {
    if (begin + 10 > ids.size() || ids[begin] != vocab::BOX_OPEN) return std::nullopt;
    float coords[4];
    for (int c = 0; c < 4; ++c) {
        const int hi = ids[begin + 1 + 2 * c] - vocab::DIGIT_BASE;
        const int lo = ids[begin + 2 + 2 * c] - vocab::DIGIT_BASE;
        if (hi < 0 || hi >= 10 || lo < 0 || lo >= 10) return std::nullopt;
        coords[c] = static_cast<float>(hi * 10 + lo) / 100.0f;
    }
    if (ids[begin + 9] != vocab::BOX_CLOSE) return std::nullopt;
    if (consumed != nullptr) *consumed = 10;
    return Box{coords[0], coords[1], coords[2], coords[3]};
}

std::vector<Box> decode_all_boxes(const std::vector<int>& ids) {
    std::vector<Box> out;
    size_t i = 0;
    while (i < ids.size()) {
        if (ids[i] == vocab::BOX_OPEN) {
            size_t used = 0;
            auto b = decode_box_tokens(ids, i, &used);
            if (b) {
                out.push_back(*b);
                i += used;
                continue;
            }
        }
        ++i;
    }
    return out;
}

std::vector<Sample> gen_text_corpus(uint64_t seed, int n, int seq_len) {
    if (n <= 0) throw ValueError("gen_text_corpus: n must be positive");
    if (seq_len < 4) throw ValueError("gen_text_corpus: seq_len too short");
    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng(mix_seed(seed, static_cast<uint64_t>(i)));
        const int body = seq_len - 1;
        std::vector<int> tokens(static_cast<size_t>(body));
        if (rng.uniform() < 0.5) {
            // Repetition family: a fixed pattern of period 1..4.
            const int period = rng.uniform_int(1, 4);
            int base[4];
            for (int p = 0; p < period; ++p) base[p] = vocab::WORD_BASE + rng.uniform_int(0, vocab::WORD_COUNT - 1);
            for (int t = 0; t < body; ++t) tokens[static_cast<size_t>(t)] = base[t % period];
        } else {
            // Arithmetic family: constant stride through the word range.
            const int start = rng.uniform_int(0, vocab::WORD_COUNT - 1);
            const int stride = rng.uniform_int(1, 5);
            for (int t = 0; t < body; ++t)
                tokens[static_cast<size_t>(t)] = vocab::WORD_BASE + (start + t * stride) % vocab::WORD_COUNT;
        }
        out.push_back(finish_sample(SampleKind::Text, std::nullopt, {vocab::BOS}, std::move(tokens)));
    }
    return out;
}

std::vector<Sample> gen_caption_pairs(uint64_t seed, int n, int image_size) {
    if (n <= 0) throw ValueError("gen_caption_pairs: n must be positive");
    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng(mix_seed(seed ^ 0xCAF7u, static_cast<uint64_t>(i)));
        const Scene scene = gen_scene(rng);
        out.push_back(finish_sample(SampleKind::Caption, render_scene(scene, image_size),
                                    {vocab::BOS, vocab::CAPTION_Q, vocab::SEP}, caption_tokens(scene)));
    }
    return out;
}

std::vector<Sample> gen_instruction_pairs(uint64_t seed, int n, int image_size) {
    if (n <= 0) throw ValueError("gen_instruction_pairs: n must be positive");
    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng(mix_seed(seed ^ 0x1257u, static_cast<uint64_t>(i)));
        const Scene scene = gen_scene(rng);
        GridImage img = render_scene(scene, image_size);
        const int family = rng.uniform_int(0, 2);
        std::vector<int> prompt, response;

        // Bands holding exactly one shape are unambiguous what-at queries.
        int band_count[9] = {0};
        int band_shape[9] = {0};
        for (const auto& s : scene.shapes) {
            const int band = position_token(s) - vocab::POS_BASE;
            band_count[band]++;
            band_shape[band] = s.type;
        }
        // Shape types appearing exactly once allow intensity queries.
        int type_count[3] = {0};
        int type_intensity[3] = {0};
        for (const auto& s : scene.shapes) {
            type_count[s.type]++;
            type_intensity[s.type] = s.intensity;
        }

        bool built = false;
        if (family == 1) {
            if (rng.uniform() < 0.3) {
                std::vector<int> empty_bands;
                for (int b = 0; b < 9; ++b)
                    if (band_count[b] == 0) empty_bands.push_back(b);
                if (!empty_bands.empty()) {
                    const int band = empty_bands[static_cast<size_t>(
                        rng.uniform_int(0, static_cast<int>(empty_bands.size()) - 1))];
                    prompt = {vocab::BOS, vocab::WHAT_AT_Q, vocab::POS_BASE + band, vocab::SEP};
                    response = {vocab::NONE_A, vocab::EOS};
                    built = true;
                }
            }
            if (!built) {
                std::vector<int> single_bands;
                for (int b = 0; b < 9; ++b)
                    if (band_count[b] == 1) single_bands.push_back(b);
                if (!single_bands.empty()) {
                    const int band = single_bands[static_cast<size_t>(
                        rng.uniform_int(0, static_cast<int>(single_bands.size()) - 1))];
                    prompt = {vocab::BOS, vocab::WHAT_AT_Q, vocab::POS_BASE + band, vocab::SEP};
                    response = {vocab::SHAPE_BASE + band_shape[band], vocab::EOS};
                    built = true;
                }
            }
        } else if (family == 2) {
            std::vector<int> unique_types;
            for (int t = 0; t < 3; ++t)
                if (type_count[t] == 1) unique_types.push_back(t);
            if (!unique_types.empty()) {
                const int type = unique_types[static_cast<size_t>(
                    rng.uniform_int(0, static_cast<int>(unique_types.size()) - 1))];
                prompt = {vocab::BOS, vocab::INTENSITY_Q, vocab::SHAPE_BASE + type, vocab::SEP};
                response = {vocab::INTENSITY_BASE + type_intensity[type], vocab::EOS};
                built = true;
            }
        }
        if (!built) {
            prompt = {vocab::BOS, vocab::COUNT_Q, vocab::SEP};
            response = {vocab::COUNT_BASE + static_cast<int>(scene.shapes.size()) - 1, vocab::EOS};
        }
        out.push_back(finish_sample(SampleKind::Instruction, std::move(img), std::move(prompt),
                                    std::move(response)));
    }
    return out;
}

std::vector<Sample> gen_grounding_pairs(uint64_t seed, int n, int image_size) {
    if (n <= 0) throw ValueError("gen_grounding_pairs: n must be positive");
    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng(mix_seed(seed ^ 0x960Du, static_cast<uint64_t>(i)));
        const Scene scene = gen_scene(rng);
        GridImage img = render_scene(scene, image_size);
        if (rng.uniform() < 0.7) {
            // Single target, named by its unique (shape, intensity) pair.
            const auto& s = scene.shapes[static_cast<size_t>(
                rng.uniform_int(0, static_cast<int>(scene.shapes.size()) - 1))];
            const Box box = shape_box(s, image_size);
            std::vector<int> response = encode_box_tokens(box);
            response.push_back(vocab::EOS);
            out.push_back(finish_sample(SampleKind::Grounding, std::move(img),
                                        {vocab::BOS, vocab::LOCATE_Q, vocab::SHAPE_BASE + s.type,
                                         vocab::INTENSITY_BASE + s.intensity, vocab::SEP},
                                        std::move(response), {box}));
        } else {
            // Locate-all: every box in canonical order.
            std::vector<int> response;
            std::vector<Box> boxes;
            for (const auto& s : scene.shapes) {
                const Box box = shape_box(s, image_size);
                const auto toks = encode_box_tokens(box);
                response.insert(response.end(), toks.begin(), toks.end());
                boxes.push_back(box);
            }
            response.push_back(vocab::EOS);
            out.push_back(finish_sample(SampleKind::Grounding, std::move(img),
                                        {vocab::BOS, vocab::LOCATE_ALL_Q, vocab::SEP},
                                        std::move(response), std::move(boxes)));
        }
    }
    return out;
}

std::vector<Sample> split_train(const std::vector<Sample>& all) {
    std::vector<Sample> out;
    for (size_t i = 0; i < all.size(); i += 2) out.push_back(all[i]);
    return out;
}

std::vector<Sample> split_heldout(const std::vector<Sample>& all) {
    std::vector<Sample> out;
    for (size_t i = 1; i < all.size(); i += 2) out.push_back(all[i]);
    return out;
}

std::string image_to_base64(const GridImage& img) {
    return base64_encode(reinterpret_cast<const uint8_t*>(img.pixels.data()),
                         img.pixels.size() * sizeof(float));
}

GridImage image_from_base64(const std::string& b64, int width, int height) {
    GridImage img;
    img.width = width;
    img.height = height;
    const std::vector<uint8_t> bytes = base64_decode(b64);
    if (bytes.size() != static_cast<size_t>(width) * height * sizeof(float))
        throw FormatError("image payload size does not match width*height");
    img.pixels.resize(static_cast<size_t>(width) * height);
    std::memcpy(img.pixels.data(), bytes.data(), bytes.size());
    return img;
}

void write_samples_jsonl(const std::string& path, const std::vector<Sample>& samples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    for (const auto& s : samples) {
        nlohmann::ordered_json j;
        j["kind"] = sample_kind_name(s.kind);
        if (s.image) {
            j["image"] = nlohmann::ordered_json{{"base64", image_to_base64(*s.image)},
                                                {"width", s.image->width},
                                                {"height", s.image->height}};
        } else {
            j["image"] = nullptr;
        }
        j["prompt_ids"] = s.prompt_ids;
        j["response_ids"] = s.response_ids;
        auto boxes = nlohmann::ordered_json::array();
        for (const auto& b : s.boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
        j["boxes"] = boxes;
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("write failed for '" + path + "'");
}

std::vector<Sample> read_samples_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::vector<Sample> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        Sample s;
        s.kind = sample_kind_from_name(j.at("kind").get<std::string>());
        if (!j.at("image").is_null()) {
            const auto& ji = j.at("image");
            s.image = image_from_base64(ji.at("base64").get<std::string>(), ji.at("width").get<int>(),
                                        ji.at("height").get<int>());
        }
        j.at("prompt_ids").get_to(s.prompt_ids);
        j.at("response_ids").get_to(s.response_ids);
        for (const auto& jb : j.at("boxes"))
            s.boxes.push_back(Box{jb.at(0).get<float>(), jb.at(1).get<float>(), jb.at(2).get<float>(),
                                  jb.at(3).get<float>()});
        s.loss_mask = make_loss_mask(s.prompt_ids.size(), s.response_ids.size());
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace innerlm
