#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "innerlm/config.hpp"
#include "innerlm/model.hpp"

namespace innerlm {

// Provenance carried in the checkpoint header. The reference values written at
// pretraining time make the NLP-preservation check self-contained: the hash,
// the held-out text loss (exact float bits), and fixed greedy continuations.
struct Provenance {
    std::string stage = "init";
    uint64_t seed = 0;
    int64_t step = 0;
    DataConfig data;
    std::string backbone_hash;
    std::optional<uint32_t> ref_text_loss_bits;
    std::vector<std::vector<int>> ref_greedy;
};

void to_json(nlohmann::json& j, const Provenance& p);
void from_json(const nlohmann::json& j, Provenance& p);

struct Checkpoint {
    Model<float> model;
    Provenance provenance;
};

// Binary layout: magic "ILMCKPT1", u32 version, u64 header length + canonical
// header JSON, u32 tensor count, tensors (u16 name length, name, u8 dtype,
// u8 rank, u32 dims, raw little-endian f32 data), then the 32-byte SHA-256 of
// the header bytes. Loading verifies the trailer and full tensor coverage.
void save_checkpoint(Model<float>& model, const Provenance& prov, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace innerlm
