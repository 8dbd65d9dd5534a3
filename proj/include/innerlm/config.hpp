#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "innerlm/adaptor.hpp"
#include "innerlm/backbone.hpp"
#include "innerlm/trainer.hpp"

namespace innerlm {

struct DataConfig {
    uint64_t seed = 20240903;
    int n_text = 4000;
    int n_caption = 4000;
    int n_instruction = 4000;
    int n_grounding = 4000;
    int text_len = 32;
    int image_size = 16;
};

void to_json(nlohmann::json& j, const DataConfig& c);
void from_json(const nlohmann::json& j, DataConfig& c);

struct PretrainConfig {
    int steps = 2000;
    double learning_rate = 1e-3;
    int batch_size = 16;
    uint64_t seed = 101;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

struct EvalConfig {
    int samples = 128;
    int greedy_tokens = 32;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

// The single structured config every subcommand reads. Defaults reproduce the
// reported runs; a user file is merged over the defaults and validated against
// the embedded schema (unknown keys and type mismatches are rejected).
struct RunConfig {
    BackboneConfig backbone;
    AdaptorConfig adaptor;
    DataConfig data;
    PretrainConfig pretrain;
    TrainStageConfig stage1 = default_stage_config(Stage::Stage1PT);
    TrainStageConfig stage2 = default_stage_config(Stage::Stage2PT);
    TrainStageConfig instruction = default_stage_config(Stage::InstructionFT);
    TrainStageConfig grounding = default_stage_config(Stage::GroundingFT);
    EvalConfig eval;
};

nlohmann::json run_config_to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);

RunConfig default_run_config();

// Loads a config file, merging over defaults with schema validation.
RunConfig load_run_config(const std::string& path);

// Validates `user` against the structure of `schema` (the defaults document):
// every key must exist in the schema with a compatible JSON type.
void validate_config_json(const nlohmann::json& schema, const nlohmann::json& user,
                          const std::string& path_prefix);

}  // namespace innerlm
