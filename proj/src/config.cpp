#include "innerlm/config.hpp"

#include <fstream>

namespace innerlm {

void to_json(nlohmann::json& j, const DataConfig& c) {
    j = nlohmann::json{{"seed", c.seed},
                       {"n_text", c.n_text},
                       {"n_caption", c.n_caption},
                       {"n_instruction", c.n_instruction},
                       {"n_grounding", c.n_grounding},
                       {"text_len", c.text_len},
                       {"image_size", c.image_size}};
}

void from_json(const nlohmann::json& j, DataConfig& c) {
    j.at("seed").get_to(c.seed);
    j.at("n_text").get_to(c.n_text);
    j.at("n_caption").get_to(c.n_caption);
    j.at("n_instruction").get_to(c.n_instruction);
    j.at("n_grounding").get_to(c.n_grounding);
    j.at("text_len").get_to(c.text_len);
    j.at("image_size").get_to(c.image_size);
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
    j = nlohmann::json{{"steps", c.steps},
                       {"learning_rate", c.learning_rate},
                       {"batch_size", c.batch_size},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
    j.at("steps").get_to(c.steps);
    j.at("learning_rate").get_to(c.learning_rate);
    j.at("batch_size").get_to(c.batch_size);
    j.at("seed").get_to(c.seed);
}

void to_json(nlohmann::json& j, const EvalConfig& c) {
    j = nlohmann::json{{"samples", c.samples}, {"greedy_tokens", c.greedy_tokens}};
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
    j.at("samples").get_to(c.samples);
    j.at("greedy_tokens").get_to(c.greedy_tokens);
}

nlohmann::json run_config_to_json(const RunConfig& c) {
    return nlohmann::json{{"backbone", c.backbone},   {"adaptor", c.adaptor},
                          {"data", c.data},           {"pretrain", c.pretrain},
                          {"stage1", c.stage1},       {"stage2", c.stage2},
                          {"instruction", c.instruction}, {"grounding", c.grounding},
                          {"eval", c.eval}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    j.at("backbone").get_to(c.backbone);
    j.at("adaptor").get_to(c.adaptor);
    j.at("data").get_to(c.data);
    j.at("pretrain").get_to(c.pretrain);
    j.at("stage1").get_to(c.stage1);
    j.at("stage2").get_to(c.stage2);
    j.at("instruction").get_to(c.instruction);
    j.at("grounding").get_to(c.grounding);
    j.at("eval").get_to(c.eval);
    return c;
}

RunConfig default_run_config() { return RunConfig{}; }

void validate_config_json(const nlohmann::json& schema, const nlohmann::json& user,
                          const std::string& path_prefix) {
    if (!user.is_object()) {
        if (schema.is_null() || user.is_null()) return;
        // Leaf: require compatible JSON type; integers may fill float slots.
        const bool both_num = schema.is_number() && user.is_number();
        if (!both_num && schema.type() != user.type())
            throw FormatError("config: '" + path_prefix + "' has wrong type");
        return;
    }
    if (!schema.is_object()) throw FormatError("config: '" + path_prefix + "' should not be an object");
    for (auto it = user.begin(); it != user.end(); ++it) {
        const std::string path = path_prefix.empty() ? it.key() : path_prefix + "." + it.key();
        if (!schema.contains(it.key())) throw FormatError("config: unknown key '" + path + "'");
        const auto& sv = schema.at(it.key());
        if (it.value().is_object()) {
            validate_config_json(sv, it.value(), path);
        } else if (!it.value().is_null() && !sv.is_null() && sv.type() != it.value().type()) {
            const bool both_num = sv.is_number() && it.value().is_number();
            const bool array_ok = sv.is_array() && it.value().is_array();
            if (!both_num && !array_ok)
                throw FormatError("config: '" + path + "' has wrong type");
        }
    }
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open '" + path + "'");
    nlohmann::json user;
    try {
        user = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("config: " + path + ": " + e.what());
    }
    nlohmann::json merged = run_config_to_json(default_run_config());
    validate_config_json(merged, user, "");
    merged.merge_patch(user);
    return run_config_from_json(merged);
}

}  // namespace innerlm
