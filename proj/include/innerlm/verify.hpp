#pragma once

#include <string>
#include <vector>

#include "innerlm/checkpoint.hpp"
#include "innerlm/data.hpp"
#include "innerlm/model.hpp"

namespace innerlm {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct VerifyOptions {
    int identity_inputs = 50;
    int grad_coords = 100;
    int decode_tokens = 64;
    bool run_grad_checks = true;
    bool check_references = true;  // freeze hash, text loss bits, greedy outputs
};

// Deterministic random test inputs.
GridImage random_test_image(uint64_t seed, int size);
std::vector<int> random_test_tokens(uint64_t seed, int len, int vocab_size = vocab::SIZE);

// Variants A/B at zero gates must match the gate-free path.
CheckResult check_zero_gate_identity(Model<float>& model, int n_inputs, double tol);

// Variant C at init with one insertion at depth k must equal applying layer k
// twice.
CheckResult check_copy_init_identity(Model<float>& model, int n_inputs, double tol);

// Insertion layer parameter count equals the backbone per-layer count, and
// model counts match the closed-form formulas.
CheckResult check_parameter_parity(Model<float>& model);

// Greedy decoding with caches against full recompute, both workflows, all
// three variants plus the loaded stack.
CheckResult check_cache_equivalence(Model<float>& model, int decode_tokens, double tol);

// Finite-difference gradient verification per stage configuration, in 64-bit,
// plus the frozen-tensor and gradient-partition contracts.
std::vector<CheckResult> check_stage_gradients(Model<float>& model, int coords_per_stage);

// Reference comparisons embedded in the checkpoint provenance.
CheckResult check_freeze_hash(Model<float>& model, const Provenance& prov);
CheckResult check_text_reference(Model<float>& model, const Provenance& prov);

std::vector<CheckResult> verify_model(Model<float>& model, const Provenance& prov,
                                      const VerifyOptions& opt);

}  // namespace innerlm
