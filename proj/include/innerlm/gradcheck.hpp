#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "innerlm/model.hpp"
#include "innerlm/tensor.hpp"

namespace innerlm {

struct ParamCoordinate {
    std::string name;
    Tensor<double>* tensor = nullptr;
    int64_t index = 0;
};

struct GradCheckReport {
    struct Entry {
        std::string name;
        int64_t index = 0;
        double analytic = 0.0;
        double numeric = 0.0;
        double rel_err = 0.0;
    };
    std::vector<Entry> entries;
    double max_rel_err = 0.0;

    bool pass(double tol) const { return max_rel_err < tol; }
};

// Central finite differences against reverse-mode gradients, in 64-bit only.
// The loss builder is re-evaluated at perturbed coordinates with no tape, so
// the numeric side never touches the reverse-mode path it is checking.
inline GradCheckReport check_gradients(const std::function<Tensor<double>(Tape<double>*)>& build_loss,
                                       std::vector<ParamCoordinate> coords, double epsilon) {
    if (epsilon < 1e-7 || epsilon > 1e-3)
        throw ValueError("check_gradients: epsilon " + std::to_string(epsilon) +
                         " outside [1e-7, 1e-3]");
    for (const auto& c : coords) {
        if (c.tensor == nullptr || c.index < 0 || c.index >= c.tensor->numel())
            throw ValueError("check_gradients: bad coordinate for '" + c.name + "'");
        if (!c.tensor->trainable())
            throw ValueError("check_gradients: coordinate of frozen parameter '" + c.name +
                             "' requested; frozen tensors never receive gradient");
    }

    for (const auto& c : coords) c.tensor->zero_grad();

    Tape<double> tape;
    Tensor<double> loss = build_loss(&tape);
    if (!std::isfinite(loss.item())) throw TrainingOverflowError("check_gradients: non-finite loss");
    tape.backward(loss);

    GradCheckReport report;
    for (const auto& c : coords) {
        const double analytic = c.tensor->has_grad() ? c.tensor->grad()[static_cast<size_t>(c.index)] : 0.0;
        double& slot = c.tensor->values()[static_cast<size_t>(c.index)];
        const double saved = slot;
        slot = saved + epsilon;
        const double up = build_loss(nullptr).item();
        slot = saved - epsilon;
        const double down = build_loss(nullptr).item();
        slot = saved;
        if (!std::isfinite(up) || !std::isfinite(down))
            throw TrainingOverflowError("check_gradients: non-finite loss at perturbed point");
        const double numeric = (up - down) / (2.0 * epsilon);
        const double rel =
            std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
        report.entries.push_back({c.name, c.index, analytic, numeric, rel});
        report.max_rel_err = std::max(report.max_rel_err, rel);
    }
    return report;
}

// Uniformly samples coordinates across the model's trainable parameters.
inline std::vector<ParamCoordinate> sample_trainable_coords(Model<double>& model, int count, Rng& rng) {
    std::vector<std::pair<std::string, Tensor<double>*>> params;
    visit_params(model, [&](const std::string& name, Tensor<double>& t) {
        if (t.trainable()) params.emplace_back(name, &t);
    });
    if (params.empty()) throw ValueError("sample_trainable_coords: no trainable parameters");
    std::vector<ParamCoordinate> coords;
    coords.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        const auto& [name, t] = params[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(params.size()) - 1))];
        coords.push_back({name, t, static_cast<int64_t>(rng.uniform_int(0, static_cast<int>(t->numel()) - 1))});
    }
    return coords;
}

}  // namespace innerlm
