#pragma once

#include <cstdint>
#include <vector>

#include "rlvr/tensor.hpp"

namespace rlvr {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adaptive-moment optimizer. Moment buffers are allocated lazily on the first
// step and must match parameter shapes thereafter; the step counter advances
// by exactly one per update.
class AdamState {
public:
    explicit AdamState(AdamConfig cfg = {});

    // Applies one update using each parameter's accumulated .grad, then the
    // caller typically zeroes grads. Deterministic given inputs.
    void step(const std::vector<TensorPtr>& params);

    int64_t step_count() const { return step_; }
    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    int64_t step_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace rlvr
