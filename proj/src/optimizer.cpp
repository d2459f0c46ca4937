#include "rlvr/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace rlvr {

AdamState::AdamState(AdamConfig cfg) : cfg_(cfg) {
    if (cfg_.lr <= 0.0) throw std::invalid_argument("adam: learning rate must be positive");
    if (cfg_.beta1 <= 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 <= 0.0 || cfg_.beta2 >= 1.0)
        throw std::invalid_argument("adam: decay rates must lie in (0,1)");
    if (cfg_.eps <= 0.0) throw std::invalid_argument("adam: epsilon must be positive");
}

void AdamState::step(const std::vector<TensorPtr>& params) {
    if (m_.empty()) {
        for (const auto& p : params) {
            m_.emplace_back(p->v.size(), 0.0);
            v_.emplace_back(p->v.size(), 0.0);
        }
    }
    if (params.size() != m_.size()) throw std::invalid_argument("adam: parameter count changed");
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = *params[pi];
        if (p.grad.size() != p.v.size()) throw std::invalid_argument("adam: gradient shape mismatch");
        if (m_[pi].size() != p.v.size()) throw std::invalid_argument("adam: moment buffer shape mismatch");
        for (size_t i = 0; i < p.v.size(); ++i) {
            const double g = p.grad[i];
            m_[pi][i] = cfg_.beta1 * m_[pi][i] + (1.0 - cfg_.beta1) * g;
            v_[pi][i] = cfg_.beta2 * v_[pi][i] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m_[pi][i] / bc1;
            const double vhat = v_[pi][i] / bc2;
            p.v[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

}  // namespace rlvr
