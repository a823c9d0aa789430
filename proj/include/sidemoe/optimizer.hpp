#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sidemoe/tensor.hpp"

namespace sidemoe {

// Named view into a trainable tensor owned elsewhere.
struct ParamRef {
    std::string name;
    Tensor* tensor = nullptr;
};

// Adaptive first/second-moment optimizer with decoupled weight decay.
struct AdamWConfig {
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }

    void step(std::span<const ParamRef> params, std::span<const Tensor> grads) {
        if (params.size() != grads.size())
            throw DimensionError("AdamW::step: params/grads length mismatch");
        if (first_.empty()) {
            first_.resize(params.size());
            second_.resize(params.size());
            for (std::size_t p = 0; p < params.size(); ++p) {
                first_[p] = Tensor(params[p].tensor->shape);
                second_[p] = Tensor(params[p].tensor->shape);
            }
        }
        ++steps_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, steps_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, steps_);
        for (std::size_t p = 0; p < params.size(); ++p) {
            Tensor& w = *params[p].tensor;
            const Tensor& g = grads[p];
            require_same_shape(w, g, "AdamW::step");
            for (std::size_t i = 0; i < w.size(); ++i) {
                double& m = first_[p].data[i];
                double& v = second_[p].data[i];
                m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g.data[i];
                v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.data[i] * g.data[i];
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                w.data[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                        cfg_.weight_decay * w.data[i]);
            }
        }
    }

private:
    AdamWConfig cfg_;
    long steps_ = 0;
    std::vector<Tensor> first_;
    std::vector<Tensor> second_;
};

} // namespace sidemoe
