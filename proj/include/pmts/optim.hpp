#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "pmts/tensor.hpp"

namespace pmts {

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    double eps = 1e-8;
    double lr_gamma = 0.99; // exponential decay per epoch
    std::size_t epochs = 300;
    std::size_t batch_size = 8; // maximum; the final partial batch is kept
    std::uint64_t seed = 0;

    void validate() const {
        if (lr < 0.0) throw NumericError("train config: learning rate must be >= 0");
        if (!(lr_gamma > 0.0 && lr_gamma <= 1.0)) throw NumericError("train config: gamma must be in (0, 1]");
        if (batch_size == 0) throw NumericError("train config: batch size must be >= 1");
    }
};

inline double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
    return cfg.lr * std::pow(cfg.lr_gamma, static_cast<double>(epoch));
}

// AdamW with decoupled weight decay: p <- p - lr*wd*p applied separately from
// the bias-corrected adaptive update. The meta-variable u and the regressor
// bias are excluded from decay.
class AdamW {
public:
    AdamW(std::vector<std::pair<std::string, Tensor>> params, const TrainConfig& cfg)
        : cfg_(cfg) {
        cfg_.validate();
        for (auto& [name, t] : params) {
            Slot s;
            s.name = name;
            s.param = t;
            s.m.assign(t.numel(), 0.0);
            s.v.assign(t.numel(), 0.0);
            s.decay = name != "peft.u" && name != "regressor.bias";
            slots_.push_back(std::move(s));
        }
    }

    std::size_t step_count() const { return step_; }

    void zero_grad() {
        for (auto& s : slots_) s.param.zero_grad();
    }

    // One AdamW step at the given learning rate; gradients must be populated.
    void step(double lr) {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (auto& s : slots_) {
            if (!s.param.has_grad()) s.param.ensure_grad();
            const auto& g = s.param.grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (!std::isfinite(g[i])) {
                    throw NumericError("adamw: non-finite gradient in tensor '" + s.name + "'");
                }
            }
            auto& p = s.param.values();
            if (s.decay && cfg_.weight_decay != 0.0) {
                const double shrink = lr * cfg_.weight_decay;
                for (double& w : p) w -= shrink * w;
            }
            for (std::size_t i = 0; i < p.size(); ++i) {
                s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
                s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                p[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

private:
    struct Slot {
        std::string name;
        Tensor param;
        std::vector<double> m, v;
        bool decay = true;
    };
    TrainConfig cfg_;
    std::vector<Slot> slots_;
    std::size_t step_ = 0;
};

} // namespace pmts
