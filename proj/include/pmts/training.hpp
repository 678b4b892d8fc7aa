#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "pmts/dataio.hpp"
#include "pmts/metrics.hpp"
#include "pmts/optim.hpp"
#include "pmts/peft.hpp"

namespace pmts {

// ---------------------------------------------------------------------------
// Fine-tuning loop with stability instrumentation
// ---------------------------------------------------------------------------

struct EpochTrace {
    std::size_t epoch = 0;
    double loss_mean = 0.0;    // sample-weighted mean training loss
    double sigma_z_norm = 0.0; // std over probe samples of ||feature||_2; NaN without a probe set
    double lr = 0.0;
};

struct StabilityTrace {
    std::vector<EpochTrace> rows;
    std::uint64_t seed = 0;
    std::string arm;
};

namespace detail {

inline double probe_sigma(PeftModel& model, const std::vector<WindowSample>& probe) {
    if (probe.empty()) return std::nan("");
    std::vector<double> norms;
    norms.reserve(probe.size());
    for (const auto& s : probe) {
        Tensor feat = model_features(model, s.x);
        double acc = 0.0;
        for (std::size_t i = 0; i < feat.numel(); ++i) acc += feat[i] * feat[i];
        norms.push_back(std::sqrt(acc));
    }
    if (norms.size() < 2) return 0.0;
    double mean = 0.0;
    for (double v : norms) mean += v;
    mean /= static_cast<double>(norms.size());
    double var = 0.0;
    for (double v : norms) var += (v - mean) * (v - mean);
    return std::sqrt(var / static_cast<double>(norms.size() - 1));
}

} // namespace detail

// Frozen-backbone fine-tuning (or Full / Linear regimes via `arm`). The data
// order is a function of (cfg.seed, epoch) only, so arms sharing a seed see
// identical shuffles. The probe set never contributes gradients.
inline StabilityTrace finetune(PeftModel& model, const std::vector<WindowSample>& train,
                               const TrainConfig& cfg, TuneArm arm = TuneArm::kPeft,
                               const std::vector<WindowSample>* probe = nullptr,
                               const std::string& arm_name = "peft") {
    if (train.empty()) throw DataError("finetune: empty training set");
    cfg.validate();
    set_trainable_for_arm(model, arm);
    AdamW opt(trainable_tensors(model, arm), cfg);
    Rng shuffle_rng = Rng(cfg.seed).split(0xDA7A0u);

    StabilityTrace trace;
    trace.seed = cfg.seed;
    trace.arm = arm_name;
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_schedule(epoch, cfg);
        // Seeded Fisher-Yates shuffle each epoch.
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = shuffle_rng.index(i);
            std::swap(order[i - 1], order[j]);
        }
        double loss_acc = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t b = std::min(cfg.batch_size, order.size() - start);
            opt.zero_grad();
            GradTape tape;
            std::vector<Tensor> preds;
            std::vector<double> targets(b);
            preds.reserve(b);
            for (std::size_t i = 0; i < b; ++i) {
                const WindowSample& s = train[order[start + i]];
                preds.push_back(model_forward(model, s.x, /*training=*/true, &tape));
                targets[i] = s.y;
            }
            Tensor loss = mse_loss(vconcat(preds, &tape), Tensor({b}, std::move(targets)), &tape);
            tape.backward(loss);
            opt.step(lr);
            loss_acc += loss.item() * static_cast<double>(b);
        }
        EpochTrace row;
        row.epoch = epoch;
        row.loss_mean = loss_acc / static_cast<double>(train.size());
        row.lr = lr;
        row.sigma_z_norm = probe ? detail::probe_sigma(model, *probe) : std::nan("");
        trace.rows.push_back(row);
    }
    return trace;
}

inline void write_trace_csv(const std::string& path, const std::vector<StabilityTrace>& traces) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw IoError("trace: cannot open '" + path + "' for writing");
    std::fprintf(f, "epoch,loss_mean,sigma_z_norm,lr,seed,arm\n");
    for (const auto& tr : traces) {
        for (const auto& row : tr.rows) {
            std::fprintf(f, "%zu,%.17g,%.17g,%.17g,%llu,%s\n", row.epoch, row.loss_mean,
                         row.sigma_z_norm, row.lr, static_cast<unsigned long long>(tr.seed),
                         tr.arm.c_str());
        }
    }
    std::fclose(f);
}

// ---------------------------------------------------------------------------
// Stability experiment (arms x regressor init x seeds)
// ---------------------------------------------------------------------------

struct StabilityArmSpec {
    std::string name; // e.g. "peft-mutS", "pretrained-full", "random-init"
    TuneArm arm = TuneArm::kPeft;
    // Builds a fresh model for (model seed, regressor init).
    std::function<PeftModel(std::uint64_t, RegressorInit)> make;
};

struct StabilityRun {
    std::string arm;
    std::string reg_init; // "zero" | "kaiming"
    std::uint64_t seed = 0;
    StabilityTrace trace;
};

namespace detail {

inline void parallel_runs(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min<std::size_t>(std::thread::hardware_concurrency(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

} // namespace detail

// Runs every arm with both regressor inits over `n_seeds` seeds; the probe
// set is fixed and shared, and data order depends only on the seed, so arms
// are directly comparable.
inline std::vector<StabilityRun> stability_experiment(const std::vector<StabilityArmSpec>& arms,
                                                      const std::vector<WindowSample>& train,
                                                      const std::vector<WindowSample>& probe,
                                                      const TrainConfig& cfg, std::size_t n_seeds) {
    if (n_seeds < 2) throw DataError("stability: need at least 2 seeds");
    struct Job {
        const StabilityArmSpec* arm;
        RegressorInit init;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (const auto& a : arms)
        for (RegressorInit init : {RegressorInit::kZero, RegressorInit::kKaimingNoBias})
            for (std::size_t s = 0; s < n_seeds; ++s) jobs.push_back({&a, init, cfg.seed + s});

    std::vector<StabilityRun> runs(jobs.size());
    detail::parallel_runs(jobs.size(), [&](std::size_t i) {
        const Job& j = jobs[i];
        PeftModel model = j.arm->make(j.seed, j.init);
        TrainConfig run_cfg = cfg;
        run_cfg.seed = j.seed;
        StabilityRun r;
        r.arm = j.arm->name;
        r.reg_init = j.init == RegressorInit::kZero ? "zero" : "kaiming";
        r.seed = j.seed;
        r.trace = finetune(model, train, run_cfg, j.arm->arm, &probe, j.arm->name + "/" + r.reg_init);
        runs[i] = std::move(r);
    });
    return runs;
}

// Cross-seed standard deviation of the training loss at one epoch.
inline double cross_seed_loss_std(const std::vector<StabilityRun>& runs, const std::string& arm,
                                  const std::string& reg_init, std::size_t epoch) {
    std::vector<double> losses;
    for (const auto& r : runs) {
        if (r.arm != arm || r.reg_init != reg_init) continue;
        if (epoch < r.trace.rows.size()) losses.push_back(r.trace.rows[epoch].loss_mean);
    }
    if (losses.size() < 2) throw DataError("stability: fewer than 2 runs for arm '" + arm + "'");
    double mean = 0.0;
    for (double v : losses) mean += v;
    mean /= static_cast<double>(losses.size());
    double var = 0.0;
    for (double v : losses) var += (v - mean) * (v - mean);
    return std::sqrt(var / static_cast<double>(losses.size() - 1));
}

// ---------------------------------------------------------------------------
// Gradient-variance law Monte Carlo
// ---------------------------------------------------------------------------

struct VarianceLawParams {
    double sigma_z = 1.0;
    double sigma_y = 1.0;
    double sigma_phi = 0.0; // 0 selects the zero-initialized regressor arm
    std::size_t dim = 16;   // d
    std::size_t batch = 8;  // B
    double eta = 0.01;
    std::size_t trials = 100000;
    std::uint64_t seed = 0;
    // coupled: simulate one literal L2 gradient step (phi shared across the
    // batch). Otherwise the independence-assumption product form is
    // simulated: E_i drawn independently of z with Var = sigma_Y^2 + d
    // sigma_z^2 sigma_phi^2.
    bool coupled = false;
};

struct VarianceLawResult {
    double measured = 0.0;          // Var(delta phi_j), averaged over j
    double predicted_random = 0.0;  // (eta^2/B) sigma_z^2 (sigma_Y^2 + d sigma_z^2 sigma_phi^2)
    double predicted_zero_b1 = 0.0; // (eta^2/B)   sigma_z^2 sigma_Y^2  (iid algebra)
    double predicted_zero_b2 = 0.0; // (eta^2/B^2) sigma_z^2 sigma_Y^2  (alternative exponent)
    std::size_t trials = 0;
};

inline VarianceLawResult variance_law_mc(const VarianceLawParams& p) {
    if (p.trials < 10000) {
        throw DataError("variance-law: need >= 10^4 trials for a 10% CI, got " + std::to_string(p.trials));
    }
    if (p.batch == 0) throw DataError("variance-law: batch must be >= 1");
    VarianceLawResult res;
    res.trials = p.trials;
    const double d = static_cast<double>(p.dim);
    const double b = static_cast<double>(p.batch);
    res.predicted_random =
        (p.eta * p.eta / b) * p.sigma_z * p.sigma_z *
        (p.sigma_y * p.sigma_y + d * p.sigma_z * p.sigma_z * p.sigma_phi * p.sigma_phi);
    res.predicted_zero_b1 = (p.eta * p.eta / b) * p.sigma_z * p.sigma_z * p.sigma_y * p.sigma_y;
    res.predicted_zero_b2 = res.predicted_zero_b1 / b;
    if (p.dim == 0) return res; // no coordinates: Var is 0 exactly

    Rng rng(p.seed);
    const double err_std = std::sqrt(p.sigma_y * p.sigma_y +
                                     d * p.sigma_z * p.sigma_z * p.sigma_phi * p.sigma_phi);
    std::vector<double> sum(p.dim, 0.0), sumsq(p.dim, 0.0);
    std::vector<double> z(p.batch * p.dim), phi(p.dim), err(p.batch), delta(p.dim);
    for (std::size_t trial = 0; trial < p.trials; ++trial) {
        for (double& v : z) v = rng.normal(0.0, p.sigma_z);
        if (p.coupled) {
            for (double& v : phi) v = p.sigma_phi > 0.0 ? rng.normal(0.0, p.sigma_phi) : 0.0;
            for (std::size_t i = 0; i < p.batch; ++i) {
                double pred = 0.0;
                for (std::size_t j = 0; j < p.dim; ++j) pred += z[i * p.dim + j] * phi[j];
                err[i] = rng.normal(0.0, p.sigma_y) - pred;
            }
        } else {
            for (double& v : err) v = rng.normal(0.0, err_std);
        }
        for (std::size_t j = 0; j < p.dim; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < p.batch; ++i) acc += z[i * p.dim + j] * err[i];
            delta[j] = -(p.eta / b) * acc;
        }
        for (std::size_t j = 0; j < p.dim; ++j) {
            sum[j] += delta[j];
            sumsq[j] += delta[j] * delta[j];
        }
    }
    double var_acc = 0.0;
    for (std::size_t j = 0; j < p.dim; ++j) {
        const double mean = sum[j] / static_cast<double>(p.trials);
        var_acc += sumsq[j] / static_cast<double>(p.trials) - mean * mean;
    }
    res.measured = var_acc / d;
    return res;
}

struct VarianceGridRow {
    double sigma_z = 0.0;
    double sigma_phi = 0.0;
    double measured = 0.0;
    double predicted_random = 0.0;
    double predicted_zero = 0.0;
    std::size_t trials = 0;
};

inline void write_variance_csv(const std::string& path, const std::vector<VarianceGridRow>& rows) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw IoError("variance-law: cannot open '" + path + "' for writing");
    std::fprintf(f, "sigma_z,sigma_phi,measured,predicted_random,predicted_zero,trials\n");
    for (const auto& r : rows) {
        std::fprintf(f, "%.17g,%.17g,%.17g,%.17g,%.17g,%zu\n", r.sigma_z, r.sigma_phi, r.measured,
                     r.predicted_random, r.predicted_zero, r.trials);
    }
    std::fclose(f);
}

// ---------------------------------------------------------------------------
// Proxy self-supervised pre-training (masked reconstruction)
// ---------------------------------------------------------------------------

struct PretrainConfig {
    std::size_t epochs = 5;
    double mask_ratio = 0.25; // contiguous span masked to zero
    std::size_t batch_size = 8;
    double lr = 1e-3;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
};

struct PretrainResult {
    std::vector<double> epoch_losses;
    double initial_loss = 0.0;
};

// Masked-reconstruction objective through the backbone plus a throwaway
// linear decoder; updates backbone weights and running stats in place.
inline PretrainResult pretrain_proxy(BackboneState& backbone, const std::vector<std::vector<double>>& pool,
                                     const PretrainConfig& cfg) {
    if (pool.empty()) throw DataError("pretrain: empty series pool");
    const std::size_t T = pool[0].size();
    for (const auto& s : pool)
        if (s.size() != T) throw DataError("pretrain: pool series have mixed lengths");
    if (!(cfg.mask_ratio >= 0.0 && cfg.mask_ratio < 1.0)) {
        throw DataError("pretrain: mask ratio must lie in [0, 1)");
    }
    unfreeze(backbone);
    Rng rng(cfg.seed);
    Rng mask_rng = rng.split(1), shuffle_rng = rng.split(2), dec_rng = rng.split(3);
    const std::size_t feat = backbone.spec.feature_dim();
    Tensor decoder = Tensor::kaiming_uniform({feat, T}, feat, dec_rng);
    decoder.set_requires_grad(true);

    TrainConfig opt_cfg;
    opt_cfg.lr = cfg.lr;
    opt_cfg.weight_decay = cfg.weight_decay;
    opt_cfg.seed = cfg.seed;
    std::vector<std::pair<std::string, Tensor>> params;
    auto weights = backbone.weight_tensors();
    for (std::size_t i = 0; i < weights.size(); ++i) params.emplace_back("backbone.w" + std::to_string(i), weights[i]);
    params.emplace_back("decoder.w", decoder);
    AdamW opt(params, opt_cfg);

    const std::size_t mask_len = static_cast<std::size_t>(std::llround(cfg.mask_ratio * static_cast<double>(T)));
    std::vector<std::size_t> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    PretrainResult result;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.index(i)]);
        double loss_acc = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t b = std::min(cfg.batch_size, order.size() - start);
            opt.zero_grad();
            GradTape tape;
            std::vector<double> masked(b * T), target(b * T), weightsv(b * T, 1.0);
            for (std::size_t i = 0; i < b; ++i) {
                const auto& s = pool[order[start + i]];
                std::copy(s.begin(), s.end(), target.begin() + i * T);
                std::copy(s.begin(), s.end(), masked.begin() + i * T);
                if (mask_len > 0) {
                    const std::size_t at = mask_rng.index(T - mask_len + 1);
                    std::fill(weightsv.begin() + i * T, weightsv.begin() + (i + 1) * T, 0.0);
                    for (std::size_t t = at; t < at + mask_len; ++t) {
                        masked[i * T + t] = 0.0;
                        weightsv[i * T + t] = 1.0;
                    }
                }
            }
            Tensor x({b, 1, T}, std::move(masked));
            LayerTaps taps = backbone_forward(backbone, x, /*training=*/true, &tape);
            Tensor pooled = global_avg_pool_time(taps.back(), &tape); // [b x feat]
            Tensor recon = matmul(pooled, decoder, &tape);            // [b x T]
            Tensor loss = weighted_mse(recon, Tensor({b, T}, std::move(target)), weightsv, &tape);
            if (epoch == 0 && start == 0) result.initial_loss = loss.item();
            tape.backward(loss);
            opt.step(cfg.lr);
            loss_acc += loss.item() * static_cast<double>(b);
            seen += b;
        }
        result.epoch_losses.push_back(loss_acc / static_cast<double>(seen));
    }
    return result;
}

} // namespace pmts
