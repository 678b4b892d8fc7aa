#pragma once

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "pmts/backbone.hpp"
#include "pmts/checkpoint.hpp"
#include "pmts/ops.hpp"
#include "pmts/rng.hpp"
#include "pmts/tensor.hpp"

// PEFT-MuTS adapter stack: per-layer low-rank tuning of a frozen univariate
// backbone (variable path), meta-variable low-rank fusion (gate + mean pool),
// and a zero-initialized regression head. The meta stream is the last row of
// the (N+1)-row tensor.
namespace pmts {

struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

struct AlignSpec {
    std::size_t out_channels = 0;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    bool operator==(const AlignSpec&) const = default;
};

struct PeftLayerSpec {
    std::size_t layer_index = 0; // k, 0-based over backbone blocks
    std::size_t d = 0;           // input channels d_k; r may exceed d
    std::size_t r = 0;           // projected dimension r_k
    std::optional<AlignSpec> align;
    bool operator==(const PeftLayerSpec&) const = default;
};

// One adapter layer: A random-init, B zero-init (side path starts at exactly
// zero), W gate weights. The alignment conv is depthwise with a channel
// multiplier; a dense pointwise stage would put the trainable-parameter total
// an order of magnitude past the sub-1% budget.
struct PeftLayerState {
    PeftLayerSpec spec;
    Tensor A; // [d x r]
    Tensor B; // [r x d]
    Tensor W; // [r x r]
    std::optional<ConvLayer> align;
};

struct MetaVariable {
    Tensor u; // [1 x T], zero-initialized, learnable
};

enum class RegressorInit { kZero, kKaimingNoBias };

struct Regressor {
    Tensor weight; // [feature_dim x 1]
    Tensor bias;   // [1 x 1]; absent from the trainable set in kaiming mode
    bool has_bias = true;
    RegressorInit init = RegressorInit::kZero;
};

struct VariantFlags {
    bool pretrain = true;      // consumed by the caller when picking the backbone
    bool meta_variable = true; // off: features averaged over variables before the head
    bool zero_init = true;     // off: bias-free Kaiming-initialized head
};

enum class TuneArm { kPeft, kFull, kLinear };

struct PeftModel {
    BackboneState backbone;
    std::vector<PeftLayerState> layers; // empty for the Full / Linear baselines
    MetaVariable meta;
    Regressor regressor;
    bool use_meta = true;
    std::size_t num_vars = 0; // N
    std::size_t seq_len = 0;  // T
};

// Default projected-dimension schedule, larger ranks for shallow layers.
inline std::vector<std::size_t> default_rank_schedule() { return {128, 32, 32, 4, 4, 2, 2, 1}; }

// One adapter per backbone block; alignment conv exactly where the block
// changes channel count or time length.
inline std::vector<PeftLayerSpec> make_peft_specs(const BackboneSpec& backbone,
                                                  const std::vector<std::size_t>& ranks) {
    if (ranks.size() != backbone.blocks.size()) {
        throw ShapeError("peft: rank schedule has " + std::to_string(ranks.size()) + " entries for " +
                         std::to_string(backbone.blocks.size()) + " blocks");
    }
    std::vector<PeftLayerSpec> specs;
    for (std::size_t k = 0; k < backbone.blocks.size(); ++k) {
        const BlockSpec& b = backbone.blocks[k];
        PeftLayerSpec s;
        s.layer_index = k;
        s.d = b.in_channels;
        s.r = ranks[k];
        if (s.r == 0) throw ShapeError("peft: r_k must be >= 1 (layer " + std::to_string(k) + ")");
        if (b.needs_projection()) s.align = AlignSpec{b.out_channels, b.kernel, b.stride};
        specs.push_back(s);
    }
    return specs;
}

inline PeftLayerState make_peft_layer(const PeftLayerSpec& spec, Rng& rng) {
    PeftLayerState st;
    st.spec = spec;
    st.A = Tensor::kaiming_uniform({spec.d, spec.r}, spec.d, rng).set_requires_grad(true);
    st.B = Tensor::zeros({spec.r, spec.d}).set_requires_grad(true);
    st.W = Tensor::kaiming_uniform({spec.r, spec.r}, spec.r, rng).set_requires_grad(true);
    if (spec.align) {
        if (spec.align->out_channels % spec.d != 0) {
            throw ShapeError("peft: alignment conv out=" + std::to_string(spec.align->out_channels) +
                             " is not a multiple of d=" + std::to_string(spec.d));
        }
        st.align = ConvLayer::make(spec.d, spec.align->out_channels, spec.align->kernel,
                                   spec.align->stride, /*groups=*/spec.d, rng);
        st.align->w.set_requires_grad(true);
    }
    return st;
}

inline Regressor make_regressor(std::size_t feature_dim, RegressorInit init, Rng& rng) {
    Regressor reg;
    reg.init = init;
    if (init == RegressorInit::kZero) {
        reg.weight = Tensor::zeros({feature_dim, 1});
        reg.bias = Tensor::zeros({1, 1});
        reg.has_bias = true;
    } else {
        reg.weight = Tensor::kaiming_uniform({feature_dim, 1}, feature_dim, rng);
        reg.bias = Tensor::zeros({1, 1});
        reg.has_bias = false;
    }
    reg.weight.set_requires_grad(true);
    reg.bias.set_requires_grad(reg.has_bias);
    return reg;
}

inline PeftModel build_model(BackboneState backbone, const std::vector<PeftLayerSpec>& specs,
                             std::size_t num_vars, std::size_t seq_len, RegressorInit reg_init,
                             bool use_meta, Rng rng) {
    if (num_vars == 0) throw ContractError("peft: model requires N >= 1 data variables");
    PeftModel m;
    m.backbone = std::move(backbone);
    for (const auto& s : specs) m.layers.push_back(make_peft_layer(s, rng));
    m.meta.u = Tensor::zeros({1, seq_len});
    m.meta.u.set_requires_grad(true);
    m.regressor = make_regressor(m.backbone.spec.feature_dim(), reg_init, rng);
    m.use_meta = use_meta;
    m.num_vars = num_vars;
    m.seq_len = seq_len;
    return m;
}

// Ablation entry point (pre-train flag is resolved by the caller through the
// choice of backbone weights).
inline PeftModel build_variant(BackboneState backbone, const std::vector<PeftLayerSpec>& specs,
                               std::size_t num_vars, std::size_t seq_len, const VariantFlags& flags,
                               Rng rng) {
    return build_model(std::move(backbone), specs, num_vars, seq_len,
                       flags.zero_init ? RegressorInit::kZero : RegressorInit::kKaimingNoBias,
                       flags.meta_variable, rng);
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

// Variable path: z' = g_theta(z) + SiLU(Align(z A B)), applied to
// every row of z independently.
inline Tensor itn_forward(PeftModel& model, std::size_t k, const Tensor& z, bool training = false,
                          GradTape* tape = nullptr) {
    PeftLayerState& layer = model.layers.at(k);
    if (z.rank() != 3 || z.dim(1) != layer.spec.d) {
        throw ShapeError("itn: input " + shape_str(z.shape()) + " does not carry d_k=" +
                         std::to_string(layer.spec.d) + " channels");
    }
    Tensor g = block_forward(model.backbone, k, z, training, tape);
    Tensor side = channel_matmul(channel_matmul(z, layer.A, tape), layer.B, tape);
    if (layer.align) {
        side = conv1d(side, layer.align->w, layer.align->stride, layer.align->padding,
                      layer.align->groups, tape);
    }
    if (side.shape() != g.shape()) {
        throw ShapeError("itn: tuning path output " + shape_str(side.shape()) +
                         " does not align with backbone block output " + shape_str(g.shape()));
    }
    return add(g, silu(side, tape), tape);
}

// Meta path: v = {z_tilde, z} A over all rows; the gated mean pool
// feeds B and the alignment conv; data rows are left untouched.
inline Tensor fusion_forward(PeftModel& model, std::size_t k, const Tensor& z_all,
                             bool training = false, GradTape* tape = nullptr) {
    PeftLayerState& layer = model.layers.at(k);
    if (z_all.rank() != 3 || z_all.dim(0) < 2) {
        throw ContractError("fusion: meta row missing (need at least one data row plus the meta row)");
    }
    if (z_all.dim(1) != layer.spec.d) {
        throw ShapeError("fusion: input " + shape_str(z_all.shape()) + " does not carry d_k=" +
                         std::to_string(layer.spec.d) + " channels");
    }
    Tensor z_meta = rows(z_all, z_all.dim(0) - 1, 1, tape);
    Tensor g = block_forward(model.backbone, k, z_meta, training, tape);
    Tensor v = channel_matmul(z_all, layer.A, tape);
    Tensor gate = mul(sigmoid(channel_matmul(v, layer.W, tape), tape), v, tape);
    Tensor fused = channel_matmul(mean_pool_vars(gate, tape), layer.B, tape);
    if (layer.align) {
        fused = conv1d(fused, layer.align->w, layer.align->stride, layer.align->padding,
                       layer.align->groups, tape);
    }
    if (fused.shape() != g.shape()) {
        throw ShapeError("fusion: fused path output " + shape_str(fused.shape()) +
                         " does not align with backbone block output " + shape_str(g.shape()));
    }
    return add(g, silu(fused, tape), tape);
}

// Pooled representation entering the regressor (meta feature, or the mean
// over data-variable features when the meta path is off / absent).
inline Tensor model_features(PeftModel& model, const Tensor& x, bool training = false,
                             GradTape* tape = nullptr) {
    if (x.rank() != 2) throw ShapeError("model: input must be [N x T], got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), t = x.dim(1);
    if (n == 0) throw ContractError("model: N == 0 data variables");
    if (n != model.num_vars || t != model.seq_len) {
        throw ShapeError("model: input " + shape_str(x.shape()) + " does not match model [" +
                         std::to_string(model.num_vars) + " x " + std::to_string(model.seq_len) + "]");
    }
    double lo = x[0], hi = x[0];
    for (std::size_t i = 1; i < x.numel(); ++i) {
        lo = std::min(lo, x[i]);
        hi = std::max(hi, x[i]);
    }
    if (lo < -3.0 || hi > 4.0) {
        std::fprintf(stderr, "pmts: warning: input range [%g, %g] far outside [-1, 2]; expected min-max normalized data\n",
                     lo, hi);
    }

    Tensor streams = model.use_meta
                         ? vconcat({reshape(x, {n, 1, t}, tape),
                                    reshape(model.meta.u, {1, 1, t}, tape)},
                                   tape)
                         : reshape(x, {n, 1, t}, tape);
    Tensor h = embed_forward(model.backbone, streams, training, tape);
    for (std::size_t k = 0; k < model.layers.size(); ++k) {
        if (model.use_meta) {
            Tensor data = rows(h, 0, n, tape);
            Tensor new_data = itn_forward(model, k, data, training, tape);
            Tensor new_meta = fusion_forward(model, k, h, training, tape);
            h = vconcat({new_data, new_meta}, tape);
        } else {
            h = itn_forward(model, k, h, training, tape);
        }
    }
    // Baseline models carry no adapter layers; run the bare backbone blocks.
    if (model.layers.empty()) {
        for (std::size_t k = 0; k < model.backbone.blocks.size(); ++k) {
            h = block_forward(model.backbone, k, h, training, tape);
        }
    }
    Tensor pooled = global_avg_pool_time(h, tape); // [rows x feature_dim]
    Tensor feat = model.use_meta ? rows(pooled, n, 1, tape) : mean_pool_vars(pooled, tape);
    return feat; // [1 x feature_dim]
}

// Scalar RUL prediction (raw regression output, no clipping).
inline Tensor model_forward(PeftModel& model, const Tensor& x, bool training = false,
                            GradTape* tape = nullptr) {
    Tensor feat = model_features(model, x, training, tape);
    Tensor pred = add(matmul(feat, model.regressor.weight, tape), model.regressor.bias, tape);
    return reshape(pred, {1}, tape);
}

// ---------------------------------------------------------------------------
// Trainable-parameter handling
// ---------------------------------------------------------------------------

inline std::vector<std::pair<std::string, Tensor>> trainable_tensors(PeftModel& model,
                                                                     TuneArm arm = TuneArm::kPeft) {
    std::vector<std::pair<std::string, Tensor>> out;
    if (arm == TuneArm::kFull) {
        auto bb = model.backbone.weight_tensors();
        for (std::size_t i = 0; i < bb.size(); ++i)
            out.emplace_back("backbone.w" + std::to_string(i), bb[i]);
    }
    if (arm == TuneArm::kPeft) {
        for (auto& layer : model.layers) {
            const std::string p = "peft.layer" + std::to_string(layer.spec.layer_index);
            out.emplace_back(p + ".A", layer.A);
            out.emplace_back(p + ".B", layer.B);
            if (model.use_meta) out.emplace_back(p + ".W", layer.W);
            if (layer.align) out.emplace_back(p + ".align.w", layer.align->w);
        }
        if (model.use_meta) out.emplace_back("peft.u", model.meta.u);
    }
    out.emplace_back("regressor.weight", model.regressor.weight);
    if (model.regressor.has_bias) out.emplace_back("regressor.bias", model.regressor.bias);
    return out;
}

// Aligns requires_grad with the arm's trainable set; the backbone freeze flag
// additionally gates its batch-norm running stats.
inline void set_trainable_for_arm(PeftModel& model, TuneArm arm) {
    freeze(model.backbone);
    for (auto& layer : model.layers) {
        layer.A.set_requires_grad(false);
        layer.B.set_requires_grad(false);
        layer.W.set_requires_grad(false);
        if (layer.align) layer.align->w.set_requires_grad(false);
    }
    model.meta.u.set_requires_grad(false);
    model.regressor.weight.set_requires_grad(false);
    model.regressor.bias.set_requires_grad(false);
    if (arm == TuneArm::kFull) unfreeze(model.backbone);
    for (auto& [name, t] : trainable_tensors(model, arm)) t.set_requires_grad(true);
}

struct ParamBudget {
    std::size_t backbone_total = 0;
    std::size_t peft_trainable = 0;
    double ratio = 0.0;
    std::size_t regressor_weights = 0;
};

// Parameter accounting for the fine-tuning arm: adapters, u, regressor.
inline ParamBudget count_params(PeftModel& model) {
    ParamBudget b;
    b.backbone_total = model.backbone.param_count();
    for (auto& [name, t] : trainable_tensors(model, TuneArm::kPeft)) b.peft_trainable += t.numel();
    b.ratio = static_cast<double>(b.peft_trainable) / static_cast<double>(b.backbone_total);
    b.regressor_weights = model.regressor.weight.numel();
    return b;
}

// ---------------------------------------------------------------------------
// Checkpointing (PMTS format, "peft." / "regressor." sections next to the
// backbone section)
// ---------------------------------------------------------------------------

inline TensorMap model_tensors(const PeftModel& model) {
    TensorMap m = backbone_tensors(model.backbone);
    std::vector<double> meta{static_cast<double>(model.layers.size()),
                             static_cast<double>(model.num_vars),
                             static_cast<double>(model.seq_len),
                             model.use_meta ? 1.0 : 0.0,
                             model.regressor.init == RegressorInit::kZero ? 1.0 : 0.0};
    for (const auto& layer : model.layers) {
        meta.push_back(static_cast<double>(layer.spec.d));
        meta.push_back(static_cast<double>(layer.spec.r));
        if (layer.spec.align) {
            meta.push_back(static_cast<double>(layer.spec.align->out_channels));
            meta.push_back(static_cast<double>(layer.spec.align->kernel));
            meta.push_back(static_cast<double>(layer.spec.align->stride));
        } else {
            meta.push_back(0.0);
            meta.push_back(0.0);
            meta.push_back(0.0);
        }
    }
    m.emplace_back("peft.meta", Tensor({meta.size()}, meta));
    for (const auto& layer : model.layers) {
        const std::string p = "peft.layer" + std::to_string(layer.spec.layer_index);
        m.emplace_back(p + ".A", layer.A);
        m.emplace_back(p + ".B", layer.B);
        m.emplace_back(p + ".W", layer.W);
        if (layer.align) m.emplace_back(p + ".align.w", layer.align->w);
    }
    m.emplace_back("peft.u", model.meta.u);
    m.emplace_back("regressor.weight", model.regressor.weight);
    m.emplace_back("regressor.bias", model.regressor.bias);
    return m;
}

inline void save_model(const PeftModel& model, const std::string& path) {
    save_tensors(path, model_tensors(model));
}

inline PeftModel load_model(const std::string& path) {
    const TensorMap m = load_tensors(path);
    PeftModel model;
    model.backbone = backbone_from_tensors(m, path);
    const Tensor* meta = find_tensor(m, "peft.meta");
    if (!meta) throw IoError("checkpoint '" + path + "': missing tensor 'peft.meta'");
    if (meta->numel() < 5) throw IoError("checkpoint '" + path + "': malformed peft meta");
    const std::size_t n_layers = static_cast<std::size_t>((*meta)[0]);
    model.num_vars = static_cast<std::size_t>((*meta)[1]);
    model.seq_len = static_cast<std::size_t>((*meta)[2]);
    model.use_meta = (*meta)[3] != 0.0;
    const RegressorInit init = (*meta)[4] != 0.0 ? RegressorInit::kZero : RegressorInit::kKaimingNoBias;
    if (meta->numel() != 5 + 5 * n_layers) {
        throw IoError("checkpoint '" + path + "': peft meta length mismatch");
    }
    for (std::size_t k = 0; k < n_layers; ++k) {
        PeftLayerSpec spec;
        spec.layer_index = k;
        spec.d = static_cast<std::size_t>((*meta)[5 + 5 * k]);
        spec.r = static_cast<std::size_t>((*meta)[6 + 5 * k]);
        const std::size_t align_out = static_cast<std::size_t>((*meta)[7 + 5 * k]);
        if (align_out != 0) {
            spec.align = AlignSpec{align_out, static_cast<std::size_t>((*meta)[8 + 5 * k]),
                                   static_cast<std::size_t>((*meta)[9 + 5 * k])};
        }
        Rng dummy(0);
        PeftLayerState st = make_peft_layer(spec, dummy);
        const std::string p = "peft.layer" + std::to_string(k);
        st.A = take_tensor(m, p + ".A", st.A.shape(), path);
        st.B = take_tensor(m, p + ".B", st.B.shape(), path);
        st.W = take_tensor(m, p + ".W", st.W.shape(), path);
        if (st.align) st.align->w = take_tensor(m, p + ".align.w", st.align->w.shape(), path);
        model.layers.push_back(std::move(st));
    }
    model.meta.u = take_tensor(m, "peft.u", {1, model.seq_len}, path);
    model.regressor.weight =
        take_tensor(m, "regressor.weight", {model.backbone.spec.feature_dim(), 1}, path);
    model.regressor.bias = take_tensor(m, "regressor.bias", {1, 1}, path);
    model.regressor.init = init;
    model.regressor.has_bias = init == RegressorInit::kZero;
    set_trainable_for_arm(model, TuneArm::kPeft);
    return model;
}

} // namespace pmts
