#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pmts/checkpoint.hpp"
#include "pmts/ops.hpp"
#include "pmts/rng.hpp"
#include "pmts/tensor.hpp"

// Univariate 1-D residual convolutional backbone. Every variable enters as an
// independent 1-channel stream; the variable axis is treated as a batch axis,
// so no layer ever mixes information across streams while frozen.
namespace pmts {

struct BlockSpec {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t stride = 1;
    std::size_t kernel = 3;

    bool needs_projection() const { return in_channels != out_channels || stride != 1; }
    bool operator==(const BlockSpec&) const = default;
};

struct BackboneSpec {
    std::size_t embed_out = 64;
    std::size_t embed_kernel = 7;
    std::size_t embed_stride = 2;
    std::vector<BlockSpec> blocks;

    std::size_t feature_dim() const { return blocks.empty() ? embed_out : blocks.back().out_channels; }

    void validate() const {
        if (embed_out == 0 || embed_kernel == 0 || embed_stride == 0 || blocks.empty()) {
            throw ShapeError("backbone spec: empty or zero-sized stage");
        }
        std::size_t prev = embed_out;
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            if (blocks[i].in_channels != prev) {
                throw ShapeError("backbone spec: block " + std::to_string(i) + " expects " +
                                 std::to_string(blocks[i].in_channels) + " input channels, previous stage has " +
                                 std::to_string(prev));
            }
            if (blocks[i].out_channels == 0 || blocks[i].stride == 0 || blocks[i].kernel == 0) {
                throw ShapeError("backbone spec: block " + std::to_string(i) + " has a zero field");
            }
            prev = blocks[i].out_channels;
        }
    }

    // 8-block channel schedule 64,128,128,256,256,512,512,1024,1024 with
    // stride-2 downsampling in each channel-doubling block.
    static BackboneSpec resnet18() {
        BackboneSpec spec;
        spec.blocks = {
            {64, 128, 2},  {128, 128, 1}, {128, 256, 2},  {256, 256, 1},
            {256, 512, 2}, {512, 512, 1}, {512, 1024, 2}, {1024, 1024, 1},
        };
        return spec;
    }

    // Same layout scaled down for desk-size experiments.
    static BackboneSpec compact(std::size_t base = 16, std::size_t pairs = 2) {
        BackboneSpec spec;
        spec.embed_out = base;
        spec.embed_kernel = 7;
        spec.embed_stride = 2;
        std::size_t c = base;
        for (std::size_t p = 0; p < pairs; ++p) {
            spec.blocks.push_back({c, 2 * c, 2});
            spec.blocks.push_back({2 * c, 2 * c, 1});
            c *= 2;
        }
        return spec;
    }

    bool operator==(const BackboneSpec&) const = default;
};

struct BatchNormLayer {
    Tensor gamma, beta;
    Tensor running_mean, running_var;
    double eps = 1e-5;
    double momentum = 0.1;

    static BatchNormLayer make(std::size_t channels) {
        BatchNormLayer bn;
        bn.gamma = Tensor::full({channels}, 1.0);
        bn.beta = Tensor::zeros({channels});
        bn.running_mean = Tensor::zeros({channels});
        bn.running_var = Tensor::full({channels}, 1.0);
        return bn;
    }
};

struct ConvLayer {
    Tensor w; // [C_out x C_in/groups x K]
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t groups = 1;

    static ConvLayer make(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride,
                          std::size_t groups, Rng& rng) {
        ConvLayer c;
        const std::size_t fan_in = (cin / groups) * kernel;
        c.w = Tensor::kaiming_uniform({cout, cin / groups, kernel}, fan_in, rng);
        c.stride = stride;
        c.padding = kernel / 2;
        c.groups = groups;
        return c;
    }
};

struct ResidualBlock {
    ConvLayer conv1;
    BatchNormLayer bn1;
    ConvLayer conv2;
    BatchNormLayer bn2;
    std::optional<ConvLayer> proj;
    std::optional<BatchNormLayer> proj_bn;
};

struct BackboneState {
    BackboneSpec spec;
    ConvLayer embed_conv;
    BatchNormLayer embed_bn;
    std::vector<ResidualBlock> blocks;
    bool frozen = false;

    // Weight tensors (conv kernels and batch-norm affine), the set that
    // freeze/unfreeze and the optimizer operate on. Running stats excluded.
    std::vector<Tensor> weight_tensors() {
        std::vector<Tensor> out{embed_conv.w, embed_bn.gamma, embed_bn.beta};
        for (auto& b : blocks) {
            out.push_back(b.conv1.w);
            out.push_back(b.bn1.gamma);
            out.push_back(b.bn1.beta);
            out.push_back(b.conv2.w);
            out.push_back(b.bn2.gamma);
            out.push_back(b.bn2.beta);
            if (b.proj) {
                out.push_back(b.proj->w);
                out.push_back(b.proj_bn->gamma);
                out.push_back(b.proj_bn->beta);
            }
        }
        return out;
    }

    std::size_t param_count() {
        std::size_t n = 0;
        for (const Tensor& t : weight_tensors()) n += t.numel();
        return n;
    }
};

// Intermediate activations z^(1..K+1): taps[0] is the input-embedding output,
// one entry per residual block after that.
using LayerTaps = std::vector<Tensor>;

inline BackboneState build_backbone(const BackboneSpec& spec, Rng rng) {
    spec.validate();
    BackboneState state;
    state.spec = spec;
    state.embed_conv = ConvLayer::make(1, spec.embed_out, spec.embed_kernel, spec.embed_stride, 1, rng);
    state.embed_bn = BatchNormLayer::make(spec.embed_out);
    for (const BlockSpec& bs : spec.blocks) {
        ResidualBlock b;
        b.conv1 = ConvLayer::make(bs.in_channels, bs.out_channels, bs.kernel, bs.stride, 1, rng);
        b.bn1 = BatchNormLayer::make(bs.out_channels);
        b.conv2 = ConvLayer::make(bs.out_channels, bs.out_channels, bs.kernel, 1, 1, rng);
        b.bn2 = BatchNormLayer::make(bs.out_channels);
        if (bs.needs_projection()) {
            b.proj = ConvLayer::make(bs.in_channels, bs.out_channels, 1, bs.stride, 1, rng);
            b.proj_bn = BatchNormLayer::make(bs.out_channels);
        }
        state.blocks.push_back(std::move(b));
    }
    for (Tensor t : state.weight_tensors()) t.set_requires_grad(true);
    return state;
}

inline void freeze(BackboneState& state) {
    for (Tensor t : state.weight_tensors()) t.set_requires_grad(false);
    state.frozen = true;
}

inline void unfreeze(BackboneState& state) {
    for (Tensor t : state.weight_tensors()) t.set_requires_grad(true);
    state.frozen = false;
}

namespace detail {

inline Tensor apply_bn(BatchNormLayer& bn, const Tensor& x, bool batch_stats, GradTape* tape) {
    return batchnorm1d(x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, batch_stats,
                       /*update_running=*/batch_stats, bn.eps, bn.momentum, tape);
}

} // namespace detail

// Input-embedding stage: conv(k=embed_kernel, stride=embed_stride) -> BN -> SiLU.
inline Tensor embed_forward(BackboneState& state, const Tensor& streams, bool training = false,
                            GradTape* tape = nullptr) {
    if (streams.rank() != 3 || streams.dim(1) != 1) {
        throw ShapeError("backbone: input must be [rows x 1 x T], got " + shape_str(streams.shape()));
    }
    const bool batch_stats = training && !state.frozen;
    Tensor h = conv1d(streams, state.embed_conv.w, state.embed_conv.stride, state.embed_conv.padding,
                      state.embed_conv.groups, tape);
    h = detail::apply_bn(state.embed_bn, h, batch_stats, tape);
    return silu(h, tape);
}

inline Tensor block_forward(BackboneState& state, std::size_t block_idx, const Tensor& x,
                            bool training = false, GradTape* tape = nullptr) {
    ResidualBlock& b = state.blocks.at(block_idx);
    const bool batch_stats = training && !state.frozen;
    Tensor h = conv1d(x, b.conv1.w, b.conv1.stride, b.conv1.padding, b.conv1.groups, tape);
    h = detail::apply_bn(b.bn1, h, batch_stats, tape);
    h = silu(h, tape);
    h = conv1d(h, b.conv2.w, b.conv2.stride, b.conv2.padding, b.conv2.groups, tape);
    h = detail::apply_bn(b.bn2, h, batch_stats, tape);
    Tensor shortcut = x;
    if (b.proj) {
        shortcut = conv1d(x, b.proj->w, b.proj->stride, b.proj->padding, b.proj->groups, tape);
        shortcut = detail::apply_bn(*b.proj_bn, shortcut, batch_stats, tape);
    }
    return silu(add(h, shortcut, tape), tape);
}

inline std::size_t total_stride(const BackboneSpec& spec) {
    std::size_t s = spec.embed_stride;
    for (const BlockSpec& b : spec.blocks) s *= b.stride;
    return s;
}

// Same-padding convolutions ceil-divide the time axis, so any T >= 1 survives
// the full stride reduction (a window of 30 passes the 32x default backbone);
// only an empty time axis is structurally impossible.
inline LayerTaps backbone_forward(BackboneState& state, const Tensor& streams, bool training = false,
                                  GradTape* tape = nullptr) {
    if (streams.rank() == 3 && streams.dim(2) == 0) {
        throw ShapeError("backbone: empty time axis cannot survive the stride reduction (" +
                         std::to_string(total_stride(state.spec)) + "x)");
    }
    LayerTaps taps;
    taps.reserve(state.blocks.size() + 1);
    Tensor h = embed_forward(state, streams, training, tape);
    taps.push_back(h);
    for (std::size_t i = 0; i < state.blocks.size(); ++i) {
        h = block_forward(state, i, h, training, tape);
        taps.push_back(h);
    }
    return taps;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

namespace detail {

inline void append_bn(TensorMap& m, const std::string& prefix, const BatchNormLayer& bn) {
    m.emplace_back(prefix + ".gamma", bn.gamma);
    m.emplace_back(prefix + ".beta", bn.beta);
    m.emplace_back(prefix + ".running_mean", bn.running_mean);
    m.emplace_back(prefix + ".running_var", bn.running_var);
}

inline void read_bn(const TensorMap& m, const std::string& prefix, BatchNormLayer& bn,
                    const std::string& path) {
    const Shape s = bn.gamma.shape();
    bn.gamma = take_tensor(m, prefix + ".gamma", s, path);
    bn.beta = take_tensor(m, prefix + ".beta", s, path);
    bn.running_mean = take_tensor(m, prefix + ".running_mean", s, path);
    bn.running_var = take_tensor(m, prefix + ".running_var", s, path);
}

} // namespace detail

inline TensorMap backbone_tensors(const BackboneState& state, const std::string& prefix = "backbone") {
    TensorMap m;
    std::vector<double> meta{static_cast<double>(state.spec.embed_out),
                             static_cast<double>(state.spec.embed_kernel),
                             static_cast<double>(state.spec.embed_stride),
                             static_cast<double>(state.spec.blocks.size())};
    for (const BlockSpec& b : state.spec.blocks) {
        meta.push_back(static_cast<double>(b.in_channels));
        meta.push_back(static_cast<double>(b.out_channels));
        meta.push_back(static_cast<double>(b.stride));
        meta.push_back(static_cast<double>(b.kernel));
    }
    m.emplace_back(prefix + ".meta", Tensor({meta.size()}, meta));
    m.emplace_back(prefix + ".embed.conv.w", state.embed_conv.w);
    detail::append_bn(m, prefix + ".embed.bn", state.embed_bn);
    for (std::size_t i = 0; i < state.blocks.size(); ++i) {
        const std::string bp = prefix + ".block" + std::to_string(i);
        const ResidualBlock& b = state.blocks[i];
        m.emplace_back(bp + ".conv1.w", b.conv1.w);
        detail::append_bn(m, bp + ".bn1", b.bn1);
        m.emplace_back(bp + ".conv2.w", b.conv2.w);
        detail::append_bn(m, bp + ".bn2", b.bn2);
        if (b.proj) {
            m.emplace_back(bp + ".proj.w", b.proj->w);
            detail::append_bn(m, bp + ".proj_bn", *b.proj_bn);
        }
    }
    return m;
}

inline BackboneSpec backbone_spec_from_meta(const Tensor& meta, const std::string& path) {
    if (meta.rank() != 1 || meta.numel() < 4) {
        throw IoError("checkpoint '" + path + "': malformed backbone meta tensor");
    }
    BackboneSpec spec;
    spec.embed_out = static_cast<std::size_t>(meta[0]);
    spec.embed_kernel = static_cast<std::size_t>(meta[1]);
    spec.embed_stride = static_cast<std::size_t>(meta[2]);
    const std::size_t nblocks = static_cast<std::size_t>(meta[3]);
    if (meta.numel() != 4 + 4 * nblocks) {
        throw IoError("checkpoint '" + path + "': backbone meta length mismatch");
    }
    for (std::size_t i = 0; i < nblocks; ++i) {
        BlockSpec b;
        b.in_channels = static_cast<std::size_t>(meta[4 + 4 * i]);
        b.out_channels = static_cast<std::size_t>(meta[5 + 4 * i]);
        b.stride = static_cast<std::size_t>(meta[6 + 4 * i]);
        b.kernel = static_cast<std::size_t>(meta[7 + 4 * i]);
        spec.blocks.push_back(b);
    }
    return spec;
}

inline BackboneState backbone_from_tensors(const TensorMap& m, const std::string& path,
                                           const std::string& prefix = "backbone") {
    const Tensor* meta = find_tensor(m, prefix + ".meta");
    if (!meta) throw IoError("checkpoint '" + path + "': missing tensor '" + prefix + ".meta'");
    const BackboneSpec spec = backbone_spec_from_meta(*meta, path);
    Rng dummy(0);
    BackboneState state = build_backbone(spec, dummy);
    state.embed_conv.w =
        take_tensor(m, prefix + ".embed.conv.w", state.embed_conv.w.shape(), path);
    detail::read_bn(m, prefix + ".embed.bn", state.embed_bn, path);
    for (std::size_t i = 0; i < state.blocks.size(); ++i) {
        const std::string bp = prefix + ".block" + std::to_string(i);
        ResidualBlock& b = state.blocks[i];
        b.conv1.w = take_tensor(m, bp + ".conv1.w", b.conv1.w.shape(), path);
        detail::read_bn(m, bp + ".bn1", b.bn1, path);
        b.conv2.w = take_tensor(m, bp + ".conv2.w", b.conv2.w.shape(), path);
        detail::read_bn(m, bp + ".bn2", b.bn2, path);
        if (b.proj) {
            b.proj->w = take_tensor(m, bp + ".proj.w", b.proj->w.shape(), path);
            detail::read_bn(m, bp + ".proj_bn", *b.proj_bn, path);
        }
    }
    unfreeze(state);
    return state;
}

inline void save_backbone(const BackboneState& state, const std::string& path) {
    save_tensors(path, backbone_tensors(state));
}

inline BackboneState load_backbone(const std::string& path) {
    return backbone_from_tensors(load_tensors(path), path);
}

// Load and require an exact architecture match.
inline BackboneState load_backbone(const std::string& path, const BackboneSpec& expected) {
    BackboneState state = load_backbone(path);
    if (!(state.spec == expected)) {
        throw IoError("checkpoint '" + path + "': backbone architecture does not match the requested spec");
    }
    return state;
}

} // namespace pmts
