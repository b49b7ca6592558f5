// Copyright 2026 The evctrl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "evctrl/errors.hpp"
#include "evctrl/rng.hpp"
#include "evctrl/tensor.hpp"

namespace evctrl {

enum class Branch { Main, Control };

inline const char* to_string(Branch b) { return b == Branch::Main ? "main" : "control"; }

struct ModelConfig {
    std::size_t grid_side = 16;
    std::size_t hidden_dim = 64;
    std::size_t num_blocks = 12;
    std::size_t heads = 4;
    std::size_t control_blocks = 6;
    std::uint64_t seed = 0;

    std::size_t tokens() const noexcept { return grid_side * grid_side; }

    std::size_t block_count(Branch b) const noexcept { return b == Branch::Main ? num_blocks : control_blocks; }

    /// Throws ConfigError naming every violated constraint.
    void validate() const {
        std::string problems;
        auto fail = [&](const std::string& msg) { problems += (problems.empty() ? "" : "; ") + msg; };
        if (grid_side < 2) fail("grid_side must be >= 2");
        if (hidden_dim < 2 || hidden_dim % 2 != 0) fail("hidden_dim must be even and >= 2");
        if (heads == 0) fail("heads must be >= 1");
        else if (hidden_dim % heads != 0) fail("hidden_dim must be divisible by heads");
        if (num_blocks == 0) fail("num_blocks must be >= 1");
        if (control_blocks > num_blocks) fail("control_blocks must be <= num_blocks");
        if (!problems.empty()) throw ConfigError("invalid model config: " + problems);
    }

    bool operator==(const ModelConfig&) const = default;
};

/// y = x W + b, W stored [in x out].
struct Linear {
    Tensor2D weight;
    std::vector<double> bias;

    Tensor2D apply(const Tensor2D& x, FlopCounter& counter) const {
        Tensor2D y = matmul(x, weight, counter);
        add_bias(y, bias);
        return y;
    }

    Tensor2D apply_rows(const Tensor2D& x, std::span<const std::size_t> rows, FlopCounter& counter) const {
        Tensor2D y = matmul_rows(x, rows, weight, counter);
        add_bias(y, bias);
        return y;
    }

    bool operator==(const Linear&) const = default;
};

struct BlockWeights {
    std::vector<double> ln1_gamma, ln1_beta;
    Linear wq, wk, wv, wo;
    std::vector<double> ln2_gamma, ln2_beta;
    Linear fc1, fc2;

    bool operator==(const BlockWeights&) const = default;
};

/// Random-weight DiT with a ControlNet side branch over the first
/// `control_blocks` blocks. Control block k's output, projected through
/// `control_out[k]`, is added to the main hidden state entering main block k.
struct ModelWeights {
    ModelConfig config;
    Linear input_proj;
    std::vector<BlockWeights> main;
    std::vector<BlockWeights> control;
    std::vector<Linear> control_out;
    std::vector<double> condition_embedding;  // one row: pixel value -> hidden_dim
    std::vector<double> final_gamma, final_beta;
    Linear output_head;
    std::vector<double> decoder;  // latent channel -> grayscale projection

    const BlockWeights& block(Branch branch, std::size_t layer) const {
        const auto& blocks = branch == Branch::Main ? main : control;
        if (layer >= blocks.size())
            throw IndexError(std::string("layer ") + std::to_string(layer) + " out of range for " +
                             to_string(branch) + " branch with " + std::to_string(blocks.size()) + " blocks");
        return blocks[layer];
    }

    bool operator==(const ModelWeights&) const = default;
};

namespace detail {

constexpr std::uint64_t kWeightStream = 0x57454947ULL;  // "WEIG"
constexpr double kControlOutScale = 0.05;

inline Tensor2D gaussian_matrix(Xoshiro256& rng, std::size_t rows, std::size_t cols, double scale) {
    Tensor2D t(rows, cols);
    for (double& v : t.data) v = rng.gaussian() * scale;
    return t;
}

inline Linear gaussian_linear(Xoshiro256& rng, std::size_t in, std::size_t out, double scale) {
    return Linear{gaussian_matrix(rng, in, out, scale), std::vector<double>(out, 0.0)};
}

inline BlockWeights make_block(Xoshiro256& rng, std::size_t d, double scale) {
    BlockWeights b;
    b.ln1_gamma.assign(d, 1.0);
    b.ln1_beta.assign(d, 0.0);
    b.ln2_gamma.assign(d, 1.0);
    b.ln2_beta.assign(d, 0.0);
    b.wq = gaussian_linear(rng, d, d, scale);
    b.wk = gaussian_linear(rng, d, d, scale);
    b.wv = gaussian_linear(rng, d, d, scale);
    b.wo = gaussian_linear(rng, d, d, scale);
    b.fc1 = gaussian_linear(rng, d, 4 * d, scale);
    b.fc2 = gaussian_linear(rng, 4 * d, d, scale);
    return b;
}

} // namespace detail

/// Deterministic weights from xoshiro256** seeded with config.seed.
///
/// Every projection matrix is N(0, 1/hidden_dim); biases are zero and layer
/// norms are identity. The condition embedding row maps a scalar pixel, so it
/// uses unit scale (1/sqrt(fan_in) with fan_in = 1). Control output projections
/// start at exactly zero, the ControlNet convention, and are then overwritten
/// with N(0, 0.05^2) so that conditioning has a measurable effect.
inline ModelWeights build_model(const ModelConfig& config) {
    config.validate();
    const std::size_t d = config.hidden_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Xoshiro256 rng(derive_seed(config.seed, detail::kWeightStream));

    ModelWeights w;
    w.config = config;
    w.input_proj = detail::gaussian_linear(rng, d, d, scale);
    for (std::size_t i = 0; i < config.num_blocks; ++i) w.main.push_back(detail::make_block(rng, d, scale));
    for (std::size_t i = 0; i < config.control_blocks; ++i) w.control.push_back(detail::make_block(rng, d, scale));

    w.control_out.assign(config.control_blocks, Linear{Tensor2D(d, d, 0.0), std::vector<double>(d, 0.0)});
    for (auto& proj : w.control_out)
        for (double& v : proj.weight.data) v = rng.gaussian() * detail::kControlOutScale;

    w.condition_embedding.resize(d);
    for (double& v : w.condition_embedding) v = rng.gaussian();

    w.final_gamma.assign(d, 1.0);
    w.final_beta.assign(d, 0.0);
    w.output_head = detail::gaussian_linear(rng, d, d, scale);
    w.decoder.resize(d);
    for (double& v : w.decoder) v = rng.gaussian() * scale;
    return w;
}

/// Standard sinusoidal embedding: first half sin, second half cos, with
/// frequencies 10000^(-i / (dim/2)).
inline std::vector<double> timestep_embedding(double t, std::size_t dim) {
    std::vector<double> emb(dim);
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        emb[i] = std::sin(t * freq);
        emb[i + half] = std::cos(t * freq);
    }
    return emb;
}

/// Pre-residual sublayer outputs of one block. For a restricted call the
/// deltas are compact (one row per computed token) and hidden_after only
/// differs from the input on the computed rows.
struct BlockOutput {
    Tensor2D attn_delta;
    Tensor2D mlp_delta;
    Tensor2D hidden_after;
};

/// LN1 -> multi-head self-attention -> output projection. Keys and values are
/// projected for every token; queries and the output projection only for
/// `rows` when given. An empty row set costs nothing.
inline Tensor2D attention_delta(const BlockWeights& w, const Tensor2D& hidden, const std::optional<TokenSet>& rows,
                                std::size_t heads, FlopCounter& counter) {
    if (rows && rows->empty()) return Tensor2D(0, hidden.cols);
    const Tensor2D x = layer_norm(hidden, w.ln1_gamma, w.ln1_beta);
    const Tensor2D q = rows ? w.wq.apply_rows(x, *rows, counter) : w.wq.apply(x, counter);
    const Tensor2D k = w.wk.apply(x, counter);
    const Tensor2D v = w.wv.apply(x, counter);
    const Tensor2D mixed = attention(q, k, v, heads, std::nullopt, counter);
    return w.wo.apply(mixed, counter);
}

/// LN2 -> GELU MLP on the given rows (already residual-updated with attention).
inline Tensor2D mlp_delta(const BlockWeights& w, const Tensor2D& h1_rows, FlopCounter& counter) {
    if (h1_rows.rows == 0) return Tensor2D(0, h1_rows.cols);
    const Tensor2D x = layer_norm(h1_rows, w.ln2_gamma, w.ln2_beta);
    return mlp(x, w.fc1.weight, w.fc1.bias, w.fc2.weight, w.fc2.bias, std::nullopt, counter);
}

/// Pre-LN transformer block: h1 = h + attn(LN1 h); out = h1 + mlp(LN2 h1).
inline BlockOutput forward_block(const ModelWeights& weights, Branch branch, std::size_t layer, const Tensor2D& hidden,
                                 const std::optional<TokenSet>& row_subset, FlopCounter& counter) {
    const BlockWeights& w = weights.block(branch, layer);
    if (hidden.cols != weights.config.hidden_dim)
        throw DimensionError("forward_block: hidden " + hidden.shape() + " does not match hidden_dim " +
                             std::to_string(weights.config.hidden_dim));
    detail::check_subset(row_subset, hidden.rows, "forward_block");

    BlockOutput out;
    out.attn_delta = attention_delta(w, hidden, row_subset, weights.config.heads, counter);
    if (!row_subset) {
        Tensor2D h1 = hidden;
        add_inplace(h1, out.attn_delta);
        out.mlp_delta = mlp_delta(w, h1, counter);
        add_inplace(h1, out.mlp_delta);
        out.hidden_after = std::move(h1);
        return out;
    }

    Tensor2D h1 = gather_rows(hidden, *row_subset);
    add_inplace(h1, out.attn_delta);
    out.mlp_delta = mlp_delta(w, h1, counter);
    add_inplace(h1, out.mlp_delta);
    out.hidden_after = hidden;
    for (std::size_t i = 0; i < row_subset->size(); ++i)
        std::copy_n(h1.row(i).begin(), hidden.cols, out.hidden_after.row((*row_subset)[i]).begin());
    return out;
}

/// Input features of a block together with what it produced.
struct LayerTrace {
    Tensor2D input;
    BlockOutput output;
};

struct ForwardResult {
    Tensor2D noise_pred;
    std::vector<LayerTrace> main;
    std::vector<LayerTrace> control;

    const std::vector<LayerTrace>& branch(Branch b) const { return b == Branch::Main ? main : control; }
};

/// x_t W_in + b + sinusoidal(t), broadcast over tokens.
inline Tensor2D embed_input(const ModelWeights& weights, const Tensor2D& x_t, double t, FlopCounter& counter) {
    const auto& cfg = weights.config;
    if (x_t.rows != cfg.tokens() || x_t.cols != cfg.hidden_dim)
        throw DimensionError("latent " + x_t.shape() + " does not match model [" + std::to_string(cfg.tokens()) +
                             " x " + std::to_string(cfg.hidden_dim) + "]");
    Tensor2D h = weights.input_proj.apply(x_t, counter);
    add_bias(h, timestep_embedding(t, cfg.hidden_dim));
    return h;
}

/// Projected control output for main block `layer`.
inline Tensor2D control_injection(const ModelWeights& weights, std::size_t layer, const Tensor2D& control_hidden,
                                  FlopCounter& counter) {
    return weights.control_out.at(layer).apply(control_hidden, counter);
}

inline Tensor2D output_head(const ModelWeights& weights, const Tensor2D& hidden, FlopCounter& counter) {
    return weights.output_head.apply(layer_norm(hidden, weights.final_gamma, weights.final_beta), counter);
}

/// One uncached denoiser evaluation. The control branch runs on the input
/// embedding plus the condition embedding; control block k's output feeds
/// main block k through its output projection.
inline ForwardResult forward_full(const ModelWeights& weights, const Tensor2D& x_t, const Tensor2D& condition_tokens,
                                  double t, FlopCounter& counter) {
    const auto& cfg = weights.config;
    if (condition_tokens.rows != cfg.tokens() || condition_tokens.cols != cfg.hidden_dim)
        throw DimensionError("condition tokens " + condition_tokens.shape() + " do not match model [" +
                             std::to_string(cfg.tokens()) + " x " + std::to_string(cfg.hidden_dim) + "]");

    ForwardResult result;
    const Tensor2D x_embed = embed_input(weights, x_t, t, counter);

    Tensor2D c = x_embed;
    add_inplace(c, condition_tokens);
    result.control.reserve(cfg.control_blocks);
    for (std::size_t k = 0; k < cfg.control_blocks; ++k) {
        BlockOutput out = forward_block(weights, Branch::Control, k, c, std::nullopt, counter);
        Tensor2D next = out.hidden_after;
        result.control.push_back({std::move(c), std::move(out)});
        c = std::move(next);
    }

    Tensor2D h = x_embed;
    result.main.reserve(cfg.num_blocks);
    for (std::size_t k = 0; k < cfg.num_blocks; ++k) {
        if (k < cfg.control_blocks)
            add_inplace(h, control_injection(weights, k, result.control[k].output.hidden_after, counter));
        BlockOutput out = forward_block(weights, Branch::Main, k, h, std::nullopt, counter);
        Tensor2D next = out.hidden_after;
        result.main.push_back({std::move(h), std::move(out)});
        h = std::move(next);
    }
    result.noise_pred = output_head(weights, h, counter);
    return result;
}

} // namespace evctrl
