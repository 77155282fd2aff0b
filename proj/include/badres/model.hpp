#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "badres/errors.hpp"
#include "badres/ops.hpp"
#include "badres/rng.hpp"
#include "badres/tensor.hpp"

// A small pre-norm residual vision transformer. Each encoder layer keeps the
// attention residual clean; the MLP-side combination of one designated layer
// can be swapped for the modified residual rule (subtract a scaled shortcut)
// or the comparison rule (keep the shortcut, subtract the scaled transform).

namespace badres {

enum class BlockMode { clean, badres, comparison };

inline const char* block_mode_name(BlockMode m) {
    switch (m) {
        case BlockMode::clean: return "clean";
        case BlockMode::badres: return "badres";
        case BlockMode::comparison: return "comparison";
    }
    return "?";
}

inline BlockMode block_mode_from_string(const std::string& s) {
    if (s == "clean") return BlockMode::clean;
    if (s == "badres") return BlockMode::badres;
    if (s == "comparison") return BlockMode::comparison;
    throw config_error("unknown block mode '" + s + "' (expected clean|badres|comparison)");
}

struct ModelConfig {
    std::size_t image_size = 28;
    std::size_t channels = 1;
    std::size_t patch_size = 7;
    std::size_t embed_dim = 64;
    std::size_t num_layers = 4;
    std::size_t num_heads = 4;
    std::size_t num_classes = 10;
    std::size_t mlp_ratio = 4;
    BlockMode block_mode = BlockMode::clean;
    std::size_t poisoned_layer_index = 1;  // 1-based
    float alpha = 0.5f;
    float beta = 0.5f;
    // Test-only escape hatch: permits alpha == -1 in badres mode, which makes
    // the modified block algebraically identical to a clean one.
    bool allow_test_alpha = false;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t patch_count() const { return grid() * grid(); }
    std::size_t tokens() const { return patch_count() + 1; }  // + class token
    std::size_t patch_dim() const { return channels * patch_size * patch_size; }
    std::size_t head_dim() const { return embed_dim / num_heads; }
    std::size_t mlp_dim() const { return mlp_ratio * embed_dim; }

    void validate() const {
        if (image_size == 0 || channels == 0 || patch_size == 0 || embed_dim == 0 ||
            num_layers == 0 || num_heads == 0 || num_classes == 0 || mlp_ratio == 0)
            throw config_error("model config: all dimensions must be positive");
        if (image_size % patch_size != 0)
            throw config_error("model config: patch_size " + std::to_string(patch_size) +
                               " does not divide image_size " + std::to_string(image_size));
        if (embed_dim % num_heads != 0)
            throw config_error("model config: num_heads " + std::to_string(num_heads) +
                               " does not divide embed_dim " + std::to_string(embed_dim));
        if (block_mode != BlockMode::clean) {
            if (poisoned_layer_index < 1 || poisoned_layer_index > num_layers)
                throw config_error("model config: poisoned_layer_index " +
                                   std::to_string(poisoned_layer_index) +
                                   " outside [1, " + std::to_string(num_layers) + "]");
            if (block_mode == BlockMode::badres) {
                const bool escape = allow_test_alpha && alpha == -1.0f;
                if (!escape && !(alpha > 0.0f && alpha <= 1.0f))
                    throw config_error("model config: alpha " + std::to_string(alpha) +
                                       " outside (0, 1]");
            }
            if (block_mode == BlockMode::comparison && !(beta > 0.0f && beta <= 1.0f))
                throw config_error("model config: beta " + std::to_string(beta) +
                                   " outside (0, 1]");
        }
    }
};

// Named parameter tensors in a fixed construction order. The order is what
// the optimizer and the checkpoint layout iterate over, so it must stay
// deterministic.
struct ModelParams {
    ModelConfig config;
    std::vector<std::pair<std::string, Tensor>> entries;
    std::unordered_map<std::string, std::size_t> index;

    void add(const std::string& name, Tensor t) {
        if (index.count(name)) throw usage_error("duplicate parameter name " + name);
        index.emplace(name, entries.size());
        entries.emplace_back(name, std::move(t));
    }

    const Tensor& at(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw usage_error("unknown parameter " + name);
        return entries[it->second].second;
    }
    Tensor& at(const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw usage_error("unknown parameter " + name);
        return entries[it->second].second;
    }

    std::size_t total_parameters() const {
        std::size_t n = 0;
        for (const auto& [name, t] : entries) n += t.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : entries) t.zero_grad();
    }

    // Deep copy with gradients enabled (the fine-tune defense trains this).
    ModelParams clone() const {
        ModelParams out;
        out.config = config;
        for (const auto& [name, t] : entries) {
            Tensor c = t.detached();
            c.set_requires_grad(true);
            out.add(name, std::move(c));
        }
        return out;
    }

    // Read-only snapshot: no grads, no graph recording during forward. Safe
    // to share across inference threads.
    ModelParams frozen_copy() const {
        ModelParams out;
        out.config = config;
        for (const auto& [name, t] : entries) out.add(name, t.detached());
        return out;
    }
};

namespace detail {

inline Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out,
                             std::mt19937& g) {
    const float s = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
    return Tensor::uniform(std::move(shape), -s, s, g, true);
}

}  // namespace detail

inline ModelParams build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937 g = rng::make_engine(seed);
    const std::size_t d = config.embed_dim;

    ModelParams p;
    p.config = config;
    p.add("patch_embed.weight",
          detail::glorot_uniform({config.patch_dim(), d}, config.patch_dim(), d, g));
    p.add("patch_embed.bias", Tensor::zeros({d}, true));
    // Class token and positional table are additive embeddings; treat both
    // fans as embed_dim.
    p.add("cls_token", detail::glorot_uniform({1, d}, d, d, g));
    p.add("pos_embed", detail::glorot_uniform({config.tokens(), d}, d, d, g));
    for (std::size_t i = 0; i < config.num_layers; ++i) {
        const std::string prefix = "layer." + std::to_string(i) + ".";
        p.add(prefix + "ln1.gain", Tensor::full({d}, 1.0f, true));
        p.add(prefix + "ln1.bias", Tensor::zeros({d}, true));
        for (const char* proj : {"q_proj", "k_proj", "v_proj", "out_proj"}) {
            p.add(prefix + "attn." + proj + ".weight", detail::glorot_uniform({d, d}, d, d, g));
            p.add(prefix + "attn." + proj + ".bias", Tensor::zeros({d}, true));
        }
        p.add(prefix + "ln2.gain", Tensor::full({d}, 1.0f, true));
        p.add(prefix + "ln2.bias", Tensor::zeros({d}, true));
        p.add(prefix + "mlp.fc1.weight",
              detail::glorot_uniform({d, config.mlp_dim()}, d, config.mlp_dim(), g));
        p.add(prefix + "mlp.fc1.bias", Tensor::zeros({config.mlp_dim()}, true));
        p.add(prefix + "mlp.fc2.weight",
              detail::glorot_uniform({config.mlp_dim(), d}, config.mlp_dim(), d, g));
        p.add(prefix + "mlp.fc2.bias", Tensor::zeros({d}, true));
    }
    p.add("final_ln.gain", Tensor::full({d}, 1.0f, true));
    p.add("final_ln.bias", Tensor::zeros({d}, true));
    p.add("head.weight", detail::glorot_uniform({d, config.num_classes}, d, config.num_classes, g));
    p.add("head.bias", Tensor::zeros({config.num_classes}, true));
    return p;
}

namespace detail {

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add(matmul(x, w), b);
}

inline Tensor ln_affine(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    return add(multiply(layer_norm(x), gain), bias);
}

}  // namespace detail

// The mode-specific combination of the transform F(z) with the shortcut z.
inline Tensor combine_residual(const Tensor& f, const Tensor& z, BlockMode mode,
                               float alpha, float beta) {
    switch (mode) {
        case BlockMode::clean: return add(f, z);
        case BlockMode::badres: return subtract(f, scalar_multiply(z, alpha));
        case BlockMode::comparison: return subtract(z, scalar_multiply(f, beta));
    }
    throw usage_error("combine_residual: bad mode");
}

// One encoder layer: z = x + Attn(LN(x)), then the MLP-side residual
// combination selected by `mode`. Only the designated poisoned layer ever
// runs with a non-clean mode; all others stay clean.
inline Tensor residual_block_forward(const ModelParams& params, std::size_t layer_index,
                                     const Tensor& x, BlockMode mode, float alpha,
                                     float beta) {
    const ModelConfig& cfg = params.config;
    if (mode != BlockMode::clean) {
        const bool alpha_ok = (alpha > 0.0f && alpha <= 1.0f) ||
                              (cfg.allow_test_alpha && alpha == -1.0f);
        if (mode == BlockMode::badres && !alpha_ok)
            throw config_error("residual block: alpha " + std::to_string(alpha) +
                               " outside (0, 1]");
        if (mode == BlockMode::comparison && !(beta > 0.0f && beta <= 1.0f))
            throw config_error("residual block: beta " + std::to_string(beta) +
                               " outside (0, 1]");
    }
    if (x.rank() != 3 || x.shape()[2] != cfg.embed_dim)
        throw usage_error("residual block: expected (batch, tokens, " +
                          std::to_string(cfg.embed_dim) + "), got " + shape_str(x.shape()));

    const std::string prefix = "layer." + std::to_string(layer_index) + ".";
    const std::size_t batch = x.shape()[0];
    const std::size_t tokens = x.shape()[1];
    const std::size_t d = cfg.embed_dim;
    const std::size_t heads = cfg.num_heads;
    const std::size_t hd = cfg.head_dim();

    // attention sub-block (residual always clean)
    Tensor xn = detail::ln_affine(x, params.at(prefix + "ln1.gain"), params.at(prefix + "ln1.bias"));
    auto split_heads = [&](const Tensor& t) {
        return transpose(reshape(t, {batch, tokens, heads, hd}), {0, 2, 1, 3});
    };
    Tensor q = split_heads(detail::linear(xn, params.at(prefix + "attn.q_proj.weight"),
                                          params.at(prefix + "attn.q_proj.bias")));
    Tensor k = split_heads(detail::linear(xn, params.at(prefix + "attn.k_proj.weight"),
                                          params.at(prefix + "attn.k_proj.bias")));
    Tensor v = split_heads(detail::linear(xn, params.at(prefix + "attn.v_proj.weight"),
                                          params.at(prefix + "attn.v_proj.bias")));
    Tensor scores = scalar_multiply(matmul(q, transpose(k, {0, 1, 3, 2})),
                                    1.0f / std::sqrt(static_cast<float>(hd)));
    Tensor ctx = matmul(softmax(scores), v);
    ctx = reshape(transpose(ctx, {0, 2, 1, 3}), {batch, tokens, d});
    Tensor attn_out = detail::linear(ctx, params.at(prefix + "attn.out_proj.weight"),
                                     params.at(prefix + "attn.out_proj.bias"));
    Tensor z = add(attn_out, x);

    // MLP transform F(z)
    Tensor zn = detail::ln_affine(z, params.at(prefix + "ln2.gain"), params.at(prefix + "ln2.bias"));
    Tensor f = detail::linear(gelu(detail::linear(zn, params.at(prefix + "mlp.fc1.weight"),
                                                  params.at(prefix + "mlp.fc1.bias"))),
                              params.at(prefix + "mlp.fc2.weight"),
                              params.at(prefix + "mlp.fc2.bias"));
    return combine_residual(f, z, mode, alpha, beta);
}

// Full forward pass: patch embedding, class token, positional table, encoder
// stack, final norm, classifier head on the class token.
inline Tensor model_forward(const ModelParams& params, const Tensor& images) {
    const ModelConfig& cfg = params.config;
    if (images.rank() != 4 || images.shape()[1] != cfg.channels ||
        images.shape()[2] != cfg.image_size || images.shape()[3] != cfg.image_size)
        throw usage_error("model_forward: expected images (batch, " +
                          std::to_string(cfg.channels) + ", " + std::to_string(cfg.image_size) +
                          ", " + std::to_string(cfg.image_size) + "), got " +
                          shape_str(images.shape()));
    const std::size_t batch = images.shape()[0];
    const std::size_t gp = cfg.grid();
    const std::size_t ps = cfg.patch_size;

    Tensor x = reshape(images, {batch, cfg.channels, gp, ps, gp, ps});
    x = transpose(x, {0, 2, 4, 1, 3, 5});  // (batch, gy, gx, c, py, px)
    x = reshape(x, {batch, cfg.patch_count(), cfg.patch_dim()});
    x = detail::linear(x, params.at("patch_embed.weight"), params.at("patch_embed.bias"));

    Tensor cls = repeat_leading(params.at("cls_token"), batch);  // (batch, 1, d)
    x = concat({cls, x}, 1);
    x = add(x, params.at("pos_embed"));

    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
        const bool is_poisoned_layer =
            cfg.block_mode != BlockMode::clean && (i + 1) == cfg.poisoned_layer_index;
        const BlockMode mode = is_poisoned_layer ? cfg.block_mode : BlockMode::clean;
        x = residual_block_forward(params, i, x, mode, cfg.alpha, cfg.beta);
    }

    x = detail::ln_affine(x, params.at("final_ln.gain"), params.at("final_ln.bias"));
    Tensor cls_out = slice(x, 1, 0);  // (batch, d)
    return detail::linear(cls_out, params.at("head.weight"), params.at("head.bias"));
}

}  // namespace badres
