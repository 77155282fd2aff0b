#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "badres/autograd.hpp"
#include "badres/model.hpp"

using namespace badres;

namespace {

ModelConfig desk_config() { return ModelConfig{}; }  // defaults are the desk model

ModelConfig tiny_config() {
    ModelConfig c;
    c.embed_dim = 16;
    c.num_layers = 2;
    c.num_heads = 2;
    return c;
}

bool params_equal(const ModelParams& a, const ModelParams& b) {
    if (a.entries.size() != b.entries.size()) return false;
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        if (a.entries[i].first != b.entries[i].first) return false;
        const Tensor& ta = a.entries[i].second;
        const Tensor& tb = b.entries[i].second;
        if (ta.shape() != tb.shape()) return false;
        if (std::memcmp(ta.data().data(), tb.data().data(), ta.numel() * sizeof(float)) != 0)
            return false;
    }
    return true;
}

// Per-role parameter counts summed independently of the builder.
std::size_t expected_parameter_count(const ModelConfig& c) {
    const std::size_t d = c.embed_dim;
    const std::size_t patch = c.channels * c.patch_size * c.patch_size;
    const std::size_t tokens = (c.image_size / c.patch_size) * (c.image_size / c.patch_size) + 1;
    const std::size_t mlp = c.mlp_ratio * d;
    std::size_t per_layer = 2 * d;                 // ln1
    per_layer += 4 * (d * d + d);                  // q, k, v, out projections
    per_layer += 2 * d;                            // ln2
    per_layer += d * mlp + mlp + mlp * d + d;      // mlp
    return patch * d + d                           // patch embedding
           + d                                     // class token
           + tokens * d                            // positional table
           + c.num_layers * per_layer + 2 * d      // final ln
           + d * c.num_classes + c.num_classes;    // head
}

}  // namespace

TEST_CASE("building twice from the same seed gives identical bytes") {
    ModelParams a = build_model(desk_config(), 42);
    ModelParams b = build_model(desk_config(), 42);
    CHECK(params_equal(a, b));
    ModelParams c = build_model(desk_config(), 43);
    CHECK(!params_equal(a, c));
}

TEST_CASE("config validation lists the violated constraint") {
    ModelConfig c = desk_config();
    c.num_heads = 5;  // 5 does not divide 64
    try {
        build_model(c, 1);
        FAIL("expected config_error");
    } catch (const config_error& e) {
        CHECK(std::string(e.what()).find("num_heads") != std::string::npos);
    }
    c = desk_config();
    c.patch_size = 5;
    CHECK_THROWS_AS(c.validate(), config_error);
    c = desk_config();
    c.block_mode = BlockMode::badres;
    c.poisoned_layer_index = 9;
    CHECK_THROWS_AS(c.validate(), config_error);
    c = desk_config();
    c.block_mode = BlockMode::badres;
    c.alpha = 1.5f;
    CHECK_THROWS_AS(c.validate(), config_error);
    c.alpha = -1.0f;
    CHECK_THROWS_AS(c.validate(), config_error);
    c.allow_test_alpha = true;
    CHECK_NOTHROW(c.validate());
    c = desk_config();
    c.block_mode = BlockMode::comparison;
    c.beta = 0.0f;
    CHECK_THROWS_AS(c.validate(), config_error);
}

TEST_CASE("parameter count matches the closed form") {
    ModelParams p = build_model(desk_config(), 7);
    CHECK(p.total_parameters() == expected_parameter_count(desk_config()));
    CHECK(p.total_parameters() == 205066);  // desk default, hand-summed

    // invariant across block modes: the modified block adds no parameters
    ModelConfig badres_cfg = desk_config();
    badres_cfg.block_mode = BlockMode::badres;
    ModelParams q = build_model(badres_cfg, 7);
    CHECK(q.total_parameters() == p.total_parameters());

    ModelConfig t = tiny_config();
    CHECK(build_model(t, 7).total_parameters() == expected_parameter_count(t));
}

TEST_CASE("residual combination arithmetic") {
    Tensor f({2}, {1, 2});
    Tensor z({2}, {0.4f, 0.6f});

    Tensor badres_half = combine_residual(f, z, BlockMode::badres, 0.5f, 0.0f);
    CHECK(badres_half.data()[0] == Catch::Approx(0.8));
    CHECK(badres_half.data()[1] == Catch::Approx(1.7));

    // alpha = 0 removes the shortcut entirely
    Tensor badres_zero = combine_residual(f, z, BlockMode::badres, 0.0f, 0.0f);
    CHECK(std::memcmp(badres_zero.data().data(), f.data().data(), 2 * sizeof(float)) == 0);

    // alpha = -1 is exactly the clean combination
    Tensor clean = combine_residual(f, z, BlockMode::clean, 0.0f, 0.0f);
    Tensor escape = combine_residual(f, z, BlockMode::badres, -1.0f, 0.0f);
    CHECK(std::memcmp(clean.data().data(), escape.data().data(), 2 * sizeof(float)) == 0);

    Tensor comparison = combine_residual(f, z, BlockMode::comparison, 0.0f, 0.5f);
    CHECK(comparison.data()[0] == Catch::Approx(0.4 - 0.5));
    CHECK(comparison.data()[1] == Catch::Approx(0.6 - 1.0));
}

TEST_CASE("clean forward equals badres forward with alpha -1") {
    ModelConfig clean_cfg = tiny_config();
    ModelParams clean_params = build_model(clean_cfg, 11);

    ModelConfig escape_cfg = tiny_config();
    escape_cfg.block_mode = BlockMode::badres;
    escape_cfg.poisoned_layer_index = 1;
    escape_cfg.alpha = -1.0f;
    escape_cfg.allow_test_alpha = true;
    ModelParams escape_params = build_model(escape_cfg, 11);  // same seed, same weights

    std::mt19937 g = rng::make_engine(13);
    Tensor images = Tensor::uniform({3, 1, 28, 28}, 0.0f, 1.0f, g);
    Tensor a = model_forward(clean_params, images);
    Tensor b = model_forward(escape_params, images);
    CHECK(std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0);
}

TEST_CASE("forward is pure and batch-order equivariant") {
    ModelParams params = build_model(tiny_config(), 3);
    std::mt19937 g = rng::make_engine(29);
    Tensor images = Tensor::uniform({4, 1, 28, 28}, 0.0f, 1.0f, g);

    Tensor l1 = model_forward(params, images);
    Tensor l2 = model_forward(params, images);
    REQUIRE(l1.shape() == Shape{4, 10});
    CHECK(std::memcmp(l1.data().data(), l2.data().data(), l1.numel() * sizeof(float)) == 0);

    // reversed batch gives reversed logits rows, bit for bit
    std::vector<float> rev(images.numel());
    const std::size_t px = 28 * 28;
    for (std::size_t i = 0; i < 4; ++i)
        std::memcpy(rev.data() + i * px, images.data().data() + (3 - i) * px,
                    px * sizeof(float));
    Tensor lrev = model_forward(params, Tensor({4, 1, 28, 28}, std::move(rev)));
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(std::memcmp(lrev.data().data() + i * 10,
                          l1.data().data() + (3 - i) * 10, 10 * sizeof(float)) == 0);
}

TEST_CASE("zero images give finite logits") {
    ModelParams params = build_model(desk_config(), 1);
    Tensor logits = model_forward(params, Tensor::zeros({2, 1, 28, 28}));
    CHECK(logits.all_finite());
}

TEST_CASE("forward rejects mismatched image shapes") {
    ModelParams params = build_model(tiny_config(), 1);
    CHECK_THROWS_AS(model_forward(params, Tensor::zeros({2, 1, 14, 14})), usage_error);
    CHECK_THROWS_AS(model_forward(params, Tensor::zeros({2, 28, 28})), usage_error);
}

TEST_CASE("block forward validates mode parameters") {
    ModelParams params = build_model(tiny_config(), 1);
    Tensor x = Tensor::zeros({1, params.config.tokens(), params.config.embed_dim});
    CHECK_THROWS_AS(
        residual_block_forward(params, 0, x, BlockMode::badres, 1.5f, 0.5f), config_error);
    CHECK_THROWS_AS(
        residual_block_forward(params, 0, x, BlockMode::comparison, 0.5f, 2.0f), config_error);
    CHECK_NOTHROW(residual_block_forward(params, 0, x, BlockMode::badres, 0.5f, 0.5f));
}

TEST_CASE("model gradients match finite differences on sampled coordinates") {
    ModelConfig cfg = tiny_config();
    cfg.block_mode = BlockMode::badres;
    cfg.poisoned_layer_index = 1;
    ModelParams params = build_model(cfg, 5);

    std::mt19937 g = rng::make_engine(55);
    Tensor images = Tensor::uniform({2, 1, 28, 28}, 0.0f, 1.0f, g);
    const std::vector<int> labels = {3, 7};

    auto loss_value = [&]() {
        const ModelParams frozen = params.frozen_copy();
        return static_cast<double>(
            cross_entropy_with_logits(model_forward(frozen, images), labels).item());
    };

    params.zero_grads();
    Tensor loss = cross_entropy_with_logits(model_forward(params, images), labels);
    backward(loss);

    const double eps = 1e-3;
    std::mt19937 pick = rng::make_engine(66);
    for (const auto& [name, t] : params.entries) {
        // two sampled coordinates per tensor
        for (int rep = 0; rep < 2; ++rep) {
            const std::size_t i = rng::uniform_index(pick, t.numel());
            const float saved = t.data()[i];
            const float analytic = t.has_grad() ? t.grad()[i] : 0.0f;
            const_cast<Tensor&>(t).mutable_data()[i] = static_cast<float>(saved + eps);
            const double up = loss_value();
            const_cast<Tensor&>(t).mutable_data()[i] = static_cast<float>(saved - eps);
            const double down = loss_value();
            const_cast<Tensor&>(t).mutable_data()[i] = saved;
            const double central = (up - down) / (2.0 * eps);
            const double rel =
                std::abs(analytic - central) / std::max(1.0, std::abs(central));
            INFO(name << "[" << i << "] analytic " << analytic << " central " << central);
            CHECK(rel < 1e-2);
        }
    }
}
