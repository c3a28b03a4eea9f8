#include <cmath>

#include "doctest.h"
#include "msca/image_io.hpp"
#include "msca/manip.hpp"
#include "test_util.hpp"

using namespace msca;
using msca::testing::random_tensor;

namespace {

ModelConfig small_model() {
    ModelConfig cfg = ModelConfig::tiny(2, 4);
    cfg.image_channels = 8;
    cfg.label_width = 6;
    cfg.backbone_channels = {6, 8, 8};
    cfg.attention_slots = {4, 4, 4};
    cfg.decoder_channels = {6, 8, 8};
    cfg.spade_hidden = 4;
    return cfg;
}

Exemplar<double> scene_exemplar(uint64_t seed, int classes = 4, int64_t extent = 16) {
    auto s = make_synthetic_dataset<double>(1, classes, extent, seed)[0];
    return {s.image, s.labels};
}

double max_diff(const Tensor<double>& a, const Tensor<double>& b) { return max_abs_diff(a, b); }

}  // namespace

TEST_CASE("factor clamping and Hann window") {
    CHECK(clamp_factor(0.0) == kInterpEps);
    CHECK(clamp_factor(1.0) == 1.0 - kInterpEps);
    CHECK(clamp_factor(0.3) == 0.3);
    CHECK_THROWS_AS(clamp_factor(std::nan("")), std::invalid_argument);
    const auto w = hann_window(8);
    for (std::size_t i = 0; i < w.size(); ++i) {
        CHECK(w[i] > 0);
        CHECK(w[i] <= 1);
        CHECK(w[i] == doctest::Approx(w[w.size() - 1 - i]).epsilon(1e-12));
    }
    CHECK(w[3] > w[0]);
}

TEST_CASE("duplicate exemplars reproduce single-exemplar synthesis") {
    const auto model = GeneratorModel<double>::init(small_model(), 5);
    const auto ex = scene_exemplar(1);
    const auto target = scene_exemplar(2).labels;
    const Tensor<double> single = synthesize(model, target, ex.image, ex.labels);
    for (double a : {0.1, 0.5, 0.9}) {
        const auto r = interpolate_styles(model, target, ex, ex, a);
        CHECK(max_diff(r.image, single) <= 1e-4);
        // joint softmax: every slot carries mass 1, a of it on the left copy
        for (const auto& alpha : r.joint_alpha) {
            const int64_t k = alpha.dim(0), h = alpha.dim(1), w2 = alpha.dim(2), w = w2 / 2;
            for (int64_t s = 0; s < k; ++s) {
                double left = 0, total = 0;
                for (int64_t y = 0; y < h; ++y)
                    for (int64_t x = 0; x < w2; ++x) {
                        total += alpha.at(s, y, x);
                        if (x < w) left += alpha.at(s, y, x);
                    }
                CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
                CHECK(left == doctest::Approx(a).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("joint softmax conserves mass with distinct exemplars") {
    const auto model = GeneratorModel<double>::init(small_model(), 6);
    const auto r = interpolate_styles(model, scene_exemplar(3).labels, scene_exemplar(4), scene_exemplar(5), 0.3);
    REQUIRE(r.joint_alpha.size() == 3);
    for (const auto& alpha : r.joint_alpha) {
        for (int64_t s = 0; s < alpha.dim(0); ++s) {
            double total = 0;
            for (int64_t i = 0; i < alpha.dim(1) * alpha.dim(2); ++i) total += alpha[s * alpha.dim(1) * alpha.dim(2) + i];
            CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    for (const auto& g : r.gate)
        for (int64_t k = 0; k < g.numel(); ++k) {
            CHECK(g[k] > 0);
            CHECK(g[k] < 1);
        }
}

TEST_CASE("interpolation endpoint approaches the single exemplar") {
    const auto model = GeneratorModel<double>::init(small_model(), 7);
    const auto target = scene_exemplar(8).labels;
    const auto ex2 = scene_exemplar(9), ex3 = scene_exemplar(10);
    const Tensor<double> only2 = synthesize(model, target, ex2.image, ex2.labels);
    const Tensor<double> only3 = synthesize(model, target, ex3.image, ex3.labels);
    const double hi = max_diff(interpolate_styles(model, target, ex2, ex3, 1.0).image, only2);
    const double lo = max_diff(interpolate_styles(model, target, ex2, ex3, 0.0).image, only3);
    MESSAGE("endpoint max pixel deviation: a=1-eps ", hi, ", a=eps ", lo);
    CHECK(hi <= 2e-2);
    CHECK(lo <= 2e-2);
}

TEST_CASE("joint bank is a per-slot blend of the single-exemplar banks") {
    // restricted to one half, the joint softmax is that exemplar's own softmax
    // rescaled, so slot k mixes the two banks by its left mass m_k
    const ModelConfig cfg = small_model();
    const auto model = GeneratorModel<double>::init(cfg, 11);
    const auto target = scene_exemplar(12).labels;
    const auto ex2 = scene_exemplar(30), ex3 = scene_exemplar(31);
    const auto r = interpolate_styles(model, target, ex2, ex3, 0.35);
    std::vector<AttentionPack<double>> p2, p3;
    Tape<double> t2, t3;
    synthesize(model, target, ex2.image, ex2.labels, &p2, &t2);
    synthesize(model, target, ex3.image, ex3.labels, &p3, &t3);
    for (std::size_t s = 0; s < r.bank.size(); ++s) {
        const auto& alpha = r.joint_alpha[s];
        const int64_t k = alpha.dim(0), h = alpha.dim(1), w = alpha.dim(2) / 2;
        const auto& b2 = p2[s].bank.value();
        const auto& b3 = p3[s].bank.value();
        for (int64_t slot = 0; slot < k; ++slot) {
            double m = 0;
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) m += alpha.at(slot, y, x);
            CHECK(m > 0);
            CHECK(m < 1);
            for (int64_t n = 0; n < b2.dim(0); ++n) {
                const double want = m * b2[n * k + slot] + (1 - m) * b3[n * k + slot];
                REQUIRE(r.bank[s][n * k + slot] == doctest::Approx(want).epsilon(1e-12));
            }
        }
        for (int64_t slot = 0; slot < k; ++slot)
            CHECK(r.gate[s][slot] ==
                  doctest::Approx(0.35 * p2[s].gate.value()[slot] + 0.65 * p3[s].gate.value()[slot]).epsilon(1e-12));
    }
}

TEST_CASE("interpolation rejects exemplars of different extent") {
    const auto model = GeneratorModel<double>::init(small_model(), 1);
    const auto ex = scene_exemplar(1);
    const auto big = scene_exemplar(2, 4, 32);
    CHECK_THROWS_AS(interpolate_styles(model, ex.labels, ex, big, 0.5), ShapeError);
    CHECK_THROWS_AS(spatial_interpolate(model, ex.labels, ex, big, Tensor<double>({1, 16, 16}, 0.5)), ShapeError);
}

TEST_CASE("spatial interpolation: constant maps and bank mixing") {
    const ModelConfig cfg = small_model();
    const auto model = GeneratorModel<double>::init(cfg, 13);
    const auto target = scene_exemplar(14).labels;
    const auto ex2 = scene_exemplar(15), ex3 = scene_exemplar(16);
    const auto ones = Tensor<double>({1, 16, 16}, 1.0);
    CHECK(max_diff(spatial_interpolate(model, target, ex2, ex3, ones), synthesize(model, target, ex2.image, ex2.labels)) <=
          1e-12);
    CHECK(max_diff(spatial_interpolate(model, target, ex2, ex3, Tensor<double>({1, 16, 16})),
                   synthesize(model, target, ex3.image, ex3.labels)) <= 1e-12);

    for (double t : {0.5, 0.2}) {
        // oracle: mix the two masked banks, then one channel aggregation
        Tape<double> tape;
        const auto bound = bind_params(tape, model.params, false);
        const Backbone<double> backbone = model.encoder;
        const auto fx2 = extract_image_features(tape.constant(ex2.image), backbone, bound, cfg);
        const auto fx3 = extract_image_features(tape.constant(ex3.image), backbone, bound, cfg);
        const auto fc2 = extract_label_features(tape, ex2.labels, bound, cfg);
        const auto fc3 = extract_label_features(tape, ex3.labels, bound, cfg);
        const auto fc1 = extract_label_features(tape, target, bound, cfg);
        FeaturePyramid<double> aligned;
        for (int s = 0; s < cfg.scales(); ++s) {
            const auto i = static_cast<std::size_t>(s);
            const auto w = msca_weights(bound, s);
            const auto v2 = msca_forward(fx2[i], fc1[i], fc2[i], w).pack.masked_bank;
            const auto v3 = msca_forward(fx3[i], fc1[i], fc3[i], w).pack.masked_bank;
            const auto mixed = add(scale(v2, t), scale(v3, 1 - t));
            aligned.levels.push_back(channel_aggregate(mixed, channel_attention(fc1[i], w.psi)));
        }
        const auto oracle = decode(aligned, fc1, bound, cfg).value();
        const auto got = spatial_interpolate(model, target, ex2, ex3, Tensor<double>({1, 16, 16}, t));
        CHECK(max_diff(got, oracle) <= 1e-6);
    }
}

TEST_CASE("spatial interpolation: ramp and weight validation") {
    const auto model = GeneratorModel<double>::init(small_model(), 17);
    const auto ramp = horizontal_ramp<double>(16, 16);
    CHECK(ramp.at(0, 3, 0) == 0.0);
    CHECK(ramp.at(0, 3, 15) == 1.0);
    CHECK(ramp.at(0, 9, 5) == doctest::Approx(5.0 / 15.0));
    const auto target = scene_exemplar(18).labels;
    const auto ex2 = scene_exemplar(19), ex3 = scene_exemplar(20);
    const auto out = spatial_interpolate(model, target, ex2, ex3, ramp);
    CHECK(out.shape() == Shape{3, 16, 16});
    CHECK(out.all_finite());

    auto bad = ramp;
    bad.at(0, 2, 2) = 1.5;
    CHECK_THROWS_AS(spatial_interpolate(model, target, ex2, ex3, bad), std::invalid_argument);
    bad.at(0, 2, 2) = std::nan("");
    CHECK_THROWS_AS(spatial_interpolate(model, target, ex2, ex3, bad), std::invalid_argument);
    CHECK_THROWS_AS(spatial_interpolate(model, target, ex2, ex3, Tensor<double>({1, 8, 8}, 0.5)), ShapeError);
}

TEST_CASE("extrapolation: coverage, verbatim center and seeded sites") {
    const auto model = GeneratorModel<double>::init(small_model(), 21);
    const auto global = make_synthetic_dataset<double>(1, 4, 32, 22)[0];
    const Exemplar<double> center{crop_image(global.image, 8, 8, 16, 16), global.labels.crop(8, 8, 16, 16)};
    const auto r = extrapolate(model, center, global.labels, 3);
    CHECK(r.image.shape() == Shape{3, 32, 32});
    REQUIRE(r.sites.size() == 4 + kExtrapolationRandomSites);
    for (const Rect& s : r.sites) {
        CHECK(s.y >= 0);
        CHECK(s.x >= 0);
        CHECK(s.y + 16 <= 32);
        CHECK(s.x + 16 <= 32);
    }
    double min_w = 1e300;
    for (int64_t i = 0; i < r.weight.numel(); ++i) min_w = std::min(min_w, r.weight[i]);
    CHECK(min_w > 0);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < 16; ++y)
            for (int64_t x = 0; x < 16; ++x) REQUIRE(r.image.at(c, 8 + y, 8 + x) == center.image.at(c, y, x));
    CHECK(r.image.all_finite());

    const auto again = extrapolate(model, center, global.labels, 3);
    CHECK(again.image.bit_equal(r.image));
    const auto other = extrapolate(model, center, global.labels, 4);
    CHECK_FALSE(other.image.bit_equal(r.image));

    for (uint64_t seed : {3, 5, 9}) {
        const double ratio = seam_ratio(extrapolate(model, center, global.labels, seed));
        MESSAGE("seam ratio, seed ", seed, ": ", ratio);
        CHECK(ratio < 2.0);
    }
    CHECK_THROWS_AS(extrapolate(model, center, global.labels.crop(0, 0, 32, 24), 3), std::invalid_argument);
}

TEST_CASE("style swap grid") {
    const auto model = GeneratorModel<double>::init(small_model(), 23);
    const std::vector<Exemplar<double>> scenes = {scene_exemplar(24), scene_exemplar(25), scene_exemplar(26)};
    const auto grid = style_swap_grid(model, scenes);
    CHECK(grid.shape() == Shape{3, 48, 48});
    for (int64_t r = 0; r < 3; ++r)
        for (int64_t c = 0; c < 3; ++c) {
            const auto& t = scenes[static_cast<std::size_t>(r)];
            const auto& s = scenes[static_cast<std::size_t>(c)];
            const auto cell = synthesize(model, t.labels, s.image, s.labels);
            CHECK(crop_image(grid, r * 16, c * 16, 16, 16).bit_equal(cell));
        }
    CHECK_THROWS_AS(style_swap_grid(model, {scenes[0]}), std::invalid_argument);
    CHECK_THROWS_AS(style_swap_grid(model, {scenes[0], scene_exemplar(27, 4, 32)}), ShapeError);
}
