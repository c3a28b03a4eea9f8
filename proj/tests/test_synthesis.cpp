#include <cmath>
#include <sstream>

#include "doctest.h"
#include "msca/checkpoint.hpp"
#include "msca/gradcheck.hpp"
#include "msca/image_io.hpp"
#include "msca/synthesis.hpp"
#include "test_util.hpp"

using namespace msca;
using msca::testing::random_tensor;

namespace {

LabelMap random_labels(int classes, int64_t h, int64_t w, std::mt19937_64& rng) {
    std::uniform_int_distribution<int32_t> d(0, classes - 1);
    std::vector<int32_t> g(static_cast<std::size_t>(h * w));
    for (auto& v : g) v = d(rng);
    return LabelMap(classes, h, w, std::move(g));
}

ParamSet<double> block_params(int cin, int cout, int cond, int hidden, uint64_t seed) {
    std::mt19937_64 rng(seed);
    ParamSet<double> p;
    auto conv = [&](const std::string& n, int co, int ci) {
        p[n + ".w"] = random_tensor({co, ci, 3, 3}, rng, -0.3, 0.3);
        p[n + ".b"] = random_tensor({co}, rng, -0.3, 0.3);
    };
    conv("shared", hidden, cond);
    conv("gamma", cin, hidden);
    conv("beta", cin, hidden);
    conv("conv1", cout, cin);
    conv("conv2", cout, cout);
    if (cin != cout) p["skip.w"] = random_tensor({cout, cin}, rng);
    return p;
}

SpadeWeights<double> block_weights(const BoundParams<double>& b) {
    SpadeWeights<double> w{b["shared.w"], b["shared.b"], b["gamma.w"], b["gamma.b"], b["beta.w"],
                           b["beta.b"],   b["conv1.w"],  b["conv1.b"], b["conv2.w"], b["conv2.b"],
                           std::nullopt};
    if (b.contains("skip.w")) w.skip_w = b["skip.w"];
    return w;
}

}  // namespace

TEST_CASE("normalization inside the block has zero mean and unit variance") {
    std::mt19937_64 rng(1);
    auto p = block_params(4, 4, 3, 2, 2);
    for (const char* n : {"gamma.w", "gamma.b", "beta.w", "beta.b"}) p[n] = Tensor<double>::zeros(p[n].shape());
    for (int trial = 0; trial < 5; ++trial) {
        Tape<double> tape;
        const auto h = random_tensor({4, 8, 8}, rng, -3, 5);
        const auto m = spade_modulate(tape.constant(h), tape.constant(random_tensor({3, 8, 8}, rng)),
                                      block_weights(bind_params(tape, p, false)))
                           .value();
        for (int64_t c = 0; c < 4; ++c) {
            double mean = 0, var = 0;
            for (int64_t i = 0; i < 64; ++i) mean += m[c * 64 + i] / 64;
            for (int64_t i = 0; i < 64; ++i) var += (m[c * 64 + i] - mean) * (m[c * 64 + i] - mean) / 64;
            CHECK(std::abs(mean) <= 1e-5);
            CHECK(std::abs(var - 1) <= 1e-4);
        }
    }
}

TEST_CASE("constant features normalize to zero so modulation returns beta") {
    std::mt19937_64 rng(3);
    const auto p = block_params(2, 2, 3, 2, 4);
    Tape<double> tape;
    const auto b = bind_params(tape, p, false);
    const auto w = block_weights(b);
    const auto cond = tape.constant(random_tensor({3, 8, 8}, rng));
    const auto m = spade_modulate(tape.constant(Tensor<double>({2, 8, 8}, 0.75)), cond, w).value();
    const auto beta = conv3x3(leaky_relu(conv3x3(cond, w.shared_w, w.shared_b)), w.beta_w, w.beta_b).value();
    CHECK(m.bit_equal(beta));
}

TEST_CASE("block forward equals a step-by-step recomputation") {
    std::mt19937_64 rng(5);
    for (int cout : {3, 5}) {
        const auto p = block_params(3, cout, 4, 2, 6);
        Tape<double> tape;
        const auto w = block_weights(bind_params(tape, p, false));
        const auto h = tape.constant(random_tensor({3, 8, 8}, rng));
        const auto cond = tape.constant(random_tensor({4, 8, 8}, rng));
        const auto out = spade_block_forward(h, cond, w).value();

        const auto hid = leaky_relu(conv3x3(cond, w.shared_w, w.shared_b));
        const auto gamma = conv3x3(hid, w.gamma_w, w.gamma_b).value();
        const auto beta = conv3x3(hid, w.beta_w, w.beta_b).value();
        const auto normed = instance_norm(h).value();
        Tensor<double> mod(normed.shape());
        for (int64_t i = 0; i < mod.numel(); ++i) mod[i] = normed[i] * (1 + gamma[i]) + beta[i];
        const auto a = conv3x3(leaky_relu(tape.constant(mod)), w.conv1_w, w.conv1_b);
        const auto main = conv3x3(leaky_relu(a), w.conv2_w, w.conv2_b).value();
        const auto skip = cout == 3 ? h.value() : conv1x1(h, *w.skip_w).value();
        Tensor<double> expect(main.shape());
        for (int64_t i = 0; i < expect.numel(); ++i) expect[i] = main[i] + skip[i];
        CHECK(max_abs_diff(out, expect) <= 1e-14);
        CHECK(out.shape() == Shape{cout, 8, 8});
    }
}

TEST_CASE("block rejects a conditioning map of a different extent") {
    std::mt19937_64 rng(7);
    const auto p = block_params(2, 2, 3, 2, 8);
    Tape<double> tape;
    const auto w = block_weights(bind_params(tape, p, false));
    CHECK_THROWS_AS(spade_block_forward(tape.constant(random_tensor({2, 8, 8}, rng)),
                                        tape.constant(random_tensor({3, 4, 4}, rng)), w),
                    ShapeError);
}

TEST_CASE("decode: extent, range and constant output from zero weights") {
    const ModelConfig cfg = ModelConfig::tiny(2, 3);
    std::mt19937_64 rng(9);
    auto params = init_decoder_params<double>(cfg, rng);
    Tape<double> tape;
    FeaturePyramid<double> aligned, structure;
    for (int s = 0; s < cfg.scales(); ++s) {
        aligned.levels.push_back(tape.constant(random_tensor({cfg.image_channels, 16 >> s, 12 >> s}, rng, -4, 4)));
        structure.levels.push_back(tape.constant(random_tensor({cfg.label_width, 16 >> s, 12 >> s}, rng, -4, 4)));
    }
    const auto img = decode(aligned, structure, bind_params(tape, params, false), cfg).value();
    REQUIRE(img.shape() == Shape{3, 16, 12});
    for (int64_t i = 0; i < img.numel(); ++i) CHECK(std::abs(img[i]) <= 1.0);

    for (auto& [name, t] : params) t = Tensor<double>::zeros(t.shape());
    params["head.b"] = Tensor<double>({3}, {0.5, -1.0, 2.0});
    const auto flat = decode(aligned, structure, bind_params(tape, params, false), cfg).value();
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t i = 0; i < 16 * 12; ++i) CHECK(flat[c * 192 + i] == std::tanh(params["head.b"][c]));

    FeaturePyramid<double> short_pyr{{aligned[0]}};
    CHECK_THROWS_AS(decode(short_pyr, structure, bind_params(tape, params, false), cfg), ShapeError);
}

TEST_CASE("default decoder channel plan is 128,96,64,48,32 from coarse to fine") {
    const ModelConfig cfg;
    std::mt19937_64 rng(10);
    const auto p = init_decoder_params<float>(cfg, rng);
    CHECK(p.at(decoder_name(4, "conv1.w")).shape() == Shape{128, 64, 3, 3});
    CHECK(p.at(decoder_name(3, "conv1.w")).shape() == Shape{96, 128, 3, 3});
    CHECK(p.at(decoder_name(0, "conv1.w")).shape() == Shape{32, 48, 3, 3});
    CHECK(p.at("head.w").shape() == Shape{3, 32, 3, 3});
}

TEST_CASE("generator: purity, range and gradient reach") {
    const ModelConfig cfg = ModelConfig::tiny(2, 3);
    const auto model = GeneratorModel<double>::init(cfg, 11);
    std::mt19937_64 rng(12);
    const auto c1 = random_labels(3, 16, 16, rng);
    const auto c2 = random_labels(3, 16, 16, rng);
    const auto x2 = random_tensor({3, 16, 16}, rng);

    const auto a = synthesize(model, c1, x2, c2);
    const auto b = synthesize(model, c1, x2, c2);
    CHECK(a.bit_equal(b));
    REQUIRE(a.shape() == Shape{3, 16, 16});
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a[i]) <= 1.0);

    Tape<double> tape;
    const auto bound = bind_params(tape, model.params, true);
    const auto out = generator_forward(c1, tape.constant(x2), c2, bound, cfg, Backbone<double>(model.encoder));
    REQUIRE(out.packs.size() == 3);
    const auto proj = random_tensor({3, 16, 16}, rng);
    const auto grads = tape.backward(sum(mul(out.image, tape.constant(proj))));
    for (const auto& [name, v] : bound.vars()) {
        const auto g = grads.wrt(v);
        double mag = 0;
        for (int64_t i = 0; i < g.numel(); ++i) mag += std::abs(g[i]);
        INFO(name);
        CHECK(mag > 0);
    }
}

TEST_CASE("generator rejects mismatched exemplar and indivisible extents") {
    const ModelConfig cfg = ModelConfig::tiny(2, 3);
    const auto model = GeneratorModel<double>::init(cfg, 13);
    std::mt19937_64 rng(14);
    CHECK_THROWS_AS(synthesize(model, random_labels(3, 8, 8, rng), random_tensor({3, 8, 8}, rng),
                               random_labels(3, 8, 12, rng)),
                    ShapeError);
    CHECK_THROWS_AS(synthesize(model, random_labels(3, 10, 8, rng), random_tensor({3, 8, 8}, rng),
                               random_labels(3, 8, 8, rng)),
                    ShapeError);
}

TEST_CASE("full generator passes grad_check at 8x8") {
    ModelConfig cfg = ModelConfig::tiny(3, 3);
    const auto model = GeneratorModel<double>::init(cfg, 15);
    std::mt19937_64 rng(16);
    const auto c1 = random_labels(3, 8, 8, rng);
    const auto c2 = random_labels(3, 8, 8, rng);
    const auto x2 = random_tensor({3, 8, 8}, rng);
    const auto proj = random_tensor({3, 8, 8}, rng);
    std::vector<std::string> names;
    std::vector<Tensor<double>> thetas{x2};
    for (const auto& [name, t] : model.params) {
        names.push_back(name);
        // Random biases keep activations away from the leaky_relu kink.
        thetas.push_back(t.numel() > 0 ? random_tensor(t.shape(), rng, -0.8, 0.8) : t);
    }
    const Backbone<double> backbone = model.encoder;
    // tanh and instance norm curve enough that a 1e-4 step leaves O(eps^2)
    // truncation error near 3e-5; 1e-5 keeps it below 1e-6.
    GradCheckOptions opts;
    opts.eps = 1e-5;
    const auto rep = grad_check(
        [&](Tape<double>& tape, const std::vector<Var<double>>& v) {
            BoundParams<double> bound;
            for (std::size_t i = 0; i < names.size(); ++i) bound.insert(names[i], v[i + 1]);
            const auto out = generator_forward(c1, v[0], c2, bound, cfg, backbone);
            return sum(mul(out.image, tape.constant(proj)));
        },
        thetas, opts);
    INFO("max rel error " << rep.max_rel_error << " over " << rep.coords_checked << " coordinates");
    CHECK(rep.passed);
    CHECK(rep.max_rel_error <= 1e-5);
}

TEST_CASE("generator parameters round-trip through a checkpoint") {
    ModelConfig cfg = ModelConfig::tiny(2, 4);
    cfg.decoder_channels = {3, 4, 5};
    cfg.attention_slots = {1, 2, 3};
    const auto model = GeneratorModel<float>::init(cfg, 17);
    std::stringstream ss;
    write_checkpoint(ss, model.all_params());
    const auto restored = GeneratorModel<float>::from_params(read_checkpoint<float>(ss));
    CHECK(restored.cfg.levels == 2);
    CHECK(restored.cfg.classes == 4);
    CHECK(restored.cfg.decoder_channels == cfg.decoder_channels);
    CHECK(restored.cfg.attention_slots == cfg.attention_slots);
    CHECK(restored.cfg.spade_hidden == cfg.spade_hidden);
    REQUIRE(restored.params.size() == model.params.size());
    for (const auto& [name, t] : model.params) CHECK(t.bit_equal(restored.params.at(name)));

    std::mt19937_64 rng(18);
    const auto c = random_labels(4, 8, 8, rng);
    const auto x = random_tensor<float>({3, 8, 8}, rng);
    CHECK(synthesize(model, c, x, c).bit_equal(synthesize(restored, c, x, c)));

    ParamSet<float> missing = model.all_params();
    missing.erase("backbone.s1.w");
    CHECK_THROWS_AS(GeneratorModel<float>::from_params(missing), std::out_of_range);
}

TEST_CASE("discriminator: zero weights, stride arithmetic and manual recompute") {
    const ModelConfig cfg = ModelConfig::tiny(2, 3);
    std::mt19937_64 rng(19);
    auto params = init_discriminator_params<double>(cfg, rng);
    for (auto& [name, t] : params)
        if (name.size() > 2 && name.substr(name.size() - 2) == ".b") t = random_tensor(t.shape(), rng);
    const auto cp = random_labels(3, 16, 16, rng);
    const auto cq = random_labels(3, 8, 8, rng);
    const auto xq = random_tensor({3, 8, 8}, rng);
    Tape<double> tape;
    const auto bound = bind_params(tape, params, false);
    const auto x = tape.constant(random_tensor({3, 16, 16}, rng));
    const auto out = discriminator_forward(x, cp, xq, cq, bound, cfg);
    CHECK(out.score.shape() == Shape{1, 4, 4});
    REQUIRE(out.features.size() == 2);

    Var<double> h = concat_channels<double>({x, tape.constant(cp.one_hot<double>()),
                                             tape.constant(resize_bilinear(xq, 16, 16)),
                                             tape.constant(cq.resized(16, 16).one_hot<double>())});
    for (int j = 0; j < 2; ++j) {
        const std::string p = "disc.s" + std::to_string(j);
        h = leaky_relu(conv3x3(h, bound[p + ".w"], bound[p + ".b"], 2));
        CHECK(h.value().bit_equal(out.features[static_cast<std::size_t>(j)].value()));
    }
    CHECK(conv3x3(h, bound["disc.out.w"], bound["disc.out.b"]).value().bit_equal(out.score.value()));

    const auto big = discriminator_forward(tape.constant(random_tensor({3, 32, 32}, rng)),
                                           random_labels(3, 32, 32, rng), xq, cq, bound, cfg);
    CHECK(big.score.shape() == Shape{1, 8, 8});

    for (auto& [name, t] : params) t = Tensor<double>::zeros(t.shape());
    const auto zero = discriminator_forward(x, cp, xq, cq, bind_params(tape, params, false), cfg);
    for (int64_t i = 0; i < zero.score.value().numel(); ++i) CHECK(zero.score.value()[i] == 0.0);

    CHECK_THROWS_AS(discriminator_forward(x, cq, xq, cq, bound, cfg), ShapeError);
    CHECK_THROWS_AS(discriminator_forward(tape.constant(random_tensor({3, 6, 6}, rng)),
                                          random_labels(3, 6, 6, rng), xq, cq, bound, cfg),
                    ShapeError);
}

TEST_CASE("default discriminator has four stride-2 stages") {
    const ModelConfig cfg;
    std::mt19937_64 rng(20);
    const auto p = init_discriminator_params<float>(cfg, rng);
    CHECK(p.count("disc.s3.w") == 1);
    CHECK(p.count("disc.s4.w") == 0);
    CHECK(p.at("disc.s0.w").dim(1) == 2 * (3 + cfg.classes));
}
