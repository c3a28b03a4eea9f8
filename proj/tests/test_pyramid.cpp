#include <filesystem>

#include "doctest.h"
#include "msca/checkpoint.hpp"
#include "msca/image_io.hpp"
#include "msca/pyramid.hpp"
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

}  // namespace

TEST_CASE("label map validation and one-hot encoding") {
    CHECK_THROWS_AS(LabelMap(3, 2, 2, {0, 1, 3, 0}), std::out_of_range);
    CHECK_THROWS_AS(LabelMap(3, 2, 2, {0, 1, -1, 0}), std::out_of_range);
    CHECK_THROWS_AS(LabelMap(3, 2, 2, {0, 1, 2}), ShapeError);
    std::mt19937_64 rng(1);
    const auto c = random_labels(5, 6, 7, rng);
    const auto oh = c.one_hot<double>();
    REQUIRE(oh.shape() == Shape{5, 6, 7});
    for (int64_t y = 0; y < 6; ++y)
        for (int64_t x = 0; x < 7; ++x) {
            double s = 0;
            for (int64_t k = 0; k < 5; ++k) s += oh.at(k, y, x);
            CHECK(s == 1.0);
            CHECK(oh.at(c.at(y, x), y, x) == 1.0);
        }
}

TEST_CASE("label transforms") {
    const LabelMap c(3, 2, 3, {0, 1, 2, 2, 1, 0});
    CHECK(c.flipped_horizontal() == LabelMap(3, 2, 3, {2, 1, 0, 0, 1, 2}));
    CHECK(c.crop(1, 1, 1, 2) == LabelMap(3, 1, 2, {1, 0}));
    CHECK(c.permuted({2, 0, 1}) == LabelMap(3, 2, 3, {2, 0, 1, 1, 0, 2}));
    CHECK(c.resized(4, 6).at(3, 5) == 0);
    CHECK(c.resized(4, 6).at(0, 0) == 0);
    CHECK(c.resized(4, 6).at(0, 2) == 1);
}

TEST_CASE("resize_label follows the top-left sampling rule") {
    std::mt19937_64 rng(2);
    const auto c = random_labels(4, 8, 8, rng);
    CHECK(resize_label<double>(c, 0).bit_equal(c.one_hot<double>()));

    const auto u = LabelMap::uniform(3, 8, 8, 2);
    for (int s = 0; s <= 3; ++s) CHECK(resize_label<double>(u, s).bit_equal(LabelMap::uniform(3, 8 >> s, 8 >> s, 2).one_hot<double>()));

    std::vector<int32_t> g(16);
    for (int64_t y = 0; y < 4; ++y)
        for (int64_t x = 0; x < 4; ++x) g[static_cast<std::size_t>(y * 4 + x)] = static_cast<int32_t>((x + y) % 2);
    const LabelMap checker(2, 4, 4, g);
    const auto r = resize_label<double>(checker, 1);
    REQUIRE(r.shape() == Shape{2, 2, 2});
    // Top-left pixels of each 2x2 block are (0,0),(0,2),(2,0),(2,2): all class 0.
    for (int64_t y = 0; y < 2; ++y)
        for (int64_t x = 0; x < 2; ++x) {
            CHECK(r.at(0, y, x) == 1.0);
            CHECK(r.at(1, y, x) == 0.0);
        }
    CHECK(checker.downsample(2) == LabelMap::uniform(2, 2, 2, 0));
}

TEST_CASE("image pyramid extents, identity compression and zero input") {
    const ModelConfig cfg;
    const ToyEncoder<double> enc = ToyEncoder<double>::random(cfg, 3);
    std::mt19937_64 rng(4);
    const auto img = random_tensor({3, 64, 64}, rng);

    SUBCASE("default config gives extents 64,32,16,8,4 with N channels") {
        const auto params = init_pyramid_params<double>(cfg, rng);
        Tape<double> tape;
        const auto b = bind_params(tape, params, false);
        const auto pyr = extract_image_features(tape.constant(img), Backbone<double>(enc), b, cfg);
        REQUIRE(pyr.size() == 5);
        for (int s = 0; s < 5; ++s) {
            CHECK(pyr[static_cast<std::size_t>(s)].shape() == Shape{32, 64 >> s, 64 >> s});
        }
    }
    SUBCASE("identity Wx slices reproduce the backbone") {
        ModelConfig c = cfg;
        c.backbone_channels.assign(5, 32);
        const ToyEncoder<double> e = ToyEncoder<double>::random(c, 5);
        ParamSet<double> params;
        for (int s = 0; s < 5; ++s) {
            Tensor<double> eye({32, 32}, 0.0);
            for (int64_t i = 0; i < 32; ++i) eye[i * 33] = 1.0;
            params.emplace(wx_name(s), eye);
        }
        Tape<double> tape;
        const auto b = bind_params(tape, params, false);
        const auto x = tape.constant(img);
        const auto pyr = extract_image_features(x, Backbone<double>(e), b, c);
        const auto raw = e.forward(x);
        for (std::size_t s = 0; s < 5; ++s) CHECK(pyr[s].value().bit_equal(raw[s].value()));
    }
    SUBCASE("zero image through a zero-bias encoder gives a zero pyramid") {
        const auto params = init_pyramid_params<double>(cfg, rng);
        Tape<double> tape;
        const auto b = bind_params(tape, params, false);
        const auto pyr = extract_image_features(tape.constant(Tensor<double>::zeros({3, 32, 32})),
                                                Backbone<double>(enc), b, cfg);
        for (const auto& lvl : pyr.levels)
            for (int64_t i = 0; i < lvl.value().numel(); ++i) CHECK(lvl.value()[i] == 0.0);
    }
    SUBCASE("indivisible extents are rejected") {
        const auto params = init_pyramid_params<double>(cfg, rng);
        Tape<double> tape;
        const auto b = bind_params(tape, params, false);
        CHECK_THROWS_AS(extract_image_features(tape.constant(Tensor<double>::zeros({3, 40, 64})),
                                               Backbone<double>(enc), b, cfg),
                        ShapeError);
    }
}

TEST_CASE("label features: recursion order, manual recompute and weight sharing") {
    const ModelConfig cfg;
    std::mt19937_64 rng(6);
    const auto params = init_pyramid_params<double>(cfg, rng);
    Tape<double> tape;
    const auto b = bind_params(tape, params, false);
    const auto c1 = random_labels(2, 64, 64, rng);
    const auto c2 = random_labels(2, 64, 64, rng);
    ModelConfig cfg2 = cfg;
    cfg2.classes = 2;
    std::mt19937_64 rng2(7);
    const auto params2 = init_pyramid_params<double>(cfg2, rng2);
    const auto b2 = bind_params(tape, params2, false);

    std::vector<int> trace;
    const auto f1 = extract_label_features(tape, c1, b2, cfg2, &trace);
    CHECK(trace == std::vector<int>{4, 3, 2, 1, 0});

    // Step-by-step recompute with the primitives.
    Var<double> prev;
    for (int s = 4; s >= 0; --s) {
        Var<double> in = tape.constant(resize_label<double>(c1, s));
        if (s < 4) in = concat_channels<double>({bilinear_up2(prev), in});
        prev = leaky_relu(conv1x1(in, b2[wc_name(s)]));
        CHECK(prev.value().bit_equal(f1[static_cast<std::size_t>(s)].value()));
    }

    const auto f2 = extract_label_features(tape, c2, b2, cfg2);
    const auto g2 = extract_label_features(tape, c2, b2, cfg2);
    const auto g1 = extract_label_features(tape, c1, b2, cfg2);
    for (std::size_t s = 0; s < 5; ++s) {
        CHECK(g1[s].value().bit_equal(f1[s].value()));
        CHECK(g2[s].value().bit_equal(f2[s].value()));
    }
    CHECK_THROWS_AS(extract_label_features(tape, c1, b, cfg), ShapeError);  // class count mismatch
}

TEST_CASE("zero label kernels give zero features") {
    const ModelConfig cfg = ModelConfig::tiny(2, 3);
    std::mt19937_64 rng(8);
    auto params = init_pyramid_params<double>(cfg, rng);
    for (auto& [name, t] : params)
        if (name.rfind("pyr.wc.", 0) == 0) t = Tensor<double>::zeros(t.shape());
    Tape<double> tape;
    const auto b = bind_params(tape, params, false);
    const auto f = extract_label_features(tape, LabelMap::uniform(3, 8, 8, 1), b, cfg);
    for (const auto& lvl : f.levels)
        for (int64_t i = 0; i < lvl.value().numel(); ++i) CHECK(lvl.value()[i] == 0.0);
}

TEST_CASE("label kernel width mismatch is rejected") {
    const ModelConfig cfg = ModelConfig::tiny(2, 3);
    std::mt19937_64 rng(9);
    auto params = init_pyramid_params<double>(cfg, rng);
    params[wc_name(1)] = Tensor<double>::zeros({3, 5});
    Tape<double> tape;
    const auto b = bind_params(tape, params, false);
    CHECK_THROWS_AS(extract_label_features(tape, LabelMap::uniform(3, 8, 8, 0), b, cfg), ShapeError);
}

TEST_CASE("permuting classes together with kernel columns leaves label features unchanged") {
    const ModelConfig cfg = ModelConfig::tiny(2, 4);
    std::mt19937_64 rng(10);
    const auto params = init_pyramid_params<double>(cfg, rng);
    const auto c = random_labels(4, 8, 8, rng);
    const std::vector<int32_t> perm{2, 3, 1, 0};
    ParamSet<double> permuted = params;
    for (int s = 0; s < cfg.scales(); ++s) {
        const Tensor<double>& w = params.at(wc_name(s));
        Tensor<double>& pw = permuted.at(wc_name(s));
        const int64_t rows = w.dim(0), cols = w.dim(1), off = cols - cfg.classes;
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t k = 0; k < cfg.classes; ++k)
                pw[r * cols + off + perm[static_cast<std::size_t>(k)]] = w[r * cols + off + k];
    }
    Tape<double> tape;
    const auto f = extract_label_features(tape, c, bind_params(tape, params, false), cfg);
    const auto g = extract_label_features(tape, c.permuted(perm), bind_params(tape, permuted, false), cfg);
    for (std::size_t s = 0; s < 3; ++s) CHECK(max_abs_diff(f[s].value(), g[s].value()) <= 1e-14);
}

TEST_CASE("pyramid levels do not alias") {
    const ModelConfig cfg = ModelConfig::tiny(2, 3);
    std::mt19937_64 rng(11);
    const auto params = init_pyramid_params<double>(cfg, rng);
    Tape<double> tape;
    const auto f = extract_label_features(tape, random_labels(3, 8, 8, rng), bind_params(tape, params, false), cfg);
    const Tensor<double> before = f[1].value();
    Tensor<double> copy = f[0].value();
    copy *= 0.0;
    copy[0] = 42.0;
    CHECK(f[1].value().bit_equal(before));
    CHECK(f[0].value()[0] != 42.0);
}

TEST_CASE("external features load per-scale files and check extents") {
    const auto dir = std::filesystem::temp_directory_path() / "msca_ext_features";
    std::filesystem::create_directories(dir);
    std::mt19937_64 rng(12);
    std::vector<Tensor<double>> levels;
    for (int s = 0; s <= 2; ++s) {
        levels.push_back(random_tensor({4, 8 >> s, 8 >> s}, rng));
        save_checkpoint<double>(dir / ("scale" + std::to_string(s) + ".bin"), {{"features", levels.back()}});
    }
    const auto ext = ExternalFeatures<double>::load(dir, 2);
    Tape<double> tape;
    const auto out = backbone_forward(Backbone<double>(ext), tape.constant(Tensor<double>::zeros({3, 8, 8})));
    REQUIRE(out.size() == 3);
    for (std::size_t s = 0; s < 3; ++s) CHECK(out[s].value().bit_equal(levels[s]));
    CHECK_THROWS_AS(ext.forward(tape.constant(Tensor<double>::zeros({3, 16, 16}))), ShapeError);
    CHECK_THROWS(ExternalFeatures<double>::load(dir, 3));
    std::filesystem::remove_all(dir);
}

TEST_CASE("image and label PNG round trips") {
    const auto dir = std::filesystem::temp_directory_path() / "msca_png_test";
    std::filesystem::create_directories(dir);
    Tensor<double> img({3, 4, 5});
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = (static_cast<double>(i % 256) * 2.0 / 255.0) - 1.0;
    write_image_png(dir / "img.png", img);
    const auto back = read_image_png<double>(dir / "img.png");
    CHECK(max_abs_diff(back, img) <= 1e-12);

    std::mt19937_64 rng(13);
    const auto c = random_labels(7, 5, 6, rng);
    write_label_png(dir / "lab.png", c);
    CHECK(read_label_png(dir / "lab.png", 7) == c);
    CHECK_THROWS_AS(read_label_png(dir / "lab.png", 3), std::out_of_range);
    CHECK_THROWS_AS(read_label_png(dir / "img.png", 7), ImageIoError);
    CHECK_THROWS_AS(read_image_png<double>(dir / "missing.png"), ImageIoError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("image transforms") {
    Tensor<double> img({3, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
    CHECK(flip_horizontal(img).bit_equal(Tensor<double>({3, 2, 2}, {1, 0, 3, 2, 5, 4, 7, 6, 9, 8, 11, 10})));
    CHECK(crop_image(img, 1, 0, 1, 2).bit_equal(Tensor<double>({3, 1, 2}, {2, 3, 6, 7, 10, 11})));
    const auto up = resize_bilinear(Tensor<double>({1, 1, 2}, {0.0, 1.0}), 1, 4);
    CHECK(up[0] == doctest::Approx(0.0));
    CHECK(up[1] == doctest::Approx(0.25));
    CHECK(up[2] == doctest::Approx(0.75));
    CHECK(up[3] == doctest::Approx(1.0));
    CHECK(resize_bilinear(img, 2, 2).bit_equal(img));
}
