#include <cstring>
#include <filesystem>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "msca/checkpoint.hpp"
#include "test_util.hpp"

using namespace msca;
using msca::testing::random_tensor;

namespace {

template <typename T>
ParamSet<T> sample_params(uint64_t seed) {
    std::mt19937_64 rng(seed);
    ParamSet<T> p;
    p.emplace("a.w", random_tensor<T>({3, 4, 3, 3}, rng));
    p.emplace("a.b", random_tensor<T>({3}, rng));
    p.emplace("scalar", Tensor<T>::scalar(T(-0.0)));
    Tensor<T> odd({2, 2});
    odd[0] = std::numeric_limits<T>::denorm_min();
    odd[1] = std::numeric_limits<T>::max();
    odd[2] = -std::numeric_limits<T>::infinity();
    odd[3] = std::numeric_limits<T>::quiet_NaN();
    p.emplace("odd", odd);
    return p;
}

template <typename T>
void check_bit_equal(const ParamSet<T>& a, const ParamSet<T>& b) {
    REQUIRE(a.size() == b.size());
    for (const auto& [name, t] : a) {
        REQUIRE(b.count(name) == 1);
        CHECK(t.bit_equal(b.at(name)));
    }
}

}  // namespace

TEST_CASE_TEMPLATE("checkpoint round trip is bit-exact", T, float, double) {
    const auto p = sample_params<T>(1);
    std::stringstream ss;
    write_checkpoint(ss, p);
    check_bit_equal(p, read_checkpoint<T>(ss));

    const auto path = std::filesystem::temp_directory_path() / "msca_ckpt_test.bin";
    save_checkpoint(path, p);
    check_bit_equal(p, load_checkpoint<T>(path));
    std::filesystem::remove(path);
}

TEST_CASE("payload width follows the scalar type") {
    std::stringstream f, d;
    write_checkpoint(f, sample_params<float>(2));
    write_checkpoint(d, sample_params<double>(2));
    CHECK(f.str().substr(0, 5) == "MSCA1");
    CHECK(d.str().substr(0, 5) == "MSCAD");
    CHECK(d.str().size() > f.str().size());
}

TEST_CASE("record layout is little-endian name, rank, extents, values") {
    ParamSet<float> p;
    p.emplace("w", Tensor<float>({1, 2}, {1.0f, -2.0f}));
    std::stringstream ss;
    write_checkpoint(ss, p);
    const std::string s = ss.str();
    REQUIRE(s.size() == 5 + 4 + 1 + 4 + 2 * 8 + 2 * 4);
    const auto* u = reinterpret_cast<const unsigned char*>(s.data());
    CHECK(u[5] == 1);
    CHECK(u[6] == 0);
    CHECK(s[9] == 'w');
    CHECK(u[10] == 2);
    CHECK(u[14] == 1);
    CHECK(u[22] == 2);
    float v = 0;
    std::memcpy(&v, s.data() + 30, 4);
    CHECK(v == 1.0f);
    std::memcpy(&v, s.data() + 34, 4);
    CHECK(v == -2.0f);
}

TEST_CASE("float payload widens to double exactly") {
    const auto p = sample_params<float>(3);
    std::stringstream ss;
    write_checkpoint(ss, p);
    const auto d = read_checkpoint<double>(ss);
    const auto& w = p.at("a.w");
    const auto& wd = d.at("a.w");
    for (int64_t i = 0; i < w.numel(); ++i) CHECK(wd[i] == static_cast<double>(w[i]));
}

TEST_CASE("corrupt checkpoints are rejected") {
    std::stringstream bad_magic("XXXXX");
    CHECK_THROWS_AS(read_checkpoint<float>(bad_magic), CheckpointError);

    std::stringstream full;
    write_checkpoint(full, sample_params<double>(4));
    const std::string s = full.str();
    std::stringstream truncated(s.substr(0, s.size() - 3));
    CHECK_THROWS_AS(read_checkpoint<double>(truncated), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint<double>("/nonexistent/ckpt.bin"), CheckpointError);
}

TEST_CASE("single-tensor files") {
    const auto path = std::filesystem::temp_directory_path() / "msca_tensor_file.bin";
    std::mt19937_64 rng(5);
    const auto t = random_tensor({2, 3, 4}, rng);
    save_checkpoint<double>(path, {{"x", t}});
    CHECK(load_tensor_file<double>(path).bit_equal(t));
    save_checkpoint<double>(path, {{"x", t}, {"y", t}});
    CHECK_THROWS_AS(load_tensor_file<double>(path), CheckpointError);
    std::filesystem::remove(path);
}
