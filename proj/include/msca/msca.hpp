#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "msca/model_config.hpp"
#include "msca/pyramid.hpp"

namespace msca {

/// Learnable weights of one attention module. Kernels use conv layout
/// [out, in]: phi is [K, N + M2], psi is [K, M1]; the gate MLP maps the
/// pooled label descriptors (2 * label width) through a hidden layer of 2K.
template <typename T>
struct MscaWeights {
    Var<T> phi;
    Var<T> psi;
    Var<T> w1, b1;
    Var<T> w2, b2;
};

/// Interpretability record of one alignment.
template <typename T>
struct AttentionPack {
    Var<T> alpha;        // [K, Hs, Ws], each slice sums to 1
    Var<T> beta;         // [K, Ht, Wt], sums to 1 over K per pixel
    Var<T> bank;         // V, [N, K]
    Var<T> gate;         // g, [K]
    Var<T> masked_bank;  // V with column k scaled by g[k]
};

template <typename T>
struct MscaOutput {
    Var<T> aligned;  // F_x1, [N, Ht, Wt]
    AttentionPack<T> pack;
};

std::string msca_name(int scale, const std::string& part);

template <typename T>
ParamSet<T> init_msca_params(const ModelConfig& cfg, std::mt19937_64& rng);

template <typename T>
MscaWeights<T> msca_weights(const BoundParams<T>& params, int scale);

// Pre-softmax spatial logits conv1x1([Fx2, Fc2], phi), [K, Hs, Ws].
template <typename T>
Var<T> spatial_attention_logits(const Var<T>& fx2, const Var<T>& fc2, const Var<T>& phi);

template <typename T>
Var<T> spatial_attention(const Var<T>& fx2, const Var<T>& fc2, const Var<T>& phi);

// V = Fx2 (N x HsWs) . alpha^T (HsWs x K)
template <typename T>
Var<T> spatial_aggregate(const Var<T>& fx2, const Var<T>& alpha);

// g = sigmoid(mlp([gap(Fc1), gap(Fc2)])), length K.
template <typename T>
Var<T> gate_scores(const Var<T>& fc1, const Var<T>& fc2, const MscaWeights<T>& w);

// Column k of V scaled by g[k].
template <typename T>
Var<T> apply_gate(const Var<T>& bank, const Var<T>& gate);

template <typename T>
struct MaskedBank {
    Var<T> masked;
    Var<T> gate;
};

template <typename T>
MaskedBank<T> feature_mask(const Var<T>& bank, const Var<T>& fc1, const Var<T>& fc2, const MscaWeights<T>& w);

template <typename T>
Var<T> channel_attention(const Var<T>& fc1, const Var<T>& psi);

// F_x1 = V~ (N x K) . beta (K x HtWt), reshaped to [N, Ht, Wt].
template <typename T>
Var<T> channel_aggregate(const Var<T>& masked_bank, const Var<T>& beta);

template <typename T>
MscaOutput<T> msca_forward(const Var<T>& fx2, const Var<T>& fc1, const Var<T>& fc2, const MscaWeights<T>& w);

inline constexpr int64_t kOracleDefaultBudget = 64 * 64;

// A[p, j] = sum_k alpha[k, p] g[k] beta[k, j], shape [HsWs, HtWt]. Refuses
// either side above budget pixels unless budget <= 0.
template <typename T>
Tensor<T> effective_attention_matrix(const Tensor<T>& alpha, const Tensor<T>& gate, const Tensor<T>& beta,
                                     int64_t budget = kOracleDefaultBudget);

// Fx2 . A reshaped to [N, Ht, Wt].
template <typename T>
Tensor<T> effective_attention_oracle(const Tensor<T>& fx2, const Tensor<T>& alpha, const Tensor<T>& gate,
                                     const Tensor<T>& beta, int64_t budget = kOracleDefaultBudget);

template <typename T>
struct MultiscaleOutput {
    FeaturePyramid<T> aligned;
    std::vector<AttentionPack<T>> packs;
};

template <typename T>
MultiscaleOutput<T> msca_multiscale(const FeaturePyramid<T>& image2, const FeaturePyramid<T>& label1,
                                    const FeaturePyramid<T>& label2, const BoundParams<T>& params,
                                    const ModelConfig& cfg);

struct BenchRow {
    int64_t side = 0;
    int64_t pixels = 0;
    double msca_seconds = 0;
    double oracle_seconds = 0;
    int64_t msca_peak_bytes = 0;
    int64_t oracle_peak_bytes = 0;
    double max_rel_diff = 0;
};

struct BenchReport {
    std::vector<BenchRow> rows;
    int slots = 0;
    int repetitions = 0;
    double msca_slope = 0;
    double oracle_slope = 0;
    bool agreed = false;  // every size agreed within 1e-6 before timing

    std::string to_text() const;
};

// Times msca_forward against the explicit oracle (64-bit, single thread) and
// fits log-log slopes of the best time vs pixel count.
BenchReport bench_attention(const std::vector<int64_t>& sides, int slots, int repetitions, uint64_t seed = 7,
                            int channels = 32, int label_width = 32);

// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

// Writes alpha_kXX.png / beta_kXX.png per slot (each map scaled by its max)
// and gates.txt with one "slot gate" line per slot.
template <typename T>
void export_attention_pack(const AttentionPack<T>& pack, const std::filesystem::path& dir);

}  // namespace msca
