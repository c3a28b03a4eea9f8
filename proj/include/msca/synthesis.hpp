#pragma once

#include <optional>
#include <random>
#include <vector>

#include "msca/msca.hpp"

namespace msca {

/// Weights of one conditional-denormalization residual block.
template <typename T>
struct SpadeWeights {
    Var<T> shared_w, shared_b;  // cond -> hidden, conv3x3
    Var<T> gamma_w, gamma_b;    // hidden -> Cin scale
    Var<T> beta_w, beta_b;      // hidden -> Cin shift
    Var<T> conv1_w, conv1_b;    // Cin -> Cout
    Var<T> conv2_w, conv2_b;    // Cout -> Cout
    std::optional<Var<T>> skip_w;  // 1x1, present when Cin != Cout
};

std::string decoder_name(int scale, const std::string& part);

template <typename T>
SpadeWeights<T> spade_weights(const BoundParams<T>& params, int scale);

// Decoder blocks plus output head.
template <typename T>
ParamSet<T> init_decoder_params(const ModelConfig& cfg, std::mt19937_64& rng);

template <typename T>
ParamSet<T> init_discriminator_params(const ModelConfig& cfg, std::mt19937_64& rng);

// (1 + gamma(cond)) * norm(h) + beta(cond); cond must have h's spatial extent.
template <typename T>
Var<T> spade_modulate(const Var<T>& h, const Var<T>& cond, const SpadeWeights<T>& w);

// out = conv2(lrelu(conv1(lrelu((1 + gamma(cond)) * norm(h) + beta(cond))))) + skip(h)
// cond must already have h's spatial extent.
template <typename T>
Var<T> spade_block_forward(const Var<T>& h, const Var<T>& cond, const SpadeWeights<T>& w);

// Coarse-to-fine decoding of [aligned_i, structure_i] with x2 upsampling
// between blocks; tanh head maps to [-1, 1].
template <typename T>
Var<T> decode(const FeaturePyramid<T>& aligned, const FeaturePyramid<T>& structure, const BoundParams<T>& params,
              const ModelConfig& cfg);

template <typename T>
struct GeneratorOutput {
    Var<T> image;
    FeaturePyramid<T> image_features;  // F_x2
    FeaturePyramid<T> target_labels;   // F_c1
    FeaturePyramid<T> exemplar_labels; // F_c2
    FeaturePyramid<T> aligned;         // F_x1
    std::vector<AttentionPack<T>> packs;
};

// G(c1, x2, c2): pyramids, multi-scale attention, decoding.
template <typename T>
GeneratorOutput<T> generator_forward(const LabelMap& c1, const Var<T>& x2, const LabelMap& c2,
                                     const BoundParams<T>& params, const ModelConfig& cfg,
                                     const Backbone<T>& backbone);

/// Trainable generator weights plus the frozen toy backbone.
template <typename T>
struct GeneratorModel {
    ModelConfig cfg;
    ParamSet<T> params;  // pyr.*, msca.*, dec.*, head.*
    ToyEncoder<T> encoder;

    static GeneratorModel init(const ModelConfig& cfg, uint64_t seed);
    // Restores a model from a checkpoint parameter set (config inferred from shapes).
    static GeneratorModel from_params(const ParamSet<T>& all);
    // params plus backbone.* entries.
    ParamSet<T> all_params() const;
};

// Recovers the architecture from tensor shapes in a checkpoint.
template <typename T>
ModelConfig infer_config(const ParamSet<T>& all);

// Forward-only synthesis with the model's toy backbone.
template <typename T>
Tensor<T> synthesize(const GeneratorModel<T>& model, const LabelMap& c1, const Tensor<T>& x2, const LabelMap& c2,
                     std::vector<AttentionPack<T>>* packs = nullptr, Tape<T>* keep_tape = nullptr);

template <typename T>
struct DiscriminatorOutput {
    Var<T> score;                 // patch score map [1, H/2^S, W/2^S]
    std::vector<Var<T>> features; // per-stage activations
};

// D(x, c_p, x_q, c_q): x_q and c_q are resized to x's extent when they differ.
template <typename T>
DiscriminatorOutput<T> discriminator_forward(const Var<T>& x, const LabelMap& c_p, const Tensor<T>& x_q,
                                             const LabelMap& c_q, const BoundParams<T>& params,
                                             const ModelConfig& cfg);

}  // namespace msca
