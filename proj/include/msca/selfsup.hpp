#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "msca/synthesis.hpp"

namespace msca {

/// Training hyperparameters. Everything is settable from a key = value file;
/// see parse_train_config for the key list.
struct TrainConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double lambda = 1.0;  // weight of the self-reconstruction task
    int g_period = 5;     // generator updated every g_period iterations
    int epochs = 40;
    int phase_switch_epoch = 20;
    int patch = 256;           // phase-1 crop side; phase 2 crops 1.5x this and resizes down
    int64_t max_steps = 0;     // > 0 overrides epochs * dataset size
    double adv_weight = 1.0;   // 0 disables the discriminator entirely
    double fm_weight = 10.0;
    double perceptual_weight = 10.0;
    double pixel_weight = 1.0;
    std::string adv_loss = "hinge";  // or "logistic"
    int64_t checkpoint_every = 0;    // 0: only the final checkpoint
    int precision = 32;              // 32 or 64 bit training
    int pretrain_steps = 0;          // MSCA pretraining before adversarial training
    // Synthetic data used when no dataset directory is given.
    int data_scenes = 32;
    int data_extent = 512;
    ModelConfig model;

    // Throws std::invalid_argument naming the offending field.
    void validate() const;
    // Small settings for single-core runs: 64x64 scenes, 32x32 patches.
    static TrainConfig desk();
};

// Parses "key = value" lines; '#' starts a comment. Unknown keys and
// malformed values throw std::invalid_argument with the line number.
TrainConfig parse_train_config(std::istream& is, TrainConfig base = {});
TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base = {});
// Applies one "key=value" override.
void set_train_option(TrainConfig& cfg, const std::string& key, const std::string& value);
std::string train_config_to_text(const TrainConfig& cfg);

template <typename T>
struct Scene {
    Tensor<T> image;  // [3,H,W] in [-1,1]
    LabelMap labels;
};

// Voronoi partition into 3..6 regions; each class gets one colour and one
// sinusoidal texture for the whole scene.
template <typename T>
Scene<T> gen_synthetic_scene(std::mt19937_64& rng, int classes, int64_t extent);

template <typename T>
std::vector<Scene<T>> make_synthetic_dataset(int count, int classes, int64_t extent, uint64_t seed);

// scene_NNNN.png + scene_NNNN_label.png pairs.
template <typename T>
void save_dataset(const std::filesystem::path& dir, const std::vector<Scene<T>>& scenes);
template <typename T>
std::vector<Scene<T>> load_dataset(const std::filesystem::path& dir, int classes);

struct Rect {
    int64_t y = 0, x = 0, height = 0, width = 0;
};
bool rects_overlap(const Rect& a, const Rect& b);

inline constexpr double kPhase2CropFactor = 1.5;

template <typename T>
struct PatchPair {
    Tensor<T> x_p;
    LabelMap c_p;
    Tensor<T> x_q;
    LabelMap c_q;
    Rect rect_p, rect_q;  // source coordinates
};

// Phase 1: two disjoint patch x patch crops placed in opposite halves of a
// random axis. Phase 2: two independent (1.5 patch)^2 crops resized to patch.
template <typename T>
PatchPair<T> sample_patch_pair(const Scene<T>& scene, int phase, int patch, std::mt19937_64& rng);

/// Loss values of one task; G terms are unweighted by lambda.
struct TaskLoss {
    double adv = 0;
    double fm = 0;
    double perceptual = 0;
    double pixel = 0;
    double total = 0;   // weighted generator objective
    double d_loss = 0;  // discriminator objective
};

struct LossReport {
    TaskLoss cross;
    TaskLoss self;
    double total = 0;    // cross.total + lambda * self.total
    double d_total = 0;  // cross.d_loss + lambda * self.d_loss
    bool g_updated = false;
    bool d_updated = false;
};

template <typename T>
struct MatchTerms {
    Var<T> fm, perceptual, pixel;
};

// fm: sum over stages of L1(fake, real); perceptual: uniform average over
// backbone scales of L1; pixel: L1 in image space. Empty feature lists give fm = 0.
template <typename T>
MatchTerms<T> loss_match(const Var<T>& fake, const Tensor<T>& real, const std::vector<Var<T>>& d_fake,
                         const std::vector<Tensor<T>>& d_real, const ToyEncoder<T>& backbone);

/// One task's losses plus parameter gradients (empty when not requested).
template <typename T>
struct TaskStep {
    TaskLoss loss;
    ParamSet<T> g_grads;
    ParamSet<T> d_grads;
};

// Reconstructs x_p from (c_p, x_q, c_q).
template <typename T>
TaskStep<T> train_step_cross(const PatchPair<T>& pair, const GeneratorModel<T>& model, const ParamSet<T>& dparams,
                             const TrainConfig& cfg, bool want_g, bool want_d);

// Reconstructs the scene from itself; losses and gradients scaled by lambda.
template <typename T>
TaskStep<T> train_step_self(const Scene<T>& scene, const GeneratorModel<T>& model, const ParamSet<T>& dparams,
                            const TrainConfig& cfg, bool want_g, bool want_d);

template <typename T>
class Adam {
public:
    Adam() = default;
    Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(ParamSet<T>& params, const ParamSet<T>& grads);
    int64_t steps() const { return t_; }
    // Moments as "<prefix>m.<name>" / "<prefix>v.<name>" plus "<prefix>t".
    ParamSet<T> state(const std::string& prefix) const;
    void load_state(const ParamSet<T>& all, const std::string& prefix);

private:
    double lr_ = 2e-4, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
    int64_t t_ = 0;
    ParamSet<T> m_, v_;
};

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(int64_t step, const std::string& what)
        : std::runtime_error(what), step_(step) {}
    int64_t step() const { return step_; }

private:
    int64_t step_;
};

// Per-step RNG derived from (seed, step) so a resumed run only needs the step.
std::mt19937_64 step_rng(uint64_t seed, int64_t step, uint64_t stream = 0);

template <typename T>
class Trainer {
public:
    Trainer(TrainConfig cfg, std::vector<Scene<T>> data, uint64_t seed);

    LossReport step();
    int64_t step_index() const { return step_; }
    int64_t total_steps() const;
    int phase_at(int64_t step) const;

    const GeneratorModel<T>& generator() const { return gen_; }
    GeneratorModel<T>& generator() { return gen_; }
    const ParamSet<T>& discriminator() const { return disc_; }
    const TrainConfig& config() const { return cfg_; }

    // Generator, backbone, discriminator, optimizer moments and step counter.
    ParamSet<T> checkpoint_state() const;
    void load_checkpoint_state(const ParamSet<T>& state);

private:
    TrainConfig cfg_;
    std::vector<Scene<T>> data_;
    uint64_t seed_;
    GeneratorModel<T> gen_;
    ParamSet<T> disc_;
    Adam<T> gopt_, dopt_;
    int64_t step_ = 0;
};

// One metrics line: step, task, every loss term, wall time.
std::string format_metrics(int64_t step, const LossReport& r, double seconds);

// Runs the trainer to completion, appending metrics to log and writing
// checkpoints into out_dir (checkpoint_every and final "final.ckpt"). On a
// non-finite loss writes diverged_step_N.{txt,ckpt} and rethrows.
template <typename T>
void train(Trainer<T>& trainer, const std::filesystem::path& out_dir, std::ostream& log);

// Trains pyramid + attention weights with a throwaway per-scale 1x1 decoder
// that predicts the frozen backbone features of x_p. Returns the loss curve;
// only pyr.* and msca.* entries of model.params change.
template <typename T>
std::vector<double> pretrain_msca(const std::vector<Scene<T>>& data, GeneratorModel<T>& model,
                                  const TrainConfig& cfg, int steps, uint64_t seed, std::ostream* log = nullptr);

// Moving average with the given window (shorter at the start).
std::vector<double> smooth(const std::vector<double>& xs, std::size_t window);

}  // namespace msca
