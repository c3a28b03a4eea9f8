#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "msca/selfsup.hpp"

namespace msca {

// dB on intensities mapped from [-1,1] to [0,1], peak 1. Identical images give +inf.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b);

// Writes "inf" for infinite values, otherwise %.17g.
std::string format_metric(double v);
double parse_metric(const std::string& s);

// F F^T / (C H W) for a [C,H,W] feature map, returned as [C,C].
template <typename T>
Tensor<double> gram_matrix(const Tensor<T>& features);

// Sum over the given feature maps of the mean squared Gram difference.
template <typename T>
double gram_distance(const std::vector<Tensor<T>>& a, const std::vector<Tensor<T>>& b);

// gram_distance over the frozen backbone features of two images.
template <typename T>
double gram_style_loss(const Tensor<T>& a, const Tensor<T>& b, const ToyEncoder<T>& backbone);

struct EvalSample {
    std::string id;
    double psnr = 0;
    double style_loss = 0;
};

struct EvalResult {
    std::string task;
    std::vector<EvalSample> samples;
    double mean_psnr = 0, median_psnr = 0;
    double mean_style = 0, median_style = 0;

    // Recomputes the aggregates from samples.
    void summarize();
    // Block of "task", "sample id psnr style" lines, "summary ..." and "end".
    std::string to_text() const;
};

// Reads every result block in the stream (files may hold several appended runs).
std::vector<EvalResult> parse_eval_results(std::istream& is);
void append_eval_result(const std::filesystem::path& path, const EvalResult& r);
std::vector<EvalResult> read_eval_results(const std::filesystem::path& path);

enum class EvalTask { duplicate, mirror };
EvalTask parse_eval_task(const std::string& name);
std::string eval_task_name(EvalTask t);

// duplicate: G(c, x, c); mirror: G(c, flip(x), flip(c)). Each output is
// scored against x. ids default to scene_NNNN.
template <typename T>
EvalResult run_task(EvalTask task, const std::vector<Scene<T>>& data, const GeneratorModel<T>& model,
                    std::vector<std::string> ids = {});

}  // namespace msca
