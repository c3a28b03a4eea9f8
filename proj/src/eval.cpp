#include "msca/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "msca/image_io.hpp"

namespace msca {

template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
    require_shape(a.shape() == b.shape(), "psnr: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    require_shape(a.numel() > 0, "psnr of empty images");
    double se = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = (static_cast<double>(a[i]) - static_cast<double>(b[i])) / 2;
        se += d * d;
    }
    if (se == 0) return std::numeric_limits<double>::infinity();
    return 10 * std::log10(1.0 / (se / static_cast<double>(a.numel())));
}

std::string format_metric(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double parse_metric(const std::string& s) {
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != s.size()) throw std::invalid_argument("bad metric value '" + s + "'");
    return v;
}

template <typename T>
Tensor<double> gram_matrix(const Tensor<T>& f) {
    require_shape(f.rank() == 3, "gram matrix expects [C,H,W] features");
    const int64_t c = f.dim(0), p = f.dim(1) * f.dim(2);
    Tensor<double> g({c, c});
    const double norm = static_cast<double>(c * p);
    for (int64_t i = 0; i < c; ++i)
        for (int64_t j = i; j < c; ++j) {
            double s = 0;
            for (int64_t q = 0; q < p; ++q) s += static_cast<double>(f[i * p + q]) * static_cast<double>(f[j * p + q]);
            g[i * c + j] = g[j * c + i] = s / norm;
        }
    return g;
}

template <typename T>
double gram_distance(const std::vector<Tensor<T>>& a, const std::vector<Tensor<T>>& b) {
    require_shape(a.size() == b.size(), "gram distance: feature lists differ in length");
    double total = 0;
    for (std::size_t s = 0; s < a.size(); ++s) {
        require_shape(a[s].shape() == b[s].shape(),
                      "gram distance: " + shape_str(a[s].shape()) + " vs " + shape_str(b[s].shape()));
        const Tensor<double> ga = gram_matrix(a[s]), gb = gram_matrix(b[s]);
        double se = 0;
        for (int64_t i = 0; i < ga.numel(); ++i) se += (ga[i] - gb[i]) * (ga[i] - gb[i]);
        total += se / static_cast<double>(ga.numel());
    }
    return total;
}

template <typename T>
double gram_style_loss(const Tensor<T>& a, const Tensor<T>& b, const ToyEncoder<T>& backbone) {
    require_shape(a.shape() == b.shape(), "style loss: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tape<T> tape;
    std::vector<Tensor<T>> fa, fb;
    for (const auto& v : backbone.forward(tape.constant(a))) fa.push_back(v.value());
    for (const auto& v : backbone.forward(tape.constant(b))) fb.push_back(v.value());
    return gram_distance(fa, fb);
}

namespace {

double mean_of(const std::vector<double>& xs) {
    double s = 0;
    for (double x : xs) s += x;
    return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

double median_of(std::vector<double> xs) {
    if (xs.empty()) return 0.0;
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    if (n % 2 == 1) return xs[n / 2];
    const double lo = xs[n / 2 - 1], hi = xs[n / 2];
    return lo == hi ? lo : (lo + hi) / 2;
}

}  // namespace

void EvalResult::summarize() {
    std::vector<double> p, s;
    for (const auto& x : samples) {
        p.push_back(x.psnr);
        s.push_back(x.style_loss);
    }
    mean_psnr = mean_of(p);
    median_psnr = median_of(p);
    mean_style = mean_of(s);
    median_style = median_of(s);
}

std::string EvalResult::to_text() const {
    std::ostringstream os;
    os << "task " << task << "\n";
    for (const auto& s : samples)
        os << "sample " << s.id << " " << format_metric(s.psnr) << " " << format_metric(s.style_loss) << "\n";
    os << "summary n=" << samples.size() << " mean_psnr=" << format_metric(mean_psnr)
       << " median_psnr=" << format_metric(median_psnr) << " mean_style=" << format_metric(mean_style)
       << " median_style=" << format_metric(median_style) << "\n";
    os << "end\n";
    return os.str();
}

std::vector<EvalResult> parse_eval_results(std::istream& is) {
    std::vector<EvalResult> out;
    std::string line;
    int lineno = 0;
    bool open = false;
    auto fail = [&](const std::string& why) {
        throw std::invalid_argument("eval results line " + std::to_string(lineno) + ": " + why);
    };
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "task") {
            if (open) fail("task block not closed");
            out.emplace_back();
            if (!(ls >> out.back().task)) fail("missing task name");
            open = true;
        } else if (tag == "sample") {
            if (!open) fail("sample outside a task block");
            EvalSample s;
            std::string p, st;
            if (!(ls >> s.id >> p >> st)) fail("expected: sample id psnr style");
            s.psnr = parse_metric(p);
            s.style_loss = parse_metric(st);
            out.back().samples.push_back(s);
        } else if (tag == "summary") {
            if (!open) fail("summary outside a task block");
            std::string kv;
            while (ls >> kv) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos) fail("bad summary field '" + kv + "'");
                const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
                EvalResult& r = out.back();
                if (k == "n") {
                    if (std::stoul(v) != r.samples.size()) fail("sample count mismatch");
                } else if (k == "mean_psnr") {
                    r.mean_psnr = parse_metric(v);
                } else if (k == "median_psnr") {
                    r.median_psnr = parse_metric(v);
                } else if (k == "mean_style") {
                    r.mean_style = parse_metric(v);
                } else if (k == "median_style") {
                    r.median_style = parse_metric(v);
                } else {
                    fail("unknown summary field '" + k + "'");
                }
            }
        } else if (tag == "end") {
            if (!open) fail("end without task");
            open = false;
        } else {
            fail("unknown record '" + tag + "'");
        }
    }
    if (open) fail("truncated task block");
    return out;
}

void append_eval_result(const std::filesystem::path& path, const EvalResult& r) {
    std::ofstream os(path, std::ios::app);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for appending");
    os << r.to_text();
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

std::vector<EvalResult> read_eval_results(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    return parse_eval_results(is);
}

EvalTask parse_eval_task(const std::string& name) {
    if (name == "duplicate") return EvalTask::duplicate;
    if (name == "mirror") return EvalTask::mirror;
    throw std::invalid_argument("unknown eval task '" + name + "' (duplicate or mirror)");
}

std::string eval_task_name(EvalTask t) { return t == EvalTask::duplicate ? "duplicate" : "mirror"; }

template <typename T>
EvalResult run_task(EvalTask task, const std::vector<Scene<T>>& data, const GeneratorModel<T>& model,
                    std::vector<std::string> ids) {
    if (ids.empty()) {
        for (std::size_t i = 0; i < data.size(); ++i) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "scene_%04zu", i);
            ids.emplace_back(buf);
        }
    }
    require_shape(ids.size() == data.size(), "run_task: one id per scene required");
    EvalResult r;
    r.task = eval_task_name(task);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Scene<T>& s = data[i];
        const Tensor<T> out = task == EvalTask::duplicate
                                  ? synthesize(model, s.labels, s.image, s.labels)
                                  : synthesize(model, s.labels, flip_horizontal(s.image), s.labels.flipped_horizontal());
        r.samples.push_back({ids[i], psnr(out, s.image), gram_style_loss(out, s.image, model.encoder)});
    }
    r.summarize();
    return r;
}

#define MSCA_INSTANTIATE_EVAL(T)                                                                              \
    template double psnr(const Tensor<T>&, const Tensor<T>&);                                                 \
    template Tensor<double> gram_matrix(const Tensor<T>&);                                                    \
    template double gram_distance(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&);              \
    template double gram_style_loss(const Tensor<T>&, const Tensor<T>&, const ToyEncoder<T>&);                \
    template EvalResult run_task(EvalTask, const std::vector<Scene<T>>&, const GeneratorModel<T>&,            \
                                 std::vector<std::string>);

MSCA_INSTANTIATE_EVAL(float)
MSCA_INSTANTIATE_EVAL(double)

}  // namespace msca
