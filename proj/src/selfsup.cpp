#include "msca/selfsup.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "msca/checkpoint.hpp"
#include "msca/image_io.hpp"

namespace msca {

// ---- configuration ----------------------------------------------------------------

void TrainConfig::validate() const {
    auto positive = [](bool ok, const char* what) {
        if (!ok) throw std::invalid_argument(std::string("train config: ") + what);
    };
    positive(lr > 0, "lr must be > 0");
    positive(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1, "adam betas must lie in (0, 1)");
    positive(adam_eps > 0, "adam_eps must be > 0");
    positive(lambda >= 0, "lambda must be >= 0");
    positive(g_period >= 1, "g_period must be >= 1");
    positive(epochs >= 1, "epochs must be >= 1");
    positive(phase_switch_epoch >= 0 && phase_switch_epoch <= epochs, "phase_switch_epoch must lie in [0, epochs]");
    positive(patch >= 1, "patch must be >= 1");
    positive(max_steps >= 0, "max_steps must be >= 0");
    positive(adv_weight >= 0 && fm_weight >= 0 && perceptual_weight >= 0 && pixel_weight >= 0,
             "loss weights must be >= 0");
    positive(adv_loss == "hinge" || adv_loss == "logistic", "adv_loss must be hinge or logistic");
    positive(checkpoint_every >= 0, "checkpoint_every must be >= 0");
    positive(precision == 32 || precision == 64, "precision must be 32 or 64");
    positive(pretrain_steps >= 0, "pretrain_steps must be >= 0");
    positive(data_scenes >= 1 && data_extent >= 1, "data_scenes and data_extent must be >= 1");
    model.validate();
}

TrainConfig TrainConfig::desk() {
    TrainConfig cfg;
    cfg.patch = 32;
    cfg.data_extent = 64;
    cfg.data_scenes = 32;
    cfg.max_steps = 200;
    return cfg;
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double d = 0;
    try {
        d = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty()) throw std::invalid_argument(key + ": expected a number, got '" + v + "'");
    return d;
}

int64_t parse_int(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    long long i = 0;
    try {
        i = std::stoll(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty()) throw std::invalid_argument(key + ": expected an integer, got '" + v + "'");
    return i;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(parse_int(key, trim(item))));
    if (out.empty()) throw std::invalid_argument(key + ": expected a comma-separated list");
    return out;
}

std::string join(const std::vector<int>& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
    return s;
}

}  // namespace

void set_train_option(TrainConfig& c, const std::string& key, const std::string& value) {
    const std::string v = trim(value);
    auto i32 = [&] { return static_cast<int>(parse_int(key, v)); };
    if (key == "lr") c.lr = parse_double(key, v);
    else if (key == "beta1") c.beta1 = parse_double(key, v);
    else if (key == "beta2") c.beta2 = parse_double(key, v);
    else if (key == "adam_eps") c.adam_eps = parse_double(key, v);
    else if (key == "lambda") c.lambda = parse_double(key, v);
    else if (key == "g_period") c.g_period = i32();
    else if (key == "epochs") c.epochs = i32();
    else if (key == "phase_switch_epoch") c.phase_switch_epoch = i32();
    else if (key == "patch") c.patch = i32();
    else if (key == "max_steps") c.max_steps = parse_int(key, v);
    else if (key == "adv_weight") c.adv_weight = parse_double(key, v);
    else if (key == "fm_weight") c.fm_weight = parse_double(key, v);
    else if (key == "perceptual_weight") c.perceptual_weight = parse_double(key, v);
    else if (key == "pixel_weight") c.pixel_weight = parse_double(key, v);
    else if (key == "adv_loss") c.adv_loss = v;
    else if (key == "checkpoint_every") c.checkpoint_every = parse_int(key, v);
    else if (key == "precision") c.precision = i32();
    else if (key == "pretrain_steps") c.pretrain_steps = i32();
    else if (key == "data_scenes") c.data_scenes = i32();
    else if (key == "data_extent") c.data_extent = i32();
    else if (key == "model.levels") c.model.levels = i32();
    else if (key == "model.classes") c.model.classes = i32();
    else if (key == "model.image_channels") c.model.image_channels = i32();
    else if (key == "model.label_width") c.model.label_width = i32();
    else if (key == "model.backbone_channels") c.model.backbone_channels = parse_int_list(key, v);
    else if (key == "model.attention_slots") c.model.attention_slots = parse_int_list(key, v);
    else if (key == "model.decoder_channels") c.model.decoder_channels = parse_int_list(key, v);
    else if (key == "model.spade_hidden") c.model.spade_hidden = i32();
    else if (key == "model.disc_channels") c.model.disc_channels = parse_int_list(key, v);
    else throw std::invalid_argument("unknown config key '" + key + "'");
}

TrainConfig parse_train_config(std::istream& is, TrainConfig base) {
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        try {
            if (eq == std::string::npos) throw std::invalid_argument("expected key = value");
            set_train_option(base, trim(line.substr(0, eq)), line.substr(eq + 1));
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    base.validate();
    return base;
}

TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("cannot open config file " + path.string());
    return parse_train_config(is, std::move(base));
}

std::string train_config_to_text(const TrainConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "lr = " << c.lr << "\nbeta1 = " << c.beta1 << "\nbeta2 = " << c.beta2 << "\nadam_eps = " << c.adam_eps
       << "\nlambda = " << c.lambda << "\ng_period = " << c.g_period << "\nepochs = " << c.epochs
       << "\nphase_switch_epoch = " << c.phase_switch_epoch << "\npatch = " << c.patch
       << "\nmax_steps = " << c.max_steps << "\nadv_weight = " << c.adv_weight << "\nfm_weight = " << c.fm_weight
       << "\nperceptual_weight = " << c.perceptual_weight << "\npixel_weight = " << c.pixel_weight
       << "\nadv_loss = " << c.adv_loss << "\ncheckpoint_every = " << c.checkpoint_every
       << "\nprecision = " << c.precision << "\npretrain_steps = " << c.pretrain_steps
       << "\ndata_scenes = " << c.data_scenes << "\ndata_extent = " << c.data_extent
       << "\nmodel.levels = " << c.model.levels << "\nmodel.classes = " << c.model.classes
       << "\nmodel.image_channels = " << c.model.image_channels << "\nmodel.label_width = " << c.model.label_width
       << "\nmodel.backbone_channels = " << join(c.model.backbone_channels)
       << "\nmodel.attention_slots = " << join(c.model.attention_slots)
       << "\nmodel.decoder_channels = " << join(c.model.decoder_channels)
       << "\nmodel.spade_hidden = " << c.model.spade_hidden
       << "\nmodel.disc_channels = " << join(c.model.disc_channels) << "\n";
    return os.str();
}

// ---- data -------------------------------------------------------------------------

template <typename T>
Scene<T> gen_synthetic_scene(std::mt19937_64& rng, int classes, int64_t extent) {
    require_shape(classes >= 1 && extent >= 1, "synthetic scene needs classes >= 1 and extent >= 1");
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    struct Style {
        double color[3];
        double amp, freq, cos_t, sin_t, phase;
    };
    std::vector<Style> palette(static_cast<std::size_t>(classes));
    for (auto& s : palette) {
        for (double& c : s.color) c = -0.8 + 1.6 * u01(rng);
        s.amp = 0.05 + 0.2 * u01(rng);
        s.freq = 2.0 + 6.0 * u01(rng);
        const double theta = std::numbers::pi * u01(rng);
        s.cos_t = std::cos(theta);
        s.sin_t = std::sin(theta);
        s.phase = 2 * std::numbers::pi * u01(rng);
    }
    const int regions = std::uniform_int_distribution<int>(3, 6)(rng);
    std::vector<double> sy(static_cast<std::size_t>(regions)), sx(sy.size());
    std::vector<int32_t> cls(sy.size());
    std::uniform_int_distribution<int32_t> pick(0, classes - 1);
    for (std::size_t r = 0; r < sy.size(); ++r) {
        sy[r] = u01(rng) * static_cast<double>(extent);
        sx[r] = u01(rng) * static_cast<double>(extent);
        cls[r] = pick(rng);
    }
    std::vector<int32_t> grid(static_cast<std::size_t>(extent * extent));
    Tensor<T> image({3, extent, extent});
    const double scale = 2 * std::numbers::pi / static_cast<double>(extent);
    for (int64_t y = 0; y < extent; ++y)
        for (int64_t x = 0; x < extent; ++x) {
            std::size_t best = 0;
            double bd = 1e300;
            for (std::size_t r = 0; r < sy.size(); ++r) {
                const double dy = static_cast<double>(y) + 0.5 - sy[r], dx = static_cast<double>(x) + 0.5 - sx[r];
                const double d = dy * dy + dx * dx;
                if (d < bd) {
                    bd = d;
                    best = r;
                }
            }
            const int32_t c = cls[best];
            grid[static_cast<std::size_t>(y * extent + x)] = c;
            const Style& s = palette[static_cast<std::size_t>(c)];
            const double wave =
                s.amp * std::sin(scale * s.freq * (static_cast<double>(x) * s.cos_t + static_cast<double>(y) * s.sin_t) +
                                 s.phase);
            for (int ch = 0; ch < 3; ++ch)
                image.at(ch, y, x) = static_cast<T>(std::clamp(s.color[ch] + wave, -1.0, 1.0));
        }
    return {std::move(image), LabelMap(classes, extent, extent, std::move(grid))};
}

template <typename T>
std::vector<Scene<T>> make_synthetic_dataset(int count, int classes, int64_t extent, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<Scene<T>> out;
    for (int i = 0; i < count; ++i) out.push_back(gen_synthetic_scene<T>(rng, classes, extent));
    return out;
}

namespace {
std::string scene_stem(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%04zu", i);
    return buf;
}
}  // namespace

template <typename T>
void save_dataset(const std::filesystem::path& dir, const std::vector<Scene<T>>& scenes) {
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        write_image_png(dir / (scene_stem(i) + ".png"), scenes[i].image);
        write_label_png(dir / (scene_stem(i) + "_label.png"), scenes[i].labels);
    }
}

template <typename T>
std::vector<Scene<T>> load_dataset(const std::filesystem::path& dir, int classes) {
    std::vector<Scene<T>> out;
    for (std::size_t i = 0;; ++i) {
        const auto img = dir / (scene_stem(i) + ".png");
        if (!std::filesystem::exists(img)) break;
        const auto lab = dir / (scene_stem(i) + "_label.png");
        if (!std::filesystem::exists(lab)) throw ImageIoError("missing label map " + lab.string());
        Scene<T> s{read_image_png<T>(img), read_label_png(lab, classes)};
        require_shape(s.image.dim(1) == s.labels.height() && s.image.dim(2) == s.labels.width(),
                      "scene " + img.string() + " and its label map differ in extent");
        out.push_back(std::move(s));
    }
    if (out.empty()) throw ImageIoError("no scene_0000.png found in " + dir.string());
    return out;
}

bool rects_overlap(const Rect& a, const Rect& b) {
    return a.y < b.y + b.height && b.y < a.y + a.height && a.x < b.x + b.width && b.x < a.x + a.width;
}

template <typename T>
PatchPair<T> sample_patch_pair(const Scene<T>& scene, int phase, int patch, std::mt19937_64& rng) {
    const int64_t h = scene.labels.height(), w = scene.labels.width(), p = patch;
    auto uniform = [&rng](int64_t lo, int64_t hi) { return std::uniform_int_distribution<int64_t>(lo, hi)(rng); };
    PatchPair<T> pair;
    if (phase == 1) {
        const bool split_y_ok = h >= 2 * p && w >= p, split_x_ok = w >= 2 * p && h >= p;
        if (!split_y_ok && !split_x_ok) {
            throw std::invalid_argument("scene " + std::to_string(h) + "x" + std::to_string(w) +
                                        " is too small for phase-1 patches of " + std::to_string(p) +
                                        ": need at least " + std::to_string(2 * p) + " along one axis and " +
                                        std::to_string(p) + " along the other");
        }
        const bool split_y = split_y_ok && (!split_x_ok || uniform(0, 1) == 0);
        const int64_t e = split_y ? h : w, other = split_y ? w : h, half = e / 2;
        const int64_t a = uniform(0, half - p), b = uniform(half, e - p);
        const int64_t oa = uniform(0, other - p), ob = uniform(0, other - p);
        Rect ra = split_y ? Rect{a, oa, p, p} : Rect{oa, a, p, p};
        Rect rb = split_y ? Rect{b, ob, p, p} : Rect{ob, b, p, p};
        if (uniform(0, 1) == 1) std::swap(ra, rb);
        pair.rect_p = ra;
        pair.rect_q = rb;
        pair.x_p = crop_image(scene.image, ra.y, ra.x, p, p);
        pair.c_p = scene.labels.crop(ra.y, ra.x, p, p);
        pair.x_q = crop_image(scene.image, rb.y, rb.x, p, p);
        pair.c_q = scene.labels.crop(rb.y, rb.x, p, p);
    } else if (phase == 2) {
        const auto s = static_cast<int64_t>(std::lround(kPhase2CropFactor * static_cast<double>(p)));
        if (h < s || w < s) {
            throw std::invalid_argument("scene " + std::to_string(h) + "x" + std::to_string(w) +
                                        " is too small for phase-2 crops of " + std::to_string(s));
        }
        auto crop = [&](Rect& r, Tensor<T>& x, LabelMap& c) {
            r = Rect{uniform(0, h - s), uniform(0, w - s), s, s};
            x = resize_bilinear(crop_image(scene.image, r.y, r.x, s, s), p, p);
            c = scene.labels.crop(r.y, r.x, s, s).resized(p, p);
        };
        crop(pair.rect_p, pair.x_p, pair.c_p);
        crop(pair.rect_q, pair.x_q, pair.c_q);
    } else {
        throw std::invalid_argument("phase must be 1 or 2");
    }
    return pair;
}

// ---- losses -------------------------------------------------------------------------

template <typename T>
MatchTerms<T> loss_match(const Var<T>& fake, const Tensor<T>& real, const std::vector<Var<T>>& d_fake,
                         const std::vector<Tensor<T>>& d_real, const ToyEncoder<T>& backbone) {
    Tape<T>& tape = fake.tape();
    require_shape(d_fake.size() == d_real.size(), "feature matching needs equal stage counts");
    MatchTerms<T> m;
    m.fm = tape.constant(Tensor<T>::scalar(0));
    for (std::size_t j = 0; j < d_fake.size(); ++j) m.fm = add(m.fm, l1_loss(d_fake[j], tape.constant(d_real[j])));
    const auto ff = backbone.forward(fake);
    const auto fr = backbone.forward(tape.constant(real));
    m.perceptual = tape.constant(Tensor<T>::scalar(0));
    for (std::size_t s = 0; s < ff.size(); ++s) {
        m.perceptual = add(m.perceptual, l1_loss(ff[s], tape.constant(fr[s].value())));
    }
    m.perceptual = scale(m.perceptual, T(1) / static_cast<T>(ff.size()));
    m.pixel = l1_loss(fake, tape.constant(real));
    return m;
}

namespace {

template <typename T>
Var<T> scaled_sum(const std::vector<std::pair<Var<T>, double>>& terms) {
    Var<T> acc = scale(terms[0].first, static_cast<T>(terms[0].second));
    for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, scale(terms[i].first, static_cast<T>(terms[i].second)));
    return acc;
}

template <typename T>
TaskStep<T> task_step(const Tensor<T>& x_t, const LabelMap& c_t, const Tensor<T>& x_e, const LabelMap& c_e,
                      const GeneratorModel<T>& model, const ParamSet<T>& dparams, const TrainConfig& cfg,
                      double weight, bool want_g, bool want_d) {
    TaskStep<T> out;
    const bool use_d = cfg.adv_weight > 0;
    const bool hinge = cfg.adv_loss == "hinge";
    const Backbone<T> backbone = model.encoder;
    Tensor<T> fake_value;
    {
        Tape<T> tape;
        const auto bound = bind_params(tape, model.params, want_g);
        const auto g = generator_forward(c_t, tape.constant(x_e), c_e, bound, cfg.model, backbone);
        fake_value = g.image.value();
        std::vector<Var<T>> dfake;
        std::vector<Tensor<T>> dreal;
        Var<T> adv = tape.constant(Tensor<T>::scalar(0));
        if (use_d) {
            const auto dbound = bind_params(tape, dparams, false);
            const auto df = discriminator_forward(g.image, c_t, x_e, c_e, dbound, cfg.model);
            const auto dr = discriminator_forward(tape.constant(x_t), c_t, x_e, c_e, dbound, cfg.model);
            dfake = df.features;
            for (const auto& f : dr.features) dreal.push_back(f.value());
            adv = hinge ? scale(mean(df.score), T(-1)) : mean(softplus(scale(df.score, T(-1))));
        }
        const auto m = loss_match(g.image, x_t, dfake, dreal, model.encoder);
        const Var<T> total = scaled_sum<T>({{adv, cfg.adv_weight},
                                            {m.fm, use_d ? cfg.fm_weight : 0.0},
                                            {m.perceptual, cfg.perceptual_weight},
                                            {m.pixel, cfg.pixel_weight}});
        out.loss.adv = static_cast<double>(adv.value()[0]);
        out.loss.fm = static_cast<double>(m.fm.value()[0]);
        out.loss.perceptual = static_cast<double>(m.perceptual.value()[0]);
        out.loss.pixel = static_cast<double>(m.pixel.value()[0]);
        out.loss.total = static_cast<double>(total.value()[0]);
        if (want_g) out.g_grads = collect_grads(tape.backward(scale(total, static_cast<T>(weight))), bound);
    }
    if (use_d && want_d) {
        Tape<T> tape;
        const auto dbound = bind_params(tape, dparams, true);
        const auto real = discriminator_forward(tape.constant(x_t), c_t, x_e, c_e, dbound, cfg.model).score;
        const auto fake = discriminator_forward(tape.constant(fake_value), c_t, x_e, c_e, dbound, cfg.model).score;
        Var<T> d;
        if (hinge) {
            d = add(mean(relu(add_scalar(scale(real, T(-1)), T(1)))), mean(relu(add_scalar(fake, T(1)))));
        } else {
            d = add(mean(softplus(scale(real, T(-1)))), mean(softplus(fake)));
        }
        out.loss.d_loss = static_cast<double>(d.value()[0]);
        out.d_grads = collect_grads(tape.backward(scale(d, static_cast<T>(weight))), dbound);
    }
    return out;
}

template <typename T>
void accumulate(ParamSet<T>& into, const ParamSet<T>& add) {
    for (const auto& [name, g] : add) {
        auto it = into.find(name);
        if (it == into.end()) {
            into.emplace(name, g);
        } else {
            it->second += g;
        }
    }
}

template <typename T>
bool all_finite(const ParamSet<T>& ps, std::string* bad) {
    for (const auto& [name, t] : ps) {
        if (!t.all_finite()) {
            if (bad) *bad = name;
            return false;
        }
    }
    return true;
}

}  // namespace

template <typename T>
TaskStep<T> train_step_cross(const PatchPair<T>& pair, const GeneratorModel<T>& model, const ParamSet<T>& dparams,
                             const TrainConfig& cfg, bool want_g, bool want_d) {
    return task_step(pair.x_p, pair.c_p, pair.x_q, pair.c_q, model, dparams, cfg, 1.0, want_g, want_d);
}

template <typename T>
TaskStep<T> train_step_self(const Scene<T>& scene, const GeneratorModel<T>& model, const ParamSet<T>& dparams,
                            const TrainConfig& cfg, bool want_g, bool want_d) {
    if (cfg.lambda == 0) return {};
    return task_step(scene.image, scene.labels, scene.image, scene.labels, model, dparams, cfg, cfg.lambda, want_g,
                     want_d);
}

// ---- optimizer ----------------------------------------------------------------------

template <typename T>
void Adam<T>::step(ParamSet<T>& params, const ParamSet<T>& grads) {
    ++t_;
    const T b1 = static_cast<T>(b1_), b2 = static_cast<T>(b2_);
    const T bc1 = static_cast<T>(1 - std::pow(b1_, static_cast<double>(t_)));
    const T bc2 = static_cast<T>(1 - std::pow(b2_, static_cast<double>(t_)));
    const T lr = static_cast<T>(lr_), eps = static_cast<T>(eps_);
    for (const auto& [name, g] : grads) {
        auto pit = params.find(name);
        if (pit == params.end()) throw std::logic_error("adam: gradient for unknown parameter " + name);
        Tensor<T>& p = pit->second;
        require_shape(p.shape() == g.shape(), "adam: gradient shape mismatch for " + name);
        auto mit = m_.try_emplace(name, Tensor<T>::zeros(p.shape())).first;
        auto vit = v_.try_emplace(name, Tensor<T>::zeros(p.shape())).first;
        Tensor<T>& m = mit->second;
        Tensor<T>& v = vit->second;
        for (int64_t i = 0; i < p.numel(); ++i) {
            m[i] = b1 * m[i] + (1 - b1) * g[i];
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
            p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    }
}

template <typename T>
ParamSet<T> Adam<T>::state(const std::string& prefix) const {
    ParamSet<T> out;
    for (const auto& [name, t] : m_) out.emplace(prefix + "m." + name, t);
    for (const auto& [name, t] : v_) out.emplace(prefix + "v." + name, t);
    out.emplace(prefix + "t", Tensor<T>::scalar(static_cast<T>(t_)));
    return out;
}

template <typename T>
void Adam<T>::load_state(const ParamSet<T>& all, const std::string& prefix) {
    m_.clear();
    v_.clear();
    t_ = 0;
    for (const auto& [name, t] : all) {
        if (name.rfind(prefix + "m.", 0) == 0) m_.emplace(name.substr(prefix.size() + 2), t);
        if (name.rfind(prefix + "v.", 0) == 0) v_.emplace(name.substr(prefix.size() + 2), t);
    }
    auto it = all.find(prefix + "t");
    if (it != all.end()) t_ = static_cast<int64_t>(it->second[0]);
}

// ---- training loop ---------------------------------------------------------------------

std::mt19937_64 step_rng(uint64_t seed, int64_t step, uint64_t stream) {
    const auto s = static_cast<uint64_t>(step);
    std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(s),
                      static_cast<uint32_t>(s >> 32), static_cast<uint32_t>(stream)};
    return std::mt19937_64(seq);
}

template <typename T>
Trainer<T>::Trainer(TrainConfig cfg, std::vector<Scene<T>> data, uint64_t seed)
    : cfg_(std::move(cfg)), data_(std::move(data)), seed_(seed) {
    cfg_.validate();
    if (data_.empty()) throw std::invalid_argument("training needs at least one scene");
    for (const auto& s : data_) {
        require_shape(s.labels.classes() == cfg_.model.classes, "dataset label vocabulary differs from the model");
    }
    gen_ = GeneratorModel<T>::init(cfg_.model, seed);
    std::mt19937_64 rng(seed ^ 0xd1b54a32d192ed03ULL);
    disc_ = init_discriminator_params<T>(cfg_.model, rng);
    gopt_ = Adam<T>(cfg_.lr, cfg_.beta1, cfg_.beta2, cfg_.adam_eps);
    dopt_ = Adam<T>(cfg_.lr, cfg_.beta1, cfg_.beta2, cfg_.adam_eps);
}

template <typename T>
int64_t Trainer<T>::total_steps() const {
    return cfg_.max_steps > 0 ? cfg_.max_steps : static_cast<int64_t>(cfg_.epochs) * static_cast<int64_t>(data_.size());
}

template <typename T>
int Trainer<T>::phase_at(int64_t step) const {
    const int64_t epoch = step / static_cast<int64_t>(data_.size());
    return epoch < cfg_.phase_switch_epoch ? 1 : 2;
}

template <typename T>
LossReport Trainer<T>::step() {
    auto rng = step_rng(seed_, step_);
    const Scene<T>& scene = data_[std::uniform_int_distribution<std::size_t>(0, data_.size() - 1)(rng)];
    const PatchPair<T> pair = sample_patch_pair(scene, phase_at(step_), cfg_.patch, rng);
    const bool use_d = cfg_.adv_weight > 0;
    // With the discriminator disabled there is no D:G ratio to keep.
    const bool do_g = !use_d || step_ % cfg_.g_period == cfg_.g_period - 1;
    const bool do_d = use_d;

    TaskStep<T> cross, self;
    try {
        cross = train_step_cross(pair, gen_, disc_, cfg_, do_g, do_d);
        self = train_step_self(scene, gen_, disc_, cfg_, do_g, do_d);
    } catch (const std::domain_error& e) {
        // softmax refuses non-finite logits
        throw TrainingDiverged(step_, "non-finite activations at step " + std::to_string(step_) + ": " + e.what());
    }
    LossReport r;
    r.cross = cross.loss;
    r.self = self.loss;
    r.total = cross.loss.total + cfg_.lambda * self.loss.total;
    r.d_total = cross.loss.d_loss + cfg_.lambda * self.loss.d_loss;
    r.g_updated = do_g;
    r.d_updated = do_d;
    if (!std::isfinite(r.total) || !std::isfinite(r.d_total)) {
        throw TrainingDiverged(step_, "non-finite loss at step " + std::to_string(step_) + ": " +
                                          format_metrics(step_, r, 0));
    }
    ParamSet<T> gg, dg;
    if (do_g) {
        accumulate(gg, cross.g_grads);
        accumulate(gg, self.g_grads);
    }
    if (do_d) {
        accumulate(dg, cross.d_grads);
        accumulate(dg, self.d_grads);
    }
    std::string bad;
    if (!all_finite(gg, &bad) || !all_finite(dg, &bad)) {
        throw TrainingDiverged(step_, "non-finite gradient for " + bad + " at step " + std::to_string(step_));
    }
    if (do_d) dopt_.step(disc_, dg);
    if (do_g) gopt_.step(gen_.params, gg);
    ++step_;
    return r;
}

template <typename T>
ParamSet<T> Trainer<T>::checkpoint_state() const {
    ParamSet<T> s = gen_.all_params();
    s = merge_params(std::move(s), disc_);
    s = merge_params(std::move(s), gopt_.state("adam.g."));
    s = merge_params(std::move(s), dopt_.state("adam.d."));
    s.emplace("train.step", Tensor<T>::scalar(static_cast<T>(step_)));
    return s;
}

template <typename T>
void Trainer<T>::load_checkpoint_state(const ParamSet<T>& state) {
    gen_ = GeneratorModel<T>::from_params(state);
    const std::vector<int> disc_channels = cfg_.model.disc_channels;
    cfg_.model = gen_.cfg;
    ParamSet<T> disc = filter_prefix(state, "disc.");
    if (!disc.empty()) {
        disc_ = std::move(disc);
    } else {
        cfg_.model.disc_channels = disc_channels;
    }
    gopt_.load_state(state, "adam.g.");
    dopt_.load_state(state, "adam.d.");
    auto it = state.find("train.step");
    step_ = it == state.end() ? 0 : static_cast<int64_t>(it->second[0]);
}

std::string format_metrics(int64_t step, const LossReport& r, double seconds) {
    char buf[512];
    std::string out;
    for (int t = 0; t < 2; ++t) {
        const TaskLoss& l = t == 0 ? r.cross : r.self;
        std::snprintf(buf, sizeof(buf),
                      "step=%lld task=%s adv=%.9g fm=%.9g perceptual=%.9g pixel=%.9g total=%.9g d_loss=%.9g "
                      "g_update=%d d_update=%d time=%.4f\n",
                      static_cast<long long>(step), t == 0 ? "cross" : "self", l.adv, l.fm, l.perceptual, l.pixel,
                      l.total, l.d_loss, r.g_updated ? 1 : 0, r.d_updated ? 1 : 0, seconds);
        out += buf;
    }
    return out;
}

template <typename T>
void train(Trainer<T>& trainer, const std::filesystem::path& out_dir, std::ostream& log) {
    using Clock = std::chrono::steady_clock;
    std::filesystem::create_directories(out_dir);
    const int64_t total = trainer.total_steps();
    while (trainer.step_index() < total) {
        const int64_t s = trainer.step_index();
        const auto t0 = Clock::now();
        LossReport r;
        try {
            r = trainer.step();
        } catch (const TrainingDiverged& e) {
            const auto stem = out_dir / ("diverged_step_" + std::to_string(e.step()));
            std::ofstream(stem.string() + ".txt") << e.what() << "\n";
            save_checkpoint(stem.string() + ".ckpt", trainer.checkpoint_state());
            throw;
        }
        log << format_metrics(s, r, std::chrono::duration<double>(Clock::now() - t0).count());
        log.flush();
        const int64_t done = s + 1;
        if (trainer.config().checkpoint_every > 0 && done % trainer.config().checkpoint_every == 0) {
            save_checkpoint(out_dir / ("step_" + std::to_string(done) + ".ckpt"), trainer.checkpoint_state());
        }
    }
    save_checkpoint(out_dir / "final.ckpt", trainer.checkpoint_state());
}

template <typename T>
std::vector<double> pretrain_msca(const std::vector<Scene<T>>& data, GeneratorModel<T>& model,
                                  const TrainConfig& cfg, int steps, uint64_t seed, std::ostream* log) {
    if (data.empty()) throw std::invalid_argument("pretraining needs at least one scene");
    const ModelConfig& mc = model.cfg;
    ParamSet<T> trainable = merge_params(filter_prefix(model.params, "pyr."), filter_prefix(model.params, "msca."));
    std::mt19937_64 init(seed ^ 0x2545f4914f6cdd1dULL);
    for (int s = 0; s < mc.scales(); ++s) {
        const int bc = mc.backbone_channels[static_cast<std::size_t>(s)];
        trainable.emplace("pre.dec." + std::to_string(s) + ".w",
                          init_normal<T>({bc, mc.image_channels}, mc.image_channels, 1.0, init));
        trainable.emplace("pre.dec." + std::to_string(s) + ".b", Tensor<T>::zeros({bc}));
    }
    Adam<T> opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    const Backbone<T> backbone = model.encoder;
    std::vector<double> losses;
    for (int step = 0; step < steps; ++step) {
        auto rng = step_rng(seed, step, 1);
        const Scene<T>& scene = data[std::uniform_int_distribution<std::size_t>(0, data.size() - 1)(rng)];
        const PatchPair<T> pair = sample_patch_pair(scene, 1, cfg.patch, rng);
        Tape<T> tape;
        const auto bound = bind_params(tape, trainable, true);
        const auto fx2 = extract_image_features(tape.constant(pair.x_q), backbone, bound, mc);
        const auto fc1 = extract_label_features(tape, pair.c_p, bound, mc);
        const auto fc2 = extract_label_features(tape, pair.c_q, bound, mc);
        const auto aligned = msca_multiscale(fx2, fc1, fc2, bound, mc).aligned;
        const auto targets = model.encoder.forward(tape.constant(pair.x_p));
        Var<T> loss = tape.constant(Tensor<T>::scalar(0));
        for (int s = 0; s < mc.scales(); ++s) {
            const auto i = static_cast<std::size_t>(s);
            const std::string p = "pre.dec." + std::to_string(s);
            const auto pred = conv1x1(aligned[i], bound[p + ".w"], bound[p + ".b"]);
            loss = add(loss, l1_loss(pred, tape.constant(targets[i].value())));
        }
        loss = scale(loss, T(1) / static_cast<T>(mc.scales()));
        const double value = static_cast<double>(loss.value()[0]);
        if (!std::isfinite(value)) {
            throw TrainingDiverged(step, "non-finite pretraining loss at step " + std::to_string(step));
        }
        losses.push_back(value);
        opt.step(trainable, collect_grads(tape.backward(loss), bound));
        if (log) *log << "pretrain step=" << step << " loss=" << value << "\n";
    }
    for (auto& [name, t] : model.params) {
        auto it = trainable.find(name);
        if (it != trainable.end()) t = it->second;
    }
    return losses;
}

std::vector<double> smooth(const std::vector<double>& xs, std::size_t window) {
    std::vector<double> out(xs.size());
    double acc = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        acc += xs[i];
        if (i >= window) acc -= xs[i - window];
        out[i] = acc / static_cast<double>(std::min(i + 1, window));
    }
    return out;
}

#define MSCA_INSTANTIATE_SELFSUP(T)                                                                           \
    template Scene<T> gen_synthetic_scene<T>(std::mt19937_64&, int, int64_t);                                 \
    template std::vector<Scene<T>> make_synthetic_dataset<T>(int, int, int64_t, uint64_t);                    \
    template void save_dataset(const std::filesystem::path&, const std::vector<Scene<T>>&);                   \
    template std::vector<Scene<T>> load_dataset<T>(const std::filesystem::path&, int);                        \
    template PatchPair<T> sample_patch_pair(const Scene<T>&, int, int, std::mt19937_64&);                     \
    template MatchTerms<T> loss_match(const Var<T>&, const Tensor<T>&, const std::vector<Var<T>>&,            \
                                      const std::vector<Tensor<T>>&, const ToyEncoder<T>&);                   \
    template TaskStep<T> train_step_cross(const PatchPair<T>&, const GeneratorModel<T>&, const ParamSet<T>&,  \
                                          const TrainConfig&, bool, bool);                                    \
    template TaskStep<T> train_step_self(const Scene<T>&, const GeneratorModel<T>&, const ParamSet<T>&,       \
                                         const TrainConfig&, bool, bool);                                     \
    template class Adam<T>;                                                                                   \
    template class Trainer<T>;                                                                                \
    template void train(Trainer<T>&, const std::filesystem::path&, std::ostream&);                            \
    template std::vector<double> pretrain_msca(const std::vector<Scene<T>>&, GeneratorModel<T>&,              \
                                               const TrainConfig&, int, uint64_t, std::ostream*);

MSCA_INSTANTIATE_SELFSUP(float)
MSCA_INSTANTIATE_SELFSUP(double)

}  // namespace msca
