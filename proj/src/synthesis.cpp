#include "msca/synthesis.hpp"

#include <stdexcept>

#include "msca/image_io.hpp"

namespace msca {

namespace {

template <typename T>
void add_conv3(ParamSet<T>& params, const std::string& name, int cout, int cin, double gain, std::mt19937_64& rng) {
    params.emplace(name + ".w", init_normal<T>({cout, cin, 3, 3}, cin * 9, gain, rng));
    params.emplace(name + ".b", Tensor<T>::zeros({cout}));
}

int block_input_channels(const ModelConfig& cfg, int scale) {
    if (scale == cfg.levels) return cfg.image_channels + cfg.label_width;
    return cfg.decoder_channels[static_cast<std::size_t>(scale + 1)];
}

std::string disc_name(int stage, const std::string& part) {
    return "disc.s" + std::to_string(stage) + "." + part;
}

template <typename T>
int count_prefix(const ParamSet<T>& all, const std::string& prefix) {
    int n = 0;
    while (all.count(prefix + std::to_string(n)) != 0) ++n;
    return n;
}

template <typename T>
const Tensor<T>& require_param(const ParamSet<T>& all, const std::string& name) {
    auto it = all.find(name);
    if (it == all.end()) throw std::out_of_range("checkpoint is missing parameter " + name);
    return it->second;
}

}  // namespace

std::string decoder_name(int scale, const std::string& part) { return "dec." + std::to_string(scale) + "." + part; }

template <typename T>
SpadeWeights<T> spade_weights(const BoundParams<T>& params, int scale) {
    auto get = [&](const std::string& part) { return params[decoder_name(scale, part)]; };
    SpadeWeights<T> w{get("shared.w"), get("shared.b"), get("gamma.w"), get("gamma.b"), get("beta.w"),
                      get("beta.b"),   get("conv1.w"),  get("conv1.b"), get("conv2.w"), get("conv2.b"),
                      std::nullopt};
    if (params.contains(decoder_name(scale, "skip.w"))) w.skip_w = get("skip.w");
    return w;
}

template <typename T>
ParamSet<T> init_decoder_params(const ModelConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    ParamSet<T> params;
    const int cond = cfg.image_channels + cfg.label_width;
    for (int s = cfg.levels; s >= 0; --s) {
        const int cin = block_input_channels(cfg, s);
        const int cout = cfg.decoder_channels[static_cast<std::size_t>(s)];
        const std::string p = "dec." + std::to_string(s) + ".";
        add_conv3(params, p + "shared", cfg.spade_hidden, cond, 1.4, rng);
        // Small modulation at init keeps the block close to a plain residual net.
        add_conv3(params, p + "gamma", cin, cfg.spade_hidden, 0.1, rng);
        add_conv3(params, p + "beta", cin, cfg.spade_hidden, 0.1, rng);
        add_conv3(params, p + "conv1", cout, cin, 1.4, rng);
        add_conv3(params, p + "conv2", cout, cout, 0.5, rng);
        if (cin != cout) params.emplace(p + "skip.w", init_normal<T>({cout, cin}, cin, 1.0, rng));
    }
    add_conv3(params, "head", 3, cfg.decoder_channels[0], 1.0, rng);
    return params;
}

template <typename T>
ParamSet<T> init_discriminator_params(const ModelConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    ParamSet<T> params;
    int cin = 2 * (3 + cfg.classes);
    for (std::size_t j = 0; j < cfg.disc_channels.size(); ++j) {
        const int cout = cfg.disc_channels[j];
        add_conv3(params, "disc.s" + std::to_string(j), cout, cin, 1.4, rng);
        cin = cout;
    }
    add_conv3(params, "disc.out", 1, cin, 1.0, rng);
    return params;
}

template <typename T>
Var<T> spade_modulate(const Var<T>& h, const Var<T>& cond, const SpadeWeights<T>& w) {
    require_shape(h.shape().size() == 3 && cond.shape().size() == 3 && h.dim(1) == cond.dim(1) &&
                      h.dim(2) == cond.dim(2),
                  "decoder block: conditioning " + shape_str(cond.shape()) + " does not match features " +
                      shape_str(h.shape()));
    const Var<T> hidden = leaky_relu(conv3x3(cond, w.shared_w, w.shared_b));
    const Var<T> gamma = conv3x3(hidden, w.gamma_w, w.gamma_b);
    const Var<T> beta = conv3x3(hidden, w.beta_w, w.beta_b);
    const Var<T> normed = instance_norm(h);
    return add(mul(normed, add_scalar(gamma, T(1))), beta);
}

template <typename T>
Var<T> spade_block_forward(const Var<T>& h, const Var<T>& cond, const SpadeWeights<T>& w) {
    const Var<T> modulated = spade_modulate(h, cond, w);
    const Var<T> a = conv3x3(leaky_relu(modulated), w.conv1_w, w.conv1_b);
    const Var<T> b = conv3x3(leaky_relu(a), w.conv2_w, w.conv2_b);
    const Var<T> skip = w.skip_w ? conv1x1(h, *w.skip_w) : h;
    return add(b, skip);
}

template <typename T>
Var<T> decode(const FeaturePyramid<T>& aligned, const FeaturePyramid<T>& structure, const BoundParams<T>& params,
              const ModelConfig& cfg) {
    const auto n = static_cast<std::size_t>(cfg.scales());
    require_shape(aligned.size() == n && structure.size() == n, "decoder needs one feature map per scale");
    Var<T> h;
    for (int s = cfg.levels; s >= 0; --s) {
        const auto i = static_cast<std::size_t>(s);
        const Var<T> cond = concat_channels<T>({aligned[i], structure[i]});
        if (s == cfg.levels) {
            h = cond;
        } else {
            h = bilinear_up2(h);
        }
        h = spade_block_forward(h, cond, spade_weights(params, s));
    }
    return tanh(conv3x3(h, params["head.w"], params["head.b"]));
}

template <typename T>
GeneratorOutput<T> generator_forward(const LabelMap& c1, const Var<T>& x2, const LabelMap& c2,
                                     const BoundParams<T>& params, const ModelConfig& cfg,
                                     const Backbone<T>& backbone) {
    require_shape(x2.shape().size() == 3 && x2.dim(0) == 3, "exemplar must be a [3,H,W] image");
    require_shape(c2.height() == x2.dim(1) && c2.width() == x2.dim(2),
                  "exemplar labels and image differ in extent");
    require_divisible(c1.height(), c1.width(), cfg.levels, "target label map");
    require_divisible(c2.height(), c2.width(), cfg.levels, "exemplar");
    Tape<T>& tape = x2.tape();
    GeneratorOutput<T> out;
    out.image_features = extract_image_features(x2, backbone, params, cfg);
    out.target_labels = extract_label_features(tape, c1, params, cfg);
    out.exemplar_labels = extract_label_features(tape, c2, params, cfg);
    MultiscaleOutput<T> ms = msca_multiscale(out.image_features, out.target_labels, out.exemplar_labels, params, cfg);
    out.aligned = std::move(ms.aligned);
    out.packs = std::move(ms.packs);
    out.image = decode(out.aligned, out.target_labels, params, cfg);
    return out;
}

template <typename T>
ModelConfig infer_config(const ParamSet<T>& all) {
    ModelConfig cfg;
    const int scales = count_prefix(all, "pyr.wx.");
    if (scales == 0) throw std::invalid_argument("checkpoint holds no generator parameters");
    cfg.levels = scales - 1;
    cfg.classes = static_cast<int>(require_param(all, wc_name(cfg.levels)).dim(1));
    cfg.image_channels = static_cast<int>(require_param(all, wx_name(0)).dim(0));
    cfg.label_width = static_cast<int>(require_param(all, wc_name(0)).dim(0));
    cfg.backbone_channels.clear();
    cfg.attention_slots.clear();
    cfg.decoder_channels.clear();
    for (int s = 0; s < scales; ++s) {
        cfg.backbone_channels.push_back(static_cast<int>(require_param(all, wx_name(s)).dim(1)));
        cfg.attention_slots.push_back(static_cast<int>(require_param(all, msca_name(s, "phi")).dim(0)));
        cfg.decoder_channels.push_back(static_cast<int>(require_param(all, decoder_name(s, "conv1.w")).dim(0)));
    }
    cfg.spade_hidden = static_cast<int>(require_param(all, decoder_name(0, "shared.w")).dim(0));
    std::vector<int> disc;
    for (int j = 0; all.count(disc_name(j, "w")) != 0; ++j) {
        disc.push_back(static_cast<int>(all.at(disc_name(j, "w")).dim(0)));
    }
    if (!disc.empty()) cfg.disc_channels = disc;
    cfg.validate();
    return cfg;
}

template <typename T>
GeneratorModel<T> GeneratorModel<T>::init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    GeneratorModel model;
    model.cfg = cfg;
    model.params = merge_params(init_pyramid_params<T>(cfg, rng), init_msca_params<T>(cfg, rng));
    model.params = merge_params(std::move(model.params), init_decoder_params<T>(cfg, rng));
    model.encoder = ToyEncoder<T>::random(cfg, seed ^ 0x5bd1e995u);
    return model;
}

template <typename T>
GeneratorModel<T> GeneratorModel<T>::from_params(const ParamSet<T>& all) {
    GeneratorModel model;
    model.cfg = infer_config(all);
    ParamSet<T> backbone;
    for (const auto& [name, t] : all) {
        if (name.rfind("backbone.", 0) == 0) {
            backbone.emplace(name, t);
        } else if (name.rfind("pyr.", 0) == 0 || name.rfind("msca.", 0) == 0 || name.rfind("dec.", 0) == 0 ||
                   name.rfind("head.", 0) == 0) {
            model.params.emplace(name, t);
        }
    }
    for (int s = 0; s < model.cfg.scales(); ++s) {
        const std::string p = "backbone.s" + std::to_string(s);
        if (backbone.count(p + ".w") == 0 || backbone.count(p + ".b") == 0) {
            throw std::out_of_range("checkpoint is missing backbone stage " + std::to_string(s));
        }
    }
    model.encoder = ToyEncoder<T>(model.cfg, std::move(backbone));
    return model;
}

template <typename T>
ParamSet<T> GeneratorModel<T>::all_params() const {
    return merge_params(params, encoder.params());
}

template <typename T>
Tensor<T> synthesize(const GeneratorModel<T>& model, const LabelMap& c1, const Tensor<T>& x2, const LabelMap& c2,
                     std::vector<AttentionPack<T>>* packs, Tape<T>* keep_tape) {
    Tape<T> local;
    Tape<T>& tape = keep_tape ? *keep_tape : local;
    const BoundParams<T> bound = bind_params(tape, model.params, false);
    const Backbone<T> backbone = model.encoder;
    GeneratorOutput<T> out = generator_forward(c1, tape.constant(x2), c2, bound, model.cfg, backbone);
    if (packs) {
        if (!keep_tape) throw std::logic_error("attention packs refer to the tape; pass keep_tape to read them");
        *packs = out.packs;
    }
    return out.image.value();
}

template <typename T>
DiscriminatorOutput<T> discriminator_forward(const Var<T>& x, const LabelMap& c_p, const Tensor<T>& x_q,
                                             const LabelMap& c_q, const BoundParams<T>& params,
                                             const ModelConfig& cfg) {
    require_shape(x.shape().size() == 3 && x.dim(0) == 3, "discriminator expects a [3,H,W] image");
    const int64_t h = x.dim(1), w = x.dim(2);
    require_shape(c_p.height() == h && c_p.width() == w, "discriminator: c_p extent differs from x");
    require_shape(x_q.rank() == 3 && x_q.dim(0) == 3, "discriminator: x_q must be [3,H,W]");
    require_shape(c_p.classes() == cfg.classes && c_q.classes() == cfg.classes,
                  "discriminator: label vocabulary differs from the model");
    const int64_t stride = int64_t{1} << cfg.disc_channels.size();
    require_shape(h % stride == 0 && w % stride == 0,
                  "discriminator input extent must be divisible by " + std::to_string(stride));
    Tape<T>& tape = x.tape();
    const Tensor<T> xq = (x_q.dim(1) == h && x_q.dim(2) == w) ? x_q : resize_bilinear(x_q, h, w);
    const LabelMap cq = (c_q.height() == h && c_q.width() == w) ? c_q : c_q.resized(h, w);
    Var<T> hcur = concat_channels<T>(
        {x, tape.constant(c_p.one_hot<T>()), tape.constant(xq), tape.constant(cq.one_hot<T>())});
    DiscriminatorOutput<T> out;
    for (std::size_t j = 0; j < cfg.disc_channels.size(); ++j) {
        const int s = static_cast<int>(j);
        hcur = leaky_relu(conv3x3(hcur, params[disc_name(s, "w")], params[disc_name(s, "b")], 2));
        out.features.push_back(hcur);
    }
    out.score = conv3x3(hcur, params["disc.out.w"], params["disc.out.b"]);
    return out;
}

#define MSCA_INSTANTIATE_SYNTHESIS(T)                                                                          \
    template SpadeWeights<T> spade_weights(const BoundParams<T>&, int);                                        \
    template ParamSet<T> init_decoder_params<T>(const ModelConfig&, std::mt19937_64&);                         \
    template ParamSet<T> init_discriminator_params<T>(const ModelConfig&, std::mt19937_64&);                   \
    template Var<T> spade_modulate(const Var<T>&, const Var<T>&, const SpadeWeights<T>&);                      \
    template Var<T> spade_block_forward(const Var<T>&, const Var<T>&, const SpadeWeights<T>&);                 \
    template Var<T> decode(const FeaturePyramid<T>&, const FeaturePyramid<T>&, const BoundParams<T>&,          \
                           const ModelConfig&);                                                                \
    template GeneratorOutput<T> generator_forward(const LabelMap&, const Var<T>&, const LabelMap&,             \
                                                  const BoundParams<T>&, const ModelConfig&, const Backbone<T>&); \
    template ModelConfig infer_config(const ParamSet<T>&);                                                     \
    template struct GeneratorModel<T>;                                                                         \
    template Tensor<T> synthesize(const GeneratorModel<T>&, const LabelMap&, const Tensor<T>&, const LabelMap&, \
                                  std::vector<AttentionPack<T>>*, Tape<T>*);                                   \
    template DiscriminatorOutput<T> discriminator_forward(const Var<T>&, const LabelMap&, const Tensor<T>&,    \
                                                          const LabelMap&, const BoundParams<T>&,              \
                                                          const ModelConfig&);

MSCA_INSTANTIATE_SYNTHESIS(float)
MSCA_INSTANTIATE_SYNTHESIS(double)

}  // namespace msca
