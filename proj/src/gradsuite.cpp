#include "msca/gradsuite.hpp"

#include <random>

#include "msca/synthesis.hpp"

namespace msca {

namespace {

Tensor<double> uniform_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
    return t;
}

LabelMap uniform_labels(int classes, int64_t h, int64_t w, std::mt19937_64& rng) {
    std::uniform_int_distribution<int32_t> d(0, classes - 1);
    std::vector<int32_t> g(static_cast<std::size_t>(h * w));
    for (auto& v : g) v = d(rng);
    return LabelMap(classes, h, w, std::move(g));
}

using UnaryOp = std::function<Var<double>(const Var<double>&)>;

// sum(op(x) * r) with a fixed random projection r so every output coordinate matters.
GradCheckReport check_unary(const UnaryOp& op, const Shape& shape, std::mt19937_64& rng) {
    const Tensor<double> x = uniform_tensor(shape, rng);
    Tape<double> probe;
    const Shape out_shape = op(probe.constant(x)).shape();
    const Tensor<double> proj = uniform_tensor(out_shape, rng);
    return grad_check([&](Tape<double>& tape, const Var<double>& v) { return sum(mul(op(v), tape.constant(proj))); }, x);
}

GradCheckReport check_multi(const MultiScalarFn& f, const std::vector<Tensor<double>>& thetas,
                            GradCheckOptions opts = {}) {
    return grad_check(f, thetas, opts);
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(uint64_t seed, bool include_broken) {
    std::mt19937_64 rng(seed);
    std::vector<GradSuiteEntry> out;
    const Shape img{3, 8, 8}, odd{2, 5, 7};
    const auto w1 = uniform_tensor({4, 3}, rng);
    const auto w3 = uniform_tensor({4, 3, 3, 3}, rng);
    const auto b4 = uniform_tensor({4}, rng);

    out.push_back({"conv1x1", check_unary([&](const Var<double>& x) { return conv1x1(x, x.tape().constant(w1)); }, img, rng)});
    for (int stride : {1, 2}) {
        out.push_back({"conv3x3/stride" + std::to_string(stride), check_unary([&](const Var<double>& x) {
                           return conv3x3(x, x.tape().constant(w3), Var<double>(x.tape().constant(b4)), stride);
                       }, img, rng)});
    }
    out.push_back({"bilinear_up2", check_unary([](const Var<double>& x) { return bilinear_up2(x); }, odd, rng)});
    out.push_back({"softmax_spatial", check_unary([](const Var<double>& x) { return softmax_spatial(x); }, img, rng)});
    out.push_back({"softmax_channel", check_unary([](const Var<double>& x) { return softmax_channel(x); }, img, rng)});
    out.push_back({"gap", check_unary([](const Var<double>& x) { return gap(x); }, odd, rng)});
    out.push_back({"leaky_relu", check_unary([](const Var<double>& x) { return leaky_relu(x); }, img, rng)});
    out.push_back({"relu", check_unary([](const Var<double>& x) { return relu(x); }, img, rng)});
    out.push_back({"sigmoid", check_unary([](const Var<double>& x) { return sigmoid(x); }, img, rng)});
    out.push_back({"tanh", check_unary([](const Var<double>& x) { return tanh(x); }, img, rng)});
    out.push_back({"softplus", check_unary([](const Var<double>& x) { return softplus(x); }, img, rng)});
    out.push_back({"instance_norm", check_unary([](const Var<double>& x) { return instance_norm(x); }, img, rng)});
    out.push_back({"reshape+transpose", check_unary([](const Var<double>& x) {
                       return transpose(reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}));
                   }, odd, rng)});
    out.push_back({"scale+add_scalar", check_unary([](const Var<double>& x) { return add_scalar(scale(x, 1.7), 0.3); }, odd, rng)});

    const auto x = uniform_tensor(img, rng), y = uniform_tensor(img, rng);
    const auto proj = uniform_tensor({4, 4, 4}, rng);
    out.push_back({"conv3x3.kernel", check_multi([&](Tape<double>& tape, const std::vector<Var<double>>& v) {
                       return sum(mul(conv3x3(tape.constant(x), v[0], Var<double>(v[1]), 2), tape.constant(proj)));
                   }, {w3, b4})});
    out.push_back({"conv1x1.kernel", check_multi([&](Tape<double>& tape, const std::vector<Var<double>>& v) {
                       return sum(leaky_relu(conv1x1(tape.constant(x), v[0], Var<double>(v[1]))));
                   }, {w1, b4})});
    out.push_back({"matmul", check_multi([](Tape<double>&, const std::vector<Var<double>>& v) {
                       return sum(tanh(matmul(v[0], v[1])));
                   }, {uniform_tensor({5, 3}, rng), uniform_tensor({3, 6}, rng)})});
    out.push_back({"linear", check_multi([](Tape<double>&, const std::vector<Var<double>>& v) {
                       return sum(tanh(linear(v[0], v[1], Var<double>(v[2]))));
                   }, {uniform_tensor({3}, rng), uniform_tensor({4, 3}, rng), uniform_tensor({4}, rng)})});
    out.push_back({"mul_map", check_multi([](Tape<double>&, const std::vector<Var<double>>& v) {
                       return sum(tanh(mul_map(v[0], v[1])));
                   }, {x, uniform_tensor({1, 8, 8}, rng)})});
    out.push_back({"scale_columns", check_multi([](Tape<double>&, const std::vector<Var<double>>& v) {
                       return sum(tanh(scale_columns(v[0], v[1])));
                   }, {uniform_tensor({5, 3}, rng), uniform_tensor({3}, rng)})});
    out.push_back({"concat_channels", check_multi([](Tape<double>&, const std::vector<Var<double>>& v) {
                       return sum(tanh(concat_channels<double>({v[0], v[1]})));
                   }, {x, uniform_tensor({2, 8, 8}, rng)})});
    out.push_back({"concat_width", check_multi([](Tape<double>&, const std::vector<Var<double>>& v) {
                       return sum(tanh(concat_width<double>({v[0], v[1]})));
                   }, {x, uniform_tensor({3, 8, 3}, rng)})});
    out.push_back({"add/sub/mul/mean/l1", check_multi([](Tape<double>&, const std::vector<Var<double>>& v) {
                       return add(l1_loss(v[0], v[1]), mean(sub(mul(v[0], v[1]), add(v[0], v[1]))));
                   }, {x, y})});

    {
        // one attention module, every weight and both feature inputs
        const ModelConfig cfg = ModelConfig::tiny(1, 3);
        std::mt19937_64 init(seed + 1);
        const ParamSet<double> p = init_msca_params<double>(cfg, init);
        const int64_t n = cfg.image_channels, m = cfg.label_width;
        std::vector<std::string> names{msca_name(0, "phi"), msca_name(0, "psi"), msca_name(0, "mlp.w1"),
                                       msca_name(0, "mlp.b1"), msca_name(0, "mlp.w2"), msca_name(0, "mlp.b2")};
        std::vector<Tensor<double>> thetas{uniform_tensor({n, 6, 6}, rng), uniform_tensor({m, 4, 8}, rng),
                                           uniform_tensor({m, 6, 6}, rng)};
        for (const auto& nm : names) thetas.push_back(uniform_tensor(p.at(nm).shape(), rng));
        const auto target = uniform_tensor({n, 4, 8}, rng);
        out.push_back({"msca_forward", check_multi([&](Tape<double>& tape, const std::vector<Var<double>>& v) {
                           const MscaWeights<double> w{v[3], v[4], v[5], v[6], v[7], v[8]};
                           return sum(mul(msca_forward(v[0], v[1], v[2], w).aligned, tape.constant(target)));
                       }, thetas)});
    }
    {
        const ModelConfig cfg = ModelConfig::tiny(3, 3);
        const auto model = GeneratorModel<double>::init(cfg, seed + 2);
        const auto c1 = uniform_labels(3, 8, 8, rng);
        const auto c2 = uniform_labels(3, 8, 8, rng);
        std::vector<std::string> names;
        std::vector<Tensor<double>> thetas{uniform_tensor({3, 8, 8}, rng)};
        for (const auto& [name, t] : model.params) {
            names.push_back(name);
            // random biases keep activations off the leaky_relu kink
            thetas.push_back(uniform_tensor(t.shape(), rng, -0.8, 0.8));
        }
        const auto target = uniform_tensor({3, 8, 8}, rng);
        const Backbone<double> backbone = model.encoder;
        // tanh and instance norm curve enough that eps 1e-4 leaves ~3e-5 of
        // truncation error; 1e-5 keeps it well under tolerance
        GradCheckOptions opts;
        opts.eps = 1e-5;
        out.push_back({"generator", check_multi([&](Tape<double>& tape, const std::vector<Var<double>>& v) {
                           BoundParams<double> bound;
                           for (std::size_t i = 0; i < names.size(); ++i) bound.insert(names[i], v[i + 1]);
                           const auto g = generator_forward(c1, v[0], c2, bound, cfg, backbone);
                           return sum(mul(g.image, tape.constant(target)));
                       }, thetas, opts)});
    }
    if (include_broken) {
        // d(x^2)/dx reported as 4x
        out.push_back({"broken_square", grad_check([](Tape<double>& tape, const Var<double>& v) {
                           Tensor<double> sq = v.value();
                           for (int64_t i = 0; i < sq.numel(); ++i) sq[i] *= sq[i];
                           auto r = tape.record(std::move(sq), {v}, [v](const Tensor<double>& g, GradSink<double>& sink) {
                               Tensor<double> gx = v.value();
                               for (int64_t i = 0; i < gx.numel(); ++i) gx[i] *= 4 * g[i];
                               sink.add(v, std::move(gx));
                           });
                           return sum(r);
                       }, uniform_tensor({5}, rng))});
    }
    return out;
}

}  // namespace msca
