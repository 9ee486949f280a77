#pragma once

// Fixed-topology multilayer perceptrons: batched forward pass with cached
// activations, analytic backpropagation, Adam, finite-difference gradient
// checking and JSON parameter serialization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "vaelasso/rng.hpp"

namespace vaelasso::nn {

/// Row-major dense matrix; a batch is stored one sample per row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline constexpr int kParameterFormatVersion = 1;

enum class Activation { relu, linear, softplus };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::linear: return "linear";
    case Activation::softplus: return "softplus";
  }
  throw std::invalid_argument("invalid activation");
}

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "linear") return Activation::linear;
  if (s == "softplus") return Activation::softplus;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DenseLayer {
  Matrix weights;  // out x in
  Vector bias;     // out
  Activation activation = Activation::linear;

  Eigen::Index in() const { return weights.cols(); }
  Eigen::Index out() const { return weights.rows(); }

  bool operator==(const DenseLayer& o) const {
    return activation == o.activation && weights.rows() == o.weights.rows() &&
           weights.cols() == o.weights.cols() && bias.size() == o.bias.size() &&
           weights == o.weights && bias == o.bias;
  }
};

struct LayerGradient {
  Matrix d_weights;
  Vector d_bias;
};

using Network = std::vector<DenseLayer>;

/// Glorot-uniform weights in +-sqrt(6 / (in + out)), zero bias.
inline DenseLayer make_layer(Eigen::Index in, Eigen::Index out, Activation act, Rng& rng) {
  DenseLayer layer;
  layer.activation = act;
  layer.weights.resize(out, in);
  layer.bias = Vector::Zero(out);
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (Eigen::Index r = 0; r < out; ++r)
    for (Eigen::Index c = 0; c < in; ++c) layer.weights(r, c) = dist(rng);
  return layer;
}

/// Stacks layers of the given widths; `hidden` applies to every layer but the last.
inline Network make_mlp(std::span<const Eigen::Index> widths, Activation hidden, Activation output,
                        Rng& rng) {
  if (widths.size() < 2) throw std::invalid_argument("make_mlp: need at least two widths");
  Network net;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i)
    net.push_back(make_layer(widths[i], widths[i + 1], i + 2 == widths.size() ? output : hidden, rng));
  return net;
}

namespace detail {

inline void apply_activation(Matrix& z, Activation act) {
  switch (act) {
    case Activation::linear: break;
    case Activation::relu: z = z.cwiseMax(0.0); break;
    case Activation::softplus:
      z = z.unaryExpr([](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); });
      break;
  }
}

// d(activation)/d(pre-activation), expressed through the activation output.
inline void scale_by_derivative(Matrix& grad, const Matrix& output, Activation act) {
  switch (act) {
    case Activation::linear: break;
    case Activation::relu: grad = (output.array() > 0.0).select(grad, 0.0); break;
    case Activation::softplus: grad.array() *= 1.0 - (-output.array()).exp(); break;
  }
}

}  // namespace detail

inline Matrix layer_forward(const DenseLayer& layer, const Matrix& input) {
  if (input.cols() != layer.in())
    throw ShapeError("layer input width " + std::to_string(input.cols()) + " != expected " +
                     std::to_string(layer.in()));
  Matrix z = input * layer.weights.transpose();
  z.rowwise() += layer.bias.transpose();
  detail::apply_activation(z, layer.activation);
  return z;
}

/// Returns [input, a_1, ..., a_L]; the last entry is the network output.
inline std::vector<Matrix> forward(std::span<const DenseLayer> layers, const Matrix& input) {
  std::vector<Matrix> acts;
  acts.reserve(layers.size() + 1);
  acts.push_back(input);
  for (const auto& layer : layers) acts.push_back(layer_forward(layer, acts.back()));
  return acts;
}

struct BackwardResult {
  std::vector<LayerGradient> gradients;
  Matrix input_gradient;
};

inline BackwardResult backward(std::span<const DenseLayer> layers, std::span<const Matrix> activations,
                               const Matrix& output_gradient) {
  if (activations.size() != layers.size() + 1)
    throw ShapeError("backward: activation cache does not match layer count");
  const Matrix& out = activations.back();
  if (output_gradient.rows() != out.rows() || output_gradient.cols() != out.cols())
    throw ShapeError("backward: output gradient shape mismatch");

  BackwardResult res;
  res.gradients.resize(layers.size());
  Matrix delta = output_gradient;
  for (std::size_t k = layers.size(); k-- > 0;) {
    detail::scale_by_derivative(delta, activations[k + 1], layers[k].activation);
    res.gradients[k].d_weights = delta.transpose() * activations[k];
    res.gradients[k].d_bias = delta.colwise().sum().transpose();
    delta = delta * layers[k].weights;
  }
  res.input_gradient = std::move(delta);
  return res;
}

inline std::vector<LayerGradient> zero_gradients(std::span<const DenseLayer> layers) {
  std::vector<LayerGradient> g;
  g.reserve(layers.size());
  for (const auto& l : layers)
    g.push_back({Matrix::Zero(l.weights.rows(), l.weights.cols()), Vector::Zero(l.bias.size())});
  return g;
}

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamHyper hyper;
  std::vector<LayerGradient> first_moment;
  std::vector<LayerGradient> second_moment;
  std::int64_t step_count = 0;

  static AdamState for_layers(std::span<const DenseLayer> layers, AdamHyper hyper = {}) {
    AdamState s;
    s.hyper = hyper;
    s.first_moment = zero_gradients(layers);
    s.second_moment = zero_gradients(layers);
    return s;
  }
};

/// One bias-corrected Adam update over `layers`, in place.
inline void adam_step(std::span<DenseLayer* const> layers, std::span<const LayerGradient> grads,
                      AdamState& state) {
  if (layers.size() != grads.size() || layers.size() != state.first_moment.size())
    throw ShapeError("adam_step: parameter, gradient and state counts differ");
  ++state.step_count;
  const auto& h = state.hyper;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);

  auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
    if (param.size() != grad.size() || param.size() != m.size())
      throw ShapeError("adam_step: shape mismatch");
    m = h.beta1 * m + (1.0 - h.beta1) * grad;
    v = h.beta2 * v + (1.0 - h.beta2) * grad.cwiseAbs2();
    param.array() -= h.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + h.epsilon);
  };
  for (std::size_t k = 0; k < layers.size(); ++k) {
    update(layers[k]->weights, grads[k].d_weights, state.first_moment[k].d_weights,
           state.second_moment[k].d_weights);
    update(layers[k]->bias, grads[k].d_bias, state.first_moment[k].d_bias, state.second_moment[k].d_bias);
  }
}

inline void adam_step(std::vector<DenseLayer>& layers, std::span<const LayerGradient> grads,
                      AdamState& state) {
  std::vector<DenseLayer*> ptrs;
  for (auto& l : layers) ptrs.push_back(&l);
  adam_step(ptrs, grads, state);
}

/// Flat views in a fixed order: for each layer, weights row-major then bias.
inline std::vector<double*> parameter_pointers(std::span<DenseLayer* const> layers) {
  std::vector<double*> out;
  for (DenseLayer* l : layers) {
    for (Eigen::Index i = 0; i < l->weights.size(); ++i) out.push_back(l->weights.data() + i);
    for (Eigen::Index i = 0; i < l->bias.size(); ++i) out.push_back(l->bias.data() + i);
  }
  return out;
}

inline std::vector<double> flatten(std::span<const LayerGradient> grads) {
  std::vector<double> out;
  for (const auto& g : grads) {
    out.insert(out.end(), g.d_weights.data(), g.d_weights.data() + g.d_weights.size());
    out.insert(out.end(), g.d_bias.data(), g.d_bias.data() + g.d_bias.size());
  }
  return out;
}

struct GradientCheckOptions {
  double epsilon = 1e-5;
  std::size_t probes = 200;  // parameters probed; all of them when fewer exist
  std::uint64_t seed = 0;
  // Denominator floor: gradients below this are compared in absolute terms.
  double abs_floor = 1e-6;
};

/// Worst relative error |a - n| / max(|a|, |n|, abs_floor) between analytic
/// gradients and central differences of `loss` over a random parameter subset.
inline double gradient_check(std::span<double* const> parameters, std::span<const double> analytic,
                             const std::function<double()>& loss, const GradientCheckOptions& opt = {}) {
  if (parameters.size() != analytic.size())
    throw ShapeError("gradient_check: parameter and gradient counts differ");
  if (opt.epsilon < 1e-7 || opt.epsilon > 1e-3)
    throw std::invalid_argument("gradient_check: epsilon must lie in [1e-7, 1e-3]");

  std::vector<std::size_t> idx(parameters.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (opt.probes < idx.size()) {
    Rng rng = make_stream(opt.seed, 0x67c);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(opt.probes);
  }

  double worst = 0.0;
  for (std::size_t i : idx) {
    double& p = *parameters[i];
    const double saved = p;
    p = saved + opt.epsilon;
    const double up = loss();
    p = saved - opt.epsilon;
    const double down = loss();
    p = saved;
    const double numeric = (up - down) / (2.0 * opt.epsilon);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), opt.abs_floor});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

/// Loss over a network output: returns the value and d(loss)/d(output).
using OutputLoss = std::function<std::pair<double, Matrix>(const Matrix& output)>;

inline double gradient_check(Network& network, const OutputLoss& loss_function, const Matrix& probe_input,
                             const GradientCheckOptions& opt = {}) {
  auto acts = forward(network, probe_input);
  auto [value, out_grad] = loss_function(acts.back());
  (void)value;
  auto back = backward(network, acts, out_grad);

  std::vector<DenseLayer*> ptrs;
  for (auto& l : network) ptrs.push_back(&l);
  auto params = parameter_pointers(ptrs);
  auto analytic = flatten(back.gradients);
  auto eval = [&] { return loss_function(forward(network, probe_input).back()).first; };
  return gradient_check(params, analytic, eval, opt);
}

inline nlohmann::json to_json(std::span<const DenseLayer> layers) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& l : layers) {
    arr.push_back({{"in", l.in()},
                   {"out", l.out()},
                   {"activation", to_string(l.activation)},
                   {"weights", std::vector<double>(l.weights.data(), l.weights.data() + l.weights.size())},
                   {"bias", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())}});
  }
  return {{"format_version", kParameterFormatVersion}, {"layers", arr}};
}

inline Network network_from_json(const nlohmann::json& j) {
  if (j.value("format_version", -1) != kParameterFormatVersion)
    throw std::invalid_argument("network json: unsupported format_version");
  Network net;
  for (const auto& lj : j.at("layers")) {
    const auto in = lj.at("in").get<Eigen::Index>();
    const auto out = lj.at("out").get<Eigen::Index>();
    auto w = lj.at("weights").get<std::vector<double>>();
    auto b = lj.at("bias").get<std::vector<double>>();
    if (in <= 0 || out <= 0 || static_cast<Eigen::Index>(w.size()) != in * out ||
        static_cast<Eigen::Index>(b.size()) != out)
      throw ShapeError("network json: layer arrays do not match declared shape");
    DenseLayer l;
    l.activation = parse_activation(lj.at("activation").get<std::string>());
    l.weights = Eigen::Map<const Matrix>(w.data(), out, in);
    l.bias = Eigen::Map<const Vector>(b.data(), out);
    if (!l.weights.allFinite() || !l.bias.allFinite())
      throw std::invalid_argument("network json: non-finite parameter");
    net.push_back(std::move(l));
  }
  for (std::size_t k = 1; k < net.size(); ++k)
    if (net[k].in() != net[k - 1].out()) throw ShapeError("network json: consecutive layer widths differ");
  return net;
}

}  // namespace vaelasso::nn
