#pragma once

// Variational autoencoder over concentration profiles. Profiles are scaled by
// a single constant (the training-set maximum) before encoding; the decoder
// works in scaled space and decode() maps back to mg/L.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vaelasso/nncore.hpp"
#include "vaelasso/pksim.hpp"
#include "vaelasso/rng.hpp"

namespace vaelasso::vae {

using nn::Matrix;
using nn::Vector;

inline constexpr int kModelFormatVersion = 1;
inline constexpr double kMapeFloorMgL = 1e-6;

struct Architecture {
  std::size_t latent_dim = 8;
  std::vector<Eigen::Index> hidden{64, 32};  // encoder widths; the decoder mirrors them
};

/// Maps mg/L profiles into the network's [0, 1] working space.
/// `max`: u = c / scale. `log`: x = ln(1 + u / offset) / ln(1 + 1 / offset), which
/// keeps relative resolution on low-concentration tails.
enum class ProfileTransform { max, log };

inline std::string to_string(ProfileTransform t) { return t == ProfileTransform::max ? "max" : "log"; }

inline ProfileTransform parse_profile_transform(const std::string& s) {
  if (s == "max") return ProfileTransform::max;
  if (s == "log") return ProfileTransform::log;
  throw std::invalid_argument("unknown profile transform '" + s + "'");
}

struct ProfileScaling {
  ProfileTransform transform = ProfileTransform::log;
  double scale = 1.0;    // mg/L, training-set maximum
  double offset = 1e-6;  // log transform only, in units of `scale`

  Matrix forward(const Matrix& mg_l) const {
    Matrix u = mg_l / scale;
    if (transform == ProfileTransform::max) return u;
    const double denom = std::log1p(1.0 / offset);
    return u.unaryExpr([&](double v) { return std::log1p(std::max(v, 0.0) / offset) / denom; });
  }

  Matrix inverse(const Matrix& x) const {
    if (transform == ProfileTransform::max) return x * scale;
    const double denom = std::log1p(1.0 / offset);
    return x.unaryExpr([&](double v) { return scale * offset * std::expm1(v * denom); });
  }
};

struct VaeModel {
  nn::Network encoder_trunk;
  nn::DenseLayer mu_head;
  nn::DenseLayer logvar_head;
  nn::Network decoder;
  std::size_t latent_dim = 0;
  std::size_t grid_length = 0;
  ProfileScaling profile_scale;

  /// All trainable layers in the fixed order trunk, mu head, logvar head, decoder.
  std::vector<nn::DenseLayer*> layers() {
    std::vector<nn::DenseLayer*> out;
    for (auto& l : encoder_trunk) out.push_back(&l);
    out.push_back(&mu_head);
    out.push_back(&logvar_head);
    for (auto& l : decoder) out.push_back(&l);
    return out;
  }
};

struct LatentCode {
  Vector mu;
  Vector logvar;

  Vector sigma() const { return (0.5 * logvar.array()).exp().matrix(); }
};

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 8;
  double kl_weight = 1e-3;
  double kl_warmup_fraction = 0.1;
  std::uint64_t seed = 7;
  double learning_rate = 3e-3;
  // Learning rate decays geometrically to learning_rate * lr_final_fraction at the last epoch.
  double lr_final_fraction = 0.01;
  ProfileTransform profile_transform = ProfileTransform::log;
  double log_offset = 1e-6;
  Architecture architecture{};

  void validate() const {
    auto fail = [](const std::string& f, const std::string& why) {
      throw std::invalid_argument("training." + f + ": " + why);
    };
    if (epochs == 0) fail("epochs", "must be > 0");
    if (batch_size == 0) fail("batch_size", "must be > 0");
    if (!(kl_weight > 0)) fail("kl_weight", "must be > 0");
    if (!(kl_warmup_fraction >= 0 && kl_warmup_fraction <= 1)) fail("kl_warmup_fraction", "must lie in [0, 1]");
    if (!(learning_rate > 0)) fail("learning_rate", "must be > 0");
    if (!(lr_final_fraction > 0 && lr_final_fraction <= 1)) fail("lr_final_fraction", "must lie in (0, 1]");
    if (!(log_offset > 0)) fail("log_offset", "must be > 0");
    if (architecture.latent_dim == 0) fail("latent_dim", "must be > 0");
    if (architecture.hidden.empty()) fail("hidden", "needs at least one hidden layer");
    for (auto w : architecture.hidden)
      if (w <= 0) fail("hidden", "widths must be > 0");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double reconstruction = 0;  // mean absolute error, scaled space
  double kl = 0;              // per-profile KL
  double beta = 0;
};

struct LossTerms {
  double total = 0;
  double reconstruction_mae = 0;
  double kl = 0;
};

struct Metrics {
  double mae_mg_l = 0;
  double mape_percent = 0;
  std::size_t points_total = 0;
  std::size_t points_in_mape = 0;
  double mape_floor_mg_l = kMapeFloorMgL;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline VaeModel make_model(std::size_t grid_length, const Architecture& arch, Rng& rng) {
  if (grid_length == 0 || arch.latent_dim == 0 || arch.hidden.empty())
    throw std::invalid_argument("make_model: empty dimension");
  const auto g = static_cast<Eigen::Index>(grid_length);
  const auto d = static_cast<Eigen::Index>(arch.latent_dim);
  VaeModel m;
  m.latent_dim = arch.latent_dim;
  m.grid_length = grid_length;

  std::vector<Eigen::Index> enc{g};
  enc.insert(enc.end(), arch.hidden.begin(), arch.hidden.end());
  m.encoder_trunk = nn::make_mlp(enc, nn::Activation::relu, nn::Activation::relu, rng);
  m.mu_head = nn::make_layer(arch.hidden.back(), d, nn::Activation::linear, rng);
  m.logvar_head = nn::make_layer(arch.hidden.back(), d, nn::Activation::linear, rng);

  std::vector<Eigen::Index> dec{d};
  dec.insert(dec.end(), arch.hidden.rbegin(), arch.hidden.rend());
  dec.push_back(g);
  m.decoder = nn::make_mlp(dec, nn::Activation::relu, nn::Activation::linear, rng);
  return m;
}

/// Concentrations in mg/L, one profile per row.
inline Matrix to_matrix(std::span<const pksim::Subject> subjects) {
  if (subjects.empty()) throw std::invalid_argument("no profiles");
  const auto g = static_cast<Eigen::Index>(subjects.front().curve.concentrations.size());
  Matrix x(static_cast<Eigen::Index>(subjects.size()), g);
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const auto& c = subjects[i].curve.concentrations;
    if (static_cast<Eigen::Index>(c.size()) != g) throw nn::ShapeError("profiles have different grid lengths");
    for (Eigen::Index j = 0; j < g; ++j) x(static_cast<Eigen::Index>(i), j) = c[static_cast<std::size_t>(j)];
  }
  return x;
}

struct BatchCode {
  Matrix mu;
  Matrix logvar;
};

/// Encodes scaled profiles (one per row).
inline BatchCode encode_batch(const VaeModel& model, const Matrix& scaled) {
  if (scaled.cols() != static_cast<Eigen::Index>(model.grid_length))
    throw nn::ShapeError("encode: profile length " + std::to_string(scaled.cols()) + " != model grid length " +
                         std::to_string(model.grid_length));
  Matrix h = nn::forward(model.encoder_trunk, scaled).back();
  return {nn::layer_forward(model.mu_head, h), nn::layer_forward(model.logvar_head, h)};
}

inline LatentCode encode(const VaeModel& model, std::span<const double> scaled_profile) {
  Matrix x = Eigen::Map<const Matrix>(scaled_profile.data(), 1, static_cast<Eigen::Index>(scaled_profile.size()));
  auto code = encode_batch(model, x);
  return {code.mu.row(0).transpose(), code.logvar.row(0).transpose()};
}

inline Vector reparameterize(const LatentCode& code, const Vector& noise) {
  if (noise.size() != code.mu.size() || code.logvar.size() != code.mu.size())
    throw nn::ShapeError("reparameterize: dimension mismatch");
  return code.mu + code.sigma().cwiseProduct(noise);
}

inline Vector reparameterize(const LatentCode& code, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector eps(code.mu.size());
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps[i] = normal(rng);
  return reparameterize(code, eps);
}

/// Decoder output in scaled space, no clamping.
inline Matrix decode_scaled(const VaeModel& model, const Matrix& z) {
  if (z.cols() != static_cast<Eigen::Index>(model.latent_dim))
    throw nn::ShapeError("decode: latent width " + std::to_string(z.cols()) + " != latent_dim " +
                         std::to_string(model.latent_dim));
  return nn::forward(model.decoder, z).back();
}

/// Decodes latent rows to mg/L, clamped at zero.
inline Matrix decode_batch(const VaeModel& model, const Matrix& z) {
  return model.profile_scale.inverse(decode_scaled(model, z)).cwiseMax(0.0);
}

inline std::vector<double> decode(const VaeModel& model, const Vector& z) {
  Matrix out = decode_batch(model, z.transpose());
  return {out.data(), out.data() + out.size()};
}

inline double kl_divergence(const Vector& mu, const Vector& logvar) {
  return 0.5 * (mu.array().square() + logvar.array().exp() - 1.0 - logvar.array()).sum();
}

/// Single-profile loss in scaled space: mean |x - x_hat| + beta * KL(q || N(0, I)).
inline LossTerms vae_loss(std::span<const double> x, std::span<const double> x_hat, const LatentCode& code,
                          double beta) {
  if (x.size() != x_hat.size() || x.empty()) throw nn::ShapeError("vae_loss: profile lengths differ");
  LossTerms t;
  for (std::size_t i = 0; i < x.size(); ++i) t.reconstruction_mae += std::abs(x[i] - x_hat[i]);
  t.reconstruction_mae /= static_cast<double>(x.size());
  t.kl = kl_divergence(code.mu, code.logvar);
  t.total = t.reconstruction_mae + beta * t.kl;
  return t;
}

struct BatchResult {
  LossTerms terms;  // batch means
  std::vector<nn::LayerGradient> gradients;  // ordered as VaeModel::layers()
};

/// Batch-mean loss and exact gradients with the reparameterization noise `eps` held fixed.
inline BatchResult loss_and_gradients(const VaeModel& model, const Matrix& x, const Matrix& eps, double beta) {
  const Eigen::Index batch = x.rows();
  const double inv_b = 1.0 / static_cast<double>(batch);
  const double inv_g = 1.0 / static_cast<double>(x.cols());

  auto trunk_acts = nn::forward(model.encoder_trunk, x);
  const Matrix& h = trunk_acts.back();
  std::vector<Matrix> mu_acts{h, nn::layer_forward(model.mu_head, h)};
  std::vector<Matrix> lv_acts{h, nn::layer_forward(model.logvar_head, h)};
  const Matrix& mu = mu_acts[1];
  const Matrix& lv = lv_acts[1];
  if (eps.rows() != mu.rows() || eps.cols() != mu.cols()) throw nn::ShapeError("loss_and_gradients: noise shape");

  const Matrix sigma = (0.5 * lv.array()).exp().matrix();
  const Matrix z = mu + sigma.cwiseProduct(eps);
  auto dec_acts = nn::forward(model.decoder, z);
  const Matrix diff = dec_acts.back() - x;

  BatchResult res;
  res.terms.reconstruction_mae = diff.cwiseAbs().sum() * inv_g * inv_b;
  res.terms.kl = 0.5 * (mu.array().square() + lv.array().exp() - 1.0 - lv.array()).sum() * inv_b;
  res.terms.total = res.terms.reconstruction_mae + beta * res.terms.kl;

  const Matrix d_out = diff.unaryExpr([&](double v) { return (v > 0 ? 1.0 : v < 0 ? -1.0 : 0.0) * inv_g * inv_b; });
  auto dec_back = nn::backward(model.decoder, dec_acts, d_out);
  const Matrix& dz = dec_back.input_gradient;

  const Matrix d_mu = dz + (beta * inv_b) * mu;
  const Matrix d_lv = (dz.array() * 0.5 * sigma.array() * eps.array() +
                       (beta * inv_b * 0.5) * (lv.array().exp() - 1.0))
                          .matrix();
  auto mu_back = nn::backward(std::span(&model.mu_head, 1), mu_acts, d_mu);
  auto lv_back = nn::backward(std::span(&model.logvar_head, 1), lv_acts, d_lv);
  auto trunk_back = nn::backward(model.encoder_trunk, trunk_acts, mu_back.input_gradient + lv_back.input_gradient);

  res.gradients = std::move(trunk_back.gradients);
  res.gradients.push_back(std::move(mu_back.gradients[0]));
  res.gradients.push_back(std::move(lv_back.gradients[0]));
  for (auto& g : dec_back.gradients) res.gradients.push_back(std::move(g));
  return res;
}

inline double learning_rate_at_epoch(const TrainConfig& config, std::size_t epoch) {
  if (config.epochs < 2) return config.learning_rate;
  const double progress = static_cast<double>(epoch) / static_cast<double>(config.epochs - 1);
  return config.learning_rate * std::pow(config.lr_final_fraction, progress);
}

inline double beta_at_epoch(const TrainConfig& config, std::size_t epoch) {
  const double warm = std::round(config.kl_warmup_fraction * static_cast<double>(config.epochs));
  if (warm <= 0) return config.kl_weight;
  return config.kl_weight * std::min(1.0, static_cast<double>(epoch) / warm);
}

struct TrainResult {
  VaeModel model;
  std::vector<EpochRecord> history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Minibatch Adam on the VAE loss. The profile scale is fit on `train`
/// before the first epoch; the model is initialized from `config.seed`.
inline TrainResult train(std::span<const pksim::Subject> train_set, const TrainConfig& config,
                         const EpochCallback& on_epoch = {}) {
  config.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");

  Rng init_rng = make_stream(config.seed, 0);
  Rng shuffle_rng = make_stream(config.seed, 1);
  Rng noise_rng = make_stream(config.seed, 2);

  const std::size_t grid = train_set.front().curve.concentrations.size();
  TrainResult out;
  out.model = make_model(grid, config.architecture, init_rng);
  double scale = 0.0;
  for (const auto& s : train_set)
    for (double c : s.curve.concentrations) scale = std::max(scale, c);
  if (!(scale > 0)) throw std::invalid_argument("train: all training concentrations are zero");
  out.model.profile_scale = {config.profile_transform, scale, config.log_offset};
  const Matrix data = out.model.profile_scale.forward(to_matrix(train_set));

  VaeModel& model = out.model;
  auto params = model.layers();
  nn::AdamHyper hyper;
  hyper.learning_rate = config.learning_rate;
  nn::AdamState adam;
  adam.hyper = hyper;
  for (auto* l : params) {
    adam.first_moment.push_back({Matrix::Zero(l->weights.rows(), l->weights.cols()), Vector::Zero(l->bias.size())});
    adam.second_moment.push_back(adam.first_moment.back());
  }

  const auto n = static_cast<std::size_t>(data.rows());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto d = static_cast<Eigen::Index>(model.latent_dim);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double beta = beta_at_epoch(config, epoch);
    adam.hyper.learning_rate = learning_rate_at_epoch(config, epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double recon_sum = 0, kl_sum = 0;
    for (std::size_t start = 0, batch_no = 0; start < n; start += config.batch_size, ++batch_no) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      const auto b = static_cast<Eigen::Index>(stop - start);
      Matrix x(b, data.cols());
      for (Eigen::Index r = 0; r < b; ++r) x.row(r) = data.row(static_cast<Eigen::Index>(order[start + static_cast<std::size_t>(r)]));
      Matrix eps(b, d);
      for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = normal(noise_rng);

      auto res = loss_and_gradients(model, x, eps, beta);
      if (!std::isfinite(res.terms.total))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_no) + " (reconstruction " +
                            std::to_string(res.terms.reconstruction_mae) + ", kl " + std::to_string(res.terms.kl) + ")");
      recon_sum += res.terms.reconstruction_mae * static_cast<double>(b);
      kl_sum += res.terms.kl * static_cast<double>(b);
      nn::adam_step(params, res.gradients, adam);
    }
    EpochRecord rec{epoch, recon_sum / static_cast<double>(n), kl_sum / static_cast<double>(n), beta};
    out.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return out;
}

/// MAE and MAPE between true and reconstructed profiles in mg/L. MAPE skips
/// true values at or below kMapeFloorMgL (the pre-absorption zeros).
inline Metrics reconstruction_metrics(const Matrix& truth, const Matrix& recon) {
  if (truth.rows() != recon.rows() || truth.cols() != recon.cols() || truth.size() == 0)
    throw nn::ShapeError("reconstruction_metrics: shape mismatch");
  Metrics m;
  double abs_sum = 0, pct_sum = 0;
  for (Eigen::Index i = 0; i < truth.size(); ++i) {
    const double t = truth.data()[i];
    const double e = std::abs(t - recon.data()[i]);
    abs_sum += e;
    if (t > kMapeFloorMgL) {
      pct_sum += e / t;
      ++m.points_in_mape;
    }
  }
  m.points_total = static_cast<std::size_t>(truth.size());
  m.mae_mg_l = abs_sum / static_cast<double>(m.points_total);
  m.mape_percent = m.points_in_mape ? 100.0 * pct_sum / static_cast<double>(m.points_in_mape) : 0.0;
  return m;
}

/// Posterior-mean reconstructions (z = mu) in mg/L, one row per subject.
inline Matrix reconstruct(const VaeModel& model, std::span<const pksim::Subject> subjects) {
  for (const auto& s : subjects)
    if (s.curve.concentrations.size() != model.grid_length)
      throw nn::ShapeError("profile grid length " + std::to_string(s.curve.concentrations.size()) +
                           " != model grid length " + std::to_string(model.grid_length));
  return decode_batch(model, encode_batch(model, model.profile_scale.forward(to_matrix(subjects))).mu);
}

inline Metrics evaluate(const VaeModel& model, std::span<const pksim::Subject> test_set) {
  if (test_set.empty()) throw std::invalid_argument("evaluate: empty test set");
  const Matrix recon = reconstruct(model, test_set);
  return reconstruction_metrics(to_matrix(test_set), recon);
}

inline nlohmann::json to_json(const VaeModel& m) {
  return {{"format_version", kModelFormatVersion},
          {"latent_dim", m.latent_dim},
          {"grid_length", m.grid_length},
          {"profile_scale",
           {{"transform", to_string(m.profile_scale.transform)},
            {"scale", m.profile_scale.scale},
            {"offset", m.profile_scale.offset}}},
          {"encoder_trunk", nn::to_json(m.encoder_trunk)},
          {"mu_head", nn::to_json(std::span(&m.mu_head, 1))},
          {"logvar_head", nn::to_json(std::span(&m.logvar_head, 1))},
          {"decoder", nn::to_json(m.decoder)}};
}

inline VaeModel model_from_json(const nlohmann::json& j) {
  if (j.value("format_version", -1) != kModelFormatVersion)
    throw std::invalid_argument("model json: unsupported format_version");
  VaeModel m;
  m.latent_dim = j.at("latent_dim").get<std::size_t>();
  m.grid_length = j.at("grid_length").get<std::size_t>();
  const auto& ps = j.at("profile_scale");
  m.profile_scale.transform = parse_profile_transform(ps.at("transform").get<std::string>());
  m.profile_scale.scale = ps.at("scale").get<double>();
  m.profile_scale.offset = ps.at("offset").get<double>();
  m.encoder_trunk = nn::network_from_json(j.at("encoder_trunk"));
  auto mu = nn::network_from_json(j.at("mu_head"));
  auto lv = nn::network_from_json(j.at("logvar_head"));
  m.decoder = nn::network_from_json(j.at("decoder"));
  if (mu.size() != 1 || lv.size() != 1) throw nn::ShapeError("model json: heads must be single layers");
  m.mu_head = std::move(mu[0]);
  m.logvar_head = std::move(lv[0]);
  const auto d = static_cast<Eigen::Index>(m.latent_dim);
  const auto g = static_cast<Eigen::Index>(m.grid_length);
  if (m.encoder_trunk.empty() || m.decoder.empty() || m.encoder_trunk.front().in() != g ||
      m.mu_head.in() != m.encoder_trunk.back().out() || m.logvar_head.in() != m.encoder_trunk.back().out() ||
      m.mu_head.out() != d || m.logvar_head.out() != d || m.decoder.front().in() != d || m.decoder.back().out() != g)
    throw nn::ShapeError("model json: layer shapes inconsistent with latent_dim/grid_length");
  if (!(m.profile_scale.scale > 0) || !(m.profile_scale.offset > 0))
    throw std::invalid_argument("model json: profile scale and offset must be > 0");
  return m;
}

}  // namespace vaelasso::vae
