#pragma once

#include <random>

#include "vaelasso/pksim.hpp"
#include "vaelasso/vae.hpp"

namespace vaelasso::test_support {

/// Gradient check of the batch VAE loss with reparameterization noise held fixed.
inline double vae_gradient_error(std::size_t batch, double beta, std::size_t probes, std::uint64_t seed) {
  pksim::SimulationConfig sim;
  sim.n_train = batch;
  sim.n_test = 1;
  sim.seed = seed;
  const auto data = pksim::generate_dataset(sim).train;

  Rng rng = make_stream(seed, 1);
  auto model = vae::make_model(sim.grid_points, vae::Architecture{}, rng);
  model.profile_scale.scale = vae::to_matrix(data).maxCoeff();
  const nn::Matrix x = model.profile_scale.forward(vae::to_matrix(data));

  std::normal_distribution<double> normal(0.0, 1.0);
  nn::Matrix eps(static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(model.latent_dim));
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = normal(rng);

  const auto analytic = nn::flatten(vae::loss_and_gradients(model, x, eps, beta).gradients);
  auto layers = model.layers();
  const auto params = nn::parameter_pointers(layers);
  auto loss = [&] { return vae::loss_and_gradients(model, x, eps, beta).terms.total; };
  nn::GradientCheckOptions opt;
  opt.epsilon = 1e-5;
  opt.probes = probes;
  opt.seed = seed;
  return nn::gradient_check(params, analytic, loss, opt);
}

}  // namespace vaelasso::test_support
