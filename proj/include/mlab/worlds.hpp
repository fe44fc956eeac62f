#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mlab/tensor.hpp"

namespace mlab {

// d x d orthogonal projection matrix onto a tangent (sub)space.
class Projector {
 public:
  explicit Projector(Tensor P);
  static Projector identity(std::size_t d);
  static Projector zero(std::size_t d);
  static Projector from_basis(const Tensor& B);  // (d,k) columns spanning the subspace
  static Projector coordinate_mask(const std::vector<std::uint8_t>& mask);

  const Tensor& matrix() const { return P_; }
  std::size_t dim() const { return P_.rows(); }
  double trace() const;

  Tensor apply(const Tensor& v) const;             // P v
  Tensor apply_complement(const Tensor& v) const;  // (I - P) v
  // Row-wise application for batched noise: U (n,d) -> U P (P symmetric).
  Tensor apply_rows(const Tensor& U) const;
  Tensor apply_complement_rows(const Tensor& U) const;

  // max(|P^2 - P|, |P^T - P|) entry-wise; 0 for an exact projector.
  double defect() const;

 private:
  Tensor P_;
};

double frobenius_distance(const Projector& a, const Projector& b);

struct LabeledDataset {
  Tensor X;                        // (n, d)
  std::vector<std::int32_t> labels;
  Tensor latents;                  // (n, k); numel 0 when not applicable

  std::size_t size() const { return X.rows(); }
  std::size_t dim() const { return X.cols(); }
  Tensor row(std::size_t i) const;
  void write_csv(std::ostream& os) const;  // header x_0..x_{d-1},label
};

// A data-generating process with exact geometric oracles. All evaluation
// methods are pure; sampling is deterministic in the provided seed.
class World {
 public:
  virtual ~World() = default;

  virtual std::size_t dim() const = 0;
  virtual std::size_t manifold_dim() const = 0;
  virtual std::size_t num_classes() const = 0;
  virtual std::string name() const = 0;

  virtual LabeledDataset sample(std::size_t n, std::uint64_t seed) const = 0;

  // Projector onto the tangent space of the (signal) manifold at x. Worlds
  // with curved geometry use the latent preimage; a hint (the generating
  // latent stored with each sample) makes that search robust.
  virtual Projector tangent_projector(const Tensor& x) const = 0;
  virtual Projector tangent_projector(const Tensor& x, const Tensor& latent_hint) const;

  // Bayes posterior over classes, evaluated against the sigma-smoothed
  // class conditionals so that it is defined off the manifold. sigma < 0
  // selects the world's default evaluation smoothing.
  virtual std::vector<double> bayes_posterior(const Tensor& x, double sigma = -1.0) const = 0;
  virtual Tensor bayes_input_gradient(const Tensor& x, std::int32_t cls,
                                      double sigma = -1.0) const = 0;

  // Score of the smoothed conditional (or marginal when cls is nullopt):
  // grad_x log p(x | y, sigma). Closed form for Gaussian worlds only.
  virtual Tensor score(const Tensor& x, std::optional<std::int32_t> cls, double sigma) const = 0;
  // Posterior mean E[x0 | x0 + sigma*eps = x] under the marginal; satisfies
  // (D(x,sigma) - x) / sigma^2 == score(x, nullopt, sigma) exactly.
  virtual Tensor optimal_denoiser(const Tensor& x, double sigma) const = 0;

  double default_sigma() const { return eval_sigma_; }
  void set_default_sigma(double s) { eval_sigma_ = s; }

 protected:
  double eval_sigma_ = 0.05;
};

// Data on a k-dimensional linear subspace: x = B z (+ optional ambient noise),
// z drawn from per-class Gaussians with a shared latent covariance.
class LinearSubspaceWorld final : public World {
 public:
  LinearSubspaceWorld(std::size_t d, std::size_t k, std::uint64_t basis_seed,
                      std::vector<Tensor> latent_means, Tensor latent_cov,
                      std::vector<double> priors, double ambient_noise = 0.0);

  std::size_t dim() const override { return d_; }
  std::size_t manifold_dim() const override { return k_; }
  std::size_t num_classes() const override { return means_.size(); }
  std::string name() const override { return "linear-subspace"; }

  LabeledDataset sample(std::size_t n, std::uint64_t seed) const override;
  Projector tangent_projector(const Tensor& x) const override;
  std::vector<double> bayes_posterior(const Tensor& x, double sigma) const override;
  Tensor bayes_input_gradient(const Tensor& x, std::int32_t cls, double sigma) const override;
  Tensor score(const Tensor& x, std::optional<std::int32_t> cls, double sigma) const override;
  Tensor optimal_denoiser(const Tensor& x, double sigma) const override;

  const Tensor& basis() const { return B_; }  // (d, k), orthonormal columns

 private:
  std::size_t d_, k_;
  Tensor B_;
  std::vector<Tensor> means_;  // latent, (k)
  Tensor latent_cov_;          // (k, k)
  std::vector<double> priors_;
  double ambient_noise_;
  struct Impl;
  std::shared_ptr<const Impl> impl_;
};

// Coordinates split into a class-dependent signal block and a label-independent
// distractor block. The signal manifold is the signal coordinate subspace.
class SignalDistractorWorld final : public World {
 public:
  SignalDistractorWorld(std::vector<std::uint8_t> signal_mask,
                        std::vector<Tensor> signal_means, double signal_stddev,
                        Tensor distractor_mean, double distractor_stddev,
                        std::vector<double> priors);

  std::size_t dim() const override { return mask_.size(); }
  std::size_t manifold_dim() const override { return signal_dims_.size(); }
  std::size_t num_classes() const override { return signal_means_.size(); }
  std::string name() const override { return "signal-distractor"; }

  LabeledDataset sample(std::size_t n, std::uint64_t seed) const override;
  Projector tangent_projector(const Tensor& x) const override;  // diag(signal mask)
  std::vector<double> bayes_posterior(const Tensor& x, double sigma) const override;
  Tensor bayes_input_gradient(const Tensor& x, std::int32_t cls, double sigma) const override;
  Tensor score(const Tensor& x, std::optional<std::int32_t> cls, double sigma) const override;
  Tensor optimal_denoiser(const Tensor& x, double sigma) const override;

  const std::vector<std::uint8_t>& signal_mask() const { return mask_; }

 private:
  std::vector<std::uint8_t> mask_;
  std::vector<std::size_t> signal_dims_, distractor_dims_;
  std::vector<Tensor> signal_means_;  // (|signal|)
  double signal_stddev_;
  Tensor distractor_mean_;  // (|distractor|)
  double distractor_stddev_;
  std::vector<double> priors_;
  struct Impl;
  std::shared_ptr<const Impl> impl_;
};

// Smooth embedding phi: R^k -> R^d with an analytic Jacobian; classes are
// Gaussians in latent coordinates. Preimages are recovered with damped
// Gauss-Newton, warm-started from the generating latent when available.
class CurvedWorld final : public World {
 public:
  using EmbedFn = std::function<Tensor(const Tensor&)>;     // (k) -> (d)
  using JacobianFn = std::function<Tensor(const Tensor&)>;  // (k) -> (d, k)

  CurvedWorld(std::size_t d, std::size_t k, EmbedFn embed, JacobianFn jacobian,
              std::vector<Tensor> latent_means, double latent_stddev,
              std::vector<double> priors, double ambient_noise = 0.0);

  std::size_t dim() const override { return d_; }
  std::size_t manifold_dim() const override { return k_; }
  std::size_t num_classes() const override { return latent_means_.size(); }
  std::string name() const override { return "curved"; }

  LabeledDataset sample(std::size_t n, std::uint64_t seed) const override;
  Projector tangent_projector(const Tensor& x) const override;
  Projector tangent_projector(const Tensor& x, const Tensor& latent_hint) const override;
  std::vector<double> bayes_posterior(const Tensor& x, double sigma) const override;
  // Central differences of the posterior; curved worlds have no closed form.
  Tensor bayes_input_gradient(const Tensor& x, std::int32_t cls, double sigma) const override;
  Tensor score(const Tensor& x, std::optional<std::int32_t> cls, double sigma) const override;
  Tensor optimal_denoiser(const Tensor& x, double sigma) const override;

  // Damped Gauss-Newton solve of min_t |phi(t) - x|^2 to tolerance 1e-10.
  Tensor latent_preimage(const Tensor& x, const Tensor& start) const;

 private:
  std::size_t d_, k_;
  EmbedFn embed_;
  JacobianFn jacobian_;
  std::vector<Tensor> latent_means_;
  double latent_stddev_;
  std::vector<double> priors_;
  double ambient_noise_;
};

// Named presets: "subspace-2of8", "signal-distractor-4+4", "circle-in-3d".
std::unique_ptr<World> make_world(const std::string& preset, double ambient_noise = 0.0);

}  // namespace mlab
