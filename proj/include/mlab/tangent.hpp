#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "mlab/model.hpp"
#include "mlab/tensor.hpp"
#include "mlab/worlds.hpp"

namespace mlab {

// Linear autoencoder fit by the closed-form PCA solution: encoder = top-k
// principal directions of the sample covariance, decoder = its transpose,
// both around the sample mean. Minimizes mean squared reconstruction error.
class LinearAutoencoder {
 public:
  // Warns on stderr and proceeds when the covariance has rank < k.
  static LinearAutoencoder fit(const LabeledDataset& data, std::size_t k);

  std::size_t ambient_dim() const { return decoder_.rows(); }
  std::size_t latent_dim() const { return decoder_.cols(); }
  const Tensor& decoder() const { return decoder_; }  // (d, k)
  const Tensor& mean() const { return mean_; }

  Tensor encode(const Tensor& x) const;       // (d) -> (k)
  Tensor reconstruct(const Tensor& x) const;  // (d) -> (d)
  double reconstruction_mse(const LabeledDataset& data) const;

  // P = D (D^T D)^{-1} D^T; constant across inputs for a linear decoder.
  Projector estimated_projector() const;
  Projector estimated_projector(const Tensor& x) const { (void)x; return estimated_projector(); }

  void save(std::ostream& os) const;
  static LinearAutoencoder load(std::istream& is);
  void save_file(const std::filesystem::path& p) const;
  static LinearAutoencoder load_file(const std::filesystem::path& p);

 private:
  LinearAutoencoder() = default;
  Tensor mean_;     // (d)
  Tensor decoder_;  // (d, k), orthonormal columns from the eigensolver
};

// Frobenius distance between two estimated/true projectors; 0 iff the
// subspaces coincide.
double projector_error(const Projector& est, const Projector& truth);

// Largest principal angle (radians) between the column spaces of two
// orthonormal-ish bases; validation helper for estimator tests.
double max_principal_angle(const Tensor& basis_a, const Tensor& basis_b);

// Nonlinear option for curved manifolds: a small MLP encoder/decoder trained
// on reconstruction error; the tangent is the decoder Jacobian at the encoded
// latent of the (clean) input.
class MlpAutoencoder {
 public:
  struct Options {
    std::size_t hidden = 32;
    std::size_t epochs = 400;
    double lr = 0.02;
    std::uint64_t seed = 1;
  };

  static MlpAutoencoder fit(const LabeledDataset& data, std::size_t k, const Options& opt = {});

  Tensor encode(const Tensor& x) const;
  Tensor reconstruct(const Tensor& x) const;
  double reconstruction_mse(const LabeledDataset& data) const;
  Projector estimated_projector(const Tensor& x) const;

 private:
  MlpAutoencoder(Model enc, Model dec) : encoder_(std::move(enc)), decoder_(std::move(dec)) {}
  Model encoder_;
  Model decoder_;
};

}  // namespace mlab
