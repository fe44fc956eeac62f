#include "mlab/worlds.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <ostream>

#include "mlab/rng.hpp"

namespace mlab {

namespace {

Eigen::VectorXd to_eigen(const Tensor& t) {
  Eigen::VectorXd v(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) v[static_cast<Eigen::Index>(i)] = t[i];
  return v;
}

Tensor from_eigen(const Eigen::VectorXd& v) {
  Tensor t(Shape{static_cast<std::size_t>(v.size())});
  for (Eigen::Index i = 0; i < v.size(); ++i) t[static_cast<std::size_t>(i)] = v[i];
  return t;
}

Tensor from_eigen_mat(const Eigen::MatrixXd& m) {
  Tensor t(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      t.at2(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = m(i, j);
  return t;
}

Eigen::MatrixXd to_eigen_mat(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t.at2(i, j);
  return m;
}

// Deterministic random matrix with orthonormal columns.
Eigen::MatrixXd random_orthonormal(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd g(rows, cols);
  for (std::size_t j = 0; j < cols; ++j)
    for (std::size_t i = 0; i < rows; ++i)
      g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(
                                              static_cast<Eigen::Index>(rows),
                                              static_cast<Eigen::Index>(cols));
  return q;
}

std::int32_t draw_label(Rng& rng, const std::vector<double>& priors) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t y = 0; y < priors.size(); ++y) {
    acc += priors[y];
    if (u < acc) return static_cast<std::int32_t>(y);
  }
  return static_cast<std::int32_t>(priors.size() - 1);
}

void check_priors(const std::vector<double>& priors) {
  double s = 0.0;
  for (double p : priors) {
    if (p < 0.0) throw std::invalid_argument("class priors must be non-negative");
    s += p;
  }
  if (std::fabs(s - 1.0) > 1e-9) throw std::invalid_argument("class priors must sum to 1");
}

// Shared-covariance Gaussian mixture with closed-form posterior, score and
// denoiser under sigma-smoothing (covariance inflated by sigma^2 I).
struct GaussianOracle {
  std::vector<double> priors;
  std::vector<Eigen::VectorXd> means;  // ambient, (d)
  Eigen::MatrixXd base_cov;            // shared across classes, (d,d)

  std::size_t dim() const { return static_cast<std::size_t>(base_cov.rows()); }

  Eigen::LLT<Eigen::MatrixXd> smoothed_llt(double sigma) const {
    Eigen::MatrixXd c = base_cov;
    c.diagonal().array() += sigma * sigma;
    Eigen::LLT<Eigen::MatrixXd> llt(c);
    if (llt.info() != Eigen::Success)
      throw NumericError("smoothed covariance is not positive definite");
    return llt;
  }

  std::vector<double> log_joint(const Eigen::VectorXd& x,
                                const Eigen::LLT<Eigen::MatrixXd>& llt) const {
    // log prior + log N(x; m_y, C), constants shared across classes dropped.
    const Eigen::MatrixXd& l = llt.matrixLLT();
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < l.rows(); ++i) logdet += 2.0 * std::log(l(i, i));
    std::vector<double> out(means.size());
    for (std::size_t y = 0; y < means.size(); ++y) {
      if (priors[y] <= 0.0) {
        out[y] = -std::numeric_limits<double>::infinity();
        continue;
      }
      const Eigen::VectorXd r = x - means[y];
      const double maha = r.dot(llt.solve(r));
      out[y] = std::log(priors[y]) - 0.5 * maha - 0.5 * logdet;
    }
    return out;
  }

  std::vector<double> posterior(const Eigen::VectorXd& x, double sigma) const {
    const auto llt = smoothed_llt(sigma);
    auto lj = log_joint(x, llt);
    double m = lj[0];
    for (double v : lj) m = std::max(m, v);
    if (!std::isfinite(m)) throw NumericError("bayes posterior: all class densities vanish");
    double s = 0.0;
    for (double& v : lj) {
      v = std::exp(v - m);
      s += v;
    }
    for (double& v : lj) v /= s;
    return lj;
  }

  // grad_x p(y=cls | x) in the pairwise-difference form
  //   p_i * sum_j p_j * C^{-1} (m_i - m_j),
  // which is exactly zero on coordinates where all class means agree.
  Eigen::VectorXd posterior_gradient(const Eigen::VectorXd& x, std::int32_t cls,
                                     double sigma) const {
    const auto llt = smoothed_llt(sigma);
    const auto post = posterior_with_llt(x, llt);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(base_cov.rows());
    for (std::size_t j = 0; j < means.size(); ++j) {
      if (post[j] == 0.0 || static_cast<std::int32_t>(j) == cls) continue;
      const Eigen::VectorXd diff = means[static_cast<std::size_t>(cls)] - means[j];
      g += post[j] * llt.solve(diff);
    }
    return post[static_cast<std::size_t>(cls)] * g;
  }

  Eigen::VectorXd cond_score(const Eigen::VectorXd& x, std::int32_t cls, double sigma) const {
    const auto llt = smoothed_llt(sigma);
    return -llt.solve(x - means[static_cast<std::size_t>(cls)]);
  }

  Eigen::VectorXd marginal_score(const Eigen::VectorXd& x, double sigma) const {
    const auto llt = smoothed_llt(sigma);
    const auto post = posterior_with_llt(x, llt);
    Eigen::VectorXd s = Eigen::VectorXd::Zero(base_cov.rows());
    for (std::size_t y = 0; y < means.size(); ++y) {
      if (post[y] == 0.0) continue;
      s += post[y] * (-llt.solve(x - means[y]));
    }
    return s;
  }

  Eigen::VectorXd denoiser(const Eigen::VectorXd& x, double sigma) const {
    const auto llt = smoothed_llt(sigma);
    const auto post = posterior_with_llt(x, llt);
    Eigen::VectorXd d = Eigen::VectorXd::Zero(base_cov.rows());
    for (std::size_t y = 0; y < means.size(); ++y) {
      if (post[y] == 0.0) continue;
      d += post[y] * (means[y] + base_cov * llt.solve(x - means[y]));
    }
    return d;
  }

 private:
  std::vector<double> posterior_with_llt(const Eigen::VectorXd& x,
                                         const Eigen::LLT<Eigen::MatrixXd>& llt) const {
    auto lj = log_joint(x, llt);
    double m = lj[0];
    for (double v : lj) m = std::max(m, v);
    if (!std::isfinite(m)) throw NumericError("bayes posterior: all class densities vanish");
    double s = 0.0;
    for (double& v : lj) {
      v = std::exp(v - m);
      s += v;
    }
    for (double& v : lj) v /= s;
    return lj;
  }
};

void require_sigma_positive(double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
}

}  // namespace

// --- Projector ----------------------------------------------------------------

Projector::Projector(Tensor P) : P_(std::move(P)) {
  if (P_.rank() != 2 || P_.rows() != P_.cols())
    throw ShapeError("projector must be a square matrix");
}

Projector Projector::identity(std::size_t d) {
  Tensor p(Shape{d, d});
  for (std::size_t i = 0; i < d; ++i) p.at2(i, i) = 1.0;
  return Projector(std::move(p));
}

Projector Projector::zero(std::size_t d) { return Projector(Tensor(Shape{d, d})); }

Projector Projector::from_basis(const Tensor& B) {
  const Eigen::MatrixXd b = to_eigen_mat(B);
  const Eigen::MatrixXd gram = b.transpose() * b;
  Eigen::LLT<Eigen::MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success) throw NumericError("projector basis is rank deficient");
  const Eigen::MatrixXd p = b * llt.solve(b.transpose());
  return Projector(from_eigen_mat(p));
}

Projector Projector::coordinate_mask(const std::vector<std::uint8_t>& mask) {
  const std::size_t d = mask.size();
  Tensor p(Shape{d, d});
  for (std::size_t i = 0; i < d; ++i) p.at2(i, i) = mask[i] ? 1.0 : 0.0;
  return Projector(std::move(p));
}

double Projector::trace() const {
  double t = 0.0;
  for (std::size_t i = 0; i < dim(); ++i) t += P_.at2(i, i);
  return t;
}

Tensor Projector::apply(const Tensor& v) const {
  const std::size_t d = dim();
  if (v.numel() != d) throw ShapeError("projector/vector dimension mismatch");
  Tensor out(Shape{d});
  for (std::size_t i = 0; i < d; ++i) {
    const double* row = P_.data() + i * d;
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += row[j] * v[j];
    out[i] = s;
  }
  return out;
}

Tensor Projector::apply_complement(const Tensor& v) const {
  Tensor pv = apply(v);
  for (std::size_t i = 0; i < pv.numel(); ++i) pv[i] = v[i] - pv[i];
  return pv;
}

Tensor Projector::apply_rows(const Tensor& U) const {
  const std::size_t d = dim();
  if (U.rank() != 2 || U.cols() != d) throw ShapeError("apply_rows: want (n,d)");
  const std::size_t n = U.rows();
  Tensor out(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const double* urow = U.data() + i * d;
    double* orow = out.data() + i * d;
    for (std::size_t p = 0; p < d; ++p) {
      const double u = urow[p];
      if (u == 0.0) continue;
      const double* prow = P_.data() + p * d;  // P symmetric: U P == U P^T
      for (std::size_t j = 0; j < d; ++j) orow[j] += u * prow[j];
    }
  }
  return out;
}

Tensor Projector::apply_complement_rows(const Tensor& U) const {
  Tensor out = apply_rows(U);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = U[i] - out[i];
  return out;
}

double Projector::defect() const {
  const std::size_t d = dim();
  double worst = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double pp = 0.0;
      for (std::size_t p = 0; p < d; ++p) pp += P_.at2(i, p) * P_.at2(p, j);
      worst = std::max(worst, std::fabs(pp - P_.at2(i, j)));
      worst = std::max(worst, std::fabs(P_.at2(i, j) - P_.at2(j, i)));
    }
  }
  return worst;
}

double frobenius_distance(const Projector& a, const Projector& b) {
  if (a.dim() != b.dim()) throw ShapeError("projector dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.matrix().numel(); ++i) {
    const double diff = a.matrix()[i] - b.matrix()[i];
    s += diff * diff;
  }
  return std::sqrt(s);
}

// --- LabeledDataset -------------------------------------------------------------

Tensor LabeledDataset::row(std::size_t i) const {
  const std::size_t d = dim();
  return Tensor::from(std::vector<double>(X.data() + i * d, X.data() + (i + 1) * d), Shape{d});
}

void LabeledDataset::write_csv(std::ostream& os) const {
  const std::size_t d = dim();
  for (std::size_t j = 0; j < d; ++j) os << "x_" << j << ",";
  os << "label\n";
  char buf[32];
  for (std::size_t i = 0; i < size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", X.at2(i, j));
      os << buf << ",";
    }
    os << labels[i] << "\n";
  }
}

// --- LinearSubspaceWorld --------------------------------------------------------

struct LinearSubspaceWorld::Impl {
  Eigen::MatrixXd B;        // (d,k) orthonormal
  Eigen::MatrixXd chol_z;   // lower Cholesky of latent covariance
  GaussianOracle oracle;    // ambient mixture
  std::vector<Eigen::VectorXd> latent_means;
};

LinearSubspaceWorld::LinearSubspaceWorld(std::size_t d, std::size_t k, std::uint64_t basis_seed,
                                         std::vector<Tensor> latent_means, Tensor latent_cov,
                                         std::vector<double> priors, double ambient_noise)
    : d_(d), k_(k), means_(std::move(latent_means)), latent_cov_(std::move(latent_cov)),
      priors_(std::move(priors)), ambient_noise_(ambient_noise) {
  if (k > d) throw std::invalid_argument("manifold dimension exceeds ambient dimension");
  if (means_.empty() || means_.size() != priors_.size())
    throw std::invalid_argument("need one latent mean and prior per class");
  check_priors(priors_);

  auto impl = std::make_shared<Impl>();
  impl->B = random_orthonormal(d, k, basis_seed);
  const Eigen::MatrixXd cov_z = to_eigen_mat(latent_cov_);
  Eigen::LLT<Eigen::MatrixXd> llt(cov_z);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument("latent covariance must be positive definite");
  impl->chol_z = llt.matrixL();
  impl->oracle.priors = priors_;
  impl->oracle.base_cov = impl->B * cov_z * impl->B.transpose();
  for (const Tensor& mu : means_) {
    if (mu.numel() != k) throw std::invalid_argument("latent mean has wrong dimension");
    impl->latent_means.push_back(to_eigen(mu));
    impl->oracle.means.push_back(impl->B * impl->latent_means.back());
  }
  B_ = from_eigen_mat(impl->B);
  impl_ = std::move(impl);
}

LabeledDataset LinearSubspaceWorld::sample(std::size_t n, std::uint64_t seed) const {
  if (n == 0) throw std::invalid_argument("sample: n must be at least 1");
  LabeledDataset ds;
  ds.X = Tensor(Shape{n, d_});
  ds.latents = Tensor(Shape{n, k_});
  ds.labels.resize(n);
  Rng rng(seed);
  Eigen::VectorXd eps(static_cast<Eigen::Index>(k_));
  for (std::size_t i = 0; i < n; ++i) {
    const std::int32_t y = draw_label(rng, priors_);
    ds.labels[i] = y;
    for (std::size_t j = 0; j < k_; ++j) eps[static_cast<Eigen::Index>(j)] = rng.normal();
    const Eigen::VectorXd z =
        impl_->latent_means[static_cast<std::size_t>(y)] + impl_->chol_z * eps;
    Eigen::VectorXd x = impl_->B * z;
    if (ambient_noise_ > 0.0) {
      for (std::size_t j = 0; j < d_; ++j) x[static_cast<Eigen::Index>(j)] += ambient_noise_ * rng.normal();
    }
    for (std::size_t j = 0; j < d_; ++j) ds.X.at2(i, j) = x[static_cast<Eigen::Index>(j)];
    for (std::size_t j = 0; j < k_; ++j) ds.latents.at2(i, j) = z[static_cast<Eigen::Index>(j)];
  }
  return ds;
}

Projector LinearSubspaceWorld::tangent_projector(const Tensor&) const {
  return Projector(from_eigen_mat(impl_->B * impl_->B.transpose()));
}

std::vector<double> LinearSubspaceWorld::bayes_posterior(const Tensor& x, double sigma) const {
  const double s = sigma < 0.0 ? eval_sigma_ : sigma;
  const Eigen::VectorXd xe = to_eigen(x);
  if (s > 0.0) return impl_->oracle.posterior(xe, s);
  // Unsmoothed subspace world: only defined on the manifold itself.
  const Eigen::VectorXd z = impl_->B.transpose() * xe;
  if ((xe - impl_->B * z).norm() > 1e-8)
    throw NumericError("bayes posterior: point off the manifold in a zero-noise world");
  GaussianOracle latent;
  latent.priors = priors_;
  latent.means = impl_->latent_means;
  latent.base_cov = to_eigen_mat(latent_cov_);  // full rank in latent coordinates
  return latent.posterior(z, 0.0);
}

Tensor LinearSubspaceWorld::bayes_input_gradient(const Tensor& x, std::int32_t cls,
                                                 double sigma) const {
  if (cls < 0 || static_cast<std::size_t>(cls) >= priors_.size())
    throw std::invalid_argument("bayes_input_gradient: class out of range");
  const double s = sigma < 0.0 ? eval_sigma_ : sigma;
  require_sigma_positive(s);
  return from_eigen(impl_->oracle.posterior_gradient(to_eigen(x), cls, s));
}

Tensor LinearSubspaceWorld::score(const Tensor& x, std::optional<std::int32_t> cls,
                                  double sigma) const {
  require_sigma_positive(sigma);
  if (cls) return from_eigen(impl_->oracle.cond_score(to_eigen(x), *cls, sigma));
  return from_eigen(impl_->oracle.marginal_score(to_eigen(x), sigma));
}

Tensor LinearSubspaceWorld::optimal_denoiser(const Tensor& x, double sigma) const {
  require_sigma_positive(sigma);
  return from_eigen(impl_->oracle.denoiser(to_eigen(x), sigma));
}

// --- SignalDistractorWorld ------------------------------------------------------

struct SignalDistractorWorld::Impl {
  GaussianOracle oracle;
};

SignalDistractorWorld::SignalDistractorWorld(std::vector<std::uint8_t> signal_mask,
                                             std::vector<Tensor> signal_means,
                                             double signal_stddev, Tensor distractor_mean,
                                             double distractor_stddev,
                                             std::vector<double> priors)
    : mask_(std::move(signal_mask)), signal_means_(std::move(signal_means)),
      signal_stddev_(signal_stddev), distractor_mean_(std::move(distractor_mean)),
      distractor_stddev_(distractor_stddev), priors_(std::move(priors)) {
  check_priors(priors_);
  if (signal_means_.empty() || signal_means_.size() != priors_.size())
    throw std::invalid_argument("need one signal mean and prior per class");
  for (std::size_t i = 0; i < mask_.size(); ++i)
    (mask_[i] ? signal_dims_ : distractor_dims_).push_back(i);
  if (signal_dims_.empty() || distractor_dims_.empty())
    throw std::invalid_argument("both signal and distractor blocks must be non-empty");
  for (const Tensor& m : signal_means_) {
    if (m.numel() != signal_dims_.size())
      throw std::invalid_argument("signal mean has wrong dimension");
  }
  if (distractor_mean_.numel() != distractor_dims_.size())
    throw std::invalid_argument("distractor mean has wrong dimension");

  auto impl = std::make_shared<Impl>();
  impl->oracle.priors = priors_;
  const std::size_t d = mask_.size();
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  for (std::size_t i : signal_dims_) cov(i, i) = signal_stddev_ * signal_stddev_;
  for (std::size_t i : distractor_dims_) cov(i, i) = distractor_stddev_ * distractor_stddev_;
  impl->oracle.base_cov = cov;
  for (const Tensor& sm : signal_means_) {
    Eigen::VectorXd m = Eigen::VectorXd::Zero(d);
    for (std::size_t j = 0; j < signal_dims_.size(); ++j) m[signal_dims_[j]] = sm[j];
    for (std::size_t j = 0; j < distractor_dims_.size(); ++j)
      m[distractor_dims_[j]] = distractor_mean_[j];
    impl->oracle.means.push_back(std::move(m));
  }
  impl_ = std::move(impl);
}

LabeledDataset SignalDistractorWorld::sample(std::size_t n, std::uint64_t seed) const {
  if (n == 0) throw std::invalid_argument("sample: n must be at least 1");
  const std::size_t d = mask_.size();
  LabeledDataset ds;
  ds.X = Tensor(Shape{n, d});
  ds.labels.resize(n);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::int32_t y = draw_label(rng, priors_);
    ds.labels[i] = y;
    const Tensor& sm = signal_means_[static_cast<std::size_t>(y)];
    for (std::size_t j = 0; j < signal_dims_.size(); ++j)
      ds.X.at2(i, signal_dims_[j]) = sm[j] + signal_stddev_ * rng.normal();
    // the distractor draw never touches the label
    for (std::size_t j = 0; j < distractor_dims_.size(); ++j)
      ds.X.at2(i, distractor_dims_[j]) = distractor_mean_[j] + distractor_stddev_ * rng.normal();
  }
  return ds;
}

Projector SignalDistractorWorld::tangent_projector(const Tensor&) const {
  return Projector::coordinate_mask(mask_);
}

std::vector<double> SignalDistractorWorld::bayes_posterior(const Tensor& x, double sigma) const {
  const double s = sigma < 0.0 ? eval_sigma_ : sigma;
  return impl_->oracle.posterior(to_eigen(x), s);
}

Tensor SignalDistractorWorld::bayes_input_gradient(const Tensor& x, std::int32_t cls,
                                                   double sigma) const {
  if (cls < 0 || static_cast<std::size_t>(cls) >= priors_.size())
    throw std::invalid_argument("bayes_input_gradient: class out of range");
  const double s = sigma < 0.0 ? eval_sigma_ : sigma;
  return from_eigen(impl_->oracle.posterior_gradient(to_eigen(x), cls, std::max(s, 0.0)));
}

Tensor SignalDistractorWorld::score(const Tensor& x, std::optional<std::int32_t> cls,
                                    double sigma) const {
  require_sigma_positive(sigma);
  if (cls) return from_eigen(impl_->oracle.cond_score(to_eigen(x), *cls, sigma));
  return from_eigen(impl_->oracle.marginal_score(to_eigen(x), sigma));
}

Tensor SignalDistractorWorld::optimal_denoiser(const Tensor& x, double sigma) const {
  require_sigma_positive(sigma);
  return from_eigen(impl_->oracle.denoiser(to_eigen(x), sigma));
}

// --- CurvedWorld ----------------------------------------------------------------

CurvedWorld::CurvedWorld(std::size_t d, std::size_t k, EmbedFn embed, JacobianFn jacobian,
                         std::vector<Tensor> latent_means, double latent_stddev,
                         std::vector<double> priors, double ambient_noise)
    : d_(d), k_(k), embed_(std::move(embed)), jacobian_(std::move(jacobian)),
      latent_means_(std::move(latent_means)), latent_stddev_(latent_stddev),
      priors_(std::move(priors)), ambient_noise_(ambient_noise) {
  check_priors(priors_);
  if (latent_means_.empty() || latent_means_.size() != priors_.size())
    throw std::invalid_argument("need one latent mean and prior per class");
}

LabeledDataset CurvedWorld::sample(std::size_t n, std::uint64_t seed) const {
  if (n == 0) throw std::invalid_argument("sample: n must be at least 1");
  LabeledDataset ds;
  ds.X = Tensor(Shape{n, d_});
  ds.latents = Tensor(Shape{n, k_});
  ds.labels.resize(n);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::int32_t y = draw_label(rng, priors_);
    ds.labels[i] = y;
    Tensor t(Shape{k_});
    const Tensor& mu = latent_means_[static_cast<std::size_t>(y)];
    for (std::size_t j = 0; j < k_; ++j) t[j] = mu[j] + latent_stddev_ * rng.normal();
    Tensor x = embed_(t);
    if (ambient_noise_ > 0.0) {
      for (std::size_t j = 0; j < d_; ++j) x[j] += ambient_noise_ * rng.normal();
    }
    for (std::size_t j = 0; j < d_; ++j) ds.X.at2(i, j) = x[j];
    for (std::size_t j = 0; j < k_; ++j) ds.latents.at2(i, j) = t[j];
  }
  return ds;
}

Tensor CurvedWorld::latent_preimage(const Tensor& x, const Tensor& start) const {
  const Eigen::VectorXd xe = to_eigen(x);
  Eigen::VectorXd t = to_eigen(start);
  double damping = 1e-3;
  Eigen::VectorXd residual = to_eigen(embed_(from_eigen(t))) - xe;
  for (int iter = 0; iter < 200; ++iter) {
    const Eigen::MatrixXd j = to_eigen_mat(jacobian_(from_eigen(t)));
    const Eigen::MatrixXd jtj = j.transpose() * j;
    if (jtj.llt().info() != Eigen::Success)
      throw NumericError("latent_preimage: rank-deficient Jacobian");
    const Eigen::VectorXd grad = j.transpose() * residual;
    if (grad.lpNorm<Eigen::Infinity>() < 1e-12) break;
    Eigen::MatrixXd damped = jtj;
    damped.diagonal().array() += damping;
    const Eigen::VectorXd step = damped.llt().solve(-grad);
    const Eigen::VectorXd t_new = t + step;
    const Eigen::VectorXd r_new = to_eigen(embed_(from_eigen(t_new))) - xe;
    if (r_new.squaredNorm() <= residual.squaredNorm()) {
      t = t_new;
      residual = r_new;
      damping = std::max(damping / 3.0, 1e-12);
      if (step.lpNorm<Eigen::Infinity>() < 1e-10) break;
    } else {
      damping *= 10.0;
      if (damping > 1e12) break;
    }
  }
  return from_eigen(t);
}

Projector CurvedWorld::tangent_projector(const Tensor& x) const {
  // no hint: warm-start from every class mean, keep the best fit
  Tensor best;
  double best_res = std::numeric_limits<double>::infinity();
  for (const Tensor& mu : latent_means_) {
    const Tensor t = latent_preimage(x, mu);
    Tensor fx = embed_(t);
    double res = 0.0;
    for (std::size_t j = 0; j < d_; ++j) res += (fx[j] - x[j]) * (fx[j] - x[j]);
    if (res < best_res) {
      best_res = res;
      best = t;
    }
  }
  return tangent_projector(x, best);
}

Projector CurvedWorld::tangent_projector(const Tensor& x, const Tensor& latent_hint) const {
  const Tensor t = latent_preimage(x, latent_hint);
  const Eigen::MatrixXd j = to_eigen_mat(jacobian_(t));
  Eigen::LLT<Eigen::MatrixXd> llt(j.transpose() * j);
  if (llt.info() != Eigen::Success)
    throw NumericError("tangent_projector: rank-deficient Jacobian");
  return Projector(from_eigen_mat(j * llt.solve(j.transpose())));
}

std::vector<double> CurvedWorld::bayes_posterior(const Tensor& x, double /*sigma*/) const {
  // Evaluated in latent coordinates at the nearest manifold point; the
  // class-independent distance factor cancels in the ratio.
  Tensor best;
  double best_res = std::numeric_limits<double>::infinity();
  for (const Tensor& mu : latent_means_) {
    const Tensor cand = latent_preimage(x, mu);
    Tensor fx = embed_(cand);
    double res = 0.0;
    for (std::size_t j = 0; j < d_; ++j) res += (fx[j] - x[j]) * (fx[j] - x[j]);
    if (res < best_res) {
      best_res = res;
      best = cand;
    }
  }
  std::vector<double> lj(priors_.size());
  const double inv_var = 1.0 / (latent_stddev_ * latent_stddev_);
  for (std::size_t y = 0; y < priors_.size(); ++y) {
    if (priors_[y] <= 0.0) {
      lj[y] = -std::numeric_limits<double>::infinity();
      continue;
    }
    double maha = 0.0;
    for (std::size_t j = 0; j < k_; ++j) {
      const double r = best[j] - latent_means_[y][j];
      maha += r * r;
    }
    lj[y] = std::log(priors_[y]) - 0.5 * maha * inv_var;
  }
  double m = lj[0];
  for (double v : lj) m = std::max(m, v);
  double s = 0.0;
  for (double& v : lj) {
    v = std::exp(v - m);
    s += v;
  }
  for (double& v : lj) v /= s;
  return lj;
}

Tensor CurvedWorld::bayes_input_gradient(const Tensor& x, std::int32_t cls, double sigma) const {
  if (cls < 0 || static_cast<std::size_t>(cls) >= priors_.size())
    throw std::invalid_argument("bayes_input_gradient: class out of range");
  const double h = 1e-6;
  Tensor g(Shape{d_});
  Tensor xp = x;
  for (std::size_t i = 0; i < d_; ++i) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = bayes_posterior(xp, sigma)[static_cast<std::size_t>(cls)];
    xp[i] = orig - h;
    const double fm = bayes_posterior(xp, sigma)[static_cast<std::size_t>(cls)];
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

Tensor CurvedWorld::score(const Tensor&, std::optional<std::int32_t>, double sigma) const {
  require_sigma_positive(sigma);
  throw std::logic_error("score: closed form requires a Gaussian world");
}

Tensor CurvedWorld::optimal_denoiser(const Tensor&, double sigma) const {
  require_sigma_positive(sigma);
  throw std::logic_error("optimal_denoiser: closed form requires a Gaussian world");
}

// --- World base / presets -------------------------------------------------------

Projector World::tangent_projector(const Tensor& x, const Tensor& /*latent_hint*/) const {
  return tangent_projector(x);
}

std::unique_ptr<World> make_world(const std::string& preset, double ambient_noise) {
  if (preset == "subspace-2of8") {
    std::vector<Tensor> means{Tensor::vec({2.0, 1.5}), Tensor::vec({-2.0, -1.5})};
    Tensor cov = Tensor::mat({{1.0, 0.0}, {0.0, 1.0}});
    return std::make_unique<LinearSubspaceWorld>(8, 2, /*basis_seed=*/11, std::move(means),
                                                 std::move(cov),
                                                 std::vector<double>{0.5, 0.5}, ambient_noise);
  }
  if (preset == "signal-distractor-4+4") {
    std::vector<std::uint8_t> mask{1, 1, 1, 1, 0, 0, 0, 0};
    std::vector<Tensor> smeans{Tensor::vec({1.5, 1.0, -1.0, 0.5}),
                               Tensor::vec({-1.5, -1.0, 1.0, -0.5})};
    return std::make_unique<SignalDistractorWorld>(std::move(mask), std::move(smeans), 1.0,
                                                   Tensor::vec({0.5, -0.25, 0.75, 0.0}), 1.0,
                                                   std::vector<double>{0.5, 0.5});
  }
  if (preset == "circle-in-3d") {
    const double radius = 2.0;
    // fixed general-position rotation so the circle is not axis aligned
    static const Tensor q = [] {
      Eigen::MatrixXd m = random_orthonormal(3, 3, 7);
      Tensor t(Shape{3, 3});
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
          t.at2(i, j) = m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      return t;
    }();
    auto embed = [radius](const Tensor& t) {
      const double a = t[0];
      const double p[3] = {radius * std::cos(a), radius * std::sin(a), 0.0};
      Tensor out(Shape{3});
      for (std::size_t i = 0; i < 3; ++i)
        out[i] = q.at2(i, 0) * p[0] + q.at2(i, 1) * p[1] + q.at2(i, 2) * p[2];
      return out;
    };
    auto jac = [radius](const Tensor& t) {
      const double a = t[0];
      const double dp[3] = {-radius * std::sin(a), radius * std::cos(a), 0.0};
      Tensor out(Shape{3, 1});
      for (std::size_t i = 0; i < 3; ++i)
        out.at2(i, 0) = q.at2(i, 0) * dp[0] + q.at2(i, 1) * dp[1] + q.at2(i, 2) * dp[2];
      return out;
    };
    std::vector<Tensor> means{Tensor::vec({0.0}), Tensor::vec({3.14159265358979323846})};
    return std::make_unique<CurvedWorld>(3, 1, embed, jac, std::move(means), 0.4,
                                         std::vector<double>{0.5, 0.5}, ambient_noise);
  }
  throw std::invalid_argument("unknown world preset '" + preset + "'");
}

}  // namespace mlab
