#include "mlab/tangent.hpp"

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>

#include "mlab/autodiff.hpp"
#include "mlab/rng.hpp"

namespace mlab {

namespace {

Eigen::MatrixXd dataset_matrix(const LabeledDataset& data) {
  Eigen::MatrixXd m(data.size(), data.dim());
  for (std::size_t i = 0; i < data.size(); ++i)
    for (std::size_t j = 0; j < data.dim(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = data.X.at2(i, j);
  return m;
}

Tensor matrix_to_tensor(const Eigen::MatrixXd& m) {
  Tensor t(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      t.at2(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = m(i, j);
  return t;
}

Eigen::MatrixXd tensor_to_matrix(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t.at2(i, j);
  return m;
}

}  // namespace

LinearAutoencoder LinearAutoencoder::fit(const LabeledDataset& data, std::size_t k) {
  const std::size_t n = data.size(), d = data.dim();
  if (k == 0 || k > d)
    throw std::invalid_argument("autoencoder: latent dimension must be in [1, d]");
  if (n <= k) throw std::invalid_argument("autoencoder: need more samples than latent dims");

  Eigen::MatrixXd X = dataset_matrix(data);
  const Eigen::RowVectorXd mean = X.colwise().mean();
  X.rowwise() -= mean;
  const Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("autoencoder: eigensolver failed");

  // eigenvalues ascend; take the top-k columns
  const Eigen::Index dd = static_cast<Eigen::Index>(d);
  Eigen::MatrixXd top(dd, static_cast<Eigen::Index>(k));
  for (std::size_t j = 0; j < k; ++j)
    top.col(static_cast<Eigen::Index>(j)) = eig.eigenvectors().col(dd - 1 - static_cast<Eigen::Index>(j));
  const double smallest_kept = eig.eigenvalues()(dd - static_cast<Eigen::Index>(k));
  const double largest = eig.eigenvalues()(dd - 1);
  if (smallest_kept <= largest * 1e-12) {
    std::cerr << "[tangent] warning: covariance rank below requested latent dimension " << k
              << "; fitting anyway\n";
  }

  LinearAutoencoder ae;
  ae.decoder_ = matrix_to_tensor(top);
  ae.mean_ = Tensor(Shape{d});
  for (std::size_t j = 0; j < d; ++j) ae.mean_[j] = mean(static_cast<Eigen::Index>(j));
  return ae;
}

Tensor LinearAutoencoder::encode(const Tensor& x) const {
  const std::size_t d = ambient_dim(), k = latent_dim();
  if (x.numel() != d) throw ShapeError("encode: dimension mismatch");
  Tensor z(Shape{k});
  for (std::size_t j = 0; j < k; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += decoder_.at2(i, j) * (x[i] - mean_[i]);
    z[j] = s;
  }
  return z;
}

Tensor LinearAutoencoder::reconstruct(const Tensor& x) const {
  const Tensor z = encode(x);
  const std::size_t d = ambient_dim(), k = latent_dim();
  Tensor out(Shape{d});
  for (std::size_t i = 0; i < d; ++i) {
    double s = mean_[i];
    for (std::size_t j = 0; j < k; ++j) s += decoder_.at2(i, j) * z[j];
    out[i] = s;
  }
  return out;
}

double LinearAutoencoder::reconstruction_mse(const LabeledDataset& data) const {
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor x = data.row(i);
    const Tensor r = reconstruct(x);
    for (std::size_t j = 0; j < x.numel(); ++j) total += (x[j] - r[j]) * (x[j] - r[j]);
  }
  return total / static_cast<double>(data.size());
}

Projector LinearAutoencoder::estimated_projector() const {
  return Projector::from_basis(decoder_);
}

double projector_error(const Projector& est, const Projector& truth) {
  return frobenius_distance(est, truth);
}

double max_principal_angle(const Tensor& basis_a, const Tensor& basis_b) {
  const Eigen::MatrixXd a = tensor_to_matrix(basis_a);
  const Eigen::MatrixXd b = tensor_to_matrix(basis_b);
  // orthonormalize defensively, then read angles off the singular values
  const Eigen::MatrixXd qa = Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ() *
                             Eigen::MatrixXd::Identity(a.rows(), a.cols());
  const Eigen::MatrixXd qb = Eigen::HouseholderQR<Eigen::MatrixXd>(b).householderQ() *
                             Eigen::MatrixXd::Identity(b.rows(), b.cols());
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(qa.transpose() * qb);
  const double smin = svd.singularValues().minCoeff();
  return std::acos(std::min(1.0, std::max(-1.0, smin)));
}

// --- MRL1 section ---------------------------------------------------------------

namespace {

void write_u32le(std::ostream& os, std::uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

void write_f64le(std::ostream& os, double d) {
  const std::uint64_t v = std::bit_cast<std::uint64_t>(d);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

std::uint32_t read_u32le(std::istream& is) {
  char b[4];
  if (!is.read(b, 4)) throw std::runtime_error("MRL1: truncated stream");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(b[i]);
  return v;
}

double read_f64le(std::istream& is) {
  char b[8];
  if (!is.read(b, 8)) throw std::runtime_error("MRL1: truncated stream");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(b[i]);
  return std::bit_cast<double>(v);
}

constexpr char kMagic[4] = {'M', 'R', 'L', '1'};
constexpr std::uint32_t kSectionAutoencoder = 2;

}  // namespace

void LinearAutoencoder::save(std::ostream& os) const {
  os.write(kMagic, 4);
  write_u32le(os, 1);
  write_u32le(os, kSectionAutoencoder);
  write_u32le(os, static_cast<std::uint32_t>(ambient_dim()));
  write_u32le(os, static_cast<std::uint32_t>(latent_dim()));
  for (std::size_t i = 0; i < mean_.numel(); ++i) write_f64le(os, mean_[i]);
  for (std::size_t i = 0; i < decoder_.numel(); ++i) write_f64le(os, decoder_[i]);
  if (!os) throw std::runtime_error("MRL1: write failed");
}

LinearAutoencoder LinearAutoencoder::load(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("MRL1: bad magic");
  if (read_u32le(is) != 1) throw std::runtime_error("MRL1: unsupported version");
  if (read_u32le(is) != kSectionAutoencoder)
    throw std::runtime_error("MRL1: not an autoencoder section");
  const std::uint32_t d = read_u32le(is);
  const std::uint32_t k = read_u32le(is);
  LinearAutoencoder ae;
  ae.mean_ = Tensor(Shape{d});
  ae.decoder_ = Tensor(Shape{d, k});
  for (std::size_t i = 0; i < ae.mean_.numel(); ++i) ae.mean_[i] = read_f64le(is);
  for (std::size_t i = 0; i < ae.decoder_.numel(); ++i) ae.decoder_[i] = read_f64le(is);
  return ae;
}

void LinearAutoencoder::save_file(const std::filesystem::path& p) const {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + p.string());
  save(os);
}

LinearAutoencoder LinearAutoencoder::load_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + p.string());
  return load(is);
}

// --- MlpAutoencoder -------------------------------------------------------------

MlpAutoencoder MlpAutoencoder::fit(const LabeledDataset& data, std::size_t k,
                                   const Options& opt) {
  const std::size_t d = data.dim();
  Model enc = Model::init({d, opt.hidden, k}, Nonlin::Tanh, Rng::derive(opt.seed, 1));
  Model dec = Model::init({k, opt.hidden, d}, Nonlin::Tanh, Rng::derive(opt.seed, 2));

  auto enc_params = enc.parameters();
  auto dec_params = dec.parameters();
  std::vector<Tensor> velocity;
  for (Tensor* p : enc_params) velocity.push_back(Tensor(p->shape()));
  for (Tensor* p : dec_params) velocity.push_back(Tensor(p->shape()));

  const std::size_t n = data.size();
  const std::size_t batch = std::min<std::size_t>(128, n);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    Rng rng(Rng::derive(opt.seed, 0xAE00 + epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t count = std::min(batch, n - start);
      Tensor X(Shape{count, d});
      for (std::size_t i = 0; i < count; ++i)
        std::copy_n(data.X.data() + order[start + i] * d, d, X.data() + i * d);

      Model::ParamVars pe = enc.param_leaves();
      Model::ParamVars pd = dec.param_leaves();
      const ad::Var Xv = ad::constant(X);
      const ad::Var Z = enc.logits_graph(Xv, pe);
      const ad::Var R = dec.logits_graph(Z, pd);
      const ad::Var diff = ad::sub(R, Xv);
      const ad::Var loss = ad::scale(ad::sum(ad::mul(diff, diff)), 1.0 / static_cast<double>(count));

      std::vector<ad::Var> all = pe.vars;
      all.insert(all.end(), pd.vars.begin(), pd.vars.end());
      const auto grads = ad::gradients(loss, all, true);
      std::size_t vi = 0;
      auto update = [&](std::vector<Tensor*>& params, std::size_t offset) {
        for (std::size_t p = 0; p < params.size(); ++p, ++vi) {
          const Tensor& g = grads[offset + p].value();
          Tensor& v = velocity[vi];
          Tensor& w = *params[p];
          for (std::size_t idx = 0; idx < w.numel(); ++idx) {
            v[idx] = 0.9 * v[idx] - opt.lr * g[idx];
            w[idx] += v[idx];
          }
        }
      };
      update(enc_params, 0);
      update(dec_params, enc_params.size());
    }
  }
  return MlpAutoencoder(std::move(enc), std::move(dec));
}

Tensor MlpAutoencoder::encode(const Tensor& x) const { return encoder_.logits(x); }

Tensor MlpAutoencoder::reconstruct(const Tensor& x) const {
  return decoder_.logits(encode(x));
}

double MlpAutoencoder::reconstruction_mse(const LabeledDataset& data) const {
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor x = data.row(i);
    const Tensor r = reconstruct(x);
    for (std::size_t j = 0; j < x.numel(); ++j) total += (x[j] - r[j]) * (x[j] - r[j]);
  }
  return total / static_cast<double>(data.size());
}

Projector MlpAutoencoder::estimated_projector(const Tensor& x) const {
  // tangent basis = decoder Jacobian columns at the encoded latent
  const Tensor z = encode(x);
  const std::size_t k = z.numel();
  const std::size_t d = decoder_.num_classes();
  Tensor J(Shape{d, k});
  for (std::size_t out = 0; out < d; ++out) {
    const Tensor g = decoder_.input_gradient(z, ClassSelector::at(static_cast<std::int32_t>(out)));
    for (std::size_t j = 0; j < k; ++j) J.at2(out, j) = g[j];
  }
  return Projector::from_basis(J);
}

}  // namespace mlab
