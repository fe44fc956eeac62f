#include "mlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mlab/rng.hpp"

namespace mlab::metrics {

namespace {

constexpr std::size_t kChunk = 8192;  // fixed so results never depend on scheduling

Tensor as_row(const Tensor& x) {
  return Tensor::from(std::vector<double>(x.data(), x.data() + x.numel()),
                      Shape{1, x.numel()});
}

std::vector<double> eval_reference(const BatchFn& f, const Tensor& x) {
  const Tensor out = f(as_row(x));
  return std::vector<double>(out.data(), out.data() + out.numel());
}

double row_sq_change(const Tensor& F, std::size_t row, const std::vector<double>& f0) {
  const std::size_t m = f0.size();
  const double* r = F.data() + row * m;
  double s = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    const double diff = r[j] - f0[j];
    s += diff * diff;
  }
  return s;
}

struct PairAccumulator {
  KahanSum a, b, aa, bb, ab;
  std::size_t n = 0;
  void add(double av, double bv) {
    a.add(av);
    b.add(bv);
    aa.add(av * av);
    bb.add(bv * bv);
    ab.add(av * bv);
    ++n;
  }
  double mean_a() const { return a.sum / static_cast<double>(n); }
  double mean_b() const { return b.sum / static_cast<double>(n); }
  double var_a() const { return std::max(0.0, aa.sum / n - mean_a() * mean_a()); }
  double var_b() const { return std::max(0.0, bb.sum / n - mean_b() * mean_b()); }
  double cov_ab() const { return ab.sum / n - mean_a() * mean_b(); }
};

RatioEstimate finish_ratio(const PairAccumulator& acc, NoiseMode mode, double sigma_or_norm) {
  RatioEstimate out;
  const double nd = static_cast<double>(acc.n);
  out.off = {acc.mean_a(), std::sqrt(acc.var_a() / nd), acc.n, mode, sigma_or_norm};
  out.iso = {acc.mean_b(), std::sqrt(acc.var_b() / nd), acc.n, mode, sigma_or_norm};
  if (out.iso.mean_sq <= 10.0 * out.iso.std_err) {
    throw MetricError("ill-conditioned ratio: denominator " + std::to_string(out.iso.mean_sq) +
                      " is within 10 standard errors (" + std::to_string(out.iso.std_err) +
                      ") of zero");
  }
  const double r = out.off.mean_sq / out.iso.mean_sq;
  out.ratio = r;
  const double var_r =
      (acc.var_a() - 2.0 * r * acc.cov_ab() + r * r * acc.var_b()) /
      (nd * out.iso.mean_sq * out.iso.mean_sq);
  out.std_err = std::sqrt(std::max(0.0, var_r));
  return out;
}

void scale_rows_to_norm(Tensor& U, double target) {
  const std::size_t n = U.rows(), d = U.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = U.data() + i * d;
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) norm += row[j] * row[j];
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;  // a zero projection stays zero
    const double s = target / norm;
    for (std::size_t j = 0; j < d; ++j) row[j] *= s;
  }
}

}  // namespace

const char* noise_mode_name(NoiseMode m) {
  return m == NoiseMode::RawProjection ? "raw-projection" : "norm-matched";
}

double output_change(const BatchFn& f, const Tensor& x, const Tensor& u) {
  if (!x.same_shape(u)) throw ShapeError("output_change: x and u must have the same shape");
  const auto f0 = eval_reference(f, x);
  Tensor xu = x;
  for (std::size_t i = 0; i < xu.numel(); ++i) xu[i] += u[i];
  const Tensor fu = f(as_row(xu));
  double s = 0.0;
  for (std::size_t j = 0; j < f0.size(); ++j) {
    const double diff = fu[j] - f0[j];
    s += diff * diff;
  }
  return std::sqrt(s);
}

double output_change_sq(const BatchFn& f, const Tensor& x, const Tensor& u) {
  const double c = output_change(f, x, u);
  return c * c;
}

Rho1Result rho1(const BatchFn& f, const Tensor& x, const Projector& P, double sigma,
                std::size_t n, std::uint64_t seed, Rho1Variants variants, double fixed_norm) {
  if (!(sigma > 0.0)) throw std::invalid_argument("rho1: sigma must be positive");
  if (n < 100) throw std::invalid_argument("rho1: need at least 100 samples");
  const std::size_t d = x.numel();
  if (P.dim() != d) throw ShapeError("rho1: projector dimension mismatch");
  const auto f0 = eval_reference(f, x);
  const double target_norm =
      fixed_norm > 0.0 ? fixed_norm : sigma * std::sqrt(static_cast<double>(d));

  PairAccumulator raw_acc, matched_acc;
  const std::size_t num_chunks = (n + kChunk - 1) / kChunk;
  for (std::size_t c = 0; c < num_chunks; ++c) {
    const std::size_t count = std::min(kChunk, n - c * kChunk);
    Rng rng(Rng::derive(seed, 0xC0000 + c));
    Tensor U(Shape{count, d});
    rng.fill_normal(U.data(), U.numel(), sigma);
    Tensor U_off = P.apply_complement_rows(U);

    auto eval_sq = [&](const Tensor& noise, std::size_t row_count) {
      Tensor pts(Shape{row_count, d});
      for (std::size_t i = 0; i < row_count; ++i) {
        const double* nrow = noise.data() + i * d;
        double* prow = pts.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) prow[j] = x[j] + nrow[j];
      }
      return f(pts);
    };

    const Tensor F_iso = eval_sq(U, count);
    const Tensor F_off = eval_sq(U_off, count);
    for (std::size_t i = 0; i < count; ++i)
      raw_acc.add(row_sq_change(F_off, i, f0), row_sq_change(F_iso, i, f0));

    if (variants == Rho1Variants::Both) {
      Tensor Um = U;
      Tensor Um_off = U_off;
      scale_rows_to_norm(Um, target_norm);
      scale_rows_to_norm(Um_off, target_norm);
      const Tensor Fm_iso = eval_sq(Um, count);
      const Tensor Fm_off = eval_sq(Um_off, count);
      for (std::size_t i = 0; i < count; ++i)
        matched_acc.add(row_sq_change(Fm_off, i, f0), row_sq_change(Fm_iso, i, f0));
    }
  }

  Rho1Result out;
  out.raw = finish_ratio(raw_acc, NoiseMode::RawProjection, sigma);
  if (variants == Rho1Variants::Both) {
    out.matched = finish_ratio(matched_acc, NoiseMode::NormMatched, target_norm);
    out.has_matched = true;
  }
  return out;
}

double rho2(const Tensor& gradient, const Projector& P) {
  if (gradient.numel() != P.dim()) throw ShapeError("rho2: dimension mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < gradient.numel(); ++i) total += gradient[i] * gradient[i];
  if (total == 0.0) throw MetricError("rho2: undefined alignment for a zero gradient");
  const Tensor off = P.apply_complement(gradient);
  double off_sq = 0.0;
  for (std::size_t i = 0; i < off.numel(); ++i) off_sq += off[i] * off[i];
  return off_sq / total;
}

std::vector<Prop1Row> verify_prop1(const BatchFn& f, const Tensor& gradient, const Tensor& x,
                                   const Projector& P, std::span<const double> sigmas,
                                   std::size_t n, std::uint64_t seed) {
  const double r2 = rho2(gradient, P);
  std::vector<Prop1Row> rows;
  rows.reserve(sigmas.size());
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    const Rho1Result r =
        rho1(f, x, P, sigmas[i], n, Rng::derive(seed, i), Rho1Variants::RawOnly);
    Prop1Row row;
    row.sigma = sigmas[i];
    row.rho1 = r.raw.ratio;
    row.rho1_se = r.raw.std_err;
    row.rho2 = r2;
    row.gap = std::fabs(row.rho1 - r2);
    rows.push_back(row);
  }
  return rows;
}

double relative_noise_robustness(const BatchFn& f, const mnist::DistractorSet& data,
                                 double sigma, std::size_t n_draws, std::uint64_t seed,
                                 std::size_t max_samples, double cap) {
  if (data.size() == 0) throw std::invalid_argument("relative_noise_robustness: empty dataset");
  if (n_draws == 0) throw std::invalid_argument("relative_noise_robustness: need draws");
  const std::size_t n_eval =
      max_samples > 0 ? std::min(max_samples, data.size()) : data.size();
  const std::size_t d = mnist::kComposedPixels;

  KahanSum distractor_sum, signal_sum;
  for (std::size_t s = 0; s < n_eval; ++s) {
    const Tensor x = data.image(s);
    const auto f0 = eval_reference(f, x);
    for (int region = 0; region < 2; ++region) {
      const mnist::Region reg = region == 0 ? mnist::Region::Signal : mnist::Region::Distractor;
      Tensor pts(Shape{n_draws, d});
      for (std::size_t k = 0; k < n_draws; ++k) {
        const Tensor xp = mnist::perturb_region(
            x, data.placements[s], reg, sigma, Rng::derive(seed, (s * 2 + region) * 1315423911ULL + k));
        std::copy_n(xp.data(), d, pts.data() + k * d);
      }
      const Tensor F = f(pts);
      KahanSum& acc = reg == mnist::Region::Signal ? signal_sum : distractor_sum;
      for (std::size_t k = 0; k < n_draws; ++k) acc.add(row_sq_change(F, k, f0));
    }
  }

  const double denom = static_cast<double>(n_eval) * static_cast<double>(n_draws);
  const double mean_signal = signal_sum.sum / denom;
  const double mean_distractor = distractor_sum.sum / denom;
  if (mean_signal == 0.0) {
    if (mean_distractor == 0.0)
      throw MetricError("degenerate model: no sensitivity to either region");
    return cap;  // signal-blind model
  }
  return std::min(mean_distractor / mean_signal, cap);
}

double cosine(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("cosine: shape mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw MetricError("cosine: undefined for a zero vector");
  return dot / std::sqrt(na * nb);
}

namespace {
std::vector<double> average_ranks(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
    i = j + 1;
  }
  return ranks;
}
}  // namespace

double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2)
    throw std::invalid_argument("spearman: need two equally sized series");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0)
    throw std::invalid_argument("spearman: a series is constant");
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace mlab::metrics
