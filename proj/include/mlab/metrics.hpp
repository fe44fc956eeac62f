#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mlab/mnist.hpp"
#include "mlab/tensor.hpp"
#include "mlab/worlds.hpp"

namespace mlab::metrics {

struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Batched evaluator: X (n,d) -> outputs (n,m). m == 1 gives the scalar
// convention used by the relative-robustness definition; m == C gives the
// full output-vector convention used by the empirical sensitivity curves.
using BatchFn = std::function<Tensor(const Tensor&)>;

// |f(x+u) - f(x)|_2 over the output vector.
double output_change(const BatchFn& f, const Tensor& x, const Tensor& u);
// (f(x+u) - f(x))^2 for a scalar-valued f.
double output_change_sq(const BatchFn& f, const Tensor& x, const Tensor& u);

enum class NoiseMode : std::uint8_t { RawProjection, NormMatched };

const char* noise_mode_name(NoiseMode m);

struct SensitivityEstimate {
  double mean_sq = 0.0;   // E (f(x+u) - f(x))^2, or E |f(x+u)-f(x)|^2 in vector mode
  double std_err = 0.0;
  std::size_t n = 0;
  NoiseMode mode = NoiseMode::RawProjection;
  double sigma_or_norm = 0.0;
};

struct RatioEstimate {
  SensitivityEstimate off;  // numerator: orthogonal-complement noise
  SensitivityEstimate iso;  // denominator: isotropic noise
  double ratio = 0.0;
  double std_err = 0.0;  // delta method with the sample covariance
};

struct Rho1Result {
  RatioEstimate raw;      // u_off = P_perp u, norms as projected
  RatioEstimate matched;  // both perturbations rescaled to a common L2 norm
  bool has_matched = false;
};

enum class Rho1Variants : std::uint8_t { RawOnly, Both };

// Monte Carlo estimate of the relative off-manifold robustness ratio
//   E (f(x + P_perp u) - f(x))^2 / E (f(x + u) - f(x))^2,  u ~ N(0, sigma^2 I).
// Common random numbers across numerator and denominator; compensated
// accumulation; deterministic in (seed, n) regardless of chunking.
// fixed_norm <= 0 selects sigma * sqrt(d) for the norm-matched variant.
Rho1Result rho1(const BatchFn& f, const Tensor& x, const Projector& P, double sigma,
                std::size_t n, std::uint64_t seed, Rho1Variants variants = Rho1Variants::Both,
                double fixed_norm = -1.0);

// |g - P g|^2 / |g|^2 for an input gradient g; 0 when the gradient lies in
// the tangent space.
double rho2(const Tensor& gradient, const Projector& P);

struct Prop1Row {
  double sigma = 0.0;
  double rho1 = 0.0;
  double rho1_se = 0.0;
  double rho2 = 0.0;
  double gap = 0.0;  // |rho1 - rho2|
};

// Sweep the robustness ratio over decreasing noise scales against the exact
// gradient quantity; the gap should shrink as sigma -> 0.
std::vector<Prop1Row> verify_prop1(const BatchFn& f, const Tensor& gradient, const Tensor& x,
                                   const Projector& P, std::span<const double> sigmas,
                                   std::size_t n, std::uint64_t seed);

// Mean squared output change under noise confined to the distractor half,
// divided by the same quantity for the signal half. Values below 1 mean the
// model is relatively more robust to distractor noise. Returns `cap` when the
// signal sensitivity underflows while the distractor one does not.
double relative_noise_robustness(const BatchFn& f, const mnist::DistractorSet& data,
                                 double sigma, std::size_t n_draws, std::uint64_t seed,
                                 std::size_t max_samples = 0, double cap = 1e12);

// Cosine of the angle between a model gradient and an oracle direction.
double cosine(const Tensor& a, const Tensor& b);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> xs, std::span<const double> ys);

// Deterministic compensated (Kahan) accumulator used by the MC loops.
struct KahanSum {
  double sum = 0.0;
  double comp = 0.0;
  void add(double v) {
    const double y = v - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
};

}  // namespace mlab::metrics
