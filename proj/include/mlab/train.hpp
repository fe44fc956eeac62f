#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mlab/model.hpp"
#include "mlab/rng.hpp"
#include "mlab/tensor.hpp"
#include "mlab/worlds.hpp"

namespace mlab::train {

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// --- objectives ---------------------------------------------------------------

struct CrossEntropy {};

// l(f(x),y) + lambda * |grad_x f_sel(x)|^2, double backprop through the penalty.
struct GradNorm {
  double lambda = 0.0;
  bool sum_over_classes = false;  // penalize the summed logits instead of the true class
};

// l(f(x),y) + lambda * E_eps |f(x+eps) - f(x)|^2 over softmax outputs.
struct Smoothness {
  double lambda = 0.0;
  double sigma = 0.1;
  int n_noise = 1;
};

// E_eps l(f(x+eps), y)
struct RandSmooth {
  double sigma = 0.1;
  int n_noise = 1;
};

// Adversarial training in the l2 ball of radius eps.
struct Pgd {
  double eps = 1.0;
  int steps = 10;
  double step_size = 0.25;
  bool random_start = false;
};

// Squared loss against +-1 targets plus lambda * |W|^2 (biases unpenalized);
// the linear-model weight-decay harness. Single-logit models only.
struct RidgeMse {
  double lambda = 0.0;
};

using Objective =
    std::variant<CrossEntropy, GradNorm, Smoothness, RandSmooth, Pgd, RidgeMse>;

std::string objective_name(const Objective& o);
double objective_param(const Objective& o);

// --- schedule -------------------------------------------------------------------

struct Schedule {
  std::size_t epochs = 60;
  std::size_t batch_size = 128;
  double lr = 0.05;
  std::vector<std::size_t> decay_epochs;  // strictly increasing, < epochs
  double decay_factor = 0.1;
  double momentum = 0.9;
  std::uint64_t seed = 1;

  void validate() const;

  // 9 epochs, lr 0.1 decayed x0.1 after epochs 3 and 6.
  static Schedule mnist_preset();
  // 200 epochs, lr 0.025 decayed x0.1 after epochs 150 and 175.
  static Schedule cifar_preset();
  // small-world default used by the sweeps in this lab
  static Schedule desk_preset();
};

// --- single-step API --------------------------------------------------------------

struct Batch {
  Tensor X;                          // (n, d)
  std::vector<std::int32_t> labels;  // (n)
};

struct LossGrads {
  double loss = 0.0;
  std::vector<Tensor> grads;  // aligned with Model::parameters()
};

LossGrads loss_and_grads(const Objective& obj, const Model& model, const Batch& batch, Rng& rng);

// l2 PGD ascent on the cross-entropy loss; each step moves step_size along the
// row-normalized input gradient, then projects back onto the eps-ball.
Tensor pgd_attack(const Model& model, const Tensor& X, const std::vector<std::int32_t>& labels,
                  double eps, int steps, double step_size, Rng* random_start_rng = nullptr);

// mean cross-entropy of the model on a batch (value only)
double cross_entropy_value(const Model& model, const Tensor& X,
                           const std::vector<std::int32_t>& labels);

// --- training loop -----------------------------------------------------------------

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double test_acc = 0.0;  // NaN when no test set was given
};

struct History {
  std::vector<EpochStats> epochs;
};

using EpochCallback = std::function<void(const Model&, std::size_t epoch)>;

// SGD with momentum. Deterministic in Schedule::seed. For GradNorm/Smoothness
// with lambda > 1 the learning rate is divided by lambda, mirroring how large
// regularization constants are handled in the reference protocol.
Model train(Model model, const LabeledDataset& train_set, const Objective& obj,
            const Schedule& sched, const LabeledDataset* test_set = nullptr,
            History* history = nullptr, const EpochCallback& callback = nullptr);

// --- sweeps -------------------------------------------------------------------------

struct ModelSpec {
  std::vector<std::size_t> layer_sizes;
  Nonlin nonlin = Nonlin::Softplus;
};

struct RunSpec {
  Objective objective;
  std::uint64_t seed = 1;  // drives model init, batching and objective noise
  Schedule schedule;
};

struct RunResult {
  RunSpec spec;
  std::optional<Model> model;  // empty on failure
  History history;
  std::string error;  // non-empty on failure
};

// Trains one model per RunSpec; runs are independent and may execute on a
// worker pool. Results are always ordered like `runs`, regardless of jobs.
std::vector<RunResult> sweep(const ModelSpec& spec, const LabeledDataset& train_set,
                             const LabeledDataset* test_set, const std::vector<RunSpec>& runs,
                             std::size_t jobs = 1);

}  // namespace mlab::train
