#include "mlab/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <thread>

namespace mlab::train {

namespace ad = mlab::ad;

std::string objective_name(const Objective& o) {
  return std::visit(
      [](const auto& v) -> std::string {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, CrossEntropy>) return "ce";
        if constexpr (std::is_same_v<T, GradNorm>) return "gradnorm";
        if constexpr (std::is_same_v<T, Smoothness>) return "smoothness";
        if constexpr (std::is_same_v<T, RandSmooth>) return "randsmooth";
        if constexpr (std::is_same_v<T, Pgd>) return "pgd";
        if constexpr (std::is_same_v<T, RidgeMse>) return "ridge";
      },
      o);
}

double objective_param(const Objective& o) {
  return std::visit(
      [](const auto& v) -> double {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, CrossEntropy>) return 0.0;
        if constexpr (std::is_same_v<T, GradNorm>) return v.lambda;
        if constexpr (std::is_same_v<T, Smoothness>) return v.lambda;
        if constexpr (std::is_same_v<T, RandSmooth>) return v.sigma;
        if constexpr (std::is_same_v<T, Pgd>) return v.eps;
        if constexpr (std::is_same_v<T, RidgeMse>) return v.lambda;
      },
      o);
}

void Schedule::validate() const {
  if (epochs == 0) throw std::invalid_argument("schedule: epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("schedule: batch size must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("schedule: learning rate must be positive");
  for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
    if (decay_epochs[i] >= epochs)
      throw std::invalid_argument("schedule: decay epoch beyond training length");
    if (i > 0 && decay_epochs[i] <= decay_epochs[i - 1])
      throw std::invalid_argument("schedule: decay epochs must be strictly increasing");
  }
}

Schedule Schedule::mnist_preset() {
  Schedule s;
  s.epochs = 9;
  s.batch_size = 128;
  s.lr = 0.1;
  s.decay_epochs = {3, 6};
  s.decay_factor = 0.1;
  return s;
}

Schedule Schedule::cifar_preset() {
  Schedule s;
  s.epochs = 200;
  s.batch_size = 128;
  s.lr = 0.025;
  s.decay_epochs = {150, 175};
  s.decay_factor = 0.1;
  return s;
}

Schedule Schedule::desk_preset() {
  Schedule s;
  s.epochs = 60;
  s.batch_size = 128;
  s.lr = 0.05;
  s.decay_epochs = {40, 50};
  s.decay_factor = 0.1;
  return s;
}

namespace {

// mean cross-entropy graph over pre-softmax logits
ad::Var ce_graph(const ad::Var& logits, const std::vector<std::int32_t>& labels) {
  const ad::Var per_row = ad::sub(ad::rowlse(logits), ad::pick(logits, labels));
  return ad::mean(per_row);
}

ad::Var probs_graph(const ad::Var& logits, std::size_t num_classes) {
  return ad::exp(ad::sub(logits, ad::tile_cols(ad::rowlse(logits), num_classes)));
}

Tensor gauss_like(const Tensor& X, double sigma, Rng& rng) {
  Tensor noise(X.shape());
  rng.fill_normal(noise.data(), noise.numel(), sigma);
  return noise;
}

Tensor add_tensors(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
  return out;
}

struct BuiltLoss {
  ad::Var total;
  Model::ParamVars params;
};

BuiltLoss build_loss(const Objective& obj, const Model& model, const Batch& batch, Rng& rng) {
  BuiltLoss out;
  out.params = model.param_leaves();
  const std::size_t n = batch.X.rows();
  const std::size_t c = model.num_classes();

  if (const auto* gn = std::get_if<GradNorm>(&obj)) {
    const ad::Var X = ad::leaf(batch.X);
    const ad::Var Z = model.logits_graph(X, out.params);
    ad::Var total = ce_graph(Z, batch.labels);
    if (gn->lambda != 0.0) {
      // one scalar whose input gradient stacks the per-example selected-logit
      // gradients row by row
      const ad::Var s =
          gn->sum_over_classes ? ad::sum(Z) : ad::sum(ad::pick(Z, batch.labels));
      const ad::Var G = ad::grad(s, X);
      const ad::Var penalty = ad::scale(ad::sum(ad::mul(G, G)), 1.0 / static_cast<double>(n));
      total = ad::add(total, ad::scale(penalty, gn->lambda));
    }
    out.total = total;
    return out;
  }

  if (const auto* sm = std::get_if<Smoothness>(&obj)) {
    const ad::Var X = ad::constant(batch.X);
    const ad::Var Z = model.logits_graph(X, out.params);
    ad::Var total = ce_graph(Z, batch.labels);
    if (sm->lambda != 0.0) {
      const ad::Var P0 = probs_graph(Z, c);
      ad::Var pen_sum;
      for (int j = 0; j < sm->n_noise; ++j) {
        const ad::Var Xn = ad::constant(add_tensors(batch.X, gauss_like(batch.X, sm->sigma, rng)));
        const ad::Var Pn = probs_graph(model.logits_graph(Xn, out.params), c);
        const ad::Var diff = ad::sub(Pn, P0);
        const ad::Var term = ad::sum(ad::mul(diff, diff));
        pen_sum = pen_sum.valid() ? ad::add(pen_sum, term) : term;
      }
      const double denom = static_cast<double>(n) * static_cast<double>(sm->n_noise);
      total = ad::add(total, ad::scale(pen_sum, sm->lambda / denom));
    }
    out.total = total;
    return out;
  }

  if (const auto* rs = std::get_if<RandSmooth>(&obj)) {
    ad::Var loss_sum;
    for (int j = 0; j < rs->n_noise; ++j) {
      const ad::Var Xn = ad::constant(add_tensors(batch.X, gauss_like(batch.X, rs->sigma, rng)));
      const ad::Var term = ce_graph(model.logits_graph(Xn, out.params), batch.labels);
      loss_sum = loss_sum.valid() ? ad::add(loss_sum, term) : term;
    }
    out.total = ad::scale(loss_sum, 1.0 / static_cast<double>(rs->n_noise));
    return out;
  }

  if (const auto* pg = std::get_if<Pgd>(&obj)) {
    Rng* start_rng = pg->random_start ? &rng : nullptr;
    const Tensor x_adv =
        pgd_attack(model, batch.X, batch.labels, pg->eps, pg->steps, pg->step_size, start_rng);
    const ad::Var X = ad::constant(x_adv);
    out.total = ce_graph(model.logits_graph(X, out.params), batch.labels);
    return out;
  }

  if (const auto* rm = std::get_if<RidgeMse>(&obj)) {
    if (c != 1) throw std::invalid_argument("ridge objective needs a single-logit model");
    const ad::Var X = ad::constant(batch.X);
    const ad::Var Z = model.logits_graph(X, out.params);
    Tensor targets(Shape{n, 1});
    for (std::size_t i = 0; i < n; ++i) targets[i] = batch.labels[i] > 0 ? 1.0 : -1.0;
    const ad::Var diff = ad::sub(Z, ad::constant(targets));
    ad::Var total = ad::scale(ad::sum(ad::mul(diff, diff)), 1.0 / static_cast<double>(n));
    if (rm->lambda != 0.0) {
      ad::Var wsum;
      for (std::size_t l = 0; l < model.num_layers(); ++l) {
        const ad::Var& W = out.params.vars[2 * l];
        const ad::Var term = ad::sum(ad::mul(W, W));
        wsum = wsum.valid() ? ad::add(wsum, term) : term;
      }
      total = ad::add(total, ad::scale(wsum, rm->lambda));
    }
    out.total = total;
    return out;
  }

  // plain cross-entropy
  const ad::Var X = ad::constant(batch.X);
  out.total = ce_graph(model.logits_graph(X, out.params), batch.labels);
  return out;
}

}  // namespace

LossGrads loss_and_grads(const Objective& obj, const Model& model, const Batch& batch, Rng& rng) {
  if (batch.X.rank() != 2 || batch.X.rows() == 0)
    throw std::invalid_argument("loss_and_grads: batch must be a non-empty (n,d) matrix");
  if (batch.labels.size() != batch.X.rows())
    throw std::invalid_argument("loss_and_grads: one label per row required");
  BuiltLoss built = build_loss(obj, model, batch, rng);
  LossGrads out;
  out.loss = built.total.scalar_value();
  const auto gvars = ad::gradients(built.total, built.params.vars, /*allow_unused=*/true);
  out.grads.reserve(gvars.size());
  for (const ad::Var& g : gvars) out.grads.push_back(g.value());
  return out;
}

double cross_entropy_value(const Model& model, const Tensor& X,
                           const std::vector<std::int32_t>& labels) {
  const Tensor Z = model.logits_batch(X);
  const std::size_t n = Z.rows(), c = Z.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = Z.data() + i * c;
    double m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
    total += m + std::log(s) - row[static_cast<std::size_t>(labels[i])];
  }
  return total / static_cast<double>(n);
}

Tensor pgd_attack(const Model& model, const Tensor& X, const std::vector<std::int32_t>& labels,
                  double eps, int steps, double step_size, Rng* random_start_rng) {
  if (eps < 0.0) throw std::invalid_argument("pgd_attack: eps must be non-negative");
  if (steps < 1) throw std::invalid_argument("pgd_attack: steps must be at least 1");
  Tensor x = X;
  if (eps == 0.0) return x;
  const std::size_t n = X.rows(), d = X.cols();

  if (random_start_rng != nullptr) {
    std::vector<double> dir(d);
    for (std::size_t i = 0; i < n; ++i) {
      random_start_rng->fill_normal(dir.data(), d);
      double norm = 0.0;
      for (double v : dir) norm += v * v;
      norm = std::sqrt(norm);
      if (norm == 0.0) continue;
      const double radius =
          eps * std::pow(random_start_rng->uniform(), 1.0 / static_cast<double>(d));
      for (std::size_t j = 0; j < d; ++j) x.at2(i, j) += radius * dir[j] / norm;
    }
  }

  for (int step = 0; step < steps; ++step) {
    const ad::Var Xv = ad::leaf(x);
    const Model::ParamVars params = model.param_leaves();
    const ad::Var Z = model.logits_graph(Xv, params);
    const ad::Var loss = ad::sum(ad::sub(ad::rowlse(Z), ad::pick(Z, labels)));
    const Tensor G = ad::grad(loss, Xv).value();
    for (std::size_t i = 0; i < n; ++i) {
      const double* grow = G.data() + i * d;
      double norm = 0.0;
      for (std::size_t j = 0; j < d; ++j) norm += grow[j] * grow[j];
      norm = std::sqrt(norm);
      if (norm == 0.0) continue;
      double* xrow = x.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) xrow[j] += step_size * grow[j] / norm;
    }
    // project every row back onto the eps-ball around the clean input
    for (std::size_t i = 0; i < n; ++i) {
      double* xrow = x.data() + i * d;
      const double* crow = X.data() + i * d;
      double norm = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double delta = xrow[j] - crow[j];
        norm += delta * delta;
      }
      norm = std::sqrt(norm);
      if (norm > eps) {
        const double shrink = eps / norm;
        for (std::size_t j = 0; j < d; ++j) xrow[j] = crow[j] + (xrow[j] - crow[j]) * shrink;
      }
    }
  }
  return x;
}

Model train(Model model, const LabeledDataset& train_set, const Objective& obj,
            const Schedule& sched, const LabeledDataset* test_set, History* history,
            const EpochCallback& callback) {
  sched.validate();
  const std::size_t n = train_set.size();
  if (n == 0) throw std::invalid_argument("train: empty dataset");
  const std::size_t batch_size = std::min<std::size_t>(sched.batch_size, n);
  const std::size_t d = train_set.dim();

  double lr = sched.lr;
  // large regularization constants scale the step down proportionally
  if (const auto* gn = std::get_if<GradNorm>(&obj); gn && gn->lambda > 1.0) lr /= gn->lambda;
  if (const auto* sm = std::get_if<Smoothness>(&obj); sm && sm->lambda > 1.0) lr /= sm->lambda;

  auto params = model.parameters();
  std::vector<Tensor> velocity;
  velocity.reserve(params.size());
  for (const Tensor* p : params) velocity.push_back(Tensor(p->shape()));

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < sched.epochs; ++epoch) {
    for (std::size_t de : sched.decay_epochs) {
      if (de == epoch) lr *= sched.decay_factor;
    }
    Rng shuffle_rng(Rng::derive(sched.seed, 0xE000 + epoch));
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = shuffle_rng.uniform_int(i);
      std::swap(order[i - 1], order[j]);
    }
    Rng obj_rng(Rng::derive(sched.seed, 0xA000 + epoch));

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::size_t count = std::min(batch_size, n - start);
      Batch batch;
      batch.X = Tensor(Shape{count, d});
      batch.labels.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t src = order[start + i];
        std::copy_n(train_set.X.data() + src * d, d, batch.X.data() + i * d);
        batch.labels[i] = train_set.labels[src];
      }
      LossGrads lg;
      try {
        lg = loss_and_grads(obj, model, batch, obj_rng);
      } catch (const NumericError& e) {
        throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) +
                               ", batch " + std::to_string(batches) + ": " + e.what());
      }
      loss_sum += lg.loss;
      ++batches;
      for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& v = velocity[p];
        Tensor& w = *params[p];
        const Tensor& g = lg.grads[p];
        for (std::size_t i = 0; i < w.numel(); ++i) {
          v[i] = sched.momentum * v[i] - lr * g[i];
          w[i] += v[i];
        }
      }
    }

    if (history != nullptr) {
      EpochStats st;
      st.epoch = epoch;
      st.train_loss = loss_sum / static_cast<double>(batches);
      st.test_acc = test_set != nullptr
                        ? model.accuracy(test_set->X, test_set->labels)
                        : std::numeric_limits<double>::quiet_NaN();
      history->epochs.push_back(st);
    }
    if (callback) callback(model, epoch);
  }
  return model;
}

std::vector<RunResult> sweep(const ModelSpec& spec, const LabeledDataset& train_set,
                             const LabeledDataset* test_set, const std::vector<RunSpec>& runs,
                             std::size_t jobs) {
  if (runs.empty()) throw std::invalid_argument("sweep: empty run list");
  std::vector<RunResult> results(runs.size());

  auto run_one = [&](std::size_t idx) {
    const RunSpec& rs = runs[idx];
    RunResult& out = results[idx];
    out.spec = rs;
    try {
      Model init = Model::init(std::span<const std::size_t>(spec.layer_sizes), spec.nonlin,
                               Rng::derive(rs.seed, 0x110DE1));
      Schedule sched = rs.schedule;
      sched.seed = rs.seed;
      out.model = train(std::move(init), train_set, rs.objective, sched, test_set, &out.history);
    } catch (const std::exception& e) {
      out.error = e.what();  // keep the sweep going; the caller sees per-run status
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, runs.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < runs.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (;;) {
          const std::size_t idx = next.fetch_add(1);
          if (idx >= runs.size()) return;
          run_one(idx);
        }
      });
    }
    for (std::thread& t : pool) t.join();
  }
  return results;
}

}  // namespace mlab::train
