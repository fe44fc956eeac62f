#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "mlab/autodiff.hpp"
#include "mlab/tensor.hpp"

namespace mlab {

enum class Nonlin : std::uint8_t { Softplus = 0, Tanh = 1, Relu = 2 };

const char* nonlin_name(Nonlin n);
Nonlin nonlin_from_name(const std::string& name);

// Which pre-softmax logit an input gradient is taken of.
struct ClassSelector {
  enum class Kind : std::uint8_t { Index, Predicted, SumAll };
  Kind kind = Kind::Predicted;
  std::int32_t index = 0;

  static ClassSelector at(std::int32_t i) { return {Kind::Index, i}; }
  static ClassSelector predicted() { return {Kind::Predicted, 0}; }
  static ClassSelector sum_all() { return {Kind::SumAll, 0}; }
};

// Feed-forward classifier: affine layers with a shared hidden nonlinearity,
// linear final layer producing C logits.
class Model {
 public:
  struct Layer {
    Tensor W;  // (out, in)
    Tensor b;  // (out)
  };

  static Model init(std::span<const std::size_t> layer_sizes, Nonlin nl, std::uint64_t seed);
  static Model init(std::initializer_list<std::size_t> layer_sizes, Nonlin nl, std::uint64_t seed);

  std::size_t input_dim() const { return input_dim_; }
  std::size_t num_classes() const { return num_classes_; }
  std::size_t num_layers() const { return layers_.size(); }
  Nonlin nonlinearity() const { return nonlin_; }
  std::size_t parameter_count() const;
  std::vector<std::size_t> layer_sizes() const;

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

  // Fast value-only evaluation (no graph construction).
  Tensor logits(const Tensor& x) const;        // (d) -> (C)
  Tensor logits_batch(const Tensor& X) const;  // (n,d) -> (n,C)
  Tensor probs(const Tensor& x) const;         // softmax of logits
  Tensor probs_batch(const Tensor& X) const;
  std::int32_t predict(const Tensor& x) const;
  double accuracy(const Tensor& X, std::span<const std::int32_t> labels) const;

  // Gradient of the selected pre-softmax logit (or of the softmax probability
  // when pre_softmax is false) with respect to the input.
  Tensor input_gradient(const Tensor& x, ClassSelector sel, bool pre_softmax = true) const;

  // Graph construction for training. Parameter leaves are snapshots of the
  // current tensors; gradients computed against them apply to this model.
  struct ParamVars {
    std::vector<ad::Var> vars;  // W0, b0, W1, b1, ...
  };
  ParamVars param_leaves() const;
  ad::Var logits_graph(const ad::Var& X, const ParamVars& params) const;  // (n,d) -> (n,C)

  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;

  // Versioned little-endian binary container; round-trips bit-exactly.
  void save(std::ostream& os) const;
  static Model load(std::istream& is);
  void save_file(const std::filesystem::path& p) const;
  static Model load_file(const std::filesystem::path& p);

  bool bitwise_equal(const Model& o) const;

 private:
  Model() = default;
  std::vector<Layer> layers_;
  std::size_t input_dim_ = 0;
  std::size_t num_classes_ = 0;
  Nonlin nonlin_ = Nonlin::Softplus;
};

// Softmax over the last axis of a logits vector/matrix row.
Tensor softmax_vec(const Tensor& logits);

std::int32_t argmax(const Tensor& v);

}  // namespace mlab
