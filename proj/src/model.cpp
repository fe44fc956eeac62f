#include "mlab/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "mlab/rng.hpp"

namespace mlab {

const char* nonlin_name(Nonlin n) {
  switch (n) {
    case Nonlin::Softplus: return "softplus";
    case Nonlin::Tanh: return "tanh";
    case Nonlin::Relu: return "relu";
  }
  return "?";
}

Nonlin nonlin_from_name(const std::string& name) {
  if (name == "softplus") return Nonlin::Softplus;
  if (name == "tanh") return Nonlin::Tanh;
  if (name == "relu") return Nonlin::Relu;
  throw std::invalid_argument("unknown nonlinearity '" + name + "'");
}

Model Model::init(std::span<const std::size_t> layer_sizes, Nonlin nl, std::uint64_t seed) {
  if (layer_sizes.size() < 2) throw std::invalid_argument("model needs at least one layer");
  for (std::size_t s : layer_sizes) {
    if (s == 0) throw std::invalid_argument("layer sizes must be positive");
  }
  Model m;
  m.input_dim_ = layer_sizes.front();
  m.num_classes_ = layer_sizes.back();
  m.nonlin_ = nl;
  Rng rng(seed);
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    const std::size_t fan_in = layer_sizes[l];
    const std::size_t fan_out = layer_sizes[l + 1];
    Layer layer{Tensor(Shape{fan_out, fan_in}), Tensor(Shape{fan_out})};
    const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
    rng.fill_normal(layer.W.data(), layer.W.numel(), scale);
    m.layers_.push_back(std::move(layer));
  }
  return m;
}

Model Model::init(std::initializer_list<std::size_t> layer_sizes, Nonlin nl, std::uint64_t seed) {
  std::vector<std::size_t> sizes(layer_sizes);
  return init(std::span<const std::size_t>(sizes), nl, seed);
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Layer& l : layers_) n += l.W.numel() + l.b.numel();
  return n;
}

std::vector<std::size_t> Model::layer_sizes() const {
  std::vector<std::size_t> sizes{input_dim_};
  for (const Layer& l : layers_) sizes.push_back(l.W.rows());
  return sizes;
}

namespace {

void apply_nonlin(Nonlin nl, Tensor& t) {
  double* p = t.data();
  const std::size_t n = t.numel();
  switch (nl) {
    case Nonlin::Softplus:
      for (std::size_t i = 0; i < n; ++i)
        p[i] = p[i] > 30.0 ? p[i] + std::log1p(std::exp(-p[i])) : std::log1p(std::exp(p[i]));
      break;
    case Nonlin::Tanh:
      for (std::size_t i = 0; i < n; ++i) p[i] = std::tanh(p[i]);
      break;
    case Nonlin::Relu:
      for (std::size_t i = 0; i < n; ++i) p[i] = p[i] > 0.0 ? p[i] : 0.0;
      break;
  }
}

// H (n,in) x W(out,in)^T + b -> (n,out)
Tensor affine_batch(const Tensor& H, const Tensor& W, const Tensor& b) {
  const std::size_t n = H.rows(), in = H.cols(), out = W.rows();
  Tensor Z(Shape{n, out});
  for (std::size_t i = 0; i < n; ++i) {
    const double* hrow = H.data() + i * in;
    double* zrow = Z.data() + i * out;
    for (std::size_t j = 0; j < out; ++j) {
      const double* wrow = W.data() + j * in;
      double s = b[j];
      for (std::size_t p = 0; p < in; ++p) s += hrow[p] * wrow[p];
      zrow[j] = s;
    }
  }
  return Z;
}

}  // namespace

Tensor Model::logits_batch(const Tensor& X) const {
  if (X.rank() != 2 || X.cols() != input_dim_)
    throw ShapeError("logits_batch: want (n," + std::to_string(input_dim_) + "), got " +
                     shape_str(X.shape()));
  Tensor H = X;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    H = affine_batch(H, layers_[l].W, layers_[l].b);
    if (l + 1 < layers_.size()) apply_nonlin(nonlin_, H);
  }
  return H;
}

Tensor Model::logits(const Tensor& x) const {
  if (x.rank() != 1 || x.numel() != input_dim_)
    throw ShapeError("logits: want (" + std::to_string(input_dim_) + "), got " +
                     shape_str(x.shape()));
  Tensor X = Tensor::from(std::vector<double>(x.data(), x.data() + x.numel()),
                          Shape{1, input_dim_});
  Tensor Z = logits_batch(X);
  return Tensor::from(std::vector<double>(Z.data(), Z.data() + Z.numel()), Shape{num_classes_});
}

Tensor softmax_vec(const Tensor& logits) {
  Tensor p = logits;
  double m = p[0];
  for (std::size_t i = 1; i < p.numel(); ++i) m = std::max(m, p[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    p[i] = std::exp(p[i] - m);
    s += p[i];
  }
  for (std::size_t i = 0; i < p.numel(); ++i) p[i] /= s;
  return p;
}

std::int32_t argmax(const Tensor& v) {
  std::int32_t best = 0;
  for (std::size_t i = 1; i < v.numel(); ++i) {
    if (v[i] > v[best]) best = static_cast<std::int32_t>(i);
  }
  return best;
}

Tensor Model::probs(const Tensor& x) const { return softmax_vec(logits(x)); }

Tensor Model::probs_batch(const Tensor& X) const {
  Tensor Z = logits_batch(X);
  const std::size_t n = Z.rows(), c = Z.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = Z.data() + i * c;
    double m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - m);
      s += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) row[j] /= s;
  }
  return Z;
}

std::int32_t Model::predict(const Tensor& x) const { return argmax(logits(x)); }

double Model::accuracy(const Tensor& X, std::span<const std::int32_t> labels) const {
  const Tensor Z = logits_batch(X);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < Z.rows(); ++i) {
    const double* row = Z.data() + i * Z.cols();
    std::size_t best = 0;
    for (std::size_t j = 1; j < Z.cols(); ++j) {
      if (row[j] > row[best]) best = j;
    }
    if (static_cast<std::int32_t>(best) == labels[i]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(Z.rows());
}

Model::ParamVars Model::param_leaves() const {
  ParamVars p;
  for (const Layer& l : layers_) {
    p.vars.push_back(ad::leaf(l.W));
    p.vars.push_back(ad::leaf(l.b));
  }
  return p;
}

ad::Var Model::logits_graph(const ad::Var& X, const ParamVars& params) const {
  if (X.shape().size() != 2 || X.value().cols() != input_dim_)
    throw ShapeError("logits_graph: want (n," + std::to_string(input_dim_) + ")");
  ad::Var H = X;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const ad::Var& W = params.vars[2 * l];
    const ad::Var& b = params.vars[2 * l + 1];
    H = ad::add_rowvec(ad::matmul(H, W, false, true), b);
    if (l + 1 < layers_.size()) {
      switch (nonlin_) {
        case Nonlin::Softplus: H = ad::softplus(H); break;
        case Nonlin::Tanh: H = ad::tanh(H); break;
        case Nonlin::Relu: H = ad::relu(H); break;
      }
    }
  }
  return H;
}

Tensor Model::input_gradient(const Tensor& x, ClassSelector sel, bool pre_softmax) const {
  if (x.rank() != 1 || x.numel() != input_dim_)
    throw ShapeError("input_gradient: want (" + std::to_string(input_dim_) + ")");
  std::int32_t cls = 0;
  if (sel.kind == ClassSelector::Kind::Index) {
    if (sel.index < 0 || static_cast<std::size_t>(sel.index) >= num_classes_)
      throw std::invalid_argument("input_gradient: class index out of range");
    cls = sel.index;
  } else if (sel.kind == ClassSelector::Kind::Predicted) {
    cls = predict(x);
  }

  ad::Var X = ad::leaf(Tensor::from(std::vector<double>(x.data(), x.data() + x.numel()),
                                    Shape{1, input_dim_}));
  ParamVars params = param_leaves();
  ad::Var Z = logits_graph(X, params);
  ad::Var target;
  if (pre_softmax) {
    target = sel.kind == ClassSelector::Kind::SumAll ? ad::sum(Z)
                                                     : ad::sum(ad::pick(Z, {cls}));
  } else {
    const ad::Var P = ad::exp(ad::sub(Z, ad::tile_cols(ad::rowlse(Z), num_classes_)));
    target = sel.kind == ClassSelector::Kind::SumAll ? ad::sum(P)
                                                     : ad::sum(ad::pick(P, {cls}));
  }
  const Tensor g = ad::grad(target, X).value();
  return Tensor::from(std::vector<double>(g.data(), g.data() + g.numel()), Shape{input_dim_});
}

std::vector<Tensor*> Model::parameters() {
  std::vector<Tensor*> out;
  for (Layer& l : layers_) {
    out.push_back(&l.W);
    out.push_back(&l.b);
  }
  return out;
}

std::vector<const Tensor*> Model::parameters() const {
  std::vector<const Tensor*> out;
  for (const Layer& l : layers_) {
    out.push_back(&l.W);
    out.push_back(&l.b);
  }
  return out;
}

// --- MRL1 container ----------------------------------------------------------

namespace {

void write_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

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

std::uint8_t read_u8(std::istream& is) {
  const int c = is.get();
  if (c == EOF) throw std::runtime_error("MRL1: truncated stream");
  return static_cast<std::uint8_t>(c);
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
constexpr std::uint32_t kSectionModel = 1;

}  // namespace

void Model::save(std::ostream& os) const {
  os.write(kMagic, 4);
  write_u32le(os, 1);  // container version
  write_u32le(os, kSectionModel);
  write_u8(os, static_cast<std::uint8_t>(nonlin_));
  const auto sizes = layer_sizes();
  write_u32le(os, static_cast<std::uint32_t>(sizes.size()));
  for (std::size_t s : sizes) write_u32le(os, static_cast<std::uint32_t>(s));
  for (const Layer& l : layers_) {
    for (std::size_t i = 0; i < l.W.numel(); ++i) write_f64le(os, l.W[i]);
    for (std::size_t i = 0; i < l.b.numel(); ++i) write_f64le(os, l.b[i]);
  }
  if (!os) throw std::runtime_error("MRL1: write failed");
}

Model Model::load(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("MRL1: bad magic");
  const std::uint32_t version = read_u32le(is);
  if (version != 1) throw std::runtime_error("MRL1: unsupported version");
  const std::uint32_t section = read_u32le(is);
  if (section != kSectionModel) throw std::runtime_error("MRL1: not a model section");
  const Nonlin nl = static_cast<Nonlin>(read_u8(is));
  const std::uint32_t n_sizes = read_u32le(is);
  if (n_sizes < 2 || n_sizes > 64) throw std::runtime_error("MRL1: implausible layer count");
  std::vector<std::size_t> sizes(n_sizes);
  for (auto& s : sizes) s = read_u32le(is);
  Model m = Model::init(std::span<const std::size_t>(sizes), nl, 0);
  for (Layer& l : m.layers_) {
    for (std::size_t i = 0; i < l.W.numel(); ++i) l.W[i] = read_f64le(is);
    for (std::size_t i = 0; i < l.b.numel(); ++i) l.b[i] = read_f64le(is);
  }
  return m;
}

void Model::save_file(const std::filesystem::path& p) const {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + p.string());
  save(os);
}

Model Model::load_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + p.string());
  return load(is);
}

bool Model::bitwise_equal(const Model& o) const {
  if (layer_sizes() != o.layer_sizes() || nonlin_ != o.nonlin_) return false;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto eq = [](const Tensor& a, const Tensor& b) {
      return std::memcmp(a.data(), b.data(), a.numel() * sizeof(double)) == 0;
    };
    if (!eq(layers_[l].W, o.layers_[l].W) || !eq(layers_[l].b, o.layers_[l].b)) return false;
  }
  return true;
}

}  // namespace mlab
