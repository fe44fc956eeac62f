#include "mlab/mnist.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "mlab/rng.hpp"

namespace mlab::mnist {

namespace {

std::uint32_t read_u32be(std::istream& is) {
  char b[4];
  if (!is.read(b, 4)) throw IdxError("truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<std::uint8_t>(b[i]);
  return v;
}

void write_u32be(std::ostream& os, std::uint32_t v) {
  char b[4] = {static_cast<char>((v >> 24) & 0xff), static_cast<char>((v >> 16) & 0xff),
               static_cast<char>((v >> 8) & 0xff), static_cast<char>(v & 0xff)};
  os.write(b, 4);
}

}  // namespace

IdxTensor read_idx(std::istream& is) {
  IdxTensor t;
  t.magic = read_u32be(is);
  if (t.magic != kMagicImages && t.magic != kMagicLabels)
    throw IdxError("bad magic 0x" + [&] {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%08x", t.magic);
      return std::string(buf);
    }());
  const std::size_t ndims = t.magic & 0xff;  // low byte of the magic
  std::size_t total = 1;
  for (std::size_t i = 0; i < ndims; ++i) {
    t.dims.push_back(read_u32be(is));
    if (t.dims.back() > (1u << 27)) throw IdxError("implausible dimension");
    total *= t.dims.back();
    if (total > (1u << 30)) throw IdxError("implausible payload size");
  }
  t.payload.resize(total);
  is.read(reinterpret_cast<char*>(t.payload.data()), static_cast<std::streamsize>(total));
  if (static_cast<std::size_t>(is.gcount()) != total) throw IdxError("truncated payload");
  return t;
}

IdxTensor read_idx(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IdxError("cannot open " + path.string());
  return read_idx(is);
}

void write_idx(std::ostream& os, const IdxTensor& t) {
  write_u32be(os, t.magic);
  for (std::uint32_t d : t.dims) write_u32be(os, d);
  os.write(reinterpret_cast<const char*>(t.payload.data()),
           static_cast<std::streamsize>(t.payload.size()));
  if (!os) throw IdxError("write failed");
}

void write_idx(const std::filesystem::path& path, const IdxTensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IdxError("cannot open " + path.string());
  write_idx(os, t);
}

DigitSet to_digits(const IdxTensor& images, const IdxTensor& labels) {
  if (!images.is_images()) throw IdxError("first argument is not an image tensor");
  if (!labels.is_labels()) throw IdxError("second argument is not a label tensor");
  if (images.dims.size() != 3 || images.dims[1] != kRows || images.dims[2] != kCols)
    throw IdxError("image tensor is not n x 28 x 28");
  if (images.dims[0] != labels.dims.at(0)) throw IdxError("image/label count mismatch");
  const std::size_t n = images.dims[0];
  DigitSet ds;
  ds.images = Tensor(Shape{n, kDigitPixels});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < kDigitPixels; ++p)
      ds.images.at2(i, p) = static_cast<double>(images.payload[i * kDigitPixels + p]) / 255.0;
    ds.labels[i] = static_cast<std::int32_t>(labels.payload[i]);
  }
  return ds;
}

IdxTensor digits_to_idx_images(const DigitSet& ds) {
  IdxTensor t;
  t.magic = kMagicImages;
  const std::size_t n = ds.size();
  t.dims = {static_cast<std::uint32_t>(n), kRows, kCols};
  t.payload.resize(n * kDigitPixels);
  for (std::size_t i = 0; i < n * kDigitPixels; ++i) {
    const double v = ds.images[i] * 255.0;
    t.payload[i] = static_cast<std::uint8_t>(std::lround(std::min(std::max(v, 0.0), 255.0)));
  }
  return t;
}

IdxTensor digits_to_idx_labels(const DigitSet& ds) {
  IdxTensor t;
  t.magic = kMagicLabels;
  t.dims = {static_cast<std::uint32_t>(ds.size())};
  t.payload.resize(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i)
    t.payload[i] = static_cast<std::uint8_t>(ds.labels[i]);
  return t;
}

Tensor glyph_a() {
  static const std::array<const char*, 28> rows = {
      "............................",
      "............................",
      ".............##.............",
      ".............##.............",
      "............####............",
      "............####............",
      "...........##..##...........",
      "...........##..##...........",
      "..........##....##..........",
      "..........##....##..........",
      ".........##......##.........",
      ".........##......##.........",
      "........##........##........",
      "........##........##........",
      ".......##..........##.......",
      ".......##..........##.......",
      ".......##############.......",
      "......################......",
      ".....###............###.....",
      ".....##..............##.....",
      "....###..............###....",
      "....##................##....",
      "...###................###...",
      "...##..................##...",
      "..###..................###..",
      "..##....................##..",
      "............................",
      "............................",
  };
  Tensor g(Shape{kDigitPixels});
  for (std::size_t r = 0; r < kRows; ++r) {
    if (std::strlen(rows[r]) != kCols) throw std::logic_error("glyph row has wrong length");
    for (std::size_t c = 0; c < kCols; ++c) g[r * kCols + c] = rows[r][c] == '#' ? 1.0 : 0.0;
  }
  return g;
}

Tensor DistractorSet::image(std::size_t i) const {
  return Tensor::from(std::vector<double>(images.data() + i * kComposedPixels,
                                          images.data() + (i + 1) * kComposedPixels),
                      Shape{kComposedPixels});
}

DistractorSet compose_distractor(const DigitSet& digits, const Tensor& glyph,
                                 std::uint64_t seed) {
  if (glyph.numel() != kDigitPixels) throw ShapeError("glyph must be 28x28");
  const std::size_t n = digits.size();
  DistractorSet out;
  out.images = Tensor(Shape{n, kComposedPixels});
  out.labels = digits.labels;
  out.placements.resize(n);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const Placement pl = rng.uniform() < 0.5 ? Placement::Top : Placement::Bottom;
    out.placements[i] = pl;
    double* img = out.images.data() + i * kComposedPixels;
    const double* digit = digits.images.data() + i * kDigitPixels;
    double* glyph_half = pl == Placement::Top ? img : img + kDigitPixels;
    double* digit_half = pl == Placement::Top ? img + kDigitPixels : img;
    std::memcpy(digit_half, digit, kDigitPixels * sizeof(double));
    std::memcpy(glyph_half, glyph.data(), kDigitPixels * sizeof(double));
  }
  return out;
}

std::vector<std::uint8_t> region_mask(Placement placement, Region region) {
  std::vector<std::uint8_t> mask(kComposedPixels, 0);
  const bool digit_on_top = placement == Placement::Bottom;
  const bool want_digit_half = region == Region::Signal;
  const bool top_half = digit_on_top == want_digit_half;
  const std::size_t begin = top_half ? 0 : kDigitPixels;
  for (std::size_t i = begin; i < begin + kDigitPixels; ++i) mask[i] = 1;
  return mask;
}

Tensor perturb_region(const Tensor& image, Placement placement, Region region, double sigma,
                      std::uint64_t seed, bool clip) {
  if (image.numel() != kComposedPixels) throw ShapeError("image must be 56x28");
  if (sigma < 0.0) throw std::invalid_argument("sigma must be non-negative");
  Tensor out = image;
  if (sigma == 0.0) return out;
  const auto mask = region_mask(placement, region);
  Rng rng(seed);
  for (std::size_t i = 0; i < kComposedPixels; ++i) {
    if (!mask[i]) continue;
    out[i] += sigma * rng.normal();
    if (clip) out[i] = std::min(std::max(out[i], 0.0), 1.0);
  }
  return out;
}

// --- synthetic digit corpus ---------------------------------------------------

namespace {

struct Seg {
  double x0, y0, x1, y1;
};

// seven-segment layout on the unit square, y pointing down
constexpr Seg kSegments[7] = {
    {0.2, 0.1, 0.8, 0.1},  // A top
    {0.8, 0.1, 0.8, 0.5},  // B top right
    {0.8, 0.5, 0.8, 0.9},  // C bottom right
    {0.2, 0.9, 0.8, 0.9},  // D bottom
    {0.2, 0.5, 0.2, 0.9},  // E bottom left
    {0.2, 0.1, 0.2, 0.5},  // F top left
    {0.2, 0.5, 0.8, 0.5},  // G middle
};

constexpr std::uint8_t kDigitSegs[10] = {
    0b0111111,  // 0: ABCDEF
    0b0000110,  // 1: BC
    0b1011011,  // 2: ABDEG
    0b1001111,  // 3: ABCDG
    0b1100110,  // 4: BCFG
    0b1101101,  // 5: ACDFG
    0b1111101,  // 6: ACDEFG
    0b0000111,  // 7: ABC
    0b1111111,  // 8
    0b1101111,  // 9: ABCDFG
};

double point_segment_dist(double px, double py, const Seg& s) {
  const double vx = s.x1 - s.x0, vy = s.y1 - s.y0;
  const double wx = px - s.x0, wy = py - s.y0;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0.0 ? (wx * vx + wy * vy) / len2 : 0.0;
  t = std::min(std::max(t, 0.0), 1.0);
  const double dx = px - (s.x0 + t * vx), dy = py - (s.y0 + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

DigitSet synth_digits(std::size_t n, std::uint64_t seed) {
  DigitSet ds;
  ds.images = Tensor(Shape{n, kDigitPixels});
  ds.labels.resize(n);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const int digit = static_cast<int>(rng.uniform_int(10));
    ds.labels[i] = digit;
    const double theta = (rng.uniform() - 0.5) * 0.24;
    const double sx = 0.85 + 0.25 * rng.uniform();
    const double sy = 0.85 + 0.25 * rng.uniform();
    const double tx = (rng.uniform() - 0.5) * 3.0;
    const double ty = (rng.uniform() - 0.5) * 3.0;
    const double width = 1.2 + 0.8 * rng.uniform();
    const double intensity = 0.75 + 0.25 * rng.uniform();
    const double ct = std::cos(theta), st = std::sin(theta);

    // map unit-square segments into pixel space with jitter
    Seg segs[7];
    int nsegs = 0;
    for (int s = 0; s < 7; ++s) {
      if (!(kDigitSegs[digit] >> s & 1)) continue;
      auto map = [&](double ux, double uy, double& px, double& py) {
        const double cxu = (ux - 0.5) * sx, cyu = (uy - 0.5) * sy;
        px = 13.5 + 20.0 * (ct * cxu - st * cyu) + tx;
        py = 13.5 + 22.0 * (st * cxu + ct * cyu) + ty;
      };
      Seg m{};
      map(kSegments[s].x0, kSegments[s].y0, m.x0, m.y0);
      map(kSegments[s].x1, kSegments[s].y1, m.x1, m.y1);
      segs[nsegs++] = m;
    }

    double* img = ds.images.data() + i * kDigitPixels;
    for (std::size_t r = 0; r < kRows; ++r) {
      for (std::size_t c = 0; c < kCols; ++c) {
        const double px = static_cast<double>(c), py = static_cast<double>(r);
        double v = 0.0;
        for (int s = 0; s < nsegs; ++s) {
          const double d = point_segment_dist(px, py, segs[s]);
          v = std::max(v, std::min(std::max((width - d) / 0.8, 0.0), 1.0));
        }
        // quantize like the real container stores bytes
        img[r * kCols + c] =
            static_cast<double>(static_cast<std::uint8_t>(std::lround(intensity * v * 255.0))) /
            255.0;
      }
    }
  }
  return ds;
}

}  // namespace mlab::mnist
