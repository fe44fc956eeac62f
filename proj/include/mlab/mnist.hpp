#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "mlab/tensor.hpp"

namespace mlab::mnist {

inline constexpr std::uint32_t kMagicImages = 0x00000803;
inline constexpr std::uint32_t kMagicLabels = 0x00000801;
inline constexpr std::size_t kRows = 28;
inline constexpr std::size_t kCols = 28;
inline constexpr std::size_t kDigitPixels = kRows * kCols;       // 784
inline constexpr std::size_t kComposedPixels = 2 * kDigitPixels; // 56x28

struct IdxError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raw IDX container: big-endian magic and dims, u8 payload.
struct IdxTensor {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;

  bool is_images() const { return magic == kMagicImages; }
  bool is_labels() const { return magic == kMagicLabels; }
  std::size_t count() const { return dims.empty() ? 0 : dims[0]; }
};

IdxTensor read_idx(std::istream& is);
IdxTensor read_idx(const std::filesystem::path& path);
void write_idx(std::ostream& os, const IdxTensor& t);
void write_idx(const std::filesystem::path& path, const IdxTensor& t);

// 28x28 digit images scaled to [0,1] (u8 / 255), flattened row-major.
struct DigitSet {
  Tensor images;  // (n, 784)
  std::vector<std::int32_t> labels;
  std::size_t size() const { return labels.size(); }
};

DigitSet to_digits(const IdxTensor& images, const IdxTensor& labels);
IdxTensor digits_to_idx_images(const DigitSet& ds);
IdxTensor digits_to_idx_labels(const DigitSet& ds);

// The fixed 28x28 letter-A distractor glyph, values in [0,1].
Tensor glyph_a();

enum class Placement : std::uint8_t { Top, Bottom };  // where the distractor sits

struct DistractorSet {
  Tensor images;  // (n, 1568) = 56x28 row-major
  std::vector<std::int32_t> labels;
  std::vector<Placement> placements;
  std::size_t size() const { return labels.size(); }
  Tensor image(std::size_t i) const;
};

// Stack the digit and the glyph into a 56x28 image; the distractor half is
// chosen uniformly per sample by the seeded RNG. Labels pass through.
DistractorSet compose_distractor(const DigitSet& digits, const Tensor& glyph,
                                 std::uint64_t seed);

enum class Region : std::uint8_t { Signal, Distractor };

// Binary mask (1568) selecting the digit half (Signal) or glyph half.
std::vector<std::uint8_t> region_mask(Placement placement, Region region);

// Gaussian noise applied only inside the selected half; the other half is
// byte-identical to the input. No clipping unless requested.
Tensor perturb_region(const Tensor& image, Placement placement, Region region, double sigma,
                      std::uint64_t seed, bool clip = false);

// Deterministic stand-in corpus: seven-segment style digits with random
// affine jitter, quantized to u8 like the real data. Used when no IDX files
// are supplied.
DigitSet synth_digits(std::size_t n, std::uint64_t seed);

}  // namespace mlab::mnist
