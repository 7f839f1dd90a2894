#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "diat/tensor.hpp"

namespace diat::data {

inline constexpr std::array<std::string_view, 4> kAttributes{"glasses", "mouth_open", "elderly", "male"};
// Attributes drawn as local glyphs; each has a mask.
inline constexpr std::array<std::string_view, 2> kLocalAttributes{"glasses", "mouth_open"};

/// Index into kAttributes; throws std::invalid_argument for unknown names.
int attribute_index(std::string_view name);
/// Index into kLocalAttributes, or -1 for global attributes.
int local_index(std::string_view name);

using Attributes = std::array<bool, kAttributes.size()>;

/// P(attribute = true) per attribute, in kAttributes order.
struct Marginals {
  std::array<double, kAttributes.size()> p{0.5, 0.5, 0.5, 0.5};

  /// "glasses=0.3,male=0.5"; unnamed attributes keep 0.5.
  static Marginals parse(std::string_view text);
  std::string str() const;
};

struct GeneratorConfig {
  std::uint64_t seed = 0;
  std::int64_t n = 2000;
  int size = 32;
  int n_identities = 64;
  Marginals marginals;

  /// Throws std::invalid_argument (S must be 16, 32, 64 or 128).
  void validate() const;
};

/// Geometry and colours fixed by the identity. Lengths are fractions of the
/// image side.
struct IdentityParams {
  std::array<double, 3> skin, background, hair, iris, frame;
  double face_rx, face_ry, hair_height;
  double eye_dx, eye_y, eye_r;
  double nose_len;
  double mouth_y, mouth_w;

  std::vector<double> flat() const;
};

IdentityParams identity_params(std::uint64_t seed, int identity);

/// Per-sample variation that is neither identity nor attribute.
struct Nuisance {
  double brightness = 1.0;
  double dx = 0.0, dy = 0.0;  // translation, fraction of side
};

struct SyntheticFaceSample {
  Tensor image;  // [3,S,S], multiples of 1/255
  Attributes attributes{};
  int identity = 0;
  std::array<Tensor, kLocalAttributes.size()> masks;  // [1,S,S] in {0,1}
  std::vector<double> provenance;

  bool has(std::string_view attribute) const { return attributes[attribute_index(attribute)]; }
};

/// Sample `index` of the dataset described by cfg. Depends only on
/// (cfg, index).
SyntheticFaceSample generate_sample(const GeneratorConfig& cfg, std::int64_t index);
/// Renders an explicit combination; generate_sample draws these and calls it.
SyntheticFaceSample render_face(const GeneratorConfig& cfg, int identity, const Attributes& attrs,
                                const Nuisance& nuisance, DType dt = DType::f32);

/// Dilation radius in pixels for attribute masks (2 at S=32).
int mask_margin(int size);

// --- image codec (binary PPM, maxval 255) ---

class CodecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Values are clamped to [0,1] and rounded to k/255. One-channel tensors are
/// written as grey PPM.
std::string encode_ppm(const Tensor& image);
/// Returns [3,H,W]. Accepts P6 and P5 (replicated to 3 channels).
Tensor decode_ppm(std::string_view bytes, DType dt = DType::f32);
void encode_image(const Tensor& image, const std::filesystem::path& path);
/// Throws CodecError if malformed or, when expected_size > 0, not S x S.
Tensor decode_image(const std::filesystem::path& path, int expected_size = 0, DType dt = DType::f32);
/// First channel of decode_image, thresholded to {0,1}, as [1,H,W].
Tensor decode_mask(const std::filesystem::path& path, int expected_size = 0, DType dt = DType::f32);

/// 8-bit quantization used by the generator and the codec.
float quantize_u8(double v);

// --- manifests and datasets ---

struct ManifestRow {
  std::int64_t index = 0;
  int identity = 0;
  Attributes attributes{};
  std::string image;                                    // relative path
  std::array<std::string, kLocalAttributes.size()> masks;  // relative paths
};

struct DatasetManifest {
  GeneratorConfig config;
  std::vector<ManifestRow> rows;

  std::string to_tsv() const;
  static DatasetManifest from_tsv(std::string_view text);
  /// Count of rows with the attribute set.
  std::int64_t count(std::string_view attribute) const;
};

struct Dataset {
  DatasetManifest manifest;
  Tensor images;                                      // [N,3,S,S]
  std::array<Tensor, kLocalAttributes.size()> masks;  // [N,1,S,S]

  std::int64_t size() const { return static_cast<std::int64_t>(manifest.rows.size()); }
  bool has(std::int64_t i, std::string_view attribute) const;
  /// Mask batch for a local attribute.
  const Tensor& mask(std::string_view attribute) const;
};

/// Writes images/%06d.ppm, masks/<attr>/%06d.ppm and manifest.tsv under root.
DatasetManifest generate_dataset(const GeneratorConfig& cfg, const std::filesystem::path& root);
/// Same samples without touching the filesystem.
Dataset generate_in_memory(const GeneratorConfig& cfg, DType dt = DType::f32);
/// Reads manifest.tsv and decodes every listed file; throws CodecError on a
/// missing or malformed file.
Dataset load_dataset(const std::filesystem::path& root, DType dt = DType::f32);

/// Rows [0, 0.8 n) train, the rest held out. Samples are i.i.d., so the
/// index split is a random split.
struct TrainHeldOut {
  std::vector<std::int64_t> train, held_out;
};
TrainHeldOut train_held_out(std::int64_t n);

/// "glasses" selects images with glasses as the guided set; "-glasses"
/// selects images without (i.e. glasses removal).
struct AttributeTarget {
  int index = 0;
  bool value = true;

  static AttributeTarget parse(std::string_view text);
  std::string_view name() const { return kAttributes[static_cast<std::size_t>(index)]; }
  std::string str() const;
};

struct GuidedSplit {
  std::vector<std::int64_t> guided;  // attribute == target value
  std::vector<std::int64_t> input;   // the rest, subsampled
  std::string warning;               // non-empty if either side is empty
};

/// Partitions `pool` (all rows if empty). The input side is subsampled to
/// input_limit entries (0 = no limit) with a seeded shuffle, kept in index
/// order.
GuidedSplit split_guided_and_input(const DatasetManifest& manifest, const AttributeTarget& target,
                                   std::int64_t input_limit, std::uint64_t seed,
                                   const std::vector<std::int64_t>& pool = {});

/// Rows of a [N,...] batch, in the given order.
Tensor gather(const Tensor& batch, const std::vector<std::int64_t>& rows);

}  // namespace diat::data
