#pragma once

// Dataset ingestion, preprocessing and checkpoint persistence.
//
// Formats (all multi-byte integers little-endian):
//
//   PPM   binary P6 with maxval 255; '#' comments allowed in the header.
//
//   Manifest CSV
//         header line, separator ';' if the header contains one, else ','.
//         Columns are matched case-insensitively:
//           path   path | filename | file
//           label  label | classid | class
//           roi    x1 y1 x2 y2 | roi.x1 roi.y1 roi.x2 roi.y2   (optional, all four)
//         Other columns are ignored. The ROI is half-open: columns x1..x2-1.
//
//   Checkpoint
//         "NLVT"  u32 version  u32 len  config text
//         u32 count, then per entry:
//           u32 len  name   u32 rank   u64 dims[rank]   f32 values[prod(dims)]
//         u32 CRC-32 (zlib polynomial) of every preceding byte.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nlvt/augmix.hpp"
#include "nlvt/blocks.hpp"

namespace nlvt {

// ---- PPM ------------------------------------------------------------------

// Returns a [3, H, W] image scaled to [0, 1]. Throws FormatError with the byte
// offset of the first problem.
Image decode_ppm(std::span<const std::uint8_t> bytes);
Image load_ppm(const std::string& path);
// Values are clamped to [0, 1] and rounded to 8 bits.
std::vector<std::uint8_t> encode_ppm(const Image& img);
void write_ppm(const std::string& path, const Image& img);

// ---- Manifests -------------------------------------------------------------

struct Roi {
  std::size_t x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

struct Sample {
  std::string path;
  std::size_t label = 0;
  std::optional<Roi> roi;
};

enum class Split { train, test };

struct Manifest {
  std::vector<Sample> samples;
  std::size_t num_classes = 43;
  Split split = Split::train;

  std::size_t size() const { return samples.size(); }
};

struct ManifestOptions {
  std::size_t num_classes = 43;
  Split split = Split::train;
  bool verify_paths = true;  // every image must exist when the manifest is read
};

// Relative paths are resolved against `base_dir`. Throws ParseError with a line
// number for malformed rows and IoError for an image that does not exist.
Manifest parse_manifest(const std::string& text, const std::string& base_dir,
                        const ManifestOptions& opts = {});
Manifest load_manifest(const std::string& path, const ManifestOptions& opts = {});
void write_manifest(const std::string& path, const Manifest& manifest);

// ---- Preprocessing ---------------------------------------------------------

// Crops to the ROI (if any) and resizes to side x side with half-pixel-centre
// bilinear sampling, clamped at the borders. Throws ContractError for an empty
// or out-of-bounds ROI.
Image crop_resize(const Image& img, const std::optional<Roi>& roi, std::size_t side);
// (x - mean[c]) / std[c] per channel.
Image normalize(const Image& img, const std::array<double, 3>& mean,
                const std::array<double, 3>& std);
Image preprocess(const Image& img, const std::optional<Roi>& roi, std::size_t side,
                 const std::array<double, 3>& mean, const std::array<double, 3>& std);

// Decoded, cropped and resized images kept in [0, 1]; normalization happens at
// batch assembly so that augmentation sees raw pixels.
struct Dataset {
  std::vector<Image> images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return images.size(); }
};

Dataset load_dataset(const Manifest& manifest, std::size_t side);

// ---- Synthetic traffic signs -----------------------------------------------

// Class c draws shape c % 4 (circle, triangle, diamond, square), rim colour
// (c / 4) % 3 (red, blue, yellow) and glyph (c / 12) % 4 on a noisy background
// with random scale, offset and brightness. Supports up to 48 classes.
Image synth_sign(std::size_t label, std::size_t side, Rng& rng);
// Sample i has label i % classes and its own generator seeded from (seed, i).
Dataset synth_dataset(std::size_t count, std::size_t classes, std::size_t side,
                      std::uint64_t seed);
// Writes one PPM per sample plus `manifest.csv` into `dir`; returns the manifest path.
std::string write_synth_dataset(const std::string& dir, std::size_t count, std::size_t classes,
                                std::size_t side, std::uint64_t seed);

// ---- Checkpoints -----------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_text;
  std::vector<CheckpointEntry> entries;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
// Throws CorruptionError for bad magic, truncation, checksum or version mismatch
// and duplicate names.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model);

// Copies every entry into the model. All checks run before the first write, so a
// failure leaves the model untouched. Throws ShapeError naming the first model
// tensor whose shape differs, CorruptionError for missing or unknown names.
template <typename T>
void apply_checkpoint(Model<T>& model, const Checkpoint& ckpt);

// Writes to a sibling temporary file, then renames over `path`.
template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path);
template <typename T>
void load_checkpoint(Model<T>& model, const std::string& path);
// Builds the model from the stored configuration, then loads the tensors.
template <typename T>
Model<T> load_model(const std::string& path);

Checkpoint read_checkpoint_file(const std::string& path);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_atomic(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace nlvt
