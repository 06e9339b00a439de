#pragma once

// Dataset ingestion (CIFAR binary files, synthetic generators), PNG encode /
// decode for previews, and run-directory plumbing.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mixmask/image.hpp"
#include "mixmask/maskgen.hpp"

namespace mixmask {

enum class CifarVariant { cifar10, fine, coarse };

CifarVariant parse_cifar_variant(const std::string& name);

// One record of the CIFAR binary distribution format. cifar10 files store
// label + 3072 pixel bytes (channel-planar RGB, row-major); CIFAR-100 files
// prepend a coarse label byte.
struct CifarRecord {
  std::uint8_t coarse_label = 0;
  std::uint8_t label = 0;
  std::array<std::uint8_t, 3072> pixels{};
};

Normalization cifar10_normalization();
Normalization cifar100_normalization();

// Reads one .bin file. The file length must be an exact multiple of the
// record size (3073 for cifar10, 3074 for CIFAR-100) and labels must be in
// range for the variant; anything else throws std::runtime_error. Pixels are
// mapped to [0,1] and normalized with `norm`.
ImageBatch read_cifar(const std::filesystem::path& path, CifarVariant variant,
                      const Normalization& norm);

void write_cifar(const std::filesystem::path& path,
                 const std::vector<CifarRecord>& records, CifarVariant variant);

// Quantizes a batch back to CIFAR records (denormalize, clamp, round).
std::vector<CifarRecord> batch_to_records(const ImageBatch& batch);

enum class SyntheticKind { gaussian_clusters, striped_classes };

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::gaussian_clusters;
  int classes = 10;
  int per_class = 100;
  int image_size = 32;
  std::uint64_t seed = 7;
  float noise = 0.1f;
};

// Deterministic labelled toy data. gaussian_clusters: each class has a fixed
// smooth template (a sum of low-frequency waves keyed by the class id alone,
// so datasets with different seeds share the same classes and can serve as
// train/held-out splits); the seed draws a per-image smooth deformation and
// i.i.d. pixel noise, both with amplitude `noise`. With noise 0 every image
// equals its class template. striped_classes: class c is a vertical stripe
// pattern of period c+2 pixels, so the along-row spectrum peaks at frequency
// width/(c+2).
ImageBatch gen_synthetic(const SyntheticSpec& spec, const Normalization& norm);

// 8-bit PNG output: RGB for images (denormalized with the batch's own
// constants and clamped), grayscale for masks. Round-trips within 1/255.
void write_png(const ImageBatch& batch, std::size_t index,
               const std::filesystem::path& path);
void write_png(const PixelMask& mask, const std::filesystem::path& path);

// Decodes an 8-bit RGB / RGBA / gray PNG into a single-image batch, mapping
// to [0,1] and normalizing with `norm`.
ImageBatch read_png(const std::filesystem::path& path, const Normalization& norm);

// How a run or eval locates its data. kind is one of cifar10, cifar100-fine,
// cifar100-coarse (path = comma-separated .bin files) or gaussian-clusters,
// striped-classes (synthetic fields used instead).
struct DatasetConfig {
  std::string kind = "gaussian-clusters";
  std::string path;
  int classes = 10;
  int per_class = 100;
  int image_size = 32;
  std::uint64_t seed = 7;
  float noise = 0.1f;
};

ImageBatch load_dataset(const DatasetConfig& cfg);

// Creates out/, out/checkpoints/ and out/previews/ if missing.
void ensure_run_dir(const std::filesystem::path& out_dir);

}  // namespace mixmask
