#include "mixmask/datastore.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "mixmask/rng.hpp"

namespace mixmask {

namespace {

constexpr int kCifarDim = 32;
constexpr std::size_t kCifarPixels = 3072;

std::size_t record_size(CifarVariant v) {
  return v == CifarVariant::cifar10 ? kCifarPixels + 1 : kCifarPixels + 2;
}

int label_limit(CifarVariant v) {
  switch (v) {
    case CifarVariant::cifar10: return 10;
    case CifarVariant::fine: return 100;
    default: return 20;
  }
}

float normalize_byte(std::uint8_t b, const Normalization& norm, int c) {
  float v = static_cast<float>(b) / 255.0f;
  if (norm.identity()) return v;
  return (v - norm.mean[c]) / norm.std[c];
}

}  // namespace

CifarVariant parse_cifar_variant(const std::string& name) {
  if (name == "cifar10") return CifarVariant::cifar10;
  if (name == "fine") return CifarVariant::fine;
  if (name == "coarse") return CifarVariant::coarse;
  throw std::invalid_argument("unknown cifar variant: " + name);
}

Normalization cifar10_normalization() {
  return {{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}};
}

Normalization cifar100_normalization() {
  return {{0.5071f, 0.4865f, 0.4409f}, {0.2673f, 0.2564f, 0.2762f}};
}

ImageBatch read_cifar(const std::filesystem::path& path, CifarVariant variant,
                      const Normalization& norm) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open cifar file: " + path.string());
  in.seekg(0, std::ios::end);
  std::size_t len = static_cast<std::size_t>(in.tellg());
  in.seekg(0);

  std::size_t rec = record_size(variant);
  if (len == 0 || len % rec != 0)
    throw std::runtime_error("truncated cifar file (length " + std::to_string(len) +
                             " not a multiple of " + std::to_string(rec) + "): " +
                             path.string());
  std::size_t n = len / rec;

  ImageBatch batch;
  batch.channels = 3;
  batch.height = kCifarDim;
  batch.width = kCifarDim;
  batch.norm = norm;
  batch.data.resize(n * kCifarPixels);
  batch.labels.resize(n);

  std::vector<std::uint8_t> raw(rec);
  int limit = label_limit(variant);
  for (std::size_t i = 0; i < n; ++i) {
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(rec));
    if (!in) throw std::runtime_error("short read in cifar file: " + path.string());
    if (variant != CifarVariant::cifar10) {
      if (raw[0] >= 20 || raw[1] >= 100)
        throw std::runtime_error("cifar-100 label out of range in record " +
                                 std::to_string(i));
    }
    std::size_t label_at = variant == CifarVariant::fine ? 1 : 0;
    int label = raw[label_at];
    if (label >= limit)
      throw std::runtime_error("cifar label " + std::to_string(label) +
                               " out of range in record " + std::to_string(i));
    batch.labels[i] = label;
    std::size_t pix0 = rec - kCifarPixels;
    float* dst = batch.image(i);
    for (std::size_t p = 0; p < kCifarPixels; ++p)
      dst[p] = normalize_byte(raw[pix0 + p], norm, static_cast<int>(p / 1024));
  }
  return batch;
}

void write_cifar(const std::filesystem::path& path,
                 const std::vector<CifarRecord>& records, CifarVariant variant) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path.string());
  for (const CifarRecord& r : records) {
    if (variant != CifarVariant::cifar10)
      out.put(static_cast<char>(r.coarse_label));
    out.put(static_cast<char>(r.label));
    out.write(reinterpret_cast<const char*>(r.pixels.data()), kCifarPixels);
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<CifarRecord> batch_to_records(const ImageBatch& batch) {
  if (batch.channels != 3 || batch.height != kCifarDim || batch.width != kCifarDim)
    throw std::invalid_argument("batch_to_records expects 3x32x32 images");
  std::vector<CifarRecord> records(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    CifarRecord& r = records[i];
    r.label = batch.labels.empty() ? 0 : static_cast<std::uint8_t>(batch.labels[i]);
    const float* src = batch.image(i);
    for (std::size_t p = 0; p < kCifarPixels; ++p) {
      int c = static_cast<int>(p / 1024);
      float v = src[p];
      if (!batch.norm.identity())
        v = v * batch.norm.std[c] + batch.norm.mean[c];
      v = std::clamp(v, 0.0f, 1.0f);
      r.pixels[p] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  return records;
}

namespace {

// Accumulates `modes` random cosine waves per channel, with integer cycle
// counts in [0,3] so the result stays locally smooth and crops of the same
// image remain mutually predictive.
void add_low_freq_waves(float* img, int side, int modes, double amp_lo,
                        double amp_hi, Rng& rng) {
  constexpr double two_pi = 6.283185307179586476925286766559;
  std::size_t hw = static_cast<std::size_t>(side) * side;
  for (int ch = 0; ch < 3; ++ch) {
    float* plane = img + static_cast<std::size_t>(ch) * hw;
    for (int m = 0; m < modes; ++m) {
      std::uint64_t fx = 0, fy = 0;
      while (fx == 0 && fy == 0) {
        fx = rng.below(4);
        fy = rng.below(4);
      }
      double phase = rng.uniform(0.0, two_pi);
      double amp = rng.uniform(amp_lo, amp_hi);
      for (int y = 0; y < side; ++y) {
        double row_arg = two_pi * static_cast<double>(fy) * y / side + phase;
        for (int x = 0; x < side; ++x)
          plane[static_cast<std::size_t>(y) * side + x] += static_cast<float>(
              amp * std::cos(two_pi * static_cast<double>(fx) * x / side + row_arg));
      }
    }
  }
}

}  // namespace

ImageBatch gen_synthetic(const SyntheticSpec& spec, const Normalization& norm) {
  if (spec.classes <= 0 || spec.per_class <= 0 || spec.image_size <= 0)
    throw std::invalid_argument("synthetic spec: non-positive size");
  int side = spec.image_size;
  std::size_t hw = static_cast<std::size_t>(side) * side;
  std::size_t per = 3 * hw;
  std::size_t n = static_cast<std::size_t>(spec.classes) * spec.per_class;

  ImageBatch batch;
  batch.channels = 3;
  batch.height = side;
  batch.width = side;
  batch.norm = norm;
  batch.data.resize(n * per);
  batch.labels.resize(n);

  // Class templates in [0,1] space. Cluster templates are keyed by the class
  // id alone, never the sampling seed, so differently seeded datasets are
  // fresh draws from the same classes.
  std::vector<float> templates(static_cast<std::size_t>(spec.classes) * per,
                               0.5f);
  for (int c = 0; c < spec.classes; ++c) {
    float* t = templates.data() + static_cast<std::size_t>(c) * per;
    if (spec.kind == SyntheticKind::gaussian_clusters) {
      Rng trng(derive_seed(0xC1A55, c));
      add_low_freq_waves(t, side, 3, 0.08, 0.16, trng);
    } else {
      constexpr double two_pi = 6.283185307179586476925286766559;
      double period = c + 2.0;
      for (int ch = 0; ch < 3; ++ch) {
        double amp = 0.25 + 0.05 * ch;
        for (int y = 0; y < side; ++y)
          for (int x = 0; x < side; ++x)
            t[(static_cast<std::size_t>(ch) * side + y) * side + x] =
                static_cast<float>(0.5 + amp * std::cos(two_pi * x / period));
      }
    }
  }

  std::vector<float> work(per);
  for (std::size_t i = 0; i < n; ++i) {
    int c = static_cast<int>(i) / spec.per_class;
    batch.labels[i] = c;
    Rng rng(derive_seed(spec.seed, 0x1A6E, i));
    const float* t = templates.data() + static_cast<std::size_t>(c) * per;
    std::copy(t, t + per, work.begin());
    // Per-image identity lives in a smooth deformation (survives cropping)
    // plus i.i.d. pixel noise, both scaled by the noise knob.
    if (spec.kind == SyntheticKind::gaussian_clusters && spec.noise > 0.0f)
      add_low_freq_waves(work.data(), side, 2, 0.3 * spec.noise,
                         0.6 * spec.noise, rng);
    float* dst = batch.image(i);
    for (std::size_t p = 0; p < per; ++p) {
      float v = work[p] + spec.noise * static_cast<float>(rng.normal());
      v = std::clamp(v, 0.0f, 1.0f);
      int ch = static_cast<int>(p / hw);
      dst[p] = norm.identity() ? v : (v - norm.mean[ch]) / norm.std[ch];
    }
  }
  return batch;
}

namespace {

void write_png_bytes(const std::filesystem::path& path, int width, int height,
                     int color_type, const std::vector<std::uint8_t>& bytes) {
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot open for write: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw std::runtime_error("png write failed: " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width),
               static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  int stride = color_type == PNG_COLOR_TYPE_RGB ? width * 3 : width;
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(y) * stride));
  png_write_end(png, info);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace

void write_png(const ImageBatch& batch, std::size_t index,
               const std::filesystem::path& path) {
  if (index >= batch.size()) throw std::invalid_argument("write_png: index out of range");
  if (batch.channels != 3) throw std::invalid_argument("write_png: expects RGB images");
  int H = batch.height, W = batch.width;
  std::size_t hw = static_cast<std::size_t>(H) * W;
  const float* src = batch.image(index);
  std::vector<std::uint8_t> bytes(hw * 3);
  for (std::size_t p = 0; p < hw; ++p) {
    for (int c = 0; c < 3; ++c) {
      float v = src[static_cast<std::size_t>(c) * hw + p];
      if (!batch.norm.identity()) v = v * batch.norm.std[c] + batch.norm.mean[c];
      v = std::clamp(v, 0.0f, 1.0f);
      bytes[p * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  write_png_bytes(path, W, H, PNG_COLOR_TYPE_RGB, bytes);
}

void write_png(const PixelMask& mask, const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes(mask.keep.size());
  for (std::size_t i = 0; i < mask.keep.size(); ++i)
    bytes[i] = mask.keep[i] ? 255 : 0;
  write_png_bytes(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, bytes);
}

ImageBatch read_png(const std::filesystem::path& path, const Normalization& norm) {
  std::FILE* fp = std::fopen(path.string().c_str(), "rb");
  if (!fp) throw std::runtime_error("cannot open png: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    throw std::runtime_error("png read failed: " + path.string());
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_uint_32 width = png_get_image_width(png, info);
  png_uint_32 height = png_get_image_height(png, info);

  // Normalize every input to 8-bit RGB.
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  if (png_get_rowbytes(png, info) != width * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("unsupported png layout: " + path.string());
  }

  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(width) * height * 3);
  for (png_uint_32 y = 0; y < height; ++y)
    png_read_row(png, bytes.data() + static_cast<std::size_t>(y) * width * 3, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);

  ImageBatch batch;
  batch.channels = 3;
  batch.height = static_cast<int>(height);
  batch.width = static_cast<int>(width);
  batch.norm = norm;
  std::size_t hw = static_cast<std::size_t>(width) * height;
  batch.data.resize(hw * 3);
  for (std::size_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c)
      batch.data[static_cast<std::size_t>(c) * hw + p] =
          normalize_byte(bytes[p * 3 + c], norm, c);
  return batch;
}

ImageBatch load_dataset(const DatasetConfig& cfg) {
  if (cfg.kind == "gaussian-clusters" || cfg.kind == "striped-classes") {
    SyntheticSpec spec;
    spec.kind = cfg.kind == "gaussian-clusters" ? SyntheticKind::gaussian_clusters
                                                : SyntheticKind::striped_classes;
    spec.classes = cfg.classes;
    spec.per_class = cfg.per_class;
    spec.image_size = cfg.image_size;
    spec.seed = cfg.seed;
    spec.noise = cfg.noise;
    return gen_synthetic(spec, cifar10_normalization());
  }

  CifarVariant variant;
  Normalization norm;
  if (cfg.kind == "cifar10") {
    variant = CifarVariant::cifar10;
    norm = cifar10_normalization();
  } else if (cfg.kind == "cifar100-fine") {
    variant = CifarVariant::fine;
    norm = cifar100_normalization();
  } else if (cfg.kind == "cifar100-coarse") {
    variant = CifarVariant::coarse;
    norm = cifar100_normalization();
  } else {
    throw std::invalid_argument("unknown dataset kind: " + cfg.kind);
  }

  if (cfg.path.empty())
    throw std::invalid_argument("dataset kind " + cfg.kind + " requires a path");
  ImageBatch all;
  std::stringstream ss(cfg.path);
  std::string file;
  while (std::getline(ss, file, ',')) {
    if (file.empty()) continue;
    ImageBatch part = read_cifar(file, variant, norm);
    if (all.data.empty()) {
      all = std::move(part);
    } else {
      all.data.insert(all.data.end(), part.data.begin(), part.data.end());
      all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
    }
  }
  if (all.data.empty())
    throw std::invalid_argument("dataset path matched no files: " + cfg.path);
  return all;
}

void ensure_run_dir(const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir / "checkpoints");
  std::filesystem::create_directories(out_dir / "previews");
}

}  // namespace mixmask
