#include "mixmask/mixer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mixmask {

void validate(const ImageBatch& batch) {
  if (batch.channels <= 0 || batch.height <= 0 || batch.width <= 0)
    throw std::invalid_argument("image batch: non-positive dimensions");
  std::size_t per = batch.pixels_per_image();
  if (batch.data.empty() || batch.data.size() % per != 0)
    throw std::invalid_argument("image batch: data size not a multiple of image size");
  if (!batch.labels.empty() && batch.labels.size() != batch.size())
    throw std::invalid_argument("image batch: label count does not match batch size");
  if (!batch.norm.identity() &&
      (batch.norm.mean.size() != static_cast<std::size_t>(batch.channels) ||
       batch.norm.std.size() != static_cast<std::size_t>(batch.channels)))
    throw std::invalid_argument("image batch: normalization channel mismatch");
  for (float v : batch.data)
    if (!std::isfinite(v))
      throw std::invalid_argument("image batch: non-finite pixel value");
}

PairingKind parse_pairing_kind(const std::string& name) {
  if (name == "reverse") return PairingKind::reverse;
  if (name == "random") return PairingKind::random;
  if (name == "identity") return PairingKind::identity;
  throw std::invalid_argument("unknown pairing kind: " + name);
}

FillMode parse_fill_mode(const std::string& name) {
  if (name == "image") return FillMode::image;
  if (name == "zero") return FillMode::zero;
  if (name == "gaussian") return FillMode::gaussian;
  throw std::invalid_argument("unknown fill mode: " + name);
}

const char* pairing_kind_name(PairingKind k) {
  switch (k) {
    case PairingKind::reverse: return "reverse";
    case PairingKind::random: return "random";
    default: return "identity";
  }
}

const char* fill_mode_name(FillMode f) {
  switch (f) {
    case FillMode::image: return "image";
    case FillMode::zero: return "zero";
    default: return "gaussian";
  }
}

Pairing make_pairing(PairingKind kind, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("pairing over empty batch");
  Pairing p;
  p.kind = kind;
  p.perm.resize(n);
  switch (kind) {
    case PairingKind::identity:
      for (std::size_t i = 0; i < n; ++i) p.perm[i] = static_cast<int>(i);
      break;
    case PairingKind::reverse:
      for (std::size_t i = 0; i < n; ++i) p.perm[i] = static_cast<int>(n - 1 - i);
      break;
    case PairingKind::random: {
      Rng rng(seed);
      bool is_reverse = true;
      do {
        for (std::size_t i = 0; i < n; ++i) p.perm[i] = static_cast<int>(i);
        for (std::size_t i = n - 1; i > 0; --i) {
          std::size_t j = rng.below(i + 1);
          std::swap(p.perm[i], p.perm[j]);
        }
        is_reverse = true;
        for (std::size_t i = 0; i < n && is_reverse; ++i)
          is_reverse = p.perm[i] == static_cast<int>(n - 1 - i);
      } while (is_reverse && n > 2);
      break;
    }
  }
  return p;
}

namespace {

void check_mix_args(const ImageBatch& batch, const PixelMask& mask,
                    const Pairing& pairing) {
  if (batch.channels <= 0 || batch.size() == 0)
    throw std::invalid_argument("mix: empty image batch");
  validate(batch);
  if (mask.height != batch.height || mask.width != batch.width)
    throw std::invalid_argument("mix: mask dims do not match image dims");
  if (pairing.size() != batch.size())
    throw std::invalid_argument("mix: pairing size does not match batch size");
  for (int q : pairing.perm)
    if (q < 0 || static_cast<std::size_t>(q) >= batch.size())
      throw std::invalid_argument("mix: pairing index out of range");
}

ImageBatch like(const ImageBatch& batch) {
  ImageBatch out;
  out.channels = batch.channels;
  out.height = batch.height;
  out.width = batch.width;
  out.norm = batch.norm;
  out.data.resize(batch.data.size());
  return out;
}

}  // namespace

MixOutput mix_batch(const ImageBatch& batch, const PixelMask& mask,
                    const Pairing& pairing, FillMode fill,
                    std::uint64_t fill_seed) {
  check_mix_args(batch, mask, pairing);

  MixOutput out;
  out.mixed = like(batch);
  out.lambda = lambda_of(mask);
  out.pairing = pairing;
  out.fill = fill;

  std::size_t n_img = batch.size();
  std::size_t hw = static_cast<std::size_t>(batch.height) * batch.width;
  Rng noise_rng(fill_seed);
  for (std::size_t n = 0; n < n_img; ++n) {
    const float* a = batch.image(n);
    const float* b = batch.image(pairing.perm[n]);
    float* dst = out.mixed.image(n);
    for (int c = 0; c < batch.channels; ++c) {
      std::size_t base = static_cast<std::size_t>(c) * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        if (mask.keep[p]) {
          dst[base + p] = a[base + p];
        } else {
          switch (fill) {
            case FillMode::image: dst[base + p] = b[base + p]; break;
            case FillMode::zero: dst[base + p] = 0.0f; break;
            case FillMode::gaussian:
              dst[base + p] = static_cast<float>(noise_rng.normal());
              break;
          }
        }
      }
    }
  }
  return out;
}

ImageBatch switch_batch(const ImageBatch& batch, const PixelMask& mask,
                        const Pairing& pairing) {
  check_mix_args(batch, mask, pairing);

  ImageBatch out = like(batch);
  std::size_t n_img = batch.size();
  std::size_t hw = static_cast<std::size_t>(batch.height) * batch.width;
  for (std::size_t n = 0; n < n_img; ++n) {
    const float* a = batch.image(n);
    const float* b = batch.image(pairing.perm[n]);
    float* dst = out.image(n);
    for (int c = 0; c < batch.channels; ++c) {
      std::size_t base = static_cast<std::size_t>(c) * hw;
      for (std::size_t p = 0; p < hw; ++p)
        dst[base + p] = mask.keep[p] ? b[base + p] : a[base + p];
    }
  }
  return out;
}

UnmixOutput unmix_global(const ImageBatch& batch, std::uint64_t seed) {
  if (batch.size() == 0) throw std::invalid_argument("unmix_global: empty batch");
  validate(batch);
  Rng rng(seed);
  float lam = static_cast<float>(rng.beta(1.0, 1.0));

  UnmixOutput out;
  out.global = true;
  out.lambda = lam;
  out.mixed = like(batch);
  std::size_t n_img = batch.size();
  std::size_t per = batch.pixels_per_image();
  for (std::size_t n = 0; n < n_img; ++n) {
    const float* a = batch.image(n);
    const float* b = batch.image(n_img - 1 - n);
    float* dst = out.mixed.image(n);
    for (std::size_t p = 0; p < per; ++p)
      dst[p] = lam * a[p] + (1.0f - lam) * b[p];
  }
  return out;
}

UnmixOutput unmix_local(const ImageBatch& batch, double lam, std::uint64_t seed) {
  if (batch.size() == 0) throw std::invalid_argument("unmix_local: empty batch");
  validate(batch);
  if (!(lam >= 0.0 && lam <= 1.0))
    throw std::invalid_argument("unmix_local: lam must lie in [0, 1]");
  int H = batch.height, W = batch.width;
  double cut = std::sqrt(1.0 - lam);
  int cut_h = static_cast<int>(H * cut);
  int cut_w = static_cast<int>(W * cut);

  Rng rng(seed);
  int cy = static_cast<int>(rng.below(H));
  int cx = static_cast<int>(rng.below(W));
  Box box;
  box.y1 = std::clamp(cy - cut_h / 2, 0, H);
  box.y2 = std::clamp(cy + cut_h / 2, 0, H);
  box.x1 = std::clamp(cx - cut_w / 2, 0, W);
  box.x2 = std::clamp(cx + cut_w / 2, 0, W);

  UnmixOutput out;
  out.global = false;
  out.bbox = box;
  double box_area = static_cast<double>(box.y2 - box.y1) * (box.x2 - box.x1);
  out.lambda = 1.0 - box_area / (static_cast<double>(H) * W);
  out.mixed = batch;
  out.mixed.labels.clear();

  std::size_t n_img = batch.size();
  for (std::size_t n = 0; n < n_img; ++n) {
    const float* b = batch.image(n_img - 1 - n);
    float* dst = out.mixed.image(n);
    std::size_t hw = static_cast<std::size_t>(H) * W;
    for (int c = 0; c < batch.channels; ++c) {
      std::size_t base = static_cast<std::size_t>(c) * hw;
      for (int y = box.y1; y < box.y2; ++y)
        for (int x = box.x1; x < box.x2; ++x)
          dst[base + static_cast<std::size_t>(y) * W + x] =
              b[base + static_cast<std::size_t>(y) * W + x];
    }
  }
  return out;
}

}  // namespace mixmask
