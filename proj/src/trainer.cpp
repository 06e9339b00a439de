#include "mixmask/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "mixmask/maskgen.hpp"
#include "mixmask/mixer.hpp"

namespace mixmask {

namespace {

// Stream tags for derive_seed; every consumer of randomness gets its own
// stream keyed by (seed, tag, step/epoch, sample) so branches never perturb
// each other's draws.
enum StreamTag : std::uint64_t {
  kStreamInit = 1,
  kStreamQueueInit,
  kStreamShuffle,
  kStreamAugQ,
  kStreamAugK,
  kStreamMaskRatio,
  kStreamMaskGen,
  kStreamPairing,
  kStreamFillNoise,
  kStreamUnmixChoice,
  kStreamUnmixLam,
  kStreamUnmixBox,
};

constexpr double kPi = 3.14159265358979323846;

RatioPolicy parse_ratio_policy(const std::string& text) {
  if (text.rfind("fixed:", 0) == 0) return RatioPolicy::fixed(std::atof(text.c_str() + 6));
  if (text.rfind("uniform:", 0) == 0) {
    double lo = 0.0, hi = 0.0;
    if (std::sscanf(text.c_str() + 8, "%lf,%lf", &lo, &hi) != 2)
      throw std::invalid_argument("ratio policy needs uniform:LO,HI, got " + text);
    return RatioPolicy::uniform(lo, hi);
  }
  throw std::invalid_argument("unknown ratio policy: " + text);
}

std::array<int, 4> parse_widths(const std::string& text) {
  std::array<int, 4> w{};
  if (std::sscanf(text.c_str(), "%d,%d,%d,%d", &w[0], &w[1], &w[2], &w[3]) != 4)
    throw std::invalid_argument("widths must be four comma-separated ints, got " + text);
  return w;
}

void bilinear_resize_plane(const float* src, int src_h, int src_w, int top,
                           int left, int side, float* dst, int dst_h, int dst_w) {
  double sy = static_cast<double>(side) / dst_h;
  double sx = static_cast<double>(side) / dst_w;
  for (int y = 0; y < dst_h; ++y) {
    double fy = top + (y + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, static_cast<double>(top)),
                  static_cast<double>(top + side - 1));
    int y0 = static_cast<int>(fy);
    int y1 = std::min(y0 + 1, top + side - 1);
    double wy = fy - y0;
    for (int x = 0; x < dst_w; ++x) {
      double fx = left + (x + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, static_cast<double>(left)),
                    static_cast<double>(left + side - 1));
      int x0 = static_cast<int>(fx);
      int x1 = std::min(x0 + 1, left + side - 1);
      double wx = fx - x0;
      double v00 = src[y0 * src_w + x0], v01 = src[y0 * src_w + x1];
      double v10 = src[y1 * src_w + x0], v11 = src[y1 * src_w + x1];
      double v0 = v00 + (v01 - v00) * wx;
      double v1 = v10 + (v11 - v10) * wx;
      dst[y * dst_w + x] = static_cast<float>(v0 + (v1 - v0) * wy);
    }
  }
  (void)src_h;
}

}  // namespace

int default_grid(int image_size) {
  if (image_size <= 32) return 2;
  if (image_size <= 64) return 4;
  return 8;
}

void augment_view(float* img, int channels, int height, int width,
                  const Normalization& norm, const AugmentParams& params, Rng& rng) {
  // Fixed draw order regardless of which transforms end up active.
  double scale = rng.uniform(params.crop_min_scale, params.crop_max_scale);
  int max_side = std::min(height, width);
  int side = std::clamp(
      static_cast<int>(std::llround(max_side * std::sqrt(scale))), 1, max_side);
  int top = static_cast<int>(rng.below(height - side + 1));
  int left = static_cast<int>(rng.below(width - side + 1));
  bool flip = rng.uniform() < params.flip_prob;
  double f_bright = rng.uniform(1.0 - params.jitter, 1.0 + params.jitter);
  double f_contrast = rng.uniform(1.0 - params.jitter, 1.0 + params.jitter);

  std::size_t hw = static_cast<std::size_t>(height) * width;
  if (side != height || side != width || top != 0 || left != 0) {
    static thread_local std::vector<float> tmp;
    tmp.resize(hw);
    for (int c = 0; c < channels; ++c) {
      float* plane = img + static_cast<std::size_t>(c) * hw;
      bilinear_resize_plane(plane, height, width, top, left, side, tmp.data(),
                            height, width);
      std::copy(tmp.begin(), tmp.end(), plane);
    }
  }

  if (flip) {
    for (int c = 0; c < channels; ++c) {
      float* plane = img + static_cast<std::size_t>(c) * hw;
      for (int y = 0; y < height; ++y) {
        float* row = plane + static_cast<std::size_t>(y) * width;
        for (int x = 0; x < width / 2; ++x) std::swap(row[x], row[width - 1 - x]);
      }
    }
  }

  // Brightness and contrast act on [0,1] values; both are affine, so they
  // are applied directly in normalized space (and vanish exactly at factor 1).
  if (f_bright != 1.0) {
    for (int c = 0; c < channels; ++c) {
      float a = static_cast<float>(f_bright);
      float mean_c = norm.identity() ? 0.0f : norm.mean[c];
      float std_c = norm.identity() ? 1.0f : norm.std[c];
      float add = static_cast<float>((f_bright - 1.0) * mean_c / std_c);
      float* plane = img + static_cast<std::size_t>(c) * hw;
      for (std::size_t p = 0; p < hw; ++p) plane[p] = a * plane[p] + add;
    }
  }
  if (f_contrast != 1.0) {
    double gray = 0.0;
    for (int c = 0; c < channels; ++c) {
      float mean_c = norm.identity() ? 0.0f : norm.mean[c];
      float std_c = norm.identity() ? 1.0f : norm.std[c];
      const float* plane = img + static_cast<std::size_t>(c) * hw;
      double s = 0.0;
      for (std::size_t p = 0; p < hw; ++p) s += static_cast<double>(plane[p]);
      gray += (s / static_cast<double>(hw)) * std_c + mean_c;
    }
    gray /= channels;
    for (int c = 0; c < channels; ++c) {
      float mean_c = norm.identity() ? 0.0f : norm.mean[c];
      float std_c = norm.identity() ? 1.0f : norm.std[c];
      float a = static_cast<float>(f_contrast);
      float add = static_cast<float>((1.0 - f_contrast) * (gray - mean_c) / std_c);
      float* plane = img + static_cast<std::size_t>(c) * hw;
      for (std::size_t p = 0; p < hw; ++p) plane[p] = a * plane[p] + add;
    }
  }

  for (int c = 0; c < channels; ++c) {
    float lo = norm.lo(c), hi = norm.hi(c);
    float* plane = img + static_cast<std::size_t>(c) * hw;
    for (std::size_t p = 0; p < hw; ++p) plane[p] = std::clamp(plane[p], lo, hi);
  }
}

void TrainConfig::check(std::size_t dataset_size) const {
  if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if ((mixmask_enabled || unmix_enabled) && batch_size < 2)
    throw std::invalid_argument("train: batch_size must be >= 2 with a mixing branch enabled");
  if (!(unmix_global_prob >= 0.0 && unmix_global_prob <= 1.0))
    throw std::invalid_argument("train: unmix_global_prob must lie in [0, 1]");
  if (!(tau > 0.0)) throw std::invalid_argument("train: tau must be positive");
  if (queue_k < 1) throw std::invalid_argument("train: queue_k must be >= 1");
  if (queue_k % batch_size != 0)
    throw std::invalid_argument("train: batch_size must divide queue_k");
  if (!(momentum_m >= 0.0 && momentum_m <= 1.0))
    throw std::invalid_argument("train: momentum_m must lie in [0, 1]");
  if (permutation_policy != "same" && permutation_policy != "different")
    throw std::invalid_argument("train: permutation_policy must be same or different");
  if (dataset_size < static_cast<std::size_t>(batch_size))
    throw std::invalid_argument("train: dataset smaller than one batch");
  parse_ratio_policy(ratio_policy);
  parse_mask_pattern(mask_pattern);
  parse_fill_mode(fill_mode);
  parse_pairing_kind(pairing);
  parse_widths(widths);
}

EncoderConfig arch_from_config(const TrainConfig& cfg) {
  EncoderConfig arch;
  arch.in_channels = 3;
  arch.image_size = cfg.dataset.image_size;
  arch.widths = parse_widths(cfg.widths);
  arch.head_hidden = cfg.head_hidden;
  arch.embed_dim = cfg.embed_dim;
  return arch;
}

bool deterministic_mode_forced() {
  const char* v = std::getenv("MIXMASK_DETERMINISTIC");
  return v != nullptr && std::strcmp(v, "1") == 0;
}

TrainerState init_trainer(const TrainConfig& cfg, const ImageBatch& dataset) {
  cfg.check(dataset.size());
  TrainerState st;
  st.cfg = cfg;
  if (deterministic_mode_forced()) st.cfg.deterministic = true;
  st.arch = arch_from_config(cfg);
  st.arch.in_channels = dataset.channels;
  st.arch.image_size = dataset.height;
  st.arch.check();
  if (dataset.height != dataset.width)
    throw std::invalid_argument("train: images must be square");

  st.pair.online = init_encoder_params<float>(st.arch, derive_seed(cfg.seed, kStreamInit));
  st.pair.target = st.pair.online;
  st.pair.m = cfg.momentum_m;
  st.velocity = zeros_like(st.pair.online);
  st.queue = KeyQueue::random_init(st.arch.embed_dim,
                                   static_cast<std::size_t>(cfg.queue_k),
                                   derive_seed(cfg.seed, kStreamQueueInit));
  st.total_steps = static_cast<std::uint64_t>(cfg.epochs) *
                   (dataset.size() / static_cast<std::size_t>(cfg.batch_size));
  return st;
}

MetricsRow train_step(TrainerState& st, const ImageBatch& batch) {
  auto t_start = std::chrono::steady_clock::now();
  const TrainConfig& cfg = st.cfg;
  std::size_t n = batch.size();
  if (n == 0) throw std::invalid_argument("train_step: empty batch");

  ImageBatch qview = batch;
  qview.labels.clear();
  ImageBatch kview = qview;
  int workers = st.cfg.deterministic ? 1 : std::max(1, cfg.workers);
#pragma omp parallel for schedule(static) num_threads(workers)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i) {
    Rng rq(derive_seed(cfg.seed, kStreamAugQ, st.step, static_cast<std::uint64_t>(i)));
    augment_view(qview.image(i), batch.channels, batch.height, batch.width,
                 batch.norm, cfg.augment, rq);
    Rng rk(derive_seed(cfg.seed, kStreamAugK, st.step, static_cast<std::uint64_t>(i)));
    augment_view(kview.image(i), batch.channels, batch.height, batch.width,
                 batch.norm, cfg.augment, rk);
  }

  EmbeddingBatch k_emb = encoder_forward<float>(st.arch, st.pair.target,
                                                kview.data.data(), n, Role::key);

  MetricsRow row;
  LossParts parts;
  EncoderParams grads;
  try {
    auto res_orig = backward<float>(
        st.arch, st.pair.online, qview.data.data(), n,
        [&](const EmbeddingBatch& emb, std::vector<float>& d_emb) {
          return info_nce(emb, k_emb, st.queue, cfg.tau, &d_emb);
        });
    parts.l_orig = res_orig.loss;
    grads = std::move(res_orig.grads);

    if (cfg.mixmask_enabled) {
      Rng ratio_rng(derive_seed(cfg.seed, kStreamMaskRatio, st.step));
      double ratio = parse_ratio_policy(cfg.ratio_policy).sample(ratio_rng);
      int grid = cfg.grid_n > 0 ? cfg.grid_n : default_grid(batch.height);
      std::uint64_t mask_seed = derive_seed(cfg.seed, kStreamMaskGen, st.step);
      GridMask gm = parse_mask_pattern(cfg.mask_pattern) == MaskPattern::blocked
                        ? gen_blocked_mask(grid, ratio, mask_seed)
                        : gen_discrete_mask(grid, ratio, mask_seed);
      PixelMask pm = expand_to_pixels(gm, batch.height, batch.width);

      PairingKind kind = parse_pairing_kind(cfg.pairing);
      if (cfg.unmix_enabled && cfg.permutation_policy == "different")
        kind = PairingKind::random;
      Pairing pairing =
          make_pairing(kind, n, derive_seed(cfg.seed, kStreamPairing, st.step));
      MixOutput mx = mix_batch(qview, pm, pairing, parse_fill_mode(cfg.fill_mode),
                               derive_seed(cfg.seed, kStreamFillNoise, st.step));

      double l_up = 0.0, l_down = 0.0;
      auto res_mix = backward<float>(
          st.arch, st.pair.online, mx.mixed.data.data(), n,
          [&](const EmbeddingBatch& emb, std::vector<float>& d_emb) {
            MixLossResult<float> r = mixmask_loss(emb, k_emb, pairing, st.queue,
                                                  cfg.tau, mx.lambda, true);
            l_up = r.l_up;
            l_down = r.l_down;
            d_emb = std::move(r.dq);
            return r.combined;
          });
      parts.l_up = l_up;
      parts.l_down = l_down;
      parts.lambda_mask = mx.lambda;
      accumulate(grads, res_mix.grads);
      row.mix_perm = pairing.perm;
    }

    if (cfg.unmix_enabled) {
      Rng choice(derive_seed(cfg.seed, kStreamUnmixChoice, st.step));
      bool global = choice.uniform() < cfg.unmix_global_prob;
      std::uint64_t lam_seed = derive_seed(cfg.seed, kStreamUnmixLam, st.step);
      UnmixOutput um;
      if (global) {
        um = unmix_global(qview, lam_seed);
      } else {
        double lam = Rng(lam_seed).beta(1.0, 1.0);
        um = unmix_local(qview, lam, derive_seed(cfg.seed, kStreamUnmixBox, st.step));
      }
      Pairing reverse = make_pairing(PairingKind::reverse, n, 0);

      double l_um = 0.0, l_um_flip = 0.0;
      auto res_um = backward<float>(
          st.arch, st.pair.online, um.mixed.data.data(), n,
          [&](const EmbeddingBatch& emb, std::vector<float>& d_emb) {
            MixLossResult<float> r = mixmask_loss(emb, k_emb, reverse, st.queue,
                                                  cfg.tau, um.lambda, true);
            l_um = r.l_up;
            l_um_flip = r.l_down;
            d_emb = std::move(r.dq);
            return r.combined;
          });
      parts.l_um = l_um;
      parts.l_um_flip = l_um_flip;
      parts.lambda_unmix = um.lambda;
      accumulate(grads, res_um.grads);
    }
  } catch (const std::exception& e) {
    std::cerr << "train_step failed at step " << st.step << ": " << e.what()
              << "\n  l_orig=" << parts.l_orig.value_or(-1)
              << " l_up=" << parts.l_up.value_or(-1)
              << " l_down=" << parts.l_down.value_or(-1)
              << " l_um=" << parts.l_um.value_or(-1)
              << " l_um_flip=" << parts.l_um_flip.value_or(-1) << std::endl;
    throw;
  }

  LossBreakdown breakdown =
      total_loss(parts, {cfg.mixmask_enabled, cfg.unmix_enabled});
  if (!std::isfinite(breakdown.total)) {
    std::cerr << "train_step: non-finite total at step " << st.step
              << " (l_orig=" << breakdown.l_orig << ", l_up=" << breakdown.l_up
              << ", l_down=" << breakdown.l_down << ", l_um=" << breakdown.l_um
              << ", l_um_flip=" << breakdown.l_um_flip << ")" << std::endl;
    throw std::runtime_error("train_step: non-finite loss");
  }

  double lr_t = cfg.lr;
  if (cfg.cosine && st.total_steps > 0)
    lr_t = cfg.lr * 0.5 *
           (1.0 + std::cos(kPi * static_cast<double>(st.step) /
                           static_cast<double>(st.total_steps)));

  float mu = static_cast<float>(cfg.sgd_momentum);
  float wd = static_cast<float>(cfg.weight_decay);
  float lr_f = static_cast<float>(lr_t);
  for (std::size_t t = 0; t < st.pair.online.size(); ++t) {
    float* p = st.pair.online[t].v.data();
    float* v = st.velocity[t].v.data();
    const float* g = grads[t].v.data();
    std::size_t len = st.pair.online[t].v.size();
    for (std::size_t i = 0; i < len; ++i) {
      v[i] = mu * v[i] + (g[i] + wd * p[i]);
      p[i] -= lr_f * v[i];
    }
  }

  momentum_update(st.pair);
  queue_push(st.queue, k_emb);

  row.step = st.step;
  row.epoch = st.epoch;
  row.loss = breakdown;
  row.lr = lr_t;
  if (!st.cfg.deterministic) {
    auto dt = std::chrono::steady_clock::now() - t_start;
    row.ms_per_batch =
        std::chrono::duration_cast<std::chrono::duration<double, std::milli>>(dt)
            .count();
  }
  st.step += 1;
  return row;
}

const char* const kMetricsHeader =
    "step,epoch,l_orig,l_up,l_down,l_um,l_um_flip,lambda_mask,lambda_unmix,"
    "total,lr,ms_per_batch";

std::string format_metrics_row(const MetricsRow& row) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "%llu,%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.3f",
                static_cast<unsigned long long>(row.step), row.epoch,
                row.loss.l_orig, row.loss.l_up, row.loss.l_down, row.loss.l_um,
                row.loss.l_um_flip, row.loss.lambda_mask, row.loss.lambda_unmix,
                row.loss.total, row.lr, row.ms_per_batch);
  return buf;
}

std::string resolved_config_text(const TrainConfig& cfg) {
  std::ostringstream os;
  os << "epochs = " << cfg.epochs << "\n";
  os << "batch_size = " << cfg.batch_size << "\n";
  os << "seed = " << cfg.seed << "\n";
  os << "deterministic = " << (cfg.deterministic ? 1 : 0) << "\n";
  os << "workers = " << cfg.workers << "\n";
  os << "mixmask_enabled = " << (cfg.mixmask_enabled ? 1 : 0) << "\n";
  os << "grid_n = " << cfg.grid_n << "\n";
  os << "mask_pattern = " << cfg.mask_pattern << "\n";
  os << "ratio_policy = " << cfg.ratio_policy << "\n";
  os << "fill_mode = " << cfg.fill_mode << "\n";
  os << "pairing = " << cfg.pairing << "\n";
  os << "unmix_enabled = " << (cfg.unmix_enabled ? 1 : 0) << "\n";
  os << "unmix_global_prob = " << cfg.unmix_global_prob << "\n";
  os << "permutation_policy = " << cfg.permutation_policy << "\n";
  os << "tau = " << cfg.tau << "\n";
  os << "queue_k = " << cfg.queue_k << "\n";
  os << "momentum_m = " << cfg.momentum_m << "\n";
  os << "lr = " << cfg.lr << "\n";
  os << "sgd_momentum = " << cfg.sgd_momentum << "\n";
  os << "weight_decay = " << cfg.weight_decay << "\n";
  os << "cosine = " << (cfg.cosine ? 1 : 0) << "\n";
  os << "embed_dim = " << cfg.embed_dim << "\n";
  os << "head_hidden = " << cfg.head_hidden << "\n";
  os << "widths = " << cfg.widths << "\n";
  os << "dataset_kind = " << cfg.dataset.kind << "\n";
  os << "dataset_path = " << cfg.dataset.path << "\n";
  os << "dataset_classes = " << cfg.dataset.classes << "\n";
  os << "dataset_per_class = " << cfg.dataset.per_class << "\n";
  os << "dataset_image_size = " << cfg.dataset.image_size << "\n";
  os << "dataset_seed = " << cfg.dataset.seed << "\n";
  os << "dataset_noise = " << cfg.dataset.noise << "\n";
  os << "crop_min_scale = " << cfg.augment.crop_min_scale << "\n";
  os << "crop_max_scale = " << cfg.augment.crop_max_scale << "\n";
  os << "flip_prob = " << cfg.augment.flip_prob << "\n";
  os << "jitter = " << cfg.augment.jitter << "\n";
  return os.str();
}

namespace {

Checkpoint state_to_checkpoint(const TrainerState& st) {
  Checkpoint ckpt;
  ckpt.meta["arch"] = st.arch.describe();
  ckpt.meta["seed"] = std::to_string(st.cfg.seed);
  ckpt.meta["step"] = std::to_string(st.step);
  ckpt.meta["epoch"] = std::to_string(st.epoch);
  ckpt.meta["total_steps"] = std::to_string(st.total_steps);
  ckpt.meta["queue_cursor"] = std::to_string(st.queue.cursor);
  ckpt.meta["queue_capacity"] = std::to_string(st.queue.capacity);
  for (const auto& t : st.pair.online)
    ckpt.tensors.push_back({"online/" + t.name, t.shape, t.v});
  for (const auto& t : st.pair.target)
    ckpt.tensors.push_back({"target/" + t.name, t.shape, t.v});
  for (const auto& t : st.velocity)
    ckpt.tensors.push_back({"velocity/" + t.name, t.shape, t.v});
  ckpt.tensors.push_back(
      {"queue/entries",
       {static_cast<int>(st.queue.capacity), st.queue.dim},
       st.queue.entries});
  return ckpt;
}

void fill_params_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix,
                                 EncoderParams& params) {
  for (auto& t : params) {
    const NamedTensor<float>* src = nullptr;
    for (const auto& ct : ckpt.tensors)
      if (ct.name == prefix + t.name) {
        src = &ct;
        break;
      }
    if (!src) throw std::runtime_error("checkpoint missing tensor " + prefix + t.name);
    if (src->shape != t.shape || src->v.size() != t.v.size())
      throw std::runtime_error("checkpoint tensor shape mismatch on " + prefix +
                               t.name);
    t.v = src->v;
  }
}

}  // namespace

TrainerState state_from_checkpoint(const Checkpoint& ckpt, const TrainConfig& cfg) {
  auto arch_it = ckpt.meta.find("arch");
  if (arch_it == ckpt.meta.end())
    throw std::runtime_error("checkpoint missing architecture description");
  EncoderConfig arch = EncoderConfig::from_description(arch_it->second);

  TrainerState st;
  st.cfg = cfg;
  if (deterministic_mode_forced()) st.cfg.deterministic = true;
  st.arch = arch;
  EncoderConfig expected = arch_from_config(cfg);
  if (!(expected == arch))
    throw std::runtime_error("checkpoint architecture " + arch.describe() +
                             " does not match configured " + expected.describe());

  st.pair.online = init_encoder_params<float>(arch, 0);
  st.pair.target = st.pair.online;
  st.pair.m = cfg.momentum_m;
  st.velocity = zeros_like(st.pair.online);
  fill_params_from_checkpoint(ckpt, "online/", st.pair.online);
  fill_params_from_checkpoint(ckpt, "target/", st.pair.target);
  fill_params_from_checkpoint(ckpt, "velocity/", st.velocity);

  const NamedTensor<float>* q = nullptr;
  for (const auto& t : ckpt.tensors)
    if (t.name == "queue/entries") q = &t;
  if (!q || q->shape.size() != 2)
    throw std::runtime_error("checkpoint missing queue entries");
  st.queue.capacity = static_cast<std::size_t>(q->shape[0]);
  st.queue.dim = q->shape[1];
  st.queue.entries = q->v;
  st.queue.cursor = std::stoull(ckpt.meta.at("queue_cursor"));
  st.step = std::stoull(ckpt.meta.at("step"));
  st.epoch = std::atoi(ckpt.meta.at("epoch").c_str());
  st.total_steps = std::stoull(ckpt.meta.at("total_steps"));
  return st;
}

std::pair<EncoderConfig, EncoderParams> encoder_from_checkpoint(
    const Checkpoint& ckpt, const std::string& prefix) {
  auto arch_it = ckpt.meta.find("arch");
  if (arch_it == ckpt.meta.end())
    throw std::runtime_error("checkpoint missing architecture description");
  EncoderConfig arch = EncoderConfig::from_description(arch_it->second);
  EncoderParams params = init_encoder_params<float>(arch, 0);
  fill_params_from_checkpoint(ckpt, prefix, params);
  return {arch, params};
}

TrainerState run(const TrainConfig& cfg_in, const std::filesystem::path& out_dir) {
  TrainConfig cfg = cfg_in;
  if (deterministic_mode_forced()) cfg.deterministic = true;

  ImageBatch dataset = load_dataset(cfg.dataset);
  ensure_run_dir(out_dir);
  {
    std::ofstream conf(out_dir / "config.txt", std::ios::trunc);
    conf << resolved_config_text(cfg);
  }

  TrainerState st = init_trainer(cfg, dataset);
  std::filesystem::path ckpt_dir = out_dir / "checkpoints";
  std::filesystem::path latest = ckpt_dir / "latest.ckpt";
  std::filesystem::path metrics_path = out_dir / "metrics.csv";

  bool resumed = false;
  if (std::filesystem::exists(latest)) {
    st = state_from_checkpoint(load_checkpoint(latest), cfg);
    resumed = true;
  }

  std::size_t steps_per_epoch = dataset.size() / static_cast<std::size_t>(cfg.batch_size);
  // The cosine horizon follows the config, not the stored counter, so a
  // resumed run continues the schedule the config describes.
  st.total_steps = static_cast<std::uint64_t>(cfg.epochs) * steps_per_epoch;

  // Keep only complete metric rows from before the resume point so an
  // interrupted run reproduces the uninterrupted file byte for byte.
  if (resumed && std::filesystem::exists(metrics_path)) {
    std::ifstream in(metrics_path);
    std::vector<std::string> keep;
    std::string line;
    const std::string header(kMetricsHeader);
    std::size_t columns = 1 + std::count(header.begin(), header.end(), ',');
    while (std::getline(in, line)) {
      if (keep.empty()) {
        keep.push_back(line);
        continue;
      }
      if (static_cast<std::size_t>(
              std::count(line.begin(), line.end(), ',') + 1) != columns)
        continue;
      std::uint64_t s = std::strtoull(line.c_str(), nullptr, 10);
      if (s < st.step) keep.push_back(line);
    }
    in.close();
    std::ofstream out(metrics_path, std::ios::trunc);
    for (const auto& l : keep) out << l << "\n";
  } else if (!resumed || !std::filesystem::exists(metrics_path)) {
    std::ofstream out(metrics_path, std::ios::trunc);
    out << kMetricsHeader << "\n";
  }

  if (cfg.epochs == 0) {
    if (!resumed) save_checkpoint(latest, state_to_checkpoint(st));
    return st;
  }

  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw std::runtime_error("cannot open " + metrics_path.string());

  std::vector<std::size_t> order(dataset.size());
  ImageBatch bt;
  bt.channels = dataset.channels;
  bt.height = dataset.height;
  bt.width = dataset.width;
  bt.norm = dataset.norm;
  bt.data.resize(static_cast<std::size_t>(cfg.batch_size) * dataset.pixels_per_image());

  for (int ep = st.epoch; ep < cfg.epochs; ++ep) {
    st.epoch = ep;
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(cfg.seed, kStreamShuffle, static_cast<std::uint64_t>(ep)));
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      std::size_t j = shuffle_rng.below(i + 1);
      std::swap(order[i], order[j]);
    }
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      for (int i = 0; i < cfg.batch_size; ++i) {
        std::size_t src = order[b * cfg.batch_size + i];
        std::copy_n(dataset.image(src), dataset.pixels_per_image(),
                    bt.data.data() + static_cast<std::size_t>(i) * dataset.pixels_per_image());
      }
      MetricsRow row = train_step(st, bt);
      metrics << format_metrics_row(row) << "\n";
      metrics.flush();
    }
    st.epoch = ep + 1;
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%04d.ckpt", ep + 1);
    Checkpoint ckpt = state_to_checkpoint(st);
    save_checkpoint(ckpt_dir / name, ckpt);
    save_checkpoint(latest, ckpt);
  }
  return st;
}

}  // namespace mixmask
