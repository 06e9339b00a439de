#pragma once

// Pretraining orchestration: augmented view pairs through the online/momentum
// encoder pair, the optional masked-mixture branch, the optional global/local
// blend branch, queue maintenance, SGD with cosine schedule, and metrics.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mixmask/datastore.hpp"
#include "mixmask/nnet.hpp"

namespace mixmask {

struct AugmentParams {
  double crop_min_scale = 0.2;
  double crop_max_scale = 1.0;
  double flip_prob = 0.5;
  double jitter = 0.4;  // brightness/contrast factor range 1 +- jitter
};

struct TrainConfig {
  int epochs = 100;
  int batch_size = 128;
  std::uint64_t seed = 0;
  bool deterministic = false;  // also forced by MIXMASK_DETERMINISTIC=1
  int workers = 1;

  bool mixmask_enabled = true;
  int grid_n = 0;  // 0 = default for the input size (2/4/8 for 32/64/larger)
  std::string mask_pattern = "blocked";
  std::string ratio_policy = "fixed:0.5";  // fixed:R or uniform:LO,HI
  std::string fill_mode = "image";
  std::string pairing = "reverse";

  bool unmix_enabled = false;
  double unmix_global_prob = 0.5;
  std::string permutation_policy = "different";  // same | different

  double tau = 0.10;
  int queue_k = 4096;
  double momentum_m = 0.99;

  double lr = 0.06;
  double sgd_momentum = 0.9;
  double weight_decay = 5e-4;
  bool cosine = true;

  int embed_dim = 128;
  int head_hidden = 256;
  std::string widths = "32,64,128,256";

  DatasetConfig dataset;
  AugmentParams augment;

  void check(std::size_t dataset_size) const;
};

struct MetricsRow {
  std::uint64_t step = 0;
  int epoch = 0;
  LossBreakdown loss;
  double lr = 0.0;
  double ms_per_batch = 0.0;
  std::vector<int> mix_perm;  // pairing used by the mixture branch, if active
};

struct TrainerState {
  TrainConfig cfg;
  EncoderConfig arch;
  MomentumPair pair;
  EncoderParams velocity;  // SGD momentum buffers
  KeyQueue queue;
  std::uint64_t step = 0;
  int epoch = 0;
  std::uint64_t total_steps = 0;
};

// In-place, seeded: random resized crop (area scale in [min,max]), horizontal
// flip, brightness/contrast jitter, clamp to the valid normalized range. With
// scale fixed at 1, flip_prob 0 and jitter 0 the image is untouched.
void augment_view(float* img, int channels, int height, int width,
                  const Normalization& norm, const AugmentParams& params, Rng& rng);

EncoderConfig arch_from_config(const TrainConfig& cfg);
int default_grid(int image_size);

TrainerState init_trainer(const TrainConfig& cfg, const ImageBatch& dataset);

// One optimization step on an already-assembled batch. Throws on non-finite
// loss after dumping the step's diagnostics to stderr.
MetricsRow train_step(TrainerState& state, const ImageBatch& batch);

extern const char* const kMetricsHeader;
std::string format_metrics_row(const MetricsRow& row);

// Full run: writes resolved-config copy, metrics.csv, per-epoch checkpoints
// and checkpoints/latest.ckpt under out_dir; resumes from latest.ckpt if one
// is present. Returns the final state.
TrainerState run(const TrainConfig& cfg, const std::filesystem::path& out_dir);

// Shared with the eval path: restore encoder params from a checkpoint.
TrainerState state_from_checkpoint(const Checkpoint& ckpt, const TrainConfig& cfg);

// Rebuilds just the encoder weights stored under one prefix ("online/",
// "target/") of a training checkpoint.
std::pair<EncoderConfig, EncoderParams> encoder_from_checkpoint(
    const Checkpoint& ckpt, const std::string& prefix = "online/");

std::string resolved_config_text(const TrainConfig& cfg);
bool deterministic_mode_forced();

}  // namespace mixmask
