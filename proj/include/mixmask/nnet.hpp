#pragma once

// The desk-scale encoder: four 3x3 stride-2 conv blocks (per-channel affine
// norm over spatial positions, SiLU), global average pooling, and a two-layer
// projection head onto the unit sphere. Float for training, double for the
// finite-difference gradient-check mode, selected by template parameter.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mixmask/objective.hpp"

namespace mixmask {

struct EncoderConfig {
  int in_channels = 3;
  int image_size = 32;  // square, divisible by 16 (four stride-2 stages)
  std::array<int, 4> widths = {32, 64, 128, 256};
  int head_hidden = 256;
  int embed_dim = 128;

  void check() const;  // throws std::invalid_argument on bad dims
  std::string describe() const;
  static EncoderConfig from_description(const std::string& text);
  bool operator==(const EncoderConfig&) const = default;
};

template <typename T>
struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<T> v;

  std::size_t numel() const { return v.size(); }
};

template <typename T>
using ParamTensors = std::vector<NamedTensor<T>>;

using EncoderParams = ParamTensors<float>;

template <typename T>
ParamTensors<T> init_encoder_params(const EncoderConfig& cfg, std::uint64_t seed);

template <typename T>
ParamTensors<T> zeros_like(const ParamTensors<T>& params);

template <typename To, typename From>
ParamTensors<To> cast_params(const ParamTensors<From>& params);

std::size_t total_values(const EncoderParams& params);

// Per-branch activation stash for the backward pass.
template <typename T>
struct ForwardCache {
  std::size_t n = 0;
  std::vector<T> input;
  std::array<std::vector<T>, 4> conv_out;    // pre-norm conv outputs
  std::array<std::vector<double>, 4> mu;     // per-channel batch norm stats
  std::array<std::vector<double>, 4> inv_std;
  std::array<std::vector<T>, 3> act;         // block outputs feeding the next conv
  std::vector<T> pooled;
  std::vector<T> fc1_out;                    // pre-activation
  std::vector<T> fc1_act;
  std::vector<T> pre_norm;                   // head output before L2 normalize
  std::vector<double> norms;
  std::vector<T> embeddings;
};

// images: n * in_channels * image_size^2, NCHW. Returns L2-normalized rows;
// a pre-norm row with norm < 1e-12 maps to the first canonical basis vector
// (and receives zero gradient).
template <typename T>
EmbeddingBatchT<T> encoder_forward(const EncoderConfig& cfg,
                                   const ParamTensors<T>& params, const T* images,
                                   std::size_t n, Role role,
                                   ForwardCache<T>* cache = nullptr);

template <typename T>
ParamTensors<T> encoder_backward(const EncoderConfig& cfg,
                                 const ParamTensors<T>& params,
                                 const ForwardCache<T>& cache,
                                 const std::vector<T>& d_embeddings);

// Convenience wrapper: forward with cache, evaluate loss_fn(embeddings,
// d_embeddings_out) -> loss, then backpropagate. Throws on non-finite loss.
template <typename T>
struct BackwardResult {
  double loss = 0.0;
  EmbeddingBatchT<T> embeddings;
  ParamTensors<T> grads;
};

template <typename T>
BackwardResult<T> backward(
    const EncoderConfig& cfg, const ParamTensors<T>& params, const T* images,
    std::size_t n,
    const std::function<double(const EmbeddingBatchT<T>&, std::vector<T>&)>& loss_fn);

void accumulate(EncoderParams& into, const EncoderParams& grads);

struct MomentumPair {
  EncoderParams online;
  EncoderParams target;
  double m = 0.99;
};

// target <- m * target + (1 - m) * online, elementwise, computed in double so
// each result stays within [min(old, online), max(old, online)].
void momentum_update(MomentumPair& pair);

struct Checkpoint {
  int version = 1;
  std::map<std::string, std::string> meta;  // arch, seed, step, ...
  ParamTensors<float> tensors;
};

// Plain-text manifest (name, shape, byte offset, CRC32 per tensor) followed
// by the concatenated little-endian float32 data.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

// Throws std::runtime_error on version mismatch or checksum failure.
Checkpoint load_checkpoint(const std::filesystem::path& path);

const NamedTensor<float>* find_tensor(const EncoderParams& params,
                                      const std::string& name);

}  // namespace mixmask
