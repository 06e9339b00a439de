#pragma once

// Contrastive objectives: InfoNCE against a momentum key queue, the
// lambda-weighted two-term mixture loss, and assembly of the total training
// objective. Loss scalars are computed and returned in double regardless of
// the embedding element type; gradients (with respect to the query
// embeddings) come back in the embedding type.

#include <cstdint>
#include <optional>
#include <vector>

#include "mixmask/mixer.hpp"

namespace mixmask {

enum class Role { query, key };

template <typename T>
struct EmbeddingBatchT {
  int dim = 0;
  Role role = Role::query;
  std::vector<T> vectors;  // N x dim, rows L2-normalized

  std::size_t size() const {
    return dim == 0 ? 0 : vectors.size() / static_cast<std::size_t>(dim);
  }
  T* row(std::size_t i) { return vectors.data() + i * static_cast<std::size_t>(dim); }
  const T* row(std::size_t i) const {
    return vectors.data() + i * static_cast<std::size_t>(dim);
  }
};
using EmbeddingBatch = EmbeddingBatchT<float>;

template <typename T>
struct KeyQueueT {
  int dim = 0;
  std::size_t capacity = 0;
  std::size_t cursor = 0;
  std::vector<T> entries;  // capacity x dim, rows unit-norm

  const T* row(std::size_t i) const {
    return entries.data() + i * static_cast<std::size_t>(dim);
  }
  // Unit-normalized random rows; the first capacity/N pushes overwrite them.
  static KeyQueueT random_init(int dim, std::size_t capacity, std::uint64_t seed);
};
using KeyQueue = KeyQueueT<float>;

// Replaces the oldest N entries at the ring cursor and advances it mod K.
// Requires N <= K and K % N == 0.
template <typename T>
void queue_push(KeyQueueT<T>& queue, const EmbeddingBatchT<T>& keys);

// Mean over the batch of -log( exp(q_i.k_pos_i/tau) / (exp(q_i.k_pos_i/tau)
// + sum_j exp(q_i.queue_j/tau)) ), max-subtracted. If dq is non-null it
// receives dloss/dq (N x dim).
template <typename T>
double info_nce(const EmbeddingBatchT<T>& q, const EmbeddingBatchT<T>& k_pos,
                const KeyQueueT<T>& queue, double tau, std::vector<T>* dq = nullptr);

template <typename T>
struct MixLossResult {
  double l_up = 0.0;    // positives in identity order (the kept images)
  double l_down = 0.0;  // positives indexed through the pairing
  double combined = 0.0;
  std::vector<T> dq;    // d(combined)/d(z_mix), filled when requested
};

// The two-term mixture loss: the same mixture encodings score against the
// keys of their kept images (weight lambda) and against the keys of their
// filling partners (weight 1 - lambda).
template <typename T>
MixLossResult<T> mixmask_loss(const EmbeddingBatchT<T>& z_mix,
                              const EmbeddingBatchT<T>& k, const Pairing& pairing,
                              const KeyQueueT<T>& queue, double tau, double lambda,
                              bool want_grad = false);

struct LossParts {
  std::optional<double> l_orig;
  std::optional<double> l_up;
  std::optional<double> l_down;
  std::optional<double> lambda_mask;
  std::optional<double> l_um;
  std::optional<double> l_um_flip;
  std::optional<double> lambda_unmix;
};

struct BranchFlags {
  bool mixmask = false;
  bool unmix = false;
};

struct LossBreakdown {
  double l_orig = 0.0;
  double l_up = 0.0;
  double l_down = 0.0;
  double l_um = 0.0;
  double l_um_flip = 0.0;
  double lambda_mask = 0.0;
  double lambda_unmix = 0.0;
  double total = 0.0;
};

// total = l_orig + lambda_mask*l_up + (1-lambda_mask)*l_down
//       + lambda_unmix*l_um + (1-lambda_unmix)*l_um_flip,
// with inactive branches contributing exactly 0. Throws if an active branch
// is missing one of its terms.
LossBreakdown total_loss(const LossParts& parts, BranchFlags branches);

}  // namespace mixmask
