#include "mixmask/objective.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "gemm.hpp"
#include "mixmask/rng.hpp"

namespace mixmask {

template <typename T>
KeyQueueT<T> KeyQueueT<T>::random_init(int dim, std::size_t capacity,
                                       std::uint64_t seed) {
  if (dim <= 0 || capacity == 0)
    throw std::invalid_argument("key queue: dim and capacity must be positive");
  KeyQueueT<T> q;
  q.dim = dim;
  q.capacity = capacity;
  q.entries.resize(capacity * static_cast<std::size_t>(dim));
  Rng rng(seed);
  for (std::size_t r = 0; r < capacity; ++r) {
    T* row = q.entries.data() + r * static_cast<std::size_t>(dim);
    double norm_sq = 0.0;
    for (int j = 0; j < dim; ++j) {
      double v = rng.normal();
      row[j] = static_cast<T>(v);
      norm_sq += v * v;
    }
    double inv = 1.0 / std::sqrt(norm_sq);
    for (int j = 0; j < dim; ++j) row[j] = static_cast<T>(row[j] * inv);
  }
  return q;
}

template <typename T>
void queue_push(KeyQueueT<T>& queue, const EmbeddingBatchT<T>& keys) {
  std::size_t n = keys.size();
  if (n == 0) throw std::invalid_argument("queue_push: empty key batch");
  if (keys.dim != queue.dim) throw std::invalid_argument("queue_push: dim mismatch");
  if (n > queue.capacity)
    throw std::invalid_argument("queue_push: batch larger than queue");
  if (queue.capacity % n != 0)
    throw std::invalid_argument("queue_push: batch size must divide queue capacity");
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t slot = (queue.cursor + i) % queue.capacity;
    std::copy_n(keys.row(i), queue.dim,
                queue.entries.data() + slot * static_cast<std::size_t>(queue.dim));
  }
  queue.cursor = (queue.cursor + n) % queue.capacity;
}

namespace {

template <typename T>
double dot_d(const T* a, const T* b, int d) {
  double s = 0.0;
  for (int j = 0; j < d; ++j) s += static_cast<double>(a[j]) * static_cast<double>(b[j]);
  return s;
}

// Shared core: positives are k rows indexed by `pos` (identity when null).
template <typename T>
double info_nce_indexed(const EmbeddingBatchT<T>& q, const EmbeddingBatchT<T>& k,
                        const int* pos, const KeyQueueT<T>& queue, double tau,
                        std::vector<T>* dq) {
  if (!(tau > 0.0)) throw std::invalid_argument("info_nce: tau must be positive");
  if (q.dim != k.dim || q.dim != queue.dim)
    throw std::invalid_argument("info_nce: embedding dim mismatch");
  std::size_t n = q.size();
  if (n == 0) throw std::invalid_argument("info_nce: empty query batch");
  if (pos == nullptr && k.size() != n)
    throw std::invalid_argument("info_nce: query/key batch size mismatch");
  if (queue.capacity == 0) throw std::invalid_argument("info_nce: empty queue");
  int d = q.dim;
  std::size_t kn = queue.capacity;

  // Negative logits in one GEMM: [N x K] = q . entries^T (then / tau later).
  std::vector<T> neg(n * kn);
  gemm<T>(false, true, static_cast<int>(n), static_cast<int>(kn), d, T(1),
          q.vectors.data(), queue.entries.data(), T(0), neg.data());

  std::vector<T> probs;
  std::vector<double> p_pos;
  if (dq) {
    probs.resize(n * kn);
    p_pos.resize(n);
    dq->assign(n * static_cast<std::size_t>(d), T(0));
  }

  double loss_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t ki = pos ? static_cast<std::size_t>(pos[i]) : i;
    if (ki >= k.size()) throw std::invalid_argument("info_nce: positive index out of range");
    double s_pos = dot_d(q.row(i), k.row(ki), d) / tau;
    const T* nrow = neg.data() + i * kn;
    double m = s_pos;
    for (std::size_t j = 0; j < kn; ++j)
      m = std::max(m, static_cast<double>(nrow[j]) / tau);
    double denom = std::exp(s_pos - m);
    for (std::size_t j = 0; j < kn; ++j)
      denom += std::exp(static_cast<double>(nrow[j]) / tau - m);
    loss_sum += m + std::log(denom) - s_pos;
    if (dq) {
      p_pos[i] = std::exp(s_pos - m) / denom;
      T* prow = probs.data() + i * kn;
      for (std::size_t j = 0; j < kn; ++j)
        prow[j] = static_cast<T>(std::exp(static_cast<double>(nrow[j]) / tau - m) / denom);
    }
  }
  double loss = loss_sum / static_cast<double>(n);

  if (dq) {
    // dL/dq_i = 1/(N tau) [ (p_pos - 1) k_pos_i + sum_j p_ij entries_j ]
    T scale = static_cast<T>(1.0 / (static_cast<double>(n) * tau));
    gemm<T>(false, false, static_cast<int>(n), d, static_cast<int>(kn), scale,
            probs.data(), queue.entries.data(), T(0), dq->data());
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t ki = pos ? static_cast<std::size_t>(pos[i]) : i;
      T w = static_cast<T>((p_pos[i] - 1.0) / (static_cast<double>(n) * tau));
      const T* krow = k.row(ki);
      T* grow = dq->data() + i * static_cast<std::size_t>(d);
      for (int j = 0; j < d; ++j) grow[j] += w * krow[j];
    }
  }
  return loss;
}

}  // namespace

template <typename T>
double info_nce(const EmbeddingBatchT<T>& q, const EmbeddingBatchT<T>& k_pos,
                const KeyQueueT<T>& queue, double tau, std::vector<T>* dq) {
  return info_nce_indexed(q, k_pos, nullptr, queue, tau, dq);
}

template <typename T>
MixLossResult<T> mixmask_loss(const EmbeddingBatchT<T>& z_mix,
                              const EmbeddingBatchT<T>& k, const Pairing& pairing,
                              const KeyQueueT<T>& queue, double tau, double lambda,
                              bool want_grad) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw std::invalid_argument("mixmask_loss: lambda must lie in [0, 1]");
  if (pairing.size() != z_mix.size())
    throw std::invalid_argument("mixmask_loss: pairing size mismatch");

  MixLossResult<T> out;
  std::vector<T> dq_up, dq_down;
  out.l_up = info_nce_indexed(z_mix, k, nullptr, queue, tau,
                              want_grad ? &dq_up : nullptr);
  out.l_down = info_nce_indexed(z_mix, k, pairing.perm.data(), queue, tau,
                                want_grad ? &dq_down : nullptr);
  out.combined = lambda * out.l_up + (1.0 - lambda) * out.l_down;
  if (want_grad) {
    out.dq.resize(dq_up.size());
    T lam = static_cast<T>(lambda);
    T ilam = static_cast<T>(1.0 - lambda);
    for (std::size_t i = 0; i < dq_up.size(); ++i)
      out.dq[i] = lam * dq_up[i] + ilam * dq_down[i];
  }
  return out;
}

LossBreakdown total_loss(const LossParts& parts, BranchFlags branches) {
  if (!parts.l_orig) throw std::invalid_argument("total_loss: l_orig is required");
  LossBreakdown out;
  out.l_orig = *parts.l_orig;
  out.total = out.l_orig;
  if (branches.mixmask) {
    if (!parts.l_up || !parts.l_down || !parts.lambda_mask)
      throw std::invalid_argument("total_loss: mixmask branch terms missing");
    out.l_up = *parts.l_up;
    out.l_down = *parts.l_down;
    out.lambda_mask = *parts.lambda_mask;
    out.total += out.lambda_mask * out.l_up + (1.0 - out.lambda_mask) * out.l_down;
  }
  if (branches.unmix) {
    if (!parts.l_um || !parts.l_um_flip || !parts.lambda_unmix)
      throw std::invalid_argument("total_loss: unmix branch terms missing");
    out.l_um = *parts.l_um;
    out.l_um_flip = *parts.l_um_flip;
    out.lambda_unmix = *parts.lambda_unmix;
    out.total += out.lambda_unmix * out.l_um + (1.0 - out.lambda_unmix) * out.l_um_flip;
  }
  return out;
}

template struct KeyQueueT<float>;
template struct KeyQueueT<double>;
template void queue_push<float>(KeyQueueT<float>&, const EmbeddingBatchT<float>&);
template void queue_push<double>(KeyQueueT<double>&, const EmbeddingBatchT<double>&);
template double info_nce<float>(const EmbeddingBatchT<float>&,
                                const EmbeddingBatchT<float>&,
                                const KeyQueueT<float>&, double, std::vector<float>*);
template double info_nce<double>(const EmbeddingBatchT<double>&,
                                 const EmbeddingBatchT<double>&,
                                 const KeyQueueT<double>&, double,
                                 std::vector<double>*);
template MixLossResult<float> mixmask_loss<float>(const EmbeddingBatchT<float>&,
                                                  const EmbeddingBatchT<float>&,
                                                  const Pairing&,
                                                  const KeyQueueT<float>&, double,
                                                  double, bool);
template MixLossResult<double> mixmask_loss<double>(const EmbeddingBatchT<double>&,
                                                    const EmbeddingBatchT<double>&,
                                                    const Pairing&,
                                                    const KeyQueueT<double>&, double,
                                                    double, bool);

}  // namespace mixmask
