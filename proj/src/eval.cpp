#include "mixmask/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "gemm.hpp"

namespace mixmask {

FeatureBank build_bank(const EncoderConfig& arch, const EncoderParams& params,
                       const ImageBatch& data, std::size_t chunk) {
  if (data.size() == 0) throw std::invalid_argument("build_bank: empty dataset");
  if (data.labels.size() != data.size())
    throw std::invalid_argument("build_bank: dataset has no labels");
  if (chunk == 0) chunk = 1;

  FeatureBank bank;
  bank.dim = arch.embed_dim;
  bank.features.resize(data.size() * static_cast<std::size_t>(arch.embed_dim));
  bank.labels = data.labels;

  for (std::size_t at = 0; at < data.size(); at += chunk) {
    std::size_t n = std::min(chunk, data.size() - at);
    EmbeddingBatch emb = encoder_forward<float>(
        arch, params, data.data.data() + at * data.pixels_per_image(), n, Role::key);
    std::copy(emb.vectors.begin(), emb.vectors.end(),
              bank.features.begin() + at * static_cast<std::size_t>(arch.embed_dim));
  }
  return bank;
}

namespace {

std::vector<float> unit_rows(const float* rows, std::size_t n, int dim) {
  std::vector<float> out(n * static_cast<std::size_t>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    const float* src = rows + i * dim;
    float* dst = out.data() + i * dim;
    double ss = 0.0;
    for (int d = 0; d < dim; ++d) ss += static_cast<double>(src[d]) * src[d];
    double norm = std::sqrt(ss);
    if (norm < 1e-12) {
      std::fill(dst, dst + dim, 0.0f);
    } else {
      for (int d = 0; d < dim; ++d)
        dst[d] = static_cast<float>(src[d] / norm);
    }
  }
  return out;
}

}  // namespace

std::vector<int> knn_classify(const FeatureBank& bank, const float* queries,
                              std::size_t n, int dim, const KnnConfig& cfg) {
  if (bank.size() == 0) throw std::invalid_argument("knn_classify: empty bank");
  if (dim != bank.dim) throw std::invalid_argument("knn_classify: dimension mismatch");
  if (cfg.k < 1) throw std::invalid_argument("knn_classify: k must be >= 1");
  if (!(cfg.temperature > 0.0))
    throw std::invalid_argument("knn_classify: temperature must be positive");

  int num_classes = cfg.num_classes;
  if (num_classes == 0) {
    for (int lbl : bank.labels) num_classes = std::max(num_classes, lbl + 1);
  }
  if (num_classes < 1) throw std::invalid_argument("knn_classify: no classes in bank");

  std::size_t bank_n = bank.size();
  std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(cfg.k), bank_n);

  std::vector<float> qn = unit_rows(queries, n, dim);
  std::vector<float> bn = unit_rows(bank.features.data(), bank_n, dim);
  std::vector<float> sims(n * bank_n);
  gemm<float>(false, true, static_cast<int>(n), static_cast<int>(bank_n), dim,
              1.0f, qn.data(), bn.data(), 0.0f, sims.data());

  std::vector<int> pred(n);
  std::vector<std::size_t> idx(bank_n);
  std::vector<double> votes(num_classes);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = sims.data() + i * bank_n;
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto better = [&](std::size_t a, std::size_t b) {
      if (row[a] != row[b]) return row[a] > row[b];
      if (bank.labels[a] != bank.labels[b]) return bank.labels[a] < bank.labels[b];
      return a < b;
    };
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), better);

    std::fill(votes.begin(), votes.end(), 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      std::size_t b = idx[j];
      int lbl = bank.labels[b];
      if (lbl < 0 || lbl >= num_classes)
        throw std::invalid_argument("knn_classify: bank label out of range");
      votes[lbl] += std::exp(static_cast<double>(row[b]) / cfg.temperature);
    }
    int best = 0;
    for (int c = 1; c < num_classes; ++c)
      if (votes[c] > votes[best]) best = c;
    pred[i] = best;
  }
  return pred;
}

std::vector<int> knn_classify(const FeatureBank& bank, const FeatureBank& queries,
                              const KnnConfig& cfg) {
  return knn_classify(bank, queries.features.data(), queries.size(), queries.dim,
                      cfg);
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size() || predicted.empty())
    throw std::invalid_argument("accuracy: size mismatch or empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i)
    if (predicted[i] == truth[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

std::vector<double> per_class_accuracy(const std::vector<int>& predicted,
                                       const std::vector<int>& truth,
                                       int num_classes) {
  if (predicted.size() != truth.size())
    throw std::invalid_argument("per_class_accuracy: size mismatch");
  std::vector<double> hits(num_classes, 0.0), totals(num_classes, 0.0);
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    int t = truth[i];
    if (t < 0 || t >= num_classes)
      throw std::invalid_argument("per_class_accuracy: label out of range");
    totals[t] += 1.0;
    if (predicted[i] == t) hits[t] += 1.0;
  }
  std::vector<double> out(num_classes, 0.0);
  for (int c = 0; c < num_classes; ++c)
    out[c] = totals[c] > 0.0 ? hits[c] / totals[c] : 0.0;
  return out;
}

}  // namespace mixmask
