#pragma once

#include <cstddef>
#include <vector>

#include "mixmask/datastore.hpp"
#include "mixmask/nnet.hpp"

namespace mixmask {

struct FeatureBank {
  int dim = 0;
  std::vector<float> features;  // row-major [size][dim]
  std::vector<int> labels;

  std::size_t size() const { return dim == 0 ? 0 : features.size() / dim; }
  const float* row(std::size_t i) const { return features.data() + i * dim; }
};

// Encodes every image without augmentation. Labels are carried over verbatim.
FeatureBank build_bank(const EncoderConfig& arch, const EncoderParams& params,
                       const ImageBatch& data, std::size_t chunk = 256);

struct KnnConfig {
  int k = 20;
  double temperature = 0.1;
  int num_classes = 0;  // 0: use max bank label + 1
};

// Weighted k-nearest-neighbour vote under cosine similarity. Neighbours are
// ordered by (similarity desc, label asc, index asc); votes are weighted by
// exp(sim / temperature); vote ties resolve to the lower class id.
std::vector<int> knn_classify(const FeatureBank& bank, const float* queries,
                              std::size_t n, int dim, const KnnConfig& cfg);
std::vector<int> knn_classify(const FeatureBank& bank, const FeatureBank& queries,
                              const KnnConfig& cfg);

double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth);
std::vector<double> per_class_accuracy(const std::vector<int>& predicted,
                                       const std::vector<int>& truth,
                                       int num_classes);

}  // namespace mixmask
