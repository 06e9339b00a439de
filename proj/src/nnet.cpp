#include "mixmask/nnet.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "gemm.hpp"
#include "mixmask/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace mixmask {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kEmbedGuard = 1e-12;

struct Dims {
  int side[5];
  int ch[5];
};

Dims layer_dims(const EncoderConfig& cfg) {
  Dims d;
  d.side[0] = cfg.image_size;
  d.ch[0] = cfg.in_channels;
  for (int l = 0; l < 4; ++l) {
    d.side[l + 1] = d.side[l] / 2;
    d.ch[l + 1] = cfg.widths[l];
  }
  return d;
}

template <typename T>
inline T silu_val(T x) {
  T s = T(1) / (T(1) + std::exp(-x));
  return x * s;
}

template <typename T>
inline T silu_grad(T x) {
  T s = T(1) / (T(1) + std::exp(-x));
  return s * (T(1) + x * (T(1) - s));
}

// 3x3 stride-2 pad-1 convolution as one batched GEMM per layer.
// col layout: [ci*9][n*so*so], column index = sample * so*so + y*so + x.
template <typename T>
void im2col(const T* x, std::size_t n, int ci, int si, T* col) {
  int so = si / 2;
  std::size_t howo = static_cast<std::size_t>(so) * so;
  std::size_t m = n * howo;
#pragma omp parallel for schedule(static)
  for (std::int64_t nn = 0; nn < static_cast<std::int64_t>(n); ++nn) {
    for (int c = 0; c < ci; ++c) {
      const T* src = x + (static_cast<std::size_t>(nn) * ci + c) *
                             static_cast<std::size_t>(si) * si;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          int k = (c * 3 + ky) * 3 + kx;
          T* dst_base = col + static_cast<std::size_t>(k) * m +
                        static_cast<std::size_t>(nn) * howo;
          for (int y = 0; y < so; ++y) {
            int in_y = 2 * y + ky - 1;
            T* dst = dst_base + static_cast<std::size_t>(y) * so;
            if (in_y < 0 || in_y >= si) {
              std::fill_n(dst, so, T(0));
              continue;
            }
            const T* row = src + static_cast<std::size_t>(in_y) * si;
            for (int xo = 0; xo < so; ++xo) {
              int in_x = 2 * xo + kx - 1;
              dst[xo] = (in_x < 0) ? T(0) : row[in_x];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t n, int ci, int si, T* dx) {
  int so = si / 2;
  std::size_t howo = static_cast<std::size_t>(so) * so;
  std::size_t m = n * howo;
#pragma omp parallel for schedule(static)
  for (std::int64_t nn = 0; nn < static_cast<std::int64_t>(n); ++nn) {
    for (int c = 0; c < ci; ++c) {
      T* dst = dx + (static_cast<std::size_t>(nn) * ci + c) *
                        static_cast<std::size_t>(si) * si;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          int k = (c * 3 + ky) * 3 + kx;
          const T* src_base = col + static_cast<std::size_t>(k) * m +
                              static_cast<std::size_t>(nn) * howo;
          for (int y = 0; y < so; ++y) {
            int in_y = 2 * y + ky - 1;
            if (in_y < 0 || in_y >= si) continue;
            const T* src = src_base + static_cast<std::size_t>(y) * so;
            T* drow = dst + static_cast<std::size_t>(in_y) * si;
            for (int xo = 0; xo < so; ++xo) {
              int in_x = 2 * xo + kx - 1;
              if (in_x >= 0) drow[in_x] += src[xo];
            }
          }
        }
      }
    }
  }
}

// out[(nn*co + c) * howo + p] = mat[c * m + nn * howo + p] + bias[c]
template <typename T>
void scatter_bias(const T* mat, const T* bias, std::size_t n, int co,
                  std::size_t howo, T* out) {
#pragma omp parallel for schedule(static)
  for (std::int64_t nn = 0; nn < static_cast<std::int64_t>(n); ++nn) {
    for (int c = 0; c < co; ++c) {
      const T* src = mat + static_cast<std::size_t>(c) * (n * howo) +
                     static_cast<std::size_t>(nn) * howo;
      T* dst = out + (static_cast<std::size_t>(nn) * co + c) * howo;
      T b = bias[c];
      for (std::size_t p = 0; p < howo; ++p) dst[p] = src[p] + b;
    }
  }
}

template <typename T>
void gather(const T* y, std::size_t n, int co, std::size_t howo, T* mat) {
#pragma omp parallel for schedule(static)
  for (std::int64_t nn = 0; nn < static_cast<std::int64_t>(n); ++nn) {
    for (int c = 0; c < co; ++c) {
      const T* src = y + (static_cast<std::size_t>(nn) * co + c) * howo;
      T* dst = mat + static_cast<std::size_t>(c) * (n * howo) +
               static_cast<std::size_t>(nn) * howo;
      std::copy_n(src, howo, dst);
    }
  }
}

enum TensorIndex {
  kConvW = 0,  // + 4*l
  kConvB = 1,
  kNormScale = 2,
  kNormShift = 3,
  kFc1W = 16,
  kFc1B = 17,
  kFc2W = 18,
  kFc2B = 19,
  kTensorCount = 20
};

template <typename T>
void check_param_set(const EncoderConfig& cfg, const ParamTensors<T>& params,
                     const char* where) {
  auto fail = [&] {
    throw std::invalid_argument(std::string(where) + ": wrong parameter set");
  };
  if (params.size() != kTensorCount) fail();
  Dims d = layer_dims(cfg);
  auto expect = [&](int idx, std::size_t numel) {
    if (params[idx].numel() != numel) fail();
  };
  for (int l = 0; l < 4; ++l) {
    expect(kConvW + 4 * l, static_cast<std::size_t>(d.ch[l + 1]) * d.ch[l] * 9);
    expect(kConvB + 4 * l, static_cast<std::size_t>(d.ch[l + 1]));
    expect(kNormScale + 4 * l, static_cast<std::size_t>(d.ch[l + 1]));
    expect(kNormShift + 4 * l, static_cast<std::size_t>(d.ch[l + 1]));
  }
  expect(kFc1W, static_cast<std::size_t>(cfg.head_hidden) * d.ch[4]);
  expect(kFc1B, static_cast<std::size_t>(cfg.head_hidden));
  expect(kFc2W, static_cast<std::size_t>(cfg.embed_dim) * cfg.head_hidden);
  expect(kFc2B, static_cast<std::size_t>(cfg.embed_dim));
}

}  // namespace

void EncoderConfig::check() const {
  if (in_channels <= 0) throw std::invalid_argument("encoder: in_channels must be positive");
  if (image_size < 32 || image_size % 16 != 0)
    throw std::invalid_argument("encoder: image_size must be a multiple of 16, at least 32");
  for (int w : widths)
    if (w <= 0) throw std::invalid_argument("encoder: widths must be positive");
  if (head_hidden <= 0 || embed_dim <= 0)
    throw std::invalid_argument("encoder: head dims must be positive");
}

std::string EncoderConfig::describe() const {
  std::ostringstream os;
  os << "in" << in_channels << ":s" << image_size << ":w" << widths[0] << ","
     << widths[1] << "," << widths[2] << "," << widths[3] << ":h" << head_hidden
     << ":e" << embed_dim;
  return os.str();
}

EncoderConfig EncoderConfig::from_description(const std::string& text) {
  EncoderConfig cfg;
  int got = std::sscanf(text.c_str(), "in%d:s%d:w%d,%d,%d,%d:h%d:e%d",
                        &cfg.in_channels, &cfg.image_size, &cfg.widths[0],
                        &cfg.widths[1], &cfg.widths[2], &cfg.widths[3],
                        &cfg.head_hidden, &cfg.embed_dim);
  if (got != 8)
    throw std::runtime_error("unparseable architecture description: " + text);
  return cfg;
}

template <typename T>
ParamTensors<T> init_encoder_params(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.check();
  Dims d = layer_dims(cfg);
  ParamTensors<T> params;
  params.reserve(kTensorCount);

  auto add = [&](const std::string& name, std::vector<int> shape) -> NamedTensor<T>& {
    std::size_t numel = 1;
    for (int v : shape) numel *= static_cast<std::size_t>(v);
    params.push_back({name, std::move(shape), std::vector<T>(numel, T(0))});
    return params.back();
  };
  auto he_fill = [&](NamedTensor<T>& t, int fan_in, std::uint64_t stream) {
    Rng rng(derive_seed(seed, 0x9E7, stream));
    double std_dev = std::sqrt(2.0 / fan_in);
    for (T& v : t.v) v = static_cast<T>(rng.normal() * std_dev);
  };

  for (int l = 0; l < 4; ++l) {
    std::string p = "conv" + std::to_string(l + 1);
    auto& w = add(p + ".weight", {d.ch[l + 1], d.ch[l], 3, 3});
    he_fill(w, d.ch[l] * 9, static_cast<std::uint64_t>(l));
    add(p + ".bias", {d.ch[l + 1]});
    auto& scale = add("norm" + std::to_string(l + 1) + ".scale", {d.ch[l + 1]});
    std::fill(scale.v.begin(), scale.v.end(), T(1));
    add("norm" + std::to_string(l + 1) + ".shift", {d.ch[l + 1]});
  }
  auto& w1 = add("head.fc1.weight", {cfg.head_hidden, d.ch[4]});
  he_fill(w1, d.ch[4], 4);
  add("head.fc1.bias", {cfg.head_hidden});
  auto& w2 = add("head.fc2.weight", {cfg.embed_dim, cfg.head_hidden});
  he_fill(w2, cfg.head_hidden, 5);
  add("head.fc2.bias", {cfg.embed_dim});
  return params;
}

template <typename T>
ParamTensors<T> zeros_like(const ParamTensors<T>& params) {
  ParamTensors<T> out;
  out.reserve(params.size());
  for (const auto& t : params)
    out.push_back({t.name, t.shape, std::vector<T>(t.v.size(), T(0))});
  return out;
}

template <typename To, typename From>
ParamTensors<To> cast_params(const ParamTensors<From>& params) {
  ParamTensors<To> out;
  out.reserve(params.size());
  for (const auto& t : params) {
    NamedTensor<To> nt{t.name, t.shape, std::vector<To>(t.v.size())};
    for (std::size_t i = 0; i < t.v.size(); ++i) nt.v[i] = static_cast<To>(t.v[i]);
    out.push_back(std::move(nt));
  }
  return out;
}

std::size_t total_values(const EncoderParams& params) {
  std::size_t n = 0;
  for (const auto& t : params) n += t.v.size();
  return n;
}

const NamedTensor<float>* find_tensor(const EncoderParams& params,
                                      const std::string& name) {
  for (const auto& t : params)
    if (t.name == name) return &t;
  return nullptr;
}

namespace {

// Batch norm followed by SiLU: per-channel statistics over every sample and
// spatial position of the incoming batch, then the per-channel affine.
// Statistics always come from the live batch, so the encoder carries no
// running state. Each channel reduces serially in index order, keeping the
// result independent of the thread count.
template <typename T>
void norm_silu_forward(const T* z, std::size_t n, int co, std::size_t howo,
                       const T* scale, const T* shift, T* act, double* mu_out,
                       double* inv_out) {
  double cnt = static_cast<double>(n) * static_cast<double>(howo);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < co; ++c) {
    double mean = 0.0;
    for (std::size_t nn = 0; nn < n; ++nn) {
      const T* src = z + (nn * static_cast<std::size_t>(co) + c) * howo;
      for (std::size_t p = 0; p < howo; ++p) mean += static_cast<double>(src[p]);
    }
    mean /= cnt;
    double var = 0.0;
    for (std::size_t nn = 0; nn < n; ++nn) {
      const T* src = z + (nn * static_cast<std::size_t>(co) + c) * howo;
      for (std::size_t p = 0; p < howo; ++p) {
        double d = static_cast<double>(src[p]) - mean;
        var += d * d;
      }
    }
    var /= cnt;
    double inv = 1.0 / std::sqrt(var + kNormEps);
    T mu_t = static_cast<T>(mean);
    T inv_t = static_cast<T>(inv);
    T g = scale[c];
    T b = shift[c];
    for (std::size_t nn = 0; nn < n; ++nn) {
      const T* src = z + (nn * static_cast<std::size_t>(co) + c) * howo;
      T* dst = act + (nn * static_cast<std::size_t>(co) + c) * howo;
      for (std::size_t p = 0; p < howo; ++p)
        dst[p] = silu_val(g * ((src[p] - mu_t) * inv_t) + b);
    }
    if (mu_out) {
      mu_out[c] = mean;
      inv_out[c] = inv;
    }
  }
}

}  // namespace

template <typename T>
EmbeddingBatchT<T> encoder_forward(const EncoderConfig& cfg,
                                   const ParamTensors<T>& params, const T* images,
                                   std::size_t n, Role role,
                                   ForwardCache<T>* cache) {
  cfg.check();
  if (n == 0) throw std::invalid_argument("encoder_forward: empty batch");
  check_param_set(cfg, params, "encoder_forward");
  Dims d = layer_dims(cfg);

  if (cache) {
    cache->n = n;
    cache->input.assign(images,
                        images + n * static_cast<std::size_t>(d.ch[0]) *
                                     d.side[0] * d.side[0]);
  }

  std::vector<T> cur(images, images + n * static_cast<std::size_t>(d.ch[0]) *
                                          d.side[0] * d.side[0]);
  std::vector<T> col, mat, z, act;
  for (int l = 0; l < 4; ++l) {
    int si = d.side[l], so = d.side[l + 1];
    int ci = d.ch[l], co = d.ch[l + 1];
    std::size_t howo = static_cast<std::size_t>(so) * so;
    std::size_t m = n * howo;
    std::size_t kdim = static_cast<std::size_t>(ci) * 9;

    col.resize(kdim * m);
    im2col(cur.data(), n, ci, si, col.data());
    mat.resize(static_cast<std::size_t>(co) * m);
    gemm<T>(false, false, co, static_cast<int>(m), static_cast<int>(kdim), T(1),
            params[4 * l + kConvW].v.data(), col.data(), T(0), mat.data());
    z.resize(static_cast<std::size_t>(co) * m);
    scatter_bias(mat.data(), params[4 * l + kConvB].v.data(), n, co, howo, z.data());

    act.resize(z.size());
    double* mu_ptr = nullptr;
    double* inv_ptr = nullptr;
    if (cache) {
      cache->conv_out[l] = z;
      cache->mu[l].resize(co);
      cache->inv_std[l].resize(co);
      mu_ptr = cache->mu[l].data();
      inv_ptr = cache->inv_std[l].data();
    }
    norm_silu_forward(z.data(), n, co, howo, params[4 * l + kNormScale].v.data(),
                      params[4 * l + kNormShift].v.data(), act.data(), mu_ptr,
                      inv_ptr);
    if (cache && l < 3) cache->act[l] = act;
    cur.swap(act);
  }

  // Global average pool over the last block's spatial positions.
  int c4 = d.ch[4];
  std::size_t s4 = static_cast<std::size_t>(d.side[4]) * d.side[4];
  std::vector<T> pooled(n * static_cast<std::size_t>(c4));
  for (std::size_t nc = 0; nc < pooled.size(); ++nc) {
    const T* src = cur.data() + nc * s4;
    double sum = 0.0;
    for (std::size_t p = 0; p < s4; ++p) sum += static_cast<double>(src[p]);
    pooled[nc] = static_cast<T>(sum / static_cast<double>(s4));
  }

  int hid = cfg.head_hidden, ed = cfg.embed_dim;
  std::vector<T> h1(n * static_cast<std::size_t>(hid));
  gemm<T>(false, true, static_cast<int>(n), hid, c4, T(1), pooled.data(),
          params[kFc1W].v.data(), T(0), h1.data());
  const T* b1 = params[kFc1B].v.data();
  for (std::size_t i = 0; i < n; ++i)
    for (int j = 0; j < hid; ++j) h1[i * hid + j] += b1[j];
  std::vector<T> a1(h1.size());
  for (std::size_t i = 0; i < h1.size(); ++i) a1[i] = silu_val(h1[i]);

  std::vector<T> v(n * static_cast<std::size_t>(ed));
  gemm<T>(false, true, static_cast<int>(n), ed, hid, T(1), a1.data(),
          params[kFc2W].v.data(), T(0), v.data());
  const T* b2 = params[kFc2B].v.data();
  for (std::size_t i = 0; i < n; ++i)
    for (int j = 0; j < ed; ++j) v[i * ed + j] += b2[j];

  EmbeddingBatchT<T> emb;
  emb.dim = ed;
  emb.role = role;
  emb.vectors.resize(v.size());
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* src = v.data() + i * ed;
    T* dst = emb.vectors.data() + i * ed;
    double nsq = 0.0;
    for (int j = 0; j < ed; ++j)
      nsq += static_cast<double>(src[j]) * static_cast<double>(src[j]);
    double norm = std::sqrt(nsq);
    norms[i] = norm;
    if (norm < kEmbedGuard) {
      std::fill_n(dst, ed, T(0));
      dst[0] = T(1);
    } else {
      T inv = static_cast<T>(1.0 / norm);
      for (int j = 0; j < ed; ++j) dst[j] = src[j] * inv;
    }
  }

  if (cache) {
    cache->pooled = std::move(pooled);
    cache->fc1_out = std::move(h1);
    cache->fc1_act = std::move(a1);
    cache->pre_norm = std::move(v);
    cache->norms = std::move(norms);
    cache->embeddings = emb.vectors;
  }
  return emb;
}

template <typename T>
ParamTensors<T> encoder_backward(const EncoderConfig& cfg,
                                 const ParamTensors<T>& params,
                                 const ForwardCache<T>& cache,
                                 const std::vector<T>& d_embeddings) {
  cfg.check();
  check_param_set(cfg, params, "encoder_backward");
  std::size_t n = cache.n;
  Dims d = layer_dims(cfg);
  int c4 = d.ch[4], hid = cfg.head_hidden, ed = cfg.embed_dim;
  if (d_embeddings.size() != n * static_cast<std::size_t>(ed))
    throw std::invalid_argument("encoder_backward: gradient size mismatch");

  ParamTensors<T> grads = zeros_like(params);

  // L2-normalization backward; guarded rows get zero gradient.
  std::vector<T> dv(n * static_cast<std::size_t>(ed), T(0));
  for (std::size_t i = 0; i < n; ++i) {
    double norm = cache.norms[i];
    if (norm < kEmbedGuard) continue;
    const T* e = cache.embeddings.data() + i * ed;
    const T* g = d_embeddings.data() + i * ed;
    double edotg = 0.0;
    for (int j = 0; j < ed; ++j)
      edotg += static_cast<double>(e[j]) * static_cast<double>(g[j]);
    T inv = static_cast<T>(1.0 / norm);
    T proj = static_cast<T>(edotg);
    T* dst = dv.data() + i * ed;
    for (int j = 0; j < ed; ++j) dst[j] = (g[j] - e[j] * proj) * inv;
  }

  // Projection head.
  gemm<T>(true, false, ed, hid, static_cast<int>(n), T(1), dv.data(),
          cache.fc1_act.data(), T(0), grads[kFc2W].v.data());
  for (std::size_t i = 0; i < n; ++i)
    for (int j = 0; j < ed; ++j) grads[kFc2B].v[j] += dv[i * ed + j];
  std::vector<T> da1(n * static_cast<std::size_t>(hid));
  gemm<T>(false, false, static_cast<int>(n), hid, ed, T(1), dv.data(),
          params[kFc2W].v.data(), T(0), da1.data());
  for (std::size_t i = 0; i < da1.size(); ++i)
    da1[i] *= silu_grad(cache.fc1_out[i]);
  gemm<T>(true, false, hid, c4, static_cast<int>(n), T(1), da1.data(),
          cache.pooled.data(), T(0), grads[kFc1W].v.data());
  for (std::size_t i = 0; i < n; ++i)
    for (int j = 0; j < hid; ++j) grads[kFc1B].v[j] += da1[i * hid + j];
  std::vector<T> dpooled(n * static_cast<std::size_t>(c4));
  gemm<T>(false, false, static_cast<int>(n), c4, hid, T(1), da1.data(),
          params[kFc1W].v.data(), T(0), dpooled.data());

  // Broadcast the pool gradient back over spatial positions.
  std::size_t s4 = static_cast<std::size_t>(d.side[4]) * d.side[4];
  std::vector<T> da(n * static_cast<std::size_t>(c4) * s4);
  for (std::size_t nc = 0; nc < dpooled.size(); ++nc) {
    T g = dpooled[nc] / static_cast<T>(s4);
    std::fill_n(da.data() + nc * s4, s4, g);
  }

  std::vector<T> dz, dy_mat, col, dcol, dx;
  for (int l = 3; l >= 0; --l) {
    int si = d.side[l], so = d.side[l + 1];
    int ci = d.ch[l], co = d.ch[l + 1];
    std::size_t howo = static_cast<std::size_t>(so) * so;
    std::size_t m = n * howo;
    std::size_t kdim = static_cast<std::size_t>(ci) * 9;
    const T* x = l == 0 ? cache.input.data() : cache.act[l - 1].data();
    const T* z = cache.conv_out[l].data();
    const T* scale = params[4 * l + kNormScale].v.data();
    const T* shift = params[4 * l + kNormShift].v.data();
    T* dscale = grads[4 * l + kNormScale].v.data();
    T* dshift = grads[4 * l + kNormShift].v.data();

    // Norm + SiLU backward. Stats are per channel across the batch, so each
    // channel reduces over every sample serially in index order (thread-count
    // invariant); the first pass folds the affine grads, the second applies
    // the mean corrections from normalizing with batch statistics.
    dz.resize(static_cast<std::size_t>(co) * m);
    double cnt = static_cast<double>(m);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < co; ++c) {
      double mu = cache.mu[l][c];
      double inv = cache.inv_std[l][c];
      double g = static_cast<double>(scale[c]);
      double b = static_cast<double>(shift[c]);
      double ds = 0.0, dsh = 0.0;
      for (std::size_t nn = 0; nn < n; ++nn) {
        const T* zc = z + (nn * static_cast<std::size_t>(co) + c) * howo;
        const T* dac = da.data() + (nn * static_cast<std::size_t>(co) + c) * howo;
        for (std::size_t p = 0; p < howo; ++p) {
          double zhat = (static_cast<double>(zc[p]) - mu) * inv;
          double dh = static_cast<double>(dac[p]) * silu_grad(g * zhat + b);
          ds += dh * zhat;
          dsh += dh;
        }
      }
      dscale[c] = static_cast<T>(ds);
      dshift[c] = static_cast<T>(dsh);
      double m1 = g * dsh / cnt;
      double m2 = g * ds / cnt;
      for (std::size_t nn = 0; nn < n; ++nn) {
        const T* zc = z + (nn * static_cast<std::size_t>(co) + c) * howo;
        const T* dac = da.data() + (nn * static_cast<std::size_t>(co) + c) * howo;
        T* dzc = dz.data() + (nn * static_cast<std::size_t>(co) + c) * howo;
        for (std::size_t p = 0; p < howo; ++p) {
          double zhat = (static_cast<double>(zc[p]) - mu) * inv;
          double dh = static_cast<double>(dac[p]) * silu_grad(g * zhat + b);
          dzc[p] = static_cast<T>(inv * (g * dh - m1 - zhat * m2));
        }
      }
    }

    // Convolution backward.
    dy_mat.resize(static_cast<std::size_t>(co) * m);
    gather(dz.data(), n, co, howo, dy_mat.data());
    col.resize(kdim * m);
    im2col(x, n, ci, si, col.data());
    gemm<T>(false, true, co, static_cast<int>(kdim), static_cast<int>(m), T(1),
            dy_mat.data(), col.data(), T(0), grads[4 * l + kConvW].v.data());
    T* db = grads[4 * l + kConvB].v.data();
    for (int c = 0; c < co; ++c) {
      const T* row = dy_mat.data() + static_cast<std::size_t>(c) * m;
      double sum = 0.0;
      for (std::size_t p = 0; p < m; ++p) sum += static_cast<double>(row[p]);
      db[c] = static_cast<T>(sum);
    }
    if (l > 0) {
      dcol.resize(kdim * m);
      gemm<T>(true, false, static_cast<int>(kdim), static_cast<int>(m), co, T(1),
              params[4 * l + kConvW].v.data(), dy_mat.data(), T(0), dcol.data());
      dx.assign(n * static_cast<std::size_t>(ci) * si * si, T(0));
      col2im_add(dcol.data(), n, ci, si, dx.data());
      da.swap(dx);
    }
  }
  return grads;
}

template <typename T>
BackwardResult<T> backward(
    const EncoderConfig& cfg, const ParamTensors<T>& params, const T* images,
    std::size_t n,
    const std::function<double(const EmbeddingBatchT<T>&, std::vector<T>&)>& loss_fn) {
  ForwardCache<T> cache;
  BackwardResult<T> out;
  out.embeddings = encoder_forward(cfg, params, images, n, Role::query, &cache);
  std::vector<T> d_emb;
  out.loss = loss_fn(out.embeddings, d_emb);
  if (!std::isfinite(out.loss))
    throw std::runtime_error("backward: non-finite loss " + std::to_string(out.loss));
  out.grads = encoder_backward(cfg, params, cache, d_emb);
  return out;
}

void accumulate(EncoderParams& into, const EncoderParams& grads) {
  if (into.size() != grads.size())
    throw std::invalid_argument("accumulate: parameter set mismatch");
  for (std::size_t t = 0; t < into.size(); ++t) {
    if (into[t].v.size() != grads[t].v.size())
      throw std::invalid_argument("accumulate: tensor shape mismatch");
    for (std::size_t i = 0; i < into[t].v.size(); ++i)
      into[t].v[i] += grads[t].v[i];
  }
}

void momentum_update(MomentumPair& pair) {
  if (!(pair.m >= 0.0 && pair.m <= 1.0))
    throw std::invalid_argument("momentum_update: m must lie in [0, 1]");
  for (std::size_t t = 0; t < pair.target.size(); ++t) {
    const auto& src = pair.online[t].v;
    auto& dst = pair.target[t].v;
    for (std::size_t i = 0; i < dst.size(); ++i)
      dst[i] = static_cast<float>(pair.m * static_cast<double>(dst[i]) +
                                  (1.0 - pair.m) * static_cast<double>(src[i]));
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ostringstream head;
  head << "mixmask-checkpoint v" << ckpt.version << "\n";
  for (const auto& [k, v] : ckpt.meta) head << "meta " << k << " " << v << "\n";

  std::string blob;
  std::size_t offset = 0;
  std::ostringstream tensor_lines;
  for (const auto& t : ckpt.tensors) {
    std::size_t bytes = t.v.size() * sizeof(float);
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(t.v.data()),
                static_cast<uInt>(bytes));
    tensor_lines << "tensor " << t.name << " ";
    for (std::size_t i = 0; i < t.shape.size(); ++i)
      tensor_lines << (i ? "," : "") << t.shape[i];
    char crc_hex[16];
    std::snprintf(crc_hex, sizeof crc_hex, "%08lx", static_cast<unsigned long>(crc));
    tensor_lines << " " << offset << " " << crc_hex << "\n";
    blob.append(reinterpret_cast<const char*>(t.v.data()), bytes);
    offset += bytes;
  }
  head << tensor_lines.str();
  head << "data " << blob.size() << "\n";

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
    out << head.str();
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw std::runtime_error("checkpoint write failed: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());

  Checkpoint ckpt;
  std::string line;
  if (!std::getline(in, line) || line.rfind("mixmask-checkpoint v", 0) != 0)
    throw std::runtime_error("not a checkpoint file: " + path.string());
  int version = std::atoi(line.c_str() + 20);
  if (version != 1)
    throw std::runtime_error("checkpoint version mismatch (got " +
                             std::to_string(version) + ", want 1)");
  ckpt.version = version;

  struct Entry {
    std::string name;
    std::vector<int> shape;
    std::size_t offset;
    unsigned long crc;
  };
  std::vector<Entry> entries;
  std::size_t data_bytes = 0;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      ckpt.meta[key] = value;
    } else if (tag == "tensor") {
      Entry e;
      std::string shape_text, crc_text;
      ls >> e.name >> shape_text >> e.offset >> crc_text;
      if (!ls) throw std::runtime_error("malformed tensor line in " + path.string());
      std::istringstream ss(shape_text);
      std::string dim;
      while (std::getline(ss, dim, ',')) e.shape.push_back(std::atoi(dim.c_str()));
      e.crc = std::stoul(crc_text, nullptr, 16);
      entries.push_back(std::move(e));
    } else if (tag == "data") {
      ls >> data_bytes;
      break;
    } else {
      throw std::runtime_error("malformed checkpoint line: " + line);
    }
  }

  std::string blob(data_bytes, '\0');
  in.read(blob.data(), static_cast<std::streamsize>(data_bytes));
  if (static_cast<std::size_t>(in.gcount()) != data_bytes)
    throw std::runtime_error("truncated checkpoint data: " + path.string());

  for (const Entry& e : entries) {
    std::size_t numel = 1;
    for (int s : e.shape) numel *= static_cast<std::size_t>(s);
    std::size_t bytes = numel * sizeof(float);
    if (e.offset + bytes > data_bytes)
      throw std::runtime_error("tensor extends past data block: " + e.name);
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(blob.data() + e.offset),
                static_cast<uInt>(bytes));
    if (crc != e.crc)
      throw std::runtime_error("corrupt checkpoint (checksum mismatch on " +
                               e.name + "): " + path.string());
    NamedTensor<float> t;
    t.name = e.name;
    t.shape = e.shape;
    t.v.resize(numel);
    std::memcpy(t.v.data(), blob.data() + e.offset, bytes);
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

template ParamTensors<float> init_encoder_params<float>(const EncoderConfig&,
                                                        std::uint64_t);
template ParamTensors<double> init_encoder_params<double>(const EncoderConfig&,
                                                          std::uint64_t);
template ParamTensors<float> zeros_like<float>(const ParamTensors<float>&);
template ParamTensors<double> zeros_like<double>(const ParamTensors<double>&);
template ParamTensors<double> cast_params<double, float>(const ParamTensors<float>&);
template ParamTensors<float> cast_params<float, double>(const ParamTensors<double>&);
template EmbeddingBatchT<float> encoder_forward<float>(const EncoderConfig&,
                                                       const ParamTensors<float>&,
                                                       const float*, std::size_t,
                                                       Role, ForwardCache<float>*);
template EmbeddingBatchT<double> encoder_forward<double>(
    const EncoderConfig&, const ParamTensors<double>&, const double*, std::size_t,
    Role, ForwardCache<double>*);
template ParamTensors<float> encoder_backward<float>(const EncoderConfig&,
                                                     const ParamTensors<float>&,
                                                     const ForwardCache<float>&,
                                                     const std::vector<float>&);
template ParamTensors<double> encoder_backward<double>(const EncoderConfig&,
                                                       const ParamTensors<double>&,
                                                       const ForwardCache<double>&,
                                                       const std::vector<double>&);
template BackwardResult<float> backward<float>(
    const EncoderConfig&, const ParamTensors<float>&, const float*, std::size_t,
    const std::function<double(const EmbeddingBatchT<float>&, std::vector<float>&)>&);
template BackwardResult<double> backward<double>(
    const EncoderConfig&, const ParamTensors<double>&, const double*, std::size_t,
    const std::function<double(const EmbeddingBatchT<double>&, std::vector<double>&)>&);

}  // namespace mixmask
