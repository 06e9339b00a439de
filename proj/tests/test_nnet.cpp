#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "mixmask/nnet.hpp"
#include "mixmask/rng.hpp"

using namespace mixmask;
namespace fs = std::filesystem;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.image_size = 32;
  cfg.widths = {4, 4, 8, 8};
  cfg.head_hidden = 16;
  cfg.embed_dim = 8;
  return cfg;
}

template <typename T>
std::vector<T> random_images(const EncoderConfig& cfg, std::size_t n,
                             std::uint64_t seed) {
  std::vector<T> images(n * cfg.in_channels * cfg.image_size * cfg.image_size);
  Rng rng(seed);
  for (T& v : images) v = static_cast<T>(rng.normal());
  return images;
}

template <typename T>
bool rows_bitwise_equal(const T* a, const T* b, int dim) {
  return std::memcmp(a, b, sizeof(T) * static_cast<std::size_t>(dim)) == 0;
}

fs::path temp_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("mixmask_nnet_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

bool throws_with(const std::function<void()>& fn, const std::string& needle) {
  try {
    fn();
  } catch (const std::exception& e) {
    return std::string(e.what()).find(needle) != std::string::npos;
  }
  return false;
}

}  // namespace

TEST_CASE("config validation") {
  EncoderConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.check());

  EncoderConfig bad = cfg;
  bad.in_channels = 0;
  CHECK_THROWS_AS(bad.check(), std::invalid_argument);

  bad = cfg;
  bad.image_size = 20;  // not a multiple of 16
  CHECK_THROWS_AS(bad.check(), std::invalid_argument);

  bad = cfg;
  bad.image_size = 16;  // multiple of 16 but below the minimum
  CHECK_THROWS_AS(bad.check(), std::invalid_argument);

  bad = cfg;
  bad.widths[2] = 0;
  CHECK_THROWS_AS(bad.check(), std::invalid_argument);

  bad = cfg;
  bad.head_hidden = 0;
  CHECK_THROWS_AS(bad.check(), std::invalid_argument);

  bad = cfg;
  bad.embed_dim = -1;
  CHECK_THROWS_AS(bad.check(), std::invalid_argument);
}

TEST_CASE("description round trip") {
  EncoderConfig cfg = tiny_config();
  cfg.in_channels = 1;
  cfg.image_size = 48;
  EncoderConfig back = EncoderConfig::from_description(cfg.describe());
  CHECK(back == cfg);

  EncoderConfig defaults;
  CHECK(EncoderConfig::from_description(defaults.describe()) == defaults);

  CHECK_THROWS_AS(EncoderConfig::from_description("garbage"), std::runtime_error);
  CHECK_THROWS_AS(EncoderConfig::from_description(""), std::runtime_error);
}

TEST_CASE("init produces the expected tensor set") {
  EncoderConfig cfg = tiny_config();
  EncoderParams params = init_encoder_params<float>(cfg, 11);
  REQUIRE(params.size() == 20);

  const std::array<int, 5> ch = {cfg.in_channels, cfg.widths[0], cfg.widths[1],
                                 cfg.widths[2], cfg.widths[3]};
  for (int l = 0; l < 4; ++l) {
    std::string p = std::to_string(l + 1);
    const NamedTensor<float>* w = find_tensor(params, "conv" + p + ".weight");
    REQUIRE(w != nullptr);
    CHECK(w->shape == std::vector<int>{ch[l + 1], ch[l], 3, 3});
    CHECK(w->numel() == static_cast<std::size_t>(ch[l + 1]) * ch[l] * 9);

    const NamedTensor<float>* scale = find_tensor(params, "norm" + p + ".scale");
    REQUIRE(scale != nullptr);
    for (float v : scale->v) CHECK(v == 1.0f);

    const NamedTensor<float>* shift = find_tensor(params, "norm" + p + ".shift");
    REQUIRE(shift != nullptr);
    for (float v : shift->v) CHECK(v == 0.0f);

    const NamedTensor<float>* bias = find_tensor(params, "conv" + p + ".bias");
    REQUIRE(bias != nullptr);
    for (float v : bias->v) CHECK(v == 0.0f);
  }

  const NamedTensor<float>* fc1 = find_tensor(params, "head.fc1.weight");
  REQUIRE(fc1 != nullptr);
  CHECK(fc1->shape == std::vector<int>{cfg.head_hidden, ch[4]});
  const NamedTensor<float>* fc2 = find_tensor(params, "head.fc2.weight");
  REQUIRE(fc2 != nullptr);
  CHECK(fc2->shape == std::vector<int>{cfg.embed_dim, cfg.head_hidden});

  CHECK(find_tensor(params, "no.such.tensor") == nullptr);

  std::size_t expected = 0;
  for (const auto& t : params) expected += t.numel();
  CHECK(total_values(params) == expected);
}

TEST_CASE("init is deterministic in the seed and He-scaled") {
  EncoderConfig cfg = tiny_config();
  EncoderParams a = init_encoder_params<float>(cfg, 5);
  EncoderParams b = init_encoder_params<float>(cfg, 5);
  EncoderParams c = init_encoder_params<float>(cfg, 6);

  bool identical = true;
  bool differs = false;
  for (std::size_t t = 0; t < a.size(); ++t) {
    identical &= std::memcmp(a[t].v.data(), b[t].v.data(),
                             a[t].v.size() * sizeof(float)) == 0;
    differs |= std::memcmp(a[t].v.data(), c[t].v.data(),
                           a[t].v.size() * sizeof(float)) != 0;
  }
  CHECK(identical);
  CHECK(differs);

  // conv1 sees in_channels * 9 inputs; sample variance should sit near 2/fan_in.
  const NamedTensor<float>* w = find_tensor(a, "conv1.weight");
  double ss = 0.0;
  for (float v : w->v) ss += static_cast<double>(v) * v;
  double var = ss / static_cast<double>(w->numel());
  double want = 2.0 / (cfg.in_channels * 9);
  CHECK(var == doctest::Approx(want).epsilon(0.5));
}

TEST_CASE("zeros_like and cast_params preserve structure") {
  EncoderConfig cfg = tiny_config();
  EncoderParams params = init_encoder_params<float>(cfg, 3);
  EncoderParams z = zeros_like(params);
  REQUIRE(z.size() == params.size());
  for (std::size_t t = 0; t < z.size(); ++t) {
    CHECK(z[t].name == params[t].name);
    CHECK(z[t].shape == params[t].shape);
    for (float v : z[t].v) CHECK(v == 0.0f);
  }

  ParamTensors<double> wide = cast_params<double>(params);
  ParamTensors<float> narrow = cast_params<float>(wide);
  for (std::size_t t = 0; t < params.size(); ++t) {
    CHECK(narrow[t].name == params[t].name);
    REQUIRE(narrow[t].v.size() == params[t].v.size());
    CHECK(std::memcmp(narrow[t].v.data(), params[t].v.data(),
                      params[t].v.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("forward emits unit-norm embeddings deterministically") {
  EncoderConfig cfg = tiny_config();
  EncoderParams params = init_encoder_params<float>(cfg, 21);
  std::size_t n = 5;
  std::vector<float> images = random_images<float>(cfg, n, 77);

  EmbeddingBatch z = encoder_forward(cfg, params, images.data(), n, Role::query);
  REQUIRE(z.dim == cfg.embed_dim);
  REQUIRE(z.size() == n);
  CHECK(z.role == Role::query);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (int d = 0; d < z.dim; ++d) ss += static_cast<double>(z.row(i)[d]) * z.row(i)[d];
    CHECK(std::sqrt(ss) == doctest::Approx(1.0).epsilon(1e-5));
  }

  EmbeddingBatch again = encoder_forward(cfg, params, images.data(), n, Role::key);
  CHECK(again.role == Role::key);
  CHECK(std::memcmp(z.vectors.data(), again.vectors.data(),
                    z.vectors.size() * sizeof(float)) == 0);
}

// A sample's embedding must not depend on where it sits in the batch; the
// mixture-loss identity checks downstream compare encodings of permuted
// batches bitwise row by row.
TEST_CASE("forward is position independent within a batch") {
  EncoderConfig cfg = tiny_config();
  EncoderParams params = init_encoder_params<float>(cfg, 9);
  const std::size_t n = 4;
  const std::size_t pixels =
      static_cast<std::size_t>(cfg.in_channels) * cfg.image_size * cfg.image_size;
  std::vector<float> images = random_images<float>(cfg, n, 31);

  const std::vector<std::size_t> perm = {3, 0, 2, 1};
  std::vector<float> shuffled(images.size());
  for (std::size_t i = 0; i < n; ++i)
    std::memcpy(shuffled.data() + i * pixels, images.data() + perm[i] * pixels,
                pixels * sizeof(float));

  EmbeddingBatch z = encoder_forward(cfg, params, images.data(), n, Role::query);
  EmbeddingBatch zp =
      encoder_forward(cfg, params, shuffled.data(), n, Role::query);
  // Batch statistics are permutation invariant up to summation order, so rows
  // agree to roundoff rather than bitwise.
  for (std::size_t i = 0; i < n; ++i)
    for (int d = 0; d < z.dim; ++d)
      CHECK(std::abs(zp.row(i)[d] - z.row(perm[i])[d]) < 1e-5f);
}

TEST_CASE("forward rejects bad inputs") {
  EncoderConfig cfg = tiny_config();
  EncoderParams params = init_encoder_params<float>(cfg, 1);
  std::vector<float> images = random_images<float>(cfg, 1, 2);

  CHECK_THROWS_AS(encoder_forward(cfg, params, images.data(), 0, Role::query),
                  std::invalid_argument);

  EncoderParams truncated(params.begin(), params.end() - 1);
  CHECK_THROWS_AS(
      encoder_forward(cfg, truncated, images.data(), 1, Role::query),
      std::invalid_argument);

  EncoderConfig other = cfg;
  other.widths[0] = 6;
  CHECK_THROWS_AS(encoder_forward(other, params, images.data(), 1, Role::query),
                  std::invalid_argument);
}

TEST_CASE("degenerate pre-norm row maps to the first basis vector") {
  EncoderConfig cfg = tiny_config();
  // Zero parameters: every head output is exactly zero, so the norm floor
  // must kick in instead of dividing by ~0.
  EncoderParams params = init_encoder_params<float>(cfg, 4);
  for (auto& t : params) std::fill(t.v.begin(), t.v.end(), 0.0f);
  std::vector<float> images = random_images<float>(cfg, 2, 8);

  ForwardCache<float> cache;
  EmbeddingBatch z =
      encoder_forward(cfg, params, images.data(), 2, Role::query, &cache);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(z.row(i)[0] == 1.0f);
    for (int d = 1; d < z.dim; ++d) CHECK(z.row(i)[d] == 0.0f);
  }

  // And such rows receive zero parameter gradient.
  std::vector<float> d_emb(z.vectors.size(), 1.0f);
  EncoderParams grads = encoder_backward(cfg, params, cache, d_emb);
  for (const auto& t : grads)
    for (float g : t.v) CHECK(g == 0.0f);
}

// Central-difference oracle over every tensor in the parameter set, run on
// the double instantiation so roundoff stays far below the tolerance.
TEST_CASE("backward matches finite differences") {
  EncoderConfig cfg;
  cfg.image_size = 32;
  cfg.widths = {4, 4, 4, 4};
  cfg.head_hidden = 8;
  cfg.embed_dim = 4;

  ParamTensors<double> params = init_encoder_params<double>(cfg, 13);
  const std::size_t n = 2;
  std::vector<double> images = random_images<double>(cfg, n, 99);

  // Fixed linear functional of the embeddings keeps the loss smooth while
  // exercising the full normalize/head/conv chain.
  std::vector<double> coef(n * cfg.embed_dim);
  Rng crng(555);
  for (double& c : coef) c = crng.normal();
  auto loss_fn = [&](const EmbeddingBatchT<double>& z,
                     std::vector<double>& dz) -> double {
    double loss = 0.0;
    dz.assign(z.vectors.size(), 0.0);
    for (std::size_t i = 0; i < z.vectors.size(); ++i) {
      loss += coef[i] * z.vectors[i];
      dz[i] = coef[i];
    }
    return loss;
  };

  BackwardResult<double> res = backward<double>(cfg, params, images.data(), n, loss_fn);
  REQUIRE(res.grads.size() == params.size());

  auto loss_at = [&](const ParamTensors<double>& p) -> double {
    EmbeddingBatchT<double> z =
        encoder_forward(cfg, p, images.data(), n, Role::query);
    double loss = 0.0;
    for (std::size_t i = 0; i < z.vectors.size(); ++i)
      loss += coef[i] * z.vectors[i];
    return loss;
  };

  const double h = 1e-5;
  Rng pick(777);
  std::size_t checked = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (int rep = 0; rep < 3; ++rep) {
      std::size_t i = pick.below(params[t].v.size());
      ParamTensors<double> bumped = params;
      bumped[t].v[i] += h;
      double up = loss_at(bumped);
      bumped[t].v[i] = params[t].v[i] - h;
      double down = loss_at(bumped);
      double fd = (up - down) / (2.0 * h);
      double got = res.grads[t].v[i];
      // Conv biases are cancelled by the batch statistics, so their true
      // gradient is zero and the finite difference is pure roundoff; an
      // absolute guard below the difference-quotient noise covers them.
      double denom = std::max({std::abs(fd), std::abs(got), 1e-8});
      CHECK_MESSAGE(
          (std::abs(fd - got) < 1e-9 || std::abs(fd - got) / denom < 1e-5),
          params[t].name << "[" << i << "] fd=" << fd << " analytic=" << got);
      ++checked;
    }
  }
  CHECK(checked == 3 * params.size());
}

TEST_CASE("backward wrapper validates loss and gradient sizes") {
  EncoderConfig cfg = tiny_config();
  EncoderParams params = init_encoder_params<float>(cfg, 2);
  std::vector<float> images = random_images<float>(cfg, 1, 3);

  auto nan_loss = [](const EmbeddingBatch& z, std::vector<float>& dz) -> double {
    dz.assign(z.vectors.size(), 0.0f);
    return std::nan("");
  };
  CHECK(throws_with(
      [&] { backward<float>(cfg, params, images.data(), 1, nan_loss); },
      "non-finite"));

  ForwardCache<float> cache;
  encoder_forward(cfg, params, images.data(), 1, Role::query, &cache);
  std::vector<float> wrong(static_cast<std::size_t>(cfg.embed_dim) + 1, 0.0f);
  CHECK_THROWS_AS(encoder_backward(cfg, params, cache, wrong),
                  std::invalid_argument);
}

TEST_CASE("accumulate adds elementwise and validates shapes") {
  EncoderConfig cfg = tiny_config();
  EncoderParams a = init_encoder_params<float>(cfg, 1);
  EncoderParams b = init_encoder_params<float>(cfg, 2);
  EncoderParams sum = a;
  accumulate(sum, b);
  for (std::size_t t = 0; t < a.size(); ++t)
    for (std::size_t i = 0; i < a[t].v.size(); ++i)
      CHECK(sum[t].v[i] == a[t].v[i] + b[t].v[i]);

  EncoderParams fewer(a.begin(), a.end() - 1);
  CHECK_THROWS_AS(accumulate(fewer, b), std::invalid_argument);

  EncoderParams reshaped = b;
  reshaped[0].v.resize(reshaped[0].v.size() + 1);
  CHECK_THROWS_AS(accumulate(a, reshaped), std::invalid_argument);
}

TEST_CASE("momentum_update endpoints and interpolation") {
  EncoderConfig cfg = tiny_config();
  MomentumPair pair;
  pair.online = init_encoder_params<float>(cfg, 10);
  pair.target = init_encoder_params<float>(cfg, 20);
  EncoderParams before = pair.target;

  pair.m = 1.0;
  momentum_update(pair);
  for (std::size_t t = 0; t < pair.target.size(); ++t)
    CHECK(std::memcmp(pair.target[t].v.data(), before[t].v.data(),
                      before[t].v.size() * sizeof(float)) == 0);

  pair.m = 0.0;
  momentum_update(pair);
  for (std::size_t t = 0; t < pair.target.size(); ++t)
    CHECK(std::memcmp(pair.target[t].v.data(), pair.online[t].v.data(),
                      pair.online[t].v.size() * sizeof(float)) == 0);

  pair.target = before;
  pair.m = 0.99;
  momentum_update(pair);
  for (std::size_t t = 0; t < pair.target.size(); ++t) {
    for (std::size_t i = 0; i < pair.target[t].v.size(); ++i) {
      float old_v = before[t].v[i];
      float online_v = pair.online[t].v[i];
      float want = static_cast<float>(0.99 * static_cast<double>(old_v) +
                                      (1.0 - 0.99) * static_cast<double>(online_v));
      CHECK(pair.target[t].v[i] == want);
      CHECK(pair.target[t].v[i] >= std::min(old_v, online_v));
      CHECK(pair.target[t].v[i] <= std::max(old_v, online_v));
    }
  }

  pair.m = 1.5;
  CHECK_THROWS_AS(momentum_update(pair), std::invalid_argument);
}

TEST_CASE("checkpoint round trip is bit exact") {
  fs::path dir = temp_dir("roundtrip");
  EncoderConfig cfg = tiny_config();

  Checkpoint ckpt;
  ckpt.meta["arch"] = cfg.describe();
  ckpt.meta["seed"] = "42";
  ckpt.meta["step"] = "1234";
  ckpt.tensors = init_encoder_params<float>(cfg, 42);
  // Include awkward values that a text round trip would mangle.
  ckpt.tensors[0].v[0] = 1e-38f;
  ckpt.tensors[0].v[1] = -0.0f;
  ckpt.tensors[0].v[2] = 3.14159274f;

  fs::path file = dir / "model.ckpt";
  save_checkpoint(file, ckpt);
  Checkpoint back = load_checkpoint(file);

  CHECK(back.version == ckpt.version);
  CHECK(back.meta == ckpt.meta);
  REQUIRE(back.tensors.size() == ckpt.tensors.size());
  for (std::size_t t = 0; t < ckpt.tensors.size(); ++t) {
    CHECK(back.tensors[t].name == ckpt.tensors[t].name);
    CHECK(back.tensors[t].shape == ckpt.tensors[t].shape);
    REQUIRE(back.tensors[t].v.size() == ckpt.tensors[t].v.size());
    CHECK(std::memcmp(back.tensors[t].v.data(), ckpt.tensors[t].v.data(),
                      ckpt.tensors[t].v.size() * sizeof(float)) == 0);
  }

  // Saving the loaded copy reproduces the file byte for byte.
  fs::path file2 = dir / "model2.ckpt";
  save_checkpoint(file2, back);
  CHECK(slurp(file) == slurp(file2));

  // No stray temp files left behind.
  std::size_t entries = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    ++entries;
    CHECK(e.path().extension() != ".tmp");
  }
  CHECK(entries == 2);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint corruption is detected") {
  fs::path dir = temp_dir("corrupt");
  EncoderConfig cfg = tiny_config();
  Checkpoint ckpt;
  ckpt.meta["arch"] = cfg.describe();
  ckpt.tensors = init_encoder_params<float>(cfg, 7);
  fs::path file = dir / "model.ckpt";
  save_checkpoint(file, ckpt);

  std::string bytes = slurp(file);

  // Flip one bit in the middle of the data block.
  std::string flipped = bytes;
  flipped[flipped.size() - flipped.size() / 4] ^= 0x10;
  fs::path bad = dir / "flipped.ckpt";
  std::ofstream(bad, std::ios::binary).write(flipped.data(), flipped.size());
  CHECK(throws_with([&] { load_checkpoint(bad); }, "checksum"));

  // Drop the tail of the data block.
  std::string cut = bytes.substr(0, bytes.size() - 64);
  fs::path trunc = dir / "trunc.ckpt";
  std::ofstream(trunc, std::ios::binary).write(cut.data(), cut.size());
  CHECK_THROWS_AS(load_checkpoint(trunc), std::runtime_error);

  // Wrong magic line.
  std::string off = "model-file v1\n" + bytes;
  fs::path wrong = dir / "wrong.ckpt";
  std::ofstream(wrong, std::ios::binary).write(off.data(), off.size());
  CHECK(throws_with([&] { load_checkpoint(wrong); }, "not a checkpoint file"));

  // Future version.
  std::string vbump = bytes;
  std::size_t vpos = vbump.find(" v1\n");
  REQUIRE(vpos != std::string::npos);
  vbump.replace(vpos, 4, " v9\n");
  fs::path future = dir / "future.ckpt";
  std::ofstream(future, std::ios::binary).write(vbump.data(), vbump.size());
  CHECK(throws_with([&] { load_checkpoint(future); }, "version mismatch"));

  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), std::runtime_error);
  fs::remove_all(dir);
}
