#include "mixmask/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "mixmask/datastore.hpp"
#include "mixmask/eval.hpp"
#include "mixmask/maskgen.hpp"
#include "mixmask/mixer.hpp"
#include "mixmask/nnet.hpp"
#include "mixmask/rng.hpp"
#include "mixmask/trainer.hpp"

namespace mixmask {

namespace {

const std::vector<std::string> kTopCommands = {"mask", "mix", "train", "eval",
                                               "bench"};

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::string nearest_command(const std::string& word) {
  std::string best = kTopCommands.front();
  std::size_t best_d = edit_distance(word, best);
  for (const auto& cand : kTopCommands) {
    std::size_t d = edit_distance(word, cand);
    if (d < best_d) {
      best_d = d;
      best = cand;
    }
  }
  return best;
}

void add_dataset_flags(CLI::App* cmd, DatasetConfig& ds, const std::string& prefix) {
  auto flag = [&](const std::string& name) { return "--" + prefix + name; };
  cmd->add_option(flag("data-kind"), ds.kind,
                  "dataset kind: gaussian-clusters, striped-classes, cifar10, "
                  "cifar100-fine, cifar100-coarse");
  cmd->add_option(flag("data-path"), ds.path,
                  "comma-separated binary files for cifar kinds");
  cmd->add_option(flag("classes"), ds.classes, "synthetic class count");
  cmd->add_option(flag("per-class"), ds.per_class, "synthetic images per class");
  cmd->add_option(flag("image-size"), ds.image_size, "synthetic image side");
  cmd->add_option(flag("data-seed"), ds.seed, "synthetic generator seed");
  cmd->add_option(flag("noise"), ds.noise, "synthetic noise scale");
}

void print_kv(std::ostream& os, const std::string& key, const std::string& value) {
  os << key << " = " << value << "\n";
}

struct MaskGenArgs {
  int grid = 8;
  double ratio = 0.5;
  std::string pattern = "blocked";
  std::uint64_t seed = 0;
  std::string out;
};

void run_mask_gen(const MaskGenArgs& a) {
  GridMask gm = parse_mask_pattern(a.pattern) == MaskPattern::blocked
                    ? gen_blocked_mask(a.grid, a.ratio, a.seed)
                    : gen_discrete_mask(a.grid, a.ratio, a.seed);
  double lambda = lambda_of(gm);
  std::ostringstream cfg;
  print_kv(cfg, "command", "mask gen");
  print_kv(cfg, "grid", std::to_string(a.grid));
  print_kv(cfg, "ratio", std::to_string(a.ratio));
  print_kv(cfg, "pattern", a.pattern);
  print_kv(cfg, "seed", std::to_string(a.seed));
  print_kv(cfg, "out", a.out);
  std::cout << cfg.str();

  int side = a.grid * 8;  // pixel preview; 8 px per cell keeps tiny grids readable
  PixelMask pm = expand_to_pixels(gm, side, side);
  std::filesystem::path out(a.out);
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  write_png(pm, out);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g\n", lambda);
  std::ofstream sidecar(a.out + ".lambda", std::ios::trunc);
  sidecar << buf;
  std::cout << "lambda = " << buf;
}

struct MixPreviewArgs {
  DatasetConfig dataset;
  int grid = 0;
  double ratio = 0.5;
  std::string pattern = "blocked";
  std::string fill = "image";
  std::string pairing = "reverse";
  std::uint64_t seed = 0;
  int count = 4;
  std::string out;
};

void run_mix_preview(const MixPreviewArgs& a) {
  if (a.count < 2) throw std::invalid_argument("mix preview: --count must be >= 2");
  ImageBatch data = load_dataset(a.dataset);
  if (data.size() < static_cast<std::size_t>(a.count))
    throw std::invalid_argument("mix preview: dataset smaller than --count");

  ImageBatch batch;
  batch.channels = data.channels;
  batch.height = data.height;
  batch.width = data.width;
  batch.norm = data.norm;
  batch.data.assign(data.data.begin(),
                    data.data.begin() + static_cast<std::size_t>(a.count) *
                                            data.pixels_per_image());

  int grid = a.grid > 0 ? a.grid : default_grid(data.height);
  GridMask gm = parse_mask_pattern(a.pattern) == MaskPattern::blocked
                    ? gen_blocked_mask(grid, a.ratio, derive_seed(a.seed, 1))
                    : gen_discrete_mask(grid, a.ratio, derive_seed(a.seed, 1));
  PixelMask pm = expand_to_pixels(gm, data.height, data.width);
  Pairing pairing = make_pairing(parse_pairing_kind(a.pairing),
                                 static_cast<std::size_t>(a.count),
                                 derive_seed(a.seed, 2));
  MixOutput mixed = mix_batch(batch, pm, pairing, parse_fill_mode(a.fill),
                              derive_seed(a.seed, 3));
  ImageBatch switched = switch_batch(batch, pm, pairing);

  std::ostringstream cfg;
  print_kv(cfg, "command", "mix preview");
  print_kv(cfg, "grid", std::to_string(grid));
  print_kv(cfg, "ratio", std::to_string(a.ratio));
  print_kv(cfg, "pattern", a.pattern);
  print_kv(cfg, "fill", a.fill);
  print_kv(cfg, "pairing", a.pairing);
  print_kv(cfg, "seed", std::to_string(a.seed));
  print_kv(cfg, "count", std::to_string(a.count));
  print_kv(cfg, "lambda", std::to_string(mixed.lambda));
  print_kv(cfg, "out", a.out);
  std::cout << cfg.str();

  std::filesystem::path dir(a.out);
  std::filesystem::create_directories(dir);
  write_png(pm, dir / "mask.png");
  {
    std::ofstream sidecar(dir / "mask.png.lambda", std::ios::trunc);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g\n", mixed.lambda);
    sidecar << buf;
  }
  for (int i = 0; i < a.count; ++i) {
    char name[48];
    std::snprintf(name, sizeof name, "orig_%02d.png", i);
    write_png(batch, i, dir / name);
    std::snprintf(name, sizeof name, "mixed_%02d.png", i);
    write_png(mixed.mixed, i, dir / name);
    std::snprintf(name, sizeof name, "switch_%02d.png", i);
    write_png(switched, i, dir / name);
  }
}

struct EvalArgs {
  std::string checkpoint;
  std::string weights = "online";
  std::string out;
  DatasetConfig bank;
  DatasetConfig query;
  bool query_touched = false;
  int k = 20;
  double temperature = 0.1;
};

void run_eval_knn(const EvalArgs& a_in) {
  EvalArgs a = a_in;
  if (!a.query_touched) {
    a.query = a.bank;
    a.query.seed = a.bank.seed + 1;
    a.query.per_class = std::max(1, a.bank.per_class / 5);
  }
  Checkpoint ckpt = load_checkpoint(a.checkpoint);
  auto [arch, params] = encoder_from_checkpoint(ckpt, a.weights + "/");

  ImageBatch bank_data = load_dataset(a.bank);
  ImageBatch query_data = load_dataset(a.query);
  FeatureBank bank = build_bank(arch, params, bank_data);
  FeatureBank queries = build_bank(arch, params, query_data);

  KnnConfig kc;
  kc.k = a.k;
  kc.temperature = a.temperature;
  std::vector<int> pred = knn_classify(bank, queries, kc);
  double acc = accuracy(pred, query_data.labels);

  std::ostringstream cfg;
  print_kv(cfg, "command", "eval knn");
  print_kv(cfg, "checkpoint", a.checkpoint);
  print_kv(cfg, "weights", a.weights);
  print_kv(cfg, "k", std::to_string(a.k));
  print_kv(cfg, "temperature", std::to_string(a.temperature));
  print_kv(cfg, "bank_size", std::to_string(bank.size()));
  print_kv(cfg, "query_size", std::to_string(queries.size()));
  std::cout << cfg.str();

  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", acc);
  std::cout << "accuracy = " << buf << "\n";

  if (!a.out.empty()) {
    std::filesystem::path dir(a.out);
    std::filesystem::create_directories(dir);
    std::ofstream csv(dir / "predictions.csv", std::ios::trunc);
    csv << "index,predicted,truth\n";
    for (std::size_t i = 0; i < pred.size(); ++i)
      csv << i << "," << pred[i] << "," << query_data.labels[i] << "\n";
    std::ofstream acc_file(dir / "accuracy.txt", std::ios::trunc);
    acc_file << buf << "\n";
  }
}

struct BenchArgs {
  int batch = 128;
  int image_size = 32;
  int grid = 0;
  std::string pattern = "blocked";
  std::string fill = "image";
  long long iterations = 100;
  int workers = 2;
  std::uint64_t seed = 0;
  std::string out;
};

struct BenchRow {
  int workers = 1;
  double seconds = 0.0;
  double images_per_sec = 0.0;
  double ns_per_pixel = 0.0;
};

BenchRow run_bench_pass(const BenchArgs& a, const ImageBatch& batch, int workers) {
  int grid = a.grid > 0 ? a.grid : default_grid(a.image_size);
  MaskPattern pattern = parse_mask_pattern(a.pattern);
  FillMode fill = parse_fill_mode(a.fill);
  Pairing pairing = make_pairing(PairingKind::reverse, batch.size(), 0);

  std::vector<double> sink(static_cast<std::size_t>(std::max(1, workers)), 0.0);
  auto t0 = std::chrono::steady_clock::now();
#pragma omp parallel for schedule(static) num_threads(workers)
  for (long long it = 0; it < a.iterations; ++it) {
    GridMask gm = pattern == MaskPattern::blocked
                      ? gen_blocked_mask(grid, 0.5, derive_seed(a.seed, 11, it))
                      : gen_discrete_mask(grid, 0.5, derive_seed(a.seed, 11, it));
    PixelMask pm = expand_to_pixels(gm, a.image_size, a.image_size);
    MixOutput out = mix_batch(batch, pm, pairing, fill, derive_seed(a.seed, 12, it));
    int slot = 0;
#ifdef _OPENMP
    slot = omp_get_thread_num() % static_cast<int>(sink.size());
#endif
    sink[static_cast<std::size_t>(slot)] += out.mixed.data[0] + out.lambda;
  }
  auto dt = std::chrono::steady_clock::now() - t0;

  BenchRow row;
  row.workers = workers;
  row.seconds = std::chrono::duration<double>(dt).count();
  double images = static_cast<double>(a.iterations) * batch.size();
  double pixels = images * batch.channels * batch.height * batch.width;
  if (row.seconds > 0.0) {
    row.images_per_sec = images / row.seconds;
    row.ns_per_pixel = row.seconds * 1e9 / pixels;
  }
  if (std::accumulate(sink.begin(), sink.end(), 0.0) == 12345.6789)
    std::cout << "";  // keep the mixing work observable
  return row;
}

void run_bench_mix(const BenchArgs& a) {
  if (a.batch < 2) throw std::invalid_argument("bench mix: --batch must be >= 2");
  if (a.iterations < 0)
    throw std::invalid_argument("bench mix: --iterations must be >= 0");
  if (a.workers < 1) throw std::invalid_argument("bench mix: --workers must be >= 1");

  std::ostringstream cfg;
  print_kv(cfg, "command", "bench mix");
  print_kv(cfg, "batch", std::to_string(a.batch));
  print_kv(cfg, "image_size", std::to_string(a.image_size));
  print_kv(cfg, "grid", std::to_string(a.grid > 0 ? a.grid : default_grid(a.image_size)));
  print_kv(cfg, "pattern", a.pattern);
  print_kv(cfg, "fill", a.fill);
  print_kv(cfg, "iterations", std::to_string(a.iterations));
  print_kv(cfg, "workers", std::to_string(a.workers));
  print_kv(cfg, "seed", std::to_string(a.seed));
  std::cout << cfg.str();

  const char* header =
      "workers,iterations,batch,image_size,grid,pattern,fill,images_per_sec,"
      "ns_per_pixel,total_pixels";
  std::vector<BenchRow> rows;
  if (a.iterations > 0) {
    ImageBatch batch;
    batch.channels = 3;
    batch.height = a.image_size;
    batch.width = a.image_size;
    batch.norm = Normalization{};
    batch.data.resize(static_cast<std::size_t>(a.batch) * 3 * a.image_size *
                      a.image_size);
    Rng rng(derive_seed(a.seed, 10));
    for (auto& v : batch.data) v = static_cast<float>(rng.uniform());

    rows.push_back(run_bench_pass(a, batch, 1));
    if (a.workers > 1) rows.push_back(run_bench_pass(a, batch, a.workers));
  }

  auto emit = [&](std::ostream& os) {
    os << header << "\n";
    for (const auto& r : rows) {
      double pixels = static_cast<double>(a.iterations) * a.batch * 3 *
                      a.image_size * a.image_size;
      char line[256];
      std::snprintf(line, sizeof line, "%d,%lld,%d,%d,%d,%s,%s,%.1f,%.3f,%.0f",
                    r.workers, a.iterations, a.batch, a.image_size,
                    a.grid > 0 ? a.grid : default_grid(a.image_size),
                    a.pattern.c_str(), a.fill.c_str(), r.images_per_sec,
                    r.ns_per_pixel, pixels);
      os << line << "\n";
    }
  };
  emit(std::cout);
  if (!a.out.empty()) {
    std::filesystem::path out(a.out);
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    std::ofstream csv(out, std::ios::trunc);
    emit(csv);
  }
}

void add_train_flags(CLI::App* cmd, TrainConfig& cfg) {
  cmd->add_option("--epochs", cfg.epochs, "training epochs");
  cmd->add_option("--batch-size", cfg.batch_size, "images per step");
  cmd->add_option("--seed", cfg.seed, "run seed");
  cmd->add_flag("--deterministic,!--no-deterministic", cfg.deterministic,
                "pin to one worker and zero out timing columns");
  cmd->add_option("--workers", cfg.workers, "augmentation worker threads");
  cmd->add_flag("--mixmask,!--no-mixmask", cfg.mixmask_enabled,
                "enable the masked mixing branch");
  cmd->add_option("--grid", cfg.grid_n, "mask grid side (0: pick from image size)");
  cmd->add_option("--pattern", cfg.mask_pattern, "mask pattern: blocked or discrete");
  cmd->add_option("--ratio-policy", cfg.ratio_policy,
                  "mask ratio policy: fixed:R or uniform:LO,HI");
  cmd->add_option("--fill", cfg.fill_mode, "fill mode: image, zero, gaussian");
  cmd->add_option("--pairing", cfg.pairing, "pairing: reverse, random, identity");
  cmd->add_flag("--unmix,!--no-unmix", cfg.unmix_enabled,
                "enable the image-space mixture branch");
  cmd->add_option("--unmix-global-prob", cfg.unmix_global_prob,
                  "probability of global blending vs box replacement");
  cmd->add_option("--permutation-policy", cfg.permutation_policy,
                  "same or different permutations across mixing branches");
  cmd->add_option("--tau", cfg.tau, "contrastive temperature");
  cmd->add_option("--queue-k", cfg.queue_k, "negative queue capacity");
  cmd->add_option("--momentum-m", cfg.momentum_m, "key encoder momentum");
  cmd->add_option("--lr", cfg.lr, "peak learning rate");
  cmd->add_option("--sgd-momentum", cfg.sgd_momentum, "SGD momentum");
  cmd->add_option("--weight-decay", cfg.weight_decay, "L2 weight decay");
  cmd->add_flag("--cosine,!--no-cosine", cfg.cosine, "cosine learning-rate decay");
  cmd->add_option("--embed-dim", cfg.embed_dim, "embedding dimension");
  cmd->add_option("--head-hidden", cfg.head_hidden, "projection head hidden width");
  cmd->add_option("--widths", cfg.widths, "conv widths, four comma-separated ints");
  cmd->add_option("--crop-min-scale", cfg.augment.crop_min_scale,
                  "crop area lower bound");
  cmd->add_option("--crop-max-scale", cfg.augment.crop_max_scale,
                  "crop area upper bound");
  cmd->add_option("--flip-prob", cfg.augment.flip_prob, "horizontal flip probability");
  cmd->add_option("--jitter", cfg.augment.jitter, "brightness/contrast jitter");
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"masked siamese pretraining toolkit"};
  app.name("mixmask");

  MaskGenArgs mask_args;
  auto* mask_cmd = app.add_subcommand("mask", "mask utilities");
  auto* mask_gen = mask_cmd->add_subcommand("gen", "generate a mask preview PNG");
  mask_gen->add_option("--grid", mask_args.grid, "grid side length");
  mask_gen->add_option("--ratio", mask_args.ratio, "target keep ratio");
  mask_gen->add_option("--pattern", mask_args.pattern, "blocked or discrete");
  mask_gen->add_option("--seed", mask_args.seed, "generator seed");
  mask_gen->add_option("--out", mask_args.out, "output PNG path")->required();
  mask_gen->callback([&] { run_mask_gen(mask_args); });
  mask_cmd->require_subcommand(1);

  MixPreviewArgs mix_args;
  auto* mix_cmd = app.add_subcommand("mix", "mixing utilities");
  auto* mix_preview =
      mix_cmd->add_subcommand("preview", "write original/mixed/switch PNG triples");
  add_dataset_flags(mix_preview, mix_args.dataset, "");
  mix_preview->add_option("--grid", mix_args.grid, "grid side (0: from image size)");
  mix_preview->add_option("--ratio", mix_args.ratio, "target keep ratio");
  mix_preview->add_option("--pattern", mix_args.pattern, "blocked or discrete");
  mix_preview->add_option("--fill", mix_args.fill, "image, zero, or gaussian");
  mix_preview->add_option("--pairing", mix_args.pairing,
                          "reverse, random, or identity");
  mix_preview->add_option("--seed", mix_args.seed, "preview seed");
  mix_preview->add_option("--count", mix_args.count, "images to preview");
  mix_preview->add_option("--out", mix_args.out, "output directory")->required();
  mix_preview->callback([&] { run_mix_preview(mix_args); });
  mix_cmd->require_subcommand(1);

  TrainConfig train_cfg;
  std::string train_out;
  auto* train_cmd = app.add_subcommand("train", "run self-supervised pretraining");
  train_cmd->set_config("--config", "", "flat key=value config file");
  add_train_flags(train_cmd, train_cfg);
  add_dataset_flags(train_cmd, train_cfg.dataset, "");
  train_cmd->add_option("--out", train_out, "run directory")->required();
  train_cmd->callback([&] {
    if (deterministic_mode_forced()) train_cfg.deterministic = true;
    std::cout << resolved_config_text(train_cfg);
    std::cout << "out = " << train_out << "\n";
    run(train_cfg, train_out);
  });

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "evaluation utilities");
  auto* eval_knn =
      eval_cmd->add_subcommand("knn", "nearest-neighbour probe of a checkpoint");
  eval_knn->add_option("--checkpoint", eval_args.checkpoint, "checkpoint file")
      ->required();
  eval_knn->add_option("--weights", eval_args.weights,
                       "which tensors to load: online or target");
  eval_knn->add_option("--out", eval_args.out, "directory for predictions.csv");
  eval_knn->add_option("--k", eval_args.k, "neighbour count");
  eval_knn->add_option("--temperature", eval_args.temperature, "vote temperature");
  add_dataset_flags(eval_knn, eval_args.bank, "");
  auto* q1 = eval_knn->add_option("--test-data-kind", eval_args.query.kind,
                                  "query dataset kind");
  auto* q2 = eval_knn->add_option("--test-data-path", eval_args.query.path,
                                  "query dataset files");
  auto* q3 = eval_knn->add_option("--test-classes", eval_args.query.classes,
                                  "query class count");
  auto* q4 = eval_knn->add_option("--test-per-class", eval_args.query.per_class,
                                  "query images per class");
  auto* q5 = eval_knn->add_option("--test-image-size", eval_args.query.image_size,
                                  "query image side");
  auto* q6 = eval_knn->add_option("--test-data-seed", eval_args.query.seed,
                                  "query generator seed");
  auto* q7 = eval_knn->add_option("--test-noise", eval_args.query.noise,
                                  "query noise scale");
  eval_knn->callback([&] {
    eval_args.query_touched = q1->count() || q2->count() || q3->count() ||
                              q4->count() || q5->count() || q6->count() ||
                              q7->count();
    run_eval_knn(eval_args);
  });
  eval_cmd->require_subcommand(1);

  BenchArgs bench_args;
  auto* bench_cmd = app.add_subcommand("bench", "throughput benchmarks");
  auto* bench_mix =
      bench_cmd->add_subcommand("mix", "measure mask generation + mixing rate");
  bench_mix->add_option("--batch", bench_args.batch, "images per iteration");
  bench_mix->add_option("--image-size", bench_args.image_size, "image side");
  bench_mix->add_option("--grid", bench_args.grid, "grid side (0: from image size)");
  bench_mix->add_option("--pattern", bench_args.pattern, "blocked or discrete");
  bench_mix->add_option("--fill", bench_args.fill, "image, zero, or gaussian");
  bench_mix->add_option("--iterations", bench_args.iterations, "batches to process");
  bench_mix->add_option("--workers", bench_args.workers, "threads for the second pass");
  bench_mix->add_option("--seed", bench_args.seed, "benchmark seed");
  bench_mix->add_option("--out", bench_args.out, "CSV output path");
  bench_mix->callback([&] { run_bench_mix(bench_args); });
  bench_cmd->require_subcommand(1);

  app.require_subcommand(1);

  if (args.empty()) {
    std::cerr << app.help() << std::flush;
    return 1;
  }
  if (args[0][0] != '-' &&
      std::find(kTopCommands.begin(), kTopCommands.end(), args[0]) ==
          kTopCommands.end()) {
    std::cerr << "unknown subcommand '" << args[0] << "', did you mean '"
              << nearest_command(args[0]) << "'?\n";
    return 1;
  }

  auto deepest_parsed = [&app]() {
    const CLI::App* deepest = &app;
    while (!deepest->get_subcommands().empty())
      deepest = deepest->get_subcommands().back();
    return deepest;
  };

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::Success&) {
    std::cout << deepest_parsed()->help() << std::flush;
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    std::cerr << deepest_parsed()->help() << std::flush;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

int dispatch(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args);
}

}  // namespace mixmask
