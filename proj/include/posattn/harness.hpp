#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "posattn/model.hpp"
#include "posattn/tasks.hpp"

namespace posattn {

inline constexpr const char* kVersionTag = "0.1.0";

// Raises glibc's mmap threshold so the per-step tape buffers are recycled by
// the heap instead of being mapped and unmapped every step (roughly a 2x
// speedup on training). Call once from main(); no-op elsewhere.
void tune_allocator();

// Everything a training run depends on. A (seed, config) pair fully determines
// the run: replaying it on the same build reproduces the metric series
// bit-exactly.
struct TrainConfig {
  TaskKind task = TaskKind::cumulative_min;
  ModelConfig model;
  int epochs = 2000;
  int batch_size = 256;
  double lr0 = 1e-4;
  double lr_min = 1e-6;
  int train_samples = 30000;
  int val_samples = 1000;
  double range_bound = 2.0;
  bool variable_length = false;
  std::uint64_t seed = 1;
};

struct OodRow {
  int scale = 1;
  double mse = 0.0;
  int n_samples = 0;
  std::uint64_t seed = 0;
};

// Persistent record of one run; serialized as manifest.json next to
// metrics.csv and the best-validation checkpoint.
struct RunManifest {
  TrainConfig config;
  std::string status;  // "ok" or "failed" (divergence)
  std::vector<double> train_mse;  // index = epoch, starting at epoch 0
  std::vector<double> val_mse;
  int best_epoch = 0;
  double best_val_mse = 0.0;
  std::vector<OodRow> ood;  // filled in by ood_sweep
  std::string checkpoint;   // path relative to the run directory
  double wall_clock_sec = 0.0;
  std::string version = kVersionTag;
};

// Trains with Adam under a cosine learning-rate schedule, recording train and
// validation MSE every epoch and checkpointing the best-validation parameters.
// Writes manifest.json, metrics.csv and checkpoint.json under out_dir.
// A non-finite loss aborts the run and marks the manifest "failed".
RunManifest train(const TrainConfig& tc, const std::string& out_dir);

// Mean squared error of the model over a sample set, scratchpad excluded.
double mean_mse(const ModelConfig& cfg, const ModelParams& p, const std::vector<Sample>& samples,
                int batch_size = 256);

// Per-scale OOD MSE on fresh test batches; scale 1 draws from the training
// distribution (in-distribution generalization).
std::vector<OodRow> ood_eval(const ModelConfig& cfg, const ModelParams& p, TaskKind task,
                             const std::vector<int>& scales, int samples_per_scale,
                             double range_bound, std::uint64_t seed);

// Loads the checkpoint under run_dir, runs ood_eval, writes ood.csv and folds
// the table back into manifest.json.
std::vector<OodRow> ood_sweep(const std::string& run_dir, const std::vector<int>& scales,
                              int samples_per_scale, std::uint64_t seed);

// Manifest persistence (atomic write-temp-then-rename).
void save_manifest(const std::string& path, const RunManifest& m);
RunManifest load_manifest(const std::string& path);

// CSV helpers shared by the sweeps; doubles are printed round-trip exact.
void write_metrics_csv(const std::string& path, const std::vector<double>& train_mse,
                       const std::vector<double>& val_mse);
void write_ood_csv(const std::string& path, const std::vector<OodRow>& rows);

}  // namespace posattn
