#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "attdrive/dataset.hpp"
#include "attdrive/policy.hpp"
#include "attdrive/rng.hpp"

namespace attdrive::train {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 64;
  double lr = 1e-4;  // constant; the reference gives no schedule
  std::uint64_t seed = 0;
  policy::Variant variant = policy::Variant::full_attention;
  int input_w = 192;
  int input_h = 88;
  roi::GridConfig grid;
  std::vector<roi::RegionSpec> custom_regions;  // optional grid override
  std::string data_root;  // dataset root holding manifest.json
  std::string out_dir;    // metrics.jsonl + checkpoints land here
  double grad_clip = 0.0;  // L2 cap on the batch gradient; 0 = off (default)
};

// ConfigError unless epochs >= 1, batch_size >= 1, lr > 0, grad_clip >= 0
// and paths are nonempty.
void validate(const TrainConfig& config);

policy::ModelConfig model_config(const TrainConfig& config);

// Offline MSE on a frozen model. Commands absent from the set stay
// nullopt (never zero). mse_total is the plain mean over all samples, so
// the count-weighted average of the per-command entries reproduces it.
struct EvalResult {
  double mse_total = 0.0;
  std::int64_t samples = 0;
  std::array<std::optional<double>, policy::kCommandCount> mse_per_command{};
  std::array<std::int64_t, policy::kCommandCount> count_per_command{};
};

// Throws ConfigError on an empty dataset or a resolution mismatch.
EvalResult evaluate_offline(const policy::PolicyModel& model,
                            const data::Dataset& ds);

struct EpochMetrics {
  int epoch = 0;
  double train_mse = 0.0;
  std::array<std::optional<double>, policy::kCommandCount>
      train_mse_per_command{};  // per-command batch-loss means
  EvalResult val;
  std::int64_t train_wall_ms = 0;
  std::int64_t val_wall_ms = 0;
};

struct TrainResult {
  bool diverged = false;
  std::string divergence_message;  // empty unless diverged
  int best_epoch = -1;
  double best_val_mse = std::numeric_limits<double>::infinity();
  std::vector<EpochMetrics> history;
  std::string final_checkpoint;  // empty when divergence hit before epoch 1
  std::string best_checkpoint;
};

// End-to-end training: loads train/val splits, runs `epochs` epochs of
// Adam on the batch-mean steering MSE, logs one JSONL line per
// (epoch, split) to out_dir/metrics.jsonl, writes out_dir/final.ckpt every
// epoch and out_dir/best.ckpt on val improvement. Deterministic given
// (config, seed, dataset) except for the wall_ms fields. On divergence
// (non-finite loss or gradient) training aborts; the last completed
// epoch's checkpoints stay on disk.
using ProgressFn = std::function<void(const EpochMetrics&)>;
TrainResult train(const TrainConfig& config, const ProgressFn& progress = {});

// ---------------------------------------------------------------------------
// Checkpoints: "ADG1" magic, version, config echo, named little-endian
// parameter tensors, Adam state, epoch counter, trainer RNG state.
// load(save(model)) is bitwise exact; truncation, trailing bytes, bad
// magic or version mismatch raise IoError without partial effects.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainState {
  nn::AdamState adam;
  Rng rng;        // trainer-owned stream, serialized for exact resume
  int epoch = 0;  // completed epochs at save time
  // Training-run echo (model config and lr live in the model / adam state);
  // consumers use it to verify like-for-like variant comparisons.
  int echo_epochs = 0;
  int echo_batch_size = 0;
  std::uint64_t echo_seed = 0;
  double echo_grad_clip = 0.0;
  std::string echo_data_root;
};

void save_checkpoint(const policy::PolicyModel& model, const TrainState& state,
                     const std::string& path);

struct LoadedCheckpoint {
  policy::PolicyModel model;
  TrainState state;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// One metrics line, exactly as written to metrics.jsonl.
std::string metrics_line(int epoch, const std::string& split, double mse,
                         const std::array<std::optional<double>,
                                          policy::kCommandCount>& per_command,
                         std::int64_t wall_ms);

}  // namespace attdrive::train
