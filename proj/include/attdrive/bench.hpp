#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attdrive/dataset.hpp"
#include "attdrive/image.hpp"
#include "attdrive/policy.hpp"
#include "attdrive/sim.hpp"
#include "attdrive/trainer.hpp"

namespace attdrive::bench {

// Task taxonomy mirrored from the driving benchmark: a straight route, a
// single turn, multi-turn navigation, and navigation among other vehicles.
enum class Task : int {
  straight = 0,
  one_turn = 1,
  navigation = 2,
  navigation_dynamic = 3,
};
inline constexpr int kTaskCount = 4;
const char* task_name(Task t);

// Column conditions: {train town, test town} x {seen, unseen weather}.
enum class Condition : int {
  train_town_seen = 0,
  train_town_unseen = 1,
  test_town_seen = 2,
  test_town_unseen = 3,
};
inline constexpr int kConditionCount = 4;
const char* condition_name(Condition c);

struct TownSpec {
  std::uint64_t seed = 0;
  int blocks_w = 3;
  int blocks_h = 3;
  std::string tag;  // "townA" / "townB"; keyed into route ids
};

struct AgentSpec {
  int start_node = 0;
  int goal_node = 0;
  std::uint64_t route_seed = 0;
  double speed_scale = 0.7;
  int color_id = 0;
};

struct BenchEpisode {
  std::string id;  // stable "task/condition/index"
  Task task = Task::straight;
  Condition condition = Condition::train_town_seen;
  int start_node = 0;
  int goal_node = 0;
  std::uint64_t route_seed = 0;
  int weather = 0;
  std::vector<AgentSpec> agents;  // nonempty only for navigation_dynamic
  std::string route_id;           // same format the data recorder uses
};

struct BenchmarkSuite {
  std::uint64_t seed = 0;
  TownSpec town_a, town_b;
  std::vector<BenchEpisode> episodes;
};

struct SuiteConfig {
  std::uint64_t seed = 2026;
  int episodes_per_cell = 3;  // per (task, condition)
  TownSpec town_a{1, 3, 3, "townA"};
  TownSpec town_b{2, 3, 3, "townB"};
  bool town_a_only = false;  // ablation mode: train-town columns only
  int agents_per_dynamic = 2;
};

// Canonical route identifier, shared with dataset manifests so suite
// hygiene can be checked by plain string comparison.
std::string route_id(const TownSpec& town, int start, int goal,
                     std::uint64_t route_seed);

// Deterministically samples routes per task: straight routes have no turn
// commands, one-turn exactly one, navigation at least two; the dynamic task
// reuses navigation-grade routes plus scripted cross-traffic whose paths
// never share a directed lane edge with the ego route. Throws SimError when
// the town cannot supply enough distinct routes for a bucket.
BenchmarkSuite build_suite(const SuiteConfig& config);

// Structural checks + hygiene: test-town route ids must not appear in the
// training manifest; per-task episode counts must reach min_per_task.
void validate_suite(const BenchmarkSuite& suite,
                    const data::Manifest* training_manifest = nullptr,
                    int min_per_task = 10);

struct CellStats {
  int episodes = 0;
  int successes = 0;
  int collisions = 0;
  double completion_sum = 0.0;
  double success_pct() const {
    return episodes == 0 ? 0.0 : 100.0 * successes / episodes;
  }
};

struct EpisodeOutcome {
  std::string id;
  Task task = Task::straight;
  Condition condition = Condition::train_town_seen;
  bool success = false;
  double completion = 0.0;
  int steps = 0;
  int collision_count = 0;
  int offroad_count = 0;  // rising edges of the off-pavement flag
  std::vector<std::vector<double>> attention_log;  // per frame, when enabled
};

struct BenchReport {
  std::array<std::array<CellStats, kConditionCount>, kTaskCount> cells{};
  std::vector<EpisodeOutcome> episodes;

  double task_success_pct(Task t) const;
  // Success rate averaged across tasks (each task weighted equally).
  double average_success_pct() const;
  std::string to_text() const;
  std::string to_json() const;  // deterministic for bitwise table comparison
};

struct BenchOptions {
  bool log_attention = false;
  sim::SimParams params;
};

using ControllerFactory = std::function<std::unique_ptr<sim::Controller>(
    const BenchEpisode&, const sim::TownMap&, const sim::Route&)>;

// Generic closed-loop driver used by both the model benchmark and the
// expert upper-bound run. Rendering can be disabled for frame-blind
// controllers; render_w/h are ignored in that case.
BenchReport run_benchmark_with(const BenchmarkSuite& suite,
                               const ControllerFactory& make_controller,
                               bool render_frames, int render_w, int render_h,
                               const BenchOptions& opt = {});

BenchReport run_benchmark(const policy::PolicyModel& model,
                          const BenchmarkSuite& suite,
                          const BenchOptions& opt = {});

// Closed-loop adapter: steering comes from the model on the quantized
// rendered frame (the exact sensor path training data went through);
// throttle reuses the expert's two-stage yield law.
class PolicyController : public sim::Controller {
 public:
  PolicyController(const policy::PolicyModel* model, const sim::SimParams& p)
      : model_(model), p_(p) {}

  sim::ControlOutput control(const nn::Tensor& frame,
                             const sim::VehicleState& state,
                             policy::Command cmd) override;
  void observe_agents(std::span<const sim::VehicleState> agents) override;

 private:
  const policy::PolicyModel* model_;
  sim::SimParams p_;
  std::vector<sim::VehicleState> agents_;
};

// ---------------------------------------------------------------------------
// Attention overlays (explanation artifacts).

// Command color key: FollowLane green, TurnLeft red, TurnRight cyan,
// GoStraight yellow.
std::array<double, 3> command_color(policy::Command c);

struct Overlay {
  Image8 image;     // composited overlay, also written to out_path
  nn::Tensor shade;  // {W,H} float map: sum of alpha-scaled tents / max
};

// Bilinear tent profile of a pixel rect: strictly positive inside, exactly
// zero outside, peak at the rect center. Feathered region footprints keep
// the 48 profiles linearly independent (flat fills are not: the two bigV
// halves and the outer bigH pair both tile the frame), which is what makes
// the overlay decodable back to alpha.
double tent_profile(const Rect& r, int x, int y);

// Per-pixel shade = sum over regions of alpha_i * tent_i, normalized so the
// peak is 1; output pixel = frame*(1 - shade/2) + command_color*(shade/2)
// (opacity proportional to shade, zero-shade pixels untouched). Region
// rectangles are the RegionSpecs projected to image pixels. Throws
// ConfigError when |alpha| != |regions| or sum(alpha) is off 1 by > 1e-6.
// An empty out_path skips the file write.
Overlay render_attention_overlay(const Image8& frame, const roi::RoIGrid& grid,
                                 std::span<const double> alpha,
                                 policy::Command command,
                                 const std::string& out_path);

// Recovers each region's shading coefficient from the float shade map by
// least squares on the tent basis, normalized to sum 1; equal to the alphas
// the overlay was rendered from up to solver rounding. Throws NumericError
// when regions project to rank-deficient profiles (degenerate resolutions).
std::vector<double> decode_region_shades(const nn::Tensor& shade,
                                         const roi::RoIGrid& grid);

// Spearman rank correlation; values closer than 1e-9 (relative) share an
// averaged rank. Identical orderings return exactly 1.0.
double rank_correlation(std::span<const double> a, std::span<const double> b);

// ---------------------------------------------------------------------------
// Ablation & variant comparison.

// Grid with one box type removed (count forced to 0).
roi::GridConfig grid_without(const roi::GridConfig& base, roi::BoxType removed);

struct AblationResult {
  roi::BoxType removed = roi::BoxType::bigV;
  int region_count = 0;
  train::TrainResult training;
  std::string checkpoint;  // final checkpoint of the reduced-grid model
  BenchReport bench;       // train-town conditions only
};

// Trains base but on a grid lacking `removed`, then benchmarks on a
// town-A-only suite. Throws ConfigError when the remaining grid is empty.
AblationResult ablation_box_removal(const train::TrainConfig& base,
                                    roi::BoxType removed,
                                    const SuiteConfig& suite_config,
                                    const BenchOptions& opt = {});

struct VariantResult {
  std::string checkpoint;
  policy::Variant variant = policy::Variant::full_attention;
  BenchReport report;
};

struct CompareReport {
  std::vector<VariantResult> variants;
  // Directional gaps (percentage points), filled when the canonical trio
  // {full_attention, no_attention, independent_roi} is present.
  std::optional<double> full_minus_no_attention_avg;
  std::optional<double> indep_minus_full_straight;
  std::optional<double> full_minus_indep_one_turn;

  std::string to_text() const;
  std::string to_json() const;
};

// Benchmarks each checkpoint on the same suite. Refuses (ConfigError) when
// the checkpoints' training configs differ in anything but the variant:
// init seed, resolution, grid, lr, epochs, batch size, and data_root must
// all match, otherwise the comparison would not be like-for-like.
CompareReport compare_variants(const std::vector<std::string>& checkpoints,
                               const BenchmarkSuite& suite,
                               const BenchOptions& opt = {});

}  // namespace attdrive::bench
