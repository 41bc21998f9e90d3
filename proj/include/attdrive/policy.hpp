#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "attdrive/roi.hpp"
#include "attdrive/tensor.hpp"

namespace attdrive::policy {

enum class Command : int {
  follow_lane = 0,
  go_straight = 1,
  turn_left = 2,
  turn_right = 3,
};
inline constexpr int kCommandCount = 4;

Command command_from_int(int v);           // validates, ConfigError otherwise
const char* command_name(Command c);
Command command_from_name(const std::string& name);

enum class Variant : int {
  full_attention = 0,
  no_attention = 1,
  independent_roi = 2,
};
const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct ModelConfig {
  int input_w = 192;
  int input_h = 88;
  Variant variant = Variant::full_attention;
  roi::GridConfig grid;
  // When non-empty, overrides the generated grid (used for reduced-grid
  // experiments); recorded in checkpoints.
  std::vector<roi::RegionSpec> custom_regions;
};

struct ForwardTrace {
  double steer = 0.0;            // in (-1,1), tanh output
  std::vector<double> alpha;     // R attention weights; empty for no_attention
  nn::Tensor pooled;             // {R, 16*C} pooled descriptors r_i
  Command command = Command::follow_lane;
  nn::Tensor steer_node;         // tape-linked scalar; valid while tape lives
};

struct TrainSample {
  nn::Tensor frame;  // {W,H,3}, values in [0,1]
  Command command = Command::follow_lane;
  double steer = 0.0;  // ground truth, in [-1,1]
};

// Fig. 4 model: Table 1 backbone -> RoI pooling over the grid -> one
// attention + dense head per command -> steering scalar. Variants:
//   full_attention:  alpha = softmax(r * W_a + b_a), r_a = sum_i alpha_i r_i
//   no_attention:    single full-image RoI pooled and fed to the dense stack
//   independent_roi: shared per-head 1024->1 scorer gives one logit per
//                    region, jointly softmaxed
class PolicyModel {
 public:
  static constexpr int kChannels = 64;        // backbone output channels
  static constexpr int kDescriptor = 16 * kChannels;  // 4x4 pooled = 1024

  // Deterministic init from seed; weights U(-sqrt(6/fan_in), +sqrt(6/fan_in)),
  // biases zero. Throws ConfigError when the resolution fails geometry
  // validation against the Table 1 backbone.
  static PolicyModel init(const ModelConfig& config, std::uint64_t seed);

  // Runs the variant the model was configured with. Thread-safe on a frozen
  // model when tape == nullptr.
  ForwardTrace forward(const nn::Tensor& frame, Command command,
                       nn::Tape* tape = nullptr) const;

  // Mean-MSE batch step with per-command gradient gating; applies one Adam
  // update. Throws NumericError (naming the sample index) on non-finite
  // loss, leaving parameters untouched. grad_clip > 0 rescales the full
  // gradient vector to that L2 norm when it is exceeded (0 disables).
  // sample_losses, when given, receives the per-sample squared errors.
  double train_step(std::span<const TrainSample> batch, nn::AdamState& adam,
                    double grad_clip = 0.0,
                    std::vector<double>* sample_losses = nullptr);

  const ModelConfig& config() const { return config_; }
  const roi::RoIGrid& grid() const { return grid_; }
  int region_count() const { return static_cast<int>(grid_.regions.size()); }
  int feature_w() const { return feature_w_; }
  int feature_h() const { return feature_h_; }

  // Per-layer output dims {W,H,C} of the backbone at the configured input
  // resolution.
  std::vector<std::array<int, 3>> backbone_dims() const;

  nn::ParameterStore& store() { return store_; }
  const nn::ParameterStore& store() const { return store_; }

  // Contiguous [begin,end) slice of the flat parameter vector belonging to
  // one command head (attention + dense stack).
  std::pair<std::size_t, std::size_t> head_span(int command) const;

  std::uint64_t init_seed() const { return seed_; }
  static const char* init_scheme() { return "uniform_he_fanin_v1"; }

 private:
  PolicyModel() = default;
  ForwardTrace run(const nn::Tensor& frame, Command command,
                   nn::Tape* tape) const;

  ModelConfig config_;
  roi::RoIGrid grid_;
  std::vector<Rect> rects_;      // grid projected to feature dims
  Rect full_rect_;               // whole feature map (no_attention)
  int feature_w_ = 0;
  int feature_h_ = 0;
  std::uint64_t seed_ = 0;
  // store_ holds tensors by name; views below are rebuilt on load/copy.
  mutable nn::ParameterStore store_;
  std::array<std::pair<std::size_t, std::size_t>, kCommandCount> head_spans_{};
};

}  // namespace attdrive::policy
