#include "attdrive/policy.hpp"

#include <cmath>

#include "attdrive/errors.hpp"
#include "attdrive/rng.hpp"

namespace attdrive::policy {

namespace {

struct ConvLayerSpec {
  int k, stride, cin, cout;
};

// Table 1: three 5x5/stride-2 and two 3x3/stride-1 layers.
constexpr ConvLayerSpec kBackbone[5] = {{5, 2, 3, 24},
                                        {5, 2, 24, 36},
                                        {5, 2, 36, 48},
                                        {3, 1, 48, 64},
                                        {3, 1, 64, 64}};

// Dense stack sizes per head (input 1024 = 16*64).
constexpr int kDense[6] = {PolicyModel::kDescriptor, 512, 128, 50, 10, 1};

std::string head_prefix(int cmd) { return "head" + std::to_string(cmd); }

}  // namespace

Command command_from_int(int v) {
  if (v < 0 || v >= kCommandCount)
    throw ConfigError("unknown command value " + std::to_string(v));
  return static_cast<Command>(v);
}

const char* command_name(Command c) {
  switch (c) {
    case Command::follow_lane: return "FollowLane";
    case Command::go_straight: return "GoStraight";
    case Command::turn_left: return "TurnLeft";
    case Command::turn_right: return "TurnRight";
  }
  throw ConfigError("command_name: bad enum value");
}

Command command_from_name(const std::string& name) {
  for (int i = 0; i < kCommandCount; ++i)
    if (name == command_name(static_cast<Command>(i)))
      return static_cast<Command>(i);
  throw ConfigError("unknown command name '" + name + "'");
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::full_attention: return "full_attention";
    case Variant::no_attention: return "no_attention";
    case Variant::independent_roi: return "independent_roi";
  }
  throw ConfigError("variant_name: bad enum value");
}

Variant variant_from_name(const std::string& name) {
  for (int i = 0; i < 3; ++i)
    if (name == variant_name(static_cast<Variant>(i)))
      return static_cast<Variant>(i);
  throw ConfigError("unknown variant '" + name + "'");
}

PolicyModel PolicyModel::init(const ModelConfig& config, std::uint64_t seed) {
  PolicyModel m;
  m.config_ = config;
  m.seed_ = seed;

  if (config.custom_regions.empty()) {
    m.grid_ = roi::generate_grid(config.grid);
  } else {
    // Explicit region list: bounds are validated, nominal type sizes are
    // not enforced (this override exists exactly for off-lattice
    // experiments such as a single full-image region).
    for (const roi::RegionSpec& r : config.custom_regions) {
      if (!(r.x0 >= 0.0 && r.x0 < r.x1 && r.x1 <= 1.0 && r.y0 >= 0.0 &&
            r.y0 < r.y1 && r.y1 <= 1.0))
        throw ConfigError("init_model: custom region out of bounds");
      m.grid_.regions.push_back(r);
      m.grid_.counts[static_cast<std::size_t>(r.box_type)] += 1;
    }
  }
  if (m.grid_.regions.empty() && config.variant != Variant::no_attention)
    throw ConfigError("init_model: attention variants need >= 1 region");

  const auto backbone = roi::table1_backbone();
  const roi::GeometryReport rep = roi::validate_geometry(
      m.grid_, config.input_w, config.input_h, backbone);
  if (!rep.ok) {
    std::string msg = "init_model: geometry validation failed:";
    for (const std::string& e : rep.errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  m.feature_w_ = rep.feature_w;
  m.feature_h_ = rep.feature_h;
  m.rects_ = rep.rects;
  m.full_rect_ = Rect{0, 0, rep.feature_w, rep.feature_h};

  const int R = m.region_count();

  // Declaration order is also the RNG draw order; changing it changes
  // checkpoints, so keep it stable.
  nn::ParameterStore& st = m.store_;
  std::vector<std::pair<std::string, int>> weight_fanin;
  for (int l = 0; l < 5; ++l) {
    const ConvLayerSpec& c = kBackbone[l];
    const std::string base = "conv" + std::to_string(l + 1);
    st.declare(base + ".k", {c.k, c.k, c.cin, c.cout});
    st.declare(base + ".b", {c.cout});
    weight_fanin.emplace_back(base + ".k", c.k * c.k * c.cin);
  }
  for (int h = 0; h < kCommandCount; ++h) {
    const std::string base = head_prefix(h);
    switch (config.variant) {
      case Variant::full_attention:
        st.declare(base + ".attn.w", {R * kDescriptor, R});
        st.declare(base + ".attn.b", {R});
        weight_fanin.emplace_back(base + ".attn.w", R * kDescriptor);
        break;
      case Variant::independent_roi:
        st.declare(base + ".scorer.w", {kDescriptor});
        st.declare(base + ".scorer.b", {1});
        weight_fanin.emplace_back(base + ".scorer.w", kDescriptor);
        break;
      case Variant::no_attention:
        break;
    }
    for (int d = 0; d < 5; ++d) {
      const std::string dn = base + ".dense" + std::to_string(d);
      st.declare(dn + ".w", {kDense[d], kDense[d + 1]});
      st.declare(dn + ".b", {kDense[d + 1]});
      weight_fanin.emplace_back(dn + ".w", kDense[d]);
    }
  }
  st.finalize();

  Rng rng(seed);
  for (const auto& [name, fanin] : weight_fanin) {
    const double limit = std::sqrt(6.0 / fanin);
    nn::Tensor w = st.view(name);
    for (auto& v : w.data()) v = rng.uniform(-limit, limit);
  }

  for (int h = 0; h < kCommandCount; ++h) {
    const std::string base = head_prefix(h);
    const std::string first =
        config.variant == Variant::full_attention      ? base + ".attn.w"
        : config.variant == Variant::independent_roi   ? base + ".scorer.w"
                                                       : base + ".dense0.w";
    const auto& fe = st.entry(first);
    const auto& le = st.entry(base + ".dense4.b");
    m.head_spans_[static_cast<std::size_t>(h)] = {fe.offset,
                                                  le.offset + le.size};
  }
  return m;
}

std::vector<std::array<int, 3>> PolicyModel::backbone_dims() const {
  std::vector<std::array<int, 3>> dims;
  int w = config_.input_w, h = config_.input_h;
  for (const ConvLayerSpec& c : kBackbone) {
    w = (w - c.k) / c.stride + 1;
    h = (h - c.k) / c.stride + 1;
    dims.push_back({w, h, c.cout});
  }
  return dims;
}

std::pair<std::size_t, std::size_t> PolicyModel::head_span(int command) const {
  command_from_int(command);
  return head_spans_[static_cast<std::size_t>(command)];
}

ForwardTrace PolicyModel::run(const nn::Tensor& frame, Command command,
                              nn::Tape* tape) const {
  command_from_int(static_cast<int>(command));
  if (frame.dims().size() != 3 || frame.dim(0) != config_.input_w ||
      frame.dim(1) != config_.input_h || frame.dim(2) != 3)
    throw ShapeError("forward: frame dims do not match model input " +
                     std::to_string(config_.input_w) + "x" +
                     std::to_string(config_.input_h) + "x3");

  nn::Tensor x = frame;
  for (int l = 0; l < 5; ++l) {
    const std::string base = "conv" + std::to_string(l + 1);
    x = nn::conv2d(tape, x, store_.view(base + ".k"),
                   store_.view(base + ".b"), kBackbone[l].stride,
                   nn::Activation::relu);
  }

  const std::string head = head_prefix(static_cast<int>(command));
  ForwardTrace trace;
  trace.command = command;

  nn::Tensor ra;  // dense-stack input
  if (config_.variant == Variant::no_attention) {
    trace.pooled = nn::roi_pool_cells(
        tape, x, std::span<const Rect>(&full_rect_, 1));
    ra = trace.pooled;  // {1, 1024}, consumed flat by dense()
  } else {
    trace.pooled = nn::roi_pool_cells(tape, x, rects_);
    nn::Tensor logits;
    if (config_.variant == Variant::full_attention) {
      logits = nn::dense(tape, trace.pooled, store_.view(head + ".attn.w"),
                         store_.view(head + ".attn.b"),
                         nn::Activation::none);
    } else {
      logits = nn::row_dense(tape, trace.pooled,
                             store_.view(head + ".scorer.w"),
                             store_.view(head + ".scorer.b"));
    }
    nn::Tensor alpha = nn::softmax(tape, logits);
    trace.alpha.assign(alpha.data().begin(), alpha.data().end());
    double asum = 0.0;
    for (double a : trace.alpha) asum += a;
    if (std::abs(asum - 1.0) > 1e-9)
      throw NumericError("forward: attention weights sum to " +
                         std::to_string(asum));
    ra = nn::weighted_sum(tape, trace.pooled, alpha);
  }

  nn::Tensor h = ra;
  for (int d = 0; d < 4; ++d) {
    const std::string dn = head + ".dense" + std::to_string(d);
    h = nn::dense(tape, h, store_.view(dn + ".w"), store_.view(dn + ".b"),
                  nn::Activation::relu);
  }
  nn::Tensor out = nn::dense(tape, h, store_.view(head + ".dense4.w"),
                             store_.view(head + ".dense4.b"),
                             nn::Activation::none);
  trace.steer_node = nn::tanh_act(tape, out);
  trace.steer = trace.steer_node.value();
  if (!std::isfinite(trace.steer))
    throw NumericError("forward: non-finite steering output");
  return trace;
}

ForwardTrace PolicyModel::forward(const nn::Tensor& frame, Command command,
                                  nn::Tape* tape) const {
  return run(frame, command, tape);
}

double PolicyModel::train_step(std::span<const TrainSample> batch,
                               nn::AdamState& adam, double grad_clip,
                               std::vector<double>* sample_losses) {
  if (batch.empty()) throw ConfigError("train_step: empty batch");
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (!(std::abs(batch[i].steer) <= 1.0))
      throw NumericError("train_step: steer target out of [-1,1] at sample " +
                         std::to_string(i));

  store_.zero_grads();
  if (sample_losses) {
    sample_losses->clear();
    sample_losses->reserve(batch.size());
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TrainSample& s = batch[i];
    nn::Tape tape;
    ForwardTrace trace = run(s.frame, s.command, &tape);
    nn::Tensor target({1});
    target[0] = s.steer;
    nn::Tensor loss = nn::mse_loss(&tape, trace.steer_node, target);
    const double lv = loss.value();
    if (!std::isfinite(lv))
      throw NumericError("train_step: non-finite loss at sample index " +
                         std::to_string(i));
    // Seeding with 1/B makes the accumulated leaf gradients the gradient
    // of the batch-mean loss.
    tape.backward(loss, inv_b);
    loss_sum += lv;
    if (sample_losses) sample_losses->push_back(lv);
  }
  if (grad_clip > 0.0) {
    double sq = 0.0;
    for (double g : store_.grads()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > grad_clip)
      for (double& g : store_.grads()) g *= grad_clip / norm;
  }
  nn::adam_step(store_.values(), store_.grads(), adam);
  return loss_sum * inv_b;
}

}  // namespace attdrive::policy
