#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "attdrive/geometry.hpp"
#include "attdrive/policy.hpp"
#include "attdrive/rng.hpp"
#include "attdrive/tensor.hpp"

// Deterministic top-down 2D town simulator and geometric expert driver.
// Grid-of-blocks towns with 4-way intersections, a kinematic-bicycle vehicle,
// a pure-pursuit expert, and a forward-facing pseudo-perspective renderer
// provide demonstrations and closed-loop evaluation without an external
// driving simulator.
namespace attdrive::sim {

using policy::Command;

// ---------------------------------------------------------------------------
// Tunables. All distances in meters, angles in radians, durations in seconds.

struct SimParams {
  double dt = 0.05;                      // fixed simulation step
  double wheelbase = 2.5;                // L in the bicycle model
  double max_steer_angle = 0.6108652381980153;  // 35 degrees
  double target_speed = 2.7777777777777777;     // 10 km/h
  double speed_tau = 0.8;                // speed relaxation time constant
  double lookahead = 4.0;                // pure-pursuit lookahead distance
  double lane_offset = 2.0;              // right-hand lane center offset
  double lane_half_width = 2.0;          // half-width of one lane
  double road_half_width = 4.0;          // two lanes
  double intersection_half = 7.0;        // half-size of the intersection pad
  double vehicle_half_width = 0.85;
  double vehicle_length = 3.8;
  double goal_radius = 3.0;              // episode success radius
  double annotation_radius = 12.0;       // command active within this of a node
  double recovery_distance = 6.0;        // expert gives up beyond this offset
  double offroad_margin = 0.5;           // allowed overhang past the drivable edge
  double yield_distance = 8.0;           // expert brakes for agents closer ahead
  double collision_distance = 2.2;       // center distance counted as collision
};

// ---------------------------------------------------------------------------
// Town map

struct Box2 {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool contains(Vec2 p) const {
    return p.x >= x0 && p.x < x1 && p.y >= y0 && p.y < y1;
  }
};

// Branch slots in compass order; -1 when no street leaves that way.
enum Dir : int { kNorth = 0, kEast = 1, kSouth = 2, kWest = 3 };

struct TownNode {
  Vec2 pos;
  std::array<int, 4> branch = {-1, -1, -1, -1};  // segment id per Dir
};

// Straight street between two intersection pads. The centerline runs from
// a() to b(); axis 0 means the street runs along x, axis 1 along y.
struct Segment {
  int node_a = -1;  // lower-coordinate end
  int node_b = -1;
  int axis = 0;
  Vec2 a, b;        // trimmed centerline endpoints
  double length() const { return (b - a).norm(); }
};

struct Block {
  Box2 rect;
  int palette = 0;  // deterministic visual style index
};

struct TownMap {
  std::uint64_t seed = 0;
  std::string name;
  double lane_half_width = 2.0;
  std::vector<TownNode> nodes;
  std::vector<Segment> segments;
  std::vector<Block> blocks;
};

// Deterministic grid town: blocks_x * blocks_y city blocks with jittered
// block sizes, 4-way intersections everywhere. Throws ConfigError for grids
// smaller than 2x2 blocks.
TownMap build_town(std::uint64_t seed, int blocks_x, int blocks_y,
                   const SimParams& p = {});

// Connectivity and branch-consistency validation; throws SimError on defect.
void validate_town(const TownMap& town);

// Versioned text round trip ("TOWN1" header). Values print with enough
// digits to reproduce bit-identical doubles. town_from_text throws IoError
// on malformed input.
std::string town_to_text(const TownMap& town);
TownMap town_from_text(const std::string& text);

// ---------------------------------------------------------------------------
// Vehicle dynamics

struct VehicleState {
  double x = 0, y = 0;
  double heading = 0;  // wrapped to (-pi, pi]
  double speed = 0;    // >= 0
};

struct DynamicsCounters {
  long clamped_steer = 0;
  long clamped_throttle = 0;
};

double wrap_angle(double a);

// Kinematic bicycle step. steer and throttle are clamped to [-1,1] / [0,1]
// (counted when a counter is supplied); dt outside (0, 0.2] is a ConfigError.
// Heading integrates at the midpoint so constant-steer paths track the
// analytic circle of radius L / tan(steer * max_steer_angle).
VehicleState step_dynamics(const VehicleState& s, double steer,
                           double throttle, double dt,
                           const SimParams& p = {},
                           DynamicsCounters* counters = nullptr);

// ---------------------------------------------------------------------------
// Routes

struct Waypoint {
  Vec2 pos;
  Command cmd = Command::follow_lane;
  double s = 0;  // cumulative arclength at this waypoint
};

struct Route {
  std::vector<Waypoint> wps;
  std::vector<int> node_path;  // traversed node ids, start..goal
  double length = 0;
  int start_node = -1;
  int goal_node = -1;
};

// Shortest node path (segment lengths as weights, seed breaks ties), then a
// lane-level waypoint polyline on the right-hand lane with 90-degree arc
// connectors inside intersections. Turn commands annotate every waypoint
// within annotation_radius of the traversed node; FollowLane elsewhere.
// Throws SimError when goal is unreachable or equals start.
Route plan_route(const TownMap& town, int start_node, int goal_node,
                 std::uint64_t seed, const SimParams& p = {});

// Monotone progress cursor along a route; never jumps backwards, advances at
// most a bounded window per update so self-near routes cannot teleport it.
class RouteTracker {
 public:
  explicit RouteTracker(const Route* route);

  void update(Vec2 pos);
  double progress() const { return progress_; }
  double lateral(Vec2 pos) const;           // distance to the local route chord
  Command command() const;
  Vec2 point_at(double s) const;            // clamped arclength lookup
  bool finished(Vec2 pos, double goal_radius) const;

 private:
  const Route* route_;
  std::size_t idx_ = 0;
  double progress_ = 0;
};

// ---------------------------------------------------------------------------
// Controllers

struct ControlOutput {
  double steer = 0;        // applied to dynamics, in [-1,1]
  double throttle = 1;     // in [0,1]
  double label_steer = 0;  // training label (differs under noise injection)
  std::vector<double> attention;  // per-region weights when the policy exposes them
};

class Controller {
 public:
  virtual ~Controller() = default;
  virtual ControlOutput control(const nn::Tensor& frame,
                                const VehicleState& state, Command cmd) = 0;
  // Called once per step before control() with the scripted agents' states.
  virtual void observe_agents(std::span<const VehicleState> /*agents*/) {}
  // Latched failure flag (expert beyond recovery distance).
  virtual bool failed() const { return false; }
};

// Pure-pursuit lane follower; yields (throttle to a crawl) when a scripted
// agent is close ahead. Ignores the rendered frame.
class ExpertDriver : public Controller {
 public:
  ExpertDriver(const Route* route, const SimParams& p);

  ControlOutput control(const nn::Tensor& frame, const VehicleState& state,
                        Command cmd) override;
  void observe_agents(std::span<const VehicleState> agents) override;
  bool failed() const override { return failed_; }
  const RouteTracker& tracker() const { return tracker_; }

 private:
  SimParams p_;
  RouteTracker tracker_;
  bool failed_ = false;
  std::vector<VehicleState> agents_;
};

// Stateless pure-pursuit steering toward tracker's lookahead point.
double pure_pursuit_steer(const VehicleState& state,
                          const RouteTracker& tracker, const SimParams& p);

// Two-stage yield law shared by the expert and the learned-policy throttle:
// full stop when an agent sits within 4 m directly ahead, crawl while it is
// inside the yield zone, otherwise the base throttle.
double yield_throttle(double base, const VehicleState& self,
                      std::span<const VehicleState> agents,
                      const SimParams& p);

// Wraps an expert with seeded triangular steering perturbations; the applied
// steer carries the pulse while label_steer stays the expert's clean output,
// so recorded demonstrations teach recovery.
class NoisyExpert : public Controller {
 public:
  NoisyExpert(const Route* route, const SimParams& p, std::uint64_t seed,
              double max_amplitude = 0.3);

  ControlOutput control(const nn::Tensor& frame, const VehicleState& state,
                        Command cmd) override;
  void observe_agents(std::span<const VehicleState> agents) override;
  bool failed() const override { return inner_.failed(); }

 private:
  ExpertDriver inner_;
  Rng rng_;
  double dt_;
  double max_amplitude_;
  double pulse_time_ = 0;      // seconds into the current pulse, -1 when idle
  double pulse_duration_ = 0;
  double pulse_peak_ = 0;
  double next_pulse_in_ = 0;   // countdown to the next pulse
};

// ---------------------------------------------------------------------------
// Rendering

struct AgentBox {
  Vec2 pos;
  double heading = 0;
  int color_id = 0;
};

// Weather presets: 0..3 are the training set, 4..5 the held-out test set.
inline constexpr int kWeatherCount = 6;
inline constexpr int kTrainWeatherCount = 4;
const char* weather_name(int id);  // ConfigError outside [0, kWeatherCount)

struct RenderConfig {
  int w = 192, h = 88;
  int weather = 0;
  double cam_height = 1.6;     // meters above ground
  double cam_forward = 1.5;    // camera ahead of the vehicle center
  double focal_y = 90.0;       // row -> ground distance scale
  double horizon_frac = 0.34;  // horizon row as a fraction of height
  double max_depth = 60.0;     // ground draw distance
};

// Forward-facing pseudo-perspective view of the town around `state`:
// ground-plane projection per pixel with analytic surface classification
// (asphalt, markings, sidewalks, blocks, agent boxes) plus sky, fog, and the
// weather preset. Deterministic; values in [0,1]; layout {W,H,3}.
// Throws ConfigError when the resolution fails backbone geometry validation
// or the weather id is unknown.
nn::Tensor render(const TownMap& town, const VehicleState& state,
                  const RenderConfig& rc, std::span<const AgentBox> agents = {});

// Distance from p to the drivable surface (0 inside roads or intersection
// pads); used for off-road detection and tested directly.
double drivable_distance(const TownMap& town, Vec2 p);

// ---------------------------------------------------------------------------
// Episodes

struct ScriptedAgent {
  Route route;
  double speed_scale = 1.0;  // fraction of target speed
  int color_id = 1;
};

struct EpisodeLimits {
  int max_steps = 0;
  double goal_radius = 3.0;
  bool render_frames = true;  // false skips rendering (frame-free controllers)
};

// Budget rule: twice the ideal driving time at target speed.
EpisodeLimits default_limits(const Route& route, const SimParams& p = {});

struct StepRecord {
  int step = 0;
  const nn::Tensor* frame = nullptr;  // null when rendering is disabled
  VehicleState state;
  Command cmd = Command::follow_lane;
  ControlOutput out;
  bool offroad = false;    // center off the paved surface (within margin)
  bool collision = false;  // in contact with a scripted agent this step
};
using FrameSink = std::function<void(const StepRecord&)>;

struct EpisodeResult {
  bool success = false;
  int steps = 0;
  double sim_time = 0;
  double completion = 0;  // fraction of route arclength covered, [0,1]
  bool off_road = false;
  bool timeout = false;
  bool expert_failure = false;
  int collisions = 0;
  std::string error;  // controller exception diagnostic
  VehicleState final_state;
};

// Steps the closed loop at fixed dt: render -> controller -> dynamics ->
// scripted agents. Success iff the goal radius is reached within the step
// budget without ever leaving the drivable surface. Controller exceptions
// mark the episode failed with a diagnostic instead of propagating.
EpisodeResult run_episode(Controller& controller, const TownMap& town,
                          const Route& route, const EpisodeLimits& limits,
                          const SimParams& p = {}, const RenderConfig& rc = {},
                          std::vector<ScriptedAgent> agents = {},
                          const FrameSink& sink = {});

}  // namespace attdrive::sim
