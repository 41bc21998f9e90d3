#include "attdrive/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <set>
#include <sstream>
#include <utility>

#include <Eigen/Dense>
#include <json.hpp>

#include "attdrive/errors.hpp"
#include "attdrive/rng.hpp"

namespace attdrive::bench {

using nlohmann::ordered_json;

const char* task_name(Task t) {
  switch (t) {
    case Task::straight: return "straight";
    case Task::one_turn: return "one_turn";
    case Task::navigation: return "navigation";
    case Task::navigation_dynamic: return "navigation_dynamic";
  }
  throw ConfigError("task_name: bad enum value");
}

const char* condition_name(Condition c) {
  switch (c) {
    case Condition::train_town_seen: return "train_town_seen";
    case Condition::train_town_unseen: return "train_town_unseen";
    case Condition::test_town_seen: return "test_town_seen";
    case Condition::test_town_unseen: return "test_town_unseen";
  }
  throw ConfigError("condition_name: bad enum value");
}

std::string route_id(const TownSpec& town, int start, int goal,
                     std::uint64_t route_seed) {
  return town.tag + "#" + std::to_string(town.seed) + ":" +
         std::to_string(start) + "-" + std::to_string(goal) + "#" +
         std::to_string(route_seed);
}

// ---------------------------------------------------------------------------
// Suite construction

namespace {

bool is_test_town(Condition c) {
  return c == Condition::test_town_seen || c == Condition::test_town_unseen;
}

bool is_seen_weather(Condition c) {
  return c == Condition::train_town_seen || c == Condition::test_town_seen;
}

// Number of maximal turn-command groups along the route.
int turn_group_count(const sim::Route& route) {
  int groups = 0;
  policy::Command prev = policy::Command::follow_lane;
  for (const sim::Waypoint& w : route.wps) {
    const bool turn = w.cmd == policy::Command::turn_left ||
                      w.cmd == policy::Command::turn_right;
    if (turn && w.cmd != prev) ++groups;
    prev = w.cmd;
  }
  return groups;
}

Task classify_route(const sim::Route& route) {
  const int turns = turn_group_count(route);
  if (turns == 0) return Task::straight;
  if (turns == 1) return Task::one_turn;
  return Task::navigation;
}

std::uint64_t pair_route_seed(std::uint64_t suite_seed, const TownSpec& town,
                              int s, int g) {
  return Rng::mix(Rng::mix(suite_seed, town.seed),
                  static_cast<std::uint64_t>(s) * 1000 +
                      static_cast<std::uint64_t>(g));
}

struct RoutePool {
  // Candidate (start, goal) pairs per route class, in seeded shuffle order.
  std::array<std::vector<std::pair<int, int>>, 3> buckets;
  const sim::TownMap* town = nullptr;
};

RoutePool classify_town_routes(const sim::TownMap& town, const TownSpec& spec,
                               std::uint64_t suite_seed,
                               const sim::SimParams& p) {
  RoutePool pool;
  pool.town = &town;
  std::vector<std::pair<int, int>> pairs;
  const int n = static_cast<int>(town.nodes.size());
  for (int s = 0; s < n; ++s)
    for (int g = 0; g < n; ++g)
      if (s != g) pairs.emplace_back(s, g);
  Rng rng(Rng::mix(suite_seed, Rng::mix(spec.seed, 0x706f6f6cULL)));
  rng.shuffle(pairs.begin(), pairs.end());
  for (const auto& [s, g] : pairs) {
    sim::Route route;
    try {
      route = sim::plan_route(town, s, g, pair_route_seed(suite_seed, spec, s, g), p);
    } catch (const SimError&) {
      continue;
    }
    const Task t = classify_route(route);
    pool.buckets[static_cast<std::size_t>(t)].emplace_back(s, g);
  }
  return pool;
}

// Directed lane edges of a node path, for overlap checks.
std::set<std::pair<int, int>> directed_edges(const std::vector<int>& path) {
  std::set<std::pair<int, int>> edges;
  for (std::size_t i = 0; i + 1 < path.size(); ++i)
    edges.insert({path[i], path[i + 1]});
  return edges;
}

double min_distance_to_route(const Vec2& pos, const sim::Route& route) {
  double best = std::numeric_limits<double>::infinity();
  for (const sim::Waypoint& w : route.wps)
    best = std::min(best, (w.pos - pos).norm());
  return best;
}

// Scripted cross-traffic for one dynamic episode: routes that cross the ego
// path at nodes but never share a directed lane edge, ending well clear of
// the ego route so a parked agent cannot wall off the goal.
std::vector<AgentSpec> place_agents(const sim::TownMap& town,
                                    const sim::Route& ego, int count,
                                    std::uint64_t seed,
                                    const sim::SimParams& p) {
  const auto ego_edges = directed_edges(ego.node_path);
  const std::set<int> ego_nodes(ego.node_path.begin(), ego.node_path.end());
  const Vec2 ego_start = ego.wps.front().pos;

  std::vector<std::pair<int, int>> pairs;
  const int n = static_cast<int>(town.nodes.size());
  for (int s = 0; s < n; ++s)
    for (int g = 0; g < n; ++g)
      if (s != g) pairs.emplace_back(s, g);
  Rng rng(Rng::mix(seed, 0x6167656eULL));
  rng.shuffle(pairs.begin(), pairs.end());

  std::vector<AgentSpec> agents;
  std::set<int> used_starts;
  for (const auto& [s, g] : pairs) {
    if (static_cast<int>(agents.size()) == count) break;
    if (used_starts.count(s)) continue;
    if (s == ego.start_node) continue;
    if (ego_nodes.count(g)) continue;
    const std::uint64_t route_seed =
        Rng::mix(seed, static_cast<std::uint64_t>(s) * 997 +
                           static_cast<std::uint64_t>(g));
    sim::Route route;
    try {
      route = sim::plan_route(town, s, g, route_seed, p);
    } catch (const SimError&) {
      continue;
    }
    // Must actually meet the ego path (cross traffic), but never ride the
    // same directed lane, and must finish away from it.
    bool crosses = false;
    for (int node : route.node_path)
      if (ego_nodes.count(node)) crosses = true;
    if (!crosses) continue;
    bool shares_edge = false;
    for (const auto& e : directed_edges(route.node_path))
      if (ego_edges.count(e)) shares_edge = true;
    if (shares_edge) continue;
    if (min_distance_to_route(route.wps.back().pos, ego) <
        p.yield_distance + 4.0)
      continue;
    if ((route.wps.front().pos - ego_start).norm() < 10.0) continue;

    AgentSpec a;
    a.start_node = s;
    a.goal_node = g;
    a.route_seed = route_seed;
    a.speed_scale = agents.size() % 2 == 0 ? 0.7 : 0.55;
    a.color_id = 1 + static_cast<int>(agents.size() % 4);
    agents.push_back(a);
    used_starts.insert(s);
  }
  if (static_cast<int>(agents.size()) < count)
    throw SimError("place_agents: only " + std::to_string(agents.size()) +
                   " of " + std::to_string(count) +
                   " cross-traffic agents fit this route");
  return agents;
}

}  // namespace

BenchmarkSuite build_suite(const SuiteConfig& cfg) {
  if (cfg.episodes_per_cell < 1)
    throw ConfigError("build_suite: episodes_per_cell must be >= 1");
  if (cfg.town_a.tag == cfg.town_b.tag)
    throw ConfigError("build_suite: towns need distinct tags");
  const sim::SimParams p;
  BenchmarkSuite suite;
  suite.seed = cfg.seed;
  suite.town_a = cfg.town_a;
  suite.town_b = cfg.town_b;

  const sim::TownMap town_a =
      sim::build_town(cfg.town_a.seed, cfg.town_a.blocks_w, cfg.town_a.blocks_h);
  const sim::TownMap town_b =
      sim::build_town(cfg.town_b.seed, cfg.town_b.blocks_w, cfg.town_b.blocks_h);
  const RoutePool pool_a = classify_town_routes(town_a, cfg.town_a, cfg.seed, p);
  const RoutePool pool_b = classify_town_routes(town_b, cfg.town_b, cfg.seed, p);

  for (int ti = 0; ti < kTaskCount; ++ti) {
    const Task task = static_cast<Task>(ti);
    // The dynamic task reuses navigation-grade routes.
    const std::size_t bucket =
        task == Task::navigation_dynamic
            ? static_cast<std::size_t>(Task::navigation)
            : static_cast<std::size_t>(task);
    // Walk each town's candidate list with its own cursor so the two
    // same-town conditions get distinct routes when possible.
    std::size_t cursor_a = 0, cursor_b = 0;
    for (int ci = 0; ci < kConditionCount; ++ci) {
      const Condition cond = static_cast<Condition>(ci);
      if (cfg.town_a_only && is_test_town(cond)) continue;
      const bool town_is_b = is_test_town(cond);
      const TownSpec& spec = town_is_b ? cfg.town_b : cfg.town_a;
      const sim::TownMap& town = town_is_b ? town_b : town_a;
      const auto& candidates =
          (town_is_b ? pool_b : pool_a).buckets[bucket];
      std::size_t& cursor = town_is_b ? cursor_b : cursor_a;
      for (int k = 0; k < cfg.episodes_per_cell; ++k) {
        if (candidates.empty())
          throw SimError(std::string("build_suite: town '") + spec.tag +
                         "' has no routes for task " + task_name(task));
        const auto [s, g] = candidates[cursor % candidates.size()];
        ++cursor;
        BenchEpisode e;
        e.task = task;
        e.condition = cond;
        e.start_node = s;
        e.goal_node = g;
        e.route_seed = pair_route_seed(cfg.seed, spec, s, g);
        e.weather = is_seen_weather(cond)
                        ? k % sim::kTrainWeatherCount
                        : sim::kTrainWeatherCount +
                              k % (sim::kWeatherCount - sim::kTrainWeatherCount);
        e.route_id = route_id(spec, s, g, e.route_seed);
        e.id = std::string(task_name(task)) + "/" + condition_name(cond) +
               "/" + std::to_string(k);
        if (task == Task::navigation_dynamic) {
          const sim::Route ego =
              sim::plan_route(town, s, g, e.route_seed, p);
          e.agents = place_agents(
              town, ego, cfg.agents_per_dynamic,
              Rng::mix(cfg.seed, e.route_seed), p);
        }
        suite.episodes.push_back(std::move(e));
      }
    }
  }
  return suite;
}

void validate_suite(const BenchmarkSuite& suite,
                    const data::Manifest* training_manifest,
                    int min_per_task) {
  std::array<int, kTaskCount> counts{};
  for (const BenchEpisode& e : suite.episodes) {
    counts[static_cast<std::size_t>(e.task)]++;
    if (e.weather < 0 || e.weather >= sim::kWeatherCount)
      throw ConfigError("validate_suite: bad weather in " + e.id);
    if (is_seen_weather(e.condition) != (e.weather < sim::kTrainWeatherCount))
      throw ConfigError("validate_suite: weather/condition mismatch in " +
                        e.id);
    if (e.task == Task::navigation_dynamic && e.agents.empty())
      throw ConfigError("validate_suite: dynamic episode without agents: " +
                        e.id);
  }
  for (int t = 0; t < kTaskCount; ++t)
    if (counts[static_cast<std::size_t>(t)] < min_per_task)
      throw ConfigError(std::string("validate_suite: task ") +
                        task_name(static_cast<Task>(t)) + " has " +
                        std::to_string(counts[static_cast<std::size_t>(t)]) +
                        " episodes, needs >= " + std::to_string(min_per_task));
  if (training_manifest) {
    std::set<std::string> train_routes;
    for (const auto& ep : training_manifest->episodes)
      train_routes.insert(ep.route_id);
    for (const BenchEpisode& e : suite.episodes)
      if (is_test_town(e.condition) && train_routes.count(e.route_id))
        throw ConfigError("validate_suite: test-town route " + e.route_id +
                          " appears in the training manifest");
  }
}

// ---------------------------------------------------------------------------
// Benchmark execution

double BenchReport::task_success_pct(Task t) const {
  int n = 0, s = 0;
  for (const auto& cell : cells[static_cast<std::size_t>(t)]) {
    n += cell.episodes;
    s += cell.successes;
  }
  return n == 0 ? 0.0 : 100.0 * s / n;
}

double BenchReport::average_success_pct() const {
  double sum = 0.0;
  int tasks = 0;
  for (int t = 0; t < kTaskCount; ++t) {
    int n = 0;
    for (const auto& cell : cells[static_cast<std::size_t>(t)])
      n += cell.episodes;
    if (n == 0) continue;
    sum += task_success_pct(static_cast<Task>(t));
    ++tasks;
  }
  return tasks == 0 ? 0.0 : sum / tasks;
}

std::string BenchReport::to_text() const {
  std::ostringstream os;
  os << "task                 ";
  for (int c = 0; c < kConditionCount; ++c)
    os << " | " << condition_name(static_cast<Condition>(c));
  os << "\n";
  for (int t = 0; t < kTaskCount; ++t) {
    char row[64];
    std::snprintf(row, sizeof row, "%-21s", task_name(static_cast<Task>(t)));
    os << row;
    for (int c = 0; c < kConditionCount; ++c) {
      const CellStats& cell =
          cells[static_cast<std::size_t>(t)][static_cast<std::size_t>(c)];
      char buf[40];
      if (cell.episodes == 0)
        std::snprintf(buf, sizeof buf, " | %15s", "-");
      else
        std::snprintf(buf, sizeof buf, " | %6.1f%% (%d/%d)",
                      cell.success_pct(), cell.successes, cell.episodes);
      os << buf;
    }
    os << "\n";
  }
  char avg[64];
  std::snprintf(avg, sizeof avg, "average success: %.2f%%\n",
                average_success_pct());
  os << avg;
  return os.str();
}

std::string BenchReport::to_json() const {
  ordered_json j;
  j["average_success_pct"] = average_success_pct();
  ordered_json tasks = ordered_json::object();
  for (int t = 0; t < kTaskCount; ++t) {
    ordered_json row = ordered_json::object();
    for (int c = 0; c < kConditionCount; ++c) {
      const CellStats& cell =
          cells[static_cast<std::size_t>(t)][static_cast<std::size_t>(c)];
      ordered_json cj;
      cj["episodes"] = cell.episodes;
      cj["successes"] = cell.successes;
      cj["success_pct"] = cell.success_pct();
      cj["collisions"] = cell.collisions;
      cj["mean_completion"] =
          cell.episodes == 0 ? 0.0 : cell.completion_sum / cell.episodes;
      row[condition_name(static_cast<Condition>(c))] = cj;
    }
    tasks[task_name(static_cast<Task>(t))] = row;
  }
  j["tasks"] = tasks;
  ordered_json eps = ordered_json::array();
  for (const EpisodeOutcome& e : episodes) {
    ordered_json ej;
    ej["id"] = e.id;
    ej["success"] = e.success;
    ej["completion"] = e.completion;
    ej["steps"] = e.steps;
    ej["collisions"] = e.collision_count;
    ej["offroad_events"] = e.offroad_count;
    eps.push_back(ej);
  }
  j["episodes"] = eps;
  return j.dump();
}

sim::ControlOutput PolicyController::control(const nn::Tensor& frame,
                                             const sim::VehicleState& state,
                                             policy::Command cmd) {
  const auto& mc = model_->config();
  if (!frame.defined() || frame.dims().size() != 3 ||
      frame.dim(0) != mc.input_w || frame.dim(1) != mc.input_h)
    throw SimError("PolicyController: expected a rendered " +
                   std::to_string(mc.input_w) + "x" +
                   std::to_string(mc.input_h) +
                   " frame (is rendering enabled at the right resolution?)");
  // Quantize to the canonical 8-bit sensor frame before inference; training
  // data went through exactly this path.
  const nn::Tensor input = to_tensor(quantize(frame));
  const policy::ForwardTrace trace = model_->forward(input, cmd);
  sim::ControlOutput out;
  out.steer = trace.steer;
  out.label_steer = trace.steer;
  out.throttle = sim::yield_throttle(1.0, state, agents_, p_);
  out.attention = trace.alpha;
  return out;
}

void PolicyController::observe_agents(
    std::span<const sim::VehicleState> agents) {
  agents_.assign(agents.begin(), agents.end());
}

BenchReport run_benchmark_with(const BenchmarkSuite& suite,
                               const ControllerFactory& make_controller,
                               bool render_frames, int render_w, int render_h,
                               const BenchOptions& opt) {
  const sim::SimParams& p = opt.params;
  const sim::TownMap town_a = sim::build_town(
      suite.town_a.seed, suite.town_a.blocks_w, suite.town_a.blocks_h);
  const sim::TownMap town_b = sim::build_town(
      suite.town_b.seed, suite.town_b.blocks_w, suite.town_b.blocks_h);

  BenchReport report;
  for (const BenchEpisode& e : suite.episodes) {
    const sim::TownMap& town = is_test_town(e.condition) ? town_b : town_a;
    const sim::Route route =
        sim::plan_route(town, e.start_node, e.goal_node, e.route_seed, p);
    std::vector<sim::ScriptedAgent> agents;
    for (const AgentSpec& a : e.agents) {
      sim::ScriptedAgent sa;
      sa.route = sim::plan_route(town, a.start_node, a.goal_node, a.route_seed, p);
      sa.speed_scale = a.speed_scale;
      sa.color_id = a.color_id;
      agents.push_back(std::move(sa));
    }
    sim::EpisodeLimits limits = sim::default_limits(route, p);
    limits.goal_radius = 2.0;  // benchmark success radius
    limits.render_frames = render_frames;
    sim::RenderConfig rc;
    rc.w = render_w;
    rc.h = render_h;
    rc.weather = e.weather;

    std::unique_ptr<sim::Controller> controller =
        make_controller(e, town, route);
    EpisodeOutcome out;
    out.id = e.id;
    out.task = e.task;
    out.condition = e.condition;
    bool was_offroad = false;
    const sim::FrameSink sink = [&](const sim::StepRecord& rec) {
      if (rec.offroad && !was_offroad) ++out.offroad_count;
      was_offroad = rec.offroad;
      if (opt.log_attention && !rec.out.attention.empty())
        out.attention_log.push_back(rec.out.attention);
    };
    const sim::EpisodeResult res = sim::run_episode(
        *controller, town, route, limits, p, rc, std::move(agents), sink);
    if (!res.error.empty())
      throw SimError("benchmark episode " + e.id +
                     " raised: " + res.error);
    out.success = res.success;
    out.completion = res.completion;
    out.steps = res.steps;
    out.collision_count = res.collisions;

    CellStats& cell = report.cells[static_cast<std::size_t>(e.task)]
                                  [static_cast<std::size_t>(e.condition)];
    ++cell.episodes;
    cell.successes += out.success ? 1 : 0;
    cell.collisions += out.collision_count;
    cell.completion_sum += out.completion;
    report.episodes.push_back(std::move(out));
  }
  return report;
}

BenchReport run_benchmark(const policy::PolicyModel& model,
                          const BenchmarkSuite& suite,
                          const BenchOptions& opt) {
  const ControllerFactory factory =
      [&model, &opt](const BenchEpisode&, const sim::TownMap&,
                     const sim::Route&) -> std::unique_ptr<sim::Controller> {
    return std::make_unique<PolicyController>(&model, opt.params);
  };
  return run_benchmark_with(suite, factory, /*render_frames=*/true,
                            model.config().input_w, model.config().input_h,
                            opt);
}

// ---------------------------------------------------------------------------
// Attention overlays

std::array<double, 3> command_color(policy::Command c) {
  switch (c) {
    case policy::Command::follow_lane: return {0.0, 1.0, 0.0};   // green
    case policy::Command::go_straight: return {1.0, 1.0, 0.0};   // yellow
    case policy::Command::turn_left: return {1.0, 0.0, 0.0};     // red
    case policy::Command::turn_right: return {0.0, 1.0, 1.0};    // cyan
  }
  throw ConfigError("command_color: bad enum value");
}

double tent_profile(const Rect& r, int x, int y) {
  if (x < r.x0 || x >= r.x1 || y < r.y0 || y >= r.y1) return 0.0;
  const double u = (x + 0.5 - r.x0) / (r.x1 - r.x0);
  const double v = (y + 0.5 - r.y0) / (r.y1 - r.y0);
  return (1.0 - std::abs(2.0 * u - 1.0)) * (1.0 - std::abs(2.0 * v - 1.0));
}

Overlay render_attention_overlay(const Image8& frame, const roi::RoIGrid& grid,
                                 std::span<const double> alpha,
                                 policy::Command command,
                                 const std::string& out_path) {
  if (alpha.size() != grid.regions.size())
    throw ConfigError("render_attention_overlay: " +
                      std::to_string(alpha.size()) + " weights for " +
                      std::to_string(grid.regions.size()) + " regions");
  double sum = 0.0;
  for (double a : alpha) sum += a;
  if (std::abs(sum - 1.0) > 1e-6)
    throw ConfigError("render_attention_overlay: alpha sums to " +
                      std::to_string(sum) + ", expected 1");

  const int w = frame.w, h = frame.h;
  Overlay ov;
  ov.shade = nn::Tensor({w, h});
  std::span<double> shade = ov.shade.data();
  for (std::size_t i = 0; i < grid.regions.size(); ++i) {
    const Rect r = roi::project_region(grid.regions[i], w, h);
    for (int x = r.x0; x < r.x1; ++x)
      for (int y = r.y0; y < r.y1; ++y)
        shade[static_cast<std::size_t>(x) * h + y] +=
            alpha[i] * tent_profile(r, x, y);
  }
  double peak = 0.0;
  for (double s : shade) peak = std::max(peak, s);
  if (peak > 0.0)
    for (double& s : shade) s /= peak;

  const std::array<double, 3> color = command_color(command);
  nn::Tensor blended({w, h, 3});
  for (int x = 0; x < w; ++x)
    for (int y = 0; y < h; ++y) {
      const double s = shade[static_cast<std::size_t>(x) * h + y];
      for (int c = 0; c < 3; ++c) {
        const double base = frame.at(x, y, c) / 255.0;
        blended.data()[nn::Tensor::at3(h, 3, x, y, c)] =
            base * (1.0 - 0.5 * s) + color[static_cast<std::size_t>(c)] * 0.5 * s;
      }
    }
  ov.image = quantize(blended);
  if (!out_path.empty()) write_ppm(out_path, ov.image);
  return ov;
}

std::vector<double> decode_region_shades(const nn::Tensor& shade,
                                         const roi::RoIGrid& grid) {
  if (shade.dims().size() != 2)
    throw ShapeError("decode_region_shades: shade map must be {W,H}");
  const int w = shade.dim(0), h = shade.dim(1);
  const int R = static_cast<int>(grid.regions.size());
  if (R == 0) throw ConfigError("decode_region_shades: empty grid");
  const std::size_t pixels = static_cast<std::size_t>(w) * h;

  Eigen::MatrixXd T(static_cast<Eigen::Index>(pixels), R);
  for (int i = 0; i < R; ++i) {
    const Rect r =
        roi::project_region(grid.regions[static_cast<std::size_t>(i)], w, h);
    for (int x = 0; x < w; ++x)
      for (int y = 0; y < h; ++y)
        T(static_cast<Eigen::Index>(x) * h + y, i) = tent_profile(r, x, y);
  }
  Eigen::VectorXd s(static_cast<Eigen::Index>(pixels));
  std::copy(shade.data().begin(), shade.data().end(), s.data());

  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(T);
  if (qr.rank() < R)
    throw NumericError(
        "decode_region_shades: region profiles are rank-deficient at " +
        std::to_string(w) + "x" + std::to_string(h));
  Eigen::VectorXd x = qr.solve(s);
  const double total = x.sum();
  if (total > 0.0) x /= total;
  return {x.data(), x.data() + R};
}

namespace {

std::vector<double> tolerant_ranks(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  double scale = 1.0;
  for (double x : v) scale = std::max(scale, std::abs(x));
  const double tol = 1e-9 * scale;
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] - v[idx[i]] <= tol) ++j;
    const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j));
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double rank_correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2)
    throw ConfigError("rank_correlation: need two equally sized vectors");
  const std::vector<double> ra = tolerant_ranks(a);
  const std::vector<double> rb = tolerant_ranks(b);
  if (ra == rb) return 1.0;  // identical orderings are exactly 1
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0)
    throw NumericError("rank_correlation: constant input has no ranking");
  return cov / std::sqrt(va * vb);
}

// ---------------------------------------------------------------------------
// Ablation & variant comparison

roi::GridConfig grid_without(const roi::GridConfig& base,
                             roi::BoxType removed) {
  roi::GridConfig g = base;
  switch (removed) {
    case roi::BoxType::bigV: g.big_v = 0; break;
    case roi::BoxType::bigH: g.big_h = 0; break;
    case roi::BoxType::medium: g.medium = 0; break;
    case roi::BoxType::small: g.small = 0; break;
  }
  return g;
}

AblationResult ablation_box_removal(const train::TrainConfig& base,
                                    roi::BoxType removed,
                                    const SuiteConfig& suite_config,
                                    const BenchOptions& opt) {
  train::TrainConfig cfg = base;
  if (!cfg.custom_regions.empty())
    throw ConfigError("ablation_box_removal: custom region grids not supported");
  cfg.grid = grid_without(cfg.grid, removed);
  const roi::RoIGrid grid = roi::generate_grid(cfg.grid);
  if (grid.regions.empty())
    throw ConfigError("ablation_box_removal: no regions left after removing " +
                      std::string(roi::box_type_name(removed)));
  cfg.out_dir = base.out_dir + "/ablate_" + roi::box_type_name(removed);

  AblationResult res;
  res.removed = removed;
  res.region_count = static_cast<int>(grid.regions.size());
  res.training = train::train(cfg);
  if (res.training.diverged || res.training.final_checkpoint.empty())
    throw NumericError("ablation_box_removal: training diverged: " +
                       res.training.divergence_message);
  res.checkpoint = res.training.final_checkpoint;

  SuiteConfig sc = suite_config;
  sc.town_a_only = true;  // Table-5 style: all episodes from the train town
  const BenchmarkSuite suite = build_suite(sc);
  const train::LoadedCheckpoint lc = train::load_checkpoint(res.checkpoint);
  res.bench = run_benchmark(lc.model, suite, opt);
  return res;
}

namespace {

void require_match(bool ok, const std::string& field, const std::string& a,
                   const std::string& b) {
  if (!ok)
    throw ConfigError("compare_variants: training configs differ in " + field +
                      " (" + a + " vs " + b + ")");
}

void check_like_for_like(const train::LoadedCheckpoint& first,
                         const train::LoadedCheckpoint& other) {
  const auto& ca = first.model.config();
  const auto& cb = other.model.config();
  require_match(ca.input_w == cb.input_w && ca.input_h == cb.input_h,
                "input resolution",
                std::to_string(ca.input_w) + "x" + std::to_string(ca.input_h),
                std::to_string(cb.input_w) + "x" + std::to_string(cb.input_h));
  require_match(ca.grid.big_v == cb.grid.big_v &&
                    ca.grid.big_h == cb.grid.big_h &&
                    ca.grid.medium == cb.grid.medium &&
                    ca.grid.small == cb.grid.small,
                "grid config", "", "");
  require_match(ca.custom_regions.size() == cb.custom_regions.size(),
                "custom regions", std::to_string(ca.custom_regions.size()),
                std::to_string(cb.custom_regions.size()));
  require_match(first.model.init_seed() == other.model.init_seed(), "seed",
                std::to_string(first.model.init_seed()),
                std::to_string(other.model.init_seed()));
  const auto& sa = first.state;
  const auto& sb = other.state;
  require_match(sa.adam.lr == sb.adam.lr, "lr", std::to_string(sa.adam.lr),
                std::to_string(sb.adam.lr));
  require_match(sa.echo_epochs == sb.echo_epochs, "epochs",
                std::to_string(sa.echo_epochs), std::to_string(sb.echo_epochs));
  require_match(sa.echo_batch_size == sb.echo_batch_size, "batch size",
                std::to_string(sa.echo_batch_size),
                std::to_string(sb.echo_batch_size));
  require_match(sa.echo_seed == sb.echo_seed, "train seed",
                std::to_string(sa.echo_seed), std::to_string(sb.echo_seed));
  require_match(sa.echo_grad_clip == sb.echo_grad_clip, "grad clip",
                std::to_string(sa.echo_grad_clip),
                std::to_string(sb.echo_grad_clip));
  require_match(sa.echo_data_root == sb.echo_data_root, "data root",
                sa.echo_data_root, sb.echo_data_root);
}

}  // namespace

std::string CompareReport::to_text() const {
  std::ostringstream os;
  for (const VariantResult& v : variants) {
    os << "== variant " << policy::variant_name(v.variant) << " ("
       << v.checkpoint << ")\n"
       << v.report.to_text();
  }
  const auto gap = [&os](const char* label, const std::optional<double>& g) {
    if (!g) return;
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s: %+.2f points\n", label, *g);
    os << buf;
  };
  gap("full - no_attention (average success)", full_minus_no_attention_avg);
  gap("independent_roi - full (straight)", indep_minus_full_straight);
  gap("full - independent_roi (one turn)", full_minus_indep_one_turn);
  return os.str();
}

std::string CompareReport::to_json() const {
  ordered_json j;
  ordered_json vs = ordered_json::array();
  for (const VariantResult& v : variants) {
    ordered_json vj;
    vj["variant"] = policy::variant_name(v.variant);
    vj["checkpoint"] = v.checkpoint;
    vj["report"] = nlohmann::json::parse(v.report.to_json());
    vs.push_back(vj);
  }
  j["variants"] = vs;
  const auto put_gap = [&j](const char* key, const std::optional<double>& g) {
    j[key] = g ? ordered_json(*g) : ordered_json(nullptr);
  };
  put_gap("full_minus_no_attention_avg", full_minus_no_attention_avg);
  put_gap("indep_minus_full_straight", indep_minus_full_straight);
  put_gap("full_minus_indep_one_turn", full_minus_indep_one_turn);
  return j.dump();
}

CompareReport compare_variants(const std::vector<std::string>& checkpoints,
                               const BenchmarkSuite& suite,
                               const BenchOptions& opt) {
  if (checkpoints.size() < 2)
    throw ConfigError("compare_variants: need at least two checkpoints");
  std::vector<train::LoadedCheckpoint> loaded;
  loaded.reserve(checkpoints.size());
  for (const std::string& path : checkpoints)
    loaded.push_back(train::load_checkpoint(path));
  for (std::size_t i = 1; i < loaded.size(); ++i)
    check_like_for_like(loaded.front(), loaded[i]);

  CompareReport report;
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    VariantResult vr;
    vr.checkpoint = checkpoints[i];
    vr.variant = loaded[i].model.config().variant;
    vr.report = run_benchmark(loaded[i].model, suite, opt);
    report.variants.push_back(std::move(vr));
  }

  const auto find = [&report](policy::Variant v) -> const BenchReport* {
    for (const VariantResult& vr : report.variants)
      if (vr.variant == v) return &vr.report;
    return nullptr;
  };
  const BenchReport* full = find(policy::Variant::full_attention);
  const BenchReport* noatt = find(policy::Variant::no_attention);
  const BenchReport* indep = find(policy::Variant::independent_roi);
  if (full && noatt)
    report.full_minus_no_attention_avg =
        full->average_success_pct() - noatt->average_success_pct();
  if (full && indep) {
    report.indep_minus_full_straight =
        indep->task_success_pct(Task::straight) -
        full->task_success_pct(Task::straight);
    report.full_minus_indep_one_turn =
        full->task_success_pct(Task::one_turn) -
        indep->task_success_pct(Task::one_turn);
  }
  return report;
}

}  // namespace attdrive::bench
