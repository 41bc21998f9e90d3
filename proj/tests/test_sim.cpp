#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <queue>
#include <vector>

#include "attdrive/errors.hpp"
#include "attdrive/sim.hpp"

using namespace attdrive;
using namespace attdrive::sim;

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

// Two far-apart intersection pads joined by one long straight vertical road;
// symmetric about the origin, no blocks, so views from the road center are
// exactly mirror-symmetric.
TownMap micro_straight() {
  TownMap t;
  t.seed = 0;
  t.name = "micro";
  t.lane_half_width = 2.0;
  t.nodes.resize(2);
  t.nodes[0].pos = {0, -200};
  t.nodes[1].pos = {0, 200};
  Segment s;
  s.node_a = 0;
  s.node_b = 1;
  s.axis = 1;
  s.a = {0, -193};
  s.b = {0, 193};
  t.nodes[0].branch[kNorth] = 0;
  t.nodes[1].branch[kSouth] = 0;
  t.segments.push_back(s);
  return t;
}

// Hand-built straight route along +y on lane x = 0, for controller tests.
Route straight_route(double length) {
  Route r;
  const int n = static_cast<int>(length);
  for (int i = 0; i <= n; ++i) {
    Waypoint w;
    w.pos = {0, static_cast<double>(i)};
    w.s = i;
    r.wps.push_back(w);
  }
  r.length = length;
  return r;
}

// Independent Dijkstra oracle over plain segment lengths.
double oracle_distance(const TownMap& t, int start, int goal) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(t.nodes.size(), inf);
  using QE = std::pair<double, int>;
  std::priority_queue<QE, std::vector<QE>, std::greater<>> q;
  dist[static_cast<std::size_t>(start)] = 0;
  q.push({0, start});
  while (!q.empty()) {
    auto [d, u] = q.top();
    q.pop();
    if (d > dist[static_cast<std::size_t>(u)]) continue;
    for (int dir = 0; dir < 4; ++dir) {
      const int si = t.nodes[static_cast<std::size_t>(u)].branch[static_cast<std::size_t>(dir)];
      if (si < 0) continue;
      const Segment& s = t.segments[static_cast<std::size_t>(si)];
      const int v = s.node_a == u ? s.node_b : s.node_a;
      if (d + s.length() < dist[static_cast<std::size_t>(v)]) {
        dist[static_cast<std::size_t>(v)] = d + s.length();
        q.push({dist[static_cast<std::size_t>(v)], v});
      }
    }
  }
  return dist[static_cast<std::size_t>(goal)];
}

double path_plain_length(const TownMap& t, const Route& r) {
  double sum = 0;
  for (std::size_t k = 0; k + 1 < r.node_path.size(); ++k) {
    const TownNode& u = t.nodes[static_cast<std::size_t>(r.node_path[k])];
    bool found = false;
    for (int dir = 0; dir < 4; ++dir) {
      const int si = u.branch[static_cast<std::size_t>(dir)];
      if (si < 0) continue;
      const Segment& s = t.segments[static_cast<std::size_t>(si)];
      const int other = s.node_a == r.node_path[k] ? s.node_b : s.node_a;
      if (other == r.node_path[k + 1]) {
        sum += s.length();
        found = true;
        break;
      }
    }
    REQUIRE(found);
  }
  return sum;
}

struct FnController : Controller {
  std::function<ControlOutput(const VehicleState&, Command)> fn;
  ControlOutput control(const nn::Tensor&, const VehicleState& s,
                        Command c) override {
    return fn(s, c);
  }
};

}  // namespace

TEST_SUITE_BEGIN("sim");

// ---------------------------------------------------------------------------
// Town construction and serialization

TEST_CASE("build_town: 2x2 blocks give 12 segments and 9 nodes") {
  const TownMap t = build_town(1, 2, 2);
  CHECK(t.nodes.size() == 9);
  CHECK(t.segments.size() == 12);
  CHECK(t.blocks.size() == 4);
  validate_town(t);
}

TEST_CASE("build_town: deterministic per seed, distinct across seeds") {
  const std::string a1 = town_to_text(build_town(7, 3, 3));
  const std::string a2 = town_to_text(build_town(7, 3, 3));
  const std::string b = town_to_text(build_town(8, 3, 3));
  CHECK(a1 == a2);
  CHECK(a1 != b);
}

TEST_CASE("build_town: degenerate sizes are refused, larger grids validate") {
  CHECK_THROWS_AS(build_town(1, 1, 2), ConfigError);
  CHECK_THROWS_AS(build_town(1, 2, 1), ConfigError);
  for (int bx = 2; bx <= 4; ++bx)
    for (int by = 2; by <= 4; ++by) {
      const TownMap t = build_town(99, bx, by);
      CHECK(t.nodes.size() ==
            static_cast<std::size_t>((bx + 1) * (by + 1)));
      CHECK(t.segments.size() ==
            static_cast<std::size_t>(bx * (by + 1) + by * (bx + 1)));
      validate_town(t);
    }
}

TEST_CASE("town text round trip is bit-exact and validates input") {
  const TownMap t = build_town(3, 3, 2);
  const std::string text = town_to_text(t);
  const TownMap back = town_from_text(text);
  CHECK(town_to_text(back) == text);
  CHECK_THROWS_AS(town_from_text("TOWN2\nseed 1\n"), IoError);
  CHECK_THROWS_AS(town_from_text(text.substr(0, text.size() / 2)), IoError);
}

TEST_CASE("validate_town rejects broken branch links and disconnection") {
  TownMap t = build_town(1, 2, 2);
  TownMap broken = t;
  broken.nodes[0].branch[kEast] = -1;  // orphan one segment end
  CHECK_THROWS_AS(validate_town(broken), SimError);

  TownMap island = micro_straight();
  island.nodes.push_back({{500, 500}, {-1, -1, -1, -1}});
  CHECK_THROWS_AS(validate_town(island), SimError);

  TownMap narrow = t;
  narrow.lane_half_width = 0.5;  // below the vehicle half-width
  CHECK_THROWS_AS(validate_town(narrow), SimError);
}

// ---------------------------------------------------------------------------
// Dynamics

TEST_CASE("step_dynamics: zero steer keeps heading, advances speed*dt") {
  const SimParams p;
  VehicleState s;
  s.x = 3;
  s.y = -2;
  s.heading = 0.7;
  s.speed = p.target_speed;
  const VehicleState n = step_dynamics(s, 0.0, 1.0, p.dt, p);
  CHECK(n.heading == s.heading);
  CHECK(n.speed == s.speed);  // throttle 1 at target speed is a fixed point
  const double disp = std::hypot(n.x - s.x, n.y - s.y);
  CHECK(disp == doctest::Approx(s.speed * p.dt).epsilon(1e-12));
}

TEST_CASE("step_dynamics: mirrored states and steering stay mirrored") {
  const SimParams p;
  VehicleState a, b;
  a.x = b.x = 1;
  a.y = 2, b.y = -2;
  a.heading = 0.9, b.heading = -0.9;
  a.speed = b.speed = 2.0;
  for (int k = 0; k < 400; ++k) {
    const double steer = std::sin(k * 0.1) * 0.8;
    a = step_dynamics(a, steer, 1.0, p.dt, p);
    b = step_dynamics(b, -steer, 1.0, p.dt, p);
    CHECK(std::abs(a.x - b.x) <= 1e-9);
    CHECK(std::abs(a.y + b.y) <= 1e-9);
    CHECK(std::abs(a.heading + b.heading) <= 1e-9);
    CHECK(a.speed == b.speed);
  }
}

TEST_CASE("step_dynamics: constant steer traces the analytic circle") {
  const SimParams p;
  VehicleState s;
  s.speed = p.target_speed;
  const double steer = 0.5;
  const double radius = p.wheelbase / std::tan(steer * p.max_steer_angle);
  // Collect one full revolution, then use the max pairwise distance as the
  // diameter estimate.
  const double circumference = 2 * kPi * radius;
  const int steps =
      static_cast<int>(circumference / (p.target_speed * p.dt)) + 1;
  std::vector<Vec2> pts;
  for (int k = 0; k < steps; ++k) {
    s = step_dynamics(s, steer, 1.0, p.dt, p);
    pts.push_back({s.x, s.y});
  }
  double diameter = 0;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j)
      diameter = std::max(diameter, (pts[i] - pts[j]).norm());
  CHECK(diameter / 2 == doctest::Approx(radius).epsilon(0.01));
}

TEST_CASE("step_dynamics: clamping counters and dt validation") {
  const SimParams p;
  VehicleState s;
  s.speed = 2.0;
  DynamicsCounters c;
  const VehicleState a = step_dynamics(s, 1.7, 1.0, p.dt, p, &c);
  const VehicleState b = step_dynamics(s, 1.0, 1.0, p.dt, p, &c);
  CHECK(c.clamped_steer == 1);
  CHECK(a.heading == b.heading);
  step_dynamics(s, 0.0, -0.5, p.dt, p, &c);
  CHECK(c.clamped_throttle == 1);
  CHECK_THROWS_AS(step_dynamics(s, 0, 1, 0.0, p), ConfigError);
  CHECK_THROWS_AS(step_dynamics(s, 0, 1, 0.25, p), ConfigError);
  CHECK_THROWS_AS(step_dynamics(s, 0, 1, -0.1, p), ConfigError);
}

TEST_CASE("step_dynamics: heading stays wrapped, speed relaxes and stays >= 0") {
  const SimParams p;
  VehicleState s;
  s.speed = 0;
  double prev = 0;
  for (int k = 0; k < 600; ++k) {
    s = step_dynamics(s, 0.9, 1.0, p.dt, p);
    CHECK(s.heading > -kPi);
    CHECK(s.heading <= kPi);
    CHECK(s.speed >= prev);  // monotone approach from below
    prev = s.speed;
  }
  CHECK(s.speed == doctest::Approx(p.target_speed).epsilon(1e-6));
  for (int k = 0; k < 600; ++k) {
    s = step_dynamics(s, 0.0, 0.0, p.dt, p);
    CHECK(s.speed >= 0);
  }
  CHECK(s.speed < 1e-6);
}

// ---------------------------------------------------------------------------
// Routes

TEST_CASE("plan_route: adjacent nodes give a FollowLane-only route") {
  const TownMap t = build_town(1, 3, 3);
  const Route r = plan_route(t, 0, 1, 0);
  REQUIRE(r.node_path.size() == 2);
  CHECK(r.wps.size() >= 2);
  for (const Waypoint& w : r.wps) CHECK(w.cmd == Command::follow_lane);
}

TEST_CASE("plan_route: an L-shaped path carries exactly one turn annotation") {
  const TownMap t = build_town(1, 3, 3);
  // Nodes are row-major on a 4x4 lattice: 0 -> 1 heads east, 1 -> 5 north.
  const Route r = plan_route(t, 0, 5, 0);
  REQUIRE(r.node_path.size() == 3);
  int groups = 0;
  Command prev = Command::follow_lane;
  Command turn = Command::follow_lane;
  for (const Waypoint& w : r.wps) {
    if (w.cmd != Command::follow_lane && prev == Command::follow_lane) {
      ++groups;
      turn = w.cmd;
    }
    prev = w.cmd;
  }
  CHECK(groups == 1);
  // Independent geometric oracle: the cross product of the two leg
  // directions decides left (positive) vs right (negative).
  const Vec2 leg1 = t.nodes[static_cast<std::size_t>(r.node_path[1])].pos -
                    t.nodes[static_cast<std::size_t>(r.node_path[0])].pos;
  const Vec2 leg2 = t.nodes[static_cast<std::size_t>(r.node_path[2])].pos -
                    t.nodes[static_cast<std::size_t>(r.node_path[1])].pos;
  CHECK(turn == (leg1.cross(leg2) > 0 ? Command::turn_left
                                      : Command::turn_right));
}

TEST_CASE("plan_route: path length matches the shortest-path oracle") {
  const TownMap t = build_town(11, 3, 3);
  Rng rng(404);
  for (int trial = 0; trial < 25; ++trial) {
    const int a = static_cast<int>(rng.below(t.nodes.size()));
    int b = static_cast<int>(rng.below(t.nodes.size()));
    if (a == b) continue;
    const Route r = plan_route(t, a, b, trial);
    CHECK(path_plain_length(t, r) ==
          doctest::Approx(oracle_distance(t, a, b)).epsilon(1e-9));
  }
}

TEST_CASE("plan_route: invariants — commands only near traversed nodes") {
  const SimParams p;
  const TownMap t = build_town(5, 3, 3);
  Rng rng(17);
  for (int trial = 0; trial < 12; ++trial) {
    const int a = static_cast<int>(rng.below(t.nodes.size()));
    int b = static_cast<int>(rng.below(t.nodes.size()));
    if (a == b) b = (b + 1) % static_cast<int>(t.nodes.size());
    const Route r = plan_route(t, a, b, 1);
    // Every interior traversed node has at least one annotated waypoint and
    // every annotated waypoint is inside some traversed node's radius.
    for (std::size_t k = 1; k + 1 < r.node_path.size(); ++k) {
      const Vec2 c = t.nodes[static_cast<std::size_t>(r.node_path[k])].pos;
      int count = 0;
      for (const Waypoint& w : r.wps)
        if (w.cmd != Command::follow_lane &&
            (w.pos - c).norm() <= p.annotation_radius)
          ++count;
      CHECK(count > 0);
    }
    for (const Waypoint& w : r.wps) {
      if (w.cmd == Command::follow_lane) continue;
      bool near = false;
      for (std::size_t k = 1; k + 1 < r.node_path.size(); ++k) {
        const Vec2 c = t.nodes[static_cast<std::size_t>(r.node_path[k])].pos;
        if ((w.pos - c).norm() <= p.annotation_radius) near = true;
      }
      CHECK(near);
    }
    // Arclengths are strictly increasing.
    for (std::size_t i = 1; i < r.wps.size(); ++i)
      CHECK(r.wps[i].s > r.wps[i - 1].s);
  }
}

TEST_CASE("plan_route: bad endpoints and unreachable goals throw") {
  const TownMap t = build_town(1, 2, 2);
  CHECK_THROWS_AS(plan_route(t, 0, 0, 0), SimError);
  CHECK_THROWS_AS(plan_route(t, -1, 3, 0), SimError);
  CHECK_THROWS_AS(plan_route(t, 0, 99, 0), SimError);
  TownMap split = micro_straight();
  split.nodes.push_back({{500, 500}, {-1, -1, -1, -1}});
  CHECK_THROWS_AS(plan_route(split, 0, 2, 0), SimError);
}

// ---------------------------------------------------------------------------
// Expert

TEST_CASE("expert: aligned on the centerline of a straight gives zero steer") {
  const SimParams p;
  const Route r = straight_route(60);
  RouteTracker tr(&r);
  VehicleState s;
  s.x = 0;
  s.y = 10;
  s.heading = kPi / 2;
  s.speed = p.target_speed;
  tr.update({s.x, s.y});
  CHECK(std::abs(pure_pursuit_steer(s, tr, p)) <= 1e-6);
}

TEST_CASE("expert: lateral offsets +d and -d give opposite steer") {
  const SimParams p;
  const Route r = straight_route(60);
  for (double d : {0.3, 0.8, 1.4}) {
    RouteTracker ta(&r), tb(&r);
    VehicleState a, b;
    a.x = d, b.x = -d;
    a.y = b.y = 12;
    a.heading = b.heading = kPi / 2;
    ta.update({a.x, a.y});
    tb.update({b.x, b.y});
    const double sa = pure_pursuit_steer(a, ta, p);
    const double sb = pure_pursuit_steer(b, tb, p);
    CHECK(sa == doctest::Approx(-sb).epsilon(1e-12));
    CHECK(sa > 0);  // offset right of the lane steers back left (positive)
  }
}

TEST_CASE("expert: beyond the recovery distance raises the failure flag") {
  const SimParams p;
  const Route r = straight_route(60);
  ExpertDriver e(&r, p);
  VehicleState s;
  s.x = p.recovery_distance + 1.5;
  s.y = 10;
  s.heading = kPi / 2;
  const nn::Tensor dummy({1, 1, 3});
  CHECK_FALSE(e.failed());
  e.control(dummy, s, Command::follow_lane);
  CHECK(e.failed());
}

// ---------------------------------------------------------------------------
// Rendering

TEST_CASE("render: deterministic frames, values in range") {
  const TownMap t = build_town(1, 2, 2);
  VehicleState s;
  s.x = t.nodes[0].pos.x + 2.0;  // right-hand lane of the vertical street
  s.y = (t.nodes[0].pos.y + t.nodes[3].pos.y) / 2;
  s.heading = kPi / 2;
  RenderConfig rc;
  for (int weather = 0; weather < kWeatherCount; ++weather) {
    rc.weather = weather;
    const nn::Tensor f1 = render(t, s, rc);
    const nn::Tensor f2 = render(t, s, rc);
    CHECK(std::memcmp(f1.data().data(), f2.data().data(),
                      f1.size() * sizeof(double)) == 0);
    for (double v : f1.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  // Weathers produce distinct images.
  rc.weather = 0;
  const nn::Tensor clear = render(t, s, rc);
  for (int weather = 1; weather < kWeatherCount; ++weather) {
    rc.weather = weather;
    const nn::Tensor other = render(t, s, rc);
    CHECK(std::memcmp(clear.data().data(), other.data().data(),
                      clear.size() * sizeof(double)) != 0);
  }
}

TEST_CASE("render: 180-degree rotation on a symmetric straight mirrors") {
  const TownMap t = micro_straight();
  RenderConfig rc;
  rc.weather = 0;
  VehicleState a, b;
  a.x = b.x = 0;
  a.y = b.y = 0;
  a.heading = kPi / 2;
  b.heading = -kPi / 2;
  const nn::Tensor fa = render(t, a, rc);
  const nn::Tensor fb = render(t, b, rc);
  int mismatches = 0;
  for (int px = 0; px < rc.w; ++px)
    for (int py = 0; py < rc.h; ++py)
      for (int c = 0; c < 3; ++c) {
        const double va =
            fa[nn::Tensor::at3(rc.h, 3, px, py, c)];
        const double vb =
            fb[nn::Tensor::at3(rc.h, 3, rc.w - 1 - px, py, c)];
        if (std::memcmp(&va, &vb, sizeof(double)) != 0) ++mismatches;
      }
  CHECK(mismatches == 0);
}

TEST_CASE("render: road-pixel fraction on a straight is in the sanity band") {
  const TownMap t = build_town(1, 3, 3);
  // Mid-segment on the right-hand lane of the first vertical street.
  const Segment* vert = nullptr;
  for (const Segment& s : t.segments)
    if (s.axis == 1 && s.node_a == 0) vert = &s;
  REQUIRE(vert != nullptr);
  VehicleState s;
  s.x = vert->a.x + 2.0;
  s.y = (vert->a.y + vert->b.y) / 2;
  s.heading = kPi / 2;
  RenderConfig rc;
  rc.weather = 0;
  const nn::Tensor f = render(t, s, rc);
  int road = 0;
  for (int px = 0; px < rc.w; ++px)
    for (int py = 0; py < rc.h; ++py) {
      const double r = f[nn::Tensor::at3(rc.h, 3, px, py, 0)];
      const double g = f[nn::Tensor::at3(rc.h, 3, px, py, 1)];
      const double b = f[nn::Tensor::at3(rc.h, 3, px, py, 2)];
      const double mx = std::max({r, g, b});
      const double mn = std::min({r, g, b});
      const double lum = (r + g + b) / 3;
      if (mx - mn < 0.1 && lum >= 0.15 && lum <= 0.5) ++road;
    }
  const double frac = static_cast<double>(road) / (rc.w * rc.h);
  INFO("road fraction ", frac);
  CHECK(frac >= 0.2);
  CHECK(frac <= 0.8);
}

TEST_CASE("render: rejects broken resolutions and unknown weather") {
  const TownMap t = micro_straight();
  VehicleState s;
  RenderConfig rc;
  rc.w = 64;
  rc.h = 32;
  CHECK_THROWS_AS(render(t, s, rc), ConfigError);
  rc.w = 192;
  rc.h = 88;
  rc.weather = 6;
  CHECK_THROWS_AS(render(t, s, rc), ConfigError);
  CHECK_THROWS_AS(weather_name(-1), ConfigError);
  CHECK(std::string(weather_name(0)) == "clear_noon");
}

TEST_CASE("drivable_distance: zero on roads and pads, positive outside") {
  const TownMap t = build_town(1, 2, 2);
  const Segment& s = t.segments.front();
  const Vec2 mid = (s.a + s.b) * 0.5;
  CHECK(drivable_distance(t, mid) == 0.0);
  const Vec2 off = s.axis == 0 ? Vec2{mid.x, mid.y + 4.6}
                               : Vec2{mid.x + 4.6, mid.y};
  CHECK(drivable_distance(t, off) == doctest::Approx(0.6).epsilon(1e-9));
  CHECK(drivable_distance(t, t.nodes[0].pos) == 0.0);
}

// ---------------------------------------------------------------------------
// Episodes

TEST_CASE("run_episode: expert succeeds on straight and turning routes") {
  const SimParams p;
  const TownMap t = build_town(1, 3, 3);
  for (auto [a, b] : {std::pair{0, 2}, std::pair{0, 5}, std::pair{0, 15}}) {
    const Route r = plan_route(t, a, b, 0);
    ExpertDriver expert(&r, p);
    EpisodeLimits lim = default_limits(r, p);
    lim.render_frames = false;
    RouteTracker probe(&r);
    double max_lat = 0;
    const EpisodeResult res = run_episode(
        expert, t, r, lim, p, {}, {}, [&](const StepRecord& rec) {
          probe.update({rec.state.x, rec.state.y});
          max_lat = std::max(max_lat,
                             probe.lateral({rec.state.x, rec.state.y}));
        });
    INFO("route ", a, "->", b, " max lateral ", max_lat);
    CHECK(res.success);
    CHECK(res.completion == 1.0);
    CHECK_FALSE(res.off_road);
    CHECK(res.collisions == 0);
    CHECK(max_lat < 1.15);  // stays in lane: half-width minus body margin
  }
}

TEST_CASE("run_episode: expert stays in lane across a route sweep") {
  const SimParams p;
  const TownMap t = build_town(1, 3, 3);
  Rng rng(2024);
  int episodes = 0;
  for (int trial = 0; trial < 15; ++trial) {
    const int a = static_cast<int>(rng.below(t.nodes.size()));
    int b = static_cast<int>(rng.below(t.nodes.size()));
    if (a == b) continue;
    const Route r = plan_route(t, a, b, trial);
    ExpertDriver expert(&r, p);
    EpisodeLimits lim = default_limits(r, p);
    lim.render_frames = false;
    RouteTracker probe(&r);
    double max_lat = 0;
    const EpisodeResult res = run_episode(
        expert, t, r, lim, p, {}, {}, [&](const StepRecord& rec) {
          probe.update({rec.state.x, rec.state.y});
          max_lat = std::max(max_lat,
                             probe.lateral({rec.state.x, rec.state.y}));
        });
    INFO("route ", a, "->", b, " max lateral ", max_lat);
    CHECK(res.success);
    CHECK(max_lat < 1.15);
    ++episodes;
  }
  CHECK(episodes >= 10);
}

TEST_CASE("run_episode: zero-step budget fails with completion zero") {
  const SimParams p;
  const TownMap t = build_town(1, 2, 2);
  const Route r = plan_route(t, 0, 2, 0);
  ExpertDriver expert(&r, p);
  EpisodeLimits lim;
  lim.max_steps = 0;
  lim.render_frames = false;
  const EpisodeResult res = run_episode(expert, t, r, lim, p);
  CHECK_FALSE(res.success);
  CHECK(res.steps == 0);
  CHECK(res.completion < 0.05);
}

TEST_CASE("run_episode: hard steering goes off-road and terminates early") {
  const SimParams p;
  const TownMap t = build_town(1, 2, 2);
  const Route r = plan_route(t, 0, 2, 0);
  FnController bad;
  bad.fn = [](const VehicleState&, Command) {
    ControlOutput o;
    o.steer = -1.0;
    return o;
  };
  EpisodeLimits lim = default_limits(r, p);
  lim.render_frames = false;
  const EpisodeResult res = run_episode(bad, t, r, lim, p);
  CHECK(res.off_road);
  CHECK_FALSE(res.success);
  CHECK(res.steps < lim.max_steps / 2);
}

TEST_CASE("run_episode: controller exception marks the episode failed") {
  const SimParams p;
  const TownMap t = build_town(1, 2, 2);
  const Route r = plan_route(t, 0, 2, 0);
  FnController boom;
  boom.fn = [](const VehicleState&, Command) -> ControlOutput {
    throw NumericError("synthetic blow-up");
  };
  EpisodeLimits lim = default_limits(r, p);
  lim.render_frames = false;
  const EpisodeResult res = run_episode(boom, t, r, lim, p);
  CHECK_FALSE(res.success);
  CHECK(res.error.find("synthetic blow-up") != std::string::npos);
  CHECK(res.steps == 0);
}

TEST_CASE("run_episode: rendered episodes are bitwise reproducible") {
  const SimParams p;
  const TownMap t = build_town(1, 2, 2);
  const Route r = plan_route(t, 0, 1, 0);
  RenderConfig rc;
  rc.weather = 1;
  auto run_once = [&](std::uint64_t& hash, int& frames) {
    NoisyExpert expert(&r, p, 77);
    EpisodeLimits lim = default_limits(r, p);
    const EpisodeResult res = run_episode(
        expert, t, r, lim, p, rc, {}, [&](const StepRecord& rec) {
          REQUIRE(rec.frame != nullptr);
          for (double v : rec.frame->data()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            hash = Rng::mix(hash, bits);
          }
          hash = Rng::mix(hash, static_cast<std::uint64_t>(rec.cmd));
          ++frames;
        });
    REQUIRE(res.success);
    return res;
  };
  std::uint64_t h1 = 0, h2 = 0;
  int f1 = 0, f2 = 0;
  const EpisodeResult r1 = run_once(h1, f1);
  const EpisodeResult r2 = run_once(h2, f2);
  CHECK(h1 == h2);
  CHECK(f1 == f2);
  CHECK(r1.steps == r2.steps);
  CHECK(std::memcmp(&r1.final_state, &r2.final_state,
                    sizeof(VehicleState)) == 0);
}

TEST_CASE("noisy expert: labels stay clean while pulses perturb the wheel") {
  const SimParams p;
  const TownMap t = build_town(1, 3, 3);
  const Route r = plan_route(t, 0, 3, 0);  // long straight, three legs
  NoisyExpert noisy(&r, p, 5);
  EpisodeLimits lim = default_limits(r, p);
  lim.render_frames = false;
  int perturbed = 0, total = 0;
  const EpisodeResult res = run_episode(
      noisy, t, r, lim, p, {}, {}, [&](const StepRecord& rec) {
        CHECK(rec.out.steer >= -1.0);
        CHECK(rec.out.steer <= 1.0);
        if (rec.out.steer != rec.out.label_steer) ++perturbed;
        ++total;
      });
  CHECK(res.success);
  CHECK(perturbed > 10);          // pulses fired
  CHECK(perturbed < total / 2);   // but are episodic, not constant
}

TEST_CASE("run_episode: expert yields behind a slow agent, no collision") {
  const SimParams p;
  const TownMap t = build_town(1, 3, 3);
  const Route ego_route = plan_route(t, 0, 2, 0);
  ScriptedAgent slow;
  slow.route = plan_route(t, 1, 3, 0);  // same street, one block further
  slow.speed_scale = 0.5;
  ExpertDriver expert(&ego_route, p);
  EpisodeLimits lim = default_limits(ego_route, p);
  lim.render_frames = false;
  bool yielded = false;
  const EpisodeResult res = run_episode(
      expert, t, ego_route, lim, p, {}, {slow}, [&](const StepRecord& rec) {
        if (rec.out.throttle < 0.5) yielded = true;
      });
  CHECK(res.success);
  CHECK(res.collisions == 0);
  CHECK(yielded);
}

TEST_CASE("run_episode: collisions are counted without aborting") {
  const SimParams p;
  const TownMap t = build_town(1, 3, 3);
  const Route ego_route = plan_route(t, 0, 2, 0);
  ScriptedAgent parked;
  parked.route = plan_route(t, 1, 3, 0);
  parked.speed_scale = 0.0;  // parked right on the ego lane
  FnController blind;  // drives the route ignoring obstacles
  RouteTracker* trk = nullptr;
  RouteTracker inner(&ego_route);
  trk = &inner;
  blind.fn = [&, trk](const VehicleState& s, Command) {
    trk->update({s.x, s.y});
    ControlOutput o;
    o.steer = pure_pursuit_steer(s, *trk, p);
    return o;
  };
  EpisodeLimits lim = default_limits(ego_route, p);
  lim.render_frames = false;
  const EpisodeResult res = run_episode(blind, t, ego_route, lim, p, {},
                                        {parked});
  CHECK(res.collisions >= 1);
  CHECK(res.success);  // benchmark semantics: infractions don't abort
}

TEST_SUITE_END();
