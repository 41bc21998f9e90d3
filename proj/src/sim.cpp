#include "attdrive/sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <queue>
#include <sstream>

#include "attdrive/errors.hpp"
#include "attdrive/roi.hpp"

namespace attdrive::sim {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

Vec2 dir_vec(int d) {
  switch (d) {
    case kNorth: return {0, 1};
    case kEast: return {1, 0};
    case kSouth: return {0, -1};
    default: return {-1, 0};
  }
}

// Right-hand normal of a heading direction (right-hand traffic).
Vec2 right_of(Vec2 d) { return {d.y, -d.x}; }

int dir_between(Vec2 from, Vec2 to) {
  const Vec2 d = to - from;
  if (std::abs(d.x) > std::abs(d.y)) return d.x > 0 ? kEast : kWest;
  return d.y > 0 ? kNorth : kSouth;
}

}  // namespace

// ---------------------------------------------------------------------------
// Town construction

TownMap build_town(std::uint64_t seed, int blocks_x, int blocks_y,
                   const SimParams& p) {
  if (blocks_x < 2 || blocks_y < 2)
    throw ConfigError("build_town: need at least 2x2 blocks, got " +
                      std::to_string(blocks_x) + "x" +
                      std::to_string(blocks_y));
  Rng rng(Rng::mix(seed, 0x746f776eULL));
  const double sizes[4] = {42, 46, 50, 54};

  std::vector<double> xs(static_cast<std::size_t>(blocks_x) + 1, 0.0);
  std::vector<double> ys(static_cast<std::size_t>(blocks_y) + 1, 0.0);
  for (int i = 0; i < blocks_x; ++i)
    xs[static_cast<std::size_t>(i) + 1] =
        xs[static_cast<std::size_t>(i)] + sizes[rng.below(4)];
  for (int j = 0; j < blocks_y; ++j)
    ys[static_cast<std::size_t>(j) + 1] =
        ys[static_cast<std::size_t>(j)] + sizes[rng.below(4)];

  TownMap town;
  town.seed = seed;
  town.name = "town-" + std::to_string(seed);
  town.lane_half_width = p.lane_half_width;

  const int nx = blocks_x + 1, ny = blocks_y + 1;
  auto node_id = [nx](int i, int j) { return j * nx + i; };
  town.nodes.resize(static_cast<std::size_t>(nx) * ny);
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i)
      town.nodes[static_cast<std::size_t>(node_id(i, j))].pos = {
          xs[static_cast<std::size_t>(i)], ys[static_cast<std::size_t>(j)]};

  const double ih = p.intersection_half;
  // Horizontal streets (axis 0), west-to-east.
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < blocks_x; ++i) {
      Segment s;
      s.node_a = node_id(i, j);
      s.node_b = node_id(i + 1, j);
      s.axis = 0;
      const Vec2 pa = town.nodes[static_cast<std::size_t>(s.node_a)].pos;
      const Vec2 pb = town.nodes[static_cast<std::size_t>(s.node_b)].pos;
      s.a = {pa.x + ih, pa.y};
      s.b = {pb.x - ih, pb.y};
      const int id = static_cast<int>(town.segments.size());
      town.nodes[static_cast<std::size_t>(s.node_a)].branch[kEast] = id;
      town.nodes[static_cast<std::size_t>(s.node_b)].branch[kWest] = id;
      town.segments.push_back(s);
    }
  // Vertical streets (axis 1), south-to-north.
  for (int j = 0; j < blocks_y; ++j)
    for (int i = 0; i < nx; ++i) {
      Segment s;
      s.node_a = node_id(i, j);
      s.node_b = node_id(i, j + 1);
      s.axis = 1;
      const Vec2 pa = town.nodes[static_cast<std::size_t>(s.node_a)].pos;
      const Vec2 pb = town.nodes[static_cast<std::size_t>(s.node_b)].pos;
      s.a = {pa.x, pa.y + ih};
      s.b = {pb.x, pb.y - ih};
      const int id = static_cast<int>(town.segments.size());
      town.nodes[static_cast<std::size_t>(s.node_a)].branch[kNorth] = id;
      town.nodes[static_cast<std::size_t>(s.node_b)].branch[kSouth] = id;
      town.segments.push_back(s);
    }

  const double inset = p.road_half_width + 3.0;
  for (int j = 0; j < blocks_y; ++j)
    for (int i = 0; i < blocks_x; ++i) {
      Block b;
      b.rect = {xs[static_cast<std::size_t>(i)] + inset,
                ys[static_cast<std::size_t>(j)] + inset,
                xs[static_cast<std::size_t>(i) + 1] - inset,
                ys[static_cast<std::size_t>(j) + 1] - inset};
      b.palette = static_cast<int>(rng.below(6));
      town.blocks.push_back(b);
    }
  return town;
}

void validate_town(const TownMap& town) {
  const int N = static_cast<int>(town.nodes.size());
  const int M = static_cast<int>(town.segments.size());
  if (N == 0 || M == 0) throw SimError("validate_town: empty town");
  if (town.lane_half_width <= SimParams{}.vehicle_half_width)
    throw SimError("validate_town: lane half-width " +
                   std::to_string(town.lane_half_width) +
                   " does not exceed the vehicle half-width");
  for (int si = 0; si < M; ++si) {
    const Segment& s = town.segments[static_cast<std::size_t>(si)];
    if (s.node_a < 0 || s.node_a >= N || s.node_b < 0 || s.node_b >= N)
      throw SimError("validate_town: segment " + std::to_string(si) +
                     " references a missing node");
    if (s.length() <= 0)
      throw SimError("validate_town: segment " + std::to_string(si) +
                     " has non-positive length");
  }
  // Every branch entry must join exactly one segment end, mutually.
  std::vector<int> end_refs(static_cast<std::size_t>(M), 0);
  for (int ni = 0; ni < N; ++ni) {
    const TownNode& n = town.nodes[static_cast<std::size_t>(ni)];
    for (int d = 0; d < 4; ++d) {
      const int si = n.branch[static_cast<std::size_t>(d)];
      if (si < 0) continue;
      if (si >= M)
        throw SimError("validate_town: node " + std::to_string(ni) +
                       " branch references a missing segment");
      const Segment& s = town.segments[static_cast<std::size_t>(si)];
      if (s.node_a != ni && s.node_b != ni)
        throw SimError("validate_town: node " + std::to_string(ni) +
                       " branch joins segment " + std::to_string(si) +
                       " that does not end there");
      ++end_refs[static_cast<std::size_t>(si)];
    }
  }
  for (int si = 0; si < M; ++si)
    if (end_refs[static_cast<std::size_t>(si)] != 2)
      throw SimError("validate_town: segment " + std::to_string(si) +
                     " is joined by " +
                     std::to_string(end_refs[static_cast<std::size_t>(si)]) +
                     " branches, expected 2");
  // Connectivity.
  std::vector<char> seen(static_cast<std::size_t>(N), 0);
  std::vector<int> stack = {0};
  seen[0] = 1;
  while (!stack.empty()) {
    const int ni = stack.back();
    stack.pop_back();
    for (int d = 0; d < 4; ++d) {
      const int si =
          town.nodes[static_cast<std::size_t>(ni)].branch[static_cast<std::size_t>(d)];
      if (si < 0) continue;
      const Segment& s = town.segments[static_cast<std::size_t>(si)];
      const int other = s.node_a == ni ? s.node_b : s.node_a;
      if (!seen[static_cast<std::size_t>(other)]) {
        seen[static_cast<std::size_t>(other)] = 1;
        stack.push_back(other);
      }
    }
  }
  for (int ni = 0; ni < N; ++ni)
    if (!seen[static_cast<std::size_t>(ni)])
      throw SimError("validate_town: node " + std::to_string(ni) +
                     " is unreachable (graph not connected)");
}

// ---------------------------------------------------------------------------
// Serialization

namespace {
std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace

std::string town_to_text(const TownMap& town) {
  std::ostringstream os;
  os << "TOWN1\n";
  os << "seed " << town.seed << "\n";
  os << "name " << town.name << "\n";
  os << "lanehw " << fmt_double(town.lane_half_width) << "\n";
  os << "nodes " << town.nodes.size() << "\n";
  for (std::size_t i = 0; i < town.nodes.size(); ++i) {
    const TownNode& n = town.nodes[i];
    os << "node " << i << " " << fmt_double(n.pos.x) << " "
       << fmt_double(n.pos.y);
    for (int b : n.branch) os << " " << b;
    os << "\n";
  }
  os << "segments " << town.segments.size() << "\n";
  for (std::size_t i = 0; i < town.segments.size(); ++i) {
    const Segment& s = town.segments[i];
    os << "segment " << i << " " << s.node_a << " " << s.node_b << " "
       << s.axis << " " << fmt_double(s.a.x) << " " << fmt_double(s.a.y)
       << " " << fmt_double(s.b.x) << " " << fmt_double(s.b.y) << "\n";
  }
  os << "blocks " << town.blocks.size() << "\n";
  for (const Block& b : town.blocks)
    os << "block " << fmt_double(b.rect.x0) << " " << fmt_double(b.rect.y0)
       << " " << fmt_double(b.rect.x1) << " " << fmt_double(b.rect.y1) << " "
       << b.palette << "\n";
  return os.str();
}

TownMap town_from_text(const std::string& text) {
  std::istringstream is(text);
  auto fail = [](const std::string& what) -> void {
    throw IoError("town_from_text: " + what);
  };
  std::string tok;
  if (!(is >> tok) || tok != "TOWN1") fail("missing TOWN1 header");
  TownMap town;
  std::size_t n_nodes = 0, n_segments = 0, n_blocks = 0;
  if (!(is >> tok) || tok != "seed" || !(is >> town.seed)) fail("bad seed");
  if (!(is >> tok) || tok != "name" || !(is >> town.name)) fail("bad name");
  if (!(is >> tok) || tok != "lanehw" || !(is >> town.lane_half_width))
    fail("bad lanehw");
  if (!(is >> tok) || tok != "nodes" || !(is >> n_nodes)) fail("bad nodes");
  town.nodes.resize(n_nodes);
  for (std::size_t i = 0; i < n_nodes; ++i) {
    std::size_t id = 0;
    TownNode& n = town.nodes[i];
    if (!(is >> tok) || tok != "node" || !(is >> id) || id != i ||
        !(is >> n.pos.x >> n.pos.y >> n.branch[0] >> n.branch[1] >>
          n.branch[2] >> n.branch[3]))
      fail("bad node record " + std::to_string(i));
  }
  if (!(is >> tok) || tok != "segments" || !(is >> n_segments))
    fail("bad segments");
  town.segments.resize(n_segments);
  for (std::size_t i = 0; i < n_segments; ++i) {
    std::size_t id = 0;
    Segment& s = town.segments[i];
    if (!(is >> tok) || tok != "segment" || !(is >> id) || id != i ||
        !(is >> s.node_a >> s.node_b >> s.axis >> s.a.x >> s.a.y >> s.b.x >>
          s.b.y))
      fail("bad segment record " + std::to_string(i));
  }
  if (!(is >> tok) || tok != "blocks" || !(is >> n_blocks)) fail("bad blocks");
  town.blocks.resize(n_blocks);
  for (std::size_t i = 0; i < n_blocks; ++i) {
    Block& b = town.blocks[i];
    if (!(is >> tok) || tok != "block" ||
        !(is >> b.rect.x0 >> b.rect.y0 >> b.rect.x1 >> b.rect.y1 >>
          b.palette))
      fail("bad block record " + std::to_string(i));
  }
  return town;
}

// ---------------------------------------------------------------------------
// Dynamics

double wrap_angle(double a) {
  while (a > kPi) a -= 2 * kPi;
  while (a <= -kPi) a += 2 * kPi;
  return a;
}

VehicleState step_dynamics(const VehicleState& s, double steer,
                           double throttle, double dt, const SimParams& p,
                           DynamicsCounters* counters) {
  if (!(dt > 0.0) || dt > 0.2)
    throw ConfigError("step_dynamics: dt must lie in (0, 0.2], got " +
                      std::to_string(dt));
  if (steer < -1.0 || steer > 1.0) {
    steer = clampd(steer, -1.0, 1.0);
    if (counters) ++counters->clamped_steer;
  }
  if (throttle < 0.0 || throttle > 1.0) {
    throttle = clampd(throttle, 0.0, 1.0);
    if (counters) ++counters->clamped_throttle;
  }
  VehicleState n = s;
  const double yaw_rate =
      s.speed / p.wheelbase * std::tan(steer * p.max_steer_angle);
  const double new_heading = s.heading + yaw_rate * dt;
  // Midpoint heading keeps constant-steer paths on the analytic circle.
  const double mid = s.heading + 0.5 * yaw_rate * dt;
  n.x = s.x + s.speed * std::cos(mid) * dt;
  n.y = s.y + s.speed * std::sin(mid) * dt;
  n.heading = wrap_angle(new_heading);
  const double target = throttle * p.target_speed;
  const double k = 1.0 - std::exp(-dt / p.speed_tau);
  n.speed = s.speed + (target - s.speed) * k;
  if (n.speed < 0) n.speed = 0;
  return n;
}

// ---------------------------------------------------------------------------
// Route planning

namespace {

// Appends pt unless it duplicates the tail.
void push_wp(std::vector<Waypoint>& wps, Vec2 pt) {
  if (!wps.empty() && (wps.back().pos - pt).norm() < 1e-9) return;
  Waypoint w;
  w.pos = pt;
  wps.push_back(w);
}

void sample_line(std::vector<Waypoint>& wps, Vec2 a, Vec2 b) {
  const double len = (b - a).norm();
  const int n = std::max(1, static_cast<int>(std::lround(len)));
  for (int i = 0; i <= n; ++i)
    push_wp(wps, a + (b - a) * (static_cast<double>(i) / n));
}

// Quarter arc from `from` to `to` around `center`; sweep sign +1 = ccw.
void sample_arc(std::vector<Waypoint>& wps, Vec2 center, Vec2 from, Vec2 to,
                int sweep_sign) {
  const double r = (from - center).norm();
  const double a0 = std::atan2(from.y - center.y, from.x - center.x);
  const int n = std::max(2, static_cast<int>(std::lround(r * kPi / 2)));
  for (int i = 0; i <= n; ++i) {
    const double a = a0 + sweep_sign * (kPi / 2) * (static_cast<double>(i) / n);
    push_wp(wps, {center.x + r * std::cos(a), center.y + r * std::sin(a)});
  }
  push_wp(wps, to);
}

}  // namespace

Route plan_route(const TownMap& town, int start_node, int goal_node,
                 std::uint64_t seed, const SimParams& p) {
  const int N = static_cast<int>(town.nodes.size());
  if (start_node < 0 || start_node >= N || goal_node < 0 || goal_node >= N)
    throw SimError("plan_route: node id out of range");
  if (start_node == goal_node)
    throw SimError("plan_route: start equals goal");

  // Dijkstra over segment lengths; a seeded sub-ppm jitter breaks ties
  // between equal-length grid paths deterministically.
  auto jitter = [&](int si) {
    const std::uint64_t h =
        Rng::mix(seed, 0x726f757465ULL + static_cast<std::uint64_t>(si));
    return 1.0 + 1e-9 * (static_cast<double>(h >> 11) * 0x1.0p-53);
  };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(static_cast<std::size_t>(N), inf);
  std::vector<int> prev(static_cast<std::size_t>(N), -1);
  using QE = std::pair<double, int>;
  std::priority_queue<QE, std::vector<QE>, std::greater<>> q;
  dist[static_cast<std::size_t>(start_node)] = 0;
  q.push({0.0, start_node});
  while (!q.empty()) {
    const auto [d, u] = q.top();
    q.pop();
    if (d > dist[static_cast<std::size_t>(u)]) continue;
    for (int dir = 0; dir < 4; ++dir) {
      const int si =
          town.nodes[static_cast<std::size_t>(u)].branch[static_cast<std::size_t>(dir)];
      if (si < 0) continue;
      const Segment& s = town.segments[static_cast<std::size_t>(si)];
      const int v = s.node_a == u ? s.node_b : s.node_a;
      const double nd = d + s.length() * jitter(si);
      if (nd < dist[static_cast<std::size_t>(v)]) {
        dist[static_cast<std::size_t>(v)] = nd;
        prev[static_cast<std::size_t>(v)] = u;
        q.push({nd, v});
      }
    }
  }
  if (dist[static_cast<std::size_t>(goal_node)] == inf)
    throw SimError("plan_route: goal node " + std::to_string(goal_node) +
                   " unreachable from " + std::to_string(start_node));

  Route route;
  route.start_node = start_node;
  route.goal_node = goal_node;
  for (int v = goal_node; v != -1; v = prev[static_cast<std::size_t>(v)])
    route.node_path.push_back(v);
  std::reverse(route.node_path.begin(), route.node_path.end());

  const double ih = p.intersection_half;
  const double lo = p.lane_offset;
  auto npos = [&](int id) {
    return town.nodes[static_cast<std::size_t>(id)].pos;
  };

  // Lane-level polyline: straights on the right-hand lane, arcs inside pads.
  const std::size_t legs = route.node_path.size() - 1;
  std::vector<Command> node_cmd(route.node_path.size(), Command::follow_lane);
  for (std::size_t k = 0; k < legs; ++k) {
    const Vec2 u = npos(route.node_path[k]);
    const Vec2 v = npos(route.node_path[k + 1]);
    const Vec2 d = dir_vec(dir_between(u, v));
    const Vec2 r = right_of(d);
    const Vec2 lane_a = u + d * ih + r * lo;
    const Vec2 lane_b = v - (d * ih) + r * lo;
    sample_line(route.wps, lane_a, lane_b);
    if (k + 1 < legs) {  // connector through the interior node
      const Vec2 w = npos(route.node_path[k + 2]);
      const int din = dir_between(u, v);
      const int dout = dir_between(v, w);
      const Vec2 dv_in = dir_vec(din), dv_out = dir_vec(dout);
      const Vec2 e_in = v - dv_in * ih + right_of(dv_in) * lo;
      const Vec2 e_out = v + dv_out * ih + right_of(dv_out) * lo;
      const int rel = ((dout - din) % 4 + 4) % 4;
      if (rel == 2)
        throw SimError("plan_route: U-turn produced at node " +
                       std::to_string(route.node_path[k + 1]));
      if (rel == 0) {
        node_cmd[k + 1] = Command::go_straight;
        sample_line(route.wps, e_in, e_out);
      } else if (rel == 1) {  // right turn, tight arc, clockwise
        node_cmd[k + 1] = Command::turn_right;
        const Vec2 center = e_in + right_of(dv_in) * (ih - lo);
        sample_arc(route.wps, center, e_in, e_out, -1);
      } else {  // left turn, wide arc, counterclockwise
        node_cmd[k + 1] = Command::turn_left;
        const Vec2 center = e_in - right_of(dv_in) * (ih + lo);
        sample_arc(route.wps, center, e_in, e_out, +1);
      }
    }
  }
  // Run a short tail into the goal pad so the goal point is unambiguous.
  {
    const Vec2 u = npos(route.node_path[legs - 1]);
    const Vec2 v = npos(route.node_path[legs]);
    const Vec2 d = dir_vec(dir_between(u, v));
    const Vec2 r = right_of(d);
    sample_line(route.wps, v - d * ih + r * lo, v - d * (ih - 4.0) + r * lo);
  }

  // Cumulative arclength.
  double s = 0;
  for (std::size_t i = 0; i < route.wps.size(); ++i) {
    if (i > 0) s += (route.wps[i].pos - route.wps[i - 1].pos).norm();
    route.wps[i].s = s;
  }
  route.length = s;

  // Command annotation: every waypoint within the annotation radius of a
  // traversed interior node carries that node's command.
  for (std::size_t k = 1; k < route.node_path.size() - 1; ++k) {
    if (node_cmd[k] == Command::follow_lane) continue;
    const Vec2 c = npos(route.node_path[k]);
    for (Waypoint& w : route.wps)
      if ((w.pos - c).norm() <= p.annotation_radius) w.cmd = node_cmd[k];
  }
  return route;
}

// ---------------------------------------------------------------------------
// Route tracking

RouteTracker::RouteTracker(const Route* route) : route_(route) {
  if (!route_ || route_->wps.size() < 2)
    throw ConfigError("RouteTracker: route must have at least 2 waypoints");
}

void RouteTracker::update(Vec2 pos) {
  const auto& wps = route_->wps;
  // Bounded monotone window: waypoints are spaced ~1 m, so 12 steps covers
  // the per-frame travel many times over without letting a self-near route
  // teleport the cursor.
  const std::size_t hi = std::min(wps.size() - 1, idx_ + 12);
  std::size_t best = idx_;
  double best_d = (wps[idx_].pos - pos).norm();
  for (std::size_t j = idx_ + 1; j <= hi; ++j) {
    const double d = (wps[j].pos - pos).norm();
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  idx_ = best;
  // Fractional progress along the chord to the next waypoint.
  progress_ = wps[idx_].s;
  if (idx_ + 1 < wps.size()) {
    const Vec2 a = wps[idx_].pos, b = wps[idx_ + 1].pos;
    const Vec2 ab = b - a;
    const double len2 = ab.dot(ab);
    if (len2 > 0) {
      const double t = clampd((pos - a).dot(ab) / len2, 0.0, 1.0);
      progress_ = wps[idx_].s + t * std::sqrt(len2);
    }
  }
}

double RouteTracker::lateral(Vec2 pos) const {
  const auto& wps = route_->wps;
  const std::size_t lo = idx_ > 0 ? idx_ - 1 : 0;
  const std::size_t hi = std::min(wps.size() - 2, idx_ + 1);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t j = lo; j <= hi; ++j) {
    const Vec2 a = wps[j].pos, b = wps[j + 1].pos;
    const Vec2 ab = b - a;
    const double len2 = ab.dot(ab);
    const double t = len2 > 0 ? clampd((pos - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
    best = std::min(best, (pos - (a + ab * t)).norm());
  }
  return best;
}

Command RouteTracker::command() const { return route_->wps[idx_].cmd; }

Vec2 RouteTracker::point_at(double s) const {
  const auto& wps = route_->wps;
  if (s <= 0) return wps.front().pos;
  if (s >= route_->length) return wps.back().pos;
  std::size_t lo = 0, hi = wps.size() - 1;
  while (lo + 1 < hi) {
    const std::size_t mid = (lo + hi) / 2;
    if (wps[mid].s <= s)
      lo = mid;
    else
      hi = mid;
  }
  const double span = wps[hi].s - wps[lo].s;
  const double t = span > 0 ? (s - wps[lo].s) / span : 0.0;
  return wps[lo].pos + (wps[hi].pos - wps[lo].pos) * t;
}

bool RouteTracker::finished(Vec2 pos, double goal_radius) const {
  return progress_ >= 0.9 * route_->length &&
         (pos - route_->wps.back().pos).norm() <= goal_radius;
}

// ---------------------------------------------------------------------------
// Controllers

double pure_pursuit_steer(const VehicleState& state,
                          const RouteTracker& tracker, const SimParams& p) {
  const Vec2 pos{state.x, state.y};
  const Vec2 target = tracker.point_at(tracker.progress() + p.lookahead);
  const Vec2 fwd{std::cos(state.heading), std::sin(state.heading)};
  const Vec2 to = target - pos;
  const double ld2 = std::max(to.dot(to), 0.25);
  const double lat = fwd.cross(to);  // + = target to the left
  const double curvature = 2.0 * lat / ld2;
  const double steer_angle = std::atan(curvature * p.wheelbase);
  return clampd(steer_angle / p.max_steer_angle, -1.0, 1.0);
}

ExpertDriver::ExpertDriver(const Route* route, const SimParams& p)
    : p_(p), tracker_(route) {}

void ExpertDriver::observe_agents(std::span<const VehicleState> agents) {
  agents_.assign(agents.begin(), agents.end());
}

ControlOutput ExpertDriver::control(const nn::Tensor& /*frame*/,
                                    const VehicleState& state,
                                    Command /*cmd*/) {
  const Vec2 pos{state.x, state.y};
  tracker_.update(pos);
  if (tracker_.lateral(pos) > p_.recovery_distance) failed_ = true;
  ControlOutput out;
  out.steer = pure_pursuit_steer(state, tracker_, p_);
  out.label_steer = out.steer;
  out.throttle = yield_throttle(1.0, state, agents_, p_);
  return out;
}

double yield_throttle(double base, const VehicleState& self,
                      std::span<const VehicleState> agents,
                      const SimParams& p) {
  const Vec2 pos{self.x, self.y};
  const Vec2 fwd{std::cos(self.heading), std::sin(self.heading)};
  double throttle = base;
  for (const VehicleState& a : agents) {
    const Vec2 to = Vec2{a.x, a.y} - pos;
    const double ahead = fwd.dot(to);
    if (ahead > 0 && ahead < p.yield_distance &&
        std::abs(fwd.cross(to)) < 3.0) {
      // Crawl inside the yield zone, full stop when the gap gets tight.
      throttle = std::min(throttle, ahead < 4.0 ? 0.0 : 0.08);
    }
  }
  return throttle;
}

NoisyExpert::NoisyExpert(const Route* route, const SimParams& p,
                         std::uint64_t seed, double max_amplitude)
    : inner_(route, p),
      rng_(Rng::mix(seed, 0x6e6f697365ULL)),
      dt_(p.dt),
      max_amplitude_(max_amplitude),
      pulse_time_(-1) {
  next_pulse_in_ = rng_.uniform(2.0, 5.0);
}

void NoisyExpert::observe_agents(std::span<const VehicleState> agents) {
  inner_.observe_agents(agents);
}

ControlOutput NoisyExpert::control(const nn::Tensor& frame,
                                   const VehicleState& state, Command cmd) {
  ControlOutput out = inner_.control(frame, state, cmd);
  double pulse = 0;
  if (pulse_time_ < 0) {
    next_pulse_in_ -= dt_;
    if (next_pulse_in_ <= 0) {
      pulse_time_ = 0;
      pulse_duration_ = rng_.uniform(0.6, 1.0);
      const double sign = rng_.unit() < 0.5 ? -1.0 : 1.0;
      pulse_peak_ = sign * rng_.uniform(0.5, 1.0) * max_amplitude_;
    }
  }
  if (pulse_time_ >= 0) {
    const double t = pulse_time_ / pulse_duration_;
    pulse = pulse_peak_ * (1.0 - std::abs(2.0 * t - 1.0));
    pulse_time_ += dt_;
    if (pulse_time_ >= pulse_duration_) {
      pulse_time_ = -1;
      next_pulse_in_ = rng_.uniform(2.0, 5.0);
    }
  }
  out.steer = clampd(out.label_steer + pulse, -1.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

struct WeatherPreset {
  const char* name;
  double mul[3];
  double noise;
  double sky_top[3];
  double sky_bot[3];
  double fog;
  bool wet;
  bool rain;
};

constexpr WeatherPreset kWeathers[kWeatherCount] = {
    {"clear_noon", {1.00, 1.00, 1.00}, 0.000, {0.30, 0.55, 0.95},
     {0.75, 0.85, 0.98}, 0.25, false, false},
    {"cloudy_noon", {0.82, 0.84, 0.88}, 0.010, {0.55, 0.60, 0.68},
     {0.80, 0.82, 0.86}, 0.45, false, false},
    {"wet_noon", {0.78, 0.80, 0.85}, 0.012, {0.45, 0.52, 0.62},
     {0.72, 0.76, 0.82}, 0.40, true, false},
    {"soft_rain_noon", {0.70, 0.72, 0.78}, 0.025, {0.48, 0.52, 0.60},
     {0.68, 0.71, 0.77}, 0.55, true, true},
    {"wet_sunset", {1.05, 0.85, 0.70}, 0.012, {0.90, 0.55, 0.35},
     {0.98, 0.80, 0.55}, 0.45, true, false},
    {"hard_rain_noon", {0.60, 0.63, 0.70}, 0.045, {0.40, 0.44, 0.52},
     {0.60, 0.63, 0.70}, 0.75, true, true},
};

struct Rgb {
  double r, g, b;
};

// Even-symmetric dashed-line pattern: 2 m dashes centered every 8 m along
// the world axis, so 180-degree rotated views mirror exactly.
bool dash_on(double along) {
  return std::abs(along - 8.0 * std::round(along / 8.0)) < 1.0;
}

double hash_unit(std::uint64_t k) {
  return static_cast<double>(Rng::mix(k, 0x67726e64ULL) >> 11) * 0x1.0p-53;
}

const Rgb kPalettes[6] = {{0.55, 0.45, 0.40}, {0.45, 0.48, 0.55},
                          {0.30, 0.52, 0.30}, {0.62, 0.58, 0.45},
                          {0.35, 0.33, 0.37}, {0.58, 0.36, 0.30}};
const Rgb kAgentColors[4] = {{0.75, 0.12, 0.12},
                             {0.12, 0.22, 0.72},
                             {0.88, 0.70, 0.12},
                             {0.20, 0.60, 0.32}};

Rgb ground_color(const TownMap& town, Vec2 p, const SimParams& sp,
                 const WeatherPreset& wp, std::span<const AgentBox> agents) {
  // Scripted vehicles paint over everything below them.
  for (const AgentBox& a : agents) {
    const Vec2 d = p - a.pos;
    const Vec2 fwd{std::cos(a.heading), std::sin(a.heading)};
    const double qx = fwd.dot(d);
    const double qy = fwd.cross(d);
    if (std::abs(qx) <= sp.vehicle_length / 2 &&
        std::abs(qy) <= sp.vehicle_half_width + 0.1) {
      Rgb c = kAgentColors[static_cast<std::size_t>(a.color_id) % 4];
      if (std::abs(qx) < sp.vehicle_length / 6) {
        c.r *= 0.45;
        c.g *= 0.45;
        c.b *= 0.45;
      }
      return c;
    }
  }

  const Rgb asphalt = wp.wet ? Rgb{0.22, 0.22, 0.26} : Rgb{0.30, 0.30, 0.32};
  const double rhw = sp.road_half_width;
  double excess = std::numeric_limits<double>::infinity();

  for (const TownNode& n : town.nodes) {
    const double dx = std::abs(p.x - n.pos.x);
    const double dy = std::abs(p.y - n.pos.y);
    if (dx <= sp.intersection_half && dy <= sp.intersection_half)
      return asphalt;
    const double ex = std::max(dx - sp.intersection_half, 0.0);
    const double ey = std::max(dy - sp.intersection_half, 0.0);
    excess = std::min(excess, std::hypot(ex, ey));
  }
  for (const Segment& s : town.segments) {
    double along, lat, a0, a1, center;
    if (s.axis == 0) {
      along = p.x;
      lat = p.y - s.a.y;
      a0 = s.a.x;
      a1 = s.b.x;
      center = s.a.y;
    } else {
      along = p.y;
      lat = p.x - s.a.x;
      a0 = s.a.y;
      a1 = s.b.y;
      center = s.a.x;
    }
    (void)center;
    if (along >= a0 && along <= a1 && std::abs(lat) <= rhw) {
      if (std::abs(lat) < 0.15 && dash_on(along))
        return {0.85, 0.75, 0.20};  // dashed center line
      if (std::abs(lat) > rhw - 0.45 && std::abs(lat) < rhw - 0.20)
        return {0.85, 0.88, 0.90};  // solid edge line
      return asphalt;
    }
    const double ex = std::max({a0 - along, along - a1, 0.0});
    const double ey = std::max(std::abs(lat) - rhw, 0.0);
    excess = std::min(excess, std::hypot(ex, ey));
  }
  if (excess <= 1.6) return {0.62, 0.62, 0.64};  // sidewalk apron

  for (const Block& b : town.blocks)
    if (b.rect.contains(p)) {
      Rgb c = kPalettes[static_cast<std::size_t>(b.palette) % 6];
      // Mild deterministic tiling texture so blocks are not flat.
      const auto tx = static_cast<std::int64_t>(std::floor(p.x / 4.0));
      const auto ty = static_cast<std::int64_t>(std::floor(p.y / 4.0));
      const double f =
          0.88 + 0.24 * hash_unit(static_cast<std::uint64_t>(tx * 73856093LL ^
                                                             ty * 19349663LL));
      return {c.r * f, c.g * f, c.b * f};
    }
  return {0.42, 0.55, 0.35};  // default grass
}

}  // namespace

const char* weather_name(int id) {
  if (id < 0 || id >= kWeatherCount)
    throw ConfigError("weather id out of range: " + std::to_string(id));
  return kWeathers[static_cast<std::size_t>(id)].name;
}

nn::Tensor render(const TownMap& town, const VehicleState& state,
                  const RenderConfig& rc, std::span<const AgentBox> agents) {
  if (rc.weather < 0 || rc.weather >= kWeatherCount)
    throw ConfigError("render: weather id out of range: " +
                      std::to_string(rc.weather));
  {
    const roi::RoIGrid grid = roi::generate_grid({});
    const auto rep =
        roi::validate_geometry(grid, rc.w, rc.h, roi::table1_backbone());
    if (!rep.errors.empty())
      throw ConfigError("render: resolution " + std::to_string(rc.w) + "x" +
                        std::to_string(rc.h) +
                        " fails geometry validation: " + rep.errors.front());
  }
  const WeatherPreset& wp = kWeathers[static_cast<std::size_t>(rc.weather)];
  const SimParams sp;  // geometry constants for classification

  nn::Tensor out({rc.w, rc.h, 3});
  const int hr = static_cast<int>(rc.h * rc.horizon_frac);
  const double cx = (rc.w - 1) / 2.0;
  const double focal_x = rc.w / 2.0;
  const Vec2 fwd{std::cos(state.heading), std::sin(state.heading)};
  const Vec2 right = right_of(fwd);
  const Vec2 cam = Vec2{state.x, state.y} + fwd * rc.cam_forward;

  for (int py = 0; py < rc.h; ++py) {
    Rgb row_base{0, 0, 0};
    bool is_sky = false, is_haze = false;
    double d = 0, fog = 0;
    if (py <= hr) {
      is_sky = true;
      const double t = hr > 0 ? static_cast<double>(py) / hr : 0.0;
      row_base = {wp.sky_top[0] + (wp.sky_bot[0] - wp.sky_top[0]) * t,
                  wp.sky_top[1] + (wp.sky_bot[1] - wp.sky_top[1]) * t,
                  wp.sky_top[2] + (wp.sky_bot[2] - wp.sky_top[2]) * t};
    } else {
      d = rc.cam_height * rc.focal_y / (py - hr);
      if (d > rc.max_depth) {
        is_haze = true;
        row_base = {wp.sky_bot[0], wp.sky_bot[1], wp.sky_bot[2]};
      } else {
        const double z = d / rc.max_depth;
        fog = wp.fog * z * z;
      }
    }
    const double lat_scale = d / focal_x;
    const Vec2 base = cam + fwd * d;
    for (int px = 0; px < rc.w; ++px) {
      Rgb c = row_base;
      if (!is_sky && !is_haze) {
        const double lat = (px - cx) * lat_scale;
        const Vec2 wpnt = base + right * lat;
        c = ground_color(town, wpnt, sp, wp, agents);
        c.r += (wp.sky_bot[0] - c.r) * fog;
        c.g += (wp.sky_bot[1] - c.g) * fog;
        c.b += (wp.sky_bot[2] - c.b) * fog;
      }
      c.r *= wp.mul[0];
      c.g *= wp.mul[1];
      c.b *= wp.mul[2];
      if (wp.noise > 0) {
        const std::uint64_t key =
            static_cast<std::uint64_t>(px) * 131071ULL +
            static_cast<std::uint64_t>(py) * 8191ULL +
            static_cast<std::uint64_t>(rc.weather);
        c.r += (hash_unit(key) - 0.5) * 2 * wp.noise;
        c.g += (hash_unit(key ^ 0x5555ULL) - 0.5) * 2 * wp.noise;
        c.b += (hash_unit(key ^ 0xaaaaULL) - 0.5) * 2 * wp.noise;
      }
      if (wp.rain) {
        const std::uint64_t col = static_cast<std::uint64_t>(px / 7 + 13);
        const int phase =
            static_cast<int>(
                Rng::mix(col, static_cast<std::uint64_t>(rc.weather)) % 37ULL);
        if ((px * 2 + py + phase) % 37 == 0) {
          c.r += (0.9 - c.r) * 0.22;
          c.g += (0.9 - c.g) * 0.22;
          c.b += (0.9 - c.b) * 0.22;
        }
      }
      const std::size_t at = nn::Tensor::at3(rc.h, 3, px, py, 0);
      out[at + 0] = clampd(c.r, 0.0, 1.0);
      out[at + 1] = clampd(c.g, 0.0, 1.0);
      out[at + 2] = clampd(c.b, 0.0, 1.0);
    }
  }
  return out;
}

double drivable_distance(const TownMap& town, Vec2 p) {
  const SimParams sp;
  double best = std::numeric_limits<double>::infinity();
  for (const TownNode& n : town.nodes) {
    const double ex = std::max(std::abs(p.x - n.pos.x) - sp.intersection_half, 0.0);
    const double ey = std::max(std::abs(p.y - n.pos.y) - sp.intersection_half, 0.0);
    best = std::min(best, std::hypot(ex, ey));
    if (best == 0) return 0;
  }
  for (const Segment& s : town.segments) {
    double along, lat, a0, a1;
    if (s.axis == 0) {
      along = p.x;
      lat = p.y - s.a.y;
      a0 = s.a.x;
      a1 = s.b.x;
    } else {
      along = p.y;
      lat = p.x - s.a.x;
      a0 = s.a.y;
      a1 = s.b.y;
    }
    const double ex = std::max({a0 - along, along - a1, 0.0});
    const double ey = std::max(std::abs(lat) - sp.road_half_width, 0.0);
    best = std::min(best, std::hypot(ex, ey));
    if (best == 0) return 0;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Episodes

EpisodeLimits default_limits(const Route& route, const SimParams& p) {
  EpisodeLimits lim;
  lim.max_steps = static_cast<int>(
                      std::ceil(2.0 * route.length / (p.target_speed * p.dt))) +
                  100;
  lim.goal_radius = p.goal_radius;
  return lim;
}

EpisodeResult run_episode(Controller& controller, const TownMap& town,
                          const Route& route, const EpisodeLimits& limits,
                          const SimParams& p, const RenderConfig& rc,
                          std::vector<ScriptedAgent> agents,
                          const FrameSink& sink) {
  EpisodeResult res;
  if (route.wps.size() < 2) {
    res.error = "route has fewer than 2 waypoints";
    return res;
  }
  RouteTracker tracker(&route);
  std::vector<RouteTracker> agent_trackers;
  std::vector<VehicleState> agent_states;
  agent_trackers.reserve(agents.size());
  for (const ScriptedAgent& a : agents) {
    agent_trackers.emplace_back(&a.route);
    VehicleState st;
    st.x = a.route.wps.front().pos.x;
    st.y = a.route.wps.front().pos.y;
    const Vec2 d = a.route.wps[1].pos - a.route.wps[0].pos;
    st.heading = std::atan2(d.y, d.x);
    st.speed = a.speed_scale * p.target_speed;
    agent_states.push_back(st);
  }

  VehicleState st;
  st.x = route.wps.front().pos.x;
  st.y = route.wps.front().pos.y;
  {
    const Vec2 d = route.wps[1].pos - route.wps[0].pos;
    st.heading = std::atan2(d.y, d.x);
  }
  st.speed = 0;

  const nn::Tensor no_frame({1, 1, 3});
  bool in_contact = false;
  for (int step = 0; step < limits.max_steps; ++step) {
    const Vec2 pos{st.x, st.y};
    tracker.update(pos);
    if (tracker.finished(pos, limits.goal_radius)) {
      res.success = true;
      break;
    }
    const double paved = drivable_distance(town, pos);
    if (paved > p.offroad_margin) {
      res.off_road = true;
      break;
    }
    const Command cmd = tracker.command();

    nn::Tensor frame = no_frame;
    std::vector<AgentBox> boxes;
    if (limits.render_frames) {
      boxes.reserve(agent_states.size());
      for (std::size_t i = 0; i < agent_states.size(); ++i)
        boxes.push_back({{agent_states[i].x, agent_states[i].y},
                         agent_states[i].heading,
                         agents[i].color_id});
      frame = render(town, st, rc, boxes);
    }

    controller.observe_agents(agent_states);
    ControlOutput out;
    try {
      out = controller.control(frame, st, cmd);
    } catch (const std::exception& e) {
      res.error = std::string("controller: ") + e.what();
      break;
    }
    if (controller.failed()) {
      res.expert_failure = true;
      break;
    }

    // Collision accounting (rising edge): success semantics follow the
    // benchmark convention of counting infractions without aborting.
    bool contact = false;
    for (const VehicleState& a : agent_states) {
      const double dist = std::hypot(a.x - st.x, a.y - st.y);
      if (dist < p.collision_distance) contact = true;
    }
    if (contact && !in_contact) ++res.collisions;
    in_contact = contact;

    if (sink) {
      StepRecord rec;
      rec.step = step;
      rec.frame = limits.render_frames ? &frame : nullptr;
      rec.state = st;
      rec.cmd = cmd;
      rec.out = out;
      rec.offroad = paved > 0;
      rec.collision = contact;
      sink(rec);
    }

    st = step_dynamics(st, out.steer, out.throttle, p.dt, p);
    for (std::size_t i = 0; i < agent_states.size(); ++i) {
      RouteTracker& at = agent_trackers[i];
      VehicleState& as = agent_states[i];
      at.update({as.x, as.y});
      double athrottle = agents[i].speed_scale;
      if (at.finished({as.x, as.y}, limits.goal_radius) ||
          at.progress() >= agents[i].route.length - 1.0)
        athrottle = 0.0;
      const double asteer = pure_pursuit_steer(as, at, p);
      as = step_dynamics(as, asteer, athrottle, p.dt, p);
    }
    ++res.steps;
  }

  res.timeout = !res.success && !res.off_road && !res.expert_failure &&
                res.error.empty() && res.steps >= limits.max_steps;
  res.sim_time = res.steps * p.dt;
  tracker.update({st.x, st.y});
  res.completion = route.length > 0
                       ? clampd(tracker.progress() / route.length, 0.0, 1.0)
                       : 0.0;
  if (res.success) res.completion = 1.0;
  res.final_state = st;
  return res;
}

}  // namespace attdrive::sim
