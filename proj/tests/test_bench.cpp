#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "attdrive/bench.hpp"
#include "attdrive/dataset.hpp"
#include "attdrive/errors.hpp"
#include "attdrive/image.hpp"
#include "attdrive/rng.hpp"
#include "attdrive/roi.hpp"
#include "attdrive/sim.hpp"
#include "attdrive/trainer.hpp"

namespace fs = std::filesystem;
using namespace attdrive;
using namespace attdrive::bench;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("attdrive_bench_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string str() const { return path.string(); }
};

SuiteConfig tiny_suite_config() {
  SuiteConfig sc;
  sc.episodes_per_cell = 1;
  return sc;
}

// Test-side oracle: compress the waypoint command sequence and count the
// entries that are turn commands.
int oracle_turn_groups(const sim::Route& route) {
  std::vector<policy::Command> compressed;
  for (const sim::Waypoint& w : route.wps)
    if (compressed.empty() || compressed.back() != w.cmd)
      compressed.push_back(w.cmd);
  int turns = 0;
  for (policy::Command c : compressed)
    if (c == policy::Command::turn_left || c == policy::Command::turn_right)
      ++turns;
  return turns;
}

const sim::TownMap& suite_town(const BenchmarkSuite& suite, Condition c) {
  static std::map<std::uint64_t, sim::TownMap> cache;
  const TownSpec& spec = (c == Condition::test_town_seen ||
                          c == Condition::test_town_unseen)
                             ? suite.town_b
                             : suite.town_a;
  auto it = cache.find(spec.seed);
  if (it == cache.end())
    it = cache
             .emplace(spec.seed,
                      sim::build_town(spec.seed, spec.blocks_w, spec.blocks_h))
             .first;
  return it->second;
}

Image8 noise_image(int w, int h, std::uint64_t seed) {
  Rng rng(seed);
  Image8 img;
  img.w = w;
  img.h = h;
  img.rgb.resize(static_cast<std::size_t>(w) * h * 3);
  for (auto& v : img.rgb) v = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

// Minimal synthetic dataset so trainer-backed orchestration paths can run.
void write_synth_dataset(const std::string& root, int w, int h,
                         int frames_per_episode, std::uint64_t seed) {
  data::Manifest m;
  m.width = w;
  m.height = h;
  const char* splits[2] = {"train", "val"};
  for (int e = 0; e < 2; ++e) {
    const std::string dir = "episode_000" + std::to_string(e);
    data::EpisodeWriter writer((fs::path(root) / dir).string(), w, h, e % 4,
                               std::string("route-") + splits[e]);
    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(e)));
    for (int i = 0; i < frames_per_episode; ++i) {
      nn::Tensor frame({w, h, 3});
      for (double& v : frame.data()) v = rng.unit();
      data::EpisodeWriter::FrameRecord rec;
      rec.frame = &frame;
      rec.steer = rng.uniform(-0.8, 0.8);
      rec.throttle = 1.0;
      rec.speed = 2.0;
      rec.command = i % 4;
      writer.add(rec);
    }
    writer.finalize();
    data::EpisodeEntry entry;
    entry.dir = dir;
    entry.split = splits[e];
    entry.weather = e % 4;
    entry.frames = frames_per_episode;
    entry.route_id = std::string("route-") + splits[e];
    m.episodes.push_back(entry);
  }
  data::write_manifest(root, m);
}

train::TrainConfig tiny_train_config(const std::string& data_root,
                                     const std::string& out_dir) {
  train::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.lr = 1e-3;
  cfg.seed = 7;
  cfg.input_w = 64;
  cfg.input_h = 64;
  cfg.grid = roi::GridConfig{1, 1, 1, 1};
  cfg.data_root = data_root;
  cfg.out_dir = out_dir;
  return cfg;
}

}  // namespace

TEST_SUITE_BEGIN("bench");

TEST_CASE("suite structure, route classification, and weather assignment") {
  const SuiteConfig cfg;  // defaults: 3 per cell, towns 1 and 2
  const BenchmarkSuite suite = build_suite(cfg);
  CHECK(suite.episodes.size() ==
        static_cast<std::size_t>(kTaskCount * kConditionCount *
                                 cfg.episodes_per_cell));
  CHECK_NOTHROW(validate_suite(suite, nullptr, 10));

  const sim::SimParams p;
  std::set<std::string> ids;
  for (const BenchEpisode& e : suite.episodes) {
    CHECK(ids.insert(e.id).second);  // unique ids
    const sim::TownMap& town = suite_town(suite, e.condition);
    const sim::Route route =
        sim::plan_route(town, e.start_node, e.goal_node, e.route_seed, p);
    const int turns = oracle_turn_groups(route);
    switch (e.task) {
      case Task::straight: CHECK(turns == 0); break;
      case Task::one_turn: CHECK(turns == 1); break;
      case Task::navigation:
      case Task::navigation_dynamic: CHECK(turns >= 2); break;
    }
    const bool seen = e.condition == Condition::train_town_seen ||
                      e.condition == Condition::test_town_seen;
    if (seen) {
      CHECK(e.weather >= 0);
      CHECK(e.weather < sim::kTrainWeatherCount);
    } else {
      CHECK(e.weather >= sim::kTrainWeatherCount);
      CHECK(e.weather < sim::kWeatherCount);
    }
    const TownSpec& spec = (e.condition == Condition::test_town_seen ||
                            e.condition == Condition::test_town_unseen)
                               ? suite.town_b
                               : suite.town_a;
    CHECK(e.route_id ==
          route_id(spec, e.start_node, e.goal_node, e.route_seed));
    if (e.task == Task::navigation_dynamic)
      CHECK(e.agents.size() ==
            static_cast<std::size_t>(cfg.agents_per_dynamic));
    else
      CHECK(e.agents.empty());
  }

  // Determinism: a second build yields the identical suite.
  const BenchmarkSuite again = build_suite(cfg);
  REQUIRE(again.episodes.size() == suite.episodes.size());
  for (std::size_t i = 0; i < suite.episodes.size(); ++i) {
    CHECK(again.episodes[i].id == suite.episodes[i].id);
    CHECK(again.episodes[i].start_node == suite.episodes[i].start_node);
    CHECK(again.episodes[i].goal_node == suite.episodes[i].goal_node);
    CHECK(again.episodes[i].route_seed == suite.episodes[i].route_seed);
    CHECK(again.episodes[i].weather == suite.episodes[i].weather);
  }
}

TEST_CASE("dynamic episodes: cross traffic never shares the ego lane") {
  const BenchmarkSuite suite = build_suite(SuiteConfig{});
  const sim::SimParams p;
  int checked = 0;
  for (const BenchEpisode& e : suite.episodes) {
    if (e.task != Task::navigation_dynamic) continue;
    const sim::TownMap& town = suite_town(suite, e.condition);
    const sim::Route ego =
        sim::plan_route(town, e.start_node, e.goal_node, e.route_seed, p);
    std::set<std::pair<int, int>> ego_edges;
    for (std::size_t i = 0; i + 1 < ego.node_path.size(); ++i)
      ego_edges.insert({ego.node_path[i], ego.node_path[i + 1]});
    for (const AgentSpec& a : e.agents) {
      const sim::Route ar =
          sim::plan_route(town, a.start_node, a.goal_node, a.route_seed, p);
      for (std::size_t i = 0; i + 1 < ar.node_path.size(); ++i)
        CHECK(!ego_edges.count({ar.node_path[i], ar.node_path[i + 1]}));
      // Agents park at their goal; the goal must sit clear of the ego path.
      double goal_clear = 1e18;
      for (const sim::Waypoint& w : ego.wps)
        goal_clear = std::min(goal_clear, (w.pos - ar.wps.back().pos).norm());
      CHECK(goal_clear >= p.yield_distance);
      CHECK((ar.wps.front().pos - ego.wps.front().pos).norm() >= 10.0);
      ++checked;
    }
  }
  CHECK(checked > 0);
}

TEST_CASE("split hygiene: test-town benchmark routes may not be trained on") {
  const BenchmarkSuite suite = build_suite(tiny_suite_config());
  const BenchEpisode* test_ep = nullptr;
  const BenchEpisode* train_ep = nullptr;
  for (const BenchEpisode& e : suite.episodes) {
    if (e.condition == Condition::test_town_seen && !test_ep) test_ep = &e;
    if (e.condition == Condition::train_town_seen && !train_ep) train_ep = &e;
  }
  REQUIRE(test_ep != nullptr);
  REQUIRE(train_ep != nullptr);

  data::Manifest m;
  data::EpisodeEntry entry;
  entry.dir = "episode_0000";
  entry.split = "train";
  entry.frames = 1;
  entry.route_id = test_ep->route_id;
  m.episodes.push_back(entry);
  CHECK_THROWS_AS(validate_suite(suite, &m, 0), ConfigError);

  // Training on train-town routes is the point of the benchmark split.
  m.episodes[0].route_id = train_ep->route_id;
  CHECK_NOTHROW(validate_suite(suite, &m, 0));
}

TEST_CASE("expert driver achieves 100% success on every benchmark cell") {
  const BenchmarkSuite suite = build_suite(SuiteConfig{});
  const sim::SimParams p;
  const ControllerFactory expert =
      [&p](const BenchEpisode&, const sim::TownMap&,
           const sim::Route& route) -> std::unique_ptr<sim::Controller> {
    return std::make_unique<sim::ExpertDriver>(&route, p);
  };
  const BenchReport report =
      run_benchmark_with(suite, expert, /*render_frames=*/false, 64, 64);
  for (int t = 0; t < kTaskCount; ++t)
    for (int c = 0; c < kConditionCount; ++c) {
      const CellStats& cell = report.cells[t][c];
      INFO(task_name(static_cast<Task>(t)),
           " / ", condition_name(static_cast<Condition>(c)));
      CHECK(cell.episodes == 3);
      CHECK(cell.successes == cell.episodes);
      CHECK(cell.collisions == 0);
    }
  CHECK(report.average_success_pct() == doctest::Approx(100.0));
  CHECK(report.task_success_pct(Task::navigation_dynamic) ==
        doctest::Approx(100.0));
  for (const EpisodeOutcome& e : report.episodes) {
    CHECK(e.completion == doctest::Approx(1.0).epsilon(0.05));
    CHECK(e.offroad_count == 0);
  }

  // Bitwise-identical reports on a rerun (wall time is not recorded).
  const BenchReport again =
      run_benchmark_with(suite, expert, /*render_frames=*/false, 64, 64);
  CHECK(report.to_json() == again.to_json());
  CHECK(report.to_text() == again.to_text());
}

TEST_CASE("randomly initialised policy is far below the expert") {
  SuiteConfig sc = tiny_suite_config();
  sc.town_a_only = true;
  const BenchmarkSuite suite = build_suite(sc);
  CHECK(suite.episodes.size() == 8);  // 4 tasks x 2 train-town conditions

  policy::ModelConfig mc;
  mc.input_w = 64;
  mc.input_h = 64;
  mc.grid = roi::GridConfig{1, 1, 1, 1};
  const policy::PolicyModel model = policy::PolicyModel::init(mc, 99);
  BenchOptions opt;
  opt.log_attention = true;
  const BenchReport report = run_benchmark(model, suite, opt);
  CHECK(report.episodes.size() == 8);
  CHECK(report.task_success_pct(Task::navigation) == doctest::Approx(0.0));
  CHECK(report.average_success_pct() < 100.0);
  int with_attention = 0;
  for (const EpisodeOutcome& e : report.episodes) {
    CHECK(e.steps > 0);
    if (!e.attention_log.empty()) {
      ++with_attention;
      for (const auto& alpha : e.attention_log) {
        REQUIRE(alpha.size() == 4);
        double sum = 0;
        for (double a : alpha) sum += a;
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
      }
    }
  }
  CHECK(with_attention == 8);
}

TEST_CASE("overlay: one-hot attention shades exactly one region") {
  const roi::RoIGrid grid = roi::generate_grid(roi::GridConfig{});
  REQUIRE(grid.regions.size() == 48);
  const Image8 frame = noise_image(96, 64, 42);
  std::vector<double> alpha(48, 0.0);
  const std::size_t hot = 5;
  alpha[hot] = 1.0;
  const Overlay ov = render_attention_overlay(
      frame, grid, alpha, policy::Command::turn_left, "");
  const Rect r = roi::project_region(grid.regions[hot], frame.w, frame.h);
  double peak = 0.0;
  for (double s : ov.shade.data()) peak = std::max(peak, s);
  CHECK(peak == 1.0);
  for (int x = 0; x < frame.w; ++x)
    for (int y = 0; y < frame.h; ++y) {
      const bool inside = x >= r.x0 && x < r.x1 && y >= r.y0 && y < r.y1;
      const double s =
          ov.shade.data()[static_cast<std::size_t>(x) * frame.h + y];
      if (inside) {
        CHECK(s > 0.0);  // feathered footprint, strictly positive inside
        CHECK(s <= 1.0);
      } else {
        CHECK(s == 0.0);  // no leakage outside the hot region
      }
      for (int c = 0; c < 3; ++c) {
        const double base = frame.at(x, y, c) / 255.0;
        const double color = c == 0 ? 1.0 : 0.0;  // turn_left is red
        const double expect = base * (1.0 - 0.5 * s) + color * 0.5 * s;
        const int u8 = static_cast<int>(std::nearbyint(
            std::clamp(expect * 255.0, 0.0, 255.0)));
        CHECK(static_cast<int>(ov.image.at(x, y, c)) == u8);
        if (!inside)  // untouched pixels survive quantization bit-for-bit
          CHECK(ov.image.at(x, y, c) == frame.at(x, y, c));
      }
    }
}

TEST_CASE("overlay: uniform attention decodes uniformly over the union") {
  const Image8 frame = noise_image(64, 48, 7);

  // Non-overlapping partition: four equal quadrants must come back with
  // identical coefficients and a tie-consistent perfect rank correlation.
  roi::RoIGrid quad;
  quad.regions = {
      {roi::BoxType::medium, 0.0, 0.0, 0.5, 0.5},
      {roi::BoxType::medium, 0.5, 0.0, 1.0, 0.5},
      {roi::BoxType::medium, 0.0, 0.5, 0.5, 1.0},
      {roi::BoxType::medium, 0.5, 0.5, 1.0, 1.0},
  };
  const std::vector<double> alpha(4, 0.25);
  const Overlay ov = render_attention_overlay(
      frame, quad, alpha, policy::Command::go_straight, "");
  for (double s : ov.shade.data()) CHECK(s > 0.0);  // quadrants tile the frame
  const std::vector<double> dq = decode_region_shades(ov.shade, quad);
  for (double d : dq) CHECK(d == doctest::Approx(0.25).epsilon(1e-9));
  CHECK(rank_correlation(dq, alpha) == 1.0);

  // Overlapping 48-region grid: the union covers every pixel, and the
  // decoded coefficients are uniform even though the raw map is not.
  const roi::RoIGrid grid = roi::generate_grid(roi::GridConfig{});
  const std::vector<double> uniform(48, 1.0 / 48.0);
  const Overlay ov48 = render_attention_overlay(
      frame, grid, uniform, policy::Command::follow_lane, "");
  for (double s : ov48.shade.data()) CHECK(s > 0.0);
  const std::vector<double> d48 = decode_region_shades(ov48.shade, grid);
  for (double d : d48) CHECK(d == doctest::Approx(1.0 / 48.0).epsilon(1e-8));
  CHECK(rank_correlation(d48, uniform) == 1.0);
}

TEST_CASE("overlay: bitwise match against an independent rasterizer") {
  const roi::RoIGrid grid = roi::generate_grid(roi::GridConfig{});
  const Image8 frame = noise_image(120, 56, 11);
  Rng rng(314);
  std::vector<double> alpha(grid.regions.size());
  double sum = 0;
  for (double& a : alpha) {
    a = rng.uniform(0.01, 1.0);
    sum += a;
  }
  for (double& a : alpha) a /= sum;
  // Feed exactly-normalised weights (the contract tolerance is 1e-6).
  const policy::Command cmd = policy::Command::turn_right;
  const Overlay ov = render_attention_overlay(frame, grid, alpha, cmd, "");

  // Reference: pixel-major accumulation in region order, compositing rule
  // restated from scratch (bilinear tent per region, peak at rect center).
  std::vector<Rect> rects;
  for (const auto& spec : grid.regions)
    rects.push_back(roi::project_region(spec, frame.w, frame.h));
  nn::Tensor shade_ref({frame.w, frame.h});
  for (int x = 0; x < frame.w; ++x)
    for (int y = 0; y < frame.h; ++y) {
      double s = 0;
      for (std::size_t i = 0; i < rects.size(); ++i) {
        const Rect& r = rects[i];
        if (x < r.x0 || x >= r.x1 || y < r.y0 || y >= r.y1) continue;
        const double u = (x + 0.5 - r.x0) / (r.x1 - r.x0);
        const double v = (y + 0.5 - r.y0) / (r.y1 - r.y0);
        const double t = (1.0 - std::abs(2.0 * u - 1.0)) *
                         (1.0 - std::abs(2.0 * v - 1.0));
        s += alpha[i] * t;
      }
      shade_ref.data()[static_cast<std::size_t>(x) * frame.h + y] = s;
    }
  double peak = 0;
  for (double s : shade_ref.data()) peak = std::max(peak, s);
  for (double& s : shade_ref.data()) s /= peak;
  const std::array<double, 3> color = {0.0, 1.0, 1.0};  // turn_right is cyan
  nn::Tensor blended({frame.w, frame.h, 3});
  for (int x = 0; x < frame.w; ++x)
    for (int y = 0; y < frame.h; ++y) {
      const double s =
          shade_ref.data()[static_cast<std::size_t>(x) * frame.h + y];
      for (int c = 0; c < 3; ++c)
        blended.data()[nn::Tensor::at3(frame.h, 3, x, y, c)] =
            (frame.at(x, y, c) / 255.0) * (1.0 - 0.5 * s) +
            color[static_cast<std::size_t>(c)] * 0.5 * s;
    }
  const Image8 ref = quantize(blended);
  REQUIRE(ov.image.rgb.size() == ref.rgb.size());
  CHECK(std::memcmp(ov.image.rgb.data(), ref.rgb.data(), ref.rgb.size()) == 0);
  for (std::size_t i = 0; i < shade_ref.data().size(); ++i)
    CHECK(ov.shade.data()[i] == shade_ref.data()[i]);
}

TEST_CASE("overlay contract: weight count, normalisation, file output") {
  const roi::RoIGrid grid = roi::generate_grid(roi::GridConfig{});
  const Image8 frame = noise_image(48, 32, 3);
  std::vector<double> alpha(48, 1.0 / 48.0);

  std::vector<double> short_alpha(47, 1.0 / 47.0);
  CHECK_THROWS_AS(render_attention_overlay(frame, grid, short_alpha,
                                           policy::Command::follow_lane, ""),
                  ConfigError);
  std::vector<double> scaled = alpha;
  for (double& a : scaled) a *= 1.5;
  CHECK_THROWS_AS(render_attention_overlay(frame, grid, scaled,
                                           policy::Command::follow_lane, ""),
                  ConfigError);

  TempDir tmp;
  const std::string path = (tmp.path / "overlay.ppm").string();
  const Overlay ov = render_attention_overlay(
      frame, grid, alpha, policy::Command::follow_lane, path);
  REQUIRE(fs::exists(path));
  const Image8 back = read_ppm(path);
  CHECK(back.w == ov.image.w);
  CHECK(back.h == ov.image.h);
  CHECK(std::memcmp(back.rgb.data(), ov.image.rgb.data(), back.rgb.size()) ==
        0);
}

TEST_CASE("decoded region shades rank-match the attention weights") {
  const roi::RoIGrid grid = roi::generate_grid(roi::GridConfig{});
  const Image8 frame = noise_image(192, 88, 21);

  SUBCASE("synthetic weights") {
    Rng rng(2718);
    std::vector<double> alpha(48);
    double sum = 0;
    for (double& a : alpha) {
      a = rng.uniform(0.001, 1.0);
      sum += a;
    }
    for (double& a : alpha) a /= sum;
    const Overlay ov = render_attention_overlay(
        frame, grid, alpha, policy::Command::follow_lane, "");
    const std::vector<double> decoded = decode_region_shades(ov.shade, grid);
    REQUIRE(decoded.size() == alpha.size());
    for (std::size_t i = 0; i < alpha.size(); ++i)
      CHECK(decoded[i] == doctest::Approx(alpha[i]).epsilon(1e-8));
    CHECK(rank_correlation(decoded, alpha) == 1.0);
  }

  SUBCASE("weights straight out of the model") {
    const policy::ModelConfig mc;  // default 192x88, 48 regions
    const policy::PolicyModel model = policy::PolicyModel::init(mc, 5);
    nn::Tensor input({192, 88, 3});
    Rng rng(9);
    for (double& v : input.data()) v = rng.unit();
    const policy::ForwardTrace trace =
        model.forward(input, policy::Command::turn_right);
    REQUIRE(trace.alpha.size() == 48);
    const Overlay ov = render_attention_overlay(
        frame, grid, trace.alpha, policy::Command::turn_right, "");
    const std::vector<double> decoded = decode_region_shades(ov.shade, grid);
    CHECK(rank_correlation(decoded, trace.alpha) == 1.0);
  }
}

TEST_CASE("rank correlation: agreement, reversal, and degenerate input") {
  const std::vector<double> a = {0.1, 0.4, 0.2, 0.9};
  const std::vector<double> rev = {0.9, 0.2, 0.4, 0.1};
  CHECK(rank_correlation(a, a) == 1.0);
  CHECK(rank_correlation(a, rev) == doctest::Approx(-1.0));
  const std::vector<double> scaled = {1.0, 4.0, 2.0, 9.0};
  CHECK(rank_correlation(a, scaled) == 1.0);  // monotone map preserves ranks
  const std::vector<double> flat = {0.5, 0.5, 0.5, 0.5};
  CHECK(rank_correlation(flat, flat) == 1.0);  // identical tie structure
  CHECK_THROWS_AS(rank_correlation(flat, a), NumericError);
  CHECK_THROWS_AS(rank_correlation(a, std::vector<double>{1.0}),
                  ConfigError);
}

TEST_CASE("grid_without removes exactly one box family") {
  const roi::GridConfig base;  // {2, 6, 8, 32}
  CHECK(roi::generate_grid(base).regions.size() == 48);
  CHECK(roi::generate_grid(grid_without(base, roi::BoxType::small))
            .regions.size() == 16);
  CHECK(roi::generate_grid(grid_without(base, roi::BoxType::medium))
            .regions.size() == 40);
  CHECK(roi::generate_grid(grid_without(base, roi::BoxType::bigV))
            .regions.size() == 46);
  CHECK(roi::generate_grid(grid_without(base, roi::BoxType::bigH))
            .regions.size() == 42);

  // Removing the only family leaves nothing to attend to.
  train::TrainConfig cfg;
  cfg.grid = roi::GridConfig{0, 0, 0, 4};
  CHECK_THROWS_AS(
      ablation_box_removal(cfg, roi::BoxType::small, SuiteConfig{}, {}),
      ConfigError);
}

TEST_CASE("ablation orchestration: train, bench, and report on one config") {
  TempDir tmp;
  const std::string data_root = (tmp.path / "data").string();
  fs::create_directories(data_root);
  write_synth_dataset(data_root, 64, 64, 16, 1234);
  train::TrainConfig cfg =
      tiny_train_config(data_root, (tmp.path / "runs").string());
  cfg.grid = roi::GridConfig{1, 1, 1, 1};

  SuiteConfig sc = tiny_suite_config();
  const AblationResult res =
      ablation_box_removal(cfg, roi::BoxType::bigV, sc, {});
  CHECK(res.region_count == 3);
  CHECK(!res.checkpoint.empty());
  CHECK(fs::exists(res.checkpoint));
  CHECK(res.training.history.size() == 1);
  // town_a_only: 4 tasks x 2 conditions x 1 episode
  CHECK(res.bench.episodes.size() == 8);
  const train::LoadedCheckpoint lc = train::load_checkpoint(res.checkpoint);
  CHECK(lc.model.config().grid.big_v == 0);
  CHECK(lc.model.config().grid.big_h == 1);
}

TEST_CASE("compare_variants: like-for-like enforcement and gap reporting") {
  TempDir tmp;
  const std::string data_root = (tmp.path / "data").string();
  fs::create_directories(data_root);
  write_synth_dataset(data_root, 64, 64, 16, 77);

  auto train_variant = [&](policy::Variant v, std::uint64_t seed,
                           const std::string& name) {
    train::TrainConfig cfg =
        tiny_train_config(data_root, (tmp.path / name).string());
    cfg.variant = v;
    cfg.seed = seed;
    const train::TrainResult r = train::train(cfg);
    REQUIRE(!r.diverged);
    return r.final_checkpoint;
  };
  const std::string full =
      train_variant(policy::Variant::full_attention, 7, "full");
  const std::string noatt =
      train_variant(policy::Variant::no_attention, 7, "noatt");
  const std::string other_seed =
      train_variant(policy::Variant::independent_roi, 8, "otherseed");

  SuiteConfig sc = tiny_suite_config();
  sc.town_a_only = true;
  const BenchmarkSuite suite = build_suite(sc);

  CHECK_THROWS_AS(compare_variants({full}, suite, {}), ConfigError);
  CHECK_THROWS_AS(compare_variants({full, other_seed}, suite, {}),
                  ConfigError);

  const CompareReport rep = compare_variants({full, noatt}, suite, {});
  REQUIRE(rep.variants.size() == 2);
  CHECK(rep.variants[0].variant == policy::Variant::full_attention);
  CHECK(rep.variants[1].variant == policy::Variant::no_attention);
  REQUIRE(rep.full_minus_no_attention_avg.has_value());
  CHECK(*rep.full_minus_no_attention_avg ==
        doctest::Approx(rep.variants[0].report.average_success_pct() -
                        rep.variants[1].report.average_success_pct()));
  CHECK(!rep.indep_minus_full_straight.has_value());
  CHECK(!rep.full_minus_indep_one_turn.has_value());
  CHECK(rep.to_text().find("full - no_attention") != std::string::npos);
  CHECK(nlohmann::json::parse(rep.to_json())
            .at("full_minus_no_attention_avg")
            .is_number());

  // Reflexive comparison: the same checkpoint twice must benchmark
  // identically (run-to-run determinism of the whole pipeline).
  const CompareReport self = compare_variants({full, full}, suite, {});
  CHECK(self.variants[0].report.to_json() == self.variants[1].report.to_json());
}

TEST_SUITE_END();
