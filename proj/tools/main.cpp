// attdrive: single entry point wiring all modules into reproducible
// commands. Subcommands: gen-data, train, eval-offline, bench, explain,
// gradcheck, grid-dump, ablate. Exit codes: 0 success, 1 runtime failure
// (one-line "error: ..." on stderr), 2 usage error (usage text).
#include <algorithm>
#include <array>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "attdrive/bench.hpp"
#include "attdrive/config.hpp"
#include "attdrive/dataset.hpp"
#include "attdrive/errors.hpp"
#include "attdrive/image.hpp"
#include "attdrive/policy.hpp"
#include "attdrive/rng.hpp"
#include "attdrive/roi.hpp"
#include "attdrive/sim.hpp"
#include "attdrive/tensor.hpp"
#include "attdrive/trainer.hpp"

namespace fs = std::filesystem;
using attdrive::ConfigError;
using attdrive::Rng;
using attdrive::SimError;
using attdrive::cli::RunConfig;
namespace bench = attdrive::bench;
namespace data = attdrive::data;
namespace nn = attdrive::nn;
namespace policy = attdrive::policy;
namespace roi = attdrive::roi;
namespace sim = attdrive::sim;
namespace train = attdrive::train;

namespace {

// Options shared by every subcommand.
struct CommonArgs {
  std::string config = "default";
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
};

void add_common(CLI::App* sub, CommonArgs& c, bool out_required) {
  sub->add_option("--config", c.config,
                  "config file (key=value lines) or 'default'")
      ->capture_default_str();
  CLI::Option* out =
      sub->add_option("--out", c.out, "output directory for artifacts");
  if (out_required) out->required();
  sub->add_option("--seed", c.seed, "override the run seed");
  sub->add_option("--set", c.sets,
                  "override one config key, key=value (repeatable)");
}

// Config file + --set overrides in order + --seed (dedicated flag wins).
RunConfig resolve(const CommonArgs& c) {
  RunConfig cfg = RunConfig::load(c.config);
  for (const std::string& s : c.sets) cfg.set(s);
  if (c.seed) cfg.set("seed", std::to_string(*c.seed));
  return cfg;
}

// Collects artifact paths (relative to --out) and writes artifacts.json.
// Every run logs its fully resolved config: to {out}/config.resolved when
// --out is given, to stderr otherwise.
class ArtifactLog {
 public:
  ArtifactLog(std::string command, std::string out_dir, const RunConfig& cfg)
      : command_(std::move(command)), out_(std::move(out_dir)) {
    if (out_.empty()) {
      std::cerr << "# resolved config\n" << cfg.resolved_text();
      return;
    }
    fs::create_directories(out_);
    std::ofstream f(out_ + "/config.resolved");
    if (!f) throw attdrive::IoError("cannot write " + out_ + "/config.resolved");
    f << cfg.resolved_text();
    add("config.resolved");
  }

  void add(const std::string& rel_path) {
    if (!out_.empty()) paths_.push_back(rel_path);
  }

  const std::string& out() const { return out_; }

  void write() {
    if (out_.empty()) return;
    nlohmann::ordered_json j;
    j["command"] = command_;
    j["artifacts"] = paths_;
    std::ofstream f(out_ + "/artifacts.json");
    if (!f) throw attdrive::IoError("cannot write " + out_ + "/artifacts.json");
    f << j.dump(2) << "\n";
  }

 private:
  std::string command_;
  std::string out_;
  std::vector<std::string> paths_;
};

std::string require_data_root(const RunConfig& cfg) {
  const std::string root = cfg.get("data.root");
  if (root.empty())
    throw ConfigError("data.root is empty; pass --set data.root=<dir>");
  return root;
}

bench::SuiteConfig suite_config(const RunConfig& cfg) {
  bench::SuiteConfig sc;
  sc.seed = cfg.get_u64("seed");
  sc.episodes_per_cell = static_cast<int>(cfg.get_int("bench.episodes_per_cell"));
  const int blocks = static_cast<int>(cfg.get_int("bench.blocks"));
  sc.town_a = bench::TownSpec{cfg.get_u64("bench.town_a_seed"), blocks, blocks,
                              "townA"};
  sc.town_b = bench::TownSpec{cfg.get_u64("bench.town_b_seed"), blocks, blocks,
                              "townB"};
  sc.town_a_only = cfg.get_bool("bench.town_a_only");
  sc.agents_per_dynamic = static_cast<int>(cfg.get_int("bench.agents"));
  return sc;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw attdrive::IoError("cannot write " + path);
  f << text;
}

// ---------------------------------------------------------------------------
// grid-dump: one line per region, "index type x0 y0 x1 y1".

int run_grid_dump(const RunConfig& cfg, ArtifactLog& log) {
  const roi::RoIGrid grid = roi::generate_grid(cfg.grid());
  std::string text;
  for (std::size_t i = 0; i < grid.regions.size(); ++i) {
    const roi::RegionSpec& r = grid.regions[i];
    char line[160];
    std::snprintf(line, sizeof line, "%zu %s %.12g %.12g %.12g %.12g\n", i,
                  roi::box_type_name(r.box_type), r.x0, r.y0, r.x1, r.y1);
    text += line;
  }
  std::fputs(text.c_str(), stdout);
  if (!log.out().empty()) {
    write_text(log.out() + "/grid.txt", text);
    log.add("grid.txt");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck: finite-difference check of the analytic gradient on a random
// frame, per parameter entry (backbone + the selected command head).

int run_gradcheck(const RunConfig& cfg, ArtifactLog& log,
                  const std::string& command_name, int samples_flag) {
  const policy::ModelConfig mc = cfg.model_config();
  const std::uint64_t seed = cfg.get_u64("seed");
  const policy::Command cmd = policy::command_from_name(command_name);
  const int samples = samples_flag > 0
                          ? samples_flag
                          : static_cast<int>(cfg.get_int("gradcheck.samples"));
  if (samples < 1) throw ConfigError("gradcheck: samples must be >= 1");

  policy::PolicyModel model = policy::PolicyModel::init(mc, seed);
  nn::ParameterStore& store = model.store();

  Rng rng(Rng::mix(seed, 0x67726164ULL));
  nn::Tensor frame({mc.input_w, mc.input_h, 3});
  for (double& v : frame.data()) v = rng.unit();
  const double target = rng.uniform(-0.9, 0.9);
  nn::Tensor target_leaf = nn::Tensor::from({1}, {{target}});

  // Analytic gradient of the scalar squared error at the current params.
  store.zero_grads();
  nn::Tape tape;
  const policy::ForwardTrace trace = model.forward(frame, cmd, &tape);
  const nn::Tensor loss = nn::mse_loss(&tape, trace.steer_node, target_leaf);
  tape.backward(loss);
  const std::vector<double> analytic(store.grads().begin(),
                                     store.grads().end());

  const auto f = [&]() {
    const policy::ForwardTrace t = model.forward(frame, cmd, nullptr);
    const double d = t.steer - target;
    return d * d;
  };

  const std::string head = "head" + std::to_string(static_cast<int>(cmd)) + ".";
  double max_err = 0.0;
  std::string report;
  int entry_index = 0;
  for (const nn::ParameterStore::Entry& e : store.entries()) {
    ++entry_index;
    const bool backbone = e.name.rfind("conv", 0) == 0;
    const bool selected_head = e.name.rfind(head, 0) == 0;
    if (!backbone && !selected_head) continue;  // unselected heads: gated off
    nn::FiniteDiffOptions opt;
    opt.epsilon = 1e-5;
    opt.samples = std::min<int>(samples, static_cast<int>(e.size));
    opt.seed = Rng::mix(seed, 0x6664ULL + static_cast<std::uint64_t>(entry_index));
    const double err = nn::finite_diff_check(
        f, store.values().subspan(e.offset, e.size),
        std::span<const double>(analytic).subspan(e.offset, e.size), opt);
    char line[128];
    std::snprintf(line, sizeof line, "%-18s coords=%d rel_err=%.3e\n",
                  e.name.c_str(), opt.samples, err);
    report += line;
    max_err = std::max(max_err, err);
  }
  char tail[128];
  std::snprintf(tail, sizeof tail, "max rel. error = %.6e (threshold 1e-4)\n",
                max_err);
  report += tail;
  std::fputs(report.c_str(), stdout);
  if (!log.out().empty()) {
    write_text(log.out() + "/gradcheck.txt", report);
    log.add("gradcheck.txt");
  }
  return max_err < 1e-4 ? 0 : 1;
}

// ---------------------------------------------------------------------------
// gen-data: record noisy-expert demonstrations into --out.

int run_gen_data(const RunConfig& cfg, ArtifactLog& log) {
  const int w = static_cast<int>(cfg.get_int("model.input_w"));
  const int h = static_cast<int>(cfg.get_int("model.input_h"));
  const std::uint64_t seed = cfg.get_u64("seed");
  const std::uint64_t town_seed = cfg.get_u64("gen.town_seed");
  const int blocks = static_cast<int>(cfg.get_int("gen.blocks"));
  const long long target_frames = cfg.get_int("gen.frames");
  const double amplitude = cfg.get_double("gen.noise_amplitude");
  const double val_fraction = cfg.get_double("gen.val_fraction");
  if (target_frames < 1) throw ConfigError("gen.frames must be >= 1");
  const std::string root = log.out();

  const sim::SimParams p;
  const sim::TownMap town = sim::build_town(town_seed, blocks, blocks, p);
  const bench::TownSpec tspec{town_seed, blocks, blocks, "townA"};

  std::vector<std::pair<int, int>> pairs;
  for (int a = 0; a < static_cast<int>(town.nodes.size()); ++a)
    for (int b = 0; b < static_cast<int>(town.nodes.size()); ++b)
      if (a != b) pairs.emplace_back(a, b);
  Rng pair_rng(Rng::mix(seed, 0x67656e64ULL));
  pair_rng.shuffle(pairs.begin(), pairs.end());

  data::Manifest m;
  m.width = w;
  m.height = h;
  const long long val_every =
      val_fraction > 0 ? std::max<long long>(2, std::llround(1.0 / val_fraction))
                       : 0;
  long long total = 0;
  long long attempt = 0;
  int accepted = 0;
  int failed = 0;
  std::array<long long, policy::kCommandCount> cmd_frames{};

  while (total < target_frames) {
    if (failed > 100 + 2 * accepted)
      throw SimError("gen-data: expert keeps failing episodes; town/params "
                     "are inconsistent");
    const std::int64_t att = attempt++;
    const auto [a, b] = pairs[static_cast<std::size_t>(att) % pairs.size()];
    const std::uint64_t route_seed =
        Rng::mix(seed, 1000 + static_cast<std::uint64_t>(att));
    const sim::Route route = sim::plan_route(town, a, b, route_seed, p);
    const int weather = accepted % sim::kTrainWeatherCount;
    char rel[32];
    std::snprintf(rel, sizeof rel, "episode_%04d", accepted);
    const std::string dir = root + "/" + rel;
    const std::string rid = bench::route_id(tspec, a, b, route_seed);

    data::EpisodeWriter writer(dir, w, h, weather, rid);
    sim::NoisyExpert expert(
        &route, p, Rng::mix(seed, 7777 + static_cast<std::uint64_t>(att)),
        amplitude);
    const sim::EpisodeLimits limits = sim::default_limits(route, p);
    sim::RenderConfig rc;
    rc.w = w;
    rc.h = h;
    rc.weather = weather;
    std::array<long long, policy::kCommandCount> ep_frames{};
    const sim::FrameSink sink = [&](const sim::StepRecord& rec) {
      data::EpisodeWriter::FrameRecord fr;
      fr.frame = rec.frame;
      fr.steer = rec.out.label_steer;  // clean label; applied steer carries noise
      fr.throttle = rec.out.throttle;
      fr.speed = rec.state.speed;
      fr.command = static_cast<int>(rec.cmd);
      fr.offroad = rec.offroad;
      fr.collision = rec.collision;
      writer.add(fr);
      ++ep_frames[static_cast<int>(rec.cmd)];
    };
    const sim::EpisodeResult res =
        sim::run_episode(expert, town, route, limits, p, rc, {}, sink);
    if (!res.error.empty()) throw SimError("gen-data: " + res.error);
    if (!res.success) {  // noisy expert missed the goal: drop the episode
      ++failed;
      std::error_code ec;
      fs::remove_all(dir, ec);
      continue;
    }
    writer.finalize();
    const bool val = val_every > 0 && (accepted % val_every) == val_every - 1;
    m.episodes.push_back(data::EpisodeEntry{rel, val ? "val" : "train", weather,
                                            writer.frames(), rid});
    for (int c = 0; c < policy::kCommandCount; ++c) cmd_frames[c] += ep_frames[c];
    total += writer.frames();
    ++accepted;
  }

  // A tiny run can end before the val cadence fires; eval needs a val split.
  const bool has_val =
      std::any_of(m.episodes.begin(), m.episodes.end(),
                  [](const data::EpisodeEntry& e) { return e.split == "val"; });
  if (!has_val && m.episodes.size() >= 2) m.episodes.back().split = "val";

  data::validate_manifest(m);
  data::write_manifest(root, m);
  log.add("manifest.json");

  int val_episodes = 0;
  for (const data::EpisodeEntry& e : m.episodes)
    val_episodes += e.split == "val" ? 1 : 0;
  std::printf("episodes=%d val_episodes=%d frames=%lld failed_episodes=%d\n",
              accepted, val_episodes, total, failed);
  std::printf("frames_per_command:");
  for (int c = 0; c < policy::kCommandCount; ++c)
    std::printf(" %s=%lld",
                policy::command_name(policy::command_from_int(c)),
                cmd_frames[c]);
  std::printf("\n");
  return 0;
}

// ---------------------------------------------------------------------------
// train

int run_train(const RunConfig& cfg, ArtifactLog& log) {
  train::TrainConfig tc = cfg.train_config();
  tc.data_root = require_data_root(cfg);
  tc.out_dir = log.out();
  const auto progress = [](const train::EpochMetrics& em) {
    std::printf("epoch %d train_mse=%.8g val_mse=%.8g\n", em.epoch,
                em.train_mse, em.val.mse_total);
    std::fflush(stdout);
  };
  const train::TrainResult r = train::train(tc, progress);
  log.add("metrics.jsonl");
  if (!r.final_checkpoint.empty()) log.add("final.ckpt");
  if (!r.best_checkpoint.empty()) log.add("best.ckpt");
  if (r.diverged) throw attdrive::NumericError("training diverged: " +
                                               r.divergence_message);
  std::printf("best_epoch=%d best_val_mse=%.8g final_checkpoint=%s\n",
              r.best_epoch, r.best_val_mse, r.final_checkpoint.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval-offline

int run_eval_offline(const RunConfig& cfg, ArtifactLog& log,
                     const std::string& checkpoint, const std::string& split) {
  const std::string root = require_data_root(cfg);
  const train::LoadedCheckpoint lc = train::load_checkpoint(checkpoint);
  const data::Dataset ds = data::Dataset::load(root, split);
  const train::EvalResult r = train::evaluate_offline(lc.model, ds);

  nlohmann::ordered_json j;
  j["checkpoint"] = checkpoint;
  j["split"] = split;
  j["samples"] = r.samples;
  j["mse_total"] = r.mse_total;
  nlohmann::ordered_json pc = nlohmann::ordered_json::object();
  for (int c = 0; c < policy::kCommandCount; ++c) {
    nlohmann::ordered_json e;
    e["count"] = r.count_per_command[c];
    if (r.mse_per_command[c])
      e["mse"] = *r.mse_per_command[c];
    else
      e["mse"] = nullptr;
    pc[policy::command_name(policy::command_from_int(c))] = e;
  }
  j["per_command"] = pc;
  const std::string text = j.dump(2) + "\n";
  std::fputs(text.c_str(), stdout);
  if (!log.out().empty()) {
    write_text(log.out() + "/eval.json", text);
    log.add("eval.json");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// bench: one checkpoint -> benchmark table; several -> variant comparison.

int run_bench(const RunConfig& cfg, ArtifactLog& log,
              const std::vector<std::string>& checkpoints) {
  const bench::SuiteConfig sc = suite_config(cfg);
  const bench::BenchmarkSuite suite = bench::build_suite(sc);
  const int active_conditions = sc.town_a_only ? 2 : 4;
  const int min_per_task = sc.episodes_per_cell * active_conditions;
  if (!cfg.get("data.root").empty()) {
    const data::Manifest m = data::read_manifest(cfg.get("data.root"));
    bench::validate_suite(suite, &m, min_per_task);
  } else {
    bench::validate_suite(suite, nullptr, min_per_task);
  }

  if (checkpoints.size() > 1) {
    const bench::CompareReport cr = bench::compare_variants(checkpoints, suite);
    std::fputs(cr.to_text().c_str(), stdout);
    if (!log.out().empty()) {
      write_text(log.out() + "/compare.txt", cr.to_text());
      write_text(log.out() + "/compare.json", cr.to_json());
      log.add("compare.txt");
      log.add("compare.json");
    }
    return 0;
  }

  const train::LoadedCheckpoint lc = train::load_checkpoint(checkpoints.front());
  const bench::BenchReport report = bench::run_benchmark(lc.model, suite);
  std::fputs(report.to_text().c_str(), stdout);
  if (!log.out().empty()) {
    write_text(log.out() + "/report.txt", report.to_text());
    write_text(log.out() + "/report.json", report.to_json());
    log.add("report.txt");
    log.add("report.json");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// explain: attention overlays for held-out scenes, all four commands each.

int run_explain(const RunConfig& cfg, ArtifactLog& log,
                const std::string& checkpoint, const std::string& split) {
  const std::string root = require_data_root(cfg);
  const train::LoadedCheckpoint lc = train::load_checkpoint(checkpoint);
  const policy::PolicyModel& model = lc.model;
  if (model.config().variant == policy::Variant::no_attention)
    throw ConfigError("explain: the no_attention variant has no attention "
                      "weights to visualize");
  const int scenes = static_cast<int>(cfg.get_int("explain.scenes"));
  if (scenes < 1) throw ConfigError("explain.scenes must be >= 1");

  const data::Dataset ds = data::Dataset::load(root, split);
  if (static_cast<int>(ds.size()) < scenes)
    throw ConfigError("explain: split '" + split + "' has " +
                      std::to_string(ds.size()) + " frames, need " +
                      std::to_string(scenes));
  if (ds.width() != model.config().input_w ||
      ds.height() != model.config().input_h)
    throw ConfigError("explain: dataset resolution " +
                      std::to_string(ds.width()) + "x" +
                      std::to_string(ds.height()) +
                      " does not match the checkpoint");

  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(Rng::mix(cfg.get_u64("seed"), 0x6578706cULL));
  rng.shuffle(order.begin(), order.end());
  order.resize(static_cast<std::size_t>(scenes));
  std::sort(order.begin(), order.end());

  nlohmann::ordered_json overlays = nlohmann::ordered_json::array();
  double min_corr = 1.0;
  for (const std::size_t idx : order) {
    const data::Demonstration& demo = ds.demo(idx);
    const nn::Tensor frame = attdrive::to_tensor(demo.frame);
    for (int c = 0; c < policy::kCommandCount; ++c) {
      const policy::Command cmd = policy::command_from_int(c);
      const policy::ForwardTrace trace = model.forward(frame, cmd);
      const std::string name = demo.episode + "_" +
                               std::to_string(demo.frame_index) + "_" +
                               policy::command_name(cmd) + ".ppm";
      const bench::Overlay ov = bench::render_attention_overlay(
          demo.frame, model.grid(), trace.alpha, cmd, log.out() + "/" + name);
      const std::vector<double> decoded =
          bench::decode_region_shades(ov.shade, model.grid());
      const double corr = bench::rank_correlation(trace.alpha, decoded);
      min_corr = std::min(min_corr, corr);
      log.add(name);
      nlohmann::ordered_json e;
      e["file"] = name;
      e["episode"] = demo.episode;
      e["frame"] = demo.frame_index;
      e["command"] = policy::command_name(cmd);
      e["steer"] = trace.steer;
      e["rank_correlation"] = corr;
      overlays.push_back(e);
      std::printf("%s rank_correlation=%.6f\n", name.c_str(), corr);
    }
  }
  nlohmann::ordered_json j;
  j["checkpoint"] = checkpoint;
  j["split"] = split;
  j["scenes"] = scenes;
  j["min_rank_correlation"] = min_corr;
  j["overlays"] = overlays;
  write_text(log.out() + "/explain_report.json", j.dump(2) + "\n");
  log.add("explain_report.json");
  std::printf("min_rank_correlation=%.6f\n", min_corr);
  return 0;
}

// ---------------------------------------------------------------------------
// ablate: retrain with one box type removed, benchmark on the training town.

roi::BoxType box_type_from_name(const std::string& name) {
  if (name == "bigV" || name == "big_v") return roi::BoxType::bigV;
  if (name == "bigH" || name == "big_h") return roi::BoxType::bigH;
  if (name == "medium") return roi::BoxType::medium;
  if (name == "small") return roi::BoxType::small;
  throw ConfigError("unknown box type '" + name +
                    "' (expected big_v, big_h, medium, small or all)");
}

int run_ablate(const RunConfig& cfg, ArtifactLog& log, const std::string& box) {
  train::TrainConfig base = cfg.train_config();
  base.data_root = require_data_root(cfg);
  base.out_dir = log.out();
  bench::SuiteConfig sc = suite_config(cfg);

  const std::string which = box.empty() ? cfg.get("ablate.box") : box;
  std::vector<roi::BoxType> removals;
  if (which == "all") {
    removals = {roi::BoxType::bigV, roi::BoxType::bigH, roi::BoxType::medium,
                roi::BoxType::small};
  } else {
    removals = {box_type_from_name(which)};
  }

  nlohmann::ordered_json results = nlohmann::ordered_json::array();
  std::string text = "removed    regions  best_val_mse  navigation%  average%\n";
  for (const roi::BoxType removed : removals) {
    const bench::AblationResult r =
        bench::ablation_box_removal(base, removed, sc);
    const double nav = r.bench.task_success_pct(bench::Task::navigation);
    const double avg = r.bench.average_success_pct();
    char line[160];
    std::snprintf(line, sizeof line, "%-10s %7d  %12.6g  %11.1f  %8.1f\n",
                  roi::box_type_name(removed), r.region_count,
                  r.training.best_val_mse, nav, avg);
    text += line;
    log.add(fs::relative(r.checkpoint, log.out()).string());
    nlohmann::ordered_json e;
    e["removed"] = roi::box_type_name(removed);
    e["region_count"] = r.region_count;
    e["best_val_mse"] = r.training.best_val_mse;
    e["checkpoint"] = r.checkpoint;
    e["navigation_success_pct"] = nav;
    e["average_success_pct"] = avg;
    e["report"] = nlohmann::ordered_json::parse(r.bench.to_json());
    results.push_back(e);
  }
  std::fputs(text.c_str(), stdout);
  nlohmann::ordered_json j;
  j["results"] = results;
  write_text(log.out() + "/ablate.json", j.dump(2) + "\n");
  write_text(log.out() + "/ablate.txt", text);
  log.add("ablate.json");
  log.add("ablate.txt");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attdrive: conditional imitation-learning driving policy "
               "with visual attention over a fixed RoI grid"};
  app.require_subcommand(1);

  CommonArgs common;
  std::vector<std::string> checkpoints;
  std::string split = "val";
  std::string gradcheck_command = "TurnLeft";
  int gradcheck_samples = 0;  // 0: take gradcheck.samples from the config
  std::string ablate_box;

  CLI::App* gen = app.add_subcommand(
      "gen-data", "record noisy-expert demonstrations into --out");
  add_common(gen, common, /*out_required=*/true);

  CLI::App* tr = app.add_subcommand(
      "train", "train a policy on data.root, checkpoints into --out");
  add_common(tr, common, /*out_required=*/true);

  CLI::App* ev = app.add_subcommand(
      "eval-offline", "offline steering MSE of a checkpoint on one split");
  add_common(ev, common, /*out_required=*/false);
  ev->add_option("--checkpoint", checkpoints, "checkpoint file")->required();
  ev->add_option("--split", split, "dataset split")->capture_default_str();

  CLI::App* be = app.add_subcommand(
      "bench", "closed-loop benchmark; several --checkpoint values compare "
               "variants like-for-like");
  add_common(be, common, /*out_required=*/false);
  be->add_option("--checkpoint", checkpoints, "checkpoint file (repeatable)")
      ->required();

  CLI::App* ex = app.add_subcommand(
      "explain", "attention overlays for held-out scenes, all four commands");
  add_common(ex, common, /*out_required=*/true);
  ex->add_option("--checkpoint", checkpoints, "checkpoint file")->required();
  ex->add_option("--split", split, "dataset split")->capture_default_str();
  ex->add_option("--scenes", [&common](const std::vector<std::string>& v) {
      common.sets.push_back("explain.scenes=" + v.back());
      return true;
    }, "number of held-out scenes");

  CLI::App* gc = app.add_subcommand(
      "gradcheck", "finite-difference gradient check; exit 0 iff the max "
                   "relative error < 1e-4");
  add_common(gc, common, /*out_required=*/false);
  gc->add_option("--samples", gradcheck_samples,
                 "coordinates per parameter entry");
  gc->add_option("--command", gradcheck_command, "selected command head")
      ->capture_default_str();

  CLI::App* gd = app.add_subcommand(
      "grid-dump", "print the RoI grid, one 'index type x0 y0 x1 y1' line "
                   "per region");
  add_common(gd, common, /*out_required=*/false);

  CLI::App* ab = app.add_subcommand(
      "ablate", "retrain with one box type removed and benchmark on the "
                "training town");
  add_common(ab, common, /*out_required=*/true);
  ab->add_option("--box", ablate_box,
                 "big_v, big_h, medium, small or all (default: config "
                 "ablate.box)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help() << std::flush;
    return 2;
  }

  try {
    const RunConfig cfg = resolve(common);
    if (gen->parsed()) {
      ArtifactLog log("gen-data", common.out, cfg);
      const int code = run_gen_data(cfg, log);
      log.write();
      return code;
    }
    if (tr->parsed()) {
      ArtifactLog log("train", common.out, cfg);
      const int code = run_train(cfg, log);
      log.write();
      return code;
    }
    if (ev->parsed()) {
      ArtifactLog log("eval-offline", common.out, cfg);
      const int code = run_eval_offline(cfg, log, checkpoints.front(), split);
      log.write();
      return code;
    }
    if (be->parsed()) {
      ArtifactLog log("bench", common.out, cfg);
      const int code = run_bench(cfg, log, checkpoints);
      log.write();
      return code;
    }
    if (ex->parsed()) {
      ArtifactLog log("explain", common.out, cfg);
      const int code = run_explain(cfg, log, checkpoints.front(), split);
      log.write();
      return code;
    }
    if (gc->parsed()) {
      ArtifactLog log("gradcheck", common.out, cfg);
      const int code =
          run_gradcheck(cfg, log, gradcheck_command, gradcheck_samples);
      log.write();
      return code;
    }
    if (gd->parsed()) {
      ArtifactLog log("grid-dump", common.out, cfg);
      const int code = run_grid_dump(cfg, log);
      log.write();
      return code;
    }
    if (ab->parsed()) {
      ArtifactLog log("ablate", common.out, cfg);
      const int code = run_ablate(cfg, log, ablate_box);
      log.write();
      return code;
    }
    std::cerr << "error: no subcommand\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
