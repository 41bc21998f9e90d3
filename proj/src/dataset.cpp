#include "attdrive/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "attdrive/errors.hpp"
#include "attdrive/rng.hpp"

namespace attdrive::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  os << text;
  if (!os) throw IoError("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  std::string text((std::istreambuf_iterator<char>(is)),
                   std::istreambuf_iterator<char>());
  return text;
}

std::string frame_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d.ppm", i);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Manifest

void write_manifest(const std::string& root, const Manifest& m) {
  json j;
  j["width"] = m.width;
  j["height"] = m.height;
  j["episodes"] = json::array();
  for (const EpisodeEntry& e : m.episodes)
    j["episodes"].push_back({{"dir", e.dir},
                             {"split", e.split},
                             {"weather", e.weather},
                             {"frames", e.frames},
                             {"route_id", e.route_id}});
  write_text_file(root + "/manifest.json", j.dump(2) + "\n");
}

Manifest read_manifest(const std::string& root) {
  const std::string path = root + "/manifest.json";
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw IoError("manifest parse error in " + path + ": " + e.what());
  }
  Manifest m;
  try {
    m.width = j.at("width").get<int>();
    m.height = j.at("height").get<int>();
    for (const json& e : j.at("episodes")) {
      EpisodeEntry ep;
      ep.dir = e.at("dir").get<std::string>();
      ep.split = e.at("split").get<std::string>();
      ep.weather = e.at("weather").get<int>();
      ep.frames = e.at("frames").get<int>();
      ep.route_id = e.at("route_id").get<std::string>();
      m.episodes.push_back(std::move(ep));
    }
  } catch (const json::exception& e) {
    throw IoError("manifest field error in " + path + ": " + e.what());
  }
  if (m.width <= 0 || m.height <= 0)
    throw IoError("manifest resolution invalid in " + path);
  return m;
}

void validate_manifest(const Manifest& m) {
  std::set<std::string> train, val;
  for (const EpisodeEntry& e : m.episodes) {
    if (e.split == "train")
      train.insert(e.route_id);
    else if (e.split == "val")
      val.insert(e.route_id);
    else
      throw ConfigError("manifest: unknown split '" + e.split + "' in " +
                        e.dir);
  }
  for (const std::string& r : train)
    if (val.count(r))
      throw ConfigError("manifest: route " + r +
                        " appears in both train and val splits");
}

// ---------------------------------------------------------------------------
// Recording

EpisodeWriter::EpisodeWriter(std::string episode_dir, int width, int height,
                             int weather, std::string route_id)
    : dir_(std::move(episode_dir)),
      width_(width),
      height_(height),
      weather_(weather),
      route_id_(std::move(route_id)) {
  std::error_code ec;
  fs::create_directories(dir_ + "/frames", ec);
  if (ec) throw IoError("cannot create episode dir: " + dir_);
  json meta;
  meta["complete"] = false;
  meta["frames"] = 0;
  meta["weather"] = weather_;
  meta["route_id"] = route_id_;
  meta["width"] = width_;
  meta["height"] = height_;
  write_text_file(dir_ + "/meta.json", meta.dump(2) + "\n");
}

void EpisodeWriter::add(const FrameRecord& r) {
  if (finalized_) throw IoError("EpisodeWriter: add after finalize");
  if (!r.frame) throw IoError("EpisodeWriter: null frame");
  const Image8 img = quantize(*r.frame);
  if (img.w != width_ || img.h != height_)
    throw IoError("EpisodeWriter: frame resolution mismatch");
  write_ppm(dir_ + "/frames/" + frame_name(count_), img);
  json line;
  line["i"] = count_;
  line["steer"] = r.steer;
  line["throttle"] = r.throttle;
  line["command"] = r.command;
  line["speed"] = r.speed;
  line["offroad"] = r.offroad;
  line["collision"] = r.collision;
  jsonl_ += line.dump();
  jsonl_ += '\n';
  ++count_;
}

void EpisodeWriter::finalize() {
  if (finalized_) return;
  write_text_file(dir_ + "/measurements.jsonl", jsonl_);
  json meta;
  meta["complete"] = true;
  meta["frames"] = count_;
  meta["weather"] = weather_;
  meta["route_id"] = route_id_;
  meta["width"] = width_;
  meta["height"] = height_;
  write_text_file(dir_ + "/meta.json", meta.dump(2) + "\n");
  finalized_ = true;
}

// ---------------------------------------------------------------------------
// Loading

Dataset Dataset::load(const std::string& root, const std::string& split) {
  const Manifest m = read_manifest(root);
  validate_manifest(m);
  Dataset ds;
  ds.width_ = m.width;
  ds.height_ = m.height;
  long attempted = 0;
  for (const EpisodeEntry& e : m.episodes) {
    if (e.split != split) continue;
    const std::string dir = root + "/" + e.dir;
    json meta;
    try {
      meta = json::parse(read_text_file(dir + "/meta.json"));
    } catch (const std::exception&) {
      std::fprintf(stderr, "[dataset] warning: unreadable meta in %s\n",
                   dir.c_str());
      ds.stats_.skipped += e.frames > 0 ? e.frames : 1;
      attempted += e.frames > 0 ? e.frames : 1;
      continue;
    }
    if (!meta.value("complete", false)) {
      std::fprintf(stderr, "[dataset] warning: skipping incomplete %s\n",
                   dir.c_str());
      ds.stats_.skipped += e.frames > 0 ? e.frames : 1;
      attempted += e.frames > 0 ? e.frames : 1;
      continue;
    }
    std::istringstream lines(read_text_file(dir + "/measurements.jsonl"));
    std::string line;
    int line_no = 0;
    while (std::getline(lines, line)) {
      ++attempted;
      const int i = line_no++;
      Demonstration d;
      d.episode = e.dir;
      d.frame_index = i;
      try {
        const json rec = json::parse(line);
        d.steer = rec.at("steer").get<double>();
        d.throttle = rec.at("throttle").get<double>();
        d.speed = rec.at("speed").get<double>();
        d.command = policy::command_from_int(rec.at("command").get<int>());
        d.offroad = rec.at("offroad").get<bool>();
        d.collision = rec.at("collision").get<bool>();
        if (d.steer < -1.0 || d.steer > 1.0)
          throw ConfigError("steer out of range");
        d.frame = read_ppm(dir + "/frames/" + frame_name(i));
        if (d.frame.w != m.width || d.frame.h != m.height)
          throw IoError("frame resolution mismatch");
      } catch (const std::exception& ex) {
        std::fprintf(stderr, "[dataset] warning: %s frame %d: %s\n",
                     dir.c_str(), i, ex.what());
        ++ds.stats_.skipped;
        continue;
      }
      ds.demos_.push_back(std::move(d));
    }
    ++ds.stats_.episodes;
  }
  ds.stats_.frames = static_cast<int>(ds.demos_.size());
  if (attempted > 0 &&
      static_cast<double>(ds.stats_.skipped) > 0.01 * static_cast<double>(attempted))
    throw IoError("dataset " + root + " split '" + split + "': " +
                  std::to_string(ds.stats_.skipped) + "/" +
                  std::to_string(attempted) +
                  " records corrupt (>1% tolerance)");
  return ds;
}

policy::TrainSample Dataset::sample(std::size_t i) const {
  const Demonstration& d = demos_.at(i);
  policy::TrainSample s;
  s.frame = to_tensor(d.frame);
  s.command = d.command;
  s.steer = d.steer;
  return s;
}

std::vector<std::vector<std::size_t>> Dataset::epoch_batches(
    std::uint64_t seed, int epoch, int batch_size) const {
  if (batch_size <= 0)
    throw ConfigError("epoch_batches: batch_size must be positive");
  std::vector<std::size_t> order(demos_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at < order.size();
       at += static_cast<std::size_t>(batch_size)) {
    const std::size_t end =
        std::min(order.size(), at + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Augmentation

namespace {
const AugmentPreset kPresets[kAugmentPresetCount] = {
    {"identity", 1.0, 1.0, 1.0, 1.0, 0.0},
    {"bright", 1.2, 1.0, 1.0, 1.0, 0.0},
    {"dark", 0.8, 1.0, 1.0, 1.0, 0.0},
    {"grain", 1.0, 1.0, 1.0, 1.0, 0.02},
    {"warm", 1.0, 1.1, 1.0, 0.9, 0.0},
    {"cool", 1.0, 0.9, 1.0, 1.1, 0.0},
};
}  // namespace

const AugmentPreset& augment_preset(int id) {
  if (id < 0 || id >= kAugmentPresetCount)
    throw ConfigError("augment preset id out of range: " + std::to_string(id));
  return kPresets[static_cast<std::size_t>(id)];
}

nn::Tensor augment(const nn::Tensor& frame, const AugmentPreset& preset,
                   std::uint64_t seed) {
  if (frame.dims().size() != 3 || frame.dims()[2] != 3)
    throw ShapeError("augment: expected a {W,H,3} frame");
  nn::Tensor out(frame.dims());
  const double gains[3] = {preset.gain_r * preset.brightness,
                           preset.gain_g * preset.brightness,
                           preset.gain_b * preset.brightness};
  const bool noisy = preset.noise_sigma > 0;
  Rng rng(Rng::mix(seed, 0x617567ULL));
  const std::size_t n = frame.size();
  for (std::size_t i = 0; i < n; ++i) {
    double v = frame[i] * gains[i % 3];
    if (noisy) v += rng.normal(0.0, preset.noise_sigma);
    out[i] = clampd(v, 0.0, 1.0);
  }
  return out;
}

}  // namespace attdrive::data
