#include "attdrive/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "attdrive/errors.hpp"
#include "attdrive/policy.hpp"

namespace attdrive::cli {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace

RunConfig::RunConfig() {
  values_ = {
      {"seed", "2026"},
      {"model.variant", "full_attention"},
      {"model.input_w", "192"},
      {"model.input_h", "88"},
      {"grid.big_v", "2"},
      {"grid.big_h", "6"},
      {"grid.medium", "8"},
      {"grid.small", "32"},
      {"train.epochs", "20"},
      {"train.batch_size", "64"},
      {"train.lr", "1e-4"},
      {"train.grad_clip", "0"},
      {"data.root", ""},
      {"checkpoint", ""},
      {"gen.town_seed", "1"},
      {"gen.blocks", "3"},
      {"gen.frames", "20000"},
      {"gen.noise_amplitude", "0.3"},
      {"gen.val_fraction", "0.1"},
      {"bench.episodes_per_cell", "3"},
      {"bench.town_a_seed", "1"},
      {"bench.town_b_seed", "2"},
      {"bench.blocks", "3"},
      {"bench.agents", "2"},
      {"bench.town_a_only", "false"},
      {"explain.scenes", "5"},
      {"ablate.box", "all"},
      {"gradcheck.samples", "20"},
  };
}

RunConfig RunConfig::load(const std::string& path) {
  RunConfig cfg;
  if (path.empty() || path == "default") return cfg;
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string text = trim(line);
    if (text.empty()) continue;
    const std::size_t eq = text.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: " + path + ":" + std::to_string(line_no) +
                        ": expected key=value, got '" + text + "'");
    cfg.set(trim(text.substr(0, eq)), trim(text.substr(eq + 1)));
  }
  return cfg;
}

void RunConfig::set(const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("config: override '" + assignment +
                      "' is not key=value");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end())
    throw ConfigError("config: unknown key '" + key + "'");
  it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end())
    throw ConfigError("config: unknown key '" + key + "'");
  return it->second;
}

long long RunConfig::get_int(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const long long n = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    return n;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " = '" + v + "' is not an integer");
  }
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  try {
    // stoull wraps negatives around instead of throwing; reject them here.
    if (v.find('-') != std::string::npos)
      throw std::invalid_argument("negative");
    std::size_t used = 0;
    const std::uint64_t n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    return n;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " = '" + v +
                      "' is not a non-negative integer");
  }
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " = '" + v + "' is not a number");
  }
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: " + key + " = '" + v + "' is not a boolean");
}

std::string RunConfig::resolved_text() const {
  std::ostringstream os;  // std::map iterates in sorted key order
  for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
  return os.str();
}

roi::GridConfig RunConfig::grid() const {
  roi::GridConfig g;
  g.big_v = static_cast<int>(get_int("grid.big_v"));
  g.big_h = static_cast<int>(get_int("grid.big_h"));
  g.medium = static_cast<int>(get_int("grid.medium"));
  g.small = static_cast<int>(get_int("grid.small"));
  return g;
}

policy::ModelConfig RunConfig::model_config() const {
  policy::ModelConfig mc;
  mc.input_w = static_cast<int>(get_int("model.input_w"));
  mc.input_h = static_cast<int>(get_int("model.input_h"));
  mc.variant = policy::variant_from_name(get("model.variant"));
  mc.grid = grid();
  return mc;
}

train::TrainConfig RunConfig::train_config() const {
  train::TrainConfig tc;
  tc.epochs = static_cast<int>(get_int("train.epochs"));
  tc.batch_size = static_cast<int>(get_int("train.batch_size"));
  tc.lr = get_double("train.lr");
  tc.grad_clip = get_double("train.grad_clip");
  tc.seed = get_u64("seed");
  tc.variant = policy::variant_from_name(get("model.variant"));
  tc.input_w = static_cast<int>(get_int("model.input_w"));
  tc.input_h = static_cast<int>(get_int("model.input_h"));
  tc.grid = grid();
  tc.data_root = get("data.root");
  return tc;
}

}  // namespace attdrive::cli
