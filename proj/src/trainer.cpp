#include "attdrive/trainer.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "attdrive/errors.hpp"

namespace attdrive::train {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (c.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(c.lr > 0.0) || !std::isfinite(c.lr))
    throw ConfigError("train: lr must be positive and finite");
  if (!(c.grad_clip >= 0.0) || !std::isfinite(c.grad_clip))
    throw ConfigError("train: grad_clip must be >= 0 and finite");
  if (c.data_root.empty()) throw ConfigError("train: data_root is empty");
  if (c.out_dir.empty()) throw ConfigError("train: out_dir is empty");
}

policy::ModelConfig model_config(const TrainConfig& c) {
  policy::ModelConfig mc;
  mc.input_w = c.input_w;
  mc.input_h = c.input_h;
  mc.variant = c.variant;
  mc.grid = c.grid;
  mc.custom_regions = c.custom_regions;
  return mc;
}

EvalResult evaluate_offline(const policy::PolicyModel& model,
                            const data::Dataset& ds) {
  if (ds.size() == 0) throw ConfigError("evaluate_offline: empty dataset");
  if (ds.width() != model.config().input_w ||
      ds.height() != model.config().input_h)
    throw ConfigError("evaluate_offline: dataset resolution " +
                      std::to_string(ds.width()) + "x" +
                      std::to_string(ds.height()) + " != model input " +
                      std::to_string(model.config().input_w) + "x" +
                      std::to_string(model.config().input_h));
  std::array<double, policy::kCommandCount> sums{};
  EvalResult r;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const policy::TrainSample s = ds.sample(i);
    const policy::ForwardTrace t = model.forward(s.frame, s.command);
    const double err = t.steer - s.steer;
    const auto c = static_cast<std::size_t>(s.command);
    sums[c] += err * err;
    ++r.count_per_command[c];
  }
  double total = 0.0;
  for (int c = 0; c < policy::kCommandCount; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    total += sums[ci];
    r.samples += r.count_per_command[ci];
    if (r.count_per_command[ci] > 0)
      r.mse_per_command[ci] =
          sums[ci] / static_cast<double>(r.count_per_command[ci]);
  }
  r.mse_total = total / static_cast<double>(r.samples);
  return r;
}

std::string metrics_line(int epoch, const std::string& split, double mse,
                         const std::array<std::optional<double>,
                                          policy::kCommandCount>& per_command,
                         std::int64_t wall_ms) {
  ordered_json j;
  j["epoch"] = epoch;
  j["split"] = split;
  j["mse"] = mse;
  ordered_json arr = ordered_json::array();
  for (const auto& v : per_command)
    arr.push_back(v ? ordered_json(*v) : ordered_json(nullptr));
  j["mse_per_command"] = arr;
  j["wall_ms"] = wall_ms;
  return j.dump();
}

// ---------------------------------------------------------------------------
// Checkpoint serialization. Little-endian throughout; the reader bounds-checks
// every access so truncation can never partially succeed.

namespace {

void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i)
    b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& b, double v) {
  put_u64(b, std::bit_cast<std::uint64_t>(v));
}

void put_str(std::string& b, const std::string& s) {
  put_u32(b, static_cast<std::uint32_t>(s.size()));
  b.append(s);
}

struct Cursor {
  const unsigned char* p = nullptr;
  std::size_t n = 0;
  std::size_t off = 0;

  void need(std::size_t k) const {
    if (off + k > n) throw IoError("checkpoint truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(p[off + static_cast<std::size_t>(i)])
           << (8 * i);
    off += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(p[off + static_cast<std::size_t>(i)])
           << (8 * i);
    off += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t len = u32();
    need(len);
    std::string s(reinterpret_cast<const char*>(p + off), len);
    off += len;
    return s;
  }
};

constexpr char kMagic[4] = {'A', 'D', 'G', '1'};

}  // namespace

void save_checkpoint(const policy::PolicyModel& model, const TrainState& state,
                     const std::string& path) {
  std::string b;
  b.append(kMagic, 4);
  put_u32(b, kCheckpointVersion);

  const policy::ModelConfig& mc = model.config();
  put_u32(b, static_cast<std::uint32_t>(mc.input_w));
  put_u32(b, static_cast<std::uint32_t>(mc.input_h));
  put_u32(b, static_cast<std::uint32_t>(mc.variant));
  put_u32(b, static_cast<std::uint32_t>(mc.grid.big_v));
  put_u32(b, static_cast<std::uint32_t>(mc.grid.big_h));
  put_u32(b, static_cast<std::uint32_t>(mc.grid.medium));
  put_u32(b, static_cast<std::uint32_t>(mc.grid.small));
  put_u32(b, static_cast<std::uint32_t>(mc.custom_regions.size()));
  for (const roi::RegionSpec& r : mc.custom_regions) {
    put_u32(b, static_cast<std::uint32_t>(r.box_type));
    put_f64(b, r.x0);
    put_f64(b, r.y0);
    put_f64(b, r.x1);
    put_f64(b, r.y1);
  }
  put_u64(b, model.init_seed());

  put_u32(b, static_cast<std::uint32_t>(state.epoch));
  put_u32(b, static_cast<std::uint32_t>(state.echo_epochs));
  put_u32(b, static_cast<std::uint32_t>(state.echo_batch_size));
  put_u64(b, state.echo_seed);
  put_f64(b, state.echo_grad_clip);
  put_str(b, state.echo_data_root);
  put_f64(b, state.adam.lr);
  put_f64(b, state.adam.beta1);
  put_f64(b, state.adam.beta2);
  put_f64(b, state.adam.epsilon);
  put_u64(b, static_cast<std::uint64_t>(state.adam.step_count));
  put_u64(b, state.adam.m.size());
  for (double v : state.adam.m) put_f64(b, v);
  put_u64(b, state.adam.v.size());
  for (double v : state.adam.v) put_f64(b, v);
  put_str(b, state.rng.serialize());

  const nn::ParameterStore& store = model.store();
  put_u32(b, static_cast<std::uint32_t>(store.entries().size()));
  const std::span<const double> values = store.values();
  for (const nn::ParameterStore::Entry& e : store.entries()) {
    put_str(b, e.name);
    put_u32(b, static_cast<std::uint32_t>(e.dims.size()));
    for (int d : e.dims) put_u32(b, static_cast<std::uint32_t>(d));
    put_u64(b, e.size);
    for (std::size_t i = 0; i < e.size; ++i) put_f64(b, values[e.offset + i]);
  }

  // Write-temp-then-rename keeps a half-written file from ever shadowing a
  // good checkpoint.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("save_checkpoint: cannot open " + tmp);
    os.write(b.data(), static_cast<std::streamsize>(b.size()));
    if (!os) throw IoError("save_checkpoint: short write to " + tmp);
  }
  fs::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_checkpoint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(is)),
                    std::istreambuf_iterator<char>());
  Cursor c{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(),
           0};

  c.need(4);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw IoError("load_checkpoint: bad magic (not an ADG1 checkpoint)");
  c.off = 4;
  const std::uint32_t version = c.u32();
  if (version != kCheckpointVersion)
    throw IoError("load_checkpoint: unsupported version " +
                  std::to_string(version) + " (expected " +
                  std::to_string(kCheckpointVersion) + ")");

  policy::ModelConfig mc;
  mc.input_w = static_cast<int>(c.u32());
  mc.input_h = static_cast<int>(c.u32());
  const std::uint32_t variant = c.u32();
  if (variant > 2) throw IoError("load_checkpoint: bad variant tag");
  mc.variant = static_cast<policy::Variant>(variant);
  mc.grid.big_v = static_cast<int>(c.u32());
  mc.grid.big_h = static_cast<int>(c.u32());
  mc.grid.medium = static_cast<int>(c.u32());
  mc.grid.small = static_cast<int>(c.u32());
  const std::uint32_t n_custom = c.u32();
  mc.custom_regions.resize(n_custom);
  for (roi::RegionSpec& r : mc.custom_regions) {
    const std::uint32_t bt = c.u32();
    if (bt > 3) throw IoError("load_checkpoint: bad box type tag");
    r.box_type = static_cast<roi::BoxType>(bt);
    r.x0 = c.f64();
    r.y0 = c.f64();
    r.x1 = c.f64();
    r.y1 = c.f64();
  }
  const std::uint64_t init_seed = c.u64();

  TrainState st;
  st.epoch = static_cast<int>(c.u32());
  st.echo_epochs = static_cast<int>(c.u32());
  st.echo_batch_size = static_cast<int>(c.u32());
  st.echo_seed = c.u64();
  st.echo_grad_clip = c.f64();
  st.echo_data_root = c.str();
  st.adam.lr = c.f64();
  st.adam.beta1 = c.f64();
  st.adam.beta2 = c.f64();
  st.adam.epsilon = c.f64();
  st.adam.step_count = static_cast<std::int64_t>(c.u64());
  st.adam.m.resize(c.u64());
  for (double& v : st.adam.m) v = c.f64();
  st.adam.v.resize(c.u64());
  for (double& v : st.adam.v) v = c.f64();
  st.rng = Rng::deserialize(c.str());

  policy::PolicyModel model = policy::PolicyModel::init(mc, init_seed);
  nn::ParameterStore& store = model.store();
  const std::uint32_t n_entries = c.u32();
  if (n_entries != store.entries().size())
    throw IoError("load_checkpoint: parameter table has " +
                  std::to_string(n_entries) + " entries, model expects " +
                  std::to_string(store.entries().size()));
  std::span<double> values = store.values();
  for (const nn::ParameterStore::Entry& e : store.entries()) {
    const std::string name = c.str();
    if (name != e.name)
      throw IoError("load_checkpoint: parameter '" + name + "' where '" +
                    e.name + "' was expected");
    const std::uint32_t ndims = c.u32();
    if (ndims != e.dims.size())
      throw IoError("load_checkpoint: rank mismatch for " + e.name);
    for (int d : e.dims)
      if (c.u32() != static_cast<std::uint32_t>(d))
        throw IoError("load_checkpoint: dim mismatch for " + e.name);
    if (c.u64() != e.size)
      throw IoError("load_checkpoint: size mismatch for " + e.name);
    for (std::size_t i = 0; i < e.size; ++i) values[e.offset + i] = c.f64();
  }
  if (c.off != c.n)
    throw IoError("load_checkpoint: " + std::to_string(c.n - c.off) +
                  " trailing bytes");
  return {std::move(model), std::move(st)};
}

// ---------------------------------------------------------------------------

namespace {

std::int64_t ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::steady_clock::now() - t0)
      .count();
}

#ifndef NDEBUG
// Debug-only gating audit: heads of commands absent from the batch must not
// move during a step.
struct GatingAudit {
  const policy::PolicyModel& model;
  std::array<bool, policy::kCommandCount> present{};
  std::array<std::vector<double>, policy::kCommandCount> before;

  GatingAudit(const policy::PolicyModel& m,
              std::span<const policy::TrainSample> batch)
      : model(m) {
    for (const auto& s : batch) present[static_cast<std::size_t>(s.command)] = true;
    for (int cmd = 0; cmd < policy::kCommandCount; ++cmd) {
      const auto ci = static_cast<std::size_t>(cmd);
      if (present[ci]) continue;
      const auto [lo, hi] = model.head_span(cmd);
      const auto vals = model.store().values();
      before[ci].assign(vals.begin() + static_cast<std::ptrdiff_t>(lo),
                        vals.begin() + static_cast<std::ptrdiff_t>(hi));
    }
  }
  void check() const {
    for (int cmd = 0; cmd < policy::kCommandCount; ++cmd) {
      const auto ci = static_cast<std::size_t>(cmd);
      if (present[ci]) continue;
      const auto [lo, hi] = model.head_span(cmd);
      const auto vals = model.store().values();
      if (std::memcmp(before[ci].data(), vals.data() + lo,
                      (hi - lo) * sizeof(double)) != 0)
        throw NumericError("gating violated: head " + std::to_string(cmd) +
                           " moved without samples");
    }
  }
};
#endif

}  // namespace

TrainResult train(const TrainConfig& cfg, const ProgressFn& progress) {
  validate(cfg);
  const data::Dataset train_ds = data::Dataset::load(cfg.data_root, "train");
  const data::Dataset val_ds = data::Dataset::load(cfg.data_root, "val");
  if (train_ds.size() == 0) throw ConfigError("train: train split is empty");
  if (val_ds.size() == 0) throw ConfigError("train: val split is empty");
  if (train_ds.width() != cfg.input_w || train_ds.height() != cfg.input_h)
    throw ConfigError("train: dataset resolution " +
                      std::to_string(train_ds.width()) + "x" +
                      std::to_string(train_ds.height()) +
                      " != configured input " + std::to_string(cfg.input_w) +
                      "x" + std::to_string(cfg.input_h));

  policy::PolicyModel model =
      policy::PolicyModel::init(model_config(cfg), cfg.seed);
  TrainState st;
  st.adam.lr = cfg.lr;
  st.rng = Rng(cfg.seed);
  st.echo_epochs = cfg.epochs;
  st.echo_batch_size = cfg.batch_size;
  st.echo_seed = cfg.seed;
  st.echo_grad_clip = cfg.grad_clip;
  st.echo_data_root = cfg.data_root;

  fs::create_directories(cfg.out_dir);
  const std::string metrics_path = cfg.out_dir + "/metrics.jsonl";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw IoError("train: cannot open " + metrics_path);
  const std::string final_path = cfg.out_dir + "/final.ckpt";
  const std::string best_path = cfg.out_dir + "/best.ckpt";

  TrainResult res;
  std::vector<policy::TrainSample> batch;
  std::vector<double> losses;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto batches = train_ds.epoch_batches(cfg.seed, epoch, cfg.batch_size);
    std::array<double, policy::kCommandCount> sq_sums{};
    std::array<std::int64_t, policy::kCommandCount> counts{};
    bool epoch_ok = true;
    for (const auto& ids : batches) {
      batch.clear();
      batch.reserve(ids.size());
      for (std::size_t i : ids) batch.push_back(train_ds.sample(i));
#ifndef NDEBUG
      GatingAudit audit(model, batch);
#endif
      try {
        model.train_step(batch, st.adam, cfg.grad_clip, &losses);
      } catch (const NumericError& e) {
        res.diverged = true;
        res.divergence_message =
            "epoch " + std::to_string(epoch) + ": " + e.what();
        epoch_ok = false;
        break;
      }
#ifndef NDEBUG
      audit.check();
#endif
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto ci = static_cast<std::size_t>(batch[i].command);
        sq_sums[ci] += losses[i];
        ++counts[ci];
      }
    }
    if (!epoch_ok) break;

    EpochMetrics em;
    em.epoch = epoch;
    double total = 0.0;
    std::int64_t n = 0;
    for (int cmd = 0; cmd < policy::kCommandCount; ++cmd) {
      const auto ci = static_cast<std::size_t>(cmd);
      total += sq_sums[ci];
      n += counts[ci];
      if (counts[ci] > 0)
        em.train_mse_per_command[ci] =
            sq_sums[ci] / static_cast<double>(counts[ci]);
    }
    em.train_mse = total / static_cast<double>(n);
    em.train_wall_ms = ms_since(t0);

    const auto tv = std::chrono::steady_clock::now();
    em.val = evaluate_offline(model, val_ds);
    em.val_wall_ms = ms_since(tv);

    metrics << metrics_line(epoch, "train", em.train_mse,
                            em.train_mse_per_command, em.train_wall_ms)
            << '\n'
            << metrics_line(epoch, "val", em.val.mse_total,
                            em.val.mse_per_command, em.val_wall_ms)
            << '\n';
    metrics.flush();

    st.epoch = epoch + 1;
    save_checkpoint(model, st, final_path);
    res.final_checkpoint = final_path;
    if (em.val.mse_total < res.best_val_mse) {
      res.best_val_mse = em.val.mse_total;
      res.best_epoch = epoch;
      save_checkpoint(model, st, best_path);
      res.best_checkpoint = best_path;
    }
    res.history.push_back(em);
    if (progress) progress(em);
  }
  return res;
}

}  // namespace attdrive::train
