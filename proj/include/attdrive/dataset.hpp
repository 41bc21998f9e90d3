#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attdrive/image.hpp"
#include "attdrive/policy.hpp"
#include "attdrive/tensor.hpp"

// Demonstration recording and loading: episodes live in
// dataset_root/episode_NNNN/{frames/NNNNNN.ppm, measurements.jsonl,
// meta.json} with manifest.json at the root listing episodes and splits.
namespace attdrive::data {

// One recorded frame with its label. Frames are stored 8-bit; the single
// quantization point is shared with closed-loop inference so training and
// driving see identical pixel values.
struct Demonstration {
  Image8 frame;
  policy::Command command = policy::Command::follow_lane;
  double steer = 0;
  double throttle = 0;
  double speed = 0;
  bool offroad = false;
  bool collision = false;
  std::string episode;  // source episode dir (manifest-relative)
  int frame_index = 0;  // frame number within the episode
};

struct EpisodeEntry {
  std::string dir;       // relative to the dataset root
  std::string split;     // "train" or "val"
  int weather = 0;
  int frames = 0;
  std::string route_id;  // e.g. "town1:0-5:3", used for split hygiene
};

struct Manifest {
  int width = 0;
  int height = 0;
  std::vector<EpisodeEntry> episodes;
};

void write_manifest(const std::string& root, const Manifest& m);
Manifest read_manifest(const std::string& root);  // IoError on defects
// Split hygiene: throws ConfigError when a route id appears in both splits.
void validate_manifest(const Manifest& m);

// Streams one episode to disk. The directory is marked incomplete
// (meta.json with complete=false) until finalize(); abandoned episodes are
// skipped by the loader. I/O failures throw IoError.
class EpisodeWriter {
 public:
  EpisodeWriter(std::string episode_dir, int width, int height, int weather,
                std::string route_id);

  struct FrameRecord {
    const nn::Tensor* frame = nullptr;  // {W,H,3} in [0,1]
    double steer = 0;
    double throttle = 0;
    double speed = 0;
    int command = 0;
    bool offroad = false;
    bool collision = false;
  };
  void add(const FrameRecord& r);
  void finalize();
  int frames() const { return count_; }

 private:
  std::string dir_;
  int width_, height_, weather_;
  std::string route_id_;
  int count_ = 0;
  bool finalized_ = false;
  std::string jsonl_;  // buffered measurement lines
};

struct LoadStats {
  int episodes = 0;
  int frames = 0;
  int skipped = 0;  // corrupt frames/lines (warned, tolerated up to 1%)
};

// In-memory dataset for one split. Frames stay 8-bit (u8) until a batch is
// materialized. Corrupt records are skipped with a warning counter; more
// than 1% corruption is an IoError.
class Dataset {
 public:
  static Dataset load(const std::string& root, const std::string& split);

  std::size_t size() const { return demos_.size(); }
  int width() const { return width_; }
  int height() const { return height_; }
  const Demonstration& demo(std::size_t i) const { return demos_[i]; }
  const LoadStats& stats() const { return stats_; }

  // Dequantized training sample (frame values k/255).
  policy::TrainSample sample(std::size_t i) const;

  // Deterministic epoch shuffle: batch index lists of batch_size, last
  // partial batch kept; the permutation seed derives from (seed, epoch).
  std::vector<std::vector<std::size_t>> epoch_batches(std::uint64_t seed,
                                                      int epoch,
                                                      int batch_size) const;

 private:
  int width_ = 0, height_ = 0;
  std::vector<Demonstration> demos_;
  LoadStats stats_;
};

// ---------------------------------------------------------------------------
// Photometric augmentation (train-time, on top of the recorded weather).

struct AugmentPreset {
  std::string name;
  double brightness = 1.0;
  double gain_r = 1.0, gain_g = 1.0, gain_b = 1.0;  // hue shift
  double noise_sigma = 0.0;
};

// Fixed preset table; index 0 is the identity. ConfigError outside range.
const AugmentPreset& augment_preset(int id);
inline constexpr int kAugmentPresetCount = 6;

// v' = clamp(v * brightness * gain_c + N(0, sigma), 0, 1); the noise stream
// is seeded purely by `seed`, so (seed, frame) pairs reproduce exactly.
nn::Tensor augment(const nn::Tensor& frame, const AugmentPreset& preset,
                   std::uint64_t seed);

}  // namespace attdrive::data
