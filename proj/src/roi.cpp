#include "attdrive/roi.hpp"

#include <cmath>

#include "attdrive/errors.hpp"

namespace attdrive::roi {

const char* box_type_name(BoxType t) {
  switch (t) {
    case BoxType::bigV: return "bigV";
    case BoxType::bigH: return "bigH";
    case BoxType::medium: return "medium";
    case BoxType::small: return "small";
  }
  throw ConfigError("box_type_name: bad enum value");
}

std::pair<double, double> box_type_size(BoxType t) {
  switch (t) {
    case BoxType::bigV: return {0.5, 1.0};
    case BoxType::bigH: return {1.0, 0.5};
    case BoxType::medium: return {0.5, 0.5};
    case BoxType::small: return {0.25, 0.5};
  }
  throw ConfigError("box_type_size: bad enum value");
}

namespace {

struct Lattice {
  int rows = 0;
  int cols = 0;
};

Lattice lattice_for(BoxType t, int count) {
  if (count < 0)
    throw ConfigError(std::string("generate_grid: negative count for ") +
                      box_type_name(t));
  if (count == 0) return {0, 0};
  switch (t) {
    case BoxType::bigV:
      return {1, count};
    case BoxType::bigH:
      return {count, 1};
    case BoxType::medium:
      if (count == 1) return {1, 1};
      if (count % 2 == 0) return {2, count / 2};
      throw ConfigError("generate_grid: medium count " +
                        std::to_string(count) +
                        " does not factor into 2 rows");
    case BoxType::small:
      if (count < 4) return {1, count};
      if (count % 4 == 0) return {4, count / 4};
      throw ConfigError("generate_grid: small count " +
                        std::to_string(count) +
                        " does not factor into 4 rows");
  }
  throw ConfigError("generate_grid: bad box type");
}

double spaced_start(int i, int n, double frac) {
  if (n <= 1) return 0.0;
  return static_cast<double>(i) * (1.0 - frac) / (n - 1);
}

}  // namespace

RoIGrid generate_grid(const GridConfig& config) {
  RoIGrid grid;
  const std::array<std::pair<BoxType, int>, 4> order = {
      std::pair{BoxType::bigV, config.big_v},
      std::pair{BoxType::bigH, config.big_h},
      std::pair{BoxType::medium, config.medium},
      std::pair{BoxType::small, config.small}};
  for (const auto& [type, count] : order) {
    const Lattice lat = lattice_for(type, count);
    const auto [wf, hf] = box_type_size(type);
    for (int row = 0; row < lat.rows; ++row)
      for (int col = 0; col < lat.cols; ++col) {
        RegionSpec r;
        r.box_type = type;
        r.x0 = spaced_start(col, lat.cols, wf);
        r.y0 = spaced_start(row, lat.rows, hf);
        r.x1 = r.x0 + wf;
        r.y1 = r.y0 + hf;
        grid.regions.push_back(r);
      }
    grid.counts[static_cast<std::size_t>(type)] = count;
  }
  return grid;
}

Rect project_region(const RegionSpec& region, int feature_w, int feature_h) {
  if (feature_w < 1 || feature_h < 1)
    throw ShapeError("project_region: feature dims must be >= 1");
  Rect r;
  r.x0 = static_cast<int>(std::floor(region.x0 * feature_w));
  r.y0 = static_cast<int>(std::floor(region.y0 * feature_h));
  r.x1 = static_cast<int>(std::ceil(region.x1 * feature_w));
  r.y1 = static_cast<int>(std::ceil(region.y1 * feature_h));
  r.x0 = std::max(0, std::min(r.x0, feature_w - 1));
  r.y0 = std::max(0, std::min(r.y0, feature_h - 1));
  r.x1 = std::max(r.x0 + 1, std::min(r.x1, feature_w));
  r.y1 = std::max(r.y0 + 1, std::min(r.y1, feature_h));
  return r;
}

std::vector<Rect> project_grid(const RoIGrid& grid, int feature_w,
                               int feature_h) {
  std::vector<Rect> rects;
  rects.reserve(grid.regions.size());
  for (const RegionSpec& r : grid.regions)
    rects.push_back(project_region(r, feature_w, feature_h));
  return rects;
}

PooledDescriptor roi_pool(nn::Tape* tape, const nn::Tensor& feature_map,
                          const Rect& rect, int region_index) {
  nn::Tensor flat =
      nn::roi_pool_cells(tape, feature_map, std::span<const Rect>(&rect, 1));
  PooledDescriptor d;
  d.region_index = region_index;
  // {1, 16*C} -> {4,4,C}; same flat layout (bx*4+by)*C + c.
  const int C = feature_map.dim(2);
  d.values = nn::Tensor::from({4, 4, C}, flat.data());
  return d;
}

std::vector<ConvSpec> table1_backbone() {
  return {{5, 2}, {5, 2}, {5, 2}, {3, 1}, {3, 1}};
}

GeometryReport validate_geometry(const RoIGrid& grid, int input_w,
                                 int input_h,
                                 std::span<const ConvSpec> backbone) {
  GeometryReport rep;
  int w = input_w, h = input_h;
  if (w < 1 || h < 1) {
    rep.errors.push_back("input dims must be positive, got " +
                         std::to_string(input_w) + "x" +
                         std::to_string(input_h));
    return rep;
  }
  int layer = 1;
  for (const ConvSpec& c : backbone) {
    if (c.kernel < 1 || c.stride < 1) {
      rep.errors.push_back("backbone layer " + std::to_string(layer) +
                           ": invalid kernel/stride");
      return rep;
    }
    if (w < c.kernel || h < c.kernel) {
      rep.errors.push_back(
          "backbone layer " + std::to_string(layer) + ": map " +
          std::to_string(w) + "x" + std::to_string(h) +
          " is smaller than its " + std::to_string(c.kernel) + "x" +
          std::to_string(c.kernel) + " kernel");
      return rep;
    }
    w = (w - c.kernel) / c.stride + 1;
    h = (h - c.kernel) / c.stride + 1;
    ++layer;
  }
  rep.feature_w = w;
  rep.feature_h = h;
  rep.ok = true;
  for (std::size_t i = 0; i < grid.regions.size(); ++i) {
    const Rect r = project_region(grid.regions[i], w, h);
    rep.rects.push_back(r);
    if (r.width() < 1 || r.height() < 1) {
      // project_region's clamping makes this unreachable; keep the fatal
      // path anyway so a future projection change cannot silently pass.
      rep.errors.push_back("region " + std::to_string(i) +
                           ": zero feature extent");
      rep.ok = false;
      continue;
    }
    if (r.width() < 4 || r.height() < 4)
      rep.warnings.push_back(
          "region " + std::to_string(i) + " (" +
          box_type_name(grid.regions[i].box_type) + "): feature extent " +
          std::to_string(r.width()) + "x" + std::to_string(r.height()) +
          " < 4, pooling bins will duplicate cells");
  }
  return rep;
}

}  // namespace attdrive::roi
