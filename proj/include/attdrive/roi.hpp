#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "attdrive/geometry.hpp"
#include "attdrive/tensor.hpp"

namespace attdrive::roi {

// Listed in the grid's type-major order: bigV first, then bigH, medium,
// small.
enum class BoxType : int { bigV = 0, bigH = 1, medium = 2, small = 3 };

const char* box_type_name(BoxType t);

// Nominal (width, height) fraction of each box type.
std::pair<double, double> box_type_size(BoxType t);

// Fractional-coordinate region, relative to image width/height.
struct RegionSpec {
  BoxType box_type = BoxType::bigV;
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

// Per-type box counts. Counts must factor into the type's lattice:
// bigV is a 1 x count row, bigH a count x 1 column, medium lies on 2 rows
// (count even, or exactly 1), small on 4 rows (count divisible by 4, or
// fewer than 4 in a single row).
struct GridConfig {
  int big_v = 2;
  int big_h = 6;
  int medium = 8;
  int small = 32;
};

struct RoIGrid {
  std::vector<RegionSpec> regions;
  std::array<int, 4> counts = {0, 0, 0, 0};  // indexed by BoxType
};

// Deterministic multi-scale grid; boxes of each type evenly spaced with
// start(i) = i*(1 - frac)/(n - 1) along each lattice axis (0 when n == 1).
// Region order is type-major (bigV, bigH, medium, small), then row-major
// within the type's lattice (rows outer, columns inner).
RoIGrid generate_grid(const GridConfig& config);

// Projects fractional coordinates onto an integer feature-map rect:
// (floor(x0*Fw), floor(y0*Fh), ceil(x1*Fw), ceil(y1*Fh)), clamped to the
// map; width/height >= 1 is guaranteed for any valid RegionSpec.
Rect project_region(const RegionSpec& region, int feature_w, int feature_h);

std::vector<Rect> project_grid(const RoIGrid& grid, int feature_w,
                               int feature_h);

struct PooledDescriptor {
  nn::Tensor values;  // {4,4,C}
  int region_index = -1;
};

// Max-pools one rect into a 4x4xC descriptor (see nn::roi_pool_cells for
// the bin rule and gradient routing).
PooledDescriptor roi_pool(nn::Tape* tape, const nn::Tensor& feature_map,
                          const Rect& rect, int region_index = -1);

struct ConvSpec {
  int kernel = 0;
  int stride = 1;
};

// Table 1 backbone geometry: 5x5 stride 2 (x3), then 3x3 stride 1 (x2).
std::vector<ConvSpec> table1_backbone();

struct GeometryReport {
  bool ok = false;
  int feature_w = 0;
  int feature_h = 0;
  std::vector<std::string> errors;    // fatal: broken shape chain, zero extent
  std::vector<std::string> warnings;  // feature extent < 4: bins duplicate
  std::vector<Rect> rects;            // per region, when the chain is valid
};

// Runs the input dims through the backbone spec and checks that every
// region projects to >= 1 feature cell per axis; regions narrower than 4
// cells on either axis get a bin-duplication warning. An empty backbone
// spec validates against the input dims directly.
GeometryReport validate_geometry(const RoIGrid& grid, int input_w,
                                 int input_h,
                                 std::span<const ConvSpec> backbone);

}  // namespace attdrive::roi
