#include <doctest.h>

#include <cmath>
#include <cstring>
#include <set>
#include <vector>

#include "attdrive/errors.hpp"
#include "attdrive/rng.hpp"
#include "attdrive/roi.hpp"

using namespace attdrive;
using namespace attdrive::roi;

TEST_SUITE_BEGIN("roi");

TEST_CASE("default grid: 48 regions, composition 2/6/8/32, type-major order") {
  const RoIGrid grid = generate_grid(GridConfig{});
  REQUIRE(grid.regions.size() == 48);
  CHECK(grid.counts[0] == 2);   // bigV
  CHECK(grid.counts[1] == 6);   // bigH
  CHECK(grid.counts[2] == 8);   // medium
  CHECK(grid.counts[3] == 32);  // small
  // Type-major order: 0-1 bigV, 2-7 bigH, 8-15 medium, 16-47 small.
  for (int i = 0; i < 48; ++i) {
    const BoxType want = i < 2    ? BoxType::bigV
                         : i < 8  ? BoxType::bigH
                         : i < 16 ? BoxType::medium
                                  : BoxType::small;
    CHECK(grid.regions[static_cast<std::size_t>(i)].box_type == want);
  }
}

TEST_CASE("every default region obeys its size invariant and bounds") {
  const RoIGrid grid = generate_grid(GridConfig{});
  for (const RegionSpec& r : grid.regions) {
    const auto [wf, hf] = box_type_size(r.box_type);
    CHECK(r.x0 >= 0.0);
    CHECK(r.y0 >= 0.0);
    CHECK(r.x1 <= 1.0 + 1e-12);
    CHECK(r.y1 <= 1.0 + 1e-12);
    CHECK(r.x0 < r.x1);
    CHECK(r.y0 < r.y1);
    CHECK(std::abs((r.x1 - r.x0) - wf) < 1e-12);
    CHECK(std::abs((r.y1 - r.y0) - hf) < 1e-12);
  }
}

TEST_CASE("generate_grid is bitwise deterministic") {
  const RoIGrid a = generate_grid(GridConfig{});
  const RoIGrid b = generate_grid(GridConfig{});
  REQUIRE(a.regions.size() == b.regions.size());
  for (std::size_t i = 0; i < a.regions.size(); ++i) {
    CHECK(std::memcmp(&a.regions[i].x0, &b.regions[i].x0, sizeof(double)) ==
          0);
    CHECK(std::memcmp(&a.regions[i].y0, &b.regions[i].y0, sizeof(double)) ==
          0);
    CHECK(std::memcmp(&a.regions[i].x1, &b.regions[i].x1, sizeof(double)) ==
          0);
    CHECK(std::memcmp(&a.regions[i].y1, &b.regions[i].y1, sizeof(double)) ==
          0);
  }
}

TEST_CASE("bigV-only config yields the left/right halves") {
  GridConfig cfg;
  cfg.big_v = 2;
  cfg.big_h = cfg.medium = cfg.small = 0;
  const RoIGrid grid = generate_grid(cfg);
  REQUIRE(grid.regions.size() == 2);
  CHECK(grid.regions[0].x0 == 0.0);
  CHECK(grid.regions[0].y0 == 0.0);
  CHECK(grid.regions[0].x1 == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(grid.regions[0].y1 == 1.0);
  CHECK(grid.regions[1].x0 == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(grid.regions[1].x1 == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(grid.regions[1].y1 == 1.0);
}

TEST_CASE("small boxes on 600x264 hit the even-spacing pixel offsets") {
  const RoIGrid grid = generate_grid(GridConfig{});
  std::set<long> xs, ys;
  for (const RegionSpec& r : grid.regions) {
    if (r.box_type != BoxType::small) continue;
    xs.insert(std::lround(r.x0 * 600.0));
    ys.insert(std::lround(r.y0 * 264.0));
    // No box exceeds image bounds.
    CHECK(std::lround(r.x1 * 600.0) <= 600);
    CHECK(std::lround(r.y1 * 264.0) <= 264);
  }
  CHECK(xs == std::set<long>{0, 64, 129, 193, 257, 321, 386, 450});
  CHECK(ys == std::set<long>{0, 44, 88, 132});
}

TEST_CASE("generate_grid rejects counts that do not factor") {
  GridConfig cfg;
  cfg.medium = 7;
  CHECK_THROWS_AS(generate_grid(cfg), ConfigError);
  GridConfig cfg2;
  cfg2.small = 30;
  CHECK_THROWS_AS(generate_grid(cfg2), ConfigError);
  GridConfig cfg3;
  cfg3.big_h = -1;
  CHECK_THROWS_AS(generate_grid(cfg3), ConfigError);
}

TEST_CASE("project_region examples on a 68x26 map") {
  RegionSpec full{BoxType::bigH, 0, 0, 1, 1};
  CHECK(project_region(full, 68, 26) == Rect{0, 0, 68, 26});

  RegionSpec left{BoxType::bigV, 0, 0, 0.5, 1};
  CHECK(project_region(left, 68, 26) == Rect{0, 0, 34, 26});

  RegionSpec small{BoxType::small, 0.5, 0.0, 0.75, 0.5};
  const Rect r = project_region(small, 68, 26);
  CHECK(r == Rect{34, 0, 51, 13});  // hand: floor(34)=34, ceil(51)=51
  CHECK(r.width() >= 4);
}

TEST_CASE("project_region always yields at least one cell") {
  const RoIGrid grid = generate_grid(GridConfig{});
  for (int fw : {1, 2, 9, 68})
    for (int fh : {1, 3, 26})
      for (const RegionSpec& rs : grid.regions) {
        const Rect r = project_region(rs, fw, fh);
        CHECK(r.width() >= 1);
        CHECK(r.height() >= 1);
        CHECK(r.x0 >= 0);
        CHECK(r.y0 >= 0);
        CHECK(r.x1 <= fw);
        CHECK(r.y1 <= fh);
      }
}

TEST_CASE("roi_pool: constant map pools to the constant") {
  nn::Tensor fmap({6, 5, 3});
  for (auto& v : fmap.data()) v = 0.7;
  const PooledDescriptor d = roi_pool(nullptr, fmap, Rect{1, 1, 5, 4}, 7);
  CHECK(d.region_index == 7);
  CHECK(d.values.dims() == std::vector<int>{4, 4, 3});
  for (double v : d.values.data()) CHECK(v == 0.7);
}

TEST_CASE("roi_pool: 4x4 region is the identity binning") {
  Rng rng(21);
  nn::Tensor fmap({7, 6, 2});
  for (auto& v : fmap.data()) v = rng.uniform(-1, 1);
  const Rect rect{2, 1, 6, 5};
  const PooledDescriptor d = roi_pool(nullptr, fmap, rect);
  for (int bx = 0; bx < 4; ++bx)
    for (int by = 0; by < 4; ++by)
      for (int c = 0; c < 2; ++c)
        CHECK(d.values[static_cast<std::size_t>((bx * 4 + by) * 2 + c)] ==
              fmap[nn::Tensor::at3(6, 2, rect.x0 + bx, rect.y0 + by, c)]);
}

TEST_CASE("roi_pool equals the brute-force oracle on 1000 random pairs") {
  Rng rng(22);
  for (int trial = 0; trial < 1000; ++trial) {
    const int W = 2 + static_cast<int>(rng.below(14));
    const int H = 2 + static_cast<int>(rng.below(10));
    const int C = 1 + static_cast<int>(rng.below(3));
    nn::Tensor fmap({W, H, C});
    for (auto& v : fmap.data()) v = rng.uniform(-2, 2);
    Rect rect;
    rect.x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(W)));
    rect.y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(H)));
    rect.x1 = rect.x0 + 1 +
              static_cast<int>(rng.below(static_cast<std::uint64_t>(
                  W - rect.x0)));
    rect.y1 = rect.y0 + 1 +
              static_cast<int>(rng.below(static_cast<std::uint64_t>(
                  H - rect.y0)));
    const PooledDescriptor d = roi_pool(nullptr, fmap, rect);
    for (int bx = 0; bx < 4; ++bx)
      for (int by = 0; by < 4; ++by) {
        const int x0 = rect.x0 + bx * rect.width() / 4;
        const int x1 = rect.x0 + ((bx + 1) * rect.width() + 3) / 4;
        const int y0 = rect.y0 + by * rect.height() / 4;
        const int y1 = rect.y0 + ((by + 1) * rect.height() + 3) / 4;
        for (int c = 0; c < C; ++c) {
          double best = -1e300;
          for (int x = x0; x < x1; ++x)
            for (int y = y0; y < y1; ++y)
              best = std::max(best, fmap[nn::Tensor::at3(H, C, x, y, c)]);
          CHECK(d.values[static_cast<std::size_t>((bx * 4 + by) * C + c)] ==
                best);
        }
      }
  }
}

TEST_CASE("roi_pool routes exactly 16*C unit gradients per region") {
  Rng rng(23);
  nn::Tensor fmap({9, 7, 4}, true);
  for (auto& v : fmap.data()) v = rng.uniform(-1, 1);
  const std::vector<Rect> rects = {{0, 0, 9, 7}, {1, 1, 5, 6}, {3, 2, 4, 3}};
  nn::Tape tape;
  nn::Tensor pooled = nn::roi_pool_cells(&tape, fmap, rects);
  // Reduce with an all-ones linear map so every pooled output gets
  // upstream gradient exactly 1.
  nn::Tensor w({static_cast<int>(pooled.size()), 1});
  for (auto& v : w.data()) v = 1.0;
  nn::Tensor b({1});
  nn::Tensor s = nn::dense(&tape, pooled, w, b, nn::Activation::none);
  nn::Tensor target({1});
  target[0] = s.value() - 0.5;  // so d(loss)/ds = 2*0.5 = 1
  nn::Tensor loss = nn::mse_loss(&tape, s, target);
  tape.backward(loss);
  double sum = 0.0;
  for (double g : fmap.grad()) sum += g;
  CHECK(sum == doctest::Approx(3.0 * 16 * 4).epsilon(1e-9));
}

TEST_CASE("roi_pool ignores feature values outside the rect") {
  Rng rng(24);
  nn::Tensor fmap({10, 8, 2});
  for (auto& v : fmap.data()) v = rng.uniform(-1, 1);
  const Rect rect{2, 2, 7, 6};
  const PooledDescriptor before = roi_pool(nullptr, fmap, rect);
  for (int x = 0; x < 10; ++x)
    for (int y = 0; y < 8; ++y) {
      if (x >= rect.x0 && x < rect.x1 && y >= rect.y0 && y < rect.y1)
        continue;
      for (int c = 0; c < 2; ++c)
        fmap[nn::Tensor::at3(8, 2, x, y, c)] = rng.uniform(5, 9);
    }
  const PooledDescriptor after = roi_pool(nullptr, fmap, rect);
  CHECK(std::memcmp(before.values.data().data(), after.values.data().data(),
                    before.values.size() * sizeof(double)) == 0);
}

TEST_CASE("validate_geometry: 600x264 with Table 1 is clean") {
  const RoIGrid grid = generate_grid(GridConfig{});
  const auto backbone = table1_backbone();
  const GeometryReport rep = validate_geometry(grid, 600, 264, backbone);
  CHECK(rep.ok);
  CHECK(rep.feature_w == 68);
  CHECK(rep.feature_h == 26);
  CHECK(rep.errors.empty());
  CHECK(rep.warnings.empty());
  CHECK(rep.rects.size() == 48);
}

TEST_CASE("validate_geometry: 64x32 kills the Table 1 shape chain") {
  // 64x32 cannot even be pushed through the backbone (the height collapses
  // to 1 before the 3x3 layers), so the report is fatal rather than a
  // warning list.
  const RoIGrid grid = generate_grid(GridConfig{});
  const auto backbone = table1_backbone();
  const GeometryReport rep = validate_geometry(grid, 64, 32, backbone);
  CHECK_FALSE(rep.ok);
  CHECK_FALSE(rep.errors.empty());
}

TEST_CASE("validate_geometry: 128x64 is valid but warns about small boxes") {
  const RoIGrid grid = generate_grid(GridConfig{});
  const auto backbone = table1_backbone();
  const GeometryReport rep = validate_geometry(grid, 128, 64, backbone);
  CHECK(rep.ok);
  CHECK(rep.feature_w == 9);
  CHECK(rep.feature_h == 1);
  CHECK(rep.errors.empty());
  bool small_warned = false;
  for (const std::string& w : rep.warnings)
    if (w.find("small") != std::string::npos) small_warned = true;
  CHECK(small_warned);
}

TEST_CASE("validate_geometry: empty grid is trivially valid") {
  GridConfig cfg;
  cfg.big_v = cfg.big_h = cfg.medium = cfg.small = 0;
  const RoIGrid grid = generate_grid(cfg);
  CHECK(grid.regions.empty());
  const auto backbone = table1_backbone();
  const GeometryReport rep = validate_geometry(grid, 600, 264, backbone);
  CHECK(rep.ok);
  CHECK(rep.errors.empty());
  CHECK(rep.warnings.empty());
}

TEST_SUITE_END();
