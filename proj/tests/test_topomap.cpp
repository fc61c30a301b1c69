#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "doctest.h"
#include "eegdual/data_io.hpp"
#include "eegdual/errors.hpp"
#include "eegdual/rng.hpp"
#include "eegdual/topomap.hpp"

using namespace eegdual;

namespace {

ElectrodeLayout make_layout(std::vector<std::array<double, 3>> pos) {
  ElectrodeLayout layout;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    Electrode e;
    e.label = "e" + std::to_string(i);
    double n = std::sqrt(pos[i][0] * pos[i][0] + pos[i][1] * pos[i][1] + pos[i][2] * pos[i][2]);
    e.x = pos[i][0] / n;
    e.y = pos[i][1] / n;
    e.z = pos[i][2] / n;
    e.region = 0;
    layout.electrodes.push_back(std::move(e));
  }
  layout.region_count = 1;
  return layout;
}

std::string data_path(const char* rel) { return std::string(EEGDUAL_DATA_DIR) + "/" + rel; }

}  // namespace

TEST_CASE("vertex electrode projects exactly to the image center") {
  ElectrodeLayout layout = make_layout({{0, 0, 1}, {1, 0, 0.2}});
  ProjectedLayout proj = azimuthal_project(layout, 32, 32);
  CHECK(proj.row(0) == 15.5);
  CHECK(proj.col(0) == 15.5);
  CHECK(proj.drow[0] == 0.0);
  CHECK(proj.dcol[0] == 0.0);
}

TEST_CASE("mirrored electrodes land on mirrored pixel columns") {
  ElectrodeLayout layout =
      make_layout({{0.4, 0.5, 0.76}, {-0.4, 0.5, 0.76}, {0.9, -0.1, 0.42}, {-0.9, -0.1, 0.42}});
  ProjectedLayout proj = azimuthal_project(layout, 32, 32);
  CHECK(std::abs((proj.col(0) - 15.5) + (proj.col(1) - 15.5)) < 1e-9);
  CHECK(std::abs(proj.row(0) - proj.row(1)) < 1e-9);
  CHECK(std::abs((proj.col(2) - 15.5) + (proj.col(3) - 15.5)) < 1e-9);
}

TEST_CASE("equator electrode reaches the inscribed circle minus the margin") {
  ElectrodeLayout layout = make_layout({{1, 0, 0}, {0, 0, 1}});  // max rho = pi/2
  ProjectedLayout proj = azimuthal_project(layout, 32, 32);
  double r = std::hypot(proj.drow[0], proj.dcol[0]);
  CHECK(r == doctest::Approx(15.5 / 1.05).epsilon(1e-12));
}

TEST_CASE("projection rejects empty layouts and tiny images") {
  ElectrodeLayout empty;
  CHECK_THROWS_AS(azimuthal_project(empty, 32, 32), ConfigError);
  ElectrodeLayout one = make_layout({{0, 0, 1}});
  CHECK_THROWS_AS(azimuthal_project(one, 4, 32), ConfigError);
}

TEST_CASE("projection is injective on the shipped layouts") {
  for (const char* rel : {"layouts/seed62.layout", "layouts/deap32.layout"}) {
    ElectrodeLayout layout = load_layout(data_path(rel));
    ProjectedLayout proj = azimuthal_project(layout, 32, 32);
    for (std::size_t a = 0; a < proj.drow.size(); ++a)
      for (std::size_t b = a + 1; b < proj.drow.size(); ++b) {
        double d = std::hypot(proj.drow[a] - proj.drow[b], proj.dcol[a] - proj.dcol[b]);
        INFO(rel, " electrodes ", a, " vs ", b);
        CHECK(d > 1e-6);
      }
  }
}

TEST_CASE("constant features rasterize to an exactly constant in-mask image") {
  ElectrodeLayout layout = load_layout(data_path("layouts/deap32.layout"));
  auto grid = build_raster_grid(azimuthal_project(layout, 32, 32));
  Tensor values(Shape{32, 3}, 1.234567);
  TopoImage img = rasterize(values, grid);
  for (int b = 0; b < 3; ++b)
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c) {
        if (grid->inside(r, c))
          CHECK(img.raster.at(b, r, c) == 1.234567);  // exact
        else
          CHECK(img.raster.at(b, r, c) == 0.0);
      }
}

TEST_CASE("a pixel on an electrode takes that electrode's value exactly") {
  // an electrode whose projection lands exactly on the center pixel
  ElectrodeLayout layout = make_layout({{0, 0, 1}, {0.8, 0.1, 0.3}, {-0.5, -0.5, 0.4},
                                        {0.1, 0.9, 0.2}, {0.2, -0.8, 0.3}});
  auto grid = build_raster_grid(azimuthal_project(layout, 33, 33));  // odd: integer center
  Tensor values(Shape{5, 1}, {0.77, -3.0, 5.0, 9.0, -2.0});
  TopoImage img = rasterize(values, grid);
  CHECK(img.raster.at(0, 16, 16) == 0.77);
}

TEST_CASE("equidistant pixel between values 0 and 1 interpolates to one half") {
  // two electrodes mirrored about the vertical center line, plus two spares
  // far away so k = 4 still sees the symmetric pair dominate equally
  ElectrodeLayout layout =
      make_layout({{0.6, 0.0, 0.8}, {-0.6, 0.0, 0.8}, {0.0, 0.95, 0.3}, {0.0, -0.95, 0.3}});
  auto grid = build_raster_grid(azimuthal_project(layout, 33, 33));
  Tensor values(Shape{4, 1}, {0.0, 1.0, 0.5, 0.5});
  TopoImage img = rasterize(values, grid);
  // the center pixel is equidistant from every electrode pair by symmetry
  CHECK(img.raster.at(0, 16, 16) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("rasterization stays within the per-band feature range") {
  ElectrodeLayout layout = load_layout(data_path("layouts/seed62.layout"));
  auto grid = build_raster_grid(azimuthal_project(layout, 24, 24));
  RngStream rng(11, "raster-range");
  Tensor values(Shape{62, 4});
  for (std::size_t i = 0; i < values.numel(); ++i) values[i] = rng.uniform(-5.0, 5.0);
  TopoImage img = rasterize(values, grid);
  for (int b = 0; b < 4; ++b) {
    double lo = values.at(0, b), hi = values.at(0, b);
    for (int c = 1; c < 62; ++c) {
      lo = std::min(lo, values.at(c, b));
      hi = std::max(hi, values.at(c, b));
    }
    for (int r = 0; r < 24; ++r)
      for (int c = 0; c < 24; ++c)
        if (grid->inside(r, c)) {
          CHECK(img.raster.at(b, r, c) >= lo);
          CHECK(img.raster.at(b, r, c) <= hi);
        }
  }
}

TEST_CASE("mirroring layout and features mirrors the image columns") {
  ElectrodeLayout layout = load_layout(data_path("layouts/seed62.layout"));
  ElectrodeLayout mirrored = layout;
  for (Electrode& e : mirrored.electrodes) e.x = -e.x;
  RngStream rng(13, "mirror-feat");
  Tensor values(Shape{62, 2});
  for (std::size_t i = 0; i < values.numel(); ++i) values[i] = rng.uniform(-2.0, 2.0);

  auto g1 = build_raster_grid(azimuthal_project(layout, 32, 32));
  auto g2 = build_raster_grid(azimuthal_project(mirrored, 32, 32));
  TopoImage a = rasterize(values, g1);
  TopoImage b = rasterize(values, g2);
  for (int band = 0; band < 2; ++band)
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c)
        CHECK(std::abs(b.raster.at(band, r, c) - a.raster.at(band, r, 31 - c)) < 1e-9);
}

TEST_CASE("saliency images: normalization, fallbacks, validation") {
  ElectrodeLayout layout = load_layout(data_path("layouts/deap32.layout"));
  auto grid = build_raster_grid(azimuthal_project(layout, 32, 32));

  TopoImage uniform = saliency_to_image(Tensor(Shape{32, 2}, 0.37), grid);
  TopoImage zero = saliency_to_image(Tensor(Shape{32, 2}, 0.0), grid);
  for (int b = 0; b < 2; ++b)
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c) {
        double want = grid->inside(r, c) ? 1.0 : 0.0;
        CHECK(uniform.raster.at(b, r, c) == want);
        CHECK(zero.raster.at(b, r, c) == want);
      }

  // one hot electrode dominates the in-mask maximum at its own pixel
  Tensor hot(Shape{32, 1}, 0.05);
  hot.at(7, 0) = 3.0;  // electrode T7
  TopoImage hot_img = saliency_to_image(hot, grid);
  ProjectedLayout proj = azimuthal_project(layout, 32, 32);
  int hr = static_cast<int>(std::lround(proj.row(7)));
  int hc = static_cast<int>(std::lround(proj.col(7)));
  double best = -1.0;
  int br = -1, bc = -1;
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c)
      if (grid->inside(r, c) && hot_img.raster.at(0, r, c) > best) {
        best = hot_img.raster.at(0, r, c);
        br = r;
        bc = c;
      }
  CHECK(std::abs(br - hr) <= 1);
  CHECK(std::abs(bc - hc) <= 1);

  Tensor negative(Shape{32, 1}, -0.5);
  CHECK_THROWS_AS(saliency_to_image(negative, grid), DataError);
}

TEST_CASE("apply_saliency: identity, annihilation, bilinearity") {
  ElectrodeLayout layout = load_layout(data_path("layouts/deap32.layout"));
  auto grid = build_raster_grid(azimuthal_project(layout, 16, 16));
  RngStream rng(17, "apply");
  Tensor values(Shape{32, 3});
  for (std::size_t i = 0; i < values.numel(); ++i) values[i] = rng.uniform(-1.0, 1.0);
  TopoImage img = rasterize(values, grid);

  TopoImage ones = saliency_to_image(Tensor(Shape{32, 3}, 1.0), grid);
  TopoImage same = apply_saliency(img, ones);
  CHECK(same.raster.vec() == img.raster.vec());  // bit-identical

  TopoImage zeros{Tensor(Shape{3, 16, 16}), grid};
  TopoImage dark = apply_saliency(img, zeros);
  for (std::size_t i = 0; i < dark.raster.numel(); ++i) CHECK(dark.raster[i] == 0.0);

  TopoImage scaled{img.raster, grid};
  for (std::size_t i = 0; i < scaled.raster.numel(); ++i) scaled.raster[i] *= 3.0;
  TopoImage a = apply_saliency(scaled, ones);
  TopoImage b = apply_saliency(img, ones);
  for (std::size_t i = 0; i < a.raster.numel(); ++i)
    CHECK(a.raster[i] == doctest::Approx(3.0 * b.raster[i]).epsilon(1e-12));

  TopoImage wrong{Tensor(Shape{3, 8, 8}), nullptr};
  CHECK_THROWS_AS(apply_saliency(img, wrong), DimensionError);
}

TEST_CASE("raster dump and PGM export") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "eegdual_topomap_test";
  fs::create_directories(dir);

  RngStream rng(23, "raster-io");
  Tensor raster(Shape{2, 9, 9});
  for (std::size_t i = 0; i < raster.numel(); ++i) raster[i] = rng.uniform(-4.0, 4.0);
  std::string rpath = (dir / "img.raster").string();
  write_raster(rpath, raster);
  Tensor back = read_raster(rpath);
  CHECK(back.shape() == raster.shape());
  CHECK(back.vec() == raster.vec());

  std::string ppath = (dir / "img.pgm").string();
  write_pgm16(ppath, raster, 1, (dir / "img.scale.txt").string());
  std::ifstream pgm(ppath, std::ios::binary);
  std::string header;
  pgm >> header;
  CHECK(header == "P5");
  std::ifstream side((dir / "img.scale.txt").string());
  std::string word;
  side >> word;
  CHECK(word == "band");

  CHECK_THROWS_AS(read_raster((dir / "missing.raster").string()), DataError);
  fs::remove_all(dir);
}
