#ifndef EEGDUAL_TOPOMAP_HPP
#define EEGDUAL_TOPOMAP_HPP

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "eegdual/signal.hpp"
#include "eegdual/tensor.hpp"

namespace eegdual {

enum class Hemisphere { Left, Right, Midline };

struct Electrode {
  std::string label;
  double x = 0.0, y = 0.0, z = 0.0;  // unit sphere; +z vertex, +y nasion, +x right
  int region = 0;
  Hemisphere hemisphere = Hemisphere::Midline;
};

struct ElectrodeLayout {
  std::vector<Electrode> electrodes;
  int region_count = 0;

  int size() const { return static_cast<int>(electrodes.size()); }
  int index_of(const std::string& label) const;  // -1 when absent
};

// Azimuthal equidistant projection of a layout into an h x w pixel grid.
// Offsets are kept relative to the image center so that negating x mirrors
// the computed distances exactly.
struct ProjectedLayout {
  int h = 0, w = 0;
  double center_row = 0.0, center_col = 0.0;
  double scale = 0.0;           // pixels per radian of polar distance
  std::vector<double> drow;     // per electrode, offset from center
  std::vector<double> dcol;

  double row(int e) const { return center_row + drow[static_cast<std::size_t>(e)]; }
  double col(int e) const { return center_col + dcol[static_cast<std::size_t>(e)]; }
};

ProjectedLayout azimuthal_project(const ElectrodeLayout& layout, int h, int w);

// Pixel -> electrode interpolation weights, computed once per (layout, h, w)
// and shared read-only afterwards.
struct RasterGrid {
  int h = 0, w = 0;
  int electrodes = 0;
  std::vector<std::uint8_t> mask;  // 1 = inside the head disc
  struct PixelInterp {
    int exact = -1;               // electrode index when the pixel sits on one
    int count = 0;
    std::array<int, 4> idx{};
    std::array<double, 4> weight{};  // normalized inverse-square-distance weights
  };
  std::vector<PixelInterp> interp;

  bool inside(int r, int c) const { return mask[static_cast<std::size_t>(r) * w + c] != 0; }
};

std::shared_ptr<const RasterGrid> build_raster_grid(const ProjectedLayout& proj);

// Multi-band head image; pixels outside the mask are exactly zero.
struct TopoImage {
  Tensor raster;  // [bands, h, w]
  std::shared_ptr<const RasterGrid> grid;

  int bands() const { return raster.dim(0); }
  int h() const { return raster.dim(1); }
  int w() const { return raster.dim(2); }
};

// Inverse-distance-weighted (power 2, k = 4) rasterization of per-electrode
// values. A pixel within 1e-9 of a projected electrode takes that
// electrode's value exactly.
TopoImage rasterize(const FeatureArray& f, std::shared_ptr<const RasterGrid> grid);
TopoImage rasterize(const Tensor& channel_band_values, std::shared_ptr<const RasterGrid> grid);

// Saliency magnitudes -> [0,1]-normalized head image. An all-zero saliency
// degrades to uniform 1 inside the mask so the weighted image is unchanged.
TopoImage saliency_to_image(const Tensor& saliency, std::shared_ptr<const RasterGrid> grid);

// Elementwise product of an image with a saliency image of identical shape.
TopoImage apply_saliency(const TopoImage& img, const TopoImage& sal);

// 16-bit min-max scaled PGM preview plus a sidecar recording the scaling.
void write_pgm16(const std::string& path, const Tensor& raster, int band,
                 const std::string& sidecar_path);

// Raw raster dump: magic, version, bands, h, w; row-major 64-bit reals.
void write_raster(const std::string& path, const Tensor& raster);
Tensor read_raster(const std::string& path);

}  // namespace eegdual

#endif
