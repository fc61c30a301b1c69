#include "eegdual/topomap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

#include "eegdual/errors.hpp"

namespace eegdual {

int ElectrodeLayout::index_of(const std::string& label) const {
  for (std::size_t i = 0; i < electrodes.size(); ++i)
    if (electrodes[i].label == label) return static_cast<int>(i);
  return -1;
}

ProjectedLayout azimuthal_project(const ElectrodeLayout& layout, int h, int w) {
  if (layout.size() == 0) throw ConfigError("azimuthal_project: empty layout");
  if (h < 8 || w < 8) throw ConfigError("azimuthal_project: image must be at least 8x8");

  ProjectedLayout p;
  p.h = h;
  p.w = w;
  p.center_row = (h - 1) / 2.0;
  p.center_col = (w - 1) / 2.0;
  const int n = layout.size();
  p.drow.resize(static_cast<std::size_t>(n));
  p.dcol.resize(static_cast<std::size_t>(n));

  std::vector<double> rho(static_cast<std::size_t>(n)), ux(static_cast<std::size_t>(n)),
      uy(static_cast<std::size_t>(n));
  double rho_max = 0.0;
  for (int e = 0; e < n; ++e) {
    const Electrode& el = layout.electrodes[static_cast<std::size_t>(e)];
    double z = std::clamp(el.z, -1.0, 1.0);
    double r = std::acos(z);  // polar distance from the vertex
    double rxy = std::sqrt(el.x * el.x + el.y * el.y);
    if (rxy < 1e-12) {
      ux[static_cast<std::size_t>(e)] = 0.0;
      uy[static_cast<std::size_t>(e)] = 0.0;
      r = 0.0;  // vertex (or degenerate antipode) collapses onto the center
    } else {
      ux[static_cast<std::size_t>(e)] = el.x / rxy;
      uy[static_cast<std::size_t>(e)] = el.y / rxy;
    }
    rho[static_cast<std::size_t>(e)] = r;
    rho_max = std::max(rho_max, r);
  }

  const double inscribed = (std::min(h, w) - 1) / 2.0;
  p.scale = rho_max > 1e-9 ? inscribed / (rho_max * 1.05) : 1.0;

  for (int e = 0; e < n; ++e) {
    double radial = p.scale * rho[static_cast<std::size_t>(e)];
    p.dcol[static_cast<std::size_t>(e)] = radial * ux[static_cast<std::size_t>(e)];
    p.drow[static_cast<std::size_t>(e)] = -(radial * uy[static_cast<std::size_t>(e)]);
  }
  return p;
}

std::shared_ptr<const RasterGrid> build_raster_grid(const ProjectedLayout& proj) {
  auto grid = std::make_shared<RasterGrid>();
  grid->h = proj.h;
  grid->w = proj.w;
  grid->electrodes = static_cast<int>(proj.drow.size());
  grid->mask.assign(static_cast<std::size_t>(proj.h) * proj.w, 0);
  grid->interp.resize(static_cast<std::size_t>(proj.h) * proj.w);

  const int n = static_cast<int>(proj.drow.size());
  const double head_r = (std::min(proj.h, proj.w) - 1) / 2.0;
  const double head_r2 = head_r * head_r;
  const int k = std::min(4, n);

  std::vector<std::pair<double, int>> dist(static_cast<std::size_t>(n));
  for (int r = 0; r < proj.h; ++r) {
    const double qr = static_cast<double>(r) - proj.center_row;
    for (int c = 0; c < proj.w; ++c) {
      const double qc = static_cast<double>(c) - proj.center_col;
      if (qr * qr + qc * qc > head_r2) continue;
      std::size_t pi = static_cast<std::size_t>(r) * proj.w + c;
      grid->mask[pi] = 1;
      RasterGrid::PixelInterp& ip = grid->interp[pi];
      for (int e = 0; e < n; ++e) {
        double dr = proj.drow[static_cast<std::size_t>(e)] - qr;
        double dc = proj.dcol[static_cast<std::size_t>(e)] - qc;
        dist[static_cast<std::size_t>(e)] = {dr * dr + dc * dc, e};
      }
      std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
      if (dist[0].first < 1e-18) {  // pixel sits on an electrode
        ip.exact = dist[0].second;
        ip.count = 0;
        continue;
      }
      double wsum = 0.0;
      for (int j = 0; j < k; ++j) wsum += 1.0 / dist[static_cast<std::size_t>(j)].first;
      ip.count = k;
      for (int j = 0; j < k; ++j) {
        ip.idx[static_cast<std::size_t>(j)] = dist[static_cast<std::size_t>(j)].second;
        ip.weight[static_cast<std::size_t>(j)] =
            (1.0 / dist[static_cast<std::size_t>(j)].first) / wsum;
      }
    }
  }
  return grid;
}

namespace {

TopoImage rasterize_values(const Tensor& values, std::shared_ptr<const RasterGrid> grid) {
  if (values.ndim() != 2) throw DimensionError("rasterize: values must be [channels, bands]");
  const RasterGrid& g = *grid;
  const int bands = values.dim(1);
  TopoImage img;
  img.grid = grid;
  img.raster = Tensor(Shape{bands, g.h, g.w});
  for (int b = 0; b < bands; ++b) {
    for (int r = 0; r < g.h; ++r)
      for (int c = 0; c < g.w; ++c) {
        std::size_t pi = static_cast<std::size_t>(r) * g.w + c;
        if (!g.mask[pi]) continue;  // outside the head: exact zero
        const RasterGrid::PixelInterp& ip = g.interp[pi];
        double v;
        if (ip.exact >= 0) {
          v = values.at(ip.exact, b);
        } else {
          // affine form around the nearest electrode keeps constant inputs
          // exactly constant; clamping enforces the convex-hull range
          double v0 = values.at(ip.idx[0], b);
          double acc = v0;
          double lo = v0, hi = v0;
          for (int j = 1; j < ip.count; ++j) {
            double vj = values.at(ip.idx[static_cast<std::size_t>(j)], b);
            acc += ip.weight[static_cast<std::size_t>(j)] * (vj - v0);
            lo = std::min(lo, vj);
            hi = std::max(hi, vj);
          }
          v = std::clamp(acc, lo, hi);
        }
        img.raster.at(b, r, c) = v;
      }
  }
  return img;
}

}  // namespace

TopoImage rasterize(const FeatureArray& f, std::shared_ptr<const RasterGrid> grid) {
  return rasterize(f.values, std::move(grid));
}

TopoImage rasterize(const Tensor& channel_band_values, std::shared_ptr<const RasterGrid> grid) {
  if (channel_band_values.ndim() != 2)
    throw DimensionError("rasterize: values must be [channels, bands]");
  if (channel_band_values.dim(0) != grid->electrodes)
    throw DataError("rasterize: feature channel count " +
                    std::to_string(channel_band_values.dim(0)) + " does not match layout size " +
                    std::to_string(grid->electrodes));
  return rasterize_values(channel_band_values, std::move(grid));
}

TopoImage saliency_to_image(const Tensor& saliency, std::shared_ptr<const RasterGrid> grid) {
  if (saliency.ndim() != 2) throw DimensionError("saliency_to_image: values must be 2-d");
  double maxv = 0.0;
  for (std::size_t i = 0; i < saliency.numel(); ++i) {
    if (saliency[i] < 0.0)
      throw DataError("saliency_to_image: saliency magnitudes must be non-negative");
    maxv = std::max(maxv, saliency[i]);
  }
  const RasterGrid& g = *grid;
  if (maxv == 0.0) {
    // no signal to reweight by: uniform 1 inside the mask
    TopoImage img;
    img.grid = grid;
    img.raster = Tensor(Shape{saliency.dim(1), g.h, g.w});
    for (int b = 0; b < saliency.dim(1); ++b)
      for (int r = 0; r < g.h; ++r)
        for (int c = 0; c < g.w; ++c)
          if (g.mask[static_cast<std::size_t>(r) * g.w + c]) img.raster.at(b, r, c) = 1.0;
    return img;
  }
  Tensor scaled(saliency.shape());
  for (std::size_t i = 0; i < saliency.numel(); ++i) scaled[i] = saliency[i] / maxv;
  return rasterize(scaled, std::move(grid));
}

TopoImage apply_saliency(const TopoImage& img, const TopoImage& sal) {
  if (!img.raster.same_shape(sal.raster))
    throw DimensionError("apply_saliency: image shapes differ");
  if (img.grid && sal.grid && img.grid->mask != sal.grid->mask)
    throw DimensionError("apply_saliency: head masks differ");
  TopoImage out;
  out.grid = img.grid;
  out.raster = Tensor(img.raster.shape());
  for (std::size_t i = 0; i < out.raster.numel(); ++i)
    out.raster[i] = img.raster[i] * sal.raster[i];
  return out;
}

void write_pgm16(const std::string& path, const Tensor& raster, int band,
                 const std::string& sidecar_path) {
  if (raster.ndim() != 3) throw DimensionError("write_pgm16: raster must be [bands,h,w]");
  const int h = raster.dim(1), w = raster.dim(2);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      lo = std::min(lo, raster.at(band, r, c));
      hi = std::max(hi, raster.at(band, r, c));
    }
  const double span = hi > lo ? hi - lo : 1.0;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "P5\n" << w << " " << h << "\n65535\n";
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double v = (raster.at(band, r, c) - lo) / span;
      auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
      unsigned char bytes[2] = {static_cast<unsigned char>(q >> 8),
                                static_cast<unsigned char>(q & 0xff)};
      out.write(reinterpret_cast<const char*>(bytes), 2);
    }
  if (!out) throw DataError("short write: " + path);

  std::ofstream side(sidecar_path);
  if (!side) throw DataError("cannot write " + sidecar_path);
  char buf[128];
  std::snprintf(buf, sizeof buf, "band %d min %.17g max %.17g\n", band, lo, hi);
  side << buf;
}

namespace {
constexpr char kRasterMagic[4] = {'E', 'E', 'G', 'I'};
constexpr std::uint32_t kRasterVersion = 1;

void put_u32(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError(path + ": truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
}  // namespace

void write_raster(const std::string& path, const Tensor& raster) {
  if (raster.ndim() != 3) throw DimensionError("write_raster: raster must be [bands,h,w]");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out.write(kRasterMagic, 4);
  put_u32(out, kRasterVersion);
  put_u32(out, static_cast<std::uint32_t>(raster.dim(0)));
  put_u32(out, static_cast<std::uint32_t>(raster.dim(1)));
  put_u32(out, static_cast<std::uint32_t>(raster.dim(2)));
  out.write(reinterpret_cast<const char*>(raster.data()),
            static_cast<std::streamsize>(raster.numel() * sizeof(double)));
  if (!out) throw DataError("short write: " + path);
}

Tensor read_raster(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kRasterMagic, 4) != 0)
    throw DataError(path + ": not a raster file");
  if (get_u32(in, path) != kRasterVersion) throw DataError(path + ": unsupported raster version");
  int bands = static_cast<int>(get_u32(in, path));
  int h = static_cast<int>(get_u32(in, path));
  int w = static_cast<int>(get_u32(in, path));
  if (bands <= 0 || h <= 0 || w <= 0 || static_cast<long>(bands) * h * w > (1L << 28))
    throw DataError(path + ": implausible raster dimensions");
  Tensor t(Shape{bands, h, w});
  if (!in.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(t.numel() * sizeof(double))))
    throw DataError(path + ": truncated raster body");
  return t;
}

}  // namespace eegdual
