#include "taskdn/channels.hpp"

#include "taskdn/rawio.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include <fftw3.h>

namespace taskdn {

namespace {

double signed_freq(std::size_t k, std::size_t n) {
  const long s = k <= n / 2 ? static_cast<long>(k) : static_cast<long>(k) - static_cast<long>(n);
  return static_cast<double>(s) / static_cast<double>(n);
}

bool in_band(double rho, double lo, double hi) { return rho >= lo && rho < hi; }

double sq_norm(std::span<const double> v) {
  return std::inner_product(v.begin(), v.end(), v.begin(), 0.0);
}

} // namespace

std::vector<double> default_band_edges() { return {1.0 / 64, 1.0 / 32, 1.0 / 16, 1.0 / 8, 1.0 / 4}; }

std::size_t band_sample_count(std::size_t grid, double lo, double hi) {
  std::size_t n = 0;
  for (std::size_t ky = 0; ky < grid; ++ky)
    for (std::size_t kx = 0; kx < grid; ++kx)
      n += in_band(std::hypot(signed_freq(kx, grid), signed_freq(ky, grid)), lo, hi) ? 1 : 0;
  return n;
}

ChannelSet build_channels(std::size_t grid, const std::vector<double> &band_edges,
                          bool normalize) {
  if (grid < 2)
    throw ValidationError("build_channels: grid must be >= 2");
  if (band_edges.size() < 2)
    throw ValidationError("build_channels: need at least two band edges");
  for (std::size_t i = 0; i + 1 < band_edges.size(); ++i)
    if (!(band_edges[i] < band_edges[i + 1]))
      throw ValidationError("build_channels: band edges must be strictly increasing");
  if (band_edges.front() < 0 || band_edges.back() > 0.5)
    throw ValidationError("build_channels: band edges must lie in [0, 0.5]");

  ChannelSet ch{grid, band_edges, {}, false};
  const std::size_t n = grid * grid;
  const std::size_t mid = grid / 2;
  auto *buf = static_cast<fftw_complex *>(fftw_malloc(sizeof(fftw_complex) * n));
  std::unique_ptr<fftw_complex, decltype(&fftw_free)> guard(buf, &fftw_free);
  const fftw_plan plan = fftw_plan_dft_2d(static_cast<int>(grid), static_cast<int>(grid), buf, buf,
                                          FFTW_BACKWARD, FFTW_ESTIMATE);

  for (std::size_t c = 0; c + 1 < band_edges.size(); ++c) {
    std::size_t count = 0;
    for (std::size_t ky = 0; ky < grid; ++ky) {
      for (std::size_t kx = 0; kx < grid; ++kx) {
        const bool on = in_band(std::hypot(signed_freq(kx, grid), signed_freq(ky, grid)),
                                band_edges[c], band_edges[c + 1]);
        buf[ky * grid + kx][0] = on ? 1.0 : 0.0;
        buf[ky * grid + kx][1] = 0.0;
        count += on ? 1 : 0;
      }
    }
    if (count == 0) {
      fftw_destroy_plan(plan);
      throw ValidationError("build_channels: band " + std::to_string(c) + " [" +
                            std::to_string(band_edges[c]) + ", " + std::to_string(band_edges[c + 1]) +
                            ") contains no frequency samples on a " + std::to_string(grid) +
                            "-voxel grid");
    }
    fftw_execute(plan);
    std::vector<double> row(n);
    // Centre the zero-origin template on the grid midpoint (circular move).
    for (std::size_t y = 0; y < grid; ++y)
      for (std::size_t x = 0; x < grid; ++x) {
        const std::size_t sx = (x + grid - mid) % grid, sy = (y + grid - mid) % grid;
        row[y * grid + x] = buf[sy * grid + sx][0] / static_cast<double>(n);
      }
    if (normalize) {
      const double norm = std::sqrt(sq_norm(row));
      for (double &v : row)
        v /= norm;
    }
    ch.templates.push_back(std::move(row));
  }
  fftw_destroy_plan(plan);
  return ch;
}

ChannelSet shift_channels(const ChannelSet &ch, long x, long y) {
  if (x < 0 || y < 0 || x >= static_cast<long>(ch.grid) || y >= static_cast<long>(ch.grid))
    throw ValidationError("shift_channels: centroid outside the channel grid");
  ChannelSet out{ch.grid, ch.band_edges, {}, false};
  const long dx = x - static_cast<long>(ch.midpoint());
  const long dy = y - static_cast<long>(ch.midpoint());
  for (const auto &row : ch.templates) {
    std::vector<double> shifted(row.size());
    acyclic_shift(row, shifted, ch.grid, ch.grid, dx, dy);
    if (sq_norm(shifted) < 0.75 * sq_norm(row))
      out.border_truncated = true;
    out.templates.push_back(std::move(shifted));
  }
  return out;
}

ChannelVector channelize(const ChannelSet &ch, std::span<const double> slice) {
  if (slice.size() != ch.grid * ch.grid)
    throw ValidationError("channelize: image size does not match the channel grid");
  ChannelVector v(ch.n_channels());
  for (std::size_t c = 0; c < ch.n_channels(); ++c)
    v[c] = std::inner_product(slice.begin(), slice.end(), ch.templates[c].begin(), 0.0);
  return v;
}

ChannelVector channelize(const ChannelSet &ch, const Image2D &img) {
  if (img.width() != ch.grid || img.height() != ch.grid)
    throw ValidationError("channelize: image dims do not match the channel grid");
  return channelize(ch, img.values());
}

RoiStack extract_roi(const Image3D &img, long x, long y, long slice) {
  if (img.width() < kRoiSize || img.height() < kRoiSize)
    throw ValidationError("extract_roi: grid must be at least 32 voxels");
  RoiStack roi;
  long centre = slice;
  const long max_centre = static_cast<long>(img.n_slices()) - 2;
  if (img.n_slices() < kRoiSlices) {
    centre = 1;
    roi.clamped = true;
  } else if (centre < 1 || centre > max_centre) {
    centre = std::clamp(centre, 1L, max_centre);
    roi.clamped = true;
  }
  const long half = static_cast<long>(kRoiSize / 2);
  for (std::size_t k = 0; k < kRoiSlices; ++k) {
    Image2D w(kRoiSize, kRoiSize);
    const long s = centre - 1 + static_cast<long>(k);
    if (s >= 0 && s < static_cast<long>(img.n_slices())) {
      for (long ry = 0; ry < static_cast<long>(kRoiSize); ++ry) {
        const long iy = y - half + ry;
        if (iy < 0 || iy >= static_cast<long>(img.height()))
          continue;
        for (long rx = 0; rx < static_cast<long>(kRoiSize); ++rx) {
          const long ix = x - half + rx;
          if (ix >= 0 && ix < static_cast<long>(img.width()))
            w(rx, ry) = img(ix, iy, s);
        }
      }
    }
    roi.slices[k] = std::move(w);
  }
  return roi;
}

ChannelVector roi_features(const ChannelSet &ch, const RoiStack &roi) {
  if (ch.grid < kRoiSize)
    throw ValidationError("roi_features: channel grid smaller than the ROI");
  const std::size_t off = ch.midpoint() - kRoiSize / 2;
  std::vector<double> canvas(ch.grid * ch.grid);
  ChannelVector out;
  out.reserve(kRoiSlices * ch.n_channels());
  for (const auto &s : roi.slices) {
    std::ranges::fill(canvas, 0.0);
    for (std::size_t ry = 0; ry < kRoiSize; ++ry)
      for (std::size_t rx = 0; rx < kRoiSize; ++rx)
        canvas[(ry + off) * ch.grid + rx + off] = s(rx, ry);
    const auto v = channelize(ch, canvas);
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

void export_channels(const ChannelSet &ch, const std::filesystem::path &path) {
  std::vector<double> all;
  for (const auto &r : ch.templates)
    all.insert(all.end(), r.begin(), r.end());
  write_raw(Image3D(ch.grid, ch.grid, ch.n_channels(), std::move(all)), path);
  write_sidecar(path, {{"grid", ch.grid}, {"band_edges", ch.band_edges},
                       {"n_channels", ch.n_channels()}, {"center", ch.midpoint()}});
}

} // namespace taskdn
