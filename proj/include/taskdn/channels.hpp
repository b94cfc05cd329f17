#pragma once

// Rotationally symmetric square-profile frequency channels.
//
// Channel c passes the radial frequency band [edge_c, edge_{c+1}) cycles/voxel.
// Its spatial template is the real inverse DFT of that indicator, centred on
// the grid midpoint (grid/2, grid/2).

#include "taskdn/core.hpp"

#include <array>
#include <filesystem>
#include <vector>

namespace taskdn {

using ChannelVector = std::vector<double>;

struct ChannelSet {
  std::size_t grid = 0;
  std::vector<double> band_edges;
  std::vector<std::vector<double>> templates; ///< C rows of grid*grid values
  bool border_truncated = false;             ///< set by shift_channels

  std::size_t n_channels() const { return templates.size(); }
  std::size_t midpoint() const { return grid / 2; }
};

/// Edges [1/64, 1/32, 1/16, 1/8, 1/4] cycles/voxel.
std::vector<double> default_band_edges();

/// Templates normalised to unit L2 norm unless `normalize` is false, in which
/// case they are the raw inverse-DFT rows (squared norm = band size / N).
ChannelSet build_channels(std::size_t grid, const std::vector<double> &band_edges,
                          bool normalize = true);

/// Number of discrete frequency samples in [lo, hi) on a grid x grid lattice.
std::size_t band_sample_count(std::size_t grid, double lo, double hi);

/// Moves each template so its centre lands on `(x, y)` (zero-fill shift).
ChannelSet shift_channels(const ChannelSet &ch, long x, long y);

ChannelVector channelize(const ChannelSet &ch, const Image2D &img);
ChannelVector channelize(const ChannelSet &ch, std::span<const double> slice);

inline constexpr std::size_t kRoiSize = 32;
inline constexpr std::size_t kRoiSlices = 3;

struct RoiStack {
  std::array<Image2D, kRoiSlices> slices;
  bool clamped = false; ///< centroid slice had to be moved inside [1, n_slices - 2]
};

/// 32x32 windows on the centroid slice and its two neighbours; ROI index
/// (16, 16) sits on the centroid, zero-padded beyond the grid.
RoiStack extract_roi(const Image3D &img, long x, long y, long slice);

/// Observer features: each ROI slice embedded at the centre of the channel
/// grid and channelised, concatenated into a 3C vector.
ChannelVector roi_features(const ChannelSet &ch, const RoiStack &roi);

/// Writes templates as an image volume (one slice per channel) plus a JSON
/// sidecar with grid and band edges.
void export_channels(const ChannelSet &ch, const std::filesystem::path &path);

} // namespace taskdn
