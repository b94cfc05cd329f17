#pragma once

// Short-axis left-ventricle phantoms and perfusion-defect insertion.
//
// Angles are measured counter-clockwise from +x with y pointing up on screen,
// i.e. angle = atan2(cy - y, x - cx). Anterior (90 deg) is toward row 0,
// inferior (270 deg) toward the last row.

#include "taskdn/core.hpp"

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

namespace taskdn {

struct PhantomSpec {
  std::size_t grid = 64;
  std::size_t n_slices = 8;
  double center_x = 32.0;
  double center_y = 32.0;
  double inner_radius = 8.0;
  double outer_radius = 12.0;
  double wall_uptake = 100.0;
  double cavity_uptake = 25.0;
  double background_uptake = 10.0;
  std::size_t first_wall_slice = 1;
  std::size_t last_wall_slice = 5;
  // Per-study jitter half-widths (uniform draws).
  double radius_jitter = 0.10; ///< fraction of each radius
  double center_jitter = 2.0;  ///< voxels
  double uptake_jitter = 0.15; ///< fraction of wall_uptake

  void validate() const;
};

void to_json(nlohmann::json &j, const PhantomSpec &s);
void from_json(const nlohmann::json &j, PhantomSpec &s);

/// Realized (post-jitter) LV geometry of one study.
struct LvGeometry {
  double center_x = 0, center_y = 0;
  double inner_radius = 0, outer_radius = 0;
  double wall_uptake = 0;
  std::size_t first_wall_slice = 0, last_wall_slice = 0;
};

/// LV wall voxels (sorted flat indices into the volume) plus the geometry
/// that produced them.
struct LvMask {
  std::size_t width = 0, height = 0, n_slices = 0;
  LvGeometry geometry;
  std::vector<std::size_t> voxels;

  bool contains(std::size_t flat_index) const;
};

struct Phantom {
  Image3D image;
  LvMask lv_mask;
};

enum class Wall { anterior, inferior };

std::string to_string(Wall w);
Wall wall_from_string(const std::string &s);

struct DefectSpec {
  Wall wall = Wall::anterior;
  double extent_deg = 30.0;
  double severity = 0.25;
  std::size_t axial_span = 3;

  double bisector_deg() const { return wall == Wall::anterior ? 90.0 : 270.0; }
  /// Compact identifier such as "ant-30-25.0".
  std::string name() const;
  void validate() const;
};

void to_json(nlohmann::json &j, const DefectSpec &d);
void from_json(const nlohmann::json &j, DefectSpec &d);

struct VoxelCoord {
  long x = 0, y = 0, slice = 0;
  bool operator==(const VoxelCoord &) const = default;
};

struct DefectRecord {
  DefectSpec spec;
  VoxelCoord centroid;
  std::vector<std::size_t> voxels; ///< sorted flat indices, subset of the LV mask
};

/// The 12 training defect types: {anterior, inferior} x {30, 60} deg x {10, 17.5, 25} %.
std::vector<DefectSpec> training_defect_types();
/// The 18 test types: training types plus a 45 deg extent.
std::vector<DefectSpec> test_defect_types();

Phantom generate_phantom(const PhantomSpec &spec, RngStream &rng);

/// Rebuilds the LV wall mask of a study from its realized geometry.
LvMask lv_mask_from_geometry(const LvGeometry &g, std::size_t grid, std::size_t n_slices);

void to_json(nlohmann::json &j, const LvGeometry &g);
void from_json(const nlohmann::json &j, LvGeometry &g);

/// Angular coordinate (degrees, [0, 360)) of voxel (x, y) about the LV center.
double wall_angle_deg(const LvGeometry &g, double x, double y);

/// Mask and centroid a defect would occupy, without touching the image.
DefectRecord locate_defect(const LvMask &lv_mask, const DefectSpec &defect);

struct InsertResult {
  Image3D image;
  DefectRecord record;
};

InsertResult insert_defect(const Image3D &img, const LvMask &lv_mask, const DefectSpec &defect);

/// Clamps every voxel outside the LV mask to the maximum LV-wall uptake.
Image3D remap_uptake(const Image3D &img, const LvMask &lv_mask);

/// Relative uptake drop of the defect region vs the same region rotated by
/// 180 deg (the contralateral wall): 1 - mean(defect) / mean(contralateral).
double defect_contrast(const Image3D &img, const LvMask &lv_mask, const DefectSpec &defect);

} // namespace taskdn
