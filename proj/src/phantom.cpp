#include "taskdn/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <numbers>

namespace taskdn {

void PhantomSpec::validate() const {
  if (grid < 8 || n_slices < 1)
    throw ValidationError("PhantomSpec: grid must be >= 8 and n_slices >= 1");
  if (!(inner_radius > 0 && inner_radius < outer_radius && outer_radius < grid / 2.0))
    throw ValidationError("PhantomSpec: need 0 < inner_radius < outer_radius < grid/2");
  if (!(wall_uptake > background_uptake && background_uptake >= 0))
    throw ValidationError("PhantomSpec: need wall_uptake > background_uptake >= 0");
  if (!(cavity_uptake < wall_uptake))
    throw ValidationError("PhantomSpec: need cavity_uptake < wall_uptake");
  if (first_wall_slice > last_wall_slice || last_wall_slice >= n_slices)
    throw ValidationError("PhantomSpec: wall slice range out of bounds");
  if (radius_jitter < 0 || radius_jitter >= 1 || center_jitter < 0 || uptake_jitter < 0 ||
      uptake_jitter >= 1)
    throw ValidationError("PhantomSpec: jitter out of range");
  const double worst_outer = outer_radius * (1 + radius_jitter);
  const double worst_wall = wall_uptake * (1 - uptake_jitter);
  if (inner_radius * (1 + radius_jitter) >= outer_radius * (1 - radius_jitter))
    throw ValidationError("PhantomSpec: jitter can invert the annulus");
  if (std::min(center_x, center_y) - center_jitter - worst_outer < 0 ||
      std::max(center_x, center_y) + center_jitter + worst_outer > static_cast<double>(grid))
    throw ValidationError("PhantomSpec: jittered LV can leave the grid");
  if (!(worst_wall > background_uptake && worst_wall > cavity_uptake))
    throw ValidationError("PhantomSpec: jittered wall uptake can fall below background/cavity");
}

void to_json(nlohmann::json &j, const PhantomSpec &s) {
  j = {{"grid", s.grid},
       {"n_slices", s.n_slices},
       {"center_x", s.center_x},
       {"center_y", s.center_y},
       {"inner_radius", s.inner_radius},
       {"outer_radius", s.outer_radius},
       {"wall_uptake", s.wall_uptake},
       {"cavity_uptake", s.cavity_uptake},
       {"background_uptake", s.background_uptake},
       {"first_wall_slice", s.first_wall_slice},
       {"last_wall_slice", s.last_wall_slice},
       {"radius_jitter", s.radius_jitter},
       {"center_jitter", s.center_jitter},
       {"uptake_jitter", s.uptake_jitter}};
}

void from_json(const nlohmann::json &j, PhantomSpec &s) {
  PhantomSpec d;
  s.grid = j.value("grid", d.grid);
  s.n_slices = j.value("n_slices", d.n_slices);
  s.center_x = j.value("center_x", s.grid / 2.0);
  s.center_y = j.value("center_y", s.grid / 2.0);
  s.inner_radius = j.value("inner_radius", d.inner_radius);
  s.outer_radius = j.value("outer_radius", d.outer_radius);
  s.wall_uptake = j.value("wall_uptake", d.wall_uptake);
  s.cavity_uptake = j.value("cavity_uptake", d.cavity_uptake);
  s.background_uptake = j.value("background_uptake", d.background_uptake);
  s.first_wall_slice = j.value("first_wall_slice", d.first_wall_slice);
  s.last_wall_slice = j.value("last_wall_slice", d.last_wall_slice);
  s.radius_jitter = j.value("radius_jitter", d.radius_jitter);
  s.center_jitter = j.value("center_jitter", d.center_jitter);
  s.uptake_jitter = j.value("uptake_jitter", d.uptake_jitter);
}

bool LvMask::contains(std::size_t flat_index) const {
  return std::ranges::binary_search(voxels, flat_index);
}

std::string to_string(Wall w) { return w == Wall::anterior ? "anterior" : "inferior"; }

Wall wall_from_string(const std::string &s) {
  if (s == "anterior")
    return Wall::anterior;
  if (s == "inferior")
    return Wall::inferior;
  throw ValidationError("unknown wall '" + s + "'");
}

std::string DefectSpec::name() const {
  return fmt::format("{}-{:g}-{:.1f}", wall == Wall::anterior ? "ant" : "inf", extent_deg,
                     severity * 100.0);
}

void DefectSpec::validate() const {
  if (!(extent_deg > 0 && extent_deg < 360))
    throw ValidationError("DefectSpec: extent must lie in (0, 360)");
  if (!(severity >= 0 && severity < 1))
    throw ValidationError("DefectSpec: severity must lie in [0, 1)");
  if (axial_span == 0)
    throw ValidationError("DefectSpec: axial_span must be >= 1");
}

void to_json(nlohmann::json &j, const DefectSpec &d) {
  j = {{"wall", to_string(d.wall)},
       {"extent_deg", d.extent_deg},
       {"severity", d.severity},
       {"axial_span", d.axial_span},
       {"bisector_deg", d.bisector_deg()},
       {"name", d.name()}};
}

void from_json(const nlohmann::json &j, DefectSpec &d) {
  d.wall = wall_from_string(j.at("wall").get<std::string>());
  d.extent_deg = j.at("extent_deg").get<double>();
  d.severity = j.at("severity").get<double>();
  d.axial_span = j.value("axial_span", std::size_t{3});
}

namespace {
std::vector<DefectSpec> enumerate_types(std::initializer_list<double> extents) {
  std::vector<DefectSpec> out;
  for (Wall w : {Wall::anterior, Wall::inferior})
    for (double e : extents)
      for (double s : {0.10, 0.175, 0.25})
        out.push_back(DefectSpec{w, e, s, 3});
  return out;
}
} // namespace

std::vector<DefectSpec> training_defect_types() { return enumerate_types({30.0, 60.0}); }
std::vector<DefectSpec> test_defect_types() { return enumerate_types({30.0, 45.0, 60.0}); }

Phantom generate_phantom(const PhantomSpec &spec, RngStream &rng) {
  spec.validate();
  // Fixed draw order keeps phantoms reproducible.
  const double ri = spec.inner_radius * (1 + rng.uniform(-spec.radius_jitter, spec.radius_jitter));
  const double ro = spec.outer_radius * (1 + rng.uniform(-spec.radius_jitter, spec.radius_jitter));
  const double cx = spec.center_x + rng.uniform(-spec.center_jitter, spec.center_jitter);
  const double cy = spec.center_y + rng.uniform(-spec.center_jitter, spec.center_jitter);
  const double wall =
      spec.wall_uptake * (1 + rng.uniform(-spec.uptake_jitter, spec.uptake_jitter));
  if (!(ri < ro))
    throw ValidationError("generate_phantom: jittered radii are not ordered");

  Phantom ph{Image3D(spec.grid, spec.grid, spec.n_slices, spec.background_uptake),
             lv_mask_from_geometry({cx, cy, ri, ro, wall, spec.first_wall_slice, spec.last_wall_slice},
                                   spec.grid, spec.n_slices)};
  for (std::size_t s = spec.first_wall_slice; s <= spec.last_wall_slice; ++s)
    for (std::size_t y = 0; y < spec.grid; ++y)
      for (std::size_t x = 0; x < spec.grid; ++x)
        if (std::hypot(static_cast<double>(x) - cx, static_cast<double>(y) - cy) < ri)
          ph.image(x, y, s) = spec.cavity_uptake;
  auto v = ph.image.values();
  for (std::size_t idx : ph.lv_mask.voxels)
    v[idx] = wall;
  return ph;
}

LvMask lv_mask_from_geometry(const LvGeometry &g, std::size_t grid, std::size_t n_slices) {
  LvMask m;
  m.width = m.height = grid;
  m.n_slices = n_slices;
  m.geometry = g;
  for (std::size_t s = g.first_wall_slice; s <= g.last_wall_slice && s < n_slices; ++s)
    for (std::size_t y = 0; y < grid; ++y)
      for (std::size_t x = 0; x < grid; ++x) {
        const double r = std::hypot(static_cast<double>(x) - g.center_x,
                                    static_cast<double>(y) - g.center_y);
        if (r >= g.inner_radius && r <= g.outer_radius)
          m.voxels.push_back((s * grid + y) * grid + x);
      }
  return m;
}

void to_json(nlohmann::json &j, const LvGeometry &g) {
  j = {{"center_x", g.center_x},         {"center_y", g.center_y},
       {"inner_radius", g.inner_radius}, {"outer_radius", g.outer_radius},
       {"wall_uptake", g.wall_uptake},   {"first_wall_slice", g.first_wall_slice},
       {"last_wall_slice", g.last_wall_slice}};
}

void from_json(const nlohmann::json &j, LvGeometry &g) {
  g.center_x = j.at("center_x").get<double>();
  g.center_y = j.at("center_y").get<double>();
  g.inner_radius = j.at("inner_radius").get<double>();
  g.outer_radius = j.at("outer_radius").get<double>();
  g.wall_uptake = j.at("wall_uptake").get<double>();
  g.first_wall_slice = j.at("first_wall_slice").get<std::size_t>();
  g.last_wall_slice = j.at("last_wall_slice").get<std::size_t>();
}

double wall_angle_deg(const LvGeometry &g, double x, double y) {
  double a = std::atan2(g.center_y - y, x - g.center_x) * 180.0 / std::numbers::pi;
  if (a < 0)
    a += 360.0;
  return a;
}

namespace {
double angular_distance(double a, double b) {
  double d = std::fmod(std::fabs(a - b), 360.0);
  return d > 180.0 ? 360.0 - d : d;
}

struct SliceRange {
  std::size_t first, last;
};

SliceRange defect_slices(const LvGeometry &g, std::size_t span) {
  const std::size_t mid = (g.first_wall_slice + g.last_wall_slice) / 2;
  const std::size_t first = mid >= span / 2 ? mid - span / 2 : 0;
  return {first, first + span - 1};
}

std::vector<std::size_t> sector_voxels(const LvMask &m, double bisector, double extent,
                                       std::size_t span) {
  const auto range = defect_slices(m.geometry, span);
  const std::size_t plane = m.width * m.height;
  std::vector<std::size_t> out;
  for (std::size_t idx : m.voxels) {
    const std::size_t s = idx / plane;
    if (s < range.first || s > range.last)
      continue;
    const double x = static_cast<double>(idx % m.width);
    const double y = static_cast<double>((idx % plane) / m.width);
    if (angular_distance(wall_angle_deg(m.geometry, x, y), bisector) <= extent / 2.0)
      out.push_back(idx);
  }
  return out;
}
} // namespace

DefectRecord locate_defect(const LvMask &lv_mask, const DefectSpec &defect) {
  defect.validate();
  DefectRecord rec{defect, {}, sector_voxels(lv_mask, defect.bisector_deg(), defect.extent_deg,
                                             defect.axial_span)};
  if (rec.voxels.empty())
    throw ValidationError("insert_defect: defect '" + defect.name() +
                          "' does not intersect the LV wall");
  const std::size_t plane = lv_mask.width * lv_mask.height;
  double sx = 0, sy = 0, ss = 0;
  for (std::size_t idx : rec.voxels) {
    sx += static_cast<double>(idx % lv_mask.width);
    sy += static_cast<double>((idx % plane) / lv_mask.width);
    ss += static_cast<double>(idx / plane);
  }
  const double n = static_cast<double>(rec.voxels.size());
  rec.centroid = {std::lround(sx / n), std::lround(sy / n), std::lround(ss / n)};
  return rec;
}

InsertResult insert_defect(const Image3D &img, const LvMask &lv_mask, const DefectSpec &defect) {
  if (img.width() != lv_mask.width || img.height() != lv_mask.height ||
      img.n_slices() != lv_mask.n_slices)
    throw ValidationError("insert_defect: image and LV mask dims differ");
  InsertResult r{img, locate_defect(lv_mask, defect)};
  const double keep = 1.0 - defect.severity;
  auto v = r.image.values();
  for (std::size_t idx : r.record.voxels)
    v[idx] *= keep;
  return r;
}

Image3D remap_uptake(const Image3D &img, const LvMask &lv_mask) {
  if (lv_mask.voxels.empty())
    throw ValidationError("remap_uptake: empty LV mask");
  auto v = img.values();
  double m = v[lv_mask.voxels.front()];
  for (std::size_t idx : lv_mask.voxels)
    m = std::max(m, v[idx]);
  Image3D out = img;
  auto o = out.values();
  auto it = lv_mask.voxels.begin();
  for (std::size_t i = 0; i < o.size(); ++i) {
    while (it != lv_mask.voxels.end() && *it < i)
      ++it;
    const bool inside = it != lv_mask.voxels.end() && *it == i;
    if (!inside && o[i] > m)
      o[i] = m;
  }
  return out;
}

double defect_contrast(const Image3D &img, const LvMask &lv_mask, const DefectSpec &defect) {
  const auto region = locate_defect(lv_mask, defect).voxels;
  const auto contra = sector_voxels(lv_mask, std::fmod(defect.bisector_deg() + 180.0, 360.0),
                                    defect.extent_deg, defect.axial_span);
  if (contra.empty())
    throw ValidationError("defect_contrast: contralateral region is empty");
  auto v = img.values();
  double a = 0, b = 0;
  for (std::size_t i : region)
    a += v[i];
  for (std::size_t i : contra)
    b += v[i];
  a /= static_cast<double>(region.size());
  b /= static_cast<double>(contra.size());
  if (!(b > 0))
    throw NumericError("defect_contrast: contralateral mean uptake is not positive");
  return 1.0 - a / b;
}

} // namespace taskdn
