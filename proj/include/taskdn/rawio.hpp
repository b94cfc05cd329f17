#pragma once

// Raw volume format:
//   "TDNI" | u8 version (=1) | u8 kind (0 image3d, 1 sinogram) | 3 x u32 LE dims
//   | row-major f32 LE payload
// Image dims are (width, height, n_slices); sinogram dims are
// (n_bins, n_angles, n_slices). A JSON sidecar "<path>.json" may carry
// metadata (voxel size, dose level, defect description).

#include "taskdn/core.hpp"

#include <filesystem>
#include <optional>
#include <variant>
#include <vector>

#include <json.hpp>

namespace taskdn {

inline constexpr std::uint8_t kRawVersion = 1;

enum class RawKind : std::uint8_t { image3d = 0, sinogram = 1 };

using SinogramStack = std::vector<Sinogram>;
using RawData = std::variant<Image3D, SinogramStack>;

void write_raw(const Image3D &img, const std::filesystem::path &path);
void write_raw(const SinogramStack &sinos, const std::filesystem::path &path);

RawData read_raw(const std::filesystem::path &path);
Image3D read_image3d(const std::filesystem::path &path);
SinogramStack read_sinograms(const std::filesystem::path &path);

std::filesystem::path sidecar_path(const std::filesystem::path &raw_path);
void write_sidecar(const std::filesystem::path &raw_path, const nlohmann::json &meta);
std::optional<nlohmann::json> read_sidecar(const std::filesystem::path &raw_path);

// Little-endian helpers shared with the checkpoint format.
void put_u32(std::vector<std::uint8_t> &buf, std::uint32_t v);
void put_f32(std::vector<std::uint8_t> &buf, float v);
std::uint32_t get_u32(const std::uint8_t *p);
float get_f32(const std::uint8_t *p);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path &path);
void write_file_bytes(const std::filesystem::path &path, const std::vector<std::uint8_t> &bytes);

} // namespace taskdn
