#include "taskdn/rawio.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace taskdn {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'T', 'D', 'N', 'I'};
constexpr std::size_t kHeaderBytes = 4 + 1 + 1 + 12;

void encode_values(std::vector<std::uint8_t> &buf, std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v) || std::fabs(v) > std::numeric_limits<float>::max())
      throw ValidationError("write_raw: non-finite or out-of-range value");
    put_f32(buf, static_cast<float>(v));
  }
}

std::vector<std::uint8_t> header(RawKind kind, std::uint32_t d0, std::uint32_t d1,
                                 std::uint32_t d2) {
  std::vector<std::uint8_t> buf(kMagic, kMagic + 4);
  buf.push_back(kRawVersion);
  buf.push_back(static_cast<std::uint8_t>(kind));
  put_u32(buf, d0);
  put_u32(buf, d1);
  put_u32(buf, d2);
  return buf;
}

} // namespace

void put_u32(std::vector<std::uint8_t> &buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t> &buf, float v) { put_u32(buf, std::bit_cast<std::uint32_t>(v)); }

std::uint32_t get_u32(const std::uint8_t *p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

float get_f32(const std::uint8_t *p) { return std::bit_cast<float>(get_u32(p)); }

std::vector<std::uint8_t> read_file_bytes(const fs::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const fs::path &path, const std::vector<std::uint8_t> &bytes) {
  if (path.has_parent_path())
    fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out)
    throw DataError("short write to " + path.string());
}

void write_raw(const Image3D &img, const fs::path &path) {
  auto buf = header(RawKind::image3d, static_cast<std::uint32_t>(img.width()),
                    static_cast<std::uint32_t>(img.height()),
                    static_cast<std::uint32_t>(img.n_slices()));
  buf.reserve(kHeaderBytes + 4 * img.size());
  encode_values(buf, img.values());
  write_file_bytes(path, buf);
}

void write_raw(const SinogramStack &sinos, const fs::path &path) {
  if (sinos.empty())
    throw ValidationError("write_raw: empty sinogram stack");
  const auto n_bins = sinos.front().n_bins(), n_angles = sinos.front().n_angles();
  auto buf = header(RawKind::sinogram, static_cast<std::uint32_t>(n_bins),
                    static_cast<std::uint32_t>(n_angles), static_cast<std::uint32_t>(sinos.size()));
  for (const auto &s : sinos) {
    if (s.n_bins() != n_bins || s.n_angles() != n_angles || s.kind() != sinos.front().kind())
      throw ValidationError("write_raw: sinogram stack has mixed dims or kinds");
    encode_values(buf, s.values());
  }
  write_file_bytes(path, buf);
  if (sinos.front().kind() == SinogramKind::counts)
    write_sidecar(path, {{"sinogram_kind", "counts"}});
}

RawData read_raw(const fs::path &path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < kHeaderBytes || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError(path.string() + ": bad magic or truncated header");
  if (bytes[4] != kRawVersion)
    throw FormatError(path.string() + ": unsupported version " + std::to_string(bytes[4]));
  const std::uint8_t kind = bytes[5];
  const std::uint64_t d0 = get_u32(&bytes[6]), d1 = get_u32(&bytes[10]), d2 = get_u32(&bytes[14]);
  if (d0 == 0 || d1 == 0 || d2 == 0)
    throw FormatError(path.string() + ": zero dimension");
  const std::uint64_t n = d0 * d1 * d2;
  if (bytes.size() != kHeaderBytes + 4 * n)
    throw FormatError(path.string() + ": payload length " + std::to_string(bytes.size() - kHeaderBytes) +
                      " does not match header dims");
  std::vector<double> values(n);
  for (std::uint64_t i = 0; i < n; ++i)
    values[i] = get_f32(&bytes[kHeaderBytes + 4 * i]);
  if (!all_finite(values))
    throw FormatError(path.string() + ": non-finite payload value");

  if (kind == static_cast<std::uint8_t>(RawKind::image3d))
    return Image3D(d0, d1, d2, std::move(values));
  if (kind != static_cast<std::uint8_t>(RawKind::sinogram))
    throw FormatError(path.string() + ": unknown kind byte");

  auto sk = SinogramKind::expected;
  if (auto meta = read_sidecar(path); meta && meta->value("sinogram_kind", "") == "counts")
    sk = SinogramKind::counts;
  SinogramStack out;
  const std::size_t per = d0 * d1;
  for (std::size_t s = 0; s < d2; ++s) {
    std::vector<double> v(values.begin() + s * per, values.begin() + (s + 1) * per);
    try {
      out.emplace_back(d1, d0, std::move(v), sk);
    } catch (const ValidationError &e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
  return out;
}

Image3D read_image3d(const fs::path &path) {
  auto r = read_raw(path);
  if (auto *img = std::get_if<Image3D>(&r))
    return std::move(*img);
  throw FormatError(path.string() + ": expected an image, found a sinogram");
}

SinogramStack read_sinograms(const fs::path &path) {
  auto r = read_raw(path);
  if (auto *s = std::get_if<SinogramStack>(&r))
    return std::move(*s);
  throw FormatError(path.string() + ": expected a sinogram, found an image");
}

fs::path sidecar_path(const fs::path &raw_path) {
  auto p = raw_path;
  p.replace_extension(".json");
  return p;
}

void write_sidecar(const fs::path &raw_path, const nlohmann::json &meta) {
  const auto text = meta.dump(2) + "\n";
  write_file_bytes(sidecar_path(raw_path), std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::optional<nlohmann::json> read_sidecar(const fs::path &raw_path) {
  const auto p = sidecar_path(raw_path);
  if (!fs::exists(p))
    return std::nullopt;
  std::ifstream in(p);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception &e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

} // namespace taskdn
