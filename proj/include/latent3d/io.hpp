#ifndef LATENT3D_IO_HPP
#define LATENT3D_IO_HPP

// Volume files (NIfTI-1 and the raw VOL3DRAW format), manifest CSV, and a few
// small file helpers shared by the rest of the library.

#include <zlib.h>

#include <atomic>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "latent3d/core_types.hpp"
#include "latent3d/errors.hpp"

namespace latent3d {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "raw and NIfTI writers assume a little-endian host");

// ---------------------------------------------------------------- files

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes through a sibling temp file and renames it into place, so readers
/// never observe a half-written file.
inline void write_file_atomic(const fs::path& path, std::string_view bytes) {
  static std::atomic<unsigned> counter{0};
  const fs::path tmp = path.string() + ".tmp" + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write to '" + path.string() + "' failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move temp file into '" + path.string() + "'");
  }
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory '" + dir.string() + "'");
}

inline bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

// ---------------------------------------------------------------- raw format

inline constexpr char kRawMagic[8] = {'V', 'O', 'L', '3', 'D', 'R', 'A', 'W'};

inline std::string encode_raw(const Volume& v) {
  std::string out(8 + 12 + 4 * v.size(), '\0');
  std::memcpy(out.data(), kRawMagic, 8);
  for (int a = 0; a < 3; ++a) {
    const auto e = static_cast<std::uint32_t>(v.shape()[a]);
    std::memcpy(out.data() + 8 + 4 * a, &e, 4);
  }
  std::memcpy(out.data() + 20, v.data().data(), 4 * v.size());
  return out;
}

inline Volume decode_raw(const std::string& bytes, const std::string& name) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kRawMagic, 8) != 0)
    throw ValidationError("'" + name + "': unreadable header (not a VOL3DRAW file)");
  std::uint32_t e[3];
  std::memcpy(e, bytes.data() + 8, 12);
  const Dims3 shape{e[0], e[1], e[2]};
  if (bytes.size() != 20 + 4 * voxel_count(shape))
    throw ValidationError("'" + name + "': payload size does not match header shape " + dims_str(shape));
  std::vector<float> data(voxel_count(shape));
  std::memcpy(data.data(), bytes.data() + 20, 4 * data.size());
  return Volume(shape, std::move(data));
}

// ---------------------------------------------------------------- NIfTI-1

namespace nifti {

#pragma pack(push, 1)
struct Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Header) == 348);

template <typename I>
I bswap(I v) {
  auto* p = reinterpret_cast<unsigned char*>(&v);
  std::reverse(p, p + sizeof(I));
  return v;
}

inline void swap_header(Header& h) {
  h.sizeof_hdr = bswap(h.sizeof_hdr);
  for (auto& d : h.dim) d = bswap(d);
  h.datatype = bswap(h.datatype);
  h.bitpix = bswap(h.bitpix);
  for (auto& p : h.pixdim) p = bswap(p);
  h.vox_offset = bswap(h.vox_offset);
  h.scl_slope = bswap(h.scl_slope);
  h.scl_inter = bswap(h.scl_inter);
}

inline std::string gz_read_all(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw IoError("cannot open '" + path.string() + "' for reading");
  std::string out;
  char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.append(buf, static_cast<std::size_t>(n));
  const bool bad = n < 0;
  gzclose(f);
  if (bad) throw ValidationError("'" + path.string() + "': corrupt compressed stream");
  return out;
}

template <typename S>
void convert(const char* src, std::size_t n, bool swap, std::vector<float>& dst) {
  for (std::size_t i = 0; i < n; ++i) {
    S v;
    std::memcpy(&v, src + i * sizeof(S), sizeof(S));
    if (swap) v = bswap(v);
    dst[i] = static_cast<float>(v);
  }
}

inline Volume load(const fs::path& path) {
  const std::string bytes = ends_with(path.string(), ".gz") ? gz_read_all(path) : read_file(path);
  const std::string name = path.string();
  if (bytes.size() < sizeof(Header)) throw ValidationError("'" + name + "': unreadable header (file too short)");
  Header h;
  std::memcpy(&h, bytes.data(), sizeof h);
  bool swap = false;
  if (h.sizeof_hdr != 348) {
    if (bswap(h.sizeof_hdr) != 348) throw ValidationError("'" + name + "': unreadable header (bad sizeof_hdr)");
    swap = true;
    swap_header(h);
  }
  if (std::memcmp(h.magic, "n+1", 4) != 0 && std::memcmp(h.magic, "ni1", 4) != 0)
    throw ValidationError("'" + name + "': unreadable header (bad magic)");
  if (std::memcmp(h.magic, "ni1", 4) == 0)
    throw ValidationError("'" + name + "': split header/image pairs are not supported");

  // Trailing singleton dimensions are tolerated; anything else is not a volume.
  const int nd = h.dim[0];
  if (nd < 1 || nd > 7) throw ValidationError("'" + name + "': unreadable header (dim[0] out of range)");
  int effective = nd;
  while (effective > 3 && h.dim[effective] == 1) --effective;
  if (effective != 3 || h.dim[1] < 1 || h.dim[2] < 1 || h.dim[3] < 1)
    throw ValidationError("'" + name + "': non-3D payload");
  const std::size_t nx = h.dim[1], ny = h.dim[2], nz = h.dim[3], n = nx * ny * nz;

  const auto offset = static_cast<std::size_t>(h.vox_offset);
  const std::size_t bytes_per = static_cast<std::size_t>(h.bitpix) / 8;
  if (bytes_per == 0 || offset + n * bytes_per > bytes.size())
    throw ValidationError("'" + name + "': payload shorter than header declares");
  std::vector<float> flat(n);
  const char* src = bytes.data() + offset;
  switch (h.datatype) {
    case 2: convert<std::uint8_t>(src, n, swap, flat); break;
    case 4: convert<std::int16_t>(src, n, swap, flat); break;
    case 8: convert<std::int32_t>(src, n, swap, flat); break;
    case 16: convert<float>(src, n, swap, flat); break;
    case 64: convert<double>(src, n, swap, flat); break;
    case 256: convert<std::int8_t>(src, n, swap, flat); break;
    case 512: convert<std::uint16_t>(src, n, swap, flat); break;
    case 768: convert<std::uint32_t>(src, n, swap, flat); break;
    default: throw ValidationError("'" + name + "': unsupported NIfTI datatype " + std::to_string(h.datatype));
  }
  if (h.scl_slope != 0.0f && std::isfinite(h.scl_slope) && (h.scl_slope != 1.0f || h.scl_inter != 0.0f))
    for (auto& v : flat) v = v * h.scl_slope + h.scl_inter;

  // NIfTI stores x fastest; volumes keep the last axis fastest.
  std::vector<float> data(n);
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx; ++x) data[(x * ny + y) * nz + z] = flat[x + nx * (y + ny * z)];
  Spacing sp{h.pixdim[1] > 0 ? h.pixdim[1] : 1.0, h.pixdim[2] > 0 ? h.pixdim[2] : 1.0,
             h.pixdim[3] > 0 ? h.pixdim[3] : 1.0};
  return Volume({nx, ny, nz}, std::move(data), sp);
}

inline std::string encode(const Volume& v) {
  Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  for (int a = 0; a < 3; ++a) {
    if (v.shape()[a] > 32767) throw ValidationError("volume too large for NIfTI-1");
    h.dim[a + 1] = static_cast<std::int16_t>(v.shape()[a]);
  }
  for (int a = 4; a < 8; ++a) h.dim[a] = 1;
  h.datatype = 16;
  h.bitpix = 32;
  h.pixdim[0] = 1.0f;
  h.pixdim[1] = static_cast<float>(v.spacing().x);
  h.pixdim[2] = static_cast<float>(v.spacing().y);
  h.pixdim[3] = static_cast<float>(v.spacing().z);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2;  // mm
  h.sform_code = 0;
  h.qform_code = 0;
  std::memcpy(h.magic, "n+1", 4);

  const auto [nx, ny, nz] = v.shape();
  std::string out(352 + 4 * v.size(), '\0');
  std::memcpy(out.data(), &h, sizeof h);
  float* dst = reinterpret_cast<float*>(out.data() + 352);
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx; ++x) dst[x + nx * (y + ny * z)] = v.at(x, y, z);
  return out;
}

inline void save(const Volume& v, const fs::path& path) {
  const std::string bytes = encode(v);
  if (!ends_with(path.string(), ".gz")) return write_file_atomic(path, bytes);
  const fs::path tmp = path.string() + ".tmpgz";
  gzFile f = gzopen(tmp.string().c_str(), "wb6");
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  const bool ok = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size())) == static_cast<int>(bytes.size());
  if (gzclose(f) != Z_OK || !ok) throw IoError("write to '" + path.string() + "' failed");
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move temp file into '" + path.string() + "'");
}

}  // namespace nifti

inline bool is_nifti_path(const fs::path& p) {
  const std::string s = p.string();
  return ends_with(s, ".nii") || ends_with(s, ".nii.gz");
}

/// Loads a NIfTI-1 (.nii / .nii.gz) or raw volume; the format is chosen by
/// extension.
inline Volume load_volume(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing file '" + path.string() + "'");
  if (is_nifti_path(path)) return nifti::load(path);
  return decode_raw(read_file(path), path.string());
}

inline void save_volume(const Volume& v, const fs::path& path) {
  if (is_nifti_path(path)) return nifti::save(v, path);
  write_file_atomic(path, encode_raw(v));
}

// ---------------------------------------------------------------- CSV

/// Splits one CSV line; supports double-quoted fields with "" escapes.
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else if (c != '\r') {
      out.back() += c;
    }
  }
  if (quoted) throw ValidationError("unterminated quote in CSV line");
  return out;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

// ---------------------------------------------------------------- manifest

inline const std::vector<std::string>& manifest_columns() {
  static const std::vector<std::string> cols{"subject_id", "volume_path", "group",
                                             "ad_label",   "id_label",    "source_dataset"};
  return cols;
}

inline Manifest parse_manifest(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("manifest is empty (header required)");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = split_csv_line(line);
  std::vector<int> col(manifest_columns().size(), -1);
  for (std::size_t c = 0; c < header.size(); ++c)
    for (std::size_t k = 0; k < col.size(); ++k)
      if (header[c] == manifest_columns()[k]) col[k] = static_cast<int>(c);
  for (std::size_t k = 0; k < col.size(); ++k)
    if (col[k] < 0) throw ValidationError("manifest header lacks column '" + manifest_columns()[k] + "'");

  Manifest m;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size())
      throw ValidationError("malformed manifest row " + std::to_string(lineno) + ": expected " +
                            std::to_string(header.size()) + " fields, got " + std::to_string(f.size()));
    try {
      SubjectRecord r;
      r.subject_id = f[col[0]];
      r.volume_path = f[col[1]];
      r.group = parse_group(f[col[2]]);
      r.ad_label = parse_ad_label(f[col[3]]);
      r.id_label = parse_id_label(f[col[4]]);
      r.source_dataset = f[col[5]];
      r.validate();
      m.records.push_back(std::move(r));
    } catch (const ValidationError& e) {
      throw ValidationError("manifest row " + std::to_string(lineno) + ": " + e.what());
    }
  }
  m.validate();
  return m;
}

inline std::string format_manifest(const Manifest& m) {
  std::string out;
  for (std::size_t k = 0; k < manifest_columns().size(); ++k) out += (k ? "," : "") + manifest_columns()[k];
  out += '\n';
  for (const auto& r : m.records) {
    out += csv_field(r.subject_id) + ',' + csv_field(r.volume_path) + ',' + to_string(r.group) + ',' +
           (r.ad_label == AdLabel::Missing ? "NA" : to_string(r.ad_label)) + ',' +
           (r.id_label == IdLabel::Missing ? "NA" : to_string(r.id_label)) + ',' + csv_field(r.source_dataset) +
           '\n';
  }
  return out;
}

/// Relative volume paths are resolved against the manifest's directory.
inline fs::path resolve_volume_path(const SubjectRecord& r, const fs::path& manifest_dir) {
  const fs::path p(r.volume_path);
  return p.is_absolute() ? p : manifest_dir / p;
}

/// Loads and validates a manifest. With `check_paths`, every volume must
/// exist; all missing ones are listed in the error.
inline Manifest load_manifest(const fs::path& path, bool check_paths = true) {
  Manifest m = parse_manifest(read_file(path));
  if (check_paths) {
    std::string missing;
    std::size_t count = 0;
    for (const auto& r : m.records)
      if (!fs::exists(resolve_volume_path(r, path.parent_path()))) {
        if (count++ < 10) missing += " " + r.subject_id + " (" + r.volume_path + ")";
      }
    if (count)
      throw ValidationError("manifest '" + path.string() + "': " + std::to_string(count) +
                            " volume path(s) not found:" + missing);
  }
  return m;
}

inline void save_manifest(const Manifest& m, const fs::path& path) {
  m.validate();
  write_file_atomic(path, format_manifest(m));
}

}  // namespace latent3d

#endif
