#ifndef LATENT3D_LATENT_STORE_HPP
#define LATENT3D_LATENT_STORE_HPP

// Persisted per-subject posterior parameters. A store directory holds
// index.json (config hash, latent shape, subject list), manifest.csv and one
// <subject>.lat file per subject: "L3DLAT01", 4 x u32 shape (h, w, d, c),
// then mu and log_var as float64, channel-last.

#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "latent3d/core_types.hpp"
#include "latent3d/io.hpp"

namespace latent3d {

inline constexpr char kLatentMagic[8] = {'L', '3', 'D', 'L', 'A', 'T', '0', '1'};

inline std::string encode_latent(const LatentDistribution& d) {
  const auto s = d.shape().as_array();
  const std::size_t n = d.shape().size();
  std::string out(8 + 16 + 16 * n, '\0');
  std::memcpy(out.data(), kLatentMagic, 8);
  for (int a = 0; a < 4; ++a) {
    const auto v = static_cast<std::uint32_t>(s[a]);
    std::memcpy(out.data() + 8 + 4 * a, &v, 4);
  }
  std::memcpy(out.data() + 24, d.mu().data(), 8 * n);
  std::memcpy(out.data() + 24 + 8 * n, d.log_var().data(), 8 * n);
  return out;
}

inline LatentDistribution decode_latent(const std::string& bytes, const std::string& name) {
  if (bytes.size() < 24 || std::memcmp(bytes.data(), kLatentMagic, 8) != 0)
    throw ValidationError("'" + name + "' is not a latent file");
  std::uint32_t s[4];
  std::memcpy(s, bytes.data() + 8, 16);
  const LatentShape shape{s[0], s[1], s[2], s[3]};
  const std::size_t n = shape.size();
  if (bytes.size() != 24 + 16 * n) throw ValidationError("'" + name + "': payload does not match shape");
  std::vector<double> mu(n), lv(n);
  std::memcpy(mu.data(), bytes.data() + 24, 8 * n);
  std::memcpy(lv.data(), bytes.data() + 24 + 8 * n, 8 * n);
  return LatentDistribution(shape, std::move(mu), std::move(lv));
}

class LatentStore {
 public:
  LatentStore() = default;

  /// In-memory store (no directory), e.g. for tests or derived features.
  LatentStore(Manifest manifest, std::string config_hash, LatentShape shape,
              std::map<std::string, LatentDistribution> entries)
      : manifest_(std::move(manifest)), hash_(std::move(config_hash)), shape_(shape), entries_(std::move(entries)) {
    for (const auto& [id, d] : entries_)
      if (!(d.shape() == shape_)) throw ShapeMismatch("latent for '" + id + "' has shape " + latent_shape_str(d.shape()));
  }

  static LatentStore open(const fs::path& dir) {
    const fs::path index_path = dir / "index.json";
    if (!fs::exists(index_path)) throw ValidationError("'" + dir.string() + "' is not a latent store (no index.json)");
    nlohmann::json idx;
    try {
      idx = nlohmann::json::parse(read_file(index_path));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("corrupt latent index: " + std::string(e.what()));
    }
    const auto s = idx.at("latent_shape").get<std::array<std::size_t, 4>>();
    const LatentShape shape{s[0], s[1], s[2], s[3]};
    std::map<std::string, LatentDistribution> entries;
    for (const auto& e : idx.at("subjects")) {
      const std::string id = e.at("subject_id");
      const fs::path p = dir / e.at("file").get<std::string>();
      entries.emplace(id, decode_latent(read_file(p), p.string()));
    }
    LatentStore st(parse_manifest(read_file(dir / "manifest.csv")), idx.at("config_hash"), shape, std::move(entries));
    st.dir_ = dir;
    return st;
  }

  /// Writes index.json, manifest.csv and latents/<id>.lat; identical inputs
  /// give identical bytes.
  void save(const fs::path& dir) const {
    ensure_dir(dir / "latents");
    nlohmann::json idx{{"format", "latent3d-store"},
                       {"version", 1},
                       {"config_hash", hash_},
                       {"latent_shape", shape_.as_array()},
                       {"subjects", nlohmann::json::array()}};
    for (const auto& r : manifest_.records) {
      auto it = entries_.find(r.subject_id);
      if (it == entries_.end()) continue;
      const std::string file = "latents/" + r.subject_id + ".lat";
      write_file_atomic(dir / file, encode_latent(it->second));
      idx["subjects"].push_back({{"subject_id", r.subject_id}, {"file", file}});
    }
    save_manifest(manifest_, dir / "manifest.csv");
    write_file_atomic(dir / "index.json", idx.dump(2) + "\n");
  }

  const Manifest& manifest() const { return manifest_; }
  const std::string& config_hash() const { return hash_; }
  const LatentShape& latent_shape() const { return shape_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(const std::string& id) const { return entries_.count(id) > 0; }
  const fs::path& directory() const { return dir_; }

  const LatentDistribution& get(const std::string& id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw ValidationError("subject '" + id + "' is not in the latent store");
    return it->second;
  }

 private:
  Manifest manifest_;
  std::string hash_;
  LatentShape shape_;
  std::map<std::string, LatentDistribution> entries_;
  fs::path dir_;
};

}  // namespace latent3d

#endif
