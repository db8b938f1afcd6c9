#ifndef LATENT3D_PREPROCESS_HPP
#define LATENT3D_PREPROCESS_HPP

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "latent3d/core_types.hpp"
#include "latent3d/io.hpp"

namespace latent3d::preprocess {

/// Value at percentile `pct` (0..100) of `values`, linear interpolation
/// between closest ranks.
inline double percentile(std::vector<double> values, double pct) {
  if (values.empty()) throw ValidationError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = pct / 100.0 * double(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - double(lo)) * (values[hi] - values[lo]);
}

/// clip(v, 0, P) / P with P the `clip_percentile` intensity over nonzero voxels.
inline Volume normalize_intensity(const Volume& v, double clip_percentile = 99.5) {
  if (!(clip_percentile > 50.0 && clip_percentile <= 100.0))
    throw ValidationError("clip_percentile must lie in (50, 100]");
  std::vector<double> nz;
  for (float x : v.data())
    if (x != 0.0f) nz.push_back(x);
  if (nz.empty()) throw ValidationError("cannot normalize an all-zero volume");
  const double p = percentile(std::move(nz), clip_percentile);
  if (!(p > 0.0)) throw ValidationError("clip intensity is not positive; volume has no positive signal");
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(std::clamp(double(v[i]), 0.0, p) / p);
  return Volume(v.shape(), std::move(out), v.spacing(), std::pair{0.0, 1.0});
}

/// Centre-aligned crop and/or zero pad to `target`.
inline Volume crop_or_pad(const Volume& v, const Dims3& target) {
  if (target[0] < 1 || target[1] < 1 || target[2] < 1) throw ValidationError("target shape must be >= 1");
  const Dims3& s = v.shape();
  std::array<std::size_t, 3> src0{}, dst0{}, len{};
  for (int a = 0; a < 3; ++a) {
    if (s[a] >= target[a]) {
      src0[a] = (s[a] - target[a]) / 2;
      len[a] = target[a];
    } else {
      dst0[a] = (target[a] - s[a]) / 2;
      len[a] = s[a];
    }
  }
  std::vector<float> out(voxel_count(target), 0.0f);
  for (std::size_t i = 0; i < len[0]; ++i)
    for (std::size_t j = 0; j < len[1]; ++j) {
      const float* src = v.data().data() + v.index(src0[0] + i, src0[1] + j, src0[2]);
      float* dst = out.data() + ((dst0[0] + i) * target[1] + dst0[1] + j) * target[2] + dst0[2];
      std::copy(src, src + len[2], dst);
    }
  auto range = v.intensity_range();
  range.first = std::min(range.first, 0.0);
  return Volume(target, std::move(out), v.spacing(), range);
}

// ---------------------------------------------------------------- external steps

enum class StepName { BiasCorrection, AffineHeadRegistration, SkullStrip, AffineBrainRegistration };

inline const std::vector<std::pair<StepName, std::string>>& step_names() {
  static const std::vector<std::pair<StepName, std::string>> names{
      {StepName::BiasCorrection, "bias_correction"},
      {StepName::AffineHeadRegistration, "affine_head_registration"},
      {StepName::SkullStrip, "skull_strip"},
      {StepName::AffineBrainRegistration, "affine_brain_registration"}};
  return names;
}

inline std::string to_string(StepName n) {
  for (const auto& [k, s] : step_names())
    if (k == n) return s;
  return "?";
}

inline StepName parse_step_name(const std::string& s) {
  for (const auto& [k, name] : step_names())
    if (name == s) return k;
  throw ValidationError("unknown preprocessing step '" + s +
                        "' (expected bias_correction, affine_head_registration, skull_strip or "
                        "affine_brain_registration)");
}

struct ExternalStepSpec {
  StepName name = StepName::BiasCorrection;
  std::string command_template;  // {in} and {out} are replaced by file paths
  double timeout_s = 600.0;
};

/// Append-only JSON-lines log of external step invocations.
class ProvenanceLog {
 public:
  ProvenanceLog() = default;
  explicit ProvenanceLog(fs::path path) : path_(std::move(path)) {}

  void record(nlohmann::json entry) {
    std::lock_guard lock(mu_);
    entries_.push_back(entry);
    if (!path_.empty()) {
      std::ofstream out(path_, std::ios::app);
      if (!out) throw IoError("cannot append to provenance log '" + path_.string() + "'");
      out << entry.dump() << '\n';
    }
  }
  std::vector<nlohmann::json> entries() const {
    std::lock_guard lock(mu_);
    return entries_;
  }

 private:
  fs::path path_;
  mutable std::mutex mu_;
  std::vector<nlohmann::json> entries_;
};

struct StepContext {
  fs::path scratch_dir;
  bool allow_identity = false;
  std::string subject_id;
  ProvenanceLog* log = nullptr;
};

inline fs::path default_scratch_dir() {
  if (const char* env = std::getenv("LATENT3D_SCRATCH"); env && *env) return env;
  return fs::temp_directory_path();
}

/// True when the first word of `command` names an executable, either as a
/// path or through PATH.
inline bool tool_available(const std::string& command) {
  const auto start = command.find_first_not_of(" \t");
  if (start == std::string::npos) return false;
  const std::string tool = command.substr(start, command.find_first_of(" \t", start) - start);
  if (tool.find('/') != std::string::npos) return ::access(tool.c_str(), X_OK) == 0;
  const char* path = std::getenv("PATH");
  if (!path) return false;
  std::string p(path);
  std::size_t pos = 0;
  while (pos <= p.size()) {
    const auto next = std::min(p.find(':', pos), p.size());
    const std::string dir = next > pos ? p.substr(pos, next - pos) : ".";
    if (::access((fs::path(dir) / tool).c_str(), X_OK) == 0) return true;
    pos = next + 1;
  }
  return false;
}

struct CommandResult {
  int exit_status = -1;
  bool timed_out = false;
  std::string output;
  double seconds = 0.0;
};

/// Runs `command` through /bin/sh, capturing stdout+stderr; the process group
/// is killed when `timeout_s` elapses.
inline CommandResult run_command(const std::string& command, double timeout_s) {
  int fds[2];
  if (::pipe(fds) != 0) throw RuntimeFailure("pipe() failed");
  const auto t0 = std::chrono::steady_clock::now();
  const pid_t pid = ::fork();
  if (pid < 0) throw RuntimeFailure("fork() failed");
  if (pid == 0) {
    ::setpgid(0, 0);
    ::dup2(fds[1], 1);
    ::dup2(fds[1], 2);
    ::close(fds[0]);
    ::close(fds[1]);
    ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(fds[1]);
  CommandResult r;
  char buf[4096];
  const auto deadline = t0 + std::chrono::duration<double>(timeout_s);
  for (;;) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) {
      r.timed_out = true;
      ::kill(-pid, SIGKILL);
      break;
    }
    pollfd pf{fds[0], POLLIN, 0};
    const int ready = ::poll(&pf, 1, static_cast<int>(std::min<long long>(left.count(), 1000)));
    if (ready <= 0) continue;
    const ssize_t n = ::read(fds[0], buf, sizeof buf);
    if (n <= 0) break;
    r.output.append(buf, static_cast<std::size_t>(n));
  }
  ::close(fds[0]);
  int status = 0;
  ::waitpid(pid, &status, 0);
  r.exit_status = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size()) s.replace(pos, from.size(), to);
  return s;
}

inline std::string shell_quote(const std::string& s) { return "'" + replace_all(s, "'", "'\\''") + "'"; }

/// Writes `v` to a scratch NIfTI file, runs the step's command on it and loads
/// the result.
inline Volume run_external_step(const Volume& v, const ExternalStepSpec& step, const StepContext& ctx = {}) {
  const std::string name = to_string(step.name);
  auto log = [&](nlohmann::json e) {
    e["subject_id"] = ctx.subject_id;
    e["step"] = name;
    if (ctx.log) ctx.log->record(std::move(e));
  };
  if (!tool_available(step.command_template)) {
    if (ctx.allow_identity) {
      log({{"duration_s", 0.0}, {"exit_status", nullptr}, {"warning", "tool unavailable; identity applied"}});
      return v;
    }
    throw ExternalStepError("step " + name + ": tool unavailable for command '" + step.command_template + "'", "");
  }
  static std::atomic<unsigned> counter{0};
  const fs::path dir = ctx.scratch_dir.empty() ? default_scratch_dir() : ctx.scratch_dir;
  ensure_dir(dir);
  const std::string stem = "latent3d_" + std::to_string(::getpid()) + "_" + std::to_string(counter++) + "_" + name;
  const fs::path in = dir / (stem + "_in.nii"), out = dir / (stem + "_out.nii");
  save_volume(v, in);
  const std::string cmd = replace_all(replace_all(step.command_template, "{in}", shell_quote(in.string())), "{out}",
                                      shell_quote(out.string()));
  const CommandResult r = run_command(cmd, step.timeout_s);
  std::error_code ec;
  fs::remove(in, ec);
  log({{"duration_s", r.seconds}, {"exit_status", r.exit_status}, {"timed_out", r.timed_out}});
  if (r.timed_out) {
    fs::remove(out, ec);
    throw ExternalStepError("step " + name + " timed out after " + std::to_string(step.timeout_s) + " s", r.output);
  }
  if (r.exit_status != 0) {
    fs::remove(out, ec);
    throw ExternalStepError("step " + name + " exited with status " + std::to_string(r.exit_status), r.output);
  }
  try {
    Volume result = load_volume(out);
    fs::remove(out, ec);
    return result;
  } catch (const std::exception& e) {
    fs::remove(out, ec);
    throw ExternalStepError("step " + name + " produced unreadable output: " + e.what(), r.output);
  }
}

// ---------------------------------------------------------------- pipeline

struct PreprocessConfig {
  double clip_percentile = 99.5;
  Dims3 target_shape{192, 192, 192};
  std::vector<ExternalStepSpec> external_steps;
  std::map<StepName, bool> enabled;  // steps absent from the map are disabled
  bool allow_identity = false;

  void validate() const {
    if (!(clip_percentile > 50.0 && clip_percentile <= 100.0))
      throw ValidationError("clip_percentile must lie in (50, 100]");
    if (target_shape[0] < 1 || target_shape[1] < 1 || target_shape[2] < 1)
      throw ValidationError("target_shape components must be >= 1");
    std::map<StepName, int> seen;
    for (const auto& s : external_steps) {
      if (seen[s.name]++) throw ValidationError("step " + to_string(s.name) + " listed twice");
      if (!(s.timeout_s > 0)) throw ValidationError("step timeouts must be positive");
    }
  }

  void check_model(const ModelConfig& m) const {
    if (target_shape != Dims3{m.input_edge, m.input_edge, m.input_edge})
      throw ValidationError("preprocess target " + dims_str(target_shape) + " does not match model input edge " +
                            std::to_string(m.input_edge));
  }

  bool is_enabled(StepName n) const {
    auto it = enabled.find(n);
    return it != enabled.end() && it->second;
  }
};

/// Enabled external steps in canonical order, then intensity normalisation,
/// then crop/pad to the target shape.
inline Volume preprocess_pipeline(const Volume& v, const PreprocessConfig& cfg, const StepContext& ctx = {}) {
  cfg.validate();
  Volume cur = v;
  for (const auto& [name, _] : step_names()) {
    if (!cfg.is_enabled(name)) continue;
    auto it = std::find_if(cfg.external_steps.begin(), cfg.external_steps.end(),
                           [&](const ExternalStepSpec& s) { return s.name == name; });
    if (it == cfg.external_steps.end())
      throw ValidationError("step " + to_string(name) + " is enabled but has no command");
    StepContext c = ctx;
    c.allow_identity = c.allow_identity || cfg.allow_identity;
    cur = run_external_step(cur, *it, c);
  }
  return crop_or_pad(normalize_intensity(cur, cfg.clip_percentile), cfg.target_shape);
}

}  // namespace latent3d::preprocess

#endif
