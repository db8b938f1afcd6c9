#ifndef LATENT3D_LATENT_ANALYSIS_HPP
#define LATENT3D_LATENT_ANALYSIS_HPP

#include <charconv>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "latent3d/io.hpp"
#include "latent3d/trainer.hpp"

namespace latent3d {

/// Principal axes of a set of row vectors. Each component's largest-magnitude
/// loading is positive, which makes projections reproducible.
struct PCAModel {
  std::vector<double> mean;
  std::vector<std::vector<double>> components;  // n_components x dim, orthonormal rows
  std::vector<double> explained_variance;       // non-increasing, sample (n-1) normalisation
  double total_variance = 0.0;
  std::string sign_convention = "max_abs_loading_positive";

  std::size_t dim() const { return mean.size(); }
  std::size_t n_components() const { return components.size(); }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PCAModel, mean, components, explained_variance, total_variance,
                                                sign_convention)

inline Eigen::MatrixXd rows_to_matrix(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw ValidationError("no samples");
  const std::size_t dim = rows.front().size();
  Eigen::MatrixXd x(rows.size(), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != dim) throw ShapeMismatch("samples have different lengths");
    for (std::size_t j = 0; j < dim; ++j) x(Eigen::Index(i), Eigen::Index(j)) = rows[i][j];
  }
  return x;
}

inline PCAModel fit_pca(const std::vector<std::vector<double>>& samples, std::size_t n_components) {
  if (samples.size() < 2) throw ValidationError("PCA needs at least two samples");
  Eigen::MatrixXd x = rows_to_matrix(samples);
  const auto n = x.rows();
  const auto dim = x.cols();
  if (n_components < 1 || n_components > std::min<std::size_t>(std::size_t(n) - 1, std::size_t(dim)))
    throw ValidationError("n_components must be in [1, min(n_samples-1, dim)] = [1, " +
                          std::to_string(std::min<std::size_t>(std::size_t(n) - 1, std::size_t(dim))) + "]");
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const double total = x.squaredNorm() / double(n - 1);
  if (!(total > 0.0)) throw ValidationError("PCA input is degenerate: all samples are identical");

  Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  const auto& v = svd.matrixV();
  PCAModel m;
  m.mean.assign(mu.data(), mu.data() + dim);
  m.total_variance = total;
  for (std::size_t c = 0; c < n_components; ++c) {
    Eigen::VectorXd col = v.col(Eigen::Index(c));
    Eigen::Index arg = 0;
    col.cwiseAbs().maxCoeff(&arg);
    if (col(arg) < 0) col = -col;
    m.components.emplace_back(col.data(), col.data() + dim);
    const double sv = c < std::size_t(s.size()) ? s(Eigen::Index(c)) : 0.0;
    m.explained_variance.push_back(sv * sv / double(n - 1));
  }
  return m;
}

/// (x - mean) · componentsᵀ for each row.
inline std::vector<std::vector<double>> project(const PCAModel& m, const std::vector<std::vector<double>>& rows) {
  std::vector<std::vector<double>> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    if (r.size() != m.dim())
      throw ShapeMismatch("projection input has length " + std::to_string(r.size()) + ", model expects " +
                          std::to_string(m.dim()));
    std::vector<double> c(m.n_components(), 0.0);
    for (std::size_t k = 0; k < c.size(); ++k)
      for (std::size_t j = 0; j < r.size(); ++j) c[k] += (r[j] - m.mean[j]) * m.components[k][j];
    out.push_back(std::move(c));
  }
  return out;
}

/// mean + coords · components.
inline std::vector<double> reconstruct(const PCAModel& m, const std::vector<double>& coords) {
  if (coords.size() != m.n_components()) throw ShapeMismatch("coordinate count does not match the model");
  std::vector<double> x = m.mean;
  for (std::size_t k = 0; k < coords.size(); ++k)
    for (std::size_t j = 0; j < x.size(); ++j) x[j] += coords[k] * m.components[k][j];
  return x;
}

inline void save_pca(const PCAModel& m, const fs::path& path) { write_file_atomic(path, nlohmann::json(m).dump() + "\n"); }

inline PCAModel load_pca(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_file(path)).get<PCAModel>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("'" + path.string() + "': not a PCA model: " + e.what());
  }
}

// ---------------------------------------------------------------- scatter export

/// Shortest round-trip decimal form, independent of locale.
inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct ScatterPoint {
  std::string subject_id;
  double pc1 = 0.0;
  double pc2 = 0.0;
  std::string group;
};

inline std::string scatter_csv(const std::vector<ScatterPoint>& pts) {
  std::string out = "subject_id,pc1,pc2,group\n";
  for (const auto& p : pts)
    out += p.subject_id + "," + format_double(p.pc1) + "," + format_double(p.pc2) + "," + p.group + "\n";
  return out;
}

/// Static SVG scatter, one colour per group in first-appearance order.
inline std::string scatter_svg(const std::vector<ScatterPoint>& pts, const std::string& title = "Latent PCA") {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  const double W = 640, H = 520, L = 70, R = 150, T = 50, B = 60;
  double x0 = pts.front().pc1, x1 = x0, y0 = pts.front().pc2, y1 = y0;
  for (const auto& p : pts) {
    x0 = std::min(x0, p.pc1);
    x1 = std::max(x1, p.pc1);
    y0 = std::min(y0, p.pc2);
    y1 = std::max(y1, p.pc2);
  }
  const double px = (x1 - x0) > 0 ? 0.05 * (x1 - x0) : 1.0, py = (y1 - y0) > 0 ? 0.05 * (y1 - y0) : 1.0;
  x0 -= px, x1 += px, y0 -= py, y1 += py;
  auto sx = [&](double v) { return L + (v - x0) / (x1 - x0) * (W - L - R); };
  auto sy = [&](double v) { return H - B - (v - y0) / (y1 - y0) * (H - T - B); };
  auto f = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.2f", v);
    return std::string(b);
  };
  std::vector<std::string> groups;
  std::map<std::string, std::size_t> colour;
  for (const auto& p : pts)
    if (colour.emplace(p.group, groups.size()).second) groups.push_back(p.group);

  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + f(W) + "\" height=\"" + f(H) + "\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + f(W / 2) + "\" y=\"28\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" + title + "</text>\n";
  s += "<rect x=\"" + f(L) + "\" y=\"" + f(T) + "\" width=\"" + f(W - L - R) + "\" height=\"" + f(H - T - B) +
       "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double vx = x0 + (x1 - x0) * t / 4.0, vy = y0 + (y1 - y0) * t / 4.0;
    char bx[32], by[32];
    std::snprintf(bx, sizeof bx, "%.3g", vx);
    std::snprintf(by, sizeof by, "%.3g", vy);
    s += "<text x=\"" + f(sx(vx)) + "\" y=\"" + f(H - B + 18) + "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + bx + "</text>\n";
    s += "<text x=\"" + f(L - 6) + "\" y=\"" + f(sy(vy) + 4) + "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + by + "</text>\n";
  }
  s += "<text x=\"" + f((L + W - R) / 2) + "\" y=\"" + f(H - 18) + "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">PC1</text>\n";
  s += "<text x=\"18\" y=\"" + f((T + H - B) / 2) + "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 18 " +
       f((T + H - B) / 2) + ")\">PC2</text>\n";
  for (const auto& p : pts)
    s += "<circle cx=\"" + f(sx(p.pc1)) + "\" cy=\"" + f(sy(p.pc2)) + "\" r=\"4\" fill=\"" + palette[colour[p.group] % 8] +
         "\" fill-opacity=\"0.8\"/>\n";
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double y = T + 12 + 20.0 * double(g);
    s += "<circle cx=\"" + f(W - R + 20) + "\" cy=\"" + f(y) + "\" r=\"5\" fill=\"" + palette[g % 8] + "\"/>\n";
    s += "<text x=\"" + f(W - R + 32) + "\" y=\"" + f(y + 4) + "\" font-family=\"sans-serif\" font-size=\"12\">" + groups[g] + "</text>\n";
  }
  return s + "</svg>\n";
}

/// Writes <stem>.csv and <stem>.svg; `path` may name either or neither
/// extension.
inline void export_scatter(const std::vector<std::vector<double>>& coords, const std::vector<std::string>& ids,
                           const std::vector<std::string>& groups, const fs::path& path) {
  if (coords.empty()) throw ValidationError("export_scatter: no points");
  if (coords.size() != ids.size() || coords.size() != groups.size())
    throw ValidationError("export_scatter: coordinates, ids and groups differ in length");
  std::vector<ScatterPoint> pts;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    if (coords[i].size() < 2) throw ValidationError("export_scatter: need two coordinates per point");
    pts.push_back({ids[i], coords[i][0], coords[i][1], groups[i]});
  }
  fs::path stem = path;
  if (stem.extension() == ".csv" || stem.extension() == ".svg") stem.replace_extension();
  if (stem.has_parent_path()) ensure_dir(stem.parent_path());
  write_file_atomic(fs::path(stem.string() + ".csv"), scatter_csv(pts));
  write_file_atomic(fs::path(stem.string() + ".svg"), scatter_svg(pts));
}

// ---------------------------------------------------------------- classification on projections

/// Cross-validation where each fold fits PCA on its own training rows and
/// projects both splits, so test subjects never shape the projection.
inline CVReport classify_on_projection(const std::vector<std::vector<double>>& rows, const TaskDataset& d,
                                       const FoldPlan& plan, std::size_t n_components, const ClassifierTrainConfig& cfg,
                                       std::size_t jobs = 1) {
  if (rows.size() != d.size()) throw ValidationError("classify_on_projection: one feature row per dataset entry expected");
  if (cfg.sample_z) throw ValidationError("classify_on_projection: sampled z is not supported on projected features");
  auto feats = [&](const Fold& f) {
    std::vector<std::vector<double>> tr, te;
    for (auto i : f.train) tr.push_back(rows[i]);
    for (auto i : f.test) te.push_back(rows[i]);
    const auto pca = fit_pca(tr, n_components);
    return FoldFeatures{project(pca, tr), project(pca, te), f.train_ids};
  };
  auto rep = run_cv_features(d, plan, feats, cfg, jobs);
  rep.features = "pca" + std::to_string(n_components);
  rep.config["pca_components"] = n_components;
  return rep;
}

inline CVReport classify_on_projection(const LatentStore& store, const TaskSpec& task, std::size_t k,
                                       std::uint64_t fold_seed, std::size_t n_components,
                                       const ClassifierTrainConfig& cfg, std::size_t jobs = 1) {
  const auto d = filter_task(store.manifest(), task);
  auto rep = classify_on_projection(latent_features(store, d.ids), d, kfold_split(d, k, fold_seed), n_components, cfg, jobs);
  rep.config["latent_config_hash"] = store.config_hash();
  rep.config["latent_shape"] = latent_shape_str(store.latent_shape());
  rep.config["k"] = k;
  return rep;
}

}  // namespace latent3d

#endif
