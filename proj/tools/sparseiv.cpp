// sparseiv: instrumental-variables estimation with very many instruments.
//
// Subcommands:
//   fit       first-stage selection + IV estimation from a CSV and a roles file
//   region    weak-identification-robust confidence region by grid inversion
//   simulate  replication study driver with CSV/JSON tables
//
// Exit codes: 0 success, 2 usage/validation, 3 numerical failure.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sparseiv.hpp"

using nlohmann::json;
using namespace sparseiv;

namespace {

json finite_or_null(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

json vector_to_json(const Vec& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(finite_or_null(v[i]));
  return arr;
}

json matrix_to_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(finite_or_null(m(i, j)));
    rows.push_back(row);
  }
  return rows;
}

struct RolesManifest {
  std::string outcome;
  std::vector<std::string> endogenous;
  std::vector<std::string> exogenous;
  std::vector<std::string> controls;
  std::vector<std::string> instruments;  // resolved from list or pattern
};

std::vector<std::string> string_list(const json& j, const std::string& where) {
  if (!j.is_array()) throw ValidationError("roles: '" + where + "' must be a list");
  std::vector<std::string> out;
  for (const auto& item : j) {
    if (!item.is_string()) throw ValidationError("roles: '" + where + "' entries must be strings");
    out.push_back(item.get<std::string>());
  }
  return out;
}

bool glob_match(const std::string& pattern, const std::string& name) {
  // '*' wildcard only
  std::size_t pi = 0, ni = 0, star = std::string::npos, mark = 0;
  while (ni < name.size()) {
    if (pi < pattern.size() && (pattern[pi] == name[ni])) {
      ++pi;
      ++ni;
    } else if (pi < pattern.size() && pattern[pi] == '*') {
      star = pi++;
      mark = ni;
    } else if (star != std::string::npos) {
      pi = star + 1;
      ni = ++mark;
    } else {
      return false;
    }
  }
  while (pi < pattern.size() && pattern[pi] == '*') ++pi;
  return pi == pattern.size();
}

RolesManifest parse_roles(const std::string& path, const CsvTable& table) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open roles file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("roles: invalid JSON in " + path + ": " + e.what());
  }
  RolesManifest roles;
  if (!j.contains("outcome") || !j["outcome"].is_string())
    throw ValidationError("roles: missing string field 'outcome'");
  roles.outcome = j["outcome"].get<std::string>();
  if (!j.contains("endogenous")) throw ValidationError("roles: missing field 'endogenous'");
  roles.endogenous = string_list(j["endogenous"], "endogenous");
  if (j.contains("exogenous")) roles.exogenous = string_list(j["exogenous"], "exogenous");
  if (j.contains("controls")) roles.controls = string_list(j["controls"], "controls");
  if (!j.contains("instruments")) throw ValidationError("roles: missing field 'instruments'");

  std::vector<std::string> taken{roles.outcome};
  taken.insert(taken.end(), roles.endogenous.begin(), roles.endogenous.end());
  taken.insert(taken.end(), roles.exogenous.begin(), roles.exogenous.end());
  taken.insert(taken.end(), roles.controls.begin(), roles.controls.end());

  if (j["instruments"].is_string()) {
    // pattern: match the remaining columns
    const std::string pattern = j["instruments"].get<std::string>();
    for (const auto& name : table.header) {
      if (std::find(taken.begin(), taken.end(), name) != taken.end()) continue;
      if (glob_match(pattern, name)) roles.instruments.push_back(name);
    }
    if (roles.instruments.empty())
      throw ValidationError("roles: instrument pattern '" + pattern + "' matches no column");
  } else {
    roles.instruments = string_list(j["instruments"], "instruments");
  }

  // every referenced column must exist
  auto require_column = [&](const std::string& name, const std::string& role) {
    if (table.column(name) < 0)
      throw ValidationError("roles: column '" + name + "' (" + role + ") not in CSV header");
  };
  require_column(roles.outcome, "outcome");
  for (const auto& c : roles.endogenous) require_column(c, "endogenous");
  for (const auto& c : roles.exogenous) require_column(c, "exogenous");
  for (const auto& c : roles.controls) require_column(c, "controls");
  for (const auto& c : roles.instruments) require_column(c, "instruments");

  // disjointness across all role sets
  std::vector<std::string> all{roles.outcome};
  for (const auto* set : {&roles.endogenous, &roles.exogenous, &roles.controls, &roles.instruments}) {
    for (const auto& c : *set) all.push_back(c);
  }
  std::vector<std::string> sorted = all;
  std::sort(sorted.begin(), sorted.end());
  const auto dup = std::adjacent_find(sorted.begin(), sorted.end());
  if (dup != sorted.end())
    throw ValidationError("roles: column '" + *dup + "' appears in more than one role");
  if (roles.endogenous.empty()) throw ValidationError("roles: need at least one endogenous column");
  return roles;
}

Dataset build_dataset(const CsvTable& table, const RolesManifest& roles) {
  Dataset data;
  const Eigen::Index n = table.values.rows();
  auto col = [&](const std::string& name) { return table.values.col(table.column(name)); };
  data.y = col(roles.outcome);
  data.d_endo.resize(n, static_cast<Eigen::Index>(roles.endogenous.size()));
  for (std::size_t i = 0; i < roles.endogenous.size(); ++i) {
    data.d_endo.col(static_cast<Eigen::Index>(i)) = col(roles.endogenous[i]);
    data.d_labels.push_back(roles.endogenous[i]);
  }
  const std::size_t kw = roles.exogenous.size() + roles.controls.size();
  data.w.resize(n, static_cast<Eigen::Index>(kw));
  Eigen::Index wj = 0;
  for (const auto& name : roles.exogenous) {
    data.w.col(wj++) = col(name);
    data.w_labels.push_back(name);
  }
  for (const auto& name : roles.controls) {
    data.w.col(wj++) = col(name);
    data.w_labels.push_back(name);
  }
  data.f.resize(n, static_cast<Eigen::Index>(roles.instruments.size()));
  for (std::size_t i = 0; i < roles.instruments.size(); ++i) {
    data.f.col(static_cast<Eigen::Index>(i)) = col(roles.instruments[i]);
    data.f_labels.push_back(roles.instruments[i]);
  }
  data.validate();
  return data;
}

struct GridSpec {
  double lo = 0.0, hi = 0.0, step = 0.0;
};

GridSpec parse_grid(const std::string& text) {
  GridSpec g;
  const auto c1 = text.find(':');
  const auto c2 = text.find(':', c1 == std::string::npos ? c1 : c1 + 1);
  if (c1 == std::string::npos || c2 == std::string::npos)
    throw ValidationError("grid: expected lo:hi:step, got '" + text + "'");
  try {
    g.lo = std::stod(text.substr(0, c1));
    g.hi = std::stod(text.substr(c1 + 1, c2 - c1 - 1));
    g.step = std::stod(text.substr(c2 + 1));
  } catch (const std::exception&) {
    throw ValidationError("grid: expected lo:hi:step, got '" + text + "'");
  }
  if (!(g.step > 0.0) || g.hi < g.lo)
    throw ValidationError("grid: need lo <= hi and step > 0 in '" + text + "'");
  return g;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open output file: " + path);
  out << content;
}

std::string with_extension(const std::string& path, const std::string& ext) {
  const auto slash = path.find_last_of('/');
  const auto dot = path.find_last_of('.');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) {
    return path + ext;
  }
  return path.substr(0, dot) + ext;
}

json region_to_json(const ConfidenceRegion& region,
                    const std::vector<int>& dropped,
                    const std::vector<std::string>& f_labels) {
  json out;
  out["critical_value"] = region.critical;
  out["level"] = region.level;
  out["touches_grid_boundary"] = region.touches_grid_boundary;
  json pts = json::array();
  json accepted = json::array();
  for (const auto& pt : region.points) {
    json p;
    p["a"] = pt.a.size() == 1 ? json(pt.a[0]) : vector_to_json(pt.a);
    p["sup_score"] = finite_or_null(pt.stat);
    p["accepted"] = pt.accepted;
    p["near_boundary"] = pt.near_boundary;
    pts.push_back(p);
    if (pt.accepted) accepted.push_back(p["a"]);
  }
  out["points"] = pts;
  out["accepted"] = accepted;
  json drops = json::array();
  for (int j : dropped) {
    drops.push_back(j < static_cast<int>(f_labels.size()) ? json(f_labels[static_cast<std::size_t>(j)])
                                                          : json(j));
  }
  out["dropped_instruments"] = drops;
  return out;
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

struct FitArgs {
  std::string data_path, roles_path, out_path;
  std::string method = "post-lasso";
  double c = 1.1;
  std::string gamma = "auto";
  int iterations = 15;
  std::string vcov = "hetero";
  bool split_sample = false;
  std::uint64_t seed = 0;
  bool diagnostics = false;
  int re_s = 5;
  bool spec_test = false;
  std::string baseline_cols;
  std::string restrict_rows;  // --R
  std::string grid;           // optional region grid for the weak route
};

int run_fit(const FitArgs& args) {
  const CsvTable table = parse_csv_file(args.data_path);
  const RolesManifest roles = parse_roles(args.roles_path, table);
  const Dataset data = build_dataset(table, roles);

  FirstStageConfig cfg;
  cfg.c = args.c;
  if (args.gamma != "auto") cfg.gamma = std::stod(args.gamma);
  cfg.max_loading_iters = args.iterations;
  if (args.method == "lasso") {
    cfg.method = FirstStageMethod::lasso;
  } else if (args.method == "post-lasso") {
    cfg.method = FirstStageMethod::post_lasso;
  } else {
    throw ValidationError("--method must be 'lasso' or 'post-lasso'");
  }
  const VcovMode mode = [&] {
    if (args.vcov == "hetero") return VcovMode::hetero;
    if (args.vcov == "homo") return VcovMode::homo;
    throw ValidationError("--vcov must be 'hetero' or 'homo'");
  }();

  const FirstStageFit fs = fit_first_stage(data, cfg);
  const Mat dmat = data.d();

  json report;
  report["schema"] = "sparseiv.report.v1";
  report["command"] = "fit";
  report["defaults"] = {{"c", cfg.c},
                        {"gamma", fs.gamma_used},
                        {"gamma_mode", args.gamma},
                        {"iterations", cfg.max_loading_iters},
                        {"method", args.method},
                        {"vcov", args.vcov}};

  // first-stage block
  json fs_json;
  fs_json["lambda"] = fs.lambda;
  fs_json["gamma"] = fs.gamma_used;
  fs_json["c"] = fs.c;
  fs_json["method"] = args.method;
  {
    json drops = json::array();
    for (int jx : fs.dropped_instruments) drops.push_back(data.f_labels[static_cast<std::size_t>(jx)]);
    fs_json["dropped_instruments"] = drops;
  }
  json eqs = json::array();
  for (Eigen::Index l = 0; l < data.k_e(); ++l) {
    const auto& eq = fs.equations[static_cast<std::size_t>(l)];
    json e;
    e["endogenous"] = data.d_labels[static_cast<std::size_t>(l)];
    json sel = json::array();
    for (int jx : eq.support) {
      sel.push_back(data.f_labels[static_cast<std::size_t>(fs.kept_instruments[static_cast<std::size_t>(jx)])]);
    }
    e["selected"] = sel;
    e["selected_count"] = eq.support.size();
    e["loading_iterations"] = eq.iterations;
    e["empty_selection"] = eq.empty_selection;
    e["fallback_instrument"] =
        eq.fallback_index.has_value()
            ? json(data.f_labels[static_cast<std::size_t>(
                  fs.kept_instruments[static_cast<std::size_t>(*eq.fallback_index)])])
            : json(nullptr);
    // first-stage strength on the selected (or fallback) columns
    if (!eq.support.empty()) {
      Mat z(data.n(), static_cast<Eigen::Index>(eq.support.size()));
      Vec pi(static_cast<Eigen::Index>(eq.support.size()));
      for (std::size_t i = 0; i < eq.support.size(); ++i) {
        const int orig = fs.kept_instruments[static_cast<std::size_t>(eq.support[i])];
        z.col(static_cast<Eigen::Index>(i)) =
            data.f.col(orig).array() - data.f.col(orig).mean();
        pi[static_cast<Eigen::Index>(i)] = eq.beta[eq.support[i]];
      }
      const Vec resid = data.d_endo.col(l) - fs.dhat.col(l);
      const double s2 = resid.squaredNorm() / static_cast<double>(data.n());
      if (s2 > 0.0) {
        const auto w = first_stage_wald(pi, z, s2);
        e["wald"] = finite_or_null(w.wald);
        e["f_stat"] = finite_or_null(w.f);
      } else {
        e["wald"] = nullptr;
        e["f_stat"] = nullptr;
      }
    } else {
      e["wald"] = nullptr;
      e["f_stat"] = nullptr;
    }
    eqs.push_back(e);
  }
  fs_json["equations"] = eqs;
  report["first_stage"] = fs_json;

  // routing: standard IV or the weak-identification route
  bool weak_route = fs.any_empty_selection;
  if (!weak_route) {
    const Mat q = (fs.dhat.transpose() * fs.dhat) / static_cast<double>(data.n());
    Eigen::JacobiSVD<Mat> svd(q);
    const auto& sv = svd.singularValues();
    if (sv[sv.size() - 1] <= 0.0 || sv[0] / sv[sv.size() - 1] >= 1e12) weak_route = true;
  }

  json estimates;
  {
    json labels = json::array();
    for (const auto& s : data.d_labels) labels.push_back(s);
    for (const auto& s : data.w_labels) labels.push_back(s);
    estimates["labels"] = labels;
  }

  std::optional<Vec> alpha;
  try {
    alpha = iv_point_estimate(fs.dhat, dmat, data.y);
  } catch (const NumericError&) {
    weak_route = true;
  }
  if (alpha.has_value()) {
    estimates["alpha"] = vector_to_json(*alpha);
  } else {
    estimates["alpha"] = nullptr;
    estimates["alpha_reason"] = "singular_moment_matrix";
  }

  if (!weak_route) {
    const Mat vcov = mode == VcovMode::hetero ? hetero_vcov(fs.dhat, dmat, data.y, *alpha)
                                              : homo_vcov(fs.dhat, dmat, data.y, *alpha);
    estimates["vcov"] = matrix_to_json(vcov);
    estimates["vcov_mode"] = args.vcov;
    estimates["se"] = vector_to_json(Vec(vcov.diagonal().array().max(0.0).sqrt()));
    report["routing"] = "standard";
  } else {
    estimates["se"] = nullptr;
    estimates["se_reason"] = "weak_identification_supscore_inference";
    estimates["vcov_mode"] = args.vcov;
    report["routing"] = "weak_identification";

    if (data.k_e() == 1) {
      const auto prob = SupScoreProblem::build(data, cfg.c, 0.05);
      GridSpec g;
      if (!args.grid.empty()) {
        g = parse_grid(args.grid);
      } else {
        // auto grid around the fallback point estimate
        const double center = alpha.has_value() ? (*alpha)[0] : 0.0;
        double width = std::max(1.0, std::abs(center));
        try {
          const Mat vc = hetero_vcov(fs.dhat, dmat, data.y, *alpha);
          if (vc(0, 0) > 0.0) width = 20.0 * std::sqrt(vc(0, 0));
        } catch (const std::exception&) {
        }
        g.lo = center - width;
        g.hi = center + width;
        g.step = width / 100.0;
      }
      const auto region = invert_region(prob, make_grid_1d(g.lo, g.hi, g.step));
      report["region"] = region_to_json(region, prob.dropped_instruments, data.f_labels);
    } else {
      report["region_note"] = "supply a grid via the region command for k_e > 1";
    }
  }
  report["estimates"] = estimates;

  if (args.split_sample) {
    const auto ss = split_sample_iv(data, cfg, args.seed);
    json s;
    s["seed"] = args.seed;
    s["n_a"] = ss.half_a.size();
    s["n_b"] = ss.half_b.size();
    s["alpha_a"] = vector_to_json(ss.alpha_a);
    s["alpha_b"] = vector_to_json(ss.alpha_b);
    s["alpha"] = vector_to_json(ss.alpha_ab);
    s["se"] = vector_to_json(ss.se);
    s["vcov"] = matrix_to_json(ss.vcov);
    report["split_sample"] = s;
  }

  if (args.diagnostics) {
    const PartialledData pd = PartialledData::from(data);
    Mat fnorm = pd.f_tilde;
    std::vector<int> keep;
    for (Eigen::Index j = 0; j < fnorm.cols(); ++j) {
      if (fnorm.col(j).squaredNorm() > 0.0) keep.push_back(static_cast<int>(j));
    }
    Mat fk(fnorm.rows(), static_cast<Eigen::Index>(keep.size()));
    for (std::size_t i = 0; i < keep.size(); ++i) fk.col(static_cast<Eigen::Index>(i)) = fnorm.col(keep[i]);
    const Mat fu = normalize_instruments(fk).f;
    const Mat gram = (fu.transpose() * fu) / static_cast<double>(data.n());
    const double cone = (cfg.c + 1.0) / (cfg.c - 1.0);
    const int s = std::min<int>(args.re_s, static_cast<int>(gram.rows()));
    json diag;
    diag["gram_dimension"] = gram.rows();
    diag["s"] = s;
    diag["cone_constant"] = cone;
    const bool exact_re = detail::enumeration_budget_re(gram.rows(), s) <= 1e6;
    const auto re = restricted_eigenvalue(gram, s, cone,
                                          exact_re ? ComputeMode::exact : ComputeMode::sampled,
                                          args.seed);
    diag["restricted_eigenvalue"] = {{"kappa", finite_or_null(re.kappa)},
                                     {"mode", re.exact ? "exact" : "sampled"},
                                     {"bound", re.exact ? "value" : "upper_bound"}};
    const bool exact_se = detail::binom(gram.rows(), s) <= 1e5;
    const auto se = sparse_eigenvalues(gram, s, exact_se ? ComputeMode::exact : ComputeMode::sampled,
                                       args.seed);
    diag["sparse_eigenvalues"] = {{"m", s},
                                  {"min", finite_or_null(se.min)},
                                  {"max", finite_or_null(se.max)},
                                  {"mode", se.exact ? "exact" : "sampled"}};
    report["diagnostics"] = diag;
  }

  if (args.spec_test) {
    if (args.baseline_cols.empty())
      throw ValidationError("--spec-test requires --baseline-cols");
    if (!alpha.has_value())
      throw NumericError("spec test: point estimate unavailable");
    std::vector<std::string> names;
    std::string cur;
    for (char ch : args.baseline_cols + ",") {
      if (ch == ',') {
        if (!cur.empty()) names.push_back(cur);
        cur.clear();
      } else {
        cur += ch;
      }
    }
    Mat a(data.n(), static_cast<Eigen::Index>(names.size()));
    for (std::size_t i = 0; i < names.size(); ++i) {
      const int c = table.column(names[i]);
      if (c < 0) throw ValidationError("spec test: column '" + names[i] + "' not in CSV header");
      a.col(static_cast<Eigen::Index>(i)) = table.values.col(c);
    }
    Mat r;
    if (args.restrict_rows.empty()) {
      r = Mat::Identity(data.k_d(), data.k_d());
    } else {
      // rows separated by ';', entries by ','
      std::vector<std::vector<double>> rows;
      std::vector<double> row;
      cur.clear();
      for (char ch : args.restrict_rows + ";") {
        if (ch == ',' || ch == ';') {
          if (!cur.empty()) row.push_back(std::stod(cur));
          cur.clear();
          if (ch == ';' && !row.empty()) {
            rows.push_back(row);
            row.clear();
          }
        } else {
          cur += ch;
        }
      }
      if (rows.empty()) throw ValidationError("--R: no rows parsed");
      r.resize(static_cast<Eigen::Index>(rows.size()), data.k_d());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (static_cast<Eigen::Index>(rows[i].size()) != data.k_d())
          throw ValidationError("--R: each row must have k_d entries");
        for (Eigen::Index j = 0; j < data.k_d(); ++j) r(static_cast<Eigen::Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
      }
    }
    const auto st = spec_test(a, dmat, data.y, fs.dhat, r, *alpha);
    json s;
    s["J"] = finite_or_null(st.J);
    s["df"] = st.df;
    s["pvalue"] = finite_or_null(st.pvalue);
    s["alpha_baseline"] = vector_to_json(st.alpha_baseline);
    json bl = json::array();
    for (const auto& nm : names) bl.push_back(nm);
    s["baseline_instruments"] = bl;
    report["spec_test"] = s;
  }

  write_file(args.out_path, report.dump(2) + "\n");
  return 0;
}

// ---------------------------------------------------------------------------
// region
// ---------------------------------------------------------------------------

struct RegionArgs {
  std::string data_path, roles_path, out_path;
  std::string grid;
  double level = 0.95;
  double c = 1.1;
};

int run_region(const RegionArgs& args) {
  const CsvTable table = parse_csv_file(args.data_path);
  const RolesManifest roles = parse_roles(args.roles_path, table);
  const Dataset data = build_dataset(table, roles);
  if (data.k_e() != 1)
    throw ValidationError("region: the grid shorthand requires exactly one endogenous column");
  if (!(args.level > 0.0 && args.level < 1.0))
    throw ValidationError("region: --level must lie in (0,1)");
  const GridSpec g = parse_grid(args.grid);
  const auto prob = SupScoreProblem::build(data, args.c, 1.0 - args.level);
  const auto region = invert_region(prob, make_grid_1d(g.lo, g.hi, g.step));

  json out;
  out["schema"] = "sparseiv.region.v1";
  out["command"] = "region";
  out["level"] = args.level;
  out["c"] = args.c;
  out["region"] = region_to_json(region, prob.dropped_instruments, data.f_labels);
  write_file(args.out_path, out.dump(2) + "\n");
  return 0;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimArgs {
  std::string config_path, out_path;
  int reps = 500;
  std::uint64_t seed = 42;
  bool seed_given = false;  // --seed beats the config's "seed" field
  int threads = 0;          // 0: SPARSEIV_THREADS or 1
  bool power = false;
  std::string beta_grid;
};

void require_field_type(const json& j, const std::string& key, const char* type_name,
                        bool (json::*pred)() const) {
  if (j.contains(key) && !(j[key].*pred)()) {
    throw ValidationError("/" + key + ": must be " + type_name);
  }
}

int run_simulate(const SimArgs& args) {
  std::ifstream in(args.config_path);
  if (!in) throw ValidationError("cannot open config file: " + args.config_path);
  json cfg;
  try {
    in >> cfg;
  } catch (const json::exception& e) {
    throw ValidationError("config: invalid JSON: " + std::string(e.what()));
  }
  if (!cfg.is_object()) throw ValidationError("/: config must be a JSON object");

  require_field_type(cfg, "n", "a number", &json::is_number);
  require_field_type(cfg, "p", "a number", &json::is_number);
  require_field_type(cfg, "s", "a number", &json::is_number);
  require_field_type(cfg, "mu2", "a number", &json::is_number);
  require_field_type(cfg, "f_star", "a number", &json::is_number);
  require_field_type(cfg, "corr_ev", "a number", &json::is_number);
  require_field_type(cfg, "sigma2_e", "a number", &json::is_number);
  require_field_type(cfg, "sigma2_z", "a number", &json::is_number);
  require_field_type(cfg, "beta", "a number", &json::is_number);
  require_field_type(cfg, "design", "a string", &json::is_string);
  require_field_type(cfg, "estimators", "a list", &json::is_array);
  require_field_type(cfg, "noselect_policy", "a string", &json::is_string);
  require_field_type(cfg, "pca_components", "a number", &json::is_number);
  require_field_type(cfg, "c", "a number", &json::is_number);
  require_field_type(cfg, "iterations", "a number", &json::is_number);
  require_field_type(cfg, "method", "a string", &json::is_string);
  require_field_type(cfg, "seed", "a number", &json::is_number);

  std::uint64_t seed = args.seed;
  if (!args.seed_given && cfg.contains("seed")) seed = cfg["seed"].get<std::uint64_t>();

  DgpSpec spec;
  spec.seed = seed;
  spec.n = cfg.value("n", 100);
  spec.p = cfg.value("p", 100);
  const std::string design = cfg.value("design", std::string("exponential"));
  if (design == "exponential") {
    spec.design = DgpSpec::Design::exponential;
  } else if (design == "cutoff") {
    spec.design = DgpSpec::Design::cutoff;
  } else {
    throw ValidationError("/design: must be 'exponential' or 'cutoff'");
  }
  spec.s = cfg.value("s", 5);
  if (cfg.contains("mu2")) spec.mu2 = cfg["mu2"].get<double>();
  if (cfg.contains("f_star")) spec.f_star = cfg["f_star"].get<double>();
  if (!spec.mu2.has_value() && !spec.f_star.has_value())
    throw ValidationError("/mu2: exactly one of mu2 or f_star is required");
  spec.corr_ev = cfg.value("corr_ev", 0.6);
  spec.sigma2_e = cfg.value("sigma2_e", 1.0);
  spec.sigma2_z = cfg.value("sigma2_z", 1.0);
  spec.beta = cfg.value("beta", 1.0);

  McOptions opts;
  opts.threads = args.threads;
  if (opts.threads <= 0) {
    const char* env = std::getenv("SPARSEIV_THREADS");
    opts.threads = env != nullptr ? std::max(1, std::atoi(env)) : 1;
  }
  const std::string policy = cfg.value("noselect_policy", std::string("supscore"));
  if (policy == "supscore") {
    opts.noselect = NoSelectPolicy::supscore;
  } else if (policy == "infinite-ci") {
    opts.noselect = NoSelectPolicy::infinite_ci;
  } else {
    throw ValidationError("/noselect_policy: must be 'supscore' or 'infinite-ci'");
  }
  opts.pca_components = cfg.value("pca_components", 0);
  opts.first_stage.c = cfg.value("c", 1.1);
  opts.first_stage.max_loading_iters = cfg.value("iterations", 15);
  opts.sup_c = opts.first_stage.c;
  const std::string method = cfg.value("method", std::string("post-lasso"));
  if (method == "lasso") {
    opts.first_stage.method = FirstStageMethod::lasso;
  } else if (method == "post-lasso") {
    opts.first_stage.method = FirstStageMethod::post_lasso;
  } else {
    throw ValidationError("/method: must be 'lasso' or 'post-lasso'");
  }

  std::vector<std::string> ids{"2sls_all", "full", "post_lasso", "post_lasso_f", "sup_score"};
  if (cfg.contains("estimators")) {
    ids.clear();
    for (const auto& item : cfg["estimators"]) {
      if (!item.is_string()) throw ValidationError("/estimators: entries must be strings");
      ids.push_back(item.get<std::string>());
    }
  }
  std::vector<EstimatorSpec> estimators;
  try {
    estimators = make_estimators(ids);
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("/estimators: ") + e.what());
  }

  if (args.reps < 1) throw ValidationError("--reps must be at least 1");

  const MetricsTable table = run_replications(spec, estimators, args.reps, seed, opts);
  write_file(args.out_path, table.to_csv());

  json out;
  out["schema"] = "sparseiv.simulation.v1";
  out["command"] = "simulate";
  out["reps"] = args.reps;
  out["seed"] = seed;
  out["threads"] = opts.threads;
  out["config"] = cfg;
  json rows = json::array();
  for (const auto& r : table.rows) {
    rows.push_back({{"estimator", r.estimator},
                    {"R", r.R},
                    {"med_bias", finite_or_null(r.med_bias)},
                    {"mad", finite_or_null(r.mad)},
                    {"rp05", finite_or_null(r.rp05)},
                    {"rmse", finite_or_null(r.rmse)},
                    {"n0", r.n0},
                    {"failures", r.failures}});
  }
  out["rows"] = rows;

  if (args.power) {
    if (args.beta_grid.empty()) throw ValidationError("--power requires --beta-grid lo:hi:step");
    const GridSpec g = parse_grid(args.beta_grid);
    std::vector<double> alts;
    for (double b = g.lo; b <= g.hi + 1e-12; b += g.step) alts.push_back(b);
    const PowerCurve curve = size_adjusted_power(spec, estimators, alts, args.reps, seed, opts);
    write_file(with_extension(args.out_path, "_power.csv"), curve.to_csv());
    json crit = json::array();
    for (const auto& cv : curve.critical_values) {
      crit.push_back({{"estimator", cv.first}, {"critical_value", finite_or_null(cv.second)}});
    }
    out["power"] = {{"beta_grid", args.beta_grid},
                    {"critical_values", crit},
                    {"low_R_warning", curve.low_R_warning}};
  }

  write_file(with_extension(args.out_path, ".json"), out.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"IV estimation with very many instruments: Lasso-selected optimal "
               "instruments, weak-identification-robust regions, simulation harness"};
  app.require_subcommand(1);

  FitArgs fit;
  CLI::App* fit_cmd = app.add_subcommand("fit", "estimate the structural equation from a CSV");
  fit_cmd->add_option("--data", fit.data_path, "input CSV")->required();
  fit_cmd->add_option("--roles", fit.roles_path, "roles manifest JSON")->required();
  fit_cmd->add_option("--method", fit.method, "first-stage method: lasso | post-lasso");
  fit_cmd->add_option("--c", fit.c, "penalty slack constant (> 1)");
  fit_cmd->add_option("--gamma", fit.gamma, "confidence level, or 'auto' for 0.1/log(p v n)");
  fit_cmd->add_option("--iterations", fit.iterations, "penalty-loading iteration cap K");
  fit_cmd->add_option("--vcov", fit.vcov, "variance estimator: hetero | homo");
  fit_cmd->add_flag("--split-sample", fit.split_sample, "add the split-sample IV block");
  fit_cmd->add_option("--seed", fit.seed, "seed for the split-sample permutation");
  fit_cmd->add_flag("--diagnostics", fit.diagnostics, "add Gram-matrix diagnostics");
  fit_cmd->add_option("--re-s", fit.re_s, "support size for the restricted eigenvalue");
  fit_cmd->add_flag("--spec-test", fit.spec_test, "add the baseline-instrument specification test");
  fit_cmd->add_option("--baseline-cols", fit.baseline_cols, "comma-separated baseline instrument columns");
  fit_cmd->add_option("--R", fit.restrict_rows, "restriction matrix rows 'r11,r12;r21,r22' (default identity)");
  fit_cmd->add_option("--grid", fit.grid, "region grid lo:hi:step for the weak-identification route");
  fit_cmd->add_option("--out", fit.out_path, "output report JSON")->required();

  RegionArgs region;
  CLI::App* region_cmd = app.add_subcommand("region", "sup-score confidence region on a grid");
  region_cmd->add_option("--data", region.data_path, "input CSV")->required();
  region_cmd->add_option("--roles", region.roles_path, "roles manifest JSON")->required();
  region_cmd->add_option("--grid", region.grid, "grid lo:hi:step")->required();
  region_cmd->add_option("--level", region.level, "confidence level (default 0.95)");
  region_cmd->add_option("--c", region.c, "critical-value constant (> 1)");
  region_cmd->add_option("--out", region.out_path, "output region JSON")->required();

  SimArgs sim;
  CLI::App* sim_cmd = app.add_subcommand("simulate", "run the replication study");
  sim_cmd->add_option("--config", sim.config_path, "simulation config JSON")->required();
  sim_cmd->add_option("--reps", sim.reps, "number of replications");
  CLI::Option* seed_opt = sim_cmd->add_option("--seed", sim.seed, "base seed");
  sim_cmd->add_option("--threads", sim.threads, "worker threads (default SPARSEIV_THREADS or 1)");
  sim_cmd->add_flag("--power", sim.power, "also compute size-adjusted power curves");
  sim_cmd->add_option("--beta-grid", sim.beta_grid, "alternatives grid lo:hi:step for --power");
  sim_cmd->add_option("--out", sim.out_path, "output table CSV (JSON written alongside)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }
  sim.seed_given = seed_opt->count() > 0;

  try {
    if (fit_cmd->parsed()) return run_fit(fit);
    if (region_cmd->parsed()) return run_region(region);
    if (sim_cmd->parsed()) return run_simulate(sim);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
