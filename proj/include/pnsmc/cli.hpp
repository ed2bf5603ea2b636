#pragma once

#include "pnsmc/config.hpp"
#include "pnsmc/data.hpp"
#include "pnsmc/schema.hpp"
#include "pnsmc/smc.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

namespace pnsmc {

/// Process exit codes.
enum ExitCode : int { exit_ok = 0, exit_internal = 1, exit_config = 2, exit_data = 3, exit_numerical = 4 };

/// A run that completed but whose outputs failed the schema self-check.
struct SchemaViolation : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Short human-readable number for log lines.
inline std::string fmt_rel(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

namespace cli_detail {

inline std::string fmt(double v) { return detail::format_double(v); }

inline void write_text(const std::filesystem::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("cannot write " + file.string());
  out << text;
}

inline void write_json(const std::filesystem::path& file, const Json& j) { write_text(file, j.dump(2) + "\n"); }

/// Files written by one command, paired with the schema each must satisfy.
struct Manifest {
  std::vector<std::pair<std::filesystem::path, std::string>> files;
  void add(const std::filesystem::path& f, const std::string& schema_name) { files.emplace_back(f, schema_name); }

  void self_check() const {
    std::vector<std::string> errors;
    for (const auto& [file, name] : files) {
      auto e = schema::check_file(file, name);
      errors.insert(errors.end(), e.begin(), e.end());
    }
    if (!errors.empty()) {
      std::string msg = "output schema self-check failed:";
      for (const auto& e : errors) msg += "\n  " + e;
      throw SchemaViolation(msg);
    }
  }
};

inline void write_snapshot(const RunConfig& rc, const std::string& command, Manifest& m) {
  const auto file = rc.out / (command + "_config.json");
  write_json(file, rc.snapshot());
  m.add(file, "config.schema.json");
}

/// Weighted quantile of (value, weight) pairs; weights sum to one.
inline double weighted_quantile(std::vector<std::pair<double, double>> vw, double p) {
  std::sort(vw.begin(), vw.end());
  double c = 0.0;
  for (const auto& [v, w] : vw) {
    c += w;
    if (c >= p) return v;
  }
  return vw.empty() ? std::numeric_limits<double>::quiet_NaN() : vw.back().first;
}

/// Natural-space marginal prior density at x.
inline double prior_marginal_pdf(const PriorEntry& e, double x) {
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  const double sd = std::sqrt(e.variance);
  if (e.space == Space::log) {
    if (!(x > 0.0)) return 0.0;
    const double r = (std::log(x) - e.mean) / sd;
    return inv_sqrt_2pi / (sd * x) * std::exp(-0.5 * r * r);
  }
  if (e.positive && !(x > 0.0)) return 0.0;
  const double r = (x - e.mean) / sd;
  return inv_sqrt_2pi / sd * std::exp(-0.5 * r * r);
}

/// Input file for `section.key`: the configured path, or `fallback` inside
/// the output directory (where an earlier stage writes it). The absolute
/// path is stored back so the snapshot names the file actually read.
inline std::filesystem::path resolve_input(RunConfig& rc, const std::string& section,
                                         const std::string& key, const std::string& fallback) {
  std::filesystem::path p = rc.path(section, key).value_or(rc.out / fallback);
  p = std::filesystem::absolute(p).lexically_normal();
  if (!std::filesystem::exists(p))
    throw ConfigError(section + "." + key + ": file does not exist: " + p.string());
  rc.json[section][key] = p.string();
  return p;
}

inline TimeSeriesDataset load_checked(const std::filesystem::path& p, const IngestSchema& schema) {
  if (!std::filesystem::exists(p)) throw ConfigError("dataset path does not exist: " + p.string());
  return load_dataset(p, schema);
}

}  // namespace cli_detail

// ---------------------------------------------------------------------------
// simulate

/// Simulates one record per the generation spec. Returns the clean series;
/// the output channel of the model is stored in y.
/// `check` is "error", "warn" or "off": what to do when halving the RK4 step
/// changes the terminal state by more than `tolerance` (relative).
inline TimeSeriesDataset generate_dataset(const ModelSpec& model, const ParameterVector& truth, const GenerationSpec& g,
                                          const Eigen::VectorXd& x0, const std::string& check, double tolerance,
                                          const std::string& label, std::ostream* log = nullptr) {
  const double fine_rate = g.rate_hz * g.oversample;
  const bool fine = g.input_hold == "fine";
  const double input_rate = fine ? fine_rate : g.rate_hz;
  std::vector<double> u;
  if (g.input.kind == "multisine")
    u = gen_multisine(g.input.multisine, g.duration_s, input_rate);
  else if (g.input.kind == "sine_sweep")
    u = gen_sine_sweep(g.input.sweep, g.duration_s, input_rate);
  else
    u.assign(static_cast<std::size_t>(std::llround(g.duration_s * input_rate)), 0.0);

  const int substeps = fine ? 1 : g.oversample;
  std::optional<double> halving;
  if (check != "off" && !u.empty()) {
    halving = rk4_resolution_error(model, truth, u, input_rate, x0, substeps);
    if (!(*halving < tolerance)) {
      const std::string msg = "generate." + label + ": halving the RK4 step changes the terminal state by " +
                              fmt_rel(*halving) + " relative (tolerance " + fmt_rel(tolerance) + ")";
      if (check == "error") throw ConfigError(msg + "; raise oversample");
      if (log) *log << "simulate: warning: " << msg << "\n";
    }
  }
  const Trajectory tr = rk4_simulate(model, truth, u, input_rate, x0, substeps);

  TimeSeriesDataset ds;
  ds.rate_hz = input_rate;
  ds.observed = model.observed;
  ds.units = unit_of(model.observed);
  ds.u = u;
  ds.y = tr.observed;
  ds.t.resize(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) ds.t[i] = static_cast<double>(i) / input_rate;
  if (fine && g.oversample > 1) ds = downsample(ds, g.oversample);
  // Exact timestamps on the output grid.
  for (std::size_t i = 0; i < ds.size(); ++i) ds.t[i] = static_cast<double>(i) / g.rate_hz;
  ds.rate_hz = g.rate_hz;

  std::ostringstream prov;
  prov << "simulated " << model.name << ": " << g.input.kind << " input, RK4 at " << fmt_rel(fine_rate) << " Hz ("
       << (fine ? "input sampled on the integration grid" : "input held between output samples") << "), output at "
       << fmt_rel(g.rate_hz) << " Hz";
  if (halving) prov << "; RK4 step-halving change " << fmt_rel(*halving);
  ds.provenance = prov.str();
  for (std::size_t i = 0; i < model.param_names.size(); ++i)
    ds.truth.emplace_back(model.param_names[i], truth[static_cast<Eigen::Index>(i)]);
  return ds;
}

inline int cmd_simulate(const RunConfig& rc, std::ostream& log) {
  using namespace cli_detail;
  const std::uint64_t seed = rc.require_seed();
  const ModelSpec model = rc.model();
  const ParameterVector truth = rc.truth();
  try {
    model.check_parameters(truth);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("truth: ") + e.what());
  }
  const auto x0 = rc.x0("generate").value_or(Eigen::VectorXd::Zero(model.dim));
  if (x0.size() != model.dim) throw ConfigError("generate.x0 must have " + std::to_string(model.dim) + " entries");
  const std::string check = detail::str(rc.json.at("generate"), "check_resolution", "generate");
  if (check != "error" && check != "warn" && check != "off")
    throw ConfigError("generate.check_resolution must be \"error\", \"warn\" or \"off\"");
  const double tolerance = detail::num(rc.json.at("generate"), "resolution_tolerance", "generate");
  std::filesystem::create_directories(rc.out);
  Manifest m;
  int produced = 0;
  for (const std::string which : {"train", "test"}) {
    const auto g = rc.generation(which);
    if (!g) continue;
    TimeSeriesDataset clean = generate_dataset(model, truth, *g, x0, check, tolerance, which, &log);
    TimeSeriesDataset noisy = clean;
    auto rng = make_stream(seed, 11, which == "train" ? 0 : 1);
    noisy.y = add_noise(clean.y, g->noise_fraction, rng);
    noisy.noise_std = g->noise_fraction * rms(clean.y);
    noisy.provenance += "; Gaussian noise with sd " + fmt_rel(g->noise_fraction) + " x RMS";
    clean.noise_std = 0.0;
    const auto noisy_path = rc.out / (which + ".csv");
    const auto clean_path = rc.out / (which + "_clean.csv");
    save_dataset(noisy, noisy_path);
    save_dataset(clean, clean_path);
    for (const auto& p : {noisy_path, clean_path}) {
      m.add(p, "dataset.csv.schema.json");
      m.add(sidecar_path(p), "dataset.meta.schema.json");
    }
    log << "simulate: wrote " << noisy_path.string() << " (" << noisy.size() << " samples, noise sd "
        << fmt_rel(*noisy.noise_std) << ")\n";
    ++produced;
  }
  if (produced == 0) throw ConfigError("simulate: both generate.train and generate.test are null");
  write_snapshot(rc, "simulate", m);
  m.self_check();
  return exit_ok;
}

// ---------------------------------------------------------------------------
// identify

struct PosteriorSummaryRow {
  std::string name;
  double prior_mean, prior_sd, mean, sd, q025, q975;
  std::optional<double> truth;
};

inline int cmd_identify(RunConfig rc, std::ostream& log) {
  using namespace cli_detail;
  const auto started = std::chrono::steady_clock::now();
  const auto train_path = resolve_input(rc, "data", "train", "train.csv");
  TimeSeriesDataset data = load_checked(train_path, rc.ingest());
  if (const Json& ms = rc.json.at("data").at("max_samples"); !ms.is_null())
    data = data.prefix(static_cast<std::size_t>(ms.get<long long>()));
  if (data.empty()) throw DataError(train_path.string() + ": no observations");

  const ModelSpec model = rc.model(data.observed);
  const PriorSpec prior = rc.prior();
  const SolverConfig solver = rc.solver(&data);
  const SmcConfig smc_cfg = rc.smc();
  if (solver.x0.size() != 0 && solver.x0.size() != model.dim)
    throw ConfigError("solver.x0 must have " + std::to_string(model.dim) + " entries");
  const Json& outj = rc.json.at("output");
  const auto n_states = static_cast<std::size_t>(std::max<long long>(0, detail::integer(outj, "state_particles", "output")));
  const auto bins = static_cast<int>(detail::integer(outj, "histogram_bins", "output"));
  if (bins < 1) throw ConfigError("output.histogram_bins must be >= 1");

  std::filesystem::create_directories(rc.out);
  Manifest m;
  const auto diag_path = rc.out / "diagnostics.csv";
  auto write_diagnostics = [&](const std::vector<DiagnosticsRow>& trace) {
    std::string s = "index,t,ess,threshold,rejuvenated,acceptance_rate\n";
    for (const auto& r : trace)
      s += std::to_string(r.index) + "," + fmt(data.t[r.index]) + "," + fmt(r.ess) + "," + fmt(r.threshold) + "," +
           (r.rejuvenated ? "1" : "0") + "," + fmt(r.acceptance_rate) + "\n";
    write_text(diag_path, s);
  };

  Smc smc(model, prior, data, solver, smc_cfg);
  std::vector<DiagnosticsRow> trace;
  SmcResult result;
  try {
    result = smc.run(smc.init(), [&](const DiagnosticsRow& r) { trace.push_back(r); });
  } catch (const SmcAbort&) {
    write_diagnostics(trace);
    throw;
  }
  write_diagnostics(result.trace);
  m.add(diag_path, "diagnostics.csv.schema.json");

  const auto& sys = result.system;
  const Eigen::VectorXd w = normalized_weights(sys.log_weights);
  if (!(std::abs(w.sum() - 1.0) < 1e-9)) throw SmcAbort("posterior weights do not sum to one");
  std::vector<ParameterVector> theta;
  for (const auto& s : sys.particles) theta.push_back(smc.natural(s));

  // Posterior particle table.
  {
    std::string s;
    for (const auto& n : model.param_names) s += n + ",";
    s += "weight\n";
    for (std::size_t i = 0; i < theta.size(); ++i) {
      for (Eigen::Index p = 0; p < theta[i].size(); ++p) s += fmt(theta[i][p]) + ",";
      s += fmt(w[static_cast<Eigen::Index>(i)]) + "\n";
    }
    write_text(rc.out / "posterior.csv", s);
    m.add(rc.out / "posterior.csv", "posterior.csv.schema.json");
  }

  // Known truth (simulated data) enables normalized columns.
  std::optional<ParameterVector> truth;
  if (!data.truth.empty()) {
    ParameterVector t{Eigen::VectorXd(model.n_params())};
    bool complete = true;
    for (std::size_t i = 0; i < model.param_names.size(); ++i) {
      auto it = std::find_if(data.truth.begin(), data.truth.end(),
                             [&](const auto& kv) { return kv.first == model.param_names[i]; });
      if (it == data.truth.end()) complete = false;
      else t[static_cast<Eigen::Index>(i)] = it->second;
    }
    if (complete) truth = t;
  }

  std::vector<PosteriorSummaryRow> rows;
  for (Eigen::Index p = 0; p < model.n_params(); ++p) {
    PosteriorSummaryRow r;
    r.name = model.param_names[static_cast<std::size_t>(p)];
    r.prior_mean = prior.natural_mean(p);
    r.prior_sd = prior.natural_sd(p);
    std::vector<std::pair<double, double>> vw;
    double mean = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      mean += w[static_cast<Eigen::Index>(i)] * theta[i][p];
      vw.emplace_back(theta[i][p], w[static_cast<Eigen::Index>(i)]);
    }
    double var = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) var += w[static_cast<Eigen::Index>(i)] * std::pow(theta[i][p] - mean, 2);
    r.mean = mean;
    r.sd = std::sqrt(var);
    r.q025 = weighted_quantile(vw, 0.025);
    r.q975 = weighted_quantile(vw, 0.975);
    if (truth) r.truth = (*truth)[p];
    rows.push_back(r);
  }

  // Plot-ready histograms: prior density over its central 99.8% range and
  // weighted posterior histogram over the particle range.
  {
    std::string s = "parameter,kind,bin_lower,bin_upper,density\n";
    for (Eigen::Index p = 0; p < model.n_params(); ++p) {
      const auto& e = prior.entries[static_cast<std::size_t>(p)];
      const auto& r = rows[static_cast<std::size_t>(p)];
      double lo, hi;
      if (e.space == Space::log) {
        lo = std::exp(e.mean - 3.09 * std::sqrt(e.variance));
        hi = std::exp(e.mean + 3.09 * std::sqrt(e.variance));
      } else {
        lo = e.mean - 3.09 * std::sqrt(e.variance);
        hi = e.mean + 3.09 * std::sqrt(e.variance);
        if (e.positive) lo = std::max(lo, 0.0);
      }
      for (int b = 0; b < bins; ++b) {
        const double a = lo + (hi - lo) * b / bins, z = lo + (hi - lo) * (b + 1) / bins;
        s += r.name + ",prior," + fmt(a) + "," + fmt(z) + "," + fmt(prior_marginal_pdf(e, 0.5 * (a + z))) + "\n";
      }
      double pmin = std::numeric_limits<double>::infinity(), pmax = -pmin;
      for (const auto& th : theta) {
        pmin = std::min(pmin, th[p]);
        pmax = std::max(pmax, th[p]);
      }
      if (!(pmax > pmin)) {
        const double pad = std::max(std::abs(pmin) * 1e-6, 1e-12);
        pmin -= pad;
        pmax += pad;
      }
      std::vector<double> mass(static_cast<std::size_t>(bins), 0.0);
      for (std::size_t i = 0; i < theta.size(); ++i) {
        int b = static_cast<int>((theta[i][p] - pmin) / (pmax - pmin) * bins);
        b = std::clamp(b, 0, bins - 1);
        mass[static_cast<std::size_t>(b)] += w[static_cast<Eigen::Index>(i)];
      }
      const double width = (pmax - pmin) / bins;
      for (int b = 0; b < bins; ++b)
        s += r.name + ",posterior," + fmt(pmin + width * b) + "," + fmt(pmin + width * (b + 1)) + "," +
             fmt(mass[static_cast<std::size_t>(b)] / width) + "\n";
    }
    write_text(rc.out / "histogram.csv", s);
    m.add(rc.out / "histogram.csv", "histogram.csv.schema.json");
  }

  // Filtered state trajectories for an evenly spaced particle subset.
  {
    const std::size_t k = std::min(n_states, theta.size());
    std::string s = "particle,t";
    for (int i = 0; i < model.dim; ++i) s += ",mean_x" + std::to_string(i);
    for (int i = 0; i < model.dim; ++i) s += ",sd_x" + std::to_string(i);
    s += "\n";
    std::vector<std::string> blocks(k);
    parallel_for(k, rc.threads, [&](std::size_t j) {
      const std::size_t idx = j * theta.size() / k;
      const auto sol = solve_and_score(model, theta[idx], data, solver, std::nullopt, {false, true, false});
      std::string b;
      for (const auto& pt : sol.trajectory) {
        b += std::to_string(idx) + "," + fmt(pt.t);
        for (int i = 0; i < model.dim; ++i) b += "," + fmt(pt.mean[i]);
        for (int i = 0; i < model.dim; ++i) b += "," + fmt(pt.sd[i]);
        b += "\n";
      }
      blocks[j] = std::move(b);
    });
    for (const auto& b : blocks) s += b;
    write_text(rc.out / "states.csv", s);
    m.add(rc.out / "states.csv", "states.csv.schema.json");
  }

  double acc = 0.0;
  for (const auto& e : result.rejuvenations) acc += e.acceptance_rate;
  Json summary;
  summary["model"] = model.name;
  summary["observed"] = to_string(model.observed);
  summary["n_particles"] = theta.size();
  summary["n_observations"] = data.size();
  summary["rejuvenations"] = result.rejuvenations.size();
  summary["final_ess"] = result.trace.empty() ? static_cast<double>(theta.size()) : result.trace.back().ess;
  summary["mean_acceptance_rate"] =
      result.rejuvenations.empty() ? Json(nullptr) : Json(acc / static_cast<double>(result.rejuvenations.size()));
  summary["measurement_variance"] = solver.R_y;
  summary["config_hash"] = rc.hash();
  summary["truth_known"] = truth.has_value();
  Json params = Json::array();
  for (const auto& r : rows) {
    Json p;
    p["name"] = r.name;
    p["prior_mean"] = r.prior_mean;
    p["prior_sd"] = r.prior_sd;
    p["posterior_mean"] = r.mean;
    p["posterior_sd"] = r.sd;
    p["q025"] = r.q025;
    p["q975"] = r.q975;
    if (r.truth) {
      p["truth"] = *r.truth;
      p["normalized_mean"] = r.mean / *r.truth;
      p["normalized_sd"] = r.sd / std::abs(*r.truth);
    }
    params.push_back(p);
  }
  summary["parameters"] = params;
  write_json(rc.out / "summary.json", summary);
  m.add(rc.out / "summary.json", "summary.schema.json");
  write_snapshot(rc, "identify", m);

  // Wall time lives apart from the reproducible artifacts.
  Json timing;
  timing["command"] = "identify";
  timing["config_hash"] = rc.hash();
  timing["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  write_json(rc.out / "identify_timing.json", timing);
  m.add(rc.out / "identify_timing.json", "timing.schema.json");

  log << "identify: " << theta.size() << " particles, " << data.size() << " observations, "
      << result.rejuvenations.size() << " rejuvenations, final ESS " << fmt_rel(summary["final_ess"].get<double>())
      << "\n";
  for (const auto& r : rows)
    log << "  " << r.name << ": " << fmt_rel(r.mean) << " +/- " << fmt_rel(r.sd)
        << (r.truth ? " (truth " + fmt_rel(*r.truth) + ")" : std::string()) << "\n";
  m.self_check();
  return exit_ok;
}

// ---------------------------------------------------------------------------
// evaluate

struct PosteriorTable {
  std::vector<std::string> names;
  std::vector<ParameterVector> particles;
  std::vector<double> weights;
};

/// Reads posterior.csv; the parameter columns must match `model`.
inline PosteriorTable read_posterior(const std::filesystem::path& file, const ModelSpec& model) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot open posterior artifact " + file.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(file.string() + ": empty posterior artifact");
  const auto header = detail::split_csv_line(line);
  std::vector<std::string> expect = model.param_names;
  expect.push_back("weight");
  if (header != expect) {
    std::string want;
    for (const auto& e : expect) want += (want.empty() ? "" : ",") + e;
    throw DataError("model/artifact mismatch: " + file.string() + " has columns '" + line + "', model '" + model.name +
                    "' expects '" + want + "'");
  }
  PosteriorTable t;
  t.names = model.param_names;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != expect.size()) throw DataError(file.string() + ": row " + std::to_string(row) + " has wrong field count");
    ParameterVector th{Eigen::VectorXd(model.n_params())};
    for (Eigen::Index p = 0; p < model.n_params(); ++p)
      th[p] = detail::parse_double(cells[static_cast<std::size_t>(p)], row, expect[static_cast<std::size_t>(p)]);
    t.particles.push_back(th);
    t.weights.push_back(detail::parse_double(cells.back(), row, "weight"));
  }
  if (t.particles.empty()) throw DataError(file.string() + ": posterior artifact has no particles");
  return t;
}

inline Json rmse_json(const RmseReport& r) {
  Json j;
  j["min"] = r.min;
  j["max"] = r.max;
  j["mean"] = r.mean;
  j["n_particles"] = r.n_particles;
  j["n_diverged"] = r.n_diverged;
  j["unit"] = r.unit;
  return j;
}

inline int cmd_evaluate(RunConfig rc, std::ostream& log) {
  using namespace cli_detail;
  const auto test_path = resolve_input(rc, "data", "test", "test.csv");
  const auto post_path = resolve_input(rc, "evaluate", "posterior", "posterior.csv");

  const TimeSeriesDataset test = load_checked(test_path, rc.ingest());
  const ModelSpec model = rc.model(test.observed);
  const PosteriorTable post = read_posterior(post_path, model);
  const Json& ev = rc.json.at("evaluate");
  RmseOptions opts;
  opts.substeps = static_cast<int>(detail::integer(ev, "substeps", "evaluate"));
  if (opts.substeps < 1) throw ConfigError("evaluate.substeps must be >= 1");
  const long long skip = detail::integer(ev, "skip", "evaluate");
  if (skip < 0) throw ConfigError("evaluate.skip must be >= 0");
  opts.skip = static_cast<std::size_t>(skip);
  if (auto x0 = rc.x0("evaluate")) {
    if (x0->size() != model.dim) throw ConfigError("evaluate.x0 must have " + std::to_string(model.dim) + " entries");
    opts.x0 = *x0;
  }
  opts.threads = rc.threads;
  const RmseReport rep = rmse_per_particle(model, post.particles, test, opts);
  if (rep.n_diverged > 0)
    log << "evaluate: warning: " << rep.n_diverged << " of " << rep.n_particles
        << " particles diverged and are excluded from the mean\n";

  std::filesystem::create_directories(rc.out);
  Manifest m;
  write_json(rc.out / "rmse.json", rmse_json(rep));
  m.add(rc.out / "rmse.json", "rmse.schema.json");
  std::string s = "particle,weight,rmse\n";
  for (std::size_t i = 0; i < rep.per_particle.size(); ++i)
    s += std::to_string(i) + "," + fmt(post.weights[i]) + "," + fmt(rep.per_particle[i]) + "\n";
  write_text(rc.out / "rmse.csv", s);
  m.add(rc.out / "rmse.csv", "rmse.csv.schema.json");
  write_text(rc.out / "rmse_table.txt", render_rmse_table({{model.name, rep.unit, rep.min, rep.max, rep.mean}}));
  write_snapshot(rc, "evaluate", m);
  log << render_rmse_table({{model.name, rep.unit, rep.min, rep.max, rep.mean}});
  m.self_check();
  return exit_ok;
}

// ---------------------------------------------------------------------------
// entry point

/// Parses argv, runs the subcommand and maps failures to exit codes.
inline int run_cli(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Probabilistic-numerics SMC system identification"};
  app.require_subcommand(0, 1);
  std::string config_path;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  std::string out_dir;
  bool print_config = false;
  app.add_option("--config", config_path, "Run configuration (JSON)");
  auto* seed_opt = app.add_option("--seed", seed, "Master seed (overrides the config)");
  auto* threads_opt = app.add_option("--threads", threads, "Worker threads (0 = all cores)");
  auto* out_opt = app.add_option("--out", out_dir, "Output directory (overrides the config)");
  app.add_flag("--print-config", print_config, "Print the effective configuration with all defaults and exit");
  auto* sim = app.add_subcommand("simulate", "Generate training/test datasets");
  auto* ident = app.add_subcommand("identify", "Run the particle system on the training data");
  auto* eval = app.add_subcommand("evaluate", "Score posterior particles on the test data");
  for (auto* sub : {sim, ident, eval}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return exit_config;
  }

  try {
    const RunConfig rc = load_run_config(
        config_path.empty() ? std::nullopt : std::optional<std::filesystem::path>(config_path),
        seed_opt->count() ? std::optional(seed) : std::nullopt,
        threads_opt->count() ? std::optional(threads) : std::nullopt,
        out_opt->count() ? std::optional<std::filesystem::path>(out_dir) : std::nullopt);
    if (print_config) {
      out << rc.json.dump(2) << "\n";
      return exit_ok;
    }
    if (sim->parsed()) return cmd_simulate(rc, out);
    if (ident->parsed()) return cmd_identify(rc, out);
    if (eval->parsed()) return cmd_evaluate(rc, out);
    err << app.help();
    return exit_config;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return exit_config;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return exit_data;
  } catch (const SmcAbort& e) {
    err << "numerical abort: " << e.what() << "\n";
    return exit_numerical;
  } catch (const FilterFailure& e) {
    err << "numerical abort: " << e.what() << "\n";
    return exit_numerical;
  } catch (const SchemaViolation& e) {
    err << "internal error: " << e.what() << "\n";
    return exit_internal;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << "\n";
    return exit_config;
  } catch (const nlohmann::json::exception& e) {
    err << "config error: " << e.what() << "\n";
    return exit_config;
  } catch (const std::runtime_error& e) {
    err << "numerical abort: " << e.what() << "\n";
    return exit_numerical;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return exit_internal;
  }
}

}  // namespace pnsmc
