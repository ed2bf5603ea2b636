#pragma once

#include "pnsmc/dataset.hpp"
#include "pnsmc/models.hpp"
#include "pnsmc/parallel.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pnsmc {

/// Raised for unreadable, malformed or inconsistent data files.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Excitation signals

struct MultisineSpec {
  double f_min = 0.5;
  double f_max = 100.0;
  int n_lines = 2000;
  /// Peak (or RMS when rms_scaling is set) of the signal after the ramp.
  double amplitude = 208.0;
  bool rms_scaling = false;
  double ramp_fraction = 0.1;
  std::uint64_t phase_seed = 0;
  /// Explicit phases (radians), one per line; overrides the seeded draw.
  std::vector<double> phases;

  std::vector<double> frequencies() const {
    std::vector<double> f(static_cast<std::size_t>(n_lines));
    for (int k = 0; k < n_lines; ++k)
      f[static_cast<std::size_t>(k)] = n_lines == 1 ? f_min : f_min + k * (f_max - f_min) / (n_lines - 1);
    return f;
  }

  void validate(double rate_hz) const {
    if (n_lines < 1) throw std::invalid_argument("multisine: n_lines must be >= 1");
    if (!(f_min > 0.0) || !(f_max >= f_min) || (n_lines > 1 && !(f_max > f_min)))
      throw std::invalid_argument("multisine: need 0 < f_min < f_max");
    if (!(f_max < 0.5 * rate_hz))
      throw std::invalid_argument("multisine: f_max violates the Nyquist limit of the generation rate");
    if (!(ramp_fraction >= 0.0 && ramp_fraction < 1.0)) throw std::invalid_argument("multisine: ramp_fraction must lie in [0, 1)");
    if (!(amplitude >= 0.0)) throw std::invalid_argument("multisine: amplitude must be >= 0");
    if (!phases.empty() && phases.size() != static_cast<std::size_t>(n_lines))
      throw std::invalid_argument("multisine: phases must have one entry per line");
  }
};

/// Random-phase multisine sampled at rate_hz for duration_s seconds. The
/// signal is scaled so its peak (or RMS) after the ramp equals
/// spec.amplitude, then
/// ramped linearly from zero over the first ramp_fraction of the samples.
inline std::vector<double> gen_multisine(const MultisineSpec& spec, double duration_s, double rate_hz) {
  spec.validate(rate_hz);
  const auto n = static_cast<std::size_t>(std::llround(duration_s * rate_hz));
  std::vector<double> out(n, 0.0);
  if (n == 0) return out;

  const auto freqs = spec.frequencies();
  std::vector<double> phases = spec.phases;
  if (phases.empty()) {
    std::mt19937_64 rng(spec.phase_seed);
    std::uniform_real_distribution<double> unif(0.0, 2.0 * std::numbers::pi);
    phases.resize(freqs.size());
    for (auto& p : phases) p = unif(rng);
  }

  // Per-line phasor recurrence, re-anchored on exact values every block.
  constexpr std::size_t block = 512;
  for (std::size_t k = 0; k < freqs.size(); ++k) {
    const double w = 2.0 * std::numbers::pi * freqs[k] / rate_hz;
    const std::complex<double> rot = std::polar(1.0, w);
    for (std::size_t start = 0; start < n; start += block) {
      std::complex<double> z = std::polar(1.0, w * static_cast<double>(start) + phases[k]);
      const std::size_t stop = std::min(n, start + block);
      for (std::size_t i = start; i < stop; ++i) {
        out[i] += z.real();
        z *= rot;
      }
    }
  }

  const auto ramp_n = static_cast<std::size_t>(std::floor(spec.ramp_fraction * static_cast<double>(n)));
  double level = 0.0;
  const std::size_t first = std::min(ramp_n, n - 1);
  if (spec.rms_scaling) {
    for (std::size_t i = first; i < n; ++i) level += out[i] * out[i];
    level = std::sqrt(level / static_cast<double>(n - first));
  } else {
    for (std::size_t i = first; i < n; ++i) level = std::max(level, std::abs(out[i]));
  }
  const double scale = level > 0.0 ? spec.amplitude / level : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ramp = i < ramp_n ? static_cast<double>(i) / static_cast<double>(ramp_n) : 1.0;
    out[i] *= scale * ramp;
  }
  return out;
}

struct SineSweepSpec {
  double amplitude = 40.0;
  double f_start = 20.0;
  double f_stop = 50.0;
  /// Sweep rate in Hz per second (10 Hz/min = 1/6).
  double sweep_rate = 10.0 / 60.0;
};

/// Linear sine sweep; the instantaneous frequency stops rising at f_stop.
inline std::vector<double> gen_sine_sweep(const SineSweepSpec& spec, double duration_s, double rate_hz) {
  if (!(spec.f_stop < 0.5 * rate_hz)) throw std::invalid_argument("sine sweep: f_stop violates the Nyquist limit");
  const auto n = static_cast<std::size_t>(std::llround(duration_s * rate_hz));
  const double t_end = spec.sweep_rate > 0.0 ? (spec.f_stop - spec.f_start) / spec.sweep_rate
                                             : std::numeric_limits<double>::infinity();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / rate_hz;
    double phase;
    if (t <= t_end) {
      phase = spec.f_start * t + 0.5 * spec.sweep_rate * t * t;
    } else {
      phase = spec.f_start * t_end + 0.5 * spec.sweep_rate * t_end * t_end + spec.f_stop * (t - t_end);
    }
    out[i] = spec.amplitude * std::sin(2.0 * std::numbers::pi * phase);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Deterministic simulation

struct Trajectory {
  double rate_hz = 1.0;
  /// One row per sample.
  Eigen::MatrixXd states;
  /// Measured channel at each sample.
  std::vector<double> observed;
};

/// Classical RK4 with the input held constant over each sample interval;
/// `substeps` RK4 steps per interval. The observed channel at sample j uses
/// u[j] when it is a derivative.
inline Trajectory rk4_simulate(const ModelSpec& model, const ParameterVector& theta, const std::vector<double>& u,
                               double rate_hz, const Eigen::VectorXd& x1, int substeps = 1) {
  if (x1.size() != model.dim) throw std::invalid_argument("rk4_simulate: initial state has wrong dimension");
  if (substeps < 1) throw std::invalid_argument("rk4_simulate: substeps must be >= 1");
  model.check_parameters(theta);
  const std::size_t n = u.size();
  Trajectory tr;
  tr.rate_hz = rate_hz;
  tr.states.resize(static_cast<Eigen::Index>(n), model.dim);
  tr.observed.resize(n);
  const double h = 1.0 / (rate_hz * substeps);
  Eigen::VectorXd x = x1;
  std::size_t j = 0;
  try {
    for (j = 0; j < n; ++j) {
      const double t = static_cast<double>(j) / rate_hz;
      tr.states.row(static_cast<Eigen::Index>(j)) = x.transpose();
      tr.observed[j] = model.observe(x, model(x, u[j], theta, t));
      if (j + 1 == n) break;
      for (int s = 0; s < substeps; ++s) {
        const double ts = t + s * h;
        const Eigen::VectorXd k1 = model(x, u[j], theta, ts);
        const Eigen::VectorXd k2 = model(x + 0.5 * h * k1, u[j], theta, ts + 0.5 * h);
        const Eigen::VectorXd k3 = model(x + 0.5 * h * k2, u[j], theta, ts + 0.5 * h);
        const Eigen::VectorXd k4 = model(x + h * k3, u[j], theta, ts + h);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      }
      if (!x.allFinite()) throw std::domain_error("non-finite state");
    }
  } catch (const std::domain_error& e) {
    throw std::runtime_error("rk4_simulate: trajectory diverged at step " + std::to_string(j) + " (" + e.what() + ")");
  }
  return tr;
}

/// Relative terminal-state change when the RK4 step is halved, scaled by the
/// largest state magnitude along the trajectory.
inline double rk4_resolution_error(const ModelSpec& model, const ParameterVector& theta, const std::vector<double>& u,
                                   double rate_hz, const Eigen::VectorXd& x1, int substeps = 1) {
  const Trajectory a = rk4_simulate(model, theta, u, rate_hz, x1, substeps);
  const Trajectory b = rk4_simulate(model, theta, u, rate_hz, x1, 2 * substeps);
  if (u.empty()) return 0.0;
  const Eigen::Index last = a.states.rows() - 1;
  const double scale = std::max(a.states.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
  return (a.states.row(last) - b.states.row(last)).cwiseAbs().maxCoeff() / scale;
}

// ---------------------------------------------------------------------------
// Dataset transforms

/// Keeps every factor-th record starting with the first. With anti_alias the
/// output channel is first replaced by a centred moving average of length
/// `factor` (meant for rough experimental records; off by default).
inline TimeSeriesDataset downsample(const TimeSeriesDataset& ds, int factor, bool anti_alias = false) {
  if (factor < 1) throw std::invalid_argument("downsample: factor must be a positive integer");
  std::vector<double> y = ds.y;
  if (anti_alias && factor > 1) {
    const auto n = static_cast<std::ptrdiff_t>(ds.size());
    const std::ptrdiff_t half = factor / 2;
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      double s = 0.0;
      std::ptrdiff_t cnt = 0;
      for (std::ptrdiff_t k = std::max<std::ptrdiff_t>(0, i - half); k <= std::min(n - 1, i - half + factor - 1); ++k) {
        s += ds.y[static_cast<std::size_t>(k)];
        ++cnt;
      }
      y[static_cast<std::size_t>(i)] = s / static_cast<double>(cnt);
    }
  }
  TimeSeriesDataset out = ds;
  out.rate_hz = ds.rate_hz / factor;
  out.t.clear();
  out.u.clear();
  out.y.clear();
  for (std::size_t i = 0; i < ds.size(); i += static_cast<std::size_t>(factor)) {
    out.t.push_back(ds.t[i]);
    out.u.push_back(ds.u[i]);
    out.y.push_back(y[i]);
  }
  return out;
}

inline double rms(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s / static_cast<double>(x.size()));
}

/// Adds i.i.d. N(0, (fraction * RMS(signal))^2) noise.
inline std::vector<double> add_noise(const std::vector<double>& signal, double fraction, std::mt19937_64& rng) {
  if (!(fraction >= 0.0)) throw std::invalid_argument("add_noise: fraction must be >= 0");
  std::vector<double> out = signal;
  if (fraction == 0.0) return out;
  std::normal_distribution<double> normal(0.0, fraction * rms(signal));
  for (double& v : out) v += normal(rng);
  return out;
}

// ---------------------------------------------------------------------------
// File formats

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    if (cell.size() >= 2 && cell.front() == '"' && cell.back() == '"') cell = cell.substr(1, cell.size() - 2);
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, std::size_t row, const std::string& column) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    throw DataError("row " + std::to_string(row) + ", column '" + column + "': cannot parse '" + s + "'");
  return v;
}

}  // namespace detail

/// Sidecar path: same stem, ".meta.json".
inline std::filesystem::path sidecar_path(const std::filesystem::path& csv) {
  std::filesystem::path p = csv;
  p.replace_extension(".meta.json");
  return p;
}

inline nlohmann::ordered_json dataset_metadata(const TimeSeriesDataset& ds) {
  nlohmann::ordered_json meta;
  meta["rate_hz"] = ds.rate_hz;
  meta["observed"] = to_string(ds.observed);
  meta["units"] = ds.units.empty() ? unit_of(ds.observed) : ds.units;
  meta["provenance"] = ds.provenance;
  if (!ds.truth.empty()) {
    nlohmann::ordered_json truth = nlohmann::ordered_json::object();
    for (const auto& [k, v] : ds.truth) truth[k] = v;
    meta["theta_true"] = truth;
  }
  if (ds.noise_std) meta["noise_std"] = *ds.noise_std;
  return meta;
}

/// Writes `t,u,y` CSV (17 significant digits, LF) plus the metadata sidecar.
inline void save_dataset(const TimeSeriesDataset& ds, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "t,u,y\n";
  for (std::size_t i = 0; i < ds.size(); ++i)
    out << detail::format_double(ds.t[i]) << ',' << detail::format_double(ds.u[i]) << ','
        << detail::format_double(ds.y[i]) << '\n';
  std::ofstream meta(sidecar_path(path), std::ios::binary);
  if (!meta) throw DataError("cannot write " + sidecar_path(path).string());
  meta << dataset_metadata(ds).dump(2) << '\n';
}

/// Column mapping for CSV ingestion. Without a time column the timestamps
/// are rebuilt from the rate.
struct IngestSchema {
  std::string name = "native";
  std::optional<std::string> time_column = "t";
  std::string input_column = "u";
  std::string output_column = "y";
  std::optional<double> rate_hz;
  Observed observed = Observed::displacement;
  std::string units;
};

inline IngestSchema ingest_schema(const std::string& tag) {
  IngestSchema s;
  if (tag == "native") return s;
  if (tag == "silverbox") {
    s.name = tag;
    s.time_column.reset();
    s.input_column = "V1";
    s.output_column = "V2";
    s.rate_hz = 610.35;
    s.observed = Observed::voltage;
    s.units = "V";
    return s;
  }
  if (tag == "emps") {
    s.name = tag;
    s.time_column = "t";
    s.input_column = "force";
    s.output_column = "position";
    s.rate_hz = 1000.0;
    s.observed = Observed::displacement;
    s.units = "m";
    return s;
  }
  throw std::invalid_argument("unknown dataset schema '" + tag + "' (expected native, silverbox or emps)");
}

/// Reads a CSV dataset per `schema`. A sidecar next to the file, when
/// present, supplies rate, observed quantity, provenance and truth.
inline TimeSeriesDataset load_dataset(const std::filesystem::path& path, const IngestSchema& schema = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file, expected a header line");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
  const auto header = detail::split_csv_line(line);
  auto column = [&](const std::string& name) -> std::size_t {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw DataError(path.string() + ": missing column '" + name + "'");
  };
  const std::optional<std::size_t> ti = schema.time_column ? std::optional(column(*schema.time_column)) : std::nullopt;
  const std::size_t ui = column(schema.input_column), yi = column(schema.output_column);

  TimeSeriesDataset ds;
  ds.observed = schema.observed;
  ds.units = schema.units;
  ds.provenance = schema.name == "native" ? "" : schema.name + " ingestion of " + path.filename().string();
  std::optional<double> rate = schema.rate_hz;

  const auto meta_path = sidecar_path(path);
  if (std::filesystem::exists(meta_path)) {
    try {
      std::ifstream mf(meta_path);
      const auto meta = nlohmann::ordered_json::parse(mf);
      if (meta.contains("rate_hz")) rate = meta.at("rate_hz").get<double>();
      if (meta.contains("observed")) ds.observed = observed_from_string(meta.at("observed").get<std::string>());
      if (meta.contains("units")) ds.units = meta.at("units").get<std::string>();
      if (meta.contains("provenance")) ds.provenance = meta.at("provenance").get<std::string>();
      if (meta.contains("theta_true"))
        for (const auto& [k, v] : meta.at("theta_true").items()) ds.truth.emplace_back(k, v.get<double>());
      if (meta.contains("noise_std")) ds.noise_std = meta.at("noise_std").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(meta_path.string() + ": " + e.what());
    }
  }

  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    const std::size_t need = std::max({ui, yi, ti.value_or(0)}) + 1;
    if (cells.size() < need)
      throw DataError(path.string() + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                      " fields, expected at least " + std::to_string(need));
    if (ti) ds.t.push_back(detail::parse_double(cells[*ti], row, *schema.time_column));
    ds.u.push_back(detail::parse_double(cells[ui], row, schema.input_column));
    ds.y.push_back(detail::parse_double(cells[yi], row, schema.output_column));
  }

  if (!ti) {
    if (!rate) throw DataError(path.string() + ": no time column and no sample rate given");
    ds.t.resize(ds.u.size());
    for (std::size_t i = 0; i < ds.t.size(); ++i) ds.t[i] = static_cast<double>(i) / *rate;
  }
  if (!rate) {
    if (ds.t.size() < 2) throw DataError(path.string() + ": cannot infer the sample rate from fewer than 2 rows");
    rate = static_cast<double>(ds.t.size() - 1) / (ds.t.back() - ds.t.front());
  }
  ds.rate_hz = *rate;
  if (ds.units.empty()) ds.units = unit_of(ds.observed);
  try {
    ds.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return ds;
}

inline TimeSeriesDataset load_dataset(const std::filesystem::path& path, const std::string& schema_tag) {
  return load_dataset(path, ingest_schema(schema_tag));
}

// ---------------------------------------------------------------------------
// Scoring

struct RmseOptions {
  /// RK4 steps per sample interval.
  int substeps = 1;
  /// Leading samples excluded from the error (transient).
  std::size_t skip = 0;
  Eigen::VectorXd x0;
  unsigned threads = 1;
};

struct RmseReport {
  std::vector<double> per_particle;
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  std::size_t n_particles = 0;
  std::size_t n_diverged = 0;
  std::string unit;
};

/// Free-run simulation error of each particle on a test record. Divergent
/// particles get +inf and are left out of min/max/mean.
inline RmseReport rmse_per_particle(const ModelSpec& model, const std::vector<ParameterVector>& particles,
                                    const TimeSeriesDataset& test, const RmseOptions& opts = {}) {
  RmseReport rep;
  rep.n_particles = particles.size();
  rep.unit = test.units.empty() ? unit_of(test.observed) : test.units;
  rep.per_particle.assign(particles.size(), std::numeric_limits<double>::infinity());
  const Eigen::VectorXd x1 = opts.x0.size() ? opts.x0 : Eigen::VectorXd::Zero(model.dim);
  parallel_for(particles.size(), opts.threads, [&](std::size_t p) {
    try {
      const Trajectory tr = rk4_simulate(model, particles[p], test.u, test.rate_hz, x1, opts.substeps);
      double s = 0.0;
      std::size_t cnt = 0;
      for (std::size_t i = opts.skip; i < test.size(); ++i) {
        if (!std::isfinite(test.y[i])) continue;
        const double e = tr.observed[i] - test.y[i];
        s += e * e;
        ++cnt;
      }
      const double r = cnt ? std::sqrt(s / static_cast<double>(cnt)) : 0.0;
      if (std::isfinite(r)) rep.per_particle[p] = r;
    } catch (const std::exception&) {
      // stays +inf
    }
  });
  double sum = 0.0;
  std::size_t ok = 0;
  rep.min = std::numeric_limits<double>::infinity();
  rep.max = -std::numeric_limits<double>::infinity();
  for (double r : rep.per_particle) {
    if (!std::isfinite(r)) {
      ++rep.n_diverged;
      continue;
    }
    rep.min = std::min(rep.min, r);
    rep.max = std::max(rep.max, r);
    sum += r;
    ++ok;
  }
  if (ok == 0) {
    rep.min = rep.max = rep.mean = std::numeric_limits<double>::quiet_NaN();
  } else {
    rep.mean = sum / static_cast<double>(ok);
  }
  return rep;
}

/// One column of the case-study summary table.
struct RmseColumn {
  std::string case_name;
  std::string unit;
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
};

/// Plain-text table with Unit / Minimum / Maximum / Mean Particle rows.
inline std::string render_rmse_table(const std::vector<RmseColumn>& cols) {
  auto sci = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4e", v);
    return std::string(buf);
  };
  std::vector<std::vector<std::string>> rows = {{"Case Study:"}, {"Unit:"}, {"Minimum Particle"}, {"Maximum Particle"},
                                                {"Mean Particle"}};
  for (const auto& c : cols) {
    rows[0].push_back(c.case_name);
    rows[1].push_back("RMS (" + c.unit + ")");
    rows[2].push_back(sci(c.min));
    rows[3].push_back(sci(c.max));
    rows[4].push_back(sci(c.mean));
  }
  std::vector<std::size_t> width(cols.size() + 1, 0);
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  std::string out;
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      std::string cell = r[i];
      cell.resize(width[i], ' ');
      out += cell;
      out += i + 1 < r.size() ? " | " : "";
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    out += '\n';
  }
  return out;
}

}  // namespace pnsmc
