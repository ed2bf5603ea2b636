#pragma once

#include "pnsmc/data.hpp"
#include "pnsmc/models.hpp"
#include "pnsmc/odefilter.hpp"
#include "pnsmc/smc.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace pnsmc {

using Json = nlohmann::ordered_json;

/// Invalid or incomplete run configuration; the message names the field.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Every configurable value with its default. Null means "derive": from the
/// model (prior, truth), from the dataset (observed, R_y) or from the seed
/// (phase seeds).
inline Json default_config() {
  return Json::parse(R"({
  "model": {"name": "bouc_wen", "constants": {}, "observed": null},
  "prior": null,
  "truth": null,
  "generate": {
    "x0": null,
    "check_resolution": "warn",
    "resolution_tolerance": 1e-8,
    "train": {
      "input": {"kind": "multisine", "f_min": 0.5, "f_max": 100.0, "n_lines": 2000, "amplitude": 208.0,
                "scaling": "peak", "ramp_fraction": 0.1, "phase_seed": null},
      "rate_hz": 4096.0, "oversample": 32, "input_hold": "fine", "duration_s": 3.0, "noise_fraction": 0.05
    },
    "test": {
      "input": {"kind": "sine_sweep", "amplitude": 40.0, "f_start": 20.0, "f_stop": 50.0, "sweep_rate": 0.16666666666666666},
      "rate_hz": 4096.0, "oversample": 32, "input_hold": "sample", "duration_s": 2.0, "noise_fraction": 0.05
    }
  },
  "data": {
    "train": null, "test": null, "schema": "native",
    "columns": {"time": null, "input": null, "output": null},
    "rate_hz": null, "max_samples": null
  },
  "solver": {"q": 1, "n_sub": 1, "R": 0.0, "R_y": null, "calibration": "online", "gamma_init": 1.0,
             "gamma_min": 1e-12, "eps_chol": 1e-12, "sigma0_extra": 100.0, "pseudo_updates": true, "x0": null},
  "smc": {"N": 128, "ess_threshold": 0.5, "move_count": 1, "proposal_inflation": 1.0, "proposal_jitter": 1e-10,
          "paper_exact_acceptance": false, "log_sampling": false},
  "evaluate": {"posterior": null, "substeps": 32, "skip": 0, "x0": null},
  "output": {"state_particles": 8, "histogram_bins": 30},
  "seed": null,
  "threads": 0,
  "out": "out"
})");
}

namespace detail {

/// Recursive overlay of `user` onto `base`; keys absent from `base` are
/// rejected. Objects whose default is null (prior, truth, ...) and the
/// excitation specs are taken verbatim.
inline void overlay(Json& base, const Json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError((path.empty() ? std::string("config") : path) + ": expected an object");
  for (const auto& [key, value] : user.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + here + "'");
    Json& slot = base[key];
    const bool verbatim = here == "model.constants" || here == "generate.train.input" || here == "generate.test.input";
    if (slot.is_object() && value.is_object() && !verbatim)
      overlay(slot, value, here);
    else
      slot = value;
  }
}

inline const Json& at(const Json& j, const std::string& key, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) throw ConfigError("missing config key '" + path + "." + key + "'");
  return j.at(key);
}

inline double num(const Json& j, const std::string& key, const std::string& path) {
  const Json& v = at(j, key, path);
  if (!v.is_number()) throw ConfigError("config key '" + path + "." + key + "' must be a number");
  return v.get<double>();
}

inline long long integer(const Json& j, const std::string& key, const std::string& path) {
  const Json& v = at(j, key, path);
  if (!v.is_number_integer() && !(v.is_number() && v.get<double>() == std::floor(v.get<double>())))
    throw ConfigError("config key '" + path + "." + key + "' must be an integer");
  return v.get<long long>();
}

inline bool boolean(const Json& j, const std::string& key, const std::string& path) {
  const Json& v = at(j, key, path);
  if (!v.is_boolean()) throw ConfigError("config key '" + path + "." + key + "' must be true or false");
  return v.get<bool>();
}

inline std::string str(const Json& j, const std::string& key, const std::string& path) {
  const Json& v = at(j, key, path);
  if (!v.is_string()) throw ConfigError("config key '" + path + "." + key + "' must be a string");
  return v.get<std::string>();
}

inline std::optional<Eigen::VectorXd> vec_or_null(const Json& j, const std::string& key, const std::string& path) {
  const Json& v = at(j, key, path);
  if (v.is_null()) return std::nullopt;
  if (!v.is_array()) throw ConfigError("config key '" + path + "." + key + "' must be an array of numbers or null");
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) throw ConfigError("config key '" + path + "." + key + "' must contain numbers only");
    out[static_cast<Eigen::Index>(i)] = v[i].get<double>();
  }
  return out;
}

/// Stable 64-bit FNV-1a digest used to tag outputs with their config.
inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model-level defaults

/// Generating parameters used when the config gives no truth. The
/// hysteretic values are those of the public benchmark (delta positive);
/// the others are chosen for the desk-scale studies.
inline ParameterVector default_truth(const std::string& model) {
  if (model == "bouc_wen") return bouc_wen_default_truth();
  if (model == "duffing") return {1.0, 0.5, 100.0, 1000.0};
  if (model == "linear_oscillator") return {1.0, 0.5, 100.0};
  if (model == "emps") return {95.1, 203.5, 20.4, -3.2};
  throw ConfigError("unknown model '" + model + "'");
}

/// Prior used when the config gives none: Table 1 for the hysteretic system;
/// log-space priors around (perturbed) default truths otherwise.
inline PriorSpec default_prior(const std::string& model) {
  if (model == "bouc_wen") return bouc_wen_reference_prior();
  PriorSpec p;
  const ParameterVector truth = default_truth(model);
  const ModelSpec spec = make_model(model);
  for (Eigen::Index i = 0; i < truth.size(); ++i) {
    if (spec.positive[static_cast<std::size_t>(i)])
      p.entries.push_back({std::log(truth[i]) + 0.1, 0.09, Space::log});
    else
      p.entries.push_back({truth[i] + 1.0, 4.0, Space::natural});
  }
  return p;
}

// ---------------------------------------------------------------------------
// Typed views of the configuration

struct InputSpec {
  std::string kind = "multisine";
  MultisineSpec multisine;
  SineSweepSpec sweep;
};

struct GenerationSpec {
  InputSpec input;
  double rate_hz = 4096.0;
  int oversample = 32;
  /// "fine": input evaluated on the integration grid; "sample": input
  /// evaluated at the output rate and held between samples.
  std::string input_hold = "fine";
  double duration_s = 3.0;
  double noise_fraction = 0.05;
};

struct RunConfig {
  Json json;
  std::filesystem::path base_dir;

  std::string model_name;
  std::map<std::string, double> constants;
  std::optional<Observed> observed;
  std::optional<std::uint64_t> seed;
  unsigned threads = 0;
  std::filesystem::path out;

  ModelSpec model(std::optional<Observed> fallback = std::nullopt) const {
    return make_model(model_name, constants, observed ? observed : fallback);
  }
  PriorSpec prior() const;
  ParameterVector truth() const;
  std::optional<GenerationSpec> generation(const std::string& which) const;
  SolverConfig solver(const TimeSeriesDataset* train) const;
  SmcConfig smc() const;
  std::optional<std::filesystem::path> path(const std::string& section, const std::string& key) const;
  IngestSchema ingest() const;
  std::optional<Eigen::VectorXd> x0(const std::string& section) const {
    return detail::vec_or_null(json.at(section), "x0", section);
  }
  std::uint64_t require_seed() const {
    if (!seed) throw ConfigError("a seed is required: set 'seed' in the config or pass --seed");
    return *seed;
  }

  /// The resolved configuration minus invocation-only keys (out, threads):
  /// re-running from it reproduces every output byte for byte.
  Json snapshot() const {
    Json s = json;
    s.erase("out");
    s.erase("threads");
    return s;
  }
  /// Content-addressed: input file paths are replaced by a digest of the
  /// file bytes, so the hash does not depend on where the inputs live.
  std::string hash() const {
    Json s = snapshot();
    for (const auto& [section, key] : {std::pair{"data", "train"}, std::pair{"data", "test"}, std::pair{"evaluate", "posterior"}}) {
      if (!s.contains(section) || !s[section].contains(key) || !s[section][key].is_string()) continue;
      std::ifstream in(s[section][key].get<std::string>(), std::ios::binary);
      if (!in) continue;
      std::ostringstream bytes;
      bytes << in.rdbuf();
      s[section][key] = "fnv1a:" + detail::fnv1a_hex(bytes.str());
    }
    return detail::fnv1a_hex(s.dump());
  }
};

inline std::optional<std::filesystem::path> RunConfig::path(const std::string& section, const std::string& key) const {
  const Json& v = detail::at(json.at(section), key, section);
  if (v.is_null()) return std::nullopt;
  if (!v.is_string()) throw ConfigError("config key '" + section + "." + key + "' must be a path string or null");
  return std::filesystem::path(v.get<std::string>());
}

inline PriorSpec RunConfig::prior() const {
  const ModelSpec spec = make_model(model_name, constants);
  const Json& j = json.at("prior");
  if (j.is_null()) return default_prior(model_name);
  if (!j.is_object()) throw ConfigError("config key 'prior' must map parameter names to {mean, variance, space}");
  PriorSpec p;
  for (const auto& name : spec.param_names) {
    if (!j.contains(name)) throw ConfigError("prior: missing entry for parameter '" + name + "'");
    const Json& e = j.at(name);
    const std::string path = "prior." + name;
    PriorEntry entry;
    entry.mean = detail::num(e, "mean", path);
    entry.variance = detail::num(e, "variance", path);
    const std::string space = e.contains("space") ? detail::str(e, "space", path) : "natural";
    if (space == "natural")
      entry.space = Space::natural;
    else if (space == "log")
      entry.space = Space::log;
    else
      throw ConfigError("config key '" + path + ".space' must be \"natural\" or \"log\"");
    for (const auto& [k, _] : e.items())
      if (k != "mean" && k != "variance" && k != "space") throw ConfigError("unknown config key '" + path + "." + k + "'");
    p.entries.push_back(entry);
  }
  for (const auto& [k, _] : j.items())
    if (std::find(spec.param_names.begin(), spec.param_names.end(), k) == spec.param_names.end())
      throw ConfigError("prior: '" + k + "' is not a parameter of model '" + model_name + "'");
  try {
    p.validate(&spec);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return p;
}

inline ParameterVector RunConfig::truth() const {
  const ModelSpec spec = make_model(model_name, constants);
  const Json& j = json.at("truth");
  if (j.is_null()) return default_truth(model_name);
  if (!j.is_object()) throw ConfigError("config key 'truth' must map parameter names to values");
  ParameterVector th{Eigen::VectorXd(spec.n_params())};
  for (std::size_t i = 0; i < spec.param_names.size(); ++i) {
    const auto& name = spec.param_names[i];
    th[static_cast<Eigen::Index>(i)] = detail::num(j, name, "truth");
  }
  for (const auto& [k, _] : j.items())
    if (std::find(spec.param_names.begin(), spec.param_names.end(), k) == spec.param_names.end())
      throw ConfigError("truth: '" + k + "' is not a parameter of model '" + model_name + "'");
  return th;
}

inline std::optional<GenerationSpec> RunConfig::generation(const std::string& which) const {
  const Json& j = json.at("generate").at(which);
  if (j.is_null()) return std::nullopt;
  const std::string path = "generate." + which;
  GenerationSpec g;
  g.rate_hz = detail::num(j, "rate_hz", path);
  g.oversample = static_cast<int>(detail::integer(j, "oversample", path));
  g.input_hold = detail::str(j, "input_hold", path);
  g.duration_s = detail::num(j, "duration_s", path);
  g.noise_fraction = detail::num(j, "noise_fraction", path);
  if (!(g.rate_hz > 0.0)) throw ConfigError(path + ".rate_hz must be > 0");
  if (g.oversample < 1) throw ConfigError(path + ".oversample must be >= 1");
  if (g.input_hold != "fine" && g.input_hold != "sample")
    throw ConfigError(path + ".input_hold must be \"fine\" or \"sample\"");
  if (!(g.duration_s >= 0.0)) throw ConfigError(path + ".duration_s must be >= 0");
  if (!(g.noise_fraction >= 0.0)) throw ConfigError(path + ".noise_fraction must be >= 0");

  const Json& in = detail::at(j, "input", path);
  const std::string ip = path + ".input";
  g.input.kind = detail::str(in, "kind", ip);
  auto allow = [&](std::initializer_list<const char*> keys) {
    for (const auto& [k, _] : in.items()) {
      bool ok = false;
      for (const char* a : keys) ok = ok || k == a;
      if (!ok) throw ConfigError("unknown config key '" + ip + "." + k + "'");
    }
  };
  if (g.input.kind == "multisine") {
    allow({"kind", "f_min", "f_max", "n_lines", "amplitude", "scaling", "ramp_fraction", "phase_seed", "phases"});
    auto& m = g.input.multisine;
    m.f_min = detail::num(in, "f_min", ip);
    m.f_max = detail::num(in, "f_max", ip);
    m.n_lines = static_cast<int>(detail::integer(in, "n_lines", ip));
    m.amplitude = detail::num(in, "amplitude", ip);
    const std::string scaling = in.contains("scaling") ? detail::str(in, "scaling", ip) : "peak";
    if (scaling != "peak" && scaling != "rms") throw ConfigError(ip + ".scaling must be \"peak\" or \"rms\"");
    m.rms_scaling = scaling == "rms";
    m.ramp_fraction = in.contains("ramp_fraction") ? detail::num(in, "ramp_fraction", ip) : 0.0;
    if (in.contains("phase_seed") && !in.at("phase_seed").is_null())
      m.phase_seed = static_cast<std::uint64_t>(detail::integer(in, "phase_seed", ip));
    else
      m.phase_seed = make_stream(require_seed(), 10, which == "train" ? 0 : 1)();
    if (in.contains("phases") && !in.at("phases").is_null()) {
      const auto ph = detail::vec_or_null(in, "phases", ip);
      m.phases.assign(ph->data(), ph->data() + ph->size());
    }
    try {
      m.validate(g.input_hold == "fine" ? g.rate_hz * g.oversample : g.rate_hz);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(ip + ": " + e.what());
    }
  } else if (g.input.kind == "sine_sweep") {
    allow({"kind", "amplitude", "f_start", "f_stop", "sweep_rate"});
    auto& s = g.input.sweep;
    s.amplitude = detail::num(in, "amplitude", ip);
    s.f_start = detail::num(in, "f_start", ip);
    s.f_stop = detail::num(in, "f_stop", ip);
    s.sweep_rate = detail::num(in, "sweep_rate", ip);
  } else if (g.input.kind == "zero") {
    allow({"kind"});
  } else {
    throw ConfigError(ip + ".kind must be \"multisine\", \"sine_sweep\" or \"zero\"");
  }
  return g;
}

inline SolverConfig RunConfig::solver(const TimeSeriesDataset* train) const {
  const Json& j = json.at("solver");
  SolverConfig s;
  s.q = static_cast<int>(detail::integer(j, "q", "solver"));
  s.n_sub = static_cast<int>(detail::integer(j, "n_sub", "solver"));
  s.R = detail::num(j, "R", "solver");
  if (j.at("R_y").is_null()) {
    if (!train || !train->noise_std)
      throw ConfigError("solver.R_y is null and the training data sidecar carries no noise_std; set solver.R_y");
    s.R_y = *train->noise_std * *train->noise_std;
    if (!(s.R_y > 0.0)) s.R_y = SolverConfig{}.R_y;
  } else {
    s.R_y = detail::num(j, "R_y", "solver");
  }
  const std::string cal = detail::str(j, "calibration", "solver");
  if (cal == "online")
    s.calibration = Calibration::online;
  else if (cal == "fixed")
    s.calibration = Calibration::fixed;
  else
    throw ConfigError("solver.calibration must be \"online\" or \"fixed\"");
  s.gamma_init = detail::num(j, "gamma_init", "solver");
  s.gamma_min = detail::num(j, "gamma_min", "solver");
  s.eps_chol = detail::num(j, "eps_chol", "solver");
  s.sigma0_extra = detail::num(j, "sigma0_extra", "solver");
  s.pseudo_updates = detail::boolean(j, "pseudo_updates", "solver");
  if (auto x0 = detail::vec_or_null(j, "x0", "solver")) s.x0 = *x0;
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("solver: ") + e.what());
  }
  return s;
}

inline SmcConfig RunConfig::smc() const {
  const Json& j = json.at("smc");
  SmcConfig c;
  const long long n = detail::integer(j, "N", "smc");
  if (n < 2) throw ConfigError("smc.N must be >= 2");
  c.N = static_cast<std::size_t>(n);
  c.ess_threshold = detail::num(j, "ess_threshold", "smc");
  c.move_count = static_cast<int>(detail::integer(j, "move_count", "smc"));
  c.proposal_inflation = detail::num(j, "proposal_inflation", "smc");
  c.proposal_jitter = detail::num(j, "proposal_jitter", "smc");
  c.paper_exact_acceptance = detail::boolean(j, "paper_exact_acceptance", "smc");
  c.log_sampling = detail::boolean(j, "log_sampling", "smc");
  c.seed = require_seed();
  c.threads = threads;
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline IngestSchema RunConfig::ingest() const {
  const Json& d = json.at("data");
  IngestSchema s;
  try {
    s = ingest_schema(detail::str(d, "schema", "data"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("data.schema: ") + e.what());
  }
  const Json& cols = detail::at(d, "columns", "data");
  if (!cols.is_object()) throw ConfigError("data.columns must be an object");
  for (const auto& [k, v] : cols.items()) {
    if (v.is_null()) continue;
    if (!v.is_string()) throw ConfigError("data.columns." + k + " must be a column name or null");
    if (k == "time")
      s.time_column = v.get<std::string>().empty() ? std::nullopt : std::optional(v.get<std::string>());
    else if (k == "input")
      s.input_column = v.get<std::string>();
    else if (k == "output")
      s.output_column = v.get<std::string>();
    else
      throw ConfigError("unknown config key 'data.columns." + k + "'");
  }
  if (!d.at("rate_hz").is_null()) s.rate_hz = detail::num(d, "rate_hz", "data");
  if (observed) {
    s.observed = *observed;
    s.units = unit_of(*observed);
  }
  return s;
}

/// Builds a RunConfig from an optional file plus command-line overrides.
/// Relative data paths resolve against the config file's directory and are
/// stored absolute, so snapshots are location independent.
inline RunConfig load_run_config(const std::optional<std::filesystem::path>& file,
                                 std::optional<std::uint64_t> seed_override = std::nullopt,
                                 std::optional<unsigned> threads_override = std::nullopt,
                                 std::optional<std::filesystem::path> out_override = std::nullopt) {
  RunConfig rc;
  rc.json = default_config();
  rc.base_dir = std::filesystem::current_path();
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("cannot open config file " + file->string());
    Json user;
    try {
      user = Json::parse(in);
    } catch (const Json::parse_error& e) {
      throw ConfigError(file->string() + ": " + e.what());
    }
    detail::overlay(rc.json, user, "");
    rc.base_dir = std::filesystem::absolute(*file).parent_path();
  }
  if (seed_override) rc.json["seed"] = *seed_override;
  if (threads_override) rc.json["threads"] = *threads_override;
  if (out_override) rc.json["out"] = out_override->string();

  try {
    rc.model_name = detail::str(rc.json.at("model"), "name", "model");
    Json& consts = rc.json["model"]["constants"];
    if (!consts.is_object()) throw ConfigError("model.constants must be an object");
    for (const auto& [k, v] : consts.items()) {
      if (!v.is_number()) throw ConfigError("model.constants." + k + " must be a number");
      rc.constants[k] = v.get<double>();
    }
    // Show the model's own defaults for constants the user left out.
    Json filled = Json::object();
    for (const auto& [k, v] : make_model(rc.model_name, rc.constants).constants) filled[k] = v;
    consts = filled;
    const Json& obs = rc.json.at("model").at("observed");
    if (!obs.is_null()) rc.observed = observed_from_string(detail::str(rc.json.at("model"), "observed", "model"));
    (void)make_model(rc.model_name, rc.constants);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  const Json& seed = rc.json.at("seed");
  if (!seed.is_null()) {
    if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<long long>() >= 0))
      throw ConfigError("config key 'seed' must be a non-negative integer");
    rc.seed = seed.get<std::uint64_t>();
  }
  const long long threads = detail::integer(rc.json, "threads", "config");
  if (threads < 0) throw ConfigError("config key 'threads' must be >= 0");
  rc.threads = static_cast<unsigned>(threads);
  rc.out = detail::str(rc.json, "out", "config");
  // An `out` written in a config file is relative to that file, like the
  // data paths; a --out given on the command line is relative to the cwd.
  if (!out_override && rc.out.is_relative()) rc.out = (rc.base_dir / rc.out).lexically_normal();

  for (const auto& [section, key] : {std::pair{"data", "train"}, std::pair{"data", "test"}, std::pair{"evaluate", "posterior"}}) {
    Json& v = rc.json[section][key];
    if (v.is_null()) continue;
    if (!v.is_string()) throw ConfigError(std::string("config key '") + section + "." + key + "' must be a path string");
    std::filesystem::path p = v.get<std::string>();
    if (p.is_relative()) p = rc.base_dir / p;
    v = p.lexically_normal().string();
  }
  const Json& ms = rc.json.at("data").at("max_samples");
  if (!ms.is_null() && !(ms.is_number_integer() && ms.get<long long>() > 0))
    throw ConfigError("data.max_samples must be a positive integer or null");
  return rc;
}

}  // namespace pnsmc
