// Unit tests for signal generation, simulation, file formats and scoring
// (module data).

#include "pnsmc/data.hpp"
#include "reference.hpp"

#include <gtest/gtest.h>

#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

using namespace pnsmc;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pnsmc_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

/// Magnitude of the DFT of x at integer bin k.
double dft_mag(const std::vector<double>& x, int k) {
  std::complex<double> s = 0.0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * std::polar(1.0, -2.0 * std::numbers::pi * k * i / n);
  return std::abs(s) / n;
}

}  // namespace

TEST(Multisine, SingleLineIsPureCosine) {
  MultisineSpec s;
  s.f_min = 5.0;
  s.f_max = 5.0;
  s.n_lines = 1;
  s.amplitude = 3.0;
  s.ramp_fraction = 0.0;
  s.phases = {0.0};
  const double rate = 1000.0;
  const auto u = gen_multisine(s, 1.0, rate);
  ASSERT_EQ(u.size(), 1000u);
  for (std::size_t i = 0; i < u.size(); ++i)
    EXPECT_NEAR(u[i], 3.0 * std::cos(2 * std::numbers::pi * 5.0 * i / rate), 1e-9);
}

TEST(Multisine, EnergyOnlyOnRequestedLines) {
  // Lines at integer multiples of 1/duration: no leakage.
  MultisineSpec s;
  s.f_min = 2.0;
  s.f_max = 20.0;
  s.n_lines = 10;
  s.amplitude = 1.0;
  s.ramp_fraction = 0.0;
  s.phase_seed = 3;
  const auto u = gen_multisine(s, 1.0, 512.0);
  std::vector<bool> line(257, false);
  for (double f : s.frequencies()) line[static_cast<std::size_t>(std::lround(f))] = true;
  double on = 0.0, off = 0.0;
  for (int k = 0; k <= 256; ++k) {
    const double m = dft_mag(u, k);
    (line[k] ? on : off) = std::max(line[k] ? on : off, m);
  }
  EXPECT_LT(20 * std::log10(off / on), -60.0);
}

TEST(Multisine, PeakScalingAndRamp) {
  MultisineSpec s;
  s.f_min = 1.0;
  s.f_max = 30.0;
  s.n_lines = 30;
  s.amplitude = 208.0;
  s.phase_seed = 1;
  const auto u = gen_multisine(s, 2.0, 2048.0);
  const std::size_t ramp = static_cast<std::size_t>(0.1 * u.size());
  double peak = 0.0;
  for (std::size_t i = ramp; i < u.size(); ++i) peak = std::max(peak, std::abs(u[i]));
  EXPECT_NEAR(peak, 208.0, 1e-9);
  EXPECT_EQ(u[0], 0.0);
  EXPECT_LT(std::abs(u[ramp / 10]), 0.2 * 208.0);
}

TEST(Multisine, RmsInvariantToPhaseSeed) {
  MultisineSpec s;
  s.f_min = 0.5;
  s.f_max = 100.0;
  s.n_lines = 200;
  s.amplitude = 50.0;
  s.rms_scaling = true;
  s.ramp_fraction = 0.0;
  std::vector<double> r;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    s.phase_seed = seed;
    r.push_back(rms(gen_multisine(s, 2.0, 1024.0)));
  }
  for (double v : r) EXPECT_NEAR(v / r[0], 1.0, 0.05);
  EXPECT_NEAR(r[0], 50.0, 1e-9);
}

TEST(Multisine, BoucWenDefaults) {
  MultisineSpec s;  // 0.5-100 Hz, 2000 lines, 208 N peak, 10% ramp
  const auto u = gen_multisine(s, 3.0, 131072.0);
  EXPECT_EQ(u.size(), 393216u);
  double peak = 0.0;
  for (std::size_t i = u.size() / 10; i < u.size(); ++i) peak = std::max(peak, std::abs(u[i]));
  EXPECT_NEAR(peak, 208.0, 1e-6);
}

TEST(Multisine, NyquistViolationRejected) {
  MultisineSpec s;
  s.f_max = 600.0;
  EXPECT_THROW(gen_multisine(s, 1.0, 1000.0), std::invalid_argument);
  s.f_max = 100.0;
  s.ramp_fraction = 1.0;
  EXPECT_THROW(gen_multisine(s, 1.0, 1000.0), std::invalid_argument);
}

TEST(Multisine, DeterministicUnderSeed) {
  MultisineSpec s;
  s.n_lines = 50;
  s.phase_seed = 9;
  EXPECT_EQ(gen_multisine(s, 0.5, 4096.0), gen_multisine(s, 0.5, 4096.0));
}

TEST(SineSweep, FrequencyAndAmplitude) {
  SineSweepSpec s;
  s.amplitude = 40.0;
  s.f_start = 20.0;
  s.f_stop = 50.0;
  s.sweep_rate = 10.0 / 60.0;
  const auto u = gen_sine_sweep(s, 2.0, 4096.0);
  ASSERT_EQ(u.size(), 8192u);
  double peak = 0.0;
  for (double v : u) peak = std::max(peak, std::abs(v));
  EXPECT_NEAR(peak, 40.0, 0.01);
  // Near t = 0 the signal oscillates at about 20 Hz: 40 zero crossings per s.
  int crossings = 0;
  for (std::size_t i = 1; i < 4096; ++i) crossings += (u[i - 1] < 0) != (u[i] < 0);
  EXPECT_NEAR(crossings, 40, 2);
}

TEST(Rk4, LinearOscillatorClosedForm) {
  // Free response of x'' + 2 zeta w x' + w^2 x = 0 from x(0) = 1.
  const double m = 1.0, c = 0.4, k = 100.0, w = std::sqrt(k / m), zeta = c / (2 * std::sqrt(k * m));
  const double wd = w * std::sqrt(1 - zeta * zeta);
  const double rate = 131072.0;
  const std::vector<double> u(static_cast<std::size_t>(rate) + 1, 0.0);
  const auto tr = rk4_simulate(linear_oscillator_model(), {m, c, k}, u, rate, Eigen::Vector2d(1.0, 0.0));
  double err = 0.0;
  for (std::size_t i = 0; i < u.size(); i += 97) {
    const double t = i / rate;
    const double x = std::exp(-zeta * w * t) * (std::cos(wd * t) + zeta * w / wd * std::sin(wd * t));
    err = std::max(err, std::abs(tr.states(static_cast<Eigen::Index>(i), 0) - x));
  }
  EXPECT_LT(err, 1e-9);
}

TEST(Rk4, ExponentialDecay) {
  const std::vector<double> u(1001, 0.0);
  const auto tr = rk4_simulate(reference::decay_model(), {}, u, 1000.0, Eigen::VectorXd::Ones(1));
  for (std::size_t i = 0; i < u.size(); i += 50) EXPECT_NEAR(tr.states(static_cast<Eigen::Index>(i), 0), std::exp(-static_cast<double>(i) / 1000.0), 1e-10);
}

TEST(Rk4, ZeroInputZeroStateStaysZero) {
  const std::vector<double> u(500, 0.0);
  const auto tr = rk4_simulate(bouc_wen_model(), bouc_wen_default_truth(), u, 4096.0, Eigen::VectorXd::Zero(3), 4);
  EXPECT_TRUE(tr.states.isZero(0.0));
  for (double y : tr.observed) EXPECT_EQ(y, 0.0);
}

TEST(Rk4, FourthOrderOnDuffing) {
  const ModelSpec m = duffing_model();
  const ParameterVector th{1.0, 0.2, 1.0, 1.0};
  const Eigen::Vector2d x0(1.0, 0.0);
  const double T = 5.0;
  const Eigen::VectorXd fine = reference::rk4(m, th, x0, 0.0, 0.1 / 80, 4000);
  std::vector<double> errs;
  for (int k = 0; k < 4; ++k) {
    const long steps = 50L << k;
    errs.push_back((reference::rk4(m, th, x0, 0.0, T / steps, steps) - fine).norm());
  }
  for (int k = 1; k < 4; ++k) {
    const double ratio = errs[k - 1] / errs[k];
    EXPECT_GE(ratio, 12.0) << "halving " << k;
    EXPECT_LE(ratio, 20.0) << "halving " << k;
  }
}

TEST(Rk4, DivergenceNamesTheStep) {
  const std::vector<double> u(100, 1.0);
  try {
    rk4_simulate(duffing_model(), {1e-9, 0.0, 0.0, 1e200}, u, 10.0, Eigen::Vector2d(1.0, 0.0));
    FAIL() << "expected divergence";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(Rk4, StoredAccelerationMatchesRhsAfterDecimation) {
  MultisineSpec ms;
  ms.n_lines = 40;
  ms.f_max = 60.0;
  ms.phase_seed = 2;
  const double fine_rate = 4096.0 * 8;
  const auto u = gen_multisine(ms, 0.25, fine_rate);
  const ModelSpec m = bouc_wen_model();
  const auto theta = bouc_wen_default_truth();
  const auto tr = rk4_simulate(m, theta, u, fine_rate, Eigen::VectorXd::Zero(3));
  TimeSeriesDataset ds;
  ds.rate_hz = fine_rate;
  for (std::size_t i = 0; i < u.size(); ++i) {
    ds.t.push_back(i / fine_rate);
    ds.u.push_back(u[i]);
    ds.y.push_back(tr.observed[i]);
  }
  const auto dec = downsample(ds, 8);
  for (std::size_t j = 0; j < dec.size(); ++j) {
    const Eigen::VectorXd x = tr.states.row(static_cast<Eigen::Index>(8 * j)).transpose();
    EXPECT_NEAR(dec.y[j], m(x, dec.u[j], theta)[1], 1e-12 * (1 + std::abs(dec.y[j])));
  }
}

TEST(Rk4, ResolutionErrorShrinksWithRate) {
  MultisineSpec ms;
  ms.n_lines = 20;
  ms.f_max = 20.0;
  ms.phase_seed = 4;
  const auto u = gen_multisine(ms, 1.0, 1024.0);
  const ModelSpec m = duffing_model();
  const double coarse = rk4_resolution_error(m, {1, 0.5, 100, 1000}, u, 1024.0, Eigen::Vector2d::Zero(), 1);
  const double fine = rk4_resolution_error(m, {1, 0.5, 100, 1000}, u, 1024.0, Eigen::Vector2d::Zero(), 4);
  EXPECT_LT(fine, coarse / 50.0);
}

TEST(Downsample, Examples) {
  TimeSeriesDataset ds;
  ds.rate_hz = 131072.0;
  for (int i = 0; i < 3 * 131072; ++i) {
    ds.t.push_back(i / 131072.0);
    ds.u.push_back(i);
    ds.y.push_back(-i);
  }
  const auto same = downsample(ds, 1);
  EXPECT_EQ(same.y, ds.y);
  const auto d = downsample(ds, 32);
  EXPECT_EQ(d.size(), 12288u);
  EXPECT_EQ(d.rate_hz, 4096.0);
  EXPECT_NO_THROW(d.validate());
  EXPECT_EQ(d.u[5], 160.0);
  EXPECT_THROW(downsample(ds, 0), std::invalid_argument);
}

TEST(Noise, Examples) {
  std::vector<double> sig(100000);
  for (std::size_t i = 0; i < sig.size(); ++i) sig[i] = std::sqrt(2.0) * std::sin(0.001 * i * 2 * std::numbers::pi);
  std::mt19937_64 rng(1);
  EXPECT_EQ(add_noise(sig, 0.0, rng), sig);
  const double r = rms(sig);
  std::mt19937_64 a(5), b(5);
  const auto na = add_noise(sig, 0.05, a);
  EXPECT_EQ(na, add_noise(sig, 0.05, b));
  std::vector<double> diff(sig.size());
  for (std::size_t i = 0; i < sig.size(); ++i) diff[i] = na[i] - sig[i];
  EXPECT_NEAR(rms(diff) / (0.05 * r), 1.0, 0.02);
  EXPECT_THROW(add_noise(sig, -0.1, rng), std::invalid_argument);
}

TEST(Files, RoundTripIsLossless) {
  const auto dir = scratch_dir("roundtrip");
  TimeSeriesDataset ds;
  ds.rate_hz = 4096.0;
  ds.observed = Observed::acceleration;
  ds.units = "m/s^2";
  ds.provenance = "unit test";
  ds.truth = {{"m", 2.0}, {"c", 0.1 + 0.2}};
  ds.noise_std = 1.0 / 3.0;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> N(0.0, 1e-3);
  for (int i = 0; i < 257; ++i) {
    ds.t.push_back(i / 4096.0);
    ds.u.push_back(N(rng) * 1e5);
    ds.y.push_back(i == 7 ? std::nan("") : N(rng));
  }
  save_dataset(ds, dir / "d.csv");
  const auto back = load_dataset(dir / "d.csv");
  ASSERT_EQ(back.size(), ds.size());
  EXPECT_EQ(back.t, ds.t);
  EXPECT_EQ(back.u, ds.u);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (i == 7)
      EXPECT_TRUE(std::isnan(back.y[i]));
    else
      EXPECT_EQ(back.y[i], ds.y[i]);
  }
  EXPECT_EQ(back.rate_hz, 4096.0);
  EXPECT_EQ(back.observed, Observed::acceleration);
  EXPECT_EQ(back.truth, ds.truth);
  EXPECT_EQ(*back.noise_std, *ds.noise_std);
  EXPECT_EQ(back.provenance, "unit test");
}

TEST(Files, EmptyDatasetHasHeader) {
  const auto dir = scratch_dir("empty");
  TimeSeriesDataset ds;
  ds.rate_hz = 10.0;
  save_dataset(ds, dir / "e.csv");
  std::ifstream in(dir / "e.csv");
  std::string header, rest;
  std::getline(in, header);
  EXPECT_EQ(header, "t,u,y");
  EXPECT_FALSE(std::getline(in, rest));
  EXPECT_EQ(load_dataset(dir / "e.csv").size(), 0u);
}

TEST(Files, FixtureParsesExactly) {
  const auto dir = scratch_dir("fixture");
  write_file(dir / "f.csv", "t,u,y\n0,1.5,-2\n0.25,2.5,3e-3\n0.5,-0.125,7\n");
  const auto ds = load_dataset(dir / "f.csv");
  EXPECT_EQ(ds.t, (std::vector<double>{0.0, 0.25, 0.5}));
  EXPECT_EQ(ds.u, (std::vector<double>{1.5, 2.5, -0.125}));
  EXPECT_EQ(ds.y, (std::vector<double>{-2.0, 3e-3, 7.0}));
  EXPECT_EQ(ds.rate_hz, 4.0);
}

TEST(Files, NamedErrors) {
  const auto dir = scratch_dir("errors");
  write_file(dir / "a.csv", "t,u\n0,1\n");
  try {
    load_dataset(dir / "a.csv");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("missing column 'y'"), std::string::npos);
  }
  write_file(dir / "b.csv", "t,u,y\n0,1,2\n0.1,1,2\n0.3,1,2\n");
  EXPECT_THROW(load_dataset(dir / "b.csv"), DataError);
  write_file(dir / "c.csv", "t,u,y\n0,abc,2\n");
  EXPECT_THROW(load_dataset(dir / "c.csv"), DataError);
  EXPECT_THROW(load_dataset(dir / "missing.csv"), DataError);
}

TEST(Files, SilverboxAndEmpsSchemas) {
  const auto dir = scratch_dir("ingest");
  write_file(dir / "sb.csv", "V1,V2\n0.1,0.01\n0.2,0.02\n0.3,0.03\n");
  const auto sb = load_dataset(dir / "sb.csv", "silverbox");
  EXPECT_EQ(sb.rate_hz, 610.35);
  EXPECT_EQ(sb.observed, Observed::voltage);
  EXPECT_EQ(sb.t[2], 2.0 / 610.35);
  EXPECT_EQ(sb.y[1], 0.02);
  write_file(dir / "emps.csv", "t,force,position\n0,1,0\n0.001,2,0.5\n0.002,3,1\n");
  const auto em = load_dataset(dir / "emps.csv", "emps");
  EXPECT_EQ(em.rate_hz, 1000.0);
  EXPECT_EQ(em.u[2], 3.0);
  EXPECT_THROW(load_dataset(dir / "emps.csv", "foo"), std::invalid_argument);
}

TEST(Rmse, TruthOnCleanDataIsExact) {
  MultisineSpec ms;
  ms.n_lines = 30;
  ms.f_max = 50.0;
  ms.phase_seed = 1;
  const double rate = 1024.0;
  const auto u = gen_multisine(ms, 0.5, rate);
  const ModelSpec m = bouc_wen_model();
  const auto theta = bouc_wen_default_truth();
  const auto tr = rk4_simulate(m, theta, u, rate, Eigen::VectorXd::Zero(3), 8);
  TimeSeriesDataset test;
  test.rate_hz = rate;
  test.observed = Observed::acceleration;
  for (std::size_t i = 0; i < u.size(); ++i) {
    test.t.push_back(i / rate);
    test.u.push_back(u[i]);
    test.y.push_back(tr.observed[i]);
  }
  ParameterVector off = theta;
  off[2] *= 1.01;
  RmseOptions o;
  o.substeps = 8;
  const auto rep = rmse_per_particle(m, {theta, off}, test, o);
  EXPECT_LT(rep.per_particle[0], 1e-8);
  EXPECT_LT(rep.per_particle[0], rep.per_particle[1]);
  EXPECT_EQ(rep.n_particles, 2u);
  EXPECT_EQ(rep.n_diverged, 0u);
  EXPECT_EQ(rep.min, rep.per_particle[0]);
  EXPECT_EQ(rep.max, rep.per_particle[1]);
  EXPECT_EQ(rep.unit, "m/s^2");
}

TEST(Rmse, DivergedParticlesExcluded) {
  TimeSeriesDataset test = reference::unobserved_grid(50, 10.0);
  for (auto& u : test.u) u = 1.0;
  for (auto& y : test.y) y = 0.0;
  const auto rep = rmse_per_particle(duffing_model(), {{1, 0.5, 100, 0}, {1e-9, 0, 0, 1e200}}, test);
  EXPECT_EQ(rep.n_diverged, 1u);
  EXPECT_TRUE(std::isinf(rep.per_particle[1]));
  EXPECT_EQ(rep.mean, rep.per_particle[0]);
}

TEST(Rmse, TableLayoutMatchesPaperRows) {
  const std::string table = render_rmse_table({{"Bouc-Wen", "m/s^2", 4.6313e-6, 5.2e-6, 4.9e-6},
                                               {"Silverbox", "V", 1.1e-4, 1.3e-4, 1.2e-4}});
  std::istringstream in(table);
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(in, line)) rows.push_back(line);
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0].rfind("Case Study:", 0), 0u);
  EXPECT_EQ(rows[2].rfind("Minimum Particle", 0), 0u);
  EXPECT_EQ(rows[3].rfind("Maximum Particle", 0), 0u);
  EXPECT_EQ(rows[4].rfind("Mean Particle", 0), 0u);
  EXPECT_NE(rows[2].find("4.6313e-06"), std::string::npos);
  EXPECT_NE(rows[1].find("RMS (V)"), std::string::npos);
}
