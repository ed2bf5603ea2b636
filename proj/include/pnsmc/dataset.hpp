#pragma once

#include "pnsmc/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pnsmc {

/// Uniformly sampled records (t, u, y) plus metadata. A NaN in y marks a
/// sample without a measurement.
struct TimeSeriesDataset {
  double rate_hz = 1.0;
  std::vector<double> t;
  std::vector<double> u;
  std::vector<double> y;
  Observed observed = Observed::displacement;
  std::string units;
  std::string provenance;
  /// Generating parameters, when the data was simulated.
  std::vector<std::pair<std::string, double>> truth;
  std::optional<double> noise_std;

  std::size_t size() const { return t.size(); }
  bool empty() const { return t.empty(); }
  double dt() const { return 1.0 / rate_hz; }

  /// Checks equal column lengths and uniform spacing (1e-9 relative).
  void validate() const {
    if (!(rate_hz > 0.0) || !std::isfinite(rate_hz)) throw std::invalid_argument("dataset: rate must be positive");
    if (u.size() != t.size() || y.size() != t.size())
      throw std::invalid_argument("dataset: columns t, u, y have unequal lengths (" + std::to_string(t.size()) + ", " +
                                  std::to_string(u.size()) + ", " + std::to_string(y.size()) + ")");
    const double h = dt();
    for (std::size_t i = 1; i < t.size(); ++i) {
      const double step = t[i] - t[i - 1];
      if (!(std::abs(step - h) <= 1e-9 * h + 8.0 * std::numeric_limits<double>::epsilon() * std::abs(t[i])))
        throw std::invalid_argument("dataset: non-uniform sampling at row " + std::to_string(i));
    }
  }

  /// First n records.
  TimeSeriesDataset prefix(std::size_t n) const {
    TimeSeriesDataset out = *this;
    n = std::min(n, size());
    out.t.resize(n);
    out.u.resize(n);
    out.y.resize(n);
    return out;
  }
};

}  // namespace pnsmc
