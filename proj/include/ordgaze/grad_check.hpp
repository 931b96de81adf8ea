#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ordgaze/ops.hpp"
#include "ordgaze/tensor.hpp"

namespace ordgaze {

struct GradCheckOptions {
  double tolerance = 1e-5;
  double step = 1e-5;
  // Denominator floor for the relative error, so that coordinates whose true
  // gradient is ~0 are judged on absolute error instead.
  double abs_floor = 1e-4;
  // 0 checks every coordinate; otherwise a seeded random subset per tensor.
  std::size_t max_coords_per_param = 0;
  unsigned seed = 0;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  // Probes whose +/- step changed a relu or clip activation pattern; the
  // central difference is meaningless there.
  std::size_t skipped_nonsmooth = 0;
  bool finite = true;
  bool passed = true;
};

struct GradCheckReport {
  std::string fragment;
  std::vector<GradCheckEntry> entries;
  std::vector<std::string> tape_ops;

  bool passed() const {
    return std::all_of(entries.begin(), entries.end(),
                       [](const GradCheckEntry& e) { return e.passed; });
  }

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }

  std::string summary() const {
    std::ostringstream os;
    os << fragment << (passed() ? " PASS" : " FAIL") << " (ops:";
    for (const auto& op : tape_ops) os << ' ' << op;
    os << ')';
    for (const auto& e : entries) {
      os << "\n  " << e.name << ": max_rel=" << e.max_rel_error
         << " checked=" << e.checked << " nonsmooth=" << e.skipped_nonsmooth
         << (e.finite ? "" : " NON-FINITE") << (e.passed ? "" : " <-- FAIL");
    }
    return os.str();
  }
};

using NamedTensor = std::pair<std::string, Tensor<double>>;

/// Compares the analytic gradient of `loss_fn` (a scalar built from `params`)
/// against central finite differences, per parameter tensor.
inline GradCheckReport grad_check(const std::string& name,
                                  const std::vector<NamedTensor>& params,
                                  const std::function<Tensor<double>()>& loss_fn,
                                  const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  report.fragment = name;
  for (auto [_, p] : params) p.zero_grad();
  {
    Tensor<double> loss = loss_fn();
    auto tape = Tape<double>::record(loss);
    report.tape_ops = tape.op_names();
    std::reverse(report.tape_ops.begin(), report.tape_ops.end());
    tape.replay();
  }

  auto probe = [&](std::uint64_t& hash) {
    NoGradGuard no_grad;
    ops::KinkMonitor monitor;
    ops::KinkScope scope(monitor);
    const double v = loss_fn().item();
    hash = monitor.hash;
    return v;
  };

  std::mt19937_64 rng(opt.seed);
  for (auto [pname, p] : params) {
    GradCheckEntry entry;
    entry.name = pname;
    const std::size_t n = p.numel();
    std::vector<double> analytic(n, 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords_per_param && opt.max_coords_per_param < n) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords_per_param);
    }
    std::uint64_t base_hash = 0;
    probe(base_hash);
    auto& values = p.storage();
    for (std::size_t i : coords) {
      if (!std::isfinite(analytic[i])) {
        entry.finite = false;
        continue;
      }
      const double original = values[i];
      std::uint64_t h_plus = 0, h_minus = 0;
      values[i] = original + opt.step;
      const double f_plus = probe(h_plus);
      values[i] = original - opt.step;
      const double f_minus = probe(h_minus);
      values[i] = original;
      if (h_plus != base_hash || h_minus != base_hash) {
        ++entry.skipped_nonsmooth;
        continue;
      }
      const double numeric = (f_plus - f_minus) / (2.0 * opt.step);
      if (!std::isfinite(numeric)) {
        entry.finite = false;
        continue;
      }
      const double denom =
          std::max({std::abs(analytic[i]), std::abs(numeric), opt.abs_floor});
      entry.max_rel_error =
          std::max(entry.max_rel_error, std::abs(analytic[i] - numeric) / denom);
      ++entry.checked;
    }
    entry.passed = entry.finite && entry.max_rel_error <= opt.tolerance;
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace ordgaze
