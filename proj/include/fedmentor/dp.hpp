// Copyright 2026 The FedMentor Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
#pragma once

// Domain-aware Gaussian privatization of adapter sets.
//
// Each adapter entry w at layer position p, factor kind t, for a client in
// domain d receives N(0, s^2) noise with
//
//   s = base_scale[p] * kind_multiplier[t] * scale_multiplier / eps[d]
//
// The server shrinks scale_multiplier by gate_factor whenever a utility proxy
// falls below its threshold, and decays every eps[d] once per round. Budgets
// are nominal: no clipping is applied by default, so updates have unbounded
// sensitivity and no formal (eps, delta) guarantee is claimed.

#include <algorithm>
#include <array>
#include <compare>
#include <map>
#include <optional>
#include <string>

#include "fedmentor/error.hpp"
#include "fedmentor/linalg.hpp"
#include "fedmentor/lora.hpp"

namespace fedmentor {

struct DomainId {
  std::string name;

  friend auto operator<=>(const DomainId&, const DomainId&) = default;
};

inline const DomainId kDreaddit{"Dreaddit"};
inline const DomainId kIrf{"IRF"};
inline const DomainId kMultiWd{"MultiWD"};

struct NoiseCalibration {
  // Indexed by LayerPosition.
  std::array<double, 3> base_scale = {0.01, 0.008, 0.005};
  // Indexed by AdapterKind.
  std::array<double, 2> kind_multiplier = {1.2, 0.8};
  double gate_factor = 0.8;
  // Product of every gate factor applied so far; 0 disables noise entirely.
  double scale_multiplier = 1.0;
  // Recorded for reporting; does not enter any noise computation.
  double nominal_delta = 1e-5;
  // Static-noise mode: every entry gets fixed_std * scale_multiplier,
  // independent of position, kind and budget.
  std::optional<double> fixed_std;
  // Per-matrix Frobenius clipping before noise. Off by default.
  std::optional<double> clip_norm;

  double base(LayerPosition p) const {
    return base_scale[static_cast<std::size_t>(p)];
  }
  double multiplier(AdapterKind k) const {
    return kind_multiplier[static_cast<std::size_t>(k)];
  }

  void validate() const {
    if (!(gate_factor > 0.0 && gate_factor < 1.0)) {
      throw InvalidArgument("gate_factor must lie in (0, 1), got " +
                            std::to_string(gate_factor));
    }
    if (!(scale_multiplier >= 0.0)) {
      throw InvalidArgument("scale_multiplier must be >= 0");
    }
    for (double v : base_scale) {
      if (!(v >= 0.0)) throw InvalidArgument("base scales must be >= 0");
    }
    for (double v : kind_multiplier) {
      if (!(v >= 0.0)) throw InvalidArgument("kind multipliers must be >= 0");
    }
    if (fixed_std && !(*fixed_std >= 0.0)) {
      throw InvalidArgument("fixed_std must be >= 0");
    }
    if (clip_norm && !(*clip_norm > 0.0)) {
      throw InvalidArgument("clip_norm must be > 0");
    }
  }
};

enum class DecayMode {
  // eps <- eps - rate * eps (current budget), i.e. geometric 0.9x decay.
  kCurrentFraction,
  // eps <- eps - rate * eps_initial, linear decay down to the floor.
  kInitialFraction,
};

class BudgetTable {
 public:
  BudgetTable() = default;

  explicit BudgetTable(std::map<DomainId, double> budgets,
                       double decay_rate = 0.1, double floor = 0.05,
                       DecayMode mode = DecayMode::kCurrentFraction)
      : entries_(budgets),
        initial_(std::move(budgets)),
        decay_rate_(decay_rate),
        floor_(floor),
        mode_(mode) {
    if (!(floor_ > 0.0)) throw InvalidArgument("budget floor must be > 0");
    if (!(decay_rate_ >= 0.0 && decay_rate_ < 1.0)) {
      throw InvalidArgument("decay rate must lie in [0, 1)");
    }
    for (auto& [domain, eps] : entries_) {
      if (!(eps > 0.0)) {
        throw InvalidArgument("budget for " + domain.name + " must be > 0");
      }
      eps = std::max(eps, floor_);
    }
  }

  // IRF 0.5, Dreaddit 2.0, MultiWD 1.5.
  static BudgetTable defaults() {
    return BudgetTable({{kIrf, 0.5}, {kDreaddit, 2.0}, {kMultiWd, 1.5}});
  }

  bool contains(const DomainId& d) const { return entries_.contains(d); }

  double epsilon(const DomainId& d) const {
    auto it = entries_.find(d);
    if (it == entries_.end()) {
      throw InvalidArgument("no privacy budget for domain '" + d.name + "'");
    }
    return it->second;
  }

  double initial(const DomainId& d) const {
    auto it = initial_.find(d);
    if (it == initial_.end()) {
      throw InvalidArgument("no privacy budget for domain '" + d.name + "'");
    }
    return it->second;
  }

  const std::map<DomainId, double>& entries() const { return entries_; }
  double decay_rate() const { return decay_rate_; }
  double floor() const { return floor_; }
  DecayMode mode() const { return mode_; }

  friend BudgetTable decay_budget(const BudgetTable& budgets);

 private:
  std::map<DomainId, double> entries_;
  std::map<DomainId, double> initial_;
  double decay_rate_ = 0.1;
  double floor_ = 0.05;
  DecayMode mode_ = DecayMode::kCurrentFraction;
};

// One round of budget decay, clamped at the floor.
inline BudgetTable decay_budget(const BudgetTable& budgets) {
  BudgetTable next = budgets;
  for (auto& [domain, eps] : next.entries_) {
    const double step = budgets.mode_ == DecayMode::kCurrentFraction
                            ? budgets.decay_rate_ * eps
                            : budgets.decay_rate_ * budgets.initial_.at(domain);
    eps = std::max(budgets.floor_, eps - step);
  }
  return next;
}

inline double noise_std(LayerPosition position, AdapterKind kind, double eps,
                        const NoiseCalibration& cal) {
  if (!(eps > 0.0)) {
    throw InvalidArgument("noise_std: eps must be > 0, got " +
                          std::to_string(eps));
  }
  if (cal.fixed_std) return *cal.fixed_std * cal.scale_multiplier;
  return cal.base(position) * cal.multiplier(kind) * cal.scale_multiplier /
         eps;
}

inline void clip_frobenius(Matrix& m, double max_norm) {
  const double norm = frobenius_norm(m);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (double& v : m.data()) v *= f;
  }
}

// Returns a noised copy of `set`. Matrices whose std is exactly zero are
// copied untouched (so -0.0 entries survive), which makes a zero multiplier
// an exact identity.
inline AdapterSet privatize(const AdapterSet& set, const DomainId& domain,
                            const BudgetTable& budgets,
                            const NoiseCalibration& cal, Rng& rng) {
  const double eps = budgets.epsilon(domain);
  AdapterSet out = set;
  for (auto& pair : out.pairs()) {
    const LayerPosition pos =
        classify_layer(pair.layer_index(), set.total_layers());
    for (AdapterKind kind : {AdapterKind::kA, AdapterKind::kB}) {
      Matrix& m = pair.factor(kind);
      if (cal.clip_norm) clip_frobenius(m, *cal.clip_norm);
      const double std = noise_std(pos, kind, eps, cal);
      if (std == 0.0) continue;
      for (double& v : m.data()) v += std * rng.normal();
    }
  }
  return out;
}

struct GateOutcome {
  NoiseCalibration calibration;
  bool triggered = false;
};

// Shrinks the noise multiplier once if any utility is strictly below its
// threshold.
inline GateOutcome apply_utility_gate(
    const NoiseCalibration& cal, const std::map<std::string, double>& utilities,
    const std::map<std::string, double>& thresholds) {
  bool below = false;
  for (const auto& [metric, tau] : thresholds) {
    auto it = utilities.find(metric);
    if (it == utilities.end()) {
      throw InvalidArgument("utility gate: metric '" + metric +
                            "' has a threshold but no reported value");
    }
    if (it->second < tau) below = true;
  }
  GateOutcome out{cal, below};
  if (below) out.calibration.scale_multiplier *= cal.gate_factor;
  return out;
}

}  // namespace fedmentor
