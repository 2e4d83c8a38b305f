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

// Utility proxies evaluated on validation splits, and spread statistics over
// per-client values.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedmentor/error.hpp"
#include "fedmentor/synth.hpp"
#include "fedmentor/trainer.hpp"

namespace fedmentor {

inline const std::string kAccuracy = "accuracy";
inline const std::string kNegEvalLoss = "neg_eval_loss";

struct UtilityReport {
  // Pooled over every validation sample: accuracy and -mean cross-entropy.
  std::map<std::string, double> per_metric;
  // Keyed by position in the evaluated dataset list.
  std::map<std::size_t, double> per_client_accuracy;
  std::map<std::size_t, double> per_client_loss;

  friend bool operator==(const UtilityReport&, const UtilityReport&) = default;
};

template <typename F>
concept LogitModel = requires(F f, std::span<const double> x) {
  { f(x) } -> std::convertible_to<double>;
};

// Scores `model` on the validation split of each dataset. Training splits
// are never read; a split tagged otherwise is rejected.
template <LogitModel Model>
UtilityReport evaluate(Model&& model, std::span<const Dataset> datasets) {
  UtilityReport report;
  std::size_t total = 0, correct_total = 0;
  double loss_total = 0.0;
  for (std::size_t c = 0; c < datasets.size(); ++c) {
    const Split& split = datasets[c].val;
    if (split.kind != SplitKind::kValidation) {
      throw InvalidArgument("evaluate: dataset " + datasets[c].domain.name +
                            " offers a non-validation split");
    }
    std::size_t correct = 0;
    double loss = 0.0;
    for (const auto& s : split.samples) {
      const double logit = model(std::span<const double>(s.x));
      if ((logit > 0.0 ? 1 : 0) == s.label) ++correct;
      loss += bce_with_logits(logit, s.label);
    }
    const auto n = static_cast<double>(split.size());
    report.per_client_accuracy[c] = split.size() ? correct / n : 0.0;
    report.per_client_loss[c] = split.size() ? loss / n : 0.0;
    total += split.size();
    correct_total += correct;
    loss_total += loss;
  }
  const double n = total ? static_cast<double>(total) : 1.0;
  report.per_metric[kAccuracy] = static_cast<double>(correct_total) / n;
  report.per_metric[kNegEvalLoss] = -loss_total / n;
  return report;
}

inline UtilityReport evaluate(const BackboneModel& model,
                              const AdapterSet& adapters,
                              std::span<const Dataset> datasets) {
  return evaluate(
      [&](std::span<const double> x) { return forward(model, adapters, x); },
      datasets);
}

struct SpreadSummary {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  double std = 0.0;  // population
  double spread = 0.0;
};

inline SpreadSummary spread(std::span<const double> values) {
  if (values.empty()) throw InvalidArgument("spread: empty value list");
  // Sorting first makes the sums independent of input order.
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  SpreadSummary s;
  s.min = v.front();
  s.max = v.back();
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  double sq = 0.0;
  for (double x : v) sq += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(sq / static_cast<double>(v.size()));
  s.spread = s.max - s.min;
  return s;
}

}  // namespace fedmentor
