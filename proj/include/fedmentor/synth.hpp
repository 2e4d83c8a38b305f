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

// Synthetic binary-classification domains with controlled shift.
//
// Latent z ~ N(0, diag(feature_scales^2)); observed x = R(rotation_angle) z,
// where R rotates the (x0, x1) plane; label = [true_weights . x > 0], flipped
// with probability label_noise. An anisotropic latent makes the rotation a
// genuine change of P(x), and per-domain true_weights change P(y | x).

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "fedmentor/dp.hpp"
#include "fedmentor/error.hpp"
#include "fedmentor/linalg.hpp"

namespace fedmentor {

struct DomainSpec {
  DomainId domain;
  std::size_t n_train = 1;
  std::size_t n_val = 1;
  std::size_t input_dim = 2;
  std::vector<double> true_weights;
  double rotation_angle = 0.0;
  double label_noise = 0.0;
  // Latent per-coordinate std; empty means all ones.
  std::vector<double> feature_scales;

  void validate() const {
    if (n_train < 1 || n_val < 1) {
      throw InvalidArgument(domain.name + ": n_train and n_val must be >= 1");
    }
    if (input_dim < 1) throw InvalidArgument(domain.name + ": input_dim < 1");
    if (true_weights.size() != input_dim) {
      throw InvalidArgument(domain.name + ": true_weights has " +
                            std::to_string(true_weights.size()) +
                            " entries, input_dim is " +
                            std::to_string(input_dim));
    }
    if (!feature_scales.empty() && feature_scales.size() != input_dim) {
      throw InvalidArgument(domain.name +
                            ": feature_scales length must equal input_dim");
    }
    if (!(label_noise >= 0.0 && label_noise < 0.5)) {
      throw InvalidArgument(domain.name + ": label_noise must be in [0, 0.5)");
    }
  }
};

struct Sample {
  std::vector<double> x;
  int label = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

enum class SplitKind { kTrain, kValidation };

struct Split {
  SplitKind kind = SplitKind::kTrain;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  friend bool operator==(const Split&, const Split&) = default;
};

struct Dataset {
  DomainId domain;
  Split train{SplitKind::kTrain, {}};
  Split val{SplitKind::kValidation, {}};

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

namespace synth_detail {

inline Sample draw(const DomainSpec& spec, Rng& rng) {
  const std::size_t n = spec.input_dim;
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = spec.feature_scales.empty() ? 1.0 : spec.feature_scales[i];
    x[i] = s * rng.normal();
  }
  if (n >= 2 && spec.rotation_angle != 0.0) {
    const double c = std::cos(spec.rotation_angle);
    const double s = std::sin(spec.rotation_angle);
    const double x0 = x[0], x1 = x[1];
    x[0] = c * x0 - s * x1;
    x[1] = s * x0 + c * x1;
  }
  double score = 0.0;
  for (std::size_t i = 0; i < n; ++i) score += spec.true_weights[i] * x[i];
  int label = score > 0.0 ? 1 : 0;
  // Always consume the flip draw so label_noise never shifts the stream.
  if (rng.uniform() < spec.label_noise) label = 1 - label;
  return Sample{std::move(x), label};
}

}  // namespace synth_detail

// Train and validation splits come from two independent child streams.
inline Dataset make_domain(const DomainSpec& spec, Rng& rng) {
  spec.validate();
  Rng train_rng(splitmix64(rng.next_u64()));
  Rng val_rng(splitmix64(rng.next_u64() ^ 0x5bd1e995ULL));
  Dataset out;
  out.domain = spec.domain;
  out.train.samples.reserve(spec.n_train);
  for (std::size_t i = 0; i < spec.n_train; ++i) {
    out.train.samples.push_back(synth_detail::draw(spec, train_rng));
  }
  out.val.samples.reserve(spec.n_val);
  for (std::size_t i = 0; i < spec.n_val; ++i) {
    out.val.samples.push_back(synth_detail::draw(spec, val_rng));
  }
  return out;
}

// Corpus sizes of the three mental-health domains.
inline constexpr std::size_t kDreadditSize = 3553;
inline constexpr std::size_t kIrfSize = 3522;
inline constexpr std::size_t kMultiWdSize = 3281;

struct FederationSpecOptions {
  double scale = 0.1;
  double val_fraction = 0.1;
  std::size_t input_dim = 8;
  double label_noise = 0.0;
  // Std of the per-domain perturbation added to the shared labelling
  // direction.
  double weight_jitter = 0.1;
};

inline std::size_t scaled_count(std::size_t n, double scale) {
  const auto v = static_cast<std::size_t>(std::llround(static_cast<double>(n) * scale));
  return v < 1 ? 1 : v;
}

// Dreaddit, IRF and MultiWD stand-ins: sizes proportional to the real
// corpora, rotations 0, pi/3 and 2pi/3, and a shared labelling direction
// perturbed per domain.
inline std::vector<DomainSpec> default_federation_specs(
    Rng& rng, const FederationSpecOptions& opt = {}) {
  const std::size_t n = opt.input_dim;
  if (n < 2) throw InvalidArgument("default federation needs input_dim >= 2");
  std::vector<double> base(n);
  for (std::size_t i = 0; i < n; ++i) {
    base[i] = (i % 2 == 0 ? 1.0 : -1.0) / (1.0 + 0.5 * static_cast<double>(i));
  }
  std::vector<double> scales(n, 1.0);
  scales[0] = 2.0;
  scales[1] = 0.5;

  const struct {
    const DomainId* id;
    std::size_t size;
    double angle;
  } table[] = {
      {&kDreaddit, kDreadditSize, 0.0},
      {&kIrf, kIrfSize, std::numbers::pi / 3.0},
      {&kMultiWd, kMultiWdSize, 2.0 * std::numbers::pi / 3.0},
  };

  std::vector<DomainSpec> specs;
  for (const auto& row : table) {
    DomainSpec s;
    s.domain = *row.id;
    s.n_train = scaled_count(row.size, opt.scale);
    s.n_val = scaled_count(s.n_train, opt.val_fraction);
    s.input_dim = n;
    s.true_weights = base;
    for (double& w : s.true_weights) w += opt.weight_jitter * rng.normal();
    s.rotation_angle = row.angle;
    s.label_noise = opt.label_noise;
    s.feature_scales = scales;
    specs.push_back(std::move(s));
  }
  return specs;
}

// CSV: x0..x{n-1},label with 17 significant digits.
inline void write_split_csv(const Split& split, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  const std::size_t n = split.samples.empty() ? 0 : split.samples[0].x.size();
  for (std::size_t i = 0; i < n; ++i) out << 'x' << i << ',';
  out << "label\n";
  char buf[32];
  for (const auto& s : split.samples) {
    for (double v : s.x) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << buf << ',';
    }
    out << s.label << '\n';
  }
}

inline Split read_split_csv(const std::string& path, SplitKind kind) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  Split split{kind, {}};
  std::string line;
  std::getline(in, line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<double> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        cells.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw Error(path + ":" + std::to_string(lineno) + ": bad cell '" +
                    cell + "'");
      }
    }
    if (cells.empty()) continue;
    Sample s;
    s.label = static_cast<int>(cells.back());
    cells.pop_back();
    s.x = std::move(cells);
    split.samples.push_back(std::move(s));
  }
  return split;
}

}  // namespace fedmentor
