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

// Client-side model: a frozen tanh MLP backbone whose layers can each carry
// a low-rank adapter, topped by a frozen linear head producing one logit.
//
//   h_0 = x
//   z_l = (W_l + B_l A_l) h_l
//   h_{l+1} = tanh(z_l)   for l < L-1,   h_L = z_{L-1}
//   logit = head . h_L
//
// Only A_l and B_l receive gradients; W_l and head never change.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "fedmentor/error.hpp"
#include "fedmentor/linalg.hpp"
#include "fedmentor/lora.hpp"
#include "fedmentor/synth.hpp"

namespace fedmentor {

struct BackboneModel {
  std::vector<Matrix> layers;  // d_out x d_in
  std::vector<double> head;    // length d_out of the last layer

  // dims = {input, out_0, out_1, ...}; weights ~ N(0, 1/d_in).
  static BackboneModel random(std::span<const std::size_t> dims, Rng& rng) {
    if (dims.size() < 2) {
      throw InvalidArgument("backbone needs at least one layer");
    }
    BackboneModel m;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      m.layers.push_back(gaussian(rng, dims[l + 1], dims[l], 0.0,
                                  1.0 / std::sqrt(static_cast<double>(dims[l]))));
    }
    const double hs = 1.0 / std::sqrt(static_cast<double>(dims.back()));
    m.head.resize(dims.back());
    for (double& v : m.head) v = hs * rng.normal();
    return m;
  }

  std::size_t num_layers() const { return layers.size(); }
  std::size_t input_dim() const { return layers.front().cols(); }

  // FNV-1a over the bit patterns of every weight.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](double v) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    };
    for (const auto& w : layers) {
      for (double v : w.data()) mix(v);
    }
    for (double v : head) mix(v);
    return h;
  }
};

// One adapter per backbone layer with rank min(rank, d, k). A is drawn from
// N(0, a_init_std^2) and B is zero, so the initial update B A is zero.
inline AdapterSet init_adapters(const BackboneModel& model, std::size_t rank,
                                double a_init_std, Rng& rng) {
  if (rank == 0) throw InvalidArgument("adapter rank must be >= 1");
  std::vector<LoraPair> pairs;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const auto& w = model.layers[l];
    const std::size_t r = std::min({rank, w.rows(), w.cols()});
    pairs.emplace_back(l, gaussian(rng, r, w.cols(), 0.0, a_init_std),
                       Matrix(w.rows(), r));
  }
  return AdapterSet(model.num_layers(), std::move(pairs));
}

inline void check_conformable(const BackboneModel& model,
                              const AdapterSet& adapters) {
  if (adapters.total_layers() != model.num_layers()) {
    throw ShapeError("adapter set spans " +
                     std::to_string(adapters.total_layers()) +
                     " layers, backbone has " +
                     std::to_string(model.num_layers()));
  }
  for (const auto& p : adapters.pairs()) {
    const auto& w = model.layers[p.layer_index()];
    if (p.d() != w.rows() || p.k() != w.cols()) {
      throw ShapeError("adapter for layer " + std::to_string(p.layer_index()) +
                       " has d x k = " + Matrix::shape_string(p.d(), p.k()) +
                       ", backbone weight is " + w.shape());
    }
  }
}

// Numerically stable binary cross-entropy on a logit.
inline double bce_with_logits(double logit, int label) {
  return std::max(logit, 0.0) - logit * label +
         std::log1p(std::exp(-std::abs(logit)));
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace trainer_detail {

// y = (W + B A) x, computed in factored form.
inline void affine(const Matrix& w, const LoraPair* pair,
                   std::span<const double> x, std::vector<double>& y) {
  y.assign(w.rows(), 0.0);
  for (std::size_t i = 0; i < w.rows(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < w.cols(); ++j) acc += w(i, j) * x[j];
    y[i] = acc;
  }
  if (pair == nullptr) return;
  const Matrix& a = pair->a();
  const Matrix& b = pair->b();
  std::vector<double> u(a.rows(), 0.0);
  for (std::size_t p = 0; p < a.rows(); ++p) {
    double acc = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) acc += a(p, j) * x[j];
    u[p] = acc;
  }
  for (std::size_t i = 0; i < b.rows(); ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < b.cols(); ++p) acc += b(i, p) * u[p];
    y[i] += acc;
  }
}

// Layer inputs h_0..h_L; the last entry is the head input.
struct Trace {
  std::vector<std::vector<double>> h;
};

inline double forward_trace(const BackboneModel& model,
                            const AdapterSet& adapters,
                            std::span<const double> x, Trace& t) {
  const std::size_t L = model.num_layers();
  t.h.resize(L + 1);
  t.h[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < L; ++l) {
    affine(model.layers[l], adapters.find(l), t.h[l], t.h[l + 1]);
    if (l + 1 < L) {
      for (double& v : t.h[l + 1]) v = std::tanh(v);
    }
  }
  double logit = 0.0;
  for (std::size_t i = 0; i < model.head.size(); ++i) {
    logit += model.head[i] * t.h[L][i];
  }
  return logit;
}

}  // namespace trainer_detail

inline double forward(const BackboneModel& model, const AdapterSet& adapters,
                      std::span<const double> x) {
  if (x.size() != model.input_dim()) {
    throw ShapeError("forward: input has " + std::to_string(x.size()) +
                     " features, backbone expects " +
                     std::to_string(model.input_dim()));
  }
  trainer_detail::Trace t;
  return trainer_detail::forward_trace(model, adapters, x, t);
}

// Mean loss gradient over `batch` with respect to every adapter entry.
inline AdapterSet grad_adapters(const BackboneModel& model,
                                const AdapterSet& adapters,
                                std::span<const Sample> batch) {
  if (batch.empty()) throw InvalidArgument("grad_adapters: empty batch");
  AdapterSet grad = zeros_like(adapters);
  const std::size_t L = model.num_layers();
  trainer_detail::Trace t;
  std::vector<double> g, gz, next, u, btg;
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  for (const auto& s : batch) {
    const double logit = trainer_detail::forward_trace(model, adapters, s.x, t);
    const double dlogit = (sigmoid(logit) - s.label) * inv_n;
    g.resize(model.head.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = model.head[i] * dlogit;

    for (std::size_t l = L; l-- > 0;) {
      // g holds dLoss/dh_{l+1}; convert to dLoss/dz_l.
      gz = g;
      if (l + 1 < L) {
        for (std::size_t i = 0; i < gz.size(); ++i) {
          const double hv = t.h[l + 1][i];
          gz[i] *= 1.0 - hv * hv;
        }
      }
      const auto& hin = t.h[l];
      const LoraPair* pair = adapters.find(l);
      const Matrix& w = model.layers[l];

      if (pair != nullptr) {
        LoraPair* gp = nullptr;
        for (auto& q : grad.pairs()) {
          if (q.layer_index() == l) gp = &q;
        }
        const Matrix& a = pair->a();
        const Matrix& b = pair->b();
        const std::size_t r = pair->rank();
        // dB = gz (A h)^T, dA = (B^T gz) h^T.
        u.assign(r, 0.0);
        for (std::size_t p = 0; p < r; ++p) {
          for (std::size_t j = 0; j < a.cols(); ++j) u[p] += a(p, j) * hin[j];
        }
        btg.assign(r, 0.0);
        for (std::size_t i = 0; i < b.rows(); ++i) {
          for (std::size_t p = 0; p < r; ++p) btg[p] += b(i, p) * gz[i];
        }
        Matrix& db = gp->b();
        for (std::size_t i = 0; i < b.rows(); ++i) {
          for (std::size_t p = 0; p < r; ++p) db(i, p) += gz[i] * u[p];
        }
        Matrix& da = gp->a();
        for (std::size_t p = 0; p < r; ++p) {
          for (std::size_t j = 0; j < a.cols(); ++j) da(p, j) += btg[p] * hin[j];
        }
      }

      if (l == 0) break;
      // dLoss/dh_l = (W + B A)^T gz.
      next.assign(w.cols(), 0.0);
      for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) next[j] += w(i, j) * gz[i];
      }
      if (pair != nullptr) {
        const Matrix& a = pair->a();
        for (std::size_t p = 0; p < pair->rank(); ++p) {
          for (std::size_t j = 0; j < a.cols(); ++j) next[j] += a(p, j) * btg[p];
        }
      }
      g.swap(next);
    }
  }
  return grad;
}

inline double mean_loss(const BackboneModel& model, const AdapterSet& adapters,
                        std::span<const Sample> samples) {
  if (samples.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : samples) {
    total += bce_with_logits(forward(model, adapters, s.x), s.label);
  }
  return total / static_cast<double>(samples.size());
}

struct ClientState {
  std::size_t id = 0;
  DomainId domain;
  Dataset data;
  double learning_rate = 0.1;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 16;
};

struct TrainStats {
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;
  double final_eval_loss = 0.0;
  std::size_t steps = 0;
  std::chrono::duration<double> wall_time{0};
};

struct LocalResult {
  AdapterSet adapters;
  TrainStats stats;
};

// In-place SGD step: params -= lr * grad.
inline void sgd_step(AdapterSet& params, const AdapterSet& grad, double lr) {
  auto ps = params.pairs();
  auto gs = grad.pairs();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    for (AdapterKind kind : {AdapterKind::kA, AdapterKind::kB}) {
      auto pv = ps[i].factor(kind).data();
      auto gv = gs[i].factor(kind).data();
      for (std::size_t j = 0; j < pv.size(); ++j) pv[j] -= lr * gv[j];
    }
  }
}

// E epochs of minibatch SGD from `global_adapters`. Each epoch reshuffles the
// identity permutation with `rng`; the last partial batch is kept.
inline LocalResult train_local(const BackboneModel& model,
                               const ClientState& client,
                               const AdapterSet& global_adapters, Rng& rng) {
  check_conformable(model, global_adapters);
  if (client.batch_size == 0) throw InvalidArgument("batch_size must be >= 1");
  const auto start = std::chrono::steady_clock::now();
  const auto& train = client.data.train.samples;

  LocalResult out{global_adapters, {}};
  out.stats.initial_train_loss = mean_loss(model, out.adapters, train);

  std::vector<std::size_t> order(train.size());
  std::vector<Sample> batch;
  for (std::size_t e = 0; e < client.local_epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t lo = 0; lo < order.size(); lo += client.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + client.batch_size);
      batch.clear();
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(train[order[i]]);
      sgd_step(out.adapters, grad_adapters(model, out.adapters, batch),
               client.learning_rate);
      ++out.stats.steps;
    }
  }

  out.stats.final_train_loss = mean_loss(model, out.adapters, train);
  out.stats.final_eval_loss =
      mean_loss(model, out.adapters, client.data.val.samples);
  out.stats.wall_time = std::chrono::steady_clock::now() - start;
  return out;
}

}  // namespace fedmentor
