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

// Server round loop: broadcast, parallel local training and privatization,
// upload over a byte-counting channel, dataset-weighted averaging, utility
// gate and budget decay.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <exception>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedmentor/dp.hpp"
#include "fedmentor/error.hpp"
#include "fedmentor/linalg.hpp"
#include "fedmentor/lora.hpp"
#include "fedmentor/metrics.hpp"
#include "fedmentor/trainer.hpp"

namespace fedmentor {

// Weighted mean of conformable adapter sets with weights n_k / sum(n).
// Terms are accumulated in list order, starting from the first weighted term.
inline AdapterSet aggregate(std::span<const AdapterSet> updates,
                            std::span<const std::size_t> train_sizes) {
  if (updates.empty()) throw InvalidArgument("aggregate: no updates");
  if (updates.size() != train_sizes.size()) {
    throw InvalidArgument("aggregate: " + std::to_string(updates.size()) +
                          " updates but " + std::to_string(train_sizes.size()) +
                          " sizes");
  }
  double total = 0.0;
  for (std::size_t n : train_sizes) {
    if (n == 0) throw InvalidArgument("aggregate: dataset sizes must be > 0");
    total += static_cast<double>(n);
  }
  for (std::size_t k = 1; k < updates.size(); ++k) {
    if (!updates[k].conforms(updates[0])) {
      throw ShapeError("aggregate: update " + std::to_string(k) +
                       " does not conform to update 0");
    }
  }
  std::vector<double> weights(updates.size());
  for (std::size_t k = 0; k < updates.size(); ++k) {
    weights[k] = static_cast<double>(train_sizes[k]) / total;
  }

  AdapterSet out = updates[0];
  auto pairs = out.pairs();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    for (AdapterKind kind : {AdapterKind::kA, AdapterKind::kB}) {
      auto dst = pairs[i].factor(kind).data();
      for (double& v : dst) v *= weights[0];
      for (std::size_t k = 1; k < updates.size(); ++k) {
        auto src = updates[k].pairs()[i].factor(kind).data();
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += weights[k] * src[j];
      }
    }
  }
  return out;
}

// Theta_l + B_l A_l for every layer.
inline std::vector<Matrix> global_model(const BackboneModel& model,
                                        const AdapterSet& adapters) {
  check_conformable(model, adapters);
  std::vector<Matrix> out = model.layers;
  for (const auto& p : adapters.pairs()) {
    out[p.layer_index()] = axpy(1.0, merge_delta(p), out[p.layer_index()]);
  }
  return out;
}

// Forward pass through already-merged weights.
inline double forward_merged(std::span<const Matrix> merged,
                             std::span<const double> head,
                             std::span<const double> x) {
  std::vector<double> h(x.begin(), x.end()), next;
  for (std::size_t l = 0; l < merged.size(); ++l) {
    const Matrix& w = merged[l];
    if (w.cols() != h.size()) throw ShapeError("forward_merged: shape mismatch");
    next.assign(w.rows(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i) {
      for (std::size_t j = 0; j < w.cols(); ++j) next[i] += w(i, j) * h[j];
    }
    if (l + 1 < merged.size()) {
      for (double& v : next) v = std::tanh(v);
    }
    h.swap(next);
  }
  double logit = 0.0;
  for (std::size_t i = 0; i < head.size(); ++i) logit += head[i] * h[i];
  return logit;
}

// Simulated network: counts bytes per direction and drops uploads listed in
// the failure mask.
class SimChannel {
 public:
  void fail(std::size_t round, std::size_t client_id) {
    failures_.insert({round, client_id});
  }
  bool fails(std::size_t round, std::size_t client_id) const {
    return failures_.contains({round, client_id});
  }

  std::uint64_t broadcast(const AdapterSet& global, std::size_t clients) {
    const std::uint64_t bytes = serialize(global).size() * clients;
    broadcast_bytes_ += bytes;
    return bytes;
  }

  // Serializes, counts and decodes. Returns nullopt for a dropped upload.
  std::optional<AdapterSet> upload(std::size_t round, std::size_t client_id,
                                   const AdapterSet& set,
                                   std::uint64_t* bytes_out = nullptr) {
    const auto wire = serialize(set);
    if (bytes_out != nullptr) *bytes_out = wire.size();
    if (fails(round, client_id)) return std::nullopt;
    upload_bytes_ += wire.size();
    return deserialize(wire, set.total_layers());
  }

  std::uint64_t broadcast_bytes() const { return broadcast_bytes_; }
  std::uint64_t upload_bytes() const { return upload_bytes_; }

 private:
  std::set<std::pair<std::size_t, std::size_t>> failures_;
  std::uint64_t broadcast_bytes_ = 0;
  std::uint64_t upload_bytes_ = 0;
};

struct ServerState {
  AdapterSet global_adapters;
  BudgetTable budgets;
  NoiseCalibration calibration;
  std::map<std::string, double> thresholds;
  std::size_t round_index = 0;
  std::uint64_t rng_seed = 0;
};

struct ClientRoundStats {
  std::size_t client_id = 0;
  DomainId domain;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double accuracy = 0.0;  // global model, this client's validation split
  std::uint64_t payload_bytes = 0;
  bool dropped = false;
  std::chrono::duration<double> wall_time{0};
};

struct RoundRecord {
  std::size_t round = 0;  // 1-based
  std::vector<ClientRoundStats> per_client;  // ascending client id
  double avg_train_loss = 0.0;
  double avg_eval_loss = 0.0;
  std::uint64_t broadcast_bytes = 0;
  std::uint64_t upload_bytes = 0;
  std::uint64_t total_comm_bytes = 0;
  std::map<std::string, double> utilities;
  bool gate_triggered = false;
  double scale_multiplier = 0.0;  // after this round's gate
  std::map<DomainId, double> budgets_used;
  std::map<DomainId, double> budgets_after;
};

class RoundError : public Error {
 public:
  RoundError(std::size_t round, const std::string& message)
      : Error("round " + std::to_string(round) + ": " + message),
        round_(round) {}
  std::size_t round() const { return round_; }

 private:
  std::size_t round_;
};

// Executes one round against a fixed backbone and client roster.
class Federation {
 public:
  Federation(BackboneModel model, std::vector<ClientState> clients,
             unsigned threads = 1)
      : model_(std::move(model)),
        clients_(std::move(clients)),
        threads_(std::max(1u, threads)) {
    std::sort(clients_.begin(), clients_.end(),
              [](const ClientState& a, const ClientState& b) {
                return a.id < b.id;
              });
    for (std::size_t i = 1; i < clients_.size(); ++i) {
      if (clients_[i].id == clients_[i - 1].id) {
        throw InvalidArgument("duplicate client id " +
                              std::to_string(clients_[i].id));
      }
    }
    for (const auto& c : clients_) val_pool_.push_back(c.data);
    for (auto& d : val_pool_) d.train.samples.clear();
  }

  const BackboneModel& model() const { return model_; }
  std::span<const ClientState> clients() const { return clients_; }

  std::pair<ServerState, RoundRecord> run_round(const ServerState& server,
                                                SimChannel& channel) const {
    for (const auto& c : clients_) {
      if (!server.budgets.contains(c.domain)) {
        throw InvalidArgument("client " + std::to_string(c.id) + " domain '" +
                              c.domain.name + "' has no privacy budget");
      }
    }
    const std::size_t round = server.round_index + 1;
    RoundRecord rec;
    rec.round = round;
    rec.budgets_used = server.budgets.entries();
    rec.broadcast_bytes = channel.broadcast(server.global_adapters, clients_.size());

    struct Work {
      LocalResult local;
      AdapterSet noised;
    };
    std::vector<std::optional<Work>> work(clients_.size());
    std::vector<std::exception_ptr> errors(clients_.size());
    auto body = [&](std::size_t i) {
      try {
        const ClientState& c = clients_[i];
        Rng shuffle_rng = Rng::derive(server.rng_seed, c.id, round,
                                      StreamPurpose::kShuffle);
        LocalResult local =
            train_local(model_, c, server.global_adapters, shuffle_rng);
        Rng noise_rng =
            Rng::derive(server.rng_seed, c.id, round, StreamPurpose::kNoise);
        AdapterSet noised = privatize(local.adapters, c.domain, server.budgets,
                                      server.calibration, noise_rng);
        work[i] = Work{std::move(local), std::move(noised)};
      } catch (...) {
        errors[i] = std::current_exception();
      }
    };
    const std::size_t n_threads = std::min<std::size_t>(threads_, clients_.size());
    if (n_threads <= 1) {
      for (std::size_t i = 0; i < clients_.size(); ++i) body(i);
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t t = 0; t < n_threads; ++t) {
        pool.emplace_back([&, t] {
          for (std::size_t i = t; i < clients_.size(); i += n_threads) body(i);
        });
      }
    }
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }

    std::vector<AdapterSet> received;
    std::vector<std::size_t> sizes;
    double train_sum = 0.0, eval_sum = 0.0;
    for (std::size_t i = 0; i < clients_.size(); ++i) {
      const ClientState& c = clients_[i];
      Work& w = *work[i];
      ClientRoundStats st;
      st.client_id = c.id;
      st.domain = c.domain;
      st.train_loss = w.local.stats.final_train_loss;
      st.eval_loss = w.local.stats.final_eval_loss;
      st.wall_time = w.local.stats.wall_time;
      auto got = channel.upload(round, c.id, w.noised, &st.payload_bytes);
      if (got) {
        received.push_back(std::move(*got));
        sizes.push_back(c.data.train.size());
        rec.upload_bytes += st.payload_bytes;
        train_sum += st.train_loss;
        eval_sum += st.eval_loss;
      } else {
        st.dropped = true;
      }
      rec.per_client.push_back(std::move(st));
    }
    if (received.empty()) {
      throw RoundError(round, "every client upload was dropped");
    }
    rec.avg_train_loss = train_sum / static_cast<double>(received.size());
    rec.avg_eval_loss = eval_sum / static_cast<double>(received.size());
    rec.total_comm_bytes = rec.broadcast_bytes + rec.upload_bytes;

    ServerState next = server;
    next.global_adapters = aggregate(received, sizes);

    const UtilityReport report =
        evaluate(model_, next.global_adapters, val_pool_);
    rec.utilities = report.per_metric;
    for (std::size_t i = 0; i < clients_.size(); ++i) {
      rec.per_client[i].accuracy = report.per_client_accuracy.at(i);
    }

    GateOutcome gate =
        apply_utility_gate(server.calibration, rec.utilities, server.thresholds);
    next.calibration = gate.calibration;
    rec.gate_triggered = gate.triggered;
    rec.scale_multiplier = next.calibration.scale_multiplier;

    next.budgets = decay_budget(server.budgets);
    rec.budgets_after = next.budgets.entries();
    next.round_index = round;
    return {std::move(next), std::move(rec)};
  }

  // R sequential rounds; errors carry the failing round number.
  std::vector<RoundRecord> run(ServerState& server, SimChannel& channel,
                               std::size_t rounds) const {
    if (rounds < 1) throw InvalidArgument("rounds must be >= 1");
    std::vector<RoundRecord> records;
    records.reserve(rounds);
    for (std::size_t r = 0; r < rounds; ++r) {
      try {
        auto [next, rec] = run_round(server, channel);
        server = std::move(next);
        records.push_back(std::move(rec));
      } catch (const RoundError&) {
        throw;
      } catch (const std::exception& e) {
        throw RoundError(server.round_index + 1, e.what());
      }
    }
    return records;
  }

 private:
  BackboneModel model_;
  std::vector<ClientState> clients_;
  std::vector<Dataset> val_pool_;
  unsigned threads_;
};

}  // namespace fedmentor
