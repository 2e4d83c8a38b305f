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

// Reference training loops that bypass the federation and privacy code:
// a plain dataset-weighted FedAvg loop and a centralized SGD loop. Data,
// backbone and initial adapters come from the same builders as a real run so
// the comparison isolates the round pipeline.

#include <algorithm>
#include <sstream>
#include <string>
#include <vector>

#include "fedmentor/fedmentor.hpp"
#include "reference/oracles.hpp"

namespace fedmentor::testing {

struct PlainArtifacts {
  std::string metrics_csv;
  std::vector<std::uint8_t> final_adapters;
  AdapterSet final_global;
};

// Plain FedAvg with no noise, no gate and the budget ledger carried only for
// the CSV columns.
inline PlainArtifacts plain_fedavg(const RunConfig& cfg) {
  const BackboneModel model = build_backbone(cfg);
  std::vector<ClientState> clients = build_clients(cfg);
  std::sort(clients.begin(), clients.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  AdapterSet global = build_server(cfg, model, clients).global_adapters;

  std::map<DomainId, double> eps;
  for (const auto& c : clients) eps[c.domain] = cfg.privacy.budgets.at(c.domain.name);

  std::vector<Dataset> val;
  for (const auto& c : clients) {
    Dataset d = c.data;
    d.train.samples.clear();
    val.push_back(std::move(d));
  }

  std::vector<RoundRecord> records;
  for (std::size_t round = 1; round <= cfg.rounds; ++round) {
    RoundRecord rec;
    rec.round = round;
    rec.budgets_used = eps;
    rec.broadcast_bytes = payload_bytes(global, 8) * clients.size();

    std::vector<AdapterSet> locals;
    std::vector<std::size_t> sizes;
    double train_sum = 0.0, eval_sum = 0.0;
    for (const auto& c : clients) {
      Rng rng = Rng::derive(cfg.seed, c.id, round, StreamPurpose::kShuffle);
      LocalResult local = train_local(model, c, global, rng);
      ClientRoundStats st;
      st.client_id = c.id;
      st.domain = c.domain;
      st.train_loss = local.stats.final_train_loss;
      st.eval_loss = local.stats.final_eval_loss;
      st.payload_bytes = payload_bytes(local.adapters, 8);
      rec.upload_bytes += st.payload_bytes;
      train_sum += st.train_loss;
      eval_sum += st.eval_loss;
      rec.per_client.push_back(st);
      locals.push_back(std::move(local.adapters));
      sizes.push_back(c.data.train.size());
    }
    rec.avg_train_loss = train_sum / clients.size();
    rec.avg_eval_loss = eval_sum / clients.size();
    rec.total_comm_bytes = rec.broadcast_bytes + rec.upload_bytes;

    // FedAvg, accumulated in client order from the first weighted term.
    double total = 0.0;
    for (auto n : sizes) total += static_cast<double>(n);
    AdapterSet next = locals[0];
    for (std::size_t i = 0; i < next.size(); ++i) {
      for (AdapterKind kind : {AdapterKind::kA, AdapterKind::kB}) {
        auto dst = next.pairs()[i].factor(kind).data();
        for (std::size_t j = 0; j < dst.size(); ++j) {
          double acc = static_cast<double>(sizes[0]) / total * dst[j];
          for (std::size_t k = 1; k < locals.size(); ++k) {
            acc = acc + static_cast<double>(sizes[k]) / total *
                            locals[k].pairs()[i].factor(kind).data()[j];
          }
          dst[j] = acc;
        }
      }
    }
    global = std::move(next);

    const UtilityReport rep = evaluate(model, global, val);
    rec.utilities = rep.per_metric;
    for (std::size_t i = 0; i < rec.per_client.size(); ++i) {
      rec.per_client[i].accuracy = rep.per_client_accuracy.at(i);
    }
    rec.gate_triggered = false;
    rec.scale_multiplier = 0.0;
    for (auto& [d, e] : eps) {
      e = std::max(cfg.privacy.budget_floor, e - cfg.privacy.decay_rate * e);
    }
    rec.budgets_after = eps;
    records.push_back(std::move(rec));
  }

  PlainArtifacts out;
  std::ostringstream csv;
  write_metrics_csv(csv, records);
  out.metrics_csv = csv.str();
  out.final_adapters = serialize(global);
  out.final_global = std::move(global);
  return out;
}

// One party, no server: `rounds` x `local_epochs` passes of minibatch SGD,
// reshuffling per epoch from the same per-round stream a client would use.
inline AdapterSet centralized_sgd(const RunConfig& cfg) {
  const BackboneModel model = build_backbone(cfg);
  const std::vector<ClientState> clients = build_clients(cfg);
  const ClientState& only = clients.at(0);
  AdapterSet params = build_server(cfg, model, clients).global_adapters;
  const auto& train = only.data.train.samples;

  for (std::size_t round = 1; round <= cfg.rounds; ++round) {
    Rng rng = Rng::derive(cfg.seed, only.id, round, StreamPurpose::kShuffle);
    for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
      std::vector<std::size_t> order(train.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      rng.shuffle(order);
      for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
        std::vector<Sample> batch;
        for (std::size_t i = lo; i < std::min(order.size(), lo + cfg.batch_size); ++i) {
          batch.push_back(train[order[i]]);
        }
        const AdapterSet g = grad_adapters(model, params, batch);
        for (std::size_t i = 0; i < params.size(); ++i) {
          for (AdapterKind kind : {AdapterKind::kA, AdapterKind::kB}) {
            auto p = params.pairs()[i].factor(kind).data();
            auto gv = g.pairs()[i].factor(kind).data();
            for (std::size_t j = 0; j < p.size(); ++j) {
              p[j] = p[j] - cfg.learning_rate * gv[j];
            }
          }
        }
      }
    }
  }
  return params;
}

}  // namespace fedmentor::testing
