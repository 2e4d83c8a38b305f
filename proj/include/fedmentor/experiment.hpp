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

// Run configuration, experiment drivers and on-disk artifacts.
//
// A run directory holds:
//   config.json          parsed configuration echoed back (re-runnable)
//   metrics.csv          one row per round, fixed column order
//   summary.json         final utilities, budgets, comm totals, adapter checksum
//   final_adapters.fmad  final global adapters in the FMAD wire format

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedmentor/dp.hpp"
#include "fedmentor/error.hpp"
#include "fedmentor/federation.hpp"
#include "fedmentor/lora.hpp"
#include "fedmentor/metrics.hpp"
#include "fedmentor/synth.hpp"
#include "fedmentor/trainer.hpp"

namespace fedmentor {

enum class StrategyKind {
  kDomainAware,
  kUniform,
  kStaticNoise,
  kUtilityThreshold,
  kOff,
};

inline std::string to_string(StrategyKind s) {
  switch (s) {
    case StrategyKind::kDomainAware:
      return "domain_aware";
    case StrategyKind::kUniform:
      return "uniform";
    case StrategyKind::kStaticNoise:
      return "static_noise";
    case StrategyKind::kUtilityThreshold:
      return "utility_threshold";
    case StrategyKind::kOff:
      return "off";
  }
  return "?";
}

struct PrivacyConfig {
  StrategyKind strategy = StrategyKind::kDomainAware;
  double epsilon_global = 1.0;  // uniform
  double static_sigma = 0.008;  // static_noise
  double tau = 0.0;             // utility_threshold, on accuracy
  std::map<std::string, double> budgets = {
      {"Dreaddit", 2.0}, {"IRF", 0.5}, {"MultiWD", 1.5}};
  double decay_rate = 0.1;
  DecayMode decay_mode = DecayMode::kCurrentFraction;
  double budget_floor = 0.05;
  NoiseCalibration calibration;
  std::map<std::string, double> thresholds = {{"accuracy", 0.9}};
};

struct DomainOverride {
  std::string name;
  std::optional<std::size_t> n_train, n_val;
  std::optional<double> rotation, label_noise;
  std::optional<std::vector<double>> true_weights, feature_scales;
};

struct DataConfig {
  double scale = 0.1;
  double val_fraction = 0.1;
  double label_noise = 0.0;
  double weight_jitter = 0.1;
  // Entries replace matching default domains field by field; unknown names
  // add new domains (n_train and true_weights then required).
  std::vector<DomainOverride> domains;
  // When non-empty, only these domains take part.
  std::vector<std::string> include;
};

struct ModelConfig {
  std::vector<std::size_t> dims = {8, 16, 16};
  std::size_t rank = 4;
  double a_init_std = 0.1;
};

struct FailureSpec {
  std::size_t round = 0;
  std::string domain;
};

struct RunConfig {
  std::uint64_t seed = 42;
  std::size_t rounds = 8;
  std::size_t local_epochs = 2;
  double learning_rate = 0.5;
  std::size_t batch_size = 16;
  ModelConfig model;
  DataConfig data;
  PrivacyConfig privacy;
  std::vector<FailureSpec> failures;
  unsigned threads = 0;  // 0: FEDMENTOR_THREADS or hardware concurrency
};

// ---------------------------------------------------------------------------
// JSON <-> RunConfig
// ---------------------------------------------------------------------------

namespace config_detail {

using nlohmann::json;

class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  std::string at(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  const json* get(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    const json* v = get(key);
    if (v == nullptr) return;
    try {
      if constexpr (std::is_unsigned_v<T>) {
        if (!v->is_number_unsigned()) {
          throw ConfigError(at(key), "expected a non-negative integer");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v->is_number()) throw ConfigError(at(key), "expected a number");
      }
      out = v->get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(at(key), e.what());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.contains(it.key())) throw ConfigError(at(it.key()), "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& field, const std::string& msg) {
  if (!ok) throw ConfigError(field, msg);
}

inline StrategyKind parse_strategy(const std::string& s) {
  if (s == "domain_aware") return StrategyKind::kDomainAware;
  if (s == "uniform") return StrategyKind::kUniform;
  if (s == "static_noise") return StrategyKind::kStaticNoise;
  if (s == "utility_threshold") return StrategyKind::kUtilityThreshold;
  if (s == "off") return StrategyKind::kOff;
  throw ConfigError("privacy.strategy", "unknown strategy '" + s + "'");
}

}  // namespace config_detail

inline RunConfig parse_config(const nlohmann::json& j) {
  using config_detail::Obj;
  using config_detail::require;
  RunConfig c;
  Obj root(j, "");
  root.read("seed", c.seed);
  root.read("rounds", c.rounds);
  root.read("local_epochs", c.local_epochs);
  root.read("learning_rate", c.learning_rate);
  root.read("batch_size", c.batch_size);
  root.read("threads", c.threads);

  if (const auto* m = root.get("model")) {
    Obj o(*m, "model");
    o.read("dims", c.model.dims);
    o.read("rank", c.model.rank);
    o.read("a_init_std", c.model.a_init_std);
    o.finish();
  }
  if (const auto* d = root.get("data")) {
    Obj o(*d, "data");
    o.read("scale", c.data.scale);
    o.read("val_fraction", c.data.val_fraction);
    o.read("label_noise", c.data.label_noise);
    o.read("weight_jitter", c.data.weight_jitter);
    o.read("include", c.data.include);
    if (const auto* list = o.get("domains")) {
      require(list->is_array(), "data.domains", "expected a list");
      for (std::size_t i = 0; i < list->size(); ++i) {
        Obj e((*list)[i], "data.domains[" + std::to_string(i) + "]");
        DomainOverride ov;
        e.read("name", ov.name);
        require(!ov.name.empty(), e.at("name"), "required");
        std::size_t n = 0;
        double x = 0;
        std::vector<double> v;
        if (e.get("n_train")) { e.read("n_train", n); ov.n_train = n; }
        if (e.get("n_val")) { e.read("n_val", n); ov.n_val = n; }
        if (e.get("rotation")) { e.read("rotation", x); ov.rotation = x; }
        if (e.get("label_noise")) { e.read("label_noise", x); ov.label_noise = x; }
        if (e.get("true_weights")) { e.read("true_weights", v); ov.true_weights = v; }
        if (e.get("feature_scales")) { e.read("feature_scales", v); ov.feature_scales = v; }
        e.finish();
        c.data.domains.push_back(std::move(ov));
      }
    }
    o.finish();
  }
  if (const auto* p = root.get("privacy")) {
    Obj o(*p, "privacy");
    std::string strategy = to_string(c.privacy.strategy);
    o.read("strategy", strategy);
    c.privacy.strategy = config_detail::parse_strategy(strategy);
    o.read("epsilon_global", c.privacy.epsilon_global);
    o.read("static_sigma", c.privacy.static_sigma);
    o.read("tau", c.privacy.tau);
    o.read("budgets", c.privacy.budgets);
    o.read("decay_rate", c.privacy.decay_rate);
    o.read("budget_floor", c.privacy.budget_floor);
    o.read("thresholds", c.privacy.thresholds);
    std::string mode = "current";
    o.read("decay_mode", mode);
    require(mode == "current" || mode == "initial", o.at("decay_mode"),
            "expected 'current' or 'initial'");
    c.privacy.decay_mode = mode == "current" ? DecayMode::kCurrentFraction
                                             : DecayMode::kInitialFraction;
    if (const auto* cal = o.get("calibration")) {
      Obj q(*cal, "privacy.calibration");
      auto& nc = c.privacy.calibration;
      if (const auto* bs = q.get("base_scale")) {
        Obj b(*bs, "privacy.calibration.base_scale");
        b.read("early", nc.base_scale[0]);
        b.read("middle", nc.base_scale[1]);
        b.read("late", nc.base_scale[2]);
        b.finish();
      }
      if (const auto* km = q.get("kind_multiplier")) {
        Obj b(*km, "privacy.calibration.kind_multiplier");
        b.read("A", nc.kind_multiplier[0]);
        b.read("B", nc.kind_multiplier[1]);
        b.finish();
      }
      q.read("gate_factor", nc.gate_factor);
      q.read("delta", nc.nominal_delta);
      double clip = 0.0;
      if (q.get("clip_norm")) {
        q.read("clip_norm", clip);
        nc.clip_norm = clip;
      }
      q.finish();
    }
    o.finish();
  }
  if (const auto* f = root.get("failures")) {
    require(f->is_array(), "failures", "expected a list");
    for (std::size_t i = 0; i < f->size(); ++i) {
      Obj e((*f)[i], "failures[" + std::to_string(i) + "]");
      FailureSpec fs;
      e.read("round", fs.round);
      e.read("domain", fs.domain);
      e.finish();
      c.failures.push_back(fs);
    }
  }
  root.finish();

  // Semantic checks.
  require(c.rounds >= 1, "rounds", "must be >= 1");
  require(c.batch_size >= 1, "batch_size", "must be >= 1");
  require(c.learning_rate >= 0.0, "learning_rate", "must be >= 0");
  require(c.model.dims.size() >= 2, "model.dims",
          "needs an input size and at least one layer");
  for (std::size_t d : c.model.dims) require(d >= 1, "model.dims", "sizes must be >= 1");
  require(c.model.rank >= 1, "model.rank", "must be >= 1");
  require(c.model.a_init_std >= 0.0, "model.a_init_std", "must be >= 0");
  require(c.data.scale > 0.0, "data.scale", "must be > 0");
  require(c.data.val_fraction > 0.0, "data.val_fraction", "must be > 0");
  require(c.data.label_noise >= 0.0 && c.data.label_noise < 0.5,
          "data.label_noise", "must be in [0, 0.5)");
  const auto& pc = c.privacy;
  require(pc.calibration.gate_factor > 0.0 && pc.calibration.gate_factor < 1.0,
          "privacy.calibration.gate_factor", "must lie in (0, 1)");
  require(pc.budget_floor > 0.0, "privacy.budget_floor", "must be > 0");
  require(pc.decay_rate >= 0.0 && pc.decay_rate < 1.0, "privacy.decay_rate",
          "must lie in [0, 1)");
  require(pc.epsilon_global > 0.0, "privacy.epsilon_global", "must be > 0");
  require(pc.static_sigma >= 0.0, "privacy.static_sigma", "must be >= 0");
  for (const auto& [d, eps] : pc.budgets) {
    require(eps > 0.0, "privacy.budgets." + d, "must be > 0");
  }
  for (double v : pc.calibration.base_scale) {
    require(v >= 0.0, "privacy.calibration.base_scale", "must be >= 0");
  }
  for (double v : pc.calibration.kind_multiplier) {
    require(v >= 0.0, "privacy.calibration.kind_multiplier", "must be >= 0");
  }
  if (pc.calibration.clip_norm) {
    require(*pc.calibration.clip_norm > 0.0, "privacy.calibration.clip_norm",
            "must be > 0");
  }
  return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
  using nlohmann::json;
  json domains = json::array();
  for (const auto& d : c.data.domains) {
    json e = {{"name", d.name}};
    if (d.n_train) e["n_train"] = *d.n_train;
    if (d.n_val) e["n_val"] = *d.n_val;
    if (d.rotation) e["rotation"] = *d.rotation;
    if (d.label_noise) e["label_noise"] = *d.label_noise;
    if (d.true_weights) e["true_weights"] = *d.true_weights;
    if (d.feature_scales) e["feature_scales"] = *d.feature_scales;
    domains.push_back(e);
  }
  const auto& nc = c.privacy.calibration;
  json cal = {
      {"base_scale",
       {{"early", nc.base_scale[0]},
        {"middle", nc.base_scale[1]},
        {"late", nc.base_scale[2]}}},
      {"kind_multiplier",
       {{"A", nc.kind_multiplier[0]}, {"B", nc.kind_multiplier[1]}}},
      {"gate_factor", nc.gate_factor},
      {"delta", nc.nominal_delta},
  };
  if (nc.clip_norm) cal["clip_norm"] = *nc.clip_norm;
  json failures = json::array();
  for (const auto& f : c.failures) {
    failures.push_back({{"round", f.round}, {"domain", f.domain}});
  }
  return json{
      {"seed", c.seed},
      {"rounds", c.rounds},
      {"local_epochs", c.local_epochs},
      {"learning_rate", c.learning_rate},
      {"batch_size", c.batch_size},
      {"threads", c.threads},
      {"model",
       {{"dims", c.model.dims},
        {"rank", c.model.rank},
        {"a_init_std", c.model.a_init_std}}},
      {"data",
       {{"scale", c.data.scale},
        {"val_fraction", c.data.val_fraction},
        {"label_noise", c.data.label_noise},
        {"weight_jitter", c.data.weight_jitter},
        {"include", c.data.include},
        {"domains", domains}}},
      {"privacy",
       {{"strategy", to_string(c.privacy.strategy)},
        {"epsilon_global", c.privacy.epsilon_global},
        {"static_sigma", c.privacy.static_sigma},
        {"tau", c.privacy.tau},
        {"budgets", c.privacy.budgets},
        {"decay_rate", c.privacy.decay_rate},
        {"decay_mode", c.privacy.decay_mode == DecayMode::kCurrentFraction
                           ? "current"
                           : "initial"},
        {"budget_floor", c.privacy.budget_floor},
        {"thresholds", c.privacy.thresholds},
        {"calibration", cal}}},
      {"failures", failures},
  };
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string(), "cannot open config file");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string(), e.what());
  }
  return parse_config(j);
}

// ---------------------------------------------------------------------------
// Building a federation from a config
// ---------------------------------------------------------------------------

// Stable 64-bit identity for a domain name (FNV-1a), used to key data streams
// so declaration order never matters.
inline std::uint64_t name_key(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Domain specs sorted by name.
inline std::vector<DomainSpec> resolve_domains(const RunConfig& c) {
  Rng rng = Rng::derive(c.seed, 0, 0, StreamPurpose::kFederationSpecs);
  FederationSpecOptions opt;
  opt.scale = c.data.scale;
  opt.val_fraction = c.data.val_fraction;
  opt.input_dim = c.model.dims.front();
  opt.label_noise = c.data.label_noise;
  opt.weight_jitter = c.data.weight_jitter;
  std::map<std::string, DomainSpec> specs;
  for (auto& s : default_federation_specs(rng, opt)) specs[s.domain.name] = s;

  for (const auto& ov : c.data.domains) {
    const std::string field = "data.domains." + ov.name;
    auto it = specs.find(ov.name);
    if (it == specs.end()) {
      if (!ov.n_train || !ov.true_weights) {
        throw ConfigError(field, "new domains need n_train and true_weights");
      }
      DomainSpec s;
      s.domain = DomainId{ov.name};
      s.input_dim = opt.input_dim;
      s.n_val = scaled_count(*ov.n_train, opt.val_fraction);
      s.label_noise = opt.label_noise;
      it = specs.emplace(ov.name, s).first;
    }
    DomainSpec& s = it->second;
    if (ov.n_train) s.n_train = *ov.n_train;
    if (ov.n_val) s.n_val = *ov.n_val;
    if (ov.rotation) s.rotation_angle = *ov.rotation;
    if (ov.label_noise) s.label_noise = *ov.label_noise;
    if (ov.true_weights) s.true_weights = *ov.true_weights;
    if (ov.feature_scales) s.feature_scales = *ov.feature_scales;
    try {
      s.validate();
    } catch (const InvalidArgument& e) {
      throw ConfigError(field, e.what());
    }
  }
  std::vector<DomainSpec> out;
  if (c.data.include.empty()) {
    for (auto& [name, s] : specs) out.push_back(s);
  } else {
    std::set<std::string> names(c.data.include.begin(), c.data.include.end());
    for (const auto& name : names) {
      auto it = specs.find(name);
      if (it == specs.end()) {
        throw ConfigError("data.include", "unknown domain '" + name + "'");
      }
      out.push_back(it->second);
    }
  }
  return out;
}

inline BackboneModel build_backbone(const RunConfig& c) {
  Rng rng = Rng::derive(c.seed, 0, 0, StreamPurpose::kBackbone);
  return BackboneModel::random(c.model.dims, rng);
}

// Clients in ascending domain-name order; id = position in that order.
inline std::vector<ClientState> build_clients(const RunConfig& c) {
  std::vector<ClientState> clients;
  for (const auto& spec : resolve_domains(c)) {
    Rng rng = Rng::derive(c.seed, name_key(spec.domain.name), 0,
                          StreamPurpose::kDataTrain);
    ClientState cs;
    cs.id = clients.size();
    cs.domain = spec.domain;
    cs.data = make_domain(spec, rng);
    cs.learning_rate = c.learning_rate;
    cs.local_epochs = c.local_epochs;
    cs.batch_size = c.batch_size;
    clients.push_back(std::move(cs));
  }
  return clients;
}

inline ServerState build_server(const RunConfig& c, const BackboneModel& model,
                                std::span<const ClientState> clients) {
  const auto& pc = c.privacy;
  ServerState s;
  s.rng_seed = c.seed;
  Rng rng = Rng::derive(c.seed, 0, 0, StreamPurpose::kAdapterInit);
  s.global_adapters = init_adapters(model, c.model.rank, c.model.a_init_std, rng);
  s.calibration = pc.calibration;
  s.thresholds = pc.thresholds;

  std::map<DomainId, double> budgets;
  for (const auto& cl : clients) {
    const std::string& name = cl.domain.name;
    if (pc.strategy == StrategyKind::kUniform) {
      budgets[cl.domain] = pc.epsilon_global;
    } else {
      auto it = pc.budgets.find(name);
      if (it == pc.budgets.end()) {
        if (pc.strategy == StrategyKind::kDomainAware ||
            pc.strategy == StrategyKind::kUtilityThreshold) {
          throw ConfigError("privacy.budgets." + name,
                            "domain has no privacy budget");
        }
        budgets[cl.domain] = pc.epsilon_global;
      } else {
        budgets[cl.domain] = it->second;
      }
    }
  }
  s.budgets = BudgetTable(budgets, pc.decay_rate, pc.budget_floor, pc.decay_mode);

  switch (pc.strategy) {
    case StrategyKind::kDomainAware:
    case StrategyKind::kUniform:
      break;
    case StrategyKind::kStaticNoise:
      s.calibration.fixed_std = pc.static_sigma;
      s.thresholds.clear();
      break;
    case StrategyKind::kUtilityThreshold:
      s.thresholds = {{kAccuracy, pc.tau}};
      break;
    case StrategyKind::kOff:
      s.calibration.scale_multiplier = 0.0;
      s.thresholds.clear();
      break;
  }
  return s;
}

inline unsigned resolve_threads(const RunConfig& c) {
  unsigned n = c.threads;
  if (const char* env = std::getenv("FEDMENTOR_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap > 0 && (n == 0 || static_cast<unsigned>(cap) < n)) {
      n = static_cast<unsigned>(cap);
    }
  }
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

struct RunResult {
  RunConfig config;
  std::vector<RoundRecord> records;
  ServerState final_state;
  std::uint64_t broadcast_bytes = 0;
  std::uint64_t upload_bytes = 0;
};

inline RunResult run_experiment(const RunConfig& c) {
  BackboneModel model = build_backbone(c);
  std::vector<ClientState> clients = build_clients(c);
  ServerState server = build_server(c, model, clients);
  SimChannel channel;
  for (const auto& f : c.failures) {
    bool found = false;
    for (const auto& cl : clients) {
      if (cl.domain.name == f.domain) {
        channel.fail(f.round, cl.id);
        found = true;
      }
    }
    if (!found) throw ConfigError("failures", "unknown domain '" + f.domain + "'");
  }
  Federation fed(std::move(model), std::move(clients), resolve_threads(c));
  RunResult out;
  out.config = c;
  out.records = fed.run(server, channel, c.rounds);
  out.final_state = std::move(server);
  out.broadcast_bytes = channel.broadcast_bytes();
  out.upload_bytes = channel.upload_bytes();
  return out;
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Columns: round, per client (ascending id) train_loss/eval_loss/accuracy,
// broadcast/upload/comm bytes, utilities by name, gate flag, multiplier after
// the gate, and the per-domain budget used in the round.
inline void write_metrics_csv(std::ostream& out,
                              std::span<const RoundRecord> records) {
  if (records.empty()) return;
  const RoundRecord& first = records.front();
  out << "round";
  for (const auto& c : first.per_client) {
    const std::string p = "c" + std::to_string(c.client_id) + "_" + c.domain.name;
    out << ',' << p << "_train_loss," << p << "_eval_loss," << p << "_accuracy";
  }
  out << ",broadcast_bytes,upload_bytes,comm_bytes";
  for (const auto& [m, v] : first.utilities) out << ",util_" << m;
  out << ",gate_triggered,scale_multiplier";
  for (const auto& [d, v] : first.budgets_used) out << ",eps_" << d.name;
  out << '\n';
  for (const auto& r : records) {
    out << r.round;
    for (const auto& c : r.per_client) {
      if (c.dropped) {
        out << ",,," << fmt_double(c.accuracy);
      } else {
        out << ',' << fmt_double(c.train_loss) << ',' << fmt_double(c.eval_loss)
            << ',' << fmt_double(c.accuracy);
      }
    }
    out << ',' << r.broadcast_bytes << ',' << r.upload_bytes << ','
        << r.total_comm_bytes;
    for (const auto& [m, v] : r.utilities) out << ',' << fmt_double(v);
    out << ',' << (r.gate_triggered ? 1 : 0) << ','
        << fmt_double(r.scale_multiplier);
    for (const auto& [d, v] : r.budgets_used) out << ',' << fmt_double(v);
    out << '\n';
  }
}

inline std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline nlohmann::json summary_json(const RunResult& r) {
  using nlohmann::json;
  const auto wire = serialize(r.final_state.global_adapters);
  const RoundRecord& last = r.records.back();
  std::size_t gate_events = 0;
  for (const auto& rec : r.records) gate_events += rec.gate_triggered ? 1 : 0;
  json budgets = json::object();
  for (const auto& [d, v] : r.final_state.budgets.entries()) budgets[d.name] = v;
  json per_client = json::object();
  for (const auto& c : last.per_client) per_client[c.domain.name] = c.accuracy;
  return json{
      {"config", to_json(r.config)},
      {"rounds_completed", r.records.size()},
      {"final_utilities", last.utilities},
      {"final_client_accuracy", per_client},
      {"final_budgets", budgets},
      {"final_scale_multiplier", r.final_state.calibration.scale_multiplier},
      {"gate_events", gate_events},
      {"broadcast_bytes", r.broadcast_bytes},
      {"upload_bytes", r.upload_bytes},
      {"total_comm_bytes", r.broadcast_bytes + r.upload_bytes},
      {"trainable_params", trainable_param_count(r.final_state.global_adapters)},
      {"final_adapters_bytes", wire.size()},
      {"final_adapters_fnv1a", hex64(fnv1a(wire))},
  };
}

inline void write_bytes(const std::filesystem::path& p,
                        std::span<const std::uint8_t> bytes) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot open " + p.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot open " + p.string() + " for writing");
  out << s;
}

inline void write_run_artifacts(const std::filesystem::path& dir,
                                const RunResult& r) {
  std::filesystem::create_directories(dir);
  std::ostringstream csv;
  write_metrics_csv(csv, r.records);
  write_text(dir / "metrics.csv", csv.str());
  write_text(dir / "summary.json", summary_json(r).dump(2) + "\n");
  write_text(dir / "config.json", to_json(r.config).dump(2) + "\n");
  write_bytes(dir / "final_adapters.fmad", serialize(r.final_state.global_adapters));
}

// `base`/seed<N>_<UTC timestamp>, suffixed _1, _2, ... if already taken.
inline std::filesystem::path make_run_dir(const std::filesystem::path& base,
                                          std::uint64_t seed) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
  const std::string stem = "seed" + std::to_string(seed) + "_" + stamp;
  std::filesystem::path dir = base / stem;
  for (int i = 1; std::filesystem::exists(dir); ++i) {
    dir = base / (stem + "_" + std::to_string(i));
  }
  std::filesystem::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------------------
// Sweeps and summary tables
// ---------------------------------------------------------------------------

struct SummaryRow {
  std::string label;
  double epsilon = 0.0;
  double accuracy = 0.0;
  double neg_eval_loss = 0.0;
  SpreadSummary client_accuracy;
  std::uint64_t total_comm_bytes = 0;
  std::size_t gate_events = 0;
};

inline SummaryRow summarize(const std::string& label, double eps,
                            const RunResult& r) {
  const RoundRecord& last = r.records.back();
  std::vector<double> acc;
  for (const auto& c : last.per_client) acc.push_back(c.accuracy);
  SummaryRow row;
  row.label = label;
  row.epsilon = eps;
  row.accuracy = last.utilities.at(kAccuracy);
  row.neg_eval_loss = last.utilities.at(kNegEvalLoss);
  row.client_accuracy = spread(acc);
  row.total_comm_bytes = r.broadcast_bytes + r.upload_bytes;
  for (const auto& rec : r.records) row.gate_events += rec.gate_triggered ? 1 : 0;
  return row;
}

// Runs one training per budget for `domain`, all else fixed.
inline std::vector<SummaryRow> sweep(const RunConfig& base,
                                     const std::string& domain,
                                     std::span<const double> eps_values) {
  if (eps_values.empty()) throw InvalidArgument("sweep: empty epsilon list");
  bool known = false;
  for (const auto& s : resolve_domains(base)) known |= s.domain.name == domain;
  if (!known) throw InvalidArgument("sweep: unknown domain '" + domain + "'");
  std::vector<SummaryRow> rows;
  for (double eps : eps_values) {
    if (!(eps > 0.0)) throw InvalidArgument("sweep: epsilon values must be > 0");
    RunConfig c = base;
    c.privacy.budgets[domain] = eps;
    rows.push_back(summarize(domain + " eps=" + fmt_double(eps), eps,
                             run_experiment(c)));
  }
  return rows;
}

inline void write_summary_csv(std::ostream& out, std::span<const SummaryRow> rows) {
  out << "label,epsilon,accuracy,neg_eval_loss,client_acc_mean,client_acc_min,"
         "client_acc_max,client_acc_std,client_acc_spread,total_comm_bytes,"
         "gate_events\n";
  for (const auto& r : rows) {
    out << r.label << ',' << fmt_double(r.epsilon) << ','
        << fmt_double(r.accuracy) << ',' << fmt_double(r.neg_eval_loss) << ','
        << fmt_double(r.client_accuracy.mean) << ','
        << fmt_double(r.client_accuracy.min) << ','
        << fmt_double(r.client_accuracy.max) << ','
        << fmt_double(r.client_accuracy.std) << ','
        << fmt_double(r.client_accuracy.spread) << ',' << r.total_comm_bytes
        << ',' << r.gate_events << '\n';
  }
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::ptrdiff_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return static_cast<std::ptrdiff_t>(i);
    }
    return -1;
  }
};

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing file: " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw Error("empty file: " + path.string());
  t.header = split(line);
  while (std::getline(in, line)) {
    if (!line.empty()) t.rows.push_back(split(line));
  }
  return t;
}

struct ReportData {
  std::size_t rounds = 0;
  std::uint64_t comm_total = 0;
  std::vector<std::size_t> gate_rounds;
  std::map<std::string, std::vector<double>> budget_traces;
};

// Prints the round table, budget traces, gate events and comm totals.
// Optionally writes a plot-ready CSV (round, accuracy, multiplier, budgets).
inline ReportData report(const std::filesystem::path& run_dir, std::ostream& out,
                         const std::filesystem::path& plot_csv = {}) {
  const CsvTable t = read_csv(run_dir / "metrics.csv");
  const auto summary_path = run_dir / "summary.json";
  std::ifstream sin(summary_path);
  if (!sin) throw Error("missing file: " + summary_path.string());
  nlohmann::json summary = nlohmann::json::parse(sin);

  const auto c_round = t.column("round");
  const auto c_acc = t.column("util_accuracy");
  const auto c_comm = t.column("comm_bytes");
  const auto c_gate = t.column("gate_triggered");
  const auto c_mult = t.column("scale_multiplier");
  if (c_round < 0 || c_comm < 0 || c_gate < 0 || c_mult < 0) {
    throw Error("malformed metrics.csv in " + run_dir.string());
  }
  std::vector<std::pair<std::string, std::size_t>> eps_cols;
  for (std::size_t i = 0; i < t.header.size(); ++i) {
    if (t.header[i].rfind("eps_", 0) == 0) eps_cols.emplace_back(t.header[i].substr(4), i);
  }

  ReportData data;
  out << "round  accuracy   comm_bytes  gate  multiplier";
  for (const auto& [d, i] : eps_cols) out << "  eps_" << d;
  out << '\n';
  for (const auto& row : t.rows) {
    ++data.rounds;
    const std::uint64_t comm = std::stoull(row.at(c_comm));
    data.comm_total += comm;
    const bool gate = row.at(c_gate) == "1";
    if (gate) data.gate_rounds.push_back(std::stoull(row.at(c_round)));
    out << std::setw(5) << row.at(c_round) << "  " << std::fixed
        << std::setprecision(4) << std::setw(8)
        << (c_acc >= 0 ? std::stod(row.at(c_acc)) : 0.0) << "  " << std::setw(11)
        << comm << "  " << std::setw(4) << (gate ? "yes" : "no") << "  "
        << std::setw(10) << std::setprecision(6) << std::stod(row.at(c_mult));
    for (const auto& [d, i] : eps_cols) {
      const double v = std::stod(row.at(i));
      data.budget_traces[d].push_back(v);
      out << "  " << std::setw(4 + d.size()) << v;
    }
    out << '\n';
  }
  out.unsetf(std::ios::floatfield);
  out << "\nbudget traces (eps used per round):\n";
  for (const auto& [d, trace] : data.budget_traces) {
    out << "  " << d << ":";
    for (double v : trace) out << ' ' << fmt_double(v);
    out << '\n';
  }
  out << "gate events: " << data.gate_rounds.size();
  if (!data.gate_rounds.empty()) {
    out << " (rounds";
    for (auto r : data.gate_rounds) out << ' ' << r;
    out << ')';
  }
  out << "\ncommunication total: " << data.comm_total << " bytes ("
      << fmt_double(static_cast<double>(data.comm_total) / 1e6) << " MB)\n";
  if (summary.contains("final_adapters_fnv1a")) {
    out << "final adapters fnv1a: "
        << summary["final_adapters_fnv1a"].get<std::string>() << '\n';
  }

  if (!plot_csv.empty()) {
    std::ofstream p(plot_csv);
    if (!p) throw Error("cannot open " + plot_csv.string() + " for writing");
    p << "round,accuracy,scale_multiplier";
    for (const auto& [d, i] : eps_cols) p << ",eps_" << d;
    p << '\n';
    for (const auto& row : t.rows) {
      p << row.at(c_round) << ',' << (c_acc >= 0 ? row.at(c_acc) : "") << ','
        << row.at(c_mult);
      for (const auto& [d, i] : eps_cols) p << ',' << row.at(i);
      p << '\n';
    }
  }
  return data;
}

}  // namespace fedmentor
