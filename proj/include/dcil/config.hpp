/*
 * Copyright 2026 The dcil-sim Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// JSON (de)serialization of run configurations and metrics.
//
// A config document is a sparse patch over the defaults: every key it names
// must exist in the default document, with a compatible type. Errors carry
// the line of the offending key.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "dcil/error.hpp"
#include "dcil/orchestrator.hpp"
#include "json.hpp"

namespace dcil {

using Json = nlohmann::json;

/// Output paths and sweep lists that sit next to the run configuration.
struct ExperimentConfig {
  RunConfig run;
  std::string out_dir = "results";
  std::vector<std::string> sweep_methods;
  std::vector<std::uint64_t> sweep_seeds;
  std::vector<double> sweep_alphas;
};

inline std::string to_string(AnchorLossKind k) { return k == AnchorLossKind::replay_ce ? "replay_ce" : "logit_kd"; }
inline std::string to_string(PartitionKind k) { return k == PartitionKind::iid ? "iid" : "dirichlet"; }

inline Json to_json(const ExperimentConfig& e) {
  const RunConfig& c = e.run;
  Json j;
  j["method"] = to_string(c.method);
  j["seed"] = c.seed;
  j["sites"] = c.sites;
  j["sessions"] = c.sessions;
  j["rounds"] = c.rounds;
  j["threads"] = c.threads;
  j["data"] = {{"source", c.data.source},         {"n_classes", c.data.n_classes}, {"per_class", c.data.per_class},
               {"dim", c.data.dim},               {"spread", c.data.spread},       {"n_base", c.data.n_base},
               {"cifar_dir", c.data.cifar_dir},   {"cifar_pool", c.data.cifar_pool}};
  j["net"] = {{"hidden", c.hidden}, {"activation", to_string(c.activation)}};
  j["base"] = {{"epochs", c.base_epochs}, {"lr", c.base_lr}, {"batch", c.base_batch}};
  j["local"] = {{"anchor_loss", to_string(c.local.anchor_loss)},
                {"lambda", c.local.lambda},
                {"mu", c.local.mu},
                {"beta", c.local.beta},
                {"lr", c.local.lr},
                {"epochs", c.local.epochs},
                {"batch", c.local.batch}};
  j["anchors_per_class"] = c.anchors_per_class;
  j["distill"] = {{"shared_per_class", c.shared_per_class},
                  {"tau1", c.tau1},
                  {"tau2", c.tau2},
                  {"lr", c.distill_lr},
                  {"epochs", c.distill_epochs}};
  j["partition"] = {{"kind", to_string(c.partition)}, {"alpha", c.alpha}};
  j["output"] = {{"dir", e.out_dir}};
  j["sweep"] = {{"methods", e.sweep_methods}, {"seeds", e.sweep_seeds}, {"alphas", e.sweep_alphas}};
  return j;
}

namespace detail {

// 1-based line of the first occurrence of "key" in text, 0 when not found.
inline std::size_t line_of_key(const std::string& text, const std::string& key) {
  const std::size_t pos = text.find('"' + key + '"');
  if (pos == std::string::npos) return 0;
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
}

inline std::string where(const std::string& origin, const std::string& text, const std::string& key) {
  const std::size_t line = line_of_key(text, key);
  return origin + (line ? ":" + std::to_string(line) : std::string{}) + ": ";
}

inline bool same_kind(const Json& def, const Json& v) {
  if (def.is_number()) return v.is_number();
  if (def.is_array()) return v.is_array();
  return def.type() == v.type();
}

// Patches `target` with `patch`, rejecting unknown keys and type changes.
inline void merge_strict(Json& target, const Json& patch, const std::string& path, const std::string& origin,
                         const std::string& text) {
  if (!patch.is_object()) throw ConfigError(origin + ": " + (path.empty() ? "document" : path) + " must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string full = path.empty() ? it.key() : path + "." + it.key();
    if (!target.contains(it.key())) throw ConfigError(where(origin, text, it.key()) + "unknown key '" + full + "'");
    Json& slot = target[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), full, origin, text);
    } else {
      if (!same_kind(slot, it.value()))
        throw ConfigError(where(origin, text, it.key()) + "key '" + full + "' expects a " + slot.type_name() +
                          ", got " + it.value().type_name());
      slot = it.value();
    }
  }
}

template <typename T>
T get_as(const Json& j, const char* key, const std::string& path) {
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw ConfigError("invalid value for '" + path + "." + key + "'");
  }
}

inline std::size_t get_count(const Json& j, const char* key, const std::string& path) {
  const Json& v = j.at(key);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
    throw ConfigError("'" + (path.empty() ? std::string(key) : path + "." + key) + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

}  // namespace detail

/// Converts a complete document (defaults already merged) to a config.
inline ExperimentConfig from_json(const Json& j) {
  using detail::get_as;
  using detail::get_count;
  ExperimentConfig e;
  RunConfig& c = e.run;
  c.method = parse_method(get_as<std::string>(j, "method", ""));
  c.seed = get_count(j, "seed", "");
  c.sites = get_count(j, "sites", "");
  c.sessions = get_count(j, "sessions", "");
  c.rounds = get_count(j, "rounds", "");
  c.threads = get_count(j, "threads", "");

  const Json& d = j.at("data");
  c.data.source = get_as<std::string>(d, "source", "data");
  c.data.n_classes = get_count(d, "n_classes", "data");
  c.data.per_class = get_count(d, "per_class", "data");
  c.data.dim = get_count(d, "dim", "data");
  c.data.spread = get_as<double>(d, "spread", "data");
  c.data.n_base = get_count(d, "n_base", "data");
  c.data.cifar_dir = get_as<std::string>(d, "cifar_dir", "data");
  c.data.cifar_pool = get_count(d, "cifar_pool", "data");

  const Json& n = j.at("net");
  c.hidden.clear();
  for (const Json& h : n.at("hidden")) {
    if (!h.is_number_integer() || h.get<std::int64_t>() < 1) throw ConfigError("'net.hidden' entries must be >= 1");
    c.hidden.push_back(h.get<std::size_t>());
  }
  const std::string act = get_as<std::string>(n, "activation", "net");
  if (act == "relu") c.activation = Activation::relu;
  else if (act == "tanh") c.activation = Activation::tanh;
  else throw ConfigError("'net.activation' must be relu or tanh");

  const Json& b = j.at("base");
  c.base_epochs = get_count(b, "epochs", "base");
  c.base_lr = get_as<double>(b, "lr", "base");
  c.base_batch = get_count(b, "batch", "base");

  const Json& l = j.at("local");
  const std::string al = get_as<std::string>(l, "anchor_loss", "local");
  if (al == "logit_kd") c.local.anchor_loss = AnchorLossKind::logit_kd;
  else if (al == "replay_ce") c.local.anchor_loss = AnchorLossKind::replay_ce;
  else throw ConfigError("'local.anchor_loss' must be logit_kd or replay_ce");
  c.local.lambda = get_as<double>(l, "lambda", "local");
  c.local.mu = get_as<double>(l, "mu", "local");
  c.local.beta = get_as<double>(l, "beta", "local");
  c.local.lr = get_as<double>(l, "lr", "local");
  c.local.epochs = get_count(l, "epochs", "local");
  c.local.batch = get_count(l, "batch", "local");

  c.anchors_per_class = get_count(j, "anchors_per_class", "");
  const Json& ds = j.at("distill");
  c.shared_per_class = get_count(ds, "shared_per_class", "distill");
  c.tau1 = get_as<double>(ds, "tau1", "distill");
  c.tau2 = get_as<double>(ds, "tau2", "distill");
  c.distill_lr = get_as<double>(ds, "lr", "distill");
  c.distill_epochs = get_count(ds, "epochs", "distill");

  const Json& p = j.at("partition");
  const std::string kind = get_as<std::string>(p, "kind", "partition");
  if (kind == "iid") c.partition = PartitionKind::iid;
  else if (kind == "dirichlet") c.partition = PartitionKind::dirichlet;
  else throw ConfigError("'partition.kind' must be iid or dirichlet");
  c.alpha = get_as<double>(p, "alpha", "partition");

  e.out_dir = get_as<std::string>(j.at("output"), "dir", "output");
  const Json& s = j.at("sweep");
  for (const Json& m : s.at("methods")) e.sweep_methods.push_back(to_string(parse_method(m.get<std::string>())));
  for (const Json& v : s.at("seeds")) {
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) throw ConfigError("'sweep.seeds' must be integers >= 0");
    e.sweep_seeds.push_back(v.get<std::uint64_t>());
  }
  for (const Json& v : s.at("alphas")) {
    if (!v.is_number() || !(v.get<double>() > 0.0)) throw ConfigError("'sweep.alphas' must be positive numbers");
    e.sweep_alphas.push_back(v.get<double>());
  }
  return e;
}

/// Applies `--a.b=value` style overrides to a full document. The value is
/// parsed as JSON when possible and taken as a string otherwise.
inline void apply_override(Json& doc, const std::string& dotted, const std::string& raw) {
  Json* node = &doc;
  std::stringstream ss(dotted);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("empty override key");
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i])) throw ConfigError("override: unknown key '" + dotted + "'");
    node = &(*node)[parts[i]];
  }
  if (node->is_object()) throw ConfigError("override: '" + dotted + "' names a section, not a value");
  Json value = Json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  if (!detail::same_kind(*node, value))
    throw ConfigError("override: '" + dotted + "' expects a " + std::string(node->type_name()));
  *node = value;
}

/// Parses config text into the full document (defaults + patch).
inline Json parse_config_text(const std::string& text, const std::string& origin = "config") {
  Json patch;
  try {
    patch = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  Json doc = to_json(ExperimentConfig{});
  detail::merge_strict(doc, patch, "", origin, text);
  return doc;
}

inline Json load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path.string());
}

// ---- metrics output -------------------------------------------------------

inline Json to_json(const MetricsRecord& r) {
  Json per_class = Json::object();
  for (const auto& [c, a] : r.per_class_accuracy) per_class[std::to_string(c)] = a;
  return Json{{"session", r.session},
              {"seen_classes", r.seen_classes},
              {"accuracy", r.accuracy},
              {"per_class_accuracy", per_class},
              {"comm",
               {{"params_up", r.comm.params_up},
                {"params_down", r.comm.params_down},
                {"shared_samples", r.comm.shared_samples},
                {"logit_scalars", r.comm.logit_scalars}}}};
}

/// One document per run: the effective config, per-session records and summary.
inline Json metrics_document(const ExperimentConfig& cfg, const std::vector<MetricsRecord>& records) {
  const Summary s = summarize(records);
  Json recs = Json::array();
  for (const MetricsRecord& r : records) recs.push_back(to_json(r));
  return Json{{"method", to_string(cfg.run.method)},
              {"seed", cfg.run.seed},
              {"config", to_json(cfg)},
              {"records", recs},
              {"summary",
               {{"average_accuracy", s.average_accuracy},
                {"final_accuracy", s.final_accuracy},
                {"params_transferred", s.params_transferred}}}};
}

inline constexpr const char* kRunCsvHeader =
    "session,seen_classes,accuracy,params_up,params_down,shared_samples,logit_scalars";

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRecord>& records) {
  os << kRunCsvHeader << '\n' << std::setprecision(17);
  for (const MetricsRecord& r : records)
    os << r.session << ',' << r.seen_classes << ',' << r.accuracy << ',' << r.comm.params_up << ','
       << r.comm.params_down << ',' << r.comm.shared_samples << ',' << r.comm.logit_scalars << '\n';
}

/// Writes `content` to a temporary sibling and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace dcil
