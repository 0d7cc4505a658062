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

// Command-line front end: `run` and `compare`.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dcil/config.hpp"
#include "dcil/orchestrator.hpp"
#include "dcil/parallel.hpp"

namespace dcil {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

inline constexpr const char* kCompareCsvHeader = "method,session,mean_acc,std_acc";
inline constexpr const char* kSummaryCsvHeader = "method,avg_acc_mean,final_acc_mean";
inline constexpr const char* kAlphaCsvHeader = "alpha,method,avg_acc_mean,avg_acc_std,final_acc_mean";

/// Mean and sample standard deviation (0 for a single value).
struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double s = 0.0;
    for (double x : v) s += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(s / static_cast<double>(v.size() - 1));
  }
  return r;
}

/// Results of one method over a seed list.
struct MethodRuns {
  std::string method;
  std::vector<std::vector<MetricsRecord>> per_seed;
};

/// Runs every (method, seed) pair of `cfg` on a pool of `threads` workers.
/// Each pair runs single-threaded; results land in fixed slots.
inline std::vector<MethodRuns> run_grid(const ExperimentConfig& cfg, std::size_t threads) {
  std::vector<std::uint64_t> seeds = cfg.sweep_seeds;
  if (seeds.empty()) seeds.push_back(cfg.run.seed);
  std::vector<MethodRuns> out(cfg.sweep_methods.size());
  for (std::size_t m = 0; m < out.size(); ++m) {
    out[m].method = cfg.sweep_methods[m];
    out[m].per_seed.resize(seeds.size());
  }
  parallel_for(out.size() * seeds.size(), threads, [&](std::size_t i) {
    const std::size_t m = i / seeds.size(), s = i % seeds.size();
    RunConfig rc = cfg.run;
    rc.method = parse_method(cfg.sweep_methods[m]);
    rc.seed = seeds[s];
    rc.threads = 1;
    out[m].per_seed[s] = run(rc);
  });
  return out;
}

inline std::string compare_csv(const std::vector<MethodRuns>& grid) {
  std::ostringstream os;
  os << kCompareCsvHeader << '\n' << std::setprecision(17);
  for (const MethodRuns& mr : grid) {
    const std::size_t n_sessions = mr.per_seed.front().size();
    for (std::size_t t = 0; t < n_sessions; ++t) {
      std::vector<double> acc;
      for (const auto& recs : mr.per_seed) acc.push_back(recs[t].accuracy);
      const MeanStd ms = mean_std(acc);
      os << mr.method << ',' << t << ',' << ms.mean << ',' << ms.std << '\n';
    }
  }
  return os.str();
}

inline std::string summary_csv(const std::vector<MethodRuns>& grid) {
  std::ostringstream os;
  os << kSummaryCsvHeader << '\n' << std::setprecision(17);
  for (const MethodRuns& mr : grid) {
    std::vector<double> avg, fin;
    for (const auto& recs : mr.per_seed) {
      const Summary s = summarize(recs);
      avg.push_back(s.average_accuracy);
      fin.push_back(s.final_accuracy);
    }
    os << mr.method << ',' << mean_std(avg).mean << ',' << mean_std(fin).mean << '\n';
  }
  return os.str();
}

namespace detail {

inline void print_usage(std::ostream& err) {
  err << "usage: dcil_sim run <config> [--seed=N] [--method=NAME] [--out=DIR] [--key.path=value ...]\n"
         "       dcil_sim compare <config> [--out=DIR] [--key.path=value ...]\n"
         "       dcil_sim --help\n";
}

// Splits leftover arguments into dotted overrides. Anything else is a usage error.
inline std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const std::string& a : extras) {
    const std::size_t eq = a.find('=');
    if (a.rfind("--", 0) != 0 || eq == std::string::npos || eq == 2)
      throw ConfigError("unexpected argument '" + a + "' (overrides take the form --key.path=value)");
    out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
  }
  return out;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

inline int cmd_run(const ExperimentConfig& cfg, std::ostream& out) {
  RunConfig rc = cfg.run;
  rc.threads = threads_from_env(rc.threads);
  const std::vector<MetricsRecord> records = run(rc);
  const std::filesystem::path dir(cfg.out_dir);
  std::filesystem::create_directories(dir);
  const std::string stem = "run_" + to_string(cfg.run.method) + "_seed" + std::to_string(cfg.run.seed);
  write_file_atomic(dir / (stem + ".json"), metrics_document(cfg, records).dump(2) + "\n");
  std::ostringstream csv;
  write_metrics_csv(csv, records);
  write_file_atomic(dir / (stem + ".csv"), csv.str());
  const Summary s = summarize(records);
  out << to_string(cfg.run.method) << ", " << fmt(s.average_accuracy) << ", " << fmt(s.final_accuracy) << ", "
      << s.params_transferred << '\n';
  return kExitOk;
}

inline int cmd_compare(const ExperimentConfig& cfg, std::ostream& out) {
  if (cfg.sweep_methods.size() < 2) throw ConfigError("compare: sweep.methods must list at least 2 methods");
  const std::size_t threads = threads_from_env(cfg.run.threads);
  const std::filesystem::path dir(cfg.out_dir);
  std::filesystem::create_directories(dir);

  const std::vector<MethodRuns> grid = run_grid(cfg, threads);
  write_file_atomic(dir / "compare.csv", compare_csv(grid));
  const std::string summary = summary_csv(grid);
  write_file_atomic(dir / "summary.csv", summary);
  out << summary;

  if (!cfg.sweep_alphas.empty()) {
    std::ostringstream os;
    os << kAlphaCsvHeader << '\n' << std::setprecision(17);
    for (double alpha : cfg.sweep_alphas) {
      ExperimentConfig a = cfg;
      a.run.partition = PartitionKind::dirichlet;
      a.run.alpha = alpha;
      for (const MethodRuns& mr : run_grid(a, threads)) {
        std::vector<double> avg, fin;
        for (const auto& recs : mr.per_seed) {
          const Summary s = summarize(recs);
          avg.push_back(s.average_accuracy);
          fin.push_back(s.final_accuracy);
        }
        const MeanStd ms = mean_std(avg);
        os << Json(alpha).dump() << ',' << mr.method << ',' << ms.mean << ',' << ms.std << ',' << mean_std(fin).mean << '\n';
      }
    }
    write_file_atomic(dir / "alpha_sweep.csv", os.str());
  }
  return kExitOk;
}

}  // namespace detail

/// Entry point for the dcil_sim binary. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Decentralized class-incremental learning simulator"};
  app.require_subcommand(0, 1);
  app.footer("Config files are JSON patches over these defaults:\n" + to_json(ExperimentConfig{}).dump(2) +
             "\nAny key can be overridden with --key.path=value. Env DCIL_THREADS bounds the worker pool.");

  std::string config_path;
  std::int64_t seed = -1;
  std::string method, out_dir;

  CLI::App* run_cmd = app.add_subcommand("run", "run one experiment");
  run_cmd->add_option("config", config_path, "config file (JSON)")->required();
  run_cmd->add_option("--seed", seed, "root seed");
  run_cmd->add_option("--method", method, "dcid | dcil_fedavg | dcil_fedmax | dcil_fedprox | centralized");
  run_cmd->add_option("--out", out_dir, "output directory");
  run_cmd->allow_extras();

  CLI::App* cmp_cmd = app.add_subcommand("compare", "compare methods over the sweep seeds");
  cmp_cmd->add_option("config", config_path, "config file (JSON)")->required();
  cmp_cmd->add_option("--out", out_dir, "output directory");
  cmp_cmd->allow_extras();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    detail::print_usage(err);
    return kExitUsage;
  }
  CLI::App* cmd = run_cmd->parsed() ? run_cmd : cmp_cmd->parsed() ? cmp_cmd : nullptr;
  if (cmd == nullptr) {
    detail::print_usage(err);
    return kExitUsage;
  }

  ExperimentConfig cfg;
  try {
    Json doc = load_config_file(config_path);
    for (const auto& [key, value] : detail::parse_overrides(cmd->remaining()))
      apply_override(doc, key, value);
    if (seed >= 0) apply_override(doc, "seed", std::to_string(seed));
    if (!method.empty()) apply_override(doc, "method", Json(method).dump());
    if (!out_dir.empty()) apply_override(doc, "output.dir", Json(out_dir).dump());
    cfg = from_json(doc);
    cfg.run.validate();
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    detail::print_usage(err);
    return kExitUsage;
  }

  try {
    return cmd == run_cmd ? detail::cmd_run(cfg, out) : detail::cmd_compare(cfg, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace dcil
