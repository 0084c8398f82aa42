#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adseg/adapt.hpp"
#include "adseg/checkpoint.hpp"
#include "adseg/dataset.hpp"
#include "adseg/metrics.hpp"

namespace adseg {

struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<std::string> order;          // processing order of sample ids
  std::vector<int> clicks_to_target;       // per sample, dataset order
  std::vector<std::vector<Real>> curves;   // per sample, dataset order, IoU after k clicks
  Real mean_clicks = 0;
  std::vector<Real> iou_at_k;              // mean over samples
  int sa_steps = 0;
  int ia_steps = 0;                        // optimizer steps taken inside sessions

  friend bool operator==(const SeedRun&, const SeedRun&) = default;
};

struct EvalReport {
  std::string mode;
  std::string dataset;
  std::string checkpoint_id;
  std::string importance_source;
  AdaptConfig config;
  std::vector<SeedRun> runs;
  Real mean_clicks = 0;  // pooled over seeds and samples
  Real std_clicks = 0;   // standard deviation of the per-seed means
  std::vector<Real> iou_at_k;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// FNV-1a over the serialized checkpoint.
inline std::string checkpoint_id(const Checkpoint& ckpt) {
  std::ostringstream os;
  write_checkpoint(os, ckpt);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : os.str()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct EvalOptions {
  bool shuffle = true;
  AdaptLog log;
};

/// Runs the simulated-user protocol once per seed. Sequence modes see the
/// images in a seed-dependent order; per-sample results are stored and
/// pooled in dataset order, so order-independent modes give identical pools.
inline EvalReport evaluate_sequence(const Dataset& data, const Checkpoint& ckpt, AdaptMode mode, const AdaptConfig& cfg,
                                    const std::vector<std::uint64_t>& seeds, const EvalOptions& opts = {}) {
  if (data.empty()) throw ConfigError("evaluate_sequence: empty dataset");
  if (seeds.empty()) throw ConfigError("evaluate_sequence: need at least one seed");
  validate(cfg);
  EvalReport report;
  report.mode = mode_name(mode);
  report.dataset = data.domain;
  report.checkpoint_id = checkpoint_id(ckpt);
  report.config = cfg;

  std::shared_ptr<const ImportanceSet> omega;
  if (ckpt.importance) {
    omega = std::make_shared<const ImportanceSet>(*ckpt.importance);
    report.importance_source = "checkpoint";
  } else {
    omega = std::make_shared<const ImportanceSet>(base_importance(ckpt.params, data, 32, cfg.disk_radius));
    report.importance_source = "evaluation images";
  }

  const std::size_t N = data.size();
  const std::size_t K = static_cast<std::size_t>(cfg.click_budget) + 1;
  for (std::uint64_t seed : seeds) {
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (opts.shuffle) std::shuffle(order.begin(), order.end(), rng);

    SeedRun run;
    run.seed = seed;
    AdaptLog log = [&](const nlohmann::json& j) {
      if (j.value("phase", "") == "ia") ++run.ia_steps;
      if (opts.log) {
        nlohmann::json rec = j;
        rec["seed"] = seed;
        opts.log(rec);
      }
    };
    SequenceResult res = combined_adapt(data, order, ckpt.params, omega, cfg, mode, rng, log);
    run.sa_steps = res.sa_steps;
    run.clicks_to_target.assign(N, 0);
    run.curves.assign(N, {});
    for (std::size_t t = 0; t < order.size(); ++t) {
      run.order.push_back(res.ids[t]);
      run.curves[order[t]] = res.images[t].iou_curve;
      run.clicks_to_target[order[t]] = clicks_at_q(res.images[t].iou_curve, cfg.target_iou, cfg.click_budget);
    }
    run.iou_at_k.assign(K, 0);
    Real clicks = 0;
    for (std::size_t i = 0; i < N; ++i) {
      clicks += run.clicks_to_target[i];
      for (std::size_t k = 0; k < K; ++k) run.iou_at_k[k] += run.curves[i][k];
    }
    run.mean_clicks = clicks / static_cast<Real>(N);
    for (auto& v : run.iou_at_k) v /= static_cast<Real>(N);
    report.runs.push_back(std::move(run));
  }

  const auto S = static_cast<Real>(report.runs.size());
  report.iou_at_k.assign(K, 0);
  Real pooled = 0;
  for (const SeedRun& r : report.runs) {
    pooled += r.mean_clicks;
    for (std::size_t k = 0; k < K; ++k) report.iou_at_k[k] += r.iou_at_k[k];
  }
  report.mean_clicks = pooled / S;
  for (auto& v : report.iou_at_k) v /= S;
  Real var = 0;
  for (const SeedRun& r : report.runs) var += (r.mean_clicks - report.mean_clicks) * (r.mean_clicks - report.mean_clicks);
  report.std_clicks = report.runs.size() > 1 ? std::sqrt(var / (S - 1)) : Real{0};
  return report;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const SeedRun& s : r.runs) {
    runs.push_back({{"seed", s.seed},
                    {"order", s.order},
                    {"clicks_to_target", s.clicks_to_target},
                    {"curves", s.curves},
                    {"mean_clicks", s.mean_clicks},
                    {"iou_at_k", s.iou_at_k},
                    {"sa_steps", s.sa_steps},
                    {"ia_steps", s.ia_steps}});
  }
  return {{"mode", r.mode},
          {"dataset", r.dataset},
          {"checkpoint_id", r.checkpoint_id},
          {"importance_source", r.importance_source},
          {"config", to_json(r.config)},
          {"mean_clicks", r.mean_clicks},
          {"std_clicks", r.std_clicks},
          {"iou_at_k", r.iou_at_k},
          {"runs", runs}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.mode = j.at("mode").get<std::string>();
    r.dataset = j.at("dataset").get<std::string>();
    r.checkpoint_id = j.at("checkpoint_id").get<std::string>();
    r.importance_source = j.at("importance_source").get<std::string>();
    r.config = adapt_config_from_json(j.at("config"));
    r.mean_clicks = j.at("mean_clicks").get<Real>();
    r.std_clicks = j.at("std_clicks").get<Real>();
    r.iou_at_k = j.at("iou_at_k").get<std::vector<Real>>();
    for (const auto& s : j.at("runs")) {
      SeedRun run;
      run.seed = s.at("seed").get<std::uint64_t>();
      run.order = s.at("order").get<std::vector<std::string>>();
      run.clicks_to_target = s.at("clicks_to_target").get<std::vector<int>>();
      run.curves = s.at("curves").get<std::vector<std::vector<Real>>>();
      run.mean_clicks = s.at("mean_clicks").get<Real>();
      run.iou_at_k = s.at("iou_at_k").get<std::vector<Real>>();
      run.sa_steps = s.at("sa_steps").get<int>();
      run.ia_steps = s.at("ia_steps").get<int>();
      r.runs.push_back(std::move(run));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed report: ") + e.what());
  }
  return r;
}

inline void save_report(const EvalReport& r, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write report " + path);
  os << to_json(r).dump(2) << '\n';
  if (!os) throw IoError("failed writing report " + path);
}

inline EvalReport load_report(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open report " + path);
  try {
    return report_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(std::string("report is not JSON: ") + e.what());
  }
}

/// One row per k: "k,<mode1>,<mode2>,..." with the pooled IoU@k.
inline void save_curve_csv(const std::vector<EvalReport>& reports, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << 'k';
  for (const auto& r : reports) os << ',' << r.mode;
  os << '\n';
  std::size_t K = 0;
  for (const auto& r : reports) K = std::max(K, r.iou_at_k.size());
  os.precision(17);
  for (std::size_t k = 0; k < K; ++k) {
    os << k;
    for (const auto& r : reports) {
      os << ',';
      if (k < r.iou_at_k.size()) os << r.iou_at_k[k];
    }
    os << '\n';
  }
}

}  // namespace adseg
