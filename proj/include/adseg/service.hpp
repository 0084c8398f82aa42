#pragma once

// HTTP front end for live annotation.
//
//   POST /sessions?ia=0|1&sa=0|1[&probabilities=1]   body: PNG image
//   POST /sessions/{id}/clicks                          body: {"row","col","label"}
//   POST /sessions/{id}/finish
//   GET  /sessions/{id}/mask                            image/png
//   GET  /status
//
// Clicks are given in image pixel coordinates. Images are resampled to the
// model grid and masks are returned at the original image size.

#include <httplib.h>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>

#include <nlohmann/json.hpp>

#include "adseg/adapt.hpp"
#include "adseg/checkpoint.hpp"
#include "adseg/evaluate.hpp"
#include "adseg/image_io.hpp"

namespace adseg {

struct ServiceConfig {
  AdaptConfig adapt;
  bool default_ia = true;
  bool default_sa = true;
  std::size_t max_body_bytes = 8u << 20;
  std::size_t max_pixels = 4096u * 4096u;
  std::uint64_t seed = 0;  // guidance subsampling of sequence steps
};

class AnnotationService {
 public:
  AnnotationService(Checkpoint ckpt, ServiceConfig cfg)
      : cfg_(std::move(cfg)),
        checkpoint_id_(checkpoint_id(ckpt)),
        theta_star_(ckpt.params),
        theta_(ckpt.params),
        sa_opt_(adam_init(ckpt.params.values)),
        rng_(cfg_.seed) {
    validate(cfg_.adapt);
    if (ckpt.importance) {
      omega_ = std::make_shared<const ImportanceSet>(std::move(*ckpt.importance));
      importance_source_ = "checkpoint";
    } else {
      ImportanceSet ones = ckpt.params.values.zeros_like();
      for (std::size_t i = 0; i < ones.size(); ++i)
        for (auto& v : ones.entry(i).second.data()) v = 1;
      omega_ = std::make_shared<const ImportanceSet>(std::move(ones));
      importance_source_ = "uniform";
    }
    routes();
  }

  httplib::Server& server() { return server_; }

  bool listen(const std::string& host, int port) { return server_.listen(host, port); }
  int bind_any(const std::string& host = "127.0.0.1") { return server_.bind_to_any_port(host); }
  bool listen_after_bind() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }

  /// Copy of the sequence parameters (taken under the sequence lock).
  ParamSet sequence_parameters() const {
    std::lock_guard lock(sequence_mutex_);
    return theta_;
  }
  int images_adapted() const {
    std::lock_guard lock(sequence_mutex_);
    return images_adapted_;
  }

 private:
  struct Entry {
    std::mutex mutex;
    std::string id;
    bool ia = false;
    bool sa = false;
    std::int64_t created = 0;
    std::size_t height = 0, width = 0;  // original image size
    std::unique_ptr<Session> session;
    std::string mask_png;
    bool closed = false;
  };

  static nlohmann::json error_body(const std::string& msg) { return {{"error", msg}}; }

  static void reply(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static std::optional<bool> flag(const httplib::Request& req, const std::string& key, bool fallback) {
    if (!req.has_param(key)) return fallback;
    const std::string v = req.get_param_value(key);
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    return std::nullopt;
  }

  std::shared_ptr<Entry> find(const std::string& id) {
    std::lock_guard lock(sessions_mutex_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

  static nlohmann::json stats(const Prediction& p) {
    const auto& pr = p.probabilities.data();
    Real lo = pr.front(), hi = pr.front(), sum = 0;
    for (Real v : pr) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      sum += v;
    }
    Real fg = 0;
    for (Real v : p.binary.data()) fg += v;
    const auto n = static_cast<Real>(pr.size());
    return {{"min", lo}, {"max", hi}, {"mean", sum / n}, {"foreground_fraction", fg / n}};
  }

  // Caller holds e.mutex.
  nlohmann::json prediction_body(Entry& e, bool with_probabilities) {
    const Prediction& p = e.session->prediction();
    e.mask_png = encode_png(to_raster(resize_nearest(p.binary, e.height, e.width)));
    nlohmann::json j{{"id", e.id},
                     {"height", e.height},
                     {"width", e.width},
                     {"clicks_used", e.session->clicks_used()},
                     {"mask_png", httplib::detail::base64_encode(e.mask_png)},
                     {"probability_stats", stats(p)}};
    if (with_probabilities) {
      const Tensor grid({1, p.probabilities.dim(0), p.probabilities.dim(1)}, p.probabilities.data());
      const Tensor up = resize_bilinear(grid, e.height, e.width);
      j["probabilities_png16"] = httplib::detail::base64_encode(encode_png16(Tensor({e.height, e.width}, up.data())));
    }
    return j;
  }

  void create(const httplib::Request& req, httplib::Response& res) {
    const auto ia = flag(req, "ia", cfg_.default_ia);
    const auto sa = flag(req, "sa", cfg_.default_sa);
    const auto probs = flag(req, "probabilities", false);
    if (!ia || !sa || !probs) return reply(res, 400, error_body("boolean query flags must be 0/1/true/false"));
    Raster raster;
    try {
      raster = decode_png(req.body);
    } catch (const IoError& e) {
      return reply(res, 400, error_body(e.what()));
    }
    if (raster.height * raster.width > cfg_.max_pixels) return reply(res, 413, error_body("image too large"));

    auto e = std::make_shared<Entry>();
    e->ia = *ia;
    e->sa = *sa;
    e->height = raster.height;
    e->width = raster.width;
    e->created = std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch()).count();
    const ParamSet start = sequence_parameters();
    Tensor image = resize_bilinear(to_tensor(raster), start.arch.height, start.arch.width);
    for (auto& v : image.data()) v = std::clamp(v, Real{0}, Real{1});
    e->session = std::make_unique<Session>(std::move(image), start, omega_, cfg_.adapt, e->ia);
    e->id = "s" + std::to_string(next_id_.fetch_add(1) + 1);
    std::lock_guard lock(e->mutex);
    nlohmann::json body = prediction_body(*e, *probs);
    body["ia"] = e->ia;
    body["sa"] = e->sa;
    body["created"] = e->created;
    {
      std::lock_guard slock(sessions_mutex_);
      sessions_.emplace(e->id, e);
    }
    reply(res, 201, body);
  }

  void click(const httplib::Request& req, httplib::Response& res) {
    auto e = find(req.path_params.at("id"));
    if (!e) return reply(res, 404, error_body("unknown session"));
    const auto probs = flag(req, "probabilities", false);
    if (!probs) return reply(res, 400, error_body("probabilities must be 0/1/true/false"));
    long long row = 0, col = 0;
    Label label{};
    try {
      const auto j = nlohmann::json::parse(req.body);
      row = j.at("row").get<long long>();
      col = j.at("col").get<long long>();
      const auto& l = j.at("label");
      if (l.is_string()) {
        const auto s = l.get<std::string>();
        if (s == "positive") label = Label::kPositive;
        else if (s == "negative") label = Label::kNegative;
        else return reply(res, 422, error_body("label must be positive or negative"));
      } else {
        const int v = l.get<int>();
        if (v != 0 && v != 1) return reply(res, 422, error_body("label must be 0 or 1"));
        label = v == 1 ? Label::kPositive : Label::kNegative;
      }
    } catch (const nlohmann::json::exception& ex) {
      return reply(res, 400, error_body(std::string("bad click body: ") + ex.what()));
    }
    std::lock_guard lock(e->mutex);
    if (e->closed) return reply(res, 404, error_body("unknown session"));
    if (row < 0 || col < 0 || static_cast<std::size_t>(row) >= e->height || static_cast<std::size_t>(col) >= e->width)
      return reply(res, 422, error_body("click outside the image"));
    if (e->session->budget_exhausted()) return reply(res, 409, error_body("click budget exhausted"));
    const std::size_t H = e->session->theta().arch.height, W = e->session->theta().arch.width;
    const auto map = [](long long v, std::size_t from, std::size_t to) {
      return std::min<std::size_t>(to - 1, static_cast<std::size_t>((static_cast<double>(v) + 0.5) * static_cast<double>(to) /
                                                                    static_cast<double>(from)));
    };
    e->session->click(Click{static_cast<int>(map(row, e->height, H)), static_cast<int>(map(col, e->width, W)), label});
    if (!e->ia) ADSEG_CHECK(e->session->theta().values == e->session->theta_star().values, Error, "frozen session changed its parameters");
    reply(res, 200, prediction_body(*e, *probs));
  }

  void finish(const httplib::Request& req, httplib::Response& res) {
    auto e = find(req.path_params.at("id"));
    if (!e) return reply(res, 404, error_body("unknown session"));
    std::lock_guard lock(e->mutex);
    if (e->closed) return reply(res, 404, error_body("unknown session"));
    bool applied = false;
    {
      std::lock_guard seq(sequence_mutex_);
      if (e->sa) {
        const ImageRecord record{e->session->image(), e->session->corrections().clicks, e->session->prediction()};
        applied = sequence_adapt_step(theta_, record, theta_star_.values, *omega_, sa_opt_, cfg_.adapt, rng_);
        if (applied) ++images_adapted_;
      }
    }
    e->closed = true;
    e->session.reset();
    {
      std::lock_guard slock(sessions_mutex_);
      sessions_.erase(e->id);
    }
    reply(res, 200, {{"id", e->id}, {"applied_sa", applied}});
  }

  void mask(const httplib::Request& req, httplib::Response& res) {
    auto e = find(req.path_params.at("id"));
    if (!e) return reply(res, 404, error_body("unknown session"));
    std::lock_guard lock(e->mutex);
    if (e->closed) return reply(res, 404, error_body("unknown session"));
    res.status = 200;
    res.set_content(e->mask_png, "image/png");
  }

  void status(httplib::Response& res) {
    std::size_t open = 0;
    {
      std::lock_guard slock(sessions_mutex_);
      open = sessions_.size();
    }
    const ParamSet& p = theta_star_;
    reply(res, 200,
          {{"checkpoint_id", checkpoint_id_},
           {"images_adapted", images_adapted()},
           {"open_sessions", open},
           {"importance_source", importance_source_},
           {"model_size", {{"height", p.arch.height}, {"width", p.arch.width}}},
           {"defaults", {{"ia", cfg_.default_ia}, {"sa", cfg_.default_sa}}},
           {"config", to_json(cfg_.adapt)}});
  }

  void routes() {
    server_.set_payload_max_length(cfg_.max_body_bytes);
    server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& ex) {
        reply(res, 500, error_body(ex.what()));
      } catch (...) {
        reply(res, 500, error_body("internal error"));
      }
    });
    server_.Post("/sessions", [this](const httplib::Request& q, httplib::Response& r) { create(q, r); });
    server_.Post("/sessions/:id/clicks", [this](const httplib::Request& q, httplib::Response& r) { click(q, r); });
    server_.Post("/sessions/:id/finish", [this](const httplib::Request& q, httplib::Response& r) { finish(q, r); });
    server_.Get("/sessions/:id/mask", [this](const httplib::Request& q, httplib::Response& r) { mask(q, r); });
    server_.Get("/status", [this](const httplib::Request&, httplib::Response& r) { status(r); });
  }

  ServiceConfig cfg_;
  std::string checkpoint_id_;
  std::string importance_source_;
  ParamSet theta_star_;
  std::shared_ptr<const ImportanceSet> omega_;

  mutable std::mutex sequence_mutex_;
  ParamSet theta_;
  AdamState sa_opt_;
  std::mt19937_64 rng_;
  int images_adapted_ = 0;

  std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::atomic<std::uint64_t> next_id_{0};

  httplib::Server server_;
};

}  // namespace adseg
