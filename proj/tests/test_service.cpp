#include <gtest/gtest.h>

#include <thread>

#include "support.hpp"

using namespace adseg;
using namespace testing_support;
using nlohmann::json;

namespace {

Checkpoint small_checkpoint(bool with_importance = true) {
  ArchDescriptor d;
  d.widths = {4, 8};
  d.height = d.width = 16;
  const ParamSet m = build_model(d, 31);
  std::optional<NamedTensors> omega;
  if (with_importance) {
    NamedTensors o = m.values.zeros_like();
    for (auto& [_, t] : o)
      for (auto& v : t.data()) v = 0.5;
    omega = std::move(o);
  }
  return round_trip({m, omega});
}

std::string test_png(std::size_t H = 20, std::size_t W = 24) {
  Raster r{H, W, 3, {}};
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const bool in = (i - H / 2.0) * (i - H / 2.0) + (j - W / 2.0) * (j - W / 2.0) < 30;
      for (int c = 0; c < 3; ++c) r.pixels.push_back(in ? 220 : static_cast<std::uint8_t>(30 + 3 * c));
    }
  return encode_png(r);
}

class Server {
 public:
  explicit Server(ServiceConfig cfg = {}, bool with_importance = true)
      : service_(small_checkpoint(with_importance), cfg) {
    port_ = service_.bind_any();
    thread_ = std::thread([this] { service_.listen_after_bind(); });
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    for (int i = 0; i < 200 && !client_->Get("/status"); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  ~Server() {
    service_.stop();
    thread_.join();
  }

  httplib::Client& http() { return *client_; }
  AnnotationService& service() { return service_; }
  int port() const { return port_; }

  httplib::Result create(const std::string& query = "", const std::string& body = test_png()) {
    return client_->Post("/sessions" + query, body, "image/png");
  }
  std::string open(const std::string& query = "") {
    auto r = create(query);
    EXPECT_EQ(r->status, 201);
    return json::parse(r->body).at("id").get<std::string>();
  }
  httplib::Result click(const std::string& id, const json& body) {
    return client_->Post("/sessions/" + id + "/clicks", body.dump(), "application/json");
  }
  httplib::Result finish(const std::string& id) { return client_->Post("/sessions/" + id + "/finish", "", "text/plain"); }
  json status() { return json::parse(client_->Get("/status")->body); }

 private:
  AnnotationService service_;
  int port_ = 0;
  std::thread thread_;
  std::unique_ptr<httplib::Client> client_;
};

}  // namespace

TEST(Service, CreateSession) {
  Server s;
  auto r = s.create("?probabilities=1");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 201);
  const json j = json::parse(r->body);
  EXPECT_EQ(j.at("height"), 20);
  EXPECT_EQ(j.at("width"), 24);
  EXPECT_EQ(j.at("clicks_used"), 0);
  EXPECT_EQ(j.at("ia"), true);
  EXPECT_EQ(j.at("sa"), true);
  EXPECT_TRUE(j.contains("probabilities_png16"));
  const json& st = j.at("probability_stats");
  EXPECT_GE(st.at("min").get<double>(), kProbEps);
  EXPECT_LE(st.at("max").get<double>(), 1 - kProbEps);

  auto m = s.http().Get("/sessions/" + j.at("id").get<std::string>() + "/mask");
  ASSERT_EQ(m->status, 200);
  EXPECT_EQ(m->get_header_value("Content-Type"), "image/png");
  EXPECT_EQ(httplib::detail::base64_encode(m->body), j.at("mask_png").get<std::string>());
  const Raster mask = decode_png(m->body, true);
  EXPECT_EQ(mask.height, 20u);
  EXPECT_EQ(mask.width, 24u);
  for (auto v : mask.pixels) EXPECT_TRUE(v == 0 || v == 255);
}

TEST(Service, RejectsBadUploads) {
  ServiceConfig cfg;
  cfg.max_pixels = 30 * 30;
  Server s(cfg);
  EXPECT_EQ(s.create("", "definitely not a png")->status, 400);
  EXPECT_EQ(s.create("?ia=maybe")->status, 400);
  EXPECT_EQ(s.create("", test_png(40, 40))->status, 413);
  EXPECT_EQ(s.status().at("open_sessions"), 0);
}

TEST(Service, ClickErrors) {
  Server s;
  const std::string id = s.open();
  EXPECT_EQ(s.click("nope", {{"row", 1}, {"col", 1}, {"label", "positive"}})->status, 404);
  EXPECT_EQ(s.click(id, {{"row", 20}, {"col", 1}, {"label", "positive"}})->status, 422);
  EXPECT_EQ(s.click(id, {{"row", -1}, {"col", 1}, {"label", 1}})->status, 422);
  EXPECT_EQ(s.click(id, {{"row", 1}, {"col", 1}, {"label", "maybe"}})->status, 422);
  EXPECT_EQ(s.click(id, {{"row", 1}, {"col", 1}, {"label", 2}})->status, 422);
  EXPECT_EQ(s.click(id, {{"row", 1}, {"label", "positive"}})->status, 400);
  EXPECT_EQ(s.http().Post("/sessions/" + id + "/clicks", "{", "application/json")->status, 400);
  EXPECT_EQ(s.http().Get("/sessions/nope/mask")->status, 404);
  EXPECT_EQ(s.finish("nope")->status, 404);
}

TEST(Service, BudgetExhaustion) {
  Server s;
  const std::string id = s.open("?ia=0");
  for (int k = 0; k < 20; ++k) {
    auto r = s.click(id, {{"row", k % 20}, {"col", k}, {"label", k % 2}});
    ASSERT_EQ(r->status, 200) << k;
    EXPECT_EQ(json::parse(r->body).at("clicks_used"), k + 1);
  }
  EXPECT_EQ(s.click(id, {{"row", 0}, {"col", 0}, {"label", "negative"}})->status, 409);
}

TEST(Service, FinishWithoutClicksSkipsSequenceStep) {
  Server s;
  const ParamSet before = s.service().sequence_parameters();
  const std::string id = s.open();
  auto r = s.finish(id);
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(json::parse(r->body).at("applied_sa"), false);
  EXPECT_EQ(s.status().at("images_adapted"), 0);
  EXPECT_EQ(s.service().sequence_parameters(), before);
  EXPECT_EQ(s.finish(id)->status, 404);
  EXPECT_EQ(s.http().Get("/sessions/" + id + "/mask")->status, 404);
}

TEST(Service, SequenceStepOnlyWhenEnabled) {
  Server s;
  const ParamSet before = s.service().sequence_parameters();
  const std::string frozen = s.open("?ia=0&sa=0");
  ASSERT_EQ(s.click(frozen, {{"row", 10}, {"col", 12}, {"label", "positive"}})->status, 200);
  EXPECT_EQ(json::parse(s.finish(frozen)->body).at("applied_sa"), false);
  EXPECT_EQ(s.service().sequence_parameters(), before);

  const std::string adaptive = s.open("?ia=1&sa=true");
  ASSERT_EQ(s.click(adaptive, {{"row", 10}, {"col", 12}, {"label", "positive"}})->status, 200);
  EXPECT_EQ(s.service().sequence_parameters(), before);
  EXPECT_EQ(json::parse(s.finish(adaptive)->body).at("applied_sa"), true);
  EXPECT_EQ(s.status().at("images_adapted"), 1);
  EXPECT_FALSE(s.service().sequence_parameters() == before);
}

TEST(Service, Status) {
  Server s({}, false);
  s.open();
  const json st = s.status();
  EXPECT_EQ(st.at("checkpoint_id"), checkpoint_id(small_checkpoint(false)));
  EXPECT_EQ(st.at("open_sessions"), 1);
  EXPECT_EQ(st.at("images_adapted"), 0);
  EXPECT_EQ(st.at("importance_source"), "uniform");
  EXPECT_EQ(st.at("model_size").at("height"), 16);
  EXPECT_EQ(st.at("defaults").at("ia"), true);
  EXPECT_EQ(st.at("config").at("click_budget"), 20);
}

TEST(Service, ReplayIsDeterministic) {
  const std::vector<json> clicks = {{{"row", 10}, {"col", 12}, {"label", "positive"}},
                                    {{"row", 2}, {"col", 3}, {"label", "negative"}},
                                    {{"row", 15}, {"col", 20}, {"label", "negative"}},
                                    {{"row", 9}, {"col", 9}, {"label", "positive"}},
                                    {{"row", 11}, {"col", 14}, {"label", 1}}};
  auto replay = [&] {
    Server s;
    std::vector<std::string> masks;
    for (int image = 0; image < 2; ++image) {
      const std::string id = s.open();
      for (const json& c : clicks) masks.push_back(json::parse(s.click(id, c)->body).at("mask_png").get<std::string>());
      s.finish(id);
    }
    return masks;
  };
  EXPECT_EQ(replay(), replay());
}

TEST(Service, ConcurrentSessions) {
  Server s;
  std::vector<std::thread> workers;
  std::atomic<int> ok{0};
  for (int w = 0; w < 4; ++w) {
    workers.emplace_back([&, w] {
      httplib::Client c("127.0.0.1", s.port());
      auto r = c.Post("/sessions?ia=1", test_png(), "image/png");
      if (!r || r->status != 201) return;
      const std::string id = json::parse(r->body).at("id").get<std::string>();
      for (int k = 0; k < 3; ++k) {
        const json body{{"row", 3 + w}, {"col", 4 + k}, {"label", k % 2}};
        auto cr = c.Post("/sessions/" + id + "/clicks", body.dump(), "application/json");
        if (cr && cr->status == 200) ++ok;
      }
      c.Post("/sessions/" + id + "/finish", "", "text/plain");
    });
  }
  for (auto& t : workers) t.join();
  EXPECT_EQ(ok.load(), 12);
  EXPECT_EQ(s.status().at("images_adapted"), 4);
  EXPECT_EQ(s.status().at("open_sessions"), 0);
}
