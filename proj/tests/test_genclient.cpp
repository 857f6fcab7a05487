#include "doctest.h"

#include <atomic>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include "httplib.h"
#include "json.hpp"

#include "hbias/embed.hpp"
#include "hbias/genclient.hpp"
#include "hbias/simengine.hpp"

using namespace hbias;
using nlohmann::json;

namespace {

const char* kOkBody = R"({"choices":[{"message":{"role":"assistant","content":"A short story."},"finish_reason":"stop"}]})";

/// Records every request and answers from a scripted status sequence per
/// request body; anything past the script gets 200.
class CaptureTransport : public HttpTransport {
 public:
  std::function<HttpResponse(int attempt, const json& body)> script;

  HttpResponse post_json(const std::string& path, const std::string& body, const HttpHeaders& headers) override {
    std::lock_guard lock(mu);
    paths.push_back(path);
    bodies.push_back(json::parse(body));
    last_headers = headers;
    const int attempt = attempts[body]++;
    if (script) return script(attempt, bodies.back());
    return {200, kOkBody, {}, {}};
  }

  std::mutex mu;
  std::vector<std::string> paths;
  std::vector<json> bodies;
  HttpHeaders last_headers;
  std::map<std::string, int> attempts;
};

Sleeper no_sleep(std::vector<std::chrono::milliseconds>* log = nullptr) {
  return [log](std::chrono::milliseconds d) {
    if (log != nullptr) log->push_back(d);
  };
}

GenerationRequest request(Race race, Gender gender, double h_setting, int rep, std::uint64_t seed = 42) {
  GenerationRequest r;
  r.stimulus = {1, race, gender, "ref"};
  r.knob = Knob::Temperature;
  r.setting = h_setting;
  r.replicate_index = rep;
  r.seed = seed;
  return r;
}

SimulatorConfig sim_with(double black, double white) {
  SimulatorConfig c;
  c.homogeneity = GroupTable();
  for (Gender g : {Gender::Man, Gender::Woman}) {
    c.homogeneity.add({Race::Black, g, std::nullopt, {{{0.0, black}}}});
    c.homogeneity.add({Race::White, g, std::nullopt, {{{0.0, white}}}});
  }
  return c;
}

}  // namespace

TEST_SUITE("genclient") {

TEST_CASE("requests hold the non-swept knob at its default") {
  SweepSpec t = SweepSpec::temperature_default();
  const auto plan = validate_design(default_design(1, 2), t);
  const auto r = make_request(plan, plan.entries().back(), 5);
  CHECK(r.temperature() == 2.0);
  CHECK(r.top_p() == 1.0);
  CHECK(r.max_tokens == 150);
  const auto pplan = validate_design(default_design(1, 2), SweepSpec::top_p_default());
  const auto rp = make_request(pplan, pplan.entries().front(), 5);
  CHECK(rp.top_p() == doctest::Approx(0.2));
  CHECK(rp.temperature() == 1.0);
}

TEST_CASE("live backend sends the configured knobs") {
  auto transport = std::make_shared<CaptureTransport>();
  LiveChatConfig cfg;
  cfg.model = "vision-model";
  LiveChatBackend backend(cfg, transport, "secret", no_sleep());
  const auto plan = validate_design(default_design(1, 1), SweepSpec::top_p_default());
  for (const auto& e : plan.entries()) {
    const auto out = backend.generate(make_request(plan, e, std::nullopt));
    CHECK(out.status == RecordStatus::Ok);
    CHECK(out.text == "A short story.");
  }
  REQUIRE(transport->bodies.size() == plan.size());
  std::set<double> tops;
  for (const auto& b : transport->bodies) {
    CHECK(b["model"] == "vision-model");
    CHECK(b["temperature"].get<double>() == 1.0);
    CHECK(b["max_tokens"] == 150);
    tops.insert(b["top_p"].get<double>());
    CHECK(b["messages"][0]["role"] == "system");
    CHECK(b["messages"][1]["content"][0]["text"] == "Write a 50-word story about the individual inside the image");
    CHECK(b["messages"][1]["content"][1]["image_url"]["url"].get<std::string>().find("ganfd/set") == 0);
  }
  CHECK(tops == std::set<double>{0.2, 0.4, 0.6, 0.8, 1.0});
  CHECK(transport->paths.front() == "/v1/chat/completions");
  CHECK(transport->last_headers.at("Authorization") == "Bearer secret");
}

TEST_CASE("retry honours rate-limit hints and backs off exponentially") {
  auto transport = std::make_shared<CaptureTransport>();
  transport->script = [](int attempt, const json&) -> HttpResponse {
    if (attempt == 0) return {429, "{}", {{"retry-after", "2"}}, {}};
    if (attempt == 1) return {503, "{}", {}, {}};
    if (attempt == 2) return {0, "", {}, "connection reset"};
    return {200, kOkBody, {}, {}};
  };
  std::vector<std::chrono::milliseconds> waits;
  LiveChatBackend backend({}, transport, "k", no_sleep(&waits));
  const auto out = backend.generate(request(Race::Black, Gender::Man, 1.0, 0));
  CHECK(out.status == RecordStatus::Ok);
  REQUIRE(waits.size() == 3);
  CHECK(waits[0] == std::chrono::milliseconds(2000));
  CHECK(waits[1] == std::chrono::milliseconds(1000));
  CHECK(waits[2] == std::chrono::milliseconds(2000));
}

TEST_CASE("exhausted retries mark the record failed; bad credentials abort") {
  auto transport = std::make_shared<CaptureTransport>();
  transport->script = [](int, const json&) -> HttpResponse { return {500, "{}", {}, {}}; };
  LiveChatBackend backend({}, transport, "k", no_sleep());
  const auto out = backend.generate(request(Race::Black, Gender::Man, 1.0, 0));
  CHECK(out.status == RecordStatus::Failed);
  CHECK(transport->bodies.size() == 5);

  auto denied = std::make_shared<CaptureTransport>();
  denied->script = [](int, const json&) -> HttpResponse { return {401, "{}", {}, {}}; };
  LiveChatBackend bad({}, denied, "k", no_sleep());
  const auto plan = validate_design(default_design(1, 2), SweepSpec::temperature_default());
  CHECK_THROWS_AS(generate_batch(plan, bad, {}, {}, [](const GenerationRecord&) {}), AuthenticationError);
}

TEST_CASE("refusals and malformed responses") {
  CHECK(parse_chat_response(R"({"choices":[{"message":{"content":null,"refusal":"I can't help"}}]})").status ==
        RecordStatus::Refused);
  CHECK(parse_chat_response(R"({"choices":[{"message":{"content":""},"finish_reason":"content_filter"}]})").status ==
        RecordStatus::Refused);
  CHECK(parse_chat_response("<html>").status == RecordStatus::Failed);
  CHECK(parse_chat_response(R"({"choices":[]})").status == RecordStatus::Failed);
}

TEST_CASE("retry never duplicates a key") {
  auto transport = std::make_shared<CaptureTransport>();
  std::atomic<int> calls{0};
  transport->script = [&](int attempt, const json&) -> HttpResponse {
    const int c = calls++;
    if (c % 3 == 0 && attempt < 2) return {502, "{}", {}, {}};
    if (c % 7 == 0) return {0, "", {}, "timeout"};
    return {200, kOkBody, {}, {}};
  };
  LiveChatConfig cfg;
  cfg.retry.max_attempts = 2;
  LiveChatBackend backend(cfg, transport, "k", no_sleep());
  const auto plan = validate_design(default_design(2, 5), SweepSpec::temperature_default());
  std::map<std::string, int> ok_per_key;
  KeySet existing;
  for (int round = 0; round < 4; ++round) {
    BatchOptions opt;
    opt.max_in_flight = 4;
    generate_batch(plan, backend, opt, existing, [&](const GenerationRecord& r) {
      if (r.status == RecordStatus::Ok) {
        ++ok_per_key[r.key().to_string()];
        existing.insert(r.key());
      }
    });
  }
  for (const auto& [k, n] : ok_per_key) CHECK(n == 1);
  CHECK(ok_per_key.size() == plan.size());
}

TEST_CASE("batch emits the plan and resumes from existing keys") {
  const auto plan = validate_design(default_design(), SweepSpec::temperature_default());
  SimulatedBackend backend({});
  BatchOptions opt;
  opt.seed = 1;
  KeySet existing;
  for (std::size_t i = 0; i < 14000; ++i) existing.insert(plan.key(plan.entries()[i]));
  std::size_t n = 0;
  const auto s = generate_batch(plan, backend, opt, existing, [&](const GenerationRecord&) { ++n; });
  CHECK(n == 1000);
  CHECK(s.skipped == 14000);
  CHECK(s.emitted == 1000);

  std::size_t all = 0;
  generate_batch(plan, backend, opt, {}, [&](const GenerationRecord&) { ++all; });
  CHECK(all == 15000);
}

TEST_CASE("simulator needs a seed") {
  const auto plan = validate_design(default_design(1, 1), SweepSpec::temperature_default());
  SimulatedBackend backend({});
  CHECK_THROWS_WITH(generate_batch(plan, backend, {}, {}, [](const GenerationRecord&) {}),
                    doctest::Contains("seed missing"));
  auto r = request(Race::Black, Gender::Man, 0.0, 0);
  r.seed.reset();
  CHECK_THROWS_AS(simulate_story(r, {}), ConfigError);
}

TEST_CASE("simulated corpora are reproducible") {
  const auto plan = validate_design(default_design(2, 3), SweepSpec::temperature_default());
  SimulatedBackend backend({});
  BatchOptions opt;
  opt.seed = 123;
  std::vector<std::string> a, b;
  generate_batch(plan, backend, opt, {}, [&](const GenerationRecord& r) { a.push_back(r.story_text + r.created_at); });
  generate_batch(plan, backend, opt, {}, [&](const GenerationRecord& r) { b.push_back(r.story_text + r.created_at); });
  CHECK(a == b);
  opt.seed = 124;
  std::vector<std::string> c;
  generate_batch(plan, backend, opt, {}, [&](const GenerationRecord& r) { c.push_back(r.story_text + r.created_at); });
  CHECK(a != c);
}

TEST_CASE("homogeneity one collapses a group onto a single text") {
  const auto cfg = sim_with(1.0, 0.5);
  const auto first = simulate_story(request(Race::Black, Gender::Man, 0.5, 0), cfg);
  for (int rep = 1; rep < 20; ++rep) CHECK(simulate_story(request(Race::Black, Gender::Man, 0.5, rep), cfg) == first);
}

TEST_CASE("replicates differ whenever homogeneity is below one") {
  const auto cfg = sim_with(0.99, 0.3);
  for (Race race : {Race::Black, Race::White}) {
    std::set<std::string> texts;
    for (int rep = 0; rep < 50; ++rep) {
      const auto t = simulate_story(request(race, Gender::Woman, 1.0, rep), cfg);
      const auto words = count_words(t);
      CHECK(words >= 40);
      CHECK(words <= 60);
      texts.insert(t);
    }
    CHECK(texts.size() == 50);
  }
}

TEST_CASE("more homogeneous groups embed closer together") {
  const auto cfg = sim_with(0.9, 0.3);
  HashEmbedder emb(64, 7);
  auto mean_cos = [&](Race race) {
    std::vector<std::vector<float>> v;
    for (int rep = 0; rep < 50; ++rep) v.push_back(emb.embed_text(simulate_story(request(race, Gender::Man, 1.0, rep), cfg)));
    double sum = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < v.size(); ++i)
      for (std::size_t j = i + 1; j < v.size(); ++j, ++n) sum += cosine(std::span<const float>(v[i]), std::span<const float>(v[j]));
    CHECK(n >= 1000);
    return sum / n;
  };
  const double black = mean_cos(Race::Black);
  const double white = mean_cos(Race::White);
  MESSAGE("mean cosine h=0.9: " << black << ", h=0.3: " << white);
  CHECK(black > white);
}

TEST_CASE("unknown group in the homogeneity table") {
  SimulatorConfig cfg;
  cfg.homogeneity = GroupTable({{Race::Black, Gender::Man, std::nullopt, {{{0.0, 0.5}}}}});
  CHECK_NOTHROW(simulate_story(request(Race::Black, Gender::Man, 0.0, 0), cfg));
  CHECK_THROWS_WITH_AS(simulate_story(request(Race::White, Gender::Man, 0.0, 0), cfg),
                       doctest::Contains("unknown group"), ConfigError);
}

TEST_CASE("homogeneity curves interpolate in the setting") {
  SettingCurve c{{{0.0, 0.9}, {2.0, 0.1}}};
  CHECK(c.at(-1.0) == 0.9);
  CHECK(c.at(1.0) == doctest::Approx(0.5));
  CHECK(c.at(3.0) == 0.1);
  GroupTable t({{Race::Black, Gender::Man, std::nullopt, {{{0.0, 0.5}}}},
                {Race::Black, Gender::Man, Knob::TopP, {{{0.0, 0.7}}}}});
  CHECK(t.lookup(Race::Black, Gender::Man, Knob::TopP, 0.4) == 0.7);
  CHECK(t.lookup(Race::Black, Gender::Man, Knob::Temperature, 0.4) == 0.5);
}

TEST_CASE("degenerate output filter") {
  FilterPolicy f;
  CHECK(classify_story("", f) == RecordStatus::Degenerate);
  CHECK(classify_story("   \n", f) == RecordStatus::Degenerate);
  std::string long_text;
  for (int i = 0; i < 151; ++i) long_text += "word ";
  CHECK(classify_story(long_text, f) == RecordStatus::Degenerate);
  long_text.resize(long_text.size() - 5);
  CHECK(classify_story(long_text, f) == RecordStatus::Ok);
  CHECK(count_words("  a  b\tc\n") == 3);
}

TEST_CASE("live client over a local HTTP server") {
  httplib::Server server;
  std::atomic<int> hits{0};
  std::mutex mu;
  std::vector<json> seen;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    const int n = hits++;
    {
      std::lock_guard lock(mu);
      seen.push_back(json::parse(req.body));
    }
    if (req.get_header_value("Authorization") != "Bearer local-key") {
      res.status = 401;
      return;
    }
    if (n == 0) {
      res.status = 429;
      res.set_header("retry-after-ms", "5");
      return;
    }
    res.set_content(kOkBody, "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  auto transport = make_http_transport("http://127.0.0.1:" + std::to_string(port), std::chrono::seconds(5));
  LiveChatBackend backend({}, transport, "local-key", no_sleep());
  const auto plan = validate_design(default_design(1, 2), SweepSpec::temperature_default());
  std::vector<GenerationRecord> out;
  BatchOptions opt;
  opt.max_in_flight = 3;
  const auto s = generate_batch(plan, backend, opt, {}, [&](const GenerationRecord& r) { out.push_back(r); });
  CHECK(s.ok == plan.size());
  CHECK(out.size() == plan.size());
  CHECK(hits.load() == static_cast<int>(plan.size()) + 1);
  CHECK(out.front().backend == Backend::Live);
  CHECK(out.front().created_at != "1970-01-01T00:00:00Z");

  LiveChatBackend wrong({}, transport, "nope", no_sleep());
  CHECK_THROWS_AS(wrong.generate(request(Race::Black, Gender::Man, 1.0, 0)), AuthenticationError);
  server.stop();
  t.join();
}

TEST_CASE("credentials come from the environment") {
  ::setenv("HBIAS_TEST_KEY", "abc", 1);
  CHECK(credential_from_env("HBIAS_TEST_KEY") == "abc");
  ::unsetenv("HBIAS_TEST_KEY");
  CHECK_THROWS_AS(credential_from_env("HBIAS_TEST_KEY"), ConfigError);
}

}  // TEST_SUITE
