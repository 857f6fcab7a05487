#include "doctest.h"

#include <algorithm>
#include <mutex>
#include <random>

#include "json.hpp"

#include "hbias/embed.hpp"
#include "hbias/simengine.hpp"

using namespace hbias;
using nlohmann::json;

namespace {

GenerationRecord record(Race race, Gender gender, int set_id, int rep, const std::string& text = "a story",
                        double setting = 1.0) {
  GenerationRecord r;
  r.request.stimulus = {set_id, race, gender, ""};
  r.request.setting = setting;
  r.request.replicate_index = rep;
  r.story_text = text;
  return r;
}

double mean_pairwise(const std::vector<std::vector<float>>& v) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t j = i + 1; j < v.size(); ++j, ++n) s += cosine(std::span<const float>(v[i]), std::span<const float>(v[j]));
  return s / static_cast<double>(n);
}

/// Embedding endpoint double: returns a deterministic vector per text and
/// shuffles the data array so only the index field keeps the order.
class FakeEmbeddingService : public HttpTransport {
 public:
  std::size_t dim = 8;
  std::size_t calls = 0;
  bool drift = false;
  std::mutex mu;

  HttpResponse post_json(const std::string&, const std::string& body, const HttpHeaders&) override {
    std::lock_guard lock(mu);
    ++calls;
    const auto req = json::parse(body);
    json data = json::array();
    std::size_t i = 0;
    for (const auto& t : req["input"]) {
      std::vector<float> v(drift && calls > 1 ? dim + 1 : dim, 0.0f);
      const auto text = t.get<std::string>();
      for (std::size_t k = 0; k < v.size(); ++k) v[k] = static_cast<float>(text.size() % 97) + static_cast<float>(k);
      data.push_back({{"object", "embedding"}, {"index", i++}, {"embedding", v}});
    }
    std::reverse(data.begin(), data.end());
    return {200, json{{"data", data}, {"model", req["model"]}}.dump(), {}, {}};
  }
};

}  // namespace

TEST_SUITE("embed") {

TEST_CASE("one vector per record with a shared dimension") {
  std::vector<GenerationRecord> recs;
  for (int i = 0; i < 3000; ++i) recs.push_back(record(Race::Black, Gender::Man, 1, i, "story number " + std::to_string(i)));
  HashEmbedder h(64, 1);
  const auto table = embed_to_table(recs, h);
  CHECK(table.size() == 3000);
  CHECK(table.dimension == 64);
  CHECK(table.values.size() == 3000 * 64);
}

TEST_CASE("identical texts give identical vectors") {
  HashEmbedder h(64, 3);
  CHECK(h.embed_text("The quiet river.") == h.embed_text("the QUIET river"));
  const auto a = record(Race::Black, Gender::Man, 1, 0, "same words here");
  const auto b = record(Race::White, Gender::Woman, 9, 4, "same words here");
  std::vector<GenerationRecord> both{a, b};
  const auto v = h.embed(both);
  CHECK(v[0] == v[1]);
}

TEST_CASE("one changed word lowers the hash cosine below one") {
  HashEmbedder h(64, 3);
  const auto u = h.embed_text("She walked to the old market every morning with her brother");
  const auto v = h.embed_text("She walked to the old market every evening with her brother");
  const double c = cosine(std::span<const float>(u), std::span<const float>(v));
  CHECK(c < 1.0);
  CHECK(c > 0.5);
}

TEST_CASE("gaussian provider with zero spread") {
  GaussianEmbedConfig cfg;
  cfg.sigma = GroupTable::constant(0.0);
  std::vector<std::vector<float>> v;
  for (int i = 0; i < 5; ++i) v.push_back(gaussian_group_embed(record(Race::Black, Gender::Woman, 3, i), cfg, 1));
  for (const auto& x : v) CHECK(cosine(std::span<const float>(x), std::span<const float>(v[0])) == doctest::Approx(1.0).epsilon(1e-7));
}

TEST_CASE("smaller spread gives higher within-cell cosine") {
  GaussianEmbedConfig tight, loose;
  tight.sigma = GroupTable::constant(0.25);
  loose.sigma = GroupTable::constant(1.0);
  std::vector<std::vector<float>> a, b;
  for (int i = 0; i < 142; ++i) {  // C(142, 2) = 10,011 pairs
    a.push_back(gaussian_group_embed(record(Race::White, Gender::Man, 2, i), tight, 9));
    b.push_back(gaussian_group_embed(record(Race::White, Gender::Man, 2, i), loose, 9));
  }
  const double ma = mean_pairwise(a), mb = mean_pairwise(b);
  MESSAGE("mean pairwise cosine sigma=0.25: " << ma << ", sigma=1.0: " << mb);
  CHECK(ma > mb);
}

TEST_CASE("different groups sit on orthogonal means") {
  GaussianEmbedConfig cfg;
  cfg.sigma = GroupTable::constant(0.3);
  double s = 0.0;
  int n = 0;
  for (int i = 0; i < 60; ++i)
    for (int j = 0; j < 60; ++j, ++n) {
      const auto u = gaussian_group_embed(record(Race::Black, Gender::Man, 1, i), cfg, 4);
      const auto v = gaussian_group_embed(record(Race::White, Gender::Man, 1, j), cfg, 4);
      s += cosine(std::span<const float>(u), std::span<const float>(v));
    }
  CHECK(std::abs(s / n) < 0.05);
}

TEST_CASE("gaussian provider argument checks") {
  GaussianEmbedConfig cfg;
  cfg.sigma = GroupTable::constant(-0.1);
  CHECK_THROWS(gaussian_group_embed(record(Race::Black, Gender::Man, 1, 0), cfg, 1));
  GaussianEmbedConfig small;
  small.dimension = 2;
  CHECK_THROWS(gaussian_group_embed(record(Race::Black, Gender::Man, 1, 0), small, 1));
}

TEST_CASE("remote batching keeps key to vector correspondence") {
  auto service = std::make_shared<FakeEmbeddingService>();
  RemoteEmbedConfig cfg;
  cfg.dimension = 8;
  RemoteEmbedder remote(cfg, service, "k", [](std::chrono::milliseconds) {});
  std::vector<GenerationRecord> recs;
  for (int i = 0; i < 50; ++i) recs.push_back(record(Race::Black, Gender::Man, 1, i, std::string(static_cast<std::size_t>(i + 1), 'x')));
  EmbedOptions opt;
  opt.batch_size = 7;
  opt.max_in_flight = 4;
  std::size_t i = 0;
  embed_corpus(recs, remote, opt, [&](EmbeddingVector&& v) {
    CHECK(v.key == recs[i].key());
    CHECK(v.values[0] == static_cast<float>(recs[i].story_text.size() % 97));
    CHECK(v.norm > 0.0);
    ++i;
  });
  CHECK(i == recs.size());
  CHECK(service->calls == 8);
  const auto body = json::parse(build_embedding_body({"a", "b"}, "all-mpnet-base-v2"));
  CHECK(body["model"] == "all-mpnet-base-v2");
  CHECK(body["input"].size() == 2);
}

TEST_CASE("remote dimension drift aborts") {
  auto service = std::make_shared<FakeEmbeddingService>();
  service->drift = true;
  RemoteEmbedConfig cfg;
  cfg.dimension = 0;
  RemoteEmbedder remote(cfg, service, "k", [](std::chrono::milliseconds) {});
  std::vector<GenerationRecord> recs;
  for (int i = 0; i < 10; ++i) recs.push_back(record(Race::Black, Gender::Man, 1, i));
  CHECK_THROWS_WITH(embed_to_table(recs, remote, {5, 1}), doctest::Contains("dimension drift"));
}

TEST_CASE("malformed embedding responses") {
  CHECK_THROWS(parse_embedding_response(R"({"data":[{"index":0,"embedding":[1]}]})", 2));
  CHECK_THROWS(parse_embedding_response(R"({"data":[{"index":0,"embedding":[1]},{"index":0,"embedding":[2]}]})", 2));
  const auto v = parse_embedding_response(R"({"data":[{"index":1,"embedding":[2]},{"index":0,"embedding":[1]}]})", 2);
  CHECK(v[0][0] == 1.0f);
  CHECK(v[1][0] == 2.0f);
}

TEST_CASE("non-Ok records and non-finite vectors are refused") {
  auto r = record(Race::Black, Gender::Man, 1, 0);
  r.status = RecordStatus::Degenerate;
  HashEmbedder h;
  std::vector<GenerationRecord> bad{r};
  CHECK_THROWS(embed_to_table(bad, h));

  class NanProvider : public EmbeddingProvider {
   public:
    std::string name() const override { return "nan"; }
    std::size_t dimension() const override { return 2; }
    std::vector<std::vector<float>> embed(std::span<const GenerationRecord> rs) override {
      return std::vector<std::vector<float>>(rs.size(), {1.0f, std::numeric_limits<float>::quiet_NaN()});
    }
  } nan;
  std::vector<GenerationRecord> ok{record(Race::Black, Gender::Man, 1, 0)};
  CHECK_THROWS_WITH(embed_to_table(ok, nan), doctest::Contains("non-finite"));
}

}  // TEST_SUITE
