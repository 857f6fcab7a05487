#include "hbias/embed.hpp"

#include <atomic>
#include <cctype>
#include <cmath>
#include <mutex>
#include <random>
#include <stdexcept>
#include <thread>

#include "json.hpp"

#include "hbias/hashing.hpp"

namespace hbias {

using nlohmann::json;

namespace {

double l2(const std::vector<float>& v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

}  // namespace

// --------------------------------------------------------------------- hash

std::vector<float> HashEmbedder::embed_text(std::string_view text) const {
  std::vector<float> out(dim_, 0.0f);
  std::string token;
  auto flush = [&] {
    if (token.empty()) return;
    const std::uint64_t h = fnv1a64(token, mix_seed(seed_, 0x68617368ULL));
    for (std::size_t block = 0; block * 64 < dim_; ++block) {
      const std::uint64_t bits = splitmix64(h + block);
      for (std::size_t b = 0; b < 64 && block * 64 + b < dim_; ++b)
        out[block * 64 + b] += ((bits >> b) & 1U) != 0 ? 1.0f : -1.0f;
    }
    token.clear();
  };
  for (unsigned char c : text) {
    if (std::isalnum(c) != 0 || c >= 0x80) {
      token += static_cast<char>(std::tolower(c));
    } else {
      flush();
    }
  }
  flush();
  return out;
}

std::vector<std::vector<float>> HashEmbedder::embed(std::span<const GenerationRecord> records) {
  std::vector<std::vector<float>> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(embed_text(r.story_text));
  return out;
}

// ----------------------------------------------------------------- gaussian

namespace {

std::size_t group_axis(Race r, Gender g) {
  return (r == Race::Black ? 0U : 2U) + (g == Gender::Man ? 0U : 1U);
}

}  // namespace

std::vector<float> gaussian_group_embed(const GenerationRecord& record, const GaussianEmbedConfig& config,
                                        std::uint64_t seed) {
  const auto& q = record.request;
  const double sigma = config.sigma.lookup(q.stimulus.race, q.stimulus.gender, q.knob, q.setting);
  if (sigma < 0.0) throw std::invalid_argument("gaussian embed sigma must be >= 0");
  if (config.dimension < 4) throw std::invalid_argument("gaussian embed needs dimension >= 4");

  std::vector<double> v(config.dimension, 0.0);
  v[group_axis(q.stimulus.race, q.stimulus.gender)] = config.mean_norm;

  std::normal_distribution<double> normal(0.0, 1.0);
  if (config.set_jitter > 0.0) {
    std::mt19937_64 set_rng(mix_seed(seed, 0x5e7000ULL + static_cast<std::uint64_t>(q.stimulus.set_id)));
    for (auto& x : v) x += config.set_jitter * normal(set_rng);
  }
  if (sigma > 0.0) {
    std::mt19937_64 rng(mix_seed(seed, fnv1a64(record.key().to_string())));
    for (auto& x : v) x += sigma * normal(rng);
  }

  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm == 0.0) throw std::invalid_argument("gaussian embed produced a zero vector");
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / norm);
  return out;
}

std::vector<std::vector<float>> GaussianGroupEmbedder::embed(std::span<const GenerationRecord> records) {
  std::vector<std::vector<float>> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(gaussian_group_embed(r, config_, seed_));
  return out;
}

// ------------------------------------------------------------------- remote

std::string build_embedding_body(const std::vector<std::string>& texts, const std::string& model) {
  return json{{"model", model}, {"input", texts}}.dump(-1, ' ', false, json::error_handler_t::replace);
}

std::vector<std::vector<float>> parse_embedding_response(const std::string& body, std::size_t expected) {
  const json j = json::parse(body);
  const auto& data = j.at("data");
  if (!data.is_array() || data.size() != expected) {
    throw std::runtime_error("embedding response carries " + std::to_string(data.size()) + " vectors, expected " +
                             std::to_string(expected));
  }
  std::vector<std::vector<float>> out(expected);
  std::vector<bool> filled(expected, false);
  for (std::size_t pos = 0; pos < data.size(); ++pos) {
    const auto& item = data[pos];
    const std::size_t idx = item.contains("index") ? item["index"].get<std::size_t>() : pos;
    if (idx >= expected || filled[idx]) throw std::runtime_error("embedding response has bad index");
    out[idx] = item.at("embedding").get<std::vector<float>>();
    filled[idx] = true;
  }
  return out;
}

RemoteEmbedder::RemoteEmbedder(RemoteEmbedConfig config, std::shared_ptr<HttpTransport> transport,
                               std::string api_key, Sleeper sleep)
    : config_(std::move(config)),
      transport_(std::move(transport)),
      api_key_(std::move(api_key)),
      sleep_(std::move(sleep)),
      dim_(config_.dimension) {}

std::vector<std::vector<float>> RemoteEmbedder::embed(std::span<const GenerationRecord> records) {
  std::vector<std::string> texts;
  texts.reserve(records.size());
  for (const auto& r : records) texts.push_back(r.story_text);
  const HttpHeaders headers{{"Authorization", "Bearer " + api_key_}};
  const auto result = post_with_retry(*transport_, config_.path, build_embedding_body(texts, config_.model), headers,
                                      config_.retry, sleep_);
  if (result.response.status != 200) {
    const auto& r = result.response;
    throw std::runtime_error("embedding request failed after " + std::to_string(result.attempts) +
                             " attempt(s): " + (r.status == 0 ? r.error : "HTTP " + std::to_string(r.status)));
  }
  return parse_embedding_response(result.response.body, records.size());
}

// -------------------------------------------------------------------- batch

void embed_corpus(std::span<const GenerationRecord> records, EmbeddingProvider& provider, const EmbedOptions& options,
                  const std::function<void(EmbeddingVector&&)>& sink) {
  for (const auto& r : records) {
    if (r.status != RecordStatus::Ok)
      throw std::invalid_argument("embed_corpus requires Ok records; got " + std::string(to_string(r.status)) +
                                  " for " + r.key().to_string());
  }
  const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
  const std::size_t n_batches = (records.size() + batch - 1) / batch;
  std::vector<std::vector<std::vector<float>>> results(n_batches);

  auto run = [&](std::size_t b) {
    const std::size_t lo = b * batch;
    const std::size_t hi = std::min(records.size(), lo + batch);
    results[b] = provider.embed(records.subspan(lo, hi - lo));
    if (results[b].size() != hi - lo) throw std::runtime_error("provider returned the wrong number of vectors");
  };

  if (options.max_in_flight <= 1 || n_batches <= 1) {
    for (std::size_t b = 0; b < n_batches; ++b) run(b);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex mu;
    std::vector<std::thread> pool;
    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(options.max_in_flight), n_batches);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t b; (b = next.fetch_add(1)) < n_batches;) {
          try {
            run(b);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!failure) failure = std::current_exception();
            next = n_batches;
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }

  std::size_t dim = 0;
  std::size_t i = 0;
  for (auto& chunk : results) {
    for (auto& values : chunk) {
      const auto& rec = records[i++];
      if (dim == 0) dim = values.size();
      if (values.size() != dim || dim == 0) {
        throw std::runtime_error("embedding dimension drift: expected " + std::to_string(dim) + ", got " +
                                 std::to_string(values.size()) + " for " + rec.key().to_string());
      }
      for (float x : values)
        if (!std::isfinite(x)) throw std::runtime_error("non-finite embedding component for " + rec.key().to_string());
      EmbeddingVector ev{rec.key(), std::move(values), 0.0};
      ev.norm = l2(ev.values);
      sink(std::move(ev));
    }
  }
}

EmbeddingTable embed_to_table(std::span<const GenerationRecord> records, EmbeddingProvider& provider,
                              const EmbedOptions& options) {
  EmbeddingTable t;
  t.keys.reserve(records.size());
  embed_corpus(records, provider, options, [&](EmbeddingVector&& v) {
    if (t.dimension == 0) {
      t.dimension = v.values.size();
      t.values.reserve(records.size() * t.dimension);
    }
    t.keys.push_back(v.key);
    t.values.insert(t.values.end(), v.values.begin(), v.values.end());
  });
  return t;
}

}  // namespace hbias
