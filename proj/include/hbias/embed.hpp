#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hbias/genclient.hpp"
#include "hbias/http.hpp"
#include "hbias/store.hpp"

namespace hbias {

struct EmbeddingVector {
  GenerationKey key;
  std::vector<float> values;
  double norm = 0.0;
};

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::string name() const = 0;
  virtual std::size_t dimension() const = 0;
  /// One vector per record, in input order.
  virtual std::vector<std::vector<float>> embed(std::span<const GenerationRecord> records) = 0;
};

/// Bag-of-words feature hashing: each lower-cased alphanumeric token adds a
/// seeded +/-1 pattern across all dimensions.
class HashEmbedder final : public EmbeddingProvider {
 public:
  explicit HashEmbedder(std::size_t dimension = 64, std::uint64_t seed = 0) : dim_(dimension), seed_(seed) {}
  std::string name() const override { return "hash"; }
  std::size_t dimension() const override { return dim_; }
  std::vector<std::vector<float>> embed(std::span<const GenerationRecord> records) override;
  std::vector<float> embed_text(std::string_view text) const;

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

/// Per-(group, setting) spread for the analytic provider. Group means are
/// orthogonal basis directions scaled to `mean_norm`; `set_jitter` adds a
/// shared per-stimulus-set direction so same-set pairs sit closer together.
struct GaussianEmbedConfig {
  std::size_t dimension = 64;
  double mean_norm = 1.0;
  double set_jitter = 0.0;
  GroupTable sigma = GroupTable::constant(0.5);
};

/// normalize(mu + sigma * z), z standard normal seeded by (seed, key).
std::vector<float> gaussian_group_embed(const GenerationRecord& record, const GaussianEmbedConfig& config,
                                        std::uint64_t seed);

class GaussianGroupEmbedder final : public EmbeddingProvider {
 public:
  GaussianGroupEmbedder(GaussianEmbedConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {}
  std::string name() const override { return "gaussian"; }
  std::size_t dimension() const override { return config_.dimension; }
  std::vector<std::vector<float>> embed(std::span<const GenerationRecord> records) override;

 private:
  GaussianEmbedConfig config_;
  std::uint64_t seed_;
};

struct RemoteEmbedConfig {
  std::string endpoint = "https://api.openai.com";
  std::string path = "/v1/embeddings";
  std::string model = "all-mpnet-base-v2";
  std::string api_key_env = "EMBEDDING_API_KEY";
  std::size_t dimension = 768;  // 0 accepts whatever the service returns first
  std::size_t batch_size = 64;
  RetryPolicy retry;
};

std::string build_embedding_body(const std::vector<std::string>& texts, const std::string& model);

/// Places each returned vector by its "index" field, so out-of-order data
/// arrays keep the input correspondence.
std::vector<std::vector<float>> parse_embedding_response(const std::string& body, std::size_t expected);

class RemoteEmbedder final : public EmbeddingProvider {
 public:
  RemoteEmbedder(RemoteEmbedConfig config, std::shared_ptr<HttpTransport> transport, std::string api_key,
                 Sleeper sleep = real_sleeper());
  std::string name() const override { return "remote:" + config_.model; }
  std::size_t dimension() const override { return dim_; }
  /// One request for the whole span; callers batch.
  std::vector<std::vector<float>> embed(std::span<const GenerationRecord> records) override;

 private:
  RemoteEmbedConfig config_;
  std::shared_ptr<HttpTransport> transport_;
  std::string api_key_;
  Sleeper sleep_;
  std::size_t dim_;
};

struct EmbedOptions {
  std::size_t batch_size = 64;
  int max_in_flight = 1;
};

/// Embeds every record (all must be Ok) and emits vectors in input order.
/// Throws on dimension drift or non-finite components.
void embed_corpus(std::span<const GenerationRecord> records, EmbeddingProvider& provider, const EmbedOptions& options,
                  const std::function<void(EmbeddingVector&&)>& sink);

/// Convenience: collects embed_corpus output into a table.
EmbeddingTable embed_to_table(std::span<const GenerationRecord> records, EmbeddingProvider& provider,
                              const EmbedOptions& options = {});

}  // namespace hbias
