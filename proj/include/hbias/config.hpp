#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "hbias/embed.hpp"
#include "hbias/genclient.hpp"

namespace hbias {

enum class EmbedProviderKind { Hash, Gaussian, Remote };

struct GenerationConfig {
  Backend backend = Backend::Simulated;
  LiveChatConfig live;
  int max_in_flight = 8;
  FilterPolicy filter;
};

struct EmbeddingConfig {
  EmbedProviderKind provider = EmbedProviderKind::Hash;
  std::size_t dimension = 64;
  std::size_t batch_size = 64;
  int max_in_flight = 8;
  RemoteEmbedConfig remote;
  GaussianEmbedConfig gaussian;
};

/// Everything a pipeline run needs. Defaults reproduce the published
/// protocol: 60 stimuli, 50 stories each, five temperature settings.
struct StudyConfig {
  StudyDesign design = default_design();
  SweepSpec sweep = SweepSpec::temperature_default();
  std::optional<std::uint64_t> seed;
  GenerationConfig generation;
  SimulatorConfig simulator;
  EmbeddingConfig embedding;
  unsigned threads = 0;  // 0: hardware concurrency
};

/// Parses the JSON study config. Unknown top-level sections are rejected;
/// missing keys take their defaults. Throws ConfigError.
StudyConfig parse_config(const std::string& text);
StudyConfig load_config(const std::filesystem::path& path);

/// Builds the configured embedding provider (credentials read from the
/// environment for the remote provider).
std::unique_ptr<EmbeddingProvider> make_embedding_provider(const StudyConfig& config);

/// Builds the story backend (credentials read from the environment for the
/// live backend).
std::unique_ptr<StoryBackend> make_story_backend(const StudyConfig& config);

}  // namespace hbias
