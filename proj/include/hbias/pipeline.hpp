#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "hbias/analysis.hpp"
#include "hbias/config.hpp"
#include "hbias/embed.hpp"
#include "hbias/report.hpp"

namespace hbias {

enum class Stage { Generate, Embed, Observe, Fit, Report };

std::string_view to_string(Stage s);
/// "all" expands to every stage in order.
std::vector<Stage> parse_stages(std::string_view s);

/// Artifact names inside the output directory.
namespace artifacts {
inline constexpr const char* kCorpus = "corpus.jsonl";
inline constexpr const char* kEmbeddings = "embeddings.bin";
inline constexpr const char* kObservations = "observations.csv";
inline constexpr const char* kResults = "results.json";
inline constexpr const char* kTables = "tables";
inline constexpr const char* kFigureData = "figure_data.csv";
inline constexpr const char* kReport = "report.md";
inline constexpr const char* kManifest = "manifest.json";
}  // namespace artifacts

struct PipelineOptions {
  std::filesystem::path config_path;
  std::filesystem::path out_dir = "out";
  std::optional<std::uint64_t> seed;
  std::optional<Backend> backend;
  std::vector<Stage> stages;
  std::ostream* log = nullptr;
};

struct StageOutcome {
  Stage stage;
  bool skipped = false;
  std::string detail;
};

/// Runs the requested stages in order. Completed stages whose inputs and
/// configuration are unchanged are skipped. Throws ConfigError,
/// DependencyMissing (naming the stage to run) or std::runtime_error.
std::vector<StageOutcome> run_pipeline(const PipelineOptions& options);

/// Hex SHA-256 of a byte string / file.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Whole pipeline without touching disk; used for simulation studies.
struct InMemoryRun {
  std::vector<GenerationRecord> corpus;
  EmbeddingTable embeddings;
  std::vector<SimilarityObservation> observations;
  ModelSuiteResult suite;
};

InMemoryRun run_in_memory(const StudyConfig& config, bool fit_pooled = true);

}  // namespace hbias
