#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <mutex>
#include <string>
#include <vector>

#include "hbias/genclient.hpp"

namespace hbias {

struct SimilarityObservation;

inline constexpr int kCorpusSchemaVersion = 1;

std::string serialize_record(const GenerationRecord& rec);
GenerationRecord deserialize_record(const std::string& line);

/// Append-only JSONL corpus. The first line is a header object carrying
/// the schema version; each following line is one record. Every append is
/// a single write() on an O_APPEND descriptor so records never interleave.
class CorpusWriter {
 public:
  explicit CorpusWriter(const std::filesystem::path& path);
  ~CorpusWriter();
  CorpusWriter(const CorpusWriter&) = delete;
  CorpusWriter& operator=(const CorpusWriter&) = delete;

  void append(const GenerationRecord& rec);
  void flush();

 private:
  void write_all(const std::string& bytes);

  std::filesystem::path path_;
  int fd_ = -1;
  std::mutex mu_;
};

struct CorpusLoad {
  std::vector<GenerationRecord> records;
  std::vector<std::string> warnings;
};

/// Loads a corpus. Corrupt lines (including a torn trailing line) are
/// skipped with a warning. Duplicate keys raise, except that Failed records
/// are superseded by a later record for the same key.
CorpusLoad load_corpus(const std::filesystem::path& path);

/// Keys already settled in the corpus (Failed records are not settled).
KeySet existing_keys(const std::filesystem::path& path);

// --------------------------------------------------------------- embeddings

/// Row-major float32 embedding matrix with one key per row.
struct EmbeddingTable {
  std::size_t dimension = 0;
  std::vector<GenerationKey> keys;
  std::vector<float> values;  // keys.size() * dimension

  std::size_t size() const { return keys.size(); }
  const float* row(std::size_t i) const { return values.data() + i * dimension; }
};

/// Sidecar layout:
///   "hbias-embeddings 1\n" "dim <d>\n" "count <n>\n" <n key lines> "end\n"
///   then n*d little-endian IEEE-754 float32, row-major.
void write_embeddings(const std::filesystem::path& path, const EmbeddingTable& table);
EmbeddingTable read_embeddings(const std::filesystem::path& path);

// ------------------------------------------------------------- observations

inline constexpr std::string_view kObservationHeader = "cosine_raw,cosine_std,race,gender,pair_id,knob,setting";

class ObservationWriter {
 public:
  explicit ObservationWriter(const std::filesystem::path& path);
  ~ObservationWriter();
  ObservationWriter(const ObservationWriter&) = delete;
  ObservationWriter& operator=(const ObservationWriter&) = delete;

  void write(const SimilarityObservation& obs);
  void close();
  std::uint64_t rows() const { return rows_; }

 private:
  void drain();

  std::FILE* file_ = nullptr;
  std::string buffer_;
  std::uint64_t rows_ = 0;
};

/// Streams rows of an observation CSV; returns the row count.
std::uint64_t read_observations(const std::filesystem::path& path,
                                const std::function<void(const SimilarityObservation&)>& visit);

std::string format_double(double v);  // shortest round-trip text

}  // namespace hbias
