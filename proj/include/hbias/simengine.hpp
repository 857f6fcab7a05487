#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hbias/core.hpp"
#include "hbias/store.hpp"

namespace hbias {

/// Unordered pair of stimulus-set ids behind a story pair.
struct PairId {
  int lo = 0;
  int hi = 0;

  static PairId of(int a, int b) { return a <= b ? PairId{a, b} : PairId{b, a}; }
  std::string to_string() const { return std::to_string(lo) + "-" + std::to_string(hi); }
  static PairId parse(std::string_view s);

  friend auto operator<=>(const PairId&, const PairId&) = default;
};

struct SimilarityObservation {
  double cosine_raw = 0.0;
  double cosine_std = 0.0;
  Race race = Race::Black;
  Gender gender = Gender::Man;
  PairId pair_id;
  Knob knob = Knob::Temperature;
  double setting = 0.0;
};

/// Unordered story pairs across `n_conditions` conditions of `n` stories.
std::uint64_t pair_count(std::uint64_t n_stories_per_condition, std::uint64_t n_conditions);

/// Cosine similarity accumulated in double and clamped to [-1, 1]. Throws
/// std::invalid_argument on dimension mismatch or a zero-norm input.
double cosine(std::span<const double> u, std::span<const double> v);
double cosine(std::span<const float> u, std::span<const float> v);

/// Stratum key for standardization.
struct Stratum {
  Knob knob;
  double setting;
  friend auto operator<=>(const Stratum&, const Stratum&) = default;
};

/// Streaming mean/variance (Welford) with an order-fixed merge.
struct RunningStats {
  std::uint64_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x) {
    ++n;
    const double d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (x - mean);
  }
  void merge(const RunningStats& o);
  double sample_variance() const { return n > 1 ? m2 / static_cast<double>(n - 1) : 0.0; }
};

/// z-scores cosine_raw into cosine_std within each (knob, setting) stratum
/// using the sample SD. Throws std::domain_error on a stratum with fewer than
/// two rows or zero variance.
void standardize(std::span<SimilarityObservation> observations);

/// Embedded stories grouped by condition, ready for pair enumeration.
class ConditionIndex {
 public:
  struct Story {
    int set_id;
    const float* values;
    double inv_norm;
  };
  struct Group {
    Condition condition;
    std::vector<Story> stories;
  };

  /// Every key must reference a stimulus of `plan`; std::invalid_argument
  /// otherwise. `table` must outlive the index.
  ConditionIndex(const EmbeddingTable& table, const StudyPlan& plan);
  /// Variant without a design check (set ids are taken from the keys).
  explicit ConditionIndex(const EmbeddingTable& table);

  const std::vector<Group>& groups() const { return groups_; }
  std::size_t dimension() const { return dim_; }
  std::uint64_t total_pairs() const;

 private:
  void build(const EmbeddingTable& table, const StudyPlan* plan);

  std::size_t dim_ = 0;
  std::vector<Group> groups_;
};

using ObservationSink = std::function<void(const SimilarityObservation&)>;

/// Enumerates all within-condition story pairs (i < j) of one group in a
/// fixed order. cosine_std is left at 0.
void visit_group_pairs(const ConditionIndex::Group& group, std::size_t dim, const ObservationSink& sink);

/// First reduction phase: per-stratum raw-cosine moments. Work is split by
/// condition across `threads` workers and merged in condition order, so the
/// result does not depend on the thread count.
std::map<Stratum, RunningStats> stratum_stats(const ConditionIndex& index, unsigned threads = 0);

/// Streams every observation, standardized with `stats`. Emits exactly
/// index.total_pairs() rows; memory does not grow with the pair count.
void build_observations(const ConditionIndex& index, const std::map<Stratum, RunningStats>& stats,
                        const ObservationSink& sink);

/// Both phases in one call.
void build_observations(const ConditionIndex& index, const ObservationSink& sink, unsigned threads = 0);

}  // namespace hbias
