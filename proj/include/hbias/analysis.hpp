#pragma once

#include <span>
#include <vector>

#include "hbias/lmm.hpp"

namespace hbias {

enum class Dimension { Race, Gender };
std::string_view to_string(Dimension d);
Dimension parse_dimension(std::string_view s);

struct PerSettingFit {
  double setting;
  Dimension dimension;
  LmmFit fit;
};

struct PooledFit {
  Dimension dimension;
  LmmFit fit;
};

/// Per-setting Race/Gender models plus pooled Group x Knob models for one
/// sweep. Entries are ordered by setting, Race before Gender.
struct ModelSuiteResult {
  Knob knob = Knob::Temperature;
  std::vector<double> settings;
  std::vector<PerSettingFit> per_setting;
  std::vector<PooledFit> pooled;

  const LmmFit& at(double setting, Dimension d) const;
  const LmmFit& pooled_fit(Dimension d) const;
};

/// One streaming pass feeding every model of the suite.
class SuiteAccumulator {
 public:
  SuiteAccumulator(Knob knob, std::vector<double> settings);

  void add(const SimilarityObservation& o);

  /// Throws std::invalid_argument naming any setting without rows.
  std::vector<PerSettingFit> fit_per_setting(const FitOptions& options = {}) const;
  /// Throws std::invalid_argument when fewer than two settings are present.
  std::vector<PooledFit> fit_pooled(const FitOptions& options = {}) const;
  ModelSuiteResult finish(const FitOptions& options = {}) const;

 private:
  std::size_t slot(double setting) const;

  Knob knob_;
  std::vector<double> settings_;
  std::vector<StatsAccumulator> race_;
  std::vector<StatsAccumulator> gender_;
  StatsAccumulator pooled_race_;
  StatsAccumulator pooled_gender_;
};

/// Settings present in the observations, ascending.
std::vector<double> observed_settings(std::span<const SimilarityObservation> observations, Knob knob);

std::vector<PerSettingFit> run_per_setting(std::span<const SimilarityObservation> observations, Knob knob,
                                           std::vector<double> settings = {});
std::vector<PooledFit> run_pooled(std::span<const SimilarityObservation> observations, Knob knob);
ModelSuiteResult run_suite(std::span<const SimilarityObservation> observations, Knob knob,
                           std::vector<double> settings = {});

}  // namespace hbias
