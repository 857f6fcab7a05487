#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "hbias/analysis.hpp"

namespace hbias {

/// Mean and standard error (sample SD / sqrt n) of one group at one setting.
struct CellSummary {
  Knob knob;
  double setting;
  Race race;
  Gender gender;
  std::uint64_t n = 0;
  double mean_raw = 0.0;
  double se_raw = 0.0;
  double mean_std = 0.0;
  double se_std = 0.0;
};

class FigureAccumulator {
 public:
  void add(const SimilarityObservation& o);
  /// When `settings` is non-empty every (setting, group) cell must have
  /// rows; std::invalid_argument("empty cell ...") otherwise.
  std::vector<CellSummary> finish(Knob knob, const std::vector<double>& settings = {}) const;

 private:
  struct Cell {
    RunningStats raw;
    RunningStats standardized;
  };
  std::map<std::tuple<Knob, double, Race, Gender>, Cell> cells_;
};

std::vector<CellSummary> figure_data(std::span<const SimilarityObservation> observations);
std::string figure_data_csv(const std::vector<CellSummary>& cells);

// ---------------------------------------------------------------- formatting

/// Two significant figures, fixed notation, trailing zeros kept (0.030).
std::string format_sig(double v, int significant = 2);
std::string format_thousands(double v);  // rounds to an integer: -1,001,698
/// "0.33*** (0.0011)"
std::string format_coef_cell(double beta, double se, double p);
/// Full-precision p, or "<1e-16" below that.
std::string format_p(double p);

struct RenderedTable {
  std::string name;  // file stem, e.g. "temperature_race"
  std::string markdown;
  std::string csv;
};

/// One table per dimension with a column per setting, plus the pooled
/// interaction table. CSV keeps full precision, one row per fixed effect.
std::vector<RenderedTable> render_tables(const ModelSuiteResult& suite);

struct TableFit {
  std::string scope;  // "setting" or "pooled"
  std::string dimension;
  double setting = 0.0;
  LmmFit fit;
};

/// Reparses a table CSV back into fits.
std::vector<TableFit> parse_table_csv(const std::string& csv);

// -------------------------------------------------------------- result file

struct ResultsBundle {
  ModelSuiteResult suite;
  std::vector<CellSummary> cells;
};

std::string serialize_results(const ResultsBundle& bundle);
ResultsBundle parse_results(const std::string& text);

}  // namespace hbias
