#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hbias/simengine.hpp"

namespace hbias {

enum class Term { Intercept, Race, Gender, Knob, RaceByKnob, GenderByKnob };

std::string_view to_string(Term t);

/// Random-intercept model over similarity observations, clustered by Pair
/// ID. Group terms are 0/1 dummies against the reference levels; the knob
/// enters as the raw numeric setting.
struct LmmSpec {
  std::vector<Term> fixed{Term::Intercept, Term::Race};
  Race race_reference = Race::White;
  Gender gender_reference = Gender::Man;

  static LmmSpec race_model() { return {{Term::Intercept, Term::Race}}; }
  static LmmSpec gender_model() { return {{Term::Intercept, Term::Gender}}; }
  static LmmSpec race_by_knob() { return {{Term::Intercept, Term::Race, Term::Knob, Term::RaceByKnob}}; }
  static LmmSpec gender_by_knob() { return {{Term::Intercept, Term::Gender, Term::Knob, Term::GenderByKnob}}; }

  std::size_t p() const { return fixed.size(); }
  /// Throws std::invalid_argument for specs without a leading intercept,
  /// duplicate terms, or more than eight terms.
  void validate() const;
  void design_row(const SimilarityObservation& o, double* x) const;
  double response(const SimilarityObservation& o) const { return o.cosine_std; }
};

inline constexpr std::size_t kMaxTerms = 8;
using SmallVec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxTerms, 1>;
using SmallMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxTerms, kMaxTerms>;

/// Exact per-cluster sufficient statistics of (X, y).
struct ClusterStats {
  std::uint64_t n = 0;
  SmallVec sx;
  double sy = 0.0;
  SmallMat sxx;
  SmallVec sxy;
  double syy = 0.0;

  explicit ClusterStats(std::size_t p = 0)
      : sx(SmallVec::Zero(static_cast<Eigen::Index>(p))),
        sxx(SmallMat::Zero(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p))),
        sxy(SmallVec::Zero(static_cast<Eigen::Index>(p))) {}

  void add(const double* x, double y);
  void merge(const ClusterStats& other);
};

/// Streaming accumulator; memory is O(clusters * p^2).
class StatsAccumulator {
 public:
  explicit StatsAccumulator(LmmSpec spec);

  void add(const SimilarityObservation& o);
  /// Generic entry point for arbitrary designs.
  void add_row(const PairId& cluster, std::span<const double> x, double y);
  void merge(const StatsAccumulator& other);

  const LmmSpec& spec() const { return spec_; }
  const std::map<PairId, ClusterStats>& clusters() const { return clusters_; }
  std::uint64_t n_obs() const { return n_; }

  /// Cluster stats in key order. Throws std::invalid_argument when a
  /// non-intercept column is constant over all rows.
  std::vector<ClusterStats> finish() const;

 private:
  LmmSpec spec_;
  std::map<PairId, ClusterStats> clusters_;
  std::uint64_t n_ = 0;
};

std::map<PairId, ClusterStats> accumulate_stats(std::span<const SimilarityObservation> observations,
                                                const LmmSpec& spec);

/// Profiled REML criterion at theta = sigma2_b / sigma2_e and its
/// derivative, from cluster sums only.
struct RemlEvaluation {
  double deviance = 0.0;
  double derivative = 0.0;  // d deviance / d theta
  SmallVec beta;
  SmallMat xtvx;            // X' Vbar^-1 X
  double rss = 0.0;         // r(theta)
};

RemlEvaluation evaluate_reml(double theta, std::span<const ClusterStats> stats);
double profiled_reml_deviance(double theta, std::span<const ClusterStats> stats);

struct LmmFit {
  std::vector<std::string> terms;
  std::vector<double> beta;
  std::vector<double> se;
  std::vector<double> z;
  std::vector<double> p_values;
  double sigma2_b = 0.0;
  double sigma2_e = 0.0;
  double theta = 0.0;
  double reml_deviance = 0.0;
  double reml_loglik = 0.0;
  std::uint64_t n_obs = 0;
  std::uint64_t n_clusters = 0;
  bool converged = false;
  int iterations = 0;
};

struct FitOptions {
  double theta_max = 1e6;
  int grid_points = 41;
  int max_iterations = 200;
};

/// Minimizes the profiled criterion over theta in [0, theta_max] on a
/// log(1 + theta) scale: grid bracket, Brent refinement, then a safeguarded
/// secant polish on the analytic derivative. theta = 0 is always checked.
LmmFit fit_reml(std::span<const ClusterStats> stats, const std::vector<std::string>& term_names,
                const FitOptions& options = {});
LmmFit fit_reml(const StatsAccumulator& acc, const FitOptions& options = {});
LmmFit fit_reml(std::span<const SimilarityObservation> observations, const LmmSpec& spec,
                const FitOptions& options = {});

/// Two-sided Wald p-value 2 * (1 - Phi(|beta / se|)), computed as
/// erfc(|z| / sqrt 2) so the upper tail keeps full relative precision.
double wald_p(double beta, double se);

std::vector<std::string> term_names(const LmmSpec& spec);

/// Key-value text block and per-term CSV rows (estimate, se, z, p, stars).
std::string fit_to_key_value(const LmmFit& fit);
std::string fit_to_csv(const LmmFit& fit);

/// "***" for p < .001, "**" for p < .01, "" otherwise.
std::string_view stars(double p);

}  // namespace hbias
