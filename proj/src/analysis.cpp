#include "hbias/analysis.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace hbias {

std::string_view to_string(Dimension d) { return d == Dimension::Race ? "race" : "gender"; }

Dimension parse_dimension(std::string_view s) {
  if (s == "race" || s == "Race") return Dimension::Race;
  if (s == "gender" || s == "Gender") return Dimension::Gender;
  throw std::invalid_argument("unknown dimension '" + std::string(s) + "'");
}

const LmmFit& ModelSuiteResult::at(double setting, Dimension d) const {
  for (const auto& e : per_setting)
    if (e.setting == setting && e.dimension == d) return e.fit;
  throw std::out_of_range("no fit for setting " + format_setting(setting));
}

const LmmFit& ModelSuiteResult::pooled_fit(Dimension d) const {
  for (const auto& e : pooled)
    if (e.dimension == d) return e.fit;
  throw std::out_of_range("no pooled fit");
}

SuiteAccumulator::SuiteAccumulator(Knob knob, std::vector<double> settings)
    : knob_(knob),
      settings_(std::move(settings)),
      pooled_race_(LmmSpec::race_by_knob()),
      pooled_gender_(LmmSpec::gender_by_knob()) {
  std::sort(settings_.begin(), settings_.end());
  if (settings_.empty()) throw std::invalid_argument("no settings to fit");
  if (std::adjacent_find(settings_.begin(), settings_.end()) != settings_.end())
    throw std::invalid_argument("duplicate setting");
  for (std::size_t i = 0; i < settings_.size(); ++i) {
    race_.emplace_back(LmmSpec::race_model());
    gender_.emplace_back(LmmSpec::gender_model());
  }
}

std::size_t SuiteAccumulator::slot(double setting) const {
  auto it = std::lower_bound(settings_.begin(), settings_.end(), setting);
  if (it == settings_.end() || *it != setting)
    throw std::invalid_argument("observation at unexpected setting " + format_setting(setting));
  return static_cast<std::size_t>(it - settings_.begin());
}

void SuiteAccumulator::add(const SimilarityObservation& o) {
  if (o.knob != knob_) throw std::invalid_argument("observation from a different knob");
  const std::size_t s = slot(o.setting);
  race_[s].add(o);
  gender_[s].add(o);
  pooled_race_.add(o);
  pooled_gender_.add(o);
}

std::vector<PerSettingFit> SuiteAccumulator::fit_per_setting(const FitOptions& options) const {
  std::vector<PerSettingFit> out;
  for (std::size_t s = 0; s < settings_.size(); ++s) {
    if (race_[s].n_obs() == 0) {
      throw std::invalid_argument("missing setting stratum " + std::string(to_string(knob_)) + "=" +
                                  format_setting(settings_[s]));
    }
    out.push_back({settings_[s], Dimension::Race, fit_reml(race_[s], options)});
    out.push_back({settings_[s], Dimension::Gender, fit_reml(gender_[s], options)});
  }
  return out;
}

std::vector<PooledFit> SuiteAccumulator::fit_pooled(const FitOptions& options) const {
  std::size_t present = 0;
  for (const auto& a : race_) present += a.n_obs() > 0 ? 1 : 0;
  if (present < 2) throw std::invalid_argument("pooled model needs at least two settings (interaction unidentifiable)");
  return {{Dimension::Race, fit_reml(pooled_race_, options)}, {Dimension::Gender, fit_reml(pooled_gender_, options)}};
}

ModelSuiteResult SuiteAccumulator::finish(const FitOptions& options) const {
  ModelSuiteResult r;
  r.knob = knob_;
  r.settings = settings_;
  r.per_setting = fit_per_setting(options);
  if (settings_.size() >= 2) r.pooled = fit_pooled(options);
  return r;
}

std::vector<double> observed_settings(std::span<const SimilarityObservation> observations, Knob knob) {
  std::set<double> s;
  for (const auto& o : observations)
    if (o.knob == knob) s.insert(o.setting);
  return {s.begin(), s.end()};
}

std::vector<PerSettingFit> run_per_setting(std::span<const SimilarityObservation> observations, Knob knob,
                                           std::vector<double> settings) {
  if (settings.empty()) settings = observed_settings(observations, knob);
  SuiteAccumulator acc(knob, std::move(settings));
  for (const auto& o : observations) acc.add(o);
  return acc.fit_per_setting();
}

std::vector<PooledFit> run_pooled(std::span<const SimilarityObservation> observations, Knob knob) {
  SuiteAccumulator acc(knob, observed_settings(observations, knob));
  for (const auto& o : observations) acc.add(o);
  return acc.fit_pooled();
}

ModelSuiteResult run_suite(std::span<const SimilarityObservation> observations, Knob knob,
                           std::vector<double> settings) {
  if (settings.empty()) settings = observed_settings(observations, knob);
  SuiteAccumulator acc(knob, std::move(settings));
  for (const auto& o : observations) acc.add(o);
  return acc.finish();
}

}  // namespace hbias
