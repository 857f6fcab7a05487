#include "hbias/core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "hbias/hashing.hpp"

namespace hbias {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

}  // namespace

std::string_view to_string(Race r) { return r == Race::Black ? "Black" : "White"; }
std::string_view to_string(Gender g) { return g == Gender::Man ? "Man" : "Woman"; }
std::string_view to_string(Knob k) { return k == Knob::Temperature ? "temperature" : "top_p"; }

Race parse_race(std::string_view s) {
  const auto l = lower(s);
  if (l == "black") return Race::Black;
  if (l == "white") return Race::White;
  throw ConfigError("unknown race '" + std::string(s) + "'");
}

Gender parse_gender(std::string_view s) {
  const auto l = lower(s);
  if (l == "man" || l == "men") return Gender::Man;
  if (l == "woman" || l == "women") return Gender::Woman;
  throw ConfigError("unknown gender '" + std::string(s) + "'");
}

Knob parse_knob(std::string_view s) {
  const auto l = lower(s);
  if (l == "temperature") return Knob::Temperature;
  if (l == "top_p" || l == "top-p" || l == "topp") return Knob::TopP;
  throw ConfigError("unknown knob '" + std::string(s) + "'");
}

std::string format_setting(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::string join_errors(const std::vector<std::string>& errors) {
  std::string msg = "invalid study design:";
  for (const auto& e : errors) msg += "\n  - " + e;
  return msg;
}

}  // namespace

ValidationError::ValidationError(std::vector<std::string> errors)
    : ConfigError(join_errors(errors)), errors_(std::move(errors)) {}

StudyDesign default_design(int sets_per_gender, int stories_per_stimulus) {
  StudyDesign d;
  d.stories_per_stimulus = stories_per_stimulus;
  for (Gender g : {Gender::Man, Gender::Woman}) {
    const int base = g == Gender::Man ? 0 : sets_per_gender;
    for (int i = 1; i <= sets_per_gender; ++i) {
      for (Race r : {Race::Black, Race::White}) {
        const int set_id = base + i;
        d.stimuli.push_back({set_id, r, g,
                             "ganfd/set" + std::to_string(set_id) + "_" + std::string(to_string(r)) +
                                 ".png"});
      }
    }
  }
  return d;
}

SweepSpec SweepSpec::temperature_default() {
  return {Knob::Temperature, {0.0, 0.5, 1.0, 1.5, 2.0}, kDefaultTopP};
}

SweepSpec SweepSpec::top_p_default() {
  return {Knob::TopP, {0.2, 0.4, 0.6, 0.8, 1.0}, kDefaultTemperature};
}

std::string GenerationKey::to_string() const {
  std::string s = "set=" + std::to_string(set_id);
  s += "|race=";
  s += hbias::to_string(race);
  s += "|gender=";
  s += hbias::to_string(gender);
  s += "|knob=";
  s += hbias::to_string(knob);
  s += "|setting=" + format_setting(setting);
  s += "|rep=" + std::to_string(replicate);
  return s;
}

std::size_t GenerationKeyHash::operator()(const GenerationKey& k) const noexcept {
  return static_cast<std::size_t>(fnv1a64(k.to_string()));
}

StudyPlan::StudyPlan(StudyDesign design, SweepSpec sweep)
    : design_(std::move(design)), sweep_(std::move(sweep)) {
  entries_.reserve(design_.stimuli.size() * sweep_.values.size() *
                   static_cast<std::size_t>(std::max(0, design_.stories_per_stimulus)));
  for (double setting : sweep_.values) {
    for (std::size_t s = 0; s < design_.stimuli.size(); ++s) {
      for (int r = 0; r < design_.stories_per_stimulus; ++r) entries_.push_back({s, setting, r});
    }
  }
}

GenerationKey StudyPlan::key(const PlanEntry& e) const {
  const auto& st = stimulus(e);
  return {st.set_id, st.race, st.gender, sweep_.knob, e.setting, e.replicate};
}

const Stimulus* StudyPlan::find_stimulus(int set_id, Race race) const {
  for (const auto& s : design_.stimuli)
    if (s.set_id == set_id && s.race == race) return &s;
  return nullptr;
}

std::string StudyPlan::serialize() const {
  std::ostringstream os;
  os << "knob=" << to_string(sweep_.knob) << " fixed_other=" << format_setting(sweep_.fixed_other)
     << " stories=" << design_.stories_per_stimulus << " max_tokens=" << design_.max_tokens << '\n';
  for (const auto& e : entries_) os << key(e).to_string() << '\n';
  return os.str();
}

StudyPlan validate_design(const StudyDesign& design, const SweepSpec& sweep) {
  std::vector<std::string> errors;
  if (design.stimuli.empty()) errors.emplace_back("empty stimuli");
  if (design.stories_per_stimulus <= 0) errors.emplace_back("stories_per_stimulus must be positive");
  if (design.max_tokens <= 0) errors.emplace_back("max_tokens must be positive");

  std::set<std::pair<int, Race>> seen;
  std::map<int, Gender> set_gender;
  std::map<int, int> races_per_set;
  for (const auto& s : design.stimuli) {
    if (s.set_id <= 0) errors.push_back("set_id must be positive (got " + std::to_string(s.set_id) + ")");
    if (!seen.insert({s.set_id, s.race}).second) {
      errors.push_back("duplicate stimulus (set_id=" + std::to_string(s.set_id) +
                       ", race=" + std::string(to_string(s.race)) + ")");
    }
    auto [it, inserted] = set_gender.emplace(s.set_id, s.gender);
    if (!inserted && it->second != s.gender) {
      errors.push_back("set_id " + std::to_string(s.set_id) + " spans two genders");
    }
    ++races_per_set[s.set_id];
  }
  for (const auto& [set_id, n] : races_per_set) {
    if (n == 1) {
      errors.push_back("set_id " + std::to_string(set_id) + " must have one Black and one White stimulus");
    }
  }

  if (sweep.values.empty()) errors.emplace_back("sweep values empty");
  for (std::size_t i = 0; i < sweep.values.size(); ++i) {
    const double v = sweep.values[i];
    const bool ok = std::isfinite(v) &&
                    (sweep.knob == Knob::Temperature ? (v >= 0.0 && v <= 2.0) : (v > 0.0 && v <= 1.0));
    if (!ok) {
      errors.push_back("knob value out of range: " + std::string(to_string(sweep.knob)) + "=" +
                       format_setting(v));
    }
    if (i > 0 && !(v > sweep.values[i - 1])) errors.emplace_back("sweep values must be strictly increasing");
  }
  // Only one knob may deviate from its API default.
  const double held_default = sweep.knob == Knob::Temperature ? kDefaultTopP : kDefaultTemperature;
  if (sweep.fixed_other != held_default) {
    errors.push_back("fixed_other must equal the held knob's default " + format_setting(held_default) +
                     " (got " + format_setting(sweep.fixed_other) + ")");
  }

  if (!errors.empty()) throw ValidationError(std::move(errors));
  return StudyPlan(design, sweep);
}

}  // namespace hbias
