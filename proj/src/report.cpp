#include "hbias/report.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace hbias {

using nlohmann::json;

// ------------------------------------------------------------- figure data

void FigureAccumulator::add(const SimilarityObservation& o) {
  auto& c = cells_[{o.knob, o.setting, o.race, o.gender}];
  c.raw.add(o.cosine_raw);
  c.standardized.add(o.cosine_std);
}

std::vector<CellSummary> FigureAccumulator::finish(Knob knob, const std::vector<double>& settings) const {
  for (double s : settings) {
    for (Race r : {Race::Black, Race::White}) {
      for (Gender g : {Gender::Man, Gender::Woman}) {
        auto it = cells_.find({knob, s, r, g});
        if (it == cells_.end() || it->second.raw.n == 0) {
          throw std::invalid_argument("empty cell: " + std::string(to_string(r)) + " " + std::string(to_string(g)) +
                                      " at " + std::string(to_string(knob)) + "=" + format_setting(s));
        }
      }
    }
  }
  auto se = [](const RunningStats& rs) {
    return rs.n > 1 ? std::sqrt(rs.sample_variance() / static_cast<double>(rs.n)) : 0.0;
  };
  std::vector<CellSummary> out;
  for (const auto& [key, c] : cells_) {
    const auto& [k, s, r, g] = key;
    if (k != knob) continue;
    out.push_back({k, s, r, g, c.raw.n, c.raw.mean, se(c.raw), c.standardized.mean, se(c.standardized)});
  }
  return out;
}

std::vector<CellSummary> figure_data(std::span<const SimilarityObservation> observations) {
  if (observations.empty()) throw std::invalid_argument("empty cell: no observations");
  FigureAccumulator acc;
  for (const auto& o : observations) acc.add(o);
  return acc.finish(observations.front().knob);
}

std::string figure_data_csv(const std::vector<CellSummary>& cells) {
  std::string out = "knob,setting,race,gender,n,mean_raw,se_raw,mean_std,se_std\n";
  for (const auto& c : cells) {
    out += std::string(to_string(c.knob)) + "," + format_setting(c.setting) + "," + std::string(to_string(c.race)) +
           "," + std::string(to_string(c.gender)) + "," + std::to_string(c.n) + "," + format_double(c.mean_raw) + "," +
           format_double(c.se_raw) + "," + format_double(c.mean_std) + "," + format_double(c.se_std) + "\n";
  }
  return out;
}

// -------------------------------------------------------------- formatting

std::string format_sig(double v, int significant) {
  if (!std::isfinite(v)) return "NA";
  if (v == 0.0) return "0";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*e", significant - 1, v);
  const double rounded = std::strtod(buf, nullptr);
  const int exponent = static_cast<int>(std::floor(std::log10(std::abs(rounded))));
  if (exponent < -6 || exponent > 15) return buf;
  const int decimals = std::max(0, significant - 1 - exponent);
  std::snprintf(buf, sizeof buf, "%.*f", decimals, rounded);
  return buf;
}

std::string format_thousands(double v) {
  const long long n = std::llround(v);
  std::string digits = std::to_string(n < 0 ? -n : n);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i > 0 && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return n < 0 ? "-" + out : out;
}

std::string format_coef_cell(double beta, double se, double p) {
  return format_sig(beta) + std::string(stars(p)) + " (" + format_sig(se) + ")";
}

std::string format_p(double p) {
  if (p < 1e-16) return "<1e-16";
  return format_double(p);
}

// ------------------------------------------------------------------ tables

namespace {

constexpr std::string_view kFooterStars =
    "Cells show the estimate with its standard error in parentheses. ** p < .01, *** p < .001 "
    "(two-sided Wald z-test against the standard normal).";
constexpr std::string_view kFooterLoglik = "Log likelihood is the REML criterion at the optimum.";

std::string knob_title(Knob k) { return k == Knob::Temperature ? "Temperature" : "Top p"; }
std::string dim_title(Dimension d) { return d == Dimension::Race ? "Race" : "Gender"; }

std::string display_term(const std::string& term, Knob knob) {
  if (term == "Knob") return knob_title(knob);
  if (term == "Race:Knob" || term == "Gender:Knob") return "Interaction";
  return term;
}

std::string csv_header() {
  return "scope,dimension,setting,term,estimate,se,z,p,p_display,stars,sigma2_pair,sigma2_residual,theta,n_obs,"
         "n_clusters,reml_loglik,converged\n";
}

std::string csv_rows(const std::string& scope, Dimension dim, double setting, const LmmFit& f) {
  std::string out;
  for (std::size_t i = 0; i < f.terms.size(); ++i) {
    out += scope + "," + std::string(to_string(dim)) + "," + format_setting(setting) + "," + f.terms[i] + "," +
           format_double(f.beta[i]) + "," + format_double(f.se[i]) + "," + format_double(f.z[i]) + "," +
           format_double(f.p_values[i]) + "," + format_p(f.p_values[i]) + "," + std::string(stars(f.p_values[i])) +
           "," + format_double(f.sigma2_b) + "," + format_double(f.sigma2_e) + "," + format_double(f.theta) + "," +
           std::to_string(f.n_obs) + "," + std::to_string(f.n_clusters) + "," + format_double(f.reml_loglik) + "," +
           (f.converged ? "true" : "false") + "\n";
  }
  return out;
}

std::string md_row(const std::string& label, const std::vector<std::string>& cells) {
  std::string row = "| " + label + " |";
  for (const auto& c : cells) row += " " + c + " |";
  return row + "\n";
}

std::string md_separator(std::size_t columns) {
  std::string row = "|---|";
  for (std::size_t i = 0; i < columns; ++i) row += "---|";
  return row + "\n";
}

RenderedTable per_setting_table(const ModelSuiteResult& suite, Dimension dim) {
  RenderedTable t;
  t.name = std::string(to_string(suite.knob)) + "_" + std::string(to_string(dim));
  std::vector<const LmmFit*> fits;
  std::vector<std::string> header;
  for (double s : suite.settings) {
    fits.push_back(&suite.at(s, dim));
    header.push_back(format_setting(s));
  }

  std::ostringstream md;
  md << "### " << dim_title(dim) << " models across " << knob_title(suite.knob) << " values\n\n";
  md << md_row(knob_title(suite.knob), header) << md_separator(header.size());
  md << md_row("**Fixed effects**", std::vector<std::string>(header.size()));
  for (std::size_t term = 0; term < fits.front()->terms.size(); ++term) {
    std::vector<std::string> cells;
    for (const auto* f : fits) cells.push_back(format_coef_cell(f->beta[term], f->se[term], f->p_values[term]));
    md << md_row(display_term(fits.front()->terms[term], suite.knob), cells);
  }
  md << md_row("**Random effects (σ²)**", std::vector<std::string>(header.size()));
  std::vector<std::string> pair, resid, obs, ll;
  for (const auto* f : fits) {
    pair.push_back(format_sig(f->sigma2_b));
    resid.push_back(format_sig(f->sigma2_e));
    obs.push_back(format_thousands(static_cast<double>(f->n_obs)));
    ll.push_back(format_thousands(f->reml_loglik));
  }
  md << md_row("Pair ID Intercept", pair) << md_row("Residual", resid) << md_row("Observations", obs)
     << md_row("Log likelihood (REML)", ll);
  md << "\n" << kFooterStars << " " << kFooterLoglik << " Reference level: "
     << (dim == Dimension::Race ? "White" : "Man") << ". Columns are " << knob_title(suite.knob)
     << " values.\n";
  t.markdown = md.str();

  t.csv = csv_header();
  for (std::size_t i = 0; i < fits.size(); ++i) t.csv += csv_rows("setting", dim, suite.settings[i], *fits[i]);
  return t;
}

RenderedTable pooled_table(const ModelSuiteResult& suite) {
  RenderedTable t;
  t.name = std::string(to_string(suite.knob)) + "_pooled";
  const auto& race = suite.pooled_fit(Dimension::Race);
  const auto& gender = suite.pooled_fit(Dimension::Gender);

  std::ostringstream md;
  md << "### Group x " << knob_title(suite.knob) << " models\n\n";
  md << md_row("", {"Race", "Gender"}) << md_separator(2);
  md << md_row("**Fixed effects**", {"", ""});
  auto cell = [](const LmmFit& f, std::size_t i) { return format_coef_cell(f.beta[i], f.se[i], f.p_values[i]); };
  md << md_row("Intercept", {cell(race, 0), cell(gender, 0)});
  md << md_row("Race", {cell(race, 1), "--"});
  md << md_row("Gender", {"--", cell(gender, 1)});
  md << md_row(knob_title(suite.knob), {cell(race, 2), cell(gender, 2)});
  md << md_row("Interaction", {cell(race, 3), cell(gender, 3)});
  md << md_row("**Random effects (σ²)**", {"", ""});
  md << md_row("Pair ID Intercept", {format_sig(race.sigma2_b), format_sig(gender.sigma2_b)});
  md << md_row("Residual", {format_sig(race.sigma2_e), format_sig(gender.sigma2_e)});
  md << md_row("Observations", {format_thousands(static_cast<double>(race.n_obs)),
                                format_thousands(static_cast<double>(gender.n_obs))});
  md << md_row("Log likelihood (REML)", {format_thousands(race.reml_loglik), format_thousands(gender.reml_loglik)});
  md << "\n" << kFooterStars << " " << kFooterLoglik << " The " << knob_title(suite.knob)
     << " term is the knob's effect on the reference group (White, Man); Interaction is the difference in that "
        "effect for the other group. The knob enters as a numeric covariate.\n";
  t.markdown = md.str();
  t.csv = csv_header() + csv_rows("pooled", Dimension::Race, 0.0, race) + csv_rows("pooled", Dimension::Gender, 0.0, gender);
  return t;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::vector<RenderedTable> render_tables(const ModelSuiteResult& suite) {
  std::vector<RenderedTable> out{per_setting_table(suite, Dimension::Race), per_setting_table(suite, Dimension::Gender)};
  if (!suite.pooled.empty()) out.push_back(pooled_table(suite));
  return out;
}

std::vector<TableFit> parse_table_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  if (line + "\n" != csv_header()) throw std::runtime_error("unexpected table CSV header");
  std::vector<TableFit> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 17) throw std::runtime_error("malformed table CSV row");
    const double setting = std::stod(f[2]);
    if (out.empty() || out.back().scope != f[0] || out.back().dimension != f[1] || out.back().setting != setting) {
      TableFit tf;
      tf.scope = f[0];
      tf.dimension = f[1];
      tf.setting = setting;
      tf.fit.sigma2_b = std::stod(f[10]);
      tf.fit.sigma2_e = std::stod(f[11]);
      tf.fit.theta = std::stod(f[12]);
      tf.fit.n_obs = std::stoull(f[13]);
      tf.fit.n_clusters = std::stoull(f[14]);
      tf.fit.reml_loglik = std::stod(f[15]);
      tf.fit.reml_deviance = -2.0 * tf.fit.reml_loglik;
      tf.fit.converged = f[16] == "true";
      out.push_back(std::move(tf));
    }
    auto& fit = out.back().fit;
    fit.terms.push_back(f[3]);
    fit.beta.push_back(std::stod(f[4]));
    fit.se.push_back(std::stod(f[5]));
    fit.z.push_back(std::stod(f[6]));
    fit.p_values.push_back(std::stod(f[7]));
  }
  return out;
}

// ------------------------------------------------------------- result file

namespace {

json fit_json(const LmmFit& f) {
  return json{{"terms", f.terms},
              {"beta", f.beta},
              {"se", f.se},
              {"z", f.z},
              {"p", f.p_values},
              {"sigma2_pair", f.sigma2_b},
              {"sigma2_residual", f.sigma2_e},
              {"theta", f.theta},
              {"reml_deviance", f.reml_deviance},
              {"reml_loglik", f.reml_loglik},
              {"n_obs", f.n_obs},
              {"n_clusters", f.n_clusters},
              {"converged", f.converged},
              {"iterations", f.iterations}};
}

LmmFit fit_from_json(const json& j) {
  LmmFit f;
  f.terms = j.at("terms").get<std::vector<std::string>>();
  f.beta = j.at("beta").get<std::vector<double>>();
  f.se = j.at("se").get<std::vector<double>>();
  f.z = j.at("z").get<std::vector<double>>();
  f.p_values = j.at("p").get<std::vector<double>>();
  f.sigma2_b = j.at("sigma2_pair").get<double>();
  f.sigma2_e = j.at("sigma2_residual").get<double>();
  f.theta = j.at("theta").get<double>();
  f.reml_deviance = j.at("reml_deviance").get<double>();
  f.reml_loglik = j.at("reml_loglik").get<double>();
  f.n_obs = j.at("n_obs").get<std::uint64_t>();
  f.n_clusters = j.at("n_clusters").get<std::uint64_t>();
  f.converged = j.at("converged").get<bool>();
  f.iterations = j.value("iterations", 0);
  return f;
}

}  // namespace

std::string serialize_results(const ResultsBundle& b) {
  json j;
  j["format"] = "hbias-results";
  j["version"] = 1;
  j["knob"] = to_string(b.suite.knob);
  j["settings"] = b.suite.settings;
  j["per_setting"] = json::array();
  for (const auto& e : b.suite.per_setting)
    j["per_setting"].push_back({{"setting", e.setting}, {"dimension", to_string(e.dimension)}, {"fit", fit_json(e.fit)}});
  j["pooled"] = json::array();
  for (const auto& e : b.suite.pooled)
    j["pooled"].push_back({{"dimension", to_string(e.dimension)}, {"fit", fit_json(e.fit)}});
  j["figure_data"] = json::array();
  for (const auto& c : b.cells) {
    j["figure_data"].push_back({{"knob", to_string(c.knob)},
                                {"setting", c.setting},
                                {"race", to_string(c.race)},
                                {"gender", to_string(c.gender)},
                                {"n", c.n},
                                {"mean_raw", c.mean_raw},
                                {"se_raw", c.se_raw},
                                {"mean_std", c.mean_std},
                                {"se_std", c.se_std}});
  }
  return j.dump(2) + "\n";
}

ResultsBundle parse_results(const std::string& text) {
  const json j = json::parse(text);
  if (j.value("format", std::string()) != "hbias-results") throw std::runtime_error("not a results file");
  ResultsBundle b;
  b.suite.knob = parse_knob(j.at("knob").get<std::string>());
  b.suite.settings = j.at("settings").get<std::vector<double>>();
  for (const auto& e : j.at("per_setting")) {
    b.suite.per_setting.push_back({e.at("setting").get<double>(), parse_dimension(e.at("dimension").get<std::string>()),
                                   fit_from_json(e.at("fit"))});
  }
  for (const auto& e : j.at("pooled"))
    b.suite.pooled.push_back({parse_dimension(e.at("dimension").get<std::string>()), fit_from_json(e.at("fit"))});
  for (const auto& c : j.at("figure_data")) {
    b.cells.push_back({parse_knob(c.at("knob").get<std::string>()), c.at("setting").get<double>(),
                       parse_race(c.at("race").get<std::string>()), parse_gender(c.at("gender").get<std::string>()),
                       c.at("n").get<std::uint64_t>(), c.at("mean_raw").get<double>(), c.at("se_raw").get<double>(),
                       c.at("mean_std").get<double>(), c.at("se_std").get<double>()});
  }
  return b;
}

}  // namespace hbias
