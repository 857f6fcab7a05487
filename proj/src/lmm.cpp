#include "hbias/lmm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "hbias/minimize.hpp"

namespace hbias {

std::string_view to_string(Term t) {
  switch (t) {
    case Term::Intercept: return "Intercept";
    case Term::Race: return "Race";
    case Term::Gender: return "Gender";
    case Term::Knob: return "Knob";
    case Term::RaceByKnob: return "Race:Knob";
    case Term::GenderByKnob: return "Gender:Knob";
  }
  return "?";
}

void LmmSpec::validate() const {
  if (fixed.empty() || fixed.front() != Term::Intercept)
    throw std::invalid_argument("model must start with an intercept");
  if (fixed.size() > kMaxTerms) throw std::invalid_argument("at most 8 fixed-effect terms supported");
  std::set<Term> seen(fixed.begin(), fixed.end());
  if (seen.size() != fixed.size()) throw std::invalid_argument("duplicate fixed-effect term");
}

void LmmSpec::design_row(const SimilarityObservation& o, double* x) const {
  const double race = o.race != race_reference ? 1.0 : 0.0;
  const double gender = o.gender != gender_reference ? 1.0 : 0.0;
  for (std::size_t k = 0; k < fixed.size(); ++k) {
    switch (fixed[k]) {
      case Term::Intercept: x[k] = 1.0; break;
      case Term::Race: x[k] = race; break;
      case Term::Gender: x[k] = gender; break;
      case Term::Knob: x[k] = o.setting; break;
      case Term::RaceByKnob: x[k] = race * o.setting; break;
      case Term::GenderByKnob: x[k] = gender * o.setting; break;
    }
  }
}

std::vector<std::string> term_names(const LmmSpec& spec) {
  std::vector<std::string> names;
  for (Term t : spec.fixed) names.emplace_back(to_string(t));
  return names;
}

// ------------------------------------------------------------------- stats

void ClusterStats::add(const double* x, double y) {
  const auto p = sx.size();
  ++n;
  sy += y;
  syy += y * y;
  for (Eigen::Index i = 0; i < p; ++i) {
    sx[i] += x[i];
    sxy[i] += x[i] * y;
    for (Eigen::Index j = 0; j <= i; ++j) sxx(i, j) += x[i] * x[j];
  }
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = i + 1; j < p; ++j) sxx(i, j) = sxx(j, i);
}

void ClusterStats::merge(const ClusterStats& o) {
  if (o.sx.size() != sx.size()) throw std::invalid_argument("cluster stats dimension mismatch");
  n += o.n;
  sx += o.sx;
  sy += o.sy;
  sxx += o.sxx;
  sxy += o.sxy;
  syy += o.syy;
}

StatsAccumulator::StatsAccumulator(LmmSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

void StatsAccumulator::add(const SimilarityObservation& o) {
  double x[kMaxTerms];
  spec_.design_row(o, x);
  const double y = spec_.response(o);
  if (!std::isfinite(y)) throw std::invalid_argument("non-finite response");
  auto it = clusters_.find(o.pair_id);
  if (it == clusters_.end()) it = clusters_.emplace(o.pair_id, ClusterStats(spec_.p())).first;
  it->second.add(x, y);
  ++n_;
}

void StatsAccumulator::add_row(const PairId& cluster, std::span<const double> x, double y) {
  if (x.size() != spec_.p()) throw std::invalid_argument("design row has wrong width");
  for (double v : x)
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite design value");
  auto it = clusters_.find(cluster);
  if (it == clusters_.end()) it = clusters_.emplace(cluster, ClusterStats(spec_.p())).first;
  it->second.add(x.data(), y);
  ++n_;
}

void StatsAccumulator::merge(const StatsAccumulator& other) {
  if (other.spec_.fixed != spec_.fixed) throw std::invalid_argument("cannot merge stats of different models");
  for (const auto& [k, s] : other.clusters_) {
    auto it = clusters_.find(k);
    if (it == clusters_.end()) {
      clusters_.emplace(k, s);
    } else {
      it->second.merge(s);
    }
  }
  n_ += other.n_;
}

std::vector<ClusterStats> StatsAccumulator::finish() const {
  std::vector<ClusterStats> out;
  out.reserve(clusters_.size());
  const auto p = static_cast<Eigen::Index>(spec_.p());
  ClusterStats total(spec_.p());
  for (const auto& [k, s] : clusters_) {
    out.push_back(s);
    total.merge(s);
  }
  for (Eigen::Index k = 1; k < p; ++k) {
    const double n = static_cast<double>(total.n);
    const double centered = total.sxx(k, k) - total.sx[k] * total.sx[k] / n;
    if (!(centered > 1e-12 * std::max(1.0, total.sxx(k, k)))) {
      throw std::invalid_argument("rank-deficient design: column " + std::string(to_string(spec_.fixed[k])) +
                                  " is constant");
    }
  }
  return out;
}

std::map<PairId, ClusterStats> accumulate_stats(std::span<const SimilarityObservation> observations,
                                                const LmmSpec& spec) {
  StatsAccumulator acc(spec);
  for (const auto& o : observations) acc.add(o);
  acc.finish();
  return acc.clusters();
}

// ------------------------------------------------------------------- REML

RemlEvaluation evaluate_reml(double theta, std::span<const ClusterStats> stats) {
  if (!(theta >= 0.0)) throw std::invalid_argument("theta must be >= 0");
  if (stats.empty()) throw std::invalid_argument("no clusters");
  const auto p = stats.front().sx.size();

  SmallMat a = SmallMat::Zero(p, p);
  SmallMat a_dot = SmallMat::Zero(p, p);
  SmallVec b = SmallVec::Zero(p);
  double c = 0.0;
  double logdet_v = 0.0;
  double trace_term = 0.0;  // sum n_j / (1 + theta n_j)
  std::uint64_t n = 0;

  for (const auto& s : stats) {
    const double nj = static_cast<double>(s.n);
    const double denom = 1.0 + theta * nj;
    const double w = theta / denom;
    const double w_dot = 1.0 / (denom * denom);
    a.noalias() += s.sxx - w * s.sx * s.sx.transpose();
    a_dot.noalias() -= w_dot * s.sx * s.sx.transpose();
    b.noalias() += s.sxy - (w * s.sy) * s.sx;
    c += s.syy - w * s.sy * s.sy;
    logdet_v += std::log1p(theta * nj);
    trace_term += nj / denom;
    n += s.n;
  }
  const double dof = static_cast<double>(n) - static_cast<double>(p);
  if (dof <= 0) throw std::invalid_argument("need more observations than fixed effects");

  Eigen::LLT<SmallMat> llt(a);
  if (llt.info() != Eigen::Success) throw std::domain_error("singular X'V^-1X (rank-deficient design)");
  const SmallMat& l = llt.matrixL();
  double logdet_a = 0.0;
  for (Eigen::Index i = 0; i < p; ++i) {
    if (!(l(i, i) > 0.0)) throw std::domain_error("singular X'V^-1X (rank-deficient design)");
    logdet_a += 2.0 * std::log(l(i, i));
  }

  RemlEvaluation ev;
  ev.beta = llt.solve(b);
  ev.rss = c - b.dot(ev.beta);
  if (!(ev.rss > 0.0)) throw std::domain_error("residual sum of squares vanished");
  ev.xtvx = a;
  ev.deviance = logdet_v + logdet_a + dof * std::log(ev.rss) +
                dof * (1.0 + std::log(2.0 * std::numbers::pi / dof));

  // dr/dtheta = -sum_j w_j' (Sy_j - Sx_j' beta)^2
  double rss_dot = 0.0;
  for (const auto& s : stats) {
    const double denom = 1.0 + theta * static_cast<double>(s.n);
    const double e = s.sy - s.sx.dot(ev.beta);
    rss_dot -= e * e / (denom * denom);
  }
  const SmallMat a_inv_a_dot = llt.solve(a_dot);
  ev.derivative = trace_term + a_inv_a_dot.trace() + dof * rss_dot / ev.rss;
  return ev;
}

double profiled_reml_deviance(double theta, std::span<const ClusterStats> stats) {
  return evaluate_reml(theta, stats).deviance;
}

namespace {

struct Candidate {
  double phi;
  double deviance;
};

}  // namespace

LmmFit fit_reml(std::span<const ClusterStats> stats, const std::vector<std::string>& names,
                const FitOptions& options) {
  if (stats.size() < 2) throw std::invalid_argument("need at least two clusters");
  const auto p = static_cast<std::size_t>(stats.front().sx.size());
  if (names.size() != p) throw std::invalid_argument("term name count does not match design width");

  auto theta_of = [](double phi) { return std::expm1(phi); };
  auto dev = [&](double phi) { return evaluate_reml(theta_of(phi), stats).deviance; };
  // d deviance / d phi
  auto slope = [&](double phi) { return evaluate_reml(theta_of(phi), stats).derivative * std::exp(phi); };

  const double phi_max = std::log1p(options.theta_max);
  const int k = std::max(3, options.grid_points);
  std::vector<Candidate> grid(static_cast<std::size_t>(k));
  std::size_t best = 0;
  for (int i = 0; i < k; ++i) {
    const double phi = phi_max * i / (k - 1);
    grid[i] = {phi, dev(phi)};
    if (grid[i].deviance < grid[best].deviance) best = static_cast<std::size_t>(i);
  }

  bool converged = true;
  int iterations = 0;
  double phi_hat = grid[best].phi;
  double dev_hat = grid[best].deviance;
  const double lo = grid[best == 0 ? 0 : best - 1].phi;
  const double hi = grid[std::min<std::size_t>(best + 1, grid.size() - 1)].phi;

  const bool interior_possible = best > 0 || slope(0.0) < 0.0;
  if (interior_possible) {
    const auto m = brent_minimize(dev, lo, hi, 1e-10, 1e-14, options.max_iterations);
    iterations = m.iterations;
    converged = m.converged;
    if (m.fx <= dev_hat) {
      phi_hat = m.x;
      dev_hat = m.fx;
    }

    // Regula falsi (Illinois variant) on the analytic slope, kept inside a
    // sign bracket; bisection when the interpolant misbehaves.
    double a = lo, b = hi;
    double ga = slope(a), gb = slope(b);
    if (ga < 0.0 && gb > 0.0) {
      int side = 0;
      for (int it = 0; it < 200; ++it) {
        double x = a - ga * (b - a) / (gb - ga);
        if (!(x > a && x < b)) x = 0.5 * (a + b);
        if (x <= a || x >= b) break;
        const double gx = slope(x);
        if (gx == 0.0) {
          a = b = x;
          break;
        }
        if (gx < 0.0) {
          a = x;
          ga = gx;
          if (side == -1) gb *= 0.5;
          side = -1;
        } else {
          b = x;
          gb = gx;
          if (side == 1) ga *= 0.5;
          side = 1;
        }
        if (b - a <= 4e-16 * std::max(1.0, std::abs(x))) break;
      }
      const double polished = 0.5 * (a + b);
      const double dev_polished = dev(polished);
      if (dev_polished <= dev_hat + 1e-12 * std::abs(dev_hat)) {
        phi_hat = polished;
        dev_hat = dev_polished;
      }
    }
  }
  if (best + 1 == grid.size() && phi_hat >= phi_max * (1.0 - 1e-9)) converged = false;

  const double dev_zero = grid.front().deviance;
  if (dev_zero <= dev_hat) {
    phi_hat = 0.0;
    dev_hat = dev_zero;
  }

  const double theta = theta_of(phi_hat);
  const auto ev = evaluate_reml(theta, stats);
  std::uint64_t n = 0;
  for (const auto& s : stats) n += s.n;

  LmmFit fit;
  fit.terms = names;
  fit.theta = theta;
  fit.n_obs = n;
  fit.n_clusters = stats.size();
  fit.sigma2_e = ev.rss / (static_cast<double>(n) - static_cast<double>(p));
  fit.sigma2_b = theta * fit.sigma2_e;
  fit.reml_deviance = ev.deviance;
  fit.reml_loglik = -0.5 * ev.deviance;
  fit.converged = converged;
  fit.iterations = iterations;

  const SmallMat cov = fit.sigma2_e * ev.xtvx.llt().solve(SmallMat::Identity(ev.xtvx.rows(), ev.xtvx.cols()));
  for (std::size_t i = 0; i < p; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    fit.beta.push_back(ev.beta[ii]);
    fit.se.push_back(std::sqrt(cov(ii, ii)));
    fit.z.push_back(fit.beta.back() / fit.se.back());
    fit.p_values.push_back(wald_p(fit.beta.back(), fit.se.back()));
  }
  return fit;
}

LmmFit fit_reml(const StatsAccumulator& acc, const FitOptions& options) {
  const auto stats = acc.finish();
  return fit_reml(stats, term_names(acc.spec()), options);
}

LmmFit fit_reml(std::span<const SimilarityObservation> observations, const LmmSpec& spec,
                const FitOptions& options) {
  StatsAccumulator acc(spec);
  for (const auto& o : observations) acc.add(o);
  return fit_reml(acc, options);
}

double wald_p(double beta, double se) {
  if (!(se > 0.0)) throw std::invalid_argument("standard error must be positive");
  const double z = std::abs(beta / se);
  return std::erfc(z / std::numbers::sqrt2);
}

std::string_view stars(double p) {
  if (p < 0.001) return "***";
  if (p < 0.01) return "**";
  return "";
}

std::string fit_to_key_value(const LmmFit& fit) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < fit.terms.size(); ++i) {
    os << "beta." << fit.terms[i] << " = " << fit.beta[i] << '\n';
    os << "se." << fit.terms[i] << " = " << fit.se[i] << '\n';
    os << "p." << fit.terms[i] << " = " << fit.p_values[i] << '\n';
  }
  os << "sigma2_pair = " << fit.sigma2_b << '\n'
     << "sigma2_residual = " << fit.sigma2_e << '\n'
     << "theta = " << fit.theta << '\n'
     << "reml_loglik = " << fit.reml_loglik << '\n'
     << "n_obs = " << fit.n_obs << '\n'
     << "n_clusters = " << fit.n_clusters << '\n'
     << "converged = " << (fit.converged ? "true" : "false") << '\n';
  return os.str();
}

std::string fit_to_csv(const LmmFit& fit) {
  std::string out = "term,estimate,se,z,p,stars\n";
  for (std::size_t i = 0; i < fit.terms.size(); ++i) {
    out += fit.terms[i] + "," + format_double(fit.beta[i]) + "," + format_double(fit.se[i]) + "," +
           format_double(fit.z[i]) + "," + format_double(fit.p_values[i]) + "," + std::string(stars(fit.p_values[i])) +
           "\n";
  }
  return out;
}

}  // namespace hbias
