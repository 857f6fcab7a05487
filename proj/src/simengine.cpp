#include "hbias/simengine.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <thread>

namespace hbias {

PairId PairId::parse(std::string_view s) {
  const auto dash = s.find('-');
  if (dash == std::string_view::npos) throw std::invalid_argument("malformed pair id: " + std::string(s));
  return of(std::stoi(std::string(s.substr(0, dash))), std::stoi(std::string(s.substr(dash + 1))));
}

std::uint64_t pair_count(std::uint64_t n, std::uint64_t n_conditions) {
  return n < 2 ? 0 : n_conditions * (n * (n - 1) / 2);
}

namespace {

template <class T>
double cosine_impl(std::span<const T> u, std::span<const T> v) {
  if (u.size() != v.size()) throw std::invalid_argument("cosine: dimension mismatch");
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double a = u[i];
    const double b = v[i];
    dot += a * b;
    uu += a * a;
    vv += b * b;
  }
  if (uu == 0.0 || vv == 0.0) throw std::invalid_argument("cosine: zero-norm vector");
  if (!std::isfinite(dot) || !std::isfinite(uu) || !std::isfinite(vv)) {
    // Rescale by the largest magnitude to avoid overflow in the squares.
    double su = 0.0, sv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      su = std::max(su, std::abs(static_cast<double>(u[i])));
      sv = std::max(sv, std::abs(static_cast<double>(v[i])));
    }
    if (!std::isfinite(su) || !std::isfinite(sv)) throw std::invalid_argument("cosine: non-finite component");
    dot = uu = vv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      const double a = u[i] / su;
      const double b = v[i] / sv;
      dot += a * b;
      uu += a * a;
      vv += b * b;
    }
  }
  return std::clamp(dot / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

inline double dot_f(const float* a, const float* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

}  // namespace

double cosine(std::span<const double> u, std::span<const double> v) { return cosine_impl(u, v); }
double cosine(std::span<const float> u, std::span<const float> v) { return cosine_impl(u, v); }

void RunningStats::merge(const RunningStats& o) {
  if (o.n == 0) return;
  if (n == 0) {
    *this = o;
    return;
  }
  const double na = static_cast<double>(n);
  const double nb = static_cast<double>(o.n);
  const double total = na + nb;
  const double delta = o.mean - mean;
  mean += delta * nb / total;
  m2 += o.m2 + delta * delta * na * nb / total;
  n += o.n;
}

void standardize(std::span<SimilarityObservation> observations) {
  std::map<Stratum, std::pair<double, double>> moments;  // (mean, sd)
  std::map<Stratum, std::uint64_t> counts;
  std::map<Stratum, double> sums;
  for (const auto& o : observations) {
    const Stratum s{o.knob, o.setting};
    ++counts[s];
    sums[s] += o.cosine_raw;
  }
  std::map<Stratum, double> ss;
  for (const auto& o : observations) {
    const Stratum s{o.knob, o.setting};
    const double d = o.cosine_raw - sums[s] / static_cast<double>(counts[s]);
    ss[s] += d * d;
  }
  for (const auto& [s, n] : counts) {
    const std::string where = std::string(to_string(s.knob)) + "=" + format_setting(s.setting);
    if (n < 2) throw std::domain_error("stratum " + where + " has fewer than two observations");
    const double var = ss[s] / static_cast<double>(n - 1);
    if (!(var > 0.0)) throw std::domain_error("zero variance in stratum " + where);
    moments[s] = {sums[s] / static_cast<double>(n), std::sqrt(var)};
  }
  for (auto& o : observations) {
    const auto& [mean, sd] = moments[Stratum{o.knob, o.setting}];
    o.cosine_std = (o.cosine_raw - mean) / sd;
  }
}

// ------------------------------------------------------------------- index

ConditionIndex::ConditionIndex(const EmbeddingTable& table, const StudyPlan& plan) { build(table, &plan); }
ConditionIndex::ConditionIndex(const EmbeddingTable& table) { build(table, nullptr); }

void ConditionIndex::build(const EmbeddingTable& table, const StudyPlan* plan) {
  dim_ = table.dimension;
  std::map<Condition, std::vector<std::size_t>> rows;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& k = table.keys[i];
    if (plan != nullptr) {
      const Stimulus* s = plan->find_stimulus(k.set_id, k.race);
      if (s == nullptr || s->gender != k.gender)
        throw std::invalid_argument("story references unknown stimulus: " + k.to_string());
    }
    rows[k.condition()].push_back(i);
  }
  groups_.reserve(rows.size());
  for (auto& [cond, idx] : rows) {
    // Key order inside a condition fixes the enumeration order.
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return table.keys[a] < table.keys[b]; });
    Group g{cond, {}};
    g.stories.reserve(idx.size());
    for (std::size_t i : idx) {
      const float* v = table.row(i);
      const double norm = std::sqrt(dot_f(v, v, dim_));
      if (norm == 0.0) throw std::invalid_argument("cosine: zero-norm vector for " + table.keys[i].to_string());
      g.stories.push_back({table.keys[i].set_id, v, 1.0 / norm});
    }
    groups_.push_back(std::move(g));
  }
}

std::uint64_t ConditionIndex::total_pairs() const {
  std::uint64_t n = 0;
  for (const auto& g : groups_) n += pair_count(g.stories.size(), 1);
  return n;
}

void visit_group_pairs(const ConditionIndex::Group& group, std::size_t dim, const ObservationSink& sink) {
  SimilarityObservation o;
  o.race = group.condition.race;
  o.gender = group.condition.gender;
  o.knob = group.condition.knob;
  o.setting = group.condition.setting;
  const auto& st = group.stories;
  for (std::size_t i = 0; i < st.size(); ++i) {
    for (std::size_t j = i + 1; j < st.size(); ++j) {
      o.cosine_raw = std::clamp(dot_f(st[i].values, st[j].values, dim) * st[i].inv_norm * st[j].inv_norm, -1.0, 1.0);
      o.pair_id = PairId::of(st[i].set_id, st[j].set_id);
      sink(o);
    }
  }
}

namespace {

template <class Fn>
void parallel_tasks(std::size_t n_tasks, unsigned threads, Fn&& fn) {
  if (threads == 0) threads = std::max(1U, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n_tasks));
  if (threads <= 1) {
    for (std::size_t t = 0; t < n_tasks; ++t) fn(t);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t t; (t = next.fetch_add(1)) < n_tasks;) fn(t);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

std::map<Stratum, RunningStats> stratum_stats(const ConditionIndex& index, unsigned threads) {
  const auto& groups = index.groups();
  std::vector<RunningStats> partial(groups.size());
  parallel_tasks(groups.size(), threads, [&](std::size_t t) {
    RunningStats rs;
    visit_group_pairs(groups[t], index.dimension(), [&](const SimilarityObservation& o) { rs.add(o.cosine_raw); });
    partial[t] = rs;
  });
  std::map<Stratum, RunningStats> out;
  for (std::size_t t = 0; t < groups.size(); ++t) {
    out[Stratum{groups[t].condition.knob, groups[t].condition.setting}].merge(partial[t]);
  }
  return out;
}

void build_observations(const ConditionIndex& index, const std::map<Stratum, RunningStats>& stats,
                        const ObservationSink& sink) {
  for (const auto& g : index.groups()) {
    const Stratum s{g.condition.knob, g.condition.setting};
    auto it = stats.find(s);
    const std::string where = std::string(to_string(s.knob)) + "=" + format_setting(s.setting);
    if (it == stats.end() || it->second.n < 2)
      throw std::domain_error("stratum " + where + " has fewer than two observations");
    const double var = it->second.sample_variance();
    if (!(var > 0.0)) throw std::domain_error("zero variance in stratum " + where);
    const double mean = it->second.mean;
    const double sd = std::sqrt(var);
    visit_group_pairs(g, index.dimension(), [&](const SimilarityObservation& o) {
      SimilarityObservation z = o;
      z.cosine_std = (o.cosine_raw - mean) / sd;
      sink(z);
    });
  }
}

void build_observations(const ConditionIndex& index, const ObservationSink& sink, unsigned threads) {
  build_observations(index, stratum_stats(index, threads), sink);
}

}  // namespace hbias
