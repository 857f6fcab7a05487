#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "hbias/lmm.hpp"
#include "oracle/dense_reml.hpp"

namespace testing {

/// Fresh scratch directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("hbias_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
}

/// Random-intercept data with unbalanced clusters and p - 1 random covariates
/// (one of them binary so it resembles a group dummy).
inline oracle::Dataset random_dataset(std::mt19937_64& rng, int n_rows, int n_clusters, int p, double sigma2_b,
                                      double sigma2_e) {
  std::normal_distribution<double> z;
  std::uniform_int_distribution<int> pick(0, n_clusters - 1);
  oracle::Dataset d;
  d.n_clusters = n_clusters;
  d.x.resize(n_rows, p);
  d.y.resize(n_rows);
  d.cluster.resize(static_cast<std::size_t>(n_rows));
  std::vector<double> b(static_cast<std::size_t>(n_clusters));
  for (double& v : b) v = std::sqrt(sigma2_b) * z(rng);
  for (int i = 0; i < n_rows; ++i) {
    // First rows guarantee every cluster is present.
    const int c = i < n_clusters ? i : pick(rng);
    d.cluster[static_cast<std::size_t>(i)] = c;
    d.x(i, 0) = 1.0;
    for (int k = 1; k < p; ++k) d.x(i, k) = k == 1 ? static_cast<double>(rng() & 1U) : z(rng);
    double mean = 0.3;
    for (int k = 1; k < p; ++k) mean += 0.5 * k * d.x(i, k);
    d.y(i) = mean + b[static_cast<std::size_t>(c)] + std::sqrt(sigma2_e) * z(rng);
  }
  return d;
}

inline std::vector<hbias::ClusterStats> cluster_stats(const oracle::Dataset& d) {
  std::vector<hbias::ClusterStats> stats(static_cast<std::size_t>(d.n_clusters),
                                         hbias::ClusterStats(static_cast<std::size_t>(d.x.cols())));
  std::vector<double> row(static_cast<std::size_t>(d.x.cols()));
  for (Eigen::Index i = 0; i < d.y.size(); ++i) {
    for (Eigen::Index k = 0; k < d.x.cols(); ++k) row[static_cast<std::size_t>(k)] = d.x(i, k);
    stats[static_cast<std::size_t>(d.cluster[static_cast<std::size_t>(i)])].add(row.data(), d.y(i));
  }
  return stats;
}

inline std::vector<std::string> generic_names(int p) {
  std::vector<std::string> names{"Intercept"};
  for (int k = 1; k < p; ++k) names.push_back("x" + std::to_string(k));
  return names;
}

inline double rel_diff(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace testing
