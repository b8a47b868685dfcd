#pragma once

// Data containers, seed derivation, random streams, subsampling and folds.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sdml {

using Index = Eigen::Index;

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

// Observation table Z_i = (X_i, T_i, Y_i[, W_i]). Row i of every block belongs
// to observation i.
struct Dataset {
  Eigen::MatrixXd X;                // n x d_x covariates
  Eigen::MatrixXd T;                // n x p_t treatment
  Eigen::VectorXd Y;                // n outcome
  std::optional<Eigen::MatrixXd> W; // n x p_w instrument

  Index n() const { return Y.size(); }
  Index dx() const { return X.cols(); }
  Index pt() const { return T.cols(); }

  void validate() const {
    const Index rows = n();
    if (rows < 2) throw std::invalid_argument("dataset needs at least 2 observations");
    if (X.rows() != rows || T.rows() != rows)
      throw std::invalid_argument("dataset blocks have mismatched row counts");
    if (T.cols() < 1) throw std::invalid_argument("treatment needs at least one column");
    if (W && W->rows() != rows) throw std::invalid_argument("instrument row count mismatch");
    if (!X.allFinite() || !T.allFinite() || !Y.allFinite() || (W && !W->allFinite()))
      throw std::invalid_argument("dataset contains non-finite entries");
  }

  Dataset rows(std::span<const Index> idx) const {
    Dataset out;
    out.X.resize(static_cast<Index>(idx.size()), X.cols());
    out.T.resize(static_cast<Index>(idx.size()), T.cols());
    out.Y.resize(static_cast<Index>(idx.size()));
    if (W) out.W = Eigen::MatrixXd(static_cast<Index>(idx.size()), W->cols());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto r = static_cast<Index>(k);
      out.X.row(r) = X.row(idx[k]);
      out.T.row(r) = T.row(idx[k]);
      out.Y(r) = Y(idx[k]);
      if (W) out.W->row(r) = W->row(idx[k]);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Seeds
// ---------------------------------------------------------------------------

// SplitMix64 finalizer (Stafford variant 13).
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

struct SeedPathEntry {
  std::string tag;
  std::uint64_t index = 0;
};

struct SeedSpec {
  std::uint64_t master = 0;
  std::vector<SeedPathEntry> path;
};

// One derivation step. derive(derive(s, p), q) == derive(s, p ++ q).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag,
                                    std::uint64_t index) {
  std::uint64_t h = mix64(seed ^ mix64(fnv1a64(tag) + 0x9E3779B97F4A7C15ULL));
  return mix64(h ^ (index * 0xD1B54A32D192ED03ULL + 0x632BE59BD9B4E019ULL));
}

// Pure function of (master, path); the empty path returns master unchanged.
inline std::uint64_t derive_seed(const SeedSpec& spec) {
  std::uint64_t h = spec.master;
  for (const auto& e : spec.path) h = derive_seed(h, e.tag, e.index);
  return h;
}

// ---------------------------------------------------------------------------
// Random stream
// ---------------------------------------------------------------------------

// Counter-based stream: output k is mix64(seed + k * golden). Children are
// derived from the seed alone, so forking never depends on how many draws the
// parent has consumed. All samplers consume a fixed number of draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), counter_(seed) {}

  std::uint64_t seed() const { return seed_; }

  Rng child(std::string_view tag, std::uint64_t index) const {
    return Rng(derive_seed(seed_, tag, index));
  }

  std::uint64_t next_u64() {
    counter_ += 0x9E3779B97F4A7C15ULL;
    return mix64(counter_);
  }

  // Uniform on (0, 1], 53-bit resolution.
  double uniform() { return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, k) by 128-bit multiply-high; one draw, bias <= k / 2^64.
  std::uint64_t below(std::uint64_t k) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * k) >> 64);
  }

  // Standard normal via Box-Muller; two draws per call.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double exponential(double rate) { return -std::log(uniform()) / rate; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

// ---------------------------------------------------------------------------
// Subsampling and folds
// ---------------------------------------------------------------------------

// Partial Fisher-Yates over [0, n): m distinct indices, exactly m draws.
inline std::vector<Index> subsample_without_replacement(Index n, Index m, Rng& rng) {
  if (m < 1 || m > n)
    throw std::invalid_argument("subsample size must satisfy 1 <= m <= n");
  std::vector<Index> pool(static_cast<std::size_t>(n));
  std::iota(pool.begin(), pool.end(), Index{0});
  for (Index i = 0; i < m; ++i) {
    const auto j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  pool.resize(static_cast<std::size_t>(m));
  return pool;
}

struct FoldAssignment {
  int K = 0;
  std::vector<int> assignment;

  std::vector<Index> sizes() const {
    std::vector<Index> s(static_cast<std::size_t>(K), 0);
    for (int f : assignment) ++s[static_cast<std::size_t>(f)];
    return s;
  }

  std::vector<Index> members(int k) const {
    std::vector<Index> out;
    for (std::size_t i = 0; i < assignment.size(); ++i)
      if (assignment[i] == k) out.push_back(static_cast<Index>(i));
    return out;
  }

  std::vector<Index> complement(int k) const {
    std::vector<Index> out;
    for (std::size_t i = 0; i < assignment.size(); ++i)
      if (assignment[i] != k) out.push_back(static_cast<Index>(i));
    return out;
  }
};

// Random balanced partition: a uniform permutation dealt round-robin.
inline FoldAssignment make_folds(Index n, int K, Rng& rng) {
  if (K < 2 || K > n) throw std::invalid_argument("fold count must satisfy 2 <= K <= n");
  const auto perm = subsample_without_replacement(n, n, rng);
  FoldAssignment folds;
  folds.K = K;
  folds.assignment.assign(static_cast<std::size_t>(n), 0);
  for (Index pos = 0; pos < n; ++pos)
    folds.assignment[static_cast<std::size_t>(perm[static_cast<std::size_t>(pos)])] =
        static_cast<int>(pos % K);
  return folds;
}

}  // namespace sdml
