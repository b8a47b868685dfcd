#pragma once

// Base regressors (1-NN, fully grown CART, constant) and the bagged ensemble
// built from subsamples drawn without replacement.

#include "stable_dml/core.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace sdml {

// Raised when an exact computation would exceed its combinatorial budget.
class ResourceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class BaseKind { one_nn, tree, constant };

inline std::string to_string(BaseKind k) {
  switch (k) {
    case BaseKind::one_nn: return "nn";
    case BaseKind::tree: return "tree";
    case BaseKind::constant: return "zero";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// 1-NN
// ---------------------------------------------------------------------------

// Euclidean 1-nearest-neighbour regressor with P outputs. Ties go to the
// lowest training index. Rows are indexed by their first coordinate; the
// search returns exactly what the linear scan would.
class OneNNModel {
 public:
  OneNNModel() = default;

  static OneNNModel fit(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
    if (X.rows() < 1) throw std::invalid_argument("1-NN needs at least one training row");
    if (Y.rows() != X.rows()) throw std::invalid_argument("1-NN: X and Y row counts differ");
    OneNNModel model;
    model.m_ = X.rows();
    model.d_ = X.cols();
    model.P_ = Y.cols();
    model.X_.resize(static_cast<std::size_t>(model.m_ * model.d_));
    model.Y_.resize(static_cast<std::size_t>(model.m_ * model.P_));
    for (Index i = 0; i < model.m_; ++i) {
      for (Index j = 0; j < model.d_; ++j) model.X_[static_cast<std::size_t>(i * model.d_ + j)] = X(i, j);
      for (Index j = 0; j < model.P_; ++j) model.Y_[static_cast<std::size_t>(i * model.P_ + j)] = Y(i, j);
    }
    model.order_.resize(static_cast<std::size_t>(model.m_));
    std::iota(model.order_.begin(), model.order_.end(), Index{0});
    std::sort(model.order_.begin(), model.order_.end(), [&](Index a, Index b) {
      const double xa = model.X_[static_cast<std::size_t>(a * model.d_)];
      const double xb = model.X_[static_cast<std::size_t>(b * model.d_)];
      return xa < xb || (xa == xb && a < b);
    });
    model.sorted_.resize(static_cast<std::size_t>(model.m_));
    for (std::size_t k = 0; k < model.order_.size(); ++k)
      model.sorted_[k] = model.X_[static_cast<std::size_t>(model.order_[k] * model.d_)];
    return model;
  }

  Index rows() const { return m_; }
  Index dims() const { return d_; }
  Index outputs() const { return P_; }

  // Index of the training row nearest to x (length dims()).
  Index nearest(const double* x) const {
    if (d_ == 1) return nearest_sorted(x[0]);
    // Walk outward from x[0] in first-coordinate order. The full squared
    // distance is at least the first term, so a side stops once that term
    // alone exceeds the best distance; equal distances are still visited.
    const auto pos = static_cast<std::size_t>(
        std::lower_bound(sorted_.begin(), sorted_.end(), x[0]) - sorted_.begin());
    Index best = std::numeric_limits<Index>::max();
    double best_d = std::numeric_limits<double>::infinity();
    auto visit = [&](std::size_t k) {
      const Index i = order_[k];
      const double* row = X_.data() + i * d_;
      double dist = 0.0;
      for (Index j = 0; j < d_; ++j) {
        const double diff = x[j] - row[j];
        dist += diff * diff;
      }
      if (dist < best_d || (dist == best_d && i < best)) {
        best_d = dist;
        best = i;
      }
    };
    auto first_term = [&](std::size_t k) {
      const double diff = x[0] - sorted_[k];
      return diff * diff;
    };
    std::size_t lo = pos, hi = pos;
    bool go_lo = lo > 0, go_hi = hi < sorted_.size();
    while (go_lo || go_hi) {
      if (go_hi) {
        if (first_term(hi) > best_d) go_hi = false;
        else if (visit(hi), ++hi == sorted_.size()) go_hi = false;
      }
      if (go_lo) {
        if (first_term(lo - 1) > best_d) go_lo = false;
        else if (visit(lo - 1), --lo == 0) go_lo = false;
      }
    }
    return best;
  }

  void predict(const double* x, double* out) const {
    const Index i = nearest(x);
    for (Index j = 0; j < P_; ++j) out[j] = Y_[static_cast<std::size_t>(i * P_ + j)];
  }

  Eigen::VectorXd predict(const Eigen::VectorXd& x) const {
    if (x.size() != d_) throw std::invalid_argument("1-NN: query dimension mismatch");
    Eigen::VectorXd out(P_);
    predict(x.data(), out.data());
    return out;
  }

 private:
  Index nearest_sorted(double x) const {
    const auto pos = static_cast<std::size_t>(
        std::lower_bound(sorted_.begin(), sorted_.end(), x) - sorted_.begin());
    auto sq = [&](std::size_t k) {
      const double diff = x - sorted_[k];
      return diff * diff;
    };
    double best_d = std::numeric_limits<double>::infinity();
    if (pos > 0) best_d = sq(pos - 1);
    if (pos < sorted_.size()) best_d = std::min(best_d, sq(pos));
    // Squared distances are non-decreasing away from x on each side, so all
    // minimizers are contiguous around pos.
    Index best = std::numeric_limits<Index>::max();
    for (std::size_t k = pos; k > 0 && sq(k - 1) == best_d; --k) best = std::min(best, order_[k - 1]);
    for (std::size_t k = pos; k < sorted_.size() && sq(k) == best_d; ++k) best = std::min(best, order_[k]);
    return best;
  }

  Index m_ = 0, d_ = 0, P_ = 0;
  std::vector<double> X_;  // row-major m x d
  std::vector<double> Y_;  // row-major m x P
  std::vector<double> sorted_;  // first coordinate, ascending
  std::vector<Index> order_;
};

// ---------------------------------------------------------------------------
// Regression tree
// ---------------------------------------------------------------------------

// Fully grown CART regression tree. Splits maximize variance reduction over
// every feature and every midpoint between consecutive distinct values; a node
// becomes a leaf once its labels are constant or its covariate rows coincide.
// Routing sends x[feature] <= threshold to the left child.
class TreeModel {
 public:
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
  };

  TreeModel() = default;

  static TreeModel fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
    if (X.rows() < 1) throw std::invalid_argument("tree needs at least one training row");
    if (y.size() != X.rows()) throw std::invalid_argument("tree: X and y row counts differ");
    TreeModel tree;
    tree.m_ = X.rows();
    tree.d_ = X.cols();
    const auto m = static_cast<std::size_t>(X.rows());
    const auto d = static_cast<std::size_t>(X.cols());
    // Row lists live in flat buffers: the first block in index order, then one
    // block per feature ordered by (X(., f), index). A node owns the range
    // [begin, end) of every block; children inherit order by stable partition.
    Builder builder{X, y, tree.nodes_, m, std::vector<Index>(m * (d + 1)), std::vector<Index>(m),
                    std::vector<char>(m, 0)};
    for (std::size_t blk = 0; blk <= d; ++blk)
      std::iota(builder.rows.begin() + static_cast<std::ptrdiff_t>(blk * m),
                builder.rows.begin() + static_cast<std::ptrdiff_t>((blk + 1) * m), Index{0});
    for (std::size_t f = 0; f < d; ++f) {
      const auto col = static_cast<Index>(f);
      std::sort(builder.rows.begin() + static_cast<std::ptrdiff_t>((f + 1) * m),
                builder.rows.begin() + static_cast<std::ptrdiff_t>((f + 2) * m),
                [&](Index a, Index b) { return X(a, col) < X(b, col) || (X(a, col) == X(b, col) && a < b); });
    }
    builder.grow(0, m);
    return tree;
  }

  double predict(const double* x) const {
    int k = 0;
    while (nodes_[static_cast<std::size_t>(k)].feature >= 0) {
      const Node& node = nodes_[static_cast<std::size_t>(k)];
      k = x[node.feature] <= node.threshold ? node.left : node.right;
    }
    return nodes_[static_cast<std::size_t>(k)].value;
  }

  double predict(const Eigen::VectorXd& x) const {
    if (x.size() != d_) throw std::invalid_argument("tree: query dimension mismatch");
    return predict(x.data());
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  Index leaves() const {
    return static_cast<Index>(std::count_if(nodes_.begin(), nodes_.end(),
                                            [](const Node& n) { return n.feature < 0; }));
  }
  Index training_rows() const { return m_; }
  Index dims() const { return d_; }

 private:
  struct Builder {
    const Eigen::MatrixXd& X;
    const Eigen::VectorXd& y;
    std::vector<Node>& nodes;
    std::size_t m;
    std::vector<Index> rows;
    std::vector<Index> scratch;
    std::vector<char> goes_left;

    const Index* block(std::size_t blk) const { return rows.data() + blk * m; }

    int grow(std::size_t begin, std::size_t end) {
      const int id = static_cast<int>(nodes.size());
      nodes.emplace_back();
      const auto k = static_cast<Index>(end - begin);
      const Index* idx = block(0) + begin;

      double mean = 0.0;
      for (Index s = 0; s < k; ++s) mean += y(idx[s]);
      mean /= static_cast<double>(k);

      bool constant_labels = true;
      bool identical_rows = true;
      for (Index s = 0; s < k; ++s) {
        const Index i = idx[s];
        if (y(i) != y(idx[0])) constant_labels = false;
        if (identical_rows && (X.row(i).array() != X.row(idx[0]).array()).any()) identical_rows = false;
      }
      if (constant_labels || identical_rows) {
        nodes[static_cast<std::size_t>(id)].value = constant_labels ? y(idx[0]) : mean;
        return id;
      }

      // Centered labels keep scores invariant (to rounding) under label shifts.
      int best_feature = -1;
      double best_threshold = 0.0;
      double best_score = -1.0;
      double total = 0.0;
      for (Index s = 0; s < k; ++s) total += y(idx[s]) - mean;
      for (Index f = 0; f < X.cols(); ++f) {
        const Index* order = block(static_cast<std::size_t>(f) + 1) + begin;
        double left_sum = 0.0;
        for (Index s = 0; s + 1 < k; ++s) {
          left_sum += y(order[s]) - mean;
          const double lo = X(order[s], f);
          const double hi = X(order[s + 1], f);
          if (!(lo < hi)) continue;
          const double nl = static_cast<double>(s + 1);
          const double nr = static_cast<double>(k - s - 1);
          const double right_sum = total - left_sum;
          const double score = left_sum * left_sum / nl + right_sum * right_sum / nr;
          // Near-equal scores count as ties and keep the earlier candidate.
          if (score > best_score * (1.0 + 1e-12) + 1e-300) {
            best_score = score;
            best_feature = static_cast<int>(f);
            double thr = 0.5 * (lo + hi);
            if (!(thr < hi)) thr = lo;
            best_threshold = thr;
          }
        }
      }

      std::size_t n_left = 0;
      for (Index s = 0; s < k; ++s) {
        const bool l = X(idx[s], best_feature) <= best_threshold;
        goes_left[static_cast<std::size_t>(idx[s])] = l;
        n_left += l;
      }
      for (std::size_t blk = 0; blk <= static_cast<std::size_t>(X.cols()); ++blk) {
        Index* seg = rows.data() + blk * m + begin;
        std::size_t li = 0, ri = 0;
        for (Index s = 0; s < k; ++s) {
          const Index i = seg[s];
          if (goes_left[static_cast<std::size_t>(i)]) seg[li++] = i;
          else scratch[ri++] = i;
        }
        std::copy(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(ri), seg + li);
      }
      const int l = grow(begin, begin + n_left);
      const int r = grow(begin + n_left, end);
      Node& node = nodes[static_cast<std::size_t>(id)];
      node.feature = best_feature;
      node.threshold = best_threshold;
      node.left = l;
      node.right = r;
      node.value = mean;
      return id;
    }
  };

  std::vector<Node> nodes_;
  Index m_ = 0, d_ = 0;
};

// ---------------------------------------------------------------------------
// Base model wrapper
// ---------------------------------------------------------------------------

struct ConstantModel {
  Index P = 1;
  double value = 0.0;
};

// A base regressor with P outputs. Trees are single-output, so a tree base
// holds one tree per output column fitted on the same rows.
class BaseModel {
 public:
  static BaseModel fit(BaseKind kind, const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                       double constant_value = 0.0) {
    BaseModel model;
    model.d_ = X.cols();
    model.P_ = Y.cols();
    switch (kind) {
      case BaseKind::one_nn:
        model.impl_ = OneNNModel::fit(X, Y);
        break;
      case BaseKind::tree: {
        std::vector<TreeModel> trees;
        trees.reserve(static_cast<std::size_t>(Y.cols()));
        for (Index j = 0; j < Y.cols(); ++j) trees.push_back(TreeModel::fit(X, Y.col(j)));
        model.impl_ = std::move(trees);
        break;
      }
      case BaseKind::constant:
        if (X.rows() < 1) throw std::invalid_argument("constant learner needs at least one row");
        model.impl_ = ConstantModel{Y.cols(), constant_value};
        break;
    }
    return model;
  }

  Index dims() const { return d_; }
  Index outputs() const { return P_; }

  void predict(const double* x, double* out) const {
    if (const auto* nn = std::get_if<OneNNModel>(&impl_)) {
      nn->predict(x, out);
    } else if (const auto* trees = std::get_if<std::vector<TreeModel>>(&impl_)) {
      for (std::size_t j = 0; j < trees->size(); ++j) out[j] = (*trees)[j].predict(x);
    } else {
      const auto& c = std::get<ConstantModel>(impl_);
      for (Index j = 0; j < c.P; ++j) out[j] = c.value;
    }
  }

 private:
  std::variant<OneNNModel, std::vector<TreeModel>, ConstantModel> impl_;
  Index d_ = 0, P_ = 0;
};

// ---------------------------------------------------------------------------
// Learner configuration
// ---------------------------------------------------------------------------

struct MRule {
  enum class Kind { power, fixed };
  Kind kind = Kind::power;
  double alpha = 0.49;
  Index m = 1;

  static MRule power(double a) {
    if (!(a > 0.0 && a <= 1.0)) throw std::invalid_argument("m-rule exponent must lie in (0, 1]");
    return {Kind::power, a, 0};
  }
  static MRule fixed(Index size) {
    if (size < 1) throw std::invalid_argument("fixed subsample size must be >= 1");
    return {Kind::fixed, 0.0, size};
  }

  // power: ceil(n^alpha) clipped to [2, n]; fixed: the stated size.
  Index resolve(Index n) const {
    if (kind == Kind::fixed) return m;
    const double raw = std::pow(static_cast<double>(n), alpha);
    auto size = static_cast<Index>(std::ceil(raw - 1e-9));
    return std::clamp<Index>(size, std::min<Index>(2, n), n);
  }

  std::string label() const {
    if (kind == Kind::fixed) return "m=" + std::to_string(m);
    if (alpha == 1.0) return "n";
    if (std::abs(alpha - 10.0 / 11.0) < 1e-12) return "n^10/11";
    std::string s = std::to_string(alpha);
    s.erase(s.find_last_not_of('0') + 1);
    return "n^" + s;
  }
};

struct BRule {
  enum class Kind { automatic, fixed, exact, ratio };
  Kind kind = Kind::automatic;
  Index B = 0;
  double c = 0.0;  // ratio only

  static BRule automatic() { return {Kind::automatic, 0}; }
  static BRule fixed(Index b) {
    if (b < 1) throw std::invalid_argument("bag count must be >= 1");
    return {Kind::fixed, b};
  }
  static BRule exact() { return {Kind::exact, 0}; }
  // B = ceil(c n / m): bag noise relative to the m/n signal stays fixed in n.
  static BRule ratio(double factor) {
    if (!(factor > 0.0) || !std::isfinite(factor)) throw std::invalid_argument("bag ratio must be positive");
    return {Kind::ratio, 0, factor};
  }

  // automatic: max(100, ceil(n/m)). Not meaningful for exact.
  Index resolve(Index n, Index m) const {
    if (kind == Kind::fixed) return B;
    if (kind == Kind::ratio)
      return std::max<Index>(1, static_cast<Index>(std::ceil(c * static_cast<double>(n) / static_cast<double>(m) - 1e-9)));
    return std::max<Index>(100, (n + m - 1) / m);
  }

  std::string label() const {
    switch (kind) {
      case Kind::automatic: return "auto";
      case Kind::fixed: return std::to_string(B);
      case Kind::exact: return "exact";
      case Kind::ratio: {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%gn/m", c);
        return buf;
      }
    }
    return "?";
  }
};

struct LearnerConfig {
  BaseKind base = BaseKind::one_nn;
  MRule m_rule = MRule::power(0.49);
  BRule b_rule = BRule::automatic();
  double constant_value = 0.0;  // constant base only
};

// ---------------------------------------------------------------------------
// Bagged ensemble
// ---------------------------------------------------------------------------

struct Bag {
  std::vector<Index> indices;  // training rows, in draw order
  std::shared_ptr<const BaseModel> model;

  bool contains(Index row) const {
    return std::find(indices.begin(), indices.end(), row) != indices.end();
  }
};

inline Eigen::MatrixXd take_rows(const Eigen::MatrixXd& M, std::span<const Index> idx) {
  Eigen::MatrixXd out(static_cast<Index>(idx.size()), M.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Index>(k)) = M.row(idx[k]);
  return out;
}

// Average of B base models, each fitted on its own size-m subsample.
// Predictions sum bags in index order, then divide by B.
class BaggedEnsemble {
 public:
  BaggedEnsemble() = default;
  BaggedEnsemble(BaseKind base, Index n, Index m, Index d, Index P, std::vector<Bag> bags,
                 double constant_value = 0.0)
      : base_(base), n_(n), m_(m), d_(d), P_(P), constant_(constant_value), bags_(std::move(bags)) {}

  BaseKind base() const { return base_; }
  Index B() const { return static_cast<Index>(bags_.size()); }
  Index m() const { return m_; }
  Index n() const { return n_; }
  Index dims() const { return d_; }
  Index outputs() const { return P_; }
  const std::vector<Bag>& bags() const { return bags_; }

  Eigen::VectorXd predict(const Eigen::VectorXd& x) const {
    if (x.size() != d_) throw std::invalid_argument("ensemble: query dimension mismatch");
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(P_);
    Eigen::VectorXd tmp(P_);
    for (const auto& bag : bags_) {
      bag.model->predict(x.data(), tmp.data());
      acc += tmp;
    }
    return acc / static_cast<double>(bags_.size());
  }

  // Row q of the result is the prediction at row q of Xq.
  Eigen::MatrixXd predict(const Eigen::MatrixXd& Xq) const {
    if (Xq.cols() != d_) throw std::invalid_argument("ensemble: query dimension mismatch");
    const Index nq = Xq.rows();
    // Row-major copies keep each query contiguous.
    std::vector<double> queries(static_cast<std::size_t>(nq * d_));
    for (Index q = 0; q < nq; ++q)
      for (Index j = 0; j < d_; ++j) queries[static_cast<std::size_t>(q * d_ + j)] = Xq(q, j);
    std::vector<double> acc(static_cast<std::size_t>(nq * P_), 0.0);
    std::vector<double> tmp(static_cast<std::size_t>(P_));
    for (const auto& bag : bags_) {
      for (Index q = 0; q < nq; ++q) {
        bag.model->predict(&queries[static_cast<std::size_t>(q * d_)], tmp.data());
        for (Index j = 0; j < P_; ++j) acc[static_cast<std::size_t>(q * P_ + j)] += tmp[static_cast<std::size_t>(j)];
      }
    }
    Eigen::MatrixXd out(nq, P_);
    const double inv = static_cast<double>(bags_.size());
    for (Index q = 0; q < nq; ++q)
      for (Index j = 0; j < P_; ++j) out(q, j) = acc[static_cast<std::size_t>(q * P_ + j)] / inv;
    return out;
  }

  // Same bag index sets, fitted on data where row l now holds (x_new, y_new).
  // Bags that never drew l are shared unchanged.
  BaggedEnsemble with_row_replaced(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                   Index l) const {
    std::vector<Bag> bags = bags_;
    for (auto& bag : bags) {
      if (!bag.contains(l)) continue;
      bag.model = std::make_shared<const BaseModel>(
          BaseModel::fit(base_, take_rows(X, bag.indices), take_rows(Y, bag.indices), constant_));
    }
    return BaggedEnsemble(base_, n_, m_, d_, P_, std::move(bags), constant_);
  }

 private:
  BaseKind base_ = BaseKind::one_nn;
  Index n_ = 0, m_ = 0, d_ = 0, P_ = 0;
  double constant_ = 0.0;
  std::vector<Bag> bags_;
};

// Bag b draws its subsample from rng.child("bag", b).
inline BaggedEnsemble fit_bagged(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, Index m,
                                 Index B, BaseKind base, const Rng& rng,
                                 double constant_value = 0.0) {
  const Index n = X.rows();
  if (Y.rows() != n) throw std::invalid_argument("fit_bagged: X and Y row counts differ");
  if (m < 1 || m > n) throw std::invalid_argument("fit_bagged: need 1 <= m <= n");
  if (B < 1) throw std::invalid_argument("fit_bagged: need B >= 1");
  if (!X.allFinite() || !Y.allFinite()) throw std::invalid_argument("fit_bagged: non-finite input");
  std::vector<Bag> bags(static_cast<std::size_t>(B));
  for (Index b = 0; b < B; ++b) {
    Rng bag_rng = rng.child("bag", static_cast<std::uint64_t>(b));
    auto& bag = bags[static_cast<std::size_t>(b)];
    bag.indices = subsample_without_replacement(n, m, bag_rng);
    bag.model = std::make_shared<const BaseModel>(
        BaseModel::fit(base, take_rows(X, bag.indices), take_rows(Y, bag.indices), constant_value));
  }
  return BaggedEnsemble(base, n, m, X.cols(), Y.cols(), std::move(bags), constant_value);
}

inline constexpr double kExactSubsetBudget = 1e6;

inline double binomial(Index n, Index k) {
  double c = 1.0;
  for (Index i = 1; i <= k; ++i) c = c * static_cast<double>(n - k + i) / static_cast<double>(i);
  return c;
}

// One bag per size-m subset, in lexicographic order: the B -> infinity limit.
inline BaggedEnsemble fit_bagged_exhaustive(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                            Index m, BaseKind base, double constant_value = 0.0) {
  const Index n = X.rows();
  if (m < 1 || m > n) throw std::invalid_argument("exact bagging: need 1 <= m <= n");
  if (binomial(n, m) > kExactSubsetBudget)
    throw ResourceError("exact bagging: C(n, m) exceeds the 1e6 subset budget");
  std::vector<Index> combo(static_cast<std::size_t>(m));
  std::iota(combo.begin(), combo.end(), Index{0});
  std::vector<Bag> bags;
  for (;;) {
    Bag bag;
    bag.indices = combo;
    bag.model = std::make_shared<const BaseModel>(
        BaseModel::fit(base, take_rows(X, combo), take_rows(Y, combo), constant_value));
    bags.push_back(std::move(bag));
    Index i = m - 1;
    while (i >= 0 && combo[static_cast<std::size_t>(i)] == n - m + i) --i;
    if (i < 0) break;
    ++combo[static_cast<std::size_t>(i)];
    for (Index j = i + 1; j < m; ++j)
      combo[static_cast<std::size_t>(j)] = combo[static_cast<std::size_t>(j - 1)] + 1;
  }
  return BaggedEnsemble(base, n, m, X.cols(), Y.cols(), std::move(bags), constant_value);
}

inline Eigen::VectorXd predict_bagged_exact(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                            Index m, BaseKind base, const Eigen::VectorXd& x) {
  return fit_bagged_exhaustive(X, Y, m, base).predict(x);
}

// Resolves m and B from the training size and fits the configured ensemble.
inline BaggedEnsemble fit_learner(const LearnerConfig& cfg, const Eigen::MatrixXd& X,
                                  const Eigen::MatrixXd& Y, const Rng& rng) {
  const Index n = X.rows();
  const Index m = cfg.m_rule.resolve(n);
  if (cfg.base == BaseKind::constant) {
    // Data-independent: a single bag is exact.
    return fit_bagged(X, Y, std::min(m, n), 1, BaseKind::constant, rng, cfg.constant_value);
  }
  if (cfg.b_rule.kind == BRule::Kind::exact) return fit_bagged_exhaustive(X, Y, m, cfg.base);
  return fit_bagged(X, Y, m, cfg.b_rule.resolve(n, m), cfg.base, rng);
}

}  // namespace sdml
