#include "adeid/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>

namespace adeid::eval {

namespace {

Matrix softmax_rows(const Matrix& z) {
  Matrix p(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    const auto e = (z.row(i).array() - m).exp();
    p.row(i) = e / e.sum();
  }
  return p;
}

std::vector<int> argmax_rows(const Matrix& z) {
  std::vector<int> out(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    Eigen::Index best = 0;
    z.row(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

void check_labels(const Matrix& x, const std::vector<int>& y, int n_classes) {
  if (static_cast<std::size_t>(x.rows()) != y.size()) fail(ErrorKind::Shape, "feature rows and labels differ in count");
  if (y.empty()) fail(ErrorKind::InvalidInput, "no training samples");
  if (n_classes < 1) fail(ErrorKind::InvalidConfig, "need at least one class");
  for (int v : y) {
    if (v < 0 || v >= n_classes) fail(ErrorKind::InvalidInput, "label out of range");
  }
}

Matrix take_rows(const Matrix& x, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

// Dense relabelling to 0..m-1 in ascending label order.
std::vector<int> compact(const std::vector<int>& labels, int& count) {
  std::map<int, int> ids;
  for (int v : labels) ids.emplace(v, 0);
  int next = 0;
  for (auto& [v, id] : ids) id = next++;
  count = next;
  std::vector<int> out;
  out.reserve(labels.size());
  for (int v : labels) out.push_back(ids[v]);
  return out;
}

struct Contingency {
  std::vector<std::vector<double>> n;  // [a][b]
  std::vector<double> a, b;
  double total = 0.0;
};

Contingency contingency(const std::vector<int>& x, const std::vector<int>& y) {
  if (x.size() != y.size()) fail(ErrorKind::Shape, "partitions differ in length");
  int na = 0, nb = 0;
  const auto ca = compact(x, na), cb = compact(y, nb);
  Contingency c;
  c.n.assign(static_cast<std::size_t>(na), std::vector<double>(static_cast<std::size_t>(nb), 0.0));
  c.a.assign(static_cast<std::size_t>(na), 0.0);
  c.b.assign(static_cast<std::size_t>(nb), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto i_a = static_cast<std::size_t>(ca[i]), i_b = static_cast<std::size_t>(cb[i]);
    c.n[i_a][i_b] += 1.0;
    c.a[i_a] += 1.0;
    c.b[i_b] += 1.0;
  }
  c.total = static_cast<double>(x.size());
  return c;
}

double comb2(double v) { return v * (v - 1.0) / 2.0; }

double entropy(const std::vector<double>& counts, double total) {
  double h = 0.0;
  for (double c : counts) {
    if (c > 0) h -= c / total * std::log(c / total);
  }
  return h;
}

}  // namespace

// -- metrics -------------------------------------------------------------------

MetricsReport metrics_report(const std::vector<int>& truth, const std::vector<int>& predicted) {
  if (truth.size() != predicted.size()) fail(ErrorKind::Shape, "truth and predictions differ in length");
  MetricsReport r;
  r.samples = truth.size();
  if (truth.empty()) return r;
  std::set<int> labels(truth.begin(), truth.end());
  labels.insert(predicted.begin(), predicted.end());
  r.classes.assign(labels.begin(), labels.end());

  const double n = static_cast<double>(truth.size());
  double correct = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) correct += truth[i] == predicted[i] ? 1.0 : 0.0;
  r.accuracy = correct / n;

  for (int c : r.classes) {
    double tp = 0, npred = 0, support = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      tp += truth[i] == c && predicted[i] == c ? 1 : 0;
      npred += predicted[i] == c ? 1 : 0;
      support += truth[i] == c ? 1 : 0;
    }
    const double p = npred > 0 ? tp / npred : 0.0;
    const double rc = support > 0 ? tp / support : 0.0;
    const double f = p + rc > 0 ? 2 * p * rc / (p + rc) : 0.0;
    r.macro_precision += p;
    r.macro_recall += rc;
    r.macro_f1 += f;
    r.weighted_precision += support * p / n;
    r.weighted_recall += support * rc / n;
    r.weighted_f1 += support * f / n;
  }
  const double m = static_cast<double>(r.classes.size());
  r.macro_precision /= m;
  r.macro_recall /= m;
  r.macro_f1 /= m;
  return r;
}

// -- gradient-boosted trees ------------------------------------------------------

namespace {

struct TreeBuilder {
  const Matrix& x;
  const std::vector<double>& g;
  const std::vector<double>& h;
  const GbdtParams& params;
  GradientBoostedTrees::Tree tree;

  int build(std::vector<std::size_t> rows, int depth) {
    double gs = 0.0, hs = 0.0;
    for (std::size_t i : rows) {
      gs += g[i];
      hs += h[i];
    }
    const int at = static_cast<int>(tree.size());
    tree.push_back({});
    tree[static_cast<std::size_t>(at)].value = -gs / (hs + params.lambda);
    if ((params.max_depth > 0 && depth >= params.max_depth) || rows.size() < 2) return at;

    const double parent = gs * gs / (hs + params.lambda);
    double best_gain = 1e-12;
    int best_feature = -1;
    double best_threshold = 0.0;
    std::vector<std::size_t> order = rows;
    for (Eigen::Index f = 0; f < x.cols(); ++f) {
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return x(static_cast<Eigen::Index>(a), f) < x(static_cast<Eigen::Index>(b), f);
      });
      double gl = 0.0, hl = 0.0;
      for (std::size_t j = 0; j + 1 < order.size(); ++j) {
        gl += g[order[j]];
        hl += h[order[j]];
        const double here = x(static_cast<Eigen::Index>(order[j]), f);
        const double next = x(static_cast<Eigen::Index>(order[j + 1]), f);
        if (!(here < next)) continue;
        const double hr = hs - hl;
        if (hl < params.min_child_weight || hr < params.min_child_weight) continue;
        const double gr = gs - gl;
        const double gain = gl * gl / (hl + params.lambda) + gr * gr / (hr + params.lambda) - parent;
        if (gain > best_gain) {
          best_gain = gain;
          best_feature = static_cast<int>(f);
          best_threshold = 0.5 * (here + next);
        }
      }
    }
    if (best_feature < 0) return at;

    std::vector<std::size_t> left, right;
    for (std::size_t i : rows) {
      (x(static_cast<Eigen::Index>(i), best_feature) < best_threshold ? left : right).push_back(i);
    }
    rows.clear();
    rows.shrink_to_fit();
    const int l = build(std::move(left), depth + 1);
    const int r = build(std::move(right), depth + 1);
    auto& node = tree[static_cast<std::size_t>(at)];
    node.feature = best_feature;
    node.threshold = best_threshold;
    node.left = l;
    node.right = r;
    return at;
  }
};

double tree_value(const GradientBoostedTrees::Tree& tree, const Matrix& x, Eigen::Index row) {
  int at = 0;
  while (tree[static_cast<std::size_t>(at)].feature >= 0) {
    const auto& n = tree[static_cast<std::size_t>(at)];
    at = x(row, n.feature) < n.threshold ? n.left : n.right;
  }
  return tree[static_cast<std::size_t>(at)].value;
}

double mean_log_loss(const Matrix& raw, const std::vector<int>& y) {
  const Matrix p = softmax_rows(raw);
  double loss = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    loss -= std::log(std::max(p(static_cast<Eigen::Index>(i), y[i]), 1e-300));
  }
  return loss / static_cast<double>(y.size());
}

}  // namespace

void GradientBoostedTrees::fit(const Matrix& x, const std::vector<int>& y, int n_classes, const GbdtParams& params) {
  check_labels(x, y, n_classes);
  if (params.n_estimators < 1 || params.learning_rate <= 0 || params.max_depth < 0 || params.lambda < 0 ||
      params.validation_fraction < 0 || params.validation_fraction >= 1) {
    fail(ErrorKind::InvalidConfig, "invalid boosting parameters");
  }
  n_classes_ = n_classes;
  learning_rate_ = params.learning_rate;
  trees_.clear();
  stopped_early_ = false;

  std::vector<std::size_t> fit_rows(y.size()), val_rows;
  std::iota(fit_rows.begin(), fit_rows.end(), std::size_t{0});
  if (params.validation_fraction > 0 && y.size() >= 5) {
    Rng rng(derive_seed(params.seed, "gbdt/validation"));
    rng.shuffle(fit_rows);
    auto n_val = static_cast<std::size_t>(std::llround(params.validation_fraction * static_cast<double>(y.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, y.size() - 1);
    val_rows.assign(fit_rows.begin(), fit_rows.begin() + static_cast<std::ptrdiff_t>(n_val));
    fit_rows.erase(fit_rows.begin(), fit_rows.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::sort(fit_rows.begin(), fit_rows.end());
    std::sort(val_rows.begin(), val_rows.end());
  }
  const Matrix xf = take_rows(x, fit_rows);
  const Matrix xv = take_rows(x, val_rows);
  std::vector<int> yf, yv;
  for (std::size_t i : fit_rows) yf.push_back(y[i]);
  for (std::size_t i : val_rows) yv.push_back(y[i]);

  Matrix raw_f = Matrix::Zero(xf.rows(), n_classes);
  Matrix raw_v = Matrix::Zero(xv.rows(), n_classes);
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_rounds = 0;
  int since = 0;
  std::vector<double> g(yf.size()), h(yf.size());
  for (int round = 0; round < params.n_estimators; ++round) {
    const Matrix p = softmax_rows(raw_f);
    std::vector<Tree> this_round;
    for (int c = 0; c < n_classes; ++c) {
      for (std::size_t i = 0; i < yf.size(); ++i) {
        const double pc = p(static_cast<Eigen::Index>(i), c);
        g[i] = pc - (yf[i] == c ? 1.0 : 0.0);
        h[i] = std::max(pc * (1.0 - pc), 1e-16);
      }
      std::vector<std::size_t> all(yf.size());
      std::iota(all.begin(), all.end(), std::size_t{0});
      TreeBuilder b{xf, g, h, params, {}};
      b.build(std::move(all), 0);
      for (Eigen::Index i = 0; i < xf.rows(); ++i) raw_f(i, c) += learning_rate_ * tree_value(b.tree, xf, i);
      for (Eigen::Index i = 0; i < xv.rows(); ++i) raw_v(i, c) += learning_rate_ * tree_value(b.tree, xv, i);
      this_round.push_back(std::move(b.tree));
    }
    trees_.push_back(std::move(this_round));
    if (yv.empty()) continue;
    const double loss = mean_log_loss(raw_v, yv);
    if (loss < best - 1e-12) {
      best = loss;
      best_rounds = trees_.size();
      since = 0;
    } else if (++since >= params.early_stopping_rounds) {
      stopped_early_ = true;
      break;
    }
  }
  if (!yv.empty()) trees_.resize(best_rounds);
}

Matrix GradientBoostedTrees::predict_raw(const Matrix& x) const {
  if (n_classes_ == 0) fail(ErrorKind::Untrained, "boosted trees have not been fitted");
  Matrix raw = Matrix::Zero(x.rows(), n_classes_);
  for (const auto& round : trees_)
    for (int c = 0; c < n_classes_; ++c)
      for (Eigen::Index i = 0; i < x.rows(); ++i)
        raw(i, c) += learning_rate_ * tree_value(round[static_cast<std::size_t>(c)], x, i);
  return raw;
}

Matrix GradientBoostedTrees::predict_proba(const Matrix& x) const { return softmax_rows(predict_raw(x)); }

std::vector<int> GradientBoostedTrees::predict(const Matrix& x) const { return argmax_rows(predict_raw(x)); }

// -- multinomial logistic --------------------------------------------------------

void SoftmaxRegression::fit(const Matrix& x, const std::vector<int>& y, int n_classes, const LogisticParams& params) {
  check_labels(x, y, n_classes);
  if (params.learning_rate <= 0 || params.l2 < 0 || params.max_iterations < 0) {
    fail(ErrorKind::InvalidConfig, "invalid logistic parameters");
  }
  params_ = params;
  n_classes_ = n_classes;
  mean_ = x.colwise().mean().transpose();
  scale_ = ((x.rowwise() - mean_.transpose()).array().square().colwise().mean().sqrt()).matrix().transpose();
  for (Eigen::Index j = 0; j < scale_.size(); ++j) {
    if (!(scale_(j) > 1e-12)) scale_(j) = 1.0;
  }
  w_ = Matrix::Zero(x.cols() + 1, n_classes);
  m_ = Matrix::Zero(w_.rows(), w_.cols());
  v_ = Matrix::Zero(w_.rows(), w_.cols());
  iterations_ = 0;
  step(x, y, params.max_iterations);
}

Matrix SoftmaxRegression::standardise(const Matrix& x) const {
  if (x.cols() != mean_.size()) fail(ErrorKind::Shape, "feature width differs from the fitted model");
  Matrix a(x.rows(), x.cols() + 1);
  a.leftCols(x.cols()) = ((x.rowwise() - mean_.transpose()).array().rowwise() / scale_.transpose().array()).matrix();
  a.col(x.cols()).setOnes();
  return a;
}

void SoftmaxRegression::step(const Matrix& x, const std::vector<int>& y, int iterations) {
  if (n_classes_ == 0) fail(ErrorKind::Untrained, "logistic model has not been fitted");
  check_labels(x, y, n_classes_);
  const Matrix a = standardise(x);
  const double n = static_cast<double>(y.size());
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int it = 0; it < iterations; ++it) {
    Matrix p = softmax_rows(a * w_);
    for (std::size_t i = 0; i < y.size(); ++i) p(static_cast<Eigen::Index>(i), y[i]) -= 1.0;
    Matrix grad = a.transpose() * p / n;
    grad.topRows(w_.rows() - 1) += params_.l2 * w_.topRows(w_.rows() - 1);
    ++iterations_;
    m_ = b1 * m_ + (1 - b1) * grad;
    v_ = b2 * v_ + (1 - b2) * grad.cwiseProduct(grad);
    const double c1 = 1 - std::pow(b1, iterations_), c2 = 1 - std::pow(b2, iterations_);
    w_.array() -= params_.learning_rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps);
  }
}

Matrix SoftmaxRegression::decision(const Matrix& x) const {
  if (n_classes_ == 0) fail(ErrorKind::Untrained, "logistic model has not been fitted");
  return standardise(x) * w_;
}

Matrix SoftmaxRegression::predict_proba(const Matrix& x) const { return softmax_rows(decision(x)); }

std::vector<int> SoftmaxRegression::predict(const Matrix& x) const { return argmax_rows(decision(x)); }

// -- clustering ------------------------------------------------------------------

namespace {

int nearest(const Matrix& centroids, const Matrix& x, Eigen::Index row, double* dist = nullptr) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    const double d = (x.row(row) - centroids.row(c)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  if (dist) *dist = best_d;
  return best;
}

}  // namespace

void KMeans::fit(const Matrix& x, int k, std::uint64_t seed, int max_iterations) {
  if (k < 1) fail(ErrorKind::InvalidConfig, "k-means needs k >= 1");
  if (x.rows() < k) fail(ErrorKind::InvalidInput, "fewer samples than clusters");
  if (max_iterations < 1) fail(ErrorKind::InvalidConfig, "k-means needs at least one iteration");
  Rng rng(derive_seed(seed, "kmeans"));
  const auto n = static_cast<std::size_t>(x.rows());
  centroids_ = Matrix(k, x.cols());
  centroids_.row(0) = x.row(static_cast<Eigen::Index>(rng.index(n)));
  std::vector<double> d2(n);
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double d = 0.0;
      nearest(centroids_.topRows(c), x, static_cast<Eigen::Index>(i), &d);
      d2[i] = d;
      total += d;
    }
    std::size_t pick = n - 1;
    if (total > 0) {
      const double u = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (u < acc) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.index(n);
    }
    centroids_.row(c) = x.row(static_cast<Eigen::Index>(pick));
  }

  reseeded_ = false;
  std::vector<int> labels(n, -1), previous;
  for (iterations_ = 1; iterations_ <= max_iterations; ++iterations_) {
    std::vector<double> dist(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = nearest(centroids_, x, static_cast<Eigen::Index>(i), &dist[i]);
    if (labels == previous) break;
    previous = labels;
    Matrix sums = Matrix::Zero(k, x.cols());
    std::vector<double> counts(static_cast<std::size_t>(k), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(labels[i]) += x.row(static_cast<Eigen::Index>(i));
      counts[static_cast<std::size_t>(labels[i])] += 1.0;
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        centroids_.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
      } else if (!reseeded_) {
        const auto far = static_cast<Eigen::Index>(std::max_element(dist.begin(), dist.end()) - dist.begin());
        centroids_.row(c) = x.row(far);
        dist[static_cast<std::size_t>(far)] = 0.0;
        reseeded_ = true;
      }
    }
  }
  iterations_ = std::min(iterations_, max_iterations);
}

std::vector<int> KMeans::predict(const Matrix& x) const {
  if (centroids_.rows() == 0) fail(ErrorKind::Untrained, "k-means has not been fitted");
  if (x.cols() != centroids_.cols()) fail(ErrorKind::Shape, "feature width differs from the centroids");
  std::vector<int> out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) out[static_cast<std::size_t>(i)] = nearest(centroids_, x, i);
  return out;
}

std::vector<int> hungarian(const Matrix& cost) {
  const auto n = static_cast<std::size_t>(cost.rows()), m = static_cast<std::size_t>(cost.cols());
  if (n > m) fail(ErrorKind::Shape, "assignment needs rows <= columns");
  constexpr double inf = std::numeric_limits<double>::infinity();
  // Potentials formulation, 1-based with a virtual column 0.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(n, -1);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] != 0) out[p[j] - 1] = static_cast<int>(j - 1);
  }
  return out;
}

std::vector<int> match_labels(const std::vector<int>& reference, const std::vector<int>& predicted) {
  if (reference.size() != predicted.size()) fail(ErrorKind::Shape, "label vectors differ in length");
  if (reference.empty()) return {};
  const std::set<int> ref_set(reference.begin(), reference.end()), pred_set(predicted.begin(), predicted.end());
  const std::vector<int> ref(ref_set.begin(), ref_set.end()), pred(pred_set.begin(), pred_set.end());
  const std::size_t s = std::max(ref.size(), pred.size());
  Matrix cost = Matrix::Zero(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(s));
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const auto r = std::lower_bound(ref.begin(), ref.end(), reference[i]) - ref.begin();
    const auto p = std::lower_bound(pred.begin(), pred.end(), predicted[i]) - pred.begin();
    cost(p, r) -= 1.0;
  }
  const auto assign = hungarian(cost);
  // Clusters left without a reference partner get fresh labels.
  int fresh = ref.back() + 1;
  std::map<int, int> relabel;
  for (std::size_t p = 0; p < pred.size(); ++p) {
    const auto col = static_cast<std::size_t>(assign[p]);
    relabel[pred[p]] = col < ref.size() ? ref[col] : fresh++;
  }
  std::vector<int> out;
  out.reserve(predicted.size());
  for (int v : predicted) out.push_back(relabel[v]);
  return out;
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  const auto c = contingency(a, b);
  if (c.total < 2) fail(ErrorKind::InvalidInput, "partition agreement needs at least two samples");
  double index = 0.0, sa = 0.0, sb = 0.0;
  for (const auto& row : c.n)
    for (double v : row) index += comb2(v);
  for (double v : c.a) sa += comb2(v);
  for (double v : c.b) sb += comb2(v);
  const double expected = sa * sb / comb2(c.total);
  const double maximum = 0.5 * (sa + sb);
  // Both trivial (one cluster, or all singletons): identical partitions.
  if (maximum == expected) return 1.0;
  return (index - expected) / (maximum - expected);
}

double adjusted_mutual_information(const std::vector<int>& a, const std::vector<int>& b) {
  const auto c = contingency(a, b);
  if (c.total < 2) fail(ErrorKind::InvalidInput, "partition agreement needs at least two samples");
  if (c.a.size() == 1 && c.b.size() == 1) return 1.0;
  const double n = c.total;
  double mi = 0.0;
  for (std::size_t i = 0; i < c.a.size(); ++i)
    for (std::size_t j = 0; j < c.b.size(); ++j) {
      const double v = c.n[i][j];
      if (v > 0) mi += v / n * std::log(n * v / (c.a[i] * c.b[j]));
    }

  double emi = 0.0;
  const double lg_n = std::lgamma(n + 1);
  for (double ai : c.a)
    for (double bj : c.b) {
      const double lo = std::max(1.0, ai + bj - n), hi = std::min(ai, bj);
      const double fixed = std::lgamma(ai + 1) + std::lgamma(bj + 1) + std::lgamma(n - ai + 1) +
                           std::lgamma(n - bj + 1) - lg_n;
      for (double nij = lo; nij <= hi; nij += 1.0) {
        const double log_p = fixed - std::lgamma(nij + 1) - std::lgamma(ai - nij + 1) - std::lgamma(bj - nij + 1) -
                             std::lgamma(n - ai - bj + nij + 1);
        emi += nij / n * std::log(n * nij / (ai * bj)) * std::exp(log_p);
      }
    }

  const double norm = std::max(entropy(c.a, n), entropy(c.b, n));
  double denom = norm - emi;
  constexpr double eps = std::numeric_limits<double>::epsilon();
  denom = denom < 0 ? std::min(denom, -eps) : std::max(denom, eps);
  return (mi - emi) / denom;
}

Agreement partition_agreement_scores(const std::vector<int>& a, const std::vector<int>& b) {
  return {adjusted_rand_index(a, b), adjusted_mutual_information(a, b)};
}

// -- document vectors -----------------------------------------------------------

DocumentVectors document_vectors(const EmbeddedCorpus& corpus) {
  DocumentVectors out;
  out.x = Matrix::Zero(static_cast<Eigen::Index>(corpus.documents.size()), corpus.dim);
  for (std::size_t i = 0; i < corpus.documents.size(); ++i) {
    const auto& d = corpus.documents[i];
    out.persons.push_back(d.person_id);
    if (d.sub_sentences.empty()) {
      ++out.empty;
      continue;
    }
    for (const auto& s : d.sub_sentences) {
      if (static_cast<int>(s.embedding.size()) != corpus.dim) fail(ErrorKind::Shape, "embedding width mismatch in " + d.doc_id);
      for (int j = 0; j < corpus.dim; ++j) out.x(static_cast<Eigen::Index>(i), j) += s.embedding[static_cast<std::size_t>(j)];
    }
    out.x.row(static_cast<Eigen::Index>(i)) /= static_cast<double>(d.sub_sentences.size());
  }
  return out;
}

DocumentVectors summary_vectors(const std::vector<aks::DeidentifiedSummary>& summaries, const aks::AspectPool& pool) {
  DocumentVectors out;
  out.x = Matrix::Zero(static_cast<Eigen::Index>(summaries.size()), pool.dim());
  for (std::size_t i = 0; i < summaries.size(); ++i) {
    const auto& s = summaries[i];
    out.persons.push_back(s.person_id);
    if (s.replacements.empty()) {
      ++out.empty;
      continue;
    }
    for (const auto& r : s.replacements) {
      if (r.entry >= pool.size()) fail(ErrorKind::InvalidInput, "summary references a missing pool entry");
      const auto& e = pool.entries()[r.entry].embedding;
      for (int j = 0; j < pool.dim(); ++j) out.x(static_cast<Eigen::Index>(i), j) += e[static_cast<std::size_t>(j)];
    }
    out.x.row(static_cast<Eigen::Index>(i)) /= static_cast<double>(s.replacements.size());
  }
  return out;
}

std::vector<int> label_vector(const EmbeddedCorpus& corpus, const std::vector<std::string>& persons) {
  std::vector<int> out;
  out.reserve(persons.size());
  for (const auto& p : persons) {
    const auto it = corpus.labels.find(p);
    if (it == corpus.labels.end()) fail(ErrorKind::MissingLabel, "no label for person " + p);
    out.push_back(class_index(it->second));
  }
  return out;
}

// -- protocols ------------------------------------------------------------------

const char* to_string(ClassifierKind kind) { return kind == ClassifierKind::Gbdt ? "gbdt" : "logistic"; }

ClassifierKind classifier_kind_from_string(const std::string& s) {
  if (s == "gbdt") return ClassifierKind::Gbdt;
  if (s == "logistic") return ClassifierKind::Logistic;
  fail(ErrorKind::InvalidConfig, "unknown classifier '" + s + "'");
}

UtilityResult evaluate_utility(const Matrix& train_x, const std::vector<int>& train_y, const Matrix& test_x,
                               const std::vector<int>& test_y, ClassifierKind kind, std::uint64_t seed,
                               const GbdtParams& gbdt) {
  UtilityResult out;
  out.classifier = kind;
  for (int c = 0; c < kNumGradeClasses; ++c) {
    if (std::find(train_y.begin(), train_y.end(), c) == train_y.end()) out.absent_training_classes.push_back(c);
  }
  std::vector<int> predicted;
  if (kind == ClassifierKind::Gbdt) {
    GbdtParams p = gbdt;
    p.seed = seed;
    GradientBoostedTrees model;
    model.fit(train_x, train_y, kNumGradeClasses, p);
    out.rounds = model.rounds();
    predicted = model.predict(test_x);
  } else {
    SoftmaxRegression model;
    model.fit(train_x, train_y, kNumGradeClasses, {});
    out.rounds = model.iterations();
    predicted = model.predict(test_x);
  }
  out.metrics = metrics_report(test_y, predicted);
  return out;
}

MetricsReport clustering_fidelity(const Matrix& train_x, const Matrix& test_a, const Matrix& test_b, int k,
                                  std::uint64_t seed) {
  if (test_a.rows() != test_b.rows()) fail(ErrorKind::Shape, "paired test sets differ in size");
  if (k < 2) fail(ErrorKind::InvalidConfig, "clustering fidelity needs k >= 2");
  KMeans km;
  km.fit(train_x, k, seed);
  const auto a = km.predict(test_a);
  const auto b = match_labels(a, km.predict(test_b));
  return metrics_report(a, b);
}

Vector sampled_summary(const SensitiveDocument& doc, double ratio, Rng& rng) {
  if (doc.sub_sentences.empty()) fail(ErrorKind::DegenerateDocument, "cannot sample from empty document " + doc.doc_id);
  const std::size_t n = doc.sub_sentences.size();
  const auto m = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9)), 1, n);
  const auto dim = static_cast<Eigen::Index>(doc.sub_sentences.front().embedding.size());
  Vector v = Vector::Zero(dim);
  for (std::size_t i : rng.sample_without_replacement(n, m)) {
    const auto& e = doc.sub_sentences[i].embedding;
    for (Eigen::Index j = 0; j < dim; ++j) v(j) += e[static_cast<std::size_t>(j)];
  }
  return v / static_cast<double>(m);
}

void ReidAttacker::train(const EmbeddedCorpus& original, const ReidSettings& settings, std::uint64_t seed) {
  if (settings.sample_ratio <= 0 || settings.sample_ratio > 1 || settings.train_summaries_per_person < 1 ||
      settings.held_out_per_person < 1 || settings.check_every < 1 || settings.max_iterations < 1) {
    fail(ErrorKind::InvalidConfig, "invalid re-identification settings");
  }
  if (original.documents.size() < 2) fail(ErrorKind::InvalidInput, "re-identification needs at least two persons");
  settings_ = settings;
  persons_.clear();
  Rng rng(derive_seed(seed, "reid/train"));
  const auto persons = static_cast<int>(original.documents.size());
  const int per = settings.train_summaries_per_person, held = settings.held_out_per_person;
  Matrix xt(persons * per, original.dim), xh(persons * held, original.dim);
  std::vector<int> yt, yh;
  for (int p = 0; p < persons; ++p) {
    const auto& d = original.documents[static_cast<std::size_t>(p)];
    persons_.push_back(d.person_id);
    for (int i = 0; i < per; ++i) {
      xt.row(p * per + i) = sampled_summary(d, settings.sample_ratio, rng).transpose();
      yt.push_back(p);
    }
    for (int i = 0; i < held; ++i) {
      xh.row(p * held + i) = sampled_summary(d, settings.sample_ratio, rng).transpose();
      yh.push_back(p);
    }
  }
  LogisticParams lp = settings.logistic;
  lp.max_iterations = 0;
  model_.fit(xt, yt, persons, lp);
  reached_target_ = false;
  while (model_.iterations() < settings.max_iterations) {
    model_.step(xt, yt, std::min(settings.check_every, settings.max_iterations - model_.iterations()));
    held_out_accuracy_ = metrics_report(yh, model_.predict(xh)).accuracy;
    if (held_out_accuracy_ >= settings.target_accuracy) {
      reached_target_ = true;
      break;
    }
  }
}

ReidReport ReidAttacker::rank(const Matrix& x, const std::vector<int>& truth, std::size_t empty) const {
  const Matrix s = model_.decision(x);
  ReidReport r;
  r.queries = truth.size();
  r.empty_queries = empty;
  if (truth.empty()) return r;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    const double own = s(row, truth[i]);
    int position = 1;
    for (Eigen::Index c = 0; c < s.cols(); ++c) {
      const double v = s(row, c);
      if (v > own || (v == own && c < truth[i])) ++position;
    }
    r.top1 += position <= 1 ? 1 : 0;
    r.top5 += position <= 5 ? 1 : 0;
    r.top10 += position <= 10 ? 1 : 0;
    r.top100 += position <= 100 ? 1 : 0;
  }
  const double n = static_cast<double>(truth.size());
  r.top1 /= n;
  r.top5 /= n;
  r.top10 /= n;
  r.top100 /= n;
  return r;
}

ReidReport ReidAttacker::score_original(const EmbeddedCorpus& original, std::uint64_t seed) const {
  if (persons_.empty()) fail(ErrorKind::Untrained, "attacker has not been trained");
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < persons_.size(); ++i) index[persons_[i]] = static_cast<int>(i);
  Rng rng(derive_seed(seed, "reid/probe"));
  std::vector<Vector> rows;
  std::vector<int> truth;
  for (const auto& d : original.documents) {
    const auto it = index.find(d.person_id);
    if (it == index.end()) fail(ErrorKind::InvalidInput, "probe person unknown to the attacker: " + d.person_id);
    for (int i = 0; i < settings_.probe_per_person; ++i) {
      rows.push_back(sampled_summary(d, settings_.sample_ratio, rng));
      truth.push_back(it->second);
    }
  }
  Matrix x(static_cast<Eigen::Index>(rows.size()), original.dim);
  for (std::size_t i = 0; i < rows.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return rank(x, truth, 0);
}

ReidReport ReidAttacker::score(const DocumentVectors& queries) const {
  if (persons_.empty()) fail(ErrorKind::Untrained, "attacker has not been trained");
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < persons_.size(); ++i) index[persons_[i]] = static_cast<int>(i);
  std::vector<int> truth;
  for (const auto& p : queries.persons) {
    const auto it = index.find(p);
    if (it == index.end()) fail(ErrorKind::InvalidInput, "query person unknown to the attacker: " + p);
    truth.push_back(it->second);
  }
  return rank(queries.x, truth, queries.empty);
}

}  // namespace adeid::eval
