#include <algorithm>
#include <numeric>
#include <set>

#include "adeid/eval.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace adeid;
using namespace adeid::eval;

namespace {

std::vector<int> random_labels(Rng& rng, std::size_t n, int classes) {
  std::vector<int> v(n);
  for (auto& x : v) x = static_cast<int>(rng.index(static_cast<std::size_t>(classes)));
  return v;
}

// Four gaussian blobs, balanced labels.
void blobs(Rng& rng, std::size_t per_class, double spread, Matrix& x, std::vector<int>& y) {
  const int dim = 5;
  x = Matrix(static_cast<Eigen::Index>(4 * per_class), dim);
  y.clear();
  for (int c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      const auto row = static_cast<Eigen::Index>(y.size());
      for (int j = 0; j < dim; ++j) x(row, j) = rng.normal() * spread + (j == c ? 3.0 : 0.0);
      y.push_back(c);
    }
}

double accuracy(const std::vector<int>& a, const std::vector<int>& b) {
  double hit = 0;
  for (std::size_t i = 0; i < a.size(); ++i) hit += a[i] == b[i] ? 1 : 0;
  return hit / static_cast<double>(a.size());
}

// Pair counting, no contingency marginals.
double ari_pairs(const std::vector<int>& a, const std::vector<int>& b) {
  double ss = 0, sd = 0, ds = 0, dd = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const bool sa = a[i] == a[j], sb = b[i] == b[j];
      (sa ? (sb ? ss : sd) : (sb ? ds : dd)) += 1;
    }
  const double denom = (ss + sd) * (sd + dd) + (ss + ds) * (ds + dd);
  return denom == 0 ? 1.0 : 2 * (ss * dd - sd * ds) / denom;
}

double mutual_information(const std::vector<int>& a, const std::vector<int>& b) {
  const double n = static_cast<double>(a.size());
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> pa, pb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1;
    pa[a[i]] += 1;
    pb[b[i]] += 1;
  }
  double mi = 0;
  for (const auto& [k, v] : joint) mi += v / n * std::log(n * v / (pa[k.first] * pb[k.second]));
  return mi;
}

double label_entropy(const std::vector<int>& a) {
  std::map<int, double> c;
  for (int v : a) c[v] += 1;
  double h = 0;
  for (const auto& [k, v] : c) h -= v / static_cast<double>(a.size()) * std::log(v / static_cast<double>(a.size()));
  return h;
}

// Expected MI by averaging over every permutation of `b`.
double ami_by_permutation(const std::vector<int>& a, std::vector<int> b) {
  std::vector<std::size_t> perm(b.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  double total = 0, count = 0;
  do {
    std::vector<int> shuffled(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) shuffled[i] = b[perm[i]];
    total += mutual_information(a, shuffled);
    count += 1;
  } while (std::next_permutation(perm.begin(), perm.end()));
  const double emi = total / count;
  return (mutual_information(a, b) - emi) / (std::max(label_entropy(a), label_entropy(b)) - emi);
}

double assignment_cost(const Matrix& cost, const std::vector<int>& cols) {
  double c = 0;
  for (std::size_t i = 0; i < cols.size(); ++i) c += cost(static_cast<Eigen::Index>(i), cols[i]);
  return c;
}

EmbeddedCorpus tiny_corpus(int persons, int subs, int dim, std::uint64_t seed) {
  Rng rng(seed);
  EmbeddedCorpus c;
  c.dim = dim;
  for (int p = 0; p < persons; ++p) {
    const std::string id = "p" + std::to_string(p);
    SensitiveDocument d{"d" + std::to_string(p), id, {}};
    const auto centre = testing::random_unit_rows(rng, 1, dim);
    for (int s = 0; s < subs; ++s) {
      std::vector<float> e;
      for (int j = 0; j < dim; ++j) e.push_back(static_cast<float>(centre(0, j) + 0.3 * rng.normal()));
      d.sub_sentences.push_back({s, id + "/" + std::to_string(s), e, Source::Sensitive});
    }
    c.documents.push_back(d);
    c.labels[id] = class_from_index(p % 4);
  }
  return c;
}

}  // namespace

TEST_CASE("metrics report conventions") {
  const auto r = metrics_report({0, 0, 1, 1, 2}, {0, 1, 1, 1, 3});
  CHECK(r.accuracy == doctest::Approx(0.6));
  CHECK(r.classes == std::vector<int>{0, 1, 2, 3});
  // class 0: p 1 r .5; class 1: p 2/3 r 1; classes 2 and 3 score zero
  CHECK(r.macro_precision == doctest::Approx((1.0 + 2.0 / 3.0) / 4));
  CHECK(r.macro_recall == doctest::Approx(1.5 / 4));
  CHECK(r.weighted_precision == doctest::Approx((2 * 1.0 + 2 * 2.0 / 3.0) / 5));

  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.index(60);
    const auto t = random_labels(rng, n, 5), p = random_labels(rng, n, 5);
    const auto m = metrics_report(t, p);
    CHECK(std::abs(m.weighted_recall - m.accuracy) < 1e-9);
    CHECK(m.macro_f1 >= 0.0);
    CHECK(m.macro_f1 <= 1.0);
  }
  CHECK(metrics_report(std::vector<int>{2, 1}, std::vector<int>{2, 1}).macro_f1 == 1.0);
  CHECK_THROWS_AS(metrics_report({1}, {1, 2}), Error);
}

TEST_CASE("boosted trees") {
  Rng rng(10);
  SUBCASE("unbounded depth memorises arbitrary labels") {
    const Matrix x = testing::random_unit_rows(rng, 120, 6);
    const auto y = random_labels(rng, 120, 4);
    GbdtParams p;
    p.max_depth = 0;
    p.validation_fraction = 0;
    p.min_child_weight = 0;
    GradientBoostedTrees m;
    m.fit(x, y, 4, p);
    CHECK(m.rounds() == 100);
    CHECK(accuracy(m.predict(x), y) >= 0.95);
  }
  SUBCASE("learns separable blobs and stays at chance on shuffled labels") {
    Matrix x, xt;
    std::vector<int> y, yt;
    blobs(rng, 50, 0.5, x, y);
    blobs(rng, 50, 0.5, xt, yt);
    GradientBoostedTrees m;
    m.fit(x, y, 4, {});
    CHECK(accuracy(m.predict(xt), yt) >= 0.9);
    CHECK(m.rounds() <= 100);

    auto shuffled = y;
    rng.shuffle(shuffled);
    GradientBoostedTrees noise;
    noise.fit(x, shuffled, 4, {});
    // 200 balanced test points, chance 0.25, three standard errors
    CHECK(std::abs(accuracy(noise.predict(xt), yt) - 0.25) < 3 * std::sqrt(0.25 * 0.75 / 200));
  }
  SUBCASE("deterministic and probabilities normalised") {
    Matrix x;
    std::vector<int> y;
    blobs(rng, 20, 1.0, x, y);
    GradientBoostedTrees a, b;
    a.fit(x, y, 4, {});
    b.fit(x, y, 4, {});
    CHECK(a.predict_raw(x) == b.predict_raw(x));
    const Matrix p = a.predict_proba(x);
    for (Eigen::Index i = 0; i < p.rows(); ++i) CHECK(p.row(i).sum() == doctest::Approx(1.0));
    GbdtParams bad;
    bad.n_estimators = 0;
    CHECK_THROWS_AS(a.fit(x, y, 4, bad), Error);
    CHECK_THROWS_AS(GradientBoostedTrees{}.predict(x), Error);
  }
}

TEST_CASE("softmax regression") {
  Rng rng(2);
  Matrix x, xt;
  std::vector<int> y, yt;
  blobs(rng, 40, 0.5, x, y);
  blobs(rng, 40, 0.5, xt, yt);
  SoftmaxRegression m;
  m.fit(x, y, 4, {});
  CHECK(m.iterations() == 500);
  CHECK(accuracy(m.predict(xt), yt) >= 0.95);
  SoftmaxRegression again;
  again.fit(x, y, 4, {});
  CHECK(m.decision(xt) == again.decision(xt));
  m.step(x, y, 10);
  CHECK(m.iterations() == 510);
  CHECK_THROWS_AS(m.predict(Matrix::Zero(2, 3)), Error);
}

TEST_CASE("k-means") {
  Rng rng(6);
  Matrix x;
  std::vector<int> y;
  blobs(rng, 30, 0.2, x, y);
  KMeans km;
  km.fit(x, 4, 1);
  const auto labels = km.predict(x);
  CHECK(adjusted_rand_index(labels, y) == doctest::Approx(1.0));
  CHECK(km.iterations() <= 100);
  KMeans again;
  again.fit(x, 4, 1);
  CHECK(again.centroids() == km.centroids());
  CHECK_THROWS_AS(km.fit(x.topRows(3), 4, 1), Error);

  // Ten copies of one point and a single outlier: seeding runs out of
  // distinct points and a cluster starts empty.
  Matrix dup = Matrix::Zero(11, 2);
  dup(10, 0) = 5.0;
  KMeans d;
  d.fit(dup, 3, 3);
  CHECK(d.reseeded());
  for (int l : d.predict(dup)) CHECK((l >= 0 && l < 3));
}

TEST_CASE("hungarian matches brute force") {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.index(5));
    const int m = n + static_cast<int>(rng.index(3));
    Matrix cost(n, m);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) cost(i, j) = static_cast<double>(rng.index(10)) - 5.0;
    const auto got = hungarian(cost);
    CHECK(std::set<int>(got.begin(), got.end()).size() == static_cast<std::size_t>(n));
    std::vector<int> cols(static_cast<std::size_t>(m));
    std::iota(cols.begin(), cols.end(), 0);
    double best = 1e300;
    do {
      best = std::min(best, assignment_cost(cost, std::vector<int>(cols.begin(), cols.begin() + n)));
    } while (std::next_permutation(cols.begin(), cols.end()));
    CHECK(assignment_cost(cost, got) == best);
  }
}

TEST_CASE("match_labels undoes a relabelling") {
  Rng rng(8);
  const auto ref = random_labels(rng, 100, 6);
  const std::vector<int> perm = {3, 5, 0, 1, 4, 2};
  std::vector<int> renamed;
  for (int v : ref) renamed.push_back(perm[static_cast<std::size_t>(v)] + 10);
  CHECK(match_labels(ref, renamed) == ref);
  // more predicted clusters than reference ones
  const auto extra = match_labels({0, 0, 1, 1}, {7, 8, 9, 9});
  CHECK(extra[2] == 1);
  CHECK(extra[3] == 1);
  CHECK(extra[0] != extra[1]);
}

TEST_CASE("partition agreement") {
  Rng rng(21);
  SUBCASE("identical partitions") {
    for (int trial = 0; trial < 20; ++trial) {
      const auto a = random_labels(rng, 50, 2 + static_cast<int>(rng.index(6)));
      auto renamed = a;
      for (auto& v : renamed) v = 100 - v;
      CHECK(adjusted_rand_index(a, renamed) == doctest::Approx(1.0));
      CHECK(adjusted_mutual_information(a, renamed) == doctest::Approx(1.0));
    }
    CHECK(adjusted_mutual_information({1, 1, 1}, {4, 4, 4}) == 1.0);
    CHECK(adjusted_rand_index({1, 1, 1}, {4, 4, 4}) == 1.0);
    CHECK_THROWS_AS(partition_agreement_scores({1}, {1}), Error);
    CHECK_THROWS_AS(partition_agreement_scores({1, 2}, {1}), Error);
  }
  SUBCASE("pair-counting oracle and symmetry") {
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t n = 2 + rng.index(40);
      const auto a = random_labels(rng, n, 1 + static_cast<int>(rng.index(5)));
      const auto b = random_labels(rng, n, 1 + static_cast<int>(rng.index(5)));
      CHECK(adjusted_rand_index(a, b) == doctest::Approx(ari_pairs(a, b)).epsilon(1e-9));
      CHECK(adjusted_rand_index(a, b) == doctest::Approx(adjusted_rand_index(b, a)).epsilon(1e-12));
      CHECK(adjusted_mutual_information(a, b) == doctest::Approx(adjusted_mutual_information(b, a)).epsilon(1e-9));
    }
  }
  SUBCASE("expected mutual information by enumerating permutations") {
    for (int trial = 0; trial < 25; ++trial) {
      const std::size_t n = 3 + rng.index(5);
      auto a = random_labels(rng, n, 3), b = random_labels(rng, n, 3);
      if (std::set<int>(a.begin(), a.end()).size() < 2 || std::set<int>(b.begin(), b.end()).size() < 2) continue;
      CHECK(adjusted_mutual_information(a, b) == doctest::Approx(ami_by_permutation(a, b)).epsilon(1e-9));
    }
  }
  SUBCASE("independent partitions") {
    for (int trial = 0; trial < 5; ++trial) {
      const auto a = random_labels(rng, 1000, 8), b = random_labels(rng, 1000, 8);
      const auto s = partition_agreement_scores(a, b);
      CHECK(std::abs(s.ari) < 0.05);
      CHECK(std::abs(s.ami) < 0.05);
    }
  }
}

TEST_CASE("document and summary vectors") {
  auto corpus = tiny_corpus(3, 4, 2, 1);
  corpus.documents[2].sub_sentences.clear();
  const auto v = document_vectors(corpus);
  CHECK(v.empty == 1);
  CHECK(v.x.row(2).isZero());
  double mean0 = 0;
  for (const auto& s : corpus.documents[0].sub_sentences) mean0 += s.embedding[1];
  CHECK(v.x(0, 1) == doctest::Approx(mean0 / 4));
  CHECK(label_vector(corpus, v.persons) == std::vector<int>{0, 1, 2});
  CHECK_THROWS_AS(label_vector(corpus, {"nobody"}), Error);

  const aks::AspectPool pool(1, 2,
                             {{"x", "q", 0, "a", {1.0f, 0.0f}, 0, GradeClass::A},
                              {"x", "q", 1, "b", {0.0f, 3.0f}, 0, GradeClass::A}});
  aks::DeidentifiedSummary s{"d0", "p0", GradeClass::A, {}, ""};
  s.replacements.push_back({0, 0, "x", 0, "q", 0, 0, {}, false, false});
  s.replacements.push_back({1, 1, "x", 1, "q", 0, 0, {}, false, false});
  const auto sv = summary_vectors({s, aks::DeidentifiedSummary{"d1", "p1", GradeClass::F, {}, ""}}, pool);
  CHECK(sv.x(0, 0) == doctest::Approx(0.5));
  CHECK(sv.x(0, 1) == doctest::Approx(1.5));
  CHECK(sv.empty == 1);
}

TEST_CASE("utility and fidelity protocols") {
  Rng rng(30);
  Matrix x, xt;
  std::vector<int> y, yt;
  blobs(rng, 30, 0.5, x, y);
  blobs(rng, 30, 0.5, xt, yt);
  for (auto kind : {ClassifierKind::Gbdt, ClassifierKind::Logistic}) {
    const auto u = evaluate_utility(x, y, xt, yt, kind, 1);
    CHECK(u.metrics.accuracy >= 0.9);
    CHECK(u.absent_training_classes.empty());
  }
  std::vector<int> only_two;
  for (int v : y) only_two.push_back(v % 2);
  CHECK(evaluate_utility(x, only_two, xt, yt, ClassifierKind::Gbdt, 1).absent_training_classes == std::vector<int>{2, 3});
  CHECK(classifier_kind_from_string("logistic") == ClassifierKind::Logistic);
  CHECK_THROWS_AS(classifier_kind_from_string("forest"), Error);

  // Same test set on both sides: perfect agreement after matching.
  const auto same = clustering_fidelity(x, xt, xt, 4, 2);
  CHECK(same.accuracy == 1.0);
  CHECK_THROWS_AS(clustering_fidelity(x, xt, xt, 1, 2), Error);
  const auto noisy = clustering_fidelity(x, xt, testing::random_unit_rows(rng, xt.rows(), 5), 4, 2);
  CHECK(noisy.accuracy < 0.7);
}

TEST_CASE("re-identification attacker") {
  const auto corpus = tiny_corpus(20, 30, 8, 5);
  ReidAttacker att;
  ReidSettings settings;
  att.train(corpus, settings, 1);
  CHECK(att.reached_target());
  CHECK(att.held_out_accuracy() >= 0.98);
  const auto orig = att.score_original(corpus, 2);
  CHECK(orig.queries == 100);
  CHECK(orig.top1 >= 0.9);

  // Queries built from another person's document are rarely ranked first.
  DocumentVectors swapped = document_vectors(corpus);
  std::rotate(swapped.persons.begin(), swapped.persons.begin() + 1, swapped.persons.end());
  const auto r = att.score(swapped);
  CHECK(r.top1 <= 0.1);
  for (const auto* s : {&orig, &r}) {
    CHECK(s->top1 <= s->top5);
    CHECK(s->top5 <= s->top10);
    CHECK(s->top10 <= s->top100);
  }
  CHECK(r.top100 == 1.0);  // only 20 persons

  ReidAttacker again;
  again.train(corpus, settings, 1);
  CHECK(again.iterations() == att.iterations());
  CHECK(again.score_original(corpus, 2).top1 == orig.top1);

  DocumentVectors stranger = swapped;
  stranger.persons[0] = "ghost";
  CHECK_THROWS_AS(att.score(stranger), Error);
  CHECK_THROWS_AS(ReidAttacker{}.score(swapped), Error);
}

TEST_CASE("random substitution baseline") {
  const auto corpus = tiny_corpus(12, 5, 3, 9);
  const auto source = aks::label_pool(corpus);
  CHECK(source.size() == 60);
  extraction::ExtractionResult r;
  r.doc_id = "d1";
  r.person_id = "p1";
  r.t = 4;
  r.predicted_class = GradeClass::B;
  for (int i = 0; i < 4; ++i) r.kept.push_back({i, 0, 0.0});
  const auto s = aks::random_substitute_document(r, source, 7);
  REQUIRE(s.replacements.size() == 4);
  for (const auto& rep : s.replacements) {
    CHECK(rep.entry_person != "p1");
    CHECK(source.entries()[rep.entry].predicted_class == GradeClass::B);
    CHECK_FALSE(rep.relaxed);
  }
  CHECK(s == aks::random_substitute_document(r, source, 7));

  // class C holds p1, p5 and p9; the owner is still excluded
  r.predicted_class = GradeClass::C;
  for (const auto& rep : aks::random_substitute_document(r, source, 1).replacements) {
    CHECK(rep.entry_person != "p1");
    CHECK(source.entries()[rep.entry].predicted_class == GradeClass::C);
  }
}
