#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "adeid/corpus.hpp"
#include "adeid/pool_aks.hpp"
#include "adeid/xalign.hpp"

namespace adeid::eval {

using xalign::Matrix;
using xalign::Vector;

// -- metrics -------------------------------------------------------------------

struct MetricsReport {
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  double weighted_precision = 0.0;
  double weighted_recall = 0.0;
  double weighted_f1 = 0.0;
  std::vector<int> classes;  // labels present in truth or predictions
  std::size_t samples = 0;
};

// Macro averages run over every label seen in either vector; weights are the
// truth supports. Per-class F1 is taken before averaging.
MetricsReport metrics_report(const std::vector<int>& truth, const std::vector<int>& predicted);

// -- gradient-boosted trees ------------------------------------------------------

struct GbdtParams {
  int n_estimators = 100;
  int max_depth = 3;  // 0 = unbounded
  double learning_rate = 0.1;
  int early_stopping_rounds = 10;
  double validation_fraction = 0.2;  // 0 disables early stopping
  double lambda = 1.0;               // L2 on leaf weights
  double min_child_weight = 1.0;     // minimum hessian sum per leaf
  std::uint64_t seed = 0;
};

// Softmax multiclass boosting: one regression tree per class per round with
// Newton leaf values on the multinomial log-loss.
class GradientBoostedTrees {
 public:
  void fit(const Matrix& x, const std::vector<int>& y, int n_classes, const GbdtParams& params);
  Matrix predict_raw(const Matrix& x) const;
  Matrix predict_proba(const Matrix& x) const;
  std::vector<int> predict(const Matrix& x) const;
  int rounds() const { return static_cast<int>(trees_.size()); }
  bool stopped_early() const { return stopped_early_; }

  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
  };
  using Tree = std::vector<Node>;

 private:
  int n_classes_ = 0;
  double learning_rate_ = 0.1;
  std::vector<std::vector<Tree>> trees_;  // [round][class]
  bool stopped_early_ = false;
};

// -- multinomial logistic --------------------------------------------------------

struct LogisticParams {
  double l2 = 1e-4;
  double learning_rate = 0.05;
  int max_iterations = 500;
};

// Softmax regression on standardised features, full-batch Adam.
class SoftmaxRegression {
 public:
  void fit(const Matrix& x, const std::vector<int>& y, int n_classes, const LogisticParams& params);
  // Continues optimisation from the current weights.
  void step(const Matrix& x, const std::vector<int>& y, int iterations);
  Matrix predict_proba(const Matrix& x) const;
  Matrix decision(const Matrix& x) const;
  std::vector<int> predict(const Matrix& x) const;
  int iterations() const { return iterations_; }

 private:
  Matrix standardise(const Matrix& x) const;

  LogisticParams params_;
  int n_classes_ = 0;
  Vector mean_, scale_;
  Matrix w_;  // (D + 1) x K, last row is the bias
  Matrix m_, v_;
  int iterations_ = 0;
};

// -- clustering ------------------------------------------------------------------

class KMeans {
 public:
  // k-means++ seeding from `seed`; Lloyd iterations up to `max_iterations`.
  // An empty cluster is re-seeded once from the farthest point, then accepted.
  void fit(const Matrix& x, int k, std::uint64_t seed, int max_iterations = 100);
  std::vector<int> predict(const Matrix& x) const;
  const Matrix& centroids() const { return centroids_; }
  int iterations() const { return iterations_; }
  bool reseeded() const { return reseeded_; }

 private:
  Matrix centroids_;
  int iterations_ = 0;
  bool reseeded_ = false;
};

// Minimum-cost assignment for an n x m cost matrix with n <= m; returns the
// column assigned to each row.
std::vector<int> hungarian(const Matrix& cost);

// Relabels `predicted` so that it agrees with `reference` as much as possible.
std::vector<int> match_labels(const std::vector<int>& reference, const std::vector<int>& predicted);

struct Agreement {
  double ari = 0.0;
  double ami = 0.0;
};

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);
// Expected-mutual-information adjustment, normalised by max(H(a), H(b)).
double adjusted_mutual_information(const std::vector<int>& a, const std::vector<int>& b);
Agreement partition_agreement_scores(const std::vector<int>& a, const std::vector<int>& b);

// -- document vectors -----------------------------------------------------------

struct DocumentVectors {
  std::vector<std::string> persons;
  Matrix x;               // one row per person: mean sub-sentence embedding
  std::size_t empty = 0;  // rows with no sub-sentence (left at zero)
};

DocumentVectors document_vectors(const EmbeddedCorpus& corpus);
DocumentVectors summary_vectors(const std::vector<aks::DeidentifiedSummary>& summaries, const aks::AspectPool& pool);
std::vector<int> label_vector(const EmbeddedCorpus& corpus, const std::vector<std::string>& persons);

// -- protocols ------------------------------------------------------------------

enum class ClassifierKind { Gbdt, Logistic };
const char* to_string(ClassifierKind kind);
ClassifierKind classifier_kind_from_string(const std::string& s);

struct UtilityResult {
  MetricsReport metrics;
  ClassifierKind classifier = ClassifierKind::Gbdt;
  int rounds = 0;
  std::vector<int> absent_training_classes;
};

UtilityResult evaluate_utility(const Matrix& train_x, const std::vector<int>& train_y, const Matrix& test_x,
                               const std::vector<int>& test_y, ClassifierKind kind, std::uint64_t seed,
                               const GbdtParams& gbdt = {});

// Clusters fitted on `train_x`; labels on `test_b` are matched to those on
// `test_a` (the reference) before scoring.
MetricsReport clustering_fidelity(const Matrix& train_x, const Matrix& test_a, const Matrix& test_b, int k,
                                  std::uint64_t seed);

struct ReidReport {
  double top1 = 0.0;
  double top5 = 0.0;
  double top10 = 0.0;
  double top100 = 0.0;
  std::size_t queries = 0;
  std::size_t empty_queries = 0;
};

struct ReidSettings {
  double sample_ratio = 0.1;
  int train_summaries_per_person = 20;
  int held_out_per_person = 5;
  int probe_per_person = 5;
  double target_accuracy = 0.98;
  int max_iterations = 3000;
  int check_every = 50;
  LogisticParams logistic{1e-5, 0.05, 0};
};

// Person-identification attacker over mean embeddings of random sub-sentence
// samples of the original documents.
class ReidAttacker {
 public:
  void train(const EmbeddedCorpus& original, const ReidSettings& settings, std::uint64_t seed);
  // Fresh original-sampled probes, `probe_per_person` per person.
  ReidReport score_original(const EmbeddedCorpus& original, std::uint64_t seed) const;
  ReidReport score(const DocumentVectors& queries) const;
  double held_out_accuracy() const { return held_out_accuracy_; }
  bool reached_target() const { return reached_target_; }
  int iterations() const { return model_.iterations(); }
  std::size_t persons() const { return persons_.size(); }

 private:
  ReidReport rank(const Matrix& x, const std::vector<int>& truth, std::size_t empty) const;

  ReidSettings settings_;
  std::vector<std::string> persons_;
  SoftmaxRegression model_;
  double held_out_accuracy_ = 0.0;
  bool reached_target_ = false;
};

// Mean of ceil(ratio * n) distinct sub-sentences drawn from `doc`.
Vector sampled_summary(const SensitiveDocument& doc, double ratio, Rng& rng);

}  // namespace adeid::eval
