#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "adeid/corpus.hpp"
#include "adeid/extraction.hpp"

namespace adeid::arcss {

using xalign::Matrix;
using xalign::Vector;

// Character-level LCS length over unicode scalar values.
std::size_t lcs_length(const std::u32string& a, const std::u32string& b);

// |LCS| / max(|a|, |b|); two empty strings score 1.
double lcss(std::string_view a, std::string_view b);

struct RankedSubSentence {
  int id = 0;
  int ars_rank = 0;
  int lcss_rank = 0;
  int total_rank = 0;

  bool operator==(const RankedSubSentence&) const = default;
};

// 1-based ranks, highest score first, ties broken by ascending id.
std::vector<int> descending_ranks(const std::vector<double>& scores, const std::vector<int>& ids);

// Sorted by total rank, then id. Ids default to 0..n-1.
std::vector<RankedSubSentence> fuse_ranks(const std::vector<double>& ars, const std::vector<double>& lcss_scores,
                                          const std::vector<int>& ids = {});

// doc_id -> sub-sentence id -> ARS
using ArsTable = std::map<std::string, std::map<int, double>>;

ArsTable ars_table(const std::vector<extraction::ExtractionResult>& results, const EmbeddedCorpus& corpus);

// LCSS of every sub-sentence against the person's concatenated notes, fused with ARS.
std::vector<RankedSubSentence> rank_document(const SensitiveDocument& document, const ArsTable& ars,
                                             const std::string& reference_text);

// floor(0.2 * (n - k_keep)), or 0 when nothing lies outside the top k_keep.
std::size_t negative_count(std::size_t n, std::size_t k_keep);

struct SampleRef {
  std::string doc_id;
  int id = 0;
};

struct TrainingSamples {
  Matrix relevant;      // one row per reference-note sub-sentence
  Matrix non_relevant;  // bottom-ranked document sub-sentences
  std::vector<SampleRef> negatives;
};

TrainingSamples select_training_samples(const EmbeddedCorpus& corpus, const ArsTable& ars, std::size_t k_keep);

struct RelevanceClassifier {
  Vector weights;
  double bias = 0.0;
  int iteration = 0;
  std::size_t n_relevant = 0;
  std::size_t n_non_relevant = 0;
  double train_accuracy = 0.0;
  int newton_steps = 0;
  std::uint64_t seed = 0;

  double probability(const Vector& embedding) const;
  double probability(const std::vector<float>& embedding) const;
};

// L2-regularised logistic regression fitted by Newton's method with
// class-balanced sample weights. The fit itself draws no randomness; the
// seed is carried as metadata.
RelevanceClassifier train_relevance_classifier(const Matrix& relevant, const Matrix& non_relevant,
                                               std::uint64_t seed, double l2 = 1e-3, int max_steps = 100);

enum class RemovalMode { Fraction, Threshold };

struct RemovalRule {
  RemovalMode mode = RemovalMode::Fraction;
  double fraction = 0.25;
  double threshold = 0.5;
};

struct ArcssConfig {
  std::size_t k_keep = 3;
  RemovalRule removal;
  int iterations = 1;
  std::uint64_t seed = 0;
  double l2 = 1e-3;
};

struct DocumentFilterOutcome {
  std::string doc_id;
  std::vector<int> removed;    // ascending id
  std::vector<int> survivors;  // ascending id
};

// Ranks by relevant-probability (ties by id), never touches the top k_keep,
// and always leaves at least one sub-sentence.
DocumentFilterOutcome filter_document(const SensitiveDocument& document, const RelevanceClassifier& classifier,
                                      std::size_t k_keep, const RemovalRule& rule);

struct FilterPass {
  EmbeddedCorpus corpus;
  std::vector<DocumentFilterOutcome> outcomes;
};

FilterPass apply_classifier(const EmbeddedCorpus& corpus, const RelevanceClassifier& classifier,
                            std::size_t k_keep, const RemovalRule& rule);

// Applies the classifiers of successive iterations in order.
FilterPass apply_classifiers(const EmbeddedCorpus& corpus, const std::vector<RelevanceClassifier>& classifiers,
                             std::size_t k_keep, const RemovalRule& rule);

struct IterationReport {
  int iteration = 0;
  std::size_t relevant = 0;
  std::size_t non_relevant = 0;
  double train_accuracy = 0.0;
  std::size_t removed = 0;
  std::size_t survivors = 0;
  std::vector<DocumentFilterOutcome> outcomes;
};

struct ArcssResult {
  EmbeddedCorpus filtered;
  std::vector<RelevanceClassifier> classifiers;
  std::vector<IterationReport> reports;
  bool stopped_early = false;  // a later iteration found no negatives
};

// select -> train -> filter, repeated `iterations` times on the shrinking corpus.
// Iterations after the first stop early once no negatives remain.
ArcssResult filter_corpus(const EmbeddedCorpus& corpus, const ArsTable& ars, const ArcssConfig& config);

// JSON Lines: header, then one record per iteration carrying the classifier.
std::string serialize_report(const ArcssResult& result, const ArcssConfig& config, const std::string& header_extra);
struct ParsedReport {
  ArcssConfig config;
  std::vector<RelevanceClassifier> classifiers;
  std::vector<IterationReport> reports;
};
ParsedReport parse_report(const std::string& text);

const char* to_string(RemovalMode mode);
RemovalMode removal_mode_from_string(const std::string& s);

}  // namespace adeid::arcss
