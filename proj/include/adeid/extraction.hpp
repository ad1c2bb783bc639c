#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "adeid/corpus.hpp"
#include "adeid/xalign.hpp"

namespace adeid::extraction {

using xalign::Matrix;
using xalign::Vector;
using BitMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

// One bit per aspect token, bit i = token i. Token counts are capped at 64.
using AspectBits = std::uint64_t;

struct Standardized {
  Matrix z;                        // rows of constant CAS are left at zero
  std::vector<bool> constant_row;  // true where the row had zero variance
};

// Per-row z-scores over the sub-sentence axis with population std.
Standardized standardize_rows(const Matrix& cas);

// bit = z >= alpha; constant rows give all-false. Needs k_len >= 2.
BitMatrix standardize_and_binarize(const Matrix& cas, double alpha);

// mask_j = (number of set bits in column j) >= beta.
std::vector<bool> extraction_mask(const BitMatrix& bits, int beta);

double aspect_relevance_score(const Matrix& cas, Eigen::Index j);
std::vector<double> aspect_relevance_scores(const Matrix& cas);

AspectBits column_bits(const BitMatrix& bits, Eigen::Index j);
std::string bits_to_hex(AspectBits bits, int t);
AspectBits bits_from_hex(const std::string& hex);

struct KeptSubSentence {
  int id = 0;
  AspectBits bits = 0;
  double ars = 0.0;

  bool operator==(const KeptSubSentence&) const = default;
};

struct ExtractionResult {
  std::string doc_id;
  std::string person_id;
  int t = 0;
  int k_len = 0;
  std::vector<KeptSubSentence> kept;  // ascending id
  GradeClass predicted_class = GradeClass::F;
  double extraction_ratio = 0.0;
  std::vector<double> ars;  // every sub-sentence, document order

  std::vector<int> kept_ids() const;
  bool operator==(const ExtractionResult&) const = default;
};

struct ExtractionSettings {
  double alpha = 1.0;
  int beta = 5;
};

// Aspect-query inference pass with every token as query. The predicted class
// comes from the auxiliary head on that pass (class F when the head is off).
ExtractionResult extract_document(const SensitiveDocument& document, const xalign::XAlignParams& params,
                                  const xalign::XAlignConfig& config, const ExtractionSettings& settings);

std::vector<ExtractionResult> extract_corpus(const EmbeddedCorpus& corpus, const xalign::XAlignParams& params,
                                             const xalign::XAlignConfig& config,
                                             const ExtractionSettings& settings);

// Drops kept items whose id is not in `allowed`; the ratio keeps the original k_len.
ExtractionResult restrict_kept(const ExtractionResult& result, const std::vector<int>& allowed);

// Keeps the same number of sub-sentences per document, chosen uniformly.
std::vector<ExtractionResult> random_baseline(const std::vector<ExtractionResult>& matched, std::uint64_t seed);

using Truth = std::map<std::string, std::vector<bool>>;

struct ExtractionScores {
  // micro: pooled over all sub-sentence decisions
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  // macro: mean of per-document values
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  double mean_extraction_ratio = 0.0;
  std::size_t documents = 0;
};

// P = 0 when nothing is kept, R = 0 when truth is empty, F1 = 0 unless both > 0.
ExtractionScores score_extraction(const std::vector<ExtractionResult>& results, const Truth& truth);

std::string result_to_jsonl(const ExtractionResult& result);
ExtractionResult result_from_jsonl(const std::string& line);
std::string serialize_results(const std::vector<ExtractionResult>& results, const std::string& header_json);
std::vector<ExtractionResult> parse_results(const std::string& text);

}  // namespace adeid::extraction
