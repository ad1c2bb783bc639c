#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "adeid/common.hpp"

namespace adeid {

enum class Source : std::uint8_t { Sensitive, Reference };

struct SubSentence {
  int id = 0;
  std::string text;
  std::vector<float> embedding;
  Source source = Source::Sensitive;

  bool operator==(const SubSentence&) const = default;
};

struct SensitiveDocument {
  std::string doc_id;
  std::string person_id;
  std::vector<SubSentence> sub_sentences;

  bool operator==(const SensitiveDocument&) const = default;
};

struct ReferenceNote {
  std::string person_id;
  std::string expert_id;
  std::vector<SubSentence> sub_sentences;
  std::optional<double> grade_score;

  bool operator==(const ReferenceNote&) const = default;
};

// Ordered F < C < B < A; the numeric value doubles as the class index used by
// every classifier in the engine.
enum class GradeClass : std::uint8_t { F = 0, C = 1, B = 2, A = 3 };
inline constexpr int kNumGradeClasses = 4;

const char* to_string(GradeClass g);
GradeClass grade_from_string(const std::string& s);
inline int class_index(GradeClass g) { return static_cast<int>(g); }
inline GradeClass class_from_index(int i) { return static_cast<GradeClass>(i); }

struct ScoreRange {
  double min = 65.0;
  double max = 100.0;
  bool operator==(const ScoreRange&) const = default;
};

struct EmbeddedCorpus {
  int dim = 0;
  ScoreRange score_range;
  std::vector<SensitiveDocument> documents;
  std::vector<ReferenceNote> notes;
  std::map<std::string, GradeClass> labels;
  // doc_id -> per-sub-sentence flag; only synthetic corpora carry it.
  std::optional<std::map<std::string, std::vector<bool>>> planted_truth;

  bool operator==(const EmbeddedCorpus&) const = default;

  // Throws InvalidInput describing the first violated invariant.
  void validate() const;

  std::vector<std::string> person_ids() const;
  const SensitiveDocument& document_of(const std::string& person_id) const;
  std::vector<const ReferenceNote*> notes_of(const std::string& person_id) const;
};

// Half-open thresholds: A [90.5, inf), B [80.5, 90.5), C [70.5, 80.5), F below.
GradeClass grade_to_class(double score);

// Mean of the scored notes, mapped through grade_to_class.
GradeClass aggregate_grades(const std::vector<const ReferenceNote*>& notes);

struct CorpusSplit {
  EmbeddedCorpus train;
  EmbeddedCorpus test;
};

// Partitions by person: a person's document, notes and label land on one
// side. Test size is round(n * test_fraction).
CorpusSplit split_train_test(const EmbeddedCorpus& corpus, double test_fraction,
                             std::uint64_t seed);

// Subset of the corpus restricted to the given persons (order of `corpus`).
EmbeddedCorpus restrict_to_persons(const EmbeddedCorpus& corpus,
                                   const std::vector<std::string>& persons);

// Hashed character 1..3-gram features projected to `dim` and L2-normalised.
std::vector<float> fallback_encode(const std::string& text, int dim,
                                   std::uint64_t seed);

struct SynthConfig {
  int n_persons = 200;
  int t_true = 10;
  int subs_per_doc = 30;
  double psa_fraction = 0.06;
  int dim = 32;
  std::uint64_t seed = 1;

  // Generator geometry. Planted sub-sentences sit tightly around their aspect
  // cluster mean; filler carries the owner's identity and theme.
  double salience_weight = 0.8;
  double planted_noise = 0.25;
  double planted_identity = 0.35;
  double filler_identity = 1.0;
  double filler_theme = 0.55;
  double filler_background = 0.6;
  double filler_noise = 0.7;
  double note_noise = 0.2;
  double note_grade_noise = 1.5;
};

EmbeddedCorpus synthesize_corpus(const SynthConfig& config);

// .aspcorp.jsonl: header, document, note and label records, one JSON object
// per line, embeddings as base64 little-endian float32.
std::string serialize_corpus(const EmbeddedCorpus& corpus);
EmbeddedCorpus parse_corpus(const std::string& text);
void save_corpus(const EmbeddedCorpus& corpus, const std::string& path);
EmbeddedCorpus load_corpus(const std::string& path);

// Raw JSON Lines records {person_id, doc, notes: [{expert_id, text, grade}]}
// split on sentence punctuation and embedded with fallback_encode.
EmbeddedCorpus ingest_raw(const std::string& raw_jsonl, int dim,
                          std::uint64_t seed);
std::vector<std::string> split_on_punctuation(const std::string& text);

// Expert notes of one person joined into the single reference sequence.
std::string concatenated_note_text(const EmbeddedCorpus& corpus,
                                   const std::string& person_id);

}  // namespace adeid
