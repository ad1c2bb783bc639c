#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "adeid/corpus.hpp"
#include "adeid/extraction.hpp"

namespace adeid::aks {

using extraction::AspectBits;

struct PoolEntry {
  std::string doc_id;
  std::string person_id;  // owner
  int sub_id = 0;
  std::string text;
  std::vector<float> embedding;
  AspectBits bits = 0;
  GradeClass predicted_class = GradeClass::F;

  bool operator==(const PoolEntry&) const = default;
};

class AspectPool {
 public:
  using Key = std::pair<int, AspectBits>;  // (class index, bits)

  AspectPool() = default;
  AspectPool(int t, int dim, std::vector<PoolEntry> entries);

  int t() const { return t_; }
  int dim() const { return dim_; }
  const std::vector<PoolEntry>& entries() const { return entries_; }
  const std::map<Key, std::vector<std::size_t>>& index() const { return index_; }
  std::size_t size() const { return entries_.size(); }

  bool operator==(const AspectPool& o) const { return t_ == o.t_ && dim_ == o.dim_ && entries_ == o.entries_; }

 private:
  int t_ = 0;
  int dim_ = 0;
  std::vector<PoolEntry> entries_;
  std::map<Key, std::vector<std::size_t>> index_;
};

// One entry per kept sub-sentence, in document then id order.
AspectPool build_pool(const EmbeddedCorpus& corpus, const std::vector<extraction::ExtractionResult>& results);
AspectPool build_pool(const EmbeddedCorpus& corpus, const xalign::XAlignParams& params,
                      const xalign::XAlignConfig& config, const extraction::ExtractionSettings& settings);

int hamming(AspectBits a, AspectBits b);

struct CandidateSet {
  std::vector<std::string> persons;  // Q, sorted
  std::vector<std::size_t> entries;  // ascending pool index
  int radius = 0;
};

// Smallest radius whose ball (restricted to `class_filter` when set, owner
// excluded) spans at least k - 1 distinct persons.
CandidateSet gather_candidates(const AspectPool& pool, AspectBits bits, std::optional<GradeClass> class_filter,
                               const std::string& owner, int k);

enum class ClassMode { On, Off, Relax };
const char* to_string(ClassMode mode);
ClassMode class_mode_from_string(const std::string& s);

struct Replacement {
  int original_id = 0;
  std::size_t entry = 0;  // pool index
  std::string entry_doc_id;
  int entry_sub_id = 0;
  std::string entry_person;
  int radius = 0;
  std::size_t q_size = 0;
  std::vector<std::string> candidate_persons;
  bool relaxed = false;  // class filter dropped to reach k - 1 persons
  bool reused = false;   // entry already used earlier in this summary

  bool operator==(const Replacement&) const = default;
};

struct DeidentifiedSummary {
  std::string doc_id;
  std::string person_id;
  GradeClass predicted_class = GradeClass::F;
  std::vector<Replacement> replacements;  // original order
  std::string text;

  bool operator==(const DeidentifiedSummary&) const = default;
};

// Person-first sampling: a uniform person from Q, then a uniform entry of
// that person inside the ball. The stream is derived from (seed, doc_id).
DeidentifiedSummary substitute_document(const extraction::ExtractionResult& result, const AspectPool& pool, int k,
                                        ClassMode mode, std::uint64_t seed);

std::vector<DeidentifiedSummary> substitute_corpus(const std::vector<extraction::ExtractionResult>& results,
                                                   const AspectPool& pool, int k, ClassMode mode,
                                                   std::uint64_t seed);

// Baseline source: every sub-sentence of `corpus`, tagged with its person's
// label (F when unlabelled). Bits are zero and the width is 1.
AspectPool label_pool(const EmbeddedCorpus& corpus);

// Each kept sub-sentence becomes a uniform draw among entries of other
// persons sharing the document's predicted class; any other person's entry
// when that class is empty (flagged as relaxed).
DeidentifiedSummary random_substitute_document(const extraction::ExtractionResult& result, const AspectPool& source,
                                               std::uint64_t seed);
std::vector<DeidentifiedSummary> random_substitute_corpus(const std::vector<extraction::ExtractionResult>& results,
                                                          const AspectPool& source, std::uint64_t seed);

// Binary pool: "ADXP", u32 version, u32 header length, JSON header, entry
// table, bit index. Integrity is checked with the SHA-256 in the header.
std::string serialize_pool(const AspectPool& pool, const std::string& provenance_json = "{}");
AspectPool parse_pool(const std::string& bytes);
std::string pool_sidecar_jsonl(const AspectPool& pool);
void save_pool(const AspectPool& pool, const std::string& path, const std::string& provenance_json = "{}");
AspectPool load_pool(const std::string& path);

std::string serialize_summaries(const std::vector<DeidentifiedSummary>& summaries, const AspectPool& pool,
                                const std::string& header_json);
std::vector<DeidentifiedSummary> parse_summaries(const std::string& text);

}  // namespace adeid::aks
