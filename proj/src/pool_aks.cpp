#include "adeid/pool_aks.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <set>
#include <sstream>

#include "json.hpp"

namespace adeid::aks {

using json = nlohmann::json;

namespace {

constexpr char kPoolMagic[4] = {'A', 'D', 'X', 'P'};
constexpr std::uint32_t kPoolVersion = 1;

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out_.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int b = 0; b < 8; ++b) out_.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  void raw(const std::string& s) { out_ += s; }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view in) : in_(in) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint32_t u32() {
    const auto s = take(4);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[b])) << (8 * b);
    return v;
  }
  std::uint64_t u64() {
    const auto s = take(8);
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[b])) << (8 * b);
    return v;
  }
  std::string str() { return std::string(take(u32())); }
  std::string_view take(std::size_t n) {
    if (at_ + n > in_.size()) fail(ErrorKind::Format, "truncated pool file");
    const auto s = in_.substr(at_, n);
    at_ += n;
    return s;
  }
  bool done() const { return at_ == in_.size(); }

 private:
  std::string_view in_;
  std::size_t at_ = 0;
};

}  // namespace

AspectPool::AspectPool(int t, int dim, std::vector<PoolEntry> entries)
    : t_(t), dim_(dim), entries_(std::move(entries)) {
  if (t_ < 1 || t_ > 64) fail(ErrorKind::InvalidConfig, "pool bit width must lie in [1, 64]");
  std::set<std::pair<std::string, int>> seen;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    if (!seen.insert({e.doc_id, e.sub_id}).second) {
      fail(ErrorKind::InvalidInput, "duplicate pool entry " + e.doc_id + "/" + std::to_string(e.sub_id));
    }
    if (t_ < 64 && (e.bits >> t_) != 0) fail(ErrorKind::InvalidInput, "pool entry bits exceed the declared width");
    if (static_cast<int>(e.embedding.size()) != dim_) fail(ErrorKind::InvalidInput, "pool entry dimension mismatch");
    index_[{class_index(e.predicted_class), e.bits}].push_back(i);
  }
}

AspectPool build_pool(const EmbeddedCorpus& corpus, const std::vector<extraction::ExtractionResult>& results) {
  std::map<std::string, const SensitiveDocument*> docs;
  for (const auto& d : corpus.documents) docs[d.doc_id] = &d;
  std::vector<PoolEntry> entries;
  int t = 0;
  for (const auto& r : results) {
    const auto it = docs.find(r.doc_id);
    if (it == docs.end()) fail(ErrorKind::InvalidInput, "extraction result for unknown document " + r.doc_id);
    std::map<int, const SubSentence*> subs;
    for (const auto& s : it->second->sub_sentences) subs[s.id] = &s;
    t = std::max(t, r.t);
    for (const auto& k : r.kept) {
      const auto found = subs.find(k.id);
      if (found == subs.end()) fail(ErrorKind::InvalidInput, "kept id missing from document " + r.doc_id);
      entries.push_back({r.doc_id, it->second->person_id, k.id, found->second->text, found->second->embedding, k.bits,
                         r.predicted_class});
    }
  }
  if (entries.empty()) fail(ErrorKind::InvalidInput, "extraction kept nothing; the aspect pool would be empty");
  return AspectPool(t, corpus.dim, std::move(entries));
}

AspectPool build_pool(const EmbeddedCorpus& corpus, const xalign::XAlignParams& params,
                      const xalign::XAlignConfig& config, const extraction::ExtractionSettings& settings) {
  return build_pool(corpus, extraction::extract_corpus(corpus, params, config, settings));
}

int hamming(AspectBits a, AspectBits b) { return std::popcount(a ^ b); }

CandidateSet gather_candidates(const AspectPool& pool, AspectBits bits, std::optional<GradeClass> class_filter,
                               const std::string& owner, int k) {
  if (k < 2) fail(ErrorKind::InvalidConfig, "k must be at least 2");
  if (pool.size() == 0) fail(ErrorKind::InvalidInput, "empty aspect pool");
  const auto needed = static_cast<std::size_t>(k - 1);

  // Buckets grouped by distance; the radius sweep only touches each once.
  std::vector<std::vector<const std::vector<std::size_t>*>> by_distance(static_cast<std::size_t>(pool.t()) + 1);
  for (const auto& [key, ids] : pool.index()) {
    if (class_filter && key.first != class_index(*class_filter)) continue;
    const int d = hamming(bits, key.second);
    if (d <= pool.t()) by_distance[static_cast<std::size_t>(d)].push_back(&ids);
  }
  std::set<std::string> persons;
  std::vector<std::size_t> entries;
  for (int r = 0; r <= pool.t(); ++r) {
    for (const auto* ids : by_distance[static_cast<std::size_t>(r)]) {
      for (std::size_t i : *ids) {
        const auto& e = pool.entries()[i];
        if (e.person_id == owner) continue;
        persons.insert(e.person_id);
        entries.push_back(i);
      }
    }
    if (persons.size() >= needed) {
      std::sort(entries.begin(), entries.end());
      return {std::vector<std::string>(persons.begin(), persons.end()), std::move(entries), r};
    }
  }
  fail(ErrorKind::AnonymityInfeasible, "only " + std::to_string(persons.size()) + " non-owner persons reachable, need " +
                                           std::to_string(needed));
}

const char* to_string(ClassMode mode) {
  switch (mode) {
    case ClassMode::On: return "on";
    case ClassMode::Off: return "off";
    case ClassMode::Relax: return "relax";
  }
  return "on";
}

ClassMode class_mode_from_string(const std::string& s) {
  if (s == "on") return ClassMode::On;
  if (s == "off") return ClassMode::Off;
  if (s == "relax") return ClassMode::Relax;
  fail(ErrorKind::InvalidConfig, "unknown class mode '" + s + "'");
}

DeidentifiedSummary substitute_document(const extraction::ExtractionResult& result, const AspectPool& pool, int k,
                                        ClassMode mode, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "aks/" + result.doc_id));
  DeidentifiedSummary out;
  out.doc_id = result.doc_id;
  out.person_id = result.person_id;
  out.predicted_class = result.predicted_class;
  std::set<std::size_t> used;
  for (const auto& kept : result.kept) {
    CandidateSet cand;
    bool relaxed = false;
    if (mode == ClassMode::Off) {
      cand = gather_candidates(pool, kept.bits, std::nullopt, result.person_id, k);
    } else {
      try {
        cand = gather_candidates(pool, kept.bits, result.predicted_class, result.person_id, k);
      } catch (const Error& e) {
        if (mode != ClassMode::Relax || e.kind() != ErrorKind::AnonymityInfeasible) throw;
        cand = gather_candidates(pool, kept.bits, std::nullopt, result.person_id, k);
        relaxed = true;
      }
    }
    const std::string& person = cand.persons[rng.index(cand.persons.size())];
    std::vector<std::size_t> own;
    for (std::size_t i : cand.entries) {
      if (pool.entries()[i].person_id == person) own.push_back(i);
    }
    const std::size_t chosen = own[rng.index(own.size())];
    const auto& e = pool.entries()[chosen];
    Replacement rep;
    rep.original_id = kept.id;
    rep.entry = chosen;
    rep.entry_doc_id = e.doc_id;
    rep.entry_sub_id = e.sub_id;
    rep.entry_person = e.person_id;
    rep.radius = cand.radius;
    rep.q_size = cand.persons.size();
    rep.candidate_persons = std::move(cand.persons);
    rep.relaxed = relaxed;
    rep.reused = !used.insert(chosen).second;
    if (!out.text.empty()) out.text += ' ';
    out.text += e.text;
    out.replacements.push_back(std::move(rep));
  }
  return out;
}

std::vector<DeidentifiedSummary> substitute_corpus(const std::vector<extraction::ExtractionResult>& results,
                                                   const AspectPool& pool, int k, ClassMode mode,
                                                   std::uint64_t seed) {
  std::vector<DeidentifiedSummary> out;
  out.reserve(results.size());
  for (const auto& r : results) out.push_back(substitute_document(r, pool, k, mode, seed));
  return out;
}

AspectPool label_pool(const EmbeddedCorpus& corpus) {
  std::vector<PoolEntry> entries;
  for (const auto& d : corpus.documents) {
    const auto label = corpus.labels.find(d.person_id);
    const GradeClass c = label == corpus.labels.end() ? GradeClass::F : label->second;
    for (const auto& s : d.sub_sentences) entries.push_back({d.doc_id, d.person_id, s.id, s.text, s.embedding, 0, c});
  }
  if (entries.empty()) fail(ErrorKind::InvalidInput, "label pool would be empty");
  return AspectPool(1, corpus.dim, std::move(entries));
}

DeidentifiedSummary random_substitute_document(const extraction::ExtractionResult& result, const AspectPool& source,
                                               std::uint64_t seed) {
  Rng rng(derive_seed(seed, "random/" + result.doc_id));
  std::vector<std::size_t> same, other;
  for (std::size_t i = 0; i < source.size(); ++i) {
    const auto& e = source.entries()[i];
    if (e.person_id == result.person_id) continue;
    other.push_back(i);
    if (e.predicted_class == result.predicted_class) same.push_back(i);
  }
  if (other.empty()) fail(ErrorKind::AnonymityInfeasible, "no other person to draw from for " + result.doc_id);
  const bool relaxed = same.empty();
  const auto& draw = relaxed ? other : same;

  DeidentifiedSummary out;
  out.doc_id = result.doc_id;
  out.person_id = result.person_id;
  out.predicted_class = result.predicted_class;
  std::set<std::size_t> used;
  for (const auto& kept : result.kept) {
    const std::size_t chosen = draw[rng.index(draw.size())];
    const auto& e = source.entries()[chosen];
    Replacement rep;
    rep.original_id = kept.id;
    rep.entry = chosen;
    rep.entry_doc_id = e.doc_id;
    rep.entry_sub_id = e.sub_id;
    rep.entry_person = e.person_id;
    rep.q_size = draw.size();
    rep.relaxed = relaxed;
    rep.reused = !used.insert(chosen).second;
    if (!out.text.empty()) out.text += ' ';
    out.text += e.text;
    out.replacements.push_back(std::move(rep));
  }
  return out;
}

std::vector<DeidentifiedSummary> random_substitute_corpus(const std::vector<extraction::ExtractionResult>& results,
                                                          const AspectPool& source, std::uint64_t seed) {
  std::vector<DeidentifiedSummary> out;
  out.reserve(results.size());
  for (const auto& r : results) out.push_back(random_substitute_document(r, source, seed));
  return out;
}

// ---------------------------------------------------------------------------

std::string serialize_pool(const AspectPool& pool, const std::string& provenance_json) {
  ByteWriter body;
  for (const auto& e : pool.entries()) {
    body.str(e.doc_id);
    body.str(e.person_id);
    body.u32(static_cast<std::uint32_t>(e.sub_id));
    body.str(e.text);
    body.u64(e.bits);
    body.u8(static_cast<std::uint8_t>(class_index(e.predicted_class)));
    body.raw(pack_f32_le(e.embedding));
  }
  body.u32(static_cast<std::uint32_t>(pool.index().size()));
  for (const auto& [key, ids] : pool.index()) {
    body.u8(static_cast<std::uint8_t>(key.first));
    body.u64(key.second);
    body.u32(static_cast<std::uint32_t>(ids.size()));
    for (std::size_t i : ids) body.u32(static_cast<std::uint32_t>(i));
  }
  const std::string payload = body.take();
  const json header{{"t", pool.t()},
                    {"dim", pool.dim()},
                    {"entries", pool.size()},
                    {"buckets", pool.index().size()},
                    {"payload_sha256", sha256_hex(payload)},
                    {"provenance", json::parse(provenance_json)}};
  const std::string header_text = header.dump();
  ByteWriter out;
  out.raw(std::string(kPoolMagic, 4));
  out.u32(kPoolVersion);
  out.str(header_text);
  out.raw(payload);
  return out.take();
}

AspectPool parse_pool(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 4, std::string(kPoolMagic, 4)) != 0) {
    fail(ErrorKind::Format, "not an aspect pool file");
  }
  ByteReader in(bytes);
  in.take(4);
  const auto version = in.u32();
  if (version != kPoolVersion) fail(ErrorKind::VersionMismatch, "pool version " + std::to_string(version) + " is not supported");
  const std::string header_text = in.str();
  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("pool header: ") + e.what());
  }
  const std::size_t payload_at = 12 + header_text.size();
  if (payload_at > bytes.size() || sha256_hex(std::string_view(bytes).substr(payload_at)) != header.at("payload_sha256")) {
    fail(ErrorKind::Format, "pool payload failed its integrity check");
  }
  const int t = header.at("t");
  const int dim = header.at("dim");
  const std::size_t n = header.at("entries");
  std::vector<PoolEntry> entries(n);
  for (auto& e : entries) {
    e.doc_id = in.str();
    e.person_id = in.str();
    e.sub_id = static_cast<int>(in.u32());
    e.text = in.str();
    e.bits = in.u64();
    const auto c = in.u8();
    if (c >= kNumGradeClasses) fail(ErrorKind::Format, "bad class in pool entry");
    e.predicted_class = class_from_index(c);
    const auto raw = in.take(static_cast<std::size_t>(dim) * 4);
    e.embedding = unpack_f32_le({reinterpret_cast<const unsigned char*>(raw.data()), raw.size()});
  }
  std::map<AspectPool::Key, std::vector<std::size_t>> stored;
  const auto buckets = in.u32();
  for (std::uint32_t b = 0; b < buckets; ++b) {
    const int c = in.u8();
    const auto bits = in.u64();
    auto& ids = stored[{c, bits}];
    const auto count = in.u32();
    for (std::uint32_t i = 0; i < count; ++i) ids.push_back(in.u32());
  }
  if (!in.done()) fail(ErrorKind::Format, "trailing bytes in pool file");
  AspectPool pool(t, dim, std::move(entries));
  if (stored != pool.index()) fail(ErrorKind::Format, "pool bit index disagrees with its entry table");
  return pool;
}

std::string pool_sidecar_jsonl(const AspectPool& pool) {
  std::string out;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto& e = pool.entries()[i];
    out += json{{"entry", i},
                {"doc_id", e.doc_id},
                {"person_id", e.person_id},
                {"sub_id", e.sub_id},
                {"bits", extraction::bits_to_hex(e.bits, pool.t())},
                {"predicted_class", to_string(e.predicted_class)},
                {"text", e.text}}
               .dump();
    out += '\n';
  }
  return out;
}

void save_pool(const AspectPool& pool, const std::string& path, const std::string& provenance_json) {
  write_file_atomic(path, serialize_pool(pool, provenance_json));
  write_file_atomic(path + ".audit.jsonl", pool_sidecar_jsonl(pool));
}

AspectPool load_pool(const std::string& path) { return parse_pool(read_file(path)); }

std::string serialize_summaries(const std::vector<DeidentifiedSummary>& summaries, const AspectPool& pool,
                                const std::string& header_json) {
  std::string out = header_json + "\n";
  for (const auto& s : summaries) {
    json reps = json::array();
    for (const auto& r : s.replacements) {
      reps.push_back({{"original_id", r.original_id},
                      {"entry", r.entry},
                      {"entry_doc_id", r.entry_doc_id},
                      {"entry_sub_id", r.entry_sub_id},
                      {"entry_person", r.entry_person},
                      {"radius", r.radius},
                      {"q_size", r.q_size},
                      {"candidate_persons", r.candidate_persons},
                      {"relaxed", r.relaxed},
                      {"reused", r.reused},
                      {"text", pool.entries().at(r.entry).text}});
    }
    out += json{{"kind", "summary"},
                {"doc_id", s.doc_id},
                {"person_id", s.person_id},
                {"predicted_class", to_string(s.predicted_class)},
                {"text", s.text},
                {"replacements", reps}}
               .dump();
    out += '\n';
  }
  return out;
}

std::vector<DeidentifiedSummary> parse_summaries(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<DeidentifiedSummary> out;
  bool have_header = false;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = json::parse(line);
      if (!have_header) {
        if (j.value("kind", "") != "header" || j.value("format", "") != "summaries") {
          fail(ErrorKind::Format, "missing summaries header");
        }
        if (j.value("version", 0) != 1) fail(ErrorKind::VersionMismatch, "unsupported summaries version");
        have_header = true;
        continue;
      }
      DeidentifiedSummary s;
      s.doc_id = j.at("doc_id");
      s.person_id = j.at("person_id");
      s.predicted_class = grade_from_string(j.at("predicted_class"));
      s.text = j.at("text");
      for (const auto& r : j.at("replacements")) {
        Replacement rep;
        rep.original_id = r.at("original_id");
        rep.entry = r.at("entry");
        rep.entry_doc_id = r.at("entry_doc_id");
        rep.entry_sub_id = r.at("entry_sub_id");
        rep.entry_person = r.at("entry_person");
        rep.radius = r.at("radius");
        rep.q_size = r.at("q_size");
        rep.candidate_persons = r.at("candidate_persons").get<std::vector<std::string>>();
        rep.relaxed = r.at("relaxed");
        rep.reused = r.at("reused");
        s.replacements.push_back(std::move(rep));
      }
      out.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("summaries: ") + e.what());
  }
  if (!have_header) fail(ErrorKind::Format, "empty summaries file");
  return out;
}

}  // namespace adeid::aks
