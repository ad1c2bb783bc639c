#include "adeid/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "json.hpp"

namespace adeid {

using json = nlohmann::json;

const char* to_string(GradeClass g) {
  switch (g) {
    case GradeClass::A: return "A";
    case GradeClass::B: return "B";
    case GradeClass::C: return "C";
    case GradeClass::F: return "F";
  }
  return "?";
}

GradeClass grade_from_string(const std::string& s) {
  if (s == "A") return GradeClass::A;
  if (s == "B") return GradeClass::B;
  if (s == "C") return GradeClass::C;
  if (s == "F") return GradeClass::F;
  fail(ErrorKind::Format, "unknown grade class '" + s + "'");
}

GradeClass grade_to_class(double score) {
  if (!std::isfinite(score)) fail(ErrorKind::InvalidInput, "grade score is not finite");
  if (score >= 90.5) return GradeClass::A;
  if (score >= 80.5) return GradeClass::B;
  if (score >= 70.5) return GradeClass::C;
  return GradeClass::F;
}

GradeClass aggregate_grades(const std::vector<const ReferenceNote*>& notes) {
  double sum = 0.0;
  int n = 0;
  for (const auto* note : notes) {
    if (note->grade_score) {
      sum += *note->grade_score;
      ++n;
    }
  }
  if (n == 0) fail(ErrorKind::MissingLabel, "no scored notes to aggregate");
  return grade_to_class(sum / n);
}

// ---------------------------------------------------------------------------

void EmbeddedCorpus::validate() const {
  if (dim <= 0) fail(ErrorKind::InvalidInput, "corpus dimension must be positive");
  const auto check_sub = [&](const SubSentence& s, Source expect, const std::string& where) {
    if (s.text.empty()) fail(ErrorKind::InvalidInput, "empty sub-sentence text in " + where);
    if (static_cast<int>(s.embedding.size()) != dim) {
      fail(ErrorKind::InvalidInput, "embedding length mismatch in " + where);
    }
    if (s.source != expect) fail(ErrorKind::InvalidInput, "wrong sub-sentence source in " + where);
  };
  std::map<std::string, int> docs_per_person;
  std::set<std::string> doc_ids;
  for (const auto& d : documents) {
    if (d.sub_sentences.empty()) fail(ErrorKind::InvalidInput, "document " + d.doc_id + " is empty");
    if (!doc_ids.insert(d.doc_id).second) fail(ErrorKind::InvalidInput, "duplicate doc_id " + d.doc_id);
    ++docs_per_person[d.person_id];
    for (const auto& s : d.sub_sentences) check_sub(s, Source::Sensitive, "document " + d.doc_id);
  }
  for (const auto& [person, count] : docs_per_person) {
    if (count != 1) fail(ErrorKind::InvalidInput, "person " + person + " owns more than one document");
  }
  for (const auto& n : notes) {
    if (n.sub_sentences.empty()) fail(ErrorKind::InvalidInput, "empty note for " + n.person_id);
    if (!docs_per_person.contains(n.person_id)) {
      fail(ErrorKind::InvalidInput, "note for person without document: " + n.person_id);
    }
    if (n.grade_score && (*n.grade_score < score_range.min || *n.grade_score > score_range.max)) {
      fail(ErrorKind::InvalidInput, "grade score outside declared range for " + n.person_id);
    }
    for (const auto& s : n.sub_sentences) check_sub(s, Source::Reference, "note of " + n.person_id);
  }
  for (const auto& [person, g] : labels) {
    if (!docs_per_person.contains(person)) {
      fail(ErrorKind::InvalidInput, "label for person without document: " + person);
    }
  }
  if (planted_truth) {
    for (const auto& d : documents) {
      auto it = planted_truth->find(d.doc_id);
      if (it == planted_truth->end() || it->second.size() != d.sub_sentences.size()) {
        fail(ErrorKind::InvalidInput, "planted truth missing or mis-sized for " + d.doc_id);
      }
    }
  }
}

std::vector<std::string> EmbeddedCorpus::person_ids() const {
  std::vector<std::string> out;
  out.reserve(documents.size());
  for (const auto& d : documents) out.push_back(d.person_id);
  return out;
}

const SensitiveDocument& EmbeddedCorpus::document_of(const std::string& person_id) const {
  for (const auto& d : documents) {
    if (d.person_id == person_id) return d;
  }
  fail(ErrorKind::InvalidInput, "no document for person " + person_id);
}

std::vector<const ReferenceNote*> EmbeddedCorpus::notes_of(const std::string& person_id) const {
  std::vector<const ReferenceNote*> out;
  for (const auto& n : notes) {
    if (n.person_id == person_id) out.push_back(&n);
  }
  return out;
}

std::string concatenated_note_text(const EmbeddedCorpus& corpus, const std::string& person_id) {
  std::string out;
  for (const auto* note : corpus.notes_of(person_id)) {
    for (const auto& s : note->sub_sentences) out += s.text;
  }
  return out;
}

// ---------------------------------------------------------------------------

EmbeddedCorpus restrict_to_persons(const EmbeddedCorpus& corpus,
                                   const std::vector<std::string>& persons) {
  const std::set<std::string> keep(persons.begin(), persons.end());
  EmbeddedCorpus out;
  out.dim = corpus.dim;
  out.score_range = corpus.score_range;
  if (corpus.planted_truth) out.planted_truth.emplace();
  for (const auto& d : corpus.documents) {
    if (!keep.contains(d.person_id)) continue;
    out.documents.push_back(d);
    if (corpus.planted_truth) {
      (*out.planted_truth)[d.doc_id] = corpus.planted_truth->at(d.doc_id);
    }
  }
  for (const auto& n : corpus.notes) {
    if (keep.contains(n.person_id)) out.notes.push_back(n);
  }
  for (const auto& [p, g] : corpus.labels) {
    if (keep.contains(p)) out.labels.emplace(p, g);
  }
  return out;
}

CorpusSplit split_train_test(const EmbeddedCorpus& corpus, double test_fraction,
                             std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    fail(ErrorKind::InvalidSplit, "test fraction must lie in (0, 1)");
  }
  std::vector<std::string> persons = corpus.person_ids();
  std::sort(persons.begin(), persons.end());
  const auto n = persons.size();
  const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
  if (n_test == 0 || n_test >= n) {
    fail(ErrorKind::InvalidSplit, "split of " + std::to_string(n) + " persons leaves an empty side");
  }
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(persons);
  std::vector<std::string> test(persons.begin(), persons.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::string> train(persons.begin() + static_cast<std::ptrdiff_t>(n_test), persons.end());
  return {restrict_to_persons(corpus, train), restrict_to_persons(corpus, test)};
}

// ---------------------------------------------------------------------------

std::vector<float> fallback_encode(const std::string& text, int dim, std::uint64_t seed) {
  if (dim <= 0) fail(ErrorKind::InvalidInput, "fallback_encode needs a positive dimension");
  const std::u32string scalars = utf8_to_scalars(text);
  std::vector<double> acc(static_cast<std::size_t>(dim), 0.0);
  for (std::size_t n = 1; n <= 3; ++n) {
    if (scalars.size() < n) break;
    const std::uint64_t basis = derive_seed(seed, "ngram" + std::to_string(n));
    for (std::size_t i = 0; i + n <= scalars.size(); ++i) {
      const std::string_view bytes(reinterpret_cast<const char*>(scalars.data() + i),
                                   n * sizeof(char32_t));
      const std::uint64_t h = fnv1a64(bytes, basis);
      const auto slot = static_cast<std::size_t>(h % static_cast<std::uint64_t>(dim));
      acc[slot] += (h >> 63) ? -1.0 : 1.0;
    }
  }
  double norm = 0.0;
  for (double v : acc) norm += v * v;
  std::vector<float> out(static_cast<std::size_t>(dim), 0.0f);
  if (norm == 0.0) {
    out[static_cast<std::size_t>(derive_seed(seed, "empty") % static_cast<std::uint64_t>(dim))] = 1.0f;
    return out;
  }
  norm = std::sqrt(norm);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(acc[i] / norm);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

using Vec = std::vector<double>;

Vec random_direction(Rng& rng, int dim) {
  Vec v(static_cast<std::size_t>(dim));
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

// Isotropic noise with expected squared norm 1.
Vec noise(Rng& rng, int dim) {
  Vec v(static_cast<std::size_t>(dim));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (auto& x : v) x = rng.normal() * scale;
  return v;
}

void axpy(double a, const Vec& x, Vec& y) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

std::vector<float> normalized_f32(const Vec& v) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / norm);
  return out;
}

Vec to_vec(const std::vector<float>& f) { return Vec(f.begin(), f.end()); }

std::string make_word(Rng& rng) {
  static constexpr const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p",
                                            "r", "s", "t", "v", "z", "ch", "sh", "tr", "br"};
  static constexpr const char* kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou", "ea"};
  const std::size_t syllables = 2 + rng.index(2);
  std::string w;
  for (std::size_t i = 0; i < syllables; ++i) {
    w += kOnsets[rng.index(std::size(kOnsets))];
    w += kVowels[rng.index(std::size(kVowels))];
  }
  return w;
}

std::vector<std::string> make_vocab(Rng& rng, std::size_t n) {
  std::set<std::string> seen;
  std::vector<std::string> out;
  while (out.size() < n) {
    std::string w = make_word(rng);
    if (seen.insert(w).second) out.push_back(std::move(w));
  }
  return out;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::string padded_id(char prefix, int i, int n) {
  const int width = std::max(4, static_cast<int>(std::to_string(n).size()));
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%c%0*d", prefix, width, i);
  return buf;
}

}  // namespace

EmbeddedCorpus synthesize_corpus(const SynthConfig& cfg) {
  if (cfg.t_true < 2) fail(ErrorKind::InvalidConfig, "t_true must be at least 2");
  if (!(cfg.psa_fraction > 0.0 && cfg.psa_fraction < 1.0)) {
    fail(ErrorKind::InvalidConfig, "psa_fraction must lie in (0, 1)");
  }
  if (cfg.n_persons < 2) fail(ErrorKind::InvalidConfig, "need at least 2 persons");
  if (cfg.subs_per_doc < 2) fail(ErrorKind::InvalidConfig, "need at least 2 sub-sentences per document");
  if (cfg.dim <= 0) fail(ErrorKind::InvalidConfig, "dimension must be positive");

  Rng rng(derive_seed(cfg.seed, "synth"));
  const int D = cfg.dim;
  const auto T = static_cast<std::size_t>(cfg.t_true);

  // latent geometry
  const Vec salience = random_direction(rng, D);
  const Vec background = random_direction(rng, D);
  std::vector<Vec> specific(T), cluster_mean(T);
  for (std::size_t c = 0; c < T; ++c) {
    specific[c] = random_direction(rng, D);
    Vec m = specific[c];
    axpy(cfg.salience_weight, salience, m);
    const auto f = normalized_f32(m);
    cluster_mean[c] = to_vec(f);
  }
  // per-aspect contribution to the grade, evenly spread then shuffled
  std::vector<double> aspect_merit(T);
  for (std::size_t c = 0; c < T; ++c) aspect_merit[c] = static_cast<double>(c) / static_cast<double>(T - 1);
  rng.shuffle(aspect_merit);

  // vocabularies
  std::vector<std::vector<std::string>> cluster_vocab(T);
  for (auto& v : cluster_vocab) v = make_vocab(rng, 12);
  const auto generic_vocab = make_vocab(rng, 300);
  const auto expert_vocab = make_vocab(rng, 24);
  const int n_experts = 12;

  EmbeddedCorpus corpus;
  corpus.dim = D;
  corpus.planted_truth.emplace();

  const double expected_planted = cfg.psa_fraction * cfg.subs_per_doc;
  for (int p = 0; p < cfg.n_persons; ++p) {
    const std::string person_id = padded_id('p', p, cfg.n_persons);
    const std::string doc_id = padded_id('d', p, cfg.n_persons);
    const Vec identity = random_direction(rng, D);
    const std::string name = make_word(rng) + make_word(rng);

    // two distinct aspects with mixing weights
    const auto aspects = rng.sample_without_replacement(T, 2);
    const double w0 = rng.uniform(0.2, 0.8);
    const double weights[2] = {w0, 1.0 - w0};
    Vec theme(static_cast<std::size_t>(D), 0.0);
    for (int a = 0; a < 2; ++a) axpy(weights[a], specific[aspects[a]], theme);
    theme = to_vec(normalized_f32(theme));
    const double merit = weights[0] * aspect_merit[aspects[0]] + weights[1] * aspect_merit[aspects[1]];
    const double score = corpus.score_range.min + (corpus.score_range.max - corpus.score_range.min) * merit;

    int n_planted = static_cast<int>(std::floor(expected_planted));
    if (rng.bernoulli(expected_planted - n_planted)) ++n_planted;
    n_planted = std::clamp(n_planted, 1, cfg.subs_per_doc - 1);
    const auto planted_pos = rng.sample_without_replacement(static_cast<std::size_t>(cfg.subs_per_doc),
                                                            static_cast<std::size_t>(n_planted));
    std::vector<bool> is_planted(static_cast<std::size_t>(cfg.subs_per_doc), false);
    for (auto pos : planted_pos) is_planted[pos] = true;

    SensitiveDocument doc;
    doc.doc_id = doc_id;
    doc.person_id = person_id;
    struct PlantedInfo {
      std::size_t aspect;
      std::vector<std::string> words;
      Vec embedding;
    };
    std::vector<PlantedInfo> planted;
    for (int j = 0; j < cfg.subs_per_doc; ++j) {
      SubSentence s;
      s.id = j;
      s.source = Source::Sensitive;
      Vec e(static_cast<std::size_t>(D), 0.0);
      if (is_planted[static_cast<std::size_t>(j)]) {
        const std::size_t aspect = aspects[rng.uniform() < weights[0] ? 0 : 1];
        axpy(1.0, cluster_mean[aspect], e);
        axpy(cfg.planted_identity, identity, e);
        axpy(cfg.planted_noise, noise(rng, D), e);
        std::vector<std::string> words;
        const std::size_t n_words = 5 + rng.index(3);
        for (std::size_t w = 0; w < n_words; ++w) {
          words.push_back(cluster_vocab[aspect][rng.index(cluster_vocab[aspect].size())]);
        }
        std::vector<std::string> shown = words;
        if (rng.bernoulli(0.5)) shown.insert(shown.begin(), name);
        s.text = join_words(shown);
        s.embedding = normalized_f32(e);
        planted.push_back({aspect, std::move(words), to_vec(s.embedding)});
      } else {
        axpy(cfg.filler_background, background, e);
        axpy(cfg.filler_identity, identity, e);
        axpy(cfg.filler_theme, theme, e);
        axpy(cfg.filler_noise, noise(rng, D), e);
        std::vector<std::string> words;
        const std::size_t n_words = 6 + rng.index(5);
        for (std::size_t w = 0; w < n_words; ++w) {
          words.push_back(generic_vocab[rng.index(generic_vocab.size())]);
        }
        s.text = join_words(words);
        s.embedding = normalized_f32(e);
      }
      doc.sub_sentences.push_back(std::move(s));
    }
    (*corpus.planted_truth)[doc_id] = is_planted;
    corpus.documents.push_back(std::move(doc));

    // expert notes: noisy paraphrases of a non-empty subset of planted items
    const std::size_t n_notes = 2 + rng.index(4);
    const auto experts = rng.sample_without_replacement(n_experts, n_notes);
    for (std::size_t e = 0; e < n_notes; ++e) {
      ReferenceNote note;
      note.person_id = person_id;
      note.expert_id = padded_id('e', static_cast<int>(experts[e]), n_experts);
      std::vector<std::size_t> covered;
      for (std::size_t k = 0; k < planted.size(); ++k) {
        if (rng.bernoulli(0.7)) covered.push_back(k);
      }
      if (covered.empty()) covered.push_back(rng.index(planted.size()));
      int sid = 0;
      for (auto k : covered) {
        const auto& src = planted[k];
        std::vector<std::string> words{expert_vocab[rng.index(expert_vocab.size())]};
        for (const auto& w : src.words) {
          if (rng.bernoulli(0.75)) words.push_back(w);
        }
        words.push_back(expert_vocab[rng.index(expert_vocab.size())]);
        Vec emb = src.embedding;
        axpy(cfg.note_noise, noise(rng, D), emb);
        SubSentence s;
        s.id = sid++;
        s.source = Source::Reference;
        s.text = join_words(words);
        s.embedding = normalized_f32(emb);
        note.sub_sentences.push_back(std::move(s));
      }
      const double g = std::clamp(score + rng.normal(0.0, cfg.note_grade_noise), corpus.score_range.min,
                                  corpus.score_range.max);
      note.grade_score = std::round(g * 10.0) / 10.0;
      corpus.notes.push_back(std::move(note));
    }
    corpus.labels[person_id] = aggregate_grades(corpus.notes_of(person_id));
  }
  corpus.validate();
  return corpus;
}

// ---------------------------------------------------------------------------

namespace {

json sub_to_json(const SubSentence& s) {
  const auto bytes = pack_f32_le(s.embedding);
  return json{{"id", s.id},
              {"text", s.text},
              {"embedding", base64_encode({reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()})}};
}

SubSentence sub_from_json(const json& j, Source source) {
  SubSentence s;
  s.id = j.at("id").get<int>();
  s.text = j.at("text").get<std::string>();
  const auto raw = base64_decode(j.at("embedding").get<std::string>());
  s.embedding = unpack_f32_le(raw);
  s.source = source;
  return s;
}

}  // namespace

std::string serialize_corpus(const EmbeddedCorpus& corpus) {
  std::ostringstream out;
  json header{{"kind", "header"},
              {"format", "aspcorp"},
              {"version", 1},
              {"dim", corpus.dim},
              {"score_min", corpus.score_range.min},
              {"score_max", corpus.score_range.max},
              {"has_planted_truth", corpus.planted_truth.has_value()}};
  out << header.dump() << '\n';
  for (const auto& d : corpus.documents) {
    json subs = json::array();
    for (const auto& s : d.sub_sentences) subs.push_back(sub_to_json(s));
    json rec{{"kind", "document"}, {"doc_id", d.doc_id}, {"person_id", d.person_id}, {"sub_sentences", subs}};
    if (corpus.planted_truth) {
      json ids = json::array();
      const auto& flags = corpus.planted_truth->at(d.doc_id);
      for (std::size_t i = 0; i < flags.size(); ++i) {
        if (flags[i]) ids.push_back(d.sub_sentences[i].id);
      }
      rec["planted_ids"] = ids;
    }
    out << rec.dump() << '\n';
  }
  for (const auto& n : corpus.notes) {
    json subs = json::array();
    for (const auto& s : n.sub_sentences) subs.push_back(sub_to_json(s));
    json rec{{"kind", "note"},
             {"person_id", n.person_id},
             {"expert_id", n.expert_id},
             {"grade_score", n.grade_score ? json(*n.grade_score) : json(nullptr)},
             {"sub_sentences", subs}};
    out << rec.dump() << '\n';
  }
  for (const auto& [p, g] : corpus.labels) {
    out << json{{"kind", "label"}, {"person_id", p}, {"grade", to_string(g)}}.dump() << '\n';
  }
  return out.str();
}

EmbeddedCorpus parse_corpus(const std::string& text) {
  EmbeddedCorpus corpus;
  std::istringstream in(text);
  std::string line;
  bool seen_header = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      fail(ErrorKind::Format, "corpus line " + std::to_string(line_no) + ": " + e.what());
    }
    try {
      const auto kind = rec.at("kind").get<std::string>();
      if (kind == "header") {
        if (rec.value("format", std::string{}) != "aspcorp") fail(ErrorKind::Format, "not an aspcorp file");
        if (rec.at("version").get<int>() != 1) {
          fail(ErrorKind::VersionMismatch, "unsupported corpus version " + rec.at("version").dump());
        }
        corpus.dim = rec.at("dim").get<int>();
        corpus.score_range.min = rec.value("score_min", 65.0);
        corpus.score_range.max = rec.value("score_max", 100.0);
        if (rec.value("has_planted_truth", false)) corpus.planted_truth.emplace();
        seen_header = true;
        continue;
      }
      if (!seen_header) fail(ErrorKind::Format, "corpus record before header");
      if (kind == "document") {
        SensitiveDocument d;
        d.doc_id = rec.at("doc_id").get<std::string>();
        d.person_id = rec.at("person_id").get<std::string>();
        for (const auto& s : rec.at("sub_sentences")) d.sub_sentences.push_back(sub_from_json(s, Source::Sensitive));
        if (corpus.planted_truth) {
          std::vector<bool> flags(d.sub_sentences.size(), false);
          const auto ids = rec.at("planted_ids").get<std::vector<int>>();
          for (int id : ids) {
            auto it = std::find_if(d.sub_sentences.begin(), d.sub_sentences.end(),
                                   [&](const SubSentence& s) { return s.id == id; });
            if (it == d.sub_sentences.end()) fail(ErrorKind::Format, "planted id not in document " + d.doc_id);
            flags[static_cast<std::size_t>(it - d.sub_sentences.begin())] = true;
          }
          (*corpus.planted_truth)[d.doc_id] = std::move(flags);
        }
        corpus.documents.push_back(std::move(d));
      } else if (kind == "note") {
        ReferenceNote n;
        n.person_id = rec.at("person_id").get<std::string>();
        n.expert_id = rec.at("expert_id").get<std::string>();
        if (!rec.at("grade_score").is_null()) n.grade_score = rec.at("grade_score").get<double>();
        for (const auto& s : rec.at("sub_sentences")) n.sub_sentences.push_back(sub_from_json(s, Source::Reference));
        corpus.notes.push_back(std::move(n));
      } else if (kind == "label") {
        corpus.labels[rec.at("person_id").get<std::string>()] = grade_from_string(rec.at("grade").get<std::string>());
      } else {
        fail(ErrorKind::Format, "unknown record kind '" + kind + "'");
      }
    } catch (const json::exception& e) {
      fail(ErrorKind::Format, "corpus line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!seen_header) fail(ErrorKind::Format, "corpus has no header record");
  corpus.validate();
  return corpus;
}

void save_corpus(const EmbeddedCorpus& corpus, const std::string& path) {
  write_file_atomic(path, serialize_corpus(corpus));
}

EmbeddedCorpus load_corpus(const std::string& path) { return parse_corpus(read_file(path)); }

// ---------------------------------------------------------------------------

std::vector<std::string> split_on_punctuation(const std::string& text) {
  static const std::vector<std::string> kMarks = {".", "!", "?", ";", ",", ":", "\n",
                                                  "。", "！", "？", "；", "，", "、", "："};
  const auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return std::string{};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  };
  std::vector<std::string> out;
  std::string current;
  std::size_t i = 0;
  while (i < text.size()) {
    bool matched = false;
    for (const auto& m : kMarks) {
      if (text.compare(i, m.size(), m) == 0) {
        // A bare mark with no content before it is dropped.
        if (!trim(current).empty()) out.push_back(trim(m == "\n" ? current : current + m));
        current.clear();
        i += m.size();
        matched = true;
        break;
      }
    }
    if (!matched) current += text[i++];
  }
  auto chunk = trim(current);
  if (!chunk.empty()) out.push_back(std::move(chunk));
  return out;
}

EmbeddedCorpus ingest_raw(const std::string& raw_jsonl, int dim, std::uint64_t seed) {
  EmbeddedCorpus corpus;
  corpus.dim = dim;
  std::istringstream in(raw_jsonl);
  std::string line;
  const auto embed_all = [&](const std::string& text, Source source) {
    std::vector<SubSentence> subs;
    int id = 0;
    for (auto& chunk : split_on_punctuation(text)) {
      SubSentence s;
      s.id = id++;
      s.embedding = fallback_encode(chunk, dim, seed);
      s.text = std::move(chunk);
      s.source = source;
      subs.push_back(std::move(s));
    }
    return subs;
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      fail(ErrorKind::Format, std::string("raw record: ") + e.what());
    }
    SensitiveDocument doc;
    doc.person_id = rec.at("person_id").get<std::string>();
    doc.doc_id = rec.value("doc_id", doc.person_id);
    doc.sub_sentences = embed_all(rec.at("doc").get<std::string>(), Source::Sensitive);
    if (doc.sub_sentences.empty()) fail(ErrorKind::InvalidInput, "empty document for " + doc.person_id);
    for (const auto& n : rec.value("notes", json::array())) {
      ReferenceNote note;
      note.person_id = doc.person_id;
      note.expert_id = n.at("expert_id").get<std::string>();
      if (n.contains("grade") && !n.at("grade").is_null()) note.grade_score = n.at("grade").get<double>();
      note.sub_sentences = embed_all(n.at("text").get<std::string>(), Source::Reference);
      if (!note.sub_sentences.empty()) corpus.notes.push_back(std::move(note));
    }
    corpus.documents.push_back(std::move(doc));
  }
  for (const auto& d : corpus.documents) {
    const auto notes = corpus.notes_of(d.person_id);
    const bool scored = std::any_of(notes.begin(), notes.end(), [](auto* n) { return n->grade_score.has_value(); });
    if (scored) corpus.labels[d.person_id] = aggregate_grades(notes);
  }
  corpus.validate();
  return corpus;
}

}  // namespace adeid
