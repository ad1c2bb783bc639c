#include "adeid/arcss.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

namespace adeid::arcss {

using json = nlohmann::json;

std::size_t lcs_length(const std::u32string& a, const std::u32string& b) {
  const std::u32string& shorter = a.size() <= b.size() ? a : b;
  const std::u32string& longer = a.size() <= b.size() ? b : a;
  std::vector<std::size_t> prev(shorter.size() + 1, 0), cur(shorter.size() + 1, 0);
  for (char32_t c : longer) {
    for (std::size_t j = 1; j <= shorter.size(); ++j) {
      cur[j] = c == shorter[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[shorter.size()];
}

double lcss(std::string_view a, std::string_view b) {
  const auto sa = utf8_to_scalars(a);
  const auto sb = utf8_to_scalars(b);
  const std::size_t longest = std::max(sa.size(), sb.size());
  if (longest == 0) return 1.0;
  return static_cast<double>(lcs_length(sa, sb)) / static_cast<double>(longest);
}

std::vector<int> descending_ranks(const std::vector<double>& scores, const std::vector<int>& ids) {
  if (scores.size() != ids.size()) fail(ErrorKind::InvalidInput, "score and id lists differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (scores[x] != scores[y]) return scores[x] > scores[y];
    return ids[x] < ids[y];
  });
  std::vector<int> rank(scores.size());
  for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = static_cast<int>(r + 1);
  return rank;
}

std::vector<RankedSubSentence> fuse_ranks(const std::vector<double>& ars, const std::vector<double>& lcss_scores,
                                          const std::vector<int>& ids) {
  if (ars.size() != lcss_scores.size()) fail(ErrorKind::InvalidInput, "ARS and LCSS lists differ in length");
  std::vector<int> own_ids = ids;
  if (own_ids.empty()) {
    own_ids.resize(ars.size());
    std::iota(own_ids.begin(), own_ids.end(), 0);
  }
  const auto ra = descending_ranks(ars, own_ids);
  const auto rl = descending_ranks(lcss_scores, own_ids);
  std::vector<RankedSubSentence> out(ars.size());
  for (std::size_t i = 0; i < ars.size(); ++i) out[i] = {own_ids[i], ra[i], rl[i], ra[i] + rl[i]};
  std::sort(out.begin(), out.end(), [](const RankedSubSentence& x, const RankedSubSentence& y) {
    if (x.total_rank != y.total_rank) return x.total_rank < y.total_rank;
    return x.id < y.id;
  });
  return out;
}

ArsTable ars_table(const std::vector<extraction::ExtractionResult>& results, const EmbeddedCorpus& corpus) {
  ArsTable table;
  std::map<std::string, const SensitiveDocument*> docs;
  for (const auto& d : corpus.documents) docs[d.doc_id] = &d;
  for (const auto& r : results) {
    const auto it = docs.find(r.doc_id);
    if (it == docs.end()) continue;
    const auto& subs = it->second->sub_sentences;
    if (subs.size() != r.ars.size()) fail(ErrorKind::InvalidInput, "ARS length mismatch for " + r.doc_id);
    auto& row = table[r.doc_id];
    for (std::size_t j = 0; j < subs.size(); ++j) row[subs[j].id] = r.ars[j];
  }
  return table;
}

std::vector<RankedSubSentence> rank_document(const SensitiveDocument& document, const ArsTable& ars,
                                             const std::string& reference_text) {
  const auto it = ars.find(document.doc_id);
  if (it == ars.end()) fail(ErrorKind::InvalidInput, "no ARS for document " + document.doc_id);
  const auto reference = utf8_to_scalars(reference_text);
  std::vector<double> a, l;
  std::vector<int> ids;
  for (const auto& s : document.sub_sentences) {
    const auto found = it->second.find(s.id);
    if (found == it->second.end()) fail(ErrorKind::InvalidInput, "no ARS for a sub-sentence of " + document.doc_id);
    a.push_back(found->second);
    const auto text = utf8_to_scalars(s.text);
    const std::size_t longest = std::max(text.size(), reference.size());
    l.push_back(longest == 0 ? 1.0 : static_cast<double>(lcs_length(text, reference)) / longest);
    ids.push_back(s.id);
  }
  return fuse_ranks(a, l, ids);
}

std::size_t negative_count(std::size_t n, std::size_t k_keep) {
  if (n <= k_keep) return 0;
  return (n - k_keep) / 5;  // floor(0.2 (n - k)) in exact arithmetic
}

namespace {

Matrix rows_to_matrix(const std::vector<const std::vector<float>*>& rows, int dim) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int j = 0; j < dim; ++j) m(static_cast<Eigen::Index>(i), j) = (*rows[i])[static_cast<std::size_t>(j)];
  }
  return m;
}

}  // namespace

TrainingSamples select_training_samples(const EmbeddedCorpus& corpus, const ArsTable& ars, std::size_t k_keep) {
  std::vector<const std::vector<float>*> pos, neg;
  TrainingSamples out;
  for (const auto& n : corpus.notes) {
    for (const auto& s : n.sub_sentences) pos.push_back(&s.embedding);
  }
  for (const auto& d : corpus.documents) {
    if (corpus.notes_of(d.person_id).empty()) continue;
    const auto ranked = rank_document(d, ars, concatenated_note_text(corpus, d.person_id));
    const std::size_t count = negative_count(ranked.size(), k_keep);
    std::map<int, const SubSentence*> by_id;
    for (const auto& s : d.sub_sentences) by_id[s.id] = &s;
    for (std::size_t i = ranked.size() - count; i < ranked.size(); ++i) {
      neg.push_back(&by_id.at(ranked[i].id)->embedding);
      out.negatives.push_back({d.doc_id, ranked[i].id});
    }
  }
  out.relevant = rows_to_matrix(pos, corpus.dim);
  out.non_relevant = rows_to_matrix(neg, corpus.dim);
  return out;
}

double RelevanceClassifier::probability(const Vector& embedding) const {
  const double s = weights.dot(embedding) + bias;
  return 1.0 / (1.0 + std::exp(-s));
}

double RelevanceClassifier::probability(const std::vector<float>& embedding) const {
  Vector v(static_cast<Eigen::Index>(embedding.size()));
  for (std::size_t i = 0; i < embedding.size(); ++i) v(static_cast<Eigen::Index>(i)) = embedding[i];
  return probability(v);
}

RelevanceClassifier train_relevance_classifier(const Matrix& relevant, const Matrix& non_relevant,
                                               std::uint64_t seed, double l2, int max_steps) {
  if (relevant.rows() == 0 || non_relevant.rows() == 0) {
    fail(ErrorKind::InvalidInput, "relevance classifier needs both relevant and non-relevant samples");
  }
  if (relevant.cols() != non_relevant.cols()) fail(ErrorKind::Shape, "sample dimensions differ");
  const Eigen::Index d = relevant.cols();
  const Eigen::Index n = relevant.rows() + non_relevant.rows();
  Matrix x(n, d + 1);
  x.topLeftCorner(relevant.rows(), d) = relevant;
  x.bottomLeftCorner(non_relevant.rows(), d) = non_relevant;
  x.col(d).setOnes();
  Vector y(n), w(n);
  const double wp = static_cast<double>(n) / (2.0 * static_cast<double>(relevant.rows()));
  const double wn = static_cast<double>(n) / (2.0 * static_cast<double>(non_relevant.rows()));
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool positive = i < relevant.rows();
    y(i) = positive ? 1.0 : 0.0;
    w(i) = positive ? wp : wn;
  }
  Vector reg = Vector::Constant(d + 1, l2 * static_cast<double>(n));
  reg(d) = 0.0;  // bias is not penalised

  Vector theta = Vector::Zero(d + 1);
  RelevanceClassifier out;
  for (int step = 0; step < max_steps; ++step) {
    const Vector p = (1.0 + (-(x * theta).array()).exp()).inverse().matrix();
    const Vector grad = x.transpose() * (w.array() * (p - y).array()).matrix() + reg.cwiseProduct(theta);
    const Vector s = (w.array() * p.array() * (1.0 - p.array())).max(1e-12).matrix();
    Matrix h = x.transpose() * s.asDiagonal() * x;
    h.diagonal() += reg;
    h.diagonal().array() += 1e-9;
    const Vector delta = h.ldlt().solve(grad);
    theta -= delta;
    out.newton_steps = step + 1;
    if (delta.lpNorm<Eigen::Infinity>() < 1e-10) break;
  }
  out.weights = theta.head(d);
  out.bias = theta(d);
  out.n_relevant = static_cast<std::size_t>(relevant.rows());
  out.n_non_relevant = static_cast<std::size_t>(non_relevant.rows());
  out.seed = seed;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double p = out.probability(Vector(x.row(i).head(d).transpose()));
    if ((p >= 0.5) == (y(i) > 0.5)) ++correct;
  }
  out.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return out;
}

DocumentFilterOutcome filter_document(const SensitiveDocument& document, const RelevanceClassifier& classifier,
                                      std::size_t k_keep, const RemovalRule& rule) {
  const std::size_t n = document.sub_sentences.size();
  std::vector<double> prob(n);
  std::vector<int> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    prob[i] = classifier.probability(document.sub_sentences[i].embedding);
    ids[i] = document.sub_sentences[i].id;
  }
  const auto rank = descending_ranks(prob, ids);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[static_cast<std::size_t>(rank[i] - 1)] = i;

  const std::size_t protect = std::max<std::size_t>(k_keep, 1);
  std::set<int> removed;
  if (n > protect) {
    if (rule.mode == RemovalMode::Fraction) {
      const auto count = static_cast<std::size_t>(std::floor(rule.fraction * static_cast<double>(n - k_keep) + 1e-9));
      for (std::size_t r = n; r > n - std::min(count, n - protect); --r) removed.insert(ids[order[r - 1]]);
    } else {
      for (std::size_t r = protect; r < n; ++r) {
        if (prob[order[r]] < rule.threshold) removed.insert(ids[order[r]]);
      }
    }
  }
  DocumentFilterOutcome out;
  out.doc_id = document.doc_id;
  for (int id : ids) (removed.count(id) ? out.removed : out.survivors).push_back(id);
  std::sort(out.removed.begin(), out.removed.end());
  std::sort(out.survivors.begin(), out.survivors.end());
  return out;
}

FilterPass apply_classifier(const EmbeddedCorpus& corpus, const RelevanceClassifier& classifier,
                            std::size_t k_keep, const RemovalRule& rule) {
  FilterPass pass;
  pass.corpus = corpus;
  for (auto& d : pass.corpus.documents) {
    auto outcome = filter_document(d, classifier, k_keep, rule);
    const std::set<int> gone(outcome.removed.begin(), outcome.removed.end());
    std::erase_if(d.sub_sentences, [&](const SubSentence& s) { return gone.count(s.id) > 0; });
    pass.outcomes.push_back(std::move(outcome));
  }
  return pass;
}

FilterPass apply_classifiers(const EmbeddedCorpus& corpus, const std::vector<RelevanceClassifier>& classifiers,
                             std::size_t k_keep, const RemovalRule& rule) {
  FilterPass pass{corpus, {}};
  for (const auto& c : classifiers) {
    auto next = apply_classifier(pass.corpus, c, k_keep, rule);
    pass.corpus = std::move(next.corpus);
    pass.outcomes = std::move(next.outcomes);
  }
  if (classifiers.empty()) {
    for (const auto& d : corpus.documents) {
      DocumentFilterOutcome o{d.doc_id, {}, {}};
      for (const auto& s : d.sub_sentences) o.survivors.push_back(s.id);
      pass.outcomes.push_back(std::move(o));
    }
  }
  return pass;
}

ArcssResult filter_corpus(const EmbeddedCorpus& corpus, const ArsTable& ars, const ArcssConfig& config) {
  if (config.iterations < 1) fail(ErrorKind::InvalidConfig, "ARCSS needs at least one iteration");
  if (config.removal.fraction < 0.0 || config.removal.fraction > 1.0) {
    fail(ErrorKind::InvalidConfig, "removal fraction must lie in [0, 1]");
  }
  ArcssResult result;
  result.filtered = corpus;
  for (int it = 1; it <= config.iterations; ++it) {
    const auto samples = select_training_samples(result.filtered, ars, config.k_keep);
    if (it > 1 && (samples.relevant.rows() == 0 || samples.non_relevant.rows() == 0)) {
      result.stopped_early = true;  // filtering left no negatives to learn from
      break;
    }
    auto clf = train_relevance_classifier(samples.relevant, samples.non_relevant,
                                          derive_seed(config.seed, "arcss/" + std::to_string(it)), config.l2);
    clf.iteration = it;
    auto pass = apply_classifier(result.filtered, clf, config.k_keep, config.removal);
    IterationReport rep;
    rep.iteration = it;
    rep.relevant = clf.n_relevant;
    rep.non_relevant = clf.n_non_relevant;
    rep.train_accuracy = clf.train_accuracy;
    for (const auto& o : pass.outcomes) {
      rep.removed += o.removed.size();
      rep.survivors += o.survivors.size();
    }
    rep.outcomes = std::move(pass.outcomes);
    result.filtered = std::move(pass.corpus);
    result.classifiers.push_back(std::move(clf));
    result.reports.push_back(std::move(rep));
  }
  return result;
}

const char* to_string(RemovalMode mode) { return mode == RemovalMode::Fraction ? "fraction" : "threshold"; }

RemovalMode removal_mode_from_string(const std::string& s) {
  if (s == "fraction") return RemovalMode::Fraction;
  if (s == "threshold") return RemovalMode::Threshold;
  fail(ErrorKind::InvalidConfig, "unknown ARCSS removal mode '" + s + "'");
}

std::string serialize_report(const ArcssResult& result, const ArcssConfig& config, const std::string& header_extra) {
  json header = {{"kind", "header"},
                 {"format", "arcss-report"},
                 {"version", 1},
                 {"k_keep", config.k_keep},
                 {"mode", to_string(config.removal.mode)},
                 {"fraction", config.removal.fraction},
                 {"threshold", config.removal.threshold},
                 {"iterations", config.iterations},
                 {"seed", config.seed},
                 {"l2", config.l2},
                 {"completed_iterations", result.reports.size()},
                 {"stopped_early", result.stopped_early}};
  if (!header_extra.empty()) header["provenance"] = json::parse(header_extra);
  std::string out = header.dump() + "\n";
  for (std::size_t i = 0; i < result.reports.size(); ++i) {
    const auto& r = result.reports[i];
    const auto& c = result.classifiers[i];
    json removed = json::object();
    for (const auto& o : r.outcomes) {
      if (!o.removed.empty()) removed[o.doc_id] = o.removed;
    }
    const json rec = {{"kind", "iteration"},
                      {"iteration", r.iteration},
                      {"relevant", r.relevant},
                      {"non_relevant", r.non_relevant},
                      {"train_accuracy", r.train_accuracy},
                      {"removed_total", r.removed},
                      {"survivors", r.survivors},
                      {"removed", removed},
                      {"classifier",
                       {{"weights", std::vector<double>(c.weights.data(), c.weights.data() + c.weights.size())},
                        {"bias", c.bias},
                        {"newton_steps", c.newton_steps},
                        {"seed", c.seed}}}};
    out += rec.dump() + "\n";
  }
  return out;
}

ParsedReport parse_report(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  ParsedReport out;
  bool have_header = false;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = json::parse(line);
      if (!have_header) {
        if (j.value("kind", "") != "header" || j.value("format", "") != "arcss-report") {
          fail(ErrorKind::Format, "missing ARCSS report header");
        }
        if (j.value("version", 0) != 1) fail(ErrorKind::VersionMismatch, "unsupported ARCSS report version");
        out.config.k_keep = j.at("k_keep");
        out.config.removal.mode = removal_mode_from_string(j.at("mode"));
        out.config.removal.fraction = j.at("fraction");
        out.config.removal.threshold = j.at("threshold");
        out.config.iterations = j.at("iterations");
        out.config.seed = j.at("seed");
        out.config.l2 = j.at("l2");
        have_header = true;
        continue;
      }
      RelevanceClassifier c;
      const auto w = j.at("classifier").at("weights").get<std::vector<double>>();
      c.weights = Eigen::Map<const Vector>(w.data(), static_cast<Eigen::Index>(w.size()));
      c.bias = j.at("classifier").at("bias");
      c.newton_steps = j.at("classifier").at("newton_steps");
      c.seed = j.at("classifier").at("seed");
      c.iteration = j.at("iteration");
      c.n_relevant = j.at("relevant");
      c.n_non_relevant = j.at("non_relevant");
      c.train_accuracy = j.at("train_accuracy");
      IterationReport r;
      r.iteration = c.iteration;
      r.relevant = c.n_relevant;
      r.non_relevant = c.n_non_relevant;
      r.train_accuracy = c.train_accuracy;
      r.removed = j.at("removed_total");
      r.survivors = j.at("survivors");
      out.classifiers.push_back(std::move(c));
      out.reports.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("ARCSS report: ") + e.what());
  }
  if (!have_header) fail(ErrorKind::Format, "empty ARCSS report");
  return out;
}

}  // namespace adeid::arcss
