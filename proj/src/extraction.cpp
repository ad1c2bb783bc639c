#include "adeid/extraction.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <set>
#include <sstream>

#include "json.hpp"

namespace adeid::extraction {

using json = nlohmann::json;

Standardized standardize_rows(const Matrix& cas) {
  Standardized out;
  out.z = Matrix::Zero(cas.rows(), cas.cols());
  out.constant_row.assign(static_cast<std::size_t>(cas.rows()), false);
  const double n = static_cast<double>(cas.cols());
  for (Eigen::Index i = 0; i < cas.rows(); ++i) {
    const double mean = cas.row(i).sum() / n;
    const double var = (cas.row(i).array() - mean).square().sum() / n;
    const double sd = std::sqrt(var);
    // A relative floor keeps rounding noise on a constant row from looking like signal.
    if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
      out.constant_row[static_cast<std::size_t>(i)] = true;
      continue;
    }
    out.z.row(i) = (cas.row(i).array() - mean) / sd;
  }
  return out;
}

BitMatrix standardize_and_binarize(const Matrix& cas, double alpha) {
  if (cas.cols() < 2) fail(ErrorKind::DegenerateDocument, "standardisation needs at least 2 sub-sentences");
  const auto s = standardize_rows(cas);
  BitMatrix bits = BitMatrix::Constant(cas.rows(), cas.cols(), false);
  for (Eigen::Index i = 0; i < cas.rows(); ++i) {
    if (s.constant_row[static_cast<std::size_t>(i)]) continue;
    for (Eigen::Index j = 0; j < cas.cols(); ++j) bits(i, j) = s.z(i, j) >= alpha;
  }
  return bits;
}

std::vector<bool> extraction_mask(const BitMatrix& bits, int beta) {
  if (beta < 0) fail(ErrorKind::InvalidConfig, "beta must be non-negative");
  std::vector<bool> mask(static_cast<std::size_t>(bits.cols()));
  for (Eigen::Index j = 0; j < bits.cols(); ++j) {
    mask[static_cast<std::size_t>(j)] = bits.col(j).count() >= beta;
  }
  return mask;
}

double aspect_relevance_score(const Matrix& cas, Eigen::Index j) {
  if (j < 0 || j >= cas.cols()) fail(ErrorKind::InvalidInput, "sub-sentence index out of range");
  return cas.col(j).mean();
}

std::vector<double> aspect_relevance_scores(const Matrix& cas) {
  std::vector<double> out(static_cast<std::size_t>(cas.cols()));
  for (Eigen::Index j = 0; j < cas.cols(); ++j) out[static_cast<std::size_t>(j)] = cas.col(j).mean();
  return out;
}

AspectBits column_bits(const BitMatrix& bits, Eigen::Index j) {
  if (bits.rows() > 64) fail(ErrorKind::InvalidConfig, "at most 64 aspect tokens are supported");
  AspectBits b = 0;
  for (Eigen::Index i = 0; i < bits.rows(); ++i) {
    if (bits(i, j)) b |= AspectBits{1} << i;
  }
  return b;
}

std::string bits_to_hex(AspectBits bits, int t) {
  static const char* digits = "0123456789abcdef";
  const int width = std::max(1, (t + 3) / 4);
  std::string out(static_cast<std::size_t>(width), '0');
  for (int k = 0; k < width; ++k) out[static_cast<std::size_t>(width - 1 - k)] = digits[(bits >> (4 * k)) & 0xF];
  return out;
}

AspectBits bits_from_hex(const std::string& hex) {
  if (hex.empty() || hex.size() > 16) fail(ErrorKind::Format, "bad aspect bit string '" + hex + "'");
  std::size_t used = 0;
  AspectBits b = 0;
  try {
    b = std::stoull(hex, &used, 16);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != hex.size()) fail(ErrorKind::Format, "bad aspect bit string '" + hex + "'");
  return b;
}

std::vector<int> ExtractionResult::kept_ids() const {
  std::vector<int> ids;
  ids.reserve(kept.size());
  for (const auto& k : kept) ids.push_back(k.id);
  return ids;
}

ExtractionResult extract_document(const SensitiveDocument& document, const xalign::XAlignParams& params,
                                  const xalign::XAlignConfig& config, const ExtractionSettings& settings) {
  if (!params.trained) fail(ErrorKind::Untrained, "extraction requires trained parameters");
  const auto fwd = xalign::forward_pass(xalign::QueryKind::Aspect, Matrix(), document, params, config,
                                        xalign::Mode::Infer);
  const auto bits = standardize_and_binarize(fwd.cas, settings.alpha);
  const auto mask = extraction_mask(bits, settings.beta);

  ExtractionResult r;
  r.doc_id = document.doc_id;
  r.person_id = document.person_id;
  r.t = static_cast<int>(fwd.cas.rows());
  r.k_len = static_cast<int>(fwd.cas.cols());
  r.ars = aspect_relevance_scores(fwd.cas);
  std::vector<std::size_t> order(document.sub_sentences.size());
  for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return document.sub_sentences[a].id < document.sub_sentences[b].id;
  });
  for (std::size_t j : order) {
    if (!mask[j]) continue;
    r.kept.push_back({document.sub_sentences[j].id, column_bits(bits, static_cast<Eigen::Index>(j)), r.ars[j]});
  }
  if (fwd.logits.size() == kNumGradeClasses) {
    Eigen::Index best = 0;
    fwd.logits.maxCoeff(&best);
    r.predicted_class = class_from_index(static_cast<int>(best));
  }
  r.extraction_ratio = static_cast<double>(r.kept.size()) / r.k_len;
  return r;
}

std::vector<ExtractionResult> extract_corpus(const EmbeddedCorpus& corpus, const xalign::XAlignParams& params,
                                             const xalign::XAlignConfig& config,
                                             const ExtractionSettings& settings) {
  std::vector<ExtractionResult> out;
  out.reserve(corpus.documents.size());
  for (const auto& d : corpus.documents) out.push_back(extract_document(d, params, config, settings));
  return out;
}

ExtractionResult restrict_kept(const ExtractionResult& result, const std::vector<int>& allowed) {
  const std::set<int> ok(allowed.begin(), allowed.end());
  ExtractionResult r = result;
  r.kept.clear();
  for (const auto& k : result.kept) {
    if (ok.count(k.id)) r.kept.push_back(k);
  }
  r.extraction_ratio = r.k_len > 0 ? static_cast<double>(r.kept.size()) / r.k_len : 0.0;
  return r;
}

std::vector<ExtractionResult> random_baseline(const std::vector<ExtractionResult>& matched, std::uint64_t seed) {
  std::vector<ExtractionResult> out;
  out.reserve(matched.size());
  for (const auto& m : matched) {
    Rng rng(derive_seed(seed, "random-extract/" + m.doc_id));
    auto picks = rng.sample_without_replacement(static_cast<std::size_t>(m.k_len), m.kept.size());
    std::sort(picks.begin(), picks.end());
    ExtractionResult r = m;
    r.kept.clear();
    // Synthetic and ingested documents number their sub-sentences 0..k_len-1.
    for (auto j : picks) r.kept.push_back({static_cast<int>(j), 0, m.ars.empty() ? 0.0 : m.ars[j]});
    r.extraction_ratio = m.k_len > 0 ? static_cast<double>(r.kept.size()) / m.k_len : 0.0;
    out.push_back(std::move(r));
  }
  return out;
}

ExtractionScores score_extraction(const std::vector<ExtractionResult>& results, const Truth& truth) {
  ExtractionScores s;
  std::size_t tp = 0, kept = 0, positives = 0;
  double ratio_sum = 0.0;
  for (const auto& r : results) {
    const auto it = truth.find(r.doc_id);
    if (it == truth.end()) fail(ErrorKind::InvalidInput, "no extraction truth for document " + r.doc_id);
    const auto& flags = it->second;
    std::size_t doc_tp = 0;
    for (const auto& k : r.kept) {
      if (k.id < 0 || static_cast<std::size_t>(k.id) >= flags.size()) {
        fail(ErrorKind::InvalidInput, "kept id outside truth for document " + r.doc_id);
      }
      if (flags[static_cast<std::size_t>(k.id)]) ++doc_tp;
    }
    const auto doc_pos = static_cast<std::size_t>(std::count(flags.begin(), flags.end(), true));
    const double p = r.kept.empty() ? 0.0 : static_cast<double>(doc_tp) / r.kept.size();
    const double rc = doc_pos == 0 ? 0.0 : static_cast<double>(doc_tp) / doc_pos;
    s.macro_precision += p;
    s.macro_recall += rc;
    s.macro_f1 += (p > 0 && rc > 0) ? 2 * p * rc / (p + rc) : 0.0;
    tp += doc_tp;
    kept += r.kept.size();
    positives += doc_pos;
    ratio_sum += r.extraction_ratio;
  }
  s.documents = results.size();
  if (results.empty()) return s;
  const double n = static_cast<double>(results.size());
  s.macro_precision /= n;
  s.macro_recall /= n;
  s.macro_f1 /= n;
  s.mean_extraction_ratio = ratio_sum / n;
  s.precision = kept == 0 ? 0.0 : static_cast<double>(tp) / kept;
  s.recall = positives == 0 ? 0.0 : static_cast<double>(tp) / positives;
  s.f1 = (s.precision > 0 && s.recall > 0) ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

std::string result_to_jsonl(const ExtractionResult& r) {
  json kept_ids = json::array(), bits = json::array(), ars = json::array();
  for (const auto& k : r.kept) {
    kept_ids.push_back(k.id);
    bits.push_back(bits_to_hex(k.bits, r.t));
    ars.push_back(k.ars);
  }
  const json j = {{"kind", "extraction"},
                  {"doc_id", r.doc_id},
                  {"person_id", r.person_id},
                  {"t", r.t},
                  {"k_len", r.k_len},
                  {"kept", kept_ids},
                  {"bits", bits},
                  {"ars", ars},
                  {"ars_all", r.ars},
                  {"predicted_class", to_string(r.predicted_class)},
                  {"extraction_ratio", r.extraction_ratio}};
  return j.dump();
}

ExtractionResult result_from_jsonl(const std::string& line) {
  try {
    const auto j = json::parse(line);
    ExtractionResult r;
    r.doc_id = j.at("doc_id");
    r.person_id = j.at("person_id");
    r.t = j.at("t");
    r.k_len = j.at("k_len");
    const auto& ids = j.at("kept");
    const auto& bits = j.at("bits");
    const auto& ars = j.at("ars");
    if (ids.size() != bits.size() || ids.size() != ars.size()) fail(ErrorKind::Format, "ragged extraction record");
    for (std::size_t i = 0; i < ids.size(); ++i) {
      r.kept.push_back({ids[i].get<int>(), bits_from_hex(bits[i]), ars[i].get<double>()});
    }
    r.ars = j.at("ars_all").get<std::vector<double>>();
    r.predicted_class = grade_from_string(j.at("predicted_class"));
    r.extraction_ratio = j.at("extraction_ratio");
    return r;
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("extraction record: ") + e.what());
  }
}

std::string serialize_results(const std::vector<ExtractionResult>& results, const std::string& header_json) {
  std::string out = header_json + "\n";
  for (const auto& r : results) out += result_to_jsonl(r) + "\n";
  return out;
}

std::vector<ExtractionResult> parse_results(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<ExtractionResult> out;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      json h;
      try {
        h = json::parse(line);
      } catch (const json::exception& e) {
        fail(ErrorKind::Format, std::string("extraction header: ") + e.what());
      }
      if (h.value("kind", "") != "header" || h.value("format", "") != "extraction") {
        fail(ErrorKind::Format, "missing extraction header");
      }
      if (h.value("version", 0) != 1) fail(ErrorKind::VersionMismatch, "unsupported extraction report version");
      continue;
    }
    out.push_back(result_from_jsonl(line));
  }
  if (first) fail(ErrorKind::Format, "empty extraction report");
  return out;
}

}  // namespace adeid::extraction
