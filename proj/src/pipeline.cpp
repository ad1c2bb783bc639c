#include "adeid/pipeline.hpp"

#include <charconv>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <sstream>

#include "json.hpp"

namespace adeid::pipeline {

using json = nlohmann::json;
namespace fs = std::filesystem;

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidConfig: return kExitUsage;
    case ErrorKind::MissingArtifact: return kExitMissingArtifact;
    case ErrorKind::Format:
    case ErrorKind::VersionMismatch: return kExitFormat;
    case ErrorKind::OutputExists: return kExitOutputExists;
    default: return kExitModule;
  }
}

// -- logging ---------------------------------------------------------------------

namespace {

LogLevel threshold() {
  static const LogLevel level = [] {
    const char* env = std::getenv("ADEID_LOG");
    const std::string v = env ? env : "warn";
    if (v == "error") return LogLevel::Error;
    if (v == "info") return LogLevel::Info;
    if (v == "debug") return LogLevel::Debug;
    return LogLevel::Warn;
  }();
  return level;
}

}  // namespace

void log(LogLevel level, const std::string& message) {
  static const char* names[] = {"error", "warn", "info", "debug"};
  if (static_cast<int>(level) <= static_cast<int>(threshold())) {
    std::cerr << "[adeid " << names[static_cast<int>(level)] << "] " << message << '\n';
  }
}

// -- config ------------------------------------------------------------------------

namespace {

template <typename T>
T parse_value(const std::string& key, const std::string& v) {
  if constexpr (std::is_same_v<T, bool>) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
  } else if constexpr (std::is_same_v<T, double>) {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used == v.size() && std::isfinite(d)) return d;
    } catch (const std::exception&) {
    }
  } else {
    T out{};
    const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec == std::errc{} && end == v.data() + v.size()) return out;
  }
  fail(ErrorKind::InvalidConfig, "bad value for " + key + ": '" + v + "'");
}

std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}
template <typename T>
std::string format_value(T v) {
  return std::to_string(v);
}

struct Field {
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&, const std::string&)> set;
};

template <typename T, typename Ref>
Field field(Ref ref) {
  return {[ref](const PipelineConfig& c) { return format_value(ref(const_cast<PipelineConfig&>(c))); },
          [ref](PipelineConfig& c, const std::string& key, const std::string& v) { ref(c) = parse_value<T>(key, v); }};
}

#define ADEID_FIELD(type, key, member) \
  { key, field<type>([](PipelineConfig& c) -> type& { return c.member; }) }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      ADEID_FIELD(std::uint64_t, "seed", seed),
      ADEID_FIELD(int, "synth.n_persons", synth.n_persons),
      ADEID_FIELD(int, "synth.t_true", synth.t_true),
      ADEID_FIELD(int, "synth.subs_per_doc", synth.subs_per_doc),
      ADEID_FIELD(double, "synth.psa_fraction", synth.psa_fraction),
      ADEID_FIELD(int, "synth.dim", synth.dim),
      ADEID_FIELD(int, "ingest.dim", ingest_dim),
      ADEID_FIELD(double, "split.test_fraction", test_fraction),
      ADEID_FIELD(int, "xalign.t", xalign.t),
      ADEID_FIELD(int, "xalign.m", xalign.m),
      ADEID_FIELD(double, "xalign.tau", xalign.tau),
      ADEID_FIELD(double, "xalign.tau_c", xalign.tau_c),
      ADEID_FIELD(double, "xalign.dropout", xalign.dropout_p),
      ADEID_FIELD(double, "xalign.a", xalign.a),
      ADEID_FIELD(double, "xalign.b", xalign.b),
      ADEID_FIELD(double, "xalign.lr", xalign.lr),
      ADEID_FIELD(double, "xalign.weight_decay", xalign.weight_decay),
      ADEID_FIELD(int, "xalign.epochs", xalign.epochs),
      ADEID_FIELD(int, "xalign.batch_size", xalign.batch_size),
      ADEID_FIELD(bool, "xalign.aux_enabled", xalign.aux_enabled),
      ADEID_FIELD(bool, "xalign.align_ablated", xalign.align_ablated),
      ADEID_FIELD(double, "extraction.alpha", extraction.alpha),
      ADEID_FIELD(int, "extraction.beta", extraction.beta),
      ADEID_FIELD(bool, "arcss.enabled", arcss_enabled),
      ADEID_FIELD(std::size_t, "arcss.k_keep", arcss.k_keep),
      ADEID_FIELD(int, "arcss.iterations", arcss.iterations),
      ADEID_FIELD(double, "arcss.fraction", arcss.removal.fraction),
      ADEID_FIELD(double, "arcss.threshold", arcss.removal.threshold),
      ADEID_FIELD(double, "arcss.l2", arcss.l2),
      ADEID_FIELD(int, "aks.k", aks_k),
      ADEID_FIELD(int, "eval.kmeans_k", kmeans_k),
      ADEID_FIELD(double, "eval.reid_ratio", reid.sample_ratio),
      ADEID_FIELD(double, "eval.reid_target", reid.target_accuracy),
      ADEID_FIELD(int, "eval.reid_max_iterations", reid.max_iterations),
      {"arcss.mode",
       {[](const PipelineConfig& c) { return std::string(arcss::to_string(c.arcss.removal.mode)); },
        [](PipelineConfig& c, const std::string&, const std::string& v) {
          c.arcss.removal.mode = arcss::removal_mode_from_string(v);
        }}},
      {"aks.class_mode",
       {[](const PipelineConfig& c) { return std::string(aks::to_string(c.class_mode)); },
        [](PipelineConfig& c, const std::string&, const std::string& v) { c.class_mode = aks::class_mode_from_string(v); }}},
      {"eval.classifier",
       {[](const PipelineConfig& c) { return std::string(eval::to_string(c.classifier)); },
        [](PipelineConfig& c, const std::string&, const std::string& v) {
          c.classifier = eval::classifier_kind_from_string(v);
        }}},
  };
  return table;
}

#undef ADEID_FIELD

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void PipelineConfig::set(const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) fail(ErrorKind::InvalidConfig, "unknown config key '" + key + "'");
  try {
    it->second.set(*this, key, value);
  } catch (const Error& e) {
    fail(ErrorKind::InvalidConfig, e.what());
  }
}

std::string PipelineConfig::get(const std::string& key) const {
  const auto it = fields().find(key);
  if (it == fields().end()) fail(ErrorKind::InvalidConfig, "unknown config key '" + key + "'");
  return it->second.get(*this);
}

std::vector<std::string> PipelineConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, f] : fields()) out.push_back(k);
  return out;
}

std::string PipelineConfig::canonical() const {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + " = " + f.get(*this) + "\n";
  return out;
}

std::string PipelineConfig::sha256() const { return sha256_hex(canonical()); }

void PipelineConfig::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::InvalidConfig, what);
  };
  try {
    xalign.validate();
  } catch (const Error& e) {
    fail(ErrorKind::InvalidConfig, e.what());
  }
  check(xalign.t <= 64, "xalign.t must be at most 64");
  check(test_fraction > 0 && test_fraction < 1, "split.test_fraction must lie in (0, 1)");
  check(extraction.beta >= 0, "extraction.beta must be non-negative");
  check(arcss.iterations >= 1, "arcss.iterations must be at least 1");
  check(arcss.removal.fraction >= 0 && arcss.removal.fraction <= 1, "arcss.fraction must lie in [0, 1]");
  check(arcss.l2 >= 0, "arcss.l2 must be non-negative");
  check(aks_k >= 2, "aks.k must be at least 2");
  check(kmeans_k >= 2, "eval.kmeans_k must be at least 2");
  check(reid.sample_ratio > 0 && reid.sample_ratio <= 1, "eval.reid_ratio must lie in (0, 1]");
  check(reid.max_iterations >= 1, "eval.reid_max_iterations must be positive");
  check(ingest_dim >= 1, "ingest.dim must be positive");
}

PipelineConfig parse_config(const std::string& text) {
  PipelineConfig c;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::InvalidConfig, "config line " + std::to_string(line_no) + ": expected key = value");
    }
    c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return c;
}

Seeds derive_seeds(std::uint64_t seed) {
  return {derive_seed(seed, "split"), derive_seed(seed, "xalign"), derive_seed(seed, "arcss"),
          derive_seed(seed, "aks"),   derive_seed(seed, "random"), derive_seed(seed, "eval")};
}

// -- artifact plumbing ----------------------------------------------------------

namespace {

json config_echo(const PipelineConfig& c) {
  json j = json::object();
  for (const auto& k : PipelineConfig::keys()) j[k] = c.get(k);
  return j;
}

json provenance(const PipelineConfig& c, const std::string& stage) {
  return {{"tool", "adeid"}, {"stage", stage}, {"seed", c.seed}, {"config_sha256", c.sha256()}, {"config", config_echo(c)}};
}

fs::path input(const RunOptions& run, const char* name) {
  const fs::path p = run.out / name;
  if (!fs::exists(p)) fail(ErrorKind::MissingArtifact, "missing artifact " + p.string());
  return p;
}

// Refuses before any work is done, so a failed stage leaves nothing behind.
void claim_outputs(const RunOptions& run, std::initializer_list<const char*> names) {
  fs::create_directories(run.out);
  for (const char* n : names) {
    const fs::path p = run.out / n;
    if (fs::exists(p) && !run.force) fail(ErrorKind::OutputExists, p.string() + " exists (use --force to replace)");
  }
}

void write_output(const RunOptions& run, const std::string& name, const std::string& contents) {
  write_file_atomic((run.out / name).string(), contents);
  log(LogLevel::Info, "wrote " + (run.out / name).string());
}

std::string header_line(const std::string& format, const json& prov, json extra = json::object()) {
  json h = {{"kind", "header"}, {"format", format}, {"version", 1}};
  for (auto& [k, v] : extra.items()) h[k] = v;
  h["provenance"] = prov;
  return h.dump();
}

// The corpus format has no provenance field of its own; readers skip
// unknown header keys.
std::string corpus_with_provenance(const EmbeddedCorpus& corpus, const json& prov) {
  std::string text = serialize_corpus(corpus);
  const auto nl = text.find('\n');
  json header = json::parse(text.substr(0, nl));
  header["provenance"] = prov;
  return header.dump() + text.substr(nl);
}

EmbeddedCorpus load_run_corpus(const RunOptions& run) { return parse_corpus(read_file(input(run, artifact::kCorpus).string())); }

Split load_split(const RunOptions& run) { return parse_split(read_file(input(run, artifact::kSplit).string())); }

std::vector<extraction::ExtractionResult> load_results(const RunOptions& run, const char* name) {
  return extraction::parse_results(read_file(input(run, name).string()));
}

std::vector<extraction::ExtractionResult> load_source_results(const PipelineConfig& config, const RunOptions& run) {
  return load_results(run, config.arcss_enabled ? artifact::kRefined : artifact::kExtraction);
}

std::vector<extraction::ExtractionResult> results_for(const std::vector<extraction::ExtractionResult>& all,
                                                      const EmbeddedCorpus& corpus) {
  std::map<std::string, const extraction::ExtractionResult*> by_doc;
  for (const auto& r : all) by_doc[r.doc_id] = &r;
  std::vector<extraction::ExtractionResult> out;
  for (const auto& d : corpus.documents) {
    const auto it = by_doc.find(d.doc_id);
    if (it == by_doc.end()) fail(ErrorKind::InvalidInput, "no extraction result for document " + d.doc_id);
    out.push_back(*it->second);
  }
  return out;
}

}  // namespace

std::string serialize_split(const Split& split, const std::string& provenance_json) {
  json j = {{"kind", "header"},
            {"format", "split"},
            {"version", 1},
            {"train", split.train},
            {"test", split.test},
            {"provenance", json::parse(provenance_json)}};
  return j.dump() + "\n";
}

Split parse_split(const std::string& text) {
  try {
    const auto j = json::parse(text);
    if (j.value("format", "") != "split") fail(ErrorKind::Format, "not a split file");
    if (j.value("version", 0) != 1) fail(ErrorKind::VersionMismatch, "unsupported split version");
    return {j.at("train").get<std::vector<std::string>>(), j.at("test").get<std::vector<std::string>>()};
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("split file: ") + e.what());
  }
}

// -- stages --------------------------------------------------------------------------

void run_synth(const PipelineConfig& config, const RunOptions& run) {
  config.validate();
  claim_outputs(run, {artifact::kCorpus});
  SynthConfig s = config.synth;
  s.seed = config.seed;
  const auto corpus = synthesize_corpus(s);
  write_output(run, artifact::kCorpus, corpus_with_provenance(corpus, provenance(config, "synth")));
}

void run_ingest(const PipelineConfig& config, const RunOptions& run, const fs::path& raw) {
  config.validate();
  if (!fs::exists(raw)) fail(ErrorKind::MissingArtifact, "missing raw input " + raw.string());
  claim_outputs(run, {artifact::kCorpus});
  const auto corpus = ingest_raw(read_file(raw.string()), config.ingest_dim, config.seed);
  write_output(run, artifact::kCorpus, corpus_with_provenance(corpus, provenance(config, "ingest")));
}

void run_train(const PipelineConfig& config, const RunOptions& run) {
  config.validate();
  const auto corpus = load_run_corpus(run);
  claim_outputs(run, {artifact::kSplit, artifact::kCheckpoint});
  const auto seeds = derive_seeds(config.seed);
  const auto split = split_train_test(corpus, config.test_fraction, seeds.split);
  xalign::XAlignConfig xc = config.xalign;
  xc.seed = seeds.xalign;
  log(LogLevel::Info, "training on " + std::to_string(split.train.documents.size()) + " persons");
  const auto trained = xalign::train(split.train, xc);
  xc.dim = corpus.dim;
  const auto prov = provenance(config, "train").dump();
  write_output(run, artifact::kSplit, serialize_split({split.train.person_ids(), split.test.person_ids()}, prov));
  write_output(run, artifact::kCheckpoint, xalign::serialize_checkpoint(trained.params, xc, prov));
}

void run_extract(const PipelineConfig& config, const RunOptions& run) {
  config.validate();
  const auto corpus = load_run_corpus(run);
  const auto ckpt = xalign::parse_checkpoint(read_file(input(run, artifact::kCheckpoint).string()));
  claim_outputs(run, {artifact::kExtraction});
  const auto results = extraction::extract_corpus(corpus, ckpt.params, ckpt.config, config.extraction);
  const json extra = {{"alpha", config.extraction.alpha}, {"beta", config.extraction.beta}};
  write_output(run, artifact::kExtraction,
               extraction::serialize_results(results, header_line("extraction", provenance(config, "extract"), extra)));
}

void run_arcss(const PipelineConfig& config, const RunOptions& run) {
  config.validate();
  const auto corpus = load_run_corpus(run);
  const auto split = load_split(run);
  const auto results = load_results(run, artifact::kExtraction);
  claim_outputs(run, {artifact::kArcssReport, artifact::kRefined});
  const auto train = restrict_to_persons(corpus, split.train);
  arcss::ArcssConfig ac = config.arcss;
  ac.seed = derive_seeds(config.seed).arcss;
  const auto filtered = arcss::filter_corpus(train, arcss::ars_table(results_for(results, train), train), ac);
  if (filtered.stopped_early) log(LogLevel::Warn, "relevance filtering stopped early: no negatives left");
  const auto pass = arcss::apply_classifiers(corpus, filtered.classifiers, ac.k_keep, ac.removal);
  std::map<std::string, std::vector<int>> survivors;
  for (const auto& o : pass.outcomes) survivors[o.doc_id] = o.survivors;
  std::vector<extraction::ExtractionResult> refined;
  for (const auto& r : results) refined.push_back(extraction::restrict_kept(r, survivors.at(r.doc_id)));
  const auto prov = provenance(config, "arcss");
  write_output(run, artifact::kArcssReport, arcss::serialize_report(filtered, ac, prov.dump()));
  write_output(run, artifact::kRefined, extraction::serialize_results(refined, header_line("extraction", prov)));
}

void run_build_pool(const PipelineConfig& config, const RunOptions& run) {
  config.validate();
  const auto corpus = load_run_corpus(run);
  const auto split = load_split(run);
  const auto results = load_source_results(config, run);
  claim_outputs(run, {artifact::kPool, artifact::kRandomSource});
  const auto pool = aks::build_pool(corpus, results);
  const auto source = aks::label_pool(restrict_to_persons(corpus, split.train));
  const auto prov = provenance(config, "build-pool").dump();
  claim_outputs(run, {(std::string(artifact::kPool) + ".audit.jsonl").c_str()});
  aks::save_pool(pool, (run.out / artifact::kPool).string(), prov);
  write_output(run, artifact::kRandomSource, aks::serialize_pool(source, prov));
  log(LogLevel::Info, "pool holds " + std::to_string(pool.size()) + " entries");
}

void run_deidentify(const PipelineConfig& config, const RunOptions& run) {
  config.validate();
  const auto results = load_source_results(config, run);
  const auto pool = aks::parse_pool(read_file(input(run, artifact::kPool).string()));
  const auto source = aks::parse_pool(read_file(input(run, artifact::kRandomSource).string()));
  claim_outputs(run, {artifact::kSummaries, artifact::kRandomSummaries});
  const auto seeds = derive_seeds(config.seed);
  const auto summaries = aks::substitute_corpus(results, pool, config.aks_k, config.class_mode, seeds.aks);
  const auto random = aks::random_substitute_corpus(results, source, seeds.random);
  const auto prov = provenance(config, "deidentify");
  write_output(run, artifact::kSummaries,
               aks::serialize_summaries(summaries, pool,
                                        header_line("summaries", prov,
                                                    {{"variant", "aspect-k-anonymity"},
                                                     {"k", config.aks_k},
                                                     {"class_mode", aks::to_string(config.class_mode)}})));
  write_output(run, artifact::kRandomSummaries,
               aks::serialize_summaries(random, source, header_line("summaries", prov, {{"variant", "random-substitute"}})));
}

void run_evaluate(const PipelineConfig& config, const RunOptions& run) {
  config.validate();
  const auto corpus = load_run_corpus(run);
  const auto split = load_split(run);
  EvaluationInputs in;
  in.train = restrict_to_persons(corpus, split.train);
  in.test = restrict_to_persons(corpus, split.test);
  in.pool = aks::parse_pool(read_file(input(run, artifact::kPool).string()));
  in.random_source = aks::parse_pool(read_file(input(run, artifact::kRandomSource).string()));
  in.summaries = aks::parse_summaries(read_file(input(run, artifact::kSummaries).string()));
  in.random_summaries = aks::parse_summaries(read_file(input(run, artifact::kRandomSummaries).string()));
  claim_outputs(run, {artifact::kBundle});
  write_output(run, artifact::kBundle, evaluation_bundle(in, config));
}

void run_all(const PipelineConfig& config, const RunOptions& run) {
  config.validate();
  input(run, artifact::kCorpus);
  claim_outputs(run, {artifact::kSplit, artifact::kCheckpoint, artifact::kExtraction, artifact::kArcssReport,
                      artifact::kRefined, artifact::kPool, artifact::kRandomSource, artifact::kSummaries,
                      artifact::kRandomSummaries, artifact::kBundle});
  run_train(config, run);
  run_extract(config, run);
  if (config.arcss_enabled) run_arcss(config, run);
  run_build_pool(config, run);
  run_deidentify(config, run);
  run_evaluate(config, run);
}

// -- evaluation bundle --------------------------------------------------------------

namespace {

json metrics_json(const eval::MetricsReport& m) {
  return {{"accuracy", m.accuracy},
          {"precision_macro", m.macro_precision},
          {"recall_macro", m.macro_recall},
          {"f1_macro", m.macro_f1},
          {"precision_weighted", m.weighted_precision},
          {"recall_weighted", m.weighted_recall},
          {"f1_weighted", m.weighted_f1},
          {"samples", m.samples}};
}

json reid_json(const eval::ReidReport& r) {
  return {{"top1", r.top1}, {"top5", r.top5}, {"top10", r.top10}, {"top100", r.top100}, {"queries", r.queries},
          {"empty_queries", r.empty_queries}};
}

std::vector<aks::DeidentifiedSummary> summaries_for(const std::vector<aks::DeidentifiedSummary>& all,
                                                    const std::vector<std::string>& persons) {
  std::map<std::string, const aks::DeidentifiedSummary*> by_person;
  for (const auto& s : all) by_person[s.person_id] = &s;
  std::vector<aks::DeidentifiedSummary> out;
  for (const auto& p : persons) {
    const auto it = by_person.find(p);
    if (it == by_person.end()) fail(ErrorKind::InvalidInput, "no summary for person " + p);
    out.push_back(*it->second);
  }
  return out;
}

struct Variant {
  std::string name;
  eval::DocumentVectors train, test;
};

}  // namespace

std::string evaluation_bundle(const EvaluationInputs& in, const PipelineConfig& config) {
  const auto seeds = derive_seeds(config.seed);
  const auto train_persons = in.train.person_ids(), test_persons = in.test.person_ids();
  const auto original_train = eval::document_vectors(in.train);
  const auto original_test = eval::document_vectors(in.test);
  const auto y_train = eval::label_vector(in.train, original_train.persons);
  const auto y_test = eval::label_vector(in.test, original_test.persons);

  const std::vector<Variant> variants = {
      {"random-substitute", eval::summary_vectors(summaries_for(in.random_summaries, train_persons), in.random_source),
       eval::summary_vectors(summaries_for(in.random_summaries, test_persons), in.random_source)},
      {"aspect-k-anonymity", eval::summary_vectors(summaries_for(in.summaries, train_persons), in.pool),
       eval::summary_vectors(summaries_for(in.summaries, test_persons), in.pool)},
  };

  auto utility_row = [&](const std::string& train_name, const eval::DocumentVectors& tr, const std::string& test_name,
                         const eval::DocumentVectors& te, const std::string& orientation) {
    const auto u = eval::evaluate_utility(tr.x, y_train, te.x, y_test, config.classifier, seeds.eval);
    json absent = json::array();
    for (int c : u.absent_training_classes) absent.push_back(to_string(class_from_index(c)));
    return json{{"train", train_name},         {"test", test_name},
                {"orientation", orientation},  {"metrics", metrics_json(u.metrics)},
                {"classifier", eval::to_string(u.classifier)}, {"rounds", u.rounds},
                {"absent_training_classes", absent}};
  };

  json utility = json::array();
  utility.push_back(utility_row("original", original_train, "original", original_test, "reference"));
  for (const auto& v : variants) utility.push_back(utility_row(v.name, v.train, "original", original_test, "utility"));
  for (const auto& v : variants) utility.push_back(utility_row("original", original_train, v.name, v.test, "fidelity"));

  json fidelity = json::array(), agreement = json::array();
  eval::KMeans original_km;
  original_km.fit(original_train.x, config.kmeans_k, seeds.eval);
  const auto original_labels = original_km.predict(original_train.x);
  for (const auto& v : variants) {
    fidelity.push_back({{"variant", v.name},
                        {"cluster_model", "original"},
                        {"metrics", metrics_json(eval::clustering_fidelity(original_train.x, original_test.x, v.test.x,
                                                                           config.kmeans_k, seeds.eval))}});
    fidelity.push_back({{"variant", v.name},
                        {"cluster_model", "deidentified"},
                        {"metrics", metrics_json(eval::clustering_fidelity(v.train.x, original_test.x, v.test.x,
                                                                           config.kmeans_k, seeds.eval))}});
    eval::KMeans deid_km;
    deid_km.fit(v.train.x, config.kmeans_k, seeds.eval);
    const auto s = eval::partition_agreement_scores(original_labels, deid_km.predict(original_train.x));
    agreement.push_back({{"variant", v.name}, {"ari", s.ari}, {"ami", s.ami}});
  }

  // The attacker knows every person in the release.
  EmbeddedCorpus everyone = in.train;
  everyone.documents.insert(everyone.documents.end(), in.test.documents.begin(), in.test.documents.end());
  eval::ReidAttacker attacker;
  attacker.train(everyone, config.reid, seeds.eval);
  if (!attacker.reached_target()) {
    log(LogLevel::Warn, "re-identification attacker stopped at held-out accuracy " +
                            std::to_string(attacker.held_out_accuracy()));
  }
  const auto all_persons = everyone.person_ids();
  json reid = json::array();
  json original_row = reid_json(attacker.score_original(everyone, seeds.eval));
  original_row["variant"] = "original";
  reid.push_back(original_row);
  for (const auto& [name, summaries, pool] :
       {std::tuple{std::string("random-substitute"), &in.random_summaries, &in.random_source},
        std::tuple{std::string("aspect-k-anonymity"), &in.summaries, &in.pool}}) {
    json row = reid_json(attacker.score(eval::summary_vectors(summaries_for(*summaries, all_persons), *pool)));
    row["variant"] = name;
    reid.push_back(row);
  }
  const double n = static_cast<double>(all_persons.size());
  reid.push_back({{"variant", "chance"},
                  {"top1", 1.0 / n},
                  {"top5", std::min(5.0, n) / n},
                  {"top10", std::min(10.0, n) / n},
                  {"top100", std::min(100.0, n) / n}});

  std::size_t relaxed = 0, reused = 0, replacements = 0, empty = 0;
  for (const auto& s : in.summaries) {
    empty += s.replacements.empty() ? 1 : 0;
    for (const auto& r : s.replacements) {
      ++replacements;
      relaxed += r.relaxed ? 1 : 0;
      reused += r.reused ? 1 : 0;
    }
  }

  json bundle = {
      {"kind", "header"},
      {"format", "evaluation"},
      {"version", 1},
      {"utility", utility},
      {"fidelity", fidelity},
      {"agreement", agreement},
      {"reidentification", reid},
      {"attacker",
       {{"held_out_accuracy", attacker.held_out_accuracy()},
        {"reached_target", attacker.reached_target()},
        {"target", config.reid.target_accuracy},
        {"iterations", attacker.iterations()},
        {"persons", attacker.persons()}}},
      {"release",
       {{"pool_entries", in.pool.size()},
        {"summaries", in.summaries.size()},
        {"empty_summaries", empty},
        {"replacements", replacements},
        {"relaxed_replacements", relaxed},
        {"reused_replacements", reused}}},
      {"counts", {{"train_persons", train_persons.size()}, {"test_persons", test_persons.size()}}},
      {"seeds",
       {{"run", config.seed},
        {"split", seeds.split},
        {"xalign", seeds.xalign},
        {"arcss", seeds.arcss},
        {"aks", seeds.aks},
        {"random", seeds.random},
        {"eval", seeds.eval}}},
      {"provenance", provenance(config, "evaluate")},
  };
  return bundle.dump(2) + "\n";
}

}  // namespace adeid::pipeline
