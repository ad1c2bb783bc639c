#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "adeid/arcss.hpp"
#include "adeid/corpus.hpp"
#include "adeid/eval.hpp"
#include "adeid/extraction.hpp"
#include "adeid/pool_aks.hpp"
#include "adeid/xalign.hpp"

namespace adeid::pipeline {

// Process exit statuses, also listed in the CLI help.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,
  kExitMissingArtifact = 3,
  kExitFormat = 4,
  kExitModule = 5,
  kExitOutputExists = 6,
};

int exit_code_for(ErrorKind kind);

struct PipelineConfig {
  std::uint64_t seed = 1;
  SynthConfig synth;
  int ingest_dim = 32;
  double test_fraction = 0.2;
  xalign::XAlignConfig xalign;
  extraction::ExtractionSettings extraction{1.0, 5};
  bool arcss_enabled = true;
  arcss::ArcssConfig arcss{3, {arcss::RemovalMode::Threshold, 0.25, 0.5}, 1, 0, 1e-3};
  int aks_k = 5;
  aks::ClassMode class_mode = aks::ClassMode::Relax;
  int kmeans_k = 8;
  eval::ClassifierKind classifier = eval::ClassifierKind::Gbdt;
  eval::ReidSettings reid;

  // Dotted keys, e.g. "xalign.epochs". Throws InvalidConfig on an unknown key
  // or a value that does not parse.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static std::vector<std::string> keys();

  // Sorted "key = value" lines; the hash is taken over this text.
  std::string canonical() const;
  std::string sha256() const;
  void validate() const;
};

// Blank lines and '#' comments are ignored; every other line is key = value.
PipelineConfig parse_config(const std::string& text);

// Per-stage seeds derived from the run seed.
struct Seeds {
  std::uint64_t split, xalign, arcss, aks, random, eval;
};
Seeds derive_seeds(std::uint64_t seed);

// Fixed file names inside a run directory.
namespace artifact {
inline constexpr const char* kCorpus = "corpus.aspcorp.jsonl";
inline constexpr const char* kSplit = "split.json";
inline constexpr const char* kCheckpoint = "xalign.adxc";
inline constexpr const char* kExtraction = "extraction.jsonl";
inline constexpr const char* kArcssReport = "arcss.jsonl";
inline constexpr const char* kRefined = "extraction.refined.jsonl";
inline constexpr const char* kPool = "pool.adxp";
inline constexpr const char* kRandomSource = "random_source.adxp";
inline constexpr const char* kSummaries = "summaries.aks.jsonl";
inline constexpr const char* kRandomSummaries = "summaries.random.jsonl";
inline constexpr const char* kBundle = "evaluation.json";
}  // namespace artifact

struct RunOptions {
  std::filesystem::path out;
  bool force = false;
};

// Each stage reads only its declared inputs from the run directory and
// writes its outputs atomically; existing outputs are refused unless forced.
void run_synth(const PipelineConfig& config, const RunOptions& run);
void run_ingest(const PipelineConfig& config, const RunOptions& run, const std::filesystem::path& raw);
void run_train(const PipelineConfig& config, const RunOptions& run);
void run_extract(const PipelineConfig& config, const RunOptions& run);
void run_arcss(const PipelineConfig& config, const RunOptions& run);
void run_build_pool(const PipelineConfig& config, const RunOptions& run);
void run_deidentify(const PipelineConfig& config, const RunOptions& run);
void run_evaluate(const PipelineConfig& config, const RunOptions& run);
// train through evaluate; the corpus must already be in the run directory.
void run_all(const PipelineConfig& config, const RunOptions& run);

struct Split {
  std::vector<std::string> train;
  std::vector<std::string> test;
};
std::string serialize_split(const Split& split, const std::string& provenance_json);
Split parse_split(const std::string& text);

// Inputs of the evaluation bundle, already loaded.
struct EvaluationInputs {
  EmbeddedCorpus train;
  EmbeddedCorpus test;
  aks::AspectPool pool;
  aks::AspectPool random_source;
  std::vector<aks::DeidentifiedSummary> summaries;         // every person
  std::vector<aks::DeidentifiedSummary> random_summaries;  // every person
};

// The bundle JSON text; deterministic for fixed inputs and config.
std::string evaluation_bundle(const EvaluationInputs& inputs, const PipelineConfig& config);

// Logging goes to stderr, filtered by ADEID_LOG (error, warn, info, debug).
enum class LogLevel { Error = 0, Warn = 1, Info = 2, Debug = 3 };
void log(LogLevel level, const std::string& message);

}  // namespace adeid::pipeline
