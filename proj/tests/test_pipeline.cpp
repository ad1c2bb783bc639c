#include <algorithm>
#include <filesystem>
#include <functional>
#include <fstream>
#include <set>

#include <sys/wait.h>
#include <unistd.h>

#include "adeid/pipeline.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace adeid;
using namespace adeid::pipeline;
namespace fs = std::filesystem;

namespace {

// Fresh scratch directory, removed on scope exit.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("adeid-" + tag + "-" + std::to_string(::getpid()))) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

PipelineConfig tiny() {
  PipelineConfig c;
  c.set("synth.n_persons", "24");
  c.set("xalign.epochs", "8");
  c.set("eval.reid_max_iterations", "100");
  return c;
}

std::vector<std::string> listing(const fs::path& dir) {
  std::vector<std::string> names;
  if (!fs::exists(dir)) return names;
  for (const auto& e : fs::directory_iterator(dir)) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(ADEID_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config keys round-trip through set, get and canonical text") {
  PipelineConfig c;
  const auto keys = PipelineConfig::keys();
  CHECK(std::is_sorted(keys.begin(), keys.end()));
  for (const auto& k : keys) {
    PipelineConfig d;
    d.set(k, c.get(k));
    CHECK(d.get(k) == c.get(k));
  }
  const auto parsed = parse_config(c.canonical());
  CHECK(parsed.canonical() == c.canonical());
  CHECK(parsed.sha256() == c.sha256());
  CHECK(c.sha256().size() == 64);

  PipelineConfig e;
  e.set("xalign.epochs", "7");
  CHECK(e.sha256() != c.sha256());
  CHECK(e.get("xalign.epochs") == "7");
}

TEST_CASE("config text ignores comments and rejects bad lines") {
  const auto c = parse_config("# run\n\nseed = 9   # trailing\naks.k=7\n");
  CHECK(c.seed == 9);
  CHECK(c.aks_k == 7);

  auto kind = [](const std::function<void()>& f) {
    try {
      f();
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::InvalidInput;
  };
  CHECK(kind([] { parse_config("nonsense.key = 1\n"); }) == ErrorKind::InvalidConfig);
  CHECK(kind([] { parse_config("seed\n"); }) == ErrorKind::InvalidConfig);
  CHECK(kind([] { parse_config("seed = abc\n"); }) == ErrorKind::InvalidConfig);
  CHECK(kind([] { parse_config("aks.k = 1\n").validate(); }) == ErrorKind::InvalidConfig);
  CHECK(kind([] { parse_config("split.test_fraction = 1\n").validate(); }) == ErrorKind::InvalidConfig);
}

TEST_CASE("stage seeds are distinct and stable") {
  const auto a = derive_seeds(1), b = derive_seeds(1), c = derive_seeds(2);
  const std::set<std::uint64_t> all = {a.split, a.xalign, a.arcss, a.aks, a.random, a.eval};
  CHECK(all.size() == 6);
  CHECK(a.xalign == b.xalign);
  CHECK(a.xalign != c.xalign);
}

TEST_CASE("exit codes follow the error kind") {
  CHECK(exit_code_for(ErrorKind::InvalidConfig) == kExitUsage);
  CHECK(exit_code_for(ErrorKind::MissingArtifact) == kExitMissingArtifact);
  CHECK(exit_code_for(ErrorKind::Format) == kExitFormat);
  CHECK(exit_code_for(ErrorKind::VersionMismatch) == kExitFormat);
  CHECK(exit_code_for(ErrorKind::OutputExists) == kExitOutputExists);
  CHECK(exit_code_for(ErrorKind::AnonymityInfeasible) == kExitModule);
}

TEST_CASE("split round-trips") {
  const Split s{{"p1", "p3"}, {"p2"}};
  const auto back = parse_split(serialize_split(s, "{}"));
  CHECK(back.train == s.train);
  CHECK(back.test == s.test);
}

TEST_CASE("stages refuse missing inputs and existing outputs without writing") {
  TempDir dir("stages");
  const RunOptions run{dir.path, false};
  const auto c = tiny();

  CHECK_THROWS_AS(run_train(c, run), Error);
  CHECK(listing(dir.path).empty());
  CHECK_THROWS_AS(run_evaluate(c, run), Error);
  CHECK(listing(dir.path).empty());

  run_synth(c, run);
  const auto before = read_file((dir.path / artifact::kCorpus).string());
  try {
    run_synth(c, run);
    FAIL("second synth should be refused");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::OutputExists);
  }
  CHECK(read_file((dir.path / artifact::kCorpus).string()) == before);

  // Provenance rides in the corpus header and the corpus still parses.
  const auto header = nlohmann::json::parse(before.substr(0, before.find('\n')));
  CHECK(header["provenance"]["config_sha256"] == c.sha256());
  CHECK(parse_corpus(before).documents.size() == 24);
}

TEST_CASE("tiny pipeline writes every artifact and reruns byte-identically") {
  TempDir a("run-a"), b("run-b");
  const auto c = tiny();
  for (const auto* dir : {&a, &b}) {
    const RunOptions run{dir->path, false};
    run_synth(c, run);
    run_all(c, run);
  }
  for (const char* name : {artifact::kSplit, artifact::kCheckpoint, artifact::kExtraction, artifact::kArcssReport,
                           artifact::kRefined, artifact::kPool, artifact::kRandomSource, artifact::kSummaries,
                           artifact::kRandomSummaries, artifact::kBundle}) {
    CAPTURE(name);
    REQUIRE(fs::exists(a.path / name));
    CHECK(read_file((a.path / name).string()) == read_file((b.path / name).string()));
  }
  const auto bundle = nlohmann::json::parse(read_file((a.path / artifact::kBundle).string()));
  CHECK(bundle["provenance"]["seed"] == 1);
  CHECK(bundle["reidentification"].size() == 4);
  CHECK(listing(a.path) == listing(b.path));
}

TEST_CASE("command line exit statuses") {
  TempDir dir("cli");
  const std::string out = " --out " + dir.path.string();
  const std::string small = " --set synth.n_persons=24 --set xalign.epochs=8";

  CHECK(cli("") == kExitUsage);
  CHECK(cli("bogus") == kExitUsage);
  CHECK(cli("config --set no.such=1") == kExitUsage);
  CHECK(cli("config --set aks.k=1") == kExitUsage);
  CHECK(cli("config --set seed=3") == kExitOk);
  CHECK(cli("train" + out) == kExitMissingArtifact);
  CHECK(!fs::exists(dir.path));
  CHECK(cli("ingest --in /nonexistent/raw.jsonl" + out) == kExitMissingArtifact);

  CHECK(cli("synth" + small + out) == kExitOk);
  CHECK(cli("synth" + small + out) == kExitOutputExists);
  CHECK(cli("synth --force" + small + out) == kExitOk);

  std::ofstream(dir.path / artifact::kSplit) << "not json\n";
  std::ofstream(dir.path / artifact::kCheckpoint) << "garbage";
  CHECK(cli("extract" + small + out) == kExitFormat);
}
