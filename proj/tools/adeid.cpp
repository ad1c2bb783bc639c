#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "adeid/pipeline.hpp"

using namespace adeid;
using namespace adeid::pipeline;

namespace {

constexpr const char* kExitHelp =
    "Exit status:\n"
    "  0  success\n"
    "  2  usage or configuration error\n"
    "  3  missing input artifact\n"
    "  4  artifact format or version mismatch\n"
    "  5  module error (training, extraction, anonymity, ...)\n"
    "  6  output already exists (rerun with --force)\n"
    "Log level: ADEID_LOG=error|warn|info|debug\n";

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adeid: aspect-level de-identification of sensitive documents"};
  app.footer(kExitHelp);
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  bool force = false;
  std::string raw_path;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key = value config file");
    sub->add_option("--set", overrides, "override one key, e.g. --set xalign.epochs=50")->allow_extra_args(false);
    sub->add_option("--seed", seed, "run seed");
    sub->add_option("--out", out, "run directory")->capture_default_str();
    sub->add_flag("--force", force, "replace existing outputs");
  };

  struct Stage {
    const char* name;
    const char* help;
  };
  const std::vector<Stage> stages = {
      {"synth", "write a synthetic corpus into the run directory"},
      {"ingest", "split and embed raw JSON Lines records into a corpus"},
      {"train", "split persons and train the aspect alignment model"},
      {"extract", "extract aspect sub-sentences from every document"},
      {"arcss", "refine the extraction with the relevance classifier"},
      {"build-pool", "build the aspect pool and the random-substitute source"},
      {"deidentify", "write k-anonymous and random-substitute summaries"},
      {"evaluate", "write the evaluation bundle"},
      {"all", "train through evaluate on the corpus in the run directory"},
      {"config", "print the effective configuration"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& s : stages) {
    subs[s.name] = app.add_subcommand(s.name, s.help);
    common(subs[s.name]);
  }
  subs["ingest"]->add_option("--in", raw_path, "raw JSON Lines input")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    PipelineConfig config;
    if (!config_path.empty()) {
      if (!std::filesystem::exists(config_path)) fail(ErrorKind::InvalidConfig, "config file not found: " + config_path);
      config = parse_config(read_file(config_path));
    }
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) fail(ErrorKind::InvalidConfig, "--set expects key=value, got '" + o + "'");
      config.set(o.substr(0, eq), o.substr(eq + 1));
    }
    if (seed) config.seed = *seed;
    config.validate();
    const RunOptions run{out, force};

    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "config") {
      std::cout << config.canonical();
    } else if (name == "synth") {
      run_synth(config, run);
    } else if (name == "ingest") {
      run_ingest(config, run, raw_path);
    } else if (name == "train") {
      run_train(config, run);
    } else if (name == "extract") {
      run_extract(config, run);
    } else if (name == "arcss") {
      run_arcss(config, run);
    } else if (name == "build-pool") {
      run_build_pool(config, run);
    } else if (name == "deidentify") {
      run_deidentify(config, run);
    } else if (name == "evaluate") {
      run_evaluate(config, run);
    } else if (name == "all") {
      run_all(config, run);
    }
    return kExitOk;
  } catch (const Error& e) {
    log(LogLevel::Error, std::string(to_string(e.kind())) + ": " + e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    log(LogLevel::Error, e.what());
    return kExitModule;
  }
}
