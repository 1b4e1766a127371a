// Command-line front end: world, train, caption, story, eval, bench, ablate.

#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "magic/config.hpp"
#include "magic/harness.hpp"

namespace {

struct Flags {
  std::string config;
  magic::Overrides overrides;
};

void add_common(CLI::App* cmd, Flags& flags) {
  cmd->add_option("--config", flags.config, "key = value config file");
  cmd->add_option("--seed", flags.overrides.seed, "decoding seed");
  cmd->add_option("--method", flags.overrides.method,
                  "greedy, beam, top_k, nucleus, typical, contrastive or magic");
  cmd->add_option("--k", flags.overrides.k, "candidate set size");
  cmd->add_option("--alpha", flags.overrides.alpha, "degeneration penalty weight");
  cmd->add_option("--beta", flags.overrides.beta, "image grounding weight");
  cmd->add_option("--out", flags.overrides.out, "output path");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MAGIC search decoding toolkit"};
  app.require_subcommand(1);
  Flags flags;
  const std::map<std::string, std::string> tasks = {
      {"world", "generate a synthetic image-text world"},
      {"train", "train the toy language model on a world's captions"},
      {"caption", "caption every image"},
      {"story", "retrieve an image per title and generate a grounded story"},
      {"eval", "score caption or story results"},
      {"bench", "time per-step decoding latency"},
      {"ablate", "sweep k, alpha and beta"},
  };
  for (const auto& [name, help] : tasks) add_common(app.add_subcommand(name, help), flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : magic::harness::kConfigError;
  }

  const std::string task = app.get_subcommands().front()->get_name();
  magic::RunConfig cfg;
  try {
    cfg = flags.config.empty() ? magic::resolve_config(task, {}, flags.overrides)
                               : magic::load_config(task, flags.config, flags.overrides);
  } catch (const magic::NotFoundError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return magic::harness::kMissingArtifact;
  } catch (const magic::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return magic::harness::kConfigError;
  }
  return magic::harness::run_task(cfg, std::cout, std::cerr);
}
