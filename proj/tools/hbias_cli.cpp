#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"

#include "hbias/pipeline.hpp"

namespace {

enum Exit { kOk = 0, kConfigError = 1, kRuntimeError = 2, kDependencyMissing = 3 };

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Homogeneity bias audit: generate stories, embed, build similarity observations, fit models."};
  app.require_subcommand(1, 1);

  std::string config_path = "hbias.json";
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;
  std::string backend;

  const char* names[] = {"generate", "embed", "observe", "fit", "report", "all"};
  const char* blurbs[] = {"generate stories into corpus.jsonl", "embed stories into embeddings.bin",
                          "write pairwise similarity observations", "fit the mixed-model suite",
                          "render tables and figure data", "run every stage in order"};
  for (int i = 0; i < 6; ++i) {
    auto* sub = app.add_subcommand(names[i], blurbs[i]);
    sub->add_option("--config", config_path, "study configuration (JSON)")->capture_default_str();
    sub->add_option("--seed", seed, "seed override");
    sub->add_option("--backend", backend, "generation backend override")->check(CLI::IsMember({"live", "sim"}));
    sub->add_option("--out", out_dir, "output directory")->capture_default_str();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    hbias::PipelineOptions opt;
    opt.config_path = config_path;
    opt.out_dir = out_dir;
    opt.seed = seed;
    if (!backend.empty()) opt.backend = hbias::parse_backend(backend);
    opt.stages = hbias::parse_stages(app.get_subcommands().front()->get_name());
    opt.log = &std::cerr;
    hbias::run_pipeline(opt);
  } catch (const hbias::DependencyMissing& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDependencyMissing;
  } catch (const hbias::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const hbias::AuthenticationError& e) {
    std::cerr << "authentication failed: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kOk;
}
