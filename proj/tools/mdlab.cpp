// mdlab <command> --config <path> [--set key=value ...] --out <dir>

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mdlab/config.hpp"
#include "mdlab/error.hpp"
#include "mdlab/run.hpp"

namespace {

int code(mdlab::ExitCode c) { return static_cast<int>(c); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mdlab: masked-diffusion decoding laboratory"};
  std::string command, config_path, out_dir;
  std::vector<std::string> overrides;
  bool check_only = false;
  app.add_option("command", command, "train | subspace | decode | analyze | ablate | report | timing | validate")
      ->required();
  app.add_option("--config", config_path, "run configuration (JSON)")->required();
  app.add_option("--set", overrides, "override a config field, e.g. decode.steps=4")->take_all();
  app.add_option("--out", out_dir, "output directory");
  app.add_flag("--check", check_only, "validate the configuration and exit");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : code(mdlab::ExitCode::config);
  }

  try {
    const auto cfg = mdlab::config::load(config_path, overrides);
    if (check_only || command == "validate") {
      std::cout << "ok\n";
      return 0;
    }
    const auto& cmds = mdlab::run::commands();
    if (std::find(cmds.begin(), cmds.end(), command) == cmds.end())
      throw mdlab::ConfigError("command: unknown command '" + command + "'");
    if (out_dir.empty()) throw mdlab::ConfigError("--out: required by '" + command + "'");
    mdlab::run::run(command, cfg, out_dir, std::cerr);
    return 0;
  } catch (const mdlab::config::InvalidConfig& e) {
    std::cerr << "invalid configuration:\n";
    for (const auto& v : e.violations) std::cerr << "  " << v << "\n";
    return code(mdlab::ExitCode::config);
  } catch (const mdlab::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return code(mdlab::ExitCode::config);
  } catch (const mdlab::MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return code(mdlab::ExitCode::missing_artifact);
  } catch (const mdlab::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return code(mdlab::ExitCode::numerical);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return code(mdlab::ExitCode::config);
  }
}
