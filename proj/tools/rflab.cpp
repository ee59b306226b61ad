#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "rflab/scenario.hpp"

#ifndef RFLAB_SCENARIO_DIR
#define RFLAB_SCENARIO_DIR "scenarios"
#endif

namespace {

using namespace rflab;

// key=value pairs from --tol
void apply_overrides(nlohmann::json& cfg, const std::vector<std::string>& tols) {
  for (const auto& kv : tols) {
    const auto eq = kv.find('=');
    require(eq != std::string::npos && eq > 0, ErrorCode::ConfigInvalid, "/tolerances: override must be key=value, got '" + kv + "'");
    double value = 0.0;
    try {
      value = std::stod(kv.substr(eq + 1));
    } catch (const std::exception&) {
      fail(ErrorCode::ConfigInvalid, "/tolerances/" + kv.substr(0, eq) + ": not a number");
    }
    override_tolerance(cfg, kv.substr(0, eq), value);
  }
}

void print_checks(const nlohmann::json& report) {
  for (const auto& [name, c] : report.at("checks").items()) {
    const bool pass = c.at("pass").get<bool>();
    const bool gating = c.at("gating").get<bool>();
    std::printf("%-4s %-28s %s%s\n", pass ? "PASS" : "FAIL", name.c_str(), c.at("detail").get<std::string>().c_str(), gating ? "" : " [not gating]");
  }
  std::printf("%s %s (config %s)\n", report.at("pass").get<bool>() ? "PASS" : "FAIL", report.at("name").get<std::string>().c_str(),
              report.at("config_hash").get<std::string>().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rflab: reduced distance and reduced volume on Ricci flows"};
  app.require_subcommand(1);
  std::string dir = RFLAB_SCENARIO_DIR;
  app.add_option("--scenario-dir", dir, "Directory of bundled scenarios");

  auto* list = app.add_subcommand("list", "List bundled scenarios");

  std::vector<std::string> to_validate;
  std::vector<std::string> tols;
  auto* validate = app.add_subcommand("validate", "Check configs against the schema");
  validate->add_option("config", to_validate, "Config path or bundled scenario name")->required();
  validate->add_option("--tol", tols, "Tolerance override key=value");

  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  auto* run = app.add_subcommand("run", "Run a scenario");
  run->add_option("config", config, "Config path or bundled scenario name")->required();
  run->add_option("-o,--output", out, "Output directory");
  run->add_option("--seed", seed, "Multistart jitter seed");
  run->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
  run->add_option("--tol", tols, "Tolerance override key=value");

  std::string report_dir;
  auto* report = app.add_subcommand("report", "Print the check table of a finished run");
  report->add_option("dir", report_dir, "Output directory of a run")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*list) {
      for (const auto& s : list_scenarios(dir)) std::printf("%-26s %s\n", s.name.c_str(), s.description.c_str());
      return 0;
    }
    if (*validate) {
      bool ok = true;
      for (const auto& c : to_validate) {
        auto cfg = load_config(resolve_scenario(c, dir));
        apply_overrides(cfg, tols);
        const auto bad = validate_config(cfg);
        if (bad.empty()) std::printf("%s: ok\n", c.c_str());
        for (const auto& v : bad) std::printf("%s: %s: %s\n", c.c_str(), v.path.c_str(), v.message.c_str());
        ok = ok && bad.empty();
      }
      return ok ? 0 : 1;
    }
    if (*run) {
      auto cfg = load_config(resolve_scenario(config, dir));
      apply_overrides(cfg, tols);
      if (seed) cfg["seed"] = *seed;
      if (workers) cfg["workers"] = *workers;
      const auto rep = run_scenario(cfg, out.empty() ? std::nullopt : std::optional<std::filesystem::path>(out));
      print_checks(nlohmann::json::parse(rep.to_json().dump()));
      for (const auto& [stage, sec] : rep.timing) std::printf("  %-14s %.2fs\n", stage.c_str(), sec);
      std::printf("artifacts in %s\n", rep.output.string().c_str());
      return rep.pass() ? 0 : 1;
    }
    if (*report) {
      const auto path = std::filesystem::path(report_dir) / "report.json";
      std::ifstream in(path);
      require(static_cast<bool>(in), ErrorCode::Io, "cannot read " + path.string());
      const auto j = nlohmann::json::parse(in);
      print_checks(j);
      return j.at("pass").get<bool>() ? 0 : 1;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
