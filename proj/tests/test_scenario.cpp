#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "rflab/scenario.hpp"

using namespace rflab;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kDir = RFLAB_SCENARIO_DIR;

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / "rflab-test" / name;
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Small enough to run in a few seconds.
json small_gaussian() {
  return json::parse(R"({
    "schema": "rflab-scenario", "version": 1, "name": "small-gaussian",
    "model": {"family": "gaussian-flat", "n": 2, "T": 1.0},
    "base": [0.0, 0.0],
    "stages": ["field", "inequalities", "volume", "limit", "limit_volume", "equality"],
    "regular": {"t0": 1.0, "grid": {"space": [[-1.0, 1.0, 9], [-1.0, 1.0, 9]], "time": [0.0, 0.5, 17]},
                "volume_grid": {"space": [[-8.0, 8.0, 33], [-8.0, 8.0, 33]], "time": [0.0, 0.75, 6]}},
    "singular": {"first": 2, "last": 12,
                 "grid": {"space": [[-1.0, 1.0, 9], [-1.0, 1.0, 9]], "time": [0.0, 0.25, 9]},
                 "volume_grid": {"space": [[-8.0, 8.0, 33], [-8.0, 8.0, 33]], "time": [0.0, 0.25, 5]}},
    "expect": {"soliton": true}
  })");
}

std::vector<std::string> paths(const std::vector<Violation>& v) {
  std::vector<std::string> out;
  for (const auto& x : v) out.push_back(x.path);
  return out;
}

}  // namespace

TEST(Scenarios, ListHasBundledScenariosSorted) {
  const auto s = list_scenarios(kDir);
  std::vector<std::string> names;
  for (const auto& e : s) names.push_back(e.name);
  EXPECT_GE(names.size(), 4u);
  EXPECT_TRUE(std::is_sorted(names.begin(), names.end()));
  for (const char* want : {"gaussian-baseline", "einstein-singular-limit", "cylinder-soliton", "neckpinch-typeA"})
    EXPECT_NE(std::find(names.begin(), names.end(), want), names.end()) << want;
  for (const auto& e : s) EXPECT_FALSE(e.description.empty());
}

TEST(Scenarios, BundledConfigsValidate) {
  for (const auto& e : list_scenarios(kDir)) {
    const auto v = validate_config(load_config(e.path));
    EXPECT_TRUE(v.empty()) << e.name << ": " << (v.empty() ? "" : v.front().path + " " + v.front().message);
  }
  EXPECT_TRUE(validate_config(small_gaussian()).empty());
}

TEST(Validate, EmptyStageList) {
  auto c = small_gaussian();
  c["stages"] = json::array();
  EXPECT_EQ(paths(validate_config(c)), std::vector<std::string>{"/stages"});
  try {
    run_scenario(c, scratch("empty"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ConfigInvalid);
    EXPECT_NE(std::string(e.what()).find("/stages"), std::string::npos);
  }
}

TEST(Validate, NegativeToleranceAtExactPath) {
  auto c = small_gaussian();
  c["tolerances"]["eq"] = -1e-4;
  EXPECT_EQ(paths(validate_config(c)), std::vector<std::string>{"/tolerances/eq"});
}

TEST(Validate, ReportsEveryViolation) {
  auto c = small_gaussian();
  c["version"] = 2;
  c["tolerances"]["ineq"] = 0.0;
  c["regular"]["grid"]["space"][1] = json::array({1.0, -1.0, 9});
  c["stages"].push_back("plot");
  c["workers"] = 0;
  const auto p = paths(validate_config(c));
  for (const char* want : {"/version", "/tolerances/ineq", "/regular/grid/space/1/1", "/stages/6", "/workers"})
    EXPECT_NE(std::find(p.begin(), p.end(), want), p.end()) << want;
  EXPECT_EQ(p.size(), 5u);
}

TEST(Validate, StructuralRules) {
  auto c = small_gaussian();
  c["stages"] = json::array({"equality"});
  EXPECT_FALSE(validate_config(c).empty());
  c = small_gaussian();
  c["base"] = json::array({0.0});
  EXPECT_EQ(paths(validate_config(c)), std::vector<std::string>{"/base"});
  c = small_gaussian();
  c["singular"]["last"] = 4;
  EXPECT_FALSE(validate_config(c).empty());
  c = small_gaussian();
  c["model"]["family"] = "numeric-warped";
  c["model"]["n"] = 3;
  c["base"] = json::array({0.5, 0.0, 0.0});
  const auto p = paths(validate_config(c));
  EXPECT_NE(std::find(p.begin(), p.end(), "/base/0"), p.end());
  EXPECT_NE(std::find(p.begin(), p.end(), "/stages"), p.end());
  EXPECT_FALSE(validate_config(json::array()).empty());
}

TEST(Hash, IgnoresWorkersAndOutputOnly) {
  auto a = small_gaussian();
  auto b = a;
  b["workers"] = 4;
  b["output"] = "elsewhere";
  EXPECT_EQ(config_hash(a), config_hash(b));
  b["seed"] = 3;
  EXPECT_NE(config_hash(a), config_hash(b));
  override_tolerance(a, "eq", 2e-4);
  EXPECT_NE(config_hash(a), config_hash(small_gaussian()));
}

TEST(Run, SmallGaussianPassesAndIsReproducible) {
  const auto c = small_gaussian();
  const auto one = run_scenario(c, scratch("one"));
  EXPECT_TRUE(one.pass());
  for (const auto& [name, r] : one.checks) EXPECT_TRUE(r.pass) << name << ": " << r.detail;
  EXPECT_EQ(one.config_hash, config_hash(c));
  for (const char* name : {"inequalities.regular", "volume.monotonicity", "volume.closed_form", "limit.closed_form", "limit_volume.constancy",
                           "equality.verdict", "equality.perturbation"})
    EXPECT_EQ(one.checks.count(name), 1u) << name;
  EXPECT_EQ(one.timing.size(), 6u);

  auto wide = c;
  wide["workers"] = 2;
  const auto two = run_scenario(wide, scratch("two"));
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(one.output)) {
    const auto name = e.path().filename().string();
    const auto text = slurp(e.path());
    EXPECT_NE(text.find(one.config_hash), std::string::npos) << name;
    if (e.path().extension() == ".csv") {
      const auto l1 = text.find('\n');
      EXPECT_EQ(text.substr(l1 + 1, text.find('\n', l1 + 1) - l1 - 1), "# config " + one.config_hash) << name;
    }
    if (name == "timing.json") continue;
    EXPECT_EQ(text, slurp(two.output / name)) << name;
    ++files;
  }
  EXPECT_GE(files, 10u);
  const auto report = json::parse(slurp(one.output / "report.json"));
  EXPECT_TRUE(report.at("pass").get<bool>());
  EXPECT_FALSE(report.contains("timing"));
}

TEST(Run, GatingFailureAndNonGating) {
  auto c = small_gaussian();
  c["stages"] = json::array({"field", "inequalities"});
  c["tolerances"]["eq"] = 1e-18;
  const auto bad = run_scenario(c, scratch("gate"));
  EXPECT_FALSE(bad.checks.at("inequalities.regular").pass);
  EXPECT_FALSE(bad.pass());
  c["non_gating"] = json::array({"inequalities.regular"});
  const auto ok = run_scenario(c, scratch("gate2"));
  EXPECT_FALSE(ok.checks.at("inequalities.regular").gating);
  EXPECT_TRUE(ok.pass());
}

TEST(Run, StageFailedWrapsModuleError) {
  auto c = json::parse(R"({
    "schema": "rflab-scenario", "version": 1, "name": "half-sphere",
    "model": {"family": "einstein-sphere", "n": 3, "R0": 6.0},
    "base": [0.0, 0.0, 0.0],
    "stages": ["volume"],
    "regular": {"t0": 0.2, "grid": {"space": [[0.0, 2.0, 9]], "time": [0.0, 0.1, 2]}}
  })");
  ASSERT_TRUE(validate_config(c).empty());
  try {
    run_scenario(c, scratch("half"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::StageFailed);
    const std::string what = e.what();
    EXPECT_NE(what.find("stage volume"), std::string::npos);
    EXPECT_NE(what.find("TailUncontrolled"), std::string::npos);
  }
}

TEST(Run, UnwritableOutput) {
  const auto file = scratch("blocker");
  fs::create_directories(file.parent_path());
  std::ofstream(file) << "x";
  try {
    run_scenario(small_gaussian(), file / "sub");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Io);
  }
}
