#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "latentmem/runconfig.hpp"

using namespace latentmem;

TEST_CASE("empty config file keeps the documented defaults") {
  const std::string path = "cfg_empty_test.cfg";
  {
    std::ofstream f(path);
    f << "# nothing but a comment\n\n";
  }
  RunConfig cfg = RunConfig::load(path);
  CHECK(cfg.latent_len == 8);
  CHECK(cfg.topk == 1);
  CHECK(cfg.clip_eps == doctest::Approx(0.2));
  CHECK(cfg.learning_rate == doctest::Approx(1e-5));
  CHECK(cfg.kl_weight == doctest::Approx(0.0));
  CHECK(cfg.train_temperature == doctest::Approx(1.0));
  CHECK(cfg.eval_temperature == doctest::Approx(0.0));
  CHECK(cfg.epochs_per_batch == 1);
  CHECK(cfg.warmup_ratio == doctest::Approx(0.1));
  CHECK(cfg.grad_clip_norm == doctest::Approx(1.0));
  std::remove(path.c_str());
}

TEST_CASE("file values override defaults and CLI overrides override the file") {
  const std::string path = "cfg_override_test.cfg";
  {
    std::ofstream f(path);
    f << "group_size = 8\n";
    f << "seed = 7   # trailing comment\n";
    f << "mode = raw_context\n";
  }
  RunConfig cfg = RunConfig::load(path, {"group_size=16", "run_tag=exp1"});
  CHECK(cfg.group_size == 16);
  CHECK(cfg.seed == 7);
  CHECK(cfg.mode == "raw_context");
  CHECK(cfg.run_tag == "exp1");
  std::remove(path.c_str());
}

TEST_CASE("unknown keys are rejected with a nearest-key suggestion") {
  CHECK_THROWS_WITH_AS(RunConfig::load("", {"grop_size=8"}), doctest::Contains("group_size"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(RunConfig::load("", {"latent_legnth=4"}), doctest::Contains("latent_len"),
                       std::invalid_argument);
  CHECK_THROWS_AS(RunConfig::load("", {"workers=abc"}), std::invalid_argument);
}

TEST_CASE("echo reproduces a loadable, identical config") {
  RunConfig cfg = RunConfig::load("", {"group_size=5", "learning_rate=0.003", "mode=latentmem"});
  const std::string echoed = cfg.echo();
  const std::string path = "cfg_echo_test.cfg";
  {
    std::ofstream f(path);
    f << echoed;
  }
  RunConfig reloaded = RunConfig::load(path);
  CHECK(reloaded.echo() == echoed);
  std::remove(path.c_str());
}

TEST_CASE("metrics writer: header-only file, row counts, numeric round trip") {
  const std::string path = "metrics_test.csv";
  {
    MetricsWriter w(path);
  }
  {
    std::ifstream f(path);
    std::string line;
    int lines = 0;
    while (std::getline(f, line)) ++lines;
    CHECK(lines == 1);
  }
  {
    MetricsWriter w(path);
    w.train_row(0, 0.125, -0.00123456789, 0.25, 1.0609876, 421);
    w.eval_row(0, 0.333333333);
    w.train_row(1, 0.5, 2.5e-7, 0.0, 0.75, 98);
  }
  std::ifstream f(path);
  std::string header;
  std::getline(f, header);
  CHECK(header == std::string(MetricsWriter::kHeader));
  std::vector<std::string> rows;
  std::string line;
  while (std::getline(f, line)) rows.push_back(line);
  REQUIRE(rows.size() == 3);

  // numeric fields recover exactly at 9 significant digits
  auto field = [](const std::string& row, int idx) {
    std::stringstream ss(row);
    std::string cell;
    for (int i = 0; i <= idx; ++i) std::getline(ss, cell, ',');
    return cell;
  };
  CHECK(std::stod(field(rows[0], 1)) == 0.125);
  CHECK(std::stod(field(rows[0], 3)) == -0.00123456789);
  CHECK(std::stod(field(rows[0], 5)) == 1.0609876);
  CHECK(field(rows[1], 1) == "nan");
  CHECK(std::stod(field(rows[1], 2)) == 0.333333333);
  CHECK(std::stod(field(rows[2], 3)) == 2.5e-7);
  std::remove(path.c_str());
}
