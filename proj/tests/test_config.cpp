#include <catch2/catch_amalgamated.hpp>

#include "sdrc/config.hpp"

using sdrc::ExperimentConfig;

TEST_CASE("empty document yields the documented defaults") {
  auto parsed = sdrc::parse_config("");
  const ExperimentConfig& c = parsed.config;
  CHECK(c.train_lambda == 0.1f);
  CHECK(c.osd_rank == 8);
  CHECK(c.vit_layers == 4);
  CHECK(c.vit_dim == 32);
  CHECK(c.vit_patch_n == 8);
  CHECK(c.train_k == 1);
  CHECK(c.seed == 42);
  CHECK(c.train_metric == sdrc::Metric::kCosine);
  CHECK(parsed.warnings.empty());
}

TEST_CASE("a single assignment overrides only that key") {
  auto parsed = sdrc::parse_config("train.lambda = 0.5\n");
  CHECK(parsed.config.train_lambda == 0.5f);
  ExperimentConfig defaults;
  CHECK(parsed.config.osd_rank == defaults.osd_rank);
  CHECK(parsed.config.vit_layers == defaults.vit_layers);
}

TEST_CASE("golden config fixture parses field by field") {
  const std::string text =
      "# experiment description\n"
      "seed = 7\n"
      "vit.layers = 3\n"
      "vit.dim = 16\n"
      "vit.granularity = per-sublayer\n"
      "vit.norm = pre-norm\n"
      "data.classes = 4\n"
      "train.optimizer = sgd\n"
      "train.metric = euclidean\n"
      "train.cpc = false\n"
      "train.temperature = 5\n"
      "target.clutter = 0.75\n"
      "paths.checkpoint = model.sdrc\n";
  auto parsed = sdrc::parse_config(text);
  const ExperimentConfig& c = parsed.config;
  CHECK(c.seed == 7);
  CHECK(c.vit_layers == 3);
  CHECK(c.vit_dim == 16);
  CHECK(c.vit_granularity == sdrc::Granularity::kPerSublayer);
  CHECK(c.vit_norm == sdrc::NormMode::kPreNorm);
  CHECK(c.data_classes == 4);
  CHECK(c.train_optimizer == sdrc::OptimizerKind::kSgd);
  CHECK(c.train_metric == sdrc::Metric::kEuclidean);
  CHECK(c.train_cpc == false);
  CHECK(c.train_temperature == 5.f);
  CHECK(c.target_clutter == 0.75f);
  CHECK(c.paths_checkpoint == "model.sdrc");
}

TEST_CASE("render then parse is the identity") {
  ExperimentConfig c;
  c.seed = 1234567890123ULL;
  c.train_lambda = 0.125f;
  c.train_lr = 3e-4f;
  c.target_texture_shift = 2.25f;
  c.vit_norm = sdrc::NormMode::kPreNorm;
  c.train_metric = sdrc::Metric::kDot;
  c.paths_source_data = "a/b.epds";
  auto parsed = sdrc::parse_config(sdrc::render_config(c));
  CHECK(sdrc::render_config(parsed.config) == sdrc::render_config(c));
  CHECK(parsed.config.seed == c.seed);
  CHECK(parsed.config.train_lr == c.train_lr);
}

TEST_CASE("unknown keys are rejected with key and line") {
  try {
    sdrc::parse_config("vit.layers = 4\nbogus.key = 1\n");
    FAIL("expected ConfigError");
  } catch (const sdrc::ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("bogus.key") != std::string::npos);
    CHECK(msg.find("line 2") != std::string::npos);
  }
}

TEST_CASE("unparseable values name the key") {
  try {
    sdrc::parse_config("train.lr = fast\n");
    FAIL("expected ConfigError");
  } catch (const sdrc::ConfigError& e) {
    CHECK(std::string(e.what()).find("train.lr") != std::string::npos);
  }
  CHECK_THROWS_AS(sdrc::parse_config("vit.layers 4\n"), sdrc::ConfigError);
  CHECK_THROWS_AS(sdrc::parse_config("= 3\n"), sdrc::ConfigError);
}

TEST_CASE("duplicate keys warn and the last one wins") {
  auto parsed = sdrc::parse_config("train.lambda = 0.2\ntrain.lambda = 0.3\n");
  CHECK(parsed.config.train_lambda == 0.3f);
  REQUIRE(parsed.warnings.size() == 1);
  CHECK(parsed.warnings[0].find("train.lambda") != std::string::npos);
}

TEST_CASE("comments and blank lines are ignored") {
  auto parsed = sdrc::parse_config("\n# full line comment\n  \nvit.dim = 24 # trailing\n");
  CHECK(parsed.config.vit_dim == 24);
}

TEST_CASE("derived configs carry the master seed into every component") {
  ExperimentConfig c;
  c.seed = 99;
  CHECK(c.train_config().seed == 99);
  CHECK(c.source_spec().seed != c.target_spec().seed);
  CHECK(c.source_spec().class_id_base == 0);
  CHECK(c.target_spec().class_id_base == 1000);
  ExperimentConfig c2;
  c2.seed = 100;
  CHECK(c.source_spec().seed != c2.source_spec().seed);
}
