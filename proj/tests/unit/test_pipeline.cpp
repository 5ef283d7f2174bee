#include <doctest.h>

#include "test_support.hpp"
#include "vitprobe/cache.hpp"
#include "vitprobe/errors.hpp"
#include "vitprobe/fixtures.hpp"
#include "vitprobe/grid.hpp"
#include "vitprobe/pipeline.hpp"

namespace fs = std::filesystem;
using namespace vitprobe;
using testing::TempDir;

namespace {

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = sha256_file(e.path());
  }
  return out;
}

std::size_t count_files(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

}  // namespace

TEST_CASE("config defaults") {
  const ExperimentConfig c = parse_experiment_config("", "/base");
  CHECK(c.random_seeds == std::vector<std::uint64_t>{0});
  CHECK(c.probe.lr == 1e-3);
  CHECK(c.probe.weight_decay == 1e-4);
  CHECK(c.probe.batch_size == 512);
  CHECK(c.probe.max_epochs == 100);
  CHECK(c.probe.patience == 10);
  CHECK(c.probe.hidden_width == 256);
  CHECK(!c.probe.standardize);
  CHECK(c.pooling == Pooling::pooled);
  CHECK(c.dilation_radius == 1);
  CHECK(c.tie == TieRule::strict_majority);
  CHECK(c.max_depth_m == 10.0);
  CHECK(c.random_directions == 10);
  CHECK(c.contrast_pairs == 20);
  CHECK(c.guard_epsilon == 1e-3);
  CHECK(!c.master_seed);
  CHECK(c.worker_count() >= 1);
  CHECK(c.results() == c.cache_dir / "results");
}

TEST_CASE("config parsing and overrides") {
  const std::string text = R"(
[model]
weights = "w/model.safetensors"
random_seeds = [3, 4]

[data]
depth_root = "/abs/nyu"
tie = "half-or-more"

[run]
master_seed = 9
workers = 2
tasks = ["depth"]

[probe]
lr = 0.01
kinds = ["linear"]
pooling = "per-image"
)";
  const ExperimentConfig c = parse_experiment_config(text, "/base", {"probe.batch_size=64",
                                                                    "run.cache_dir=elsewhere",
                                                                    "interventions.ablation_layers=[0, 2]"});
  CHECK(c.weights == fs::path("/base/w/model.safetensors"));
  CHECK(c.random_seeds == std::vector<std::uint64_t>{3, 4});
  CHECK(*c.depth_root == fs::path("/abs/nyu"));
  CHECK(!c.boundary_root);
  CHECK(c.tie == TieRule::half_or_more);
  CHECK(*c.master_seed == 9);
  CHECK(c.worker_count() == 2);
  CHECK(c.has_task(Task::depth));
  CHECK(!c.has_task(Task::boundary));
  CHECK(c.probe.lr == 0.01);
  CHECK(c.probe.batch_size == 64);
  CHECK(c.kinds == std::vector<ProbeKind>{ProbeKind::linear});
  CHECK(c.pooling == Pooling::per_image);
  // Overrides come from the command line, so they resolve against the working directory.
  CHECK(c.cache_dir == fs::current_path() / "elsewhere");
  CHECK(c.ablation_layers == std::vector<std::size_t>{0, 2});

  CHECK_THROWS_AS(parse_experiment_config("[probe]\nlearning_rate = 1", "/"), DataError);
  CHECK_THROWS_AS(parse_experiment_config("[nope]\nx = 1", "/"), DataError);
  CHECK_THROWS_AS(parse_experiment_config("[probe]\nlr = \"fast\"", "/"), DataError);
  CHECK_THROWS_AS(parse_experiment_config("", "/", {"probe.lr"}), DataError);
  CHECK_THROWS_AS(parse_experiment_config("[probe\n", "/"), FormatError);
  CHECK_THROWS_AS(parse_experiment_config("", "/", {"probe.batch_size=0"}), DataError);
  CHECK_THROWS_AS(load_experiment_config("/no/such/file.toml"), IoError);
}

TEST_CASE("report on an empty directory") {
  TempDir tmp;
  const ReportSummary r = stage_report(tmp.path());
  CHECK(r.empty);
  CHECK(r.markdown == "nothing to report\n");
  CHECK(r.written.empty());
  CHECK(fs::is_empty(tmp.path()));
  CHECK(stage_report(tmp / "missing").empty);
}

TEST_CASE("peak layer helpers") {
  std::vector<MetricRow> rows;
  for (std::size_t l = 0; l < 4; ++l) {
    MetricRow r;
    r.layer = l;
    r.kind = "linear";
    r.init = "pretrained";
    r.ap = l == 2 ? 0.9 : 0.5;
    r.mae = l == 3 ? 0.05 : 0.1;
    rows.push_back(r);
    r.init = "random-s0";
    r.ap = 0.99;
    r.mae = 0.01;
    rows.push_back(r);
  }
  CHECK(boundary_peak_layer(rows) == 2u);
  CHECK(depth_peak_layer(rows) == 3u);
  CHECK(!boundary_peak_layer({}));
}

TEST_CASE("fixtures") {
  TempDir tmp;
  make_fixture(FixtureKind::planted_regression, 1, tmp / "a");
  make_fixture(FixtureKind::planted_regression, 1, tmp / "b");
  CHECK(snapshot(tmp / "a") == snapshot(tmp / "b"));
  CHECK(fs::exists(tmp / "a" / "planted.json"));

  const PlantedRegression p = make_planted_regression(1);
  double norm = 0;
  for (double v : p.w_star) norm += v * v;
  CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(p.train.labels.size() == 3500);
  CHECK(p.val.labels.size() == 500);
  CHECK(p.test.labels.size() == 1000);

  const FixtureFiles f = make_fixture(FixtureKind::tiny_encoder, 2, tmp / "tiny");
  const NamedTensorStore w = load_weights(f.weights);
  CHECK(infer_config(w) == tiny_encoder_config(2));
  CHECK(fs::exists(f.config));

  const FixtureFiles id = make_fixture(FixtureKind::identity_carry, 2, tmp / "id");
  CHECK(infer_config(load_weights(id.weights)).layers == 3);
  CHECK_THROWS(parse_fixture_kind("nope"));
}

TEST_CASE("full fixture pipeline") {
  TempDir tmp;
  const FixtureFiles f = make_fixture(FixtureKind::tiny_encoder, 1, tmp / "fx");
  const ExperimentConfig c = load_experiment_config(f.config);
  run_all(c);

  const fs::path results = c.results();
  for (const char* name : {"boundary_metrics.csv", "depth_metrics.csv", "boundary_table.csv",
                           "depth_table.csv", "cross_task.csv", "boundary_curves.json",
                           "depth_curves.json", "ablation.csv", "dose_response.json",
                           "contrast_pairs.csv", "influence_matrix.csv", "influence_matrix.json",
                           "summary.md"}) {
    CHECK_MESSAGE(fs::exists(results / name), name);
  }

  SUBCASE("grid counts: 3 taps x 2 kinds x 2 inits") {
    for (const char* task : {"boundary", "depth"}) {
      const auto rows =
          parse_metric_rows_csv(testing::read_text(results / (std::string(task) + "_metrics.csv")));
      CHECK(rows.size() == 12);
      for (const auto& r : rows) {
        if (std::string(task) == "boundary") CHECK(r.ap.has_value());
        else CHECK(r.mae.has_value());
      }
      CHECK(count_files(c.cache_dir / "probes" / task, ".ckpt") == 12);
    }
  }

  SUBCASE("caches are intact") {
    for (const char* task : {"boundary", "depth"}) {
      FeatureCache cache(c.cache_dir / "features" / task);
      CHECK(cache.verify().empty());
      CHECK(cache.stack_shape() == Shape{3, 4, 16});
      // Every label set pairs with a cached stack under each init.
      const LabelCache labels = read_label_cache(c.cache_dir / "labels" / task);
      for (const auto& s : labels.sets) {
        CHECK(cache.contains(s.image_id, InitKind::pretrained()));
        CHECK(cache.contains(s.image_id, InitKind::random_seed(c.random_seeds[0])));
      }
    }
  }

  SUBCASE("rerun is a no-op") {
    const auto before = snapshot(c.cache_dir);
    run_all(c);
    auto after = snapshot(c.cache_dir);
    // summary.md carries a timestamp; everything else must be byte-identical.
    after.erase("results/summary.md");
    auto b = before;
    b.erase("results/summary.md");
    CHECK(after == b);
  }

  SUBCASE("report regenerates derived tables") {
    fs::remove(results / "boundary_table.csv");
    const ReportSummary r = stage_report(results);
    CHECK(!r.empty);
    CHECK(fs::exists(results / "boundary_table.csv"));
    CHECK(r.markdown.find("Peak layer") != std::string::npos);
    CHECK(r.markdown.find("Depth peak minus boundary peak") != std::string::npos);
  }

  SUBCASE("retraining reuses checkpoints with equal config") {
    const fs::path ckpt = checkpoint_path(c.cache_dir / "probes" / "depth", InitKind::pretrained(),
                                          ProbeKind::linear, 1);
    const auto t0 = fs::last_write_time(ckpt);
    fs::remove(c.cache_dir / "stages" / "train-grid-depth.json");
    stage_train_grid(c);
    CHECK(fs::last_write_time(ckpt) == t0);
  }
}

TEST_CASE("grid-only run marks interventions absent") {
  TempDir tmp;
  const FixtureFiles f = make_fixture(FixtureKind::tiny_encoder, 3, tmp / "fx");
  const ExperimentConfig c =
      load_experiment_config(f.config, {"run.ablate=false", "run.dose=false", "run.patch=false"});
  run_all(c);
  CHECK(!fs::exists(c.results() / "ablation.csv"));
  const std::string md = testing::read_text(c.results() / "summary.md");
  CHECK(md.find("Ablation: absent") != std::string::npos);
  CHECK(md.find("Dose-response: absent") != std::string::npos);
  CHECK(md.find("Patching: absent") != std::string::npos);
  CHECK(md.find("Peak layer") != std::string::npos);
}

TEST_CASE("intervention stages need a master seed") {
  TempDir tmp;
  const FixtureFiles f = make_fixture(FixtureKind::tiny_encoder, 1, tmp / "fx");
  ExperimentConfig c = load_experiment_config(f.config);
  c.master_seed.reset();
  CHECK_THROWS_AS(stage_ablate(c), ContractError);
  CHECK_THROWS_AS(stage_dose(c), ContractError);
  CHECK_THROWS_AS(stage_patch(c), ContractError);
}

TEST_CASE("extract names a corrupt image and encodes the rest") {
  TempDir tmp;
  const FixtureFiles f = make_fixture(FixtureKind::tiny_encoder, 1, tmp / "fx");
  ExperimentConfig c = load_experiment_config(f.config, {"run.tasks=[\"depth\"]"});
  const DatasetIndex idx = assign_splits(Task::depth, *c.depth_root);
  const fs::path victim = idx.items[3].image;
  std::ofstream(victim, std::ios::binary) << "not an image";

  try {
    stage_extract(c);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find(victim.string()) != std::string::npos);
  }
  FeatureCache cache(c.cache_dir / "features" / "depth");
  for (std::size_t i = 0; i < idx.items.size(); ++i) {
    CHECK(cache.contains(idx.items[i].image_id, InitKind::pretrained()) == (i != 3));
  }
  CHECK(cache.verify().empty());
}

TEST_CASE("changed weights invalidate cached features") {
  TempDir tmp;
  const FixtureFiles f = make_fixture(FixtureKind::tiny_encoder, 1, tmp / "fx");
  const ExperimentConfig c = load_experiment_config(f.config, {"run.tasks=[\"depth\"]"});
  stage_extract(c);
  const fs::path dir = c.cache_dir / "features" / "depth";
  const auto first = FeatureCache(dir).get(FeatureCache(dir).entries().front().image_id,
                                           InitKind::pretrained());
  write_safetensors(c.weights, make_tiny_encoder(99));
  stage_extract(c);
  const FeatureCache cache(dir);
  CHECK(cache.get(first.image_id, InitKind::pretrained()).values != first.values);
  CHECK(cache.verify().empty());
}
