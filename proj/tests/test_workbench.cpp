#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "headlab/workbench.hpp"

using namespace headlab;
namespace fs = std::filesystem;

namespace {

nlohmann::json tiny_experiment_json() {
  return nlohmann::json::parse(R"({
    "model": {"vocab_size": 64, "context_length": 16, "d_model": 8, "n_heads": 2,
              "layer_norm": true},
    "data": {
      "train": {"kind": "synthetic", "seed": 11, "table_seed": 2}
    },
    "training": {"steps": 30, "batch_size": 2, "optimizer": "adam", "lr": 3e-3,
                 "checkpoints_per_decade": 4},
    "sgld": {"step_size": 1e-4, "nbeta": 30, "gamma": 200, "chains": 2, "draws": 15,
             "minibatch": 2, "eval_tokens": 128, "seed": 5},
    "seeds": [3],
    "measure": {
      "llc": {"targets": ["heads"], "steps": {"max": 3}, "traces": false}
    },
    "clustering": {"k": 2, "algorithms": ["euclidean", "hac_ward"]}
  })");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("config validation reports field paths") {
  auto j = tiny_experiment_json();
  CHECK(experiment_from_json(j).model.vocab_size == 64);

  auto no_model = j;
  no_model.erase("model");
  CHECK_THROWS_WITH_AS(experiment_from_json(no_model), doctest::Contains("model"),
                       std::invalid_argument);

  auto bad_opt = j;
  bad_opt["training"]["optimizer"] = "lion";
  CHECK_THROWS_WITH_AS(experiment_from_json(bad_opt), doctest::Contains("training"),
                       std::invalid_argument);

  auto bad_source = j;
  bad_source["data"]["corpus"] = {{"kind", "corpus_file"}};
  CHECK_THROWS_WITH_AS(experiment_from_json(bad_source),
                       doctest::Contains("data.corpus.path"), std::invalid_argument);

  auto bad_kind = j;
  bad_kind["data"]["x"] = {{"kind", "magic"}};
  CHECK_THROWS_WITH_AS(experiment_from_json(bad_kind), doctest::Contains("data.x.kind"),
                       std::invalid_argument);
}

TEST_CASE("json comments are stripped outside strings") {
  std::string text = R"({
    // a comment
    "a": "http://not.a.comment", /* block */ "b": 2
  })";
  auto j = parse_json_with_comments(text);
  CHECK(j["a"] == "http://not.a.comment");
  CHECK(j["b"] == 2);
}

TEST_CASE("config hash is stable and key-order independent") {
  auto a = nlohmann::json::parse(R"({"x": 1, "y": [1, 2]})");
  auto b = nlohmann::json::parse(R"({"y": [1, 2], "x": 1})");
  CHECK(config_hash(a) == config_hash(b));
  auto c = a;
  c["x"] = 2;
  CHECK(config_hash(a) != config_hash(c));
  CHECK(config_hash(a).size() == 16);
}

TEST_CASE("results store: immutability and sorted listing") {
  TempDir tmp("headlab_store_test");
  ResultsStore store(tmp.path);
  CellKey k1{"h", 10, "head_0_1", "train", "llc"};
  CellKey k2{"h", 2, "head_0_0", "train", "llc"};
  CHECK(!store.contains(k1));
  CHECK(!store.get(k1).has_value());
  store.put(k1, {{"value", 1.5}});
  store.put(k2, {{"value", 0.5}});
  CHECK(store.contains(k1));
  CHECK((*store.get(k1))["value"] == 1.5);
  store.put(k1, {{"value", 1.5}});  // same value: fine
  CHECK_THROWS_WITH_AS(store.put(k1, {{"value", 9.0}}), doctest::Contains("different"),
                       std::runtime_error);
  auto cells = store.cells_for_config("h");
  REQUIRE(cells.size() == 2);
  CHECK(cells[0].first.step == 2);  // sorted by key
  CHECK(cells[1].first.step == 10);
  CHECK(store.cells_for_config("other").empty());
}

TEST_CASE("trajectory csv round trip and malformed input") {
  TempDir tmp("headlab_csv_test");
  std::vector<TrajectoryRow> rows{{100, "head_0_0", "train", "llc", 1.25, 0.0, 3.5, 4},
                                  {200, "head_0_1", "train", "llc", -0.5, 0.1, 3.25, 4}};
  auto f = tmp.path / "t.csv";
  write_trajectory_csv(f, rows, "deadbeef");
  auto back = read_trajectory_csv(f);
  REQUIRE(back.size() == 2);
  CHECK(back[0].step == 100);
  CHECK(back[1].value == -0.5);
  CHECK(back[1].chains_ok == 4);
  std::string text = slurp(f);
  CHECK(text.find("config_hash=deadbeef") != std::string::npos);

  auto bad = tmp.path / "bad.csv";
  {
    std::ofstream out(bad);
    out << "# x\nstep,target,source,metric,value,std_error,init_loss,chains_ok\n";
    out << "1,a,b,c,1.0\n";
  }
  CHECK_THROWS_WITH_AS(read_trajectory_csv(bad), doctest::Contains(":3"),
                       std::runtime_error);
}

TEST_CASE("target expansion") {
  ModelConfig m;
  m.vocab_size = 64;
  m.context_length = 16;
  m.d_model = 8;
  m.n_heads = 2;
  auto t1 = expand_targets(m, {"model"});
  REQUIRE(t1.size() == 1);
  CHECK(t1[0].first == "model");
  auto t2 = expand_targets(m, {"heads"});
  CHECK(t2.size() == 4);
  CHECK(t2[0].first == "head_0_0");
  CHECK(t2[0].second == std::vector<std::string>{"head_0_0_*"});
  auto t3 = expand_targets(m, {"head_1_0_Q"});
  CHECK(t3[0].first == "head_1_0_Q");
}

TEST_CASE("matrix from rows: concatenation, imputation, drops") {
  std::vector<TrajectoryRow> rows;
  for (std::uint64_t s : {1ULL, 2ULL, 3ULL}) {
    rows.push_back({s, "a", "train", "llc", double(s), 0, 0, 2});
    rows.push_back({s, "a", "alt", "llc", 10.0 + s, 0, 0, 2});
    if (s != 2) rows.push_back({s, "b", "train", "llc", -double(s), 0, 0, 2});
    if (s != 2) rows.push_back({s, "b", "alt", "llc", -10.0 - s, 0, 0, 2});
  }
  TrajectoryMatrix m = matrix_from_rows(rows, "llc", {"train", "alt"});
  REQUIRE(m.n() == 2);
  CHECK(m.dim() == 6);  // 3 steps x 2 sources
  CHECK(m.rows[0] == std::vector<double>{1, 2, 3, 11, 12, 13});
  // 'b' had a missing middle step in each source: imputed by the row mean
  CHECK(m.notes.size() == 1);
  CHECK(m.rows[1][0] == -1.0);
  CHECK(m.rows[1][2] == -3.0);
}

TEST_CASE("tiny pipeline: train, measure, resume, cluster, report") {
  ExperimentConfig cfg = experiment_from_json(tiny_experiment_json());
  TempDir out("headlab_pipeline_test");

  REQUIRE(run_train(cfg, out.path) == 0);
  auto ckpts = list_checkpoints(train_dir(out.path, 3));
  REQUIRE(!ckpts.empty());
  CHECK(ckpts.front().first == 0);
  CHECK(ckpts.back().first == 30);

  SUBCASE("training rerun is byte-identical") {
    TempDir out2("headlab_pipeline_rerun");
    REQUIRE(run_train(cfg, out2.path) == 0);
    for (auto& [step, dir] : ckpts) {
      auto other = train_dir(out2.path, 3) / dir.filename();
      CHECK(slurp(dir / "params.bin") == slurp(other / "params.bin"));
    }
  }

  GridOptions opts;
  PhaseResult r = run_measure(cfg, out.path, "llc", opts);
  CHECK(r.failed == 0);
  CHECK(r.computed == 12);  // 3 steps x 4 heads
  CHECK(fs::exists(r.csv));
  auto rows = read_trajectory_csv(r.csv);
  CHECK(rows.size() == 12);

  SUBCASE("grid cells match a direct estimate") {
    Checkpoint ck = load_checkpoint(ckpts.back().second);
    DataSource src = make_source(cfg, "train");
    WeightMask mask = WeightMask::from_regions(ck.params, {"head_0_0_*"});
    // reproduce the cell seeding policy
    CellKey key{cfg.hash, ck.step, "head_0_0", "train", "llc"};
    // the exported row for this cell
    double row_value = 0.0;
    for (const auto& row : rows)
      if (row.step == ck.step && row.target == "head_0_0") row_value = row.value;
    // a second store in a fresh directory recomputes the same value
    TempDir out3("headlab_pipeline_cellcheck");
    fs::create_directories(seed_dir(out3.path, 3));
    fs::copy(train_dir(out.path, 3), train_dir(out3.path, 3), fs::copy_options::recursive);
    PhaseResult r3 = run_measure(cfg, out3.path, "llc", opts);
    auto rows3 = read_trajectory_csv(r3.csv);
    double row_value3 = 0.0;
    for (const auto& row : rows3)
      if (row.step == ck.step && row.target == "head_0_0") row_value3 = row.value;
    CHECK(row_value == row_value3);
    (void)mask;
    (void)key;
  }

  SUBCASE("rerun is a no-op and byte-identical") {
    std::string before = slurp(r.csv);
    PhaseResult r2 = run_measure(cfg, out.path, "llc", opts);
    CHECK(r2.computed == 0);
    CHECK(r2.skipped == 12);
    CHECK(slurp(r2.csv) == before);
  }

  SUBCASE("kill-and-resume produces the identical final csv") {
    TempDir out4("headlab_pipeline_resume");
    fs::create_directories(seed_dir(out4.path, 3));
    fs::copy(train_dir(out.path, 3), train_dir(out4.path, 3), fs::copy_options::recursive);
    GridOptions limited;
    limited.max_new_cells = 5;  // simulated kill mid-grid
    run_measure(cfg, out4.path, "llc", limited);
    PhaseResult full = run_measure(cfg, out4.path, "llc", opts);
    CHECK(full.computed == 7);
    CHECK(slurp(full.csv) == slurp(r.csv));
  }

  SUBCASE("cluster and report consume the grid") {
    REQUIRE(run_cluster(cfg, out.path) == 0);
    CHECK(fs::exists(seed_dir(out.path, 3) / "clusters.json"));
    CHECK(fs::exists(seed_dir(out.path, 3) / "cluster_labels.csv"));
    CHECK(fs::exists(seed_dir(out.path, 3) / "dendrogram.json"));
    REQUIRE(run_report(cfg, out.path) == 0);
    auto summary = load_json_file(out.path / "summary.json");
    CHECK(summary["config_hash"] == cfg.hash);
    CHECK(summary["seeds"].contains("3"));
    CHECK(summary["seeds"]["3"].contains("final_llc"));
    // svg smoke chart
    write_svg_chart(out.path / "chart.svg", rows, "llc");
    CHECK(fs::exists(out.path / "chart.svg"));
  }

  SUBCASE("unknown phase is a usage error") {
    CHECK_THROWS_WITH_AS(run_measure(cfg, out.path, "banana", opts),
                         doctest::Contains("unknown phase"), std::invalid_argument);
  }

  SUBCASE("failing cells are counted, not fatal") {
    auto j = tiny_experiment_json();
    j["measure"]["llc"]["reference_checkpoint"] = "/nonexistent/ckpt";
    ExperimentConfig bad = experiment_from_json(j);
    TempDir out5("headlab_pipeline_fail");
    fs::create_directories(seed_dir(out5.path, 3));
    fs::copy(train_dir(out.path, 3), train_dir(out5.path, 3), fs::copy_options::recursive);
    PhaseResult rf = run_measure(bad, out5.path, "llc", opts);
    CHECK(rf.failed == rf.attempted);
    CHECK(rf.failure_rate() > 0.10);
  }
}

TEST_CASE("empty step list gives a header-only csv") {
  auto j = tiny_experiment_json();
  j["measure"]["llc"]["steps"] = nlohmann::json::array();
  ExperimentConfig cfg = experiment_from_json(j);
  TempDir out("headlab_empty_grid");
  REQUIRE(run_train(cfg, out.path) == 0);
  PhaseResult r = run_measure(cfg, out.path, "llc");
  CHECK(r.attempted == 0);
  auto rows = read_trajectory_csv(r.csv);
  CHECK(rows.empty());
}

TEST_CASE("other measurement phases run on the tiny model") {
  auto j = tiny_experiment_json();
  j["measure"]["hessian"] = {{"targets", {"model"}},
                             {"steps", "final"},
                             {"metrics", {"hessian_trace", "max_eig"}},
                             {"samples", 4},
                             {"probes", 4}};
  j["measure"]["ablate"] = {{"steps", "final"}, {"eval_sequences", 6},
                            {"stats_sequences", 4}, {"icl_early", 4}, {"icl_late", 12},
                            {"kinds", {"zero", "mean"}}};
  j["measure"]["classify"] = {{"pool", 60}, {"top_k", 30}, {"attention_sequences", 4},
                              {"induction_probes", 2}};
  j["measure"]["compose"] = {{"steps", "final"}, {"metrics", {"k_composition"}}};
  ExperimentConfig cfg = experiment_from_json(j);
  TempDir out("headlab_phases");
  REQUIRE(run_train(cfg, out.path) == 0);
  for (const std::string phase : {"hessian", "ablate", "classify", "compose"}) {
    PhaseResult r = run_measure(cfg, out.path, phase);
    CHECK(r.failed == 0);
    CHECK(fs::exists(r.csv));
  }
  CHECK(fs::exists(seed_dir(out.path, 3) / "taxonomy.csv"));
  CHECK(fs::exists(seed_dir(out.path, 3) / "head_reports.json"));
}
