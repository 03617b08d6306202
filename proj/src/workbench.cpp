#include "headlab/workbench.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>
#include <tuple>

#include "headlab/ablation.hpp"
#include "headlab/heads.hpp"
#include "headlab/hessian.hpp"

namespace headlab {

using nlohmann::json;

namespace {

[[noreturn]] void config_error(const std::string& path, const std::string& what) {
  throw std::invalid_argument("config: " + path + ": " + what);
}

template <typename T>
T get_field(const json& j, const std::string& path, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    config_error(path + "." + key, e.what());
  }
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig cfg;
  cfg.raw = j;
  cfg.hash = config_hash(j);
  if (!j.contains("model")) config_error("model", "missing");
  try {
    cfg.model = ModelConfig::from_json(j.at("model"));
  } catch (const std::exception& e) {
    config_error("model", e.what());
  }
  try {
    cfg.training = j.contains("training") ? TrainConfig::from_json(j.at("training"))
                                          : TrainConfig{};
  } catch (const std::exception& e) {
    config_error("training", e.what());
  }
  try {
    cfg.sgld = j.contains("sgld") ? SgldConfig::from_json(j.at("sgld")) : SgldConfig{};
  } catch (const std::exception& e) {
    config_error("sgld", e.what());
  }
  if (!j.contains("data") || !j.at("data").is_object() || j.at("data").empty())
    config_error("data", "at least one named data source is required");
  for (const auto& [name, spec] : j.at("data").items()) {
    if (!spec.contains("kind")) config_error("data." + name + ".kind", "missing");
    const std::string kind = spec.at("kind");
    if (kind != "synthetic" && kind != "corpus_file" && kind != "model_generator")
      config_error("data." + name + ".kind", "unknown kind " + kind);
    if (kind == "corpus_file" && !spec.contains("path"))
      config_error("data." + name + ".path", "missing");
    if (kind == "model_generator" && !spec.contains("checkpoint"))
      config_error("data." + name + ".checkpoint", "missing");
    cfg.data_specs[name] = spec;
  }
  cfg.train_source = get_field<std::string>(j, "", "train_source", "train");
  if (!cfg.data_specs.count(cfg.train_source))
    config_error("train_source", "no data source named " + cfg.train_source);
  cfg.seeds = get_field<std::vector<std::uint64_t>>(j, "", "seeds", {cfg.training.seed});
  if (cfg.seeds.empty()) config_error("seeds", "must not be empty");
  cfg.measure = j.value("measure", json::object());
  cfg.clustering = j.value("clustering", json::object());
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& file) {
  return experiment_from_json(load_json_file(file));
}

DataSource data_source_from_spec(const json& spec, std::size_t vocab,
                                 std::size_t default_k, std::uint64_t seed_override) {
  const std::string kind = spec.at("kind");
  std::uint64_t seed = seed_override ? seed_override : spec.value("seed", 0ULL);
  const std::size_t k = spec.value("context_length", default_k);
  if (kind == "synthetic") {
    PatternSpec pat;
    if (spec.contains("pattern") && spec.at("pattern").is_object() &&
        spec.at("pattern").contains("ngrams")) {
      pat = PatternSpec::from_json(spec.at("pattern"));
    } else {
      std::uint64_t table_seed = spec.value("table_seed", 0xbeefULL);
      pat = PatternSpec::example_tables(vocab, table_seed);
    }
    if (spec.contains("mixture")) {
      const json& m = spec.at("mixture");
      pat.w_ngram = m.value("ngram", pat.w_ngram);
      pat.w_skip = m.value("skip_ngram", pat.w_skip);
      pat.w_dyck = m.value("dyck", pat.w_dyck);
      pat.w_induction = m.value("induction", pat.w_induction);
      pat.w_filler = m.value("filler", pat.w_filler);
      pat.validate();
    }
    return synthetic_source(pat, k, seed);
  }
  if (kind == "corpus_file")
    return corpus_file_source(spec.at("path").get<std::string>(), k, vocab, seed);
  Checkpoint ref = load_checkpoint(spec.at("checkpoint").get<std::string>());
  return model_generator_source(ref, seed);
}

DataSource make_source(const ExperimentConfig& cfg, const std::string& name,
                       std::uint64_t seed_override) {
  auto it = cfg.data_specs.find(name);
  if (it == cfg.data_specs.end())
    config_error("data." + name, "no data source with this name");
  return data_source_from_spec(it->second, cfg.model.vocab_size,
                               cfg.model.context_length, seed_override);
}

std::filesystem::path seed_dir(const std::filesystem::path& out, std::uint64_t seed) {
  return out / ("seed_" + std::to_string(seed));
}

std::filesystem::path train_dir(const std::filesystem::path& out, std::uint64_t seed) {
  return seed_dir(out, seed) / "train";
}

std::vector<std::pair<std::uint64_t, std::filesystem::path>> list_checkpoints(
    const std::filesystem::path& training_dir) {
  std::vector<std::pair<std::uint64_t, std::filesystem::path>> out;
  if (!std::filesystem::exists(training_dir)) return out;
  for (const auto& entry : std::filesystem::directory_iterator(training_dir)) {
    if (!entry.is_directory()) continue;
    std::string name = entry.path().filename().string();
    if (name.rfind("ckpt_", 0) != 0) continue;
    out.emplace_back(std::stoull(name.substr(5)), entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

int run_train(const ExperimentConfig& cfg, const std::filesystem::path& out,
              std::uint64_t seed_override) {
  std::vector<std::uint64_t> seeds =
      seed_override ? std::vector<std::uint64_t>{seed_override} : cfg.seeds;
  for (std::uint64_t seed : seeds) {
    TrainConfig tc = cfg.training;
    tc.seed = seed;
    DataSource data = make_source(cfg, cfg.train_source);
    auto dir = train_dir(out, seed);
    TrainResult r = train(cfg.model, tc, data, dir);
    json meta;
    meta["config_hash"] = cfg.hash;
    meta["tool_version"] = kToolVersion;
    meta["seed"] = seed;
    meta["checkpoints"] = r.checkpoint_steps;
    meta["aborted"] = r.aborted;
    meta["abort_reason"] = r.abort_reason;
    std::ofstream mf(dir / "train_meta.json");
    mf << meta.dump(2) << "\n";
    if (r.aborted) {
      std::cerr << "train: aborted: " << r.abort_reason << "\n";
      return 1;
    }
  }
  return 0;
}

// -- target expansion ------------------------------------------------------------

std::vector<HeadKey> all_heads(const ModelConfig& model) {
  std::vector<HeadKey> heads;
  for (int l = 0; l < static_cast<int>(ModelConfig::n_layers); ++l)
    for (int h = 0; h < static_cast<int>(model.n_heads); ++h)
      heads.push_back({l, h});
  return heads;
}

std::vector<std::pair<std::string, std::vector<std::string>>> expand_targets(
    const ModelConfig& model, const std::vector<std::string>& specs) {
  std::vector<std::pair<std::string, std::vector<std::string>>> out;
  for (const std::string& s : specs) {
    if (s == "model") {
      out.emplace_back("model", std::vector<std::string>{"*"});
    } else if (s == "heads") {
      for (HeadKey h : all_heads(model)) {
        std::string name = "head_" + std::to_string(h.layer) + "_" + std::to_string(h.head);
        out.emplace_back(name, std::vector<std::string>{name + "_*"});
      }
    } else {
      std::string name = s;
      if (!name.empty() && name.back() == '*') name.pop_back();
      while (!name.empty() && name.back() == '_') name.pop_back();
      out.emplace_back(name, std::vector<std::string>{s});
    }
  }
  return out;
}

// -- trajectory CSV ----------------------------------------------------------------

void write_trajectory_csv(const std::filesystem::path& file,
                          const std::vector<TrajectoryRow>& rows,
                          const std::string& hash) {
  std::ofstream out(file);
  out << "# config_hash=" << hash << " tool_version=" << kToolVersion << "\n";
  out << "step,target,source,metric,value,std_error,init_loss,chains_ok\n";
  for (const TrajectoryRow& r : rows)
    out << r.step << ',' << r.target << ',' << r.source << ',' << r.metric << ','
        << fmt_double(r.value) << ',' << fmt_double(r.std_error) << ','
        << fmt_double(r.init_loss) << ',' << r.chains_ok << "\n";
}

std::vector<TrajectoryRow> read_trajectory_csv(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  std::vector<TrajectoryRow> rows;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;  // column header
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 8)
      throw std::runtime_error(file.string() + ":" + std::to_string(line_no) +
                               ": expected 8 columns, got " + std::to_string(cells.size()));
    try {
      TrajectoryRow r;
      r.step = std::stoull(cells[0]);
      r.target = cells[1];
      r.source = cells[2];
      r.metric = cells[3];
      r.value = std::stod(cells[4]);
      r.std_error = std::stod(cells[5]);
      r.init_loss = std::stod(cells[6]);
      r.chains_ok = std::stoi(cells[7]);
      rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::runtime_error(file.string() + ":" + std::to_string(line_no) + ": " +
                               e.what());
    }
  }
  return rows;
}

TrajectoryMatrix matrix_from_rows(const std::vector<TrajectoryRow>& rows,
                                  const std::string& metric,
                                  const std::vector<std::string>& sources) {
  TrajectoryMatrix m;
  m.metrics.push_back(metric);
  std::vector<std::uint64_t> steps;
  std::vector<std::string> targets;
  for (const auto& r : rows) {
    if (r.metric != metric) continue;
    if (std::find(sources.begin(), sources.end(), r.source) == sources.end()) continue;
    if (std::find(steps.begin(), steps.end(), r.step) == steps.end())
      steps.push_back(r.step);
    if (std::find(targets.begin(), targets.end(), r.target) == targets.end())
      targets.push_back(r.target);
  }
  std::sort(steps.begin(), steps.end());
  std::sort(targets.begin(), targets.end());
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const std::string& t : targets) {
    std::vector<double> row;
    for (const std::string& src : sources) {
      for (std::uint64_t s : steps) {
        double v = nan;
        for (const auto& r : rows)
          if (r.metric == metric && r.source == src && r.target == t && r.step == s) {
            v = r.value;
            break;
          }
        row.push_back(v);
      }
    }
    m.rows.push_back(std::move(row));
    m.row_ids.push_back(t);
  }
  // Impute isolated gaps by the row mean; drop rows that are entirely missing.
  for (std::size_t i = 0; i < m.rows.size();) {
    auto& row = m.rows[i];
    double sum = 0.0;
    std::size_t good = 0;
    for (double v : row)
      if (std::isfinite(v)) {
        sum += v;
        ++good;
      }
    if (good == 0) {
      m.notes.push_back("dropped " + m.row_ids[i] + " (no finite cells)");
      m.rows.erase(m.rows.begin() + i);
      m.row_ids.erase(m.row_ids.begin() + i);
      continue;
    }
    if (good < row.size()) {
      double mean = sum / static_cast<double>(good);
      for (double& v : row)
        if (!std::isfinite(v)) v = mean;
      m.notes.push_back("imputed " + m.row_ids[i]);
    }
    ++i;
  }
  return m;
}

// -- measurement grid ----------------------------------------------------------------

namespace {

struct CellJob {
  CellKey key;
  std::function<json()> compute;
};

std::vector<std::uint64_t> select_steps(
    const json& phase_cfg,
    const std::vector<std::pair<std::uint64_t, std::filesystem::path>>& ckpts) {
  std::vector<std::uint64_t> all;
  for (auto& [s, p] : ckpts) all.push_back(s);
  if (!phase_cfg.contains("steps")) return all;
  const json& sel = phase_cfg.at("steps");
  if (sel.is_string() && sel == "all") return all;
  if (sel.is_string() && sel == "final") return {all.back()};
  if (sel.is_array()) {
    std::vector<std::uint64_t> out;
    for (const auto& v : sel) {
      std::uint64_t want = v.get<std::uint64_t>();
      if (std::find(all.begin(), all.end(), want) == all.end())
        throw std::invalid_argument("measure.steps: no checkpoint at step " +
                                    std::to_string(want));
      out.push_back(want);
    }
    return out;
  }
  if (sel.is_object() && sel.contains("max")) {
    std::size_t maxn = sel.at("max").get<std::size_t>();
    if (maxn >= all.size() || maxn < 2) return all;
    std::vector<std::uint64_t> out;
    for (std::size_t i = 0; i < maxn; ++i) {
      std::size_t idx = i * (all.size() - 1) / (maxn - 1);
      if (out.empty() || all[idx] != out.back()) out.push_back(all[idx]);
    }
    return out;
  }
  throw std::invalid_argument("measure.steps: expected \"all\", \"final\", a list, or {max}");
}

std::uint64_t cell_salt(const CellKey& key) {
  return hash_string(key.file_stem()) & ((1ULL << 40) - 1);
}

// Runs jobs against the store; completed cells are skipped.
void run_cells(ResultsStore& store, std::vector<CellJob>& jobs, const GridOptions& opts,
               PhaseResult& result) {
  std::atomic<long> computed{0};
  std::atomic<int> failed{0};
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&]() {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      CellJob& job = jobs[i];
      if (store.contains(job.key)) continue;
      if (opts.max_new_cells >= 0 && computed.load() >= opts.max_new_cells) return;
      try {
        json value = job.compute();
        store.put(job.key, value);
        computed.fetch_add(1);
      } catch (const std::exception& e) {
        failed.fetch_add(1);
        std::lock_guard<std::mutex> lk(log_mutex);
        std::cerr << "cell " << job.key.file_stem() << " failed: " << e.what() << "\n";
      }
    }
  };
  result.attempted += static_cast<int>(jobs.size());
  int workers = std::max(1, opts.workers);
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  result.computed += static_cast<int>(computed.load());
  result.failed += failed.load();
  result.skipped = result.attempted - result.computed - result.failed;
}

TrajectoryRow row_from_cell(const CellKey& key, const json& value) {
  TrajectoryRow r;
  r.step = key.step;
  r.target = key.target;
  r.source = key.source;
  r.metric = key.metric;
  r.value = value.value("value", 0.0);
  r.std_error = value.value("std_error", 0.0);
  r.init_loss = value.value("init_loss", 0.0);
  r.chains_ok = value.value("chains_ok", 0);
  return r;
}

}  // namespace

PhaseResult run_measure(const ExperimentConfig& cfg, const std::filesystem::path& out,
                        const std::string& phase, const GridOptions& opts) {
  if (phase != "llc" && phase != "hessian" && phase != "ablate" && phase != "classify" &&
      phase != "compose")
    throw std::invalid_argument("measure: unknown phase " + phase);
  PhaseResult result;
  const json phase_cfg = cfg.measure.value(phase, json::object());
  std::vector<std::uint64_t> seeds =
      opts.seed_override ? std::vector<std::uint64_t>{opts.seed_override} : cfg.seeds;

  for (std::uint64_t seed : seeds) {
    auto ckpts = list_checkpoints(train_dir(out, seed));
    if (ckpts.empty())
      throw std::runtime_error("measure: no checkpoints under " +
                               train_dir(out, seed).string() + "; run train first");
    ResultsStore store(seed_dir(out, seed) / "store");
    std::vector<std::uint64_t> steps = select_steps(phase_cfg, ckpts);
    auto ckpt_path = [&](std::uint64_t s) {
      for (auto& [cs, p] : ckpts)
        if (cs == s) return p;
      throw std::logic_error("missing checkpoint");
    };

    std::vector<CellJob> jobs;
    std::vector<std::string> metrics_of_phase;

    if (phase == "llc") {
      auto targets = expand_targets(
          cfg.model, get_field<std::vector<std::string>>(phase_cfg, "measure.llc",
                                                         "targets", {"heads"}));
      auto sources = get_field<std::vector<std::string>>(phase_cfg, "measure.llc",
                                                         "sources", {cfg.train_source});
      bool include_traces = get_field<bool>(phase_cfg, "measure.llc", "traces", true);
      std::string ref_ckpt =
          get_field<std::string>(phase_cfg, "measure.llc", "reference_checkpoint", "");
      std::string metric = ref_ckpt.empty() ? "llc" : "llc_model_ref";
      metrics_of_phase = {metric};
      for (std::uint64_t s : steps)
        for (auto& [tname, patterns] : targets)
          for (const std::string& src_name : sources) {
            CellKey key{cfg.hash, s, tname, src_name, metric};
            auto path = ckpt_path(s);
            auto pats = patterns;
            jobs.push_back(
                {key, [&cfg, key, path, pats, src_name, ref_ckpt, include_traces]() {
                   Checkpoint ckpt = load_checkpoint(path);
                   DataSource src = make_source(cfg, src_name);
                   WeightMask mask = WeightMask::from_regions(ckpt.params, pats);
                   SgldConfig sgld = cfg.sgld;
                   sgld.seed = mix_seed(cfg.sgld.seed, cell_salt(key));
                   SgldObjective obj;
                   if (ref_ckpt.empty()) {
                     obj = transformer_objective(ckpt.config, ckpt.params, src, sgld,
                                                 cell_salt(key));
                   } else {
                     Checkpoint ref = load_checkpoint(ref_ckpt);
                     obj = transformer_kl_objective(ckpt.config, ckpt.params, ref, src,
                                                    sgld, cell_salt(key));
                   }
                   LlcEstimate est = estimate_llc(ckpt.params.flat(), mask, obj, sgld);
                   json v = est.to_json(include_traces);
                   v["value"] = est.lambda_hat;
                   v["std_error"] = 0.0;
                   if (est.lambda_hat < 0) v["negative_flag"] = true;
                   return v;
                 }});
          }
    } else if (phase == "hessian") {
      auto targets = expand_targets(
          cfg.model, get_field<std::vector<std::string>>(phase_cfg, "measure.hessian",
                                                         "targets", {"model"}));
      auto sources = get_field<std::vector<std::string>>(phase_cfg, "measure.hessian",
                                                         "sources", {cfg.train_source});
      auto metrics = get_field<std::vector<std::string>>(
          phase_cfg, "measure.hessian", "metrics", {"hessian_trace"});
      metrics_of_phase = metrics;
      TraceConfig base_tc;
      base_tc.samples = get_field<int>(phase_cfg, "measure.hessian", "samples", 100);
      base_tc.probes = get_field<int>(phase_cfg, "measure.hessian", "probes", 50);
      int rank_degree = get_field<int>(phase_cfg, "measure.hessian", "rank_degree", 100);
      int rank_probes = get_field<int>(phase_cfg, "measure.hessian", "rank_probes", 1);
      int rank_samples = get_field<int>(phase_cfg, "measure.hessian", "rank_samples", 3);
      for (std::uint64_t s : steps)
        for (auto& [tname, patterns] : targets)
          for (const std::string& src_name : sources)
            for (const std::string& metric : metrics) {
              if (metric == "fim_trace" && tname != "model") continue;
              CellKey key{cfg.hash, s, tname, src_name, metric};
              // Probes are shared across steps of one trajectory run.
              CellKey probe_key{cfg.hash, 0, tname, src_name, metric};
              auto path = ckpt_path(s);
              auto pats = patterns;
              jobs.push_back({key, [&cfg, key, probe_key, path, pats, src_name, metric,
                                    base_tc, rank_degree, rank_probes, rank_samples]() {
                                Checkpoint ckpt = load_checkpoint(path);
                                DataSource src = make_source(cfg, src_name);
                                WeightMask mask =
                                    WeightMask::from_regions(ckpt.params, pats);
                                std::uint64_t probe_seed =
                                    mix_seed(cfg.sgld.seed, cell_salt(probe_key));
                                json v;
                                if (metric == "hessian_trace") {
                                  TraceConfig tc = base_tc;
                                  tc.seed = probe_seed;
                                  TraceEstimate e = hessian_trace(ckpt, mask, src, tc);
                                  v["value"] = e.value;
                                  v["std_error"] = e.std_error;
                                } else if (metric == "fim_trace") {
                                  TraceConfig tc;
                                  tc.samples = 30;
                                  tc.probes = 5;
                                  TraceEstimate e = fim_trace(ckpt, tc, probe_seed);
                                  v["value"] = e.value;
                                  v["std_error"] = e.std_error;
                                } else if (metric == "max_eig") {
                                  TokenBatch b = src.sample_batch(
                                      static_cast<std::size_t>(rank_samples),
                                      mix_seed(probe_seed, 0x7ace));
                                  GradFn g = batch_grad_fn(ckpt.config, ckpt.params, b);
                                  double e = max_abs_eigenvalue(g, ckpt.params.flat(),
                                                                mask, 50, probe_seed);
                                  v["value"] = e;
                                } else if (metric == "hessian_rank_fixed" ||
                                           metric == "hessian_rank_adaptive") {
                                  TokenBatch b = src.sample_batch(
                                      static_cast<std::size_t>(rank_samples),
                                      mix_seed(probe_seed, 0x7ace));
                                  GradFn g = batch_grad_fn(ckpt.config, ckpt.params, b);
                                  RankConfig rc;
                                  rc.degree = rank_degree;
                                  rc.probes = rank_probes;
                                  rc.seed = probe_seed;
                                  rc.adaptive = metric == "hessian_rank_adaptive";
                                  RankEstimate e =
                                      hessian_rank(g, ckpt.params.flat(), mask, rc);
                                  v["value"] = e.clamped;
                                  v["raw"] = e.raw;
                                  v["std_error"] = e.std_error;
                                  v["lambda_max"] = e.lambda_max;
                                } else {
                                  throw std::invalid_argument(
                                      "measure.hessian.metrics: unknown metric " + metric);
                                }
                                return v;
                              }});
            }
    } else if (phase == "ablate") {
      auto kinds = get_field<std::vector<std::string>>(phase_cfg, "measure.ablate",
                                                       "kinds", {"zero", "mean", "resample"});
      auto sources = get_field<std::vector<std::string>>(phase_cfg, "measure.ablate",
                                                         "sources", {cfg.train_source});
      std::size_t n_eval = get_field<std::size_t>(phase_cfg, "measure.ablate",
                                                  "eval_sequences", 64);
      std::size_t n_stats = get_field<std::size_t>(phase_cfg, "measure.ablate",
                                                   "stats_sequences", 25);
      std::size_t icl_early = get_field<std::size_t>(phase_cfg, "measure.ablate",
                                                     "icl_early", 8);
      std::size_t icl_late = get_field<std::size_t>(phase_cfg, "measure.ablate",
                                                    "icl_late", 56);
      for (const std::string& kind : kinds)
        metrics_of_phase.push_back("ablation_" + kind);
      metrics_of_phase.push_back("icl");
      for (std::uint64_t s : steps)
        for (const std::string& src_name : sources) {
          for (HeadKey h : all_heads(cfg.model))
            for (const std::string& kind : kinds) {
              std::string tname =
                  "head_" + std::to_string(h.layer) + "_" + std::to_string(h.head);
              CellKey key{cfg.hash, s, tname, src_name, "ablation_" + kind};
              auto path = ckpt_path(s);
              jobs.push_back({key, [&cfg, key, path, src_name, h, kind, n_eval,
                                    n_stats]() {
                                Checkpoint ckpt = load_checkpoint(path);
                                DataSource src = make_source(cfg, src_name);
                                AblationSpec spec;
                                spec.targets = {h};
                                if (kind == "zero") spec.kind = AblationKind::zero;
                                else if (kind == "mean") spec.kind = AblationKind::mean;
                                else if (kind == "resample")
                                  spec.kind = AblationKind::resample;
                                else
                                  throw std::invalid_argument(
                                      "measure.ablate.kinds: unknown kind " + kind);
                                spec.stats_data = src;
                                spec.stats_size = n_stats;
                                json v;
                                v["value"] = ablation_score(ckpt, spec, src, n_eval,
                                                            cell_salt(key) & 0xffff);
                                return v;
                              }});
            }
          CellKey icl_key{cfg.hash, s, "model", src_name, "icl"};
          auto path = ckpt_path(s);
          jobs.push_back({icl_key, [&cfg, icl_key, path, src_name, n_eval, icl_early,
                                    icl_late]() {
                            Checkpoint ckpt = load_checkpoint(path);
                            DataSource src = make_source(cfg, src_name);
                            json v;
                            v["value"] = icl_score(ckpt, src, n_eval, icl_early, icl_late,
                                                   cell_salt(icl_key) & 0xffff);
                            return v;
                          }});
        }
    } else if (phase == "classify") {
      json classify_defaults = phase_cfg;
      std::size_t pool = get_field<std::size_t>(phase_cfg, "measure.classify", "pool",
                                                6300);
      std::size_t top_k = get_field<std::size_t>(phase_cfg, "measure.classify", "top_k",
                                                 630);
      std::size_t n_nat = get_field<std::size_t>(phase_cfg, "measure.classify",
                                                 "attention_sequences", 32);
      int probes = get_field<int>(phase_cfg, "measure.classify", "induction_probes", 8);
      auto sources = get_field<std::vector<std::string>>(phase_cfg, "measure.classify",
                                                         "sources", {cfg.train_source});
      if (!phase_cfg.contains("steps")) steps = {steps.back()};
      metrics_of_phase = {"prev_score", "cur_score", "ind_score", "multigram_count",
                          "explained_fraction"};
      for (std::uint64_t s : steps)
        for (const std::string& src_name : sources)
          for (HeadKey h : all_heads(cfg.model)) {
            std::string tname =
                "head_" + std::to_string(h.layer) + "_" + std::to_string(h.head);
            CellKey key{cfg.hash, s, tname, src_name, "classification"};
            auto path = ckpt_path(s);
            jobs.push_back({key, [&cfg, key, path, src_name, h, pool, top_k, n_nat,
                                  probes]() {
                              Checkpoint ckpt = load_checkpoint(path);
                              DataSource src = make_source(cfg, src_name);
                              auto items = tokens_in_context(ckpt, h, src, pool, top_k,
                                                             cell_salt(key) & 0xffff);
                              const std::size_t per_seq = src.context_length() - 1;
                              const std::size_t n = (pool + per_seq - 1) / per_seq;
                              TokenBatch batch =
                                  src.sample_batch(n, cell_salt(key) & 0xffff);
                              ClassifierConfig ccfg = classifier_config_for(cfg);
                              AttentionScores scores = attention_scores(
                                  ckpt, h, src, n_nat, probes,
                                  mix_seed(cfg.sgld.seed, cell_salt(key)));
                              HeadReport report = classify_head(ckpt, h, items, batch,
                                                                ccfg, scores);
                              json v = report.to_json();
                              v["value"] = scores.induction;
                              return v;
                            }});
          }
    } else {  // compose
      auto metrics = get_field<std::vector<std::string>>(
          phase_cfg, "measure.compose", "metrics", {"k_composition"});
      metrics_of_phase = metrics;
      for (std::uint64_t s : steps)
        for (int h1 = 0; h1 < static_cast<int>(cfg.model.n_heads); ++h1)
          for (int h2 = 0; h2 < static_cast<int>(cfg.model.n_heads); ++h2) {
            std::string tname = "head_0_" + std::to_string(h1) + "->head_1_" +
                                std::to_string(h2);
            auto path = ckpt_path(s);
            for (const std::string& metric : metrics) {
              CellKey key{cfg.hash, s, tname, "weights", metric};
              jobs.push_back({key, [key, path, h1, h2, metric]() {
                                Checkpoint ckpt = load_checkpoint(path);
                                CompositionScores sc = composition_scores(
                                    ckpt.config, ckpt.params, {0, h1}, {1, h2});
                                json v;
                                if (metric == "k_composition") v["value"] = sc.k;
                                else if (metric == "q_composition") v["value"] = sc.q;
                                else if (metric == "v_composition") v["value"] = sc.v;
                                else
                                  throw std::invalid_argument(
                                      "measure.compose.metrics: unknown " + metric);
                                v["degenerate"] = sc.degenerate;
                                return v;
                              }});
            }
          }
    }

    run_cells(store, jobs, opts, result);

    // Export: every completed cell of this phase's metrics, sorted.
    std::vector<TrajectoryRow> rows;
    json reports = json::object();
    for (auto& [key, value] : store.cells_for_config(cfg.hash)) {
      if (key.metric == "classification") {
        reports[key.target + "@" + std::to_string(key.step)] = value;
        // Score rows come from the report fields.
        for (auto& [mname, field] :
             std::initializer_list<std::pair<const char*, const char*>>{
                 {"prev_score", "previous_token_score"},
                 {"cur_score", "current_token_score"},
                 {"ind_score", "induction_score"},
                 {"multigram_count", "multigram_count"},
                 {"explained_fraction", "explained_fraction"}}) {
          if (std::find(metrics_of_phase.begin(), metrics_of_phase.end(), mname) ==
              metrics_of_phase.end())
            continue;
          TrajectoryRow r;
          r.step = key.step;
          r.target = key.target;
          r.source = key.source;
          r.metric = mname;
          r.value = value.value(field, 0.0);
          rows.push_back(std::move(r));
        }
        continue;
      }
      if (std::find(metrics_of_phase.begin(), metrics_of_phase.end(), key.metric) ==
          metrics_of_phase.end())
        continue;
      rows.push_back(row_from_cell(key, value));
    }
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
      return std::tie(a.metric, a.source, a.target, a.step) <
             std::tie(b.metric, b.source, b.target, b.step);
    });
    auto csv = seed_dir(out, seed) / ("trajectory_" + phase + ".csv");
    write_trajectory_csv(csv, rows, cfg.hash);
    result.csv = csv;

    if (phase == "llc") {
      // Chain-trace sidecar for diagnostics.
      json sidecar;
      sidecar["config_hash"] = cfg.hash;
      sidecar["tool_version"] = kToolVersion;
      json cells = json::object();
      for (auto& [key, value] : store.cells_for_config(cfg.hash))
        if ((key.metric == "llc" || key.metric == "llc_model_ref") &&
            value.contains("traces"))
          cells[key.file_stem()] = value;
      sidecar["cells"] = cells;
      std::ofstream sf(seed_dir(out, seed) / "llc_traces.json");
      sf << sidecar.dump() << "\n";
    }
    if (phase == "classify") {
      json doc;
      doc["config_hash"] = cfg.hash;
      doc["tool_version"] = kToolVersion;
      doc["reports"] = reports;
      std::ofstream rf(seed_dir(out, seed) / "head_reports.json");
      rf << doc.dump(2) << "\n";
      // Taxonomy CSV mirrors the per-head summary table.
      std::ofstream tf(seed_dir(out, seed) / "taxonomy.csv");
      tf << "# config_hash=" << cfg.hash << " tool_version=" << kToolVersion << "\n";
      tf << "step,head,type,subtype,multigram_count,previous_token_score,"
            "current_token_score,induction_score,explained_fraction\n";
      std::vector<std::string> keys;
      for (auto& [k, v] : reports.items()) keys.push_back(k);
      std::sort(keys.begin(), keys.end());
      for (const auto& k : keys) {
        const json& v = reports[k];
        auto at = k.find('@');
        tf << k.substr(at + 1) << ',' << k.substr(0, at) << ','
           << v.value("type", "") << ',' << v.value("subtype", "") << ','
           << v.value("multigram_count", 0) << ','
           << fmt_double(v.value("previous_token_score", 0.0)) << ','
           << fmt_double(v.value("current_token_score", 0.0)) << ','
           << fmt_double(v.value("induction_score", 0.0)) << ','
           << fmt_double(v.value("explained_fraction", 0.0)) << "\n";
      }
    }
  }
  return result;
}

ClassifierConfig classifier_config_for(const ExperimentConfig& cfg) {
  // Templates come from the training source's pattern tables.
  const json& spec = cfg.data_specs.at(cfg.train_source);
  PatternSpec pat;
  if (spec.contains("pattern") && spec.at("pattern").is_object() &&
      spec.at("pattern").contains("ngrams"))
    pat = PatternSpec::from_json(spec.at("pattern"));
  else
    pat = PatternSpec::example_tables(cfg.model.vocab_size,
                                      spec.value("table_seed", 0xbeefULL));
  ClassifierConfig ccfg = ClassifierConfig::from_pattern(pat);
  const json thresholds = cfg.measure.value("classify", json::object());
  ccfg.prev_threshold = thresholds.value("prev_threshold", ccfg.prev_threshold);
  ccfg.current_threshold = thresholds.value("current_threshold", ccfg.current_threshold);
  ccfg.induction_threshold =
      thresholds.value("induction_threshold", ccfg.induction_threshold);
  return ccfg;
}

int run_cluster(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  auto algorithms = cfg.clustering.value(
      "algorithms", std::vector<std::string>{"euclidean", "dtw", "sbd", "hac_ward"});
  int k = cfg.clustering.value("k", 3);
  auto sources = cfg.clustering.value("sources", std::vector<std::string>{cfg.train_source});
  std::string metric = cfg.clustering.value("metric", std::string("llc"));
  std::uint64_t seed = cfg.clustering.value("seed", 0ULL);

  for (std::uint64_t s : cfg.seeds) {
    auto csv = seed_dir(out, s) / "trajectory_llc.csv";
    if (!std::filesystem::exists(csv))
      throw std::runtime_error("cluster: missing " + csv.string() + "; run measure first");
    auto rows = read_trajectory_csv(csv);
    // SBD degrades on concatenated rows; warn and fall back to the first source.
    TrajectoryMatrix m = matrix_from_rows(rows, metric, sources);
    if (m.n() == 0) throw std::runtime_error("cluster: no series for metric " + metric);
    std::vector<std::string> requested_heads;
    for (const auto& id : m.row_ids) requested_heads.push_back(id);

    json outdoc;
    outdoc["config_hash"] = cfg.hash;
    outdoc["tool_version"] = kToolVersion;
    outdoc["row_ids"] = m.row_ids;
    outdoc["notes"] = m.notes;
    std::ofstream labels_csv(seed_dir(out, s) / "cluster_labels.csv");
    labels_csv << "# config_hash=" << cfg.hash << " tool_version=" << kToolVersion
               << "\n";
    labels_csv << "algorithm,k,target,label\n";
    for (const std::string& alg : algorithms) {
      ClusteringResult res;
      if (alg == "euclidean") {
        res = kmeans_euclidean(m, k, seed);
      } else if (alg == "dtw") {
        res = kmeans_dtw(m, k, seed);
      } else if (alg == "sbd") {
        TrajectoryMatrix single = m;
        if (sources.size() > 1) {
          std::cerr << "cluster: sbd uses single-metric input; using source "
                    << sources.front() << " only\n";
          single = matrix_from_rows(rows, metric, {sources.front()});
        }
        res = kmeans_sbd(single, k, seed);
      } else if (alg == "hac_ward") {
        res = hac_ward(m, k);
        auto dendro = hac_ward_dendrogram(m);
        std::ofstream df(seed_dir(out, s) / "dendrogram.json");
        df << dendrogram_to_json(dendro, m.row_ids).dump(2) << "\n";
      } else {
        throw std::invalid_argument("clustering.algorithms: unknown " + alg);
      }
      for (std::size_t i = 0; i < res.labels.size(); ++i)
        labels_csv << alg << ',' << k << ',' << m.row_ids[i] << ',' << res.labels[i]
                   << "\n";
      outdoc["results"][alg] = res.to_json();
    }
    // Contingency vs the behavioral taxonomy, when present.
    auto taxonomy = seed_dir(out, s) / "taxonomy.csv";
    if (std::filesystem::exists(taxonomy)) {
      std::ifstream tf(taxonomy);
      std::string line;
      std::map<std::string, std::string> type_of;
      std::size_t lineno = 0;
      while (std::getline(tf, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#' || lineno <= 2) {
          if (line.rfind("step,", 0) == 0) continue;
          if (line.empty() || line[0] == '#') continue;
        }
        std::stringstream ss(line);
        std::vector<std::string> cells;
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() >= 3 && cells[0] != "step") type_of[cells[1]] = cells[2];
      }
      json contingency = json::object();
      for (const std::string& alg : algorithms) {
        if (!outdoc["results"].contains(alg)) continue;
        std::map<std::string, std::map<int, int>> table;
        auto labels = outdoc["results"][alg]["labels"].get<std::vector<int>>();
        for (std::size_t i = 0; i < m.row_ids.size(); ++i) {
          auto it = type_of.find(m.row_ids[i]);
          if (it != type_of.end()) table[it->second][labels[i]]++;
        }
        json tj = json::object();
        for (auto& [type, byc] : table) {
          json cj = json::object();
          for (auto& [c, n] : byc) cj[std::to_string(c)] = n;
          tj[type] = cj;
        }
        contingency[alg] = tj;
      }
      outdoc["contingency_vs_taxonomy"] = contingency;
    }
    std::ofstream of(seed_dir(out, s) / "clusters.json");
    of << outdoc.dump(2) << "\n";
  }
  return 0;
}

int run_report(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  json doc;
  doc["config_hash"] = cfg.hash;
  doc["tool_version"] = kToolVersion;
  json per_seed = json::object();
  std::map<std::uint64_t, TrajectoryMatrix> matrices;

  for (std::uint64_t s : cfg.seeds) {
    json sec;
    auto sd = seed_dir(out, s);
    auto head_reports = sd / "head_reports.json";
    if (std::filesystem::exists(head_reports))
      sec["head_reports"] = load_json_file(head_reports)["reports"];
    auto clusters = sd / "clusters.json";
    if (std::filesystem::exists(clusters)) sec["clusters"] = load_json_file(clusters);
    auto llc_csv = sd / "trajectory_llc.csv";
    if (std::filesystem::exists(llc_csv)) {
      auto rows = read_trajectory_csv(llc_csv);
      matrices[s] = matrix_from_rows(rows, "llc", {cfg.train_source});
      // Final rLLC per target plus (multigram count, final wrLLC) pairs.
      std::map<std::string, std::pair<std::uint64_t, double>> final_llc;
      for (const auto& r : rows)
        if (r.metric == "llc" && r.source == cfg.train_source) {
          auto& slot = final_llc[r.target];
          if (r.step >= slot.first) slot = {r.step, r.value};
        }
      json fj = json::object();
      for (auto& [t, sv] : final_llc) fj[t] = sv.second;
      sec["final_llc"] = fj;
      if (sec.contains("head_reports")) {
        json pairs = json::array();
        for (auto& [key, rep] : sec["head_reports"].items()) {
          std::string head = key.substr(0, key.find('@'));
          if (final_llc.count(head))
            pairs.push_back({{"head", head},
                             {"multigram_count", rep.value("multigram_count", 0)},
                             {"final_wrllc", final_llc[head].second},
                             {"type", rep.value("type", "")}});
        }
        sec["count_vs_wrllc"] = pairs;
      }
    }
    auto ablate_csv = sd / "trajectory_ablate.csv";
    if (std::filesystem::exists(ablate_csv)) {
      auto rows = read_trajectory_csv(ablate_csv);
      json icl = json::object();
      for (const auto& r : rows)
        if (r.metric == "icl") icl[std::to_string(r.step)] = r.value;
      sec["icl"] = icl;
    }
    per_seed[std::to_string(s)] = sec;
  }
  doc["seeds"] = per_seed;

  // Cross-seed cluster transfer: fit on the first seed, transfer to the rest.
  if (cfg.seeds.size() >= 2 && matrices.count(cfg.seeds.front())) {
    const TrajectoryMatrix& base = matrices[cfg.seeds.front()];
    int k = cfg.clustering.value("k", 3);
    if (base.n() >= static_cast<std::size_t>(k)) {
      ClusteringResult fitted =
          kmeans_euclidean(base, k, cfg.clustering.value("seed", 0ULL));
      json transfer = json::object();
      for (std::size_t i = 1; i < cfg.seeds.size(); ++i) {
        std::uint64_t s = cfg.seeds[i];
        if (!matrices.count(s)) continue;
        const TrajectoryMatrix& m2 = matrices[s];
        std::vector<int> moved = transfer_labels(fitted, m2);
        ClusteringResult own = kmeans_euclidean(m2, k, cfg.clustering.value("seed", 0ULL));
        transfer[std::to_string(s)] = {
            {"labels", moved},
            {"row_ids", m2.row_ids},
            {"ari_vs_own_fit", adjusted_rand_index(moved, own.labels)}};
      }
      doc["transfer"] = {{"fit_seed", cfg.seeds.front()},
                         {"labels", fitted.labels},
                         {"row_ids", base.row_ids},
                         {"per_seed", transfer}};
    }
  }

  std::ofstream of(out / "summary.json");
  of << doc.dump(2) << "\n";
  return 0;
}

void write_svg_chart(const std::filesystem::path& file,
                     const std::vector<TrajectoryRow>& rows, const std::string& metric) {
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& r : rows) {
    if (r.metric != metric) continue;
    double x = std::log10(static_cast<double>(r.step) + 1.0);
    series[r.target + "/" + r.source].emplace_back(x, r.value);
    xmin = std::min(xmin, x);
    xmax = std::max(xmax, x);
    ymin = std::min(ymin, r.value);
    ymax = std::max(ymax, r.value);
  }
  if (series.empty()) return;
  if (xmax <= xmin) xmax = xmin + 1;
  if (ymax <= ymin) ymax = ymin + 1;
  const double w = 720, h = 400, pad = 40;
  std::ofstream svg(file);
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h
      << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
  int hue = 0;
  for (auto& [name, pts] : series) {
    std::sort(pts.begin(), pts.end());
    svg << "<polyline fill='none' stroke='hsl(" << hue << ",70%,45%)' points='";
    for (auto& [x, y] : pts) {
      double px = pad + (x - xmin) / (xmax - xmin) * (w - 2 * pad);
      double py = h - pad - (y - ymin) / (ymax - ymin) * (h - 2 * pad);
      svg << px << ',' << py << ' ';
    }
    svg << "'/>\n";
    hue = (hue + 47) % 360;
  }
  svg << "<text x='8' y='16' font-size='12'>" << metric << "</text>\n</svg>\n";
}

}  // namespace headlab
