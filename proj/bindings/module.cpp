// Python bindings over the core: training, the refined-complexity
// estimators, ablations, head analysis and trajectory clustering.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "headlab/ablation.hpp"
#include "headlab/clustering.hpp"
#include "headlab/heads.hpp"
#include "headlab/hessian.hpp"
#include "headlab/llc.hpp"
#include "headlab/model.hpp"
#include "headlab/tokenizer.hpp"
#include "headlab/workbench.hpp"

namespace py = pybind11;
using namespace headlab;
using nlohmann::json;

namespace {

json parse(const std::string& text) { return parse_json_with_comments(text); }

ExperimentConfig config_of(const std::string& text) {
  return experiment_from_json(parse(text));
}

// json -> python object through the string round trip; plenty fast here.
py::object to_py(const json& j) {
  py::module_ pyjson = py::module_::import("json");
  return pyjson.attr("loads")(j.dump());
}

DataSource source_of(const std::string& spec, std::size_t vocab, std::size_t k) {
  return data_source_from_spec(parse(spec), vocab, k);
}

TokenBatch batch_from_rows(const std::vector<std::vector<int>>& rows) {
  TokenBatch b;
  b.n = rows.size();
  if (b.n == 0) throw std::invalid_argument("empty batch");
  b.length = rows.front().size();
  b.annotations.resize(b.n);
  for (const auto& row : rows) {
    if (row.size() != b.length) throw std::invalid_argument("ragged batch");
    for (int t : row) b.tokens.push_back(static_cast<TokenId>(t));
  }
  return b;
}

TrajectoryMatrix matrix_from_rows_py(const std::vector<std::vector<double>>& rows) {
  TrajectoryMatrix m;
  m.rows = rows;
  for (std::size_t i = 0; i < rows.size(); ++i)
    m.row_ids.push_back("row" + std::to_string(i));
  return m;
}

py::dict result_to_py(const ClusteringResult& r) {
  py::dict d;
  d["algorithm"] = r.algorithm;
  d["k"] = r.k;
  d["labels"] = r.labels;
  d["centroids"] = r.centroids;
  d["silhouette"] = r.metrics.silhouette;
  d["silhouette_defined"] = r.metrics.silhouette_defined;
  d["calinski_harabasz"] = r.metrics.calinski_harabasz;
  d["davies_bouldin"] = r.metrics.davies_bouldin;
  return d;
}

ClusteringResult result_from_py(const py::dict& d) {
  ClusteringResult r;
  r.algorithm = d["algorithm"].cast<std::string>();
  r.k = d["k"].cast<int>();
  r.labels = d["labels"].cast<std::vector<int>>();
  r.centroids = d["centroids"].cast<std::vector<std::vector<double>>>();
  return r;
}

}  // namespace

PYBIND11_MODULE(_headlab, m) {
  m.doc() = "workbench for measuring attention-head development in tiny transformers";
  m.attr("__version__") = kToolVersion;

  // -- pipeline -------------------------------------------------------------
  m.def("train", [](const std::string& config, const std::string& out) {
    return run_train(config_of(config), out);
  });
  m.def(
      "measure",
      [](const std::string& config, const std::string& out, const std::string& phase,
         int workers) {
        GridOptions opts;
        opts.workers = workers;
        PhaseResult r = run_measure(config_of(config), out, phase, opts);
        py::dict d;
        d["attempted"] = r.attempted;
        d["computed"] = r.computed;
        d["skipped"] = r.skipped;
        d["failed"] = r.failed;
        d["csv"] = r.csv.string();
        return d;
      },
      py::arg("config"), py::arg("out"), py::arg("phase"), py::arg("workers") = 1);
  m.def("cluster", [](const std::string& config, const std::string& out) {
    return run_cluster(config_of(config), out);
  });
  m.def("report", [](const std::string& config, const std::string& out) {
    return run_report(config_of(config), out);
  });

  // -- data -----------------------------------------------------------------
  m.def(
      "sample_batch",
      [](const std::string& source_spec, std::size_t vocab, std::size_t k,
         std::size_t n, std::uint64_t batch_index) {
        TokenBatch b = source_of(source_spec, vocab, k).sample_batch(n, batch_index);
        std::vector<std::vector<int>> rows(b.n, std::vector<int>(b.length));
        for (std::size_t i = 0; i < b.n; ++i)
          for (std::size_t j = 0; j < b.length; ++j) rows[i][j] = b.seq(i)[j];
        py::list ann;
        for (const auto& seq_ann : b.annotations) {
          py::list per_seq;
          for (const Annotation& a : seq_ann) {
            py::dict d;
            d["kind"] = pattern_kind_name(a.kind);
            d["begin"] = a.begin;
            d["end"] = a.end;
            d["ref_begin"] = a.ref_begin;
            d["predictable"] = a.predictable;
            per_seq.append(d);
          }
          ann.append(per_seq);
        }
        return py::make_tuple(rows, ann);
      },
      py::arg("source_spec"), py::arg("vocab"), py::arg("context_length"),
      py::arg("n"), py::arg("batch_index") = 0);
  m.def("example_pattern_spec", [](std::size_t vocab, std::uint64_t seed) {
    return to_py(PatternSpec::example_tables(vocab, seed).to_json());
  });

  // -- model ----------------------------------------------------------------
  m.def("empirical_loss", [](const std::string& ckpt_dir,
                             const std::vector<std::vector<int>>& rows) {
    Checkpoint c = load_checkpoint(ckpt_dir);
    return empirical_loss(c.config, c.params, batch_from_rows(rows));
  });
  m.def("forward_probs", [](const std::string& ckpt_dir, const std::vector<int>& toks) {
    Checkpoint c = load_checkpoint(ckpt_dir);
    std::vector<TokenId> t(toks.begin(), toks.end());
    EvalHooks hooks;
    hooks.keep_probs = true;
    SeqEval e = eval_sequence(c.config, c.params, t, hooks);
    std::vector<std::vector<double>> probs(t.size(),
                                           std::vector<double>(c.config.vocab_size));
    for (std::size_t i = 0; i < t.size(); ++i)
      for (std::size_t j = 0; j < c.config.vocab_size; ++j) probs[i][j] = e.probs(i, j);
    return probs;
  });

  // -- estimators -------------------------------------------------------------
  m.def(
      "estimate_llc",
      [](const std::string& ckpt_dir, const std::vector<std::string>& target_patterns,
         const std::string& source_spec, const std::string& sgld_json) {
        Checkpoint c = load_checkpoint(ckpt_dir);
        DataSource src =
            source_of(source_spec, c.config.vocab_size, c.config.context_length);
        SgldConfig sgld = SgldConfig::from_json(parse(sgld_json));
        WeightMask mask = WeightMask::from_regions(c.params, target_patterns);
        SgldObjective obj = transformer_objective(c.config, c.params, src, sgld, 1);
        return to_py(estimate_llc(c.params.flat(), mask, obj, sgld).to_json(false));
      },
      py::arg("checkpoint"), py::arg("targets"), py::arg("source_spec"),
      py::arg("sgld") = "{}");
  m.def(
      "hessian_trace",
      [](const std::string& ckpt_dir, const std::vector<std::string>& target_patterns,
         const std::string& source_spec, int samples, int probes, std::uint64_t seed) {
        Checkpoint c = load_checkpoint(ckpt_dir);
        DataSource src =
            source_of(source_spec, c.config.vocab_size, c.config.context_length);
        WeightMask mask = WeightMask::from_regions(c.params, target_patterns);
        TraceConfig tc;
        tc.samples = samples;
        tc.probes = probes;
        tc.seed = seed;
        TraceEstimate e = hessian_trace(c, mask, src, tc);
        return py::make_tuple(e.value, e.std_error);
      },
      py::arg("checkpoint"), py::arg("targets"), py::arg("source_spec"),
      py::arg("samples") = 100, py::arg("probes") = 50, py::arg("seed") = 0);
  m.def(
      "fim_trace",
      [](const std::string& ckpt_dir, int samples, int probes, std::uint64_t seed) {
        Checkpoint c = load_checkpoint(ckpt_dir);
        TraceConfig tc;
        tc.samples = samples;
        tc.probes = probes;
        TraceEstimate e = fim_trace(c, tc, seed);
        return py::make_tuple(e.value, e.std_error);
      },
      py::arg("checkpoint"), py::arg("samples") = 30, py::arg("probes") = 5,
      py::arg("seed") = 0);

  // -- ablations and head analysis -------------------------------------------
  m.def(
      "ablation_score",
      [](const std::string& ckpt_dir, const std::vector<std::pair<int, int>>& heads,
         const std::string& kind, const std::string& source_spec, std::size_t n) {
        Checkpoint c = load_checkpoint(ckpt_dir);
        DataSource src =
            source_of(source_spec, c.config.vocab_size, c.config.context_length);
        AblationSpec spec;
        for (auto [l, h] : heads) spec.targets.push_back({l, h});
        if (kind == "zero") spec.kind = AblationKind::zero;
        else if (kind == "mean") spec.kind = AblationKind::mean;
        else if (kind == "resample") spec.kind = AblationKind::resample;
        else throw std::invalid_argument("unknown ablation kind " + kind);
        spec.stats_data = src;
        return ablation_score(c, spec, src, n);
      },
      py::arg("checkpoint"), py::arg("heads"), py::arg("kind"), py::arg("source_spec"),
      py::arg("n") = 32);
  m.def(
      "icl_score",
      [](const std::string& ckpt_dir, const std::string& source_spec, std::size_t n,
         std::size_t early, std::size_t late) {
        Checkpoint c = load_checkpoint(ckpt_dir);
        DataSource src =
            source_of(source_spec, c.config.vocab_size, c.config.context_length);
        return icl_score(c, src, n, early, late);
      },
      py::arg("checkpoint"), py::arg("source_spec"), py::arg("n") = 64,
      py::arg("early") = 8, py::arg("late") = 56);
  m.def(
      "attention_scores",
      [](const std::string& ckpt_dir, int layer, int head,
         const std::string& source_spec, std::size_t n, int probes,
         std::uint64_t seed) {
        Checkpoint c = load_checkpoint(ckpt_dir);
        DataSource src =
            source_of(source_spec, c.config.vocab_size, c.config.context_length);
        AttentionScores s = attention_scores(c, {layer, head}, src, n, probes, seed);
        py::dict d;
        d["previous_token"] = s.previous_token;
        d["current_token"] = s.current_token;
        d["induction"] = s.induction;
        return d;
      },
      py::arg("checkpoint"), py::arg("layer"), py::arg("head"), py::arg("source_spec"),
      py::arg("n") = 32, py::arg("probes") = 8, py::arg("seed") = 0);
  m.def("composition_scores", [](const std::string& ckpt_dir, int h1, int h2) {
    Checkpoint c = load_checkpoint(ckpt_dir);
    CompositionScores s = composition_scores(c.config, c.params, {0, h1}, {1, h2});
    py::dict d;
    d["q"] = s.q;
    d["k"] = s.k;
    d["v"] = s.v;
    d["degenerate"] = s.degenerate;
    return d;
  });

  // -- clustering ---------------------------------------------------------------
  m.def("dtw_distance", [](const std::vector<double>& a, const std::vector<double>& b,
                           std::optional<int> window) {
    return dtw_distance(a, b, window);
  }, py::arg("a"), py::arg("b"), py::arg("window") = py::none());
  m.def("sbd_distance", [](const std::vector<double>& a, const std::vector<double>& b) {
    return sbd_distance(a, b);
  });
  m.def(
      "kmeans_euclidean",
      [](const std::vector<std::vector<double>>& rows, int k, std::uint64_t seed,
         int restarts) {
        return result_to_py(kmeans_euclidean(matrix_from_rows_py(rows), k, seed, restarts));
      },
      py::arg("rows"), py::arg("k"), py::arg("seed") = 0, py::arg("restarts") = 32);
  m.def(
      "kmeans_dtw",
      [](const std::vector<std::vector<double>>& rows, int k, std::uint64_t seed) {
        return result_to_py(kmeans_dtw(matrix_from_rows_py(rows), k, seed));
      },
      py::arg("rows"), py::arg("k"), py::arg("seed") = 0);
  m.def(
      "kmeans_sbd",
      [](const std::vector<std::vector<double>>& rows, int k, std::uint64_t seed) {
        return result_to_py(kmeans_sbd(matrix_from_rows_py(rows), k, seed));
      },
      py::arg("rows"), py::arg("k"), py::arg("seed") = 0);
  m.def("hac_ward", [](const std::vector<std::vector<double>>& rows, int k) {
    return result_to_py(hac_ward(matrix_from_rows_py(rows), k));
  });
  m.def("cluster_metrics",
        [](const std::vector<std::vector<double>>& rows, const std::vector<int>& labels) {
          ClusterMetrics mm = cluster_metrics(matrix_from_rows_py(rows), labels);
          py::dict d;
          d["silhouette"] = mm.silhouette;
          d["silhouette_defined"] = mm.silhouette_defined;
          d["calinski_harabasz"] = mm.calinski_harabasz;
          d["davies_bouldin"] = mm.davies_bouldin;
          return d;
        });
  m.def("transfer_labels",
        [](const py::dict& fitted, const std::vector<std::vector<double>>& rows) {
          return transfer_labels(result_from_py(fitted), matrix_from_rows_py(rows));
        });
  m.def("adjusted_rand_index", &adjusted_rand_index);

  // -- tokenizer ------------------------------------------------------------------
  m.def("train_tokenizer",
        [](const std::string& text, std::size_t vocab, const std::string& save_path) {
          Tokenizer t = Tokenizer::train(text, vocab);
          if (!save_path.empty()) t.save(save_path);
          py::dict d;
          d["vocab_size"] = t.vocab_size();
          d["hash"] = t.hash();
          return d;
        },
        py::arg("text"), py::arg("vocab") = 512, py::arg("save_path") = "");
  m.def("encode", [](const std::string& tok_path, const std::string& text) {
    std::vector<TokenId> ids = Tokenizer::load(tok_path).encode(text);
    return std::vector<int>(ids.begin(), ids.end());
  });
  m.def("decode", [](const std::string& tok_path, const std::vector<int>& ids) {
    std::vector<TokenId> t(ids.begin(), ids.end());
    return Tokenizer::load(tok_path).decode(t);
  });
}
