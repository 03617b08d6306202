"""Smoke tests over the python bindings: a tiny train + measure round trip and
spot checks of the numerical helpers."""

import json
import math

import pytest

try:
    import headlab
except ImportError:
    import _headlab as headlab

CONFIG = {
    "model": {
        "vocab_size": 64,
        "context_length": 16,
        "d_model": 8,
        "n_heads": 2,
        "layer_norm": True,
    },
    "data": {"train": {"kind": "synthetic", "seed": 11, "table_seed": 2}},
    "training": {
        "steps": 20,
        "batch_size": 2,
        "optimizer": "adam",
        "lr": 3e-3,
        "checkpoints_per_decade": 4,
    },
    "sgld": {
        "step_size": 1e-4,
        "nbeta": 30,
        "gamma": 200,
        "chains": 2,
        "draws": 10,
        "minibatch": 2,
        "eval_tokens": 128,
        "seed": 5,
    },
    "seeds": [3],
    "measure": {"llc": {"targets": ["heads"], "steps": "final", "traces": False}},
}

SOURCE = json.dumps({"kind": "synthetic", "seed": 11, "table_seed": 2})


def test_version():
    assert headlab.__version__


def test_distances():
    assert headlab.dtw_distance([0, 0, 1], [0, 1, 1]) == 0.0
    assert headlab.dtw_distance([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert headlab.sbd_distance([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]) == pytest.approx(0.0)


def test_clustering_roundtrip():
    rows = [[1.0, 1.1], [1.1, 1.0], [5.0, -5.0], [5.1, -5.0]]
    fit = headlab.kmeans_euclidean(rows, 2, seed=1)
    assert sorted(set(fit["labels"])) == [0, 1]
    assert fit["labels"][0] == fit["labels"][1]
    assert headlab.adjusted_rand_index(fit["labels"], [0, 0, 1, 1]) == 1.0
    moved = headlab.transfer_labels(fit, rows)
    assert moved == fit["labels"]
    metrics = headlab.cluster_metrics(rows, fit["labels"])
    assert metrics["silhouette_defined"]
    for alg in (headlab.kmeans_dtw, headlab.kmeans_sbd):
        assert headlab.adjusted_rand_index(alg(rows, 2, 1)["labels"], [0, 0, 1, 1]) == 1.0
    assert headlab.adjusted_rand_index(headlab.hac_ward(rows, 2)["labels"], [0, 0, 1, 1]) == 1.0


def test_sample_batch_annotations():
    rows, annotations = headlab.sample_batch(SOURCE, 64, 16, 4, 0)
    assert len(rows) == 4 and len(rows[0]) == 16
    assert all(0 <= t < 64 for row in rows for t in row)
    again, _ = headlab.sample_batch(SOURCE, 64, 16, 4, 0)
    assert rows == again
    kinds = {a["kind"] for per_seq in annotations for a in per_seq}
    assert kinds <= {"ngram", "skip_ngram", "dyck", "induction"}


def test_pipeline(tmp_path):
    config = json.dumps(CONFIG)
    out = str(tmp_path / "out")
    assert headlab.train(config, out) == 0
    ckpt = str(tmp_path / "out" / "seed_3" / "train" / "ckpt_00000020")

    rows, _ = headlab.sample_batch(SOURCE, 64, 16, 8, 7)
    loss = headlab.empirical_loss(ckpt, rows)
    assert loss == pytest.approx(loss)
    assert loss < 2.0 * math.log(64)

    probs = headlab.forward_probs(ckpt, rows[0])
    assert len(probs) == 16
    assert sum(probs[0]) == pytest.approx(1.0, abs=1e-9)

    est = headlab.estimate_llc(ckpt, ["head_0_0_*"], SOURCE, json.dumps(CONFIG["sgld"]))
    assert est["chains_ok"] == 2
    assert math.isfinite(est["lambda_hat"])

    value, stderr = headlab.hessian_trace(ckpt, ["model" and "*"], SOURCE, 4, 4, 1)
    assert math.isfinite(value) and stderr >= 0

    score = headlab.ablation_score(ckpt, [(0, 0)], "mean", SOURCE, 8)
    assert math.isfinite(score)
    icl = headlab.icl_score(ckpt, SOURCE, 16, 4, 12)
    assert math.isfinite(icl)

    scores = headlab.attention_scores(ckpt, 0, 0, SOURCE, 8, 2, 1)
    assert 0 <= scores["previous_token"] <= 1

    comp = headlab.composition_scores(ckpt, 0, 1)
    assert 0 <= comp["k"] <= 1 + 1e-12

    result = headlab.measure(config, out, "llc")
    assert result["failed"] == 0
    assert result["attempted"] == 4


def test_tokenizer(tmp_path):
    text = "the cat sat on the mat, the cat sat again. " * 40
    info = headlab.train_tokenizer(text, 280, str(tmp_path / "tok.json"))
    assert info["vocab_size"] <= 280
    ids = headlab.encode(str(tmp_path / "tok.json"), "the cat sat")
    assert headlab.decode(str(tmp_path / "tok.json"), ids) == "the cat sat"
