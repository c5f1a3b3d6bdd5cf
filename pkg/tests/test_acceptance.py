"""Acceptance criteria, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v``; a PASS/FAIL summary line per
criterion is printed at the end of the session.
"""
import json
import math
import threading
import time
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import pytest

import oracle
from conftest import unit_rows
from listrerank.evalkit import average_precision, desk_split, desk_train_config, evaluate
from listrerank.inference import IterConfig, Reranker, iterative_rerank, rank_direct
from listrerank.loss import CircleLossConfig, LabeledScores, circle_loss, circle_loss_grad
from listrerank.model import AttentionVariant, FeatureMode, ModelConfig, init_params, list_encode, score_arrays
from listrerank.numerics import relative_error
from listrerank.service import Engine, make_server
from listrerank.trainer import StageConfig, batch_loss, train
from test_evalkit import brute_ap
from tests_support import closed_form_rounds

DESK_SEEDS = (0, 1, 2)


def test_criterion_01_gradient_correctness():
    """Reverse-mode batch circle-loss gradients through the full model vs central differences."""
    t0 = time.perf_counter()
    worst = []
    for seed in range(3):
        cfg = ModelConfig(d=8, layers=2, heads=2, ffn_dim=16, seed=seed)
        params = init_params(cfg)
        rng = np.random.default_rng(seed)
        params["adapter.weight"] = params["adapter.weight"] + 0.05 * rng.normal(size=(8, 8))
        batch = [
            (unit_rows(rng, 8), unit_rows(rng, 4, 8), np.array([1, 0, 1, 0])),
            (unit_rows(rng, 8), unit_rows(rng, 4, 8), np.array([0, 1, 0, 0])),
        ]
        stage = StageConfig(m=0.1)
        loss, leaves = batch_loss(params, cfg, batch, stage, params.keys())
        loss.backward()
        ocfg = cfg.to_dict()
        slopes = oracle.frozen_slopes(params, ocfg, batch, stage.m, stage.gamma)
        objective = oracle.batch_objective(ocfg, batch, stage.m, stage.gamma, slopes)
        assert abs(objective(oracle.stack(params))[0] - loss.value) <= 1e-12
        numeric = oracle.central_diff(objective, params, h=1e-3)
        errs = {k: relative_error(leaves[k].grad, numeric[k]).max() for k in params}
        worst.append(max(errs.values()))
        bad = {k: v for k, v in errs.items() if v > 1e-4}
        assert not bad, f"seed {seed}: {bad}"
    elapsed = time.perf_counter() - t0
    print(f"worst relative error per seed {worst}, {elapsed:.1f}s")
    assert elapsed < 30.0


def test_criterion_02_circle_loss_oracle():
    ls = lambda s, y: LabeledScores(np.array(s), np.array(y))
    stage1, stage2 = CircleLossConfig(m=-0.2), CircleLossConfig(m=0.1)
    assert abs(circle_loss(ls([0.8, 0.2], [1, 0]), stage1) - math.log(2)) <= 1e-9
    assert abs(circle_loss(ls([0.8, 0.4], [1, 0]), stage2) - math.log1p(math.exp(1.8))) <= 1e-9
    assert abs(circle_loss(ls([0.5, 0.5], [1, 0]), stage1) - math.log1p(math.exp(4.2))) <= 1e-9
    rng = np.random.default_rng(0)
    for _ in range(500):
        i, j = rng.integers(1, 7, size=2)
        m = float(rng.choice([-0.3, -0.2, -0.1, 0.0]))
        cfg = CircleLossConfig(m=m)
        pos = cfg.optimum_pos + (1 - cfg.optimum_pos) * rng.random(i)
        neg = cfg.optimum_neg * rng.random(j)
        assert circle_loss(ls(np.r_[pos, neg], [1] * i + [0] * j), cfg) == math.log(1 + i * j)


def test_criterion_03_gradient_smoothing():
    cfg = CircleLossConfig(m=-0.2)  # O_pos = 0.8, O_neg = 0.2
    g = lambda s, y: circle_loss_grad(LabeledScores(np.array(s), np.array(y)), cfg)
    pos_sweep = np.linspace(0.3, cfg.optimum_pos, 26)
    mags = [abs(g([s, 0.5], [1, 0])[0]) for s in pos_sweep]
    assert all(a > b for a, b in zip(mags, mags[1:]))
    assert mags[-1] == 0.0
    assert all(g([s, 0.5], [1, 0])[0] == 0.0 for s in (0.8, 0.9, 0.99))
    neg_sweep = np.linspace(0.7, cfg.optimum_neg, 26)
    mags = [abs(g([0.5, s], [1, 0])[1]) for s in neg_sweep]
    assert all(a > b for a, b in zip(mags, mags[1:]))
    assert mags[-1] == 0.0
    assert all(g([0.5, s], [1, 0])[1] == 0.0 for s in (0.2, 0.1, 0.01))


def test_criterion_04_query_preservation():
    cfg = ModelConfig(d=8, layers=2, heads=2, ffn_dim=16, seed=0)
    params = init_params(cfg)
    rng = np.random.default_rng(0)
    h_q = unit_rows(rng, 8)
    base = unit_rows(rng, 5, 8)
    replacements = [unit_rows(rng, int(rng.integers(1, 30)), 8) for _ in range(10)]
    z_ref, _ = list_encode(params, cfg, h_q, base)
    list_diffs = [np.abs(list_encode(params, cfg, h_q, r)[0] - z_ref).max() for r in replacements]
    assert max(list_diffs) <= 1e-12
    bi = replace(cfg, attention_variant=AttentionVariant.BIDIRECTIONAL)
    z_bi, _ = list_encode(params, bi, h_q, base)
    bi_diffs = [np.abs(list_encode(params, bi, h_q, r)[0] - z_bi).max() for r in replacements]
    assert max(bi_diffs) > 1e-6


@pytest.mark.parametrize("variant", list(AttentionVariant))
def test_criterion_05_permutation_equivariance(variant):
    cfg = ModelConfig(d=8, layers=2, heads=2, ffn_dim=16, attention_variant=variant, seed=1)
    params = init_params(cfg)
    rng = np.random.default_rng(1)
    for _ in range(10):
        n = int(rng.integers(2, 12))
        h_q, h_p = unit_rows(rng, 8), unit_rows(rng, n, 8)
        perm = rng.permutation(n)
        s = score_arrays(params, cfg, h_q, h_p)[2]
        s_perm = score_arrays(params, cfg, h_q, h_p[perm])[2]
        assert np.abs(s[perm] - s_perm).max() <= 1e-12


def test_criterion_06_algorithm_conformance():
    table = {f"p{i}": 1.0 - i / 10 for i in range(1, 7)}
    out = iterative_rerank(lambda q, ps: [table[p] for p in ps], "q", list(table), IterConfig(4, 0.5))
    assert out.ranks.tolist() == [1, 2, 3, 4, 5, 6] and out.rounds == 2
    table = {"p1": 0.1, "p2": 0.2, "p3": 0.3, "p4": 0.4}
    out = iterative_rerank(lambda q, ps: [table[p] for p in ps], "q", list(table), IterConfig(1, 0.5))
    assert out.ranks.tolist() == [4, 3, 2, 1] and out.rounds == 3
    rng = np.random.default_rng(6)
    for _ in range(50):
        n, alpha, beta = int(rng.integers(1, 400)), int(rng.integers(1, 50)), float(rng.uniform(0.01, 0.99))
        scores = rng.random(n)
        out = iterative_rerank(lambda q, idx: scores[np.asarray(idx)], None, list(range(n)), IterConfig(alpha, beta))
        assert out.ranks.tolist() == rank_direct(scores).tolist()
        assert out.rounds == closed_form_rounds(n, alpha, beta)


_RUNS: dict = {}


def desk_run(seed, feature_mode=FeatureMode.FUSED, loss="circle"):
    """Train on the seeded synthetic split; returns (train mAP, held-out mAP, seconds)."""
    key = (seed, feature_mode, loss)
    if key not in _RUNS:
        t0 = time.perf_counter()
        train_ds, test_ds = desk_split(seed)
        cfg = ModelConfig(seed=seed, feature_mode=feature_mode)
        params, _ = train(init_params(cfg), cfg, train_ds, desk_train_config(300, seed, loss))
        reranker = Reranker(cfg, params)
        tr, te = evaluate(reranker, train_ds).map, evaluate(reranker, test_ds).map
        _RUNS[key] = (tr, te, time.perf_counter() - t0)
    return _RUNS[key]


def test_criterion_07_desk_scale_learning():
    train_map, held_map, seconds = desk_run(0)
    print(f"train mAP {train_map:.4f}, held-out mAP {held_map:.4f}, {seconds:.1f}s")
    assert train_map >= 0.95
    assert held_map >= 0.85
    assert seconds < 300


def test_criterion_08_ablation_direction():
    rows = []
    for seed in DESK_SEEDS:
        fused = desk_run(seed)[1]
        original = desk_run(seed, FeatureMode.ORIGINAL)[1]
        bce = desk_run(seed, loss="bce")[1]
        rows.append((fused, original, bce))
        print(f"seed {seed}: fused/circle {fused:.4f}  original-only {original:.4f}  fused/bce {bce:.4f}")
    fused, original, bce = (np.array(c) for c in zip(*rows))
    assert fused.mean() >= original.mean() and (fused >= original).all()
    assert fused.mean() >= bce.mean() and (fused >= bce).all()


def test_criterion_09_map_oracle():
    rng = np.random.default_rng(9)
    for _ in range(1000):
        n = int(rng.integers(1, 80))
        ranks = rng.permutation(n) + 1
        labels = rng.integers(0, 2, size=n)
        labels[rng.integers(0, n)] = 1
        assert abs(average_precision(ranks, labels) - brute_ap(ranks.tolist(), labels.tolist())) <= 1e-12


def test_criterion_10_service_determinism():
    cfg = ModelConfig(d=16, layers=2, heads=2, ffn_dim=32, seed=3)
    engine = Engine(Reranker(cfg, init_params(cfg)), "acceptance")
    server = make_server(engine, "127.0.0.1", 0)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    url = "http://%s:%d/rerank" % server.server_address[:2]
    body = json.dumps({"query": "which passage fits", "passages": [f"passage {i} text {i * 7 % 13}" for i in range(200)]})

    def call(_):
        req = urllib.request.Request(url, data=body.encode(), headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=60) as resp:
            return json.loads(resp.read())

    try:
        with ThreadPoolExecutor(8) as pool:
            outs = list(pool.map(call, range(8)))
    finally:
        server.shutdown()
        server.server_close()
    assert len({json.dumps(o["results"]) for o in outs}) == 1
    assert all(o["rounds"] == closed_form_rounds(200, 20, 0.2) == 11 for o in outs)
