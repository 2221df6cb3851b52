import json

import numpy as np
import pytest

from conftest import TableLM, random_simplex, random_table
from mgsr import divergences as dv
from mgsr.corpus import Example
from mgsr.evaluation import (
    RougeScore, evaluate_multiseed, export_density, lcs_length, mean_score, rouge_l, silverman_bandwidth,
    write_eval_dump,
)
from mgsr.lm import GREEDY


def brute_lcs(a, b):
    """Exponential recursion; fine for the short inputs used here."""
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def test_rouge_examples():
    assert rouge_l("a b c".split(), "a b c".split()).f1 == 1.0
    s = rouge_l("the cat sat on the mat".split(), "the cat is on the mat".split())
    assert lcs_length("the cat sat on the mat".split(), "the cat is on the mat".split()) == 5
    assert s.f1 == pytest.approx(5 / 6, abs=1e-12)
    assert rouge_l(["x"], ["y"]) == RougeScore(0.0, 0.0, 0.0)
    assert rouge_l([], ["y"]) == RougeScore()
    assert rouge_l(["y"], []) == RougeScore()


def test_rouge_matches_brute_force_and_is_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = list(rng.integers(5, size=int(rng.integers(0, 13))))
        b = list(rng.integers(5, size=int(rng.integers(0, 13))))
        assert lcs_length(a, b) == brute_lcs(tuple(a), tuple(b))
        s = rouge_l(a, b)
        assert 0 <= s.f1 <= 1
        if len(a) == len(b):
            assert s.f1 == rouge_l(b, a).f1


def test_mean_score():
    m = mean_score([RougeScore(1, 0, 0), RougeScore(0, 1, 0.5)])
    assert m == RougeScore(0.5, 0.5, 0.25)


@pytest.fixture
def setup():
    rng = np.random.default_rng(1)
    model = TableLM(random_table(rng, 12, 5, sharp=2.0))
    data = [Example([int(rng.integers(5))], list(rng.integers(5, size=4))) for _ in range(15)]
    return model, data


def test_multiseed_protocol(setup, tmp_path):
    model, data = setup
    res = evaluate_multiseed(model, data, [10, 20, 30], max_new_tokens=4, batch_size=4)
    assert set(res.per_seed) == {10, 20, 30}
    assert res.mean.f1 == pytest.approx(np.mean([s.f1 for s in res.per_seed.values()]), abs=1e-15)
    write_eval_dump(res, tmp_path / "e.jsonl")
    recs = [json.loads(line) for line in (tmp_path / "e.jsonl").read_text().splitlines()]
    assert len(recs) == 45
    by_seed = {}
    for r in recs:
        by_seed.setdefault(r["seed"], []).append(r["f1"])
    recomputed = np.mean([np.mean(v) for v in by_seed.values()])
    assert recomputed == pytest.approx(res.mean.f1, abs=1e-12)
    again = evaluate_multiseed(model, data, [10, 20, 30], max_new_tokens=4, batch_size=7)
    assert again.per_seed == res.per_seed


def test_multiseed_edge_cases(setup):
    model, data = setup
    g = evaluate_multiseed(model, data, [10], GREEDY, max_new_tokens=4)
    assert g.mean == g.per_seed[10]
    dup = evaluate_multiseed(model, data, [10, 10], max_new_tokens=4)
    assert dup.per_seed[10] == evaluate_multiseed(model, data, [10], max_new_tokens=4).per_seed[10]
    with pytest.raises(ValueError):
        evaluate_multiseed(model, [], [10])
    with pytest.raises(ValueError):
        evaluate_multiseed(model, data, [])


def test_density_export(tmp_path):
    rng = np.random.default_rng(2)
    for _ in range(20):
        t = random_simplex(rng, 50, concentration=0.3)
        full = export_density(t, dv.dac_clip(t, dv.QuantilePair(1.0, 0.0)))
        np.testing.assert_array_equal(full.original, full.clipped)
        u = float(np.quantile(t, 0.9))
        sel = dv.dac_clip(t, dv.QuantilePair(u, float(np.quantile(t, 0.3))))
        d = export_density(t, sel, 256)
        assert len(d.grid) == len(d.original) == len(d.clipped) == 256
        assert d.original.min() >= 0 and d.clipped.min() >= 0
        assert np.trapezoid(d.clipped, d.grid) == pytest.approx(1.0, abs=0.02)
        assert np.trapezoid(d.original, d.grid) == pytest.approx(1.0, abs=0.02)
    d.to_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "value,density_original,value,density_clipped"
    assert len(lines) == 257
    with pytest.raises(ValueError):
        export_density(t, sel, 8)


def test_density_single_selected_class_integrates():
    t = np.array([0.7, 0.1, 0.1, 0.05, 0.05])
    d = export_density(t, dv.dac_clip(t, dv.QuantilePair(0.01, 0.0)))
    assert np.trapezoid(d.clipped, d.grid) == pytest.approx(1.0, abs=0.02)


def test_silverman():
    assert silverman_bandwidth(np.ones(5)) is None
    assert silverman_bandwidth(np.array([1.0])) is None
    x = np.random.default_rng(0).normal(size=1000)
    assert silverman_bandwidth(x) == pytest.approx(0.9 * 1000 ** -0.2, rel=0.1)
