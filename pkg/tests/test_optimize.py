import itertools

import numpy as np
import pytest

from signforge.attacks import AttackConfig
from signforge.model import TrainConfig
from signforge.optimize import (
    EDGE_COLORS,
    ColorOptConfig,
    OptimizeError,
    PictogramSearchConfig,
    TraceWriter,
    baseline_colors,
    class_for_iteration,
    color_optimize,
    greedy_pictogram_search,
    initial_colors,
    optimize_standard,
    read_trace,
    select_restart,
    sign_step,
    visit_counts,
)
from signforge.standard import PictogramPool, StandardError, default_pool, default_standard


def test_sign_step_example():
    out = sign_step((0.5, 0.5, 0.5), (2.3, -0.7, 0.0), 0.01)
    assert np.allclose(out, (0.49, 0.51, 0.5), atol=1e-15, rtol=0)


def test_sign_step_boundary_absorbs():
    assert sign_step((0.0, 0.3, 1.0), (1.0, 0.0, -1.0), 0.01).tolist() == [0.0, 0.3, 1.0]


def test_class_schedule():
    assert [class_for_iteration(t, range(1, 8)) for t in range(1, 9)] == [1, 2, 3, 4, 5, 6, 7, 1]
    counts = visit_counts(400, 7)
    assert set(counts.values()) == {57, 58} and sum(counts.values()) == 400
    assert counts[1] == 58 and all(counts[c] == 57 for c in range(2, 8))
    assert class_for_iteration(3, [2, 5]) == 2


def test_initial_colors():
    rng = np.random.default_rng(0)
    assert np.array_equal(initial_colors(3, "static_gray", rng), np.full((3, 3), 0.5))
    r = initial_colors(7, "random", rng)
    assert r.shape == (7, 3) and (r >= 0).all() and (r <= 1).all()
    with pytest.raises(OptimizeError):
        initial_colors(3, "blue", rng)


def test_edge_baseline_is_permutation(standard):
    s = baseline_colors(standard, "edge", seed=3)
    assert sorted(map(tuple, s.colors().tolist())) == sorted(EDGE_COLORS)
    assert len(EDGE_COLORS) == 7 and (1.0, 1.0, 1.0) not in EDGE_COLORS
    assert baseline_colors(standard, "edge", seed=3) == s


def test_edge_baseline_too_many_classes():
    big = default_standard()
    from signforge.standard import SignClass, TrafficSignStandard

    extra = SignClass(8, "warning_triangle", big[7].pictogram)
    with pytest.raises(OptimizeError):
        baseline_colors(TrafficSignStandard(big.classes + (extra,)), "edge")


def test_random_baseline_reproducible(standard):
    a = baseline_colors(standard, "random", seed=1)
    assert a == baseline_colors(standard, "random", seed=1)
    assert a != baseline_colors(standard, "random", seed=2)
    with pytest.raises(OptimizeError):
        baseline_colors(standard, "pastel")


def test_select_restart():
    assert select_restart([0.2, 0.5, 0.5, 0.1]) == 1
    with pytest.raises(OptimizeError):
        select_restart([])


def test_config_validation():
    for bad in (dict(T=0), dict(alpha=0), dict(epoch_fraction=0), dict(epoch_fraction=1.5), dict(init="x")):
        with pytest.raises(OptimizeError):
            ColorOptConfig(**bad)
    with pytest.raises(OptimizeError):
        PictogramSearchConfig(runs_per_candidate=0)


# -- greedy search with mock oracles -----------------------------------------------------------


class TableOracle:
    """Class-separable score: sum over classes of table[class][chosen candidate]."""

    def __init__(self, standard, pool, table, noise=0.0):
        self.pool = pool
        self.table = table
        self.noise = noise
        self.calls = 0
        self.orig = {c.class_id: c.pictogram for c in standard.classes}

    def choice(self, standard, c):
        mask = standard[c].pictogram.alpha_mask
        for j, p in enumerate(self.pool[c], start=1):
            if np.array_equal(p.alpha_mask, mask):
                return j
        return 0  # original pictogram

    def __call__(self, standard, seed):
        self.calls += 1
        jitter = self.noise * (np.random.default_rng(seed).random() - 0.5)
        return sum(self.table[c][self.choice(standard, c)] for c in self.table) + jitter


@pytest.mark.parametrize("n,m,seed", [(2, 2, 0), (3, 3, 1), (4, 2, 2)])
def test_greedy_equals_brute_force(n, m, seed):
    std = default_standard(n)
    pool = default_pool(n, m)
    rng = np.random.default_rng(seed)
    table = {c: rng.random(m + 1) for c in range(1, n + 1)}
    oracle = TableOracle(std, pool, table)
    out, _ = greedy_pictogram_search(std, pool, oracle, PictogramSearchConfig(runs_per_candidate=1, seed=seed))
    best = max(itertools.product(range(1, m + 1), repeat=n),
               key=lambda combo: sum(table[c][j] for c, j in zip(range(1, n + 1), combo)))
    assert tuple(oracle.choice(out, c) for c in range(1, n + 1)) == best


def test_greedy_ties_lowest_candidate():
    std, pool = default_standard(2), default_pool(2, 3)
    oracle = TableOracle(std, pool, {1: np.array([0, 1, 1, 0.0]), 2: np.zeros(4)})
    out, _ = greedy_pictogram_search(std, pool, oracle, PictogramSearchConfig(runs_per_candidate=1))
    assert oracle.choice(out, 1) == 1 and oracle.choice(out, 2) == 1


def test_greedy_single_candidate_is_identity(standard):
    pool = PictogramPool({c.class_id: [c.pictogram] for c in standard.classes})
    out, recs = greedy_pictogram_search(standard, pool, lambda s, seed: 0.5, PictogramSearchConfig(runs_per_candidate=2))
    assert out == standard
    assert len([r for r in recs if r["kind"] == "search_run"]) == 7 * 1 * 2


def test_greedy_run_count(tmp_path):
    n, m = 3, 2
    std, pool = default_standard(n), default_pool(n, m)
    oracle = TableOracle(std, pool, {c: np.arange(m + 1.0) for c in range(1, n + 1)}, noise=0.01)
    trace = TraceWriter(tmp_path / "search.jsonl")
    greedy_pictogram_search(std, pool, oracle, PictogramSearchConfig(runs_per_candidate=5), trace=trace)
    recs = read_trace(tmp_path / "search.jsonl")
    runs = [r for r in recs if r["kind"] == "search_run"]
    assert oracle.calls == len(runs) == n * m * 5
    assert len({(r["class"], r["candidate"], r["seed"]) for r in runs}) == n * m * 5
    assert len([r for r in recs if r["kind"] == "search_choice"]) == n


def test_greedy_missing_class(standard):
    pool = default_pool(7, 2)
    partial = PictogramPool({c: pool[c] for c in range(1, 7)})
    with pytest.raises(StandardError):
        greedy_pictogram_search(standard, partial, lambda s, seed: 0.0, PictogramSearchConfig())


def test_worst_first_order():
    std, pool = default_standard(3), default_pool(3, 2)

    class Oracle(TableOracle):
        def per_class(self, standard, seed):
            return {1: 0.9, 2: 0.1, 3: 0.5}

    oracle = Oracle(std, pool, {c: np.zeros(3) for c in (1, 2, 3)})
    _, recs = greedy_pictogram_search(std, pool, oracle, PictogramSearchConfig(runs_per_candidate=1,
                                                                               class_order="worst_first"))
    assert [r["class"] for r in recs if r["kind"] == "search_choice"] == [2, 3, 1]
    with pytest.raises(OptimizeError):
        greedy_pictogram_search(std, pool, lambda s, seed: 0.0,
                                PictogramSearchConfig(class_order="worst_first"))


# -- color optimization on a tiny problem --------------------------------------------------------

TINY_TRAIN = TrainConfig(phase1_epochs=1, batch_size=32, inner_stride=8, inner_steps=1)
TINY_ATTACK = AttackConfig(attack="roa", m=1, stride=8, search="gradient", top_candidates=2, opt_steps=1,
                           step_size=0.1)


@pytest.fixture(scope="module")
def color_run(tiny_dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("color") / "trace.jsonl"
    cfg = ColorOptConfig(T=9, restarts=2, init="random", attack_batch=4, seed=4)
    trace = TraceWriter(path)
    result = color_optimize(tiny_dataset.standard, tiny_dataset, cfg, TINY_TRAIN, TINY_ATTACK, trace=trace)
    return cfg, result, read_trace(path)


def test_color_trace_update_rule(color_run):
    cfg, _, recs = color_run
    its = [r for r in recs if r["kind"] == "iteration"]
    assert len(its) == cfg.T * cfg.restarts
    for r in its:
        assert r["class"] == class_for_iteration(r["t"], range(1, 8))
        cols = np.array(r["colors"])
        assert (cols >= 0).all() and (cols <= 1).all()
        if r["skipped"]:
            continue
        expected = np.clip(np.array(r["prev_color"]) - cfg.alpha * np.sign(r["grad"]), 0, 1)
        assert np.abs(cols[r["class"] - 1] - expected).max() <= 1e-12
    for restart in range(cfg.restarts):
        seq = [r for r in its if r["restart"] == restart]
        assert [r["t"] for r in seq] == list(range(1, cfg.T + 1))
        # untouched classes keep their color between snapshots
        for a, b in zip(seq, seq[1:]):
            other = [k for k in range(7) if k != b["class"] - 1]
            assert np.array_equal(np.array(a["colors"])[other], np.array(b["colors"])[other])
            assert b["prev_color"] == a["colors"][b["class"] - 1]


def test_color_batches_per_iteration(color_run, tiny_dataset):
    import math

    cfg, _, recs = color_run
    n_train = len(tiny_dataset.split("train"))
    per_epoch = math.ceil(n_train / TINY_TRAIN.batch_size)
    for r in recs:
        if r["kind"] == "iteration":
            assert len(r["batch_losses"]) == math.ceil(cfg.epoch_fraction * per_epoch)


def test_color_restart_selection(color_run):
    _, (best, model, chosen, runs), recs = color_run
    scores = [r.report.robust_accuracy for r in runs]
    assert chosen == runs[select_restart(scores)].restart
    assert best == runs[select_restart(scores)].standard
    sel = [r for r in recs if r["kind"] == "selection"][0]
    assert sel["chosen"] == chosen and sel["robust_accuracies"] == scores
    ends = [r for r in recs if r["kind"] == "restart_end"]
    assert [e["robust_accuracy"] for e in ends] == scores


def test_color_optimize_deterministic(tiny_dataset, color_run):
    cfg, (best, *_), recs = color_run
    again = TraceWriter()
    best2, *_ = color_optimize(tiny_dataset.standard, tiny_dataset, cfg, TINY_TRAIN, TINY_ATTACK, trace=again,
                               restart_ids=[0])
    first = [r for r in recs if r.get("restart") == 0 and r["kind"] == "iteration"]
    second = [r for r in again.records if r["kind"] == "iteration"]
    assert [r["colors"] for r in first] == [r["colors"] for r in second]


def test_partial_classes_keep_other_colors(tiny_dataset):
    cfg = ColorOptConfig(T=2, restarts=1, attack_batch=2)
    best, *_ = color_optimize(tiny_dataset.standard, tiny_dataset, cfg, TINY_TRAIN, TINY_ATTACK, classes=[2])
    cols = best.colors()
    assert np.array_equal(np.delete(cols, 1, axis=0), np.delete(tiny_dataset.standard.colors(), 1, axis=0))
    assert not np.array_equal(cols[1], [0, 0, 0])


def test_optimize_standard_k0(standard, pool, tiny_scenes, tiny_cfg):
    res = optimize_standard(standard, pool, tiny_scenes, tiny_cfg, PictogramSearchConfig(), ColorOptConfig(),
                            TrainConfig(phase1_epochs=1, phase2_epochs=1, batch_size=32, inner_stride=8), TINY_ATTACK,
                            k=0)
    assert res.standard == standard and res.k == 0 and res.chosen_restart is None
    with pytest.raises(OptimizeError):
        optimize_standard(standard, pool, tiny_scenes, tiny_cfg, PictogramSearchConfig(), ColorOptConfig(),
                          TINY_TRAIN, TINY_ATTACK, k=8)


def test_optimize_standard_partial_k(tmp_path, standard, pool, tiny_scenes, tiny_cfg):
    table = {c: np.arange(6.0) for c in range(1, 8)}
    oracle = TableOracle(standard, pool, table)
    search = PictogramSearchConfig(runs_per_candidate=1, eval_attack=TINY_ATTACK)
    res = optimize_standard(standard, pool, tiny_scenes, tiny_cfg, search, ColorOptConfig(T=2, restarts=1, attack_batch=2), TINY_TRAIN, TINY_ATTACK, k=2,
                            evaluator=oracle, out_dir=tmp_path)
    assert [oracle.choice(res.standard, c) for c in range(1, 8)] == [5, 5, 0, 0, 0, 0, 0]
    assert res.standard.colors()[2:].tolist() == standard.colors()[2:].tolist()
    assert len([r for r in read_trace(tmp_path / "trace.jsonl") if r["kind"] == "iteration"]) == 2
    assert (tmp_path / "search_trace.jsonl").exists()
