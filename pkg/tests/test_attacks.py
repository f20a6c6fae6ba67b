import itertools
import warnings

import numpy as np
import pytest

from betagnn.attacks import (
    AttackError,
    AttackSpec,
    BudgetShortfallWarning,
    DENSE_LIMIT,
    _unrank_pairs,
    adjacency_gradient,
    grad_untargeted_attack,
    greedy_targeted_flips,
    read_diff,
    run_attack,
    surrogate_loss_dense,
    train_surrogate,
    write_diff,
)
from betagnn.datasets import generate_sbm
from betagnn.ensemble import TrainConfig
from betagnn.graph import (
    DataSplit,
    EdgeDiff,
    PerturbationBudget,
    SparseGraph,
    apply_edge_diff,
    edge_diff_size,
    homophily_score,
    make_split,
)
from betagnn.models import GcnModel

from conftest import random_graph

FAST_SURROGATE = TrainConfig(epochs=10, hidden=8, dropout=0.0, weight_decay=0.0)


def _spec(kind, budget, **kw):
    return AttackSpec(kind, PerturbationBudget(budget), **kw)


def test_unrank_pairs_enumerates_upper_triangle():
    for n in range(2, 9):
        pairs = _unrank_pairs(np.arange(n * (n - 1) // 2), n)
        assert pairs.tolist() == [list(p) for p in itertools.combinations(range(n), 2)]


def test_spec_validation():
    with pytest.raises(AttackError, match="target"):
        _spec("greedy", 1)
    with pytest.raises(AttackError):
        _spec("metattack", 1)
    with pytest.raises(AttackError):
        _spec("grad", 1, objective="evasion")
    with pytest.raises(ValueError):
        _spec("random", -1)


@pytest.mark.parametrize("kind", ["random", "heterophily", "grad", "greedy"])
def test_budget_zero_gives_empty_diff(kind, triangle):
    x = np.eye(3)
    split = make_split(10, 0)
    g = random_graph(np.random.default_rng(0), 10, 0.3)
    spec = _spec(kind, 0, targets=(0,) if kind == "greedy" else (), surrogate=FAST_SURROGATE)
    y = np.arange(10) % 2
    assert len(run_attack(spec, g, np.tile(x, (4, 1))[:10], y, split)) == 0


def _random_config(rng):
    n = int(rng.integers(10, 31))
    g = random_graph(rng, n, rng.uniform(0.05, 0.4))
    c = int(rng.integers(2, 4))
    y = rng.integers(0, c, size=n)
    y[:c] = np.arange(c)
    x = rng.standard_normal((n, int(rng.integers(2, 6))))
    return g, x, y, make_split(n, int(rng.integers(0, 1000)))


@pytest.mark.parametrize("kind", ["random", "heterophily", "grad", "greedy"])
def test_budgets_respected_and_features_untouched(kind):
    for i in range(100):
        rng = np.random.default_rng([31, i, len(kind)])
        g, x, y, split = _random_config(rng)
        budget = int(rng.integers(0, 8))
        targets = tuple(rng.choice(g.n_nodes, size=int(rng.integers(1, 4)), replace=False)) if kind == "greedy" else ()
        spec = _spec(kind, budget, targets=targets, seed=i, surrogate=FAST_SURROGATE)
        x_bytes = x.tobytes()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BudgetShortfallWarning)
            diff = run_attack(spec, g, x, y, split)
        assert x.tobytes() == x_bytes
        diff.check_against(g)
        if kind == "greedy":
            for t in targets:
                assert diff.touching(int(t)) <= budget
        else:
            assert edge_diff_size(diff) <= budget


@pytest.mark.parametrize("kind", ["random", "heterophily", "grad", "greedy"])
def test_attacks_deterministic_given_seed(kind):
    rng = np.random.default_rng(5)
    g, x, y, split = _random_config(rng)
    spec = _spec(kind, 4, targets=(1, 2) if kind == "greedy" else (), seed=9, surrogate=FAST_SURROGATE)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BudgetShortfallWarning)
        a, b = run_attack(spec, g, x, y, split), run_attack(spec, g, x, y, split)
    assert a.flips() == b.flips()


def test_random_attack_size_and_seed_sensitivity():
    g = random_graph(np.random.default_rng(1), 30, 0.2)
    a = run_attack(_spec("random", 12, seed=1), g, None, None, None)
    b = run_attack(_spec("random", 12, seed=2), g, None, None, None)
    assert len(a) == 12 and a.flips() != b.flips()


def test_random_attack_on_complete_graph_only_removes():
    g = SparseGraph.from_edges(5, list(itertools.combinations(range(5), 2)))
    d = run_attack(_spec("random", 10, seed=0), g, None, None, None)
    assert len(d.removed) == 10 and not d.added
    d = run_attack(_spec("random", 4, seed=0), g, None, None, None)
    assert len(d.removed) == 4 and not d.added


def test_heterophily_complete_bipartite_is_infeasible():
    g = SparseGraph.from_edges(4, [(0, 2), (0, 3), (1, 2), (1, 3)])
    with pytest.warns(BudgetShortfallWarning):
        d = run_attack(_spec("heterophily", 2), g, None, [0, 0, 1, 1], None)
    assert len(d) == 0


def test_heterophily_triangle_plus_outsider_adds_cross_edge(triangle):
    g = SparseGraph.from_edges(4, [(0, 1), (1, 2), (0, 2)])
    y = [0, 0, 0, 1]
    for seed in range(20):
        d = run_attack(_spec("heterophily", 1, seed=seed), g, None, y, None)
        assert len(d.added) == 1 and not d.removed
        (u, v), = d.added
        assert 3 in (u, v)
        assert homophily_score(apply_edge_diff(g, d), y) < homophily_score(g, y)


def test_heterophily_never_raises_homophily():
    checked = 0
    for i in range(100):
        rng = np.random.default_rng([41, i])
        g, _, y, _ = _random_config(rng)
        if g.n_edges == 0:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BudgetShortfallWarning)
            d = run_attack(_spec("heterophily", int(rng.integers(1, 10)), seed=i), g, None, y, None)
        g2 = apply_edge_diff(g, d)
        if g2.n_edges:
            assert homophily_score(g2, y) <= homophily_score(g, y) + 1e-15
            checked += 1
    assert checked >= 90


def test_adjacency_gradient_matches_finite_differences():
    for i in range(20):
        rng = np.random.default_rng([51, i])
        n, d, h, c = int(rng.integers(3, 8)), 3, 4, 3
        a = random_graph(rng, n, 0.4).to_dense()
        x = rng.standard_normal((n, d))
        w1, w2 = rng.standard_normal((d, h)), rng.standard_normal((h, c))
        y = rng.integers(0, c, size=n)
        idx = np.flatnonzero(rng.random(n) < 0.6)
        if len(idx) == 0:
            idx = np.array([0])
        grad = adjacency_gradient(a, x, w1, w2, y, idx)
        eps = 1e-6
        for u in range(n):
            for v in range(n):
                up, down = a.copy(), a.copy()
                up[u, v] += eps
                down[u, v] -= eps
                fd = (surrogate_loss_dense(up, x, w1, w2, y, idx)
                      - surrogate_loss_dense(down, x, w1, w2, y, idx)) / (2 * eps)
                assert abs(grad[u, v] - fd) <= 1e-5 * max(1.0, abs(fd)), (i, u, v)


def _surrogate_train_loss(g, x, y, split, cfg):
    model = train_surrogate(g, x, y, split, cfg)
    w1, w2 = (p.value for p in model.parameters())
    return surrogate_loss_dense(g.to_dense(), x, w1, w2, y, np.flatnonzero(split.train_mask))


def test_grad_attack_raises_surrogate_training_loss():
    ds = generate_sbm(200, 4, 0.1, 0.01, feature_dim=16, feature_noise=1.5, seed=2)
    split = make_split(200, 3)
    cfg = TrainConfig(epochs=100, hidden=16, dropout=0.5, weight_decay=0.0)
    budget = round(0.1 * ds.graph.n_edges)
    diff = grad_untargeted_attack(ds.graph, ds.features, ds.labels, split,
                                  _spec("grad", budget, surrogate=cfg))
    assert len(diff) == budget
    before = _surrogate_train_loss(ds.graph, ds.features, ds.labels, split, cfg)
    after = _surrogate_train_loss(apply_edge_diff(ds.graph, diff), ds.features, ds.labels, split, cfg)
    assert after > before


def _single_flip_rank(i, cfg):
    """Rank of the attack's flip among all single flips, ordered by retrained surrogate loss."""
    rng = np.random.default_rng([61, i])
    n = int(rng.integers(5, 9))
    g = random_graph(rng, n, 0.4)
    y = np.arange(n) % 2
    x = rng.standard_normal((n, 3)) + y[:, None]
    order = rng.permutation(n)
    split = DataSplit(*[np.isin(np.arange(n), part) for part in np.split(order, [n // 2, n // 2 + 2])])
    diff = grad_untargeted_attack(g, x, y, split, _spec("grad", 1, surrogate=cfg))
    (_, u, v), = diff.flips()
    losses = {p: _surrogate_train_loss(apply_edge_diff(g, EdgeDiff.from_flips([p], g)), x, y, split, cfg)
              for p in itertools.combinations(range(n), 2)}
    return sorted(losses, key=losses.get, reverse=True).index((u, v))


TOP3_CFG = TrainConfig(epochs=60, hidden=8, dropout=0.0, weight_decay=0.0)


@pytest.mark.slow
def test_grad_attack_single_flip_usually_in_top3_of_exhaustive_retraining():
    # a first-order score cannot see the discrete degree change of a flip, so the
    # property holds for most small graphs but not all (chance level is about 15%)
    ranks = [_single_flip_rank(i, TOP3_CFG) for i in range(30)]
    assert np.mean(np.array(ranks) < 3) >= 0.7, ranks


@pytest.mark.xfail(strict=True, reason="first-order score misranks this flip; counterexample to a per-graph top-3 claim")
def test_grad_attack_top3_counterexample():
    assert _single_flip_rank(8, TOP3_CFG) < 3


def test_grad_attack_rejects_huge_graphs():
    g = SparseGraph.empty(DENSE_LIMIT + 1)
    with pytest.raises(AttackError, match=str(DENSE_LIMIT)):
        grad_untargeted_attack(g, np.zeros((g.n_nodes, 1)), np.zeros(g.n_nodes, int),
                               make_split(g.n_nodes, 0), _spec("grad", 1))


def _star_surrogate():
    # one-hot class features pass straight through both layers
    m = GcnModel([2, 2, 2], dropout=0.0)
    m.weights[0].value[...] = np.eye(2)
    m.weights[1].value[...] = np.eye(2) * 4.0
    return m


def test_greedy_star_picks_exact_argmax():
    # target 0 (class 0) hangs off its only class-0 neighbour 1; nodes 2..5 are class 1
    g = SparseGraph.from_edges(6, [(0, 1), (1, 2), (1, 3), (1, 4), (1, 5)])
    y = np.array([0, 0, 1, 1, 1, 1])
    x = np.eye(2)[y]
    x[0] = 0.0
    model = _star_surrogate()
    diff = greedy_targeted_flips(g, x, y, [0], 1, model)
    (sign, u, v), = diff.flips()
    a = g.to_dense()
    w1, w2 = (p.value for p in model.parameters())
    losses = {}
    for w in range(1, 6):
        b = a.copy()
        b[0, w] = b[w, 0] = 1 - b[0, w]
        losses[(0, w)] = surrogate_loss_dense(b, x, w1, w2, y, [0])
    assert (u, v) == max(sorted(losses), key=losses.get)
    assert (sign == "-" and (u, v) == (0, 1)) or (sign == "+" and y[v] == 1)


def test_greedy_respects_per_target_budget():
    for i in range(50):
        rng = np.random.default_rng([71, i])
        g, x, y, split = _random_config(rng)
        targets = rng.choice(g.n_nodes, size=int(rng.integers(1, 5)), replace=False)
        budget = int(rng.integers(1, 5))
        model = GcnModel([x.shape[1], 4, int(y.max()) + 1], dropout=0.0, seed=i)
        diff = greedy_targeted_flips(g, x, y, targets, budget, model)
        for t in targets:
            assert diff.touching(int(t)) <= budget
        assert len(diff) <= budget * len(targets)


def test_greedy_rejects_unlabeled_target():
    g = random_graph(np.random.default_rng(0), 12, 0.3)
    y = np.zeros(12, int)
    y[3] = -1
    with pytest.raises(AttackError, match="unlabeled"):
        run_attack(_spec("greedy", 1, targets=(3,), surrogate=FAST_SURROGATE),
                   g, np.ones((12, 2)), y, make_split(12, 0))


def test_diff_file_roundtrip(tmp_path):
    g = random_graph(np.random.default_rng(3), 20, 0.2)
    d = run_attack(_spec("random", 7, seed=3), g, None, None, None)
    path = tmp_path / "attack.diff"
    write_diff(path, d, "random", 3, 7)
    lines = path.read_text().splitlines()
    assert lines[0] == "# kind=random seed=3 budget=7 flips=7"
    keys = [(sign, int(u), int(v)) for sign, u, v in (ln.split() for ln in lines[1:])]
    assert keys == sorted(keys)
    back, header = read_diff(path)
    assert back == d and header["kind"] == "random" and header["budget"] == "7"
    assert apply_edge_diff(g, back).same_as(apply_edge_diff(g, d))


def test_diff_file_errors_name_line(tmp_path):
    path = tmp_path / "bad.diff"
    path.write_text("# kind=random\n+ 0 1\n* 2 3\n")
    with pytest.raises(ValueError, match=":3:"):
        read_diff(path)
