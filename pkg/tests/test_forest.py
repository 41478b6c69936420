from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quotetrees.forest import (
    ForestDiagnostics, QuoteTree, TreeNode, avg_depth, avg_depth_exact, build_forest, read_forest,
    size_class, size_coverage_thresholds, trees_per_user, write_forest,
)
from quotetrees.ingest import EventKind, TweetEvent

from oracles import oracle_cutoffs, oracle_forest, random_events

O, R, Q = EventKind.ORIGINAL, EventKind.RETWEET, EventKind.QUOTE


def ev(tid, uid, kind=O, ref=None, ts=0):
    return TweetEvent(tid, uid, ts, kind, ref)


def star(n_leaves, root="r"):
    nodes = [TreeNode(root, "A", None, 0)] + [TreeNode(f"{root}{i}", f"U{i}", root, 1) for i in range(n_leaves)]
    return QuoteTree(tuple(nodes))


def chain(k):
    nodes = [TreeNode("c0", "A", None, 0)]
    for d in range(1, k + 1):
        nodes.append(TreeNode(f"c{d}", "AB"[d % 2], f"c{d - 1}", d))
    return QuoteTree(tuple(nodes))


def shape(forest):
    return {t.tree_id: {n.tweet_id: (n.parent, n.depth, n.user_id) for n in t.nodes} for t in forest}


def test_self_quote_of_quote_dropped():
    events = [ev("r", "A"), ev("q1", "B", Q, "r"), ev("q2", "B", Q, "q1")]
    diag = ForestDiagnostics()
    (tree,) = build_forest(events, diagnostics=diag)
    assert tree.size == 2
    assert diag.n_self_quotes == 1


def test_retweets_only_gives_no_tree():
    events = [ev("r", "A"), ev("t1", "B", R, "r"), ev("t2", "C", R, "r")]
    diag = ForestDiagnostics()
    assert build_forest(events, diagnostics=diag) == []
    assert diag.n_trivial_roots == 1


def test_root_author_may_quote_deeper():
    events = [ev("r", "A"), ev("b", "B", Q, "r"), ev("c", "C", Q, "r"), ev("a2", "A", Q, "b")]
    (tree,) = build_forest(events)
    assert tree.size == 4
    depth = {n.tweet_id: n.depth for n in tree.nodes}
    assert depth["a2"] == 2


def test_retweeters_collected_on_root_only():
    events = [ev("r", "A"), ev("q", "B", Q, "r"), ev("t1", "C", R, "r"), ev("t2", "C", R, "r"),
              ev("t3", "A", R, "r"), ev("t4", "D", R, "q"), ev("t5", "E", R, "zzz")]
    diag = ForestDiagnostics()
    (tree,) = build_forest(events, diagnostics=diag)
    assert tree.retweeter_ids == {"C"}
    assert diag.n_dangling_retweets == 1
    assert diag.n_nonroot_retweets == 1


def test_dangling_quote_starts_root():
    events = [ev("q", "B", Q, "missing"), ev("q2", "C", Q, "q")]
    diag = ForestDiagnostics()
    (tree,) = build_forest(events, diagnostics=diag)
    assert tree.tree_id == "q" and tree.size == 2
    assert diag.n_external_roots == 1


def test_quote_of_retweet_attaches_to_original():
    events = [ev("r", "A"), ev("t", "B", R, "r"), ev("q", "C", Q, "t")]
    (tree,) = build_forest(events)
    assert tree.nodes[1].parent == "r"


def test_nonperimeter_quote_drops_subtree():
    events = [ev("r", "A"), ev("x", "X", Q, "r"), ev("y", "B", Q, "x"), ev("z", "C", Q, "r")]
    diag = ForestDiagnostics()
    (tree,) = build_forest(events, perimeter={"A", "B", "C"}, diagnostics=diag)
    assert {n.tweet_id for n in tree.nodes} == {"r", "z"}
    assert diag.n_nonperimeter_quotes == 1 and diag.n_unreached_quotes == 1


def test_root_window_and_perimeter_on_roots():
    events = [ev("r1", "A", ts=5), ev("q1", "B", Q, "r1", ts=50), ev("r2", "A", ts=20),
              ev("q2", "B", Q, "r2", ts=21), ev("r3", "Z", ts=6), ev("q3", "B", Q, "r3", ts=7)]
    forest = build_forest(events, perimeter={"A", "B"}, root_window=(0, 10))
    assert [t.tree_id for t in forest] == ["r1"]
    with pytest.raises(ValueError):
        build_forest(events, root_window=(10, 0))


@pytest.mark.parametrize("seed", range(30))
def test_matches_bottom_up_oracle(seed):
    rng = np.random.default_rng(seed)
    events = random_events(rng, n_events=150)
    perimeter = {f"u{i}" for i in range(8) if rng.random() < 0.8} if seed % 2 else None
    window = (100, 800) if seed % 3 == 0 else None
    got = build_forest(events, perimeter, window)
    want = oracle_forest(events, perimeter, window)
    assert shape(got) == {k: v["nodes"] for k, v in want.items()}
    assert {t.tree_id: set(t.retweeter_ids) for t in got} == {k: v["retweeters"] for k, v in want.items()}


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.randoms())
def test_permutation_invariant(seed, rnd):
    events = random_events(np.random.default_rng(seed), n_events=80)
    shuffled = list(events)
    rnd.shuffle(shuffled)
    assert build_forest(events) == build_forest(shuffled)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_tree_invariants(seed):
    forest = build_forest(random_events(np.random.default_rng(seed), n_events=120))
    for t in forest:
        assert t.size >= 2
        by_id = {n.tweet_id: n for n in t.nodes}
        assert len(by_id) == t.size
        assert sum(n.parent is None for n in t.nodes) == 1
        for n in t.nodes[1:]:
            p = by_id[n.parent]
            assert n.depth == p.depth + 1
            assert n.user_id != p.user_id
        d = avg_depth(t)
        assert 1 <= d <= t.size - 1
        assert (d == 1) == all(n.depth <= 1 for n in t.nodes)


def test_avg_depth_examples():
    assert avg_depth(star(5)) == 1.0
    assert avg_depth(chain(2)) == 1.5
    nodes = (TreeNode("r", "A", None, 0), TreeNode("a", "B", "r", 1), TreeNode("b", "C", "r", 1),
             TreeNode("c", "D", "a", 2))
    t = QuoteTree(nodes)
    # BFS over non-root nodes: depths 1, 1, 2
    assert avg_depth_exact(t) == Fraction(4, 3)
    assert avg_depth(t) == float(Fraction(4, 3))


@pytest.mark.parametrize("k", range(1, 40))
def test_chain_avg_depth(k):
    assert avg_depth_exact(chain(k)) == Fraction(k + 1, 2)
    assert avg_depth(chain(k)) == (k + 1) / 2


def test_coverage_examples():
    assert size_coverage_thresholds([2, 2, 4], [0.5]) == [2]
    assert size_coverage_thresholds([2, 2, 4], [1.0]) == [4]
    assert size_coverage_thresholds([star(1), star(1), star(3)], [0.5, 1.0]) == [2, 4]
    with pytest.raises(ValueError):
        size_coverage_thresholds([], [0.5])
    with pytest.raises(ValueError):
        size_coverage_thresholds([2], [0.0])


def test_coverage_exact_decimal():
    # 90% of 100 nodes is exactly 90: sizes 2*45 reach it
    sizes = [2] * 45 + [10]
    assert size_coverage_thresholds(sizes, [0.9]) == [2]


@given(st.lists(st.integers(2, 60), min_size=1, max_size=60),
       st.lists(st.sampled_from([0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 1.0]), min_size=1, max_size=6))
def test_coverage_properties(sizes, qs):
    qs = sorted(qs)
    cut = size_coverage_thresholds(sizes, qs)
    assert cut == oracle_cutoffs(sizes, qs)
    assert cut == sorted(cut)
    assert size_coverage_thresholds(sizes, [1.0]) == [max(sizes)]


@pytest.mark.parametrize("size,cls", [(17, "small"), (18, "medium"), (71, "medium"), (72, "large"), (1786, "large")])
def test_size_class(size, cls):
    assert size_class(size, (17, 71)) == cls


def test_trees_per_user():
    f = [star(1, "a"), star(2, "b"), star(6, "c")]
    assert trees_per_user(f) == {"A": (3, 4.0, 7)}
    assert "B" not in trees_per_user(f)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_trees_per_user_group_by_oracle(seed):
    forest = build_forest(random_events(np.random.default_rng(seed), n_events=150))
    groups = {}
    for t in forest:
        groups.setdefault(t.root.user_id, []).append(t.size)
    want = {u: (len(s), float(np.mean(s)), max(s)) for u, s in groups.items()}
    got = trees_per_user(forest)
    assert got.keys() == want.keys()
    for u in want:
        assert got[u][0] == want[u][0] and got[u][2] == want[u][2]
        assert got[u][1] == pytest.approx(want[u][1], rel=1e-12)


def test_dump_round_trip(tmp_path):
    forest = build_forest(random_events(np.random.default_rng(5), n_events=200))
    assert forest
    write_forest(forest, tmp_path)
    assert read_forest(tmp_path) == forest
    header = (tmp_path / "forest.csv").read_text().splitlines()[0]
    assert header == "tree_id,tweet_id,parent_tweet_id,user_id,depth"
