"""Quote-forest construction and per-tree structural measures."""

from collections import defaultdict, deque
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional

from ._util import id_key, read_csv, write_csv
from .ingest import EventKind

SIZE_CLASSES = ("small", "medium", "large")
DEFAULT_COVERAGE = (0.75, 0.90)


@dataclass(frozen=True)
class TreeNode:
    tweet_id: str
    user_id: str
    parent: Optional[str]  # parent tweet id; None at the root
    depth: int


@dataclass(frozen=True)
class QuoteTree:
    nodes: tuple  # breadth-first, children in id order; nodes[0] is the root
    retweeter_ids: frozenset = frozenset()

    @property
    def root(self):
        return self.nodes[0]

    @property
    def tree_id(self):
        return self.nodes[0].tweet_id

    @property
    def size(self):
        return len(self.nodes)

    def children(self):
        out = defaultdict(list)
        for n in self.nodes[1:]:
            out[n.parent].append(n)
        return out


@dataclass
class ForestDiagnostics:
    n_roots_considered: int = 0
    n_external_roots: int = 0  # quotes of tweets absent from the stream, used as roots
    n_trivial_roots: int = 0  # roots without any surviving quote
    n_self_quotes: int = 0
    n_nonperimeter_quotes: int = 0
    n_unreached_quotes: int = 0
    n_dangling_retweets: int = 0
    n_nonroot_retweets: int = 0

    def as_dict(self):
        return dict(self.__dict__)


def build_forest(events, perimeter=None, root_window=None, diagnostics=None):
    """Build quote trees from an event stream.

    Roots are originals, or quotes whose target is missing from the stream,
    authored by perimeter users inside ``root_window`` (inclusive). Quotes hang
    off the tweet they reference. A quote is dropped together with its whole
    subtree when its author is outside the perimeter or is the author of the
    quoted tweet. Trees without a surviving quote are discarded.

    ``perimeter=None`` admits everybody; ``root_window=None`` admits any time.
    Output is sorted by root tweet id and does not depend on event order.
    """
    diag = diagnostics if diagnostics is not None else ForestDiagnostics()
    if root_window is not None and root_window[0] > root_window[1]:
        raise ValueError("root_window must satisfy t0 <= t1")

    by_id = {ev.tweet_id: ev for ev in events}

    def in_perimeter(uid):
        return perimeter is None or uid in perimeter

    def resolve(ref):
        # quoting a retweet quotes the retweeted tweet
        seen = set()
        while ref in by_id and by_id[ref].kind is EventKind.RETWEET and ref not in seen:
            seen.add(ref)
            ref = by_id[ref].ref_tweet_id
        return ref

    quotes_of = defaultdict(list)
    retweets_of = defaultdict(set)
    candidates = []
    n_quotes = 0
    for ev in by_id.values():
        if ev.kind is EventKind.QUOTE:
            n_quotes += 1
            target = resolve(ev.ref_tweet_id)
            if target in by_id:
                quotes_of[target].append(ev)
            else:
                candidates.append(ev)
                diag.n_external_roots += 1
        elif ev.kind is EventKind.RETWEET:
            if ev.ref_tweet_id in by_id:
                retweets_of[ev.ref_tweet_id].add(ev.user_id)
            else:
                diag.n_dangling_retweets += 1
        else:
            candidates.append(ev)

    def admissible_root(ev):
        if not in_perimeter(ev.user_id):
            return False
        if root_window is not None and not (root_window[0] <= ev.timestamp <= root_window[1]):
            return False
        return True

    trees = []
    placed = 0
    for root_ev in sorted(candidates, key=lambda e: id_key(e.tweet_id)):
        if not admissible_root(root_ev):
            continue
        diag.n_roots_considered += 1
        nodes = [TreeNode(root_ev.tweet_id, root_ev.user_id, None, 0)]
        queue = deque([(root_ev, 0)])
        while queue:
            parent, depth = queue.popleft()
            for q in sorted(quotes_of.get(parent.tweet_id, ()), key=lambda e: id_key(e.tweet_id)):
                if q.user_id == parent.user_id:
                    diag.n_self_quotes += 1
                    continue
                if not in_perimeter(q.user_id):
                    diag.n_nonperimeter_quotes += 1
                    continue
                nodes.append(TreeNode(q.tweet_id, q.user_id, parent.tweet_id, depth + 1))
                queue.append((q, depth + 1))
        if len(nodes) < 2:
            diag.n_trivial_roots += 1
            continue
        placed += len(nodes) - 1
        rts = retweets_of.get(root_ev.tweet_id, set()) - {root_ev.user_id}
        trees.append(QuoteTree(tuple(nodes), frozenset(rts)))

    root_ids = {t.tree_id for t in trees}
    diag.n_nonroot_retweets = sum(
        1 for ev in by_id.values()
        if ev.kind is EventKind.RETWEET and ev.ref_tweet_id in by_id and ev.ref_tweet_id not in root_ids
    )
    diag.n_unreached_quotes = n_quotes - placed - diag.n_self_quotes - diag.n_nonperimeter_quotes
    return trees


def avg_depth(tree: QuoteTree) -> float:
    """Mean depth over the non-root nodes (1.0 for a star)."""
    depths = [n.depth for n in tree.nodes[1:]]
    return sum(depths) / len(depths)


def avg_depth_exact(tree: QuoteTree) -> Fraction:
    depths = [n.depth for n in tree.nodes[1:]]
    return Fraction(sum(depths), len(depths))


def max_depth(tree: QuoteTree) -> int:
    return max(n.depth for n in tree.nodes)


def _sizes(forest_or_sizes):
    return [t if isinstance(t, int) else t.size for t in forest_or_sizes]


def size_coverage_thresholds(forest, quantiles=DEFAULT_COVERAGE):
    """Smallest size ``s`` per quantile ``q`` such that trees of size <= s hold >= q of all nodes.

    Accepts trees or plain sizes.
    """
    sizes = sorted(_sizes(forest))
    if not sizes:
        raise ValueError("coverage thresholds need a nonempty forest")
    total = sum(sizes)
    cum = []
    running = 0
    for i, s in enumerate(sizes):
        running += s
        if i + 1 == len(sizes) or sizes[i + 1] != s:
            cum.append((s, running))
    out = []
    for q in quantiles:
        qf = Fraction(str(q))  # exact decimal, so 0.9 * 100 is 90
        if not (0 < qf <= 1):
            raise ValueError(f"quantile {q} outside (0, 1]")
        out.append(next(s for s, c in cum if c >= qf * total))
    return out


def size_class(tree_or_size, cutoffs):
    size = tree_or_size if isinstance(tree_or_size, int) else tree_or_size.size
    c1, c2 = cutoffs
    if c1 > c2:
        raise ValueError("cutoffs must be ascending")
    if size <= c1:
        return "small"
    if size <= c2:
        return "medium"
    return "large"


def trees_per_user(forest):
    """Map root author -> (tree count, mean size, max size)."""
    sizes = defaultdict(list)
    for t in forest:
        sizes[t.root.user_id].append(t.size)
    return {u: (len(s), sum(s) / len(s), max(s)) for u, s in sizes.items()}


def write_forest(forest, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_nodes = write_csv(
        out_dir / "forest.csv",
        ["tree_id", "tweet_id", "parent_tweet_id", "user_id", "depth"],
        ([t.tree_id, n.tweet_id, n.parent or "", n.user_id, n.depth] for t in forest for n in t.nodes),
    )
    n_rt = write_csv(
        out_dir / "retweeters.csv",
        ["tree_id", "user_id"],
        ([t.tree_id, u] for t in forest for u in sorted(t.retweeter_ids, key=id_key)),
    )
    return n_nodes, n_rt


def read_forest(in_dir):
    in_dir = Path(in_dir)
    rows = read_csv(in_dir / "forest.csv", ["tree_id", "tweet_id", "parent_tweet_id", "user_id", "depth"])
    nodes = defaultdict(list)
    for r in rows:
        nodes[r["tree_id"]].append(
            TreeNode(r["tweet_id"], r["user_id"], r["parent_tweet_id"] or None, int(r["depth"]))
        )
    rts = defaultdict(set)
    rt_path = in_dir / "retweeters.csv"
    if rt_path.exists():
        for r in read_csv(rt_path, ["tree_id", "user_id"]):
            rts[r["tree_id"]].add(r["user_id"])
    forest = []
    for tid in sorted(nodes, key=id_key):
        ns = nodes[tid]
        if ns[0].parent is not None or ns[0].tweet_id != tid:
            raise ValueError(f"tree {tid}: first row must be the root")
        forest.append(QuoteTree(tuple(ns), frozenset(rts.get(tid, ()))))
    return forest
