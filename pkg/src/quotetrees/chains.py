"""Chain-depth census and terminal-subchain ("ping-pong") statistics."""

from collections import Counter
from dataclasses import dataclass

from ._util import write_csv

DEFAULT_WINDOWS = (3, 5)


@dataclass(frozen=True)
class Chain:
    users: tuple  # root author first, leaf quoter last

    @property
    def depth(self):
        return len(self.users) - 1


def iter_chains(tree):
    """Yield every root-to-leaf path of ``tree`` as a :class:`Chain`."""
    children = tree.children()
    stack = [(tree.root, (tree.root.user_id,))]
    while stack:
        node, users = stack.pop()
        kids = children.get(node.tweet_id)
        if not kids:
            yield Chain(users)
            continue
        for kid in reversed(kids):
            stack.append((kid, users + (kid.user_id,)))


def chain_census(forest, mode="paths"):
    """Number of chains reaching each depth ``d >= 1``.

    ``mode="paths"`` counts root-to-leaf paths of depth >= d (cumulative, so
    the series never increases). ``mode="nodes"`` counts nodes sitting at
    exactly depth d, i.e. distinct path prefixes reaching d.
    """
    counts = Counter()
    if mode == "paths":
        for tree in forest:
            for ch in iter_chains(tree):
                counts[ch.depth] += 1
        if not counts:
            return {}
        top = max(counts)
        out, running = {}, 0
        for d in range(top, 0, -1):
            running += counts.get(d, 0)
            out[d] = running
        return dict(sorted(out.items()))
    if mode == "nodes":
        for tree in forest:
            for n in tree.nodes[1:]:
                counts[n.depth] += 1
        return {d: counts.get(d, 0) for d in range(1, max(counts, default=0) + 1)}
    raise ValueError(f"unknown census mode {mode!r}")


def unique_terminal_quoters(chain, w):
    """Distinct users among the last ``w`` quoters of a chain (root author not counted)."""
    if w < 1:
        raise ValueError("window must be >= 1")
    if chain.depth < w:
        raise ValueError(f"chain depth {chain.depth} shorter than window {w}")
    users = chain.users if isinstance(chain, Chain) else tuple(chain)
    return len(set(users[-w:]))


def pingpong_histogram(forest, w):
    """Counter keyed by ``(chain depth, unique terminal quoters)`` over chains of depth >= w."""
    if w < 2:
        raise ValueError("window must be >= 2")
    hist = Counter()
    for tree in forest:
        for ch in iter_chains(tree):
            if ch.depth >= w:
                hist[(ch.depth, unique_terminal_quoters(ch, w))] += 1
    return hist


def write_pingpong_csv(path, forest, windows=DEFAULT_WINDOWS):
    rows = []
    for w in windows:
        hist = pingpong_histogram(forest, w)
        rows.extend([d, u, c, w] for (d, u), c in sorted(hist.items()))
    return write_csv(path, ["depth", "unique_quoters", "count", "window"], rows)


def write_census_csv(path, forest):
    rows = []
    for mode in ("paths", "nodes"):
        rows.extend([mode, d, c] for d, c in chain_census(forest, mode).items())
    return write_csv(path, ["mode", "depth", "chains"], rows)
