"""Statistics relating quote-tree structure to the valence of participants.

All functions take a forest (list of :class:`~quotetrees.forest.QuoteTree`)
and an ``ip_map`` of ``user_id -> theta``. Users absent from ``ip_map`` are
left out of every mean.
"""

import logging
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._util import id_key, read_csv, write_csv
from .forest import DEFAULT_COVERAGE, SIZE_CLASSES, avg_depth, size_class, size_coverage_thresholds
from .valence import IP_CLASSES, classify_ip

logger = logging.getLogger(__name__)

FRAMES = tuple("ABCDEFGH")
X_KINDS = ("rho", "meanR", "offset")
DOT_COLORS = {"left": "blue", "center": "black", "right": "red", None: "gray"}


@dataclass(frozen=True)
class BinSpec:
    lo: float = -2.5
    hi: float = 2.5
    width: float = 0.25

    @property
    def n_bins(self):
        return int(round((self.hi - self.lo) / self.width))

    @property
    def edges(self):
        return self.lo + self.width * np.arange(self.n_bins + 1)

    def index(self, x):
        """Bin index per value; out-of-range values land in the edge bins."""
        x = np.asarray(x, dtype=float)
        idx = np.floor((x - self.lo) / self.width).astype(int)
        return np.clip(idx, 0, self.n_bins - 1)


@dataclass
class BinnedCurve:
    edges: np.ndarray
    count: np.ndarray
    x_mean: np.ndarray  # NaN in empty bins
    y_mean: np.ndarray
    y_std: np.ndarray  # population standard deviation

    @property
    def populated(self):
        return self.count > 0


def binned_curve(x, y, bins: BinSpec = BinSpec()) -> BinnedCurve:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("x and y must have the same length")
    n = bins.n_bins
    idx = bins.index(x) if x.size else np.zeros(0, dtype=int)
    count = np.bincount(idx, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        x_mean = np.bincount(idx, weights=x, minlength=n) / count
        y_mean = np.bincount(idx, weights=y, minlength=n) / count
        # second pass around the bin mean for numerical stability
        resid = y - y_mean[idx] if y.size else y
        y_std = np.sqrt(np.bincount(idx, weights=resid**2, minlength=n) / count)
    return BinnedCurve(bins.edges, count, x_mean, y_mean, y_std)


def curve_slope(curve: BinnedCurve):
    """Count-weighted least-squares slope of bin means (y on x) over populated bins."""
    m = curve.populated
    if m.sum() < 2:
        raise ValueError("need at least two populated bins for a slope")
    x, y, w = curve.x_mean[m], curve.y_mean[m], curve.count[m].astype(float)
    xb = np.average(x, weights=w)
    yb = np.average(y, weights=w)
    return float(np.sum(w * (x - xb) * (y - yb)) / np.sum(w * (x - xb) ** 2))


# ---------------------------------------------------------------- trees


@dataclass(frozen=True)
class TreeValenceSummary:
    tree_id: str
    root_user: str
    rho: float
    mean_R: Optional[float]
    mean_Q: Optional[float]
    n_R: int
    n_Q: int
    size: int
    avg_depth: float
    size_class: str

    @property
    def divergence(self):
        if self.mean_R is None or self.mean_Q is None:
            return None
        return self.mean_Q - self.mean_R

    @property
    def offset(self):
        return None if self.mean_R is None else self.mean_R - self.rho


def _mean(vals):
    return sum(vals) / len(vals) if vals else None


def summarize_trees(forest, ip_map, cutoffs=None, quoters="distinct", stats=None):
    """One summary per tree whose root author has a known IP.

    ``quoters="distinct"`` averages over distinct depth-1 quoting users;
    ``quoters="events"`` over depth-1 quote events. ``cutoffs`` defaults to
    the 75%/90% node-coverage thresholds of ``forest``.
    """
    if quoters not in ("distinct", "events"):
        raise ValueError(f"unknown quoter weighting {quoters!r}")
    forest = list(forest)
    if cutoffs is None:
        cutoffs = size_coverage_thresholds(forest, DEFAULT_COVERAGE) if forest else (0, 0)
    stats = stats if stats is not None else Counter()
    out = []
    for t in forest:
        rho = ip_map.get(t.root.user_id)
        if rho is None:
            stats["unknown_rho_trees"] += 1
            continue
        rt = [ip_map[u] for u in sorted(t.retweeter_ids, key=id_key) if u in ip_map]
        stats["unknown_ip_retweeters"] += len(t.retweeter_ids) - len(rt)
        d1 = [n.user_id for n in t.nodes if n.depth == 1]
        if quoters == "distinct":
            d1 = sorted(set(d1), key=id_key)
        q = [ip_map[u] for u in d1 if u in ip_map]
        stats["unknown_ip_quoters"] += len(d1) - len(q)
        out.append(TreeValenceSummary(
            t.tree_id, t.root.user_id, rho, _mean(rt), _mean(q), len(rt), len(q),
            t.size, avg_depth(t), size_class(t, cutoffs),
        ))
    return out


def qr_curves(summaries, bins: BinSpec = BinSpec()):
    """``<R>`` and ``<Q>`` against ``rho``, overall and per size class.

    Returns ``{(panel, series): BinnedCurve}`` with series ``"R"``/``"Q"``.
    """
    out = {}
    for panel in ("all",) + SIZE_CLASSES:
        sel = [s for s in summaries if panel == "all" or s.size_class == panel]
        for series, attr in (("R", "mean_R"), ("Q", "mean_Q")):
            pts = [(s.rho, getattr(s, attr)) for s in sel if getattr(s, attr) is not None]
            xs, ys = zip(*pts) if pts else ((), ())
            out[(panel, series)] = binned_curve(xs, ys, bins)
    return out


def _x_of(s, x_kind):
    if x_kind == "rho":
        return s.rho
    if x_kind == "meanR":
        return s.mean_R
    if x_kind == "offset":
        return s.offset
    raise ValueError(f"unknown x selector {x_kind!r}; expected one of {X_KINDS}")


def divergence_curves(summaries, x_kind="rho", bins: BinSpec = BinSpec()):
    """``<Q> - <R>`` against the chosen x, overall and per root IP class.

    Only trees with both means contribute. Returns ``{panel: BinnedCurve}``.
    """
    if x_kind not in X_KINDS:
        raise ValueError(f"unknown x selector {x_kind!r}; expected one of {X_KINDS}")
    both = [s for s in summaries if s.divergence is not None]
    out = {}
    for panel in ("all",) + IP_CLASSES:
        sel = [s for s in both if panel == "all" or classify_ip(s.rho) == panel]
        xs = [_x_of(s, x_kind) for s in sel]
        ys = [s.divergence for s in sel]
        out[panel] = binned_curve(xs, ys, bins)
    return out


# ---------------------------------------------------------------- users


@dataclass(frozen=True)
class UserSummary:
    user_id: str
    theta: Optional[float]
    n_retweets: int
    n_quotes: int
    mean_rho_retweeted: float
    mean_rho_quoted: float
    quartiles: tuple  # of (rho of each quoted root - mean_rho_retweeted)

    @property
    def divergence(self):
        return self.mean_rho_quoted - self.mean_rho_retweeted


def user_summaries(forest, ip_map):
    """Per-user mean root IP over retweeted vs. depth-1-quoted roots.

    Every retweet and every quote event counts. Only roots with known IP are
    used, and only users with at least one of each kind are reported.
    """
    rts = defaultdict(list)
    qts = defaultdict(list)
    for t in forest:
        rho = ip_map.get(t.root.user_id)
        if rho is None:
            continue
        for u in t.retweeter_ids:
            rts[u].append(rho)
        for n in t.nodes:
            if n.depth == 1:
                qts[n.user_id].append(rho)
    out = []
    for u in sorted(rts.keys() & qts.keys(), key=id_key):
        mr = float(np.mean(rts[u]))
        diffs = np.asarray(qts[u]) - mr
        q1, q2, q3 = np.percentile(diffs, [25, 50, 75])
        out.append(UserSummary(u, ip_map.get(u), len(rts[u]), len(qts[u]), mr,
                               float(np.mean(qts[u])), (float(q1), float(q2), float(q3))))
    return out


def user_curves(users, bins: BinSpec = BinSpec()):
    """Mean retweeted-root IP and quote/retweet divergence against the user's own IP."""
    known = [u for u in users if u.theta is not None]
    th = [u.theta for u in known]
    return {
        "retweeted": binned_curve(th, [u.mean_rho_retweeted for u in known], bins),
        "quoted": binned_curve(th, [u.mean_rho_quoted for u in known], bins),
        "divergence": binned_curve(th, [u.divergence for u in known], bins),
    }


# ---------------------------------------------------------------- depth 2


@dataclass(frozen=True)
class Depth2Record:
    tree_id: str
    quote_id: str
    d1: float
    rho: float
    mean_d2: float
    n_d2: int
    size_class: str

    @property
    def x(self):
        return self.d1 - self.rho

    @property
    def y(self):
        return self.mean_d2 - self.d1


def depth2_records(forest, ip_map, cutoffs=None):
    """One record per primary quote whose author, root and >=1 secondary quoter have known IPs.

    Secondary quoters of a primary quote are averaged as distinct users.
    """
    forest = list(forest)
    if cutoffs is None:
        cutoffs = size_coverage_thresholds(forest, DEFAULT_COVERAGE) if forest else (0, 0)
    out = []
    for t in forest:
        rho = ip_map.get(t.root.user_id)
        if rho is None:
            continue
        kids = t.children()
        cls = size_class(t, cutoffs)
        for n in t.nodes:
            if n.depth != 1 or n.user_id not in ip_map:
                continue
            sec = sorted({c.user_id for c in kids.get(n.tweet_id, ()) if c.user_id in ip_map}, key=id_key)
            if not sec:
                continue
            out.append(Depth2Record(t.tree_id, n.tweet_id, ip_map[n.user_id], rho,
                                    sum(ip_map[u] for u in sec) / len(sec), len(sec), cls))
    return out


def depth2_curves(records, bins: BinSpec = BinSpec()):
    out = {}
    for panel in ("all",) + SIZE_CLASSES:
        sel = [r for r in records if panel == "all" or r.size_class == panel]
        out[panel] = binned_curve([r.x for r in sel], [r.y for r in sel], bins)
    return out


# ---------------------------------------------------------------- heatmaps


@dataclass
class Heatmaps:
    size_edges: np.ndarray
    depth_edges: np.ndarray
    counts: dict  # ip class -> (n_size_bins, n_depth_bins) array
    rho_edges: np.ndarray
    rho_by_size: dict  # size class -> histogram of rho


def _log2_edges(max_size):
    top = max(2, int(math.ceil(math.log2(max(max_size, 2) + 1))))
    return 2 ** np.arange(1, top + 1)


def heatmaps(summaries, depth_width=0.25, rho_bins: BinSpec = BinSpec()):
    """Per-IP-class counts over (size, average depth), plus rho histograms per size class.

    Size bins are powers of two ``[2, 4), [4, 8), ...``; depth bins start at
    1 with ``depth_width`` steps.
    """
    summaries = list(summaries)
    max_size = max((s.size for s in summaries), default=2)
    max_d = max((s.avg_depth for s in summaries), default=1.0)
    size_edges = _log2_edges(max_size)
    n_d = int(math.floor((max_d - 1.0) / depth_width)) + 1
    depth_edges = 1.0 + depth_width * np.arange(n_d + 1)
    counts = {c: np.zeros((size_edges.size - 1, n_d), dtype=int) for c in IP_CLASSES}
    for s in summaries:
        i = int(np.searchsorted(size_edges, s.size, side="right")) - 1
        j = min(int(math.floor((s.avg_depth - 1.0) / depth_width)), n_d - 1)
        counts[classify_ip(s.rho)][i, j] += 1
    rho_by_size = {}
    for c in SIZE_CLASSES:
        idx = rho_bins.index([s.rho for s in summaries if s.size_class == c])
        rho_by_size[c] = np.bincount(idx, minlength=rho_bins.n_bins) if idx.size else np.zeros(rho_bins.n_bins, int)
    return Heatmaps(size_edges, depth_edges, counts, rho_bins.edges, rho_by_size)


# ---------------------------------------------------------------- frames


@dataclass(frozen=True)
class FrameAnnotation:
    tweet_id: str
    frames: frozenset

    def __post_init__(self):
        if not self.frames:
            raise ValueError(f"{self.tweet_id}: empty frame set")
        bad = set(self.frames) - set(FRAMES)
        if bad:
            raise ValueError(f"{self.tweet_id}: unknown frame(s) {sorted(bad)}")


@dataclass
class FrameTable:
    counts: dict  # (tree_id, frame, ip class) -> count
    totals: dict  # (tree_id, ip class) -> distinct annotated quotes
    skipped: int = 0
    trees: list = field(default_factory=list)

    def percent(self, tree_id, frame, ip_class):
        total = self.totals.get((tree_id, ip_class), 0)
        if total == 0:
            return None
        return 100.0 * self.counts.get((tree_id, frame, ip_class), 0) / total

    def rows(self):
        for t in self.trees:
            for f in FRAMES:
                for c in IP_CLASSES:
                    yield t, f, c, self.counts.get((t, f, c), 0), self.totals.get((t, c), 0), self.percent(t, f, c)


def frame_table(annotations, ip_map, quote_authors, quote_tree=None):
    """Frame x author-class counts and column percentages, per tree.

    A quote carrying several frames is counted once under each; percentages
    divide by the number of distinct annotated quotes of that class in that
    tree. Annotations whose tweet or author IP cannot be resolved are
    skipped with a warning.
    """
    counts = Counter()
    totals = Counter()
    skipped = 0
    trees = set()
    for ann in annotations:
        author = quote_authors.get(ann.tweet_id)
        if author is None or author not in ip_map:
            skipped += 1
            continue
        tree = quote_tree.get(ann.tweet_id, "all") if quote_tree is not None else "all"
        cls = classify_ip(ip_map[author])
        trees.add(tree)
        totals[(tree, cls)] += 1
        for f in ann.frames:
            counts[(tree, f, cls)] += 1
    if skipped:
        warnings.warn(f"{skipped} annotation(s) could not be resolved to a quote with known author IP",
                      stacklevel=2)
    return FrameTable(dict(counts), dict(totals), skipped, sorted(trees, key=id_key))


def read_annotations(path):
    out = []
    seen = set()
    for i, r in enumerate(read_csv(path, ["tweet_id", "frames"]), start=2):
        if r["tweet_id"] in seen:
            raise ValueError(f"{path}:{i}: duplicate tweet id {r['tweet_id']!r}")
        seen.add(r["tweet_id"])
        labels = frozenset(x.strip() for x in r["frames"].split("|") if x.strip())
        try:
            out.append(FrameAnnotation(r["tweet_id"], labels))
        except ValueError as exc:
            raise ValueError(f"{path}:{i}: {exc}") from None
    return out


# ---------------------------------------------------------------- export


def _dot_id(s):
    return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_tree_dot(tree, ip_map):
    """Graphviz description of a tree, nodes colored by the author's IP class."""
    lines = [f"digraph {_dot_id('tree_' + tree.tree_id)} {{", "  node [shape=circle, style=filled];"]
    for n in tree.nodes:
        theta = ip_map.get(n.user_id)
        color = DOT_COLORS[None if theta is None else classify_ip(theta)]
        font = "black" if color == "gray" else "white"
        lines.append(f"  {_dot_id(n.tweet_id)} [label={_dot_id(n.user_id)}, fillcolor={color}, "
                     f"color={color}, fontcolor={font}];")
    for n in tree.nodes[1:]:
        lines.append(f"  {_dot_id(n.parent)} -> {_dot_id(n.tweet_id)};")
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- csv


CURVE_HEADER = ["bin_lo", "bin_hi", "count", "x_mean", "y_mean", "y_std"]


def curve_rows(curve: BinnedCurve, *prefix):
    for k in range(curve.count.size):
        c = int(curve.count[k])
        mean = (curve.x_mean[k], curve.y_mean[k], curve.y_std[k]) if c else (None, None, None)
        yield [*prefix, curve.edges[k], curve.edges[k + 1], c, *mean]


def write_fig5(path, curves):
    rows = [r for (panel, series), c in sorted(curves.items()) for r in curve_rows(c, panel, series)]
    return write_csv(path, ["panel", "series"] + CURVE_HEADER, rows)


def write_fig6(path, summaries, bins=BinSpec()):
    rows = []
    for xk in X_KINDS:
        for panel, c in divergence_curves(summaries, xk, bins).items():
            rows.extend(curve_rows(c, xk, panel))
    return write_csv(path, ["x_kind", "panel"] + CURVE_HEADER, rows)


def write_fig7(path, users):
    return write_csv(
        path,
        ["user_id", "theta", "n_retweets", "n_quotes", "mean_rho_retweeted", "mean_rho_quoted",
         "divergence", "q1", "median", "q3"],
        ([u.user_id, u.theta, u.n_retweets, u.n_quotes, u.mean_rho_retweeted, u.mean_rho_quoted,
          u.divergence, *u.quartiles] for u in users),
    )


def write_fig7_curves(path, users, bins=BinSpec()):
    rows = [r for name, c in user_curves(users, bins).items() for r in curve_rows(c, name)]
    return write_csv(path, ["series"] + CURVE_HEADER, rows)


def write_fig8(path, records, bins=BinSpec()):
    rows = [r for panel, c in depth2_curves(records, bins).items() for r in curve_rows(c, panel)]
    return write_csv(path, ["panel"] + CURVE_HEADER, rows)


def write_fig8_records(path, records):
    return write_csv(
        path, ["tree_id", "quote_id", "d1", "rho", "mean_d2", "n_d2", "x", "y", "size_class"],
        ([r.tree_id, r.quote_id, r.d1, r.rho, r.mean_d2, r.n_d2, r.x, r.y, r.size_class] for r in records),
    )


def write_fig4(path, hm: Heatmaps):
    rows = []
    for cls in IP_CLASSES:
        grid = hm.counts[cls]
        for i in range(grid.shape[0]):
            for j in range(grid.shape[1]):
                rows.append(["heatmap", cls, int(hm.size_edges[i]), int(hm.size_edges[i + 1]),
                             hm.depth_edges[j], hm.depth_edges[j + 1], int(grid[i, j])])
    for cls in SIZE_CLASSES:
        for k, c in enumerate(hm.rho_by_size[cls]):
            rows.append(["rho_by_size", cls, "", "", hm.rho_edges[k], hm.rho_edges[k + 1], int(c)])
    return write_csv(path, ["panel", "group", "size_lo", "size_hi", "lo", "hi", "count"], rows)


def write_table1(path, table: FrameTable):
    return write_csv(path, ["tree_id", "frame", "ip_class", "count", "class_total", "percent"], table.rows())


def write_fig3(path, rows):
    return write_csv(path, ["group", "kind", "x", "y"], rows)
