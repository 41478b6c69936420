"""Seeded synthetic populations, follow matrices and quote/retweet forests.

The follow model is the one :mod:`quotetrees.valence` fits, so estimates can
be scored against the truth. Forest generation plants three controllable
effects:

* retweeters of a root with IP ``rho`` are drawn with log-propensity
  ``-(theta - rho)**2 / (2 sigma_r**2)``;
* primary quoters use the same kernel with ``sigma_q`` plus a cross-cutting
  term ``cross_boost * |theta - rho|`` in the log-propensity;
* a quote of a quote by a user of IP ``d1`` is placed near
  ``d1 - damping * (d1 - ip_of_quoted_parent)``, so the depth-2 discrepancy
  shrinks with slope ``-damping``.

Every random stream is derived from ``(seed, purpose, index)`` so outputs do
not depend on thread count.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, ndtr

from ._util import write_csv
from .ingest import EventKind, TweetEvent, serialize_events
from .valence import FollowMatrix

_POP_USERS, _POP_ELITES, _FOLLOWS, _TREES, _STATS = range(5)


@dataclass(frozen=True)
class Mixture:
    weights: tuple = (1 / 3, 1 / 3, 1 / 3)
    means: tuple = (-1.0, 0.0, 1.0)
    sds: tuple = (0.3, 0.3, 0.3)

    def __post_init__(self):
        if not (len(self.weights) == len(self.means) == len(self.sds)) or not self.weights:
            raise ValueError("mixture weights, means and sds must have the same nonzero length")
        if any(w < 0 for w in self.weights) or not math.isclose(sum(self.weights), 1.0, abs_tol=1e-9):
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if any(s <= 0 for s in self.sds):
            raise ValueError("mixture sds must be > 0")

    def sample(self, rng, n):
        comp = rng.choice(len(self.weights), size=n, p=np.asarray(self.weights) / sum(self.weights))
        return rng.normal(np.asarray(self.means)[comp], np.asarray(self.sds)[comp])

    @property
    def mean(self):
        return float(np.dot(self.weights, self.means))

    @property
    def var(self):
        m = np.asarray(self.means)
        s = np.asarray(self.sds)
        return float(np.dot(self.weights, s**2 + m**2) - self.mean**2)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_users: int = 2000
    n_elites: int = 100
    elite_phi: Mixture = field(default_factory=Mixture)
    user_theta: Mixture = field(default_factory=Mixture)
    alpha_mean: float = 0.0
    alpha_sd: float = 0.5
    beta_mean: float = 0.0
    beta_sd: float = 0.5
    gamma: float = 1.0
    link: str = "logit"
    n_roots: int = 4000
    root_center_bias: float = 1.0
    mean_retweets: float = 8.0
    mean_quotes: float = 3.0
    popularity_sd: float = 0.8
    sigma_r: float = 0.7
    sigma_q: float = 0.7
    cross_boost: float = 0.0
    depth_prob: float = 0.3
    damping: float = 0.5
    secondary_sd: float = 0.3
    max_depth: int = 30
    t0: int = 1577836800  # 2020-01-01

    def __post_init__(self):
        if self.n_users < 2 or self.n_elites < 1 or self.n_roots < 0:
            raise ValueError("need n_users >= 2, n_elites >= 1, n_roots >= 0")
        for name in ("alpha_sd", "beta_sd", "sigma_r", "sigma_q", "secondary_sd"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("gamma", "cross_boost", "root_center_bias", "mean_retweets", "mean_quotes",
                     "popularity_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (0.0 <= self.depth_prob < 1.0):
            raise ValueError("depth_prob must lie in [0, 1)")
        if not (0.0 <= self.damping <= 1.0):
            raise ValueError("damping must lie in [0, 1]")
        if self.link not in ("logit", "probit"):
            raise ValueError("link must be 'logit' or 'probit'")


def load_config(path):
    """Read a JSON config. Every field must be present; unknown fields are rejected."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return config_from_dict(raw)


def config_from_dict(raw):
    names = [f.name for f in fields(SynthConfig)]
    for name in names:
        if name not in raw:
            raise ValueError(f"config field missing: {name}")
    extra = sorted(set(raw) - set(names))
    if extra:
        raise ValueError(f"unknown config field: {extra[0]}")
    kw = dict(raw)
    for name in ("elite_phi", "user_theta"):
        m = kw[name]
        for key in ("weights", "means", "sds"):
            if key not in m:
                raise ValueError(f"config field missing: {name}.{key}")
        kw[name] = Mixture(tuple(m["weights"]), tuple(m["means"]), tuple(m["sds"]))
    return SynthConfig(**kw)


def config_to_json(cfg: SynthConfig) -> str:
    return json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n"


def _rng(cfg, purpose, index=0):
    return np.random.default_rng([cfg.seed, purpose, index])


@dataclass
class Population:
    user_ids: list
    theta: np.ndarray
    beta: np.ndarray
    elite_ids: list
    phi: np.ndarray
    alpha: np.ndarray

    @property
    def theta_by_user(self):
        return dict(zip(self.user_ids, self.theta.tolist()))

    @property
    def phi_by_elite(self):
        return dict(zip(self.elite_ids, self.phi.tolist()))


def gen_population(cfg: SynthConfig) -> Population:
    ru = _rng(cfg, _POP_USERS)
    re_ = _rng(cfg, _POP_ELITES)
    width = len(str(cfg.n_users))
    users = [f"u{i:0{width}d}" for i in range(cfg.n_users)]
    theta = cfg.user_theta.sample(ru, cfg.n_users)
    beta = ru.normal(cfg.beta_mean, cfg.beta_sd, cfg.n_users)
    ewidth = len(str(cfg.n_elites))
    elites = [f"e{j:0{ewidth}d}" for j in range(cfg.n_elites)]
    phi = cfg.elite_phi.sample(re_, cfg.n_elites)
    alpha = re_.normal(cfg.alpha_mean, cfg.alpha_sd, cfg.n_elites)
    return Population(users, theta, beta, elites, phi, alpha)


def follow_probability(pop: Population, cfg: SynthConfig, rows=slice(None)):
    eta = pop.alpha[None, :] + pop.beta[rows, None] - cfg.gamma * (pop.theta[rows, None] - pop.phi[None, :]) ** 2
    return expit(eta) if cfg.link == "logit" else ndtr(eta)


def gen_follow_matrix(pop: Population, cfg: SynthConfig, chunk=1024) -> FollowMatrix:
    rng = _rng(cfg, _FOLLOWS)
    blocks = []
    for start in range(0, len(pop.user_ids), chunk):
        p = follow_probability(pop, cfg, slice(start, start + chunk))
        blocks.append(sp.csr_matrix((rng.random(p.shape) < p).astype(np.int8)))
    m = sp.vstack(blocks, format="csr") if blocks else sp.csr_matrix((0, len(pop.elite_ids)), dtype=np.int8)
    return FollowMatrix(pop.user_ids, pop.elite_ids, m)


@dataclass
class _TreeDraw:
    root_user: int
    retweeters: list
    quotes: list  # (parent index or -1 for the root, user index, depth)


def _gumbel_top_k(rng, logw, k):
    keys = logw + rng.gumbel(size=logw.size)
    k = min(k, int(np.isfinite(logw).sum()))
    if k <= 0:
        return []
    top = np.argpartition(-keys, k - 1)[:k]
    return top[np.argsort(-keys[top], kind="stable")].tolist()


class _Nearest:
    """Nearest-IP user lookup, skipping one excluded user."""

    def __init__(self, theta):
        self.order = np.argsort(theta, kind="stable")
        self.sorted = theta[self.order]

    def __call__(self, target, exclude):
        i = int(np.searchsorted(self.sorted, target))
        lo, hi = i - 1, i
        n = self.sorted.size
        while True:
            cands = []
            if lo >= 0:
                cands.append((abs(self.sorted[lo] - target), lo))
            if hi < n:
                cands.append((abs(self.sorted[hi] - target), hi))
            _, pos = min(cands)
            u = int(self.order[pos])
            if u != exclude:
                return u
            if pos == lo:
                lo -= 1
            else:
                hi += 1


def _draw_tree(k, cfg, theta, root_logw, nearest):
    rng = _rng(cfg, _TREES, k)
    n = theta.size
    root = int(rng.choice(n, p=root_logw))
    rho = theta[root]
    pop_scale = rng.lognormal(-0.5 * cfg.popularity_sd**2, cfg.popularity_sd)
    d = theta - rho

    logw_r = -(d**2) / (2 * cfg.sigma_r**2)
    logw_r[root] = -np.inf
    retweeters = _gumbel_top_k(rng, logw_r, rng.poisson(cfg.mean_retweets * pop_scale))

    logw_q = -(d**2) / (2 * cfg.sigma_q**2) + cfg.cross_boost * np.abs(d)
    logw_q[root] = -np.inf
    primary = _gumbel_top_k(rng, logw_q, rng.poisson(cfg.mean_quotes * pop_scale))

    quotes = []
    frontier = []
    for u in primary:
        quotes.append((-1, u, 1))
        frontier.append(len(quotes) - 1)
    ip_of = lambda qi: theta[quotes[qi][1]] if qi >= 0 else rho  # noqa: E731
    while frontier:
        nxt = []
        for qi in frontier:
            parent_idx, user, depth = quotes[qi]
            if depth >= cfg.max_depth:
                continue
            while rng.random() < cfg.depth_prob:
                here = theta[user]
                target = here - cfg.damping * (here - ip_of(parent_idx)) + rng.normal(0.0, cfg.secondary_sd)
                quotes.append((qi, nearest(target, exclude=user), depth + 1))
                nxt.append(len(quotes) - 1)
        frontier = nxt
    return _TreeDraw(root, retweeters, quotes)


@dataclass
class SynthForest:
    events: list
    truth_edges: list  # (tweet_id, kind, user_id, root_tweet_id, parent_tweet_id, depth)


def gen_forest(pop: Population, cfg: SynthConfig, threads=1) -> SynthForest:
    theta = np.asarray(pop.theta)
    w = np.exp(-cfg.root_center_bias * theta**2)
    root_p = w / w.sum()
    nearest = _Nearest(theta)

    def draw(k):
        return _draw_tree(k, cfg, theta, root_p, nearest)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            draws = list(pool.map(draw, range(cfg.n_roots)))
    else:
        draws = [draw(k) for k in range(cfg.n_roots)]

    events, truth = [], []
    next_id = 1
    for k, tree in enumerate(draws):
        ts = cfg.t0 + 60 * k
        root_id = str(next_id)
        next_id += 1
        root_user = pop.user_ids[tree.root_user]
        events.append(TweetEvent(root_id, root_user, ts, EventKind.ORIGINAL))
        quote_ids = []
        for parent_idx, u, depth in tree.quotes:
            qid = str(next_id)
            next_id += 1
            parent_id = root_id if parent_idx < 0 else quote_ids[parent_idx]
            quote_ids.append(qid)
            events.append(TweetEvent(qid, pop.user_ids[u], ts + depth, EventKind.QUOTE, parent_id))
            truth.append((qid, "quote", pop.user_ids[u], root_id, parent_id, depth))
        for u in tree.retweeters:
            rid = str(next_id)
            next_id += 1
            events.append(TweetEvent(rid, pop.user_ids[u], ts + 1, EventKind.RETWEET, root_id))
            truth.append((rid, "retweet", pop.user_ids[u], root_id, root_id, 0))
    return SynthForest(events, truth)


def gen_user_stats(pop: Population, cfg: SynthConfig, events):
    """Perimeter statistics: real event counts, log-normal follower counts, all in-language."""
    rng = _rng(cfg, _STATS)
    followers = np.floor(rng.lognormal(5.3, 1.2, len(pop.user_ids))).astype(int)
    authored = dict.fromkeys(pop.user_ids, 0)
    for ev in events:
        authored[ev.user_id] += 1
    return [(u, int(f), authored[u], 1.0) for u, f in zip(pop.user_ids, followers)]


def write_synth(cfg: SynthConfig, out_dir, threads=1):
    """Generate everything and write the synthetic dataset. Returns row counts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pop = gen_population(cfg)
    fm = gen_follow_matrix(pop, cfg)
    forest = gen_forest(pop, cfg, threads=threads)

    (out / "events.jsonl").write_text(serialize_events(forest.events), encoding="utf-8")
    counts = {"events": len(forest.events)}
    coo = fm.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    counts["follows"] = write_csv(
        out / "follows.csv", ["user_id", "elite_id"],
        ([fm.user_ids[coo.row[i]], fm.elite_ids[coo.col[i]]] for i in order),
    )
    counts["elites"] = write_csv(out / "elites.csv", ["elite_id", "phi"], zip(pop.elite_ids, pop.phi.tolist()))
    counts["users"] = write_csv(
        out / "users.csv", ["user_id", "follower_count", "tweet_count", "lang_share"],
        gen_user_stats(pop, cfg, forest.events),
    )
    counts["truth_users"] = write_csv(
        out / "truth_users.csv", ["user_id", "theta", "beta"],
        zip(pop.user_ids, pop.theta.tolist(), pop.beta.tolist()),
    )
    write_csv(out / "truth_elites.csv", ["elite_id", "phi", "alpha"],
              zip(pop.elite_ids, pop.phi.tolist(), pop.alpha.tolist()))
    counts["truth_edges"] = write_csv(
        out / "truth_edges.csv",
        ["tweet_id", "kind", "user_id", "root_tweet_id", "parent_tweet_id", "depth"],
        forest.truth_edges,
    )
    (out / "config.json").write_text(config_to_json(cfg), encoding="utf-8")
    return counts
