"""Anchored ideal-point estimation from a user x elite follow matrix.

Each user ``i`` follows elite ``j`` with probability
``sigmoid(alpha_j + beta_i - gamma * (theta_i - phi_j) ** 2)``. Elite
positions ``phi`` are fixed anchors, elite intercepts ``alpha`` are set once
from empirical follow rates, and every user's ``(theta, beta)`` is then a
separate two-parameter MAP problem under Gaussian priors, solved by damped
Newton with multiple starts.
"""

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from ._util import id_key, read_csv, write_csv

logger = logging.getLogger(__name__)

CENTER_BAND = 1.0 / 3.0
IP_CLASSES = ("left", "center", "right")


class InsufficientEvidence(ValueError):
    """User follows fewer elites than the model requires."""


@dataclass(frozen=True)
class EliteAnchor:
    elite_id: str
    phi: float
    alpha: float = float("nan")


@dataclass(frozen=True)
class IpModelConfig:
    gamma: float = 1.0
    prior_sd_theta: float = 1.0
    prior_sd_beta: float = 2.0
    prior_mean_theta: float = 0.0
    min_elites: int = 10
    max_iters: int = 100
    tol: float = 1e-8
    starts: tuple = (-2.0, 0.0, 2.0)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if not (self.prior_sd_theta > 0 and self.prior_sd_beta > 0):
            raise ValueError("prior standard deviations must be > 0")


@dataclass(frozen=True)
class IdealPointEstimate:
    user_id: str
    theta: float
    beta: float
    n_elites_followed: int
    converged: bool
    neg_log_posterior: float


class FollowMatrix:
    """Binary users x elites matrix in CSR form with id lookups."""

    def __init__(self, user_ids, elite_ids, matrix):
        self.user_ids = list(user_ids)
        self.elite_ids = list(elite_ids)
        self.matrix = sp.csr_matrix(matrix, dtype=np.int8)
        if self.matrix.shape != (len(self.user_ids), len(self.elite_ids)):
            raise ValueError("matrix shape does not match id lists")
        if self.matrix.nnz and (self.matrix.data != 1).any():
            raise ValueError("follow matrix entries must be 0/1")
        self.user_index = {u: i for i, u in enumerate(self.user_ids)}
        self.elite_index = {e: j for j, e in enumerate(self.elite_ids)}

    @classmethod
    def from_edges(cls, edges, elite_ids=None):
        """Build from ``(user_id, elite_id)`` pairs; duplicate pairs collapse.

        Edges pointing to an elite outside ``elite_ids`` raise.
        """
        edges = list(edges)
        if elite_ids is None:
            elite_ids = sorted({e for _, e in edges}, key=id_key)
        elite_index = {e: j for j, e in enumerate(elite_ids)}
        user_ids = sorted({u for u, _ in edges}, key=id_key)
        user_index = {u: i for i, u in enumerate(user_ids)}
        pairs = set()
        for u, e in edges:
            if e not in elite_index:
                raise ValueError(f"follow edge to unknown elite {e!r}")
            pairs.add((user_index[u], elite_index[e]))
        rows = np.fromiter((p[0] for p in pairs), dtype=np.int64, count=len(pairs))
        cols = np.fromiter((p[1] for p in pairs), dtype=np.int64, count=len(pairs))
        m = sp.csr_matrix(
            (np.ones(len(pairs), dtype=np.int8), (rows, cols)), shape=(len(user_ids), len(elite_ids))
        )
        return cls(user_ids, elite_ids, m)

    @property
    def follows_per_user(self):
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    @property
    def followers_per_elite(self):
        return np.asarray(self.matrix.sum(axis=0)).ravel()

    def row(self, user_id):
        i = self.user_index[user_id]
        return self.matrix[i].toarray().ravel().astype(float)


def fit_elite_intercepts(matrix: FollowMatrix):
    """Smoothed empirical log-odds of being followed, one per elite."""
    n = matrix.matrix.shape[0]
    followers = matrix.followers_per_elite.astype(float)
    empty = [matrix.elite_ids[j] for j in np.flatnonzero(followers == 0)]
    if empty:
        warnings.warn(f"{len(empty)} elite(s) without followers, e.g. {empty[0]!r}", stacklevel=2)
    p = (followers + 0.5) / (n + 1.0)
    return np.log(p / (1.0 - p))


def log_posterior(theta, beta, y, alpha, phi, cfg: IpModelConfig, derivatives=True):
    """Log-posterior of one or many users, with gradient and Hessian.

    ``theta``/``beta`` have shape ``(U,)``, ``y`` is ``(U, J)``. Returns
    ``value (U,)`` and, when asked, ``grad (U, 2)`` and ``hess (U, 2, 2)``
    ordered ``(theta, beta)``.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    y = np.atleast_2d(y)
    diff = theta[:, None] - phi[None, :]
    eta = alpha[None, :] + beta[:, None] - cfg.gamma * diff**2
    s_t2 = cfg.prior_sd_theta**2
    s_b2 = cfg.prior_sd_beta**2
    dt = theta - cfg.prior_mean_theta
    value = (y * eta - np.logaddexp(0.0, eta)).sum(axis=1) - dt**2 / (2 * s_t2) - beta**2 / (2 * s_b2)
    if not derivatives:
        return value
    p = expit(eta)
    r = y - p
    w = p * (1.0 - p)
    d_eta_dtheta = -2.0 * cfg.gamma * diff
    grad = np.empty((theta.size, 2))
    grad[:, 0] = (r * d_eta_dtheta).sum(axis=1) - dt / s_t2
    grad[:, 1] = r.sum(axis=1) - beta / s_b2
    hess = np.empty((theta.size, 2, 2))
    hess[:, 0, 0] = (-w * d_eta_dtheta**2 - 2.0 * cfg.gamma * r).sum(axis=1) - 1.0 / s_t2
    hess[:, 0, 1] = hess[:, 1, 0] = (-w * d_eta_dtheta).sum(axis=1)
    hess[:, 1, 1] = -w.sum(axis=1) - 1.0 / s_b2
    return value, grad, hess


def _newton(y, alpha, phi, cfg, theta, beta):
    """Vectorised damped Newton ascent from the given starting points.

    The Hessian is shifted until negative definite so every step is an
    ascent direction; a backtracking line search enforces sufficient
    increase. Returns theta, beta, value, converged.
    """
    theta = theta.astype(float).copy()
    beta = beta.astype(float).copy()
    value, grad, hess = log_posterior(theta, beta, y, alpha, phi, cfg)
    done = np.linalg.norm(grad, axis=1) < cfg.tol
    for _ in range(cfg.max_iters):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        g = grad[active]
        a = -hess[active, 0, 0]
        b = -hess[active, 0, 1]
        c = -hess[active, 1, 1]
        # smallest eigenvalue of the 2x2 negated Hessian
        lam_min = 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b**2)
        shift = np.where(lam_min < 1e-6, 1e-6 - lam_min + 1e-3 * np.abs(lam_min), 0.0)
        a = a + shift
        c = c + shift
        det = a * c - b * b
        step_t = (c * g[:, 0] - b * g[:, 1]) / det
        step_b = (a * g[:, 1] - b * g[:, 0]) / det
        slope = g[:, 0] * step_t + g[:, 1] * step_b
        # predicted gain below float resolution of the objective: take the full step
        tiny = slope <= 1e-12 * (1.0 + np.abs(value[active]))
        t = np.ones(active.size)
        pending = ~tiny
        for _ in range(40):
            idx = np.flatnonzero(pending)
            if idx.size == 0:
                break
            sub = active[idx]
            v = log_posterior(theta[sub] + t[idx] * step_t[idx], beta[sub] + t[idx] * step_b[idx],
                              y[sub], alpha, phi, cfg, derivatives=False)
            ok = v >= value[sub] + 1e-4 * t[idx] * slope[idx]
            pending[idx[ok]] = False
            t[idx[~ok]] *= 0.5
        moved = ~pending
        sub = active[moved]
        theta[sub] += t[moved] * step_t[moved]
        beta[sub] += t[moved] * step_b[moved]
        if sub.size:
            value[sub], grad[sub], hess[sub] = log_posterior(theta[sub], beta[sub], y[sub], alpha, phi, cfg)
        done[sub] = np.linalg.norm(grad[sub], axis=1) < cfg.tol
        # line search exhausted: give up on these starts, reported as not converged
        done[active[pending]] = True
    converged = np.linalg.norm(grad, axis=1) < cfg.tol
    return theta, beta, value, converged


def fit_block(y, alpha, phi, cfg: IpModelConfig):
    """Multi-start MAP fit for a dense block of user rows; best posterior wins."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n = y.shape[0]
    best = None
    for start in cfg.starts:
        res = _newton(y, alpha, phi, cfg, np.full(n, start + cfg.prior_mean_theta), np.zeros(n))
        if best is None:
            best = [np.array(r, copy=True) for r in res]
            continue
        better = res[2] > best[2]
        for k in range(4):
            best[k][better] = res[k][better]
    return best


def fit_user_ip(row, elites: Sequence[EliteAnchor], cfg: IpModelConfig = IpModelConfig(), user_id=""):
    """Fit one user given the set of elite ids they follow (or a 0/1 vector)."""
    phi = np.array([e.phi for e in elites], dtype=float)
    alpha = np.array([e.alpha for e in elites], dtype=float)
    if not np.isfinite(alpha).all():
        raise ValueError("elite intercepts must be fitted before user ideal points")
    if isinstance(row, (set, frozenset, list, tuple)) and not all(isinstance(v, (int, float)) for v in row):
        index = {e.elite_id: j for j, e in enumerate(elites)}
        y = np.zeros(len(elites))
        for eid in row:
            if eid in index:
                y[index[eid]] = 1.0
    else:
        y = np.asarray(row, dtype=float)
    k = int(y.sum())
    if k < cfg.min_elites:
        raise InsufficientEvidence(f"user {user_id!r} follows {k} elites, needs {cfg.min_elites}")
    theta, beta, value, conv = fit_block(y[None, :], alpha, phi, cfg)
    return IdealPointEstimate(user_id, float(theta[0]), float(beta[0]), k, bool(conv[0]), float(-value[0]))


def fit_ideal_points(matrix: FollowMatrix, phi_by_elite, cfg: IpModelConfig = IpModelConfig(),
                     threads=1, chunk=512):
    """Two-stage fit over a whole follow matrix.

    Returns ``(estimates, anchors)``; estimates are sorted by user id and
    only cover users following at least ``cfg.min_elites`` elites.
    """
    missing = [e for e in matrix.elite_ids if e not in phi_by_elite]
    if missing:
        raise ValueError(f"no valence for elite {missing[0]!r}")
    phi = np.array([phi_by_elite[e] for e in matrix.elite_ids], dtype=float)
    if not np.isfinite(phi).all():
        raise ValueError("elite valences must be finite")
    alpha = fit_elite_intercepts(matrix)
    anchors = [EliteAnchor(e, float(p), float(a)) for e, p, a in zip(matrix.elite_ids, phi, alpha)]

    counts = matrix.follows_per_user
    eligible = np.flatnonzero(counts >= cfg.min_elites)
    blocks = [eligible[i:i + chunk] for i in range(0, eligible.size, chunk)]

    def run(rows):
        return fit_block(matrix.matrix[rows].toarray(), alpha, phi, cfg)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, blocks))
    else:
        results = [run(b) for b in blocks]

    estimates = []
    for rows, (theta, beta, value, conv) in zip(blocks, results):
        for k, i in enumerate(rows):
            estimates.append(IdealPointEstimate(
                matrix.user_ids[i], float(theta[k]), float(beta[k]), int(counts[i]),
                bool(conv[k]), float(-value[k]),
            ))
    n_bad = sum(not e.converged for e in estimates)
    if n_bad:
        logger.warning("%d of %d ideal-point fits did not converge", n_bad, len(estimates))
    estimates.sort(key=lambda e: id_key(e.user_id))
    return estimates, anchors


def classify_ip(theta):
    if not math.isfinite(theta):
        raise ValueError("theta must be finite")
    if theta < -CENTER_BAND:
        return "left"
    if theta > CENTER_BAND:
        return "right"
    return "center"


def silverman_bandwidth(x):
    x = np.asarray(x, dtype=float)
    sd = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    if spread <= 0:
        spread = 1.0  # all points equal; any positive width keeps the density finite
    return 0.9 * spread * x.size ** (-0.2)


def kde_grid(lo=-3.5, hi=3.5, step=0.01):
    n = int(round((hi - lo) / step))
    return lo + step * np.arange(n + 1)


def gaussian_kde(x, grid=None):
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        raise ValueError("need >=2 points for a density estimate")
    grid = kde_grid() if grid is None else grid
    h = silverman_bandwidth(x)
    z = (grid[:, None] - x[None, :]) / h
    return np.exp(-0.5 * z**2).sum(axis=1) / (x.size * h * math.sqrt(2 * math.pi))


def ecdf(x):
    """Exact ECDF as ``(sorted unique values, cumulative fraction)``."""
    x = np.sort(np.asarray(x, dtype=float))
    vals, counts = np.unique(x, return_counts=True)
    return vals, np.cumsum(counts) / x.size


def ip_report(estimates, root_user_ids=()):
    """Density and ECDF tables for all users and for tree-root users.

    ``estimates`` is a list of :class:`IdealPointEstimate` or a
    ``{user_id: theta}`` mapping.

    Returns rows ``(group, kind, x, y)``. The root group is left out when it
    has fewer than two users with an estimate (only its ECDF is kept if it
    has exactly one).
    """
    if isinstance(estimates, dict):
        theta = dict(estimates)
    else:
        theta = {e.user_id: e.theta for e in estimates}
    if len(theta) < 2:
        raise ValueError("need >=2 points for an ideal-point report")
    roots = set(root_user_ids)
    groups = [("all", np.array([theta[u] for u in sorted(theta, key=id_key)]))]
    root_vals = np.array([theta[u] for u in sorted(roots & theta.keys(), key=id_key)])
    if root_vals.size:
        groups.append(("roots", root_vals))
    grid = kde_grid()
    rows = []
    for name, vals in groups:
        if vals.size >= 2:
            rows.extend((name, "kde", gx, gy) for gx, gy in zip(grid, gaussian_kde(vals, grid)))
        xs, ys = ecdf(vals)
        rows.extend((name, "ecdf", ex, ey) for ex, ey in zip(xs, ys))
    return rows


def read_elites(path):
    out = {}
    for i, r in enumerate(read_csv(path, ["elite_id", "phi"]), start=2):
        try:
            phi = float(r["phi"])
        except ValueError:
            raise ValueError(f"{path}:{i}: bad phi {r['phi']!r}") from None
        if not math.isfinite(phi):
            raise ValueError(f"{path}:{i}: non-finite phi")
        if r["elite_id"] in out:
            raise ValueError(f"{path}:{i}: duplicate elite {r['elite_id']!r}")
        out[r["elite_id"]] = phi
    return out


def read_follows(path):
    return [(r["user_id"], r["elite_id"]) for r in read_csv(path, ["user_id", "elite_id"])]


def write_estimates(path, estimates):
    return write_csv(
        path,
        ["user_id", "theta", "beta", "n_elites", "converged"],
        ([e.user_id, e.theta, e.beta, e.n_elites_followed, e.converged] for e in estimates),
    )


def read_ip_map(path):
    """Read an estimates CSV into ``{user_id: theta}``."""
    out = {}
    for i, r in enumerate(read_csv(path, ["user_id", "theta"]), start=2):
        v = float(r["theta"])
        if not math.isfinite(v):
            raise ValueError(f"{path}:{i}: non-finite theta")
        out[r["user_id"]] = v
    return out
