"""Exact t-SNE for 2-D visualization of ensemble features.

The O(N^2) textbook algorithm: Gaussian conditional affinities with
per-point bandwidths found by binary search on perplexity, symmetrized;
Student-t (one degree of freedom) affinities in the plane; gradient
descent on KL(P || Q) with early exaggeration and a two-stage momentum
schedule.  No tree acceleration — the inputs here are desk-scale
validation splits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PerplexityUnreachable

_EPS = 1e-12
_SEARCH_ITERS = 64
_SEARCH_TOL = 1e-5
_INIT_STREAM = 0x75E

# adaptive per-coordinate gains of the reference descent; without them a
# learning rate of 200 overshoots badly at small N
_GAIN_UP = 0.2
_GAIN_DOWN = 0.8
_GAIN_MIN = 0.01


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    momentum_switch: int = 250      # iterations at the early momentum
    early_exaggeration: float = 12.0
    exaggeration_until: int = 250   # exaggerated P for this many iterations
    seed: int = 0

    def __post_init__(self):
        if self.perplexity <= 0:
            raise ValueError("perplexity must be positive")
        if self.iterations < 250:
            raise ValueError("iterations must be >= 250")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class Embedding2D:
    coords: np.ndarray      # N x 2
    labels: np.ndarray      # N ints
    final_kl: float
    initial_kl: float       # KL after iteration 1, un-exaggerated objective


def _squared_distances(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def _row_entropy_and_probs(d_row: np.ndarray, beta: float):
    """Shannon entropy (nats) and probabilities of one conditional row."""
    p = np.exp(-d_row * beta)
    total = p.sum()
    if total <= 0:
        return -np.inf, p
    h = np.log(total) + beta * (d_row * p).sum() / total
    return h, p / total


def pairwise_affinities(features: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrized Gaussian affinity matrix P with the target perplexity.

    Each row's bandwidth is found by binary search so that the conditional
    distribution's perplexity (e^entropy) hits the target; rows are then
    symmetrized as P = (P_cond + P_cond^T) / (2N).
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < 4:
        raise ValueError("need at least 4 points")
    if not perplexity < n:
        raise ValueError(f"perplexity {perplexity} must be < N={n}")
    target_h = np.log(perplexity)
    d2 = _squared_distances(x)
    mask = ~np.eye(n, dtype=bool)
    p_cond = np.zeros((n, n))
    for i in range(n):
        d_row = d2[i][mask[i]]
        beta, beta_min, beta_max = 1.0, -np.inf, np.inf
        h, p = _row_entropy_and_probs(d_row, beta)
        for _ in range(_SEARCH_ITERS):
            if abs(h - target_h) < _SEARCH_TOL:
                break
            if h > target_h:
                beta_min = beta
                beta = beta * 2.0 if beta_max == np.inf else (beta + beta_max) / 2.0
            else:
                beta_max = beta
                beta = beta / 2.0 if beta_min == -np.inf else (beta + beta_min) / 2.0
            h, p = _row_entropy_and_probs(d_row, beta)
        else:
            raise PerplexityUnreachable(
                f"row {i}: perplexity {perplexity} not reachable in "
                f"{_SEARCH_ITERS} bisection steps (entropy stuck at "
                f"{np.exp(h):.3f}); duplicate or degenerate points")
        p_cond[i][mask[i]] = p
    p_sym = (p_cond + p_cond.T) / (2.0 * n)
    # contract checks, asserted on every call
    assert np.all(p_sym >= 0.0)
    assert np.allclose(p_sym, p_sym.T)
    assert np.all(np.diag(p_sym) == 0.0)
    assert abs(p_sym.sum() - 1.0) <= 1e-6
    return p_sym


def _student_t_q(y: np.ndarray):
    """Low-dimensional affinities: Q and the unnormalized kernel."""
    num = 1.0 / (1.0 + _squared_distances(y))
    np.fill_diagonal(num, 0.0)
    q = num / num.sum()
    return np.maximum(q, _EPS), num


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    p = np.maximum(p, _EPS)
    return float((p * np.log(p / q)).sum())


def tsne_embed(features: np.ndarray, labels, cfg: TsneConfig = None) -> Embedding2D:
    """Embed features into the plane by gradient descent on KL(P || Q).

    The perplexity is auto-clamped to (N-1)/3.  Fixed seed gives an
    identical embedding, bit for bit.
    """
    cfg = cfg if cfg is not None else TsneConfig()
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < 8:
        raise ValueError(f"need at least 8 points, got {n}")
    perplexity = min(cfg.perplexity, (n - 1) / 3.0)
    p = pairwise_affinities(x, perplexity)
    p_floor = np.maximum(p, _EPS)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        entropy=cfg.seed, spawn_key=(_INIT_STREAM,))))
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    initial_kl = np.nan
    for t in range(1, cfg.iterations + 1):
        p_t = p_floor * cfg.early_exaggeration if t <= cfg.exaggeration_until else p_floor
        q, num = _student_t_q(y)
        w = (p_t - q) * num
        grad = 4.0 * ((np.diag(w.sum(axis=1)) - w) @ y)
        momentum = cfg.momentum_early if t <= cfg.momentum_switch else cfg.momentum_late
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * _GAIN_DOWN, gains + _GAIN_UP)
        np.maximum(gains, _GAIN_MIN, out=gains)
        velocity = momentum * velocity - cfg.learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
        if t == 1:
            initial_kl = kl_divergence(p_floor, _student_t_q(y)[0])
    final_kl = kl_divergence(p_floor, _student_t_q(y)[0])
    assert np.all(np.isfinite(y))
    return Embedding2D(coords=y, labels=np.asarray(labels, dtype=np.int64),
                       final_kl=final_kl, initial_kl=float(initial_kl))
