"""Ranking conventions, evaluation metrics and differentiable ranking losses.

A ranking is stored as ``positions``: ``positions[i]`` is the 0-based rank of
item ``i`` (0 = best). Scores are oriented so that a higher score means a
better position.

The losses accept a single task (1-d arrays) or a batch of equal-size tasks
(arrays of shape ``(B, n)``) and return a value per task plus the gradient
with respect to the scores.
"""

from __future__ import annotations

import numpy as np


def _as_scores(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    return s


def _as_ranking(pi) -> np.ndarray:
    return np.asarray(pi, dtype=np.int64)


def is_permutation(pi) -> bool:
    pi = np.asarray(pi)
    return pi.ndim == 1 and np.array_equal(np.sort(pi), np.arange(len(pi)))


def ordering(pi) -> np.ndarray:
    """Inverse permutation: item index at each position."""
    return np.argsort(_as_ranking(pi), axis=-1, kind="stable")


def rank_from_scores(s) -> np.ndarray:
    """Positions induced by scores; exact ties go to the lower item index."""
    s = _as_scores(s)
    if s.shape[-1] == 0:
        raise ValueError("cannot rank an empty score vector")
    order = np.argsort(-s, axis=-1, kind="stable")
    positions = np.empty_like(order)
    np.put_along_axis(positions, order, np.broadcast_to(np.arange(s.shape[-1]), s.shape), axis=-1)
    return positions


def _pair_mask(pi: np.ndarray) -> np.ndarray:
    # mask[..., i, j] is True when item i is ranked above item j
    return pi[..., :, None] < pi[..., None, :]


def _check_pair(pi, s, min_n=2):
    pi, s = _as_ranking(pi), _as_scores(s)
    if pi.shape != s.shape:
        raise ValueError(f"ranking shape {pi.shape} does not match scores {s.shape}")
    n = s.shape[-1]
    if n < min_n:
        raise ValueError(f"need at least {min_n} items, got {n}")
    return pi, s, n


def zero_one_rank_loss(pi, s):
    """Normalized fraction of discordant pairs; tied scores count one half."""
    pi, s, n = _check_pair(pi, s)
    mask = _pair_mask(pi)
    si, sj = s[..., :, None], s[..., None, :]
    terms = np.where(mask, (si < sj) + 0.5 * (si == sj), 0.0)
    out = terms.sum(axis=(-2, -1)) * 2.0 / (n * (n - 1))
    return out if out.ndim else float(out)


def ranking_accuracy(pi, s):
    return 1.0 - zero_one_rank_loss(pi, s)


def zero_one_accuracy(pi, tau):
    pi, tau = _as_ranking(pi), _as_ranking(tau)
    if pi.shape != tau.shape:
        raise ValueError("rankings have different lengths")
    out = np.all(pi == tau, axis=-1).astype(np.int64)
    return out if out.ndim else int(out)


def spearman(pi, tau):
    pi, tau = _as_ranking(pi), _as_ranking(tau)
    if pi.shape != tau.shape:
        raise ValueError("rankings have different lengths")
    n = pi.shape[-1]
    if n < 2:
        raise ValueError("Spearman correlation needs at least 2 items")
    d2 = ((pi - tau).astype(np.float64) ** 2).sum(axis=-1)
    out = 1.0 - 6.0 * d2 / (n * (n * n - 1))
    return out if out.ndim else float(out)


def _finish(value, grad):
    if value.ndim == 0:
        return float(value), grad
    return value, grad


def hinge_rank_loss(pi, s):
    """Pairwise hinge surrogate, an upper bound of ``zero_one_rank_loss``.

    Each pair (i above j) contributes ``max(1 - (s_i - s_j), 0)``; the
    subgradient of the hinge at its kink is taken as 0.
    """
    pi, s, n = _check_pair(pi, s)
    mask = _pair_mask(pi)
    margin = 1.0 - (s[..., :, None] - s[..., None, :])
    active = mask & (margin > 0.0)
    norm = 2.0 / (n * (n - 1))
    value = np.where(active, margin, 0.0).sum(axis=(-2, -1)) * norm
    a = active.astype(np.float64)
    grad = (a.sum(axis=-2) - a.sum(axis=-1)) * norm
    return _finish(value, grad)


def _pl_stages(pi, s, stages: int):
    """Top-``stages`` Plackett-Luce negative log-likelihood and gradient."""
    n = s.shape[-1]
    order = ordering(pi)
    so = np.take_along_axis(s, order, axis=-1)
    if stages <= 0:
        return np.zeros(s.shape[:-1]), np.zeros_like(s)
    # log-sum-exp over the suffix starting at each position, max-shifted
    suffix = np.flip(np.logaddexp.accumulate(np.flip(so, axis=-1), axis=-1), axis=-1)
    lse = suffix[..., :stages]
    value = (lse - so[..., :stages]).sum(axis=-1)
    # probs[..., i, k]: probability of picking position k at stage i
    pos = np.arange(n)
    live = pos[None, :] >= np.arange(stages)[:, None]
    probs = np.where(live, np.exp(np.minimum(so[..., None, :] - lse[..., :, None], 0.0)), 0.0)
    grad_sorted = probs.sum(axis=-2)
    grad_sorted[..., :stages] -= 1.0
    grad = np.empty_like(s)
    np.put_along_axis(grad, order, grad_sorted, axis=-1)
    return value, grad


def pl_loss(pi, s):
    """Plackett-Luce negative log-likelihood of ``pi`` under scores ``s``."""
    pi, s, n = _check_pair(pi, s, min_n=1)
    return _finish(*_pl_stages(pi, s, n - 1))


def listnet_topk_loss(s, pi, k: int = 3):
    """Plackett-Luce likelihood truncated to the first ``min(k, n - 1)`` positions."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    pi, s, n = _check_pair(pi, s, min_n=1)
    return _finish(*_pl_stages(pi, s, min(k, n - 1)))


def ranknet_loss(s, pi):
    """Mean pairwise logistic loss ``softplus(-(s_i - s_j))`` over pairs i above j."""
    pi, s, n = _check_pair(pi, s)
    mask = _pair_mask(pi)
    diff = s[..., :, None] - s[..., None, :]
    n_pairs = n * (n - 1) / 2.0
    value = np.where(mask, np.logaddexp(0.0, -diff), 0.0).sum(axis=(-2, -1)) / n_pairs
    # d/d diff softplus(-diff) = -sigmoid(-diff)
    w = np.where(mask, -0.5 * (1.0 - np.tanh(diff / 2.0)), 0.0) / n_pairs
    grad = w.sum(axis=-1) - w.sum(axis=-2)
    return _finish(value, grad)
