"""Communication-efficiency metrics (IEI, SEI, TEI) and their building blocks.

Messages are turned into distributions by absolute-value normalization,
``p_k = |m_k| / (sum |m_k| + eps)``.  Similarity is measured on the sent
messages ``m*``.  Inactive agents are masked out of every average.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import gradcore as gc
from . import kernels

LN2 = math.log(2.0)
_LOG_FLOOR = 1e-30
_NORM_FLOOR = 1e-24


@dataclass
class EpochStats:
    epoch: int
    success: float
    entropy: float
    similarity: float
    comm_count: int
    iei: float
    sei: float
    tei: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def message_entropy(m) -> float | np.ndarray:
    """Entropy in bits of one message (1-D) or of each row of a matrix."""
    a = np.asarray(m, dtype=np.float64)
    if a.size == 0:
        raise ValueError("message must be non-empty")
    if a.ndim == 1:
        return float(kernels.entropy_rows(a.reshape(1, -1))[0])
    return kernels.entropy_rows(a)


def _stack(round_states):
    if not round_states:
        return None
    group = round_states[0].group
    m = np.concatenate([rs.m_star for rs in round_states], axis=0)
    active = np.concatenate([np.asarray(rs.active, dtype=bool) for rs in round_states])
    return m, active, group


def round_means(round_states):
    """Per (step, round) block: mean active entropy and mean pairwise cosine (NaN if undefined)."""
    stacked = _stack(round_states)
    if stacked is None:
        return np.zeros(0), np.zeros(0)
    return kernels.round_stats(*stacked)


def epoch_entropy(round_states) -> float:
    h, _ = round_means(round_states)
    h = h[~np.isnan(h)]
    if h.size == 0:
        raise ValueError("epoch has no round with an active agent")
    return float(h.mean())


def pairwise_similarity(round_states) -> float:
    _, xi = round_means(round_states)
    xi = xi[~np.isnan(xi)]
    if xi.size == 0:
        raise ValueError("epoch has no round with two or more active agents")
    return float(xi.mean())


def comm_count(round_states) -> int:
    return sum(kernels.count_edges(rs.G, rs.group) for rs in round_states)


def compute_cems(success: float, entropy: float, similarity: float, comm: int, threshold: float = 0.05):
    """Returns ``(iei, sei, tei)``; ``tei`` is ``None`` when nothing was sent."""
    if not 0.0 <= success <= 1.0:
        raise ValueError(f"success rate must lie in [0, 1], got {success}")
    s_eff = max(success, threshold)
    tei = None if comm == 0 else success / comm
    return entropy / s_eff, similarity / s_eff, tei


def epoch_stats(epoch: int, successes, round_states, threshold: float = 0.05) -> EpochStats:
    successes = list(successes)
    s = float(np.mean(successes)) if successes else 0.0
    h_blocks, xi_blocks = round_means(round_states)
    h_blocks = h_blocks[~np.isnan(h_blocks)]
    xi_blocks = xi_blocks[~np.isnan(xi_blocks)]
    # epochs without communication report zero entropy/similarity
    h = float(h_blocks.mean()) if h_blocks.size else 0.0
    xi = float(xi_blocks.mean()) if xi_blocks.size else 0.0
    c = comm_count(round_states)
    iei, sei, tei = compute_cems(s, h, xi, c, threshold)
    return EpochStats(epoch, s, h, xi, c, iei, sei, tei)


# ---------------------------------------------------------------------------
# differentiable counterparts used by the augmented loss


def _block_weights(active: np.ndarray, group: int, min_active: int):
    act = np.asarray(active, dtype=bool).reshape(-1, group)
    n_act = act.sum(axis=1)
    return act, n_act, n_act >= min_active


def entropy_term(messages, round_states):
    """Graph-valued epoch entropy: mean over valid blocks of mean active-row entropy."""
    rows, weights = [], []
    n_valid = 0
    for msg, rs in zip(messages, round_states):
        act, n_act, valid = _block_weights(rs.active, rs.group, 1)
        w = np.where(valid[:, None], act / np.maximum(n_act, 1)[:, None], 0.0).reshape(-1, 1)
        n_valid += int(valid.sum())
        rows.append(msg)
        weights.append(w)
    if n_valid == 0:
        return None
    total = None
    for msg, w in zip(rows, weights):
        a = gc.abs_(msg)
        p = a / (gc.sum_(a, axis=1) + kernels.ENTROPY_EPS)
        ent = gc.sum_(p * gc.log(p + _LOG_FLOOR), axis=1) * (-1.0 / LN2)
        part = gc.sum_(ent * w)
        total = part if total is None else total + part
    return total * (1.0 / n_valid)


def similarity_term(messages, round_states):
    """Graph-valued epoch similarity: mean over valid blocks of mean pairwise cosine."""
    n_valid = sum(int(_block_weights(rs.active, rs.group, 2)[2].sum()) for rs in round_states)
    if n_valid == 0:
        return None
    total = None
    for msg, rs in zip(messages, round_states):
        act, n_act, valid = _block_weights(rs.active, rs.group, 2)
        nblk, n = act.shape
        norm = gc.sqrt(gc.sum_(msg * msg, axis=1) + _NORM_FLOOR)
        u = (msg / norm) * act.reshape(-1, 1).astype(float)
        pool = np.zeros((nblk, nblk * n))
        pool[np.repeat(np.arange(nblk), n), np.arange(nblk * n)] = 1.0
        s = pool @ u
        block_total = gc.sum_(s * s, axis=1)
        block_diag = pool @ gc.sum_(u * u, axis=1)
        pairs = n_act * (n_act - 1) / 2.0
        c = np.where(valid, 0.5 / np.maximum(pairs, 1.0), 0.0).reshape(-1, 1)
        part = gc.sum_((block_total - block_diag) * c)
        total = part if total is None else total + part
    return total * (1.0 / n_valid)
