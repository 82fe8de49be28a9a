"""NumPy implementations of the hot kernels (fallback for the compiled core)."""
from __future__ import annotations

import numpy as np

ENTROPY_EPS = 1e-12


def entropy_rows(m: np.ndarray, eps: float = ENTROPY_EPS) -> np.ndarray:
    a = np.abs(np.asarray(m, dtype=np.float64))
    p = a / (a.sum(axis=1, keepdims=True) + eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=1) + 0.0


def round_stats(m: np.ndarray, active: np.ndarray, group: int, eps: float = ENTROPY_EPS):
    """Per block of ``group`` rows: mean entropy over active rows, mean pairwise cosine.

    Blocks without active rows get NaN entropy; blocks with < 2 active rows get
    NaN similarity.
    """
    m = np.asarray(m, dtype=np.float64)
    act = np.asarray(active, dtype=bool).reshape(-1, group)
    nblk = act.shape[0]
    ent = entropy_rows(m, eps).reshape(nblk, group)
    n_act = act.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        h = np.where(n_act > 0, (ent * act).sum(axis=1) / n_act, np.nan)
    norms = np.linalg.norm(m, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    u = (m / safe[:, None]) * ((norms > 0) & act.reshape(-1))[:, None]
    u3 = u.reshape(nblk, group, -1)
    s = u3.sum(axis=1)
    total = (s * s).sum(axis=1)
    diag = (u3 * u3).sum(axis=(1, 2))
    pairs = n_act * (n_act - 1) / 2.0
    with np.errstate(invalid="ignore", divide="ignore"):
        xi = np.where(pairs > 0, 0.5 * (total - diag) / np.where(pairs > 0, pairs, 1.0), np.nan)
    return h, xi


def count_edges(g: np.ndarray, group: int) -> int:
    g3 = np.asarray(g).reshape(-1, group, group)
    off = ~np.eye(group, dtype=bool)
    return int(np.rint(g3[:, off].sum()))


def topk_mask(scores: np.ndarray, active: np.ndarray, k: int) -> np.ndarray:
    """Each active sender keeps its ``k`` best-scoring active receivers (ties: lower index)."""
    n = scores.shape[0]
    act = np.asarray(active, dtype=bool)
    out = np.zeros((n, n))
    for i in range(n):
        if not act[i]:
            continue
        cand = [j for j in range(n) if j != i and act[j]]
        cand.sort(key=lambda j: (-scores[i, j], j))
        out[i, cand[:k]] = 1.0
    return out


def tj_observe(counts, road, pos, route, active, vision: int, n_routes: int) -> np.ndarray:
    """Observation rows: 3-channel local patch, position one-hot, route one-hot, inactive flag."""
    counts = np.asarray(counts)
    d = counts.shape[0]
    n = len(active)
    w = 2 * vision + 1
    patch_len = w * w * 3
    dim = patch_len + d * d + n_routes + 1
    obs = np.zeros((n, dim))
    for a in range(n):
        if not active[a]:
            obs[a, -1] = 1.0
            continue
        r0, c0 = int(pos[a, 0]), int(pos[a, 1])
        k = 0
        for dr in range(-vision, vision + 1):
            for dc in range(-vision, vision + 1):
                r, c = r0 + dr, c0 + dc
                if 0 <= r < d and 0 <= c < d:
                    obs[a, k] = road[r, c]
                    others = counts[r, c] - (1 if (dr == 0 and dc == 0) else 0)
                    obs[a, k + 1] = others
                else:
                    obs[a, k + 2] = 1.0
                k += 3
        obs[a, patch_len + r0 * d + c0] = 1.0
        obs[a, patch_len + d * d + int(route[a])] = 1.0
    return obs
