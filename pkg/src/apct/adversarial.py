"""Token significance from per-channel top-k votes, and the drop masks it drives.

All functions accept an optional leading batch axis: ``T`` may be (n, C) or
(B, n, C), ``counts``/``rates`` (n,) or (B, n).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, CountError

ALPHA = 0.05
BETA = 0.95


@dataclass
class SignificanceRecord:
    counts: np.ndarray
    rates: np.ndarray
    stage: int
    k: int
    gamma: float


def topk_index_bank(T: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest tokens in each channel, largest first.

    Returns a (k, C) integer array (or (B, k, C)). Equal values keep their
    token order, so the smaller index wins a tie.
    """
    T = np.asarray(T)
    n = T.shape[-2]
    if not 1 <= k <= n:
        raise CountError(f"top-k needs 1 <= k <= n, got k={k}, n={n}")
    order = np.argsort(-T, axis=-2, kind="stable")
    return order[..., :k, :]


def significance_counts(bank: np.ndarray, n: int) -> np.ndarray:
    """How often each token index appears in the index bank."""
    bank = np.asarray(bank)
    if bank.size and (bank.min() < 0 or bank.max() >= n):
        raise ContractError(f"index bank holds indices outside 0..{n - 1}")
    if bank.ndim == 2:
        return np.bincount(bank.ravel(), minlength=n)
    flat = bank.reshape(bank.shape[0], -1)
    offsets = np.arange(flat.shape[0])[:, None] * n
    return np.bincount((flat + offsets).ravel(), minlength=n * flat.shape[0]).reshape(flat.shape[0], n)


def map_to_rates(counts: np.ndarray, gamma: float, alpha: float = ALPHA, beta: float = BETA) -> np.ndarray:
    """Per-token drop rate: ``gamma * n * m_j / sum(m)`` clamped to [alpha, beta]."""
    m = np.asarray(counts, dtype=np.float64)
    total = m.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise ContractError("significance counts sum to zero")
    n = m.shape[-1]
    raw = gamma * n * m / total
    return np.where(raw < alpha, alpha, np.where(raw > beta, beta, raw))


def identify(T: np.ndarray, k: int, gamma: float, alpha: float = ALPHA, beta: float = BETA, stage: int = 0):
    bank = topk_index_bank(T, k)
    counts = significance_counts(bank, np.shape(T)[-2])
    return SignificanceRecord(counts, map_to_rates(counts, gamma, alpha, beta), stage, k, gamma)


def sample_drop_entries(rates: np.ndarray, n_queries: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Additive key mask: entry (q, j) is -inf with probability ``rates[j]``.

    Every query row draws its own pattern. A row that drops every key gets
    the key with the lowest rate restored.
    """
    rates = np.asarray(rates, dtype=np.float64)
    if np.any(~(rates >= 0.0) | ~(rates <= 1.0)):
        raise ContractError("drop rates must lie in [0, 1]")
    shape = rates.shape[:-1] + (n_queries, rates.shape[-1])
    dropped = rng.random(shape) < rates[..., None, :]
    full = dropped.all(axis=-1)
    if full.any():
        keep = np.argmin(rates, axis=-1)
        keep = np.broadcast_to(keep[..., None], full.shape)
        rows = np.nonzero(full)
        dropped[rows + (keep[rows],)] = False
    mask = np.zeros(shape, dtype=dtype)
    mask[dropped] = -np.inf
    return mask
