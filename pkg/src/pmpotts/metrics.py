"""Turning chains into decisions and scores."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .samplers import ChainTrace


@dataclass
class SelectionResult:
    selected: np.ndarray
    frequencies: np.ndarray
    vd: dict | None = None


def _tie_low_argmax(rows: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximiser, i.e. the smaller order
    return np.argmax(rows, axis=1).astype(np.int64)


def modal_select(trace, n_states: int | None = None, burn_in: int = 0) -> SelectionResult:
    """Per-node most frequent model order, ties to the smaller order.

    ``trace`` is a :class:`ChainTrace` or an ``(n_iter, n_nodes)`` array of
    fields.  For a trace the counts gathered during the run are used unless a
    ``burn_in`` is requested here.
    """
    if isinstance(trace, ChainTrace):
        D = trace.n_states
        if burn_in:
            counts = _count_fields(trace.fields()[burn_in:], D)
        else:
            counts = trace.counts
    else:
        fields = np.asarray(trace, dtype=np.int64)
        if fields.ndim == 1:
            fields = fields[None, :]
        D = n_states if n_states is not None else int(fields.max()) + 1
        counts = _count_fields(fields[burn_in:], D)
    total = counts.sum(axis=1, keepdims=True)
    if total.size == 0 or (total == 0).any():
        raise ValueError("modal selection needs a non-empty trace")
    freqs = counts / total
    return SelectionResult(_tie_low_argmax(counts), freqs)


def _count_fields(fields: np.ndarray, D: int) -> np.ndarray:
    n, V = fields.shape
    counts = np.zeros((V, D), dtype=np.int64)
    for m in range(D):
        counts[:, m] = np.count_nonzero(fields == m, axis=0)
    return counts


def percent_correct(selected, truth) -> float:
    a, b = np.asarray(selected), np.asarray(truth)
    if a.shape != b.shape:
        raise ValueError(f"field shapes differ: {a.shape} vs {b.shape}")
    return 100.0 * np.count_nonzero(a == b) / a.size


def derived_means(trace: ChainTrace) -> np.ndarray:
    """Average of the per-estimate posterior means gathered during a run; NaN where none."""
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(trace.derived_count > 0, trace.derived_sum / np.maximum(trace.derived_count, 1), np.nan)


def vd_maps(frequencies: np.ndarray, means: np.ndarray, mode: str = "model-averaged") -> np.ndarray:
    """V_D image from model-order frequencies and per-(node, order) posterior means.

    ``model-averaged`` weights the conditional means by the frequencies;
    ``posterior-modal`` takes the mean under the modal order.  Orders with
    zero frequency may have missing means.
    """
    freqs = np.asarray(frequencies, dtype=float)
    mu = np.asarray(means, dtype=float)
    if freqs.shape != mu.shape:
        raise ValueError("frequency and mean arrays must both be (nodes, orders)")
    if mode == "model-averaged":
        need = freqs > 0
        if np.isnan(mu[need]).any():
            raise ValueError("missing posterior summaries for a visited model order")
        return np.where(need, freqs * np.nan_to_num(mu), 0.0).sum(axis=1)
    if mode == "posterior-modal":
        sel = _tie_low_argmax(freqs)
        out = mu[np.arange(len(sel)), sel]
        if np.isnan(out).any():
            raise ValueError("missing posterior summaries for a modal order")
        return out
    raise ValueError(f"unknown V_D mode {mode!r}")


def independent_frequencies(log_z: np.ndarray) -> np.ndarray:
    """Per-node posterior model probabilities under a uniform order prior."""
    lz = np.asarray(log_z, dtype=float)
    w = np.exp(lz - lz.max(axis=1, keepdims=True))
    return w / w.sum(axis=1, keepdims=True)


def rmse(estimate, truth) -> float:
    a, b = np.asarray(estimate, dtype=float), np.asarray(truth, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"map shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def selection_bound(delta: float, sigma_star: float, m_count: int) -> float:
    """Lower bound on the probability that argmax of noisy evidences is correct.

    ``1 - (m_count - 1) / (1 + delta**2 / (2 sigma_star**2))``; may be negative.
    """
    if not delta > 0 or not sigma_star > 0:
        raise ValueError("delta and sigma_star must be positive")
    if int(m_count) < 2:
        raise ValueError("need at least two models")
    return 1.0 - (int(m_count) - 1) / (1.0 + delta**2 / (2.0 * sigma_star**2))


def argmax_frequency(delta: float, sigma_star: float, m_count: int, draws: int,
                     rng: np.random.Generator) -> float:
    """Monte Carlo frequency of a correct argmax when the true model leads every rival by ``delta``."""
    means = np.zeros(m_count)
    means[0] = delta
    z = means + sigma_star * rng.standard_normal((draws, m_count))
    return float(np.mean(np.argmax(z, axis=1) == 0))


# --- map files -------------------------------------------------------------

def write_map_csv(path, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "value"])
        for v, x in enumerate(np.asarray(values).ravel()):
            w.writerow([v, repr(float(x)) if isinstance(x, (float, np.floating)) else x])


def read_map_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.DictReader(ln for ln in fh if not ln.startswith("#"))
        rows = [(int(r["node"]), r["value"]) for r in reader]
    rows.sort()
    if [v for v, _ in rows] != list(range(len(rows))):
        raise ValueError(f"{path}: nodes are not 0..n-1")
    return np.array([float(x) for _, x in rows])


def write_pgm(path, grid, levels: int | None = None, vmin: float | None = None,
              vmax: float | None = None) -> None:
    """8-bit binary PGM preview.

    With ``levels`` the grid holds order indices ``0..levels-1`` mapped to
    evenly spaced grays; otherwise values are scaled linearly to ``[vmin, vmax]``.
    """
    g = np.asarray(grid, dtype=float)
    if g.ndim != 2:
        raise ValueError("PGM output needs a 2-D grid")
    if levels is not None:
        pix = np.round(g * 255.0 / max(levels - 1, 1))
    else:
        lo = np.nanmin(g) if vmin is None else vmin
        hi = np.nanmax(g) if vmax is None else vmax
        span = hi - lo if hi > lo else 1.0
        pix = np.round(255.0 * (np.nan_to_num(g, nan=lo) - lo) / span)
    pix = np.clip(pix, 0, 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def mean_and_se(values) -> tuple[float, float]:
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        return float(x.mean()) if x.size else math.nan, math.nan
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))
