"""Potts prior over model-order fields on a lattice.

A field is a flat integer array of state indices (``0 .. D-1``), one per node,
aligned with the row-major node numbering of :class:`LatticeGraph`.  State
labels (``'A'``, ``'B'`` or compartment counts) live in :class:`PottsParams`.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .lattice import LatticeGraph, read_grid, write_grid

MAX_ENUMERATION = 2**20


class CapacityError(ValueError):
    """Raised when exact enumeration would exceed the configured size guard."""


@dataclass(frozen=True)
class PottsParams:
    J: float
    states: tuple

    def __post_init__(self):
        if not self.J >= 0:
            raise ValueError(f"coupling constant must be non-negative, got {self.J}")
        if len(self.states) < 2:
            raise ValueError("a Potts model needs at least two states")
        object.__setattr__(self, "states", tuple(self.states))

    @property
    def D(self) -> int:
        return len(self.states)


def agreements(field: np.ndarray, graph: LatticeGraph) -> int:
    """Number of edges whose endpoints carry the same state."""
    f = np.asarray(field)
    e = graph.edges
    return int(np.count_nonzero(f[e[:, 0]] == f[e[:, 1]]))


def log_prior_unnorm(field: np.ndarray, params: PottsParams, graph: LatticeGraph) -> float:
    """``J`` times the number of agreeing neighbour pairs."""
    return params.J * agreements(field, graph)


def neighbor_counts(v: int, field: np.ndarray, graph: LatticeGraph, D: int) -> np.ndarray:
    row = graph.nbr[v]
    return np.bincount(np.asarray(field)[row[row >= 0]], minlength=D)


def full_conditional(v: int, field: np.ndarray, params: PottsParams, graph: LatticeGraph) -> np.ndarray:
    """Probability of each state at ``v`` given all other nodes."""
    logits = params.J * neighbor_counts(v, field, graph, params.D)
    logits = logits - logits.max()
    p = np.exp(logits)
    return p / p.sum()


def log_prior_ratio(field: np.ndarray, v: int, new_state: int, params: PottsParams,
                    graph: LatticeGraph) -> float:
    """log p(field with v -> new_state) - log p(field), touching only v's neighbours."""
    row = graph.nbr[v]
    nb = np.asarray(field)[row[row >= 0]]
    delta = int(np.count_nonzero(nb == new_state)) - int(np.count_nonzero(nb == field[v]))
    return params.J * delta


@numba.njit(cache=True)
def _gibbs_sweep_kernel(field, nbr, J, D, u):
    n = field.shape[0]
    w = np.empty(D)
    for v in range(n):
        for m in range(D):
            w[m] = 0.0
        for k in range(nbr.shape[1]):
            nb = nbr[v, k]
            if nb >= 0:
                w[field[nb]] += 1.0
        top = w[0]
        for m in range(1, D):
            if w[m] > top:
                top = w[m]
        total = 0.0
        for m in range(D):
            w[m] = math.exp(J * (w[m] - top))
            total += w[m]
        target = u[v] * total
        acc = 0.0
        choice = D - 1
        for m in range(D):
            acc += w[m]
            if target < acc:
                choice = m
                break
        field[v] = choice


def gibbs_sweep(field: np.ndarray, params: PottsParams, graph: LatticeGraph,
                rng: np.random.Generator) -> np.ndarray:
    """One raster-order single-site Gibbs sweep targeting the Potts prior.

    ``field`` is updated in place and also returned.  Exactly one uniform per
    node is drawn from ``rng``.
    """
    if field.dtype != np.int64:
        raise TypeError("fields are int64 arrays of state indices")
    u = rng.random(graph.n_nodes)
    _gibbs_sweep_kernel(field, graph.nbr, float(params.J), params.D, u)
    return field


def sample_prior_field(params: PottsParams, graph: LatticeGraph, rng: np.random.Generator,
                       sweeps: int = 50) -> np.ndarray:
    """Uniform random start followed by ``sweeps`` Gibbs sweeps."""
    field = rng.integers(params.D, size=graph.n_nodes).astype(np.int64)
    for _ in range(sweeps):
        gibbs_sweep(field, params, graph, rng)
    return field


def enumerate_exact(graph: LatticeGraph, params: PottsParams,
                    log_external: np.ndarray | None = None,
                    limit: int = MAX_ENUMERATION):
    """Exact distribution over every configuration of a small lattice.

    Returns ``(configs, probs, log_zeta)`` where ``configs`` is a
    ``(D**n, n)`` array in lexicographic order (node 0 most significant) and
    ``log_zeta`` is the log normaliser.  ``log_external`` optionally adds a
    per-node, per-state log weight (``(n, D)``), which turns the prior into
    the posterior of the node-wise model.
    """
    D, n = params.D, graph.n_nodes
    size = D**n
    if size > limit:
        raise CapacityError(f"{D}^{n} = {size} configurations exceeds the limit {limit}")
    configs = np.array(list(itertools.product(range(D), repeat=n)), dtype=np.int64).reshape(size, n)
    e = graph.edges
    agree = np.count_nonzero(configs[:, e[:, 0]] == configs[:, e[:, 1]], axis=1)
    logw = params.J * agree.astype(float)
    if log_external is not None:
        ext = np.asarray(log_external, dtype=float)
        logw = logw + ext[np.arange(n), configs].sum(axis=1)
    top = logw.max()
    w = np.exp(logw - top)
    z = w.sum()
    return configs, w / z, float(top + math.log(z))


def critical_coupling(D: int) -> float:
    """Phase-transition coupling ``log(1 + sqrt(D))`` of the D-state Potts model."""
    if D < 2:
        raise ValueError(f"critical coupling needs D >= 2, got {D}")
    return math.log1p(math.sqrt(D))


def config_index(field: np.ndarray, D: int) -> int:
    """Position of a configuration in the :func:`enumerate_exact` ordering."""
    idx = 0
    for s in np.asarray(field):
        idx = idx * D + int(s)
    return idx


# --- serialisation ---------------------------------------------------------

def write_field_grid(path: str | Path, field: np.ndarray, graph: LatticeGraph,
                     states: Sequence | None = None) -> None:
    """Text grid of model labels (integers) in the region-mask format.

    With ``states`` given, indices are translated to their labels, which must
    then be integers; otherwise the raw indices are written.
    """
    f = np.asarray(field)
    if states is not None:
        f = np.array([int(states[i]) for i in f])
    write_grid(path, f.reshape(graph.shape))


def read_field_grid(path: str | Path, graph: LatticeGraph, states: Sequence | None = None) -> np.ndarray:
    grid = read_grid(path)
    if grid.shape != graph.shape:
        raise ValueError(f"{path}: grid {grid.shape} does not match lattice {graph.shape}")
    flat = grid.ravel()
    if states is None:
        return flat.astype(np.int64)
    labels = [int(s) for s in states]
    try:
        return np.array([labels.index(int(x)) for x in flat], dtype=np.int64)
    except ValueError as exc:
        raise ValueError(f"{path}: label outside {labels}") from exc


def write_field_csv(path: str | Path, field: np.ndarray, states: Sequence | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "model"])
        for v, s in enumerate(np.asarray(field)):
            w.writerow([v, states[s] if states is not None else int(s)])


def read_field_csv(path: str | Path, n_nodes: int, states: Sequence | None = None) -> np.ndarray:
    field = np.full(n_nodes, -1, dtype=np.int64)
    labels = [str(s) for s in states] if states is not None else None
    with open(path, newline="") as fh:
        for row in csv.DictReader(ln for ln in fh if not ln.startswith("#")):
            v = int(row["node"])
            if not 0 <= v < n_nodes:
                raise ValueError(f"{path}: node {v} out of range")
            field[v] = labels.index(row["model"]) if labels else int(row["model"])
    if (field < 0).any():
        raise ValueError(f"{path}: missing nodes")
    return field
