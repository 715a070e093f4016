"""Spatial samplers over model-order fields.

All chains use single-node Metropolis updates in raster order with a uniform
proposal over the other model orders.  They differ in where the evidence at
the proposed order comes from:

* ``nwpm``: a fresh estimate for every proposal (pseudo-marginal);
* ``nwse``: one stored estimate per (node, order), drawn before the chain;
* ``nwma``: a stored matrix as in ``nwse`` whose node rows are refreshed
  every ``kappa`` iterations, each refresh accepted with the ratio of the
  new to the old estimate at the node's current order.

Iteration 1 of every chain is its initial field.  Each later iteration is
one full sweep.  Evidence draws are keyed by epoch: epoch 0 for the initial
draws and epoch ``i`` for the sweep or refresh made at iteration ``i``.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .lattice import LatticeGraph
from .potts import PottsParams, read_field_csv, read_field_grid, sample_prior_field
from .smc import EvidenceSource

SNAPSHOT_LIMIT = 1000


class ComputeBudgetError(RuntimeError):
    """More evidence estimates failed than the run's failure budget allows."""


# --- compiled acceptance passes --------------------------------------------

@numba.njit(cache=True)
def _delta_agree(field, nbr, v, new):
    d = 0
    cur = field[v]
    for k in range(nbr.shape[1]):
        u = nbr[v, k]
        if u >= 0:
            if field[u] == new:
                d += 1
            if field[u] == cur:
                d -= 1
    return d


@numba.njit(cache=True)
def _sweep_fresh(field, nbr, J, prop, lz_cur, lz_prop, u, prior_log_ratio):
    """Pseudo-marginal sweep: each proposal carries its own fresh estimate."""
    acc = 0
    for v in range(field.shape[0]):
        lr_prior = J * _delta_agree(field, nbr, v, prop[v])
        prior_log_ratio[v] = lr_prior
        if lz_prop[v] == -math.inf:
            continue
        if math.log(u[v]) < lr_prior + lz_prop[v] - lz_cur[v]:
            field[v] = prop[v]
            lz_cur[v] = lz_prop[v]
            acc += 1
    return acc


@numba.njit(cache=True)
def _sweep_stored(field, nbr, J, prop, log_z, u, prior_log_ratio):
    """Metropolis sweep using a stored evidence matrix for both orders."""
    acc = 0
    for v in range(field.shape[0]):
        lr_prior = J * _delta_agree(field, nbr, v, prop[v])
        prior_log_ratio[v] = lr_prior
        new = log_z[v, prop[v]]
        if new == -math.inf:
            continue
        if math.log(u[v]) < lr_prior + new - log_z[v, field[v]]:
            field[v] = prop[v]
            acc += 1
    return acc


# --- traces ----------------------------------------------------------------

@dataclass
class ChainTrace:
    """Per-iteration record of a chain.

    Fields are kept as full snapshots for chains of up to 1000 iterations and
    as the initial field plus a change list beyond that.
    """

    method: str
    n_nodes: int
    n_states: int
    initial: np.ndarray
    snapshots: np.ndarray | None = None
    changes: list = field(default_factory=list)
    counts: np.ndarray | None = None
    accepted: list = field(default_factory=list)
    proposed: list = field(default_factory=list)
    elapsed: list = field(default_factory=list)
    percent_correct: list = field(default_factory=list)
    refresh_log: list = field(default_factory=list)
    derived_sum: np.ndarray | None = None
    derived_count: np.ndarray | None = None
    n_estimates: int = 0
    n_failed: int = 0
    final_field: np.ndarray | None = None
    log_z: np.ndarray | None = None
    prior_checks: list = field(default_factory=list)

    @property
    def n_iter(self) -> int:
        return len(self.accepted)

    def iter_fields(self):
        """Yield the field at each iteration (a fresh copy each time)."""
        if self.snapshots is not None:
            for row in self.snapshots[: self.n_iter]:
                yield row.astype(np.int64)
            return
        cur = self.initial.copy()
        by_iter = {}
        for it, nodes, models in self.changes:
            by_iter[it] = (nodes, models)
        for it in range(1, self.n_iter + 1):
            if it in by_iter:
                nodes, models = by_iter[it]
                cur[nodes] = models
            yield cur.copy()

    def fields(self) -> np.ndarray:
        return np.array(list(self.iter_fields()))

    def write_long_csv(self, path, states) -> None:
        """``iteration,node,model`` rows for every node at every iteration."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "node", "model"])
            for it, f in enumerate(self.iter_fields(), start=1):
                for v, m in enumerate(f):
                    w.writerow([it, v, states[m]])

    def write_summary_csv(self, path) -> None:
        """``iteration,percent_correct,accept_rate``; wall-clock time goes elsewhere."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "percent_correct", "accept_rate"])
            for i in range(self.n_iter):
                pc = self.percent_correct[i] if self.percent_correct else math.nan
                rate = self.accepted[i] / self.proposed[i] if self.proposed[i] else 0.0
                w.writerow([i + 1, f"{pc:.6f}", f"{rate:.6f}"])

    def write_runtime_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "elapsed_s"])
            for i, t in enumerate(self.elapsed, start=1):
                w.writerow([i, f"{t:.6f}"])


def read_long_csv(path, n_nodes: int, states) -> np.ndarray:
    """Fields from an ``iteration,node,model`` file, shape ``(n_iter, n_nodes)``."""
    labels = [str(s) for s in states]
    rows = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(ln for ln in fh if not ln.startswith("#")):
            rows.setdefault(int(r["iteration"]), {})[int(r["node"])] = labels.index(r["model"])
    out = np.zeros((len(rows), n_nodes), dtype=np.int64)
    for k, it in enumerate(sorted(rows)):
        if len(rows[it]) != n_nodes:
            raise ValueError(f"{path}: iteration {it} is incomplete")
        for v, m in rows[it].items():
            out[k, v] = m
    return out


class _Recorder:
    def __init__(self, method, init, D, n, truth, burn_in, check_prior):
        self.trace = ChainTrace(method, init.size, D, init.copy())
        if n <= SNAPSHOT_LIMIT:
            self.trace.snapshots = np.empty((n, init.size), dtype=np.int8 if D < 128 else np.int64)
        self.trace.counts = np.zeros((init.size, D), dtype=np.int64)
        self.trace.derived_sum = np.zeros((init.size, D))
        self.trace.derived_count = np.zeros((init.size, D), dtype=np.int64)
        self.truth = truth
        self.burn_in = burn_in
        self.check_prior = check_prior
        self.prev = init.copy()
        self.rows = np.arange(init.size)
        self.t0 = time.perf_counter()

    def add_estimates(self, nodes, models, derived):
        ok = np.isfinite(derived)
        np.add.at(self.trace.derived_sum, (nodes[ok], models[ok]), derived[ok])
        np.add.at(self.trace.derived_count, (nodes[ok], models[ok]), 1)

    def record(self, it, field, accepted, proposed):
        tr = self.trace
        if tr.snapshots is not None:
            tr.snapshots[it - 1] = field
        else:
            diff = np.flatnonzero(field != self.prev)
            if diff.size:
                tr.changes.append((it, diff, field[diff].copy()))
            self.prev[:] = field
        if it > self.burn_in:
            tr.counts[self.rows, field] += 1
        tr.accepted.append(int(accepted))
        tr.proposed.append(int(proposed))
        tr.elapsed.append(time.perf_counter() - self.t0)
        if self.truth is not None:
            sel = np.argmax(tr.counts, axis=1) if it > self.burn_in else field
            tr.percent_correct.append(100.0 * np.mean(sel == self.truth))


def _propose(field, D, rng):
    offset = rng.integers(1, D, size=field.size) if D > 2 else np.ones(field.size, dtype=np.int64)
    return (field + offset) % D


def _check_budget(evidence: EvidenceSource, budget: float):
    if evidence.n_failed > budget:
        raise ComputeBudgetError(f"{evidence.n_failed} failed evidence estimates exceed the budget of {budget:g}")


def _as_params(J, D):
    return J if isinstance(J, PottsParams) else PottsParams(float(J), tuple(range(D)))


def nwpm_run(evidence: EvidenceSource, graph: LatticeGraph, J, n: int, init: np.ndarray,
             rng: np.random.Generator, n_states: int, truth=None, burn_in: int = 0,
             failure_budget: float = 1e-3, check_prior: bool = False) -> ChainTrace:
    """Node-wise pseudo-marginal chain; draws exactly ``n * |V|`` estimates."""
    if n < 1:
        raise ValueError("need at least one iteration")
    params = _as_params(J, n_states)
    D, V = params.D, graph.n_nodes
    field = np.array(init, dtype=np.int64)
    if field.shape != (V,):
        raise ValueError("initial field does not match the lattice")
    move_rng, _ = rng.spawn(2)
    budget = failure_budget * n * V
    nodes = np.arange(V)
    rec = _Recorder("nwpm", field, D, n, truth, burn_in, check_prior)
    lz_cur, der = evidence.draw(nodes, field, 0)
    rec.add_estimates(nodes, field, der)
    _check_budget(evidence, budget)
    rec.record(1, field, 0, 0)
    ratios = np.empty(V)
    for it in range(2, n + 1):
        prop = _propose(field, D, move_rng)
        u = 1.0 - move_rng.random(V)
        lz_prop, der = evidence.draw(nodes, prop, it)
        rec.add_estimates(nodes, prop, der)
        _check_budget(evidence, budget)
        before = field.copy() if check_prior else None
        acc = _sweep_fresh(field, graph.nbr, params.J, prop, lz_cur, lz_prop, u, ratios)
        if check_prior:
            rec.trace.prior_checks.append((before, prop, ratios.copy(), field.copy()))
        rec.record(it, field, acc, V)
    tr = rec.trace
    tr.final_field, tr.log_z = field, lz_cur
    tr.n_estimates, tr.n_failed = evidence.n_estimates, evidence.n_failed
    return tr


def _stored_chain(method, evidence, graph, J, n, init, rng, n_states, kappa, truth, burn_in,
                  failure_budget, log_z=None):
    if n < 1:
        raise ValueError("need at least one iteration")
    params = _as_params(J, n_states)
    D, V = params.D, graph.n_nodes
    field = np.array(init, dtype=np.int64)
    if field.shape != (V,):
        raise ValueError("initial field does not match the lattice")
    move_rng, refresh_rng = rng.spawn(2)
    n_refresh = 0 if kappa is None or math.isinf(kappa) else n // int(kappa)
    budget = failure_budget * V * D * (1 + n_refresh)
    all_nodes = np.repeat(np.arange(V), D)
    all_models = np.tile(np.arange(D), V)
    rec = _Recorder(method, field, D, n, truth, burn_in, False)
    if log_z is None:
        lz, der = evidence.draw(all_nodes, all_models, 0)
        rec.add_estimates(all_nodes, all_models, der)
        _check_budget(evidence, budget)
        Z = lz.reshape(V, D)
    else:
        Z = np.array(log_z, dtype=float)
        if Z.shape != (V, D) or np.isnan(Z).any():
            raise ValueError("evidence matrix must be complete and match the lattice")
    rows = np.arange(V)
    ratios = np.empty(V)

    def refresh(it):
        new, der = evidence.draw(all_nodes, all_models, it)
        rec.add_estimates(all_nodes, all_models, der)
        _check_budget(evidence, budget)
        new = new.reshape(V, D)
        u = 1.0 - refresh_rng.random(V)
        cur = Z[rows, field]
        fresh = new[rows, field]
        with np.errstate(invalid="ignore"):
            ok = (fresh > -math.inf) & ((cur == -math.inf) | (np.log(u) < fresh - cur))
        Z[ok] = new[ok]
        rec.trace.refresh_log.append((it, int(ok.sum())))

    rec.record(1, field, 0, 0)
    if n_refresh and 1 % kappa == 0:
        refresh(1)
    for it in range(2, n + 1):
        prop = _propose(field, D, move_rng)
        u = 1.0 - move_rng.random(V)
        acc = _sweep_stored(field, graph.nbr, params.J, prop, Z, u, ratios)
        rec.record(it, field, acc, V)
        if n_refresh and it % kappa == 0:
            refresh(it)
    tr = rec.trace
    tr.final_field, tr.log_z = field, Z
    tr.n_estimates, tr.n_failed = evidence.n_estimates, evidence.n_failed
    return tr


def nwse_run(evidence: EvidenceSource, graph: LatticeGraph, J, n: int, init: np.ndarray,
             rng: np.random.Generator, n_states: int, truth=None, burn_in: int = 0,
             failure_budget: float = 1e-3, log_z: np.ndarray | None = None) -> ChainTrace:
    """Single-estimation chain: ``|V| * |M|`` estimates, then Metropolis on stored values.

    A precomputed ``log_z`` matrix may be supplied instead of drawing one.
    """
    return _stored_chain("nwse", evidence, graph, J, n, init, rng, n_states, None, truth,
                         burn_in, failure_budget, log_z)


def nwma_run(evidence: EvidenceSource, graph: LatticeGraph, J, n: int, kappa, init: np.ndarray,
             rng: np.random.Generator, n_states: int, truth=None, burn_in: int = 0,
             failure_budget: float = 1e-3) -> ChainTrace:
    """Multiple-augmentation chain refreshing every node's row every ``kappa`` iterations."""
    if kappa is None or not kappa >= 1:
        raise ValueError("kappa must be at least 1 (use math.inf for no refreshes)")
    return _stored_chain("nwma", evidence, graph, J, n, init, rng, n_states, kappa, truth,
                         burn_in, failure_budget)


def independent_select(log_z: np.ndarray, log_prior: np.ndarray | None = None) -> np.ndarray:
    """Per-node maximiser of ``log Z + log prior``, ties to the smaller order."""
    lz = np.asarray(log_z, dtype=float)
    if lz.ndim != 2 or np.isnan(lz).any():
        raise ValueError("evidence matrix must be a complete (nodes, models) array")
    if log_prior is not None:
        lz = lz + np.asarray(log_prior, dtype=float)[None, :]
    return np.argmax(lz, axis=1).astype(np.int64)


def init_field(mode: str, graph: LatticeGraph, n_states: int, *, J: float = 0.0,
               rng: np.random.Generator | None = None, sweeps: int = 50,
               log_z: np.ndarray | None = None, path=None, states=None) -> np.ndarray:
    """Starting field: ``prior-gibbs``, ``independent`` (argmax of ``log_z``) or ``file``."""
    if mode == "prior-gibbs":
        if rng is None:
            raise ValueError("prior-gibbs initialisation needs an rng")
        return sample_prior_field(PottsParams(J, tuple(range(n_states))), graph, rng, sweeps)
    if mode == "independent":
        if log_z is None:
            raise ValueError("independent initialisation needs an evidence matrix")
        return independent_select(log_z)
    if mode == "file":
        p = Path(path)
        if p.suffix == ".csv":
            return read_field_csv(p, graph.n_nodes, states)
        return read_field_grid(p, graph, states)
    raise ValueError(f"unknown initialisation mode {mode!r}")
