"""Annealed SMC estimates of node-wise marginal likelihoods.

The sampler moves ``N`` particles through ``pi_t ~ prior * likelihood^alpha_t``
with ``alpha_t = (t/T)^5`` by default.  At each step it reweights by the
incremental likelihood power, resamples systematically when the ESS falls
below a threshold, then applies random-walk Metropolis moves on the
unconstrained parameters.  The log evidence is accumulated in log space.

Every estimate owns a random stream derived from the master seed and a key
``(node, model, epoch)``, so batches give the same numbers in any order and
on any number of workers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

from .models import toy
from .models.base import KernelData, NodeModelFamily

TAG_EVIDENCE = 1


class EstimationFailure(RuntimeError):
    """All particles reached zero likelihood at some temperature."""

    def __init__(self, t: int, node=None, model=None):
        super().__init__(f"all particles have zero likelihood at temperature {t}"
                         + (f" (node {node}, model {model})" if node is not None else ""))
        self.temperature = t


@dataclass(frozen=True)
class SmcConfig:
    n_particles: int = 50
    n_temperatures: int = 80
    schedule_power: float = 5.0
    resample_threshold: float = 0.5
    resample_every_step: bool = False
    move_count: int = 1
    scale_factor: float | None = None
    schedule: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        if self.n_temperatures < 1:
            raise ValueError("need at least one temperature")
        if not 0 < self.resample_threshold <= 1:
            raise ValueError("resample threshold must lie in (0, 1]")
        if self.move_count < 0:
            raise ValueError("move count must be non-negative")
        self.alphas()

    def alphas(self) -> np.ndarray:
        u = np.arange(self.n_temperatures + 1) / self.n_temperatures
        a = np.asarray(self.schedule(u) if self.schedule else u**self.schedule_power, dtype=float)
        if a.shape != u.shape or a[0] != 0.0 or a[-1] != 1.0 or np.any(np.diff(a) < 0):
            raise ValueError("annealing schedule must rise monotonically from 0 to 1")
        return a

    def scale_for(self, d: int) -> float:
        return self.scale_factor if self.scale_factor is not None else 2.38 / math.sqrt(d)


@dataclass
class EvidenceEstimate:
    log_z: float
    model: int
    node: int
    n_particles: int
    n_temperatures: int
    seed: tuple
    derived_mean: float = math.nan
    derived_var: float = math.nan
    ess: float = math.nan
    n_resamples: int = 0
    accept_rate: float = math.nan
    particles: np.ndarray | None = None
    log_weights: np.ndarray | None = None


# --- compiled kernel -------------------------------------------------------

@numba.njit(cache=True)
def systematic_resample(weights, u):
    """Indices drawn by systematic resampling from normalised ``weights``."""
    n = weights.shape[0]
    idx = np.empty(n, dtype=np.int64)
    cum = weights[0]
    j = 0
    for i in range(n):
        pos = (u + i) / n
        while pos > cum and j < n - 1:
            j += 1
            cum += weights[j]
        idx[i] = j
    return idx


@numba.njit(cache=True, inline="always")
def _tempered(alpha, ll):
    # zero power of a zero likelihood is taken as one
    if alpha == 0.0:
        return 0.0
    return alpha * ll


@numba.njit(cache=True)
def _proposal_factor(eta, w, scale_c, chol, mean, tmp):
    """Lower Cholesky factor of ``scale_c**2`` times the weighted particle covariance.

    Falls back to the diagonal (with a floor of 1e-3 on each sd) when the
    covariance is not numerically positive definite.
    """
    d, n = eta.shape
    for j in range(d):
        mu = 0.0
        for i in range(n):
            mu += w[i] * eta[j, i]
        mean[j] = mu
    for j in range(d):
        for l in range(j + 1):
            c = 0.0
            for i in range(n):
                c += w[i] * (eta[j, i] - mean[j]) * (eta[l, i] - mean[l])
            chol[j, l] = c * scale_c * scale_c
    ok = True
    for j in range(d):
        for l in range(j + 1):
            acc = chol[j, l]
            for k in range(l):
                acc -= chol[j, k] * chol[l, k]
            if l == j:
                if acc <= 1e-24 * scale_c * scale_c:
                    ok = False
                    break
                chol[j, j] = math.sqrt(acc)
            else:
                chol[j, l] = acc / chol[l, l]
        if not ok:
            break
    if not ok:
        for j in range(d):
            var = 0.0
            for i in range(n):
                var += w[i] * (eta[j, i] - mean[j]) ** 2
            sd = math.sqrt(var)
            for l in range(d):
                chol[j, l] = 0.0
            chol[j, j] = scale_c * sd if sd > 1e-12 else 1e-3
    for j in range(d):
        for l in range(j + 1, d):
            chol[j, l] = 0.0


# The family functions arrive as arguments, so each family gets its own
# specialised (uncached) compilation of the kernel.
@numba.njit
def _smc_kernel(gen, loglik, logprior, sample_prior, y, fpar, ivec, fmat, m, d, n, alphas,
                threshold, every_step, move_count, scale_c):
    n_seg = max(ivec.shape[0], 1)
    buf = np.empty(n_seg + 1)
    work = np.empty((max(fmat.shape[1], 1), 3))
    ct = np.empty(max(y.shape[0], 1))
    eta = np.empty((d, n))
    sample_prior(gen, eta, m, fpar, fmat)
    ll = np.empty(n)
    lp = np.empty(n)
    for i in range(n):
        lp[i] = logprior(eta, i, m, fpar, fmat)
        ll[i] = loglik(eta, i, y, fpar, ivec, fmat, m, buf, work, ct)
    logw = np.full(n, -math.log(n))
    w = np.full(n, 1.0 / n)
    a = np.empty(n)
    prop = np.empty((d, 1))
    chol = np.zeros((d, d))
    mean = np.empty(d)
    tmp = np.empty(d)
    log_z = 0.0
    n_res = 0
    n_acc = 0
    n_prop = 0
    T = alphas.shape[0] - 1
    for t in range(1, T + 1):
        da = alphas[t] - alphas[t - 1]
        if da > 0.0:
            mx = -math.inf
            for i in range(n):
                if ll[i] == -math.inf or logw[i] == -math.inf:
                    a[i] = -math.inf
                else:
                    a[i] = logw[i] + da * ll[i]
                if a[i] > mx:
                    mx = a[i]
            if mx == -math.inf:
                return -math.inf, t, eta, logw, ll, n_res, n_acc, n_prop
            s = 0.0
            for i in range(n):
                w[i] = math.exp(a[i] - mx)
                s += w[i]
            lse = mx + math.log(s)
            log_z += lse
            for i in range(n):
                logw[i] = a[i] - lse
                w[i] /= s
        s2 = 0.0
        for i in range(n):
            s2 += w[i] * w[i]
        if every_step or 1.0 / s2 < threshold * n:
            idx = systematic_resample(w, gen.random())
            eta = eta[:, idx].copy()
            ll = ll[idx].copy()
            lp = lp[idx].copy()
            logw[:] = -math.log(n)
            w[:] = 1.0 / n
            n_res += 1
        alpha = alphas[t]
        for _ in range(move_count):
            _proposal_factor(eta, w, scale_c, chol, mean, tmp)
            for i in range(n):
                for j in range(d):
                    tmp[j] = gen.standard_normal()
                for j in range(d):
                    acc = eta[j, i]
                    for l in range(j + 1):
                        acc += chol[j, l] * tmp[l]
                    prop[j, 0] = acc
                lu = math.log(1.0 - gen.random())
                n_prop += 1
                lp_new = logprior(prop, 0, m, fpar, fmat)
                if lp_new == -math.inf:
                    continue
                ll_new = loglik(prop, 0, y, fpar, ivec, fmat, m, buf, work, ct)
                if ll_new == -math.inf and alpha > 0.0:
                    continue
                cur = lp[i] + _tempered(alpha, ll[i])
                new = lp_new + _tempered(alpha, ll_new)
                if lu < new - cur:
                    for j in range(d):
                        eta[j, i] = prop[j, 0]
                    lp[i] = lp_new
                    ll[i] = ll_new
                    n_acc += 1
    return log_z, 0, eta, logw, ll, n_res, n_acc, n_prop


@numba.njit
def _weighted_derived(derived, eta, logw, m, fpar):
    n = logw.shape[0]
    mx = logw.max()
    w = np.exp(logw - mx)
    w /= w.sum()
    mean = 0.0
    vals = np.empty(n)
    for i in range(n):
        vals[i] = derived(eta, i, m, fpar)
        mean += w[i] * vals[i]
    var = 0.0
    for i in range(n):
        var += w[i] * (vals[i] - mean) ** 2
    return mean, var, 1.0 / np.sum(w * w)


# --- Python interface ------------------------------------------------------

def job_rng(seed: int, key: Sequence[int]) -> np.random.Generator:
    """Generator for one estimate, keyed by ``(TAG_EVIDENCE, *key)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(TAG_EVIDENCE, *key))))


_RUNNERS: dict = {}


def _runner(kd: KernelData):
    """Compiled driver for one family: SMC run plus the weighted derived summary."""
    fn = _RUNNERS.get(kd.fns)
    if fn is None:
        loglik, logprior, sample_prior, derived = kd.fns

        @numba.njit
        def fn(gen, y, fpar, ivec, fmat, m, d, n, alphas, threshold, every_step, move_count, scale_c):
            res = _smc_kernel(gen, loglik, logprior, sample_prior, y, fpar, ivec, fmat, m, d, n,
                              alphas, threshold, every_step, move_count, scale_c)
            fail_t, eta, logw = res[1], res[2], res[3]
            if fail_t:
                return res, (math.nan, math.nan, math.nan)
            return res, _weighted_derived(derived, eta, logw, m, fpar)

        _RUNNERS[kd.fns] = fn
    return fn


def _run(kd: KernelData, y, m, d, cfg: SmcConfig, alphas, gen):
    y = np.ascontiguousarray(y, dtype=float).reshape(-1)
    return _runner(kd)(gen, y, kd.fpar, kd.ivec, kd.fmat, m, d, cfg.n_particles, alphas,
                       cfg.resample_threshold, cfg.resample_every_step, cfg.move_count,
                       cfg.scale_for(d))


def estimate_evidence(y, m: int, family: NodeModelFamily, cfg: SmcConfig, rng: np.random.Generator,
                      node: int = -1, keep_particles: bool = True, seed: tuple = ()) -> EvidenceEstimate:
    """One SMC estimate of ``log Z`` for model index ``m`` at a node with data ``y``.

    Raises :class:`EstimationFailure` when every particle has zero likelihood.
    """
    kd = family.kernel_data()
    d = family.dim(m)
    (log_z, fail_t, eta, logw, _, n_res, n_acc, n_prop), (mean, var, ess) = _run(
        kd, y, m, d, cfg, cfg.alphas(), rng)
    if fail_t:
        raise EstimationFailure(fail_t, node, m)
    return EvidenceEstimate(
        float(log_z), m, node, cfg.n_particles, cfg.n_temperatures, tuple(seed), float(mean),
        float(var), float(ess), int(n_res), n_acc / n_prop if n_prop else math.nan,
        eta if keep_particles else None, logw if keep_particles else None)


def effective_sample_size(weights) -> float:
    """``1 / sum(W_i^2)`` of the normalised weights."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be non-negative and not all zero")
    w = w / w.sum()
    return float(1.0 / np.sum(w * w))


def posterior_summary(est: EvidenceEstimate, quantity: Callable[[np.ndarray], float]):
    """Self-normalised weighted mean and variance of ``quantity`` over the final particles.

    ``quantity`` receives one unconstrained parameter vector.  Returns
    ``(mean, variance, degenerate)`` where ``degenerate`` flags an ESS below 2.
    """
    if est.particles is None:
        raise ValueError("estimate was computed without keeping particles")
    w = np.exp(est.log_weights - est.log_weights.max())
    w /= w.sum()
    vals = np.array([quantity(est.particles[:, i]) for i in range(w.size)])
    mean = float(np.sum(w * vals))
    var = float(np.sum(w * (vals - mean) ** 2))
    return mean, var, effective_sample_size(w) < 2.0


# --- batched evidence sources ----------------------------------------------

def _run_jobs(kd, data, dims, cfg, alphas, seed, prefix, epoch, nodes, models):
    out = np.empty((len(nodes), 2))
    fails = 0
    for j, (v, m) in enumerate(zip(nodes, models)):
        gen = job_rng(seed, (*prefix, epoch, int(v), int(m)))
        res, summary = _run(kd, data[v], m, dims[m], cfg, alphas, gen)
        if res[1]:
            out[j] = (-math.inf, math.nan)
            fails += 1
        else:
            out[j] = (res[0], summary[0])
    return out, fails


class EvidenceSource:
    """Interface shared by the SMC, exact and precomputed evidence sources.

    ``draw(nodes, models, epoch)`` returns ``(log_z, derived)`` arrays.  A failed
    estimate comes back as ``-inf`` and is counted in ``n_failed``.
    """

    n_estimates: int = 0
    n_failed: int = 0

    def draw(self, nodes, models, epoch: int):
        raise NotImplementedError


class SmcEvidence(EvidenceSource):
    """Fresh SMC estimates with per-(node, model, epoch) random streams."""

    def __init__(self, family: NodeModelFamily, data: np.ndarray, cfg: SmcConfig, seed: int,
                 key_prefix: Sequence[int] = (), workers: int = 1):
        self.family = family
        self.data = np.ascontiguousarray(data, dtype=float)
        self.cfg = cfg
        self.seed = int(seed)
        self.prefix = tuple(int(k) for k in key_prefix)
        self.workers = max(1, int(workers))
        self.kd = family.kernel_data()
        self.dims = [family.dim(m) for m in range(family.n_states)]
        self.alphas = cfg.alphas()
        self.n_estimates = 0
        self.n_failed = 0

    def draw(self, nodes, models, epoch: int):
        nodes = np.asarray(nodes, dtype=np.int64)
        models = np.asarray(models, dtype=np.int64)
        args = (self.kd, self.data, self.dims, self.cfg, self.alphas, self.seed, self.prefix, int(epoch))
        if self.workers == 1 or len(nodes) < 2 * self.workers:
            out, fails = _run_jobs(*args, nodes, models)
        else:
            from joblib import Parallel, delayed
            chunks = np.array_split(np.arange(len(nodes)), self.workers)
            parts = Parallel(n_jobs=self.workers)(
                delayed(_run_jobs)(*args, nodes[c], models[c]) for c in chunks)
            out = np.concatenate([p[0] for p in parts])
            fails = sum(p[1] for p in parts)
        self.n_estimates += len(nodes)
        self.n_failed += fails
        return out[:, 0], out[:, 1]


class ExactEvidence(EvidenceSource):
    """Zero-variance source returning exact log marginals (oracle mode)."""

    def __init__(self, log_z: np.ndarray, derived: np.ndarray | None = None):
        self.log_z = np.asarray(log_z, dtype=float)
        self.derived = np.full_like(self.log_z, np.nan) if derived is None else np.asarray(derived, float)
        self.n_estimates = 0
        self.n_failed = 0

    @classmethod
    def from_family(cls, family: NodeModelFamily, data: np.ndarray) -> "ExactEvidence":
        D = family.n_states
        lz = np.array([[family.exact_log_marginal(y, m) for m in range(D)] for y in data])
        derived = None
        if isinstance(family, toy.ToyFamily):
            derived = np.stack([toy.posterior_mean(data[:, 0], s, family.params) for s in family.states], axis=1)
        return cls(lz, derived)

    def draw(self, nodes, models, epoch: int):
        nodes = np.asarray(nodes, dtype=np.int64)
        models = np.asarray(models, dtype=np.int64)
        self.n_estimates += len(nodes)
        return self.log_z[nodes, models].copy(), self.derived[nodes, models].copy()


class MatrixEvidence(ExactEvidence):
    """A precomputed evidence matrix, e.g. read from an evidence CSV file."""


# --- evidence matrix files -------------------------------------------------

EVIDENCE_HEADER = ["node", "model", "log_z", "n_particles", "n_temperatures", "seed"]


def write_evidence_csv(path, log_z: np.ndarray, states: Sequence, cfg: SmcConfig | None, seed: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVIDENCE_HEADER)
        n_p = cfg.n_particles if cfg else 0
        n_t = cfg.n_temperatures if cfg else 0
        for v in range(log_z.shape[0]):
            for m, label in enumerate(states):
                w.writerow([v, label, repr(float(log_z[v, m])), n_p, n_t, seed])


def read_evidence_csv(path, n_nodes: int, states: Sequence) -> np.ndarray:
    labels = [str(s) for s in states]
    out = np.full((n_nodes, len(states)), np.nan)
    with open(path, newline="") as fh:
        for r in csv.DictReader(ln for ln in fh if not ln.startswith("#")):
            v = int(r["node"])
            if not 0 <= v < n_nodes or r["model"] not in labels:
                raise ValueError(f"{path}: bad entry node={r['node']} model={r['model']}")
            out[v, labels.index(r["model"])] = float(r["log_z"])
    if np.isnan(out).any():
        raise ValueError(f"{path}: evidence matrix has missing entries")
    return out
