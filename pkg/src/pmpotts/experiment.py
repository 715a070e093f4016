"""Experiment harness: configuration, simulation, replicated runs and aggregation.

A study is described by one JSON-compatible :class:`ExperimentConfig`.  The
master seed fixes every random stream through keyed seed sequences:

* data for replicate ``r``: ``(2, r)`` (``(2, 0)`` for every replicate when
  ``data == "fixed"``);
* evidence draws: ``(1, r, epoch, node, model)``, shared by all samplers of a
  replicate, so the independent, NWSE and NWMA runs see the same initial
  evidence matrix;
* chain ``k`` at coupling index ``j``: ``(3, r, j, k)``.

Output files other than those under ``runtime/`` are byte-identical for a
given configuration and seed, whatever the number of workers.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .lattice import build_lattice, default_mask, ground_truth_field, load_mask
from .metrics import (derived_means, independent_frequencies, mean_and_se, modal_select,
                      percent_correct, rmse, vd_maps, write_map_csv)
from .models.pet import (PetFamily, PetPrior, bolus_input, default_schedule, read_input_csv,
                         read_pet_csv, read_schedule_csv, write_input_csv, write_pet_csv,
                         write_schedule_csv)
from .models.toy import ToyFamily, ToyModelParams, read_toy_image, write_toy_image
from .potts import write_field_csv
from .samplers import ComputeBudgetError, independent_select, init_field, nwma_run, nwpm_run, nwse_run
from .smc import EvidenceSource, SmcConfig, SmcEvidence, estimate_evidence, write_evidence_csv

TAG_DATA = 2
TAG_CHAIN = 3
MAX_FAILED_FRACTION = 0.1
SAMPLER_KINDS = ("indep", "nwpm", "nwse", "nwma")


class ConfigError(ValueError):
    """An invalid experiment configuration."""


class StudyFailure(RuntimeError):
    """More replicates failed than the study tolerates."""


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


# --- configuration -----------------------------------------------------------

@dataclass
class SmcSection:
    n_particles: int = 50
    n_temperatures: int = 80
    schedule_power: float = 5.0
    resample_threshold: float = 0.5
    resample_every_step: bool = False
    move_count: int = 1


@dataclass
class ToySection:
    mu0: dict = field(default_factory=lambda: {"A": 5.0, "B": -5.0})
    sigma0: float = 5.0
    sigma: float = 1.0


@dataclass
class PetSection:
    amplitude: float = 0.5
    rate: float = 1.0 / 60.0
    input_csv: str | None = None
    schedule_csv: str | None = None
    noise: float = 0.5
    error: str = "normal"
    theta_min: float | None = None


@dataclass
class SamplerSpec:
    """One chain (or the independent selector) run on every replicate.

    ``n_particles`` and ``n_temperatures`` override the study SMC section.
    """

    kind: str
    n: int | None = None
    kappa: float | None = None
    n_particles: int | None = None
    n_temperatures: int | None = None
    name: str | None = None

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        parts = [self.kind]
        if self.n is not None and self.kind != "indep":
            parts.append(f"n{self.n}")
        if self.kind == "nwma":
            parts.append("kinf" if self.kappa is None or math.isinf(self.kappa) else f"k{int(self.kappa)}")
        if self.n_particles is not None:
            parts.append(f"N{self.n_particles}")
        if self.n_temperatures is not None:
            parts.append(f"T{self.n_temperatures}")
        return "_".join(parts)


_SECTIONS = {"smc": SmcSection, "toy": ToySection, "pet": PetSection}


@dataclass
class ExperimentConfig:
    """A complete, validated description of a study.

    ``J`` holds the coupling values in the convention set by ``pair_sum``.
    With ``"ordered"`` the prior sums ``J`` over ordered neighbour pairs, so
    each lattice edge carries ``2 J``; with ``"edges"`` each edge carries
    ``J``.  ``workers`` and ``out`` do not enter the config hash.
    """

    study: str = "toy"
    model: str | None = None
    width: int = 20
    height: int = 20
    mask: str | None = None
    mapping: dict | None = None
    toy: ToySection = field(default_factory=ToySection)
    pet: PetSection = field(default_factory=PetSection)
    J: list = field(default_factory=lambda: [0.4])
    pair_sum: str = "ordered"
    samplers: list = field(default_factory=lambda: [SamplerSpec("nwpm", n=100)])
    smc: SmcSection = field(default_factory=SmcSection)
    replicates: int = 1
    seed: int = 0
    init: str = "prior-gibbs"
    init_sweeps: int = 50
    burn_in: int = 0
    data: str = "fresh"
    data_path: str | None = None
    failure_budget: float = 1e-3
    traces: bool = True
    workers: int = 1
    out: str = "runs/study"

    # -- construction --

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in raw.items():
            if k in _SECTIONS:
                kw[k] = _section(_SECTIONS[k], v, k)
            elif k == "samplers":
                if not isinstance(v, list) or not v:
                    raise ConfigError("samplers must be a non-empty list")
                kw[k] = [_section(SamplerSpec, s, "samplers[]") for s in v]
            elif k == "J":
                kw[k] = list(v) if isinstance(v, (list, tuple)) else [v]
            else:
                kw[k] = v
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def replace(self, **changes) -> "ExperimentConfig":
        raw = self.to_dict()
        raw.update(changes)
        return ExperimentConfig.from_dict(raw)

    def hashed_dict(self) -> dict:
        raw = self.to_dict()
        raw.pop("workers")
        raw.pop("out")
        return raw

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.hashed_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    # -- validation --

    @property
    def family_kind(self) -> str:
        return self.model if self.study == "custom" else self.study

    def validate(self) -> None:
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.study in ("toy", "pet", "custom"), f"study must be toy, pet or custom, not {self.study!r}")
        if self.study == "custom":
            need(self.model in ("toy", "pet"), "a custom study needs model: toy or pet")
            need(self.mask is not None and self.mapping is not None, "a custom study needs a mask and mapping")
        else:
            need(self.model in (None, self.study), "model must match the study kind")
        for name in ("width", "height", "replicates", "init_sweeps"):
            v = getattr(self, name)
            need(_is_int(v) and v >= 1, f"{name} must be a positive integer")
        need(_is_int(self.seed) and self.seed >= 0, "seed must be a non-negative integer")
        need(_is_int(self.burn_in) and self.burn_in >= 0, "burn_in must be a non-negative integer")
        need(_is_int(self.workers) and self.workers >= 1, "workers must be a positive integer")
        need(self.mask is not None or self.width == self.height and self.width in (10, 20, 100),
             "without a mask file the lattice must be 10x10, 20x20 or 100x100")
        need(self.pair_sum in ("ordered", "edges"), "pair_sum must be ordered or edges")
        need(self.J and all(_is_real(j) and j >= 0 for j in self.J), "J must be non-negative numbers")
        need(self.init in ("prior-gibbs", "independent"), "init must be prior-gibbs or independent")
        need(self.data in ("fresh", "fixed"), "data must be fresh or fixed")
        need(_is_real(self.failure_budget) and 0 <= self.failure_budget < 1, "failure_budget must lie in [0, 1)")
        need(isinstance(self.traces, bool), "traces must be true or false")
        need(self.data_path is None or Path(self.data_path).is_file(), f"data file {self.data_path} not found")
        need(self.mask is None or Path(self.mask).is_file(), f"mask file {self.mask} not found")
        labels = [s.label for s in self.samplers]
        need(len(set(labels)) == len(labels), "sampler labels must be unique")
        for s in self.samplers:
            need(s.kind in SAMPLER_KINDS, f"sampler kind must be one of {SAMPLER_KINDS}")
            if s.kind != "indep":
                need(_is_int(s.n) and s.n >= 1, f"{s.label}: n must be a positive integer")
                need(self.burn_in < s.n, f"{s.label}: burn_in must be below n")
            if s.kind == "nwma":
                need(s.kappa is None or _is_real(s.kappa) and s.kappa >= 1, f"{s.label}: kappa must be >= 1")
            for attr in ("n_particles", "n_temperatures"):
                v = getattr(s, attr)
                need(v is None or _is_int(v) and v >= 1, f"{s.label}: {attr} must be a positive integer")
        try:
            for s in self.samplers:
                self.smc_config(s)
        except ValueError as exc:
            raise ConfigError(f"smc: {exc}") from exc
        t = self.toy
        need(isinstance(t.mu0, dict) and len(t.mu0) >= 2, "toy.mu0 must map at least two labels to means")
        need(all(_is_real(v) for v in t.mu0.values()), "toy.mu0 values must be numbers")
        need(_is_real(t.sigma0) and t.sigma0 > 0 and _is_real(t.sigma) and t.sigma > 0,
             "toy sigmas must be positive")
        p = self.pet
        need(p.error in ("normal", "t"), "pet.error must be normal or t")
        need(_is_real(p.noise) and p.noise > 0, "pet.noise must be positive")
        need(_is_real(p.amplitude) and p.amplitude > 0 and _is_real(p.rate) and p.rate > 0,
             "pet input amplitude and rate must be positive")
        need(p.theta_min is None or _is_real(p.theta_min) and 0 < p.theta_min < 0.1,
             "pet.theta_min must lie in (0, 0.1)")
        for path in (p.input_csv, p.schedule_csv):
            need(path is None or Path(path).is_file(), f"file {path} not found")
        try:
            problem = build_problem(self)
        except (ValueError, KeyError, OSError) as exc:
            raise ConfigError(str(exc)) from exc
        need(problem.graph.n_nodes == self.width * self.height, "mask shape does not match width and height")

    # -- derived settings --

    def smc_config(self, spec: SamplerSpec | None = None) -> SmcConfig:
        s = self.smc
        return SmcConfig(
            n_particles=(spec.n_particles if spec and spec.n_particles else s.n_particles),
            n_temperatures=(spec.n_temperatures if spec and spec.n_temperatures else s.n_temperatures),
            schedule_power=s.schedule_power, resample_threshold=s.resample_threshold,
            resample_every_step=s.resample_every_step, move_count=s.move_count)

    def edge_coupling(self, J: float) -> float:
        return 2.0 * J if self.pair_sum == "ordered" else float(J)


def _section(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _is_real(v) -> bool:
    return isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) and not math.isnan(v)


# --- the problem: lattice, truth and node family ------------------------------

@dataclass
class Problem:
    graph: object
    truth: np.ndarray
    family: object
    states: tuple
    mask: object


def _default_mapping(kind: str, states) -> dict:
    if kind == "toy":
        first, rest = states[0], states[-1]
        mid = states[1] if len(states) > 2 else rest
        return {0: first, 1: mid, 2: rest, 3: rest}
    return {0: 2, 1: 3, 2: 1, 3: 1}


def _mapping(cfg: ExperimentConfig, states) -> dict:
    if cfg.mapping is None:
        return _default_mapping(cfg.family_kind, states)
    out = {}
    for k, v in cfg.mapping.items():
        out[int(k)] = int(v) if cfg.family_kind == "pet" else v
    return out


def build_family(cfg: ExperimentConfig):
    if cfg.family_kind == "toy":
        t = cfg.toy
        return ToyFamily(ToyModelParams({str(k): float(v) for k, v in t.mu0.items()}, t.sigma0, t.sigma))
    p = cfg.pet
    schedule = read_schedule_csv(p.schedule_csv) if p.schedule_csv else default_schedule()
    if p.input_csv:
        inp = read_input_csv(p.input_csv)
    else:
        inp = bolus_input(p.amplitude, p.rate, schedule.ends[-1])
    prior = PetPrior.real_data(p.theta_min, error=p.error) if p.theta_min else PetPrior(error=p.error)
    return PetFamily(inp, schedule, prior)


def build_problem(cfg: ExperimentConfig) -> Problem:
    family = build_family(cfg)
    states = family.states
    mapping = _mapping(cfg, states)
    if cfg.mask:
        mask = load_mask(cfg.mask, mapping)
    else:
        mask = default_mask(cfg.width, mapping)
    h, w = mask.shape
    graph = build_lattice(w, h)
    if (w, h) != (cfg.width, cfg.height):
        raise ValueError(f"mask is {w}x{h}, config says {cfg.width}x{cfg.height}")
    truth = ground_truth_field(mask, states)
    return Problem(graph, truth, family, states, mask)


def _simulate(problem: Problem, cfg: ExperimentConfig, rng) -> np.ndarray:
    if cfg.family_kind == "pet":
        return problem.family.simulate(problem.truth, rng, noise_level=cfg.pet.noise)
    return problem.family.simulate(problem.truth, rng)


def replicate_data(cfg: ExperimentConfig, problem: Problem, r: int) -> np.ndarray:
    """Node data for replicate ``r``: read from ``data_path`` or simulated."""
    if cfg.data_path:
        return read_data(cfg.data_path, cfg, problem)
    return _simulate(problem, cfg, _rng(cfg.seed, TAG_DATA, 0 if cfg.data == "fixed" else r))


def read_data(path, cfg: ExperimentConfig, problem: Problem) -> np.ndarray:
    if cfg.family_kind == "toy":
        y = read_toy_image(path).reshape(-1, 1)
    else:
        y = read_pet_csv(path)
    if y.shape != (problem.graph.n_nodes, problem.family.n_obs):
        raise ConfigError(f"{path}: data shape {y.shape} does not match the study")
    return y


def write_data(path, data: np.ndarray, cfg: ExperimentConfig) -> None:
    if cfg.family_kind == "toy":
        write_toy_image(path, data.reshape(cfg.height, cfg.width))
    else:
        write_pet_csv(path, data)


# --- stamped output files -----------------------------------------------------

def _stamp(path, config_hash: str) -> None:
    """Prefix a written text file with the hash of the config that made it."""
    p = Path(path)
    p.write_text(f"# config_hash={config_hash}\n" + p.read_text())


def _write_rows(path, header, rows, config_hash) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt_j(J) -> str:
    return "" if math.isnan(J) else f"{J:g}"


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else f"{float(x):.6f}"
    return str(x)


def manifest(cfg: ExperimentConfig, files=()) -> dict:
    import numba
    import scipy
    return {
        "config_hash": cfg.config_hash,
        "config": cfg.hashed_dict(),
        "seed": cfg.seed,
        "streams": {"evidence": [1, "replicate", "epoch", "node", "model"],
                    "data": [TAG_DATA, "replicate"], "chain": [TAG_CHAIN, "replicate", "J index", "sampler index"]},
        "versions": {"pmpotts": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "numba": numba.__version__},
        "files": sorted(files),
        "nondeterministic": ["runtime/"],
    }


def write_manifest(out: Path, cfg: ExperimentConfig, files=()) -> None:
    (out / "manifest.json").write_text(json.dumps(manifest(cfg, files), indent=2, sort_keys=True) + "\n")


# --- one replicate ------------------------------------------------------------

class _SharedEvidence(EvidenceSource):
    """SMC draws for one sampler, with epoch 0 served from the replicate's matrix when present."""

    def __init__(self, smc: SmcEvidence, cache: dict, key):
        self.smc, self.cache, self.key = smc, cache, key
        self.n_estimates = 0
        self.n_failed = 0

    def draw(self, nodes, models, epoch):
        hit = self.cache.get(self.key) if epoch == 0 else None
        if hit is None:
            before = self.smc.n_failed
            lz, der = self.smc.draw(nodes, models, epoch)
            self.n_failed += self.smc.n_failed - before
        else:
            nodes, models = np.asarray(nodes), np.asarray(models)
            lz, der = hit[0][nodes, models].copy(), hit[1][nodes, models].copy()
            self.n_failed += int(np.sum(lz == -math.inf))
        self.n_estimates += len(nodes)
        return lz, der


class _Replicate:
    def __init__(self, cfg: ExperimentConfig, problem: Problem, r: int):
        self.cfg, self.problem, self.r = cfg, problem, r
        self.data = replicate_data(cfg, problem, r)
        self.cache: dict = {}
        self.matrix_time: dict = {}

    def smc_source(self, smc_cfg: SmcConfig) -> SmcEvidence:
        return SmcEvidence(self.problem.family, self.data, smc_cfg, self.cfg.seed, key_prefix=(self.r,))

    def matrix(self, smc_cfg: SmcConfig):
        key = (smc_cfg.n_particles, smc_cfg.n_temperatures)
        if key not in self.cache:
            V, D = self.problem.graph.n_nodes, len(self.problem.states)
            src = self.smc_source(smc_cfg)
            t0 = time.perf_counter()
            lz, der = src.draw(np.repeat(np.arange(V), D), np.tile(np.arange(D), V), 0)
            self.matrix_time[key] = time.perf_counter() - t0
            if src.n_failed > self.cfg.failure_budget * V * D:
                raise ComputeBudgetError(f"{src.n_failed} failed evidence estimates in the initial matrix")
            self.cache[key] = (lz.reshape(V, D), der.reshape(V, D))
        return self.cache[key]


def _vd_rmse(problem: Problem, freqs, means) -> dict:
    if not isinstance(problem.family, PetFamily):
        return {}
    truth_vd = np.array([problem.family.true_derived(m) for m in problem.truth])
    out = {}
    for mode in ("model-averaged", "posterior-modal"):
        try:
            out[mode] = rmse(vd_maps(freqs, means, mode), truth_vd)
        except ValueError:
            out[mode] = math.nan
    return out


def run_replicate(cfg: ExperimentConfig, r: int, out: Path | None = None) -> dict:
    """Run every sampler at every coupling on replicate ``r``.

    Returns plain rows for aggregation.  Per-replicate files are written under
    ``out/replicates/rNNN`` when ``out`` is given.
    """
    problem = build_problem(cfg)
    rep = _Replicate(cfg, problem, r)
    graph, truth, D = problem.graph, problem.truth, len(problem.states)
    h = cfg.config_hash
    rdir = None
    if out is not None:
        rdir = Path(out) / "replicates" / f"r{r:03d}"
        rdir.mkdir(parents=True, exist_ok=True)
        write_data(rdir / "data.csv", rep.data, cfg)
        _stamp(rdir / "data.csv", h)
    cells, series, runtimes = [], [], []
    for k, spec in enumerate(cfg.samplers):
        smc_cfg = cfg.smc_config(spec)
        mkey = (smc_cfg.n_particles, smc_cfg.n_temperatures)
        if spec.kind == "indep":
            t0 = time.perf_counter()
            lz, der = rep.matrix(smc_cfg)
            sel = independent_select(lz)
            elapsed = rep.matrix_time[mkey] + time.perf_counter() - t0
            vd = _vd_rmse(problem, independent_frequencies(lz), der)
            cells.append(_cell(spec, math.nan, r, percent_correct(sel, truth), D * graph.n_nodes,
                               int(np.sum(lz == -math.inf)), math.nan, vd))
            runtimes.append((spec.label, math.nan, r, elapsed, elapsed))
            if rdir is not None:
                write_field_csv(rdir / f"{spec.label}_selected.csv", sel, problem.states)
                _stamp(rdir / f"{spec.label}_selected.csv", h)
                write_evidence_csv(rdir / f"evidence_N{mkey[0]}_T{mkey[1]}.csv", lz, problem.states, smc_cfg,
                                   cfg.seed)
                _stamp(rdir / f"evidence_N{mkey[0]}_T{mkey[1]}.csv", h)
            continue
        for j, J in enumerate(cfg.J):
            Je = cfg.edge_coupling(J)
            crng = _rng(cfg.seed, TAG_CHAIN, r, j, k)
            init_rng, run_rng = crng.spawn(2)
            t0 = time.perf_counter()
            lz0 = rep.matrix(smc_cfg)[0] if cfg.init == "independent" or spec.kind != "nwpm" else None
            # stored-evidence chains are charged for the matrix they rely on
            extra = rep.matrix_time[mkey] if spec.kind != "nwpm" else 0.0
            init = init_field(cfg.init, graph, D, J=Je, rng=init_rng, sweeps=cfg.init_sweeps, log_z=lz0)
            src = _SharedEvidence(rep.smc_source(smc_cfg), rep.cache, mkey)
            common = dict(truth=truth, burn_in=cfg.burn_in, failure_budget=cfg.failure_budget)
            if spec.kind == "nwpm":
                tr = nwpm_run(src, graph, Je, spec.n, init, run_rng, D, **common)
            elif spec.kind == "nwse":
                tr = nwse_run(src, graph, Je, spec.n, init, run_rng, D, **common)
            else:
                kappa = math.inf if spec.kappa is None else spec.kappa
                tr = nwma_run(src, graph, Je, spec.n, kappa, init, run_rng, D, **common)
            elapsed = time.perf_counter() - t0 + extra
            res = modal_select(tr)
            vd = _vd_rmse(problem, res.frequencies, derived_means(tr))
            rate = sum(tr.accepted) / max(1, sum(tr.proposed))
            cells.append(_cell(spec, J, r, percent_correct(res.selected, truth), tr.n_estimates, tr.n_failed,
                               rate, vd))
            series.append((spec.label, J, r, list(tr.percent_correct)))
            runtimes.append((spec.label, J, r, elapsed, elapsed / spec.n))
            if rdir is not None:
                cdir = rdir / f"{spec.label}_J{J:g}"
                cdir.mkdir(exist_ok=True)
                tr.write_summary_csv(cdir / "summary.csv")
                write_field_csv(cdir / "selected.csv", res.selected, problem.states)
                names = ["summary.csv", "selected.csv"]
                if cfg.traces:
                    tr.write_long_csv(cdir / "trace.csv", problem.states)
                    names.append("trace.csv")
                if isinstance(problem.family, PetFamily):
                    write_map_csv(cdir / "vd_map.csv", vd_maps(res.frequencies, derived_means(tr)))
                    names.append("vd_map.csv")
                for name in names:
                    _stamp(cdir / name, h)
                tdir = Path(out) / "runtime"
                tdir.mkdir(exist_ok=True)
                tr.write_runtime_csv(tdir / f"r{r:03d}_{spec.label}_J{J:g}.csv")
    return {"replicate": r, "cells": cells, "series": series, "runtimes": runtimes}


def _cell(spec, J, r, pc, n_est, n_fail, rate, vd):
    return {"sampler": spec.label, "kind": spec.kind, "J": J, "replicate": r, "percent_correct": pc,
            "n_estimates": int(n_est), "n_failed": int(n_fail), "accept_rate": rate,
            "vd_rmse_averaged": vd.get("model-averaged", math.nan),
            "vd_rmse_modal": vd.get("posterior-modal", math.nan)}


def _safe_replicate(cfg_dict: dict, r: int, out):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        return run_replicate(cfg, r, out)
    except (ComputeBudgetError, FloatingPointError, ValueError, RuntimeError) as exc:
        return {"replicate": r, "error": f"{type(exc).__name__}: {exc}"}


# --- the study ----------------------------------------------------------------

@dataclass
class StudyReport:
    config_hash: str
    cells: list
    failures: list
    out: Path | None

    def table(self) -> list:
        """``(sampler, J, mean, sd, n)`` of percent correct per sampler and coupling."""
        return _aggregate(self.cells)

    def mean(self, sampler: str, J=None, key: str = "percent_correct") -> float:
        vals = self.values(sampler, J, key)
        return float(np.mean(vals)) if vals else math.nan

    def values(self, sampler: str, J=None, key: str = "percent_correct") -> list:
        return [c[key] for c in self.cells if c["sampler"] == sampler
                and (J is None or math.isnan(c["J"]) or c["J"] == J)]


def _group(cells) -> list:
    """Cells grouped by (sampler, J); NaN couplings (independent selection) share one group."""
    groups: dict = {}
    for c in cells:
        J = None if math.isnan(c["J"]) else c["J"]
        groups.setdefault((c["sampler"], J), []).append(c)
    keyed = sorted(groups.items(), key=lambda kv: (kv[0][0], -1.0 if kv[0][1] is None else kv[0][1]))
    return [(label, math.nan if J is None else J, cs) for (label, J), cs in keyed]


def _aggregate(cells) -> list:
    rows = []
    for label, J, cs in _group(cells):
        pc = [c["percent_correct"] for c in cs]
        rows.append((label, J, float(np.mean(pc)), float(np.std(pc, ddof=1)) if len(pc) > 1 else math.nan, len(pc)))
    return rows


def run_study(cfg: ExperimentConfig, out=None, workers: int | None = None) -> StudyReport:
    """Run all replicates, write aggregated CSVs and the manifest.

    A failed replicate is recorded in ``failures.csv`` and left out of the
    aggregates; :class:`StudyFailure` is raised after writing if more than 10%
    of replicates failed.
    """
    workers = workers or cfg.workers
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    raw = cfg.to_dict()
    jobs = range(cfg.replicates)
    if workers > 1 and cfg.replicates > 1:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=min(workers, cfg.replicates))(
            delayed(_safe_replicate)(raw, r, out) for r in jobs)
    else:
        results = [_safe_replicate(raw, r, out) for r in jobs]
    results.sort(key=lambda d: d["replicate"])
    h = cfg.config_hash
    ok = [d for d in results if "error" not in d]
    failures = [(d["replicate"], d["error"]) for d in results if "error" in d]
    cells = [c for d in ok for c in d["cells"]]
    series = [s for d in ok for s in d["series"]]
    runtimes = [t for d in ok for t in d["runtimes"]]

    keys = ["sampler", "kind", "J", "replicate", "percent_correct", "n_estimates", "n_failed", "accept_rate",
            "vd_rmse_averaged", "vd_rmse_modal"]
    _write_rows(out / "replicates.csv", keys, [[_fmt_j(c[k]) if k == "J" else _fmt(c[k]) for k in keys] for c in cells], h)
    _write_rows(out / "percent_correct.csv", ["sampler", "J", "mean", "sd", "n"],
                [[a, _fmt_j(J), _fmt(m), _fmt(s), n] for a, J, m, s, n in _aggregate(cells)], h)
    _write_rows(out / "iterations.csv", ["sampler", "J", "iteration", "mean", "sd", "n"],
                _iteration_rows(series), h)
    _write_rows(out / "failures.csv", ["replicate", "error"], failures, h)
    files = ["replicates.csv", "percent_correct.csv", "iterations.csv", "failures.csv"]
    if cfg.family_kind == "pet":
        _write_rows(out / "vd_rmse.csv", ["sampler", "J", "mode", "mean_rmse", "se", "n"], _vd_rows(cells), h)
        files.append("vd_rmse.csv")
    (out / "runtime").mkdir(exist_ok=True)
    _write_rows(out / "runtime" / "runtime.csv", ["sampler", "J", "replicate", "total_s", "per_iteration_s"],
                [[a, _fmt_j(J), r, f"{t:.4f}", f"{p:.4f}"] for a, J, r, t, p in runtimes], h)
    for d in ok:
        rdir = out / "replicates" / f"r{d['replicate']:03d}"
        if rdir.is_dir():
            files.extend(str(p.relative_to(out)) for p in rdir.rglob("*") if p.is_file())
    write_manifest(out, cfg, files)
    report = StudyReport(h, cells, failures, out)
    if len(failures) > MAX_FAILED_FRACTION * cfg.replicates:
        raise StudyFailure(f"{len(failures)} of {cfg.replicates} replicates failed; first: {failures[0][1]}")
    return report


def _iteration_rows(series) -> list:
    groups: dict = {}
    for label, J, _, pcs in series:
        groups.setdefault((label, J), []).append(pcs)
    rows = []
    for (label, J), runs in sorted(groups.items()):
        arr = np.array(runs)
        sd = arr.std(axis=0, ddof=1) if len(runs) > 1 else np.full(arr.shape[1], math.nan)
        for i in range(arr.shape[1]):
            rows.append([label, _fmt_j(J), i + 1, _fmt(arr[:, i].mean()), _fmt(sd[i]), len(runs)])
    return rows


def _vd_rows(cells) -> list:
    rows = []
    for label, J, cs in _group(cells):
        for mode, key in (("model-averaged", "vd_rmse_averaged"), ("posterior-modal", "vd_rmse_modal")):
            m, se = mean_and_se([c[key] for c in cs])
            rows.append([label, _fmt_j(J), mode, _fmt(m), _fmt(se), len(cs)])
    return rows


# --- simulation and variance probing ---------------------------------------------

def simulate(cfg: ExperimentConfig, out, replicate: int = 0) -> dict:
    """Write the ground truth and the data for one replicate (plus PET inputs)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)
    data = _simulate(problem, cfg, _rng(cfg.seed, TAG_DATA, 0 if cfg.data == "fixed" else replicate))
    h = cfg.config_hash
    write_field_csv(out / "truth.csv", problem.truth, problem.states)
    write_data(out / "data.csv", data, cfg)
    files = ["truth.csv", "data.csv"]
    if cfg.family_kind == "pet":
        write_input_csv(out / "input.csv", problem.family.input)
        write_schedule_csv(out / "schedule.csv", problem.family.schedule)
        files += ["input.csv", "schedule.csv"]
    for name in files:
        _stamp(out / name, h)
    write_manifest(out, cfg, files)
    return {"truth": problem.truth, "data": data}


def probe_variance(cfg: ExperimentConfig, model, grid, replicates: int = 100, out=None,
                   y: np.ndarray | None = None) -> list:
    """Replicated ``log Z`` estimates on one node for each ``(N, T)`` in ``grid``.

    Without ``y`` the node is simulated from the study's family at model
    ``model``.  Rows are ``(N, T, mean, var, se_var, replicates)``; the
    standard error uses the normal-theory ``var * sqrt(2 / (R - 1))``.
    """
    if replicates < 2:
        raise ConfigError("probe_variance needs at least two replicates")
    family = build_family(cfg)
    states = [str(s) for s in family.states]
    if str(model) not in states:
        raise ConfigError(f"model {model!r} is not one of {states}")
    m = states.index(str(model))
    if y is None:
        field0 = np.array([m])
        rng = _rng(cfg.seed, TAG_DATA, 0)
        y = (family.simulate(field0, rng, noise_level=cfg.pet.noise) if cfg.family_kind == "pet"
             else family.simulate(field0, rng))[0]
    rows = []
    for cell, (N, T) in enumerate(grid):
        smc_cfg = SmcConfig(n_particles=int(N), n_temperatures=int(T), schedule_power=cfg.smc.schedule_power,
                            resample_threshold=cfg.smc.resample_threshold,
                            resample_every_step=cfg.smc.resample_every_step, move_count=cfg.smc.move_count)
        lz = np.array([estimate_evidence(y, m, family, smc_cfg, _rng(cfg.seed, 1, 10**6 + cell, rep),
                                         keep_particles=False).log_z for rep in range(replicates)])
        var = float(np.var(lz, ddof=1))
        rows.append((int(N), int(T), float(np.mean(lz)), var, var * math.sqrt(2.0 / (replicates - 1)), replicates))
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_rows(out, ["N", "T", "mean_log_z", "var_log_z", "se_var", "replicates"],
                    [[N, T, _fmt(a), _fmt(v), _fmt(s), R] for N, T, a, v, s, R in rows], cfg.config_hash)
    return rows


# --- presets ----------------------------------------------------------------------

_TOY3 = {"mu0": {"C": 7.0, "D": 0.0, "E": -7.0}, "sigma0": 5.0, "sigma": 1.0}

PRESETS = {
    "toy-study1": {
        "study": "toy", "J": [round(0.2 * i, 1) for i in range(26)],
        "samplers": [{"kind": "nwpm", "n": 100}], "replicates": 50,
        "smc": {"n_particles": 50, "n_temperatures": 80}, "traces": False,
    },
    "toy-study1-large": {
        "study": "toy", "width": 100, "height": 100, "toy": _TOY3,
        "J": [round(0.2 * i, 1) for i in range(26)],
        "samplers": [{"kind": "nwpm", "n": 100}], "replicates": 50,
        "smc": {"n_particles": 50, "n_temperatures": 80}, "traces": False,
    },
    "toy-study2": {
        "study": "toy", "J": [0.4], "replicates": 100,
        "samplers": [
            {"kind": "nwpm", "n": 50, "n_particles": 200},
            {"kind": "nwpm", "n": 75, "n_particles": 134},
            {"kind": "nwpm", "n": 100, "n_particles": 100},
            {"kind": "nwpm", "n": 200, "n_particles": 50},
            {"kind": "indep", "n_particles": 200, "n_temperatures": 500},
            {"kind": "nwse", "n": 200, "n_particles": 200, "n_temperatures": 500},
            {"kind": "nwma", "n": 200, "kappa": 10, "n_particles": 200, "n_temperatures": 500},
        ],
    },
    "toy-study2-desk": {
        "study": "toy", "J": [0.4], "replicates": 20,
        "samplers": [
            {"kind": "nwpm", "n": 200},
            {"kind": "indep", "n_particles": 200, "n_temperatures": 500},
            {"kind": "nwse", "n": 200, "n_particles": 200, "n_temperatures": 500},
            {"kind": "nwma", "n": 200, "kappa": 10},
        ],
    },
    "pet-sim": {
        "study": "pet", "J": [0.4], "replicates": 30,
        "smc": {"n_particles": 400, "n_temperatures": 600},
        "samplers": [
            {"kind": "nwpm", "n": 50, "n_particles": 200, "n_temperatures": 400},
            {"kind": "nwpm", "n": 75, "n_particles": 134, "n_temperatures": 400},
            {"kind": "nwpm", "n": 100, "n_particles": 100, "n_temperatures": 400},
            {"kind": "nwpm", "n": 200, "n_particles": 50, "n_temperatures": 400},
            {"kind": "indep"},
            {"kind": "nwse", "n": 200},
            {"kind": "nwma", "n": 500, "kappa": 50, "n_particles": 200},
        ],
    },
    "pet-sim-desk": {
        "study": "pet", "width": 10, "height": 10, "J": [0.4], "replicates": 10,
        "smc": {"n_particles": 100, "n_temperatures": 200},
        "samplers": [
            {"kind": "nwpm", "n": 30},
            {"kind": "indep"},
            {"kind": "nwse", "n": 200},
            {"kind": "nwma", "n": 30, "kappa": 10},
        ],
    },
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    raw = copy.deepcopy(PRESETS[name])
    raw.setdefault("out", f"runs/{name}")
    raw.update(overrides)
    return ExperimentConfig.from_dict(raw)
