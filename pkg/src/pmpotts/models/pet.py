"""Plasma-input compartmental models for dynamic PET time series.

The tissue curve is ``C_T(t) = sum_i phi_i * int_0^t C_P(s) exp(-theta_i (t - s)) ds``
with a piecewise-linear plasma input ``C_P``.  Each segment's convolution
with the exponential kernel is integrated in closed form, so the only error is
the interpolation of the input itself.

Frame ``j`` covers ``(t_{j-1}, t_j]`` and the model is evaluated at its end
time.  Observation noise is heteroscedastic with scale proportional to
``iota_j = C_T(t_j) / (t_j - t_{j-1})``.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numba
import numpy as np
from scipy.special import gammaln

from .base import KernelData, NodeModelFamily

KIND_PET = 1
ERR_NORMAL, ERR_T = 0, 1
_LOG_2PI = math.log(2.0 * math.pi)


# --- schedule and input ----------------------------------------------------

@dataclass(frozen=True)
class FrameSchedule:
    """Frame boundaries ``t_0 < t_1 < ... < t_k`` in seconds."""

    boundaries: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        if b.ndim != 1 or b.size < 2:
            raise ValueError("a schedule needs a start time and at least one frame end")
        if np.any(np.diff(b) <= 0):
            raise ValueError("frame boundaries must be strictly increasing")
        b.setflags(write=False)
        object.__setattr__(self, "boundaries", b)

    @classmethod
    def from_durations(cls, durations: Sequence[float], start: float = 0.0) -> "FrameSchedule":
        return cls(np.concatenate([[start], start + np.cumsum(durations)]))

    @property
    def ends(self) -> np.ndarray:
        return self.boundaries[1:]

    @property
    def durations(self) -> np.ndarray:
        return np.diff(self.boundaries)

    @property
    def n_frames(self) -> int:
        return self.boundaries.size - 1


def read_schedule_csv(path) -> FrameSchedule:
    """Read a ``t_end_s`` column; the first row is the start of the first frame."""
    with open(path, newline="") as fh:
        rows = [r for r in fh if r.strip() and not r.lstrip().startswith("#")]
    reader = csv.DictReader(rows)
    if reader.fieldnames is None or "t_end_s" not in reader.fieldnames:
        raise ValueError(f"{path}: expected a t_end_s column")
    return FrameSchedule(np.array([float(r["t_end_s"]) for r in reader]))


def write_schedule_csv(path, schedule: FrameSchedule) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_end_s"])
        for t in schedule.boundaries:
            w.writerow([repr(float(t))])


def default_schedule() -> FrameSchedule:
    ref = resources.files("pmpotts") / "data" / "schedule_default.csv"
    with resources.as_file(ref) as p:
        return read_schedule_csv(p)


@dataclass(frozen=True)
class PlasmaInput:
    """Sampled plasma input, linear between samples and zero before the first."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape or t.size < 2:
            raise ValueError("input needs matching 1-D time and value arrays")
        if np.any(np.diff(t) <= 0):
            raise ValueError("input sample times must be strictly increasing")
        if np.any(v < 0) or t[0] < 0:
            raise ValueError("input times and concentrations must be non-negative")
        for a in (t, v):
            a.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.interp(t, self.times, self.values)
        return np.where(t < self.times[0], 0.0, out)


def bolus_input(amplitude: float, rate: float, t_max: float, knots: Sequence[float] | None = None) -> PlasmaInput:
    """``A t exp(-b t)`` sampled on a grid that is dense over the peak."""
    if knots is None:
        knots = np.unique(np.concatenate([
            np.arange(0.0, 120.0, 2.0), np.arange(120.0, 600.0, 10.0),
            np.arange(600.0, t_max, 60.0), [t_max]]))
    t = np.asarray(knots, dtype=float)
    if t[-1] < t_max:
        raise ValueError("knots must reach t_max")
    return PlasmaInput(t, amplitude * t * np.exp(-rate * t))


def read_input_csv(path) -> PlasmaInput:
    with open(path, newline="") as fh:
        reader = csv.DictReader(r for r in fh if not r.lstrip().startswith("#"))
        if reader.fieldnames is None or not {"time_s", "concentration"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns time_s,concentration")
        rows = [(float(r["time_s"]), float(r["concentration"])) for r in reader]
    t, v = map(np.array, zip(*rows))
    return PlasmaInput(t, v)


def write_input_csv(path, inp: PlasmaInput) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "concentration"])
        for t, v in zip(inp.times, inp.values):
            w.writerow([repr(float(t)), repr(float(v))])


# --- convolution -----------------------------------------------------------

@dataclass(frozen=True)
class ConvolutionGrid:
    """Precomputed segments for convolving an input with ``exp(-theta t)``.

    The grid is the union of ``0``, the input knots and the evaluation times.
    Segments sharing a length share their exponential terms.
    """

    eval_times: np.ndarray
    eval_idx: np.ndarray
    h_class: np.ndarray
    class_h: np.ndarray
    p_start: np.ndarray
    p_end: np.ndarray

    @classmethod
    def build(cls, inp: PlasmaInput, eval_times) -> "ConvolutionGrid":
        ev = np.atleast_1d(np.asarray(eval_times, dtype=float))
        if np.any(ev < 0) or np.any(ev > inp.t_max):
            raise ValueError(f"evaluation times must lie in [0, {inp.t_max}]")
        grid = np.unique(np.concatenate([[0.0], inp.times[inp.times <= ev.max()], ev]))
        h = np.diff(grid)
        class_h, h_class = np.unique(h, return_inverse=True)
        left, right = grid[:-1], grid[1:]
        started = left >= inp.times[0]
        p_start = np.where(started, np.interp(left, inp.times, inp.values), 0.0)
        p_end = np.where(started, np.interp(right, inp.times, inp.values), 0.0)
        eval_idx = np.searchsorted(grid, ev)
        return cls(ev, eval_idx.astype(np.int64), h_class.astype(np.int64), class_h, p_start, p_end)

    def convolve(self, theta: float) -> np.ndarray:
        """``int_0^t C_P(s) exp(-theta (t - s)) ds`` at every evaluation time."""
        buf = np.empty(self.h_class.size + 1)
        work = np.empty((self.class_h.size, 3))
        _convolve(float(theta), self.h_class, self.class_h, self.p_start, self.p_end, buf, work)
        return buf[self.eval_idx]


@numba.njit(cache=True, inline="always")
def _segment_terms(z):
    """``exp(-z)``, ``E0 = (1 - e^-z)/z`` and ``g = int_0^1 s e^{-zs} ds``."""
    if z < 1e-2:
        e0 = 1.0 - z / 2.0 + z * z / 6.0 - z**3 / 24.0 + z**4 / 120.0 - z**5 / 720.0
        g = 0.5 - z / 3.0 + z * z / 8.0 - z**3 / 30.0 + z**4 / 144.0 - z**5 / 840.0
        return math.exp(-z), e0, g
    ex = math.exp(-z)
    om = -math.expm1(-z)
    return ex, om / z, (om - z * ex) / (z * z)


@numba.njit(cache=True, inline="always")
def _convolve(theta, h_class, class_h, p_start, p_end, out, work):
    for c in range(class_h.shape[0]):
        h = class_h[c]
        ex, e0, g = _segment_terms(theta * h)
        work[c, 0] = ex
        work[c, 1] = h * (e0 - g)   # weight of the segment's right value
        work[c, 2] = h * g          # weight of its left value
    out[0] = 0.0
    for j in range(h_class.shape[0]):
        c = h_class[j]
        out[j + 1] = work[c, 0] * out[j] + work[c, 1] * p_end[j] + work[c, 2] * p_start[j]


# --- parameters and priors -------------------------------------------------

@dataclass(frozen=True)
class CompartmentParams:
    """Rate constants plus a noise specification.

    Precisions are stored on the log scale because the vague gamma prior puts
    much of its mass below the smallest positive double.  Supply
    ``log_lambda`` for normal errors, or ``log_tau`` and ``nu`` for t errors.
    """

    phi: np.ndarray
    theta: np.ndarray
    log_lambda: float | None = None
    log_tau: float | None = None
    nu: float | None = None

    def __post_init__(self):
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        if phi.shape != theta.shape or phi.ndim != 1:
            raise ValueError("phi and theta must be vectors of equal length")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "theta", theta)
        if self.log_lambda is None and self.log_tau is None:
            raise ValueError("specify log_lambda (normal) or log_tau and nu (t errors)")
        if self.log_tau is not None and self.nu is None:
            raise ValueError("t errors need nu")

    @classmethod
    def normal(cls, phi, theta, lam: float = 1.0) -> "CompartmentParams":
        return cls(phi, theta, log_lambda=math.log(lam))

    @classmethod
    def student(cls, phi, theta, tau: float, nu: float) -> "CompartmentParams":
        return cls(phi, theta, log_tau=math.log(tau), nu=float(nu))

    @property
    def order(self) -> int:
        return self.phi.size

    @property
    def error(self) -> str:
        return "t" if self.log_tau is not None else "normal"

    def sorted(self) -> "CompartmentParams":
        """Compartments in ascending ``theta``; reporting only."""
        k = np.argsort(self.theta, kind="stable")
        return replace(self, phi=self.phi[k], theta=self.theta[k])


@dataclass(frozen=True)
class PetPrior:
    phi_bounds: tuple = (1e-5, 1e-1)
    theta_bounds: tuple = (1e-4, 1e-1)
    gamma_shape: float = 1e-3
    gamma_rate: float = 1e-3
    inv_nu_max: float = 0.5
    error: str = "normal"

    def __post_init__(self):
        for lo, hi in (self.phi_bounds, self.theta_bounds):
            if not 0 < lo < hi:
                raise ValueError("prior bounds must satisfy 0 < lower < upper")
        if self.error not in ("normal", "t"):
            raise ValueError(f"unknown error model {self.error!r}")
        if self.inv_nu_max != 0.5:
            raise ValueError("the 1/nu prior is fixed to U[0, 0.5)")

    @classmethod
    def real_data(cls, theta_min: float = 7e-4, **kw) -> "PetPrior":
        """Priors for non-decay-corrected scans: ``theta`` floor at the cutoff."""
        return cls(theta_bounds=(theta_min, 1e-1), **kw)


def sample_prior(M: int, prior: PetPrior, rng: np.random.Generator) -> CompartmentParams:
    phi = rng.uniform(*prior.phi_bounds, size=M)
    theta = rng.uniform(*prior.theta_bounds, size=M)
    # log of a Gamma(a) draw via Gamma(a + 1) * U^(1/a), safe for tiny shapes
    a, b = prior.gamma_shape, prior.gamma_rate
    log_prec = math.log(rng.standard_gamma(a + 1.0)) + math.log(rng.random()) / a - math.log(b)
    if prior.error == "normal":
        return CompartmentParams(phi, theta, log_lambda=log_prec)
    inv_nu = prior.inv_nu_max * (1.0 - rng.random())  # in (0, 0.5]
    inv_nu = min(inv_nu, math.nextafter(prior.inv_nu_max, 0.0))
    return CompartmentParams(phi, theta, log_tau=log_prec, nu=1.0 / inv_nu)


def _gamma_logpdf_of_log(log_x, a, b):
    """log density of ``x ~ Gamma(a, rate b)`` at ``x = exp(log_x)``."""
    return (a - 1.0) * log_x - b * math.exp(log_x) + a * math.log(b) - float(gammaln(a))


def log_prior_density(params: CompartmentParams, prior: PetPrior) -> float:
    """Log of the product of the uniform, gamma and ``1/nu`` prior factors."""
    lp = 0.0
    for vals, (lo, hi) in ((params.phi, prior.phi_bounds), (params.theta, prior.theta_bounds)):
        if np.any(vals < lo) or np.any(vals > hi):
            return -math.inf
        lp -= vals.size * math.log(hi - lo)
    a, b = prior.gamma_shape, prior.gamma_rate
    if params.error == "normal":
        return lp + _gamma_logpdf_of_log(params.log_lambda, a, b)
    nu = params.nu
    if nu <= 0 or not 0.0 <= 1.0 / nu < prior.inv_nu_max:
        return -math.inf
    # 1/nu ~ U[0, 0.5) gives nu density 2 / nu^2
    return lp + _gamma_logpdf_of_log(params.log_tau, a, b) + math.log(1.0 / prior.inv_nu_max) - 2.0 * math.log(nu)


def volume_of_distribution(params: CompartmentParams) -> float:
    if np.any(params.theta <= 0):
        raise ValueError("volume of distribution needs positive theta")
    return float(np.sum(params.phi / params.theta))


# --- tissue curve and likelihoods ------------------------------------------

def tissue_concentration(t, params: CompartmentParams, inp: PlasmaInput, grid: ConvolutionGrid | None = None):
    """Tissue concentration at time(s) ``t`` (seconds)."""
    scalar = np.ndim(t) == 0
    if grid is None:
        grid = ConvolutionGrid.build(inp, t)
    out = np.zeros(grid.eval_times.size)
    for phi, theta in zip(params.phi, params.theta):
        out += phi * grid.convolve(theta)
    return float(out[0]) if scalar else out


def _frame_curve(params, inp, schedule, grid):
    ct = tissue_concentration(schedule.ends, params, inp, grid)
    return ct, ct / schedule.durations


def log_likelihood_normal(y, params: CompartmentParams, inp: PlasmaInput, schedule: FrameSchedule,
                          grid: ConvolutionGrid | None = None) -> float:
    """Heteroscedastic normal log-likelihood with precision ``lambda / iota_j``."""
    y = np.asarray(y, dtype=float)
    if y.shape != (schedule.n_frames,):
        raise ValueError(f"expected {schedule.n_frames} frames, got {y.shape}")
    ct, iota = _frame_curve(params, inp, schedule, grid)
    if np.any(ct <= 0):
        return -math.inf
    lam = math.exp(params.log_lambda)
    r = y - ct
    return float(np.sum(0.5 * params.log_lambda - 0.5 * np.log(2 * math.pi * iota) - lam * r * r / (2 * iota)))


def log_marginal_likelihood_normal(y, params: CompartmentParams, inp: PlasmaInput,
                                   schedule: FrameSchedule, prior: PetPrior,
                                   grid: ConvolutionGrid | None = None) -> float:
    """Normal-error likelihood of ``(phi, theta)`` with the precision integrated out.

    With ``lambda ~ Gamma(a, rate b)`` and ``S = sum_j (y_j - C_j)^2 / iota_j``
    the integral is ``b^a Gamma(a + k/2) / (Gamma(a) (b + S/2)^(a + k/2))``
    times ``prod_j (2 pi iota_j)^(-1/2)``.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (schedule.n_frames,):
        raise ValueError(f"expected {schedule.n_frames} frames, got {y.shape}")
    ct, iota = _frame_curve(params, inp, schedule, grid)
    if np.any(ct <= 0):
        return -math.inf
    a, b, k = prior.gamma_shape, prior.gamma_rate, y.size
    ss = float(np.sum((y - ct) ** 2 / iota))
    return float(a * math.log(b) - gammaln(a) + gammaln(a + 0.5 * k) - (a + 0.5 * k) * math.log(b + 0.5 * ss)
                 - 0.5 * np.sum(np.log(2 * math.pi * iota)))


def lambda_conditional(y, params: CompartmentParams, inp: PlasmaInput, schedule: FrameSchedule,
                       prior: PetPrior, grid: ConvolutionGrid | None = None) -> tuple[float, float]:
    """Shape and rate of the gamma conditional of ``lambda`` given ``(phi, theta)``."""
    ct, iota = _frame_curve(params, inp, schedule, grid)
    ss = float(np.sum((np.asarray(y, dtype=float) - ct) ** 2 / iota))
    return prior.gamma_shape + 0.5 * ct.size, prior.gamma_rate + 0.5 * ss


def _lgamma_half_diff(nu):
    """``lgamma((nu + 1)/2) - lgamma(nu/2)``, asymptotic for very large ``nu``."""
    if nu < 1e7:
        return math.lgamma(0.5 * (nu + 1.0)) - math.lgamma(0.5 * nu)
    x = 0.5 * nu
    return 0.5 * math.log(x) - 1.0 / (8.0 * x) + 1.0 / (192.0 * x**3)


def log_likelihood_t(y, params: CompartmentParams, inp: PlasmaInput, schedule: FrameSchedule,
                     grid: ConvolutionGrid | None = None) -> float:
    """Student-t log-likelihood with location ``C_T(t_j)`` and precision-like scale ``tau / iota_j``."""
    if params.nu is None or params.nu <= 0:
        raise ValueError("degrees of freedom must be positive")
    y = np.asarray(y, dtype=float)
    if y.shape != (schedule.n_frames,):
        raise ValueError(f"expected {schedule.n_frames} frames, got {y.shape}")
    ct, iota = _frame_curve(params, inp, schedule, grid)
    if np.any(ct <= 0):
        return -math.inf
    nu, tau = params.nu, math.exp(params.log_tau)
    r = y - ct
    per = (_lgamma_half_diff(nu) + 0.5 * (params.log_tau - np.log(iota * math.pi * nu))
           - 0.5 * (nu + 1.0) * np.log1p(tau * r * r / (nu * iota)))
    return float(np.sum(per))


# --- simulation ------------------------------------------------------------

DEFAULT_TRUTH = {
    1: CompartmentParams.normal([4.9e-3], [5e-4]),
    2: CompartmentParams.normal([4.9e-3, 1.8e-3], [5e-4, 0.011]),
    3: CompartmentParams.normal([4.4e-3, 1e-4, 1.4e-3], [4.5e-4, 2.7e-3, 1e-2]),
}


def simulate_pet_pixel(params: CompartmentParams, inp: PlasmaInput, schedule: FrameSchedule,
                       noise_level: float, rng: np.random.Generator, grid=None) -> np.ndarray:
    return simulate_pet_image(np.zeros(1, dtype=np.int64), {0: params}, inp, schedule, noise_level,
                              rng, states=(0,), grid=grid)[0]


def simulate_pet_image(field, truth: Mapping[int, CompartmentParams], inp: PlasmaInput,
                       schedule: FrameSchedule, noise_level: float, rng: np.random.Generator,
                       states: Sequence[int] = (1, 2, 3), grid=None) -> np.ndarray:
    """Noisy time-activity curves, one row per node.

    Frame ``j`` gets variance ``s * iota_j`` with ``s`` chosen so the largest
    variance in each curve equals ``noise_level``.  One standard normal is drawn
    per node and frame in row-major order, independent of the field.
    """
    if not noise_level > 0:
        raise ValueError("noise level must be positive")
    field = np.asarray(field)
    grid = grid or ConvolutionGrid.build(inp, schedule.ends)
    curves, sds = {}, {}
    for idx in np.unique(field):
        p = truth[states[idx]]
        ct, iota = _frame_curve(p, inp, schedule, grid)
        if not np.any(ct > 0):
            raise ValueError(f"model {states[idx]} gives an all-zero tissue curve")
        s = noise_level / iota.max()
        curves[idx], sds[idx] = ct, np.sqrt(s * np.clip(iota, 0.0, None))
    z = rng.standard_normal((field.size, schedule.n_frames))
    out = np.empty_like(z)
    for v, idx in enumerate(field):
        out[v] = curves[idx] + sds[idx] * z[v]
    return out


# --- image I/O -------------------------------------------------------------

_PETI_HEADER = struct.Struct("<4sIII")


def write_pet_csv(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "frame", "value"])
        for v in range(image.shape[0]):
            for j in range(image.shape[1]):
                w.writerow([v, j, repr(float(image[v, j]))])


def read_pet_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.DictReader(ln for ln in fh if not ln.startswith("#"))
        rows = [(int(r["node"]), int(r["frame"]), float(r["value"])) for r in reader]
    n = max(r[0] for r in rows) + 1
    k = max(r[1] for r in rows) + 1
    out = np.full((n, k), np.nan)
    for v, j, x in rows:
        out[v, j] = x
    if np.isnan(out).any():
        raise ValueError(f"{path}: incomplete node/frame table")
    return out


def write_peti(path, image: np.ndarray, width: int, height: int) -> None:
    """Packed binary: magic ``PETI``, u32 width, height, frames, then f64 values."""
    image = np.ascontiguousarray(image, dtype="<f8")
    if image.shape[0] != width * height:
        raise ValueError("image rows must equal width * height")
    with open(path, "wb") as fh:
        fh.write(_PETI_HEADER.pack(b"PETI", width, height, image.shape[1]))
        fh.write(image.tobytes())


def read_peti(path) -> tuple[np.ndarray, int, int]:
    raw = Path(path).read_bytes()
    magic, w, h, k = _PETI_HEADER.unpack_from(raw)
    if magic != b"PETI":
        raise ValueError(f"{path}: not a PETI file")
    body = np.frombuffer(raw, dtype="<f8", offset=_PETI_HEADER.size)
    if body.size != w * h * k:
        raise ValueError(f"{path}: truncated PETI payload")
    return body.reshape(w * h, k).astype(float), w, h


# --- compiled pieces used by the SMC kernel --------------------------------
# fpar: phi_lo, phi_hi, th_lo, th_hi, gamma a, gamma b, error kind,
#       n_seg, n_class, n_frames, log phi range, log theta range,
#       gamma log-normaliser, sum of log durations, log phi bounds,
#       log theta bounds, marginal normal-error constant, then the
#       compartment count of each state.
# ivec: segment -> class (n_seg), frame -> grid index (n_frames).
# fmat rows: p_start, p_end, class lengths, frame durations (zero padded).

@numba.njit(cache=True, inline="always")
def kernel_n_comp(m, fpar):
    return int(fpar[19 + m])


@numba.njit(cache=True)
def kernel_loglik(eta, i, y, fpar, ivec, fmat, m, buf, work, ct):
    n_seg = int(fpar[7])
    n_class = int(fpar[8])
    k = int(fpar[9])
    M = kernel_n_comp(m, fpar)
    h_class = ivec[:n_seg]
    fidx = ivec[n_seg:n_seg + k]
    p_start = fmat[0, :n_seg]
    p_end = fmat[1, :n_seg]
    class_h = fmat[2, :n_class]
    dur = fmat[3, :k]
    for f in range(k):
        ct[f] = 0.0
    for c in range(M):
        phi = math.exp(eta[c, i])
        _convolve(math.exp(eta[M + c, i]), h_class, class_h, p_start, p_end, buf, work)
        for f in range(k):
            ct[f] += phi * buf[fidx[f]]
    ll = 0.0
    if fpar[6] == 0:
        # precision integrated out against its gamma prior
        ss = 0.0
        prod = 1.0
        log_ct = 0.0
        for f in range(k):
            c_t = ct[f]
            if not c_t > 0.0:
                return -math.inf
            r = y[f] - c_t
            ss += r * r * dur[f] / c_t
            # sum of log iota taken through products of ten frames at a time
            prod *= c_t
            if f % 10 == 9 or prod < 1e-250 or prod > 1e250:
                log_ct += math.log(prod)
                prod = 1.0
        log_ct += math.log(prod)
        return fpar[18] - 0.5 * (log_ct - fpar[13]) - (fpar[4] + 0.5 * k) * math.log(fpar[5] + 0.5 * ss)
    logtau = eta[2 * M, i]
    tau = math.exp(logtau)
    u = 1.0 / (1.0 + math.exp(-eta[2 * M + 1, i]))
    nu = 2.0 / u
    if nu < 1e7:
        lgd = math.lgamma(0.5 * (nu + 1.0)) - math.lgamma(0.5 * nu)
    else:
        x = 0.5 * nu
        lgd = 0.5 * math.log(x) - 1.0 / (8.0 * x) + 1.0 / (192.0 * x**3)
    for f in range(k):
        c_t = ct[f]
        if not c_t > 0.0:
            return -math.inf
        iota = c_t / dur[f]
        r = y[f] - c_t
        ll += lgd + 0.5 * (logtau - math.log(iota * math.pi * nu)) - 0.5 * (nu + 1.0) * math.log1p(tau * r * r / (nu * iota))
    return ll


@numba.njit(cache=True, inline="always")
def _softplus(x):
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@numba.njit(cache=True)
def kernel_logprior(eta, i, m, fpar, fmat):
    """Prior density of the unconstrained coordinates, Jacobians included."""
    M = kernel_n_comp(m, fpar)
    # compartments are exchangeable, so the sampler works on the cone of
    # ascending theta with the prior density scaled by M!
    lp = math.lgamma(M + 1.0)
    for c in range(1, M):
        if eta[M + c, i] < eta[M + c - 1, i]:
            return -math.inf
    for j in range(2 * M):
        e = eta[j, i]
        if j < M:
            if e < fpar[14] or e > fpar[15]:
                return -math.inf
            lp += e - fpar[10]
        else:
            if e < fpar[16] or e > fpar[17]:
                return -math.inf
            lp += e - fpar[11]
    if fpar[6] == 1:
        e = eta[2 * M, i]
        lp += fpar[4] * e - fpar[5] * math.exp(e) + fpar[12]
        e = eta[2 * M + 1, i]
        lp -= _softplus(-e) + _softplus(e)
    return lp


@numba.njit(cache=True)
def kernel_sample_prior(gen, eta, m, fpar, fmat):
    M = kernel_n_comp(m, fpar)
    a = fpar[4]
    b = fpar[5]
    for i in range(eta.shape[1]):
        for c in range(M):
            eta[c, i] = math.log(fpar[0] + (fpar[1] - fpar[0]) * gen.random())
        for c in range(M):
            eta[M + c, i] = math.log(fpar[2] + (fpar[3] - fpar[2]) * gen.random())
        # insertion sort of the theta block
        for c in range(1, M):
            x = eta[M + c, i]
            j = c - 1
            while j >= 0 and eta[M + j, i] > x:
                eta[M + j + 1, i] = eta[M + j, i]
                j -= 1
            eta[M + j + 1, i] = x
        if fpar[6] == 1:
            g = gen.standard_gamma(a + 1.0)
            eta[2 * M, i] = math.log(g) + math.log(1.0 - gen.random()) / a - math.log(b)
            u = 1.0 - gen.random()
            eta[2 * M + 1, i] = math.log(u) - math.log1p(-u) if u < 1.0 else 40.0


@numba.njit(cache=True)
def kernel_derived(eta, i, m, fpar):
    M = kernel_n_comp(m, fpar)
    vd = 0.0
    for c in range(M):
        vd += math.exp(eta[c, i] - eta[M + c, i])
    return vd


class PetFamily(NodeModelFamily):
    """Compartmental models with 1..3 tissue compartments as a node family."""

    def __init__(self, inp: PlasmaInput, schedule: FrameSchedule, prior: PetPrior | None = None,
                 states: Sequence[int] = (1, 2, 3), truth: Mapping[int, CompartmentParams] | None = None):
        self.input = inp
        self.schedule = schedule
        self.prior = prior or PetPrior()
        self.states = tuple(int(s) for s in states)
        if any(s < 1 for s in self.states):
            raise ValueError("compartment counts must be positive")
        self.truth = dict(truth if truth is not None else DEFAULT_TRUTH)
        self.grid = ConvolutionGrid.build(inp, schedule.ends)
        self._kernel = None

    @property
    def n_obs(self) -> int:
        return self.schedule.n_frames

    @property
    def err_kind(self) -> int:
        return ERR_T if self.prior.error == "t" else ERR_NORMAL

    def dim(self, m):
        """Sampled coordinates; the normal-error precision is integrated out."""
        return 2 * self.states[m] + (2 if self.err_kind == ERR_T else 0)

    def log_likelihood(self, y, theta: CompartmentParams, m):
        fn = log_likelihood_t if theta.error == "t" else log_likelihood_normal
        return fn(y, theta, self.input, self.schedule, self.grid)

    def sample_prior(self, m, rng):
        return sample_prior(self.states[m], self.prior, rng)

    def log_prior_density(self, theta, m):
        if theta.order != self.states[m]:
            return -math.inf
        return log_prior_density(theta, self.prior)

    def sampled_log_likelihood(self, y, theta: CompartmentParams, m):
        """The likelihood the SMC sampler tempers: marginal over lambda for normal errors."""
        if theta.error == "t":
            return log_likelihood_t(y, theta, self.input, self.schedule, self.grid)
        return log_marginal_likelihood_normal(y, theta, self.input, self.schedule, self.prior, self.grid)

    def derived_quantity(self, theta, m):
        return volume_of_distribution(theta)

    def true_derived(self, m):
        return volume_of_distribution(self.truth[self.states[m]])

    def to_eta(self, theta: CompartmentParams) -> np.ndarray:
        parts = [np.log(theta.phi), np.log(theta.theta)]
        if theta.error == "t":
            u = 2.0 / theta.nu
            parts.append([theta.log_tau, math.log(u) - math.log1p(-u)])
        return np.concatenate(parts)

    def from_eta(self, eta, m, y=None) -> CompartmentParams:
        """Parameters from sampled coordinates.

        For normal errors ``lambda`` is set to its conditional mean given ``y``
        (or 1 without data).
        """
        M = self.states[m]
        eta = np.asarray(eta, dtype=float)
        phi, theta = np.exp(eta[:M]), np.exp(eta[M:2 * M])
        if self.err_kind == ERR_NORMAL:
            out = CompartmentParams.normal(phi, theta)
            if y is not None:
                shape, rate = lambda_conditional(y, out, self.input, self.schedule, self.prior, self.grid)
                out = CompartmentParams.normal(phi, theta, shape / rate)
            return out.sorted()
        u = 1.0 / (1.0 + math.exp(-eta[2 * M + 1]))
        return CompartmentParams(phi, theta, log_tau=float(eta[2 * M]), nu=2.0 / u).sorted()

    def kernel_data(self) -> KernelData:
        if self._kernel is None:
            g, p = self.grid, self.prior
            n_seg, n_class, k = g.h_class.size, g.class_h.size, self.n_obs
            a, b = p.gamma_shape, p.gamma_rate
            consts = [math.log(p.phi_bounds[1] - p.phi_bounds[0]),
                      math.log(p.theta_bounds[1] - p.theta_bounds[0]),
                      a * math.log(b) - math.lgamma(a), float(np.sum(np.log(self.schedule.durations)))]
            marginal = consts[2] + math.lgamma(a + 0.5 * k) - 0.5 * k * math.log(2 * math.pi)
            fpar = np.array([*p.phi_bounds, *p.theta_bounds, a, b, self.err_kind, n_seg, n_class, k,
                             *consts, *np.log(p.phi_bounds), *np.log(p.theta_bounds), marginal,
                             *self.states],
                            dtype=float)
            ivec = np.concatenate([g.h_class, g.eval_idx]).astype(np.int64)
            width = max(n_seg, n_class, k)
            fmat = np.zeros((4, width))
            fmat[0, :n_seg] = g.p_start
            fmat[1, :n_seg] = g.p_end
            fmat[2, :n_class] = g.class_h
            fmat[3, :k] = self.schedule.durations
            fns = (kernel_loglik, kernel_logprior, kernel_sample_prior, kernel_derived)
            self._kernel = KernelData(KIND_PET, fpar, ivec, fmat, fns)
        return self._kernel

    def simulate(self, field, rng, noise_level: float = 0.5):
        return simulate_pet_image(field, self.truth, self.input, self.schedule, noise_level, rng,
                                  self.states, self.grid)
