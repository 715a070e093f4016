"""Gaussian toy model with a conjugate normal prior on the node mean.

``mu ~ N(mu0[M], sigma0^2)`` and ``y | mu ~ N(mu, sigma^2)``, so the marginal
likelihood is available in closed form and serves as an oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numba
import numpy as np

from .base import KernelData, NodeModelFamily

KIND_TOY = 0
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ToyModelParams:
    mu0: Mapping[object, float] = field(default_factory=lambda: {"A": 5.0, "B": -5.0})
    sigma0: float = 5.0
    sigma: float = 1.0

    def __post_init__(self):
        if not (self.sigma0 > 0 and self.sigma > 0):
            raise ValueError("sigma0 and sigma must be positive")
        if len(self.mu0) < 2:
            raise ValueError("the toy model needs at least two model orders")


def _normal_logpdf(x, mean, sd):
    z = (np.asarray(x, dtype=float) - mean) / sd
    return -0.5 * z * z - math.log(sd) - 0.5 * _LOG_2PI


def toy_exact_log_marginal(y, M, params: ToyModelParams):
    """log N(y; mu0[M], sigma^2 + sigma0^2)."""
    return _normal_logpdf(y, params.mu0[M], math.sqrt(params.sigma**2 + params.sigma0**2))


def toy_log_likelihood(y, mu, params: ToyModelParams):
    return _normal_logpdf(y, mu, params.sigma)


def toy_log_prior(mu, M, params: ToyModelParams):
    return _normal_logpdf(mu, params.mu0[M], params.sigma0)


def toy_sample_prior(M, params: ToyModelParams, rng: np.random.Generator, size=None):
    return params.mu0[M] + params.sigma0 * rng.standard_normal(size)


def toy_simulate(field, params: ToyModelParams, rng: np.random.Generator, states=None):
    """Simulate one observation per node.

    ``field`` holds indices into ``states`` (default: the keys of ``mu0``).
    Two standard normals are drawn per node whatever its model, so changing
    one node's model leaves every other pixel bit-identical.
    """
    states = tuple(params.mu0) if states is None else tuple(states)
    field = np.asarray(field)
    mu0 = np.array([params.mu0[s] for s in states])[field]
    z = rng.standard_normal((2, field.size))
    mu = mu0 + params.sigma0 * z[0]
    return mu + params.sigma * z[1]


def posterior_mean(y, M, params: ToyModelParams):
    s0, s = params.sigma0**2, params.sigma**2
    return (s0 * y + s * params.mu0[M]) / (s0 + s)


# --- compiled pieces used by the SMC kernel --------------------------------

# fpar: sigma0, sigma, then the two normal log-normalisers; fmat row 0: mu0

@numba.njit(cache=True, inline="always")
def kernel_loglik(eta, i, y, fpar, ivec, fmat, m, buf, work, ct):
    r = (y[0] - eta[0, i]) / fpar[1]
    return fpar[3] - 0.5 * r * r


@numba.njit(cache=True, inline="always")
def kernel_logprior(eta, i, m, fpar, fmat):
    r = (eta[0, i] - fmat[0, m]) / fpar[0]
    return fpar[2] - 0.5 * r * r


@numba.njit(cache=True, inline="always")
def kernel_sample_prior(gen, eta, m, fpar, fmat):
    for i in range(eta.shape[1]):
        eta[0, i] = fmat[0, m] + fpar[0] * gen.standard_normal()


@numba.njit(cache=True, inline="always")
def kernel_derived(eta, i, m, fpar):
    return eta[0, i]


class ToyFamily(NodeModelFamily):
    """The conjugate normal toy model as a node-model family."""

    def __init__(self, params: ToyModelParams | None = None):
        self.params = params or ToyModelParams()
        self.states = tuple(self.params.mu0)

    @property
    def n_obs(self) -> int:
        return 1

    def dim(self, m: int) -> int:
        return 1

    def _label(self, m):
        return self.states[m]

    def log_likelihood(self, y, theta, m):
        return float(np.sum(toy_log_likelihood(y, theta, self.params)))

    def sample_prior(self, m, rng):
        return float(toy_sample_prior(self._label(m), self.params, rng))

    def log_prior_density(self, theta, m):
        return float(toy_log_prior(theta, self._label(m), self.params))

    def derived_quantity(self, theta, m):
        return float(theta)

    @property
    def has_exact_marginal(self) -> bool:
        return True

    def exact_log_marginal(self, y, m):
        return float(np.sum(toy_exact_log_marginal(y, self._label(m), self.params)))

    def exact_log_marginal_matrix(self, data: np.ndarray) -> np.ndarray:
        y = np.asarray(data, dtype=float).reshape(-1)
        return np.stack([toy_exact_log_marginal(y, s, self.params) for s in self.states], axis=1)

    def true_derived(self, m):
        return float(self.params.mu0[self._label(m)])

    def kernel_data(self) -> KernelData:
        s0, s = self.params.sigma0, self.params.sigma
        fpar = np.array([s0, s, -math.log(s0) - 0.5 * _LOG_2PI, -math.log(s) - 0.5 * _LOG_2PI])
        fmat = np.array([[self.params.mu0[s] for s in self.states]], dtype=float)
        fns = (kernel_loglik, kernel_logprior, kernel_sample_prior, kernel_derived)
        return KernelData(KIND_TOY, fpar, np.zeros(0, dtype=np.int64), fmat, fns)

    def simulate(self, field, rng):
        return toy_simulate(field, self.params, rng, self.states).reshape(-1, 1)


def write_toy_image(path: str | Path, image: np.ndarray) -> None:
    """CSV grid of reals, one image row per line."""
    image = np.atleast_2d(np.asarray(image, dtype=float))
    lines = [",".join(repr(float(x)) for x in row) for row in image]
    Path(path).write_text("\n".join(lines) + "\n")


def read_toy_image(path: str | Path) -> np.ndarray:
    rows = [line for line in Path(path).read_text().splitlines() if line.strip() and not line.startswith("#")]
    out = [[float(tok) for tok in r.split(",")] for r in rows]
    if len({len(r) for r in out}) != 1:
        raise ValueError(f"{path}: ragged image rows")
    return np.array(out)
