"""Abstract node-model family.

A family bundles, for every model order ``M`` in its state set, a likelihood
``f_M(y | theta)``, a parameter prior and a scalar derived quantity.  The SMC
engine works on an unconstrained parametrisation ``eta`` and needs compiled
kernels, which each family exposes through :meth:`kernel_data`.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class KernelData:
    """Packed family constants handed to the compiled SMC kernel.

    ``fpar``/``ivec``/``fmat`` carry the family's numbers in a layout private
    to it; ``fns`` holds its compiled ``(loglik, logprior, sample_prior,
    derived)`` functions, all with the uniform signatures the kernel expects.
    """

    kind: int
    fpar: np.ndarray
    ivec: np.ndarray
    fmat: np.ndarray
    fns: tuple = field(default=(), compare=False, repr=False)


class NodeModelFamily(ABC):
    """Per-node statistical model indexed by a finite set of model orders."""

    states: tuple = ()

    @property
    def n_states(self) -> int:
        return len(self.states)

    def state_index(self, label) -> int:
        try:
            return self.states.index(label)
        except ValueError:
            raise ValueError(f"unknown model order {label!r}; expected one of {self.states}") from None

    @property
    @abstractmethod
    def n_obs(self) -> int:
        """Length of the data vector observed at each node."""

    @abstractmethod
    def dim(self, m: int) -> int:
        """Dimension of the parameter vector for model index ``m``."""

    @abstractmethod
    def log_likelihood(self, y, theta, m: int) -> float: ...

    @abstractmethod
    def sample_prior(self, m: int, rng: np.random.Generator): ...

    @abstractmethod
    def log_prior_density(self, theta, m: int) -> float: ...

    @abstractmethod
    def derived_quantity(self, theta, m: int) -> float: ...

    @abstractmethod
    def kernel_data(self) -> KernelData: ...

    @abstractmethod
    def simulate(self, field: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Data array of shape ``(n_nodes, n_obs)`` for a field of model indices."""

    @property
    def has_exact_marginal(self) -> bool:
        return False

    def exact_log_marginal(self, y, m: int) -> float:
        raise NotImplementedError(f"{type(self).__name__} has no closed-form marginal likelihood")

    def true_derived(self, m: int) -> float:
        """Derived quantity of the generating parameters, where defined."""
        raise NotImplementedError
