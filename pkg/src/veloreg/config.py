"""Run configuration with the documented default parameter values."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .fields import RegNorm

__all__ = ["RegConfig", "DEFAULTS"]

DEFAULTS = {
    "beta_w": 1e-4,
    "eps_g": 5e-2,
    "n_t": 4,
    "eps_J_h1div": 0.25,
    "eps_J_h2": 0.1,
}


@dataclass
class RegConfig:
    """Everything that defines a registration run.

    ``beta_v`` has no default: it must be given or found by the beta search.
    ``eps_J`` defaults to 0.25 for the H1-div norm and 0.1 otherwise.
    """

    beta_v: float | None = None
    norm: RegNorm = field(default_factory=lambda: RegNorm("h1", div_penalty=True, beta_w=DEFAULTS["beta_w"]))
    incompressible: bool = False
    n_t: int = DEFAULTS["n_t"]
    eps_g: float = DEFAULTS["eps_g"]
    tol_mode: str = "squared"
    abs_grad_tol: float = 1e-6
    max_newton: int = 50
    max_krylov: int = 100
    eps_J: float | None = None
    precond: str = "spectral"
    inner: str = "pcg:0.1"
    continuation: str = "none"
    beta_search: bool = False
    sigma: float = 1.0
    precision: str = "f64"
    threads: int = 1
    gauss_newton: bool = True
    cache_state_gradients: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.beta_v is not None and not self.beta_v > 0:
            raise ValueError("beta_v must be positive")
        if self.n_t < 1:
            raise ValueError("n_t must be >= 1")
        if not self.eps_g > 0 or not self.abs_grad_tol > 0:
            raise ValueError("tolerances must be positive")
        if self.max_newton < 1 or self.max_krylov < 1:
            raise ValueError("iteration limits must be >= 1")
        if self.tol_mode not in ("squared", "norm"):
            raise ValueError("tol_mode must be 'squared' or 'norm'")
        if self.precond not in ("spectral", "twolevel"):
            raise ValueError("precond must be 'spectral' or 'twolevel'")
        self.inner_solver()
        if self.continuation not in ("none", "parameter", "grid", "scale"):
            raise ValueError(f"unknown continuation {self.continuation!r}")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")
        if self.eps_J is not None and not 0 < self.eps_J < 1:
            raise ValueError("eps_J must lie in (0, 1)")
        if self.incompressible and self.norm.div_penalty:
            raise ValueError("divergence penalty and incompressibility are exclusive")

    @property
    def beta_w(self) -> float:
        return self.norm.beta_w

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def jbound(self) -> float:
        if self.eps_J is not None:
            return self.eps_J
        return DEFAULTS["eps_J_h1div"] if self.norm.div_penalty else DEFAULTS["eps_J_h2"]

    def inner_solver(self) -> tuple[str, float]:
        """Parse ``pcg:<kappa>`` or ``cheb:<k>``."""
        kind, _, arg = self.inner.partition(":")
        if kind == "pcg":
            kappa = float(arg) if arg else 0.1
            if not 0 < kappa < 1:
                raise ValueError("pcg inner tolerance factor must lie in (0, 1)")
            return "pcg", kappa
        if kind == "cheb":
            k = int(arg) if arg else 10
            if k < 1:
                raise ValueError("cheb iteration count must be >= 1")
            return "cheb", k
        raise ValueError(f"unknown inner solver {self.inner!r}")

    def replace(self, **changes) -> "RegConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["norm"] = self.norm.label
        d["beta_w"] = self.beta_w
        d["eps_J"] = self.jbound
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RegConfig":
        d = dict(d)
        beta_w = float(d.pop("beta_w", DEFAULTS["beta_w"]))
        norm = d.pop("norm", "h1div")
        if isinstance(norm, str):
            norm = RegNorm.parse(norm, beta_w=beta_w)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(norm=norm, **d)
