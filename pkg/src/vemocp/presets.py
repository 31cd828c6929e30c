"""Built-in benchmark problems and JSON problem configs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .expr import parse_expression
from .forms import STABILIZED
from .mesh import TAG_PRESETS, TEST2_OBS, Rect
from .ocp import OcpConfig

Field = Callable[[np.ndarray, np.ndarray], np.ndarray]
Grad = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class ExactSolution:
    y: Field
    grad_y: Grad
    p: Field
    grad_p: Grad
    u: Field


@dataclass(frozen=True)
class ProblemPreset:
    name: str
    rect: Rect
    tags: str
    alpha: float
    kappa: str
    gamma: str
    f: str
    y_d: str
    g: str
    obs_rects: tuple[Rect, ...] | None = None
    exact: ExactSolution | None = field(default=None, compare=False)

    def config(self, k: int = 1, sigma: float = 1.0, k_u: int | None = None, scheme: str = STABILIZED) -> OcpConfig:
        return config_from_dict(self.to_dict(k=k, sigma=sigma, k_u=k_u, scheme=scheme))

    def to_dict(self, k: int = 1, sigma: float | None = 1.0, k_u: int | None = None, scheme: str = STABILIZED) -> dict:
        return {
            "k": k,
            "k_u": k if k_u is None else k_u,
            "sigma": sigma,
            "alpha": self.alpha,
            "scheme": scheme,
            "kappa": self.kappa,
            "gamma": self.gamma,
            "f": self.f,
            "y_d": self.y_d,
            "g": self.g,
            "tags": self.tags,
        }


def _test1_exact() -> ExactSolution:
    pi = np.pi

    def y(x1, x2):
        return (1.0 - x1) * np.sin(pi * x2)

    def grad_y(x1, x2):
        return -np.sin(pi * x2), pi * (1.0 - x1) * np.cos(pi * x2)

    def p(x1, x2):
        return np.sin(pi * x2) * np.cos(0.5 * pi * x1)

    def grad_p(x1, x2):
        return -0.5 * pi * np.sin(pi * x2) * np.sin(0.5 * pi * x1), pi * np.cos(pi * x2) * np.cos(0.5 * pi * x1)

    def u(x1, x2):
        return np.sin(pi * x2) + 0.0 * x1

    return ExactSolution(y, grad_y, p, grad_p, u)


TEST1 = ProblemPreset(
    name="test1",
    rect=(0.0, 0.0, 1.0, 1.0),
    tags="test1",
    alpha=1.0,
    kappa="1",
    gamma="1",
    f="(1 - x1)*sin(pi*x2)*(1 + pi**2)",
    y_d="sin(pi*x2)*((1 - x1) + (5*pi**2/4 + 1)*cos(pi*x1/2))",
    g="0",
    exact=_test1_exact(),
)

TEST2 = ProblemPreset(
    name="test2",
    rect=(0.0, 0.0, 2.0, 1.0),
    tags="test2",
    alpha=0.07,
    kappa="1/12",
    gamma="1",
    f="0",
    y_d="2.5",
    g="1",
    obs_rects=TEST2_OBS,
)

PRESETS = {"test1": TEST1, "test2": TEST2}

SWEEP_SIGMAS = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0)


def config_from_dict(data: dict) -> OcpConfig:
    """Build an :class:`OcpConfig` from the JSON problem-config layout."""
    known = {"k", "k_u", "sigma", "alpha", "scheme", "kappa", "gamma", "f", "y_d", "g", "tags", "tol", "preset", "mesh", "domain"}
    extra = set(data) - known
    if extra:
        raise ValueError(f"unknown config keys: {sorted(extra)}")
    base = PRESETS[data["preset"]].to_dict() if "preset" in data else {}
    merged = {**base, **data}
    k = int(merged.get("k", 1))
    sigma = merged.get("sigma")
    return OcpConfig(
        k=k,
        k_u=int(merged["k_u"]) if merged.get("k_u") is not None else None,
        sigma=1.0 if sigma is None else float(sigma),
        alpha=float(merged.get("alpha", 1.0)),
        kappa=parse_expression(merged.get("kappa", "1")),
        gamma=parse_expression(merged.get("gamma", "1")),
        f=parse_expression(merged.get("f", "0")),
        y_d=parse_expression(merged.get("y_d", "0")),
        g=parse_expression(merged.get("g", "0")),
        scheme=merged.get("scheme", STABILIZED),
        tol=float(merged.get("tol", 1e-10)),
    )


def tag_rule(name: str):
    try:
        return TAG_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown tag preset {name!r}; choose from {sorted(TAG_PRESETS)}") from None
