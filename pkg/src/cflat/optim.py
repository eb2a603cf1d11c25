"""Optimizer steps: plain SGD, the zeroth-order perturbed step (SAM), and the
combined zeroth/first-order flatness step, plus radius/learning-rate
schedulers and the partial-iteration application gate.

The combined step executes, per iteration (eps is a small guard constant):

    g    = grad l(theta)
    eps0 = rho * g / (|g| + eps)              # ascent inside the rho-ball
    g0   = grad l(theta + eps0)               # zeroth-order surrogate gradient
    h    = hess l(theta) . (g / (|g| + eps))  # HVP along the normalized gradient
    eps1 = rho * h / (|h| + eps)
    u    = grad l(theta + eps1); u /= (|u| + eps)
    g1   = hess l(theta + eps1) . u           # first-order (curvature) gradient
    theta' = theta - eta_i * (g0 + lam * g1)

With lam = 0 this reduces exactly to the SAM step, and SAM with rho = 0
reduces exactly to SGD (bit-level, given identical batches and seeds).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import CompGraph, grad_and_hvp, gradient
from .errors import ContractViolation, NonFiniteError
from .params import ParamVector

SCHEDULERS = ("constant", "theory", "linear_coupled")


@dataclass
class CFlatConfig:
    """Hyper-parameters of the combined-flatness step.

    rho: neighborhood radius; lam: first-order trade-off; eta: base learning
    rate; eps_guard: small normalization guard; apply_ratio: fraction of each
    epoch's iterations that run the full step (rest fall back to SGD);
    abs_perturbation: use the elementwise |g| numerator for eps0 instead of
    the signed gradient (kept for comparison; the signed form is the default
    because |g| does not implement gradient ascent).
    """

    rho: float = 0.1
    lam: float = 1.0
    eta: float = 0.05
    eps_guard: float = 1e-12
    apply_ratio: float = 1.0
    scheduler: str = "constant"
    abs_perturbation: bool = False

    def __post_init__(self):
        if self.rho < 0:
            raise ContractViolation(f"rho must be >= 0, got {self.rho}")
        if self.lam < 0:
            raise ContractViolation(f"lam must be >= 0, got {self.lam}")
        if self.eta <= 0:
            raise ContractViolation(f"eta must be > 0, got {self.eta}")
        if self.eps_guard <= 0:
            raise ContractViolation(f"eps_guard must be > 0, got {self.eps_guard}")
        if not 0.0 <= self.apply_ratio <= 1.0:
            raise ContractViolation(f"apply_ratio must be in [0, 1], got {self.apply_ratio}")
        if self.scheduler not in SCHEDULERS:
            raise ContractViolation(f"scheduler must be one of {SCHEDULERS}, got {self.scheduler!r}")


@dataclass
class StepReport:
    """Per-iteration diagnostics appended to the run's steps.csv.

    cgrad_norm is |g0 + lam * rho_i * g1|: the norm of the combined-flatness
    loss gradient. The update itself uses g0 + lam * g1 (no rho factor), but
    the loss-gradient form is the quantity whose running mean square the
    convergence bound controls, so it is tracked separately.
    """

    iteration: int = 0
    eta_i: float = 0.0
    rho_i: float = 0.0
    g_norm: float = 0.0
    g0_norm: float = 0.0
    g1_norm: float = 0.0
    perturb0_norm: float = 0.0
    perturb1_norm: float = 0.0
    cgrad_norm: float = 0.0
    applied_cflat: bool = False

    CSV_COLUMNS = ("iter", "eta_i", "rho_i", "g_norm", "g0_norm", "g1_norm", "applied_cflat")

    def csv_row(self) -> list[str]:
        return [
            str(self.iteration),
            repr(float(self.eta_i)),
            repr(float(self.rho_i)),
            repr(float(self.g_norm)),
            repr(float(self.g0_norm)),
            repr(float(self.g1_norm)),
            "1" if self.applied_cflat else "0",
        ]


@dataclass
class TheoryParams:
    """Constants of the convergence bound: smoothness beta, loss bound M,
    gradient variance sigma^2, batch size b, iterations per task."""

    beta: float
    big_m: float
    sigma2: float
    batch: int
    n_iters: int

    def __post_init__(self):
        for name in ("beta", "big_m", "sigma2", "batch", "n_iters"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")


def convergence_bound(params: TheoryParams, lam: float, n: int) -> float:
    """Upper bound on the running mean of |grad l^C|^2 after n iterations."""
    root = np.sqrt(n)
    return (
        8.0 * params.big_m * params.beta / root
        + 16.0 * params.sigma2 / (3.0 * params.batch * root)
        + 32.0 * lam**2 * (2.0 * root - 1.0) / (params.beta**2 * n)
    )


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, ParamVector) else np.asarray(x, dtype=np.float64).ravel()


def _like(template, data: np.ndarray):
    return template.like(data) if isinstance(template, ParamVector) else data


def _masked(vec: np.ndarray, frozen_mask) -> np.ndarray:
    if frozen_mask is None:
        return vec
    return np.where(frozen_mask, 0.0, vec)


def _check_finite(vec: np.ndarray, stage: str) -> np.ndarray:
    if not np.all(np.isfinite(vec)):
        raise NonFiniteError(f"non-finite values at stage {stage!r}", stage=stage)
    return vec


def _grad_at(graph: CompGraph, point: np.ndarray, frozen_mask, stage: str) -> np.ndarray:
    try:
        vec = _data(gradient(graph, point))
    except NonFiniteError as err:
        raise NonFiniteError(
            f"non-finite loss while computing stage {stage!r}", stage=stage, node=err.node
        ) from err
    return _check_finite(_masked(vec, frozen_mask), stage)


def _grad_and_hvp_at(graph: CompGraph, point: np.ndarray, frozen_mask, make_direction,
                     grad_stage: str, hvp_stage: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        g_raw, h_raw = grad_and_hvp(graph, point, make_direction)
    except NonFiniteError as err:
        raise NonFiniteError(
            f"non-finite loss while computing stage {grad_stage!r}",
            stage=grad_stage,
            node=err.node,
        ) from err
    g = _check_finite(_masked(_data(g_raw), frozen_mask), grad_stage)
    h = _check_finite(_masked(_data(h_raw), frozen_mask), hvp_stage)
    return g, h


def sgd_step(theta, grad, eta: float, frozen_mask=None):
    """theta' = theta - eta * grad (frozen coordinates untouched)."""
    t = _data(theta)
    g = _masked(_data(grad), frozen_mask)
    if g.size != t.size:
        raise ContractViolation(f"gradient length {g.size} != parameter length {t.size}")
    return _like(theta, t - eta * g)


def sam_perturbation(grad, rho: float, eps_guard: float):
    """eps0 = rho * g / (|g|_2 + eps); norm is at most rho."""
    if rho < 0:
        raise ContractViolation(f"rho must be >= 0, got {rho}")
    g = _data(grad)
    return _like(grad, rho * g / (np.linalg.norm(g) + eps_guard))


def sam_step(graph: CompGraph, theta, rho: float, eta: float, eps_guard: float = 1e-12,
             frozen_mask=None):
    """Zeroth-order perturbed step: descend the gradient taken at theta + eps0."""
    t = _data(theta)
    g = _grad_at(graph, t, frozen_mask, "g")
    eps0 = rho * g / (np.linalg.norm(g) + eps_guard)
    g0 = _grad_at(graph, t + eps0, frozen_mask, "g0")
    report = StepReport(
        g_norm=float(np.linalg.norm(g)),
        g0_norm=float(np.linalg.norm(g0)),
        perturb0_norm=float(np.linalg.norm(eps0)),
        cgrad_norm=float(np.linalg.norm(g0)),
        applied_cflat=False,
    )
    return _like(theta, t - eta * g0), report


def cflat_step(graph: CompGraph, theta, config: CFlatConfig, step_index: int = 1,
               eta_i: Optional[float] = None, rho_i: Optional[float] = None,
               frozen_mask=None):
    """One combined-flatness step (see module docstring for the sequence).

    eta_i/rho_i override the config values when a scheduler drives them.
    When lam == 0 the first-order branch is skipped: the update is then
    bit-identical to sam_step and the report's g1 fields stay 0.
    """
    if step_index < 1:
        raise ContractViolation(f"step_index must be >= 1, got {step_index}")
    eta = config.eta if eta_i is None else float(eta_i)
    rho = config.rho if rho_i is None else float(rho_i)
    eps = config.eps_guard
    t = _data(theta)

    def normalized(vec: np.ndarray) -> np.ndarray:
        return vec / (np.linalg.norm(vec) + eps)

    def masked_normalized(vec: np.ndarray) -> np.ndarray:
        return normalized(_masked(vec, frozen_mask))

    if config.lam == 0.0:
        g = _grad_at(graph, t, frozen_mask, "g")
        h = None
        h_norm = 0.0
    else:
        g, h = _grad_and_hvp_at(graph, t, frozen_mask, masked_normalized, "g", "h")
        h_norm = float(np.linalg.norm(h))

    numer = np.abs(g) if config.abs_perturbation else g
    eps0 = rho * numer / (np.linalg.norm(g) + eps)
    g0 = _grad_at(graph, t + eps0, frozen_mask, "g0")

    if config.lam == 0.0:
        update = g0
        g1_norm = 0.0
        eps1_norm = 0.0
        cgrad_norm = float(np.linalg.norm(g0))
    else:
        eps1 = rho * h / (h_norm + eps)
        eps1_norm = float(np.linalg.norm(eps1))
        _, g1 = _grad_and_hvp_at(graph, t + eps1, frozen_mask, masked_normalized, "g1", "g1")
        g1_norm = float(np.linalg.norm(g1))
        update = g0 + config.lam * g1
        cgrad_norm = float(np.linalg.norm(g0 + config.lam * rho * g1))

    report = StepReport(
        iteration=step_index,
        eta_i=eta,
        rho_i=rho,
        g_norm=float(np.linalg.norm(g)),
        g0_norm=float(np.linalg.norm(g0)),
        g1_norm=g1_norm,
        perturb0_norm=float(np.linalg.norm(eps0)),
        perturb1_norm=eps1_norm,
        cgrad_norm=cgrad_norm,
        applied_cflat=True,
    )
    return _like(theta, t - eta * update), report


def schedule(config: CFlatConfig, i: int, eta_bounds=None, rho_bounds=None,
             total_iters: Optional[int] = None) -> tuple[float, float]:
    """Per-iteration (eta_i, rho_i) for 1-based iteration i.

    theory:          eta_i = eta / sqrt(i), rho_i = rho / i**0.25
    linear_coupled:  eta_i follows a cosine decay from eta_+ to eta_- over
                     total_iters, and rho_i is the linear image of eta_i in
                     [rho_-, rho_+]
    constant:        unchanged
    """
    if i < 1:
        raise ContractViolation(f"iteration index must be >= 1, got {i}")
    if config.scheduler == "constant":
        return config.eta, config.rho
    if config.scheduler == "theory":
        return config.eta / np.sqrt(i), config.rho / i**0.25
    # linear_coupled
    if eta_bounds is None or rho_bounds is None:
        raise ContractViolation("linear_coupled scheduler needs eta_bounds and rho_bounds")
    eta_lo, eta_hi = float(eta_bounds[0]), float(eta_bounds[1])
    rho_lo, rho_hi = float(rho_bounds[0]), float(rho_bounds[1])
    if eta_lo > eta_hi or rho_lo > rho_hi:
        raise ContractViolation("scheduler bounds must be ordered (low, high)")
    if eta_hi == eta_lo:
        raise ContractViolation("eta bounds must differ in linear_coupled mode")
    if total_iters is None or total_iters < 1:
        raise ContractViolation("linear_coupled scheduler needs total_iters >= 1")
    if total_iters == 1:
        eta_i = eta_hi
    else:
        frac = (i - 1) / (total_iters - 1)
        eta_i = eta_lo + (eta_hi - eta_lo) * 0.5 * (1.0 + np.cos(np.pi * min(frac, 1.0)))
    rho_i = rho_lo + (rho_hi - rho_lo) / (eta_hi - eta_lo) * (eta_i - eta_lo)
    return float(eta_i), float(rho_i)


def coupled_rho(eta_i: float, eta_bounds, rho_bounds) -> float:
    """rho_i = rho_- + (rho_+ - rho_-)/(eta_+ - eta_-) * (eta_i - eta_-)."""
    eta_lo, eta_hi = float(eta_bounds[0]), float(eta_bounds[1])
    rho_lo, rho_hi = float(rho_bounds[0]), float(rho_bounds[1])
    if eta_hi == eta_lo:
        raise ContractViolation("eta bounds must differ in linear_coupled mode")
    return rho_lo + (rho_hi - rho_lo) / (eta_hi - eta_lo) * (eta_i - eta_lo)


def apply_gate(config: CFlatConfig, i: int, iters_per_epoch: int, rng=None) -> bool:
    """True for exactly ceil(apply_ratio * iters_per_epoch) iterations per epoch.

    Deterministic rule: the first k iterations of each epoch apply the full
    step; the rest fall back to SGD. `rng` is accepted for interface
    stability but unused (selection is deliberately not sampled).
    """
    if iters_per_epoch < 1:
        raise ContractViolation(f"iters_per_epoch must be >= 1, got {iters_per_epoch}")
    if i < 1:
        raise ContractViolation(f"iteration index must be >= 1, got {i}")
    k = int(np.ceil(config.apply_ratio * iters_per_epoch))
    position = (i - 1) % iters_per_epoch + 1
    return position <= k
