"""Flatness diagnostics: top Hessian eigenvalue by power iteration, Hutchinson
trace estimates, empirical Fisher trace, zeroth/first-order sharpness
estimators over a radius-rho ball, and 2-D loss-surface slices.

All estimators are pure functions of (oracle, point, probe config, seed):
repeated calls are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import ContractViolation
from .rng import Xoshiro256, derive_seed

LossFn = Callable[[np.ndarray], float]
GradFn = Callable[[np.ndarray], np.ndarray]
HvpFn = Callable[[np.ndarray], np.ndarray]

REPORT_FORMAT_VERSION = 1


@dataclass
class ProbeConfig:
    """Sampling plan for the in-ball sharpness estimators.

    n_directions starting points on the rho-sphere, each refined by
    n_ascent_steps of projected ascent (step length defaults to rho/10);
    segment_points adds evenly spaced points toward the max-loss probe so the
    max-gradient probe dominates the loss difference at probe resolution.
    """

    rho: float
    n_directions: int = 64
    n_ascent_steps: int = 10
    seed: int = 0
    ascent_step: Optional[float] = None
    segment_points: int = 16

    def __post_init__(self):
        if self.rho <= 0:
            raise ContractViolation(f"probe rho must be > 0, got {self.rho}")
        if self.n_directions < 1:
            raise ContractViolation("n_directions must be >= 1")
        if self.n_ascent_steps < 0:
            raise ContractViolation("n_ascent_steps must be >= 0")

    @property
    def step(self) -> float:
        return self.rho / 10.0 if self.ascent_step is None else self.ascent_step


@dataclass
class PowerIterationResult:
    value: float
    vector: np.ndarray
    converged: bool
    iterations: int


@dataclass
class TraceEstimate:
    value: float
    std_error: float
    n_probes: int


@dataclass
class SurfaceGrid:
    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray  # shape (len(alphas), len(betas))

    def rows(self) -> list[tuple[float, float, float]]:
        out = []
        for i, a in enumerate(self.alphas):
            for j, b in enumerate(self.betas):
                out.append((float(a), float(b), float(self.losses[i, j])))
        return out


@dataclass
class LandscapeReport:
    lambda_max: float
    hessian_trace: float
    fisher_trace: Optional[float]
    r0_hat: float
    r1_hat: float
    rho_probe: float
    surface: Optional[SurfaceGrid] = None
    eigvec_pair: Optional[tuple[np.ndarray, np.ndarray]] = None
    extras: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        out = {
            "format_version": REPORT_FORMAT_VERSION,
            "lambda_max": float(self.lambda_max),
            "hessian_trace": float(self.hessian_trace),
            "fisher_trace": None if self.fisher_trace is None else float(self.fisher_trace),
            "r0_hat": float(self.r0_hat),
            "r1_hat": float(self.r1_hat),
            "rho_probe": float(self.rho_probe),
        }
        out.update(self.extras)
        if self.eigvec_pair is not None:
            out["eigvec_pair"] = [
                [float(x) for x in self.eigvec_pair[0]],
                [float(x) for x in self.eigvec_pair[1]],
            ]
        if self.surface is not None:
            out["surface"] = [[a, b, l] for a, b, l in self.surface.rows()]
        return out


def power_iteration_lambda_max(hvp_fn: HvpFn, dim: int, tol: float = 1e-6,
                               max_iter: int = 1000, seed: int = 0,
                               deflate: Iterable[tuple[float, np.ndarray]] = ()
                               ) -> PowerIterationResult:
    """Dominant Hessian eigenvalue and unit eigenvector via power iteration.

    `deflate` takes (eigenvalue, eigenvector) pairs already extracted; the
    iteration then runs on H - sum(lam_j v_j v_j^T), which yields the next
    eigenvector for surface slices. Returns the best estimate flagged
    unconverged when max_iter is exhausted.
    """
    deflate = [(float(l), np.asarray(v, dtype=np.float64)) for l, v in deflate]
    gen = Xoshiro256(derive_seed(seed, 0x10E1))
    v = gen.unit_vector(dim)
    lam_prev = None
    lam = 0.0
    for iteration in range(1, max_iter + 1):
        w = np.asarray(hvp_fn(v), dtype=np.float64)
        for lam_j, v_j in deflate:
            w = w - lam_j * float(np.dot(v_j, v)) * v_j
        lam = float(np.dot(v, w))
        norm_w = float(np.linalg.norm(w))
        if norm_w < 1e-300:
            # operator annihilates the probe direction: eigenvalue 0
            return PowerIterationResult(0.0, v, True, iteration)
        v = w / norm_w
        if lam_prev is not None and abs(lam - lam_prev) < tol * max(abs(lam), 1e-300):
            return PowerIterationResult(lam, v, True, iteration)
        lam_prev = lam
    return PowerIterationResult(lam, v, False, max_iter)


def hutchinson_trace(hvp_fn: HvpFn, dim: int, n_probes: int, seed: int = 0) -> TraceEstimate:
    """Rademacher trace estimate: mean of v^T H v with its standard error."""
    if n_probes < 1:
        raise ContractViolation("n_probes must be >= 1")
    gen = Xoshiro256(derive_seed(seed, 0x77AC))
    samples = np.empty(n_probes)
    for k in range(n_probes):
        v = gen.rademacher(dim)
        samples[k] = float(np.dot(v, hvp_fn(v)))
    value = float(np.mean(samples))
    std_error = float(np.std(samples, ddof=1) / np.sqrt(n_probes)) if n_probes > 1 else 0.0
    return TraceEstimate(value, std_error, n_probes)


def fisher_trace(per_example_gradients: Iterable[np.ndarray]) -> float:
    """Trace of the empirical Fisher: mean squared gradient norm per example."""
    total = 0.0
    count = 0
    for g in per_example_gradients:
        g = np.asarray(g, dtype=np.float64)
        total += float(np.dot(g.ravel(), g.ravel()))
        count += 1
    if count == 0:
        raise ContractViolation("fisher_trace needs at least one example")
    return total / count


def _project_ball(x: np.ndarray, center: np.ndarray, rho: float) -> np.ndarray:
    offset = x - center
    norm = float(np.linalg.norm(offset))
    if norm <= rho:
        return x
    return center + offset * (rho / norm)


def probe_points(theta: np.ndarray, probe: ProbeConfig, loss_fn: LossFn = None,
                 grad_fn: GradFn = None) -> list[np.ndarray]:
    """Shared probe set for the two sharpness estimators.

    For each seeded direction: the rho-sphere point, its loss-ascent
    refinement, and its gradient-norm-ascent refinement (directional second
    derivative estimated from two extra gradient calls). Finally the segment
    toward the max-loss probe is sampled so the mean-value witness for
    r0 <= r1 is present in the set. Directions are drawn sequentially from
    one stream, so a larger n_directions yields a superset of probes.
    """
    theta = np.asarray(theta, dtype=np.float64)
    gen = Xoshiro256(derive_seed(probe.seed, 0x0B5E))
    dim = theta.size
    step = probe.step
    fd_h = 1e-5
    points = [theta.copy()]
    for _ in range(probe.n_directions):
        direction = gen.unit_vector(dim)
        x0 = theta + probe.rho * direction
        points.append(x0)
        if probe.n_ascent_steps == 0 or grad_fn is None:
            continue
        # ascend the loss
        x = x0
        for _ in range(probe.n_ascent_steps):
            g = grad_fn(x)
            norm_g = float(np.linalg.norm(g))
            if norm_g < 1e-14:
                break
            x = _project_ball(x + step * g / norm_g, theta, probe.rho)
        points.append(x)
        # ascend the gradient norm: d/dx |grad l| = H ghat, estimated centrally
        y = x0
        for _ in range(probe.n_ascent_steps):
            g = grad_fn(y)
            norm_g = float(np.linalg.norm(g))
            if norm_g < 1e-14:
                break
            ghat = g / norm_g
            hg = (grad_fn(y + fd_h * ghat) - grad_fn(y - fd_h * ghat)) / (2.0 * fd_h)
            norm_hg = float(np.linalg.norm(hg))
            if norm_hg < 1e-14:
                break
            y = _project_ball(y + step * hg / norm_hg, theta, probe.rho)
        points.append(y)
    if loss_fn is not None and probe.segment_points > 0:
        losses = [float(loss_fn(p)) for p in points]
        best = points[int(np.argmax(losses))]
        for t in np.linspace(0.0, 1.0, probe.segment_points + 2)[1:-1]:
            points.append(theta + t * (best - theta))
    return points


def estimate_r0(loss_fn: LossFn, theta, probe: ProbeConfig, grad_fn: GradFn = None,
                points: list[np.ndarray] = None) -> float:
    """Zeroth-order sharpness estimate: max in-ball loss increase over probes.

    A lower bound of the true maximum; pass `points` to share one probe set
    with estimate_r1.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if points is None:
        points = probe_points(theta, probe, loss_fn=loss_fn, grad_fn=grad_fn)
    base = float(loss_fn(theta))
    best = max(float(loss_fn(p)) for p in points)
    return best - base


def estimate_r1(grad_fn: GradFn, theta, probe: ProbeConfig, loss_fn: LossFn = None,
                points: list[np.ndarray] = None) -> float:
    """First-order flatness estimate: rho times the max in-ball gradient norm."""
    theta = np.asarray(theta, dtype=np.float64)
    if points is None:
        points = probe_points(theta, probe, loss_fn=loss_fn, grad_fn=grad_fn)
    best = max(float(np.linalg.norm(grad_fn(p))) for p in points)
    return probe.rho * best


def surface_slice(loss_fn: LossFn, theta, v1, v2, extent: float, resolution: int) -> SurfaceGrid:
    """Loss over theta + alpha*v1 + beta*v2 on a centered uniform lattice.

    v1 and v2 must be unit-norm and orthogonal within 1e-6. extent 0 gives
    the 1x1 grid holding loss(theta); otherwise resolution must be odd so the
    center cell lands exactly on theta.
    """
    theta = np.asarray(theta, dtype=np.float64)
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    for name, v in (("v1", v1), ("v2", v2)):
        if abs(float(np.linalg.norm(v)) - 1.0) > 1e-6:
            raise ContractViolation(f"{name} must be unit-norm")
    if abs(float(np.dot(v1, v2))) > 1e-6:
        raise ContractViolation("surface directions must be orthogonal within 1e-6")
    if extent < 0:
        raise ContractViolation("extent must be >= 0")
    if extent == 0:
        alphas = np.zeros(1)
    else:
        if resolution < 1 or resolution % 2 == 0:
            raise ContractViolation("resolution must be a positive odd number")
        alphas = np.linspace(-extent, extent, resolution)
    betas = alphas.copy()
    losses = np.empty((alphas.size, betas.size))
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            losses[i, j] = float(loss_fn(theta + a * v1 + b * v2))
    return SurfaceGrid(alphas, betas, losses)


def write_surface_csv(grid: SurfaceGrid, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("alpha,beta,loss\n")
        for a, b, l in grid.rows():
            fh.write(f"{a!r},{b!r},{l!r}\n")


def landscape_report(loss_fn: LossFn, grad_fn: GradFn, hvp_fn: HvpFn, theta,
                     probe: ProbeConfig, *, n_trace_probes: int = 64,
                     surface_extent: Optional[float] = None, surface_resolution: int = 21,
                     fisher: Optional[float] = None, power_tol: float = 1e-6,
                     power_max_iter: int = 1000, seed: int = 0) -> LandscapeReport:
    """Assemble the full diagnostic bundle at one parameter point.

    surface_extent None skips the grid; extent 0 yields the 1x1 grid holding
    loss(theta).
    """
    theta = np.asarray(theta, dtype=np.float64)
    dim = theta.size
    hvp_at = lambda v: hvp_fn(v)
    top = power_iteration_lambda_max(hvp_at, dim, tol=power_tol,
                                     max_iter=power_max_iter, seed=seed)
    second = power_iteration_lambda_max(hvp_at, dim, tol=power_tol,
                                        max_iter=power_max_iter, seed=seed + 1,
                                        deflate=[(top.value, top.vector)])
    # deflation leaves a small residual along the top direction; re-orthogonalize
    # so the surface slice's orthogonality precondition holds exactly
    v2 = second.vector - float(np.dot(top.vector, second.vector)) * top.vector
    norm_v2 = float(np.linalg.norm(v2))
    if norm_v2 < 1e-12:
        basis = np.zeros(dim)
        basis[int(np.argmin(np.abs(top.vector)))] = 1.0
        v2 = basis - float(np.dot(top.vector, basis)) * top.vector
        norm_v2 = float(np.linalg.norm(v2))
    second.vector = v2 / norm_v2
    trace = hutchinson_trace(hvp_at, dim, n_trace_probes, seed=seed)
    points = probe_points(theta, probe, loss_fn=loss_fn, grad_fn=grad_fn)
    r0 = estimate_r0(loss_fn, theta, probe, points=points)
    r1 = estimate_r1(grad_fn, theta, probe, points=points)
    surface = None
    if surface_extent is not None:
        surface = surface_slice(loss_fn, theta, top.vector, second.vector,
                                surface_extent, surface_resolution)
    return LandscapeReport(
        lambda_max=top.value,
        hessian_trace=trace.value,
        fisher_trace=fisher,
        r0_hat=r0,
        r1_hat=r1,
        rho_probe=probe.rho,
        surface=surface,
        eigvec_pair=(top.vector, second.vector),
        extras={
            "lambda_second": second.value,
            "power_converged": bool(top.converged and second.converged),
            "hessian_trace_std_error": trace.std_error,
        },
    )
