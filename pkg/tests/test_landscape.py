import numpy as np
import pytest

from cflat.errors import ContractViolation
from cflat.landscape import (
    ProbeConfig,
    estimate_r0,
    estimate_r1,
    fisher_trace,
    hutchinson_trace,
    landscape_report,
    power_iteration_lambda_max,
    probe_points,
    surface_slice,
)

from helpers import random_spd_matrix


def matrix_hvp(A):
    A = np.asarray(A, dtype=np.float64)
    return lambda v: A @ v


def quadratic_oracles(A):
    """loss = 0.5 x^T A x around the origin."""
    A = np.asarray(A, dtype=np.float64)
    return (lambda x: 0.5 * float(x @ A @ x), lambda x: A @ x)


class TestPowerIteration:
    def test_diagonal(self):
        res = power_iteration_lambda_max(matrix_hvp(np.diag([3.0, 1.0])), 2)
        assert res.converged
        assert res.value == pytest.approx(3.0, rel=1e-6)
        assert abs(abs(res.vector[0]) - 1.0) < 1e-4

    def test_identity(self):
        res = power_iteration_lambda_max(matrix_hvp(np.eye(7)), 7)
        assert res.converged
        assert res.value == pytest.approx(1.0, rel=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_against_dense_eigensolver(self, seed):
        rng = np.random.default_rng(seed)
        A = random_spd_matrix(6, rng)
        res = power_iteration_lambda_max(matrix_hvp(A), 6, tol=1e-10, seed=seed)
        want = float(np.linalg.eigvalsh(A)[-1])
        assert abs(res.value - want) / want < 1e-6

    def test_deflation_second_eigenvalue(self):
        A = np.diag([3.0, 2.0, 1.0])
        top = power_iteration_lambda_max(matrix_hvp(A), 3, tol=1e-12)
        second = power_iteration_lambda_max(
            matrix_hvp(A), 3, tol=1e-12, deflate=[(top.value, top.vector)]
        )
        assert second.value == pytest.approx(2.0, rel=1e-5)

    def test_unconverged_flagged(self):
        A = np.diag([1.0, 0.999999])  # nearly degenerate: slow convergence
        res = power_iteration_lambda_max(matrix_hvp(A), 2, tol=1e-14, max_iter=2)
        assert not res.converged
        assert res.iterations == 2

    def test_eigvec_unit_norm(self):
        rng = np.random.default_rng(1)
        A = random_spd_matrix(5, rng)
        res = power_iteration_lambda_max(matrix_hvp(A), 5)
        assert abs(np.linalg.norm(res.vector) - 1.0) < 1e-12


class TestHutchinson:
    def test_identity_exact(self):
        est = hutchinson_trace(matrix_hvp(np.eye(9)), 9, n_probes=5)
        assert est.value == pytest.approx(9.0, abs=1e-12)
        assert est.std_error == pytest.approx(0.0, abs=1e-12)

    def test_diagonal_within_three_sigma(self):
        est = hutchinson_trace(matrix_hvp(np.diag([1.0, 2.0, 3.0])), 3, n_probes=500)
        assert abs(est.value - 6.0) <= 3 * max(est.std_error, 1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_random_matrix_within_three_sigma(self, seed):
        rng = np.random.default_rng(seed)
        A = random_spd_matrix(8, rng)
        est = hutchinson_trace(matrix_hvp(A), 8, n_probes=800, seed=seed)
        assert abs(est.value - np.trace(A)) <= 3 * est.std_error

    def test_unbiased_across_seeds(self):
        rng = np.random.default_rng(42)
        A = random_spd_matrix(6, rng)
        estimates = [hutchinson_trace(matrix_hvp(A), 6, 64, seed=s).value for s in range(50)]
        pooled_se = np.std(estimates, ddof=1) / np.sqrt(len(estimates))
        assert abs(np.mean(estimates) - np.trace(A)) <= 3 * pooled_se

    def test_rejects_zero_probes(self):
        with pytest.raises(ContractViolation):
            hutchinson_trace(matrix_hvp(np.eye(2)), 2, n_probes=0)

    def test_deterministic(self):
        a = hutchinson_trace(matrix_hvp(np.diag([1.0, 5.0])), 2, 50, seed=3)
        b = hutchinson_trace(matrix_hvp(np.diag([1.0, 5.0])), 2, 50, seed=3)
        assert a.value == b.value


class TestFisherTrace:
    def test_zero_gradients(self):
        assert fisher_trace([np.zeros(4), np.zeros(4)]) == 0.0

    def test_single_example(self):
        assert fisher_trace([np.array([1.0, 2.0])]) == pytest.approx(5.0)

    def test_mean_of_squared_norms(self):
        got = fisher_trace([np.array([1.0, 0.0]), np.array([0.0, 2.0])])
        assert got == pytest.approx(2.5)

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            fisher_trace([])


class TestSharpnessEstimators:
    def test_r0_quadratic_within_five_percent(self):
        A = np.diag([4.0, 1.0])
        loss, grad = quadratic_oracles(A)
        probe = ProbeConfig(rho=0.5, n_directions=64, n_ascent_steps=10, seed=0)
        est = estimate_r0(loss, np.zeros(2), probe, grad_fn=grad)
        true = 0.5 * probe.rho**2 * 4.0
        assert abs(est - true) / true < 0.05
        assert est <= true + 1e-12  # lower-bound estimator

    def test_r0_constant_loss(self):
        probe = ProbeConfig(rho=0.3, n_directions=8, n_ascent_steps=0)
        assert estimate_r0(lambda x: 1.25, np.zeros(3), probe) == 0.0

    def test_r0_monotone_in_directions(self):
        rng = np.random.default_rng(5)
        A = random_spd_matrix(3, rng)
        loss, grad = quadratic_oracles(A)
        theta = rng.normal(size=3)
        values = []
        for n in (4, 16, 64):
            probe = ProbeConfig(rho=0.2, n_directions=n, n_ascent_steps=0, seed=9,
                                segment_points=0)
            values.append(estimate_r0(loss, theta, probe))
        assert values[0] <= values[1] <= values[2]

    def test_r1_quadratic_matches_rho_sq_lambda_max(self):
        rng = np.random.default_rng(2)
        A = random_spd_matrix(4, rng)
        loss, grad = quadratic_oracles(A)
        probe = ProbeConfig(rho=0.3, n_directions=64, n_ascent_steps=30, seed=1)
        est = estimate_r1(grad, np.zeros(4), probe, loss_fn=loss)
        lam_max = float(np.linalg.eigvalsh(A)[-1])
        true = probe.rho**2 * lam_max
        assert abs(est - true) / true < 0.05

    def test_r1_linear_loss_exact(self):
        c = np.array([2.0, -1.0, 0.5])
        probe = ProbeConfig(rho=0.7, n_directions=4, n_ascent_steps=2)
        est = estimate_r1(lambda x: c, np.zeros(3), probe, loss_fn=lambda x: float(c @ x))
        assert est == pytest.approx(0.7 * np.linalg.norm(c), rel=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_r0_bounded_by_r1_on_shared_probes(self, seed):
        rng = np.random.default_rng(seed)
        A = random_spd_matrix(4, rng)
        loss, grad = quadratic_oracles(A)
        theta = rng.normal(size=4) * 0.5
        probe = ProbeConfig(rho=0.25, seed=seed)
        pts = probe_points(theta, probe, loss_fn=loss, grad_fn=grad)
        r0 = estimate_r0(loss, theta, probe, points=pts)
        r1 = estimate_r1(grad, theta, probe, points=pts)
        assert r0 <= r1 + 1e-6

    def test_estimators_deterministic(self):
        A = np.diag([2.0, 5.0])
        loss, grad = quadratic_oracles(A)
        probe = ProbeConfig(rho=0.4, seed=11)
        a = estimate_r0(loss, np.ones(2), probe, grad_fn=grad)
        b = estimate_r0(loss, np.ones(2), probe, grad_fn=grad)
        assert a == b


class TestSurfaceSlice:
    def test_quadratic_closed_form(self):
        a, b = 3.0, 0.5
        loss = lambda x: 0.5 * (a * x[0] ** 2 + b * x[1] ** 2)
        grid = surface_slice(loss, np.zeros(2), np.array([1.0, 0.0]), np.array([0.0, 1.0]),
                             extent=1.0, resolution=5)
        for i, alpha in enumerate(grid.alphas):
            for j, beta in enumerate(grid.betas):
                want = 0.5 * (a * alpha**2 + b * beta**2)
                assert grid.losses[i, j] == pytest.approx(want, abs=1e-12)
        center = len(grid.alphas) // 2
        assert grid.losses[center, center] == pytest.approx(loss(np.zeros(2)))

    def test_extent_zero_single_cell(self):
        grid = surface_slice(lambda x: 7.5, np.zeros(3), np.array([1.0, 0, 0]),
                             np.array([0, 1.0, 0]), extent=0.0, resolution=9)
        assert grid.losses.shape == (1, 1)
        assert grid.losses[0, 0] == 7.5

    def test_symmetry_for_even_quadratic(self):
        loss = lambda x: float(x @ x)
        grid = surface_slice(loss, np.zeros(2), np.array([1.0, 0.0]), np.array([0.0, 1.0]),
                             extent=0.8, resolution=7)
        assert np.allclose(grid.losses, grid.losses[::-1, ::-1], atol=1e-12)

    def test_rejects_non_orthogonal(self):
        v = np.array([1.0, 0.0])
        with pytest.raises(ContractViolation):
            surface_slice(lambda x: 0.0, np.zeros(2), v, v, extent=1.0, resolution=3)

    def test_rejects_non_unit(self):
        with pytest.raises(ContractViolation):
            surface_slice(lambda x: 0.0, np.zeros(2), np.array([2.0, 0.0]),
                          np.array([0.0, 1.0]), extent=1.0, resolution=3)

    def test_rejects_even_resolution(self):
        with pytest.raises(ContractViolation):
            surface_slice(lambda x: 0.0, np.zeros(2), np.array([1.0, 0.0]),
                          np.array([0.0, 1.0]), extent=1.0, resolution=4)


class TestReportAssembly:
    def test_full_report_on_quadratic(self):
        A = np.diag([6.0, 2.0, 1.0])
        loss, grad = quadratic_oracles(A)
        probe = ProbeConfig(rho=0.2, n_directions=32, n_ascent_steps=20, seed=3)
        report = landscape_report(loss, grad, matrix_hvp(A), np.zeros(3), probe,
                                  n_trace_probes=300, surface_extent=0.5,
                                  surface_resolution=5)
        assert report.lambda_max == pytest.approx(6.0, rel=1e-5)
        assert abs(report.hessian_trace - 9.0) <= 3 * max(report.extras["hessian_trace_std_error"], 1e-9)
        assert report.r1_hat == pytest.approx(probe.rho**2 * 6.0, rel=0.05)
        assert report.r0_hat <= report.r1_hat + 1e-6
        assert report.surface.losses.shape == (5, 5)
        d = report.to_json_dict()
        assert d["format_version"] == 1
        assert len(d["surface"]) == 25
