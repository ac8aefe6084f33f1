import math

import pytest
import torch

from fpflow.errors import FlowDivergenceError, InputError
from fpflow.flow import (
    ScoreFlowState,
    TimeGrid,
    initial_state,
    propagate,
    rollout,
    step_euler,
    step_hessian,
    step_uld,
    trajectory_frame,
)
from fpflow.jets import DTYPE
from fpflow.reference import GaussianRef, LinearBaseline, OUReference, ULDGaussianReference
from fpflow.runtime.seeding import substream
from training.model import build_field


def _analytic_ou_field(spec, delta=1.0):
    return build_field(2, 2, width=4, baseline=OUReference(spec, delta).baseline(), scheme="zero")


def _ou_errors(spec, dt, n_x=200):
    ref = OUReference(spec, 1.0)
    rho0 = GaussianRef.isotropic(2, 1.0)
    x0 = rho0.sample(substream(0, "flow-test"), n_x)
    grid = TimeGrid(dt, int(round(1.0 / dt)))
    traj = rollout(initial_state(rho0, x0, with_hessian=True), [_analytic_ou_field(spec)], grid)
    score_err = hess_err = 0.0
    for j in range(1, traj.n_records):
        t = float(traj.times[j])
        exact = ref.at(t)
        score_err = max(score_err, float((traj.s[j] - exact.score(traj.x[j])).abs().max()))
        hess_err = max(hess_err, float((traj.H[j] + exact.precision).abs().max()))
    return score_err, hess_err, traj


def _uld_score_error(uld_spec, dt, scheme, n_x=200):
    ref = ULDGaussianReference(uld_spec, sigma0=(2.0, 0.0, 2.0))
    rho0 = ref.at(0.0)
    field = build_field(2, 1, width=4, baseline=ref.baseline(), scheme="zero")
    grid = TimeGrid(dt, int(round(1.0 / dt)))
    traj = rollout(initial_state(rho0, rho0.sample(substream(3, "uld-flow"), n_x)), [field], grid, scheme)
    err = 0.0
    for j in range(1, traj.n_records):
        exact = ref.at(float(traj.times[j]))
        err = max(err, float((traj.s[j] - exact.score(traj.x[j])).abs().max()))
    return err


def _oscillator_energy_drift(scheme, dt=0.01, n_steps=10_000):
    field = build_field(2, 1, width=4, baseline=LinearBaseline.constant([[-1.0, 0.0]]), scheme="zero")
    state = initial_state(GaussianRef.isotropic(2, 1.0), torch.tensor([[1.0, 0.0]], dtype=DTYPE))
    drift = 0.0
    for j in range(n_steps):
        state = step_uld(state, field, dt, scheme=scheme, step_index=j)
        energy = 0.5 * float((state.x**2).sum())
        drift = max(drift, abs(energy / 0.5 - 1.0))
    return drift


class TestTimeGrid:
    def test_horizon_and_steps(self):
        grid = TimeGrid(0.01, 20, 5)
        assert grid.total_steps == 100
        assert grid.horizon == pytest.approx(1.0)
        assert grid.stage_length == pytest.approx(0.2)
        assert grid.times().shape == (101,)

    def test_stage_grid_starts_at_stage_time(self):
        grid = TimeGrid(0.01, 20, 5)
        stage = grid.stage_grid(3)
        assert stage.n_stages == 1
        assert stage.t0 == pytest.approx(0.6)

    def test_nearest_steps(self):
        grid = TimeGrid(0.01, 100)
        assert grid.nearest_steps([0.0, 0.251, 0.25, 7.0]) == [0, 25, 100]


class TestScorePropagation:
    def test_initial_state_matches_density(self):
        rho0 = GaussianRef.isotropic(2, 2.0)
        x = torch.tensor([[1.0, 0.0], [0.0, -2.0]], dtype=DTYPE)
        state = initial_state(rho0, x, with_hessian=True)
        assert torch.allclose(state.L, torch.exp(state.l))
        assert torch.allclose(state.s, -x / 2.0)
        assert torch.allclose(state.H[0], -0.5 * torch.eye(2, dtype=DTYPE))

    def test_initial_state_dimension_mismatch(self):
        with pytest.raises(InputError):
            initial_state(GaussianRef.isotropic(3, 1.0), torch.zeros(4, 2, dtype=DTYPE))

    def test_score_and_hessian_errors_are_first_order(self, ou_spec):
        s_coarse, h_coarse, _ = _ou_errors(ou_spec, 0.01)
        s_fine, h_fine, _ = _ou_errors(ou_spec, 0.005)
        assert 1.7 <= s_coarse / s_fine <= 2.3
        assert 1.7 <= h_coarse / h_fine <= 2.3

    def test_density_tracks_log_density(self, ou_spec):
        _, _, traj = _ou_errors(ou_spec, 0.01, n_x=50)
        assert torch.allclose(traj.L[-1], torch.exp(traj.l[-1]), rtol=1e-2)

    def test_terminal_log_density_close_to_exact(self, ou_spec):
        _, _, traj = _ou_errors(ou_spec, 0.005, n_x=50)
        exact = OUReference(ou_spec, 1.0).at(1.0).log_density(traj.x[-1])
        assert float((traj.l[-1] - exact).abs().max()) < 2e-2

    @pytest.mark.parametrize("scheme", ["euler", "symplectic"])
    def test_uld_score_error_is_first_order(self, uld_spec, scheme):
        coarse = _uld_score_error(uld_spec, 0.01, scheme)
        fine = _uld_score_error(uld_spec, 0.005, scheme)
        assert 1.7 <= coarse / fine <= 2.3

    def test_density_and_exp_log_density_converge_at_first_order(self, ou_spec):
        gaps = []
        for dt in (0.01, 0.005):
            _, _, traj = _ou_errors(ou_spec, dt, n_x=50)
            gaps.append(float((traj.L / torch.exp(traj.l) - 1.0).abs().max()))
        assert 1.7 <= gaps[0] / gaps[1] <= 2.3

    def test_propagate_matches_rollout(self, ou_spec, small_field):
        rho0 = GaussianRef.isotropic(2, 1.0)
        x0 = rho0.sample(substream(1, "flow-test"), 16)
        grid = TimeGrid(0.02, 5, 2)
        traj = rollout(initial_state(rho0, x0), [small_field, small_field], grid)
        final = propagate(initial_state(rho0, x0), [small_field, small_field], grid)
        assert torch.allclose(final.x, traj.x[-1])
        assert torch.allclose(final.s, traj.s[-1])
        assert final.t == pytest.approx(0.2)

    def test_rollout_shapes(self, small_field):
        rho0 = GaussianRef.isotropic(2, 1.0)
        grid = TimeGrid(0.1, 4)
        traj = rollout(initial_state(rho0, rho0.sample(substream(2, "x"), 7)), [small_field], grid)
        assert traj.x.shape == (5, 7, 2)
        assert traj.velocity.shape == (4, 7, 2)
        assert traj.H is None

    def test_stage_count_mismatch(self, small_field):
        rho0 = GaussianRef.isotropic(2, 1.0)
        with pytest.raises(InputError):
            rollout(initial_state(rho0, torch.zeros(3, 2, dtype=DTYPE)), [small_field], TimeGrid(0.1, 2, 2))

    def test_empty_batch(self, small_field):
        rho0 = GaussianRef.isotropic(2, 1.0)
        with pytest.raises(InputError):
            rollout(initial_state(rho0, torch.zeros(0, 2, dtype=DTYPE)), [small_field], TimeGrid(0.1, 2))


class TestSteps:
    def test_euler_step(self, small_field):
        rho0 = GaussianRef.isotropic(2, 1.0)
        state = initial_state(rho0, torch.tensor([[0.2, -0.4]], dtype=DTYPE))
        nxt = step_euler(state, small_field, 0.1)
        j = small_field.full_jet(0.0, state.x)
        assert torch.allclose(nxt.x, state.x + 0.1 * j.value)
        assert torch.allclose(nxt.l, state.l - 0.1 * j.divergence)
        assert nxt.t == pytest.approx(0.1)

    def test_symplectic_step_uses_updated_velocity(self, small_second_order_field):
        rho0 = GaussianRef.isotropic(2, 1.0)
        state = initial_state(rho0, torch.tensor([[0.5, 1.0]], dtype=DTYPE))
        dt = 0.05
        nxt = step_uld(state, small_second_order_field, dt, scheme="symplectic")
        f_v = small_second_order_field(0.0, state.x)[:, 0]
        v1 = 1.0 + dt * f_v
        assert torch.allclose(nxt.x[:, 1], v1)
        assert torch.allclose(nxt.x[:, 0], 0.5 + dt * v1)

    def test_step_uld_rejects_first_order_field(self, small_field):
        rho0 = GaussianRef.isotropic(2, 1.0)
        with pytest.raises(InputError):
            step_uld(initial_state(rho0, torch.zeros(1, 2, dtype=DTYPE)), small_field, 0.1)

    def test_unknown_scheme(self, small_second_order_field):
        rho0 = GaussianRef.isotropic(2, 1.0)
        with pytest.raises(InputError):
            step_uld(initial_state(rho0, torch.zeros(1, 2, dtype=DTYPE)), small_second_order_field, 0.1, scheme="leapfrog")

    def test_divergence_is_reported(self):
        blowup = build_field(2, 2, width=4, baseline=LinearBaseline.constant(1e4 * torch.eye(2)), scheme="zero")
        rho0 = GaussianRef.isotropic(2, 1.0)
        with pytest.raises(FlowDivergenceError) as info:
            rollout(initial_state(rho0, torch.ones(4, 2, dtype=DTYPE)), [blowup], TimeGrid(0.01, 10))
        assert info.value.step == 3
        assert info.value.particle == 0

    def test_hessian_step_for_linear_field(self):
        a = torch.from_numpy(substream(4, "hess").standard_normal((2, 2)))
        field = build_field(2, 2, width=4, baseline=LinearBaseline.constant(a), scheme="zero")
        rho0 = GaussianRef(torch.zeros(2, dtype=DTYPE), torch.tensor([[2.0, 0.3], [0.3, 1.0]], dtype=DTYPE))
        state = initial_state(rho0, rho0.sample(substream(5, "hess"), 4), with_hessian=True)
        dt = 0.05
        out = step_hessian(state, field.full_jet(0.0, state.x, order=2), dt)
        h = state.H
        assert torch.allclose(out, h - dt * (h @ a + a.T @ h), atol=1e-14)

    def test_hessian_step_needs_hessian(self, small_field):
        state = initial_state(GaussianRef.isotropic(2, 1.0), torch.zeros(1, 2, dtype=DTYPE))
        with pytest.raises(InputError):
            step_hessian(state, small_field.full_jet(0.0, state.x, order=2), 0.1)

    def test_symplectic_oscillator_energy_stays_bounded(self):
        assert _oscillator_energy_drift("symplectic") < 0.05

    def test_explicit_euler_oscillator_energy_grows(self):
        assert _oscillator_energy_drift("euler") > 1.0


class TestExport:
    def test_trajectory_frame_columns(self, small_field):
        rho0 = GaussianRef.isotropic(2, 1.0)
        traj = rollout(initial_state(rho0, rho0.sample(substream(3, "x"), 10)), [small_field], TimeGrid(0.1, 4))
        frame = trajectory_frame(traj, steps=[0, 4], max_particles=3)
        assert list(frame.columns) == ["particle", "step", "t", "x_0", "x_1", "l", "s_0", "s_1"]
        assert len(frame) == 6
        assert frame["t"].iloc[-1] == pytest.approx(0.4)

    def test_state_select(self):
        state = ScoreFlowState(
            x=torch.arange(6, dtype=DTYPE).reshape(3, 2),
            L=torch.ones(3, dtype=DTYPE),
            l=torch.zeros(3, dtype=DTYPE),
            s=torch.zeros(3, 2, dtype=DTYPE),
        )
        picked = state.select(torch.tensor([2, 0]))
        assert picked.size == 2
        assert math.isclose(float(picked.x[0, 0]), 4.0)
