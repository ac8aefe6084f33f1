import math

import numpy as np
import pytest
import torch

from analytics.diagnostics import (
    dissipation,
    energy_distance,
    energy_trace,
    error_metrics,
    estimate_Z,
    free_energy,
    gaussian_energy_reference,
    permutation_threshold,
)
from fpflow.errors import InputError, UnsupportedError
from fpflow.flow import ScoreFlowState, TimeGrid, initial_state, rollout
from fpflow.jets import DTYPE
from fpflow.reference import GaussianRef, OUReference, gaussian_kl, stationary_gaussian
from fpflow.runtime.seeding import substream
from fpflow.settings import ProblemSpec
from training.model import build_field


def _state(x, l, s):
    x = torch.as_tensor(x, dtype=DTYPE)
    l = torch.as_tensor(l, dtype=DTYPE)
    return ScoreFlowState(x=x, L=torch.exp(l), l=l, s=torch.as_tensor(s, dtype=DTYPE))


def _exact_ou_rollout(spec, dt=0.01, n_x=2000, steps=100):
    field = build_field(2, 2, width=4, baseline=OUReference(spec, 1.0).baseline(), scheme="zero")
    rho0 = GaussianRef.isotropic(2, 1.0)
    grid = TimeGrid(dt, steps)
    traj = rollout(initial_state(rho0, rho0.sample(substream(0, "diag"), n_x)), [field], grid)
    return field, grid, traj


class TestFreeEnergy:
    def test_single_particle(self, ou_spec):
        # V(x)/eps = 1 at |x|^2 = 1 with eps = 0.5
        state = _state([[1.0, 0.0]], [0.0], [[0.0, 0.0]])
        assert free_energy(state, ou_spec) == pytest.approx(1.0)

    def test_stationary_samples_give_minus_log_z(self, ou_spec):
        pi = stationary_gaussian(ou_spec)
        x = pi.sample(substream(1, "pi"), 10000)
        est = free_energy(_state(x, pi.log_density(x), pi.score(x)), ou_spec)
        assert est == pytest.approx(-math.log(math.pi), abs=1e-9)
        assert estimate_Z(est) == pytest.approx(math.pi)

    def test_missing_log_density(self, ou_spec):
        state = ScoreFlowState(x=torch.zeros(1, 2, dtype=DTYPE), L=torch.ones(1, dtype=DTYPE), l=None, s=torch.zeros(1, 2, dtype=DTYPE))
        with pytest.raises(InputError):
            free_energy(state, ou_spec)

    def test_identity_with_relative_entropy(self, ou_spec):
        rho = GaussianRef.isotropic(2, 1.3)
        x = rho.sample(substream(2, "rho"), 10000)
        values = rho.log_density(x) + (x * x).sum(-1) / (2 * 0.5)
        est = float(values.mean())
        se = float(values.std()) / math.sqrt(x.shape[0])
        exact = gaussian_kl(rho, stationary_gaussian(ou_spec)) - math.log(math.pi)
        assert abs(est - exact) < 3.0 * se
        assert gaussian_energy_reference(rho, ou_spec)[0] == pytest.approx(exact)


class TestDissipation:
    def test_zero_at_stationary_score(self, ou_spec):
        x = torch.tensor([[1.0, -1.0], [0.5, 2.0]], dtype=DTYPE)
        assert dissipation(_state(x, [0.0, 0.0], -x / 0.5), ou_spec) == 0.0

    def test_single_particle(self, ou_spec):
        # |s - grad log pi|^2 = 4 and eps = 0.5
        state = _state([[0.0, 0.0]], [0.0], [[2.0, 0.0]])
        assert dissipation(state, ou_spec) == pytest.approx(-2.0)

    def test_uld_uses_velocity_block(self):
        spec = ProblemSpec(kind="uld", dim=1, gamma=2.0, beta=1.0)
        # position block of the score difference is ignored
        state = _state([[0.0, 0.0]], [0.0], [[5.0, 1.0]])
        assert dissipation(state, spec) == pytest.approx(-2.0)

    def test_never_positive(self, ou_spec):
        rng = substream(3, "diss")
        x = torch.from_numpy(rng.standard_normal((50, 2)))
        s = torch.from_numpy(rng.standard_normal((50, 2)))
        assert dissipation(_state(x, np.zeros(50), s), ou_spec) <= 0.0

    def test_unsupported_for_lorenz(self):
        with pytest.raises(UnsupportedError):
            dissipation(_state([[0.0, 0.0, 0.0]], [0.0], [[0.0, 0.0, 0.0]]), ProblemSpec(kind="lorenz", dim=3))


class TestEnergyTrace:
    def test_exact_field_trace(self, ou_spec):
        _, grid, traj = _exact_ou_rollout(ou_spec)
        ref = OUReference(ou_spec, 1.0)
        trace = energy_trace(traj, ou_spec, ref)
        assert trace.free_energy.shape == (grid.total_steps + 1,)
        assert np.all(trace.dissipation <= 0.0)
        assert np.all(np.diff(trace.free_energy) < 1e-2)
        assert np.allclose(trace.free_energy, trace.reference_energy, atol=0.1)
        frame = trace.to_frame()
        assert list(frame.columns) == ["t", "free_energy", "dissipation", "reference_energy", "reference_dissipation"]

    def test_derivative_matches_dissipation(self, ou_spec):
        _, grid, traj = _exact_ou_rollout(ou_spec, n_x=20000)
        trace = energy_trace(traj, ou_spec)
        deriv = (trace.free_energy[2:] - trace.free_energy[:-2]) / (2 * grid.dt)
        diss = trace.dissipation[1:-1]
        late = trace.times[1:-1] > 0.2
        assert np.all(np.abs(deriv[late] - diss[late]) <= 0.05 * np.abs(diss[late]))

    def test_reference_dissipation_closed_form(self, ou_spec):
        rho = GaussianRef.isotropic(2, 1.0)
        # score difference -x + 2x = x, so E|x|^2 = 2 and the weight is eps
        assert gaussian_energy_reference(rho, ou_spec)[1] == pytest.approx(-0.5 * 2.0)


class TestErrorMetrics:
    def test_exact_field_has_small_errors(self, ou_spec):
        field, grid, traj = _exact_ou_rollout(ou_spec, n_x=200)
        metrics = error_metrics([field], traj, OUReference(ou_spec, 1.0), grid, ou_spec)
        assert metrics.err_f < 1e-12
        assert metrics.err_rho < 5e-3
        assert metrics.err_s < 2e-2

    def test_missing_reference(self, ou_spec):
        field, grid, traj = _exact_ou_rollout(ou_spec, n_x=10, steps=2)
        with pytest.raises(UnsupportedError):
            error_metrics([field], traj, None, grid, ou_spec)


class TestEnergyDistance:
    def test_identical_ensembles(self):
        a = substream(0, "ed").standard_normal((200, 2))
        assert energy_distance(a, a) == pytest.approx(0.0, abs=1e-12)

    def test_empty_ensemble(self):
        with pytest.raises(InputError):
            energy_distance(np.zeros((0, 2)), np.zeros((3, 2)))

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            energy_distance(np.zeros((3, 2)), np.zeros((3, 3)))

    def test_same_law_below_threshold_and_shifted_law_above(self):
        a = substream(1, "ed-a").standard_normal((1000, 2))
        b = substream(1, "ed-b").standard_normal((1000, 2))
        shifted = b + np.array([3.0, 0.0])
        threshold = permutation_threshold(a, b, q=0.99, n_permutations=100, seed=5)
        assert energy_distance(a, b) <= threshold
        assert energy_distance(a, shifted) > threshold

    def test_subsampling_is_seeded(self):
        a = substream(2, "ed-a").standard_normal((300, 3))
        b = substream(2, "ed-b").standard_normal((300, 3))
        assert energy_distance(a, b, max_samples=100, seed=1) == energy_distance(a, b, max_samples=100, seed=1)

    def test_accepts_tensors(self):
        a = torch.zeros(4, 2, dtype=DTYPE)
        b = torch.ones(4, 2, dtype=DTYPE)
        assert energy_distance(a, b) == pytest.approx(2.0 * math.sqrt(2.0))
