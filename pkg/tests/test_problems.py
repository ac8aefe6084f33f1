import math

import pytest
import torch

from fpflow.errors import InputError, UnsupportedError
from fpflow.jets import DTYPE
from fpflow.problems import (
    ProblemDrift,
    check_spec,
    controlled_drift_jet,
    drift,
    grad_potential,
    hamiltonian,
    mobility,
    potential,
    stationary_energy,
    stationary_log_density_grad,
)
from fpflow.runtime.seeding import substream
from fpflow.settings import ProblemSpec

SPECS = [
    ProblemSpec(kind="langevin", potential="quadratic", dim=2, eps=0.5, c=0.5),
    ProblemSpec(kind="langevin", potential="double_well", dim=2, eps=0.5, c=0.5),
    ProblemSpec(kind="uld", potential="quadratic", dim=1),
    ProblemSpec(kind="uld", potential="double_well", dim=2),
    ProblemSpec(kind="lorenz", dim=3, eps=0.1, s=0.2),
    ProblemSpec(kind="atan_lorenz", dim=3, eps=0.1, s=0.1, atan_variant="verbatim"),
    ProblemSpec(kind="atan_lorenz", dim=3, eps=0.1, s=0.1, atan_variant="symmetric"),
    ProblemSpec(kind="van_der_pol", dim=1, eps=0.1, mu_vdp=2.0),
]


def _points(spec, n=6, scale=0.8):
    return scale * torch.from_numpy(substream(11, "drift-points", spec.kind).standard_normal((n, spec.state_dim)))


def _fd(fn, y, h=1e-6):
    """Central differences of a batched map y -> (B, ...) along every input coordinate; last axis is the input."""
    cols = []
    for j in range(y.shape[1]):
        e = torch.zeros(y.shape[1], dtype=DTYPE)
        e[j] = h
        cols.append((fn(y + e) - fn(y - e)) / (2.0 * h))
    return torch.stack(cols, dim=-1)


class TestProblemSpec:
    def test_state_and_control_dims(self, uld_spec, ou_spec):
        assert (uld_spec.state_dim, uld_spec.control_dim, uld_spec.control_offset) == (2, 1, 1)
        assert (ou_spec.state_dim, ou_spec.control_dim, ou_spec.control_offset) == (2, 2, 0)

    def test_noise_level(self, uld_spec, ou_spec):
        assert ou_spec.noise == 0.5
        assert ProblemSpec(kind="uld", gamma=2.0, beta=4.0).noise == 0.5

    def test_lorenz_must_be_three_dimensional(self):
        with pytest.raises(InputError):
            check_spec(ProblemSpec(kind="lorenz", dim=2))

    def test_skew_drift_needs_even_dimension(self):
        with pytest.raises(InputError):
            check_spec(ProblemSpec(kind="langevin", dim=3, c=0.5))
        check_spec(ProblemSpec(kind="langevin", dim=3, c=0.0))

    def test_unknown_kind(self):
        with pytest.raises(InputError):
            check_spec(ProblemSpec(kind="heat"))


class TestPotentials:
    def test_quadratic(self, ou_spec):
        x = torch.tensor([1.0, 2.0], dtype=DTYPE)
        assert float(potential(ou_spec, x)) == pytest.approx(2.5)
        assert torch.equal(grad_potential(ou_spec, x), x)

    def test_double_well_minima_and_origin(self):
        spec = ProblemSpec(kind="langevin", potential="double_well", dim=2)
        assert float(potential(spec, torch.ones(2, dtype=DTYPE))) == pytest.approx(0.0)
        assert float(potential(spec, -torch.ones(2, dtype=DTYPE))) == pytest.approx(0.0)
        assert float(potential(spec, torch.zeros(2, dtype=DTYPE))) == pytest.approx(1.0)
        assert torch.allclose(grad_potential(spec, torch.ones(2, dtype=DTYPE)), torch.zeros(2, dtype=DTYPE))

    def test_double_well_gradient_matches_autograd(self):
        spec = ProblemSpec(kind="langevin", potential="double_well", dim=3, c=0.0)
        x = torch.tensor([0.3, -1.2, 0.7], dtype=DTYPE, requires_grad=True)
        (g,) = torch.autograd.grad(potential(spec, x), x)
        assert torch.allclose(grad_potential(spec, x.detach()), g, atol=1e-12)

    def test_hamiltonian(self, uld_spec):
        h = hamiltonian(uld_spec, torch.tensor([1.0], dtype=DTYPE), torch.tensor([2.0], dtype=DTYPE))
        assert float(h) == pytest.approx(2.5)

    def test_hamiltonian_only_for_uld(self, ou_spec):
        with pytest.raises(InputError):
            hamiltonian(ou_spec, torch.zeros(2, dtype=DTYPE), torch.zeros(2, dtype=DTYPE))

    def test_potential_rejected_for_lorenz(self):
        with pytest.raises(InputError):
            potential(ProblemSpec(kind="lorenz", dim=3), torch.zeros(3, dtype=DTYPE))


class TestDrift:
    def test_langevin_drift_uses_mobility(self, ou_spec):
        x = torch.tensor([1.0, 0.0], dtype=DTYPE)
        expected = -(mobility(ou_spec) @ x)
        assert torch.allclose(drift(ou_spec, x), expected)
        assert torch.allclose(expected, torch.tensor([-1.0, 0.5], dtype=DTYPE))

    def test_second_order_position_rows_are_velocities(self, uld_spec):
        y = torch.tensor([[0.5, -1.5]], dtype=DTYPE)
        out = drift(uld_spec, y)
        assert float(out[0, 0]) == -1.5
        assert float(out[0, 1]) == pytest.approx(1.0)

    def test_van_der_pol(self):
        spec = ProblemSpec(kind="van_der_pol", dim=1, mu_vdp=2.0)
        out = drift(spec, torch.tensor([2.0, 1.0], dtype=DTYPE))
        assert torch.allclose(out, torch.tensor([1.0, 2.0 * (1.0 - 4.0) * 1.0], dtype=DTYPE))

    def test_lorenz_at_origin_is_zero(self):
        spec = ProblemSpec(kind="lorenz", dim=3)
        assert torch.count_nonzero(drift(spec, torch.zeros(3, dtype=DTYPE))) == 0

    def test_atan_lorenz_is_bounded(self):
        spec = ProblemSpec(kind="atan_lorenz", dim=3, s=0.1)
        big = torch.full((1, 3), 1e3, dtype=DTYPE)
        assert float(drift(spec, big).abs().max()) <= 50.0 * 0.1 * math.pi / 2.0 + 1e-12

    def test_atan_variants_differ_only_in_middle_row(self):
        y = torch.tensor([[0.4, -0.3, 1.1]], dtype=DTYPE)
        a = drift(ProblemSpec(kind="atan_lorenz", dim=3, s=0.1, atan_variant="verbatim"), y)
        b = drift(ProblemSpec(kind="atan_lorenz", dim=3, s=0.1, atan_variant="symmetric"), y)
        assert torch.equal(a[:, 0], b[:, 0])
        assert torch.equal(a[:, 2], b[:, 2])
        assert not torch.equal(a[:, 1], b[:, 1])

    @pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}-{s.potential}-{s.atan_variant}")
    def test_drift_jet_matches_finite_differences(self, spec):
        y = _points(spec)
        exact = controlled_drift_jet(spec, y, order=2)
        jac = _fd(lambda p: controlled_drift_jet(spec, p, 1).value, y)
        comp = _fd(lambda p: controlled_drift_jet(spec, p, 1).jacobian, y)
        grad_div = _fd(lambda p: controlled_drift_jet(spec, p, 1).divergence, y)
        hess_div = _fd(lambda p: controlled_drift_jet(spec, p, 1).grad_div, y)
        for got, want in ((exact.jacobian, jac), (exact.comp_hessians, comp), (exact.grad_div, grad_div), (exact.hess_div, hess_div)):
            scale = max(float(want.abs().max()), 1.0)
            assert float((got - want).abs().max()) / scale < 1e-6

    def test_problem_drift_as_baseline(self, uld_spec):
        base = ProblemDrift(uld_spec)
        y = _points(uld_spec)
        assert base.name == "problem:uld"
        assert torch.allclose(base(0.0, y), drift(uld_spec, y)[:, 1:])


class TestStationaryDensity:
    def test_langevin_score(self, ou_spec):
        x = torch.tensor([[1.0, -2.0]], dtype=DTYPE)
        assert torch.allclose(stationary_log_density_grad(ou_spec, x), -x / 0.5)

    def test_uld_score(self):
        spec = ProblemSpec(kind="uld", dim=1, beta=2.0)
        y = torch.tensor([[1.0, 3.0]], dtype=DTYPE)
        assert torch.allclose(stationary_log_density_grad(spec, y), torch.tensor([[-2.0, -6.0]], dtype=DTYPE))

    def test_energy(self, uld_spec, ou_spec):
        y = torch.tensor([[1.0, 2.0]], dtype=DTYPE)
        assert float(stationary_energy(ou_spec, y)[0]) == pytest.approx(5.0)
        assert float(stationary_energy(uld_spec, y)[0]) == pytest.approx(2.5)

    def test_chaotic_systems_have_none(self):
        with pytest.raises(UnsupportedError):
            stationary_log_density_grad(ProblemSpec(kind="lorenz", dim=3), torch.zeros(1, 3, dtype=DTYPE))
