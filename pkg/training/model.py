from __future__ import annotations

from pathlib import Path
from typing import Optional, Protocol, Sequence

import torch
import torch.nn as nn

from fpflow.errors import InputError
from fpflow.jets import DTYPE, FieldJet, as_batch, controlled_trace, zero_jet
from fpflow.runtime.seeding import substream

CHECKPOINT_HEADER = "fpflow-checkpoint v1"
INIT_SCHEMES = ("zero", "scaled-uniform")


class Baseline(Protocol):
    name: str

    def __call__(self, t: float, y: torch.Tensor) -> torch.Tensor: ...

    def jet(self, t: float, y: torch.Tensor, order: int = 1) -> FieldJet: ...


class VelocityField(nn.Module):
    """Composed velocity f(t, y) = baseline(t, y) + MLP(t, y) with a two hidden layer tanh network."""

    def __init__(self, state_dim: int, out_dim: int, width: int = 100, baseline: Optional[Baseline] = None) -> None:
        super().__init__()
        if out_dim > state_dim:
            raise InputError("output wider than state", code="bad_layer_dims")
        self.state_dim = state_dim
        self.out_dim = out_dim
        self.width = width
        self.baseline = baseline
        self.net = nn.Sequential(
            nn.Linear(state_dim + 1, width),
            nn.Tanh(),
            nn.Linear(width, width),
            nn.Tanh(),
            nn.Linear(width, out_dim),
        ).to(DTYPE)

    @property
    def layer_dims(self) -> list[int]:
        return [self.state_dim + 1, self.width, self.width, self.out_dim]

    @property
    def offset(self) -> int:
        return self.state_dim - self.out_dim

    @property
    def second_order(self) -> bool:
        return self.offset > 0

    def linears(self) -> list[nn.Linear]:
        return [self.net[0], self.net[2], self.net[4]]

    def _inputs(self, t: float, y: torch.Tensor) -> torch.Tensor:
        if y.shape[-1] != self.state_dim:
            raise InputError(f"expected dimension {self.state_dim}, got {y.shape[-1]}", code="dimension_mismatch")
        tt = torch.full((y.shape[0], 1), float(t), dtype=y.dtype, device=y.device)
        return torch.cat([tt, y], dim=1)

    def forward(self, t: float, y: torch.Tensor) -> torch.Tensor:
        out = self.net(self._inputs(t, y))
        if self.baseline is not None:
            out = out + self.baseline(t, y)
        return out

    def network_jet(self, t: float, y: torch.Tensor, order: int = 1) -> FieldJet:
        """Closed-form chain rule through tanh -> tanh -> linear."""
        l1, l2, l3 = self.linears()
        w1, w2, w3 = l1.weight, l2.weight, l3.weight
        a1 = w1[:, 1:]
        h1 = torch.tanh(self._inputs(t, y) @ w1.T + l1.bias)
        d1 = 1.0 - h1 * h1
        dd1 = -2.0 * h1 * d1
        h2 = torch.tanh(h1 @ w2.T + l2.bias)
        d2 = 1.0 - h2 * h2
        dd2 = -2.0 * h2 * d2
        value = h2 @ w3.T + l3.bias

        # p2 = d(pre-activation of layer 2)/dy, shape (B, w2, n)
        p2 = torch.einsum("lk,bk,kn->bln", w2, d1, a1)
        jac = torch.einsum("il,bl,bln->bin", w3, d2, p2)

        a1c = a1[:, self.offset :]
        pm = w2 * (w3.T @ a1c.T)  # (w2, w1)
        c = d1 @ pm.T  # (B, w2)
        u = d2 @ pm  # (B, w1)
        grad_div = torch.einsum("bln,bl->bn", p2, dd2 * c) + (u * dd1) @ a1
        jet = FieldJet(value=value, jacobian=jac, divergence=(d2 * c).sum(-1), grad_div=grad_div)
        if order < 2:
            return jet

        ddd1 = -2.0 * d1 * d1 + 4.0 * h1 * h1 * d1
        ddd2 = -2.0 * d2 * d2 + 4.0 * h2 * h2 * d2
        outer = w3[None, :, :] * dd2[:, None, :]  # (B, m, w2)
        inner = ((w3[None, :, :] * d2[:, None, :]) @ w2) * dd1[:, None, :]  # (B, m, w1)
        comp = torch.einsum("bln,bml,blk->bmnk", p2, outer, p2) + torch.einsum("kn,bmk,kj->bmnj", a1, inner, a1)

        r = torch.einsum("lk,bk,kn->bln", pm, dd1, a1)
        cross = torch.einsum("bln,bl,blk->bnk", r, dd2, p2)
        diag1 = dd1 * ((dd2 * c) @ w2) + u * ddd1
        hess_div = (
            torch.einsum("bln,bl,blk->bnk", p2, ddd2 * c, p2)
            + cross
            + cross.transpose(1, 2)
            + torch.einsum("kn,bk,kj->bnj", a1, diag1, a1)
        )
        jet.comp_hessians = comp
        jet.hess_div = hess_div
        return jet

    def jet(self, t: float, y: torch.Tensor, order: int = 1) -> FieldJet:
        if order not in (1, 2):
            raise InputError(f"unsupported jet order {order}", code="bad_jet_order")
        jet = self.network_jet(t, y, order)
        if self.baseline is not None:
            jet = jet + self.baseline.jet(t, y, order)
        return jet

    def full_jet(self, t: float, y: torch.Tensor, order: int = 1) -> FieldJet:
        return self.jet(t, y, order).lifted(y)


def evaluate(field: VelocityField, t: float, x) -> torch.Tensor:
    xb, single = as_batch(x)
    out = field(t, xb)
    return out[0] if single else out


def jet(field: VelocityField, t: float, x, order: int = 1) -> FieldJet:
    xb, _ = as_batch(x)
    return field.jet(t, xb, order)


def fd_jet(field: VelocityField, t: float, x, h: float = 1e-5, order: int = 2) -> FieldJet:
    """Central differences: jacobian from values, higher levels from the next lower analytic quantity."""
    if h <= 0.0:
        raise InputError("finite-difference step must be positive", code="bad_step")
    xb, _ = as_batch(x)
    batch, n = xb.shape
    m = field.out_dim
    out = zero_jet(batch, m, n, order)
    with torch.no_grad():
        out.value = field(t, xb)
        for j in range(n):
            e = torch.zeros(n, dtype=DTYPE)
            e[j] = h
            plus = field.jet(t, xb + e, 1)
            minus = field.jet(t, xb - e, 1)
            out.jacobian[:, :, j] = (field(t, xb + e) - field(t, xb - e)) / (2.0 * h)
            out.grad_div[:, j] = (plus.divergence - minus.divergence) / (2.0 * h)
            if order >= 2:
                out.comp_hessians[:, :, :, j] = (plus.jacobian - minus.jacobian) / (2.0 * h)
                out.hess_div[:, :, j] = (plus.grad_div - minus.grad_div) / (2.0 * h)
        out.divergence = controlled_trace(out.jacobian)
    return out


def init_params(layer_dims: Sequence[int], seed: int = 0, scheme: str = "scaled-uniform") -> list[tuple[torch.Tensor, torch.Tensor]]:
    if scheme not in INIT_SCHEMES:
        raise InputError(f"unknown init scheme {scheme!r}", code="bad_init_scheme")
    params = []
    for k, (fan_in, fan_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
        if scheme == "zero":
            w = torch.zeros(fan_out, fan_in, dtype=DTYPE)
            b = torch.zeros(fan_out, dtype=DTYPE)
        else:
            rng = substream(seed, "init", k)
            bound = 1.0 / fan_in**0.5
            w = torch.from_numpy(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            b = torch.from_numpy(rng.uniform(-bound, bound, size=fan_out))
        params.append((w, b))
    return params


def build_field(
    state_dim: int,
    out_dim: int,
    width: int = 100,
    baseline: Optional[Baseline] = None,
    seed: int = 0,
    scheme: str = "scaled-uniform",
) -> VelocityField:
    field = VelocityField(state_dim, out_dim, width=width, baseline=baseline)
    set_params(field, init_params(field.layer_dims, seed=seed, scheme=scheme))
    return field


def set_params(field: VelocityField, params: Sequence[tuple[torch.Tensor, torch.Tensor]]) -> None:
    with torch.no_grad():
        for layer, (w, b) in zip(field.linears(), params):
            if layer.weight.shape != w.shape or layer.bias.shape != b.shape:
                raise InputError("parameter shapes do not match layer_dims", code="bad_layer_dims")
            layer.weight.copy_(w)
            layer.bias.copy_(b)


def get_params(field: VelocityField) -> list[tuple[torch.Tensor, torch.Tensor]]:
    return [(layer.weight.detach().clone(), layer.bias.detach().clone()) for layer in field.linears()]


def save_checkpoint(field: VelocityField, path: Path) -> Path:
    lines = [
        CHECKPOINT_HEADER,
        "layer_dims " + " ".join(str(d) for d in field.layer_dims),
        f"offset {field.offset}",
        f"baseline {getattr(field.baseline, 'name', 'none')}",
    ]
    for k, layer in enumerate(field.linears()):
        w = layer.weight.detach()
        lines.append(f"[layer {k} weight {w.shape[0]}x{w.shape[1]}]")
        lines.extend(f"{v!r} {v.hex()}" for v in w.reshape(-1).tolist())
        b = layer.bias.detach()
        lines.append(f"[layer {k} bias {b.shape[0]}]")
        lines.extend(f"{v!r} {v.hex()}" for v in b.tolist())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: Path, baseline: Optional[Baseline] = None) -> VelocityField:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_HEADER:
        raise InputError(f"{path} is not an fpflow checkpoint", code="bad_checkpoint")
    dims = [int(v) for v in lines[1].split()[1:]]
    if len(dims) != 4:
        raise InputError("checkpoint must describe two hidden layers", code="bad_checkpoint")
    saved_baseline = lines[3].split(maxsplit=1)[1].strip()
    given = getattr(baseline, "name", "none")
    if saved_baseline != given:
        raise InputError(f"checkpoint baseline {saved_baseline} != {given}", code="baseline_mismatch")
    blocks: list[list[float]] = []
    for line in lines[4:]:
        if line.startswith("["):
            blocks.append([])
        elif line.strip():
            blocks[-1].append(float.fromhex(line.split()[1]))
    field = VelocityField(dims[0] - 1, dims[3], width=dims[1], baseline=baseline)
    params = []
    for layer, k in zip(field.linears(), range(0, len(blocks), 2)):
        w = torch.tensor(blocks[k], dtype=DTYPE).reshape(layer.weight.shape)
        b = torch.tensor(blocks[k + 1], dtype=DTYPE)
        params.append((w, b))
    set_params(field, params)
    return field
