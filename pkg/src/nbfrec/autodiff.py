"""Dense differentiable building blocks on top of torch autograd.

Parameters live in a :class:`ParamStore` (name -> leaf tensor).  MLP weights
use the ``[out, in]`` layout, ``y = x @ W.T + b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import torch

Tensor = torch.Tensor

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if len(self.layer_dims) < 2:
            raise ValueError("an MLP needs at least one linear layer")
        if min(self.layer_dims) < 1:
            raise ValueError(f"layer widths must be positive: {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    def param_shapes(self, prefix: str) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i in range(self.num_layers):
            fan_in, fan_out = self.layer_dims[i], self.layer_dims[i + 1]
            shapes[f"{prefix}.{i}.weight"] = (fan_out, fan_in)
            shapes[f"{prefix}.{i}.bias"] = (fan_out,)
        return shapes


class ParamStore:
    """Named parameter tensors; iteration is sorted by name."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._t: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self[name] = t

    def __setitem__(self, name: str, value: Tensor):
        self._t[name] = value.detach().clone().requires_grad_(True)

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __len__(self):
        return len(self._t)

    def names(self) -> list[str]:
        return sorted(self._t)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._t[name]

    def tensors(self) -> list[Tensor]:
        return [self._t[n] for n in self.names()]

    def grad(self, name: str) -> Tensor:
        t = self._t[name]
        return t.grad if t.grad is not None else torch.zeros_like(t)

    def zero_grad(self):
        for t in self._t.values():
            t.grad = None

    def slice(self, prefix: str) -> dict[str, Tensor]:
        return {n: t for n, t in self._t.items() if n.startswith(prefix + ".")}

    def state_dict(self) -> dict[str, Tensor]:
        return {n: t.detach().clone() for n, t in self.items()}

    def load(self, tensors: dict[str, Tensor]):
        with torch.no_grad():
            for name, value in tensors.items():
                self._t[name].copy_(value)

    def copy(self) -> "ParamStore":
        return ParamStore(self.state_dict())

    def to(self, dtype: torch.dtype) -> "ParamStore":
        return ParamStore({n: t.detach().to(dtype) for n, t in self.items()})

    def norms(self) -> dict[str, float]:
        return {n: float(t.detach().norm()) for n, t in self.items()}


def kaiming_uniform(shape: tuple[int, ...], gen: torch.Generator, dtype=torch.float64) -> Tensor:
    fan_in = shape[1] if len(shape) > 1 else shape[0]
    bound = math.sqrt(6.0 / fan_in)
    return (torch.rand(shape, generator=gen, dtype=dtype) * 2 - 1) * bound


def init_mlp(store: ParamStore, spec: MlpSpec, prefix: str, gen: torch.Generator, dtype=torch.float64):
    for name, shape in spec.param_shapes(prefix).items():
        if name.endswith(".weight"):
            store[name] = kaiming_uniform(shape, gen, dtype)
        else:
            store[name] = torch.zeros(shape, dtype=dtype)


def mlp_apply(spec: MlpSpec, params, x: Tensor, prefix: str | None = None) -> Tensor:
    """Affine layers with ``spec.activation`` between them (not after the last).

    ``params`` is a ParamStore (with ``prefix``) or a mapping already keyed
    ``"<i>.weight"`` / ``"<i>.bias"``.
    """
    if x.shape[-1] != spec.layer_dims[0]:
        raise ValueError(f"input width {x.shape[-1]} != MLP input width {spec.layer_dims[0]}")
    key = (lambda s: f"{prefix}.{s}") if prefix else (lambda s: s)
    h = x
    for i in range(spec.num_layers):
        h = h @ params[key(f"{i}.weight")].T + params[key(f"{i}.bias")]
        if i < spec.num_layers - 1 and spec.activation == "relu":
            h = torch.relu(h)
    return h


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1 (biased), then ``* gamma + beta``."""
    return torch.nn.functional.layer_norm(x, (x.shape[-1],), gamma, beta, eps)


class TapeError(RuntimeError):
    pass


def backward(loss: Tensor, params: ParamStore | Iterable[ParamStore] = ()) -> None:
    """Reverse-mode pass from a scalar ``loss``.

    Gradients accumulate into the parameters' ``.grad``; parameters of the
    given stores that the loss does not reach get explicit zero gradients.
    """
    if loss.numel() != 1:
        raise ValueError("backward needs a scalar loss")
    if getattr(loss, "_nbf_consumed", False):
        raise TapeError("backward called twice on the same loss; re-run the forward pass")
    stores = [params] if isinstance(params, ParamStore) else list(params)
    loss._nbf_consumed = True
    loss.backward()
    for store in stores:
        for _, t in store.items():
            if t.grad is None:
                t.grad = torch.zeros_like(t)


class Adam:
    """Bias-corrected Adam over one or more ParamStores (torch.optim.Adam inside)."""

    def __init__(self, params: ParamStore | Iterable[ParamStore], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        stores = [params] if isinstance(params, ParamStore) else list(params)
        self.stores = stores
        self.named = [(n, t) for s in stores for n, t in s.items()]
        self.opt = torch.optim.Adam([t for _, t in self.named], lr=lr, betas=tuple(betas), eps=eps)

    def step(self):
        self.opt.step()

    def zero_grad(self):
        for s in self.stores:
            s.zero_grad()

    @property
    def t(self) -> int:
        steps = [int(st["step"]) for st in self.opt.state.values() if "step" in st]
        return max(steps, default=0)

    def state_tensors(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, t in self.named:
            st = self.opt.state.get(t)
            if not st:
                continue
            out[f"{prefix}{name}.exp_avg"] = st["exp_avg"].detach().clone()
            out[f"{prefix}{name}.exp_avg_sq"] = st["exp_avg_sq"].detach().clone()
            out[f"{prefix}{name}.step"] = torch.as_tensor(st["step"], dtype=torch.float64).reshape(1).clone()
        return out

    def load_state_tensors(self, tensors: dict[str, Tensor], prefix: str = ""):
        for name, t in self.named:
            key = f"{prefix}{name}"
            if f"{key}.exp_avg" not in tensors:
                continue
            self.opt.state[t] = {
                "step": torch.tensor(float(tensors[f"{key}.step"].item())),
                "exp_avg": tensors[f"{key}.exp_avg"].to(t.dtype).clone(),
                "exp_avg_sq": tensors[f"{key}.exp_avg_sq"].to(t.dtype).clone(),
            }


def adam_step(params: ParamStore, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, state: dict | None = None, t: int = 1) -> dict:
    """One functional Adam update in place; returns the new moment state.

    ``state`` maps name -> (m, v); missing entries start at zero.
    """
    if t < 1:
        raise ValueError("adam step index starts at 1")
    b1, b2 = betas
    state = dict(state or {})
    with torch.no_grad():
        for name, p in params.items():
            g = params.grad(name)
            m, v = state.get(name, (torch.zeros_like(p), torch.zeros_like(p)))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p -= lr * m_hat / (torch.sqrt(v_hat) + eps)
            state[name] = (m, v)
    return state


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    checked: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def grad_check(
    fn: Callable[[], Tensor],
    params: ParamStore | Iterable[ParamStore],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords_per_param: int | None = None,
    floor: float = 1e-7,
    gen: torch.Generator | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of ``fn()`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``tol`` is informational; callers compare against ``report.max_rel_error``.
    """
    stores = [params] if isinstance(params, ParamStore) else list(params)
    for s in stores:
        s.zero_grad()
    loss = fn()
    backward(loss, stores)
    worst = GradCheckReport(0.0, "", (), 0)
    for store in stores:
        for name, p in store.items():
            analytic = store.grad(name).detach().clone()
            flat = p.detach().view(-1)
            idx = range(flat.numel())
            if max_coords_per_param is not None and flat.numel() > max_coords_per_param:
                g = gen or torch.Generator().manual_seed(0)
                idx = torch.randperm(flat.numel(), generator=g)[:max_coords_per_param].tolist()
            for k in idx:
                orig = flat[k].item()
                with torch.no_grad():
                    flat[k] = orig + eps
                    up = fn().item()
                    flat[k] = orig - eps
                    down = fn().item()
                    flat[k] = orig
                numeric = (up - down) / (2 * eps)
                a = analytic.view(-1)[k].item()
                rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst.checked += 1
                if rel > worst.max_rel_error:
                    worst.max_rel_error = rel
                    worst.worst_param = name
                    worst.worst_index = tuple(int(i) for i in torch.unravel_index(torch.tensor(k), p.shape))
    for s in stores:
        s.zero_grad()
    return worst
