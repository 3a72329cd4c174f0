"""Differentiable substrate shared by every model in the package.

Parameters live in a flat, named :class:`ParamMap` of leaf tensors; networks
are evaluated functionally against it. Keeping one flat map per model makes
freezing, checkpointing, Polyak averaging and finite-difference checks all
operate on the same object.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

torch.set_num_threads(1)

DTYPE = torch.float64
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)

GradMap = dict  # name -> tensor, same key set as the ParamMap it came from


class FrozenParameterError(RuntimeError):
    """Raised when an update names a frozen parameter entry."""


class ParamMap:
    """Ordered collection of named parameter tensors.

    Shapes are fixed at creation. Frozen entries stop requiring gradients and
    refuse any further write through :meth:`assign` or an optimizer step.
    """

    def __init__(self, dtype: torch.dtype = DTYPE):
        self.dtype = dtype
        self._entries: dict[str, torch.Tensor] = {}
        self.frozen: set[str] = set()
        self.version = 0

    def add(self, name: str, value) -> torch.Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = torch.as_tensor(np.array(value, copy=True), dtype=self.dtype)
        if not torch.isfinite(t).all():
            raise ValueError(f"non-finite initial value for {name!r}")
        t.requires_grad_(True)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def keys(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def with_prefix(self, *prefixes: str) -> list[str]:
        return [k for k in self._entries if k.startswith(prefixes)]

    def trainable(self, keys: Iterable[str] | None = None) -> list[str]:
        keys = self.keys() if keys is None else list(keys)
        return [k for k in keys if k not in self.frozen]

    def numel(self, keys: Iterable[str] | None = None) -> int:
        keys = self.keys() if keys is None else keys
        return sum(self._entries[k].numel() for k in keys)

    def freeze(self, keys: Iterable[str]) -> None:
        for k in keys:
            self._entries[k].requires_grad_(False)
            self.frozen.add(k)

    def unfreeze(self, keys: Iterable[str]) -> None:
        for k in keys:
            self.frozen.discard(k)
            self._entries[k].requires_grad_(True)

    def assign(self, name: str, value: torch.Tensor) -> None:
        if name in self.frozen:
            raise FrozenParameterError(f"parameter {name!r} is frozen")
        cur = self._entries[name]
        if tuple(value.shape) != tuple(cur.shape):
            raise ValueError(f"shape mismatch for {name!r}: {tuple(value.shape)} vs {tuple(cur.shape)}")
        with torch.no_grad():
            cur.copy_(value)
        self.version += 1

    def detached(self) -> dict[str, torch.Tensor]:
        """Gradient-free view, used where a loss reads parameters it must not train."""
        return {k: v.detach() for k, v in self._entries.items()}

    def copy(self) -> ParamMap:
        out = ParamMap(self.dtype)
        for k, v in self._entries.items():
            out.add(k, v.detach().cpu().numpy())
        out.freeze(self.frozen)
        out.version = self.version
        return out

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self._entries.items()}

    def load_numpy(self, arrays: Mapping[str, np.ndarray], *, force: bool = False) -> None:
        """Overwrite entries from arrays; frozen entries only with ``force``."""
        for k, a in arrays.items():
            if k in self.frozen and not force:
                raise FrozenParameterError(f"parameter {k!r} is frozen")
            t = torch.as_tensor(np.asarray(a), dtype=self.dtype)
            if tuple(t.shape) != tuple(self._entries[k].shape):
                raise ValueError(f"shape mismatch for {k!r}")
            with torch.no_grad():
                self._entries[k].copy_(t)
        self.version += 1


def _np_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


# --------------------------------------------------------------------------
# Feedforward networks
# --------------------------------------------------------------------------

_ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "tanh": torch.tanh,
    "relu": torch.relu,
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths (input first) and one activation name per layer."""

    sizes: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if len(self.activations) != len(self.sizes) - 1:
            raise ValueError("need one activation per layer")
        for a in self.activations:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @classmethod
    def make(cls, n_in: int, hidden: Sequence[int], n_out: int, act: str = "tanh") -> MLPSpec:
        sizes = (n_in, *hidden, n_out)
        return cls(sizes, tuple([act] * len(hidden) + ["identity"]))

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]


def init_mlp(params: ParamMap, prefix: str, spec: MLPSpec, rng, out_scale: float = 1.0) -> list[str]:
    """Register ``prefix.{i}.w`` / ``prefix.{i}.b`` with fan-in uniform init."""
    rng = _np_rng(rng)
    names = []
    n_layers = len(spec.sizes) - 1
    for i, (a, b) in enumerate(zip(spec.sizes[:-1], spec.sizes[1:])):
        bound = 1.0 / math.sqrt(a)
        if i == n_layers - 1:
            bound *= out_scale
        params.add(f"{prefix}.{i}.w", rng.uniform(-bound, bound, size=(a, b)))
        params.add(f"{prefix}.{i}.b", np.zeros(b))
        names += [f"{prefix}.{i}.w", f"{prefix}.{i}.b"]
    return names


def mlp_forward(params: Mapping[str, torch.Tensor] | ParamMap, spec: MLPSpec, x: torch.Tensor,
                prefix: str) -> torch.Tensor:
    if x.shape[-1] != spec.n_in:
        raise ValueError(f"{prefix}: input width {x.shape[-1]} != {spec.n_in}")
    if not torch.isfinite(x).all():
        raise ValueError(f"{prefix}: non-finite input")
    h = x
    for i, act in enumerate(spec.activations):
        h = _ACTIVATIONS[act](h @ params[f"{prefix}.{i}.w"] + params[f"{prefix}.{i}.b"])
    return h


# --------------------------------------------------------------------------
# Gradients
# --------------------------------------------------------------------------

def backward(loss: torch.Tensor, params: ParamMap, keys: Iterable[str] | None = None) -> GradMap:
    """Reverse-mode gradient of a scalar loss over ``keys`` (default: all).

    Frozen or non-participating entries come back as zeros.
    """
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    keys = params.keys() if keys is None else list(keys)
    live = [k for k in keys if params[k].requires_grad]
    grads = {k: torch.zeros_like(params[k]) for k in keys}
    if live and loss.requires_grad:
        got = torch.autograd.grad(loss, [params[k] for k in live], allow_unused=True)
        for k, g in zip(live, got):
            if g is not None:
                grads[k] = g.detach()
    for k, g in grads.items():
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {k!r}")
    return grads


def check_gradient(loss_fn: Callable[[ParamMap], torch.Tensor], params: ParamMap, eps: float = 1e-6,
                   keys: Iterable[str] | None = None, max_per_key: int | None = None,
                   seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    ``max_per_key`` probes a seeded random subset of each tensor's entries.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    keys = params.trainable(keys)
    analytic = backward(loss_fn(params), params, keys)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in keys:
        t = params[k]
        flat = t.detach().view(-1)
        idx = np.arange(flat.numel())
        if max_per_key is not None and idx.size > max_per_key:
            idx = rng.choice(idx, size=max_per_key, replace=False)
        g = analytic[k].view(-1)
        for j in idx:
            j = int(j)
            orig = flat[j].item()
            with torch.no_grad():
                flat[j] = orig + eps
                up = loss_fn(params).item()
                flat[j] = orig - eps
                dn = loss_fn(params).item()
                flat[j] = orig
            if not (math.isfinite(up) and math.isfinite(dn)):
                raise FloatingPointError(f"non-finite loss while probing {k}[{j}]")
            num = (up - dn) / (2.0 * eps)
            err = abs(g[j].item() - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: ParamMap, grads: GradMap, state: AdamState, lr: float,
              max_grad_norm: float | None = None) -> tuple[ParamMap, AdamState]:
    """One Adam update applied in place to ``params``; returns (params, state)."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for k in grads:
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if k in params.frozen:
            raise FrozenParameterError(f"optimizer step names frozen parameter {k!r}")
        if not torch.isfinite(grads[k]).all():
            raise FloatingPointError(f"non-finite gradient for {k!r}")
    scale = 1.0
    if max_grad_norm is not None:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > max_grad_norm:
            scale = max_grad_norm / total
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for k, g in grads.items():
            g = g * scale if scale != 1.0 else g
            m = state.m.get(k)
            if m is None:
                m = state.m[k] = torch.zeros_like(g)
                state.v[k] = torch.zeros_like(g)
            v = state.v[k]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            params[k].sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    params.version += 1
    return params, state


# --------------------------------------------------------------------------
# Diagonal Gaussians
# --------------------------------------------------------------------------

@dataclass
class DiagGaussian:
    mean: torch.Tensor
    std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ValueError("mean/std shape mismatch")

    @classmethod
    def from_log_std(cls, mean: torch.Tensor, raw_log_std: torch.Tensor) -> DiagGaussian:
        return cls(mean, torch.exp(torch.clamp(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)))

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        return gaussian_log_prob(self, x)


def gaussian_log_prob(d: DiagGaussian, x: torch.Tensor) -> torch.Tensor:
    """Log-density summed over the last axis."""
    if x.shape[-1] != d.mean.shape[-1]:
        raise ValueError("length mismatch")
    if (d.std <= 0).any():
        raise ValueError("std must be strictly positive")
    z = (x - d.mean) / d.std
    return (-0.5 * LOG_2PI - torch.log(d.std) - 0.5 * z * z).sum(-1)


def sample_gaussian(d: DiagGaussian, rng) -> tuple[torch.Tensor, torch.Tensor]:
    """Reparameterized draw: returns (mean + std * noise, noise)."""
    noise = torch.as_tensor(_np_rng(rng).standard_normal(tuple(d.mean.shape)), dtype=d.mean.dtype)
    return d.mean + d.std * noise, noise


def polyak(target: ParamMap, source: ParamMap, rate: float, pairs: Sequence[tuple[str, str]]) -> None:
    """target <- (1 - rate) * target + rate * source for each (target_key, source_key)."""
    if not 0.0 < rate <= 1.0:
        raise ValueError("Polyak rate must lie in (0, 1]")
    with torch.no_grad():
        for tk, sk in pairs:
            if tk in target.frozen:
                raise FrozenParameterError(f"parameter {tk!r} is frozen")
            target[tk].mul_(1.0 - rate).add_(source[sk].detach(), alpha=rate)
    target.version += 1


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic  b"RMXCKPT\0"        8 bytes
#   u32    format version
#   u64    creation seed
#   u32    tag length, then UTF-8 module tag
#   u32    entry count
#   per entry:
#     u32 name length, UTF-8 name
#     u8  frozen flag
#     u32 ndim, then ndim x u64 dims
#     prod(dims) x f64 values

CKPT_MAGIC = b"RMXCKPT\0"
CKPT_VERSION = 1


@dataclass
class CheckpointHeader:
    version: int
    seed: int
    tag: str


def save_checkpoint(path: str | Path, params: ParamMap, seed: int, tag: str) -> None:
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<IQ", CKPT_VERSION, int(seed))
    tb = tag.encode()
    buf += struct.pack("<I", len(tb)) + tb
    buf += struct.pack("<I", len(params))
    for name, t in params.items():
        nb = name.encode()
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<B", 1 if name in params.frozen else 0)
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path, dtype: torch.dtype = DTYPE) -> tuple[ParamMap, CheckpointHeader]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = 8
    version, seed = struct.unpack_from("<IQ", raw, off)
    off += 12
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    tag = raw[off:off + n].decode()
    off += n
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params = ParamMap(dtype)
    frozen = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + n].decode()
        off += n
        (flag, ndim) = struct.unpack_from("<BI", raw, off)
        off += 5
        shape = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        params.add(name, arr)
        if flag:
            frozen.append(name)
    params.freeze(frozen)
    return params, CheckpointHeader(version, seed, tag)


def entry_bytes(params: ParamMap, name: str) -> bytes:
    return np.ascontiguousarray(params[name].detach().cpu().numpy(), dtype="<f8").tobytes()


def diff_checkpoints(a: ParamMap, b: ParamMap, keys: Iterable[str] | None = None) -> list[str]:
    """Names whose stored bytes differ between two parameter maps."""
    keys = a.keys() if keys is None else list(keys)
    return [k for k in keys if k not in b or entry_bytes(a, k) != entry_bytes(b, k)]
