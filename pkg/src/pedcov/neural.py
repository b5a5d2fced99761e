"""Small differentiable building blocks on top of torch autograd.

Layers are plain functions over a :class:`ParamStore` (named tensors), with
frozen ``*Spec`` dataclasses describing sizes and parameter names.  Gradients
come from torch's reverse-mode tape; :func:`grad_check` verifies them against
central differences.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

DTYPE = torch.float64
CHECKPOINT_FORMAT = "pedcov-tensors"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Named parameter tensors plus Adam moments."""

    def __init__(self, dtype: torch.dtype = DTYPE):
        self.dtype = dtype
        self.params: dict[str, torch.Tensor] = {}
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.t = 0

    def add(self, name: str, value: torch.Tensor) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = value.detach().to(self.dtype).clone().requires_grad_(True)
        self.params[name] = p
        self.m[name] = torch.zeros_like(p, requires_grad=False)
        self.v[name] = torch.zeros_like(p, requires_grad=False)
        return p

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def size(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_zero(self, prefix: str = "") -> None:
        with torch.no_grad():
            for n in self.names(prefix):
                self.params[n].zero_()

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {n: p.detach().cpu().numpy().astype(np.float64) for n, p in self.params.items()}

    def load_numpy(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            if missing or extra:
                raise KeyError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        with torch.no_grad():
            for n, a in arrays.items():
                if n not in self.params:
                    continue
                p = self.params[n]
                if tuple(a.shape) != tuple(p.shape):
                    raise ValueError(f"shape mismatch for {n}: {a.shape} vs {tuple(p.shape)}")
                p.copy_(torch.as_tensor(a, dtype=self.dtype))


def _uniform(gen: torch.Generator, shape, bound: float, dtype) -> torch.Tensor:
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2.0 - 1.0).to(dtype) * bound


@dataclass(frozen=True)
class DenseSpec:
    name: str
    in_size: int
    out_size: int

    def init(self, store: ParamStore, gen: torch.Generator) -> None:
        _check_sizes(self.in_size, self.out_size)
        b = math.sqrt(1.0 / self.in_size)
        store.add(f"{self.name}.W", _uniform(gen, (self.out_size, self.in_size), b, store.dtype))
        store.add(f"{self.name}.b", torch.zeros(self.out_size))


@dataclass(frozen=True)
class LstmCellSpec:
    name: str
    input_size: int
    hidden_size: int

    def init(self, store: ParamStore, gen: torch.Generator) -> None:
        _check_sizes(self.input_size, self.hidden_size)
        fan_in = self.input_size + self.hidden_size
        bound = math.sqrt(1.0 / fan_in)
        store.add(f"{self.name}.W", _uniform(gen, (4 * self.hidden_size, fan_in), bound, store.dtype))
        bias = torch.zeros(4 * self.hidden_size)
        bias[self.hidden_size : 2 * self.hidden_size] = 1.0  # forget gate
        store.add(f"{self.name}.b", bias)


@dataclass(frozen=True)
class GruCellSpec:
    name: str
    input_size: int
    hidden_size: int

    def init(self, store: ParamStore, gen: torch.Generator) -> None:
        _check_sizes(self.input_size, self.hidden_size)
        fan_in = self.input_size + self.hidden_size
        bound = math.sqrt(1.0 / fan_in)
        store.add(f"{self.name}.W_zr", _uniform(gen, (2 * self.hidden_size, fan_in), bound, store.dtype))
        store.add(f"{self.name}.b_zr", torch.zeros(2 * self.hidden_size))
        store.add(f"{self.name}.W_n", _uniform(gen, (self.hidden_size, fan_in), bound, store.dtype))
        store.add(f"{self.name}.b_n", torch.zeros(self.hidden_size))


@dataclass(frozen=True)
class MlpSpec:
    """dense -> sigmoid -> dropout -> dense."""

    name: str
    in_size: int
    hidden_size: int
    out_size: int
    dropout: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def init(self, store: ParamStore, gen: torch.Generator) -> None:
        DenseSpec(f"{self.name}.l1", self.in_size, self.hidden_size).init(store, gen)
        DenseSpec(f"{self.name}.l2", self.hidden_size, self.out_size).init(store, gen)


@dataclass(frozen=True)
class AttentionSpec:
    name: str
    query_size: int
    key_size: int
    attn_size: int

    def init(self, store: ParamStore, gen: torch.Generator) -> None:
        _check_sizes(self.query_size, self.key_size, self.attn_size)
        store.add(f"{self.name}.W_q", _uniform(gen, (self.attn_size, self.query_size), math.sqrt(1.0 / self.query_size), store.dtype))
        store.add(f"{self.name}.W_k", _uniform(gen, (self.attn_size, self.key_size), math.sqrt(1.0 / self.key_size), store.dtype))
        store.add(f"{self.name}.b", torch.zeros(self.attn_size))
        store.add(f"{self.name}.v", _uniform(gen, (self.attn_size,), math.sqrt(1.0 / self.attn_size), store.dtype))


def _check_sizes(*sizes: int) -> None:
    if any(s < 1 for s in sizes):
        raise ValueError(f"layer sizes must be >= 1, got {sizes}")


def _check_last(x: torch.Tensor, size: int, what: str) -> None:
    if x.shape[-1] != size:
        raise ValueError(f"{what}: expected last dimension {size}, got {tuple(x.shape)}")


def dense(spec: DenseSpec, params, x: torch.Tensor) -> torch.Tensor:
    _check_last(x, spec.in_size, spec.name)
    return x @ params[f"{spec.name}.W"].T + params[f"{spec.name}.b"]


def lstm_step(spec: LstmCellSpec, params, x, h, c):
    _check_last(x, spec.input_size, spec.name)
    _check_last(h, spec.hidden_size, spec.name)
    _check_last(c, spec.hidden_size, spec.name)
    gates = torch.cat([x, h], dim=-1) @ params[f"{spec.name}.W"].T + params[f"{spec.name}.b"]
    i, f, g, o = gates.chunk(4, dim=-1)
    c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_new = torch.sigmoid(o) * torch.tanh(c_new)
    return h_new, c_new


def lstm_sequence(spec: LstmCellSpec, params, xs: torch.Tensor):
    """Run over xs of shape (..., T, input); returns all hidden states (..., T, hidden)."""
    batch = xs.shape[:-2]
    h = xs.new_zeros(*batch, spec.hidden_size)
    c = xs.new_zeros(*batch, spec.hidden_size)
    hs = []
    for t in range(xs.shape[-2]):
        h, c = lstm_step(spec, params, xs[..., t, :], h, c)
        hs.append(h)
    return torch.stack(hs, dim=-2)


def gru_step(spec: GruCellSpec, params, x, h):
    _check_last(x, spec.input_size, spec.name)
    _check_last(h, spec.hidden_size, spec.name)
    zr = torch.sigmoid(torch.cat([x, h], dim=-1) @ params[f"{spec.name}.W_zr"].T + params[f"{spec.name}.b_zr"])
    z, r = zr.chunk(2, dim=-1)
    n = torch.tanh(torch.cat([x, r * h], dim=-1) @ params[f"{spec.name}.W_n"].T + params[f"{spec.name}.b_n"])
    return (1.0 - z) * n + z * h


def mlp_forward(spec: MlpSpec, params, x, train_mode: bool = False, rng: torch.Generator | None = None):
    hidden = torch.sigmoid(dense(DenseSpec(f"{spec.name}.l1", spec.in_size, spec.hidden_size), params, x))
    if train_mode and spec.dropout > 0.0:
        keep = 1.0 - spec.dropout
        mask = torch.rand(hidden.shape, generator=rng, dtype=torch.float64).to(hidden.dtype) < keep
        hidden = hidden * mask / keep
    return dense(DenseSpec(f"{spec.name}.l2", spec.hidden_size, spec.out_size), params, hidden)


def additive_attention(spec: AttentionSpec, params, query, keys, values, mask=None):
    """Bahdanau attention of ``query`` (..., Q) over ``keys`` (..., M, K).

    ``values`` is (..., M, V); ``mask`` (..., M) is True for present entries.
    Returns ``(context, weights)``; rows with no present entry get a zero context
    and zero weights.
    """
    if isinstance(keys, (list, tuple)):
        keys = torch.stack(list(keys), dim=-2) if keys else query.new_zeros(*query.shape[:-1], 0, spec.key_size)
    if isinstance(values, (list, tuple)):
        values = torch.stack(list(values), dim=-2) if values else query.new_zeros(*query.shape[:-1], 0, 1)
    if keys.shape[-2] != values.shape[-2]:
        raise ValueError("keys and values must have the same count")
    n = keys.shape[-2]
    if mask is None:
        mask = torch.ones(keys.shape[:-1], dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if n == 0:
        return values.new_zeros(*query.shape[:-1], values.shape[-1]), values.new_zeros(*query.shape[:-1], 0)
    _check_last(query, spec.query_size, spec.name)
    _check_last(keys, spec.key_size, spec.name)
    proj_q = query @ params[f"{spec.name}.W_q"].T
    proj_k = keys @ params[f"{spec.name}.W_k"].T
    e = torch.tanh(proj_q.unsqueeze(-2) + proj_k + params[f"{spec.name}.b"])
    scores = e @ params[f"{spec.name}.v"]
    scores = scores.masked_fill(~mask, -math.inf)
    any_present = mask.any(dim=-1, keepdim=True)
    scores = torch.where(any_present, scores, torch.zeros_like(scores))
    weights = torch.softmax(scores, dim=-1) * any_present
    context = (weights.unsqueeze(-1) * values).sum(dim=-2)
    return context, weights


def adam_step(
    store: ParamStore,
    grads: Mapping[str, torch.Tensor],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int | None = None,
) -> ParamStore:
    """Bias-corrected Adam update, in place.  ``t`` is the 1-based step index."""
    if t is None:
        store.t += 1
        t = store.t
    else:
        store.t = t
    with torch.no_grad():
        for name, g in grads.items():
            if g is None:
                continue
            p = store.params[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
            m = store.m[name].mul_(beta1).add_(g, alpha=1.0 - beta1)
            v = store.v[name].mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            m_hat = m / (1.0 - beta1**t)
            v_hat = v / (1.0 - beta2**t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return store


def collect_grads(store: ParamStore, loss: torch.Tensor, names: Sequence[str] | None = None) -> dict[str, torch.Tensor]:
    names = list(store.params) if names is None else list(names)
    tensors = [store.params[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {n: (torch.zeros_like(store.params[n]) if g is None else g) for n, g in zip(names, grads)}


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def worst(self) -> str:
        if not self.per_param:
            return ""
        return max(self.per_param, key=self.per_param.get)


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    analytic: Mapping[str, torch.Tensor] | None = None,
    floor: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``fn()`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_coords`` caps how many coordinates of each tensor are probed
    (chosen at random with ``seed``); None probes every coordinate.
    """
    names = list(params)
    if analytic is None:
        tensors = [params[n] for n in names]
        out = fn()
        grads = torch.autograd.grad(out, tensors, allow_unused=True)
        analytic = {n: (torch.zeros_like(params[n]) if g is None else g) for n, g in zip(names, grads)}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, tol)
    with torch.no_grad():
        for n in names:
            p = params[n]
            flat = p.view(-1)
            a_flat = analytic[n].reshape(-1)
            idx = np.arange(flat.numel())
            if max_coords is not None and len(idx) > max_coords:
                idx = np.sort(rng.choice(idx, size=max_coords, replace=False))
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = fn().item()
                flat[i] = orig - h
                f_minus = fn().item()
                flat[i] = orig
                num = (f_plus - f_minus) / (2.0 * h)
                a = a_flat[i].item()
                rel = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, rel)
            report.per_param[n] = worst
            report.n_checked += len(idx)
            report.max_rel_error = max(report.max_rel_error, worst)
    return report


# ---------------------------------------------------------------------------
# Checkpoints: a zip of .npy members with fixed timestamps, so identical
# tensors always produce identical bytes.  Member "__meta__.json" carries the
# format name, version and free-form metadata.
# ---------------------------------------------------------------------------

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "meta": dict(meta or {})}
    path = Path(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("__meta__.json", date_time=_ZIP_EPOCH)
        info.compress_type = zipfile.ZIP_DEFLATED
        zf.writestr(info, json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("__meta__.json"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported version {header.get('version')}")
        arrays = {}
        for member in zf.namelist():
            if member == "__meta__.json":
                continue
            arrays[member[: -len(".npy")]] = np.load(io.BytesIO(zf.read(member)), allow_pickle=False)
    return arrays, header["meta"]


def save_checkpoint(path, store: ParamStore, meta: Mapping | None = None) -> None:
    save_arrays(path, store.to_numpy(), meta)


def load_checkpoint(path, store: ParamStore) -> dict:
    arrays, meta = load_arrays(path)
    store.load_numpy(arrays)
    return meta


def minibatches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Index batches over range(n), shuffled when ``rng`` is given."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]
