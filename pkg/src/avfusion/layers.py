"""Network building blocks: dense layers, residual and gated residual blocks,
single-head self/cross-modal attention, dropout and the sigmoid classifier.

Batched inputs use row-vector convention, so a dense layer computes
``x @ W + b``. Attention layers accept ``[N, d]`` or batched ``[B, N, d]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import ShapeError, Tensor

ACTIVATIONS = ("relu", "none", "sigmoid")


@dataclass
class FcParams:
    W: Tensor
    b: Tensor
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ShapeError(f"bias {self.b.shape} does not match weight {self.W.shape}")

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}


@dataclass
class ResidualParams:
    inner: list[FcParams] = field(default_factory=list)

    def __post_init__(self):
        if not self.inner:
            raise ValueError("residual mapping needs at least one layer")
        if self.inner[0].in_dim != self.inner[-1].out_dim:
            raise ShapeError(
                f"residual mapping {self.inner[0].in_dim}->{self.inner[-1].out_dim} cannot be skip-added"
            )

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, fc in enumerate(self.inner):
            for k, t in fc.tensors().items():
                out[f"{i}.{k}"] = t
        return out


@dataclass
class GateParams:
    W_g: Tensor
    b_g: Tensor

    def __post_init__(self):
        d = self.W_g.shape[0]
        if self.W_g.shape != (d, d) or self.b_g.shape != (d,):
            raise ShapeError(f"gate expects square W_g and matching b_g, got {self.W_g.shape}, {self.b_g.shape}")

    def tensors(self) -> dict[str, Tensor]:
        return {"W_g": self.W_g, "b_g": self.b_g}


@dataclass
class AttnParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor

    def __post_init__(self):
        d = self.W_Q.shape[0]
        for w in (self.W_Q, self.W_K, self.W_V):
            if w.shape != (d, d):
                raise ShapeError(f"attention projections must all be {d}x{d}, got {w.shape}")

    @property
    def dim(self) -> int:
        return self.W_Q.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V}


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_fc(rng: np.random.Generator, in_dim: int, out_dim: int, activation: str = "relu") -> FcParams:
    init = he_uniform if activation == "relu" else xavier_uniform
    return FcParams(
        Tensor(init(rng, in_dim, out_dim), requires_grad=True),
        Tensor(np.zeros(out_dim), requires_grad=True),
        activation,
    )


def init_residual(rng: np.random.Generator, dim: int, depth: int) -> ResidualParams:
    return ResidualParams([init_fc(rng, dim, dim, "relu") for _ in range(depth)])


def init_gate(rng: np.random.Generator, dim: int) -> GateParams:
    return GateParams(
        Tensor(xavier_uniform(rng, dim, dim), requires_grad=True),
        Tensor(np.zeros(dim), requires_grad=True),
    )


def init_attn(rng: np.random.Generator, dim: int) -> AttnParams:
    return AttnParams(*(Tensor(xavier_uniform(rng, dim, dim), requires_grad=True) for _ in range(3)))


# ---------------------------------------------------------------------------
# forward functions
# ---------------------------------------------------------------------------


def _activate(z: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return nc.relu(z)
    if activation == "sigmoid":
        return nc.sigmoid(z)
    return z


def fc_forward(x: Tensor, p: FcParams) -> Tensor:
    if x.shape[-1] != p.in_dim:
        raise ShapeError(f"fc: input width {x.shape[-1]} != layer input {p.in_dim}")
    if x.ndim == 1:
        raise ShapeError("fc: input must be at least 2-D")
    return _activate(nc.add_bias(nc.matmul(x, p.W), p.b), p.activation)


def _residual_mapping(x: Tensor, p: ResidualParams) -> Tensor:
    h = x
    for fc in p.inner:
        h = fc_forward(h, fc)
    if h.shape != x.shape:
        raise ShapeError(f"residual: F(x) shape {h.shape} != x shape {x.shape}")
    return h


def residual_block(x: Tensor, p: ResidualParams) -> Tensor:
    """``F(x) + x``."""
    return nc.add(_residual_mapping(x, p), x)


def gated_residual_block(x: Tensor, p: ResidualParams, g: GateParams) -> Tensor:
    """``g * F(x) + (1 - g) * x`` with ``g = sigmoid(x W_g + b_g)``."""
    if x.shape[-1] != g.W_g.shape[0]:
        raise ShapeError(f"gate width {g.W_g.shape[0]} != input width {x.shape[-1]}")
    f = _residual_mapping(x, p)
    gate = nc.sigmoid(nc.add_bias(nc.matmul(x, g.W_g), g.b_g))
    keep = nc.add_scalar(nc.scale(gate, -1.0), 1.0)
    return nc.add(nc.mul(gate, f), nc.mul(keep, x))


def _attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    d = q.shape[-1]
    logits = nc.scale(nc.matmul(q, nc.transpose_last2(k)), 1.0 / math.sqrt(d))
    return nc.matmul(nc.softmax_rows(logits), v)


def _check_tokens(X: Tensor, d: int, who: str) -> None:
    if X.ndim not in (2, 3) or X.shape[-1] != d:
        raise ShapeError(f"{who}: expected [..., N, {d}] input, got {X.shape}")


def self_attention(X: Tensor, p: AttnParams) -> Tensor:
    """``softmax(Q K^T / sqrt(d)) V`` with Q, K, V projected from the same rows."""
    _check_tokens(X, p.dim, "self_attention")
    return _attend(nc.matmul(X, p.W_Q), nc.matmul(X, p.W_K), nc.matmul(X, p.W_V))


def cross_modal_attention(Xa: Tensor, Xv: Tensor, pa: AttnParams, pv: AttnParams) -> tuple[Tensor, Tensor]:
    """Return (audio-guided visual, visual-guided audio) features.

    ``pa`` carries the audio-side projections (queries, keys and values computed
    from audio rows) and ``pv`` the visual-side ones. The first output has one
    row per audio row, the second one row per visual row.
    """
    if pa.dim != pv.dim:
        raise ShapeError(f"cross attention widths differ: {pa.dim} vs {pv.dim}")
    _check_tokens(Xa, pa.dim, "cross_modal_attention(audio)")
    _check_tokens(Xv, pv.dim, "cross_modal_attention(visual)")
    if Xa.ndim != Xv.ndim or (Xa.ndim == 3 and Xa.shape[0] != Xv.shape[0]):
        raise ShapeError(f"cross attention batch layout differs: {Xa.shape} vs {Xv.shape}")
    v_given_a = _attend(nc.matmul(Xa, pa.W_Q), nc.matmul(Xv, pv.W_K), nc.matmul(Xv, pv.W_V))
    a_given_v = _attend(nc.matmul(Xv, pv.W_Q), nc.matmul(Xa, pa.W_K), nc.matmul(Xa, pa.W_V))
    return v_given_a, a_given_v


def dropout(x: Tensor, rate: float, seed, training: bool) -> Tensor:
    """Inverted dropout; ``seed`` may be an int or a ``numpy.random.Generator``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = rng.random(x.shape) >= rate
    return nc.mul(x, Tensor(keep / (1.0 - rate)))


def classifier_head(x: Tensor, p: FcParams) -> Tensor:
    """Independent per-class sigmoid probabilities."""
    if p.activation != "sigmoid":
        raise ValueError("classifier head must use a sigmoid activation")
    return fc_forward(x, p)
