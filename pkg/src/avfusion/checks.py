"""Finite-difference checks for every layer and every architecture."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import layers as L
from . import numcore as nc
from .models import ARCHITECTURES, build_model, forward, toy_spec
from .numcore import GradcheckReport, Tensor


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


def _weighted_sum(out: Tensor, R: np.ndarray) -> Tensor:
    # random weights keep symmetric cancellations from hiding bad gradients
    return nc.sum_all(nc.mul(out, Tensor(R)))


def _fc(rng, act, n_in=5, n_out=4):
    p = L.FcParams(_leaf(rng, n_in, n_out), _leaf(rng, n_out), act)
    x = _leaf(rng, 3, n_in)
    return (lambda: L.fc_forward(x, p)), {"x": x, "W": p.W, "b": p.b}


def _residual(rng, d=4):
    p = L.ResidualParams([L.FcParams(_leaf(rng, d, d), _leaf(rng, d), "relu") for _ in range(2)])
    x = _leaf(rng, 3, d)
    return (lambda: L.residual_block(x, p)), {"x": x, **p.tensors()}


def _gated(rng, d=4):
    p = L.ResidualParams([L.FcParams(_leaf(rng, d, d), _leaf(rng, d), "relu") for _ in range(2)])
    g = L.GateParams(_leaf(rng, d, d), _leaf(rng, d))
    x = _leaf(rng, 3, d)
    return (lambda: L.gated_residual_block(x, p, g)), {"x": x, **p.tensors(), **g.tensors()}


def _attn_params(rng, d):
    return L.AttnParams(_leaf(rng, d, d), _leaf(rng, d, d), _leaf(rng, d, d))


def _self_attention(rng, d=4):
    p = _attn_params(rng, d)
    X = _leaf(rng, 2, 3, d, scale=1.5)
    return (lambda: L.self_attention(X, p)), {"X": X, **p.tensors()}


def _cross_attention(rng, d=4):
    pa, pv = _attn_params(rng, d), _attn_params(rng, d)
    Xa = _leaf(rng, 2, 2, d, scale=1.5)
    Xv = _leaf(rng, 2, 3, d, scale=1.5)

    def f():
        v_a, a_v = L.cross_modal_attention(Xa, Xv, pa, pv)
        return nc.concat_lastdim(nc.reshape(v_a, (2, 2 * d)), nc.reshape(a_v, (2, 3 * d)))

    params = {"Xa": Xa, "Xv": Xv}
    params.update({f"audio.{k}": t for k, t in pa.tensors().items()})
    params.update({f"visual.{k}": t for k, t in pv.tensors().items()})
    return f, params


def _classifier(rng):
    p = L.FcParams(_leaf(rng, 5, 3), _leaf(rng, 3), "sigmoid")
    x = _leaf(rng, 4, 5)
    return (lambda: L.classifier_head(x, p)), {"x": x, "W": p.W, "b": p.b}


def _dropout(rng):
    x = _leaf(rng, 4, 6)
    seed = int(rng.integers(1 << 31))
    return (lambda: L.dropout(x, 0.4, seed, True)), {"x": x}


def _softmax(rng):
    x = _leaf(rng, 3, 5, scale=2.0)
    return (lambda: nc.softmax_rows(x)), {"x": x}


LAYER_CASES: dict[str, Callable] = {
    "fc_relu": lambda rng: _fc(rng, "relu"),
    "fc_linear": lambda rng: _fc(rng, "none"),
    "residual": _residual,
    "gated_residual": _gated,
    "self_attention": _self_attention,
    "cross_modal_attention": _cross_attention,
    "classifier": _classifier,
    "dropout": _dropout,
    "softmax_rows": _softmax,
}


def check_layer(name: str, seed: int, eps: float = 1e-5, tol: float = 1e-5) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    fn, params = LAYER_CASES[name](rng)
    out = fn()
    R = rng.standard_normal(out.shape)
    return nc.gradcheck_params(lambda: _weighted_sum(fn(), R), params, eps=eps, tol=tol)


def _eval_point(model, rng) -> None:
    """Overwrite parameters with a generic point for finite differencing.

    Zero biases park relu units on their kink, and near-uniform attention
    makes token rows (and the W_Q/W_K gradients) collapse. Fan-scaled weights
    keep activations O(1); query/key and classifier weights are doubled so
    the softmax and the sigmoid are neither flat nor saturated.
    """
    for name, t in model.params.items():
        if t.ndim == 1:
            t.data[...] = rng.uniform(-0.5, 0.5, size=t.shape)
            continue
        gain = 2.0 if name.endswith(("W_Q", "W_K")) or name.startswith("classifier") else 1.0
        t.data[...] = rng.uniform(-1.0, 1.0, size=t.shape) * gain * np.sqrt(3.0 / t.shape[0])


def check_architecture(name: str, seed: int, eps: float = 1e-5, tol: float = 1e-4,
                       batch: int = 8, **dims) -> GradcheckReport:
    """bce_loss of a toy-width model, checked over every parameter.

    A batch of 8 keeps most relu units alive on at least one row, so deep
    attention gradients stay well above the finite-difference noise floor.
    """
    from .trainer import bce_loss

    spec = toy_spec(name, **dims)
    model = build_model(spec, seed)
    rng = np.random.default_rng(10_000 + seed)
    _eval_point(model, rng)
    v = Tensor(rng.standard_normal((batch, spec.visual_dim)))
    a = Tensor(rng.standard_normal((batch, spec.audio_dim)))
    y = Tensor((rng.random((batch, spec.num_classes)) < 0.5).astype(float))
    return nc.gradcheck_params(lambda: bce_loss(forward(model, v, a, training=False), y),
                               model.params, eps=eps, tol=tol)


def run_all(seeds: int = 5, archs=ARCHITECTURES, eps: float = 1e-5, layer_tol: float = 1e-5,
            arch_tol: float = 1e-4) -> list[tuple[str, int, GradcheckReport]]:
    rows = []
    for name in LAYER_CASES:
        for s in range(seeds):
            rows.append((f"layer:{name}", s, check_layer(name, s, eps, layer_tol)))
    for name in archs:
        for s in range(seeds):
            rows.append((f"arch:{name}", s, check_architecture(name, s, eps, arch_tol)))
    return rows
