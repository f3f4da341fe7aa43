"""Catalog of the fifteen audio-visual architectures and a small interpreter
that runs them.

Each architecture compiles to a flat list of steps that read and write named
registers (``"visual"`` and ``"audio"`` hold the inputs). The plan is pure
metadata, so parameter counts at full width are computed without allocating
any weights; ``build_model`` materialises the tensors.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterator

import numpy as np

from . import layers as L
from . import numcore as nc
from .numcore import ShapeError, Tensor

BASELINES = (
    "fc_audio",
    "fc_visual",
    "fc_early",
    "fc_late",
    "fcrn_early",
    "fcrn_late",
    "fcrgn_early",
    "fcrgn_late",
)
PROPOSED = (
    "fc_attention",
    "res_attention_early",
    "res_attention_late",
    "attend_fusion",
    "av_attention",
    "self_cross_attention",
    "self_attended_cross_fcrn",
)
ARCHITECTURES = BASELINES + PROPOSED

_FUSION = {
    "fc_audio": "none",
    "fc_visual": "none",
    "fc_early": "early",
    "fc_late": "late",
    "fcrn_early": "early",
    "fcrn_late": "late",
    "fcrgn_early": "early",
    "fcrgn_late": "late",
    "fc_attention": "late",
    "res_attention_early": "early",
    "res_attention_late": "late",
    "attend_fusion": "late",
    "av_attention": "late",
    "self_cross_attention": "late",
    "self_attended_cross_fcrn": "late",
}

# Depth of each per-modality (or post-concat, for early fusion) FC stack.
# Baseline depths are the smallest that reproduce the published counts.
_BRANCH_DEPTH = {
    "fc_audio": 2,
    "fc_visual": 2,
    "fc_early": 2,
    "fc_late": 3,
    "fcrn_early": 3,
    "fcrn_late": 3,
    "fcrgn_early": 3,
    "fcrgn_late": 3,
    "fc_attention": 2,
    "res_attention_early": 3,
    "res_attention_late": 3,
    "attend_fusion": 1,
    "av_attention": 1,
    "self_cross_attention": 1,
    "self_attended_cross_fcrn": 3,
}

DESCRIPTIONS = {
    "fc_audio": "audio only: 2 hidden FC layers + sigmoid classifier",
    "fc_visual": "visual only: 2 hidden FC layers + sigmoid classifier",
    "fc_early": "concat(visual, audio) -> 2 hidden FC -> classifier",
    "fc_late": "per-modality 3 hidden FC -> concat -> classifier",
    "fcrn_early": "concat -> FC -> residual block (2 inner FC) -> classifier",
    "fcrn_late": "per-modality FC + residual block (2 inner FC) -> concat -> classifier",
    "fcrgn_early": "as fcrn_early with a sigmoid-gated residual block",
    "fcrgn_late": "as fcrn_late with sigmoid-gated residual blocks",
    "fc_attention": "per-modality tokens -> self-attention -> concat -> 2 FC -> classifier",
    "res_attention_early": "concat inputs -> tokens -> self-attention -> FC + residual block -> classifier",
    "res_attention_late": "per-modality self-attention -> FC + residual block -> concat -> classifier",
    "attend_fusion": "per-modality self-attention -> FC -> concat -> FC -> classifier",
    "av_attention": "self-attention, then cross-modal attention concatenated with self-attended "
    "features -> per-stream FC -> concat -> FC -> classifier",
    "self_cross_attention": "av_attention with an extra self-attention layer per stream after the cross-modal stage",
    "self_attended_cross_fcrn": "av_attention with per-stream FC + residual blocks and a residual fusion stack",
}


@dataclass(frozen=True)
class DimDefaults:
    hidden_baseline: int = 8000
    hidden_proposed: int = 2000
    attn_dim: int = 1024
    num_classes: int = 4716
    visual_dim: int = 1024
    audio_dim: int = 128


DEFAULTS = DimDefaults()
TOY_DIMS = dict(visual_dim=6, audio_dim=4, hidden_dim=5, attn_dim=4, num_classes=3)


@dataclass(frozen=True)
class ArchSpec:
    name: str
    visual_dim: int = DEFAULTS.visual_dim
    audio_dim: int = DEFAULTS.audio_dim
    hidden_dim: int = 0  # 0 -> family default
    attn_dim: int = DEFAULTS.attn_dim
    num_classes: int = DEFAULTS.num_classes
    branch_depth: int = 0  # 0 -> family default
    fusion: str = ""
    num_tokens: int = 2
    fusion_depth: int = 1
    attention: bool = True
    modalities: str = "audio,visual"

    def __post_init__(self):
        if self.name not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.name!r}")
        if not self.hidden_dim:
            hidden = DEFAULTS.hidden_baseline if self.name in BASELINES else DEFAULTS.hidden_proposed
            object.__setattr__(self, "hidden_dim", hidden)
        if not self.branch_depth:
            object.__setattr__(self, "branch_depth", _BRANCH_DEPTH[self.name])
        if not self.fusion:
            object.__setattr__(self, "fusion", _FUSION[self.name])
        self.validate()

    @property
    def is_attention(self) -> bool:
        return self.name in PROPOSED

    @property
    def label(self) -> str:
        tags = []
        if not self.attention:
            tags.append("no-attn")
        if self.modalities != "audio,visual":
            tags.append(self.modalities + "-only")
        return self.name + (f"[{','.join(tags)}]" if tags else "")

    def active_modalities(self) -> tuple[str, ...]:
        return tuple(m for m in self.modalities.split(",") if m)

    def validate(self) -> None:
        for f in ("visual_dim", "audio_dim", "hidden_dim", "attn_dim", "num_classes", "branch_depth",
                  "num_tokens", "fusion_depth"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive, got {getattr(self, f)}")
        if self.fusion != _FUSION[self.name]:
            raise ValueError(f"{self.name} uses fusion={_FUSION[self.name]!r}, not {self.fusion!r}")
        if not self.attention and not self.is_attention:
            raise ValueError(f"{self.name} has no attention layers to remove")
        mods = self.active_modalities()
        if not mods or any(m not in ("audio", "visual") for m in mods):
            raise ValueError(f"bad modalities {self.modalities!r}")
        if mods != ("audio", "visual") and self.name != "attend_fusion":
            raise ValueError("single-modality ablations are only defined for attend_fusion")
        if self.is_attention:
            n = self.num_tokens
            if self.fusion == "early":
                if (self.visual_dim + self.audio_dim) % n:
                    raise ValueError(f"concatenated input width not divisible into {n} tokens")
            else:
                for m in mods:
                    if getattr(self, f"{m}_dim") % n:
                        raise ValueError(f"{m}_dim not divisible into {n} tokens")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                continue
            if k in ("name", "fusion", "modalities"):
                out[k] = str(v)
            elif k == "attention":
                out[k] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            else:
                out[k] = int(v)
        return cls(**out)


def toy_spec(name: str, **overrides) -> ArchSpec:
    return ArchSpec(name, **{**TOY_DIMS, **overrides})


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Step:
    op: str  # fc | residual | gated | tokens | flatten | concat | attn | cross | classifier
    name: str = ""
    src: tuple[str, ...] = ()
    dst: tuple[str, ...] = ()
    in_dim: int = 0
    out_dim: int = 0
    activation: str = "relu"
    depth: int = 0
    dropout: bool = False

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.op in ("fc", "classifier"):
            return {f"{self.name}.W": (self.in_dim, self.out_dim), f"{self.name}.b": (self.out_dim,)}
        if self.op in ("residual", "gated"):
            d = self.in_dim
            shapes = {}
            for i in range(self.depth):
                shapes[f"{self.name}.{i}.W"] = (d, d)
                shapes[f"{self.name}.{i}.b"] = (d,)
            if self.op == "gated":
                shapes[f"{self.name}.W_g"] = (d, d)
                shapes[f"{self.name}.b_g"] = (d,)
            return shapes
        if self.op == "attn":
            return {f"{self.name}.{k}": (self.in_dim, self.in_dim) for k in ("W_Q", "W_K", "W_V")}
        if self.op == "cross":
            return {
                f"{self.name}.{side}.{k}": (self.in_dim, self.in_dim)
                for side in ("audio", "visual")
                for k in ("W_Q", "W_K", "W_V")
            }
        return {}


class _Planner:
    def __init__(self, spec: ArchSpec):
        self.spec = spec
        self.steps: list[Step] = []

    def add(self, **kw) -> None:
        self.steps.append(Step(**kw))

    def stack(self, prefix: str, src: str, in_dim: int, depth: int, kind: str = "plain") -> str:
        """``depth`` hidden layers of width hidden_dim; residual kinds fold all
        but the first layer into one (gated) residual block."""
        h = self.spec.hidden_dim
        self.add(op="fc", name=f"{prefix}.fc0", src=(src,), dst=(f"{prefix}.h",), in_dim=in_dim,
                 out_dim=h, dropout=True)
        cur = f"{prefix}.h"
        if depth > 1:
            if kind == "plain":
                for i in range(1, depth):
                    self.add(op="fc", name=f"{prefix}.fc{i}", src=(cur,), dst=(cur,), in_dim=h, out_dim=h,
                             dropout=True)
            else:
                op = "gated" if kind == "gated" else "residual"
                self.add(op=op, name=f"{prefix}.res", src=(cur,), dst=(cur,), in_dim=h, out_dim=h,
                         depth=depth - 1, dropout=True)
        return cur

    def attention_branch(self, prefix: str, src: str, width: int) -> str:
        """Split a feature vector into tokens, project each token to the
        attention width and apply single-head self-attention."""
        s = self.spec
        n, a = s.num_tokens, s.attn_dim
        tok = f"{prefix}.tok"
        self.add(op="tokens", src=(src,), dst=(tok,), in_dim=width, out_dim=n)
        self.add(op="fc", name=f"{prefix}.proj", src=(tok,), dst=(tok,), in_dim=width // n, out_dim=a,
                 activation="none")
        self.self_attn(f"{prefix}.attn", tok, a)
        return tok

    def self_attn(self, name: str, reg: str, dim: int) -> None:
        if self.spec.attention:
            self.add(op="attn", name=name, src=(reg,), dst=(reg,), in_dim=dim, out_dim=dim)
        else:
            # no-attention ablation: same width, token-wise dense layer
            self.add(op="fc", name=name.replace("attn", "dense"), src=(reg,), dst=(reg,), in_dim=dim,
                     out_dim=dim)

    def flatten(self, reg: str, width: int) -> str:
        out = f"{reg}.flat"
        self.add(op="flatten", src=(reg,), dst=(out,), in_dim=width, out_dim=width)
        return out

    def concat(self, srcs: tuple[str, ...], dst: str) -> str:
        self.add(op="concat", src=srcs, dst=(dst,))
        return dst

    def classifier(self, src: str, in_dim: int) -> None:
        self.add(op="classifier", name="classifier", src=(src,), dst=("probs",), in_dim=in_dim,
                 out_dim=self.spec.num_classes, activation="sigmoid")


def plan(spec: ArchSpec) -> list[Step]:
    """Compile an ArchSpec to its ordered list of steps."""
    p = _Planner(spec)
    s = spec
    h, a, n, depth = s.hidden_dim, s.attn_dim, s.num_tokens, s.branch_depth
    dims = {"visual": s.visual_dim, "audio": s.audio_dim}
    name = s.name

    if name in ("fc_audio", "fc_visual"):
        m = name[3:]
        p.classifier(p.stack(m, m, dims[m], depth), h)
    elif name in ("fc_early", "fcrn_early", "fcrgn_early"):
        kind = {"fc": "plain", "fcrn": "residual", "fcrgn": "gated"}[name.split("_")[0]]
        x = p.concat(("visual", "audio"), "joint.in")
        p.classifier(p.stack("joint", x, s.visual_dim + s.audio_dim, depth, kind), h)
    elif name in ("fc_late", "fcrn_late", "fcrgn_late"):
        kind = {"fc": "plain", "fcrn": "residual", "fcrgn": "gated"}[name.split("_")[0]]
        outs = tuple(p.stack(m, m, dims[m], depth, kind) for m in ("visual", "audio"))
        p.classifier(p.concat(outs, "joint"), 2 * h)
    elif name == "fc_attention":
        flats = tuple(p.flatten(p.attention_branch(m, m, dims[m]), n * a) for m in ("visual", "audio"))
        x = p.concat(flats, "joint.in")
        p.classifier(p.stack("joint", x, 2 * n * a, depth), h)
    elif name == "res_attention_early":
        x = p.concat(("visual", "audio"), "joint.in")
        tok = p.attention_branch("joint", x, s.visual_dim + s.audio_dim)
        flat = p.flatten(tok, n * a)
        p.classifier(p.stack("joint", flat, n * a, depth, "residual"), h)
    elif name == "res_attention_late":
        outs = tuple(
            p.stack(m, p.flatten(p.attention_branch(m, m, dims[m]), n * a), n * a, depth, "residual")
            for m in ("visual", "audio")
        )
        p.classifier(p.concat(outs, "joint"), 2 * h)
    elif name == "attend_fusion":
        mods = s.active_modalities()
        outs = tuple(
            p.stack(m, p.flatten(p.attention_branch(m, m, dims[m]), n * a), n * a, depth) for m in mods
        )
        x = p.concat(outs, "joint.in")
        p.classifier(p.stack("joint", x, len(mods) * h, s.fusion_depth), h)
    else:  # av_attention, self_cross_attention, self_attended_cross_fcrn
        tv = p.attention_branch("visual", "visual", dims["visual"])
        ta = p.attention_branch("audio", "audio", dims["audio"])
        p.add(op="cross", name="cross", src=(ta, tv), dst=("v_given_a", "a_given_v"), in_dim=a, out_dim=a)
        sa = p.concat((ta, "v_given_a"), "audio.stream")
        sv = p.concat((tv, "a_given_v"), "visual.stream")
        if name == "self_cross_attention":
            p.self_attn("audio.attn2", sa, 2 * a)
            p.self_attn("visual.attn2", sv, 2 * a)
        kind = "residual" if name == "self_attended_cross_fcrn" else "plain"
        outs = tuple(
            p.stack(m, p.flatten(reg, 2 * n * a), 2 * n * a, depth, kind)
            for m, reg in (("visual", sv), ("audio", sa))
        )
        x = p.concat(outs, "joint.in")
        p.classifier(p.stack("joint", x, 2 * h, s.fusion_depth + (1 if kind == "residual" else 0), kind), h)
    return p.steps


def param_shapes(spec: ArchSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for step in plan(spec):
        for k, v in step.param_shapes().items():
            if k in shapes:
                raise RuntimeError(f"duplicate parameter name {k}")
            shapes[k] = v
    return shapes


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class Model:
    spec: ArchSpec
    params: dict[str, Tensor]
    steps: list[Step]
    blocks: dict[str, object] = field(default_factory=dict)
    dropout_rate: float = 0.4
    seed: int = 0

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def _init_step(step: Step, rng: np.random.Generator):
    if step.op in ("fc", "classifier"):
        return L.init_fc(rng, step.in_dim, step.out_dim, step.activation)
    if step.op in ("residual", "gated"):
        res = L.init_residual(rng, step.in_dim, step.depth)
        return (res, L.init_gate(rng, step.in_dim)) if step.op == "gated" else res
    if step.op == "attn":
        return L.init_attn(rng, step.in_dim)
    if step.op == "cross":
        return L.init_attn(rng, step.in_dim), L.init_attn(rng, step.in_dim)
    return None


def _block_tensors(step: Step, block) -> dict[str, Tensor]:
    if step.op == "gated":
        res, gate = block
        return {**res.tensors(), **gate.tensors()}
    if step.op == "cross":
        pa, pv = block
        return {**{f"audio.{k}": t for k, t in pa.tensors().items()},
                **{f"visual.{k}": t for k, t in pv.tensors().items()}}
    return block.tensors()


def build_model(spec: ArchSpec, seed: int = 0) -> Model:
    """Materialise parameters for ``spec`` deterministically from ``seed``."""
    steps = plan(spec)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    blocks: dict[str, object] = {}
    for step in steps:
        block = _init_step(step, rng)
        if block is None:
            continue
        blocks[step.name] = block
        for k, t in _block_tensors(step, block).items():
            t.name = f"{step.name}.{k}"
            params[t.name] = t
    expected = param_shapes(spec)
    assert list(expected) == list(params), "plan and materialised parameters disagree"
    return Model(spec, params, steps, blocks, seed=seed)


def load_parameters(model: Model, values: dict[str, np.ndarray]) -> None:
    """Overwrite parameters in place (used by checkpoint restore)."""
    missing = set(model.params) - set(values)
    if missing:
        raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
    for name, t in model.params.items():
        v = np.asarray(values[name], dtype=np.float64)
        if v.shape != t.shape:
            raise ShapeError(f"{name}: stored shape {v.shape} != model shape {t.shape}")
        t.data[...] = v


def _as_tensor(x, width: int, who: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim != 2 or t.shape[1] != width:
        raise ShapeError(f"{who} input must be [B, {width}], got {t.shape}")
    return t


def forward(
    m: Model,
    visual,
    audio,
    training: bool = False,
    seed: int = 0,
    dropout_rate: float | None = None,
) -> Tensor:
    """Run the model; returns ``[B, num_classes]`` sigmoid probabilities."""
    s = m.spec
    rate = m.dropout_rate if dropout_rate is None else dropout_rate
    used = {r for st in m.steps for r in st.src}
    regs: dict[str, Tensor] = {}
    if "visual" in used:
        regs["visual"] = _as_tensor(visual, s.visual_dim, "visual")
    if "audio" in used:
        regs["audio"] = _as_tensor(audio, s.audio_dim, "audio")
    if len(regs) == 2 and regs["visual"].shape[0] != regs["audio"].shape[0]:
        raise ShapeError("visual and audio batch sizes differ")
    rng = np.random.default_rng(seed)

    for st in m.steps:
        x = regs[st.src[0]]
        if st.op == "fc":
            y = L.fc_forward(x, m.blocks[st.name])
        elif st.op == "classifier":
            y = L.classifier_head(x, m.blocks[st.name])
        elif st.op == "residual":
            y = L.residual_block(x, m.blocks[st.name])
        elif st.op == "gated":
            res, gate = m.blocks[st.name]
            y = L.gated_residual_block(x, res, gate)
        elif st.op == "attn":
            y = L.self_attention(x, m.blocks[st.name])
        elif st.op == "cross":
            pa, pv = m.blocks[st.name]
            v_a, a_v = L.cross_modal_attention(x, regs[st.src[1]], pa, pv)
            regs[st.dst[0]], regs[st.dst[1]] = v_a, a_v
            continue
        elif st.op == "tokens":
            y = nc.reshape(x, (x.shape[0], st.out_dim, st.in_dim // st.out_dim))
        elif st.op == "flatten":
            y = nc.reshape(x, (x.shape[0], math.prod(x.shape[1:])))
        elif st.op == "concat":
            y = nc.concat_lastdim(*(regs[r] for r in st.src))
        else:
            raise ValueError(f"unknown step {st.op}")
        if st.dropout:
            y = L.dropout(y, rate, rng, training)
        regs[st.dst[0]] = y
    return regs["probs"]


def count_params(m: Model | ArchSpec) -> int:
    """Exact number of scalar parameters, biases included."""
    if isinstance(m, Model):
        return sum(t.data.size for t in m.params.values())
    return sum(math.prod(shape) for shape in param_shapes(m).values())


def count_by_block(spec: ArchSpec) -> list[tuple[str, int]]:
    rows = []
    for st in plan(spec):
        n = sum(math.prod(v) for v in st.param_shapes().values())
        if n:
            rows.append((st.name, n))
    return rows


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    family: str  # baseline | proposed
    description: str
    spec: ArchSpec


def list_architectures() -> list[CatalogEntry]:
    return [
        CatalogEntry(n, "baseline" if n in BASELINES else "proposed", DESCRIPTIONS[n], ArchSpec(n))
        for n in ARCHITECTURES
    ]


def with_dims(spec: ArchSpec, **dims) -> ArchSpec:
    return replace(spec, **dims)
