"""Mixture-of-experts classifiers and frame pooling encoders.

Every model is a pure function of ``(spec, params, inputs)``. Internally all
models produce per-class *logits*; confidences are ``sigmoid(logits)``. For
the mixture the logit is computed in log space,

    logit p = logsumexp_e(log g_e - softplus(-l_e)) - logsumexp_e(log g_e - softplus(l_e))

which equals ``log p - log(1 - p)`` for ``p = sum_e g_e * sigmoid(l_e)`` without
ever forming ``1 - p``. The latent-concept head adds its correction in this
logit space, so a zero-initialised head is an exact no-op.

Parameter names are slash-separated layer paths, e.g. ``residual/bn/gamma``.
Batch-norm running statistics are stored alongside the weights with
``requires_grad=False``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import sample_frames
from .parallel import map_ordered
from .rng import RngStreams
from .tensor import BatchNormState, Mode, Tensor

KINDS = ("MoE", "MoRE", "MoHCE")
SKIPS = ("pad", "project", "none")
AGGREGATIONS = ("add", "max", "append")
POOLINGS = ("attentive_dbof", "netvlad")
ATTENTIONS = ("softmax", "linear")
ACTIVATIONS = ("none", "relu")

LINEAR_ATTN_FLOOR = 1e-8


class SpecError(ValueError):
    """Raised for an invalid model spec or parameter set."""


@dataclass
class LCSpec:
    latent_dim: int = 4096
    input_dropout_keep: float = 0.8
    aggregation: str = "add"
    fire_after_epochs: int = 10

    def validate(self) -> None:
        if self.latent_dim < 1:
            raise SpecError("lc.latent_dim must be >= 1")
        if not 0.0 < self.input_dropout_keep <= 1.0:
            raise SpecError("lc.input_dropout_keep must lie in (0, 1]")
        if self.aggregation not in AGGREGATIONS:
            raise SpecError(f"lc.aggregation must be one of {AGGREGATIONS}")
        if self.fire_after_epochs < 0:
            raise SpecError("lc.fire_after_epochs must be >= 0")


@dataclass
class PoolingSpec:
    kind: str = "netvlad"
    code_dim: int = 64
    clusters: int = 1
    out_dim: int = 64
    attention: str = "softmax"

    def validate(self) -> None:
        if self.kind not in POOLINGS:
            raise SpecError(f"pooling.kind must be one of {POOLINGS}")
        if min(self.code_dim, self.clusters, self.out_dim) < 1:
            raise SpecError("pooling widths must be >= 1")
        if self.attention not in ATTENTIONS:
            raise SpecError(f"pooling.attention must be one of {ATTENTIONS}")

    @property
    def repr_dim(self) -> int:
        return self.out_dim if self.kind == "netvlad" else self.code_dim


@dataclass
class ModelSpec:
    """Serializable architecture description."""

    kind: str
    num_classes: int
    input_dim: int
    num_experts: int = 8
    expert_hidden: int = 4096
    hypercolumn_depths: list = field(default_factory=list)
    skip: str = "pad"
    residual_activation: str = "none"
    lc: Optional[LCSpec] = None
    pooling: Optional[PoolingSpec] = None

    def validate(self) -> "ModelSpec":
        if self.kind not in KINDS:
            raise SpecError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if min(self.num_classes, self.input_dim, self.num_experts, self.expert_hidden) < 1:
            raise SpecError("num_classes, input_dim, num_experts and expert_hidden must be >= 1")
        if self.kind == "MoHCE":
            if not self.hypercolumn_depths or min(self.hypercolumn_depths) < 1:
                raise SpecError("MoHCE needs a non-empty hypercolumn_depths of positive widths")
        if self.skip not in SKIPS:
            raise SpecError(f"skip must be one of {SKIPS}")
        if self.residual_activation not in ACTIVATIONS:
            raise SpecError(f"residual_activation must be one of {ACTIVATIONS}")
        if self.lc is not None:
            self.lc.validate()
        if self.pooling is not None:
            self.pooling.validate()
        return self

    @property
    def frame_level(self) -> bool:
        return self.pooling is not None

    @property
    def video_dim(self) -> int:
        """Width of the vector the classifier (gate and experts) sees as its input."""
        return self.pooling.repr_dim if self.pooling else self.input_dim

    @property
    def expert_input_dim(self) -> int:
        if self.kind == "MoRE":
            return self.expert_hidden
        if self.kind == "MoHCE":
            return int(sum(self.hypercolumn_depths))
        return self.video_dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SpecError(f"unknown model spec keys: {sorted(unknown)}")
        lc = data.pop("lc", None)
        pooling = data.pop("pooling", None)
        try:
            spec = cls(
                **data,
                lc=LCSpec(**lc) if lc is not None else None,
                pooling=PoolingSpec(**pooling) if pooling is not None else None,
            )
        except TypeError as exc:
            raise SpecError(str(exc)) from exc
        spec.hypercolumn_depths = [int(w) for w in spec.hypercolumn_depths]
        return spec.validate()


Params = dict  # name -> Tensor


# ---------------------------------------------------------------------------
# parameter layout and initialisation


def _bn_layout(prefix: str, width: int) -> dict:
    return {
        f"{prefix}/gamma": (width,),
        f"{prefix}/beta": (width,),
        f"{prefix}/running_mean": (width,),
        f"{prefix}/running_var": (width,),
    }


def _is_buffer(name: str) -> bool:
    return name.endswith("/running_mean") or name.endswith("/running_var")


def backbone_layout(spec: ModelSpec) -> dict:
    """Name -> shape for everything except the latent-concept head."""
    layout: dict = {}
    C, E, xd = spec.num_classes, spec.num_experts, spec.video_dim
    pool = spec.pooling
    if pool is not None:
        layout["pool/enc/w"] = (spec.input_dim, pool.code_dim)
        layout["pool/enc/b"] = (pool.code_dim,)
        if pool.kind == "attentive_dbof":
            layout["pool/attn/w"] = (pool.code_dim, 1)
            layout["pool/attn/b"] = (1,)
        else:
            K = pool.clusters
            layout["pool/assign/w"] = (pool.code_dim, K)
            layout["pool/assign/b"] = (K,)
            layout["pool/centers"] = (K, pool.code_dim)
            layout["pool/reduce/w"] = (K * pool.code_dim, pool.out_dim)
            layout["pool/reduce/b"] = (pool.out_dim,)
    layout["gate/w"] = (xd, C * E)
    layout["gate/b"] = (C * E,)
    if spec.kind == "MoRE":
        h = spec.expert_hidden
        layout["residual/w"] = (xd, h)
        layout["residual/b"] = (h,)
        layout.update(_bn_layout("residual/bn", h))
        if spec.skip == "project" and xd != h:
            layout["residual/proj/w"] = (xd, h)
    elif spec.kind == "MoHCE":
        prev = xd
        for i, width in enumerate(spec.hypercolumn_depths):
            layout[f"hc{i}/w"] = (prev, width)
            layout[f"hc{i}/b"] = (width,)
            layout.update(_bn_layout(f"hc{i}/bn", width))
            prev = width
    layout["experts/w"] = (spec.expert_input_dim, C * E)
    layout["experts/b"] = (C * E,)
    return layout


def lc_layout(spec: ModelSpec) -> dict:
    if spec.lc is None:
        return {}
    C, L = spec.num_classes, spec.lc.latent_dim
    layout = {
        "lc/in/w": (C, L),
        "lc/in/b": (L,),
        **_bn_layout("lc/bn", L),
        "lc/out/w": (L, C),
        "lc/out/b": (C,),
    }
    if spec.lc.aggregation == "append":
        layout["lc/merge/w"] = (2 * C, C)
        layout["lc/merge/b"] = (C,)
    return layout


def _glorot(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_entry(name: str, shape: tuple, rng: np.random.Generator) -> Tensor:
    if name.endswith("/running_var") or name.endswith("/gamma"):
        value = np.ones(shape)
    elif name == "pool/centers":
        value = rng.normal(0.0, 0.1, size=shape)
    elif len(shape) == 2 and not name.startswith("lc/out/"):
        value = _glorot(rng, shape)
    else:
        # biases, beta, running means and the zero-initialised LC output
        value = np.zeros(shape)
    return Tensor(value, requires_grad=not _is_buffer(name), name=name)


def init_params(spec: ModelSpec, rng: np.random.Generator, with_lc: bool = False) -> Params:
    """Fresh parameters for the backbone (and the LC head when ``with_lc``)."""
    params = {name: _init_entry(name, shape, rng) for name, shape in backbone_layout(spec).items()}
    if with_lc:
        params.update(init_lc_params(spec, rng))
    return params


def init_lc_params(spec: ModelSpec, rng: np.random.Generator) -> Params:
    """LC head parameters; the output projection starts at zero.

    For ``append`` aggregation the merge layer starts as ``[I; 0]`` so the
    head is transparent at attachment for every aggregation except ``max``.
    """
    params = {name: _init_entry(name, shape, rng) for name, shape in lc_layout(spec).items()}
    if "lc/merge/w" in params:
        C = spec.num_classes
        params["lc/merge/w"].value = np.vstack([np.eye(C), np.zeros((C, C))])
    return params


def has_lc(params: Params) -> bool:
    return "lc/out/w" in params


def validate_params(spec: ModelSpec, params: Params) -> None:
    layout = backbone_layout(spec)
    if has_lc(params):
        layout.update(lc_layout(spec))
    missing = [n for n in layout if n not in params]
    if missing:
        raise SpecError(f"missing parameters: {missing}")
    extra = [n for n in params if n not in layout]
    if extra:
        raise SpecError(f"unexpected parameters: {extra}")
    for name, shape in layout.items():
        if params[name].shape != tuple(shape):
            raise SpecError(f"{name}: expected shape {tuple(shape)}, got {params[name].shape}")


def trainable(params: Params) -> dict:
    return {n: t for n, t in params.items() if not _is_buffer(n)}


# ---------------------------------------------------------------------------
# building blocks


class _Ctx:
    """Mode, dropout rate and random streams threaded through a forward pass."""

    def __init__(self, mode: Mode, rng: Optional[RngStreams], keep_prob: float):
        self.mode = Mode(mode)
        self.rng = rng
        self.keep_prob = keep_prob

    def dropout(self, x: Tensor, name: str, keep_prob: Optional[float] = None) -> Tensor:
        keep = self.keep_prob if keep_prob is None else keep_prob
        if self.mode is Mode.EVAL or keep == 1.0:
            return x
        return T.dropout(x, keep, self.rng.get(name), self.mode)


def _linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{prefix}/w"]), params[f"{prefix}/b"])


def _bn(x: Tensor, params: Params, prefix: str, mode: Mode) -> Tensor:
    state = BatchNormState(params[f"{prefix}/running_mean"], params[f"{prefix}/running_var"])
    out = T.batch_norm(x, params[f"{prefix}/gamma"], params[f"{prefix}/beta"], state, mode)
    params[f"{prefix}/running_mean"] = state.running_mean
    params[f"{prefix}/running_var"] = state.running_var
    state.running_mean.name = f"{prefix}/running_mean"
    state.running_var.name = f"{prefix}/running_var"
    return out


def _selection_matrix(d_in: int, d_out: int) -> np.ndarray:
    # zero-pads (d_in < d_out) or truncates (d_in > d_out)
    return np.eye(d_in, d_out)


def skip_connection(x: Tensor, params: Params, d_out: int, skip: str) -> Optional[Tensor]:
    d_in = x.shape[-1]
    if skip == "none":
        return None
    if d_in == d_out:
        return x
    if skip == "project":
        return T.matmul(x, params["residual/proj/w"])
    return T.matmul(x, Tensor(_selection_matrix(d_in, d_out)))


def residual_block(
    x: Tensor,
    params: Params,
    spec: ModelSpec,
    mode: Mode = Mode.EVAL,
    rng: Optional[RngStreams] = None,
    keep_prob: float = 0.8,
) -> Tensor:
    """Refined representation ``F(x) + skip(x)``.

    ``F`` is linear -> batch-norm -> (optional ReLU) -> dropout.
    """
    ctx = _Ctx(mode, rng, keep_prob)
    return _residual(x, params, spec, ctx)


def _residual(x: Tensor, params: Params, spec: ModelSpec, ctx: _Ctx) -> Tensor:
    h = _bn(_linear(x, params, "residual"), params, "residual/bn", ctx.mode)
    if spec.residual_activation == "relu":
        h = T.relu(h)
    h = ctx.dropout(h, "residual/dropout")
    s = skip_connection(x, params, spec.expert_hidden, spec.skip)
    return h if s is None else T.add(h, s)


def hypercolumn(
    x: Tensor,
    params: Params,
    depths: Sequence[int],
    mode: Mode = Mode.EVAL,
    rng: Optional[RngStreams] = None,
    keep_prob: float = 0.8,
) -> Tensor:
    """Concatenate the activations of each stacked layer."""
    return _hypercolumn(x, params, depths, _Ctx(mode, rng, keep_prob))


def _hypercolumn(x: Tensor, params: Params, depths: Sequence[int], ctx: _Ctx) -> Tensor:
    stages = []
    h = x
    for i in range(len(depths)):
        h = T.relu(_bn(_linear(h, params, f"hc{i}"), params, f"hc{i}/bn", ctx.mode))
        h = ctx.dropout(h, f"hc{i}/dropout")
        stages.append(h)
    return stages[0] if len(stages) == 1 else T.concat(stages, axis=-1)


def mixture_logits(x: Tensor, rep: Tensor, params: Params, num_classes: int, num_experts: int) -> Tensor:
    """Per-class logit of ``sum_e softmax(gate(x))_e * sigmoid(expert_e(rep))``.

    The gate always sees ``x``; the experts see ``rep``.
    """
    if x.shape[-1] != params["gate/w"].shape[0]:
        raise T.ShapeError(f"gate expects input width {params['gate/w'].shape[0]}, got {x.shape[-1]}")
    B = x.shape[0]
    shape = (B, num_classes, num_experts)
    log_gate = T.log_softmax(T.reshape(_linear(x, params, "gate"), shape), axis=-1)
    expert = T.reshape(_linear(rep, params, "experts"), shape)
    log_p = T.logsumexp(T.sub(log_gate, T.softplus(T.mul(expert, -1.0))), axis=-1)
    log_q = T.logsumexp(T.sub(log_gate, T.softplus(expert)), axis=-1)
    return T.sub(log_p, log_q)


def backbone_logits(
    x: Tensor,
    params: Params,
    spec: ModelSpec,
    mode: Mode = Mode.EVAL,
    rng: Optional[RngStreams] = None,
    keep_prob: float = 0.8,
) -> Tensor:
    return _backbone(x, params, spec, _Ctx(mode, rng, keep_prob))


def _backbone(x: Tensor, params: Params, spec: ModelSpec, ctx: _Ctx) -> Tensor:
    if spec.kind == "MoRE":
        rep = _residual(x, params, spec, ctx)
    elif spec.kind == "MoHCE":
        rep = _hypercolumn(x, params, spec.hypercolumn_depths, ctx)
    else:
        rep = x
    return mixture_logits(x, rep, params, spec.num_classes, spec.num_experts)


def _check_video_input(x, width: int) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
    if x.value.ndim != 2 or x.shape[1] != width:
        raise T.ShapeError(f"expected input of width {width}, got shape {x.shape}")
    return x


def moe_forward(x, params: Params, num_experts: int) -> Tensor:
    """Confidences of a plain mixture of experts (experts and gate both read ``x``)."""
    x = _check_video_input(x, params["gate/w"].shape[0])
    C = params["gate/b"].shape[0] // num_experts
    return T.sigmoid(mixture_logits(x, x, params, C, num_experts))


def more_forward(x, params: Params, spec: ModelSpec, mode=Mode.EVAL, rng=None, keep_prob=0.8) -> Tensor:
    if spec.kind != "MoRE":
        raise SpecError("more_forward needs a MoRE spec")
    x = _check_video_input(x, spec.video_dim)
    return T.sigmoid(backbone_logits(x, params, spec, mode, rng, keep_prob))


def mohce_forward(x, params: Params, spec: ModelSpec, mode=Mode.EVAL, rng=None, keep_prob=0.8) -> Tensor:
    if spec.kind != "MoHCE":
        raise SpecError("mohce_forward needs a MoHCE spec")
    x = _check_video_input(x, spec.video_dim)
    return T.sigmoid(backbone_logits(x, params, spec, mode, rng, keep_prob))


def lc_logits(base_logits: Tensor, params: Params, lc: LCSpec, ctx: _Ctx) -> Tensor:
    C = params["lc/in/w"].shape[0]
    if base_logits.shape[-1] != C:
        raise T.ShapeError(f"LC head expects {C} classes, got {base_logits.shape[-1]}")
    h = ctx.dropout(base_logits, "lc/input_dropout", lc.input_dropout_keep)
    h = T.relu(_bn(_linear(h, params, "lc/in"), params, "lc/bn", ctx.mode))
    correction = _linear(h, params, "lc/out")
    if lc.aggregation == "add":
        return T.add(base_logits, correction)
    if lc.aggregation == "max":
        return T.maximum(base_logits, correction)
    return _linear(T.concat([base_logits, correction], axis=-1), params, "lc/merge")


def lc_forward(base_logits, params: Params, lc: LCSpec, mode=Mode.EVAL, rng=None) -> Tensor:
    """Confidences after the latent-concept head, given backbone logits."""
    base_logits = base_logits if isinstance(base_logits, Tensor) else Tensor(np.atleast_2d(base_logits))
    return T.sigmoid(lc_logits(base_logits, params, lc, _Ctx(mode, rng, 1.0)))


# ---------------------------------------------------------------------------
# frame pooling


def canonical_order(frames: np.ndarray) -> np.ndarray:
    """Indices sorting frame rows lexicographically.

    Pooling is a set function; evaluating it on a canonical ordering makes the
    floating-point result independent of the input frame order.
    """
    return np.lexsort(frames.T[::-1])


def _frames_tensor(frames) -> Tensor:
    arr = frames.value if isinstance(frames, Tensor) else np.asarray(frames, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("empty video: need at least one frame")
    arr = arr[canonical_order(arr)]
    return Tensor(arr)


def _encode(frames: Tensor, params: Params) -> Tensor:
    return T.relu(_linear(frames, params, "pool/enc"))


def attentive_dbof(frames, params: Params) -> Tensor:
    """Attention-weighted sum of encoded frames, shape ``(1, code_dim)``."""
    enc = _encode(_frames_tensor(frames), params)
    alpha = T.softmax(_linear(enc, params, "pool/attn"), axis=0)  # (T, 1)
    return T.sum(T.mul(alpha, enc), axis=0, keepdims=True)


def netvlad_assignments(enc: Tensor, params: Params, attention: str = "softmax") -> Tensor:
    scores = _linear(enc, params, "pool/assign")  # (T, K)
    if attention == "softmax":
        return T.softmax(scores, axis=1)
    total = scores.value.sum(axis=1, keepdims=True)
    denom_sign = np.where(total >= 0, 1.0, -1.0)
    small = np.abs(total) < LINEAR_ATTN_FLOOR
    denom = T.sum(scores, axis=1, keepdims=True)
    if small.any():
        # clamp the denominator magnitude, keeping its sign; clamped rows are constants
        keep = Tensor(np.where(small, 0.0, 1.0))
        floor = Tensor(np.where(small, denom_sign * LINEAR_ATTN_FLOOR, 0.0))
        denom = T.add(T.mul(denom, keep), floor)
    return T.mul(scores, T.reciprocal(denom))


def netvlad_aggregate(frames, params: Params, attention: str = "softmax") -> Tensor:
    """Per-cluster residual sums ``sum_t a_tk (E(x_t) - c_k)``, shape ``(K, code_dim)``."""
    enc = _encode(_frames_tensor(frames), params)
    alpha = netvlad_assignments(enc, params, attention)  # (T, K)
    weighted = T.matmul(T.transpose(alpha), enc)  # (K, D)
    mass = T.reshape(T.sum(alpha, axis=0), (-1, 1))  # (K, 1)
    return T.sub(weighted, T.mul(mass, params["pool/centers"]))


def netvlad(frames, params: Params, attention: str = "softmax") -> Tensor:
    """NetVLAD video vector, shape ``(1, out_dim)``.

    Residual aggregate -> per-cluster l2 -> flatten -> global l2 -> dense reducer.
    """
    agg = netvlad_aggregate(frames, params, attention)
    agg = T.l2_normalize(agg, axis=1)
    flat = T.l2_normalize(T.reshape(agg, (1, -1)), axis=1)
    return _linear(flat, params, "pool/reduce")


def pool_frames(frames, params: Params, pooling: PoolingSpec) -> Tensor:
    if pooling.kind == "attentive_dbof":
        return attentive_dbof(frames, params)
    return netvlad(frames, params, pooling.attention)


# ---------------------------------------------------------------------------
# full model


def forward_logits(
    spec: ModelSpec,
    params: Params,
    inputs,
    mode: Mode = Mode.EVAL,
    rng: Optional[RngStreams] = None,
    keep_prob: float = 0.8,
    frame_fraction: float = 1.0,
) -> Tensor:
    """Logits ``(B, C)`` for a batch.

    ``inputs`` is a ``B x d`` array for video-level specs and a sequence of
    ``T_i x d`` frame matrices for frame-level specs. In train mode frame
    models see a random ``frame_fraction`` of each video's frames.
    """
    ctx = _Ctx(mode, rng, keep_prob)
    if spec.pooling is not None:
        pooled = []
        for frames in inputs:
            frames = np.asarray(frames, dtype=np.float64)
            if frames.ndim != 2 or frames.shape[1] != spec.input_dim:
                raise T.ShapeError(f"expected frames of width {spec.input_dim}, got {frames.shape}")
            if ctx.mode is Mode.TRAIN and frame_fraction < 1.0:
                frames = sample_frames(frames, frame_fraction, rng.get("frame_sample"))
            pooled.append(pool_frames(frames, params, spec.pooling))
        x = pooled[0] if len(pooled) == 1 else T.concat(pooled, axis=0)
    else:
        x = _check_video_input(inputs, spec.input_dim)
    logits = _backbone(x, params, spec, ctx)
    if spec.lc is not None and has_lc(params):
        logits = lc_logits(logits, params, spec.lc, ctx)
    return logits


def forward(spec: ModelSpec, params: Params, inputs, **kwargs) -> Tensor:
    """Confidences in (0, 1), shape ``(B, C)``."""
    return T.sigmoid(forward_logits(spec, params, inputs, **kwargs))


def predict(spec: ModelSpec, params: Params, inputs, batch_size: int = 1024, workers: Optional[int] = None) -> np.ndarray:
    """Eval-mode confidences as a numpy array, evaluated in chunks.

    Chunks may run on ``workers`` threads (default: ``MORETOOL_THREADS``);
    eval mode touches no shared state, and each chunk lands in its own rows.
    """
    n = len(inputs)
    out = np.empty((n, spec.num_classes))

    def run(start: int) -> None:
        chunk = inputs[start : start + batch_size]
        out[start : start + len(chunk)] = forward(spec, params, chunk, mode=Mode.EVAL).value

    map_ordered(run, range(0, n, batch_size), workers)
    return out


@dataclass
class Model:
    """A spec with its parameters; ``predict`` maps inputs to confidences."""

    spec: ModelSpec
    params: Params

    def predict(self, inputs, batch_size: int = 1024) -> np.ndarray:
        return predict(self.spec, self.params, inputs, batch_size)

    def __call__(self, inputs) -> np.ndarray:
        return self.predict(inputs)
