"""Block-variant library built by toy local distillation.

Each candidate block is trained in isolation to mimic its parent block's
input->output map on synthetic calibration activations. Only the variant's
FFN weights train (attention, when kept, is copied from the parent
verbatim), so backprop reduces to a two-layer MLP with analytic gradients.
The held-out MSE becomes the variant's quality loss, the scalar the solver
trades against cost.

Forward semantics (pre-norm residual block, RMS normalization):

    h = x + Attn(norm(x))        when the block keeps attention, else h = x
    y = h + FFN(norm(h))         when the block has an FFN, else y = h

Variants are mutually independent: scoring any subset reproduces the full
catalog's values because every variant derives its own seed from
(seed, layer_index, spec).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .arch_cost import (
    BlockVariantSpec,
    CostConstants,
    CostVector,
    ParentArch,
    Precision,
    block_costs,
)
from .errors import InvalidSpecError, TrainingDivergedError
from .util import derive_seed

_NORM_EPS = 1e-6


def rms_norm(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _NORM_EPS)
    return x / rms * scale


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s


def _silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def _tanh_grad(z):
    t = np.tanh(z)
    return 1.0 - t * t


# name -> (f, f'); the derivative is closed-form so gradient checks are exact
ACTIVATIONS = {
    "silu": (_silu, _silu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


def activation_pair(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise InvalidSpecError(
            f"unknown activation {name!r}; expected one of {sorted(ACTIVATIONS)}"
        ) from None


@dataclass(frozen=True)
class ParentBlock:
    """Weights of one parent transformer block.

    wq/wo are [d_model, d_model]; wk/wv are [d_model, n_kv_heads*head_dim];
    w1 is [d_model, d_ffn]; w2 is [d_ffn, d_model]; norm_scale is [d_model]
    and is shared by the attention and FFN branches.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    norm_scale: np.ndarray
    n_heads: int
    n_kv_heads: int
    head_dim: int

    def __post_init__(self):
        for name in ("wq", "wk", "wv", "wo", "w1", "w2", "norm_scale"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidSpecError(f"parent block weight {name} is not finite")
        d_model = self.wq.shape[0]
        kv_width = self.n_kv_heads * self.head_dim
        expected = {
            "wq": (d_model, self.n_heads * self.head_dim),
            "wk": (d_model, kv_width),
            "wv": (d_model, kv_width),
            "wo": (self.n_heads * self.head_dim, d_model),
            "w1": (d_model, self.w1.shape[1]),
            "w2": (self.w1.shape[1], d_model),
            "norm_scale": (d_model,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise InvalidSpecError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")


def make_parent_block(arch: ParentArch, seed: int) -> ParentBlock:
    """Random parent block with 1/sqrt(fan-in) scaled weights."""
    rng = np.random.default_rng(seed)
    d, dffn = arch.d_model, arch.d_ffn
    kv_width = arch.n_kv_heads * arch.head_dim

    def w(rows, cols):
        return rng.normal(scale=1.0 / np.sqrt(rows), size=(rows, cols))

    return ParentBlock(
        wq=w(d, d),
        wk=w(d, kv_width),
        wv=w(d, kv_width),
        wo=w(d, d),
        w1=w(d, dffn),
        w2=w(dffn, d),
        norm_scale=1.0 + 0.1 * rng.normal(size=d),
        n_heads=arch.n_heads,
        n_kv_heads=arch.n_kv_heads,
        head_dim=arch.head_dim,
    )


def make_parent_blocks(arch: ParentArch, seed: int) -> list[ParentBlock]:
    return [make_parent_block(arch, derive_seed(seed, "parent", i)) for i in range(arch.n_layers)]


def _causal_attention(block: ParentBlock, x: np.ndarray) -> np.ndarray:
    """Grouped-KV causal attention over the last two axes [..., seq, d_model]."""
    seq_len = x.shape[-2]
    group = block.n_heads // block.n_kv_heads
    q = (x @ block.wq).reshape(x.shape[:-1] + (block.n_heads, block.head_dim))
    k = (x @ block.wk).reshape(x.shape[:-1] + (block.n_kv_heads, block.head_dim))
    v = (x @ block.wv).reshape(x.shape[:-1] + (block.n_kv_heads, block.head_dim))
    k = np.repeat(k, group, axis=-2)
    v = np.repeat(v, group, axis=-2)
    scores = np.einsum("...qhd,...khd->...hqk", q, k) / np.sqrt(block.head_dim)
    mask = np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights = weights / weights.sum(axis=-1, keepdims=True)
    out = np.einsum("...hqk,...khd->...qhd", weights, v)
    out = out.reshape(x.shape)
    return out @ block.wo


def forward_parent(block: ParentBlock, x: np.ndarray, activation: str = "silu") -> np.ndarray:
    """Parent block output for activations x of shape [..., seq, d_model]."""
    if not np.all(np.isfinite(x)):
        raise InvalidSpecError("input activations are not finite")
    act, _ = activation_pair(activation)
    h = x + _causal_attention(block, rms_norm(x, block.norm_scale))
    return h + act(rms_norm(h, block.norm_scale) @ block.w1) @ block.w2


@dataclass(frozen=True)
class CalibrationSet:
    """Input activations and parent-block targets for one split."""

    inputs: np.ndarray  # [n, seq, d_model]
    targets: np.ndarray  # same shape; parent outputs on exactly these inputs
    split: str  # "train" or "holdout"

    def __post_init__(self):
        if self.split not in ("train", "holdout"):
            raise InvalidSpecError(f"split must be 'train' or 'holdout', got {self.split!r}")
        if self.inputs.shape != self.targets.shape:
            raise InvalidSpecError("inputs and targets must share a shape")


@dataclass(frozen=True)
class Calibration:
    train: CalibrationSet
    holdout: CalibrationSet

    def __post_init__(self):
        if self.train.split != "train" or self.holdout.split != "holdout":
            raise InvalidSpecError("calibration splits are mislabelled")


def generate_calibration(
    block: ParentBlock,
    n_train: int,
    n_holdout: int,
    seq_len: int,
    seed: int,
    activation: str = "silu",
) -> Calibration:
    """Standard-normal inputs, parent outputs as targets, disjoint splits."""
    rng = np.random.default_rng(seed)
    d_model = block.wq.shape[0]
    inputs = rng.normal(size=(n_train + n_holdout, seq_len, d_model))
    targets = forward_parent(block, inputs, activation)
    return Calibration(
        train=CalibrationSet(inputs[:n_train], targets[:n_train], "train"),
        holdout=CalibrationSet(inputs[n_train:], targets[n_train:], "holdout"),
    )


@dataclass(frozen=True)
class DistillHyper:
    """Full-batch gradient-descent settings for one variant."""

    steps: int = 50
    learning_rate: float = 0.05
    seed: int = 0
    init: str = "parent"  # "parent" slices the parent FFN; "random" draws from seed
    activation: str = "silu"

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidSpecError("steps must be >= 0")
        if self.init not in ("parent", "random"):
            raise InvalidSpecError("init must be 'parent' or 'random'")


@dataclass(frozen=True)
class ScoredVariant:
    """A trained variant with its held-out quality loss and cost vector."""

    spec: BlockVariantSpec
    quality_loss: float
    cost: CostVector
    ffn_hidden: int
    seed: int
    w1: np.ndarray | None = None  # [d_model, hidden]
    w2: np.ndarray | None = None  # [hidden, d_model]
    norm_scale: np.ndarray | None = None
    train_losses: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if self.quality_loss < 0:
            raise InvalidSpecError("quality_loss must be >= 0")


def ffn_mse_and_grads(u, residual_target, w1, w2, activation="silu"):
    """MSE of (act(u@w1)@w2 - residual_target) and its analytic w1/w2 gradients.

    u is the normalized block input, already constant with respect to the
    FFN weights; the loss averages over samples, positions and channels.
    """
    act, act_grad = activation_pair(activation)
    z = u @ w1
    a = act(z)
    err = a @ w2 - residual_target
    loss = float(np.mean(err * err))
    scale = 2.0 / err.size
    flat_u = u.reshape(-1, u.shape[-1])
    flat_a = a.reshape(-1, a.shape[-1])
    flat_err = err.reshape(-1, err.shape[-1])
    g_w2 = scale * flat_a.T @ flat_err
    dz = (flat_err @ w2.T) * act_grad(z).reshape(-1, z.shape[-1])
    g_w1 = scale * flat_u.T @ dz
    return loss, g_w1, g_w2


def _ffn_mse(u, residual_target, w1, w2, activation="silu"):
    act, _ = activation_pair(activation)
    err = act(u @ w1) @ w2 - residual_target
    return float(np.mean(err * err))


def _variant_intermediates(parent: ParentBlock, spec: BlockVariantSpec, inputs, activation):
    """(h, u) for the trainable FFN: pre-FFN stream and its normalized form."""
    if spec.has_attention:
        h = inputs + _causal_attention(parent, rms_norm(inputs, parent.norm_scale))
    else:
        h = inputs
    u = rms_norm(h, parent.norm_scale)
    return h, u


def _init_ffn(parent: ParentBlock, hidden: int, hyper: DistillHyper, d_model: int):
    if hyper.init == "parent":
        d_ffn = parent.w1.shape[1]
        take = min(hidden, d_ffn)
        w1 = np.zeros((d_model, hidden))
        w2 = np.zeros((hidden, d_model))
        w1[:, :take] = parent.w1[:, :take]
        w2[:take, :] = parent.w2[:take, :]
        return w1, w2
    rng = np.random.default_rng(hyper.seed)
    w1 = rng.normal(scale=1.0 / np.sqrt(d_model), size=(d_model, hidden))
    w2 = rng.normal(scale=1.0 / np.sqrt(hidden), size=(hidden, d_model))
    return w1, w2


def distill_variant(
    parent: ParentBlock,
    spec: BlockVariantSpec,
    calib: Calibration,
    hyper: DistillHyper,
    arch: ParentArch,
    precision: Precision = Precision.FP8,
    constants: CostConstants = CostConstants(),
) -> ScoredVariant:
    """Train one variant's FFN on the train split, score it on the held-out split.

    The attention branch, when kept, is the parent's and never trains. With
    steps=0 the initialization is scored as-is. A non-finite training loss
    aborts with the offending step index.
    """
    spec.validate_for(arch)
    cost = block_costs(arch, spec, precision, constants)
    hidden = spec.ffn_hidden(arch, constants.ffn_alignment)

    if hidden == 0:
        # Attention-only block: nothing to train, score the fixed map.
        pred = calib.holdout.inputs + _causal_attention(
            parent, rms_norm(calib.holdout.inputs, parent.norm_scale)
        )
        loss = float(np.mean((pred - calib.holdout.targets) ** 2))
        return ScoredVariant(
            spec=spec, quality_loss=loss, cost=cost, ffn_hidden=0, seed=hyper.seed,
            norm_scale=parent.norm_scale.copy(),
        )

    h_tr, u_tr = _variant_intermediates(parent, spec, calib.train.inputs, hyper.activation)
    r_tr = calib.train.targets - h_tr
    h_ho, u_ho = _variant_intermediates(parent, spec, calib.holdout.inputs, hyper.activation)
    r_ho = calib.holdout.targets - h_ho

    w1, w2 = _init_ffn(parent, hidden, hyper, arch.d_model)
    train_losses = []
    for step in range(hyper.steps):
        loss, g_w1, g_w2 = ffn_mse_and_grads(u_tr, r_tr, w1, w2, hyper.activation)
        if not np.isfinite(loss):
            raise TrainingDivergedError(step)
        train_losses.append(loss)
        w1 = w1 - hyper.learning_rate * g_w1
        w2 = w2 - hyper.learning_rate * g_w2
    final_train = _ffn_mse(u_tr, r_tr, w1, w2, hyper.activation)
    if not np.isfinite(final_train):
        raise TrainingDivergedError(hyper.steps)
    train_losses.append(final_train)

    quality_loss = _ffn_mse(u_ho, r_ho, w1, w2, hyper.activation)
    return ScoredVariant(
        spec=spec,
        quality_loss=quality_loss,
        cost=cost,
        ffn_hidden=hidden,
        seed=hyper.seed,
        w1=w1,
        w2=w2,
        norm_scale=parent.norm_scale.copy(),
        train_losses=tuple(train_losses),
    )


@dataclass(frozen=True)
class CalibConfig:
    """Calibration-data and training settings shared across the library build."""

    n_train: int = 64
    n_holdout: int = 32
    seq_len: int = 8
    steps: int = 50
    learning_rate: float = 0.05
    activation: str = "silu"
    init: str = "parent"

    def to_dict(self) -> dict:
        return {
            "n_train": self.n_train,
            "n_holdout": self.n_holdout,
            "seq_len": self.seq_len,
            "steps": self.steps,
            "learning_rate": self.learning_rate,
            "activation": self.activation,
            "init": self.init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibConfig":
        return cls(**d)


@dataclass(frozen=True)
class VariantCatalog:
    """Scored variants grouped per layer; variant id = index within its layer."""

    layers: tuple  # tuple of tuples of ScoredVariant
    arch: ParentArch | None = None
    precision: Precision = Precision.FP8
    constants: CostConstants = CostConstants()

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def variant(self, layer: int, index: int) -> ScoredVariant:
        return self.layers[layer][index]


def layer_specs(layer_index: int, ratio_grid) -> list[BlockVariantSpec]:
    """The attention on/off x ratio-grid cross product for one layer."""
    specs = []
    for has_attention in (True, False):
        for ratio in ratio_grid:
            specs.append(
                BlockVariantSpec(
                    layer_index=layer_index, has_attention=has_attention, ffn_ratio=float(ratio)
                )
            )
    return specs


def build_library(
    arch: ParentArch,
    parent_blocks,
    ratio_grid,
    calib_config: CalibConfig,
    seed: int,
    precision: Precision = Precision.FP8,
    constants: CostConstants = CostConstants(),
) -> VariantCatalog:
    """Score every (layer, spec) pair in the cross product.

    Calibration data is derived per layer and the training seed per variant,
    so results do not depend on scheduling order and any subset can be
    re-scored independently.
    """
    if not ratio_grid:
        raise InvalidSpecError("ratio_grid must be non-empty")
    if len(parent_blocks) != arch.n_layers:
        raise InvalidSpecError(
            f"{len(parent_blocks)} parent blocks for {arch.n_layers} layers"
        )
    layers = []
    for layer_index, parent in enumerate(parent_blocks):
        calib = generate_calibration(
            parent,
            calib_config.n_train,
            calib_config.n_holdout,
            calib_config.seq_len,
            derive_seed(seed, "calib", layer_index),
            calib_config.activation,
        )
        scored = []
        for spec in layer_specs(layer_index, ratio_grid):
            hyper = DistillHyper(
                steps=calib_config.steps,
                learning_rate=calib_config.learning_rate,
                seed=derive_seed(seed, layer_index, spec.has_attention, repr(spec.ffn_ratio)),
                init=calib_config.init,
                activation=calib_config.activation,
            )
            try:
                scored.append(
                    distill_variant(parent, spec, calib, hyper, arch, precision, constants)
                )
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(
                    exc.step, f"non-finite (layer {layer_index}, spec {spec.name()})"
                ) from exc
        layers.append(tuple(scored))
    return VariantCatalog(
        layers=tuple(layers), arch=arch, precision=precision, constants=constants
    )


def catalog_to_dict(catalog: VariantCatalog) -> dict:
    """JSON form: one record per variant; weights go to the binary sidecar."""
    if catalog.arch is None:
        raise InvalidSpecError("catalog has no architecture attached")
    records = []
    for layer in catalog.layers:
        for index, v in enumerate(layer):
            records.append(
                {
                    "layer_index": v.spec.layer_index,
                    "variant_index": index,
                    "has_attention": v.spec.has_attention,
                    "ffn_ratio": v.spec.ffn_ratio,
                    "ffn_hidden": v.ffn_hidden,
                    "quality_loss": v.quality_loss,
                    "seed": v.seed,
                    "cost": v.cost.to_dict(),
                }
            )
    return {
        "arch": catalog.arch.to_dict(),
        "precision": catalog.precision.name,
        "constants": catalog.constants.to_dict(),
        "variants": records,
    }


def catalog_from_dict(d: dict, weights: dict | None = None) -> VariantCatalog:
    """Rebuild a catalog from its JSON form plus an optional weight bank."""
    arch = ParentArch.from_dict(d["arch"])
    precision = Precision.from_name(d["precision"])
    constants = CostConstants.from_dict(d["constants"])
    per_layer: dict[int, list] = {i: [] for i in range(arch.n_layers)}
    for rec in d["variants"]:
        spec = BlockVariantSpec(
            layer_index=rec["layer_index"],
            has_attention=rec["has_attention"],
            ffn_ratio=rec["ffn_ratio"],
        )
        key = spec.name()
        w1 = w2 = scale = None
        if weights is not None and f"{key}.w1" in weights:
            w1 = weights[f"{key}.w1"].astype(np.float64)
            w2 = weights[f"{key}.w2"].astype(np.float64)
            scale = weights[f"{key}.norm"].astype(np.float64)
        per_layer[rec["layer_index"]].append(
            (
                rec["variant_index"],
                ScoredVariant(
                    spec=spec,
                    quality_loss=rec["quality_loss"],
                    cost=CostVector.from_dict(rec["cost"]),
                    ffn_hidden=rec["ffn_hidden"],
                    seed=rec["seed"],
                    w1=w1,
                    w2=w2,
                    norm_scale=scale,
                ),
            )
        )
    layers = []
    for i in range(arch.n_layers):
        ordered = sorted(per_layer[i], key=lambda t: t[0])
        layers.append(tuple(v for _, v in ordered))
    return VariantCatalog(
        layers=tuple(layers), arch=arch, precision=precision, constants=constants
    )


def catalog_weight_arrays(catalog: VariantCatalog) -> dict[str, np.ndarray]:
    """Flattened weight bank keyed by variant name, for the binary sidecar."""
    arrays: dict[str, np.ndarray] = {}
    for layer in catalog.layers:
        for v in layer:
            if v.w1 is None:
                continue
            key = v.spec.name()
            arrays[f"{key}.w1"] = v.w1
            arrays[f"{key}.w2"] = v.w2
            arrays[f"{key}.norm"] = v.norm_scale
    return arrays
