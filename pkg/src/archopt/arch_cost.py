"""Analytic cost model for a decoder-only transformer and its block variants.

Per-block costs cover the attention projections (query/output at full width,
key/value scaled by KV-head sharing) and a two-matrix FFN (up + down, no
gating). Latency is a two-term roofline estimate, compute time plus weight
streaming time, in abstract model time units:

    latency = flops_per_token / compute_rate + weight_bytes / bandwidth

All byte quantities are exact integers. Device-level helpers convert a
model's weight and KV footprint into a cached-token budget (batch size x
sequence length worth of resident KV entries).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

from .errors import InvalidSpecError, ModelDoesNotFitError


class Precision(Enum):
    """Element width of a storage format. No other widths are accepted."""

    FP8 = 1
    BF16 = 2
    FP32 = 4

    @property
    def bytes_per_element(self) -> int:
        return self.value

    @classmethod
    def from_name(cls, name: str) -> "Precision":
        try:
            return cls[str(name).upper()]
        except KeyError:
            raise InvalidSpecError(
                f"unknown precision {name!r}; expected one of FP8, BF16, FP32"
            ) from None


@dataclass(frozen=True)
class CostConstants:
    """Roofline constants and the FFN width alignment.

    compute_rate is in FLOPs per model time unit, bandwidth in bytes per
    model time unit. Orderings between variants, not absolute times, are
    what downstream selection consumes.
    """

    compute_rate: float = 1.0e12
    bandwidth: float = 1.0e11
    ffn_alignment: int = 1

    def __post_init__(self):
        if self.compute_rate <= 0 or self.bandwidth <= 0:
            raise InvalidSpecError("compute_rate and bandwidth must be positive")
        if self.ffn_alignment < 1:
            raise InvalidSpecError("ffn_alignment must be >= 1")

    def to_dict(self) -> dict:
        return {
            "compute_rate": self.compute_rate,
            "bandwidth": self.bandwidth,
            "ffn_alignment": self.ffn_alignment,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CostConstants":
        return cls(**d)


@dataclass(frozen=True)
class ParentArch:
    """Reference transformer geometry the variant library is built against."""

    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    d_ffn: int
    vocab_size: int
    # (has_attention, has_ffn) per layer; all true for the parent.
    layer_composition: tuple = field(default=())

    def __post_init__(self):
        if self.n_layers < 1:
            raise InvalidSpecError("n_layers must be >= 1")
        for name in ("d_model", "n_heads", "n_kv_heads", "head_dim", "d_ffn", "vocab_size"):
            if getattr(self, name) <= 0:
                raise InvalidSpecError(f"{name} must be > 0")
        if self.n_heads % self.n_kv_heads != 0:
            raise InvalidSpecError("n_kv_heads must divide n_heads")
        if self.d_model != self.n_heads * self.head_dim:
            raise InvalidSpecError("d_model must equal n_heads * head_dim")
        if not self.layer_composition:
            object.__setattr__(
                self, "layer_composition", tuple((True, True) for _ in range(self.n_layers))
            )
        if len(self.layer_composition) != self.n_layers:
            raise InvalidSpecError("layer_composition length must equal n_layers")

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "head_dim": self.head_dim,
            "d_ffn": self.d_ffn,
            "vocab_size": self.vocab_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParentArch":
        return cls(**d)


@dataclass(frozen=True)
class BlockVariantSpec:
    """One candidate block: attention kept or removed, FFN width as a ratio.

    ffn_ratio is a fraction in (0, 1] of the parent FFN width, or 0 for no
    FFN at all. A block with neither attention nor FFN is rejected; no-op
    substitutions are out of scope.
    """

    layer_index: int
    has_attention: bool
    ffn_ratio: float

    def __post_init__(self):
        if self.layer_index < 0:
            raise InvalidSpecError("layer_index must be >= 0")
        if not (0.0 <= self.ffn_ratio <= 1.0):
            raise InvalidSpecError("ffn_ratio must lie in [0, 1]")
        if not self.has_attention and self.ffn_ratio == 0.0:
            raise InvalidSpecError(
                "empty block: has_attention is false and ffn_ratio is 0"
            )

    def validate_for(self, arch: ParentArch) -> None:
        if self.layer_index >= arch.n_layers:
            raise InvalidSpecError(
                f"layer_index {self.layer_index} out of range for {arch.n_layers} layers"
            )

    def ffn_hidden(self, arch: ParentArch, alignment: int = 1) -> int:
        """FFN intermediate width: ratio x d_ffn rounded to the alignment grid.

        The same rounded width is used for both cost accounting and trained
        weight shapes, so the two always agree. A positive ratio never
        rounds below one alignment unit.
        """
        if self.ffn_ratio == 0.0:
            return 0
        units = int(self.ffn_ratio * arch.d_ffn / alignment + 0.5)
        return max(1, units) * alignment

    def name(self) -> str:
        attn = "attn" if self.has_attention else "noattn"
        return f"L{self.layer_index:03d}.{attn}.r{self.ffn_ratio:g}"


@dataclass(frozen=True)
class CostVector:
    """Per-block (or aggregated) resource costs. Bytes are exact integers."""

    params: int
    flops_per_token: int
    kv_bytes_per_token: int
    latency_per_token: float
    weight_bytes: int

    def __post_init__(self):
        for name in ("params", "flops_per_token", "kv_bytes_per_token", "weight_bytes"):
            if getattr(self, name) < 0:
                raise InvalidSpecError(f"{name} must be >= 0")
        if self.latency_per_token < 0:
            raise InvalidSpecError("latency_per_token must be >= 0")

    def __add__(self, other: "CostVector") -> "CostVector":
        return CostVector(
            params=self.params + other.params,
            flops_per_token=self.flops_per_token + other.flops_per_token,
            kv_bytes_per_token=self.kv_bytes_per_token + other.kv_bytes_per_token,
            latency_per_token=self.latency_per_token + other.latency_per_token,
            weight_bytes=self.weight_bytes + other.weight_bytes,
        )

    @classmethod
    def zero(cls) -> "CostVector":
        return cls(0, 0, 0, 0.0, 0)

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "flops_per_token": self.flops_per_token,
            "kv_bytes_per_token": self.kv_bytes_per_token,
            "latency_per_token": self.latency_per_token,
            "weight_bytes": self.weight_bytes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CostVector":
        return cls(**d)


def attention_params(arch: ParentArch) -> int:
    """Query + output projections at full width, key + value at KV width."""
    kv_width = arch.n_kv_heads * arch.head_dim
    return 2 * arch.d_model * arch.d_model + 2 * arch.d_model * kv_width


def block_costs(
    arch: ParentArch,
    spec: BlockVariantSpec,
    precision: Precision,
    constants: CostConstants = CostConstants(),
) -> CostVector:
    """Analytic cost of one block variant at the given storage precision.

    FLOPs count the weight matmuls at 2 per multiply-accumulate; KV bytes
    are the per-token key/value entries (zero once attention is removed).
    """
    spec.validate_for(arch)
    params = 0
    kv_bytes = 0
    if spec.has_attention:
        params += attention_params(arch)
        kv_bytes = 2 * arch.n_kv_heads * arch.head_dim * precision.bytes_per_element
    hidden = spec.ffn_hidden(arch, constants.ffn_alignment)
    params += 2 * arch.d_model * hidden
    flops = 2 * params
    weight_bytes = params * precision.bytes_per_element
    latency = flops / constants.compute_rate + weight_bytes / constants.bandwidth
    return CostVector(
        params=params,
        flops_per_token=flops,
        kv_bytes_per_token=kv_bytes,
        latency_per_token=latency,
        weight_bytes=weight_bytes,
    )


def parent_block_spec(layer_index: int) -> BlockVariantSpec:
    """The unmodified block: attention kept, full FFN width."""
    return BlockVariantSpec(layer_index=layer_index, has_attention=True, ffn_ratio=1.0)


def parent_model_cost(
    arch: ParentArch,
    precision: Precision,
    constants: CostConstants = CostConstants(),
) -> CostVector:
    """Whole parent model as the sum of its per-layer block costs."""
    total = CostVector.zero()
    for i in range(arch.n_layers):
        total = total + block_costs(arch, parent_block_spec(i), precision, constants)
    return total


def model_weight_bytes(total_params: int, precision: Precision) -> int:
    """Bytes needed to store total_params elements at the given precision."""
    if total_params <= 0:
        raise InvalidSpecError("total_params must be > 0")
    return total_params * precision.bytes_per_element


def _memory_budget_floor(device_memory: int, reserve_fraction: float) -> int:
    """floor((1 - reserve) * device_memory), computed in exact rational arithmetic.

    Every feasibility comparison in the toolkit goes through this integer, so
    solver-side checks and post-hoc re-validation can never disagree by a
    rounding ulp.
    """
    if not (0.0 <= reserve_fraction < 1.0):
        raise InvalidSpecError("reserve_fraction must lie in [0, 1)")
    budget = Fraction(device_memory) * (Fraction(1) - Fraction(reserve_fraction))
    return budget.numerator // budget.denominator


def max_cached_tokens(
    kv_bytes_per_token: int,
    device_memory: int,
    weight_bytes: int,
    reserve_fraction: float = 0.0,
) -> int:
    """How many cached tokens fit after weights claim their share of memory.

    Returns floor(((1 - reserve) * device_memory - weight_bytes) / kv_bytes),
    clamped at 0 when the reserve eats the residual budget. Weights that do
    not fit at all raise, rather than report a 0-token budget.
    """
    if kv_bytes_per_token <= 0:
        raise InvalidSpecError("kv_bytes_per_token must be > 0")
    if weight_bytes >= device_memory:
        raise ModelDoesNotFitError(weight_bytes, device_memory)
    budget = _memory_budget_floor(device_memory, reserve_fraction) - weight_bytes
    if budget <= 0:
        return 0
    return budget // kv_bytes_per_token


def kv_bytes_from_token_budget(
    device_memory: int,
    weight_bytes: int,
    n_tokens: int,
    reserve_fraction: float = 0.0,
) -> float:
    """Invert the cached-token formula: KV bytes/token a budget implies.

    Useful when a deployment states a token capacity but not the per-token
    KV footprint; the footprint is derived, not asserted.
    """
    if n_tokens <= 0:
        raise InvalidSpecError("n_tokens must be > 0")
    if weight_bytes >= device_memory:
        raise ModelDoesNotFitError(weight_bytes, device_memory)
    budget = _memory_budget_floor(device_memory, reserve_fraction) - weight_bytes
    return budget / n_tokens
