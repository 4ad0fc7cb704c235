"""Fusion of consecutive attention-free blocks into one wider FFN.

A run of attention-free blocks applied sequentially is replaced by a single
block computing x + sum_i FFN_i(norm(x)): member up-projections concatenate
along the hidden axis and down-projections stack, with each member's norm
scale folded into its up-projection so one shared normalization serves the
whole fused block. The concatenated form equals the parallel sum exactly in
exact arithmetic; turning the original *sequential* composition into that
parallel sum is the approximation, and every fused run is flagged as such in
the report.

Fused latency models parallel execution: the largest member compute term
plus one streaming term over the concatenated weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arch_cost import CostConstants, CostVector
from .block_library import activation_pair, rms_norm
from .errors import FusionError
from .search import ChosenBlock, Solution, _achievable_tokens


@dataclass(frozen=True)
class FusableRun:
    """Maximal stretch of consecutive attention-free, FFN-bearing blocks.

    `start` indexes into the solution's block list; `member_hidden` holds the
    members' FFN widths in order. Runs found by find_fusable_runs always have
    length >= 2; shorter runs can be constructed directly for testing the
    fusion algebra in isolation.
    """

    start: int
    length: int
    member_hidden: tuple


@dataclass(frozen=True)
class FfnMember:
    """Weights of one fusable member: up/down projections and norm scale."""

    w1: np.ndarray  # [d_model, hidden]
    w2: np.ndarray  # [hidden, d_model]
    norm_scale: np.ndarray  # [d_model]


@dataclass(frozen=True)
class FusedBlock:
    """One wide FFN equivalent to the parallel sum of its members."""

    w1_fused: np.ndarray  # [d_model, sum(hidden_i)]
    w2_fused: np.ndarray  # [sum(hidden_i), d_model]
    provenance: tuple  # member layer indices

    def forward(self, x: np.ndarray, activation: str = "silu") -> np.ndarray:
        act, _ = activation_pair(activation)
        ones = np.ones(x.shape[-1])
        return x + act(rms_norm(x, ones) @ self.w1_fused) @ self.w2_fused


@dataclass(frozen=True)
class FusedEntry:
    """Solution entry standing in for a fused run (bookkeeping only)."""

    provenance: tuple
    quality_loss: float
    cost: CostVector
    ffn_hidden: int
    has_attention: bool = False
    approximation: bool = True


def _is_fusable(block) -> bool:
    return (
        isinstance(block, ChosenBlock)
        and not block.has_attention
        and block.ffn_hidden > 0
    )


def find_fusable_runs(solution: Solution) -> list[FusableRun]:
    """All maximal runs of length >= 2, in order, non-overlapping.

    Already-fused entries never join a new run, so applying fusion twice
    changes nothing.
    """
    runs = []
    i = 0
    blocks = solution.blocks
    while i < len(blocks):
        if _is_fusable(blocks[i]):
            j = i
            while j < len(blocks) and _is_fusable(blocks[j]):
                j += 1
            if j - i >= 2:
                runs.append(
                    FusableRun(
                        start=i,
                        length=j - i,
                        member_hidden=tuple(blocks[k].ffn_hidden for k in range(i, j)),
                    )
                )
            i = j
        else:
            i += 1
    return runs


def fuse_run(run: FusableRun, members: list[FfnMember]) -> FusedBlock:
    """Concatenate member FFNs into one block sharing a plain RMS norm.

    Each member's norm scale is folded into its up-projection first, so the
    fused block reproduces sum_i FFN_i(norm_i(x)) even when members carry
    different norm scales.
    """
    if len(members) != run.length:
        raise FusionError(f"run has {run.length} members but {len(members)} weight sets given")
    d_model = members[0].w1.shape[0]
    w1_parts = []
    w2_parts = []
    for idx, m in enumerate(members):
        if m.w1.shape[0] != d_model or m.w2.shape[1] != d_model:
            raise FusionError(f"member {idx} width {m.w1.shape} disagrees with d_model {d_model}")
        if m.w1.shape[1] != m.w2.shape[0]:
            raise FusionError(f"member {idx} has w1/w2 hidden mismatch {m.w1.shape} vs {m.w2.shape}")
        if m.w1.shape[1] != run.member_hidden[idx]:
            raise FusionError(
                f"member {idx} hidden {m.w1.shape[1]} != declared {run.member_hidden[idx]}"
            )
        w1_parts.append(m.norm_scale[:, None] * m.w1)
        w2_parts.append(m.w2)
    return FusedBlock(
        w1_fused=np.concatenate(w1_parts, axis=1),
        w2_fused=np.concatenate(w2_parts, axis=0),
        provenance=tuple(range(run.start, run.start + run.length)),
    )


def parallel_sum_reference(x: np.ndarray, members: list[FfnMember], activation: str = "silu") -> np.ndarray:
    """Independent evaluation of x + sum_i FFN_i(norm_i(x)) for equivalence checks."""
    act, _ = activation_pair(activation)
    out = x.copy()
    for m in members:
        out = out + act(rms_norm(x, m.norm_scale) @ m.w1) @ m.w2
    return out


def verify_fusion(
    fused: FusedBlock,
    members: list[FfnMember],
    n_samples: int = 64,
    seq_len: int = 4,
    seed: int = 0,
    activation: str = "silu",
) -> float:
    """Max relative residual between the fused block and the parallel sum."""
    rng = np.random.default_rng(seed)
    d_model = fused.w1_fused.shape[0]
    x = rng.normal(size=(n_samples, seq_len, d_model))
    got = fused.forward(x, activation)
    want = parallel_sum_reference(x, members, activation)
    denom = max(float(np.max(np.abs(want))), 1e-300)
    return float(np.max(np.abs(got - want))) / denom


def _validate_runs(solution: Solution, runs) -> None:
    seen = set()
    blocks = solution.blocks
    for run in runs:
        if run.length < 2:
            raise FusionError(f"run at {run.start} has length {run.length} < 2")
        if run.start < 0 or run.start + run.length > len(blocks):
            raise FusionError(f"run at {run.start} (length {run.length}) is out of range")
        span = range(run.start, run.start + run.length)
        for pos in span:
            if pos in seen:
                raise FusionError(f"runs overlap at position {pos}")
            seen.add(pos)
            if not _is_fusable(blocks[pos]):
                raise FusionError(f"stale run: block at position {pos} is not fusable")
        if run.member_hidden != tuple(blocks[p].ffn_hidden for p in span):
            raise FusionError(f"stale run at {run.start}: member widths disagree with solution")
        before = run.start - 1
        after = run.start + run.length
        if before >= 0 and _is_fusable(blocks[before]):
            raise FusionError(f"run at {run.start} is not maximal (extends left)")
        if after < len(blocks) and _is_fusable(blocks[after]):
            raise FusionError(f"run at {run.start} is not maximal (extends right)")


def _fused_cost(members, constants: CostConstants) -> CostVector:
    """Parallel-execution roofline: max member compute + one streaming pass."""
    compute = max(b.cost.flops_per_token for b in members) / constants.compute_rate
    weight_bytes = sum(b.cost.weight_bytes for b in members)
    return CostVector(
        params=sum(b.cost.params for b in members),
        flops_per_token=sum(b.cost.flops_per_token for b in members),
        kv_bytes_per_token=0,
        latency_per_token=compute + weight_bytes / constants.bandwidth,
        weight_bytes=weight_bytes,
    )


def apply_fusion(
    solution: Solution, runs, constants: CostConstants = CostConstants()
) -> tuple[Solution, dict]:
    """Replace each run with one fused entry; recompute depth and latency.

    Parameters and quality loss are conserved; only sequential depth and the
    latency model change. Returns the new solution and a fusion report.
    """
    _validate_runs(solution, runs)
    runs = sorted(runs, key=lambda r: r.start)
    blocks = []
    report_runs = []
    i = 0
    run_by_start = {r.start: r for r in runs}
    while i < len(solution.blocks):
        run = run_by_start.get(i)
        if run is None:
            blocks.append(solution.blocks[i])
            i += 1
            continue
        members = solution.blocks[i : i + run.length]
        entry = FusedEntry(
            provenance=tuple(b.layer_index for b in members),
            quality_loss=sum(b.quality_loss for b in members),
            cost=_fused_cost(members, constants),
            ffn_hidden=sum(run.member_hidden),
        )
        blocks.append(entry)
        report_runs.append(
            {
                "start": run.start,
                "length": run.length,
                "member_layers": list(entry.provenance),
                "member_hidden": list(run.member_hidden),
                "fused_hidden": entry.ffn_hidden,
                "approximation": True,
            }
        )
        i += run.length

    total = CostVector.zero()
    loss = 0.0
    for b in blocks:
        total = total + b.cost
        loss = loss + b.quality_loss
    slack = dict(solution.slack)
    if solution.constraints is not None:
        constraints = solution.constraints
        slack = {}
        if constraints.max_weight_bytes is not None:
            slack["max_weight_bytes"] = constraints.max_weight_bytes - total.weight_bytes
        if constraints.max_latency is not None:
            slack["max_latency"] = constraints.max_latency - total.latency_per_token
        if constraints.min_cached_tokens is not None:
            tokens = _achievable_tokens(constraints, total.weight_bytes, total.kv_bytes_per_token)
            slack["min_cached_tokens"] = (
                tokens - constraints.min_cached_tokens if tokens != float("inf") else float("inf")
            )
    fused_solution = Solution(
        blocks=tuple(blocks),
        total_quality_loss=loss,
        cost=total,
        slack=slack,
        constraints=solution.constraints,
    )
    report = {
        "runs": report_runs,
        "depth_before": solution.depth,
        "depth_after": fused_solution.depth,
        "latency_before": solution.cost.latency_per_token,
        "latency_after": fused_solution.cost.latency_per_token,
        "shared_norm": True,
    }
    return fused_solution, report
