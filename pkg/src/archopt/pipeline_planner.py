"""Parallelism and memory planning for a heterogeneous layer-cost profile.

Plans a (tp, pp, cp, dp) decomposition on a GPU cluster: pipeline stages are
balanced over per-layer costs (optionally padded with zero-cost identity
layers so every stage holds the same layer count), per-GPU memory is
accounted as weights + optimizer states + in-flight activations, and
candidates that exceed the device budget are rejected with the offending
component named.

Memory model, per GPU:

    weights    = stage_params * weight_bytes / tp           (ceil)
    optimizer  = stage_params * opt_bytes * multiplier / tp (ceil)
    activations = microbatch_bytes * in_flight / (tp_sp * cp)

where in_flight = pp * schedule multiplier (a pipeline keeps one micro-batch
per stage in flight while filling) and tp_sp is tp when sequence parallelism
shards activations, else 1. The optimizer multiplier defaults to 3.0: an
FP32 master copy plus two FP32 moment tensors. Gradients and workspace are
not modeled; the breakdown states its own assumptions when serialized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .arch_cost import Precision
from .errors import InvalidSpecError, MemoryBudgetError, NoFeasiblePlanError


@dataclass(frozen=True)
class ClusterShape:
    n_nodes: int
    gpus_per_node: int
    gpu_memory: int  # bytes
    cpu_memory_per_node: int  # bytes

    def __post_init__(self):
        for name in ("n_nodes", "gpus_per_node", "gpu_memory", "cpu_memory_per_node"):
            if getattr(self, name) <= 0:
                raise InvalidSpecError(f"{name} must be positive")

    @property
    def total_gpus(self) -> int:
        return self.n_nodes * self.gpus_per_node

    def to_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "gpus_per_node": self.gpus_per_node,
            "gpu_memory": self.gpu_memory,
            "cpu_memory_per_node": self.cpu_memory_per_node,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterShape":
        return cls(**d)


@dataclass(frozen=True)
class PlanDims:
    tp: int
    pp: int
    cp: int
    dp: int
    sequence_parallel: bool = True

    def __post_init__(self):
        for name in ("tp", "pp", "cp", "dp"):
            if getattr(self, name) < 1:
                raise InvalidSpecError(f"{name} must be >= 1")

    @property
    def product(self) -> int:
        return self.tp * self.pp * self.cp * self.dp

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "pp": self.pp,
            "cp": self.cp,
            "dp": self.dp,
            "sequence_parallel": self.sequence_parallel,
        }


@dataclass(frozen=True)
class StagePartition:
    """Contiguous stages over the (possibly identity-padded) layer list.

    `boundaries` are pp+1 cut positions over the padded list; `layout` holds,
    per stage, the original layer indices with None for inserted identities.
    """

    boundaries: tuple
    layout: tuple
    identity_layers_inserted: int
    bottleneck_cost: float


@dataclass(frozen=True)
class MemoryBreakdown:
    weights: int
    optimizer: int
    activations: int

    @property
    def total(self) -> int:
        return self.weights + self.optimizer + self.activations

    def to_dict(self) -> dict:
        return {
            "weights": self.weights,
            "optimizer": self.optimizer,
            "activations": self.activations,
            "total": self.total,
        }


@dataclass(frozen=True)
class ParallelismPlan:
    dims: PlanDims
    stage_boundaries: tuple
    identity_layers_inserted: int
    microbatches_in_flight: int
    per_gpu_memory: MemoryBreakdown
    bottleneck_stage_cost: float
    headroom: int  # gpu_memory minus the per-GPU total

    def to_dict(self) -> dict:
        return {
            "dims": self.dims.to_dict(),
            "stage_boundaries": list(self.stage_boundaries),
            "identity_layers_inserted": self.identity_layers_inserted,
            "microbatches_in_flight": self.microbatches_in_flight,
            "per_gpu_memory": self.per_gpu_memory.to_dict(),
            "bottleneck_stage_cost": self.bottleneck_stage_cost,
            "headroom": self.headroom,
        }


def _prefix_sums(costs):
    prefix = [0.0]
    for c in costs:
        prefix.append(prefix[-1] + c)
    return prefix


def _segment(prefix, i, j):
    """Cost of layers [i, j); all partition code shares this arithmetic."""
    return prefix[j] - prefix[i]


def _greedy_stages_needed(prefix, n, cap):
    """Fewest contiguous stages with every stage sum <= cap; inf if impossible."""
    stages = 0
    start = 0
    while start < n:
        if _segment(prefix, start, start + 1) > cap:
            return math.inf
        end = start + 1
        while end < n and _segment(prefix, start, end + 1) <= cap:
            end += 1
        stages += 1
        start = end
    return stages


def _min_bottleneck_search(costs, pp):
    """Exact min-max stage cost via binary search over contiguous segment sums."""
    n = len(costs)
    prefix = _prefix_sums(costs)
    candidates = sorted({_segment(prefix, i, j) for i in range(n) for j in range(i + 1, n + 1)})
    lo, hi = 0, len(candidates) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if _greedy_stages_needed(prefix, n, candidates[mid]) <= pp:
            hi = mid
        else:
            lo = mid + 1
    return candidates[lo], prefix


def _min_bottleneck_dp(costs, pp):
    """O(n^2 * pp) partition DP used to cross-check the binary search."""
    n = len(costs)
    prefix = _prefix_sums(costs)
    dp = [[math.inf] * (n + 1) for _ in range(pp + 1)]
    dp[0][0] = 0.0
    for k in range(1, pp + 1):
        for i in range(1, n + 1):
            best = math.inf
            for t in range(k - 1, i):
                cand = max(dp[k - 1][t], _segment(prefix, t, i))
                if cand < best:
                    best = cand
            dp[k][i] = best
    return dp[pp][n]


def _boundaries_for_bottleneck(prefix, n, pp, cap):
    """Greedy cuts achieving the bottleneck while keeping all stages non-empty."""
    boundaries = [0]
    start = 0
    for stage in range(pp):
        remaining_stages = pp - stage - 1
        end = start + 1
        while (
            end < n - remaining_stages
            and _segment(prefix, start, end + 1) <= cap
        ):
            end += 1
        boundaries.append(end)
        start = end
    boundaries[-1] = n
    return tuple(boundaries)


def _uniform_count_dp(costs, pp, per_stage):
    """Min-max partition with at most `per_stage` real layers per stage.

    Stages may hold zero real layers (they become all-identity padding).
    Returns (bottleneck, per-stage real layer counts).
    """
    n = len(costs)
    prefix = _prefix_sums(costs)
    dp = [[math.inf] * (n + 1) for _ in range(pp + 1)]
    choice = [[0] * (n + 1) for _ in range(pp + 1)]
    dp[0][0] = 0.0
    for k in range(1, pp + 1):
        for i in range(0, n + 1):
            best = math.inf
            best_t = -1
            for t in range(max(0, i - per_stage), i + 1):
                if dp[k - 1][t] == math.inf:
                    continue
                cand = max(dp[k - 1][t], _segment(prefix, t, i))
                if cand < best:
                    best = cand
                    best_t = t
            dp[k][i] = best
            choice[k][i] = best_t
    if dp[pp][n] == math.inf:
        raise InvalidSpecError(f"cannot place {n} layers into {pp} stages of {per_stage}")
    counts = []
    i = n
    for k in range(pp, 0, -1):
        t = choice[k][i]
        counts.append(i - t)
        i = t
    counts.reverse()
    return dp[pp][n], counts


def balance_stages(layer_costs, pp: int, uniform_count: bool = False) -> StagePartition:
    """Split layers into pp contiguous stages minimizing the largest stage cost.

    With uniform_count, zero-cost identity layers pad every stage to the same
    layer count (appended at stage tails), and the split minimizing the
    bottleneck under that count cap is chosen. Without it, no identities are
    inserted and pp may not exceed the layer count.
    """
    costs = [float(c) for c in layer_costs]
    if not costs:
        raise InvalidSpecError("layer_costs must be non-empty")
    if any(c < 0 for c in costs):
        raise InvalidSpecError("layer costs must be non-negative")
    if pp < 1:
        raise InvalidSpecError("pp must be >= 1")
    n = len(costs)

    if not uniform_count:
        if pp > n:
            raise InvalidSpecError(
                f"pp={pp} exceeds {n} layers and no identity padding is allowed"
            )
        bottleneck, prefix = _min_bottleneck_search(costs, pp)
        check = _min_bottleneck_dp(costs, pp)
        if check != bottleneck:
            raise AssertionError(
                f"partition cross-check failed: search {bottleneck} vs DP {check}"
            )
        boundaries = _boundaries_for_bottleneck(prefix, n, pp, bottleneck)
        layout = tuple(
            tuple(range(boundaries[s], boundaries[s + 1])) for s in range(pp)
        )
        return StagePartition(
            boundaries=boundaries,
            layout=layout,
            identity_layers_inserted=0,
            bottleneck_cost=bottleneck,
        )

    per_stage = math.ceil(n / pp)
    padded = pp * per_stage
    identities = padded - n
    bottleneck, counts = _uniform_count_dp(costs, pp, per_stage)
    layout = []
    cursor = 0
    for count in counts:
        stage = list(range(cursor, cursor + count)) + [None] * (per_stage - count)
        layout.append(tuple(stage))
        cursor += count
    boundaries = tuple(s * per_stage for s in range(pp + 1))
    return StagePartition(
        boundaries=boundaries,
        layout=tuple(layout),
        identity_layers_inserted=identities,
        bottleneck_cost=bottleneck,
    )


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def plan_memory(
    total_params: int,
    layer_params,
    dims: PlanDims,
    microbatch_activation_bytes: int,
    precision_weights: Precision = Precision.BF16,
    precision_optimizer: Precision = Precision.FP32,
    optimizer_state_multiplier: float = 3.0,
    microbatch_multiplier: int = 1,
    gpu_memory: int | None = None,
) -> MemoryBreakdown:
    """Per-GPU byte breakdown for a plan; raises when it misses gpu_memory.

    stage_params is the heaviest stage under identity-padded balancing of
    layer_params (the whole model when pp=1). With a gpu_memory budget, any
    over-budget component (or the total) raises a MemoryBudgetError naming it.
    """
    if total_params <= 0:
        raise InvalidSpecError("total_params must be > 0")
    if microbatch_activation_bytes < 0:
        raise InvalidSpecError("microbatch_activation_bytes must be >= 0")
    if dims.pp == 1 or layer_params is None:
        if dims.pp > 1:
            raise InvalidSpecError("layer_params required when pp > 1")
        stage_params = total_params
    else:
        partition = balance_stages(layer_params, dims.pp, uniform_count=True)
        stage_params = int(partition.bottleneck_cost)

    in_flight = dims.pp * microbatch_multiplier
    tp_shard = dims.tp if dims.sequence_parallel else 1
    weights = _ceil_div(stage_params * precision_weights.bytes_per_element, dims.tp)
    optimizer = math.ceil(
        stage_params * precision_optimizer.bytes_per_element * optimizer_state_multiplier / dims.tp
    )
    activations = _ceil_div(microbatch_activation_bytes * in_flight, tp_shard * dims.cp)
    breakdown = MemoryBreakdown(weights=weights, optimizer=optimizer, activations=activations)

    if gpu_memory is not None:
        over = [
            name
            for name, value in (
                ("weights", weights),
                ("optimizer", optimizer),
                ("activations", activations),
            )
            if value > gpu_memory
        ]
        if breakdown.total > gpu_memory and not over:
            over = ["total"]
        if over:
            raise MemoryBudgetError(breakdown.to_dict(), over, gpu_memory)
    return breakdown


@dataclass(frozen=True)
class ArchProfile:
    """Everything the planner needs to know about the model being trained."""

    total_params: int
    layer_params: tuple
    microbatch_activation_bytes: int
    precision_weights: Precision = Precision.BF16
    precision_optimizer: Precision = Precision.FP32
    optimizer_state_multiplier: float = 3.0
    microbatch_multiplier: int = 1
    sequence_parallel: bool = True

    def __post_init__(self):
        if self.total_params <= 0:
            raise InvalidSpecError("total_params must be > 0")
        if not self.layer_params:
            raise InvalidSpecError("layer_params must be non-empty")


def _divisors(n: int):
    return [d for d in range(1, n + 1) if n % d == 0]


def enumerate_parallelism(profile: ArchProfile, cluster: ClusterShape):
    """All divisor-consistent candidates, split into feasible plans and rejections.

    tp never crosses a node boundary; tp * pp * cp * dp always equals the
    full GPU count; pp never exceeds the layer count.
    """
    total = cluster.total_gpus
    n_layers = len(profile.layer_params)
    feasible = []
    rejected = []
    for tp in _divisors(cluster.gpus_per_node):
        if total % tp != 0:
            continue
        rem_tp = total // tp
        for pp in _divisors(rem_tp):
            if pp > n_layers:
                continue
            rem_pp = rem_tp // pp
            for cp in _divisors(rem_pp):
                dp = rem_pp // cp
                dims = PlanDims(tp=tp, pp=pp, cp=cp, dp=dp, sequence_parallel=profile.sequence_parallel)
                partition = balance_stages(profile.layer_params, pp, uniform_count=True)
                try:
                    breakdown = plan_memory(
                        profile.total_params,
                        profile.layer_params,
                        dims,
                        profile.microbatch_activation_bytes,
                        profile.precision_weights,
                        profile.precision_optimizer,
                        profile.optimizer_state_multiplier,
                        profile.microbatch_multiplier,
                        gpu_memory=cluster.gpu_memory,
                    )
                except MemoryBudgetError as exc:
                    rejected.append(
                        {
                            "dims": dims.to_dict(),
                            "over": exc.over,
                            "components": exc.components,
                            "gpu_memory": cluster.gpu_memory,
                        }
                    )
                    continue
                feasible.append(
                    ParallelismPlan(
                        dims=dims,
                        stage_boundaries=partition.boundaries,
                        identity_layers_inserted=partition.identity_layers_inserted,
                        microbatches_in_flight=pp * profile.microbatch_multiplier,
                        per_gpu_memory=breakdown,
                        bottleneck_stage_cost=partition.bottleneck_cost,
                        headroom=cluster.gpu_memory - breakdown.total,
                    )
                )
    return feasible, rejected


def default_objective(plan: ParallelismPlan):
    """Fewest pipeline stages, then flattest stages, then most headroom."""
    return (
        plan.dims.pp,
        plan.bottleneck_stage_cost,
        -plan.headroom,
        (plan.dims.tp, plan.dims.cp, plan.dims.dp),
    )


def search_parallelism(
    profile: ArchProfile, cluster: ClusterShape, objective=None
) -> ParallelismPlan:
    """Best feasible plan under the objective (default: minimize pp)."""
    feasible, rejected = enumerate_parallelism(profile, cluster)
    if not feasible:
        raise NoFeasiblePlanError(rejected)
    key = objective if objective is not None else default_objective
    return min(feasible, key=key)


def validate_plan(plan: ParallelismPlan, cluster: ClusterShape, n_layers: int) -> None:
    """Re-check the plan invariants: GPU product, stage coverage, memory fit."""
    if plan.dims.product != cluster.total_gpus:
        raise InvalidSpecError(
            f"plan uses {plan.dims.product} GPUs of {cluster.total_gpus}"
        )
    padded = n_layers + plan.identity_layers_inserted
    if plan.stage_boundaries[0] != 0 or plan.stage_boundaries[-1] != padded:
        raise InvalidSpecError("stage boundaries do not cover the padded layer list")
    if any(b > a for a, b in zip(plan.stage_boundaries[1:], plan.stage_boundaries)):
        raise InvalidSpecError("stage boundaries are not monotone")
    if plan.per_gpu_memory.total > cluster.gpu_memory:
        raise InvalidSpecError("per-GPU memory exceeds the device budget")
