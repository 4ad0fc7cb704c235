"""Exact constrained selection of one block variant per layer.

Minimizes the summed quality loss subject to upper bounds on total weight
bytes and modeled latency and a lower bound on the cached-token capacity, a
multiple-choice knapsack over small per-layer menus. The solver runs a
layer-by-layer label sweep with dominance pruning; byte axes stay exact
integers and latency stays exact float64, accumulated in layer order, so the
result matches exhaustive enumeration bit for bit (ties included). A full
precision feasibility re-check runs on every returned solution.

Ties are broken by lower latency, then lower weight bytes, then the
lexicographically smallest per-layer variant ids.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .arch_cost import CostVector, Precision, _memory_budget_floor, max_cached_tokens
from .errors import EnumerationCapError, InfeasibleError, InvalidSpecError

BRUTE_FORCE_CAP = 2**22


@dataclass(frozen=True)
class ConstraintSet:
    """Deployment bounds a solution must satisfy; at least one is required.

    min_cached_tokens is stated at `precision` on a device with
    `device_memory` bytes; the catalog being solved must have been costed at
    the same precision.
    """

    max_weight_bytes: int | None = None
    max_latency: float | None = None
    min_cached_tokens: int | None = None
    device_memory: int | None = None
    reserve_fraction: float = 0.0
    precision: Precision = Precision.FP8

    def __post_init__(self):
        present = [self.max_weight_bytes, self.max_latency, self.min_cached_tokens]
        if all(b is None for b in present):
            raise InvalidSpecError("at least one constraint must be present")
        for name in ("max_weight_bytes", "max_latency", "min_cached_tokens"):
            bound = getattr(self, name)
            if bound is not None and bound <= 0:
                raise InvalidSpecError(f"{name} must be positive")
        if self.min_cached_tokens is not None and self.device_memory is None:
            raise InvalidSpecError("min_cached_tokens requires device_memory")
        if not (0.0 <= self.reserve_fraction < 1.0):
            raise InvalidSpecError("reserve_fraction must lie in [0, 1)")

    def kv_budget(self) -> int | None:
        """Integer byte budget shared by weights and min_cached_tokens * KV."""
        if self.min_cached_tokens is None:
            return None
        return _memory_budget_floor(self.device_memory, self.reserve_fraction)

    def to_dict(self) -> dict:
        return {
            "max_weight_bytes": self.max_weight_bytes,
            "max_latency": self.max_latency,
            "min_cached_tokens": self.min_cached_tokens,
            "device_memory": self.device_memory,
            "reserve_fraction": self.reserve_fraction,
            "precision": self.precision.name,
        }


@dataclass(frozen=True)
class ChosenBlock:
    """One selected variant, denormalized so a solution stands on its own."""

    layer_index: int
    variant_index: int
    name: str
    has_attention: bool
    ffn_hidden: int
    quality_loss: float
    cost: CostVector


@dataclass(frozen=True)
class Solution:
    """A per-layer assignment with aggregates and per-constraint slack."""

    blocks: tuple
    total_quality_loss: float
    cost: CostVector
    slack: dict
    constraints: ConstraintSet | None = None

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def choices(self) -> tuple:
        return tuple(
            b.variant_index for b in self.blocks if isinstance(b, ChosenBlock)
        )


def _layer_menus(catalog):
    """Per-layer (loss, latency, weight, kv) columns plus the variants."""
    menus = []
    for layer in catalog.layers:
        if not layer:
            raise InvalidSpecError("catalog has a layer with no variants")
        menus.append(
            [
                (v.quality_loss, v.cost.latency_per_token, v.cost.weight_bytes, v.cost.kv_bytes_per_token)
                for v in layer
            ]
        )
    return menus


def _check_precision(catalog, constraints: ConstraintSet) -> None:
    if constraints.min_cached_tokens is not None and catalog.precision != constraints.precision:
        raise InvalidSpecError(
            f"catalog costed at {catalog.precision.name} but constraints state "
            f"{constraints.precision.name}"
        )


def _tokens_feasible(constraints: ConstraintSet, weight: int, kv: int) -> bool:
    """Exact integer check: weight + T*kv fits the reserved device budget."""
    budget = constraints.kv_budget()
    if budget is None:
        return True
    return weight + constraints.min_cached_tokens * kv <= budget


def _feasible(constraints: ConstraintSet, latency: float, weight: int, kv: int) -> bool:
    if constraints.max_weight_bytes is not None and weight > constraints.max_weight_bytes:
        return False
    if constraints.max_latency is not None and latency > constraints.max_latency:
        return False
    return _tokens_feasible(constraints, weight, kv)


def _achievable_tokens(constraints: ConstraintSet, weight: int, kv: int):
    """Cached-token capacity of an assignment; inf when it stores no KV."""
    budget = _memory_budget_floor(constraints.device_memory, constraints.reserve_fraction)
    residual = budget - weight
    if kv == 0:
        return float("inf") if residual >= 0 else 0
    return max(0, residual // kv)


def _max_tokens_over_assignments(menus, constraints: ConstraintSet) -> float:
    """Best cached-token capacity any assignment can reach (for error reports).

    feasible(T) is monotone in T, and the cheapest assignment at a given T is
    the per-layer minimum of weight + T*kv, so binary search is exact.
    """
    budget = constraints.kv_budget()

    def cheapest(tokens: int) -> int:
        return sum(min(w + tokens * kv for _, _, w, kv in menu) for menu in menus)

    if cheapest(0) > budget:
        return 0
    # kv >= 1 byte forces T <= budget, so exceeding that is only possible
    # with zero total KV, i.e. unbounded capacity.
    if cheapest(budget + 1) <= budget:
        return float("inf")
    lo, hi = 0, budget + 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cheapest(mid) <= budget:
            lo = mid
        else:
            hi = mid
    return lo


def _infeasibility_report(menus, constraints: ConstraintSet) -> dict:
    report = {}
    if constraints.max_weight_bytes is not None:
        report["max_weight_bytes"] = {
            "bound": constraints.max_weight_bytes,
            "best_achievable": sum(min(w for _, _, w, _ in menu) for menu in menus),
        }
    if constraints.max_latency is not None:
        report["max_latency"] = {
            "bound": constraints.max_latency,
            "best_achievable": sum(min(l for _, l, _, _ in menu) for menu in menus),
        }
    if constraints.min_cached_tokens is not None:
        report["min_cached_tokens"] = {
            "bound": constraints.min_cached_tokens,
            "best_achievable": _max_tokens_over_assignments(menus, constraints),
        }
    return report


def evaluate_choices(catalog, choices, constraints: ConstraintSet | None):
    """Aggregate an assignment at full precision and compute slacks.

    Accumulates in layer order (the same order the solver and the exhaustive
    oracle use), so repeated evaluations are bit-identical.
    """
    total = CostVector.zero()
    loss = 0.0
    blocks = []
    for layer_index, variant_index in enumerate(choices):
        v = catalog.variant(layer_index, variant_index)
        total = total + v.cost
        loss = loss + v.quality_loss
        blocks.append(
            ChosenBlock(
                layer_index=layer_index,
                variant_index=variant_index,
                name=v.spec.name(),
                has_attention=v.spec.has_attention,
                ffn_hidden=v.ffn_hidden,
                quality_loss=v.quality_loss,
                cost=v.cost,
            )
        )
    slack = {}
    feasible = True
    if constraints is not None:
        if constraints.max_weight_bytes is not None:
            slack["max_weight_bytes"] = constraints.max_weight_bytes - total.weight_bytes
        if constraints.max_latency is not None:
            slack["max_latency"] = constraints.max_latency - total.latency_per_token
        if constraints.min_cached_tokens is not None:
            tokens = _achievable_tokens(constraints, total.weight_bytes, total.kv_bytes_per_token)
            slack["min_cached_tokens"] = (
                tokens - constraints.min_cached_tokens
                if tokens != float("inf")
                else float("inf")
            )
        feasible = _feasible(
            constraints, total.latency_per_token, total.weight_bytes, total.kv_bytes_per_token
        )
    return feasible, loss, total, blocks, slack


def _build_solution(catalog, choices, constraints: ConstraintSet) -> Solution:
    feasible, loss, total, blocks, slack = evaluate_choices(catalog, choices, constraints)
    if not feasible:
        raise AssertionError("solver produced an infeasible assignment")
    return Solution(
        blocks=tuple(blocks),
        total_quality_loss=loss,
        cost=total,
        slack=slack,
        constraints=constraints,
    )


def solve(catalog, constraints: ConstraintSet, prune_limit: int = 200_000) -> Solution:
    """Optimal assignment by exact label DP over layers.

    Labels carry (loss, latency, weight, kv, choices); extensions accumulate
    in layer order. Pruning is lossless: labels that cannot finish within the
    bounds even on the cheapest suffix are dropped, and a label is dominated
    only when another one is at least as good on every resource *and* would
    win the final tie-break against it. Above `prune_limit` labels the
    quadratic dominance pass is skipped (correctness is unaffected).
    """
    _check_precision(catalog, constraints)
    menus = _layer_menus(catalog)
    n_layers = len(menus)

    # Cheapest possible suffix per resource, for lossless lookahead pruning.
    min_lat_suffix = [0.0] * (n_layers + 1)
    min_w_suffix = [0] * (n_layers + 1)
    min_kv_suffix = [0] * (n_layers + 1)
    for i in range(n_layers - 1, -1, -1):
        min_lat_suffix[i] = min_lat_suffix[i + 1] + min(l for _, l, _, _ in menus[i])
        min_w_suffix[i] = min_w_suffix[i + 1] + min(w for _, _, w, _ in menus[i])
        min_kv_suffix[i] = min_kv_suffix[i + 1] + min(kv for _, _, _, kv in menus[i])

    labels = [(0.0, 0.0, 0, 0, ())]
    for i, menu in enumerate(menus):
        extended = {}
        for loss, lat, w, kv, choices in labels:
            for vid, (v_loss, v_lat, v_w, v_kv) in enumerate(menu):
                n_loss = loss + v_loss
                n_lat = lat + v_lat
                n_w = w + v_w
                n_kv = kv + v_kv
                if (
                    constraints.max_weight_bytes is not None
                    and n_w + min_w_suffix[i + 1] > constraints.max_weight_bytes
                ):
                    continue
                if (
                    constraints.max_latency is not None
                    and n_lat + min_lat_suffix[i + 1] > constraints.max_latency
                ):
                    continue
                if not _tokens_feasible(
                    constraints, n_w + min_w_suffix[i + 1], n_kv + min_kv_suffix[i + 1]
                ):
                    continue
                n_choices = choices + (vid,)
                key = (n_loss, n_lat, n_w, n_kv)
                held = extended.get(key)
                if held is None or n_choices < held:
                    extended[key] = n_choices
        labels = [(k[0], k[1], k[2], k[3], c) for k, c in extended.items()]
        if not labels:
            raise InfeasibleError(_infeasibility_report(menus, constraints))
        if len(labels) <= prune_limit:
            labels = _dominance_prune(labels)

    final = [lab for lab in labels if _feasible(constraints, lab[1], lab[2], lab[3])]
    if not final:
        raise InfeasibleError(_infeasibility_report(menus, constraints))
    best = min(final, key=lambda lab: (lab[0], lab[1], lab[2], lab[4]))
    return _build_solution(catalog, best[4], constraints)


def _dominance_prune(labels):
    """Drop labels that some other label beats on every axis and on tie-break.

    A keeper k eliminates a label only if k uses no more of any resource and
    either is strictly better on (loss, latency, weight) or ties them with a
    lexicographically smaller choice vector. Equal numerics with a smaller kv
    but a larger choice vector must survive: the final tie-break could still
    prefer the other label.
    """
    labels.sort(key=lambda lab: (lab[0], lab[1], lab[2], lab[3], lab[4]))
    kept = []
    for loss, lat, w, kv, choices in labels:
        dominated = False
        for k_loss, k_lat, k_w, k_kv, k_choices in kept:
            if k_loss <= loss and k_lat <= lat and k_w <= w and k_kv <= kv:
                if (k_loss, k_lat, k_w) != (loss, lat, w) or k_choices < choices:
                    dominated = True
                    break
        if not dominated:
            kept.append((loss, lat, w, kv, choices))
    return kept


def brute_force(catalog, constraints: ConstraintSet, cap: int = BRUTE_FORCE_CAP) -> Solution:
    """Exhaustive oracle: enumerates every assignment, same tie-breaking as solve().

    Refuses outright (never truncates) when the cross product exceeds `cap`.
    """
    _check_precision(catalog, constraints)
    menus = _layer_menus(catalog)
    n_assignments = 1
    for menu in menus:
        n_assignments *= len(menu)
    if n_assignments > cap:
        raise EnumerationCapError(n_assignments, cap)

    # Broadcast per-layer columns into the full cross product, accumulating
    # in layer order so float latency sums match the label DP exactly.
    loss = np.zeros(()); lat = np.zeros(())
    w = np.zeros((), dtype=np.int64); kv = np.zeros((), dtype=np.int64)
    sizes = []
    for menu in menus:
        v_loss = np.array([m[0] for m in menu])
        v_lat = np.array([m[1] for m in menu])
        v_w = np.array([m[2] for m in menu], dtype=np.int64)
        v_kv = np.array([m[3] for m in menu], dtype=np.int64)
        loss = loss[..., None] + v_loss
        lat = lat[..., None] + v_lat
        w = w[..., None] + v_w
        kv = kv[..., None] + v_kv
        sizes.append(len(menu))

    loss = loss.ravel(); lat = lat.ravel(); w = w.ravel(); kv = kv.ravel()
    mask = np.ones(loss.shape, dtype=bool)
    if constraints.max_weight_bytes is not None:
        mask &= w <= constraints.max_weight_bytes
    if constraints.max_latency is not None:
        mask &= lat <= constraints.max_latency
    budget = constraints.kv_budget()
    if budget is not None:
        mask &= (w + constraints.min_cached_tokens * kv) <= budget
    if not mask.any():
        raise InfeasibleError(_infeasibility_report(menus, constraints))

    # Flat C-order index enumerates choice tuples lexicographically, so the
    # first index among minimal (loss, latency, weight) is the tie-break winner.
    for key in (loss, lat, w):
        best = key[mask].min()
        mask &= key == best
    flat = int(np.flatnonzero(mask)[0])
    choices = tuple(int(c) for c in np.unravel_index(flat, tuple(sizes)))
    return _build_solution(catalog, choices, constraints)


@dataclass(frozen=True)
class ParetoPoint:
    budget: float
    solution: Solution | None
    infeasible_report: dict | None
    dominated: bool


def pareto_frontier(catalog, latency_grid, fixed: ConstraintSet) -> list:
    """One optimal solution per latency budget; infeasible points stay inline.

    A grid point is flagged dominated when another point's solution is at
    least as good on both loss and realized latency.
    """
    grid = list(latency_grid)
    if any(b2 <= b1 for b1, b2 in zip(grid, grid[1:])):
        raise InvalidSpecError("latency_grid budgets must be strictly increasing")
    solved = []
    for budget in grid:
        constraints = replace(fixed, max_latency=float(budget))
        try:
            solved.append((budget, solve(catalog, constraints), None))
        except InfeasibleError as exc:
            solved.append((budget, None, exc.report))
    points = []
    for budget, sol, report in solved:
        dominated = False
        if sol is not None:
            for other_budget, other, _ in solved:
                if other is None or other_budget == budget:
                    continue
                no_worse = (
                    other.total_quality_loss <= sol.total_quality_loss
                    and other.cost.latency_per_token <= sol.cost.latency_per_token
                )
                strictly_better = (
                    other.total_quality_loss < sol.total_quality_loss
                    or other.cost.latency_per_token < sol.cost.latency_per_token
                    or other_budget < budget
                )
                if no_worse and strictly_better:
                    dominated = True
                    break
        points.append(
            ParetoPoint(budget=float(budget), solution=sol, infeasible_report=report, dominated=dominated)
        )
    return points


def _covered_layers(solution: Solution) -> tuple:
    covered = []
    for block in solution.blocks:
        if isinstance(block, ChosenBlock):
            covered.append(block.layer_index)
        else:  # fused entry with provenance
            covered.extend(block.provenance)
    return tuple(sorted(covered))


def speedup_report(solution: Solution, parent_solution: Solution) -> dict:
    """Descriptive parent/optimized ratios of the modeled aggregates.

    The throughput proxy treats serving as KV-capacity-bound batching at the
    modeled per-token rate: proxy = 1 / (latency * kv_bytes_per_token), so
    its ratio is the product of the latency and KV ratios. Ratios are
    infinite when the optimized model stores no KV at all.
    """
    if _covered_layers(solution) != _covered_layers(parent_solution):
        raise InvalidSpecError("solutions cover different layer sets")
    latency_ratio = parent_solution.cost.latency_per_token / solution.cost.latency_per_token
    if solution.cost.kv_bytes_per_token > 0:
        kv_ratio = parent_solution.cost.kv_bytes_per_token / solution.cost.kv_bytes_per_token
    else:
        kv_ratio = float("inf")
    return {
        "latency_ratio": latency_ratio,
        "kv_ratio": kv_ratio,
        "throughput_proxy_ratio": latency_ratio * kv_ratio,
    }
