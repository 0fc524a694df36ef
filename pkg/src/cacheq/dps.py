"""Optimal partitioning of denoising steps into cache groups.

The cacheable feature is recomputed at the first step of each group (its
dividing point) and reused for the rest of the group, so a good partition
keeps each group's features close to the features at its dividing point.
The intra-group cost is

    D(i, j) = sum over t in (i, j] of l1_mean_distance(X_i, X_t)

and the solver minimizes the total cost over all ways to split T ordered
steps into K contiguous groups via the recurrence

    M(t, k) = min over s of M(s - 1, k - 1) + D(s, t)

with boundary M(t, 1) = D(0, t), backtracked from t = T - 1. With length
limits active, every group length is confined to [ceil(N/2), 2N], which also
shrinks the inner s-loop from O(T) to O(N) per cell.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .trajectory import FeatureTrajectory

__all__ = [
    "InfeasibleError",
    "CostMatrix",
    "CacheSchedule",
    "SolverTables",
    "cost_matrix",
    "length_limits",
    "group_count",
    "solve",
    "solve_tables",
    "brute_force",
    "uniform_schedule",
    "evaluate_schedule",
    "group_spans",
    "schedule_digest",
    "schedule_to_dict",
    "schedule_from_dict",
]

TIE_BREAK = "smallest_s"


class InfeasibleError(ValueError):
    """No partition satisfies the requested group count and length limits."""


@dataclass(frozen=True)
class CostMatrix:
    """Banded intra-group costs: ``values[i, d] == D(i, i + d)``.

    Entries beyond the band are NaN; the solvers validate up front that the
    band covers every group length they may inspect, so NaN never leaks into
    a result (it would poison the min and be caught).
    """

    band: int
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != self.band + 1:
            raise ValueError(
                f"expected (T, band + 1) cost table, got {self.values.shape} "
                f"for band {self.band}"
            )

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    def get(self, i: int, j: int) -> float:
        """D(i, j) with bounds checking."""
        if not 0 <= i <= j < self.steps:
            raise IndexError(f"invalid step pair ({i}, {j}) for T={self.steps}")
        if j - i > self.band:
            raise IndexError(f"({i}, {j}) lies outside band {self.band}")
        return float(self.values[i, j - i])


def cost_matrix(traj: FeatureTrajectory, band: int | None = None) -> CostMatrix:
    """Tabulate D(i, j) for all i and j - i <= band.

    Row i is the running sum of distances from step i to each later step, so
    the whole band costs O(T * band) distance evaluations and every row is
    nondecreasing in j by construction.
    """
    T = traj.steps
    if band is None:
        band = T - 1
    if band < 1:
        raise ValueError(f"band must be >= 1, got {band}")
    band = min(band, T - 1)
    flat = traj.data.reshape(T, -1).astype(np.float64)
    values = np.full((T, band + 1), np.nan)
    values[:, 0] = 0.0
    for i in range(T):
        reach = min(band, T - 1 - i)
        if reach >= 1:
            step_dists = np.abs(flat[i + 1:i + reach + 1] - flat[i]).mean(axis=1)
            values[i, 1:reach + 1] = np.cumsum(step_dists)
    return CostMatrix(band=band, values=values)


def length_limits(n_target: int) -> tuple[int, int]:
    """Group-length bounds [ceil(N/2), 2N] derived from the reuse target N."""
    if n_target < 1:
        raise ValueError(f"reuse target must be >= 1, got {n_target}")
    return (n_target + 1) // 2, 2 * n_target


def group_count(steps: int, n_target: int) -> int:
    """K = ceil(T / N): the remainder still needs a (short) group."""
    if n_target < 1 or steps < 1:
        raise ValueError("steps and reuse target must be >= 1")
    return -(-steps // n_target)


@dataclass(frozen=True)
class CacheSchedule:
    """A partition of T steps into K contiguous groups.

    ``dividing_points`` are the first steps of each group in increasing
    order; the feature is recomputed there and reused until the next point.
    """

    steps: int
    n_target: int
    groups: int
    dividing_points: tuple[int, ...]
    total_cost: float
    limits: tuple[int, int] | None = None

    def __post_init__(self):
        pts = tuple(int(p) for p in self.dividing_points)
        object.__setattr__(self, "dividing_points", pts)
        if len(pts) != self.groups or self.groups < 1:
            raise ValueError(
                f"expected {self.groups} dividing points, got {len(pts)}"
            )
        if pts[0] != 0:
            raise ValueError("the first group must start at step 0")
        if any(b <= a for a, b in zip(pts, pts[1:])) or pts[-1] >= self.steps:
            raise ValueError(
                f"dividing points must increase strictly within [0, {self.steps})"
            )
        if self.limits is not None:
            lo, hi = self.limits
            for start, end in group_spans(pts, self.steps):
                length = end - start + 1
                if not lo <= length <= hi:
                    raise ValueError(
                        f"group [{start}, {end}] has length {length}, "
                        f"outside limits [{lo}, {hi}]"
                    )

    def group_of_step(self, t: int) -> int:
        """Index of the group containing step t."""
        if not 0 <= t < self.steps:
            raise IndexError(f"step {t} outside [0, {self.steps})")
        return int(np.searchsorted(np.asarray(self.dividing_points), t, side="right") - 1)


def group_spans(points: tuple[int, ...], steps: int) -> list[tuple[int, int]]:
    """Inclusive (start, end) spans of each group of a schedule."""
    ends = list(points[1:]) + [steps]
    return [(s, e - 1) for s, e in zip(points, ends)]


@dataclass(frozen=True)
class SolverTables:
    """Forward DP state, exposed for inspection and complexity accounting.

    ``min_cost[t, k]`` is the best cost of covering steps 0..t with k groups
    (infinity where infeasible); ``choice[t, k]`` the start of the last group
    realizing it; ``visits`` counts inner-loop candidate evaluations.
    """

    min_cost: np.ndarray
    choice: np.ndarray
    visits: int


def _validate_band(costs: CostMatrix, k_groups: int, limits: tuple[int, int] | None) -> int:
    """Longest group length any feasible partition can contain."""
    T = costs.steps
    lo = limits[0] if limits else 1
    hi = limits[1] if limits else T
    # Other k_groups - 1 groups occupy at least lo steps each.
    max_len = min(hi, T - (k_groups - 1) * lo)
    if costs.band < max_len - 1:
        raise ValueError(
            f"cost band {costs.band} too narrow: group lengths up to "
            f"{max_len} are feasible, need band >= {max_len - 1}"
        )
    return max_len


def _check_feasible(steps: int, k_groups: int, limits: tuple[int, int] | None) -> None:
    if k_groups < 1 or k_groups > steps:
        raise InfeasibleError(
            f"cannot split {steps} steps into {k_groups} non-empty groups"
        )
    if limits is not None:
        lo, hi = limits
        if k_groups * lo > steps:
            raise InfeasibleError(
                f"minimum length {lo} forces {k_groups} groups to cover at "
                f"least {k_groups * lo} steps, but T={steps}"
            )
        if k_groups * hi < steps:
            raise InfeasibleError(
                f"maximum length {hi} lets {k_groups} groups cover at most "
                f"{k_groups * hi} steps, but T={steps}"
            )


def solve_tables(costs: CostMatrix, k_groups: int, limits: tuple[int, int] | None) -> SolverTables:
    """Fill the DP tables for a K-group partition of the cost matrix.

    Ties in the inner minimization resolve to the smallest s (argmin keeps
    the first minimum and candidates are scanned in increasing s).
    """
    T = costs.steps
    _check_feasible(T, k_groups, limits)
    max_len = _validate_band(costs, k_groups, limits)
    lo = limits[0] if limits else 1

    min_cost = np.full((T, k_groups + 1), np.inf)
    choice = np.full((T, k_groups + 1), -1, dtype=np.int64)
    visits = 0

    for t in range(T):
        if lo <= t + 1 <= max_len:
            min_cost[t, 1] = costs.values[0, t]
            choice[t, 1] = 0
            visits += 1

    for k in range(2, k_groups + 1):
        prev = min_cost[:, k - 1]
        for t in range(k - 1, T):
            s_lo = max(k - 1, t - max_len + 1)
            s_hi = t - lo + 1
            if s_hi < s_lo:
                continue
            s_range = np.arange(s_lo, s_hi + 1)
            cand = prev[s_range - 1] + costs.values[s_range, t - s_range]
            visits += s_range.size
            best = int(np.argmin(cand))
            if np.isfinite(cand[best]):
                min_cost[t, k] = cand[best]
                choice[t, k] = s_range[best]

    return SolverTables(min_cost=min_cost, choice=choice, visits=visits)


def _backtrack(tables: SolverTables, k_groups: int, steps: int) -> tuple[int, ...]:
    points = []
    t = steps - 1
    for k in range(k_groups, 0, -1):
        s = int(tables.choice[t, k])
        if s < 0:
            raise InfeasibleError(
                f"no feasible partition reaches step {t} with {k} groups"
            )
        points.append(s)
        t = s - 1
    return tuple(reversed(points))


def solve(costs: CostMatrix, n_target: int, limits_on: bool = True) -> CacheSchedule:
    """Minimum-cost schedule for reuse target N; K = ceil(T / N)."""
    T = costs.steps
    k_groups = group_count(T, n_target)
    limits = length_limits(n_target) if limits_on else None
    tables = solve_tables(costs, k_groups, limits)
    points = _backtrack(tables, k_groups, T)
    return CacheSchedule(
        steps=T, n_target=n_target, groups=k_groups, dividing_points=points,
        total_cost=float(tables.min_cost[T - 1, k_groups]), limits=limits,
    )


def brute_force(costs: CostMatrix, k_groups: int,
                limits: tuple[int, int] | None = None,
                guard: int = 2_000_000) -> CacheSchedule:
    """Exhaustive reference solver over all contiguous K-partitions.

    Deliberately independent of the DP: enumerates every dividing-point
    combination and folds group costs in the same left-to-right order, so
    optimal costs compare exactly. Ties resolve like the DP backtrack: the
    candidate whose later dividing points are smallest wins.
    """
    T = costs.steps
    _check_feasible(T, k_groups, limits)
    _validate_band(costs, k_groups, limits)
    if math.comb(T - 1, k_groups - 1) > guard:
        raise ValueError(
            f"{math.comb(T - 1, k_groups - 1)} candidate partitions exceed "
            f"the brute-force guard of {guard}"
        )
    lo, hi = limits if limits else (1, T)
    best_cost = None
    best_points = None
    for rest in itertools.combinations(range(1, T), k_groups - 1):
        points = (0,) + rest
        spans = group_spans(points, T)
        if any(not lo <= e - s + 1 <= hi for s, e in spans):
            continue
        cost = 0.0
        for s, e in spans:
            cost = cost + costs.get(s, e)
        key = tuple(reversed(points))
        if best_cost is None or cost < best_cost or (
            cost == best_cost and key < best_key
        ):
            best_cost, best_points, best_key = cost, points, key
    if best_points is None:
        raise InfeasibleError(
            f"no partition of {T} steps into {k_groups} groups satisfies "
            f"limits {limits}"
        )
    return CacheSchedule(
        steps=T, n_target=group_count(T, k_groups), groups=k_groups,
        dividing_points=best_points, total_cost=best_cost, limits=limits,
    )


def uniform_schedule(steps: int, n_target: int, costs: CostMatrix | None = None) -> CacheSchedule:
    """Evenly spaced dividing points {0, N, 2N, ...}; the last group absorbs
    any remainder. Pass ``costs`` to evaluate the schedule's total cost."""
    if n_target > steps:
        raise ValueError(f"reuse target {n_target} exceeds step count {steps}")
    k_groups = group_count(steps, n_target)
    points = tuple(range(0, k_groups * n_target, n_target))
    total = evaluate_schedule(costs, points) if costs is not None else math.nan
    return CacheSchedule(
        steps=steps, n_target=n_target, groups=k_groups,
        dividing_points=points, total_cost=total, limits=None,
    )


def evaluate_schedule(costs: CostMatrix, points: tuple[int, ...]) -> float:
    """Total intra-group cost of a schedule, folded left to right (the same
    accumulation order the solver uses, so re-evaluation reproduces it)."""
    total = 0.0
    for s, e in group_spans(tuple(points), costs.steps):
        total = total + costs.get(s, e)
    return total


def schedule_digest(schedule: CacheSchedule) -> str:
    """Content hash a correction set can be pinned against."""
    from .hashing import digest

    return digest(schedule_to_dict(schedule))


def schedule_to_dict(schedule: CacheSchedule) -> dict:
    """JSON-ready form of a schedule."""
    if math.isnan(schedule.total_cost):
        raise ValueError("evaluate the schedule cost before serializing it")
    limits = schedule.limits
    return {
        "T": schedule.steps,
        "N": schedule.n_target,
        "K": schedule.groups,
        "dividing_points": list(schedule.dividing_points),
        "total_cost": schedule.total_cost,
        "limits": None if limits is None else {"min": limits[0], "max": limits[1]},
        "tie_break": TIE_BREAK,
    }


def schedule_from_dict(payload: dict) -> CacheSchedule:
    if payload.get("tie_break") != TIE_BREAK:
        raise ValueError(f"unsupported tie break {payload.get('tie_break')!r}")
    limits = payload["limits"]
    return CacheSchedule(
        steps=int(payload["T"]),
        n_target=int(payload["N"]),
        groups=int(payload["K"]),
        dividing_points=tuple(int(p) for p in payload["dividing_points"]),
        total_cost=float(payload["total_cost"]),
        limits=None if limits is None else (int(limits["min"]), int(limits["max"])),
    )
