"""Exact search references: shortest paths, pursuit moves, scalar fixed points.

Everything here is an independent code path from the differentiable engine:
plain scalar loops, 64-bit floats, heapq.  These functions are the ground
truth the planners, environment and evaluation metrics are tested against,
and the slow-but-obvious style is deliberate.
"""

from __future__ import annotations

import heapq
import math

import numpy as np

from .actions import ACTION_COSTS, ACTION_OFFSETS, NEIGHBORHOOD_OFFSETS

SQRT2 = math.sqrt(2.0)


class PropagationDiverged(RuntimeError):
    """Fixed-point iteration left the bounded regime instead of converging."""


class PathResult:
    """Outcome of a shortest-path query.

    steps is the hop count of the found path, cost its L2-weighted length;
    both are meaningless (-1 / inf) when the goal is unreachable.
    """

    __slots__ = ("reachable", "steps", "cost", "path")

    def __init__(self, reachable, steps, cost, path):
        self.reachable = reachable
        self.steps = steps
        self.cost = cost
        self.path = path


def _check_cell(walls, cell, what):
    h, w = walls.shape
    i, j = cell
    if not (0 <= i < h and 0 <= j < w):
        raise ValueError(f"{what} {cell} outside {h}x{w} grid")
    if walls[i, j]:
        raise ValueError(f"{what} {cell} is a wall")


def shortest_path(walls, start, goal, metric: str = "hops") -> PathResult:
    """Dijkstra over the 8-connected free cells of a boolean wall grid.

    metric "hops" counts unit edges, "l2" weighs diagonals sqrt(2).
    Ties are deterministic: the heap breaks equal distances by insertion
    order and neighbors are expanded in action order.
    """
    if metric not in ("hops", "l2"):
        raise ValueError(f"shortest_path: unknown metric {metric!r}")
    walls = np.asarray(walls, dtype=bool)
    _check_cell(walls, start, "start")
    _check_cell(walls, goal, "goal")
    start = tuple(start)
    goal = tuple(goal)
    h, w = walls.shape

    dist = {start: 0.0}
    parent = {}
    heap = [(0.0, 0, start)]
    seq = 1
    done = set()
    while heap:
        d, _, cell = heapq.heappop(heap)
        if cell in done:
            continue
        done.add(cell)
        if cell == goal:
            break
        ci, cj = cell
        for k, (di, dj) in enumerate(ACTION_OFFSETS):
            ni, nj = ci + di, cj + dj
            if not (0 <= ni < h and 0 <= nj < w) or walls[ni, nj]:
                continue
            step = 1.0 if metric == "hops" else ACTION_COSTS[k]
            nd = d + step
            if nd < dist.get((ni, nj), math.inf):
                dist[(ni, nj)] = nd
                parent[(ni, nj)] = cell
                heapq.heappush(heap, (nd, seq, (ni, nj)))
                seq += 1

    if goal not in done:
        return PathResult(False, -1, math.inf, [])
    path = [goal]
    while path[-1] != start:
        path.append(parent[path[-1]])
    path.reverse()
    cost = 0.0
    for (ai, aj), (bi, bj) in zip(path, path[1:]):
        cost += math.sqrt((ai - bi) ** 2 + (aj - bj) ** 2)
    return PathResult(True, len(path) - 1, cost, path)


def hop_distance_map(walls, source) -> np.ndarray:
    """8-connected BFS hop distances from `source`; unreachable cells get -1.

    Vectorized frontier expansion — intentionally a different algorithm from
    :func:`shortest_path` so the two can check each other.
    """
    walls = np.asarray(walls, dtype=bool)
    _check_cell(walls, source, "source")
    h, w = walls.shape
    dist = np.full((h, w), -1, dtype=np.int32)
    frontier = np.zeros((h, w), dtype=bool)
    frontier[tuple(source)] = True
    free = ~walls
    d = 0
    while frontier.any():
        dist[frontier] = d
        grown = frontier.copy()
        grown[:-1, :] |= frontier[1:, :]
        grown[1:, :] |= frontier[:-1, :]
        grown[:, :-1] |= frontier[:, 1:]
        grown[:, 1:] |= frontier[:, :-1]
        grown[:-1, :-1] |= frontier[1:, 1:]
        grown[:-1, 1:] |= frontier[1:, :-1]
        grown[1:, :-1] |= frontier[:-1, 1:]
        grown[1:, 1:] |= frontier[:-1, :-1]
        frontier = grown & free & (dist < 0)
        d += 1
    return dist


def octile(a, b) -> float:
    """Octile distance: exact 8-connected L2 path length on an open grid."""
    di = abs(a[0] - b[0])
    dj = abs(a[1] - b[1])
    return max(di, dj) + (SQRT2 - 1.0) * min(di, dj)


def astar_next_move(walls, blocked, start, target):
    """First step of an L2 A* path from start to target, or None to stay.

    `blocked` is a set of cells treated as impassable on top of walls
    (other entities); start and target themselves are never blocked.
    Deterministic for fixed inputs.
    """
    walls = np.asarray(walls, dtype=bool)
    _check_cell(walls, start, "start")
    _check_cell(walls, target, "target")
    start = tuple(start)
    target = tuple(target)
    if start == target:
        return None
    h, w = walls.shape
    blocked = {tuple(c) for c in blocked} - {start, target}

    dist = {start: 0.0}
    parent = {}
    heap = [(octile(start, target), 0, start)]
    seq = 1
    done = set()
    while heap:
        _, _, cell = heapq.heappop(heap)
        if cell in done:
            continue
        done.add(cell)
        if cell == target:
            node = cell
            while parent[node] != start:
                node = parent[node]
            return node
        ci, cj = cell
        for k, (di, dj) in enumerate(ACTION_OFFSETS):
            nxt = (ci + di, cj + dj)
            if not (0 <= nxt[0] < h and 0 <= nxt[1] < w):
                continue
            if walls[nxt] or nxt in blocked:
                continue
            nd = dist[cell] + ACTION_COSTS[k]
            if nd < dist.get(nxt, math.inf):
                dist[nxt] = nd
                parent[nxt] = cell
                heapq.heappush(heap, (nd + octile(nxt, target), seq, nxt))
                seq += 1
    return None


# ---------------------------------------------------------------------------
# scalar fixed points of the propagation recurrences


def mvprop_fixed_point(r, p) -> np.ndarray:
    """Converged max-propagation values by plain 64-bit scalar iteration.

    v0 = r; each sweep takes v[c] = max(v[c], max over the 9-neighborhood
    of r[c] + p[c] * (v[n] - r[c])), out-of-grid neighbors contributing 0.
    Monotone and bounded, so the sweep stabilizes exactly.
    """
    r = np.asarray(r, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if r.shape != p.shape or r.ndim != 2:
        raise ValueError("mvprop_fixed_point: r and p must be equal-shape 2D grids")
    h, w = r.shape
    v = r.copy()
    for _ in range(h * w + 2):
        prev = v.copy()
        for i in range(h):
            for j in range(w):
                best = prev[i, j]
                for di, dj in NEIGHBORHOOD_OFFSETS:
                    ni, nj = i + di, j + dj
                    vn = prev[ni, nj] if 0 <= ni < h and 0 <= nj < w else 0.0
                    cand = r[i, j] + p[i, j] * (vn - r[i, j])
                    if cand > best:
                        best = cand
                v[i, j] = best
        if np.array_equal(v, prev):
            return v
    return v


def vprop_fixed_point(rin, rout, p, tol: float = 1e-12, guard: float = 1e6,
                      max_sweeps: int = 200000) -> np.ndarray:
    """Converged value-propagation map by 64-bit scalar iteration.

    v0 = 0; each sweep takes v[c] = max(v[c], max over in-grid neighborhood
    cells n of p[c] * v[n] + rin[n] - rout[c]).  Raises
    :class:`PropagationDiverged` if values pass `guard`, which happens when
    a cycle with p ~ 1 gains more rin than it pays rout.
    """
    rin = np.asarray(rin, dtype=np.float64)
    rout = np.asarray(rout, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if not (rin.shape == rout.shape == p.shape) or rin.ndim != 2:
        raise ValueError("vprop_fixed_point: fields must be equal-shape 2D grids")
    h, w = rin.shape
    v = np.zeros((h, w), dtype=np.float64)
    for _ in range(max_sweeps):
        prev = v.copy()
        for i in range(h):
            for j in range(w):
                best = prev[i, j]
                for di, dj in NEIGHBORHOOD_OFFSETS:
                    ni, nj = i + di, j + dj
                    if not (0 <= ni < h and 0 <= nj < w):
                        continue
                    cand = p[i, j] * prev[ni, nj] + rin[ni, nj] - rout[i, j]
                    if cand > best:
                        best = cand
                v[i, j] = best
        peak = np.abs(v).max()
        if peak > guard:
            raise PropagationDiverged(
                f"vprop values reached {peak:.3g} (> {guard:.3g}); "
                "some cycle gains rin faster than it pays rout"
            )
        if np.abs(v - prev).max() < tol:
            return v
    raise PropagationDiverged(f"vprop did not converge within {max_sweeps} sweeps")


def mvprop_paths_value(r, p) -> np.ndarray:
    """Exact max-propagation values by enumerating simple paths.

    The value of stopping at c is r[c]; continuing to a neighbor n costs a
    (1 - p[c]) r[c] partial payout plus p[c] times the rest.  Memoized over
    (cell, visited-set) — only practical on tiny grids (<= ~12 cells).
    """
    r = np.asarray(r, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    h, w = r.shape
    if h * w > 12:
        raise ValueError("mvprop_paths_value: grid too large for path enumeration")
    cells = [(i, j) for i in range(h) for j in range(w)]
    index = {c: k for k, c in enumerate(cells)}
    memo = {}

    def value(c, visited):
        key = (c, visited)
        if key in memo:
            return memo[key]
        i, j = c
        best = r[i, j]
        nxt_visited = visited | (1 << index[c])
        for di, dj in ACTION_OFFSETS:
            n = (i + di, j + dj)
            if n not in index or (nxt_visited >> index[n]) & 1:
                continue
            cand = (1.0 - p[i, j]) * r[i, j] + p[i, j] * value(n, nxt_visited)
            if cand > best:
                best = cand
        memo[key] = best
        return best

    out = np.zeros((h, w), dtype=np.float64)
    for c in cells:
        out[c] = value(c, 0)
    return out


def max_path_product(p, start, goal) -> float:
    """Max over simple paths start->goal of the product of p over the path
    cells excluding the goal; depth-first with branch-and-bound pruning.

    The bound uses the Chebyshev distance still to cover times the max p,
    so it stays independent of any shortest-path machinery.
    """
    p = np.asarray(p, dtype=np.float64)
    h, w = p.shape
    start = tuple(start)
    goal = tuple(goal)
    pmax = float(p.max())
    if pmax <= 0.0:
        return 0.0
    best = 0.0

    def chebyshev(c):
        return max(abs(c[0] - goal[0]), abs(c[1] - goal[1]))

    def dfs(c, prod, visited):
        nonlocal best
        if c == goal:
            if prod > best:
                best = prod
            return
        # at least chebyshev(c) hops remain, but the last one enters the goal
        # and contributes no factor, so only chebyshev(c) - 1 factors are left
        remaining = max(0, chebyshev(c) - 1)
        bound = prod * (pmax ** remaining) if pmax < 1.0 else prod
        if bound <= best:
            return
        for di, dj in ACTION_OFFSETS:
            n = (c[0] + di, c[1] + dj)
            if not (0 <= n[0] < h and 0 <= n[1] < w) or n in visited:
                continue
            if n == goal:
                dfs(n, prod, visited)
            elif p[n] > 0.0:
                dfs(n, prod * p[n], visited | {n})

    if start == goal:
        return 1.0
    if p[start] <= 0.0:
        return 0.0
    dfs(start, float(p[start]), {start})
    return best


def single_goal_value_map(p, goal, reward: float = 1.0) -> np.ndarray:
    """Converged max-propagation values for a lone reward at `goal`.

    Equals reward * exp(-d) where d is the Dijkstra distance from the goal
    under edge weight -log p(receiving cell); p = 0 cells are impassable
    and end up at 0.
    """
    p = np.asarray(p, dtype=np.float64)
    h, w = p.shape
    goal = tuple(goal)
    if p[goal] < 0:
        raise ValueError("single_goal_value_map: negative p at goal")
    dist = np.full((h, w), math.inf)
    dist[goal] = 0.0
    heap = [(0.0, 0, goal)]
    seq = 1
    done = set()
    while heap:
        d, _, cell = heapq.heappop(heap)
        if cell in done:
            continue
        done.add(cell)
        for di, dj in ACTION_OFFSETS:
            n = (cell[0] + di, cell[1] + dj)
            if not (0 <= n[0] < h and 0 <= n[1] < w) or n in done:
                continue
            if p[n] <= 0.0:
                continue
            nd = d - math.log(p[n])
            if nd < dist[n]:
                dist[n] = nd
                heapq.heappush(heap, (nd, seq, n))
                seq += 1
    out = np.zeros((h, w), dtype=np.float64)
    finite = np.isfinite(dist)
    out[finite] = reward * np.exp(-dist[finite])
    return out
