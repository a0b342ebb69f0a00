"""Solvers for the correction problem.

The sparse problem (no dense rows) reduces to a transportation-structured
minimum-cost flow whose LP relaxation is integral, so it is solved exactly by
successive shortest paths with node potentials. Dense band rows break that
structure; they go through a small branch-and-bound over the row's candidate
variables with the flow solve as relaxation bound. A pruned exhaustive search
doubles as an independent oracle for both.
"""
from __future__ import annotations

import heapq
import time
from dataclasses import dataclass

import numpy as np

from .correction import Assignment, CorrectionProblem
from .errors import InputError, IntegrityError

# Enables O(E) per-iteration reduced-cost assertions inside solve_mcf.
CHECK_POTENTIALS = False


@dataclass
class FlowNetwork:
    """Min-cost flow instance: source, particle and cell nodes, sink.

    Arcs carry (tail, head, capacity, lower bound, cost). Source to particle
    arcs are saturated in any flow of value n, so they carry lower bound 1;
    the standard lower-bound elimination then places one unit of excess on
    each particle node, which keeps the search local.
    """

    n_nodes: int
    tails: np.ndarray
    heads: np.ndarray
    caps: np.ndarray
    lowers: np.ndarray
    costs: np.ndarray
    n_particles: int
    cand_j: np.ndarray     # particle index per candidate arc
    cand_i: np.ndarray     # direction index per candidate arc
    cand_arc: np.ndarray   # arc index per candidate arc

    @property
    def n_arcs(self) -> int:
        return len(self.tails)

    @property
    def supplies(self) -> np.ndarray:
        """Node supply vector: +n at the source, -n at the sink."""
        b = np.zeros(self.n_nodes, dtype=np.int64)
        b[0] = self.n_particles
        b[-1] = -self.n_particles
        return b


@dataclass
class SolveStats:
    objective: float
    integral: bool
    iterations: int
    wall_time: float


def reduce_to_flow(problem: CorrectionProblem) -> FlowNetwork:
    """Build the transportation network of the sparse correction problem."""
    if problem.dense_rows:
        raise InputError("problem has dense rows; use branch_and_bound")
    n = problem.n
    valid = problem.valid
    target = problem.target_flat

    # candidate arcs ordered by (particle, direction)
    jj, ii = np.nonzero(valid.T) if n else (np.zeros(0, dtype=np.int64),) * 2
    cand_cell = target[ii, jj] if n else np.zeros(0, dtype=np.int64)
    used, cell_idx = (np.unique(cand_cell, return_inverse=True)
                      if len(cand_cell) else (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)))
    sink = n + 1 + len(used)

    floored = np.flatnonzero(problem.floor > 0)
    missing = np.setdiff1d(floored, used)
    if missing.size:
        raise IntegrityError(f"floored cells unreachable by any candidate: {missing[:4].tolist()}")

    cell_caps = problem.cap[used]
    cell_caps = np.where(cell_caps < 0, n, cell_caps)
    cell_floors = problem.floor[used]
    if (cell_floors > cell_caps).any():
        raise IntegrityError("cell floor exceeds capacity")

    n_cand = len(jj)
    tails = np.concatenate([np.zeros(n, dtype=np.int64), 1 + jj, n + 1 + np.arange(len(used))])
    heads = np.concatenate([1 + np.arange(n), n + 1 + cell_idx,
                            np.full(len(used), sink, dtype=np.int64)])
    caps = np.concatenate([np.ones(n, dtype=np.int64), np.ones(n_cand, dtype=np.int64), cell_caps])
    lowers = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n_cand, dtype=np.int64), cell_floors])
    costs = np.concatenate([np.zeros(n), problem.cost[ii, jj] if n_cand else np.zeros(0),
                            np.zeros(len(used))])

    return FlowNetwork(
        n_nodes=sink + 1,
        tails=tails, heads=heads, caps=caps, lowers=lowers, costs=costs,
        n_particles=n,
        cand_j=jj.astype(np.int64),
        cand_i=ii.astype(np.int64),
        cand_arc=n + np.arange(n_cand, dtype=np.int64),
    )


def solve_mcf(net: FlowNetwork) -> tuple[Assignment, SolveStats]:
    """Integral min-cost flow by successive shortest paths with potentials.

    Lower bounds are removed by the mandatory-arc excess/deficit
    transformation; each remaining unit of excess (one per particle) is routed
    to the nearest deficit node by Dijkstra over reduced costs, and potentials
    of finalized nodes are updated after every augmentation.

    Because reduced costs stay nonnegative, a unit whose cheapest outgoing arc
    leads directly to a deficit (or through a zero-reduced-cost arc into one)
    is provably on a shortest path; that one- or two-arc case covers almost
    every particle in a settled fluid and skips the heap entirely.
    """
    t0 = time.perf_counter()
    V = net.n_nodes
    E = net.n_arcs

    balance = [0] * V
    balance[0] += net.n_particles
    balance[V - 1] -= net.n_particles
    # residual arcs: forward 2k, backward 2k+1; lowers shift balances only
    res_np = np.zeros(2 * E, dtype=np.int64)
    res_np[0::2] = net.caps - net.lowers
    head_np = np.zeros(2 * E, dtype=np.int64)
    head_np[0::2] = net.heads
    head_np[1::2] = net.tails
    cost_np = np.zeros(2 * E, dtype=np.float64)
    cost_np[0::2] = net.costs
    cost_np[1::2] = -net.costs
    for k in np.flatnonzero(net.lowers):
        lo = int(net.lowers[k])
        balance[int(net.tails[k])] -= lo
        balance[int(net.heads[k])] += lo

    res = res_np.tolist()
    head = head_np.tolist()
    cost = cost_np.tolist()
    adj: list[list[int]] = [[] for _ in range(V)]
    tails_l = net.tails.tolist()
    heads_l = net.heads.tolist()
    for k in range(E):
        adj[tails_l[k]].append(2 * k)
        adj[heads_l[k]].append(2 * k + 1)

    pi = [0.0] * V
    dist = [np.inf] * V
    stamp = [0] * V
    parent = [-1] * V
    run = 0
    iterations = 0
    INF = float("inf")
    heappush = heapq.heappush
    heappop = heapq.heappop

    for s0 in range(V):
        while balance[s0] > 0:
            # fast path: cheapest outgoing residual arc
            best_arc = -1
            best_rc = INF
            pis = pi[s0]
            for a in adj[s0]:
                if res[a] <= 0:
                    continue
                rc = cost[a] + pis - pi[head[a]]
                if rc < best_rc:
                    best_rc = rc
                    best_arc = a
            done = False
            if best_arc >= 0:
                if best_rc < 0.0:
                    best_rc = 0.0
                v = head[best_arc]
                if balance[v] < 0:
                    res[best_arc] -= 1
                    res[best_arc ^ 1] += 1
                    balance[s0] -= 1
                    balance[v] += 1
                    pi[s0] -= best_rc
                    iterations += 1
                    done = True
                else:
                    piv = pi[v]
                    for b in adj[v]:
                        if res[b] <= 0:
                            continue
                        w = head[b]
                        if balance[w] < 0 and cost[b] + piv - pi[w] <= 1e-12:
                            res[best_arc] -= 1
                            res[best_arc ^ 1] += 1
                            res[b] -= 1
                            res[b ^ 1] += 1
                            balance[s0] -= 1
                            balance[w] += 1
                            pi[s0] -= best_rc
                            iterations += 1
                            done = True
                            break
            if done:
                continue

            run += 1
            dist[s0] = 0.0
            stamp[s0] = run
            parent[s0] = -1
            heap = [(0.0, s0)]
            popped: list[int] = []
            target = -1
            while heap:
                d, u = heappop(heap)
                if stamp[u] != run or d > dist[u]:
                    continue
                stamp[u] = -run  # finalized
                popped.append(u)
                if balance[u] < 0:
                    target = u
                    break
                piu = pi[u]
                for a in adj[u]:
                    if res[a] <= 0:
                        continue
                    v = head[a]
                    if stamp[v] == -run:
                        continue
                    rc = cost[a] + piu - pi[v]
                    if CHECK_POTENTIALS and rc < -1e-9:
                        raise IntegrityError(f"negative reduced cost {rc} on arc {a}")
                    nd = d + rc
                    if stamp[v] != run or nd < dist[v]:
                        dist[v] = nd
                        stamp[v] = run
                        parent[v] = a
                        heappush(heap, (nd, v))
            if target < 0:
                raise IntegrityError("min-cost flow infeasible; snapshot corruption suspected")
            dstar = dist[target]
            for u in popped:
                pi[u] += dist[u] - dstar
            v = target
            while v != s0:
                a = parent[v]
                res[a] -= 1
                res[a ^ 1] += 1
                v = head[a ^ 1]
            balance[s0] -= 1
            balance[target] += 1
            iterations += 1

    # flow on arc k = lower_k + transformed flow = cap_k - residual
    res_final = np.asarray(res, dtype=np.int64)
    flow = net.caps - res_final[0::2]
    objective = float(np.dot(flow.astype(np.float64), net.costs))
    pi = np.asarray(pi)
    res = res_final

    # final safety: all residual arcs must have nonnegative reduced cost
    u_all = np.concatenate([net.tails, net.heads])
    v_all = np.concatenate([net.heads, net.tails])
    c_all = np.concatenate([net.costs, -net.costs])
    r_all = np.concatenate([res[0::2], res[1::2]])
    live = r_all > 0
    red = c_all[live] + pi[u_all[live]] - pi[v_all[live]]
    if red.size and red.min() < -1e-6:
        raise IntegrityError(f"optimality check failed: reduced cost {red.min()}")

    choice = np.full(net.n_particles, -1, dtype=np.int64)
    sel = flow[net.cand_arc] > 0
    choice[net.cand_j[sel]] = net.cand_i[sel]
    if (choice < 0).any():
        raise IntegrityError("some particle has no selected direction")
    stats = SolveStats(objective=objective, integral=True, iterations=iterations,
                       wall_time=time.perf_counter() - t0)
    return Assignment(choice=choice), stats


def solve_problem(problem: CorrectionProblem) -> tuple[Assignment, SolveStats]:
    """Convenience wrapper: reduce to flow and solve."""
    return solve_mcf(reduce_to_flow(problem))


# ----------------------------------------------------------------------
# exhaustive oracle

BRUTE_FORCE_LIMIT = 12


def brute_force_ilp(problem: CorrectionProblem) -> tuple[Assignment, float]:
    """Exhaustive search over all candidate selections (n <= 12).

    Depth-first enumeration over per-particle candidates with sound pruning
    only (capacity, floor reachability, admissible cost bound), so the result
    is the exact global optimum. Fully independent of the flow solver.
    """
    n = problem.n
    if n > BRUTE_FORCE_LIMIT:
        raise InputError(f"brute force refused for n={n} > {BRUTE_FORCE_LIMIT}")
    if n == 0:
        return Assignment(choice=np.zeros(0, dtype=np.int64)), 0.0

    cands = []
    for j in range(n):
        lst = [(float(problem.cost[i, j]), int(i), int(problem.target_flat[i, j]))
               for i in np.flatnonzero(problem.valid[:, j])]
        lst.sort(key=lambda t: (t[0], t[1]))
        if not lst:
            raise IntegrityError(f"particle {j} has no admissible candidate")
        cands.append(lst)

    # admissible bound: cheapest remaining candidate per particle
    suffix_min = np.zeros(n + 1)
    for j in range(n - 1, -1, -1):
        suffix_min[j] = suffix_min[j + 1] + cands[j][0][0]

    ncells = int(np.prod(problem.dims))
    counts = np.zeros(ncells, dtype=np.int64)
    cap = problem.cap
    floor = problem.floor
    floor_cells = np.flatnonzero(floor > 0)
    total_floor = int(floor[floor_cells].sum())

    best_obj = np.inf
    best_choice: np.ndarray | None = None
    choice = np.zeros(n, dtype=np.int64)

    def rows_ok() -> bool:
        return all(row.holds(choice) for row in problem.dense_rows)

    def dfs(j: int, partial: float, deficit: int) -> None:
        nonlocal best_obj, best_choice
        if partial + suffix_min[j] >= best_obj - 1e-12:
            return
        if deficit > n - j:
            return
        if j == n:
            if deficit == 0 and rows_ok():
                best_obj = partial
                best_choice = choice.copy()
            return
        for cost, i, c in cands[j]:
            if cap[c] >= 0 and counts[c] >= cap[c]:
                continue
            counts[c] += 1
            d2 = deficit - 1 if (floor[c] > 0 and counts[c] <= floor[c]) else deficit
            choice[j] = i
            dfs(j + 1, partial + cost, d2)
            counts[c] -= 1

    dfs(0, 0.0, total_floor)
    if best_choice is None:
        raise IntegrityError("brute force found no feasible assignment")
    return Assignment(choice=best_choice), float(best_obj)


# ----------------------------------------------------------------------
# branch and bound for dense band rows

BNB_MAX_N = 5000
BNB_MAX_DENSE = 64


BNB_NODE_BUDGET = 50_000


def _pick_branch_var(problem, row, choice, vv, decided):
    """Variable whose flip moves the row toward feasibility at least regret.

    Flipping a selected variable off costs at least the gap to the particle's
    next-best candidate; flipping one on costs the gap from its current pick.
    Deterministic: ties resolve to the lowest (particle, direction).
    """
    v = row.value(choice)
    if v > row.hi:
        toward = [(i, j, True) for (i, j) in row.plus] + [(i, j, False) for (i, j) in row.minus]
    else:
        toward = [(i, j, False) for (i, j) in row.plus] + [(i, j, True) for (i, j) in row.minus]
    best = None
    for (i, j, want_off) in toward:
        if (j, i) in decided or not vv[i, j]:
            continue
        selected = choice[j] == i
        if want_off != selected:
            continue
        if want_off:
            others = [problem.cost[k, j] for k in np.flatnonzero(vv[:, j]) if k != i]
            if not others:
                continue
            regret = min(others) - problem.cost[i, j]
        else:
            regret = problem.cost[i, j] - problem.cost[choice[j], j]
        key = (regret, j, i)
        if best is None or key < best[0]:
            best = (key, (j, i), want_off)
    return best


def branch_and_bound(problem: CorrectionProblem) -> tuple[Assignment, float]:
    """Exact optimum of a correction problem with dense rows.

    Relaxation: drop the dense rows and solve the flow problem (always
    integral). Branching fixes dense-row candidates to 0/1 until every row is
    satisfied; a node whose relaxation already satisfies the rows is optimal
    for its subtree and closes it. Children that reduce the violation are
    explored first, picking the candidate with the smallest reselection
    regret, which finds a good incumbent after about |violation| nodes.
    """
    if not problem.dense_rows:
        assn, stats = solve_problem(problem)
        return assn, stats.objective
    row_vars: list[tuple[int, int]] = []
    seen = set()
    for row in problem.dense_rows:
        for (i, j) in list(row.plus) + list(row.minus):
            if (j, i) not in seen:
                seen.add((j, i))
                row_vars.append((j, i))
    row_vars.sort()
    if problem.n > BNB_MAX_N or len(row_vars) > BNB_MAX_DENSE:
        raise InputError(
            f"branch and bound refused (n={problem.n}, dense candidates={len(row_vars)}); "
            "use the flow-paths strategy at this scale"
        )

    base_valid = problem.valid.copy()
    best_obj = np.inf
    best_choice: np.ndarray | None = None
    nodes = 0

    def node_valid(fixes) -> np.ndarray | None:
        vv = base_valid.copy()
        for (j, i, kind) in fixes:
            if kind:
                keep = np.zeros(problem.m, dtype=bool)
                keep[i] = True
                vv[:, j] &= keep
            else:
                vv[i, j] = False
            if not vv[:, j].any():
                return None
        return vv

    stack: list[tuple] = [()]
    while stack:
        fixes = stack.pop()
        vv = node_valid(fixes)
        if vv is None:
            continue
        nodes += 1
        if nodes > BNB_NODE_BUDGET:
            raise InputError(
                f"branch and bound exceeded {BNB_NODE_BUDGET} nodes; "
                "use the flow-paths strategy for this instance")
        sub = CorrectionProblem(
            candidates=problem.candidates, mu=problem.mu, cap=problem.cap,
            floor=problem.floor, cost=problem.cost, dims=problem.dims,
            dense_rows=[], valid=vv,
        )
        try:
            assn, stats = solve_problem(sub)
        except IntegrityError:
            continue
        if stats.objective >= best_obj - 1e-12:
            continue
        violated = [row for row in problem.dense_rows if not row.holds(assn.choice)]
        if not violated:
            best_obj = stats.objective
            best_choice = assn.choice.copy()
            continue
        decided = {(j, i) for (j, i, _) in fixes}
        pick = _pick_branch_var(problem, violated[0], assn.choice, vv, decided)
        if pick is None:
            continue  # no undecided variable can move the row; subtree is dead
        _, (j, i), want_off = pick
        reduce_first = 0 if want_off else 1
        stack.append(fixes + ((j, i, 1 - reduce_first),))
        stack.append(fixes + ((j, i, reduce_first),))

    if best_choice is None:
        raise IntegrityError("branch and bound found no feasible assignment")
    return Assignment(choice=best_choice), float(best_obj)


# ----------------------------------------------------------------------
# total unimodularity sampling

def canonical_matrix(problem: CorrectionProblem) -> np.ndarray:
    """Inequality-form constraint matrix of the sparse problem.

    Columns are valid candidates ordered by (particle, direction). Rows:
    variable upper/lower bounds, the choose-one equality split into two
    inequalities, then per-cell capacity and (negated) floor rows.
    """
    if problem.dense_rows:
        raise InputError("canonical matrix requires a sparse problem")
    cols = [(j, int(i)) for j in range(problem.n) for i in np.flatnonzero(problem.valid[:, j])]
    col_of = {ji: k for k, ji in enumerate(cols)}
    ncols = len(cols)
    rows = []

    for k in range(ncols):  # b <= 1
        r = np.zeros(ncols, dtype=np.int8)
        r[k] = 1
        rows.append(r)
    for k in range(ncols):  # -b <= 0
        r = np.zeros(ncols, dtype=np.int8)
        r[k] = -1
        rows.append(r)
    for j in range(problem.n):  # choose-one as two inequalities
        r = np.zeros(ncols, dtype=np.int8)
        for i in np.flatnonzero(problem.valid[:, j]):
            r[col_of[(j, int(i))]] = 1
        rows.append(r)
        rows.append(-r)
    used = np.unique(problem.target_flat[problem.valid]) if ncols else np.array([], dtype=np.int64)
    for c in used:
        r = np.zeros(ncols, dtype=np.int8)
        for j in range(problem.n):
            for i in np.flatnonzero(problem.valid[:, j]):
                if problem.target_flat[i, j] == c:
                    r[col_of[(j, int(i))]] = 1
        if problem.cap[c] >= 0:
            rows.append(r)
        if problem.floor[c] > 0:
            rows.append(-r)
    return np.array(rows, dtype=np.int8)


def tu_sample_check(problem: CorrectionProblem, trials: int = 500, max_k: int = 7,
                    rng: np.random.Generator | None = None) -> bool:
    """Sample square submatrices of the canonical matrix; all determinants
    must be exactly -1, 0 or 1."""
    if rng is None:
        rng = np.random.default_rng(0)
    A = canonical_matrix(problem)
    nr, nc = A.shape
    if nr == 0 or nc == 0:
        return True
    for _ in range(trials):
        k = int(rng.integers(1, min(max_k, nr, nc) + 1))
        ri = rng.choice(nr, size=k, replace=False)
        ci = rng.choice(nc, size=k, replace=False)
        det = float(np.linalg.det(A[np.ix_(ri, ci)].astype(np.float64)))
        nearest = round(det)
        if abs(det - nearest) > 1e-6 or nearest not in (-1, 0, 1):
            return False
    return True
