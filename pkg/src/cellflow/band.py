"""Incompressible band method: bookkeeping, constraints, flow along paths.

Only cells within R levels of the surface carry particles; deeper fluid is
simulated on the grid alone. An imaginary particle count n_deep tracks what
was deleted below the band. After the plain correction solve, the net
particle flux across the band interface must not exceed the air available
at or below it; the strategies here restore that balance.
"""
from __future__ import annotations

import heapq
from bisect import insort
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import grid as G
from .correction import CorrectionProblem, DenseRow, phi_close
from .errors import InputError, IntegrityError

ROOT = -2
NONE = -1


class BandStrategy(Enum):
    FULL = "full"
    ONE_WAY = "oneway"
    FLOW_PATHS = "flow"


@dataclass
class BandState:
    R: int
    n_deep: int = 0
    strategy: BandStrategy = BandStrategy.FLOW_PATHS
    alpha_interface: int = 0
    alpha_deep: int = 0
    # diagnostics of the latest step
    last_n_move: int = 0
    last_paths: int = 0
    last_find_calls: int = 0
    last_s_in: int = 0
    last_s_out: int = 0

    @property
    def alpha_le(self) -> int:
        return self.alpha_interface + self.alpha_deep


def band_classes(prev: G.GridSnapshot, R: int) -> dict[str, np.ndarray]:
    """Previous-step cell classes used by every band constraint."""
    fluid = (prev.marking == G.SURFACE) | (prev.marking == G.INNER)
    return {
        "surface": prev.marking == G.SURFACE,
        "interface": fluid & (prev.depth == -R),
        "in_band_inner": (prev.marking == G.INNER) & (prev.depth > -R) & (prev.depth < 0),
        "deep": fluid & (prev.depth < -R),
        "layer_above": fluid & (prev.depth == 1 - R),
        "empty": prev.marking == G.EMPTY,
    }


def compute_alphas(cells: G.CellGrid, state: BandState, mu: int) -> tuple[int, int]:
    """Air available in the band interface and in the deep."""
    if cells.prev is None:
        raise IntegrityError("band alphas need a previous-step snapshot")
    cls = band_classes(cells.prev, state.R)
    a_int = mu * int(cls["interface"].sum()) - int(cells.prev.counts[cls["interface"]].sum())
    a_deep = mu * int(cls["deep"].sum()) - state.n_deep
    if a_int < 0 or a_deep < 0:
        raise IntegrityError(f"negative band air: alpha_interface={a_int}, alpha_deep={a_deep}")
    state.alpha_interface = a_int
    state.alpha_deep = a_deep
    return a_int, a_deep


def gamma_io_masks(problem: CorrectionProblem, x_prev: np.ndarray, cells: G.CellGrid,
                   classes: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Candidate masks for movements into / out of the band interface."""
    src = cells.cell_of(x_prev)
    target = problem.target_flat
    safe = np.where(problem.valid, target, 0)
    in_mask = classes["layer_above"][src][None, :] & classes["interface"][safe] & problem.valid
    out_mask = classes["interface"][src][None, :] & classes["layer_above"][safe] & problem.valid
    return in_mask, out_mask


def compute_io(choice: np.ndarray, in_mask: np.ndarray, out_mask: np.ndarray,
               alpha_le: int) -> tuple[int, int, int, int]:
    """Selected interface crossings and the remaining slack on each side."""
    ar = np.arange(len(choice))
    n_in = int(in_mask[choice, ar].sum()) if len(choice) else 0
    n_out = int(out_mask[choice, ar].sum()) if len(choice) else 0
    s_in = n_out - n_in + alpha_le
    s_out = n_in - n_out
    return n_in, n_out, s_in, s_out


def _pairs(mask: np.ndarray) -> list[tuple[int, int]]:
    ii, jj = np.nonzero(mask)
    order = np.lexsort((ii, jj))
    return [(int(ii[k]), int(jj[k])) for k in order]


def build_full_band_constraint(problem: CorrectionProblem, in_mask: np.ndarray,
                               out_mask: np.ndarray, alpha_le: int) -> CorrectionProblem:
    """Attach 0 <= sum(in) - sum(out) <= alpha as a dense row."""
    out = _copy_problem(problem)
    plus = _pairs(in_mask)
    minus = _pairs(out_mask)
    if plus or minus:
        out.dense_rows = list(problem.dense_rows) + [DenseRow(plus=plus, minus=minus, lo=0, hi=alpha_le)]
    return out


def build_one_way(problem: CorrectionProblem, choice: np.ndarray, in_mask: np.ndarray,
                  out_mask: np.ndarray, alpha_le: int) -> CorrectionProblem:
    """One-way variant: freeze the lighter direction of the first solve.

    With too many entrants (s_in < 0) every crossing out of the interface is
    fixed as solved, entrants not selected are blocked, and a cardinality row
    keeps exactly n_out + alpha of the selected entrants. Symmetric when too
    many leave.
    """
    n_in, n_out, s_in, s_out = compute_io(choice, in_mask, out_mask, alpha_le)
    if s_in >= 0 and s_out >= 0:
        raise InputError("one-way constraint requested but no slack is negative")

    out = _copy_problem(problem)
    ar = np.arange(len(choice))
    sel = np.zeros_like(in_mask)
    if len(choice):
        sel[choice, ar] = True

    if s_in < 0:
        fixed, blocked, row_members = out_mask, in_mask, in_mask & sel
        k = n_out + alpha_le
    else:
        fixed, blocked, row_members = in_mask, out_mask, out_mask & sel
        k = n_in

    for (i, j) in _pairs(fixed & sel):
        out.force_choice(j, i)
    for (i, j) in _pairs(fixed & ~sel):
        out.block_choice(j, i)
    for (i, j) in _pairs(blocked & ~sel):
        out.block_choice(j, i)
    members = _pairs(row_members)
    if k > len(members):
        raise IntegrityError(f"one-way cardinality {k} exceeds candidate crossings {len(members)}")
    out.dense_rows = list(problem.dense_rows) + [DenseRow(plus=members, minus=[], lo=k, hi=k)]
    return out


def _copy_problem(problem: CorrectionProblem) -> CorrectionProblem:
    return CorrectionProblem(
        candidates=problem.candidates, mu=problem.mu, cap=problem.cap,
        floor=problem.floor, cost=problem.cost, dims=problem.dims,
        dense_rows=list(problem.dense_rows), valid=problem.valid.copy(),
    )


# ----------------------------------------------------------------------
# flow along paths

@dataclass
class Path:
    edge: int   # particle carrying the final move into the sink
    sink: int   # flat cell index


class CellMembers:
    """Mutable per-cell particle membership, kept sorted for determinism."""

    def __init__(self, cells: G.CellGrid, x: np.ndarray):
        flat = cells.cell_of(x) if len(x) else np.zeros(0, dtype=np.int64)
        self.counts = np.bincount(flat, minlength=cells.ncells).astype(np.int64)
        self.lists: dict[int, list[int]] = {}
        for j, c in enumerate(flat):
            self.lists.setdefault(int(c), []).append(j)

    def members(self, c: int) -> list[int]:
        return self.lists.get(int(c), [])

    def move(self, j: int, src: int, dst: int) -> None:
        self.lists[int(src)].remove(j)
        insort(self.lists.setdefault(int(dst), []), j)
        self.counts[src] -= 1
        self.counts[dst] += 1


class EdgeCost:
    """sigma_edge: cost of a particle's best spot in the next cell minus the
    cost of where it stands, both against its ideal position. The solid
    objective replaces the plain squared distance when an obstacle is active.
    """

    def __init__(self, cells: G.CellGrid, x: np.ndarray, x_ideal: np.ndarray,
                 solid_objective=None):
        self.cells = cells
        self.x = x
        self.x_ideal = x_ideal
        self.so = solid_objective
        if solid_objective is not None:
            self.new_solid = set(int(c) for c in solid_objective.new_solid)
        else:
            self.new_solid = set()

    def _point_cost(self, q: np.ndarray, r: np.ndarray, flat: int) -> float:
        if flat in self.new_solid:
            return self.so.lambda_penalty * float(self.so.cdist[flat])
        return float(((q - r) ** 2).sum())

    def landing(self, j: int, c_flat: int) -> np.ndarray:
        cell = self.cells.unflat(c_flat)
        return phi_close(self.x_ideal[j], cell)

    def __call__(self, j: int, c_flat: int) -> float:
        q = self.landing(j, c_flat)
        new = self._point_cost(q, self.x_ideal[j], c_flat)
        cur = self._point_cost(self.x[j], self.x_ideal[j], int(self.cells.cell_of(self.x[j:j + 1])[0]))
        return new - cur


def best_edge(c: int, c_next: int, members: CellMembers, x_prev_cells: np.ndarray,
              edge_cost: EdgeCost) -> int | None:
    """Cheapest particle of cell c able to move into c_next.

    Particles whose previous-step cell is neither c nor c_next would end
    farther than one cell from where they started and are skipped.
    """
    best_j = None
    best_sigma = np.inf
    for j in members.members(c):
        pc = int(x_prev_cells[j])
        if c != pc and c_next != pc:
            continue
        s = edge_cost(j, c_next)
        if best_j is None or s < best_sigma:
            best_j, best_sigma = j, s
    return best_j


def find_paths(cells: G.CellGrid, members: CellMembers, x_prev_cells: np.ndarray,
               sources: np.ndarray, sinks: np.ndarray, mu: int,
               edge_cost: EdgeCost) -> tuple[list[Path], np.ndarray]:
    """Multi-source Dijkstra for cell-disjoint particle-push chains.

    Non-empty source cells seed the queue at cost zero. Dequeued cells are
    claimed by the first path reaching them; a sink with space completes its
    root's path. Edge costs may be negative (the search is kept verbatim from
    the push-chain formulation), so results can be suboptimal but stay valid.
    """
    J = np.full(cells.ncells, NONE, dtype=np.int64)
    sigma = np.full(cells.ncells, np.inf)
    b_fin: dict[int, bool] = {}
    heap: list[tuple[float, int, int, int, int]] = []
    seq = 0
    for c in np.sort(np.asarray(sources, dtype=np.int64)):
        c = int(c)
        if members.counts[c] == 0:
            continue
        J[c] = ROOT
        sigma[c] = 0.0
        heapq.heappush(heap, (0.0, seq, c, ROOT, c))
        seq += 1

    sink_mask = np.zeros(cells.ncells, dtype=bool)
    sink_mask[np.asarray(sinks, dtype=np.int64)] = True
    paths: list[Path] = []

    while heap:
        cost, _, c, edge, root = heapq.heappop(heap)
        if b_fin.get(root, False):
            continue
        if edge != ROOT:
            if J[c] != NONE:
                continue
            J[c] = edge
            if sink_mask[c] and members.counts[c] < mu:
                b_fin[root] = True
                paths.append(Path(edge=edge, sink=c))
                continue
        for c_next in cells.vn_neighbors_flat(c):
            c_next = int(c_next)
            if c_next < 0 or J[c_next] != NONE:
                continue
            j = best_edge(c, c_next, members, x_prev_cells, edge_cost)
            if j is None:
                continue
            t = cost + edge_cost(j, c_next)
            if t >= sigma[c_next]:
                continue
            sigma[c_next] = t
            heapq.heappush(heap, (t, seq, c_next, j, root))
            seq += 1
    return paths, J


def update_path(path: Path, J: np.ndarray, cells: G.CellGrid, particles,
                members: CellMembers, edge_cost: EdgeCost, mu: int) -> None:
    """Move the chain of particles along a completed path, sink first."""
    before_sink = int(members.counts[path.sink])
    j, c = path.edge, path.sink
    root = None
    while j != ROOT:
        src = int(cells.cell_of(particles.x[j:j + 1])[0])
        particles.x[j] = edge_cost.landing(j, c)
        members.move(j, src, c)
        if members.counts[c] > mu:
            raise IntegrityError(f"cell {c} overfilled while updating a path")
        j, c = int(J[src]), src
        root = src
    if int(members.counts[path.sink]) != before_sink + 1:
        raise IntegrityError("path update did not add exactly one particle to the sink")
    if root is None:
        raise IntegrityError("degenerate path with no moves")


def io_from_positions(cells: G.CellGrid, x_prev: np.ndarray, x: np.ndarray,
                      classes: dict[str, np.ndarray], alpha_le: int) -> tuple[int, int, int, int]:
    """Interface crossings measured directly from positions."""
    if len(x) == 0:
        return 0, 0, alpha_le, 0
    src = cells.cell_of(x_prev)
    dst = cells.cell_of(x)
    n_in = int((classes["layer_above"][src] & classes["interface"][dst]).sum())
    n_out = int((classes["interface"][src] & classes["layer_above"][dst]).sum())
    return n_in, n_out, n_out - n_in + alpha_le, n_in - n_out


def correct_band_flow(cells: G.CellGrid, particles, state: BandState, mu: int,
                      solid_objective=None) -> dict:
    """Restore interface balance by pushing particles along grid paths.

    Requires the plain solve already applied to particle positions. Finds and
    applies paths, recalling the search on the residual state, until the
    negative slack is repaid. Reverting the first solve's crossings is always
    available, so the requested number of paths must exist.
    """
    if cells.prev is None:
        raise IntegrityError("band correction needs a previous-step snapshot")
    classes = band_classes(cells.prev, state.R)
    alpha_le = state.alpha_le
    n_in, n_out, s_in, s_out = io_from_positions(cells, particles.x_prev, particles.x, classes, alpha_le)
    diag = {"n_move": 0, "paths": 0, "find_calls": 0, "s_in": s_in, "s_out": s_out}
    if s_in >= 0 and s_out >= 0:
        return diag

    if s_in < 0:  # drain the interface: interface -> shallower band
        n_move = -s_in
        sources = np.flatnonzero(classes["interface"])
        sinks = np.flatnonzero(classes["surface"] | classes["in_band_inner"] | classes["empty"])
    else:  # refill the interface from above
        n_move = -s_out
        sources = np.flatnonzero(classes["surface"])
        sinks = np.flatnonzero(classes["interface"] | classes["deep"])

    members = CellMembers(cells, particles.x)
    x_prev_cells = cells.cell_of(particles.x_prev)
    edge_cost = EdgeCost(cells, particles.x, particles.x_ideal, solid_objective)

    applied = 0
    calls = 0
    total_paths = 0
    while applied < n_move:
        paths, J = find_paths(cells, members, x_prev_cells, sources, sinks, mu, edge_cost)
        calls += 1
        if not paths:
            raise IntegrityError(
                f"flow-paths found no path with {n_move - applied} moves outstanding")
        total_paths += len(paths)
        for path in paths:
            if applied == n_move:
                break
            update_path(path, J, cells, particles, members, edge_cost, mu)
            applied += 1

    n_in, n_out, s_in, s_out = io_from_positions(cells, particles.x_prev, particles.x, classes, alpha_le)
    if s_in < 0 or s_out < 0:
        raise IntegrityError(f"band slack still negative after correction: {s_in}, {s_out}")
    diag.update({"n_move": n_move, "paths": total_paths, "find_calls": calls,
                 "s_in": s_in, "s_out": s_out})
    return diag


# ----------------------------------------------------------------------
# particle bookkeeping at the end of a band step

def maintain_band(cells: G.CellGrid, particles, state: BandState, mu: int,
                  rng: np.random.Generator, mac=None) -> dict:
    """Delete particles that reached the deep, reseed the excess into the band.

    Runs after the marking update. Particles below depth -R are removed into
    n_deep; when n_deep exceeds the deep capacity, band-interface cells are
    visited in seeded-random order and filled to mu with new particles at
    uniform-random positions, velocities interpolated from the grid.

    The interface balance constraints guarantee interface space only against
    the markings the correction saw; the marking update that just ran can
    shift the depth classes by a few cells, so any remainder spills into the
    shallower band cells (and the surface as a last resort) before the state
    is declared corrupt.
    """
    fluid = cells.fluid_mask()
    deep_cells = fluid & (cells.depth < -state.R)
    interface_cells = np.flatnonzero(fluid & (cells.depth == -state.R))
    in_band_cells = np.flatnonzero(fluid & (cells.depth > -state.R) & (cells.depth < 0))
    surface_cells = np.flatnonzero(fluid & (cells.depth == 0))

    removed = 0
    if particles.n:
        flat = cells.cell_of(particles.x)
        kill = deep_cells[flat]
        removed = int(kill.sum())
        if removed:
            particles.alive[kill] = False
            particles.compact()
            state.n_deep += removed

    # cells the correction treated as deep (snapshot depth) may have been
    # reclassified shallower by the marking update; their legal overflow
    # still counts as particles that reached the deep and is removed here
    if particles.n:
        flat = cells.cell_of(particles.x)
        counts = np.bincount(flat, minlength=cells.ncells)
        over = np.flatnonzero((counts > mu) & ~cells.solid_mask())
        if len(over):
            if cells.prev is not None:
                prev_fluid = (cells.prev.marking == G.SURFACE) | (cells.prev.marking == G.INNER)
                prev_deep = prev_fluid & (cells.prev.depth < -state.R)
                if not prev_deep[over].all():
                    raise IntegrityError("overfull cell outside the former deep region")
            kill = np.zeros(particles.n, dtype=bool)
            for c in over:
                residents = np.flatnonzero(flat == c)
                kill[residents[mu:]] = True  # keep the mu earliest residents
            particles.alive[kill] = False
            particles.compact()
            removed += int(kill.sum())
            state.n_deep += int(kill.sum())

    n_excess = state.n_deep - mu * int(deep_cells.sum())
    added = 0
    if n_excess > 0:
        counts = (np.bincount(cells.cell_of(particles.x), minlength=cells.ncells)
                  if particles.n else np.zeros(cells.ncells, dtype=np.int64))
        new_pos = []

        def fill_from(candidates) -> None:
            nonlocal added
            for c in rng.permutation(candidates):
                space = mu - int(counts[c])
                while space > 0 and added < n_excess:
                    lo = cells.unflat(int(c)).astype(np.float64)
                    new_pos.append(lo + rng.uniform(0.01, 0.99, size=cells.d))
                    counts[c] += 1
                    space -= 1
                    added += 1
                if added == n_excess:
                    return

        fill_from(interface_cells)
        if added < n_excess:
            fill_from(in_band_cells)
        if added < n_excess:
            fill_from(surface_cells)
        if added < n_excess:
            raise IntegrityError(
                f"band cannot absorb {n_excess} excess particles (placed {added})")
        if new_pos:
            pos = np.asarray(new_pos)
            if mac is not None:
                from .flip import velocity_at
                vel = velocity_at(mac, pos)
            else:
                vel = np.zeros_like(pos)
            particles.append(pos, vel)
            state.n_deep -= added

    cells.rebuild_counts(particles.x)
    return {"removed": removed, "reseeded": added, "n_excess": max(n_excess, 0)}


def band_write_cells(cells: G.CellGrid, R: int) -> np.ndarray:
    """Cells whose faces the particle-to-grid transfer may overwrite: all
    non-solid cells shallower than the band interface (air included)."""
    fluid = cells.fluid_mask()
    grid_owned = fluid & (cells.depth <= -R)
    return ~grid_owned & ~cells.solid_mask()


def band_grid_faces(cells: G.CellGrid, mac, R: int) -> list[np.ndarray]:
    """Faces advected semi-Lagrangian: those touching grid-owned fluid."""
    from .flip import _face_mask_from_cells
    fluid = cells.fluid_mask()
    grid_owned = fluid & (cells.depth <= -R)
    return [_face_mask_from_cells(mac, a, grid_owned) for a in range(mac.d)]
