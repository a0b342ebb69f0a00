"""FLIP/PIC core: particle set, MAC grid, transfers, pressure, advection.

Velocity components live on cell faces (MAC layout): component a has one
extra sample along axis a, at integer coordinates on that axis and cell
centers on the others. Transfers use the multilinear hat kernel on each
face lattice. All quantities are in cell units per time unit.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import grid as G
from .errors import SolverError

# Particles are kept at least this far inside cells and away from walls.
WALL_MARGIN = 0.01


@dataclass
class ParticleSet:
    """Positions across the step (previous, ideal advected, corrected)."""

    x_prev: np.ndarray
    x_ideal: np.ndarray
    x: np.ndarray
    vel: np.ndarray
    alive: np.ndarray

    @classmethod
    def empty(cls, d: int) -> "ParticleSet":
        z = np.zeros((0, d))
        return cls(x_prev=z.copy(), x_ideal=z.copy(), x=z.copy(), vel=z.copy(),
                   alive=np.zeros(0, dtype=bool))

    @classmethod
    def from_positions(cls, x: np.ndarray, vel: np.ndarray | None = None) -> "ParticleSet":
        x = np.asarray(x, dtype=np.float64)
        if vel is None:
            vel = np.zeros_like(x)
        return cls(x_prev=x.copy(), x_ideal=x.copy(), x=x.copy(),
                   vel=np.asarray(vel, dtype=np.float64).copy(),
                   alive=np.ones(len(x), dtype=bool))

    @property
    def n(self) -> int:
        return len(self.x)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def append(self, x: np.ndarray, vel: np.ndarray) -> None:
        self.x = np.vstack([self.x, x])
        self.x_prev = np.vstack([self.x_prev, x])
        self.x_ideal = np.vstack([self.x_ideal, x])
        self.vel = np.vstack([self.vel, vel])
        self.alive = np.concatenate([self.alive, np.ones(len(x), dtype=bool)])

    def compact(self) -> None:
        """Drop dead particles, preserving index order of the survivors."""
        if self.alive.all():
            return
        keep = self.alive
        self.x = self.x[keep]
        self.x_prev = self.x_prev[keep]
        self.x_ideal = self.x_ideal[keep]
        self.vel = self.vel[keep]
        self.alive = np.ones(len(self.x), dtype=bool)


class MacGrid:
    """Staggered velocity grid plus pressure scratch."""

    def __init__(self, dims):
        self.dims = tuple(int(v) for v in dims)
        self.d = len(self.dims)
        self.vel = [np.zeros(self._face_shape(a)) for a in range(self.d)]
        self.pressure = np.zeros(self.dims)

    def _face_shape(self, a: int) -> tuple:
        return tuple(n + 1 if k == a else n for k, n in enumerate(self.dims))

    def copy_velocity(self) -> list[np.ndarray]:
        return [u.copy() for u in self.vel]

    def max_speed(self) -> float:
        return max(float(np.abs(u).max()) if u.size else 0.0 for u in self.vel)

    def face_offset(self, a: int) -> np.ndarray:
        off = np.full(self.d, 0.5)
        off[a] = 0.0
        return off


def _corner_weights(frac: np.ndarray):
    """Yield (corner offset tuple, weight array) for multilinear interpolation."""
    d = frac.shape[1]
    for corner in product((0, 1), repeat=d):
        w = np.ones(len(frac))
        for k, c in enumerate(corner):
            w = w * (frac[:, k] if c else 1.0 - frac[:, k])
        yield corner, w


def _face_gather(mac: MacGrid, a: int, positions: np.ndarray) -> np.ndarray:
    """Interpolate velocity component a at the given positions."""
    u = mac.vel[a]
    q = positions - mac.face_offset(a)
    base = np.floor(q).astype(np.int64)
    shape = np.asarray(u.shape)
    base = np.clip(base, 0, shape - 2)
    frac = np.clip(q - base, 0.0, 1.0)
    out = np.zeros(len(positions))
    for corner, w in _corner_weights(frac):
        idx = tuple(base[:, k] + corner[k] for k in range(mac.d))
        out += w * u[idx]
    return out


def velocity_at(mac: MacGrid, positions: np.ndarray) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    return np.stack([_face_gather(mac, a, positions) for a in range(mac.d)], axis=1)


def transfer_p2g(particles: ParticleSet, mac: MacGrid, write_cells: np.ndarray | None = None) -> None:
    """Kernel-weighted particle velocities onto faces.

    Faces with zero accumulated weight keep their current value. When
    write_cells (flat bool mask) is given, only faces adjacent to at least
    one cell in the mask are overwritten; the band method passes the cells
    it owns with particles (everything shallower than the band interface).
    """
    if particles.n == 0:
        return
    pos = particles.x_prev
    for a in range(mac.d):
        u = mac.vel[a]
        num = np.zeros_like(u)
        den = np.zeros_like(u)
        q = pos - mac.face_offset(a)
        base = np.floor(q).astype(np.int64)
        base = np.clip(base, 0, np.asarray(u.shape) - 2)
        frac = np.clip(q - base, 0.0, 1.0)
        comp = particles.vel[:, a]
        for corner, w in _corner_weights(frac):
            idx = tuple(base[:, k] + corner[k] for k in range(mac.d))
            np.add.at(num, idx, w * comp)
            np.add.at(den, idx, w)
        mask = den > 0
        if write_cells is not None:
            mask &= _face_mask_from_cells(mac, a, write_cells)
        u[mask] = num[mask] / den[mask]


def _face_mask_from_cells(mac: MacGrid, a: int, cells_flat: np.ndarray) -> np.ndarray:
    """Faces of component a adjacent to at least one cell in the mask."""
    cells = cells_flat.reshape(mac.dims)
    shape = mac.vel[a].shape
    out = np.zeros(shape, dtype=bool)
    lo = [slice(None)] * mac.d
    hi = [slice(None)] * mac.d
    lo[a] = slice(None, -1)
    hi[a] = slice(1, None)
    out[tuple(lo)] |= cells
    out[tuple(hi)] |= cells
    return out


def apply_forces(mac: MacGrid, gravity, dt: float) -> None:
    """u += g * dt on every face; the pressure step re-imposes solid faces."""
    g = np.asarray(gravity, dtype=np.float64)
    for a in range(mac.d):
        if g[a] != 0.0:
            mac.vel[a] += g[a] * dt


def transfer_g2p(mac: MacGrid, saved_vel: list[np.ndarray], particles: ParticleSet,
                 flip_ratio: float, max_speed: float | None = None) -> None:
    """FLIP/PIC blend back to particles, then clamp to the scene speed bound."""
    if particles.n == 0:
        return
    pos = particles.x_prev
    pic = velocity_at(mac, pos)
    saved = MacGrid(mac.dims)
    for a in range(mac.d):
        saved.vel[a] = mac.vel[a] - saved_vel[a]
    delta = velocity_at(saved, pos)
    particles.vel = flip_ratio * (particles.vel + delta) + (1.0 - flip_ratio) * pic
    if max_speed is not None and particles.n:
        peak = np.abs(particles.vel).max(axis=1)
        scale = np.where(peak > max_speed, max_speed / np.maximum(peak, 1e-30), 1.0)
        particles.vel *= scale[:, None]


def clamp_positions(positions: np.ndarray, dims, home_cells: np.ndarray | None = None) -> np.ndarray:
    """Keep positions inside the non-wall interior, and when home cells are
    given also inside their Moore neighborhood."""
    dims = np.asarray(dims, dtype=np.float64)
    lo = np.full_like(dims, 1.0 + WALL_MARGIN)
    hi = dims - 1.0 - WALL_MARGIN
    out = np.clip(positions, lo, hi)
    if home_cells is not None:
        out = np.clip(out, home_cells - 1.0 + WALL_MARGIN, home_cells + 2.0 - WALL_MARGIN)
    return out


def advect_particles(particles: ParticleSet, mac: MacGrid, dt: float) -> None:
    """RK2 midpoint advection of particle positions through the grid field.

    The result is clamped so each particle stays within the Moore
    neighborhood of its previous cell and inside the non-wall interior.
    """
    if particles.n == 0:
        particles.x_ideal = particles.x_prev.copy()
        return
    x0 = particles.x_prev
    v1 = velocity_at(mac, x0)
    mid = clamp_positions(x0 + 0.5 * dt * v1, mac.dims)
    v2 = velocity_at(mac, mid)
    home = np.floor(x0)
    particles.x_ideal = clamp_positions(x0 + dt * v2, mac.dims, home_cells=home)


def advect_grid_velocity(mac: MacGrid, dt: float, face_masks: list[np.ndarray] | None = None) -> None:
    """Semi-Lagrangian backtrace of face velocities (band-owned region)."""
    old = MacGrid(mac.dims)
    old.vel = mac.copy_velocity()
    for a in range(mac.d):
        shape = mac.vel[a].shape
        axes = [np.arange(n, dtype=np.float64) for n in shape]
        mesh = np.meshgrid(*axes, indexing="ij")
        pos = np.stack([m.reshape(-1) for m in mesh], axis=1) + mac.face_offset(a)
        vel = velocity_at(old, pos)
        back = pos - dt * vel
        new_vals = _face_gather(old, a, back).reshape(shape)
        if face_masks is None:
            mac.vel[a] = new_vals
        else:
            mac.vel[a][face_masks[a]] = new_vals[face_masks[a]]


def clamp_dt(mac: MacGrid, dt_request: float, obstacle_speed: float = 0.0) -> float:
    """Largest dt <= request moving nothing more than one cell.

    Uses the current maximum face speed and the fastest obstacle; with
    everything at rest the request is returned unchanged.
    """
    dt = float(dt_request)
    peak = mac.max_speed()
    if peak > 0:
        dt = min(dt, 1.0 / peak)
    if obstacle_speed > 0:
        dt = min(dt, 1.0 / obstacle_speed)
    return dt


# ----------------------------------------------------------------------
# pressure projection

@dataclass
class PressureStats:
    iterations: int
    residual: float
    tolerance: float


def _neighbor_slices(d: int, a: int, side: int):
    """(cell slice, neighbor slice) along axis a; side +1 or -1."""
    cur = [slice(None)] * d
    nb = [slice(None)] * d
    if side > 0:
        cur[a] = slice(None, -1)
        nb[a] = slice(1, None)
    else:
        cur[a] = slice(1, None)
        nb[a] = slice(None, -1)
    return tuple(cur), tuple(nb)


def solve_pressure(mac: MacGrid, cells: G.CellGrid, solid_vel: list[np.ndarray] | None = None,
                   tol: float = 1e-6, max_iter: int = 2000) -> PressureStats:
    """MAC pressure projection by conjugate gradients.

    Free-surface (empty) cells hold zero pressure; faces adjacent to solid
    cells are first forced to the solid's normal velocity and are not
    touched by the gradient update, so u . n = u_solid . n holds exactly.
    Raises SolverError when CG fails to reach tolerance.
    """
    d = mac.d
    dims = cells.dims
    fluid = cells.fluid_mask().reshape(dims)
    solid = cells.solid_mask().reshape(dims)

    impose_solid_faces(mac, cells, solid_vel)

    # divergence of fluid cells
    div = np.zeros(dims)
    for a in range(d):
        u = mac.vel[a]
        hi = [slice(None)] * d
        lo = [slice(None)] * d
        hi[a] = slice(1, None)
        lo[a] = slice(None, -1)
        div += u[tuple(hi)] - u[tuple(lo)]
    rhs = np.where(fluid, -div, 0.0)

    # diagonal = number of non-solid neighbors of each fluid cell
    diag = np.zeros(dims)
    fluid_nb = []
    for a in range(d):
        for side in (+1, -1):
            cur, nb = _neighbor_slices(d, a, side)
            nonsolid = np.zeros(dims, dtype=bool)
            nonsolid[cur] = ~solid[nb]
            diag += np.where(fluid & nonsolid, 1.0, 0.0)
            fn = np.zeros(dims, dtype=bool)
            fn[cur] = fluid[nb]
            fluid_nb.append((cur, nb, fn & fluid))
    diag[~fluid] = 1.0  # keep the operator nonsingular outside fluid

    def apply_A(p):
        out = diag * p
        for (cur, nb, mask) in fluid_nb:
            contrib = np.zeros(dims)
            contrib[cur] = p[nb]
            out -= np.where(mask, contrib, 0.0)
        return np.where(fluid, out, p)

    scale = float(np.abs(rhs).max())
    p = np.zeros(dims)
    stats = PressureStats(iterations=0, residual=0.0, tolerance=tol)
    if scale > 0:
        tol_abs = tol * scale
        r = rhs - apply_A(p)
        z = r.copy()
        rs = float((r * r).sum())
        it = 0
        while float(np.abs(r).max()) > tol_abs:
            if it >= max_iter:
                raise SolverError(
                    f"pressure CG failed: residual {float(np.abs(r).max()):.3e} "
                    f"> {tol_abs:.3e} after {max_iter} iterations")
            Az = apply_A(z)
            denom = float((z * Az).sum())
            if denom <= 0:
                break
            alpha = rs / denom
            p += alpha * z
            r -= alpha * Az
            rs_new = float((r * r).sum())
            z = r + (rs_new / rs) * z
            rs = rs_new
            it += 1
        stats = PressureStats(iterations=it, residual=float(np.abs(r).max()), tolerance=tol_abs)

    mac.pressure = np.where(fluid, p, 0.0)

    # subtract the gradient on faces between non-solid cells touching fluid
    for a in range(d):
        u = mac.vel[a]
        cur = [slice(None)] * d  # interior faces of axis a
        inner = [slice(None)] * d
        inner[a] = slice(1, None)
        left = [slice(None)] * d
        left[a] = slice(None, -1)
        right = [slice(None)] * d
        right[a] = slice(1, None)
        grad = mac.pressure[tuple(right)] - mac.pressure[tuple(left)]
        touch_fluid = fluid[tuple(right)] | fluid[tuple(left)]
        no_solid = ~(solid[tuple(right)] | solid[tuple(left)])
        target = [slice(None)] * d
        target[a] = slice(1, -1)
        u[tuple(target)] -= np.where(touch_fluid & no_solid, grad, 0.0)

    impose_solid_faces(mac, cells, solid_vel)
    return stats


def impose_solid_faces(mac: MacGrid, cells: G.CellGrid, solid_vel: list[np.ndarray] | None) -> None:
    """Force faces adjacent to solid cells to the solid's normal velocity."""
    solid = cells.solid_mask().reshape(cells.dims)
    for a in range(mac.d):
        mask = _face_mask_from_cells(mac, a, solid.reshape(-1))
        vals = solid_vel[a] if solid_vel is not None else 0.0
        if np.isscalar(vals):
            mac.vel[a][mask] = vals
        else:
            mac.vel[a][mask] = vals[mask]


def divergence_residual(mac: MacGrid, cells: G.CellGrid) -> float:
    """Max discrete divergence over fluid cells (post-projection check)."""
    d = mac.d
    div = np.zeros(cells.dims)
    for a in range(d):
        u = mac.vel[a]
        hi = [slice(None)] * d
        lo = [slice(None)] * d
        hi[a] = slice(1, None)
        lo[a] = slice(None, -1)
        div += u[tuple(hi)] - u[tuple(lo)]
    fluid = cells.fluid_mask().reshape(cells.dims)
    return float(np.abs(np.where(fluid, div, 0.0)).max()) if fluid.any() else 0.0
