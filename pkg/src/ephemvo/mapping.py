"""Multi-session pointcloud aggregation, neighbourhood entropy, and
static/ephemeral classification.

A point is static when the traversal distribution of its radius
neighbourhood has high Shannon entropy: structure seen from many sessions is
repeatable, structure seen in one session is ephemeral. The spatial index is
a uniform voxel grid with cell edge equal to the query radius, so each query
touches a fixed 27-cell stencil.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from numba import get_thread_id, njit, prange

from .errors import ConfigError, DataError

_COORD_OFFSET = np.int64(1 << 20)
_COORD_LIMIT = 1 << 20


@dataclass
class SessionPointCloud:
    """World-frame points, each tagged with the traversal that produced it."""

    positions: np.ndarray
    sessions: np.ndarray
    session_count: int

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.sessions = np.ascontiguousarray(self.sessions, dtype=np.int64).reshape(-1)
        if len(self.positions) != len(self.sessions):
            raise DataError("position and session counts differ")
        if self.session_count < 1:
            raise DataError("session_count must be >= 1")
        if not np.all(np.isfinite(self.positions)):
            raise DataError("point positions must be finite")
        if len(self.sessions) and (self.sessions.min() < 0 or self.sessions.max() >= self.session_count):
            raise DataError("session index out of range")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class MappingConfig:
    alpha: float = 0.5
    beta: float | None = None  # None = beta_frac * log(session_count)
    beta_frac: float = 0.5
    cell_size: float | None = None  # None = alpha

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.beta is not None and self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.beta is None and not 0.0 <= self.beta_frac <= 1.0:
            raise ConfigError("beta_frac must be in [0, 1]")
        if self.cell_size is not None and self.cell_size < self.alpha:
            raise ConfigError("cell_size must be >= alpha")

    def resolved_beta(self, session_count: int) -> float:
        max_entropy = np.log(session_count) if session_count > 1 else 0.0
        beta = self.beta_frac * max_entropy if self.beta is None else self.beta
        if beta > max_entropy + 1e-12:
            raise ConfigError(f"beta {beta:.4f} exceeds log(session_count) {max_entropy:.4f}")
        return beta

    def resolved_cell(self) -> float:
        return self.alpha if self.cell_size is None else self.cell_size


@dataclass
class StaticPointCloud:
    """Points that passed the entropy threshold, with their entropies."""

    positions: np.ndarray
    entropies: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.entropies is not None:
            self.entropies = np.asarray(self.entropies, dtype=np.float64).reshape(-1)
            if len(self.entropies) != len(self.positions):
                raise DataError("entropy and position counts differ")

    def __len__(self) -> int:
        return len(self.positions)


def _cell_keys(positions: np.ndarray, inv_cell: float) -> np.ndarray:
    coords = np.floor(positions * inv_cell).astype(np.int64)
    if np.any(np.abs(coords) >= _COORD_LIMIT):
        raise DataError("cloud extent too large for the voxel grid key packing")
    return (
        ((coords[:, 0] + _COORD_OFFSET) << np.int64(42))
        | ((coords[:, 1] + _COORD_OFFSET) << np.int64(21))
        | (coords[:, 2] + _COORD_OFFSET)
    )


class VoxelGrid:
    """Uniform voxel hash grid over a fixed pointcloud.

    Supports exact radius queries for any radius up to the cell size via a
    27-cell stencil. Immutable after construction; queries are read-only.
    """

    def __init__(self, positions: np.ndarray, cell_size: float):
        positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        if len(positions) == 0:
            raise DataError("cannot index an empty cloud")
        if not cell_size > 0:
            raise ConfigError("cell_size must be positive")
        self.positions = positions
        self.cell_size = float(cell_size)
        self._inv_cell = 1.0 / self.cell_size
        keys = _cell_keys(positions, self._inv_cell)
        self.order = np.argsort(keys, kind="stable")
        sorted_keys = keys[self.order]
        self.cell_keys, starts = np.unique(sorted_keys, return_index=True)
        self.cell_starts = np.append(starts, len(sorted_keys)).astype(np.int64)

    def query(self, point, radius: float) -> np.ndarray:
        """Indices of points strictly within `radius`, ascending input order."""
        if radius > self.cell_size:
            raise ConfigError("query radius exceeds the grid cell size")
        p = np.asarray(point, dtype=np.float64).reshape(3)
        base = np.floor(p * self._inv_cell).astype(np.int64)
        offsets = np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij"), axis=-1).reshape(-1, 3)
        cells = base + offsets
        keys = (
            ((cells[:, 0] + _COORD_OFFSET) << np.int64(42))
            | ((cells[:, 1] + _COORD_OFFSET) << np.int64(21))
            | (cells[:, 2] + _COORD_OFFSET)
        )
        found = np.searchsorted(self.cell_keys, keys)
        found = np.clip(found, 0, len(self.cell_keys) - 1)
        valid = self.cell_keys[found] == keys
        candidate_chunks = [
            self.order[self.cell_starts[k] : self.cell_starts[k + 1]] for k in found[valid]
        ]
        if not candidate_chunks:
            return np.empty(0, dtype=np.int64)
        candidates = np.concatenate(candidate_chunks)
        delta = self.positions[candidates] - p
        within = np.einsum("ij,ij->i", delta, delta) < radius * radius
        return np.sort(candidates[within])


def build_spatial_index(cloud: SessionPointCloud, cell_size: float) -> VoxelGrid:
    if len(cloud) == 0:
        raise DataError("cannot index an empty cloud")
    grid = VoxelGrid(cloud.positions, cell_size)
    grid.sessions = cloud.sessions
    return grid


def neighbourhood(index: VoxelGrid, query, alpha: float):
    """All points strictly within `alpha` of the query point.

    Returns (positions (K,3), sessions (K,)); includes the query point itself
    when it belongs to the indexed cloud.
    """
    idx = index.query(query, alpha)
    sessions = getattr(index, "sessions", None)
    if sessions is None:
        raise DataError("index carries no session labels")
    return index.positions[idx], sessions[idx]


def traversal_distribution(neighbour_sessions, session_count: int) -> np.ndarray:
    """Empirical distribution over traversals within a neighbourhood."""
    sessions = np.asarray(neighbour_sessions, dtype=np.int64).reshape(-1)
    if len(sessions) == 0:
        raise DataError("empty neighbourhood has no traversal distribution")
    counts = np.bincount(sessions, minlength=session_count).astype(np.float64)
    return counts / len(sessions)


def entropy(dist) -> float:
    """Shannon entropy in nats; zero-probability terms contribute zero."""
    p = np.asarray(dist, dtype=np.float64).reshape(-1)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise DataError("not a probability distribution")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@njit(cache=True, parallel=True)
def _entropy_kernel(xs, ys, zs, ses_sorted, starts, dims, inv_cell, mins, stencil, alpha2, n_sessions, counts_ws, out_sorted):
    # Points are pre-sorted by cell with cells laid out z-fastest, so each
    # (dx, dy) stencil column is one contiguous point range and the hit
    # test accumulates branchlessly.
    n = len(xs)
    d0, d1, d2 = dims[0], dims[1], dims[2]
    for i in prange(n):
        counts = counts_ws[get_thread_id()]
        for s in range(n_sessions):
            counts[s] = 0
        px, py, pz = xs[i], ys[i], zs[i]
        bx = np.int64(np.floor(px * inv_cell)) - mins[0]
        by = np.int64(np.floor(py * inv_cell)) - mins[1]
        bz = np.int64(np.floor(pz * inv_cell)) - mins[2]
        z0 = bz - stencil if bz - stencil > 0 else 0
        z1 = bz + stencil if bz + stencil < d2 - 1 else d2 - 1
        total = 0
        for dx in range(-stencil, stencil + 1):
            cx = bx + dx
            if cx < 0 or cx >= d0:
                continue
            for dy in range(-stencil, stencil + 1):
                cy = by + dy
                if cy < 0 or cy >= d1:
                    continue
                row = (cx * d1 + cy) * d2
                for j in range(starts[row + z0], starts[row + z1 + 1]):
                    ddx = xs[j] - px
                    ddy = ys[j] - py
                    ddz = zs[j] - pz
                    inside = np.int64(ddx * ddx + ddy * ddy + ddz * ddz < alpha2)
                    counts[ses_sorted[j]] += inside
                    total += inside
        h = 0.0
        if total > 0:
            for s in range(n_sessions):
                c = counts[s]
                if c > 0:
                    pj = c / total
                    h -= pj * np.log(pj)
        out_sorted[i] = h


_MAX_DENSE_CELLS = 300_000_000
_CELL_SUBDIVISION = 2  # batch kernel cell edge = alpha / subdivision


def _clamped_thread_count(threads: int) -> int:
    return max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS))


def neighbourhood_entropies(cloud: SessionPointCloud, config: MappingConfig, threads: int = 1) -> np.ndarray:
    """Neighbourhood entropy of every point, in input order."""
    if len(cloud) == 0:
        raise DataError("empty cloud")
    # finer-than-alpha cells cut the stencil's over-inclusion on dense clouds;
    # queries stay exact because the stencil radius grows to match
    cell = config.alpha / _CELL_SUBDIVISION
    inv_cell = 1.0 / cell
    coords = np.floor(cloud.positions * inv_cell).astype(np.int64)
    mins = coords.min(axis=0)
    dims = coords.max(axis=0) - mins + 1
    n_cells = int(np.prod(dims))
    if n_cells > _MAX_DENSE_CELLS:
        raise DataError("cloud extent too large for the dense voxel layout")
    rel = coords - mins
    cell_id = (rel[:, 0] * dims[1] + rel[:, 1]) * dims[2] + rel[:, 2]
    order = np.argsort(cell_id, kind="stable")
    starts = np.zeros(n_cells + 1, dtype=np.int64)
    np.cumsum(np.bincount(cell_id, minlength=n_cells), out=starts[1:])
    pos_sorted = cloud.positions[order]
    xs = np.ascontiguousarray(pos_sorted[:, 0])
    ys = np.ascontiguousarray(pos_sorted[:, 1])
    zs = np.ascontiguousarray(pos_sorted[:, 2])
    ses_sorted = np.ascontiguousarray(cloud.sessions[order])

    out_sorted = np.empty(len(cloud), dtype=np.float64)
    # per-thread rows padded well past a cache line: threads write counts
    # on every candidate, so rows must never share a line
    counts_ws = np.zeros((numba.config.NUMBA_NUM_THREADS, max(cloud.session_count, 64)), dtype=np.int64)
    n_threads = _clamped_thread_count(threads)
    previous = numba.get_num_threads()
    numba.set_num_threads(n_threads)
    try:
        _entropy_kernel(
            xs,
            ys,
            zs,
            ses_sorted,
            starts,
            dims,
            inv_cell,
            mins,
            _CELL_SUBDIVISION,
            config.alpha * config.alpha,
            cloud.session_count,
            counts_ws,
            out_sorted,
        )
    finally:
        numba.set_num_threads(previous)
    out = np.empty_like(out_sorted)
    out[order] = out_sorted
    return out


def classify_static(cloud: SessionPointCloud, config: MappingConfig, threads: int = 1) -> StaticPointCloud:
    """Keep points whose neighbourhood entropy strictly exceeds beta.

    Output preserves input order regardless of the worker count.
    """
    beta = config.resolved_beta(cloud.session_count)
    entropies = neighbourhood_entropies(cloud, config, threads=threads)
    keep = entropies > beta
    return StaticPointCloud(cloud.positions[keep], entropies[keep])
