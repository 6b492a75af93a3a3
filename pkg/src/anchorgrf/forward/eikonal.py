"""First-arrival traveltimes through a 2-D slowness field.

Solves |grad t|^2 = s^2 by first-order upwind fast marching from each
source.  Accuracy near a point source is improved by seeding the narrow
band with straight-ray times inside a small radius (slowness varies little
over a few cells for the smooth fields in scope).  Receivers report log
traveltime.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ForwardModelError, InvalidParameterError
from ..grids import FieldRealization, Grid

try:
    from numba import njit
except ImportError:                                    # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

SOURCE_SEED_RADIUS = 10.0  # cells; straight-ray initialization zone

FAR, BAND, FROZEN = 0, 1, 2


@njit(cache=True)
def _heap_push(keys, cells, size, key, cell):
    i = size
    keys[i] = key
    cells[i] = cell
    while i > 0:
        parent = (i - 1) // 2
        if keys[parent] <= keys[i]:
            break
        keys[parent], keys[i] = keys[i], keys[parent]
        cells[parent], cells[i] = cells[i], cells[parent]
        i = parent
    return size + 1


@njit(cache=True)
def _heap_pop(keys, cells, size):
    top_key = keys[0]
    top_cell = cells[0]
    size -= 1
    keys[0] = keys[size]
    cells[0] = cells[size]
    i = 0
    while True:
        left = 2 * i + 1
        right = left + 1
        smallest = i
        if left < size and keys[left] < keys[smallest]:
            smallest = left
        if right < size and keys[right] < keys[smallest]:
            smallest = right
        if smallest == i:
            break
        keys[smallest], keys[i] = keys[i], keys[smallest]
        cells[smallest], cells[i] = cells[i], cells[smallest]
        i = smallest
    return top_key, top_cell, size


@njit(cache=True)
def _update_time(t, state, i, j, n0, n1, d0, d1, s):
    """First-order upwind solve of the local eikonal quadratic at (i, j)."""
    a = 1e30
    if i > 0 and state[i - 1, j] == FROZEN and t[i - 1, j] < a:
        a = t[i - 1, j]
    if i < n0 - 1 and state[i + 1, j] == FROZEN and t[i + 1, j] < a:
        a = t[i + 1, j]
    b = 1e30
    if j > 0 and state[i, j - 1] == FROZEN and t[i, j - 1] < b:
        b = t[i, j - 1]
    if j < n1 - 1 and state[i, j + 1] == FROZEN and t[i, j + 1] < b:
        b = t[i, j + 1]
    if a >= 1e30 and b >= 1e30:
        return 1e30
    # two-sided quadratic: ((T-a)/d0)^2 + ((T-b)/d1)^2 = s^2
    if a < 1e30 and b < 1e30:
        ia, ib = 1.0 / (d0 * d0), 1.0 / (d1 * d1)
        A = ia + ib
        B = -2.0 * (a * ia + b * ib)
        C = a * a * ia + b * b * ib - s * s
        disc = B * B - 4.0 * A * C
        if disc >= 0.0:
            T = (-B + np.sqrt(disc)) / (2.0 * A)
            if T >= a and T >= b:
                return T
    if a < 1e30 and b < 1e30:
        one_sided = min(a + s * d0, b + s * d1)
    elif a < 1e30:
        one_sided = a + s * d0
    else:
        one_sided = b + s * d1
    return one_sided


@njit(cache=True)
def _bilinear(slowness, fi, fj):
    n0, n1 = slowness.shape
    fi = min(max(fi, 0.0), n0 - 1.0)
    fj = min(max(fj, 0.0), n1 - 1.0)
    i0 = min(int(fi), n0 - 2) if n0 > 1 else 0
    j0 = min(int(fj), n1 - 2) if n1 > 1 else 0
    wi = fi - i0
    wj = fj - j0
    return ((1 - wi) * (1 - wj) * slowness[i0, j0]
            + wi * (1 - wj) * slowness[i0 + 1, j0]
            + (1 - wi) * wj * slowness[i0, j0 + 1]
            + wi * wj * slowness[i0 + 1, j0 + 1])


@njit(cache=True)
def _straight_ray_time(slowness, d0, d1, src_i, src_j, i, j):
    """Trapezoid line integral of slowness along the straight segment.

    By Fermat's principle this is always >= the true first-arrival time, so
    using it for frozen seed values never corrupts the marching order.
    """
    dx = (i - src_i) * d0
    dy = (j - src_j) * d1
    dist = np.sqrt(dx * dx + dy * dy)
    if dist == 0.0:
        return 0.0
    steps = max(2, int(np.ceil(2.0 * dist / min(d0, d1))))
    total = 0.0
    for k in range(steps + 1):
        frac = k / steps
        val = _bilinear(slowness, src_i + frac * (i - src_i), src_j + frac * (j - src_j))
        weight = 0.5 if (k == 0 or k == steps) else 1.0
        total += weight * val
    return dist * total / steps


@njit(cache=True)
def _fast_march(slowness, d0, d1, src_i, src_j, seed_radius):
    n0, n1 = slowness.shape
    t = np.full((n0, n1), 1e30)
    state = np.zeros((n0, n1), dtype=np.uint8)
    cap = 8 * n0 * n1
    keys = np.empty(cap)
    cells = np.empty(cap, dtype=np.int64)
    size = 0

    r = int(seed_radius)
    for i in range(max(0, src_i - r), min(n0, src_i + r + 1)):
        for j in range(max(0, src_j - r), min(n1, src_j + r + 1)):
            dx = (i - src_i) * d0
            dy = (j - src_j) * d1
            dist = np.sqrt(dx * dx + dy * dy)
            if dist <= seed_radius * min(d0, d1):
                t[i, j] = _straight_ray_time(slowness, d0, d1, src_i, src_j, i, j)
                state[i, j] = FROZEN
    # narrow band around the seeded region
    for i in range(n0):
        for j in range(n1):
            if state[i, j] == FROZEN:
                for k in range(4):
                    ni = i + (1 if k == 0 else -1 if k == 1 else 0)
                    nj = j + (1 if k == 2 else -1 if k == 3 else 0)
                    if 0 <= ni < n0 and 0 <= nj < n1 and state[ni, nj] == FAR:
                        val = _update_time(t, state, ni, nj, n0, n1, d0, d1,
                                           slowness[ni, nj])
                        if val < t[ni, nj]:
                            t[ni, nj] = val
                            state[ni, nj] = BAND
                            size = _heap_push(keys, cells, size, val, ni * n1 + nj)

    while size > 0:
        key, cell, size = _heap_pop(keys, cells, size)
        i = cell // n1
        j = cell % n1
        if state[i, j] == FROZEN:
            continue
        state[i, j] = FROZEN
        t[i, j] = key
        for k in range(4):
            ni = i + (1 if k == 0 else -1 if k == 1 else 0)
            nj = j + (1 if k == 2 else -1 if k == 3 else 0)
            if 0 <= ni < n0 and 0 <= nj < n1 and state[ni, nj] != FROZEN:
                val = _update_time(t, state, ni, nj, n0, n1, d0, d1, slowness[ni, nj])
                if val < t[ni, nj]:
                    t[ni, nj] = val
                    state[ni, nj] = BAND
                    if size < cap:
                        size = _heap_push(keys, cells, size, val, ni * n1 + nj)
    return t


def traveltime_field(slowness: np.ndarray, spacing: tuple[float, float],
                     source: tuple[int, int]) -> np.ndarray:
    """First-arrival times from one source cell to every cell."""
    s = np.ascontiguousarray(slowness, dtype=np.float64)
    if np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise ForwardModelError("slowness must be finite and positive")
    return _fast_march(s, float(spacing[0]), float(spacing[1]),
                       int(source[0]), int(source[1]), SOURCE_SEED_RADIUS)


@dataclass(frozen=True)
class TomographyPlan:
    """Crosshole-style source/receiver layout on a 2-D grid.

    Sources sit on both vertical boundaries; each source is recorded by the
    receivers on the opposite vertical boundary and on the top boundary.
    Pairs are ordered source-major (left-boundary sources first, by depth),
    receivers opposite-boundary-first (by depth) then top (by horizontal
    position).
    """

    grid: Grid
    n_sources_per_side: int = 6
    n_receivers_per_side: int = 10
    n_receivers_top: int = 15

    def __post_init__(self):
        if self.grid.ndim != 2:
            raise InvalidParameterError("tomography needs a 2-D grid")

    @staticmethod
    def _spread(n_cells: int, count: int) -> np.ndarray:
        return np.round(np.linspace(0, n_cells - 1, count)).astype(int)

    @staticmethod
    def _spread_interior(n_cells: int, count: int) -> np.ndarray:
        """Evenly spaced away from the boundary cells (bin midpoints)."""
        return np.round((np.arange(count) + 0.5) * n_cells / count - 0.5).astype(int)

    def source_cells(self) -> list[tuple[int, int]]:
        """Sources are inset from the corners so no receiver coincides."""
        n0, n1 = self.grid.dims
        depths = self._spread_interior(n1, self.n_sources_per_side)
        return [(0, int(d)) for d in depths] + [(n0 - 1, int(d)) for d in depths]

    def receivers_for(self, source: tuple[int, int]) -> list[tuple[int, int]]:
        n0, n1 = self.grid.dims
        depths = self._spread(n1, self.n_receivers_per_side)
        tops = self._spread(n0, self.n_receivers_top)
        opposite = n0 - 1 if source[0] == 0 else 0
        side = [(opposite, int(d)) for d in depths]
        top = [(int(x), 0) for x in tops]
        return side + top

    @property
    def n_pairs(self) -> int:
        return 2 * self.n_sources_per_side * (self.n_receivers_per_side + self.n_receivers_top)


@dataclass(frozen=True)
class EikonalModel:
    """Forward model: log-slowness field -> log first-arrival times."""

    plan: TomographyPlan

    @property
    def data_dim(self) -> int:
        return self.plan.n_pairs

    def descriptor(self) -> dict:
        return {
            "kind": "eikonal2d",
            "sources_per_side": self.plan.n_sources_per_side,
            "receivers_per_side": self.plan.n_receivers_per_side,
            "receivers_top": self.plan.n_receivers_top,
        }

    def evaluate(self, field: FieldRealization) -> np.ndarray:
        grid = self.plan.grid
        s = np.exp(field.reshape())
        out = []
        for src in self.plan.source_cells():
            t = traveltime_field(s, grid.spacing, src)
            for rec in self.plan.receivers_for(src):
                val = t[rec]
                if not np.isfinite(val) or val <= 0 or val >= 1e29:
                    raise ForwardModelError(f"invalid traveltime at receiver {rec}")
                out.append(np.log(val))
        return np.array(out)
