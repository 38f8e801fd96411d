"""Multi-gap band topology on the (k, alpha) torus.

Operates on the realified band frames produced by
:func:`tkrotor.floquet.band_grid`.  With PT symmetry the frames are real, so
every Wilson loop collapses to a product of overlap signs (Zak phase in
{0, pi}), and a two-band node shows up as a plaquette around which the link
signs of both touching bands multiply to -1.  Dirac strings are the gauge
branch cuts pairing those nodes; the patch Euler class of a gap pair is the
integer obstruction to annihilating the enclosed nodes, computed as the
two-band curvature summed over the patch minus the connection integrated
around its boundary.

Gap indexing is 1-based: gap n separates band n from band n+1, and gap N
wraps from band N back to band 1 across the quasienergy branch point (the
pi-gap).  Band labels come from the circle-continuous ordering of
``band_grid``, so the wrap gap needs no special treatment: its two bands
are complexified like any other adjacent pair.

Plaquette (i, j) is the grid cell with corners (i, j) and (i+1, j+1)
(indices mod grid shape).  Strings live on the dual lattice: a dual step
from plaquette (i, j) to (i+1, j) crosses the alpha-direction lattice edge
at (i+1, j), and a step to (i, j+1) crosses the k-direction edge at
(i, j+1).
"""

import csv
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import (
    DegenerateBandsError,
    InternalConsistencyError,
    InvalidPatchError,
    RegridError,
    ResolutionError,
    UnderResolvedLoopError,
)
from .floquet import (
    DEGENERACY_TOL,
    TWO_PI,
    _bloch_family,
    _circle_dist,
    _edge_shifts,
    _wrap_window,
    parity_eigenbasis,
)

__all__ = [
    "NodeRecord",
    "ZakRecord",
    "PatchSpec",
    "StringRecord",
    "StringAssignment",
    "EulerReport",
    "NodalLineMap",
    "plaquette_fluxes",
    "detect_nodes",
    "zak_phase",
    "zak_phases",
    "zak_records",
    "assign_dirac_strings",
    "euler_form",
    "patch_euler_class",
    "patch_euler_report",
    "enclosing_patch",
    "nodal_line_map",
    "LINK_FLOOR",
    "LOOP_TRUST",
]

# Below this overlap magnitude a band degeneracy sits on the grid edge itself.
LINK_FLOOR = 1e-12
# Minimal per-step overlap magnitude for a trustworthy Wilson loop.
LOOP_TRUST = 0.1
# chi_raw must sit this close to an integer.
INTEGER_TOL = 1e-2


@dataclass(frozen=True)
class NodeRecord:
    """One band node: a two-band degeneracy localized to a plaquette.

    ``flux`` is -1 by construction (only negative-flux plaquettes are
    recorded).  ``partner`` and ``string_path`` are filled by
    :func:`assign_dirac_strings`: the id of the paired node and the
    dual-lattice plaquette polyline of the connecting string.
    """

    gap: int
    plaquette: tuple
    k: float
    alpha: float
    flux: int = -1
    partner: int = None
    string_path: tuple = ()

    def as_dict(self):
        return {"gap": self.gap, "k": self.k, "alpha": self.alpha, "flux": self.flux}


@dataclass(frozen=True)
class ZakRecord:
    """Zak phase of one band along one non-contractible grid loop."""

    band: int
    direction: str  # "k" | "alpha"
    transverse: float
    phase: float


@dataclass(frozen=True)
class PatchSpec:
    """Rectangle on the torus with the gap pair it encloses.

    Ranges are physical coordinates; a range with ``min > max`` (mod 2pi)
    wraps through zero.  ``gap`` is the 1-based gap index; the band pair is
    (gap, gap+1) with band N+1 meaning band 1.
    """

    k_min: float
    k_max: float
    alpha_min: float
    alpha_max: float
    gap: int

    def __post_init__(self):
        if self.gap < 1:
            raise ValueError(f"gap index must be >= 1, got {self.gap}")

    def plaquette_mask(self, grid):
        """Boolean (n_k, n_alpha) mask of plaquettes whose center lies inside."""
        n_k, n_alpha = grid.shape
        ck = grid.ks + np.pi / n_k
        ca = grid.alphas + np.pi / n_alpha
        return np.outer(
            _in_wrapped_range(ck, self.k_min, self.k_max),
            _in_wrapped_range(ca, self.alpha_min, self.alpha_max),
        )


@dataclass(frozen=True)
class StringRecord:
    """One Dirac string: a dual-lattice polyline of plaquette indices.

    ``endpoints`` holds the ids of the node pair it connects, or None for a
    closed string wrapping a torus cycle.
    """

    gap: int
    path: tuple
    endpoints: tuple = None

    def as_dict(self):
        return {"gap": self.gap, "string": [list(p) for p in self.path]}


@dataclass(frozen=True)
class EulerReport:
    """Patch Euler class of one gap pair, with the raw pre-rounding value."""

    chi: int
    chi_raw: float
    gap: int
    bands: tuple
    nodes_inside: int
    patch: PatchSpec = None

    def as_dict(self):
        out = {}
        if self.patch is not None:
            out["patch"] = {
                "k_min": self.patch.k_min,
                "k_max": self.patch.k_max,
                "alpha_min": self.patch.alpha_min,
                "alpha_max": self.patch.alpha_max,
            }
        out["gap_pair"] = list(self.bands)
        out["chi_raw"] = self.chi_raw
        out["chi"] = self.chi
        return out


def _in_wrapped_range(x, lo, hi):
    x = np.mod(x, TWO_PI)
    lo = np.mod(lo, TWO_PI)
    hi = np.mod(hi, TWO_PI)
    if lo <= hi:
        return (x >= lo) & (x <= hi)
    return (x >= lo) | (x <= hi)


def _link_signs(grid):
    """Per-band overlap signs on +k and +alpha edges, with sanity guards."""
    if np.any(np.all(grid.degenerate, axis=(0, 1))):
        raise DegenerateBandsError(
            "a band is degenerate with its neighbor over the whole grid; "
            "sign topology is undefined for flat degenerate pairs"
        )
    if np.any(grid.degenerate):
        i, j, n = np.argwhere(grid.degenerate)[0]
        raise RegridError(
            f"band {n + 1} is degenerate with a neighbor at grid point "
            f"({i}, {j}); rebuild with a different grid offset, e.g. "
            "offset=(0.25, 0.75)"
        )
    lx = grid.link_x()
    ly = grid.link_y()
    smallest = min(np.min(np.abs(lx)), np.min(np.abs(ly)))
    if smallest < LINK_FLOOR:
        raise RegridError(
            f"a band link magnitude fell to {smallest:.3e}: a degeneracy "
            "sits on a grid edge; rebuild with a different grid offset, "
            "e.g. offset=(0.25, 0.75)"
        )
    return np.sign(lx), np.sign(ly)


def plaquette_fluxes(grid):
    """Per-band plaquette sign fluxes, shape (n_k, n_alpha, N), values +-1.

    The flux of band n on plaquette (i, j) is the product of its four
    overlap signs around the cell; -1 flags a node of one of the two gaps
    adjacent to band n inside that cell.
    """
    sx, sy = _link_signs(grid)
    return sx * np.roll(sx, -1, axis=1) * sy * np.roll(sy, -1, axis=0)


def detect_nodes(grid, gap=None):
    """Find band nodes: plaquettes where both bands of one gap carry flux -1.

    Returns NodeRecords sorted by (gap, i, j); ``gap=None`` scans all gaps.
    The record ids used by the string assignment are positions in this list.

    Raises
    ------
    ResolutionError
        If a plaquette shows a sign defect no single gap explains (nodes of
        different gaps sharing a cell); the grid is too coarse.
    InternalConsistencyError
        If a gap has an odd node count on the torus.
    """
    flux = plaquette_fluxes(grid)
    nb = grid.n_bands
    neg = flux < 0
    per_gap = np.stack(
        [neg[..., q] & neg[..., (q + 1) % nb] for q in range(nb)], axis=-1
    )
    n_neg = neg.sum(axis=-1)
    explained = per_gap.sum(axis=-1)
    bad = (n_neg > 0) & (explained * 2 != n_neg)
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise ResolutionError(
            f"band sign defect at plaquette ({i}, {j}) does not match a "
            "single gap (flipping bands: "
            f"{[int(b) + 1 for b in np.flatnonzero(neg[i, j])]}); the grid "
            "is too coarse to separate nodes"
        )
    n_k, n_alpha = grid.shape
    records = []
    for q in range(nb):
        cells = np.argwhere(per_gap[..., q])
        if len(cells) % 2:
            raise InternalConsistencyError(
                f"gap {q + 1} has an odd node count ({len(cells)}) on the torus"
            )
        for i, j in cells:
            records.append(
                NodeRecord(
                    gap=q + 1,
                    plaquette=(int(i), int(j)),
                    k=float(grid.ks[i] + np.pi / n_k),
                    alpha=float(grid.alphas[j] + np.pi / n_alpha),
                )
            )
    if gap is not None:
        records = [r for r in records if r.gap == gap]
    return records


def zak_phase(frames):
    """Zak phase of one real frame loop: 0 or pi from the overlap sign parity.

    ``frames[j]`` is the band eigenvector at loop point j; the loop closes
    from the last point back to the first.  The phase is the argument of
    the Wilson loop, which for real frames is the product of overlap signs.

    Raises
    ------
    UnderResolvedLoopError
        If any consecutive overlap magnitude falls below 0.1.
    """
    frames = np.asarray(frames)
    ov = np.einsum("jc,jc->j", frames, np.roll(frames, -1, axis=0))
    worst = np.min(np.abs(ov))
    if worst < LOOP_TRUST:
        raise UnderResolvedLoopError(
            f"Wilson-loop overlap magnitude {worst:.3e} below trust "
            f"threshold {LOOP_TRUST}; refine the loop"
        )
    return np.pi if int(np.sum(ov < 0)) % 2 else 0.0


def _loop_phases(links):
    """Sign-parity Zak phases from loop link values (loop axis first)."""
    worst = np.min(np.abs(links))
    if worst < LOOP_TRUST:
        raise UnderResolvedLoopError(
            f"Wilson-loop overlap magnitude {worst:.3e} below trust "
            f"threshold {LOOP_TRUST}; refine the grid"
        )
    parity = np.sum(links < 0, axis=0) % 2
    return np.where(parity, np.pi, 0.0)


def zak_phases(grid, direction="k"):
    """Zak phases of every band along every loop in one grid direction.

    Returns shape (n_transverse, N): row j holds the phases of bands 1..N
    along the k loop at ``alphas[j]`` (direction "k"), or row i along the
    alpha loop at ``ks[i]`` (direction "alpha").
    """
    if direction == "k":
        return _loop_phases(grid.link_x())
    if direction == "alpha":
        return _loop_phases(np.swapaxes(grid.link_y(), 0, 1))
    raise ValueError(f"direction must be 'k' or 'alpha', got {direction!r}")


def zak_records(grid, direction="k"):
    """Zak phases as a flat ZakRecord list (band-major within each loop)."""
    phases = zak_phases(grid, direction)
    transverse = grid.alphas if direction == "k" else grid.ks
    return [
        ZakRecord(band=n + 1, direction=direction, transverse=float(t), phase=float(p))
        for t, row in zip(transverse, phases)
        for n, p in zip(range(grid.n_bands), row)
    ]


# ---------------------------------------------------------------------------
# Dirac strings
# ---------------------------------------------------------------------------


def _torus_l1(a, b, shape):
    d = 0
    for x, y, n in zip(a, b, shape):
        dd = abs(x - y) % n
        d += min(dd, n - dd)
    return d


def _pair_nodes(ids, plaquettes, shape):
    """Greedy shortest-distance pairing; ties resolved by lowest ids."""
    edges = sorted(
        (_torus_l1(plaquettes[a], plaquettes[b], shape), ids[a], ids[b], a, b)
        for a in range(len(ids))
        for b in range(a + 1, len(ids))
    )
    used = set()
    pairs = []
    for _, _, _, a, b in edges:
        if a in used or b in used:
            continue
        used.update((a, b))
        pairs.append((a, b))
    if len(used) != len(ids):
        raise InternalConsistencyError("node pairing left nodes unmatched")
    return pairs


def _signed_step(a, b, n):
    """Shortest signed ring displacement from a to b; ties step positive."""
    d = (b - a) % n
    return d if d <= n - d else d - n


def _route_l(a, b, shape):
    """L-shaped dual route from a to b: k leg first, then alpha.  Inclusive."""
    n_k, n_alpha = shape
    path = [a]
    i, j = a
    di = _signed_step(i, b[0], n_k)
    step = 1 if di > 0 else -1
    for _ in range(abs(di)):
        i = (i + step) % n_k
        path.append((i, j))
    dj = _signed_step(j, b[1], n_alpha)
    step = 1 if dj > 0 else -1
    for _ in range(abs(dj)):
        j = (j + step) % n_alpha
        path.append((i, j))
    return path


def _route_bfs(a, b, shape, allowed):
    """Shortest dual route within an allowed plaquette mask, or None."""
    n_k, n_alpha = shape
    if not (allowed[a] and allowed[b]):
        return None
    prev = {a: None}
    queue = deque([a])
    while queue:
        cur = queue.popleft()
        if cur == b:
            path = []
            while cur is not None:
                path.append(cur)
                cur = prev[cur]
            return path[::-1]
        i, j = cur
        for nxt in (
            ((i + 1) % n_k, j),
            ((i - 1) % n_k, j),
            (i, (j + 1) % n_alpha),
            (i, (j - 1) % n_alpha),
        ):
            if nxt not in prev and allowed[nxt]:
                prev[nxt] = cur
                queue.append(nxt)
    return None


def _toggle_crossings(path, cx, cy):
    """XOR the lattice edges crossed by a dual polyline into cx/cy."""
    n_k, n_alpha = cx.shape
    for (i0, j0), (i1, j1) in zip(path[:-1], path[1:]):
        if j0 == j1:  # dual k step crosses the alpha edge between the cells
            e = i1 if (i0 + 1) % n_k == i1 else i0
            cy[e, j0] ^= True
        else:
            e = j1 if (j0 + 1) % n_alpha == j1 else j0
            cx[i0, e] ^= True


def _loop_targets(cx_gaps, cy_gaps, nb):
    """Per-band target link signs implied by the per-gap string crossings."""
    tx = np.empty((cx_gaps.shape[1], cx_gaps.shape[2], nb))
    ty = np.empty_like(tx)
    for b in range(nb):
        crossed_x = cx_gaps[(b - 1) % nb] ^ cx_gaps[b]
        crossed_y = cy_gaps[(b - 1) % nb] ^ cy_gaps[b]
        tx[..., b] = np.where(crossed_x, -1.0, 1.0)
        ty[..., b] = np.where(crossed_y, -1.0, 1.0)
    return tx, ty


def _solve_cyclic_parity(m):
    """Solve x_{b-1} xor x_b = m_b over GF(2) on a ring; smallest solution.

    Returns None when infeasible (odd total parity).
    """
    nb = len(m)
    if sum(m) % 2:
        return None
    best = None
    for t in (0, 1):
        x = [t]
        for b in range(1, nb):
            x.append(m[b] ^ x[b - 1])
        if best is None or sum(x) < sum(best):
            best = x
    return best


@dataclass(frozen=True)
class StringAssignment:
    """Dirac strings plus the gauge-fixed grid they define.

    ``crossings_x[q, i, j]`` marks the k-direction lattice edge at (i, j)
    as crossed by a gap-(q+1) string, and ``crossings_y`` likewise for
    alpha-direction edges.  In the fixed gauge the link sign of a band on
    an edge is -1 exactly when an adjacent-gap string crosses it, so every
    plaquette away from nodes has an all-positive sign product and Zak
    phases reduce to string-crossing parities.
    """

    grid: object
    nodes: tuple
    strings: tuple
    crossings_x: np.ndarray
    crossings_y: np.ndarray

    def crossing_parity(self, band, direction="k", index=0):
        """Parity (0/1) of adjacent-gap string crossings along one loop."""
        nb = self.grid.n_bands
        q1, q2 = (band - 2) % nb, band - 1
        if direction == "k":
            col = self.crossings_x[q1, :, index] ^ self.crossings_x[q2, :, index]
        elif direction == "alpha":
            col = self.crossings_y[q1, index, :] ^ self.crossings_y[q2, index, :]
        else:
            raise ValueError(f"direction must be 'k' or 'alpha', got {direction!r}")
        return int(col.sum()) % 2


def _boundary_adjacent(mask):
    """Plaquettes adjacent to the mask boundary, from either side."""
    inner = mask & ~(
        np.roll(mask, 1, 0) & np.roll(mask, -1, 0)
        & np.roll(mask, 1, 1) & np.roll(mask, -1, 1)
    )
    outer = ~mask & (
        np.roll(mask, 1, 0) | np.roll(mask, -1, 0)
        | np.roll(mask, 1, 1) | np.roll(mask, -1, 1)
    )
    return inner | outer


def assign_dirac_strings(grid, nodes=None, patch=None):
    """Pair nodes, route Dirac strings, and fix the eigenvector gauge.

    Nodes of each gap are paired greedily by shortest torus distance and
    joined by dual-lattice routes; where loop sign parities cannot be
    explained by node-terminated strings alone, closed strings wrapping a
    torus cycle are added (the parity system over the gap ring is solved
    exactly).  Eigenvector signs are then integrated over a spanning tree
    so every link sign matches its string-crossing target, which makes all
    plaquettes away from nodes positive.

    With ``patch`` (a PatchSpec) the routing is patch-aware: strings of the
    patch's gap stay inside the patch (for node pairs enclosed by it) or
    entirely outside, strings of the two gaps sharing a band with the pair
    are kept off the patch altogether, and no constrained string crosses
    the patch boundary.  Impossible layouts raise InvalidPatchError.

    Returns a StringAssignment whose ``grid`` carries the fixed frames.
    """
    if nodes is None:
        nodes = detect_nodes(grid)
    nb = grid.n_bands
    shape = grid.shape
    sx, sy = _link_signs(grid)
    cx = np.zeros((nb,) + shape, dtype=bool)
    cy = np.zeros((nb,) + shape, dtype=bool)

    mask = None
    constrained = set()
    if patch is not None:
        mask = patch.plaquette_mask(grid)
        if not mask.any():
            raise InvalidPatchError("patch contains no plaquettes at this resolution")
        if mask.all():
            raise InvalidPatchError("patch covers the whole torus; boundary is empty")
        pair_q = patch.gap - 1
        adjacent = {(pair_q - 1) % nb, (pair_q + 1) % nb} - {pair_q}
        constrained = adjacent | {pair_q}
        for r in nodes:
            if r.gap - 1 in adjacent and mask[r.plaquette]:
                raise InvalidPatchError(
                    f"gap-{r.gap} node at plaquette {r.plaquette} lies inside "
                    "the patch; its string cannot avoid the patch interior"
                )
        border = _boundary_adjacent(mask)
        for r in nodes:
            if r.gap == patch.gap and border[r.plaquette]:
                raise InvalidPatchError(
                    f"gap-{r.gap} node at plaquette {r.plaquette} touches the "
                    "patch boundary; shrink or shift the patch"
                )

    strings = []
    updated = {i: r for i, r in enumerate(nodes)}
    for q in range(nb):
        ids = [i for i, r in enumerate(nodes) if r.gap == q + 1]
        if not ids:
            continue
        cells = [nodes[i].plaquette for i in ids]
        groups = [(ids, cells)]
        if mask is not None and q == patch.gap - 1:
            inside = [(i, c) for i, c in zip(ids, cells) if mask[c]]
            outside = [(i, c) for i, c in zip(ids, cells) if not mask[c]]
            if len(inside) % 2:
                raise InvalidPatchError(
                    "patch boundary separates a node pair of its own gap; "
                    "enclose whole pairs"
                )
            groups = [
                ([i for i, _ in inside], [c for _, c in inside]),
                ([i for i, _ in outside], [c for _, c in outside]),
            ]
        for g_ids, g_cells in groups:
            for a, b in _pair_nodes(g_ids, g_cells, shape):
                start, end = g_cells[a], g_cells[b]
                if mask is None or q not in constrained:
                    path = _route_l(start, end, shape)
                else:
                    region = mask if mask[start] else ~mask
                    path = _route_bfs(start, end, shape, region)
                    if path is None:
                        raise InvalidPatchError(
                            f"no string route between plaquettes {start} and "
                            f"{end} avoiding the patch boundary"
                        )
                _toggle_crossings(path, cx[q], cy[q])
                strings.append(
                    StringRecord(
                        gap=q + 1, path=tuple(path), endpoints=(g_ids[a], g_ids[b])
                    )
                )
                updated[g_ids[a]] = replace(
                    updated[g_ids[a]], partner=g_ids[b], string_path=tuple(path)
                )
                updated[g_ids[b]] = replace(
                    updated[g_ids[b]], partner=g_ids[a], string_path=tuple(path[::-1])
                )

    _add_closed_strings(grid, sx, sy, cx, cy, nodes, mask, constrained, strings)
    fixed = _fix_gauge(grid, sx, sy, cx, cy)
    return StringAssignment(
        grid=fixed,
        nodes=tuple(updated[i] for i in sorted(updated)),
        strings=tuple(strings),
        crossings_x=cx,
        crossings_y=cy,
    )


def _closed_string_line(length, node_lines, blocked):
    """Deterministic index for a closed string: far from same-gap nodes."""
    candidates = [c for c in range(length) if c not in blocked]
    if not candidates:
        return None
    if not node_lines:
        return candidates[0]
    best, best_d = None, -1
    for c in candidates:
        d = min(min((c - cell) % length, (cell - c) % length) for cell in node_lines)
        if d > best_d:
            best, best_d = c, d
    return best


def _add_closed_strings(grid, sx, sy, cx, cy, nodes, mask, constrained, strings):
    """Add torus-wrapping closed strings where loop parities demand them."""
    nb = grid.n_bands
    n_k, n_alpha = grid.shape
    tx, ty = _loop_targets(cx, cy, nb)
    for axis, sgn, tgt in ((0, sx, tx), (1, sy, ty)):
        actual = np.prod(sgn, axis=axis)
        target = np.prod(tgt, axis=axis)
        mism = actual * target < 0  # (n_transverse, nb)
        if not mism.any():
            continue
        const = np.all(mism == mism[:1], axis=0)
        if not const.all():
            b = int(np.argwhere(~const)[0, -1])
            raise InternalConsistencyError(
                f"loop sign parity of band {b + 1} varies along the "
                "transverse direction; strings do not terminate at nodes"
            )
        m = [int(v) for v in mism[0]]
        x = _solve_cyclic_parity(m)
        if x is None:
            raise InternalConsistencyError(
                "odd total loop-parity mismatch; no closed-string layout exists"
            )
        length = (n_k, n_alpha)[axis]
        for q in range(nb):
            if not x[q]:
                continue
            node_lines = [r.plaquette[axis] for r in nodes if r.gap == q + 1]
            blocked = set()
            if mask is not None and q in constrained:
                hit = mask.any(axis=1 - axis)
                blocked = set(np.flatnonzero(hit).tolist())
            pos = _closed_string_line(length, node_lines, blocked)
            if pos is None:
                raise InvalidPatchError(
                    "no room for a required closed string outside the patch"
                )
            if axis == 0:
                # k-loop parities flip via an alpha-wrapping string.
                path = [(pos, j) for j in range(n_alpha)] + [(pos, 0)]
                cx[q][pos, :] ^= True
            else:
                path = [(i, pos) for i in range(n_k)] + [(0, pos)]
                cy[q][:, pos] ^= True
            strings.append(StringRecord(gap=q + 1, path=tuple(path), endpoints=None))


def _fix_gauge(grid, sx, sy, cx, cy):
    """Flip eigenvector signs so every link sign matches its string target.

    The result is canonical: after the spanning-tree pass each band is
    globally flipped, if needed, so its largest-magnitude frame component
    at grid point (0, 0) is positive.  Input frames that differ only by
    per-point sign choices therefore map to bit-identical fixed frames.
    """
    nb = grid.n_bands
    n_k, n_alpha = grid.shape
    tx, ty = _loop_targets(cx, cy, nb)
    step_x = sx * tx  # s(i+1, j) = s(i, j) * step_x(i, j)
    step_y = sy * ty
    s = np.ones((n_k, n_alpha, nb))
    s[1:, 0] = np.cumprod(step_x[:-1, 0], axis=0)
    s[:, 1:] = s[:, :1] * np.cumprod(step_y[:, :-1], axis=1)
    ok_x = s * np.roll(s, -1, axis=0) * sx * tx > 0
    ok_y = s * np.roll(s, -1, axis=1) * sy * ty > 0
    if not (ok_x.all() and ok_y.all()):
        i, j, b = np.argwhere(~(ok_x & ok_y))[0]
        raise InternalConsistencyError(
            f"gauge fixing does not close at grid point ({i}, {j}), band "
            f"{b + 1}; string crossing bookkeeping is inconsistent"
        )
    anchor = grid.frames[0, 0]  # (components, bands)
    lead = anchor[np.argmax(np.abs(anchor), axis=0), np.arange(nb)]
    s = s * np.where(lead < 0, -1.0, 1.0)
    return replace(grid, frames=grid.frames * s[:, :, None, :])


# ---------------------------------------------------------------------------
# Patch Euler class
# ---------------------------------------------------------------------------


def euler_form(grid, gap):
    """Euler curvature of a gap pair per plaquette, with node cells filled.

    Complexifies the two real bands of the gap into phi = (psi_n +
    i psi_{n+1})/sqrt(2) and takes the argument of the plaquette link
    product, the abelian curvature of the complexified line.  A node cell
    concentrates the cone's +-pi frame rotation plus the string endpoint
    flip, which the wrapped argument cannot represent, so node cells are
    replaced by the weighted average of their neighbors (1/6 per edge
    neighbor, 1/12 per diagonal, renormalized over non-node cells).  The
    filled field is the smooth background only; patch integration
    (:func:`patch_euler_report`) restores the node-cell windings from
    string-corrected edge angles.

    The frames should come from :func:`assign_dirac_strings`.  Strings of
    the pair's own gap are invisible here (they flip both bands, so phi
    just changes sign), but strings of the two gaps sharing one band
    conjugate phi and corrupt the curvature along their length, which is
    why patch integration keeps them off the patch.

    Returns ``(eu, node_mask)``: the per-plaquette field and the mask of
    filled cells.
    """
    nb = grid.n_bands
    q = gap - 1
    f = grid.frames
    phi = (f[..., q] + 1j * f[..., (q + 1) % nb]) / np.sqrt(2.0)
    ux = np.einsum("ijc,ijc->ij", phi.conj(), np.roll(phi, -1, axis=0))
    uy = np.einsum("ijc,ijc->ij", phi.conj(), np.roll(phi, -1, axis=1))
    prod = ux * np.roll(uy, -1, axis=0) * np.conj(np.roll(ux, -1, axis=1)) * np.conj(uy)
    eu = np.angle(prod)
    sx, sy = _link_signs(grid)
    flux = sx * np.roll(sx, -1, axis=1) * sy * np.roll(sy, -1, axis=0)
    node_mask = (flux[..., q] < 0) & (flux[..., (q + 1) % nb] < 0)
    if node_mask.any():
        eu = _fill_masked(eu, node_mask)
    return eu, node_mask


def _fill_masked(eu, mask):
    """Replace masked cells by the 1/6 (edge) + 1/12 (diagonal) neighbor mean."""
    out = eu.copy()
    acc = np.zeros_like(eu)
    wsum = np.zeros_like(eu)
    good = ~mask
    for di, dj, w in (
        (1, 0, 1 / 6), (-1, 0, 1 / 6), (0, 1, 1 / 6), (0, -1, 1 / 6),
        (1, 1, 1 / 12), (1, -1, 1 / 12), (-1, 1, 1 / 12), (-1, -1, 1 / 12),
    ):
        rolled = np.roll(np.roll(eu, di, axis=0), dj, axis=1)
        rgood = np.roll(np.roll(good, di, axis=0), dj, axis=1)
        acc += np.where(rgood, rolled, 0.0) * w
        wsum += rgood * w
    if np.any(mask & (wsum == 0)):
        raise ResolutionError(
            "a node plaquette has no non-node neighbors; the grid is too coarse"
        )
    out[mask] = acc[mask] / wsum[mask]
    return out


def _patch_index_box(mask):
    """Contiguous wrap-aware index ranges of a rectangular plaquette mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    n_k, n_alpha = mask.shape

    def rng(idx, n):
        if len(idx) == n:
            return None
        gaps = np.flatnonzero(np.diff(np.concatenate([idx, [idx[0] + n]])) > 1)
        if len(gaps) == 0:
            return int(idx[0]), int(idx[-1])
        if len(gaps) != 1:
            raise InvalidPatchError("patch mask is not a contiguous rectangle")
        g = gaps[0]
        return int(idx[(g + 1) % len(idx)]), int(idx[g])

    r = rng(rows, n_k)
    c = rng(cols, n_alpha)
    if r is None or c is None:
        raise InvalidPatchError("patch spans a full torus cycle; no boundary exists")
    return r, c


def _boundary_points(row_range, col_range, shape):
    """Counterclockwise primal-lattice corner loop around a plaquette box."""
    n_k, n_alpha = shape
    i0, i1 = row_range
    j0, j1 = col_range
    ni = (i1 - i0) % n_k + 1
    nj = (j1 - j0) % n_alpha + 1
    pts = []
    for t in range(ni):
        pts.append(((i0 + t) % n_k, j0))
    for t in range(nj):
        pts.append(((i1 + 1) % n_k, (j0 + t) % n_alpha))
    for t in range(ni):
        pts.append(((i1 + 1 - t) % n_k, (j1 + 1) % n_alpha))
    for t in range(nj):
        pts.append((i0, (j1 + 1 - t) % n_alpha))
    return pts


def _node_cell_winding(ux, uy, cross_x, cross_y, i, j):
    """Frame winding of a node cell from string-corrected edge angles.

    In the fixed gauge a node cell carries the cone's +-pi frame rotation
    plus a pi jump on each edge its own string crosses.  The complex
    plaquette product cannot tell +-pi + pi = 0 from 2pi, so the cell's
    charge is read edge by edge instead: overlaps on crossed edges are
    negated (undoing the string flip), after which each edge angle is
    small and the four-angle sum resolves the full +-pi winding.
    """
    n_k, n_alpha = ux.shape

    def edge(val, crossed):
        return float(np.angle(-val if crossed else val))

    return (
        edge(ux[i, j], cross_x[i, j])
        + edge(uy[(i + 1) % n_k, j], cross_y[(i + 1) % n_k, j])
        - edge(ux[i, (j + 1) % n_alpha], cross_x[i, (j + 1) % n_alpha])
        - edge(uy[i, j], cross_y[i, j])
    )


def patch_euler_report(grid, patch, assignment=None):
    """Patch Euler class of the patch's gap pair, with diagnostics.

    Runs a patch-aware string assignment (unless one is supplied), sums the
    Euler curvature over the patch plaquettes, subtracts the connection
    integral around the patch boundary, and divides by 2pi.  Away from
    nodes the curvature of a cell is the argument of its link product; at
    node cells that argument is blind to the cone winding (the string flip
    shifts it by pi, wrapping +-pi to 0 or an invisible 2pi), so there the
    string-corrected edge-angle sum is used instead.  The connection
    integral is a Wilson loop: the argument of the product of boundary
    overlaps, taken in (-pi, pi].  A braided pair winds the boundary
    frames by 2pi, which the wrapped loop angle does not see while the
    node-cell windings do, leaving chi = +-1; edge-by-edge accumulation
    would follow the winding and cancel the interior identically.

    Raises
    ------
    InvalidPatchError
        If strings cannot be kept clear of the patch boundary, or nodes of
        a band-sharing gap sit inside the patch.
    ResolutionError
        If the result is farther than 1e-2 from an integer.
    """
    if assignment is None:
        assignment = assign_dirac_strings(grid, patch=patch)
    g = assignment.grid
    nb = g.n_bands
    q = patch.gap - 1
    mask = patch.plaquette_mask(g)
    eu, node_mask = euler_form(g, patch.gap)
    nodes_inside = int(np.sum(node_mask & mask))
    row_range, col_range = _patch_index_box(mask)
    pts = _boundary_points(row_range, col_range, g.shape)
    f = g.frames
    phi = (f[..., q] + 1j * f[..., (q + 1) % nb]) / np.sqrt(2.0)
    ux = np.einsum("ijc,ijc->ij", phi.conj(), np.roll(phi, -1, axis=0))
    uy = np.einsum("ijc,ijc->ij", phi.conj(), np.roll(phi, -1, axis=1))
    total = float(np.sum(eu[mask & ~node_mask]))
    cross_x = assignment.crossings_x[q]
    cross_y = assignment.crossings_y[q]
    for i, j in np.argwhere(mask & node_mask):
        total += _node_cell_winding(ux, uy, cross_x, cross_y, int(i), int(j))
    loop = 1.0 + 0.0j
    for a, b in zip(pts, pts[1:] + pts[:1]):
        ov = np.vdot(phi[a], phi[b])
        if abs(ov) < LOOP_TRUST:
            raise UnderResolvedLoopError(
                f"patch boundary overlap magnitude {abs(ov):.3e} below trust "
                "threshold; refine the grid or move the boundary"
            )
        loop *= ov / abs(ov)
    conn = float(np.angle(loop))
    chi_raw = (total - conn) / TWO_PI
    chi = int(np.round(chi_raw))
    residual = abs(chi_raw - chi)
    if residual > INTEGER_TOL:
        raise ResolutionError(
            f"patch Euler class {chi_raw:.4f} is {residual:.3f} away from an "
            "integer; refine the grid"
        )
    return EulerReport(
        chi=chi,
        chi_raw=chi_raw,
        gap=patch.gap,
        bands=(patch.gap, patch.gap % nb + 1),
        nodes_inside=nodes_inside,
        patch=patch,
    )


def patch_euler_class(grid, patch, assignment=None):
    """Integer patch Euler class (see :func:`patch_euler_report`)."""
    return patch_euler_report(grid, patch, assignment).chi


def enclosing_patch(grid, gap, margin=3, nodes=None):
    """Smallest wrap-aware rectangle around a gap's nodes, plus a margin.

    ``margin`` is in plaquettes.  The returned PatchSpec is not validated
    here; validation happens during the string assignment.
    """
    if nodes is None:
        nodes = detect_nodes(grid, gap=gap)
    else:
        nodes = [r for r in nodes if r.gap == gap]
    if not nodes:
        raise InvalidPatchError(f"gap {gap} has no nodes to enclose")
    n_k, n_alpha = grid.shape
    rows = sorted({r.plaquette[0] for r in nodes})
    cols = sorted({r.plaquette[1] for r in nodes})

    def box(idx, n):
        # Minimal covering arc on the ring: complement of the largest gap.
        if len(idx) == 1:
            return idx[0], idx[0]
        ext = idx + [idx[0] + n]
        g = int(np.argmax(np.diff(ext)))
        return idx[(g + 1) % len(idx)], idx[g]

    (i0, i1), (j0, j1) = box(rows, n_k), box(cols, n_alpha)
    i0, i1 = (i0 - margin) % n_k, (i1 + margin) % n_k
    j0, j1 = (j0 - margin) % n_alpha, (j1 + margin) % n_alpha
    dk = np.pi / n_k
    da = np.pi / n_alpha
    return PatchSpec(
        k_min=float(grid.ks[i0] + 0.01 * dk),
        k_max=float(grid.ks[i1] + 1.99 * dk),
        alpha_min=float(grid.alphas[j0] + 0.01 * da),
        alpha_max=float(grid.alphas[j1] + 1.99 * da),
        gap=gap,
    )


# ---------------------------------------------------------------------------
# Nodal-line map over kick-strength space
# ---------------------------------------------------------------------------


@dataclass
class NodalLineMap:
    """Per-gap minimal quasienergy gaps over a (P1, P4) strength sweep.

    ``min_gaps[a, b, q]`` is the minimum over k of gap q+1 at
    ``(p1_values[a], p4_values[b])``.  ``flags`` holds a per-gap bitmask:
    bit 0 marks a nodal line pinned at k = 0 detected next to that grid
    point, bit 1 a line at k = pi, bit 2 a generic (k, -k) line through it.
    ``crossings[(gap, kind)]`` collects interpolated line points in the
    (P1, P4) plane for kind in {"k0", "kpi"}.  ``degenerate`` marks points
    where some gap closes at every k (the free-rotor limit).
    """

    p1_values: np.ndarray
    p4_values: np.ndarray
    min_gaps: np.ndarray
    flags: np.ndarray
    degenerate: np.ndarray
    crossings: dict = field(default_factory=dict)

    @property
    def n_bands(self):
        return self.min_gaps.shape[-1]

    def line_gaps(self):
        """1-based gap indices showing at least one nodal line."""
        return [q + 1 for q in range(self.n_bands) if (self.flags[..., q] > 0).any()]

    def to_csv(self, path):
        """Columns: P1, P4, mingap_1..N, line_flags.

        ``line_flags`` packs the per-gap bitmasks little-endian, three bits
        per gap.  Floats use shortest round-trip repr so identical maps
        produce byte-identical files.
        """
        nb = self.n_bands
        header = ["P1", "P4"] + [f"mingap_{q + 1}" for q in range(nb)] + ["line_flags"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for a, p1 in enumerate(self.p1_values):
                for b, p4 in enumerate(self.p4_values):
                    packed = 0
                    for q in range(nb):
                        packed |= int(self.flags[a, b, q]) << (3 * q)
                    row = [repr(float(p1)), repr(float(p4))]
                    row += [repr(float(x)) for x in self.min_gaps[a, b]]
                    row.append(str(packed))
                    writer.writerow(row)


class _FixedArrays:
    """Protocol adapter handing premade pulse arrays to the Bloch builder."""

    def __init__(self, p1, p2, p3, p4):
        self._arrays = (p1, p2, p3, p4)

    def pulse_arrays(self, alphas):
        return self._arrays


def _relabel_k_lines(eps):
    """Circle-continuous labels along the k axis of an (..., n_k, N) stack.

    The first k point keeps its sorted order; every other point is rotated
    by the integrated cyclic edge shift.  A nonzero total shift around the
    loop means the spectrum winds around the quasienergy circle.
    """
    nb = eps.shape[-1]
    s = _edge_shifts(eps, np.roll(eps, -1, axis=-2))
    if np.any(s.sum(axis=-1) % nb):
        raise InternalConsistencyError(
            "band labels wind around the quasienergy circle along a k loop"
        )
    off = np.concatenate(
        [np.zeros_like(s[..., :1]), np.cumsum(s[..., :-1], axis=-1)], axis=-1
    )
    idx = (np.arange(nb) + off[..., None]) % nb
    return np.take_along_axis(eps, idx, axis=-1), off


def _continue_anchor_labels(anchor):
    """Cyclic label offsets continuing sorted anchor spectra over the P grid.

    ``anchor`` has shape (n1, n2, N); the offsets are integrated over the
    first column and then along rows, and every remaining grid edge is
    checked for closure.
    """
    n1, n2, nb = anchor.shape
    s_row = _edge_shifts(anchor[:-1], anchor[1:])
    s_col = _edge_shifts(anchor[:, :-1], anchor[:, 1:])
    off = np.zeros((n1, n2), dtype=int)
    off[1:, 0] = np.cumsum(s_row[:, 0])
    off[:, 1:] = off[:, :1] + np.cumsum(s_col, axis=1)
    ok = (off[1:, :] - off[:-1, :]) % nb == s_row % nb
    if not ok.all():
        a, b = np.argwhere(~ok)[0]
        raise InternalConsistencyError(
            f"band-label continuation does not close around strength-grid "
            f"cell ({a}, {b}); refine the strength grid"
        )
    return off % nb


def _spectra_over_k(N, ks, pulses_grid, multiplier, threads):
    """Window-sorted quasienergies, shape (n1, n2, n_k, N)."""
    p1, p2, p3, p4 = pulses_grid
    n1 = p1.shape[0]
    out = np.empty((n1, p1.shape[1], len(ks), N))

    def run(rows):
        proto = _FixedArrays(
            p1[rows, :, None], p2[rows, :, None], p3[rows, :, None], p4[rows, :, None]
        )
        m = _bloch_family(N, ks[None, None, :], np.zeros(1), protocol=proto,
                         multiplier=multiplier)
        eps = _wrap_window(-np.angle(np.linalg.eigvals(m)), 0.0)
        out[rows] = np.sort(eps, axis=-1)

    if threads <= 1:
        run(slice(None))
    else:
        from concurrent.futures import ThreadPoolExecutor

        chunks = np.array_split(np.arange(n1), min(threads, n1))
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, chunks))
    return out


def _parity_sector_phases(N, k, pulses_grid, multiplier):
    """Quasienergies split by unit-cell parity sector at k in {0, pi}.

    At the high-symmetry momenta the Bloch operator commutes with the
    unit-cell parity, so its spectrum splits into a symmetric sector of
    (N+1)/2 bands and an antisymmetric one of (N-1)/2.  Returns
    (eps_sym, eps_anti) wrapped to (-pi, pi].
    """
    p1, p2, p3, p4 = pulses_grid
    m = _bloch_family(N, np.full_like(p1, k), np.zeros(1),
                     protocol=_FixedArrays(p1, p2, p3, p4),
                     multiplier=multiplier)
    v, _ = parity_eigenbasis(N)
    b = np.einsum("ca,...cd,db->...ab", v, m, v)
    ns = (N + 1) // 2
    eps_sym = -np.angle(np.linalg.eigvals(b[..., :ns, :ns]))
    eps_anti = -np.angle(np.linalg.eigvals(b[..., ns:, ns:]))
    return _wrap_window(eps_sym, 0.0), _wrap_window(eps_anti, 0.0)


def _match_sectors(eps_lines, eps_sym, eps_anti):
    """Parity label (+1 sym / -1 anti) of each labeled band at one k point."""
    both = np.concatenate([eps_sym, eps_anti], axis=-1)
    labels = np.concatenate(
        [np.ones(eps_sym.shape[-1]), -np.ones(eps_anti.shape[-1])]
    )
    d = _circle_dist(eps_lines[..., None], both[..., None, :])
    return labels[np.argmin(d, axis=-1)]


def _swap_gap(sa, sb, nb):
    """0-based gap whose bands traded parity sectors between sa and sb."""
    d = np.flatnonzero(sa != sb)
    if len(d) != 2:
        return None
    a, b = int(d[0]), int(d[1])
    if b - a == 1:
        return a
    if a == 0 and b == nb - 1:
        return b
    return None


def _sector_line_scan(sector, valid, gaps_hs, p1_values, p4_values, flags, bit,
                      crossings, kind):
    """Flag strength-grid edges where a gap's bands trade parity sectors.

    ``gaps_hs[a, b, q]`` is the gap value at the high-symmetry momentum,
    used to interpolate the line position along the edge.
    """
    nb = sector.shape[-1]
    n1, n2 = sector.shape[:2]
    changed = np.zeros((n1, n2), dtype=bool)
    changed[:-1, :] |= (sector[1:] != sector[:-1]).any(axis=-1)
    changed[:, :-1] |= (sector[:, 1:] != sector[:, :-1]).any(axis=-1)
    for a, b in np.argwhere(changed):
        for da, db in ((1, 0), (0, 1)):
            a2, b2 = a + da, b + db
            if a2 >= n1 or b2 >= n2:
                continue
            if not (valid[a, b] and valid[a2, b2]):
                continue
            q = _swap_gap(sector[a, b], sector[a2, b2], nb)
            if q is None:
                continue
            flags[a, b, q] |= bit
            flags[a2, b2, q] |= bit
            g0 = gaps_hs[a, b, q]
            g1 = gaps_hs[a2, b2, q]
            t = g0 / (g0 + g1) if g0 + g1 > 0 else 0.5
            p1 = p1_values[a] + t * (p1_values[a2] - p1_values[a])
            p4 = p4_values[b] + t * (p4_values[b2] - p4_values[b])
            crossings.setdefault((q + 1, kind), []).append((float(p1), float(p4)))


def _refine_generic_minimum(N, ks, i_k, eps_point, q, pulses, multiplier, tol):
    """Refine one gap minimum over k by bounded minimization; True if a node."""
    n_k = len(ks)
    ref = eps_point[i_k]
    p = tuple(np.asarray(x, dtype=float) for x in pulses)

    def gap_at(k):
        m = _bloch_family(N, np.asarray(k), 0.0,
                         protocol=_FixedArrays(*p), multiplier=multiplier)
        e = np.sort(_wrap_window(-np.angle(np.linalg.eigvals(m)), 0.0))
        s = int(_edge_shifts(ref, e))
        e = np.take(e, (np.arange(N) + s) % N)
        return float(_circle_dist(e[q], e[(q + 1) % N]))

    lo = ks[(i_k - 1) % n_k]
    hi = ks[(i_k + 1) % n_k]
    if hi < lo:
        hi += TWO_PI
    res = minimize_scalar(gap_at, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-10})
    return res.fun < tol


def nodal_line_map(p1_values, p4_values, N=3, n_k=64, coarse_threshold=0.05,
                   refine_tol=1e-3, multiplier=1, threads=1):
    """Map nodal lines of every gap over the two-strength kick plane.

    The protocol family fixes the pure-cos strength of the outer kick and
    the cos^2 strength of the middle kick to zero and sweeps the outer
    cos^2 strength P1 against the middle cos strength P4.  At each point
    the Bloch quasienergies are evaluated on a k loop containing exactly
    k = 0 and k = pi, labels are continued along k and across the strength
    grid (anchored at the smallest-strength corner, which connects to the
    free rotor), and each gap's minimum over k is recorded.

    Lines are detected per gap in three kinds.  At the high-symmetry
    momenta the Bloch operator block-diagonalizes into parity sectors and
    two bands can only cross there by belonging to different sectors, so a
    line pinned at k = 0 or k = pi is flagged on every strength-grid edge
    across which the gap's two bands trade sectors, with the crossing
    position interpolated from the gap values.  Generic lines close at a
    +-k pair instead: any coarse minimum below ``coarse_threshold`` away
    from the pinned momenta is refined by bounded minimization over its k
    bracket and declared a line when the refined gap drops below
    ``refine_tol``.

    Strength points where a gap closes at every k (the free-rotor limit)
    are flagged in ``degenerate`` and excluded from sector tracking.
    ``threads`` caps worker threads for the spectral sweep; the output is
    identical for any thread count.
    """
    p1_values = np.asarray(p1_values, dtype=float)
    p4_values = np.asarray(p4_values, dtype=float)
    if n_k % 2 or n_k < 4:
        raise ValueError("n_k must be even and >= 4 so the loop hits k = 0 and pi")
    nb = N
    n1, n2 = len(p1_values), len(p4_values)
    ks = TWO_PI * np.arange(n_k) / n_k
    pg1 = np.broadcast_to(p1_values[:, None], (n1, n2))
    pg4 = np.broadcast_to(p4_values[None, :], (n1, n2))
    zeros = np.zeros((n1, n2))
    pulses_grid = (zeros, pg1, pg4, zeros)

    eps = _spectra_over_k(N, ks, pulses_grid, multiplier, threads)
    eps, _ = _relabel_k_lines(eps)
    off = _continue_anchor_labels(eps[..., 0, :])
    idx = (np.arange(nb) + off[..., None, None]) % nb
    eps = np.take_along_axis(eps, np.broadcast_to(idx, eps.shape), axis=-1)

    gaps_k = _circle_dist(eps, np.roll(eps, -1, axis=-1))
    min_gaps = gaps_k.min(axis=2)
    argmin_k = gaps_k.argmin(axis=2)
    degenerate = gaps_k.max(axis=2) < DEGENERACY_TOL

    flags = np.zeros((n1, n2, nb), dtype=int)
    crossings = {}
    i_pi = n_k // 2
    valid = ~degenerate.any(axis=-1)
    for kind, i_k, bit in (("k0", 0, 1), ("kpi", i_pi, 2)):
        sym, anti = _parity_sector_phases(N, ks[i_k], pulses_grid, multiplier)
        sector = _match_sectors(eps[..., i_k, :], sym, anti)
        ok = valid & (sector.sum(axis=-1) == 1.0)
        _sector_line_scan(sector, ok, gaps_k[:, :, i_k, :], p1_values,
                          p4_values, flags, bit, crossings, kind)

    cand = np.argwhere(
        (min_gaps < coarse_threshold)
        & ~degenerate
        & (argmin_k != 0)
        & (argmin_k != i_pi)
    )
    for a, b, q in cand:
        point_pulses = (0.0, pg1[a, b], pg4[a, b], 0.0)
        if _refine_generic_minimum(N, ks, int(argmin_k[a, b, q]), eps[a, b], q,
                                   point_pulses, multiplier, refine_tol):
            flags[a, b, q] |= 4

    return NodalLineMap(
        p1_values=p1_values,
        p4_values=p4_values,
        min_gaps=min_gaps,
        flags=flags,
        degenerate=degenerate,
        crossings={key: np.asarray(v) for key, v in crossings.items()},
    )
