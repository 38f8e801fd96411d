"""Floquet operators of the triple-kicked rotor at quantum resonance.

One driving period applies two identical outer kicks around a middle kick,
with free rotation between consecutive kicks.  At an N-th order quantum
resonance the free rotation reduces to the N-periodic diagonal phase
``exp(-i*pi*l(l+1)/N)``, so the one-period operator on the angular momentum
lattice is the palindrome

    U = exp(i V1) . D . exp(i V2) . D . exp(i V1)

with ``D`` the free-rotation diagonal and ``V1``, ``V2`` the kick potentials
built by :mod:`tkrotor.angular`.  The palindromic ordering makes ``U``
complex symmetric in real space (time reversal with unit operator), and
together with the antidiagonal parity of the bulk lattice it admits a basis
in which the stroboscopic Hamiltonian ``H = i log U`` is real.  All band
topology downstream works in that realified basis.

Quasienergies follow the convention ``H = i log U``: an operator eigenvalue
``exp(i*phi)`` has quasienergy ``-phi``, wrapped into the branch window
``(branch_center - pi, branch_center + pi]``.
"""

import csv
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.linalg import schur

from .angular import LatticeSpec, PulseVector, bloch_potential, real_space_potential
from .errors import (
    BranchCutError,
    ContinuityError,
    GaugeError,
    NumericalError,
)

__all__ = [
    "free_phase",
    "BlochOperator",
    "BandFrame",
    "BandGrid",
    "build_u_tkr_bloch",
    "build_u_tkr_real",
    "effective_hamiltonian",
    "parity_matrix",
    "parity_eigenbasis",
    "realification_transform",
    "realify",
    "gap_function",
    "all_gaps",
    "band_grid",
    "bloch_reduce",
    "DEGENERACY_TOL",
]

TWO_PI = 2.0 * np.pi

# Quasienergies closer than this are flagged degenerate (gauge-undefined frame).
DEGENERACY_TOL = 1e-9


def free_phase(l, N, multiplier=1):
    """Free-rotation phase ``exp(-i*pi*multiplier*l(l+1)/N)`` per kick period.

    The phase is N-periodic in ``l`` (for odd N), which is what folds the
    semi-infinite lattice into N-site unit cells.  ``multiplier`` selects the
    normalization of the resonance time step: 1 is the default convention
    used throughout, 2 doubles the free phase per period (available as a
    sensitivity switch, see the CLI flag of the same name).

    ``l`` may be an integer or an integer array.
    """
    if N < 3 or N % 2 == 0:
        raise ValueError(f"N must be odd and >= 3, got {N}")
    if multiplier not in (1, 2):
        raise ValueError(f"free-phase multiplier must be 1 or 2, got {multiplier}")
    l = np.asarray(l)
    if np.any(l < 0):
        raise ValueError("angular momenta must be non-negative")
    # Reduce the exponent in integer arithmetic; exp(-i*pi*x/N) has period
    # x mod 2N, and exact reduction keeps high-symmetry phases exact.
    x = (multiplier * (l * (l + 1))) % (2 * N)
    out = np.exp(-1j * np.pi * x / N)
    return out[()] if out.ndim == 0 else out


def _half_phase(N, multiplier):
    """Diagonal of the half-period free rotation on one unit cell."""
    i = np.arange(N)
    return np.exp(-0.5j * np.pi * multiplier * (i * (i + 1) % (2 * N)) / N)


def _expm_i(h):
    """Unitary ``exp(i h)`` for Hermitian ``h``, batched over leading axes.

    Goes through the eigendecomposition so the result is unitary to machine
    precision regardless of the norm of ``h``.
    """
    w, q = np.linalg.eigh(h)
    return (q * np.exp(1j * w)[..., None, :]) @ np.conjugate(np.swapaxes(q, -1, -2))


@dataclass(frozen=True)
class BlochOperator:
    """One-period Bloch operator at a point (k, alpha) of the synthetic torus."""

    k: float
    alpha: float
    matrix: np.ndarray
    gauge: str = "symmetric"  # "symmetric" | "asymmetric"

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        object.__setattr__(self, "matrix", m)
        err = np.max(np.abs(m.conj().T @ m - np.eye(m.shape[0])))
        if err > 1e-12:
            raise NumericalError(f"Bloch operator lost unitarity: |U+U - 1| = {err:.3e}")

    @property
    def n_bands(self):
        return self.matrix.shape[0]


@dataclass(frozen=True)
class BandFrame:
    """Sorted quasienergies and a real orthonormal eigenframe at one point.

    ``frame[:, n]`` is the eigenvector of band ``n`` in the realified basis.
    ``degenerate[n]`` marks bands whose quasienergy sits within
    ``DEGENERACY_TOL`` of a neighbor; their frame columns span the right
    subspace but carry no meaningful individual gauge.
    """

    quasienergies: np.ndarray
    frame: np.ndarray
    residual_imag: float
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.degenerate is None:
            object.__setattr__(
                self, "degenerate", np.zeros(len(self.quasienergies), dtype=bool)
            )


def _resolve_pulses(pulses, protocol, alpha):
    if pulses is not None:
        return pulses
    if protocol is None:
        raise ValueError("either pulses or a protocol must be given")
    return protocol.pulses(alpha)


def _triple_product(e1, e2, d):
    """Batched ``e1 . D . e2 . D . e1`` with diagonal ``d``."""
    x = d[..., :, None] * e1
    x = e2 @ x
    x = d[..., :, None] * x
    return e1 @ x


def build_u_tkr_bloch(N, k, alpha=0.0, pulses=None, protocol=None,
                      gauge="symmetric", multiplier=1):
    """Bloch form of the triple-kick Floquet operator at one (k, alpha).

    Builds ``M(k) = exp(i V1(k)) D exp(i V2(k)) D exp(i V1(k))`` with
    ``V1 = bloch_potential(N, k, P1, P2)``, ``V2 = bloch_potential(N, k, P3,
    P4)`` and ``D = diag(free_phase(i, N))`` over one unit cell.  The middle
    kick is flanked symmetrically, so this is the time-reversal symmetric
    gauge; ``gauge="asymmetric"`` conjugates by the half-period phases, which
    shifts the Floquet origin into the free segment and leaves the spectrum
    unchanged.

    Parameters
    ----------
    N : int
        Resonance order (odd, >= 3).
    k : float
        Quasi-momentum in [0, 2pi).
    alpha : float
        Synthetic (protocol) angle; used to derive pulses when a protocol is
        given, and stored for bookkeeping.
    pulses : PulseVector, optional
        Explicit kick strengths; overrides the protocol.
    protocol : object, optional
        Anything with a ``pulses(alpha) -> PulseVector`` method.
    multiplier : {1, 2}
        Free-phase normalization switch.
    """
    if gauge not in ("symmetric", "asymmetric"):
        raise ValueError(f"unknown gauge {gauge!r}")
    p = _resolve_pulses(pulses, protocol, alpha)
    v1 = bloch_potential(N, k, p.p1, p.p2)
    v2 = bloch_potential(N, k, p.p3, p.p4)
    d = free_phase(np.arange(N), N, multiplier)
    m = _triple_product(_expm_i(v1), _expm_i(v2), d)
    if gauge == "asymmetric":
        f = _half_phase(N, multiplier)
        m = f[:, None] * m * f.conj()[None, :]
    return BlochOperator(k=float(k), alpha=float(alpha), matrix=m, gauge=gauge)


def _bloch_family(N, ks, alphas, pulses=None, protocol=None, multiplier=1):
    """Batched Bloch operators over broadcastable (ks, alphas) arrays.

    Returns the raw matrix stack of shape ``broadcast + (N, N)``; used by the
    grid builders where constructing one BlochOperator per point would
    dominate the runtime.
    """
    ks = np.asarray(ks, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    if pulses is not None:
        shape = np.broadcast_shapes(ks.shape, alphas.shape)
        p1 = np.full(shape, pulses.p1)
        p2 = np.full(shape, pulses.p2)
        p3 = np.full(shape, pulses.p3)
        p4 = np.full(shape, pulses.p4)
    else:
        if protocol is None:
            raise ValueError("either pulses or a protocol must be given")
        p1, p2, p3, p4 = protocol.pulse_arrays(alphas)
    v1 = bloch_potential(N, ks, p1, p2)
    v2 = bloch_potential(N, ks, p3, p4)
    d = free_phase(np.arange(N), N, multiplier)
    return _triple_product(_expm_i(v1), _expm_i(v2), d)


def build_u_tkr_real(spec, pulses, mode="exact", multiplier=1, include_shift=True):
    """Triple-kick Floquet operator on the truncated lattice (open boundary).

    Same palindromic composition as the Bloch form, with the kick potentials
    taken from :func:`tkrotor.angular.real_space_potential` in the requested
    mode.  With ``P = 0`` the result is the pure double free rotation,
    ``diag(exp(-2i*pi*l(l+1)/N))``.

    Returns the dense ``(l_max+1) x (l_max+1)`` unitary.
    """
    v1 = real_space_potential(spec, pulses.p1, pulses.p2, mode, include_shift).entries
    v2 = real_space_potential(spec, pulses.p3, pulses.p4, mode, include_shift).entries
    d = free_phase(spec.ls, spec.N, multiplier)
    u = _triple_product(_expm_i(v1), _expm_i(v2), d)
    err = np.max(np.abs(u.conj().T @ u - np.eye(spec.n_sites)))
    if err > 1e-10:
        raise NumericalError(f"real-space operator lost unitarity: {err:.3e}")
    return u


def _wrap_window(x, center):
    """Map phases into the half-open window (center - pi, center + pi]."""
    d = np.mod(x - center, TWO_PI)
    return center + np.where(d > np.pi, d - TWO_PI, d)


def _unitary_log_point(m, branch_center):
    """Quasienergies and orthonormal eigenvectors of one unitary matrix.

    Uses the complex Schur form: for a (numerically) normal matrix the Schur
    factor is diagonal and the basis is orthonormal even at near-degenerate
    eigenvalues, which plain ``eig`` does not guarantee.
    """
    t, z = schur(m, output="complex")
    n = m.shape[0]
    off = np.max(np.abs(t - np.diag(np.diagonal(t))))
    if off > 1e-8:
        raise NumericalError(
            f"Schur form not diagonal (|off| = {off:.3e}); input is not normal"
        )
    x = -np.angle(np.diagonal(t))
    d = np.mod(x - branch_center, TWO_PI)
    if np.min(np.abs(d - np.pi)) < 1e-9:
        raise BranchCutError(
            "quasienergy within 1e-9 of the branch cut; shift branch_center"
        )
    eps = branch_center + np.where(d > np.pi, d - TWO_PI, d)
    return eps, z


def effective_hamiltonian(u, branch_center=0.0):
    """Stroboscopic Hamiltonian ``H = i log U`` of a unitary.

    Eigenphases are wrapped into ``(branch_center - pi, branch_center + pi]``.
    Accepts a BlochOperator or a plain unitary ndarray.

    Raises
    ------
    BranchCutError
        If an eigenphase falls within 1e-9 of the branch cut; the caller
        should recenter (typically at the midpoint of the widest gap).
    """
    m = u.matrix if isinstance(u, BlochOperator) else np.asarray(u, dtype=complex)
    eps, z = _unitary_log_point(m, branch_center)
    h = (z * eps) @ z.conj().T
    return 0.5 * (h + h.conj().T)


def parity_matrix(N):
    """Antidiagonal exchange matrix, the unit-cell parity operator."""
    return np.fliplr(np.eye(N))


@lru_cache(maxsize=None)
def parity_eigenbasis(N):
    """Deterministic eigenbasis of the antidiagonal parity.

    Returns ``(V, lam)`` with real orthogonal ``V`` whose columns are the
    symmetric combinations (eigenvalue +1, listed first, middle site
    included) followed by the antisymmetric ones (eigenvalue -1).
    For N = 3 the eigenvalues are {+1, +1, -1}.
    """
    if N < 1 or N % 2 == 0:
        raise ValueError(f"N must be odd, got {N}")
    half = (N - 1) // 2
    v = np.zeros((N, N))
    lam = np.empty(N)
    s = 1.0 / np.sqrt(2.0)
    col = 0
    for i in range(half):
        v[i, col] = v[N - 1 - i, col] = s
        lam[col] = 1.0
        col += 1
    v[half, col] = 1.0
    lam[col] = 1.0
    col += 1
    for i in range(half):
        v[i, col] = s
        v[N - 1 - i, col] = -s
        lam[col] = -1.0
        col += 1
    v.setflags(write=False)
    lam.setflags(write=False)
    return v, lam


@lru_cache(maxsize=None)
def realification_transform(N):
    """Unitary ``W`` with ``W P W^T = 1``: maps PT-symmetric H to a real matrix.

    Built as ``diag(sqrt(lam)) V^T`` from the parity eigendecomposition
    ``P V = V diag(lam)``; the square roots are 1 on the +1 sector and i on
    the -1 sector.
    """
    v, lam = parity_eigenbasis(N)
    sqrt_lam = np.where(lam > 0, 1.0 + 0.0j, 1.0j)
    w = sqrt_lam[:, None] * v.T
    w.setflags(write=False)
    return w


def _sign_fix(frames):
    """Flip eigenvector signs so the largest-magnitude component is positive.

    Ties resolve to the lowest component index (argmax takes the first
    maximum).  Operates in place on ``(..., comp, band)`` stacks.
    """
    mags = np.abs(frames)
    am = np.argmax(mags, axis=-2)
    vals = np.take_along_axis(frames, am[..., None, :], axis=-2)[..., 0, :]
    frames *= np.where(vals < 0, -1.0, 1.0)[..., None, :]
    return frames


def _degenerate_mask(energies, tol=DEGENERACY_TOL):
    """Mark bands whose sorted quasienergy is within tol of a neighbor."""
    d = np.diff(energies, axis=-1) < tol
    mask = np.zeros(energies.shape, dtype=bool)
    mask[..., :-1] |= d
    mask[..., 1:] |= d
    return mask


def realify(u_or_h, N=None, branch_center=0.0, tol=1e-6):
    """Realified band frame of a PT-symmetric Bloch operator or Hamiltonian.

    Transforms ``H`` (computed from the operator if needed) with the fixed
    ``W`` of :func:`realification_transform`; the result must be real up to
    ``tol`` or the input broke the symmetric gauge.  Eigenvectors of the real
    part form the returned frame, with the deterministic sign convention of
    ``_sign_fix``.

    Returns
    -------
    (BandFrame, W)

    Raises
    ------
    GaugeError
        If the residual imaginary norm exceeds ``tol``.
    """
    if isinstance(u_or_h, BlochOperator):
        a = u_or_h.matrix
    else:
        a = np.asarray(u_or_h, dtype=complex)
    if N is None:
        N = a.shape[0]
    if np.max(np.abs(a - a.conj().T)) < 1e-10:
        h = a
    else:
        h = effective_hamiltonian(a, branch_center)
    w_t = realification_transform(N)
    ht = w_t @ h @ w_t.conj().T
    residual = float(np.max(np.abs(ht.imag)))
    if residual > tol:
        raise GaugeError(
            f"realified Hamiltonian has imaginary residual {residual:.3e}; "
            "input is not in the symmetric gauge or PT is broken"
        )
    energies, frame = np.linalg.eigh(ht.real)
    frame = _sign_fix(frame)
    return (
        BandFrame(
            quasienergies=energies,
            frame=frame,
            residual_imag=residual,
            degenerate=_degenerate_mask(energies),
        ),
        w_t,
    )


def gap_function(quasienergies, n):
    """Gap ``delta_n = |eps_n - eps_(n+1)|`` with the 2pi-remainder norm.

    ``n`` is the 1-based gap index; gap N pairs band N with band 1 across
    the branch point (the pi-gap).  The remainder norm is the minimal
    distance on the quasienergy circle, so the result lies in [0, pi].
    """
    eps = np.asarray(quasienergies, dtype=float)
    nb = eps.shape[-1]
    if not 1 <= n <= nb:
        raise ValueError(f"gap index must be in 1..{nb}, got {n}")
    a = eps[..., n - 1]
    b = eps[..., n % nb]
    d = np.mod(np.abs(a - b), TWO_PI)
    return np.minimum(d, TWO_PI - d)


def all_gaps(quasienergies):
    """All N gap values; ``out[..., n-1]`` is gap n (gap N wraps to band 1)."""
    eps = np.asarray(quasienergies, dtype=float)
    d = np.mod(np.abs(eps - np.roll(eps, -1, axis=-1)), TWO_PI)
    return np.minimum(d, TWO_PI - d)


def _circle_dist(a, b):
    d = np.mod(np.abs(a - b), TWO_PI)
    return np.minimum(d, TWO_PI - d)


def _edge_shifts(e_a, e_b):
    """Cyclic slot shift continuing sorted bands from point a to neighbor b.

    Window-sorted quasienergies keep their cyclic order on the circle, so
    the only possible relabelings between neighboring points are cyclic
    shifts: a band crossing the branch cut rotates every slot index by one.
    The shift is picked by minimal total circle distance.
    """
    nb = e_a.shape[-1]
    totals = np.stack(
        [
            _circle_dist(e_a, np.take(e_b, (np.arange(nb) + s) % nb, axis=-1)).sum(axis=-1)
            for s in range(nb)
        ],
        axis=-1,
    )
    return np.argmin(totals, axis=-1)


def _cyclic_relabel(energies, frames, degenerate):
    """Permute sorted bands per point so band fields are circle-continuous.

    Returns permuted (energies, frames, degenerate) plus the integer offset
    field: continuous band ``c`` at a point is sorted slot ``(c + offset) %
    N`` there.  Offsets integrate edge shifts over a spanning tree and must
    close around every plaquette and both torus cycles; failure means the
    spectrum winds around the quasienergy circle and no global band labels
    exist.
    """
    n_k, n_alpha, nb = energies.shape
    s_x = _edge_shifts(energies, np.roll(energies, -1, axis=0))
    s_y = _edge_shifts(energies, np.roll(energies, -1, axis=1))
    off = np.zeros((n_k, n_alpha), dtype=int)
    off[:, 0] = np.concatenate([[0], np.cumsum(s_x[:-1, 0])])
    off = off[:, :1] + np.concatenate(
        [np.zeros((n_k, 1), dtype=int), np.cumsum(s_y[:, :-1], axis=1)], axis=1
    )
    off %= nb
    ok_x = (np.roll(off, -1, axis=0) - off) % nb == s_x % nb
    ok_y = (np.roll(off, -1, axis=1) - off) % nb == s_y % nb
    if not (ok_x.all() and ok_y.all()):
        bad = np.argwhere(~ok_x | ~ok_y)[0]
        raise ContinuityError(
            "band labels do not close around the grid near point "
            f"({bad[0]}, {bad[1]}); the quasienergy spectrum winds around "
            "the circle, or the grid is too coarse to track it"
        )
    idx = (np.arange(nb)[None, None, :] + off[..., None]) % nb
    energies = np.take_along_axis(energies, idx, axis=-1)
    frames = np.take_along_axis(frames, idx[:, :, None, :], axis=-1)
    degenerate = np.take_along_axis(degenerate, idx, axis=-1)
    return energies, frames, degenerate, off


@dataclass
class BandGrid:
    """Band frames on a closed (k, alpha) grid.

    ``energies[i, j, n]`` and ``frames[i, j, :, n]`` describe band ``n`` at
    ``(ks[i], alphas[j])``; bands are ordered by quasienergy in the branch
    window, which is a globally consistent labeling as long as no band
    wanders across the branch cut (verified at build time unless disabled).
    The grid covers the torus: the neighbor of the last row/column wraps to
    the first.
    """

    ks: np.ndarray
    alphas: np.ndarray
    energies: np.ndarray
    frames: np.ndarray
    residual_imag: np.ndarray
    degenerate: np.ndarray
    branch_center: float = 0.0
    multiplier: int = 1
    # Slot offsets from the continuous relabeling; band c at point (i, j)
    # occupies window-sort position (c + offsets[i, j]) % N there.
    offsets: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.offsets is None:
            self.offsets = np.zeros(self.energies.shape[:2], dtype=int)

    @property
    def n_bands(self):
        return self.energies.shape[-1]

    @property
    def shape(self):
        return self.energies.shape[:2]

    def deltas(self):
        """Gap field, shape (n_k, n_alpha, N); last gap is the pi-gap."""
        return all_gaps(self.energies)

    def link_x(self):
        """Per-band overlaps with the +k neighbor (periodic), real valued."""
        return np.einsum("ijcn,ijcn->ijn", self.frames, np.roll(self.frames, -1, axis=0))

    def link_y(self):
        """Per-band overlaps with the +alpha neighbor (periodic)."""
        return np.einsum("ijcn,ijcn->ijn", self.frames, np.roll(self.frames, -1, axis=1))

    def rotate(self, shift):
        """Cyclically rotate band labels: new band 1 is old band 1 + shift.

        Labels of a circle-continuous band structure are only defined up to
        a global cyclic rotation; this picks a different representative.
        Gap indices rotate along with the bands (new gap n is old gap
        n + shift), and the wrap gap moves accordingly.
        """
        nb = self.n_bands
        s = shift % nb
        if s == 0:
            return self
        idx = (np.arange(nb) + s) % nb
        return replace(
            self,
            energies=self.energies[..., idx],
            frames=self.frames[..., idx],
            degenerate=self.degenerate[..., idx],
            offsets=(self.offsets + s) % nb,
        )

    def rebase(self, i=0, j=0):
        """Rotate band labels so band 1 is lowest in the window at (i, j).

        Continuous labels are only defined up to a global cyclic shift;
        anchoring the shift at a reference grid point pins the gap indices
        to a physical feature there.  Returns a new grid (self if already
        anchored); the offset field is shifted accordingly.
        """
        return self.rotate(-int(self.offsets[i, j]))

    def verify_continuity(self, node_mask=None, halo=1, gap_floor=0.12,
                          ambiguity_tol=1e-3):
        """Check that quasienergy ordering continues bands consistently.

        Recomputes neighbor overlap matrices and verifies that the maximal
        overlap of each band is with itself.  Three kinds of edges are
        exempt, because the frame legitimately rotates fast there: edges
        touching degenerate-flagged points, edges within ``halo`` plaquettes
        of ``node_mask`` (boolean (n_k, n_alpha) plaquette array), and bands
        flanking a gap below ``gap_floor`` at either edge endpoint (an
        avoided crossing spins the frame without ever closing the gap; set
        ``gap_floor=0`` to disable).  Elsewhere an ambiguous or non-diagonal
        match raises ContinuityError.
        """
        near = None
        if node_mask is not None:
            near = np.asarray(node_mask, dtype=bool)
            for _ in range(halo):
                grown = near.copy()
                for axis in (0, 1):
                    grown |= np.roll(near, 1, axis=axis) | np.roll(near, -1, axis=axis)
                near = grown
        deltas = self.deltas()
        nb = self.n_bands
        small = np.zeros(deltas.shape, dtype=bool)
        for n in range(nb):
            small[..., n] = (deltas[..., n] < gap_floor) | (
                deltas[..., (n - 1) % nb] < gap_floor
            )
        for axis in (0, 1):
            rolled = np.roll(self.frames, -1, axis=axis)
            ov = np.abs(np.einsum("ijcn,ijcm->ijnm", self.frames, rolled))
            best = np.argmax(ov, axis=-1)
            diag_ok = best == np.arange(nb)
            srt = np.sort(ov, axis=-1)
            ambiguous = (srt[..., -1] - srt[..., -2]) < ambiguity_tol
            bad = ~diag_ok | ambiguous
            exempt = (
                self.degenerate
                | np.roll(self.degenerate, -1, axis=axis)
                | small
                | np.roll(small, -1, axis=axis)
            )
            if near is not None:
                # An x-edge at (i, j) bounds plaquettes (i, j) and (i, j-1);
                # a y-edge bounds (i, j) and (i-1, j).
                other = 1 - axis
                exempt = exempt | (near | np.roll(near, 1, axis=other))[..., None]
            bad &= ~exempt
            if np.any(bad):
                i, j, n = np.argwhere(bad)[0]
                raise ContinuityError(
                    f"ambiguous band continuation at grid point ({i}, {j}), "
                    f"band {n + 1}, direction {'k' if axis == 0 else 'alpha'}"
                )

    def to_csv(self, path):
        """Write the band grid in the columnar schema.

        Columns: k, alpha, eps_1..N, delta_1..N, residual_imag; one row per
        grid point, k-major order.  Floats use shortest round-trip repr, so
        identical grids produce byte-identical files.
        """
        nb = self.n_bands
        deltas = self.deltas()
        header = (
            ["k", "alpha"]
            + [f"eps_{n}" for n in range(1, nb + 1)]
            + [f"delta_{n}" for n in range(1, nb + 1)]
            + ["residual_imag"]
        )
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for i, k in enumerate(self.ks):
                for j, a in enumerate(self.alphas):
                    row = [k, a, *self.energies[i, j], *deltas[i, j],
                           self.residual_imag[i, j]]
                    writer.writerow([repr(float(x)) for x in row])


def band_grid(N, n_k, n_alpha, pulses=None, protocol=None, branch_center=0.0,
              multiplier=1, offset=(0.5, 0.5), relabel=True, jump_tol=1.0):
    """Evaluate realified band frames on an (n_k x n_alpha) torus grid.

    Grid points are ``k_i = 2pi (i + offset_k)/n_k`` and likewise for alpha;
    the default half-integer offset keeps high-symmetry degeneracies off grid
    points, which node detection requires.  Pulses are either fixed or
    derived per column from ``protocol.pulse_arrays``.

    Band labels: quasienergies are first sorted inside the branch window at
    every point.  Along a protocol the spectrum may sweep through the branch
    cut, which cyclically rotates the sorted slots; with ``relabel`` (the
    default) the builder tracks those slot rotations over the grid and
    permutes bands back so every band field is continuous on the quasienergy
    circle.  Band 1 is then the lowest band in the window at the grid
    origin.  Each band's largest remaining step must stay below ``jump_tol``
    (circle distance) or the grid is declared too coarse.

    Raises
    ------
    ContinuityError
        If the slot tracking does not close around plaquettes or torus
        cycles (quasienergy winding), or a relabeled band still jumps by
        more than ``jump_tol`` between neighbors.
    GaugeError
        If realification leaves an imaginary residual above 1e-6.
    """
    if n_k < 3 or n_alpha < 3:
        raise ValueError("grid must be at least 3 points in each direction")
    ks = TWO_PI * (np.arange(n_k) + offset[0]) / n_k
    alphas = TWO_PI * (np.arange(n_alpha) + offset[1]) / n_alpha
    kk = ks[:, None]
    aa = alphas[None, :]
    m = _bloch_family(N, kk, aa, pulses=pulses, protocol=protocol,
                      multiplier=multiplier)
    flat = m.reshape(-1, N, N)
    hs = np.empty_like(flat)
    for idx in range(flat.shape[0]):
        eps, z = _unitary_log_point(flat[idx], branch_center)
        hs[idx] = (z * eps) @ z.conj().T
    w_t = realification_transform(N)
    ht = np.einsum("ab,pbc,dc->pad", w_t, hs, w_t.conj())
    residual = np.max(np.abs(ht.imag), axis=(1, 2))
    worst = float(residual.max())
    if worst > 1e-6:
        raise GaugeError(f"realification residual {worst:.3e} on grid")
    energies, frames = np.linalg.eigh(ht.real)
    frames = _sign_fix(frames)
    energies = energies.reshape(n_k, n_alpha, N)
    frames = frames.reshape(n_k, n_alpha, N, N)
    degenerate = _degenerate_mask(energies)
    offsets = np.zeros((n_k, n_alpha), dtype=int)
    if relabel:
        energies, frames, degenerate, offsets = _cyclic_relabel(
            energies, frames, degenerate
        )
        for axis in (0, 1):
            jump = _circle_dist(energies, np.roll(energies, -1, axis=axis))
            if jump.max() > jump_tol:
                i, j, n = np.argwhere(jump > jump_tol)[0]
                raise ContinuityError(
                    f"band {n + 1} moves by {jump[i, j, n]:.3f} between "
                    f"neighboring grid points at ({i}, {j}); refine the grid"
                )
    return BandGrid(
        ks=ks,
        alphas=alphas,
        energies=energies,
        frames=frames,
        residual_imag=residual.reshape(n_k, n_alpha),
        degenerate=degenerate,
        branch_center=branch_center,
        multiplier=multiplier,
        offsets=offsets,
    )


def bloch_reduce(matrix, spec, ks, center_cell=None, max_shift=None):
    """Fourier-reduce a deep-bulk unit cell of a lattice matrix to Bloch form.

    For a translation invariant (cell-periodic) bulk,
    ``B(k)[i, j] = sum_dn exp(-i*dn*k) * A[s + i + N*dn, s + j]`` with ``s``
    the first site of the reference cell.  Applied to the real-space Floquet
    operator this yields the Bloch operator the deep bulk realizes, which is
    the bulk-equivalence oracle; applied to the asymptotic potential it
    reproduces ``bloch_potential``.

    Parameters
    ----------
    matrix : ndarray
        Square lattice matrix (n_sites x n_sites).
    spec : LatticeSpec
    ks : float or array
        Quasi-momenta to evaluate.
    center_cell : int, optional
        Index of the reference cell (default: middle cell).
    max_shift : int, optional
        Largest |dn| kept in the sum (default: every whole cell available).

    Returns
    -------
    ndarray, shape ``ks.shape + (N, N)``
    """
    a = np.asarray(matrix)
    N = spec.N
    n_cells = spec.n_sites // N
    if center_cell is None:
        center_cell = n_cells // 2
    s = center_cell * N
    lo = -center_cell
    hi = n_cells - 1 - center_cell
    if max_shift is not None:
        lo = max(lo, -max_shift)
        hi = min(hi, max_shift)
    shifts = np.arange(lo, hi + 1)
    blocks = np.stack([a[s + dn * N: s + dn * N + N, s: s + N] for dn in shifts])
    ks = np.asarray(ks, dtype=float)
    phases = np.exp(-1j * np.outer(ks.ravel(), shifts))
    out = np.einsum("kd,dij->kij", phases, blocks.astype(complex))
    return out.reshape(ks.shape + (N, N))
