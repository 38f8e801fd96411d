"""Matrix elements of the alignment potential on the angular momentum lattice.

A short off-resonant laser pulse acting on a linear rotor contributes the
effective potential ``V = p1*cos(theta) + p2*cos^2(theta)``.  Within the m = 0
tower of spherical harmonics the polar angle couples ``l`` to ``l +- 1`` (the
cos part) and to ``l, l +- 2`` (the cos^2 part), so ``V`` is a pentadiagonal
band matrix on the semi-infinite lattice of angular momentum states
``l = 0, 1, 2, ...``.

Two representations are provided:

* ``real_space_potential`` builds the truncated ``(l_max+1) x (l_max+1)``
  matrix, either with the exact l-dependent elements or with their large-l
  (asymptotic) limits ``{p1/2, p2/2, p2/4}`` for hop 1, hop 0, hop 2.
* ``bloch_potential`` builds the ``N x N`` Bloch matrix ``V(k)`` of the
  asymptotic lattice folded into unit cells of ``N`` sites, which is the
  translation invariant bulk at an N-th order quantum resonance.

Conventions
-----------
Quasi-momentum ``k`` is dimensionless in ``[0, 2pi)``.  An inter-cell
displacement of ``dn`` cells carries the wrap phase ``exp(-i*dn*k)``, applied
to the row index (the bra side).  ``V(k)`` is Hermitian for every ``k`` and
satisfies ``V(k).conj() == V(-k)``.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LatticeSpec",
    "PulseVector",
    "PotentialMatrix",
    "exact_cos_element",
    "exact_cos2_element",
    "real_space_potential",
    "bloch_potential",
    "HOP1_LIMIT",
    "DIAG_LIMIT",
    "HOP2_LIMIT",
]

# Large-l limits of the exact elements: hop-1 -> 1/2, diagonal -> 1/2,
# hop-2 -> 1/4 (per unit pulse strength).
HOP1_LIMIT = 0.5
DIAG_LIMIT = 0.5
HOP2_LIMIT = 0.25


@dataclass(frozen=True)
class LatticeSpec:
    """Truncated angular momentum lattice with an N-site unit cell.

    Parameters
    ----------
    l_max : int
        Highest retained angular momentum; the lattice has ``l_max + 1`` sites.
    N : int
        Resonance order, odd and >= 3; the number of quasienergy bands.
    """

    l_max: int
    N: int = 3

    def __post_init__(self):
        if self.N < 3 or self.N % 2 == 0:
            raise ValueError(f"N must be odd and >= 3, got {self.N}")
        if self.l_max + 1 < 3 * self.N:
            raise ValueError(
                f"need at least three unit cells: l_max + 1 >= {3 * self.N}, "
                f"got l_max = {self.l_max}"
            )

    @property
    def n_sites(self):
        return self.l_max + 1

    @property
    def ls(self):
        return np.arange(self.n_sites)


@dataclass(frozen=True)
class PulseVector:
    """The four kick strengths (P1, P2, P3, P4) of the triple-kick sequence.

    The outer kicks of the sequence use (P1, P2), the middle kick (P3, P4).
    Within one kick, the first member multiplies cos(theta) and the second
    cos^2(theta).
    """

    p1: float = 0.0
    p2: float = 0.0
    p3: float = 0.0
    p4: float = 0.0

    def __post_init__(self):
        vals = (self.p1, self.p2, self.p3, self.p4)
        if not all(np.isfinite(vals)):
            raise ValueError(f"pulse strengths must be finite, got {vals}")

    @property
    def outer(self):
        """(cos, cos^2) strengths of the two outer kicks."""
        return (self.p1, self.p2)

    @property
    def middle(self):
        """(cos, cos^2) strengths of the middle kick."""
        return (self.p3, self.p4)

    def as_array(self):
        return np.array([self.p1, self.p2, self.p3, self.p4])


@dataclass(frozen=True)
class PotentialMatrix:
    """Real symmetric kick potential on the truncated lattice."""

    entries: np.ndarray
    mode: str  # "exact" | "asymptotic"

    def __post_init__(self):
        object.__setattr__(self, "entries", np.asarray(self.entries, dtype=float))


def exact_cos_element(l_prime, l):
    """Exact ``<l',0| cos(theta) |l,0>``.

    Nonzero only for ``|l - l'| = 1``; the closed form follows from the
    Legendre three-term recursion,
    ``<l+1,0| cos |l,0> = (l+1)/sqrt((2l+1)(2l+3))``.

    Parameters
    ----------
    l_prime, l : int
        Angular momenta, both >= 0.
    """
    if l_prime < 0 or l < 0:
        raise ValueError("angular momenta must be non-negative")
    if abs(l_prime - l) != 1:
        return 0.0
    lo = min(l_prime, l)
    return (lo + 1.0) / np.sqrt((2.0 * lo + 1.0) * (2.0 * lo + 3.0))


def exact_cos2_element(l_prime, l):
    """Exact ``<l',0| cos^2(theta) |l,0>``.

    Nonzero only for ``|l - l'| in {0, 2}``.  Applying the Legendre recursion
    twice gives

    * diagonal: ``(l+1)^2/((2l+1)(2l+3)) + l^2/((2l-1)(2l+1))``,
    * hop 2:    ``(l+1)(l+2)/((2l+3) sqrt((2l+1)(2l+5)))`` with ``l`` the
      smaller of the pair.
    """
    if l_prime < 0 or l < 0:
        raise ValueError("angular momenta must be non-negative")
    diff = abs(l_prime - l)
    if diff == 0:
        val = (l + 1.0) ** 2 / ((2.0 * l + 1.0) * (2.0 * l + 3.0))
        if l > 0:
            val += l**2 / ((2.0 * l - 1.0) * (2.0 * l + 1.0))
        return val
    if diff == 2:
        lo = min(l_prime, l)
        return (lo + 1.0) * (lo + 2.0) / (
            (2.0 * lo + 3.0) * np.sqrt((2.0 * lo + 1.0) * (2.0 * lo + 5.0))
        )
    return 0.0


def real_space_potential(spec, p1, p2, mode="exact", include_shift=True):
    """Kick potential matrix ``p1*cos + p2*cos^2`` on the truncated lattice.

    Parameters
    ----------
    spec : LatticeSpec
    p1, p2 : float
        Strengths of the cos and cos^2 parts.
    mode : {"exact", "asymptotic"}
        Exact l-dependent elements, or the uniform large-l amplitudes
        ``{p1/2, p2/2, p2/4}``.
    include_shift : bool
        Keep the constant ``p2/2`` diagonal in asymptotic mode (default).
        Dropping it shifts all quasienergies rigidly and is only useful when
        comparing against a convention without the constant.

    Returns
    -------
    PotentialMatrix
    """
    if mode not in ("exact", "asymptotic"):
        raise ValueError(f"mode must be 'exact' or 'asymptotic', got {mode!r}")
    n = spec.n_sites
    v = np.zeros((n, n))
    ls = np.arange(n, dtype=float)
    if mode == "exact":
        lo = ls[:-1]
        hop1 = (lo + 1.0) / np.sqrt((2.0 * lo + 1.0) * (2.0 * lo + 3.0))
        diag = (ls + 1.0) ** 2 / ((2.0 * ls + 1.0) * (2.0 * ls + 3.0))
        diag[1:] += ls[1:] ** 2 / ((2.0 * ls[1:] - 1.0) * (2.0 * ls[1:] + 1.0))
        lo2 = ls[:-2]
        hop2 = (lo2 + 1.0) * (lo2 + 2.0) / (
            (2.0 * lo2 + 3.0) * np.sqrt((2.0 * lo2 + 1.0) * (2.0 * lo2 + 5.0))
        )
        np.fill_diagonal(v, p2 * diag)
        idx = np.arange(n - 1)
        v[idx, idx + 1] = v[idx + 1, idx] = p1 * hop1
        idx = np.arange(n - 2)
        v[idx, idx + 2] = v[idx + 2, idx] = p2 * hop2
    else:
        if include_shift:
            np.fill_diagonal(v, p2 * DIAG_LIMIT)
        idx = np.arange(n - 1)
        v[idx, idx + 1] = v[idx + 1, idx] = p1 * HOP1_LIMIT
        idx = np.arange(n - 2)
        v[idx, idx + 2] = v[idx + 2, idx] = p2 * HOP2_LIMIT
    return PotentialMatrix(entries=v, mode=mode)


def bloch_potential(N, k, p1, p2, include_shift=True):
    """Bloch form ``V(k)`` of the asymptotic kick potential.

    Folds the translation invariant bulk lattice into cells of ``N`` sites:
    ``V(k)[i, j] = sum_dn exp(-i*dn*k) * amp(|i - j + N*dn|)`` with
    ``amp(1) = p1/2``, ``amp(0) = p2/2``, ``amp(2) = p2/4`` and ``dn`` the
    cell displacement.

    ``k``, ``p1`` and ``p2`` may be scalars or broadcastable arrays; the
    result has shape ``broadcast_shape + (N, N)``.

    Raises
    ------
    ValueError
        If ``N`` is even or < 3 (even-order resonances double the cell and
        are not supported).
    """
    if N < 3 or N % 2 == 0:
        raise ValueError(f"N must be odd and >= 3, got {N}")
    k = np.asarray(k, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    shape = np.broadcast_shapes(k.shape, p1.shape, p2.shape)
    k, p1, p2 = (np.broadcast_to(a, shape) for a in (k, p1, p2))
    i = np.arange(N)
    hop = i[:, None] - i[None, :]
    out = np.zeros(shape + (N, N), dtype=complex)
    p1e = p1[..., None, None]
    p2e = p2[..., None, None]
    for dn in (-1, 0, 1):
        h = np.abs(hop + N * dn)
        amp = p1e * (0.5 * (h == 1)) + p2e * (0.25 * (h == 2))
        if include_shift:
            amp = amp + p2e * (0.5 * (h == 0))
        if dn == 0:
            out += amp
        else:
            out += np.exp(-1j * dn * k)[..., None, None] * amp
    return out
