"""Bravais lattices, disc-shaped computational domains, and index sets.

All sites are addressed by integer lattice coordinates. A site with
coordinates (m, n) sits at m*v1 + n*v2 in real space (1D: m*v1). Interaction
neighborhoods are expressed as integer offset sets, so set membership tests
are exact and never depend on floating-point distance comparisons.

The decomposition produces the named index sets used by all block
operators: the atomistic core ``a``, the continuum region ``c``, the pad
``p`` (continuum sites the atomistic stencil reaches), ``pp`` (atoms that
interact with the pad), the interface atoms ``i`` seen by the harmonic
stencil, the receiving layer ``ip``, the Dirichlet ring ``o`` outside the
domain, and the outermost layer ``op`` that interacts with ``o``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

SQRT3 = np.sqrt(3.0)


@dataclass(frozen=True)
class BravaisBasis:
    """Lattice basis: dimension, basis vectors (rows), lattice constant."""

    dim: int
    vectors: np.ndarray
    ell: float

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=float).reshape(self.dim, self.dim)
        object.__setattr__(self, "vectors", v)
        if abs(np.linalg.det(v)) < 1e-14 * self.ell**self.dim:
            raise ValueError("basis vectors are linearly dependent")

    @classmethod
    def hexagonal(cls, ell):
        return cls(2, np.array([[ell, 0.0], [ell / 2.0, SQRT3 * ell / 2.0]]), ell)

    @classmethod
    def chain(cls, ell=1.0):
        return cls(1, np.array([[ell]]), ell)

    def positions(self, coords):
        """Real-space positions of integer lattice coordinates (n, d)."""
        return np.asarray(coords, dtype=float) @ self.vectors


def nn_offsets(dim):
    """Nearest-neighbor integer offsets (harmonic stencil reach)."""
    if dim == 1:
        return [(-1,), (1,)]
    return [(1, 0), (-1, 0), (0, 1), (0, -1), (1, -1), (-1, 1)]


def shell_offsets(dim, norm2_max):
    """All nonzero integer offsets with squared lattice norm <= norm2_max.

    In 2D the hexagonal squared norm of (m, n) is m^2 + m*n + n^2 (in units
    of ell^2); in 1D it is m^2.
    """
    offs = []
    if dim == 1:
        mmax = int(np.floor(np.sqrt(norm2_max) + 1e-12))
        for m in range(-mmax, mmax + 1):
            if m != 0 and m * m <= norm2_max:
                offs.append((m,))
        return offs
    mmax = int(np.floor(np.sqrt(2.0 * norm2_max)) + 2)
    for m in range(-mmax, mmax + 1):
        for n in range(-mmax, mmax + 1):
            if (m, n) == (0, 0):
                continue
            if m * m + m * n + n * n <= norm2_max:
                offs.append((m, n))
    return offs


def _lat_norm2(coords, dim):
    c = np.asarray(coords, dtype=np.int64)
    if dim == 1:
        return c[:, 0] ** 2
    return c[:, 0] ** 2 + c[:, 0] * c[:, 1] + c[:, 1] ** 2


def build_disc_domain(basis, r):
    """All lattice sites with ||x|| <= r (ties included), origin first ring.

    Sites are ordered lexicographically by (squared radius, angle), which
    makes every downstream block matrix deterministic.
    """
    if r <= 0:
        raise ValueError("radius must be positive")
    r2_lat = (r / basis.ell) ** 2  # squared radius in lattice units
    offs = shell_offsets(basis.dim, r2_lat)
    if not offs:
        raise ValueError("empty domain: radius smaller than one lattice spacing")
    coords = np.array([(0,) * basis.dim] + offs, dtype=np.int64)
    return _sort_sites(coords, basis)


def _sort_sites(coords, basis):
    n2 = _lat_norm2(coords, basis.dim)
    pos = basis.positions(coords)
    if basis.dim == 1:
        key = np.lexsort((coords[:, 0],))
        return coords[key]
    ang = np.arctan2(pos[:, 1], pos[:, 0])
    ang = np.where(ang < -1e-12, ang + 2 * np.pi, ang)  # angle in [0, 2pi)
    key = np.lexsort((coords[:, 1], coords[:, 0], np.round(ang, 12), n2))
    return coords[key]


@dataclass
class DomainDecomposition:
    """Sites of the computational domain plus boundary rings and index sets.

    ``coords`` holds every materialized site (Lambda, then o, then o+), one
    row per site; a site's id is its row. Index sets are sorted id arrays.
    The ``active`` mask flags sites that participate in the atomistic
    energy; removing defect atoms only toggles this mask, the harmonic
    problem and all index sets stay defect-free.
    """

    basis: BravaisBasis
    coords: np.ndarray           # (n_sites, dim) integer lattice coords
    r: float                     # outer radius
    r_a: float                   # atomistic radius
    cutoff_norm2: int            # atomistic reach, squared lattice norm
    l: np.ndarray                # Lambda
    lb: np.ndarray               # Lambda union o
    a: np.ndarray
    c: np.ndarray
    p: np.ndarray
    pp: np.ndarray               # p' (atoms interacting with pad)
    i: np.ndarray
    ip: np.ndarray               # i+ (nodes receiving the inhomogeneous force)
    o: np.ndarray
    op: np.ndarray               # o+ (outer layer interacting with o)
    active: np.ndarray           # bool mask over all sites
    index: dict = field(repr=False)   # lattice-coord tuple -> id
    infinite: bool = False       # continuum extends beyond the stored window

    @property
    def dim(self):
        return self.basis.dim

    @property
    def n_sites(self):
        return self.coords.shape[0]

    def positions(self, ids=None):
        c = self.coords if ids is None else self.coords[ids]
        return self.basis.positions(c)

    def ids_of(self, coord_list):
        return np.array([self.index[tuple(c)] for c in coord_list], dtype=np.int64)

    def active_ids(self, ids):
        ids = np.asarray(ids)
        return ids[self.active[ids]]

    def neighbor_table(self, offsets):
        """(n_sites, n_offsets) table of ids at site - offset, -1 if absent.

        Entry [s, j] is the id of the site at coords[s] - offsets[j], so a
        stencil row reads L[v](s) = sum_j K(offsets[j]) v(table[s, j]).
        """
        key = ("nbr", tuple(map(tuple, offsets)))
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        offs = np.asarray(offsets, dtype=np.int64)
        table = np.full((self.n_sites, len(offs)), -1, dtype=np.int64)
        for j, off in enumerate(offs):
            shifted = self.coords - off
            for s in range(self.n_sites):
                table[s, j] = self.index.get(tuple(shifted[s]), -1)
        self._cache[key] = table
        return table

    def __post_init__(self):
        self._cache = {}

    def membership_bitmask(self):
        names = ["a", "c", "p", "pp", "i", "ip", "o", "op"]
        mask = np.zeros(self.n_sites, dtype=np.int64)
        for bit, name in enumerate(names):
            mask[getattr(self, name)] |= 1 << bit
        return names, mask

    def dump_csv(self, path):
        """Index-set dump: id, lattice coords, x[, y], set bitmask."""
        names, mask = self.membership_bitmask()
        pos = self.positions()
        with open(path, "w") as fh:
            cols = ["id"] + [f"m{k}" for k in range(self.dim)] + \
                   (["x", "y"] if self.dim == 2 else ["x"]) + ["sets"]
            fh.write(",".join(cols) + "\n")
            for s in range(self.n_sites):
                row = [str(s)] + [str(int(v)) for v in self.coords[s]] + \
                      ["%.17g" % v for v in pos[s]] + [str(int(mask[s]))]
                fh.write(",".join(row) + "\n")


def _grow_ring(coords, index, offsets):
    """Sites reachable from `coords` through `offsets` but not yet indexed."""
    seen = set()
    out = []
    offs = np.asarray(offsets, dtype=np.int64)
    for c in coords:
        for off in offs:
            t = tuple(c + off)
            if t not in index and t not in seen:
                seen.add(t)
                out.append(t)
    return np.array(sorted(out), dtype=np.int64).reshape(len(out), coords.shape[1])


def decompose(sites, basis, r, r_a, cutoff_norm2, infinite=False):
    """Split a site list into atomistic/continuum parts and build index sets.

    cutoff_norm2 is the atomistic interaction reach as a squared lattice
    norm (e.g. 12 for the six-shell neighborhood of the hexagonal lattice,
    4 for the second-neighbor chain).
    """
    if r_a >= r:
        raise ValueError("r_a must be smaller than r")
    if cutoff_norm2 < 1:
        raise ValueError("cutoff must reach at least nearest neighbors")
    dim = basis.dim
    sites = np.asarray(sites, dtype=np.int64)
    index = {tuple(c): s for s, c in enumerate(sites)}

    nn = nn_offsets(dim)
    o_coords = _sort_sites(_grow_ring(sites, index, nn), basis)
    for c in o_coords:
        index[tuple(c)] = len(index)
    all_coords = np.vstack([sites, o_coords])
    op_coords = _sort_sites(_grow_ring(o_coords, index, nn), basis)
    for c in op_coords:
        index[tuple(c)] = len(index)
    coords = np.vstack([all_coords, op_coords])

    n_l = len(sites)
    n_o = len(o_coords)
    l_ids = np.arange(n_l)
    o_ids = np.arange(n_l, n_l + n_o)
    op_ids = np.arange(n_l + n_o, len(coords))
    lb_ids = np.arange(n_l + n_o)

    pos = basis.positions(sites)
    rad = np.linalg.norm(pos, axis=1)
    a_mask_l = rad <= r_a * (1 + 1e-12)
    a_ids = l_ids[a_mask_l]
    c_ids = l_ids[~a_mask_l]

    is_a = np.zeros(len(coords), dtype=bool)
    is_a[a_ids] = True
    is_c = np.zeros(len(coords), dtype=bool)
    is_c[c_ids] = True

    dd = DomainDecomposition(
        basis=basis, coords=coords, r=r, r_a=r_a, cutoff_norm2=cutoff_norm2,
        l=l_ids, lb=lb_ids, a=a_ids, c=c_ids,
        p=np.empty(0, dtype=np.int64), pp=np.empty(0, dtype=np.int64),
        i=np.empty(0, dtype=np.int64), ip=np.empty(0, dtype=np.int64),
        o=o_ids, op=op_ids,
        active=np.ones(len(coords), dtype=bool),
        index=index, infinite=infinite)

    cut_offs = shell_offsets(dim, cutoff_norm2)
    tbl_cut = dd.neighbor_table(cut_offs)
    tbl_nn = dd.neighbor_table(nn)

    def reached(from_mask, table):
        hit = np.zeros(len(coords), dtype=bool)
        for j in range(table.shape[1]):
            col = table[:, j]
            ok = col >= 0
            hit[ok] |= from_mask[col[ok]]
        return hit

    reach_a_cut = reached(is_a, tbl_cut)
    dd.p = c_ids[reach_a_cut[c_ids]]
    is_p = np.zeros(len(coords), dtype=bool)
    is_p[dd.p] = True
    dd.pp = a_ids[reached(is_p, tbl_cut)[a_ids]]

    # interface sets use the nearest-neighbor (harmonic) reach; the harmonic
    # problem also sees the Dirichlet ring, so c-side adjacency includes o
    is_c_or_o = is_c.copy()
    is_c_or_o[o_ids] = True
    dd.i = a_ids[reached(is_c_or_o, tbl_nn)[a_ids]]
    is_i = np.zeros(len(coords), dtype=bool)
    is_i[dd.i] = True
    dd.ip = c_ids[reached(is_i, tbl_nn)[c_ids]]

    interior = np.setdiff1d(dd.a, np.union1d(dd.i, dd.pp))
    if len(interior) == 0:
        warnings.warn("atomistic core has no interior atoms "
                      "(every a-site lies in the interface or pad shell)")
    return dd


def remove_defect_atoms(decomp, defect_coords, strict=True):
    """Flag defect sites inactive; index sets and the harmonic problem keep
    the pristine lattice.

    With strict=True a defect touching the interface shells (i or p') is
    rejected; experiment drivers may pass strict=False to accept such
    geometries with a warning, which the reference microcrack setups need
    at small atomistic radii.
    """
    if len(defect_coords) == 0:
        return decomp
    ids = []
    for c in defect_coords:
        t = tuple(int(v) for v in np.atleast_1d(c))
        if t not in decomp.index:
            raise ValueError(f"defect site {t} not in the domain")
        ids.append(decomp.index[t])
    ids = np.array(sorted(set(ids)), dtype=np.int64)
    in_a = np.isin(ids, decomp.a)
    if not in_a.all():
        raise ValueError("defect sites must lie in the atomistic domain")
    touchy = np.union1d(decomp.i, decomp.pp)
    touching = np.isin(ids, touchy)
    if touching.any():
        if strict:
            raise ValueError("defect too close to interface")
        if np.isin(ids, decomp.i).any():
            raise ValueError("defect overlaps the harmonic interface "
                             "(vacancy would pin a site the continuum reads)")
        warnings.warn("defect touches the pad-interaction shell; coupling "
                      "error near the interface will grow")
    out = DomainDecomposition(
        basis=decomp.basis, coords=decomp.coords, r=decomp.r, r_a=decomp.r_a,
        cutoff_norm2=decomp.cutoff_norm2, l=decomp.l, lb=decomp.lb,
        a=decomp.a, c=decomp.c, p=decomp.p, pp=decomp.pp, i=decomp.i,
        ip=decomp.ip, o=decomp.o, op=decomp.op,
        active=decomp.active.copy(), index=decomp.index,
        infinite=decomp.infinite)
    out._cache = decomp._cache  # coords identical, neighbor tables reusable
    out.active[ids] = False
    return out


def microcrack_coords(length=4, rows=2, start=None):
    """Lattice coordinates of the reference microcrack (a compact slit of
    vacancies through the origin; 2 x 4 by default, eight atoms)."""
    if start is None:
        start = -(length // 2)
    out = []
    for n in range(rows):
        for m in range(start, start + length):
            out.append((m, n))
    return out
