"""Fusion systems: channel tensors, consistency residuals, and couplings.

A :class:`FusionSystem` packages the algebraic data that constrains which
action token types may follow which: a fusion tensor ``F[k, i, j]`` giving
the amplitude of channel ``k`` for the ordered pair ``(i, j)``, a 0/1 local
rule tensor ``N[c, a, b]`` listing valid continuations of the pair
``(a, b)``, orthogonal coupling matrices for exchanging primitives, and
orthonormal sector projectors over the flattened action-sequence space.

Consistency of the fusion tensor is measured by residuals of the pentagon
and hexagon relations.  Exact solutions are not required (and for
environment-derived systems generally do not exist); downstream code works
with residual magnitudes and per-cell defect indicators instead.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConstraintViolationError",
    "CouplingLookupError",
    "FusionSpecError",
    "Projector",
    "FusionSystem",
    "pentagon_cells",
    "pentagon_residual",
    "hexagon_residual",
    "braiding_residual",
    "local_rule_check",
    "invariant_compose",
    "PrimitiveInvariant",
    "fusion_system_from_transitions",
    "parse_fusion_spec",
    "format_fusion_spec",
]


class ConstraintViolationError(ValueError):
    """A structural constraint of a fusion system does not hold."""


class CouplingLookupError(KeyError):
    """No coupling matrix is registered for a primitive pair."""

    def __init__(self, pair):
        super().__init__(pair)
        self.pair = pair

    def __str__(self):
        return f"no coupling matrix registered for primitive pair {self.pair}"


class FusionSpecError(ValueError):
    """A fusion spec file failed to parse; carries the offending line number."""


def pentagon_cells(f: np.ndarray) -> np.ndarray:
    """Per-triple pentagon defect of a fusion tensor.

    For ``F[k, i, j]`` the two ways of fusing three types compare as

        sum_{m,n} F[m,i,j] F[n,m,k]  vs  sum_{p,q} F[p,i,k] F[q,p,j]

    and the returned array ``D[i, j, k]`` is their difference.  A consistent
    tensor has ``D == 0`` everywhere.
    """
    f = np.asarray(f, dtype=np.float64)
    g = f.sum(axis=0)  # g[m, k] = sum_n F[n, m, k], the total channel weight
    lhs = np.einsum("mij,mk->ijk", f, g)
    rhs = np.einsum("pik,pj->ijk", f, g)
    return lhs - rhs


def pentagon_residual(fs_or_f) -> float:
    """Frobenius norm of the pentagon defect over all free type triples."""
    f = fs_or_f.f if isinstance(fs_or_f, FusionSystem) else np.asarray(fs_or_f)
    return float(np.sqrt((pentagon_cells(f) ** 2).sum()))


def hexagon_residual(fs_or_f) -> float:
    """Frobenius norm of the hexagon defect under the ternary-composite reading.

    The hexagon relation is stated for a three-argument fusion amplitude.
    With only a binary tensor available we use the left-nested composite

        T[n, i, j, k] = sum_m F[m, i, j] F[n, m, k]

    (fuse ``i`` with ``j``, then the outcome with ``k``) and compare

        sum_n T[n,i,j,k] T[l,i,n,m]   with
        sum_p T[p,j,k,m] T[l,i,j,p] T[l,i,k,m]

    over the free indices ``(i, j, k, m, l)``.  The index convention is part
    of this function's contract and is pinned by a brute-force loop oracle in
    the test suite.
    """
    f = fs_or_f.f if isinstance(fs_or_f, FusionSystem) else np.asarray(fs_or_f, dtype=np.float64)
    t = np.einsum("mij,nmk->nijk", f, f)
    lhs = np.einsum("nijk,linm->ijkml", t, t)
    rhs = np.einsum("pjkm,lijp,likm->ijkml", t, t, t)
    return float(np.sqrt(((lhs - rhs) ** 2).sum()))


def braiding_residual(omega_ij: np.ndarray, omega_jk: np.ndarray) -> float:
    """Frobenius norm of the Yang-Baxter defect for two coupling matrices.

    Couplings satisfy the braid relation when
    ``W_ij W_jk W_ij == W_jk W_ij W_jk``.
    """
    a = np.asarray(omega_ij, dtype=np.float64)
    b = np.asarray(omega_jk, dtype=np.float64)
    lhs = a @ b @ a
    rhs = b @ a @ b
    return float(np.sqrt(((lhs - rhs) ** 2).sum()))


class Projector:
    """Orthonormal-basis projector onto one sector of the action space.

    Parameters
    ----------
    sector_id : int
        Stable identifier of the sector.
    basis : ndarray of shape (d, r)
        Columns form an orthonormal basis of the sector.  The projector
        matrix is ``basis @ basis.T``; idempotence and symmetry follow from
        orthonormality, which is validated here.
    """

    def __init__(self, sector_id: int, basis: np.ndarray):
        basis = np.array(basis, dtype=np.float64)
        if basis.ndim != 2:
            raise ConstraintViolationError(f"projector basis must be 2-D, got {basis.shape}")
        gram = basis.T @ basis
        if np.abs(gram - np.eye(basis.shape[1])).max() > 1e-10:
            raise ConstraintViolationError(
                f"projector basis for sector {sector_id} is not orthonormal"
            )
        basis.flags.writeable = False
        self.sector_id = int(sector_id)
        self.basis = basis

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        return self.basis @ self.basis.T

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        return self.basis @ (self.basis.T @ v)

    def __repr__(self):
        return f"Projector(sector_id={self.sector_id}, dim={self.dim}, rank={self.rank})"


@dataclass
class FusionSystem:
    """Fusion tensor, local rules, couplings, and sector projectors.

    Attributes
    ----------
    f : ndarray of shape (n, n, n)
        Fusion amplitudes ``F[k, i, j]`` in [0, 1].
    n : ndarray of shape (n, n, n)
        0/1 local-rule indicators ``N[c, a, b]``: token ``c`` is a valid
        continuation of the consecutive pair ``(a, b)``.
    omega : dict[(int, int), ndarray]
        Real orthogonal coupling matrices keyed by primitive-index pair.
    projectors : list[Projector]
        Mutually orthogonal sector projectors.
    tol : float
        Pentagon-residual tolerance this system was validated against.
    """

    f: np.ndarray
    n: np.ndarray
    omega: dict = field(default_factory=dict)
    projectors: list = field(default_factory=list)
    tol: float | None = 1e-8

    def __post_init__(self):
        self.f = np.array(self.f, dtype=np.float64)
        self.n = np.array(self.n, dtype=np.float64)
        if self.f.ndim != 3 or len(set(self.f.shape)) != 1:
            raise ConstraintViolationError(f"fusion tensor must be cubic, got {self.f.shape}")
        if self.n.shape != self.f.shape:
            raise ConstraintViolationError(
                f"local-rule tensor shape {self.n.shape} != fusion tensor shape {self.f.shape}"
            )
        if self.f.min() < 0.0 or self.f.max() > 1.0:
            raise ConstraintViolationError("fusion tensor entries must lie in [0, 1]")
        if not np.isin(self.n, (0.0, 1.0)).all():
            raise ConstraintViolationError("local-rule tensor entries must be 0 or 1")
        cont = self.n.sum(axis=0)
        if (cont < 1.0).any():
            a, b = np.argwhere(cont < 1.0)[0]
            raise ConstraintViolationError(
                f"pair ({a}, {b}) has no valid continuation; every pair needs at least one"
            )
        residual = pentagon_residual(self.f)
        if self.tol is None:
            # environment-derived systems adopt their intrinsic residual
            self.tol = max(1e-8, residual * (1.0 + 1e-9))
        elif residual > self.tol:
            raise ConstraintViolationError(
                f"pentagon residual {residual:.3e} exceeds tolerance {self.tol:.3e}"
            )
        for pair, mat in self.omega.items():
            mat = np.array(mat, dtype=np.float64)
            if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
                raise ConstraintViolationError(f"coupling for {pair} must be square")
            if np.abs(mat @ mat.T - np.eye(mat.shape[0])).max() > 1e-9:
                raise ConstraintViolationError(f"coupling for {pair} is not orthogonal")
            mat.flags.writeable = False
            self.omega[pair] = mat
        for i, p in enumerate(self.projectors):
            for q in self.projectors[i + 1:]:
                if p.dim == q.dim and np.abs(p.basis.T @ q.basis).max() > 1e-9:
                    raise ConstraintViolationError(
                        f"sectors {p.sector_id} and {q.sector_id} are not orthogonal"
                    )
        self.f.flags.writeable = False
        self.n.flags.writeable = False

    @property
    def n_types(self) -> int:
        return self.f.shape[0]

    def coupling(self, i: int, j: int) -> np.ndarray:
        """Coupling matrix for an ordered primitive pair."""
        key = (int(i), int(j))
        if key not in self.omega:
            raise CouplingLookupError(key)
        return self.omega[key]

    def projector_for(self, sector_id: int) -> Projector:
        for p in self.projectors:
            if p.sector_id == sector_id:
                return p
        raise KeyError(f"no projector for sector {sector_id}")


def local_rule_check(fs: FusionSystem, a: int, b: int) -> set[int]:
    """Valid continuations of a consecutive token-type pair.

    Returns the set ``{c : N[c, a, b] == 1}``.  The system constructor
    guarantees the set is non-empty, but an empty result (possible only for
    hand-built tensors that bypassed validation) raises, identifying the pair.
    """
    nt = fs.n_types
    if not (0 <= a < nt and 0 <= b < nt):
        raise IndexError(f"token pair ({a}, {b}) out of range for {nt} types")
    out = {int(c) for c in np.flatnonzero(fs.n[:, a, b] == 1.0)}
    if not out:
        raise ConstraintViolationError(f"pair ({a}, {b}) has an empty continuation set")
    return out


def invariant_compose(inv_i: float, inv_j: float, omega_ij: np.ndarray) -> float:
    """Invariant of a fused primitive pair.

    The composite invariant is the product of the parts times the normalised
    trace of their coupling: ``inv_i * inv_j * trace(W) / s`` for an
    ``s x s`` coupling ``W``.  With identity couplings this reduces to plain
    multiplication.
    """
    w = np.asarray(omega_ij, dtype=np.float64)
    s = w.shape[0]
    return float(inv_i) * float(inv_j) * float(np.trace(w)) / float(s)


class PrimitiveInvariant:
    """Per-primitive invariant scalars together with their coupling source.

    Parameters
    ----------
    values : array-like of shape (K,)
        One conserved scalar per primitive.
    fs : FusionSystem
        Supplies the coupling matrices used when composing primitives.
    """

    def __init__(self, values, fs: FusionSystem):
        self.values = np.array(values, dtype=np.float64).reshape(-1)
        self.fs = fs

    def compose(self, i: int, j: int) -> float:
        """Invariant of the fusion of primitives ``i`` and ``j``."""
        return invariant_compose(self.values[i], self.values[j], self.fs.coupling(i, j))

    def __len__(self):
        return self.values.size


def fusion_system_from_transitions(
    legal: np.ndarray,
    continuations: np.ndarray,
    omega: dict | None = None,
    projectors: list | None = None,
    n_primitives: int = 4,
    coupling_dim: int = 2,
) -> FusionSystem:
    """Build a fusion system from a pair-legality relation.

    The fusion tensor is the delta-channel lift of the legality matrix:
    ``F[k, i, j] = legal[i, j]`` when ``k == j`` else 0, i.e. fusing ``i``
    with ``j`` yields ``j`` whenever the transition is admissible.  The
    per-triple pentagon defect at the populated channel ``k == j`` vanishes
    identically for this construction, while the aggregate residual measures
    the path-dependence of the underlying relation and is adopted as the
    system's tolerance.

    Parameters
    ----------
    legal : (n, n) array of 0/1
        ``legal[i, j]`` says type ``j`` may directly follow type ``i``.
    continuations : (n, n, n) array of 0/1
        ``continuations[c, a, b]``: ``c`` may follow the pair ``(a, b)``.
    omega : dict, optional
        Coupling matrices; defaults to identity couplings for every ordered
        primitive pair below ``n_primitives``.
    """
    legal = np.asarray(legal, dtype=np.float64)
    n = legal.shape[0]
    f = np.zeros((n, n, n))
    for j in range(n):
        f[j, :, j] = legal[:, j]
    if omega is None:
        omega = {}
        eye = np.eye(coupling_dim)
        for i in range(n_primitives):
            for j in range(n_primitives):
                if i != j:
                    omega[(i, j)] = eye.copy()
    return FusionSystem(
        f=f,
        n=np.asarray(continuations, dtype=np.float64),
        omega=omega,
        projectors=projectors or [],
        tol=None,
    )


# -- text spec format ---------------------------------------------------------
#
# A fusion spec is a line-oriented text file:
#
#     n_types = 3
#     coupling_dim = 2
#     projector_dim = 6
#     [F]
#     k i j value          (one sparse entry per line)
#     [N]
#     c a b value
#     [OMEGA]
#     i j r c value        (pair (i, j), matrix cell (r, c))
#     [PROJ]
#     sector r c value     (basis matrix cell of one sector)
#
# '#' starts a comment; blank lines are ignored.  Indices are validated
# against the declared dimensions and errors carry the line number.


def parse_fusion_spec(text: str) -> FusionSystem:
    """Parse the text spec format into a :class:`FusionSystem`."""
    n_types = None
    coupling_dim = 2
    projector_dim = None
    section = None
    f = n_arr = None
    omega_entries: dict = {}
    proj_entries: dict = {}

    def fail(lineno, message):
        raise FusionSpecError(f"line {lineno}: {message}")

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().upper()
            if section not in ("F", "N", "OMEGA", "PROJ"):
                fail(lineno, f"unknown section [{section}]")
            if section in ("F", "N") and n_types is None:
                fail(lineno, "n_types must be declared before data sections")
            if f is None and n_types is not None:
                f = np.zeros((n_types, n_types, n_types))
                n_arr = np.zeros((n_types, n_types, n_types))
            continue
        if "=" in line and section is None:
            key, _, value = line.partition("=")
            key = key.strip()
            try:
                parsed = int(value.strip())
            except ValueError:
                fail(lineno, f"expected an integer for {key!r}")
            if key == "n_types":
                n_types = parsed
            elif key == "coupling_dim":
                coupling_dim = parsed
            elif key == "projector_dim":
                projector_dim = parsed
            else:
                fail(lineno, f"unknown header key {key!r}")
            continue
        if section is None:
            fail(lineno, "data before any section header")
        fields = line.split()
        expected = {"F": 4, "N": 4, "OMEGA": 5, "PROJ": 4}[section]
        if len(fields) != expected:
            fail(lineno, f"section [{section}] entries need {expected} fields, got {len(fields)}")
        try:
            idx = [int(v) for v in fields[:-1]]
            value = float(fields[-1])
        except ValueError:
            fail(lineno, "malformed numeric field")
        if section in ("F", "N"):
            k, i, j = idx
            if not all(0 <= v < n_types for v in (k, i, j)):
                fail(lineno, f"index out of range for n_types={n_types}")
            (f if section == "F" else n_arr)[k, i, j] = value
        elif section == "OMEGA":
            i, j, r, c = idx
            if not (0 <= r < coupling_dim and 0 <= c < coupling_dim):
                fail(lineno, f"matrix cell out of range for coupling_dim={coupling_dim}")
            omega_entries.setdefault((i, j), np.zeros((coupling_dim, coupling_dim)))[r, c] = value
        else:  # PROJ
            sector, r, c = idx
            if projector_dim is None:
                fail(lineno, "projector_dim must be declared before [PROJ]")
            if not 0 <= r < projector_dim:
                fail(lineno, f"row out of range for projector_dim={projector_dim}")
            cols = proj_entries.setdefault(sector, {})
            cols[(r, c)] = value

    if n_types is None:
        raise FusionSpecError("missing n_types declaration")
    if f is None:
        f = np.zeros((n_types, n_types, n_types))
        n_arr = np.zeros((n_types, n_types, n_types))

    projectors = []
    for sector in sorted(proj_entries):
        cells = proj_entries[sector]
        rank = max(c for (_, c) in cells) + 1
        basis = np.zeros((projector_dim, rank))
        for (r, c), v in cells.items():
            basis[r, c] = v
        projectors.append(Projector(sector, basis))

    return FusionSystem(f=f, n=n_arr, omega=omega_entries, projectors=projectors, tol=None)


def format_fusion_spec(fs: FusionSystem) -> str:
    """Serialise a fusion system back to the text spec format."""
    out = io.StringIO()
    out.write(f"n_types = {fs.n_types}\n")
    dim = next(iter(fs.omega.values())).shape[0] if fs.omega else 2
    out.write(f"coupling_dim = {dim}\n")
    if fs.projectors:
        out.write(f"projector_dim = {fs.projectors[0].dim}\n")
    out.write("[F]\n")
    for k, i, j in np.argwhere(fs.f != 0.0):
        out.write(f"{k} {i} {j} {float(fs.f[k, i, j])!r}\n")
    out.write("[N]\n")
    for c, a, b in np.argwhere(fs.n != 0.0):
        out.write(f"{c} {a} {b} 1\n")
    out.write("[OMEGA]\n")
    for (i, j), mat in sorted(fs.omega.items()):
        for r in range(mat.shape[0]):
            for c in range(mat.shape[1]):
                if mat[r, c] != 0.0:
                    out.write(f"{i} {j} {r} {c} {float(mat[r, c])!r}\n")
    out.write("[PROJ]\n")
    for p in fs.projectors:
        for r in range(p.dim):
            for c in range(p.rank):
                if p.basis[r, c] != 0.0:
                    out.write(f"{p.sector_id} {r} {c} {float(p.basis[r, c])!r}\n")
    return out.getvalue()
