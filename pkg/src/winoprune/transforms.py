"""Winograd transform matrices and derived coefficient tensors.

A Winograd convolution instance maps an m x m input tile and an n x n
kernel to an (m-n+1) x (m-n+1) output tile through three fixed matrices:

    O = A^T [ (G W G^T) . (B^T I B) ] A        (. is elementwise)

where `.` denotes the Hadamard product.  The matrices are built with the
Cook-Toom procedure from m-1 distinct interpolation points plus the point
at infinity, carried out in exact rational arithmetic and converted to
float64 once at the end, so construction is bit-deterministic.

Derived objects:
  * S[i,j,u,v] = G[i,u] * G[j,v]            (Winograd weight as a weighted
                                             sum of spatial weights)
  * H[x,y,i,j,s,t] = A[i,x] A[j,y] B[s,i] B[t,j]
                                            (output element as a bilinear
                                             form in weights and inputs)
  * F[i,j] = sqrt(sum_{x,y,s,t} H^2)        (per-position importance factor)
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

# Standard point sets; validated by the convolution-equivalence oracle.
DEFAULT_POINTS = {
    4: (0, 1, -1),
    6: (0, 1, -1, 2, -2),
}


@dataclass(frozen=True)
class WinogradInstance:
    """Tile geometry plus the interpolation points that define a transform."""

    m: int
    n: int
    points: tuple[Fraction, ...]

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"kernel side must be >= 1, got {self.n}")
        if self.m <= self.n:
            raise ValueError(
                f"input tile side m={self.m} must exceed kernel side n={self.n}"
            )
        pts = tuple(Fraction(p) for p in self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) != self.m - 1:
            raise ValueError(
                f"need m-1={self.m - 1} interpolation points, got {len(pts)}"
            )
        if len(set(pts)) != len(pts):
            raise ValueError(f"interpolation points must be distinct: {pts}")

    @property
    def out(self) -> int:
        """Output tile side m - n + 1."""
        return self.m - self.n + 1


def winograd_instance(m: int, n: int = 3, points=None) -> WinogradInstance:
    """Build an instance, filling in the default point set for known m."""
    if points is None:
        if m not in DEFAULT_POINTS:
            raise ValueError(f"no default interpolation points for m={m}")
        points = DEFAULT_POINTS[m]
    return WinogradInstance(m=m, n=n, points=tuple(Fraction(p) for p in points))


@dataclass(frozen=True)
class CoeffTensorS:
    """4-D tensor: Q[i,j] = sum_{u,v} s[i,j,u,v] * W[u,v]."""

    s: np.ndarray  # [m, m, n, n]


@dataclass(frozen=True)
class CoeffTensorH:
    """6-D tensor: O[x,y] = sum_{i,j,s,t} h[x,y,i,j,s,t] * Q[i,j] * I[s,t]."""

    h: np.ndarray  # [m-n+1, m-n+1, m, m, m, m]


@dataclass(frozen=True)
class ImportanceMatrix:
    """Per-position factor f with f[i,j]^2 = expected squared output change
    per unit Q[i,j]^2 under i.i.d. unit-variance inputs."""

    f: np.ndarray  # [m, m], strictly positive


@dataclass(frozen=True)
class TransformSet:
    """Transform matrices for one instance plus the derived coefficient
    objects, all precomputed and read-only."""

    a: np.ndarray  # [m, m-n+1]
    b: np.ndarray  # [m, m]
    g: np.ndarray  # [m, n]
    instance: WinogradInstance
    s: CoeffTensorS
    h: CoeffTensorH
    f: ImportanceMatrix

    @property
    def g_nonzero(self) -> np.ndarray:
        """Structural nonzero pattern of G (zeros are exact by construction)."""
        return self.g != 0.0


def _vandermonde(points, cols: int):
    """Homogeneous Vandermonde rows [p^0 .. p^(cols-1)] plus the infinity
    row (0,...,0,1), all exact Fractions."""
    rows = [[p**j for j in range(cols)] for p in points]
    rows.append([Fraction(0)] * (cols - 1) + [Fraction(1)])
    return rows


def _lagrange_denominators(points):
    f = []
    for i, p in enumerate(points):
        d = Fraction(1)
        for k, q in enumerate(points):
            if k != i:
                d *= p - q
        f.append(d)
    f.append(Fraction(1))  # infinity point
    if f[0] < 0:
        # Cosmetic normalization; any diagonal cancels between G and B^T.
        f[0] = -f[0]
    return f


def _invert_exact(mat):
    """Gauss-Jordan inverse over Fractions. mat is a list of lists."""
    size = len(mat)
    aug = [list(row) + [Fraction(int(i == j)) for j in range(size)]
           for i, row in enumerate(mat)]
    for col in range(size):
        pivot = next((r for r in range(col, size) if aug[r][col] != 0), None)
        if pivot is None:
            raise ValueError("interpolation matrix is singular")
        aug[col], aug[pivot] = aug[pivot], aug[col]
        inv_p = Fraction(1) / aug[col][col]
        aug[col] = [v * inv_p for v in aug[col]]
        for r in range(size):
            if r != col and aug[r][col] != 0:
                factor = aug[r][col]
                aug[r] = [a - factor * b for a, b in zip(aug[r], aug[col])]
    return [row[size:] for row in aug]


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _to_f64(rows) -> np.ndarray:
    return np.array([[float(v) for v in row] for row in rows], dtype=np.float64)


def generate_transforms(instance: WinogradInstance) -> TransformSet:
    """Construct A, B, G for the instance and precompute S, H and F.

    G scales the evaluation rows by the inverse Lagrange denominators and
    B carries the matching denominators, so the elementwise product is
    scale-free; the equivalence invariant is checked by tests against a
    direct-convolution oracle.
    """
    m, n, r = instance.m, instance.n, instance.out
    pts = instance.points

    f_diag = _lagrange_denominators(pts)
    a_rows = _vandermonde(pts, r)
    g_rows = [[v / f_diag[i] for v in row]
              for i, row in enumerate(_vandermonde(pts, n))]
    v_inv = _invert_exact(_vandermonde(pts, m))
    b_rows = [[v_inv[i][j] * f_diag[j] for j in range(m)] for i in range(m)]

    a = _freeze(_to_f64(a_rows))
    b = _freeze(_to_f64(b_rows))
    g = _freeze(_to_f64(g_rows))

    s = coeff_tensor_s_from(g)
    h = coeff_tensor_h_from(a, b)
    f = importance_matrix(h)
    return TransformSet(a=a, b=b, g=g, instance=instance, s=s, h=h, f=f)


def coeff_tensor_s_from(g: np.ndarray) -> CoeffTensorS:
    return CoeffTensorS(s=_freeze(np.einsum("iu,jv->ijuv", g, g)))


def coeff_tensor_S(ts: TransformSet) -> CoeffTensorS:
    return coeff_tensor_s_from(ts.g)


def coeff_tensor_h_from(a: np.ndarray, b: np.ndarray) -> CoeffTensorH:
    h = np.einsum("ix,jy,si,tj->xyijst", a, a, b, b)
    return CoeffTensorH(h=_freeze(h))


def coeff_tensor_H(ts: TransformSet) -> CoeffTensorH:
    return coeff_tensor_h_from(ts.a, ts.b)


def importance_matrix(h: CoeffTensorH) -> ImportanceMatrix:
    f = np.sqrt(np.einsum("xyijst->ij", h.h**2))
    return ImportanceMatrix(f=_freeze(f))


def importance_rank_one_factors(ts: TransformSet) -> np.ndarray:
    """c[i] = (sum_x A[i,x]^2) * (sum_s B[s,i]^2); F[i,j]^2 = c[i] * c[j]."""
    return (ts.a**2).sum(axis=1) * (ts.b**2).sum(axis=0)
