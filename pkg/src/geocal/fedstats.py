"""Per-class statistic triplets, their exact merge, and eigen-shapes.

All covariances use population normalisation (divide by n); the merge in
:func:`reconstruct_global` is exact only under that convention.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from geocal.synthdata import ClientDataset

TRIPLET_TAG = 0x01
SHAPE_TAG = 0x02

SYMMETRY_TOL = 1e-9
PSD_TOL = 1e-8
EIG_TIE_TOL = 1e-12


@dataclass(frozen=True)
class StatTriplet:
    n: int
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def empty(cls, dim: int) -> StatTriplet:
        return cls(0, np.zeros(dim), np.zeros((dim, dim)))


@dataclass(frozen=True)
class GeometricShape:
    """Eigenpairs of one class's global covariance, columns of ``eigenvectors``
    ordered by non-increasing eigenvalue."""

    class_id: int
    mean: np.ndarray
    eigenvectors: np.ndarray
    eigenvalues: np.ndarray
    total_n: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        return self.eigenvalues.shape[0]

    def covariance(self) -> np.ndarray:
        u = self.eigenvectors
        return (u * self.eigenvalues) @ u.T

    def truncate(self, k: int) -> GeometricShape:
        return GeometricShape(
            self.class_id, self.mean, self.eigenvectors[:, :k], self.eigenvalues[:k], self.total_n
        )


@dataclass(frozen=True)
class SelectionPolicy:
    coverage: float = 0.8

    def __post_init__(self) -> None:
        if not 0 < self.coverage <= 1:
            raise ValueError("coverage must lie in (0, 1]")


def triplet(x: np.ndarray) -> StatTriplet:
    """Population mean and covariance of the rows of ``x``."""
    n, dim = x.shape
    if n == 0:
        return StatTriplet.empty(dim)
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / n
    return StatTriplet(n, mean, (cov + cov.T) / 2)


def local_stats(dataset: ClientDataset) -> dict[int, StatTriplet]:
    return {c: triplet(dataset.embeddings[dataset.labels == c]) for c in sorted(dataset.class_counts)}


def select_clients(counts: Mapping[int, int], policy: SelectionPolicy = SelectionPolicy()) -> list[int]:
    """Smallest prefix of clients (most samples first, ties by lower id) whose
    cumulative count reaches ``coverage`` of the class total."""
    total = sum(counts.values())
    if total <= 0:
        return []
    order = sorted((cid for cid, n in counts.items() if n > 0), key=lambda cid: (-counts[cid], cid))
    target = policy.coverage * total
    # absorb float error in coverage * total, e.g. 0.7 * 10
    slack = 1e-9 * total
    chosen, cum = [], 0
    for cid in order:
        chosen.append(cid)
        cum += counts[cid]
        if cum >= target - slack:
            break
    return chosen


def reconstruct_global(
    triplets: Mapping[int, StatTriplet], selected: list[int]
) -> tuple[np.ndarray, np.ndarray, int]:
    """Merge the selected clients' triplets into one (mean, cov, N).

    The pooled covariance is the count-weighted within-client covariance plus
    the count-weighted scatter of client means around the merged mean.
    """
    if not selected:
        raise ValueError("empty client selection")
    parts = [triplets[cid] for cid in sorted(selected)]
    dim = parts[0].dim
    for t in parts:
        if t.dim != dim or t.cov.shape != (dim, dim):
            raise ValueError("triplet dimension mismatch")
        if t.n <= 0:
            raise ValueError("selected triplet has no samples")
    ns = np.array([t.n for t in parts], dtype=float)
    means = np.stack([t.mean for t in parts])
    total = int(ns.sum())
    mean = ns @ means / ns.sum()
    within = np.einsum("k,kij->ij", ns, np.stack([t.cov for t in parts]))
    dev = means - mean
    between = (dev * ns[:, None]).T @ dev
    cov = (within + between) / ns.sum()
    return mean, (cov + cov.T) / 2, total


def extract_shape(mean: np.ndarray, cov: np.ndarray, total_n: int, class_id: int) -> GeometricShape:
    """Symmetric eigendecomposition with a deterministic basis.

    Negative eigenvalues (round-off on PSD input) are clamped to zero. Each
    eigenvector is signed so its largest-magnitude entry is positive; among
    numerically tied eigenvalues, vectors are ordered lexicographically
    descending.
    """
    cov = np.asarray(cov, dtype=float)
    if not np.isfinite(cov).all() or not np.isfinite(mean).all():
        raise ValueError("covariance contains non-finite entries")
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or cov.shape[0] != mean.shape[0]:
        raise ValueError("covariance must be square and match the mean")
    if np.abs(cov - cov.T).max(initial=0.0) > SYMMETRY_TOL * max(1.0, np.abs(cov).max(initial=0.0)):
        raise ValueError("covariance is not symmetric")
    vals, vecs = np.linalg.eigh((cov + cov.T) / 2)
    vals = np.clip(vals, 0.0, None)
    pivot = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivot, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    vecs = vecs * signs

    tol = EIG_TIE_TOL * max(float(vals.max(initial=0.0)), 1e-300)
    order = sorted(range(vals.size), key=lambda j: -vals[j])
    # regroup runs of tied eigenvalues by eigenvector, lexicographically descending
    out, i = [], 0
    while i < len(order):
        j = i + 1
        while j < len(order) and vals[order[i]] - vals[order[j]] <= tol:
            j += 1
        run = sorted(order[i:j], key=lambda col: tuple(-vecs[:, col]))
        out.extend(run)
        i = j
    # values inside a tie group differ by < tol; keep the sequence itself sorted
    return GeometricShape(
        class_id=class_id,
        mean=np.array(mean, dtype=float),
        eigenvectors=vecs[:, out],
        eigenvalues=vals[order],
        total_n=int(total_n),
    )


def global_shapes(
    uploads: Mapping[int, Mapping[int, StatTriplet]],
    num_classes: int,
    policy: SelectionPolicy = SelectionPolicy(),
) -> dict[int, GeometricShape]:
    """Server side: per-class selection, merge and eigendecomposition.

    ``uploads`` maps client id -> class -> triplet. Classes nobody holds are
    absent from the result.
    """
    shapes = {}
    for c in range(num_classes):
        per_client = {cid: t[c] for cid, t in uploads.items() if c in t and t[c].n > 0}
        selected = select_clients({cid: t.n for cid, t in per_client.items()}, policy)
        if not selected:
            continue
        mean, cov, n = reconstruct_global(per_client, selected)
        shapes[c] = extract_shape(mean, cov, n, c)
    return shapes


# --- wire encodings ------------------------------------------------------
#
# Triplet: u8 tag=0x01 | u32 class_id | u64 n | f64[dim] mean | f64[dim(dim+1)/2] cov upper
#          triangle, row-major.
# Shape:   u8 tag=0x02 | u32 class_id | u64 total_n | f64[dim] mean | f64[k] eigenvalues |
#          f64[dim*k] eigenvectors column-major. k is implied by the payload length.
# All little-endian. Decoders need ``dim`` from the session.

_TRIPLET_HEAD = struct.Struct("<BIQ")
_SHAPE_HEAD = struct.Struct("<BIQ")


def triplet_nbytes(dim: int) -> int:
    return _TRIPLET_HEAD.size + 8 * (dim + dim * (dim + 1) // 2)


def encode_triplet(class_id: int, t: StatTriplet) -> bytes:
    iu = np.triu_indices(t.dim)
    return (
        _TRIPLET_HEAD.pack(TRIPLET_TAG, class_id, t.n)
        + t.mean.astype("<f8").tobytes()
        + t.cov[iu].astype("<f8").tobytes()
    )


def decode_triplet(buf: bytes, dim: int) -> tuple[int, StatTriplet]:
    if len(buf) != triplet_nbytes(dim):
        raise ValueError("triplet payload has wrong length")
    tag, class_id, n = _TRIPLET_HEAD.unpack_from(buf)
    if tag != TRIPLET_TAG:
        raise ValueError(f"unexpected format tag {tag:#x}")
    off = _TRIPLET_HEAD.size
    mean = np.frombuffer(buf, "<f8", dim, off).astype(float)
    upper = np.frombuffer(buf, "<f8", dim * (dim + 1) // 2, off + 8 * dim)
    cov = np.zeros((dim, dim))
    cov[np.triu_indices(dim)] = upper
    cov = cov + np.triu(cov, 1).T
    return class_id, StatTriplet(n, mean, cov)


def shape_nbytes(dim: int, k: int) -> int:
    return _SHAPE_HEAD.size + 8 * (dim + k + dim * k)


def encode_shape(shape: GeometricShape) -> bytes:
    return (
        _SHAPE_HEAD.pack(SHAPE_TAG, shape.class_id, shape.total_n)
        + shape.mean.astype("<f8").tobytes()
        + shape.eigenvalues.astype("<f8").tobytes()
        + shape.eigenvectors.astype("<f8").tobytes(order="F")
    )


def decode_shape(buf: bytes, dim: int) -> GeometricShape:
    tag, class_id, total_n = _SHAPE_HEAD.unpack_from(buf)
    if tag != SHAPE_TAG:
        raise ValueError(f"unexpected format tag {tag:#x}")
    rest = len(buf) - _SHAPE_HEAD.size - 8 * dim
    k, bad = divmod(rest, 8 * (dim + 1))
    if bad or k < 0:
        raise ValueError("shape payload has wrong length")
    off = _SHAPE_HEAD.size
    mean = np.frombuffer(buf, "<f8", dim, off).astype(float)
    vals = np.frombuffer(buf, "<f8", k, off + 8 * dim).astype(float)
    vecs = np.frombuffer(buf, "<f8", dim * k, off + 8 * (dim + k)).reshape((dim, k), order="F")
    return GeometricShape(class_id, mean, np.array(vecs, dtype=float), vals, int(total_n))
