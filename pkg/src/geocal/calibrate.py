"""Client-side calibration: shape-guided perturbation and class-balanced batches."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from geocal.fedstats import GeometricShape
from geocal.synthdata import ClientDataset

PROTOTYPE_TAG = 0x03


@dataclass(frozen=True)
class GpclConfig:
    top_k: int | None = None  # None -> every eigenpair
    scale: float = 1.0
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not self.scale > 0:
            raise ValueError("scale must be > 0")

    def rank_for(self, dim: int) -> int:
        if self.top_k is not None and self.top_k > dim:
            raise ValueError(f"top_k={self.top_k} exceeds dim={dim}")
        return dim if self.top_k is None else self.top_k


@dataclass(frozen=True)
class PrototypeSet:
    """Out-of-domain class means ``(class_id, domain_id, vector)`` sent to one client."""

    owner_domain: int
    class_ids: np.ndarray
    domain_ids: np.ndarray
    vectors: np.ndarray

    def __post_init__(self) -> None:
        if (self.domain_ids == self.owner_domain).any():
            raise ValueError("prototype set contains an in-domain prototype")

    def __len__(self) -> int:
        return self.class_ids.shape[0]

    def counts(self) -> dict[int, int]:
        ids, n = np.unique(self.class_ids, return_counts=True)
        return {int(c): int(k) for c, k in zip(ids, n)}


@dataclass
class SamplerState:
    """Per-class sampling weights over local samples merged with prototypes.

    ``local_counts[c]`` real samples plus ``proto_counts[c]`` prototypes form
    the class's effective count; ``class_probs`` follow inverse frequency of
    that count (or plain frequency when ``balanced`` is off).
    """

    class_weights: dict[int, float]
    class_probs: dict[int, float]
    local_counts: dict[int, int]
    proto_counts: dict[int, int]
    balanced: bool = True
    local_indices: dict[int, np.ndarray] = field(default_factory=dict)
    proto_indices: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(self.class_probs)

    def merged_count(self, c: int) -> int:
        return self.local_counts.get(c, 0) + self.proto_counts.get(c, 0)


def _check_shape(shape: GeometricShape, dim: int) -> None:
    if shape.dim != dim:
        raise ValueError(f"shape dim {shape.dim} does not match embedding dim {dim}")
    if not (np.isfinite(shape.eigenvalues).all() and np.isfinite(shape.eigenvectors).all()):
        raise ValueError("shape has non-finite entries")


def perturbation_basis(shape: GeometricShape, config: GpclConfig) -> np.ndarray:
    """Columns ``scale * sqrt(lambda_m) * u_m`` for the leading ``top_k`` pairs."""
    k = min(config.rank_for(shape.dim), shape.rank)
    return config.scale * shape.eigenvectors[:, :k] * np.sqrt(np.clip(shape.eigenvalues[:k], 0, None))


def gpcl_perturb(
    x: np.ndarray, shape: GeometricShape, config: GpclConfig, rng: np.random.Generator
) -> np.ndarray:
    """Return ``x + scale * sum_m eps_m sqrt(lambda_m) u_m`` with eps_m ~ N(0, 1).

    ``x`` may be a single vector or a stack of rows; each row gets its own draw.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != shape.dim:
        raise ValueError(f"embedding dim {x.shape[-1]} does not match shape dim {shape.dim}")
    _check_shape(shape, shape.dim)
    if not config.enabled:
        return x.copy()
    basis = perturbation_basis(shape, config)
    eps = rng.standard_normal(x.shape[:-1] + (basis.shape[1],))
    return x + eps @ basis.T


def build_sampler(
    class_counts: Mapping[int, int],
    include_prototypes: PrototypeSet | None = None,
    *,
    balanced: bool = True,
    labels: np.ndarray | None = None,
) -> SamplerState:
    """Class probabilities ``w_c / sum_j w_j`` with ``w_c = n_max / n_c``.

    Each prototype counts as one extra sample of its class. With
    ``balanced=False`` the probabilities are proportional to the effective
    counts, which is plain uniform sampling over the merged pool.
    """
    local = {int(c): int(n) for c, n in class_counts.items() if n > 0}
    protos = include_prototypes.counts() if include_prototypes is not None else {}
    merged = {c: local.get(c, 0) + protos.get(c, 0) for c in sorted(set(local) | set(protos))}
    if not merged:
        raise ValueError("sampler needs at least one sample or prototype")
    n_max = max(merged.values())
    if balanced:
        weights = {c: n_max / n for c, n in merged.items()}
    else:
        weights = {c: float(n) for c, n in merged.items()}
    total = sum(weights.values())
    probs = {c: w / total for c, w in weights.items()}
    state = SamplerState(weights, probs, local, protos, balanced)
    if labels is not None:
        state.local_indices = {c: np.flatnonzero(labels == c) for c in local}
    if include_prototypes is not None:
        state.proto_indices = {c: np.flatnonzero(include_prototypes.class_ids == c) for c in protos}
    return state


def sampler_for(
    dataset: ClientDataset, prototypes: PrototypeSet | None = None, *, balanced: bool = True
) -> SamplerState:
    return build_sampler(dataset.class_counts, prototypes, balanced=balanced, labels=dataset.labels)


def sample_sources(
    sampler: SamplerState,
    dataset: ClientDataset,
    prototypes: PrototypeSet | None,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``batch_size`` (vector, label) pairs without perturbation.

    A class is drawn by ``class_probs``; then one of its merged members is
    picked uniformly, real samples first, prototypes after.
    """
    dim = dataset.dim
    if batch_size == 0:
        return np.zeros((0, dim)), np.zeros(0, dtype=np.int64)
    if not sampler.local_indices and sampler.local_counts:
        sampler.local_indices = {c: dataset.class_indices(c) for c in sampler.local_counts}
    if prototypes is not None and not sampler.proto_indices and sampler.proto_counts:
        sampler.proto_indices = {c: np.flatnonzero(prototypes.class_ids == c) for c in sampler.proto_counts}
    classes = np.array(sampler.classes)
    probs = np.array([sampler.class_probs[c] for c in classes])
    picked = classes[rng.choice(classes.size, size=batch_size, p=probs)]
    u = rng.random(batch_size)
    out = np.empty((batch_size, dim))
    for c in np.unique(picked):
        rows = np.flatnonzero(picked == c)
        n_local = sampler.local_counts.get(int(c), 0)
        member = np.floor(u[rows] * sampler.merged_count(int(c))).astype(np.int64)
        is_local = member < n_local
        if is_local.any():
            out[rows[is_local]] = dataset.embeddings[sampler.local_indices[int(c)][member[is_local]]]
        if (~is_local).any():
            if prototypes is None:
                raise ValueError("sampler references prototypes that were not supplied")
            pidx = sampler.proto_indices[int(c)][member[~is_local] - n_local]
            out[rows[~is_local]] = prototypes.vectors[pidx]
    return out, picked.astype(np.int64)


def draw_batch(
    sampler: SamplerState,
    dataset: ClientDataset,
    prototypes: PrototypeSet | None,
    shape_by_class: Mapping[int, GeometricShape],
    config: GpclConfig,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample a batch and calibrate every item with its class's shape.

    Classes without a shape pass through unchanged. When ``config.enabled``
    is off no noise is drawn, so the output equals :func:`sample_sources`
    on the same rng stream.
    """
    x, y = sample_sources(sampler, dataset, prototypes, batch_size, rng)
    if not config.enabled or batch_size == 0:
        return x, y
    k = config.rank_for(dataset.dim)
    eps = rng.standard_normal((batch_size, k))
    for c in np.unique(y):
        shape = shape_by_class.get(int(c))
        if shape is None:
            continue
        _check_shape(shape, dataset.dim)
        rows = np.flatnonzero(y == c)
        basis = perturbation_basis(shape, config)
        x[rows] += eps[rows, : basis.shape[1]] @ basis.T
    return x, y


def build_prototypes(
    domain_means: Mapping[tuple[int, int], np.ndarray], owner_domain: int, dim: int
) -> PrototypeSet:
    """Collect every ``(class, domain) -> mean`` with domain != owner_domain."""
    keys = sorted(k for k in domain_means if k[1] != owner_domain)
    return PrototypeSet(
        owner_domain=owner_domain,
        class_ids=np.array([c for c, _ in keys], dtype=np.int64),
        domain_ids=np.array([d for _, d in keys], dtype=np.int64),
        vectors=np.stack([domain_means[k] for k in keys]) if keys else np.zeros((0, dim)),
    )


# Prototype set: u8 tag=0x03 | u32 owner_domain | u32 count |
#                count x (u32 class_id | u32 domain_id | f64[dim] vector), little-endian.
_PROTO_HEAD = struct.Struct("<BII")


def encode_prototypes(ps: PrototypeSet) -> bytes:
    dim = ps.vectors.shape[1]
    dt = np.dtype([("c", "<u4"), ("d", "<u4"), ("v", "<f8", (dim,))])
    rec = np.zeros(len(ps), dtype=dt)
    rec["c"], rec["d"], rec["v"] = ps.class_ids, ps.domain_ids, ps.vectors
    return _PROTO_HEAD.pack(PROTOTYPE_TAG, ps.owner_domain, len(ps)) + rec.tobytes()


def decode_prototypes(buf: bytes, dim: int) -> PrototypeSet:
    tag, owner, count = _PROTO_HEAD.unpack_from(buf)
    if tag != PROTOTYPE_TAG:
        raise ValueError(f"unexpected format tag {tag:#x}")
    dt = np.dtype([("c", "<u4"), ("d", "<u4"), ("v", "<f8", (dim,))])
    if len(buf) != _PROTO_HEAD.size + count * dt.itemsize:
        raise ValueError("prototype payload has wrong length")
    rec = np.frombuffer(buf, dt, count, _PROTO_HEAD.size)
    return PrototypeSet(
        owner_domain=owner,
        class_ids=rec["c"].astype(np.int64),
        domain_ids=rec["d"].astype(np.int64),
        vectors=rec["v"].astype(float).reshape(count, dim),
    )
