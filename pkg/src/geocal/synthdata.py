"""Synthetic embedding worlds and heterogeneous client partitions.

Each (class, domain) cell is an anisotropic Gaussian ``mean + factor @ z``.
The pool drawn from a :class:`GlobalSpec` is the ground truth that the
federated statistics are later checked against.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

SCHEMES = ("dirichlet_label_skew", "one_domain_one_client", "mixed_lds")

POOL_MAGIC = b"GCPOOL"
POOL_VERSION = 1
UNASSIGNED = 0xFFFFFFFF


@dataclass(frozen=True)
class ClassSpec:
    mean: np.ndarray
    factor: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        return self.factor @ self.factor.T


@dataclass(frozen=True)
class GlobalSpec:
    """Ground-truth world: ``class_specs[c][d]`` parametrises class c in domain d."""

    num_classes: int
    dim: int
    num_domains: int
    class_specs: tuple[tuple[ClassSpec, ...], ...]
    samples_per_class_domain: int
    seed: int = 0
    normalize: bool = False

    def validate(self) -> None:
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.num_classes <= 0:
            raise ValueError("num_classes must be positive")
        if self.num_domains <= 0:
            raise ValueError("num_domains must be positive")
        if self.samples_per_class_domain <= 0:
            raise ValueError("samples_per_class_domain must be positive")
        if len(self.class_specs) != self.num_classes:
            raise ValueError("class_specs must have one entry per class")
        for per_domain in self.class_specs:
            if len(per_domain) != self.num_domains:
                raise ValueError("class_specs must have one entry per domain")
            for cs in per_domain:
                if cs.mean.shape != (self.dim,):
                    raise ValueError(f"class mean must have length {self.dim}")
                if cs.factor.ndim != 2 or cs.factor.shape[0] != self.dim:
                    raise ValueError(f"covariance factor must have {self.dim} rows")


@dataclass(frozen=True)
class Pool:
    """A labelled embedding pool. ``clients`` is UNASSIGNED for unpartitioned pools."""

    embeddings: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    num_classes: int
    num_domains: int
    clients: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return self.labels.shape[0]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    domain_id: int
    embeddings: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    num_classes: int
    class_counts: dict[int, int] = field(init=False)

    def __post_init__(self) -> None:
        counts = np.bincount(self.labels, minlength=self.num_classes)
        object.__setattr__(
            self, "class_counts", {c: int(n) for c, n in enumerate(counts) if n > 0}
        )

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return self.labels.shape[0]

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


@dataclass(frozen=True)
class PartitionConfig:
    scheme: str = "dirichlet_label_skew"
    beta: float = 0.5
    num_clients: int = 10
    seed: int = 0

    def validate(self, num_domains: int | None = None) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.num_clients <= 0:
            raise ValueError("num_clients must be positive")
        if self.scheme != "one_domain_one_client" and not self.beta > 0:
            raise ValueError("beta must be > 0 for Dirichlet schemes")
        if (
            num_domains is not None
            and self.scheme in ("one_domain_one_client", "mixed_lds")
            and self.num_clients != num_domains
        ):
            raise ValueError(
                f"{self.scheme} needs num_clients == num_domains "
                f"({self.num_clients} != {num_domains})"
            )


def random_global_spec(
    num_classes: int,
    dim: int,
    num_domains: int = 1,
    samples_per_class_domain: int = 100,
    *,
    mean_scale: float = 1.0,
    shared_offset: float = 0.0,
    spread: float = 0.3,
    anisotropy: float = 4.0,
    domain_offset: float = 0.0,
    domain_spread: tuple[float, ...] | None = None,
    seed: int = 0,
    normalize: bool = False,
) -> GlobalSpec:
    """Draw a random world of anisotropic class Gaussians.

    Class means are ``shared_offset * e + mean_scale * g_c`` for a common unit
    direction ``e`` and Gaussian directions ``g_c`` (norm ~ 1), which mimics the
    narrow cone that contrastive features occupy. Each class gets its own
    random rotation whose axis standard deviations decay geometrically from
    ``spread * sqrt(anisotropy)`` to ``spread / sqrt(anisotropy)``. In multi-domain
    worlds every (class, domain) mean is shifted by a per-domain random vector of
    norm ``domain_offset``; ``domain_spread`` multiplies the spread per domain.
    """
    if dim <= 0 or num_classes <= 0 or num_domains <= 0:
        raise ValueError("num_classes, dim and num_domains must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    shared = rng.standard_normal(dim)
    shared /= np.linalg.norm(shared)
    if dim > 1:
        axis_sd = spread * np.sqrt(anisotropy) ** np.linspace(1.0, -1.0, dim)
    else:
        axis_sd = np.array([spread])
    if domain_spread is None:
        domain_spread = (1.0,) * num_domains
    if len(domain_spread) != num_domains:
        raise ValueError("domain_spread needs one entry per domain")
    domain_shift = rng.standard_normal((num_domains, num_classes, dim))
    domain_shift *= domain_offset / np.linalg.norm(domain_shift, axis=2, keepdims=True)

    specs = []
    for c in range(num_classes):
        base = shared_offset * shared + mean_scale * rng.standard_normal(dim) / np.sqrt(dim)
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        rot = q * np.sign(np.diag(r))
        per_domain = []
        for d in range(num_domains):
            factor = rot * (axis_sd * domain_spread[d])
            per_domain.append(ClassSpec(mean=base + domain_shift[d, c], factor=factor))
        specs.append(tuple(per_domain))
    return GlobalSpec(
        num_classes=num_classes,
        dim=dim,
        num_domains=num_domains,
        class_specs=tuple(specs),
        samples_per_class_domain=samples_per_class_domain,
        seed=seed,
        normalize=normalize,
    )


def generate_global(spec: GlobalSpec, stream: int = 0) -> Pool:
    """Draw ``samples_per_class_domain`` points for every (class, domain) cell.

    ``stream`` selects an independent draw from the same world, e.g. a
    held-out test pool.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xDA7A, stream]))
    n = spec.samples_per_class_domain
    blocks, labels, domains = [], [], []
    for c in range(spec.num_classes):
        for d in range(spec.num_domains):
            cs = spec.class_specs[c][d]
            z = rng.standard_normal((n, cs.factor.shape[1]))
            blocks.append(cs.mean + z @ cs.factor.T)
            labels.append(np.full(n, c))
            domains.append(np.full(n, d))
    x = np.concatenate(blocks)
    if spec.normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    return Pool(
        embeddings=x,
        labels=np.concatenate(labels).astype(np.int64),
        domains=np.concatenate(domains).astype(np.int64),
        num_classes=spec.num_classes,
        num_domains=spec.num_domains,
    )


def _split_counts(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer split of ``total`` by largest fractional part (ties -> lower index)."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    remainder = total - int(counts.sum())
    if remainder > 0:
        frac = raw - counts
        # stable sort on -frac keeps lower client ids first among ties
        order = np.argsort(-frac, kind="stable")
        counts[order[:remainder]] += 1
    return counts


def _dirichlet(rng: np.random.Generator, beta: float, size: int) -> np.ndarray:
    p = rng.dirichlet(np.full(size, beta))
    # tiny beta can underflow every component to 0
    if not np.isfinite(p).all() or p.sum() <= 0:
        p = np.zeros(size)
        p[rng.integers(size)] = 1.0
    return p / p.sum()


def partition(pool: Pool, config: PartitionConfig) -> list[ClientDataset]:
    """Split ``pool`` into client datasets according to ``config.scheme``.

    ``dirichlet_label_skew`` and ``one_domain_one_client`` conserve every
    sample. ``mixed_lds`` subsamples: for every class a Dir(beta) vector over
    clients is drawn and client k keeps ``round(q_k / max(q) * n)`` of its own
    domain's samples of that class, so the best-served client keeps all of them.
    """
    if len(pool) == 0:
        raise ValueError("cannot partition an empty pool")
    config.validate(pool.num_domains if config.scheme != "dirichlet_label_skew" else None)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x9A27]))
    k = config.num_clients
    assigned: list[list[np.ndarray]] = [[] for _ in range(k)]

    if config.scheme == "dirichlet_label_skew":
        for c in range(pool.num_classes):
            idx = np.flatnonzero(pool.labels == c)
            props = _dirichlet(rng, config.beta, k)
            idx = rng.permutation(idx)
            counts = _split_counts(idx.size, props)
            bounds = np.concatenate([[0], np.cumsum(counts)])
            for client in range(k):
                assigned[client].append(idx[bounds[client] : bounds[client + 1]])
    elif config.scheme == "one_domain_one_client":
        for client in range(k):
            assigned[client].append(np.flatnonzero(pool.domains == client))
    else:
        for c in range(pool.num_classes):
            q = _dirichlet(rng, config.beta, k)
            keep = q / q.max()
            for client in range(k):
                idx = np.flatnonzero((pool.labels == c) & (pool.domains == client))
                n_keep = int(math.floor(keep[client] * idx.size + 0.5))
                assigned[client].append(np.sort(rng.permutation(idx)[:n_keep]))

    out = []
    for client in range(k):
        idx = np.sort(np.concatenate(assigned[client])) if assigned[client] else np.array([], int)
        domain_id = client if config.scheme != "dirichlet_label_skew" else 0
        out.append(
            ClientDataset(
                client_id=client,
                domain_id=domain_id,
                embeddings=pool.embeddings[idx],
                labels=pool.labels[idx],
                domains=pool.domains[idx],
                num_classes=pool.num_classes,
            )
        )
    return out


def label_entropy(dataset: ClientDataset) -> float:
    """Entropy of the client's label histogram normalised by log(num_classes)."""
    if len(dataset) == 0 or dataset.num_classes < 2:
        return 0.0
    p = np.array(list(dataset.class_counts.values()), dtype=float)
    p /= p.sum()
    return float(-(p * np.log(p)).sum() / np.log(dataset.num_classes))


def mean_label_entropy(clients: list[ClientDataset]) -> float:
    return float(np.mean([label_entropy(c) for c in clients]))


# --- serialization -------------------------------------------------------
#
# Little-endian binary layout:
#   magic "GCPOOL" | u8 version | u32 dim | u32 num_classes | u32 num_domains | u64 n
#   n records of: u32 client_id | u32 domain_id | u32 class | f64[dim] embedding
# client_id is 0xFFFFFFFF for samples that are not assigned to a client.

_HEADER = struct.Struct("<6sBIIIQ")


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("client", "<u4"), ("domain", "<u4"), ("label", "<u4"), ("x", "<f8", (dim,))])


def write_pool(fh: BinaryIO, pool: Pool) -> None:
    dim = pool.dim
    fh.write(_HEADER.pack(POOL_MAGIC, POOL_VERSION, dim, pool.num_classes, pool.num_domains, len(pool)))
    rec = np.zeros(len(pool), dtype=_record_dtype(dim))
    rec["client"] = UNASSIGNED if pool.clients is None else pool.clients
    rec["domain"] = pool.domains
    rec["label"] = pool.labels
    rec["x"] = pool.embeddings
    fh.write(rec.tobytes())


def read_pool(fh: BinaryIO) -> Pool:
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise ValueError("truncated pool header")
    magic, version, dim, num_classes, num_domains, n = _HEADER.unpack(head)
    if magic != POOL_MAGIC or version != POOL_VERSION:
        raise ValueError("not a pool file or unsupported version")
    dt = _record_dtype(dim)
    body = fh.read(dt.itemsize * n)
    if len(body) != dt.itemsize * n:
        raise ValueError("truncated pool body")
    rec = np.frombuffer(body, dtype=dt)
    clients = rec["client"].astype(np.int64)
    return Pool(
        embeddings=rec["x"].astype(np.float64),
        labels=rec["label"].astype(np.int64),
        domains=rec["domain"].astype(np.int64),
        num_classes=num_classes,
        num_domains=num_domains,
        clients=None if (clients == UNASSIGNED).all() else clients,
    )


def clients_to_pool(clients: list[ClientDataset], num_domains: int) -> Pool:
    """Flatten a partition into one pool tagged with client ids."""
    return Pool(
        embeddings=np.concatenate([c.embeddings for c in clients]),
        labels=np.concatenate([c.labels for c in clients]),
        domains=np.concatenate([c.domains for c in clients]),
        num_classes=clients[0].num_classes,
        num_domains=num_domains,
        clients=np.concatenate([np.full(len(c), c.client_id) for c in clients]).astype(np.int64),
    )


def pool_to_clients(pool: Pool, num_clients: int | None = None) -> list[ClientDataset]:
    if pool.clients is None:
        raise ValueError("pool carries no client assignment")
    k = int(pool.clients.max()) + 1 if num_clients is None else num_clients
    out = []
    for client in range(k):
        m = pool.clients == client
        doms = pool.domains[m]
        out.append(
            ClientDataset(
                client_id=client,
                domain_id=int(doms[0]) if doms.size and (doms == doms[0]).all() else 0,
                embeddings=pool.embeddings[m],
                labels=pool.labels[m],
                domains=doms,
                num_classes=pool.num_classes,
            )
        )
    return out


def save_pool(path: str | Path, pool: Pool) -> None:
    with open(path, "wb") as fh:
        write_pool(fh, pool)


def load_pool(path: str | Path) -> Pool:
    with open(path, "rb") as fh:
        return read_pool(fh)
