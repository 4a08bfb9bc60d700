"""Cosine-softmax prompt table: the proxy for frozen-encoder prompt learning.

Row c of the table stands in for the text-side embedding of class c's prompt.
Training pulls rows toward (calibrated) image-side embeddings of their class.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from geocal import calibrate
from geocal.calibrate import GpclConfig, PrototypeSet, SamplerState
from geocal.fedstats import GeometricShape, extract_shape, triplet
from geocal.synthdata import ClientDataset

TABLE_TAG = 0x04


@dataclass(frozen=True)
class PromptTable:
    vectors: np.ndarray
    temperature: float = 30.0

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not np.isfinite(self.vectors).all():
            raise ValueError("prompt table has non-finite entries")

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def init(
        cls,
        num_classes: int,
        dim: int,
        rng: np.random.Generator,
        temperature: float = 30.0,
        scale: float = 0.01,
    ) -> PromptTable:
        return cls(scale * rng.standard_normal((num_classes, dim)), temperature)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 32
    local_steps: int | None = None  # None -> ceil(client size / batch size)

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.local_steps is not None and self.local_steps < 1:
            raise ValueError("local_steps must be positive")

    def steps_for(self, n_samples: int) -> int:
        if self.local_steps is not None:
            return self.local_steps
        return max(1, math.ceil(n_samples / self.batch_size))


def _unit_rows(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    unit = np.divide(a, norms, out=np.zeros_like(a), where=norms > 0)
    return unit, norms


def cosine_matrix(table: PromptTable, x: np.ndarray) -> np.ndarray:
    """``(batch, classes)`` cosines; zero-norm rows or inputs give 0."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if not np.isfinite(x).all():
        raise ValueError("input embedding is not finite")
    if x.shape[1] != table.dim:
        raise ValueError(f"input dim {x.shape[1]} does not match table dim {table.dim}")
    xu, _ = _unit_rows(x)
    wu, _ = _unit_rows(table.vectors)
    return xu @ wu.T


def logits(table: PromptTable, x: np.ndarray) -> np.ndarray:
    out = table.temperature * cosine_matrix(table, x)
    return out[0] if np.ndim(x) == 1 else out


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(table: PromptTable, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over cosine logits and its gradient w.r.t. the rows.

    With ``cos_ic = <w_c, x_i> / (|w_c| |x_i|)`` the row gradient is
    ``d cos_ic / d w_c = (x̂_i - cos_ic ŵ_c) / |w_c|``.
    """
    xu, _ = _unit_rows(np.asarray(x, dtype=float))
    wu, wn = _unit_rows(table.vectors)
    cos = xu @ wu.T
    z = table.temperature * cos
    n = y.shape[0]
    zs = z - z.max(axis=1, keepdims=True)
    loss = float(-(zs[np.arange(n), y] - np.log(np.exp(zs).sum(axis=1))).mean())
    d_z = _softmax(z)
    d_z[np.arange(n), y] -= 1.0
    d_z /= n
    d_cos = table.temperature * d_z
    # sum_i d_cos_ic (x̂_i - cos_ic ŵ_c) / |w_c|
    grad = d_cos.T @ xu - (d_cos * cos).sum(axis=0)[:, None] * wu
    grad = np.divide(grad, wn, out=np.zeros_like(grad), where=wn > 0)
    return loss, grad


def local_train(
    table: PromptTable,
    client: ClientDataset,
    shapes: Mapping[int, GeometricShape],
    gpcl: GpclConfig,
    sampler: SamplerState,
    cfg: TrainConfig,
    rng: np.random.Generator,
    prototypes: PrototypeSet | None = None,
    trace: list[float] | None = None,
) -> PromptTable:
    """SGD with momentum on calibrated batches. Weight decay is decoupled.

    If ``trace`` is given, the loss of every step is appended to it.
    """
    if table.dim != client.dim:
        raise ValueError("prompt table and client data disagree on dim")
    w = table.vectors.copy()
    velocity = np.zeros_like(w)
    steps = cfg.steps_for(len(client))
    for _ in range(steps):
        x, y = calibrate.draw_batch(sampler, client, prototypes, shapes, gpcl, cfg.batch_size, rng)
        loss, grad = loss_and_grad(replace(table, vectors=w), x, y)
        if trace is not None:
            trace.append(loss)
        velocity = cfg.momentum * velocity + grad
        w = w - cfg.learning_rate * velocity - cfg.learning_rate * cfg.weight_decay * w
    return replace(table, vectors=w)


def predict(table: PromptTable, x: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, i.e. the lowest class id on ties
    return np.argmax(logits(table, np.atleast_2d(x)), axis=1)


def evaluate(
    table: PromptTable,
    embeddings: np.ndarray,
    labels: np.ndarray,
    domains: np.ndarray | None = None,
    group_by_domain: bool = True,
) -> dict:
    if labels.shape[0] == 0:
        raise ValueError("empty test set")
    hit = predict(table, embeddings) == labels
    per_domain: dict[int, float] = {}
    if group_by_domain and domains is not None:
        for d in np.unique(domains):
            per_domain[int(d)] = float(hit[domains == d].mean())
    else:
        per_domain[0] = float(hit.mean())
    accs = np.array(list(per_domain.values()))
    return {
        "accuracy": float(hit.mean()),
        "per_domain": per_domain,
        "domain_std": float(accs.std()),
    }


def cosine_distances(table: PromptTable, global_means: Mapping[int, np.ndarray]) -> dict[int, float]:
    """``1 - cos(row_c, mean_c)``; 1.0 when either vector is zero."""
    out = {}
    for c, mu in sorted(global_means.items()):
        row = table.vectors[c]
        denom = np.linalg.norm(row) * np.linalg.norm(mu)
        out[c] = float(1.0 - (row @ mu) / denom) if denom > 0 else 1.0
    return out


def pca_basis(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Centre and top-two principal axes of ``x``.

    Axes with zero variance are replaced by zero vectors; the flag reports it.
    """
    t = triplet(np.asarray(x, dtype=float))
    shape = extract_shape(t.mean, t.cov, t.n, -1)
    axes = shape.eigenvectors[:, :2].copy()
    vals = shape.eigenvalues[:2]
    if axes.shape[1] < 2:
        axes = np.pad(axes, ((0, 0), (0, 2 - axes.shape[1])))
        vals = np.pad(vals, (0, 2 - vals.shape[0]))
    degenerate = bool((vals <= 0).any())
    axes[:, vals <= 0] = 0.0
    return t.mean, axes, degenerate


def center_distance_report(
    table: PromptTable,
    global_means: Mapping[int, np.ndarray],
    test_embeddings: np.ndarray,
    test_labels: np.ndarray,
) -> dict:
    """Per-class prompt-to-center distance plus a shared 2-D PCA projection.

    Prompt rows are rescaled to their class mean's norm before projecting;
    cosine geometry does not depend on row length, and the rescaling puts the
    prompts on the same scale as the features.
    """
    missing = set(range(table.num_classes)) - set(global_means)
    if missing:
        raise ValueError(f"global means missing for classes {sorted(missing)}")
    center, axes, degenerate = pca_basis(test_embeddings)
    classes = sorted(global_means)
    means = np.stack([global_means[c] for c in classes])
    rows = table.vectors[classes]
    row_norm = np.linalg.norm(rows, axis=1, keepdims=True)
    scaled = np.divide(rows, row_norm, out=np.zeros_like(rows), where=row_norm > 0)
    scaled *= np.linalg.norm(means, axis=1, keepdims=True)
    distances = cosine_distances(table, global_means)
    return {
        "distances": distances,
        "mean_distance": float(np.mean(list(distances.values()))),
        "degenerate": degenerate,
        "center": center,
        "axes": axes,
        "test_points": (test_embeddings - center) @ axes,
        "test_labels": np.asarray(test_labels),
        "classes": classes,
        "mean_points": (means - center) @ axes,
        "prompt_points": (scaled - center) @ axes,
    }


# Prompt table: u8 tag=0x04 | u32 num_classes | u32 dim | f64 temperature |
#               f64[num_classes*dim] rows, row-major, little-endian.
_TABLE_HEAD = struct.Struct("<BIId")


def encode_table(table: PromptTable) -> bytes:
    return _TABLE_HEAD.pack(TABLE_TAG, table.num_classes, table.dim, table.temperature) + table.vectors.astype(
        "<f8"
    ).tobytes()


def decode_table(buf: bytes) -> PromptTable:
    tag, c, d, temp = _TABLE_HEAD.unpack_from(buf)
    if tag != TABLE_TAG:
        raise ValueError(f"unexpected format tag {tag:#x}")
    if len(buf) != _TABLE_HEAD.size + 8 * c * d:
        raise ValueError("prompt table payload has wrong length")
    vec = np.frombuffer(buf, "<f8", c * d, _TABLE_HEAD.size).reshape(c, d).astype(float)
    return PromptTable(vec, temp)
