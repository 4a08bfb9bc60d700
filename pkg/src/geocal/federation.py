"""Round-based federated prompt training with server-side shape reconstruction.

Everything runs in one process, but every hop between server and clients is
an explicit :class:`Message` whose payload is the byte encoding the receiver
decodes. Byte counts in :class:`RoundRecord` are therefore exact wire sizes.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from geocal import calibrate, fedstats, promptmodel
from geocal.calibrate import GpclConfig, PrototypeSet
from geocal.fedstats import GeometricShape, SelectionPolicy, StatTriplet
from geocal.promptmodel import PromptTable, TrainConfig
from geocal.synthdata import ClientDataset, GlobalSpec, PartitionConfig, Pool, generate_global, partition

log = logging.getLogger(__name__)

STATS_REQUEST = "StatsRequest"
STATS_UPLOAD = "StatsUpload"
SHAPE_BROADCAST = "ShapeBroadcast"
PROTOTYPE_BROADCAST = "PrototypeBroadcast"
PROMPT_UPLOAD = "PromptUpload"
PROMPT_BROADCAST = "PromptBroadcast"
MESSAGE_KINDS = (
    STATS_REQUEST,
    STATS_UPLOAD,
    SHAPE_BROADCAST,
    PROTOTYPE_BROADCAST,
    PROMPT_UPLOAD,
    PROMPT_BROADCAST,
)

SERVER = -1
_REQUEST_TAG = 0x05


class RoundError(RuntimeError):
    """A client failed; the round was aborted before aggregation."""


@dataclass(frozen=True)
class Message:
    kind: str
    sender: int
    receiver: int
    payload: bytes

    def __post_init__(self) -> None:
        if self.kind not in MESSAGE_KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")

    @property
    def nbytes(self) -> int:
        return len(self.payload)


# --- payload codecs ------------------------------------------------------
#
# StatsRequest:       u8 0x05 | u32 num_classes
# StatsUpload:        u32 client_id | u32 count | count x triplet (fixed size per dim)
# ShapeBroadcast:     u32 count | count x (u32 length | shape bytes)
# PrototypeBroadcast: prototype-set encoding
# PromptUpload:       u32 client_id | u64 sample_count | prompt-table encoding
# PromptBroadcast:    prompt-table encoding


def encode_stats_upload(client_id: int, stats: dict[int, StatTriplet]) -> bytes:
    body = b"".join(fedstats.encode_triplet(c, t) for c, t in sorted(stats.items()))
    return struct.pack("<II", client_id, len(stats)) + body


def decode_stats_upload(buf: bytes, dim: int) -> tuple[int, dict[int, StatTriplet]]:
    client_id, count = struct.unpack_from("<II", buf)
    size = fedstats.triplet_nbytes(dim)
    if len(buf) != 8 + count * size:
        raise ValueError("stats upload has wrong length")
    out = {}
    for i in range(count):
        c, t = fedstats.decode_triplet(buf[8 + i * size : 8 + (i + 1) * size], dim)
        out[c] = t
    return client_id, out


def encode_shapes(shapes: dict[int, GeometricShape]) -> bytes:
    parts = [struct.pack("<I", len(shapes))]
    for c in sorted(shapes):
        blob = fedstats.encode_shape(shapes[c])
        parts.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(parts)


def decode_shapes(buf: bytes, dim: int) -> dict[int, GeometricShape]:
    (count,) = struct.unpack_from("<I", buf)
    off, out = 4, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        shape = fedstats.decode_shape(buf[off + 4 : off + 4 + n], dim)
        out[shape.class_id] = shape
        off += 4 + n
    if off != len(buf):
        raise ValueError("trailing bytes in shape broadcast")
    return out


def encode_prompt_upload(client_id: int, table: PromptTable, n: int) -> bytes:
    return struct.pack("<IQ", client_id, n) + promptmodel.encode_table(table)


def decode_prompt_upload(buf: bytes) -> tuple[int, PromptTable, int]:
    client_id, n = struct.unpack_from("<IQ", buf)
    return client_id, promptmodel.decode_table(buf[12:]), n


def decode_payload(msg: Message, dim: int) -> object:
    """Decode any message payload; raises if it is not exactly a known encoding."""
    if msg.kind == STATS_REQUEST:
        tag, num_classes = struct.unpack("<BI", msg.payload)
        if tag != _REQUEST_TAG:
            raise ValueError("bad stats request")
        return num_classes
    if msg.kind == STATS_UPLOAD:
        return decode_stats_upload(msg.payload, dim)
    if msg.kind == SHAPE_BROADCAST:
        return decode_shapes(msg.payload, dim)
    if msg.kind == PROTOTYPE_BROADCAST:
        return calibrate.decode_prototypes(msg.payload, dim)
    if msg.kind == PROMPT_UPLOAD:
        return decode_prompt_upload(msg.payload)
    return promptmodel.decode_table(msg.payload)


# --- aggregation ---------------------------------------------------------


def aggregate_prompts(uploads: Sequence[tuple[PromptTable, int]], temperature: float | None = None) -> PromptTable:
    """Sample-count weighted mean of the uploaded tables.

    Computed as ``A_r + sum_k w_k (A_k - A_r)`` around the heaviest upload
    ``A_r``, so identical uploads, or a single non-zero weight, reproduce a
    table exactly. If every count is zero the uploads are averaged uniformly.
    """
    if not uploads:
        raise ValueError("no uploads to aggregate")
    shape = uploads[0][0].vectors.shape
    for t, n in uploads:
        if t.vectors.shape != shape:
            raise ValueError("uploaded tables disagree on shape")
        if n < 0:
            raise ValueError("negative sample count")
    ns = np.array([n for _, n in uploads], dtype=float)
    if ns.sum() <= 0:
        ns = np.ones_like(ns)
    w = ns / ns.sum()
    ref = uploads[int(np.argmax(w))][0].vectors
    out = ref.copy()
    for wk, (t, _) in zip(w, uploads):
        if wk != 0:
            out += wk * (t.vectors - ref)
    # a convex combination; clipping only removes rounding overshoot
    stack = np.stack([t.vectors for t, _ in uploads])
    out = np.clip(out, stack.min(axis=0), stack.max(axis=0))
    temp = uploads[0][0].temperature if temperature is None else temperature
    return PromptTable(out, temp)


class Aggregator(Protocol):
    def aggregate(self, uploads: Sequence[tuple[PromptTable, int]], global_table: PromptTable) -> PromptTable: ...


class FedAvg:
    def aggregate(self, uploads: Sequence[tuple[PromptTable, int]], global_table: PromptTable) -> PromptTable:
        return aggregate_prompts(uploads, global_table.temperature)


# --- session ---------------------------------------------------------------


@dataclass(frozen=True)
class SessionConfig:
    world: GlobalSpec
    partition: PartitionConfig
    gpcl: GpclConfig = GpclConfig()
    train: TrainConfig = TrainConfig()
    rounds: int = 10
    seed: int = 0
    test_samples_per_class_domain: int = 50
    calibration: bool = True
    balanced_sampler: bool = True
    prototypes: bool = False
    coverage: float = 0.8
    refresh_every_round: bool = False
    participation: float = 1.0
    temperature: float = 30.0
    init_scale: float = 0.01
    min_upload_count: int = 2

    def validate(self) -> None:
        self.world.validate()
        self.partition.validate(self.world.num_domains if self.partition.scheme != "dirichlet_label_skew" else None)
        self.gpcl.rank_for(self.world.dim)
        SelectionPolicy(self.coverage)
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        if not 0 < self.participation <= 1:
            raise ValueError("participation must lie in (0, 1]")
        if self.test_samples_per_class_domain < 1:
            raise ValueError("test_samples_per_class_domain must be positive")
        if self.min_upload_count < 1:
            raise ValueError("min_upload_count must be >= 1")
        if self.prototypes and self.partition.scheme == "dirichlet_label_skew":
            raise ValueError("prototypes need a domain-aligned partition scheme")


@dataclass(frozen=True)
class RoundPlan:
    round_index: int
    participants: tuple[int, ...]
    refresh: bool

    def __post_init__(self) -> None:
        if self.round_index < 0:
            raise ValueError("round_index must be non-negative")
        if not self.participants:
            raise ValueError("a round needs at least one participant")


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    accuracy: float
    per_domain: dict[int, float]
    domain_std: float
    center_distance: float
    bytes_sent: int
    duration_s: float = 0.0

    def to_json(self) -> str:
        # wall-clock time stays out so record files are reproducible byte for byte
        d = asdict(self)
        d.pop("duration_s")
        d["per_domain"] = {str(k): v for k, v in sorted(self.per_domain.items())}
        return json.dumps(d, sort_keys=True)


@dataclass
class SessionState:
    config: SessionConfig
    clients: list[ClientDataset]
    test: Pool
    global_means: dict[int, np.ndarray]
    table: PromptTable
    shapes: dict[int, GeometricShape] = field(default_factory=dict)
    prototypes: dict[int, PrototypeSet] = field(default_factory=dict)
    domain_means: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    round_index: int = 0
    transcript: list[Message] | None = None


def client_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, round_index, client_id]))


def init_session(config: SessionConfig, record_messages: bool = False) -> SessionState:
    config.validate()
    pool = generate_global(config.world)
    test = generate_global(replace(config.world, samples_per_class_domain=config.test_samples_per_class_domain), stream=1)
    clients = partition(pool, config.partition)
    # ground-truth centers over the whole training pool
    global_means = {c: pool.embeddings[pool.labels == c].mean(axis=0) for c in np.unique(pool.labels).tolist()}
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x1A17]))
    table = PromptTable.init(config.world.num_classes, config.world.dim, rng, config.temperature, config.init_scale)
    return SessionState(
        config=config,
        clients=clients,
        test=test,
        global_means=global_means,
        table=table,
        transcript=[] if record_messages else None,
    )


def plan_round(state: SessionState, round_index: int) -> RoundPlan:
    cfg = state.config
    ids = [c.client_id for c in state.clients]
    if cfg.participation < 1:
        k = max(1, math.ceil(cfg.participation * len(ids)))
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, round_index, 0xC11E]))
        ids = sorted(rng.choice(ids, size=k, replace=False).tolist())
    refresh = round_index == 0 or cfg.refresh_every_round or not state.shapes
    return RoundPlan(round_index, tuple(ids), refresh)


def _domain_means(
    uploads: dict[int, dict[int, StatTriplet]], domain_of: dict[int, int], num_classes: int
) -> dict[tuple[int, int], np.ndarray]:
    # prototypes merge every client of a domain; no coverage selection
    out = {}
    for d in sorted(set(domain_of.values())):
        members = [cid for cid in uploads if domain_of[cid] == d]
        for c in range(num_classes):
            held = {cid: uploads[cid][c] for cid in members if c in uploads[cid]}
            if held:
                mean, _, _ = fedstats.reconstruct_global(held, sorted(held))
                out[(c, d)] = mean
    return out


def _refresh_statistics(state: SessionState, plan: RoundPlan, send) -> None:
    cfg = state.config
    dim = cfg.world.dim
    by_id = {c.client_id: c for c in state.clients}
    uploads: dict[int, dict[int, StatTriplet]] = {}
    for cid in plan.participants:
        send(Message(STATS_REQUEST, SERVER, cid, struct.pack("<BI", _REQUEST_TAG, cfg.world.num_classes)))
        stats = {c: t for c, t in fedstats.local_stats(by_id[cid]).items() if t.n >= cfg.min_upload_count}
        msg = send(Message(STATS_UPLOAD, cid, SERVER, encode_stats_upload(cid, stats)))
        sender, received = decode_stats_upload(msg.payload, dim)
        uploads[sender] = received

    fresh = fedstats.global_shapes(uploads, cfg.world.num_classes, SelectionPolicy(cfg.coverage))
    k = cfg.gpcl.rank_for(dim)
    fresh = {c: s.truncate(k) for c, s in fresh.items()}
    # classes nobody reported this time keep their previous shape
    shapes = {**state.shapes, **fresh}
    blob = encode_shapes(shapes)
    protos: dict[int, PrototypeSet] = {}
    if cfg.prototypes:
        domain_of = {cid: by_id[cid].domain_id for cid in uploads}
        # (class, domain) cells not reported this time keep their previous mean
        means = {**state.domain_means, **_domain_means(uploads, domain_of, cfg.world.num_classes)}
        state.domain_means = means
    for cid in plan.participants:
        msg = send(Message(SHAPE_BROADCAST, SERVER, cid, blob))
        received = decode_shapes(msg.payload, dim)
        if cfg.prototypes:
            ps = calibrate.build_prototypes(means, by_id[cid].domain_id, dim)
            msg = send(Message(PROTOTYPE_BROADCAST, SERVER, cid, calibrate.encode_prototypes(ps)))
            protos[cid] = calibrate.decode_prototypes(msg.payload, dim)
    state.shapes = received
    if cfg.prototypes:
        state.prototypes = {**state.prototypes, **protos}


def run_round(
    state: SessionState, plan: RoundPlan, aggregator: Aggregator | None = None
) -> tuple[SessionState, RoundRecord]:
    """Statistics refresh, local training, aggregation, evaluation."""
    aggregator = aggregator or FedAvg()
    cfg = state.config
    dim = cfg.world.dim
    start = time.perf_counter()
    sent = 0

    def send(msg: Message) -> Message:
        nonlocal sent
        sent += msg.nbytes
        if state.transcript is not None:
            state.transcript.append(msg)
        return msg

    if plan.refresh:
        _refresh_statistics(state, plan, send)

    gpcl = replace(cfg.gpcl, enabled=cfg.calibration)
    by_id = {c.client_id: c for c in state.clients}
    blob = promptmodel.encode_table(state.table)
    uploads = []
    for cid in plan.participants:
        local_table = promptmodel.decode_table(send(Message(PROMPT_BROADCAST, SERVER, cid, blob)).payload)
        client = by_id[cid]
        protos = state.prototypes.get(cid) if cfg.prototypes else None
        try:
            if len(client) == 0 and not protos:
                # nothing to learn from; uploads carry zero FedAvg weight
                trained = local_table
            else:
                sampler = calibrate.sampler_for(client, protos, balanced=cfg.balanced_sampler)
                rng = client_rng(cfg.seed, plan.round_index, cid)
                trained = promptmodel.local_train(
                    local_table, client, state.shapes, gpcl, sampler, cfg.train, rng, protos
                )
        except Exception as exc:
            raise RoundError(f"client {cid} failed in round {plan.round_index}: {exc}") from exc
        msg = send(Message(PROMPT_UPLOAD, cid, SERVER, encode_prompt_upload(cid, trained, len(client))))
        sender, table, n = decode_prompt_upload(msg.payload)
        uploads.append((sender, table, n))

    # aggregate in client-id order so the result does not depend on execution order
    uploads.sort(key=lambda u: u[0])
    state.table = aggregator.aggregate([(t, n) for _, t, n in uploads], state.table)
    state.round_index = plan.round_index + 1

    metrics = promptmodel.evaluate(
        state.table, state.test.embeddings, state.test.labels, state.test.domains, cfg.world.num_domains > 1
    )
    dist = promptmodel.cosine_distances(state.table, state.global_means)
    record = RoundRecord(
        round_index=plan.round_index,
        accuracy=metrics["accuracy"],
        per_domain=metrics["per_domain"],
        domain_std=metrics["domain_std"],
        center_distance=float(np.mean(list(dist.values()))),
        bytes_sent=sent,
        duration_s=time.perf_counter() - start,
    )
    log.debug("round %d acc=%.4f dist=%.4f", plan.round_index, record.accuracy, record.center_distance)
    return state, record


@dataclass
class SessionResult:
    records: list[RoundRecord]
    initial_table: PromptTable
    table: PromptTable
    shapes: dict[int, GeometricShape]
    report: dict
    state: SessionState


def run_session(
    config: SessionConfig,
    out_dir: str | Path | None = None,
    aggregator: Aggregator | None = None,
    record_messages: bool = False,
) -> SessionResult:
    state = init_session(config, record_messages)
    initial = state.table
    records = []
    for r in range(config.rounds):
        state, rec = run_round(state, plan_round(state, r), aggregator)
        records.append(rec)
    report = promptmodel.center_distance_report(
        state.table, state.global_means, state.test.embeddings, state.test.labels
    )
    result = SessionResult(records, initial, state.table, state.shapes, report, state)
    if out_dir is not None:
        write_session(Path(out_dir), result)
    return result


# --- persistence -----------------------------------------------------------
#
# <out>/rounds.jsonl        one RoundRecord JSON per line, sorted keys, no timing
# <out>/timings.jsonl       {"round_index", "duration_s"} per line
# <out>/initial_table.bin   prompt-table encoding; prompt_table.bin likewise
# <out>/prompt_table.txt    rows as text, %.17g, one class per line
# <out>/shapes.bin          ShapeBroadcast encoding of the final shapes
# <out>/distances.csv       class,distance
# <out>/projection.csv      kind,class,pc1,pc2 (kind in test|mean|prompt)
# <out>/final_state.json    scalar summary incl. projection degeneracy flag


def _g(x: float) -> str:
    return f"{x:.9g}"


def write_session(out: Path, result: SessionResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rounds.jsonl", "w") as fh:
        for rec in result.records:
            fh.write(rec.to_json() + "\n")
    with open(out / "timings.jsonl", "w") as fh:
        for rec in result.records:
            fh.write(json.dumps({"round_index": rec.round_index, "duration_s": rec.duration_s}) + "\n")
    (out / "initial_table.bin").write_bytes(promptmodel.encode_table(result.initial_table))
    (out / "prompt_table.bin").write_bytes(promptmodel.encode_table(result.table))
    np.savetxt(out / "prompt_table.txt", result.table.vectors, fmt="%.17g")
    (out / "shapes.bin").write_bytes(encode_shapes(result.shapes))
    rep = result.report
    with open(out / "distances.csv", "w") as fh:
        fh.write("class,distance\n")
        for c, d in rep["distances"].items():
            fh.write(f"{c},{_g(d)}\n")
    write_projection(out / "projection.csv", rep)
    summary = {
        "rounds": len(result.records),
        "final_accuracy": result.records[-1].accuracy if result.records else None,
        "mean_distance": rep["mean_distance"],
        "projection_degenerate": rep["degenerate"],
        "num_classes": result.table.num_classes,
        "dim": result.table.dim,
        "test_samples": int(rep["test_labels"].shape[0]),
    }
    (out / "final_state.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")


def write_projection(path: Path, rep: dict) -> None:
    with open(path, "w") as fh:
        fh.write("kind,class,pc1,pc2\n")
        for (a, b), c in zip(rep["test_points"], rep["test_labels"]):
            fh.write(f"test,{int(c)},{_g(a)},{_g(b)}\n")
        for c, (a, b) in zip(rep["classes"], rep["mean_points"]):
            fh.write(f"mean,{c},{_g(a)},{_g(b)}\n")
        for c, (a, b) in zip(rep["classes"], rep["prompt_points"]):
            fh.write(f"prompt,{c},{_g(a)},{_g(b)}\n")


def read_records(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# --- privacy boundary --------------------------------------------------------


def find_raw_samples(messages: Iterable[Message], samples: np.ndarray) -> list[tuple[int, str, int]]:
    """Locate exact float64 copies of any row of ``samples`` inside payloads.

    Returns ``(message index, kind, byte offset)`` for each hit. Every byte
    alignment is searched, so headers of odd length cannot hide a vector.
    """
    samples = np.ascontiguousarray(samples, dtype="<f8")
    dim = samples.shape[1]
    first = samples[:, 0]
    rows = {row.tobytes() for row in samples}
    hits = []
    for i, msg in enumerate(messages):
        buf = msg.payload
        for align in range(8):
            usable = (len(buf) - align) // 8
            if usable < dim:
                continue
            words = np.frombuffer(buf, "<f8", usable, align)
            for j in np.flatnonzero(np.isin(words[: usable - dim + 1], first)):
                start = align + 8 * int(j)
                if buf[start : start + 8 * dim] in rows:
                    hits.append((i, msg.kind, start))
    return hits
