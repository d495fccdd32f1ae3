"""Datasets: file I/O, a synthetic corpus with planted label structure, and
temporal segment pooling.

Two on-disk formats carry the same content. JSON Lines starts with a header
line ``{"kind": "video"|"frame", "d": int, "C": int}`` followed by one record
per line. The packed binary format is documented in ``docs/formats.md``.
Feature values are stored as 32-bit floats and widened to float64 on load.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from .rng import stream

BIN_MAGIC = b"MOREDATA"
BIN_VERSION = 1
L2_EPS = 1e-12


class DataError(ValueError):
    """A malformed dataset file or record."""


@dataclass
class VideoExample:
    id: str
    features: np.ndarray
    labels: list


@dataclass
class FrameExample:
    id: str
    frames: np.ndarray
    labels: list


Example = Union[VideoExample, FrameExample]


@dataclass
class Dataset:
    kind: str  # "video" | "frame"
    dim: int
    num_classes: int
    examples: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def ids(self) -> list:
        return [e.id for e in self.examples]

    @property
    def labels(self) -> list:
        return [e.labels for e in self.examples]

    def inputs(self):
        """Model inputs: an ``n x d`` matrix or a list of frame matrices."""
        if self.kind == "video":
            if not self.examples:
                return np.zeros((0, self.dim))
            return np.stack([e.features for e in self.examples])
        return [e.frames for e in self.examples]

    def label_matrix(self) -> np.ndarray:
        y = np.zeros((len(self.examples), self.num_classes))
        for i, e in enumerate(self.examples):
            y[i, e.labels] = 1.0
        return y

    def subset(self, index) -> "Dataset":
        return Dataset(self.kind, self.dim, self.num_classes, [self.examples[i] for i in index])


def _check_labels(labels, num_classes: int, where: str) -> list:
    labels = [int(c) for c in labels]
    for c in labels:
        if not 0 <= c < num_classes:
            raise DataError(f"{where}: label {c} outside [0, {num_classes})")
    if any(b <= a for a, b in zip(labels, labels[1:])):
        raise DataError(f"{where}: labels must be strictly increasing, got {labels}")
    return labels


def _check_matrix(values, where: str, ndim: int) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32).astype(np.float64)
    if arr.ndim != ndim:
        raise DataError(f"{where}: expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{where}: non-finite feature value")
    return arr


def _make_example(kind: str, rec_id: str, labels, values, dim: int, num_classes: int, where: str) -> Example:
    labels = _check_labels(labels, num_classes, where)
    if kind == "video":
        feats = _check_matrix(values, where, 1)
        if feats.shape[0] != dim:
            raise DataError(f"{where}: expected {dim} features, got {feats.shape[0]}")
        return VideoExample(rec_id, feats, labels)
    frames = _check_matrix(values, where, 2)
    if frames.shape[0] < 1 or frames.shape[1] != dim:
        raise DataError(f"{where}: expected T >= 1 frames of width {dim}, got {frames.shape}")
    return FrameExample(rec_id, frames, labels)


# ---------------------------------------------------------------------------
# JSON Lines


def _jsonl_header(line: str, path) -> dict:
    try:
        head = json.loads(line)
        kind, dim, num_classes = head["kind"], int(head["d"]), int(head["C"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}:1: bad header line ({exc})") from exc
    if kind not in ("video", "frame") or dim < 1 or num_classes < 1:
        raise DataError(f"{path}:1: bad header {head}")
    return {"kind": kind, "d": dim, "C": num_classes}


def _iter_jsonl(path: Path, kind: Optional[str]) -> tuple[dict, Iterator[Example]]:
    fh = path.open("r", encoding="utf-8")
    first = fh.readline()
    if not first.strip():
        fh.close()
        return {"kind": kind or "video", "d": 0, "C": 0}, iter(())
    head = _jsonl_header(first, path)
    if kind is not None and head["kind"] != kind:
        fh.close()
        raise DataError(f"{path}: expected a {kind} dataset, header says {head['kind']}")
    key = "features" if head["kind"] == "video" else "frames"

    def records():
        with fh:
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                where = f"{path}:{lineno}"
                try:
                    rec = json.loads(line)
                    rec_id, labels, values = str(rec["id"]), rec["labels"], rec[key]
                except (ValueError, KeyError, TypeError) as exc:
                    raise DataError(f"{where}: malformed record ({exc})") from exc
                yield _make_example(head["kind"], rec_id, labels, values, head["d"], head["C"], where)

    return head, records()


def _write_jsonl(ds: Dataset, path: Path) -> None:
    key = "features" if ds.kind == "video" else "frames"
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"kind": ds.kind, "d": ds.dim, "C": ds.num_classes}) + "\n")
        for e in ds.examples:
            values = e.features if ds.kind == "video" else e.frames
            # float32 values print exactly through their float64 repr
            values = np.asarray(values, dtype=np.float32).astype(np.float64).tolist()
            fh.write(json.dumps({"id": e.id, "labels": list(e.labels), key: values}) + "\n")


# ---------------------------------------------------------------------------
# packed binary


def _write_bin(ds: Dataset, path: Path) -> None:
    header = json.dumps({"kind": ds.kind, "d": ds.dim, "C": ds.num_classes}).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(BIN_MAGIC + struct.pack("<II", BIN_VERSION, len(header)) + header)
        for e in ds.examples:
            values = e.features if ds.kind == "video" else e.frames
            values = np.atleast_2d(np.asarray(values, dtype="<f4"))
            rid = e.id.encode("utf-8")
            body = b"".join(
                [
                    struct.pack("<H", len(rid)),
                    rid,
                    struct.pack("<I", len(e.labels)),
                    np.asarray(e.labels, dtype="<u4").tobytes(),
                    struct.pack("<II", *values.shape),
                    values.tobytes(),
                ]
            )
            fh.write(struct.pack("<I", len(body)) + body)


def _iter_bin(path: Path, kind: Optional[str]) -> tuple[dict, Iterator[Example]]:
    buf = path.read_bytes()
    if not buf:
        return {"kind": kind or "video", "d": 0, "C": 0}, iter(())
    if buf[:8] != BIN_MAGIC:
        raise DataError(f"{path}: bad magic")
    if len(buf) < 16:
        raise DataError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != BIN_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    head = _jsonl_header(buf[16 : 16 + hlen].decode("utf-8"), path)
    if kind is not None and head["kind"] != kind:
        raise DataError(f"{path}: expected a {kind} dataset, header says {head['kind']}")

    def records():
        pos, index = 16 + hlen, 0
        while pos < len(buf):
            where = f"{path}: record {index}"
            try:
                (length,) = struct.unpack_from("<I", buf, pos)
                body = memoryview(buf)[pos + 4 : pos + 4 + length]
                if len(body) != length:
                    raise DataError(f"{where}: truncated")
                (id_len,) = struct.unpack_from("<H", body, 0)
                rec_id = bytes(body[2 : 2 + id_len]).decode("utf-8")
                p = 2 + id_len
                (n_labels,) = struct.unpack_from("<I", body, p)
                labels = np.frombuffer(body[p + 4 : p + 4 + 4 * n_labels], dtype="<u4").tolist()
                p += 4 + 4 * n_labels
                rows, cols = struct.unpack_from("<II", body, p)
                if p + 8 + 4 * rows * cols != length:
                    raise DataError(f"{where}: record length {length} does not match its contents")
                values = np.frombuffer(body[p + 8 :], dtype="<f4").reshape(rows, cols)
            except (struct.error, ValueError) as exc:
                raise DataError(f"{where}: malformed ({exc})") from exc
            if head["kind"] == "video":
                values = values.reshape(-1)
            yield _make_example(head["kind"], rec_id, labels, values, head["d"], head["C"], where)
            pos += 4 + length
            index += 1

    return head, records()


def _is_binary(path: Path) -> bool:
    with path.open("rb") as fh:
        return fh.read(8) == BIN_MAGIC


def load_dataset(path, kind: Optional[str] = None) -> Iterator[Example]:
    """Stream examples from a JSONL or packed binary file, in file order."""
    return _open(Path(path), kind)[1]


def _open(path: Path, kind: Optional[str]):
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return _iter_bin(path, kind) if _is_binary(path) else _iter_jsonl(path, kind)


def read_dataset(path, kind: Optional[str] = None) -> Dataset:
    """Load a whole dataset, header included."""
    head, records = _open(Path(path), kind)
    examples = list(records)
    ids = [e.id for e in examples]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate video ids")
    return Dataset(head["kind"], head["d"], head["C"], examples)


def write_dataset(ds: Dataset, path, fmt: Optional[str] = None) -> Path:
    path = Path(path)
    fmt = fmt or ("bin" if path.suffix == ".bin" else "jsonl")
    if fmt == "bin":
        _write_bin(ds, path)
    else:
        _write_jsonl(ds, path)
    return path


# ---------------------------------------------------------------------------
# pooling and augmentation


def l2_normalize(v: np.ndarray, eps: float = L2_EPS) -> np.ndarray:
    return v / max(float(np.sqrt(np.dot(v, v))), eps)


def _pool(seg: np.ndarray, pooling: str) -> np.ndarray:
    if pooling == "mean":
        # a plain mean of n equal values can be off by an ulp; constant columns pool to their value exactly
        return np.where(seg.max(axis=0) == seg.min(axis=0), seg[0], seg.mean(axis=0))
    if pooling == "std":
        return seg.std(axis=0)
    raise ValueError(f"unknown pooling {pooling!r}")


def segment_bounds(T: int, N: int) -> list:
    """``N`` contiguous ``(start, stop)`` ranges of length ``T // N``; the last one takes the remainder."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if T < N:
        raise ValueError(f"cannot split {T} frames into {N} non-empty segments")
    size = T // N
    return [(i * size, (i + 1) * size if i < N - 1 else T) for i in range(N)]


def segment_pool(frames: np.ndarray, N: int, normalize: bool = True, pooling: str = "mean") -> np.ndarray:
    """Pool each of ``N`` temporal segments; returns an ``N x d`` array."""
    frames = np.asarray(frames, dtype=np.float64)
    pooled = np.stack([_pool(frames[a:b], pooling) for a, b in segment_bounds(frames.shape[0], N)])
    if normalize:
        pooled = np.stack([l2_normalize(p) for p in pooled])
    return pooled


def global_pool(frames: np.ndarray, normalize: bool = True) -> np.ndarray:
    return segment_pool(frames, 1, normalize)[0]


def pool_dataset(frame_ds: Dataset) -> Dataset:
    """Video-level dataset of l2-normalised global frame means."""
    if frame_ds.kind == "video":
        return frame_ds
    examples = [VideoExample(e.id, global_pool(e.frames), list(e.labels)) for e in frame_ds.examples]
    return Dataset("video", frame_ds.dim, frame_ds.num_classes, examples)


def augment_dataset(frame_ds: Dataset, N: int = 3, pooling: str = "mean") -> Dataset:
    """``N`` segment-pooled copies plus the global mean of every video.

    Each copy carries the video's full label set; ids are suffixed
    ``#seg1..#segN`` and the global copy keeps the original id.
    """
    if frame_ds.kind != "frame":
        raise DataError("augment_dataset needs a frame-level dataset")
    out = []
    for e in frame_ds.examples:
        segs = segment_pool(e.frames, N, pooling=pooling)
        out.extend(VideoExample(f"{e.id}#seg{i + 1}", s, list(e.labels)) for i, s in enumerate(segs))
        out.append(VideoExample(e.id, global_pool(e.frames), list(e.labels)))
    return Dataset("video", frame_ds.dim, frame_ds.num_classes, out)


def sample_frames(frames: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Uniformly keep ``ceil(fraction * T)`` frames, preserving their order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    T = frames.shape[0]
    keep = min(T, max(1, math.ceil(fraction * T - 1e-9)))
    if keep == T:
        return frames
    return frames[np.sort(rng.choice(T, size=keep, replace=False))]


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthConfig:
    num_videos: int = 1000
    C: int = 50
    d: int = 64
    T_range: tuple = (12, 30)
    num_latent_concepts: int = 50
    cooccurrence_strength: float = 0.5
    hierarchy_depth: int = 1
    label_noise_rate: float = 0.0
    seed: int = 0
    concepts_per_video: float = 3.0
    modes_per_concept: int = 2
    shots_per_concept: int = 1
    signal_scale: float = 1.0
    noise_scale: float = 1.0

    def validate(self) -> "SynthConfig":
        self.T_range = tuple(int(t) for t in self.T_range)
        counts = (self.num_videos, self.C, self.d, self.num_latent_concepts, self.hierarchy_depth, self.modes_per_concept,
                  self.shots_per_concept)
        if min(counts) < 1 or len(self.T_range) != 2 or not 1 <= self.T_range[0] <= self.T_range[1]:
            raise ValueError("synthetic config: counts must be positive and T_range a valid (min, max)")
        if self.num_latent_concepts > self.C:
            raise ValueError("num_latent_concepts must not exceed C")
        if self.hierarchy_depth > self.C:
            raise ValueError("hierarchy_depth must not exceed C")
        for rate in (self.cooccurrence_strength, self.label_noise_rate):
            if not 0.0 <= rate <= 1.0:
                raise ValueError("rates must lie in [0, 1]")
        if not 0.0 < self.concepts_per_video <= self.num_latent_concepts:
            raise ValueError("concepts_per_video must lie in (0, num_latent_concepts]")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**data).validate()


def _hierarchy(order: np.ndarray, depth: int, rng: np.random.Generator) -> dict:
    """child -> parent map over ``depth`` levels; level sizes grow geometrically."""
    if depth == 1:
        return {}
    weights = np.array([2.0**l for l in range(depth)])
    # one class per level guaranteed, the rest shared geometrically
    sizes = 1 + np.floor(weights / weights.sum() * (len(order) - depth)).astype(int)
    sizes[-1] = len(order) - sizes[:-1].sum()
    levels = np.split(order, np.cumsum(sizes)[:-1])
    parents = {}
    for upper, lower in zip(levels, levels[1:]):
        for c in lower:
            parents[int(c)] = int(upper[rng.integers(len(upper))])
    return parents


def _close_under_parents(labels: set, parents: dict) -> set:
    out = set(labels)
    for c in labels:
        while c in parents:
            c = parents[c]
            out.add(c)
    return out


def generate_synthetic(cfg: SynthConfig) -> tuple[Dataset, dict]:
    """Frame-level corpus with planted concept structure.

    Each latent concept owns one primary class and ``modes_per_concept``
    appearance modes (Gaussian cluster means). A video activates concepts
    independently; its labels are the primary classes of the active concepts,
    plus each one's co-occurrence partner with probability
    ``cooccurrence_strength``, minus dropped labels (``label_noise_rate``), closed
    upward under the class hierarchy. Frames are shots: each active concept
    shows ``shots_per_concept`` contiguous runs of frames, each drawn around
    one of its modes, in random order.

    Returns the dataset and a description of the generator (for tests and
    reports).
    """
    cfg.validate()
    rng = stream(cfg.seed, "synthetic")
    C, K, d = cfg.C, cfg.num_latent_concepts, cfg.d
    order = rng.permutation(C)
    primary = order[:K].astype(int)
    parents = _hierarchy(rng.permutation(C), cfg.hierarchy_depth, rng)
    mates = rng.permutation(C)
    partner = {}
    for a, b in zip(mates[0::2], mates[1::2]):
        partner[int(a)], partner[int(b)] = int(b), int(a)
    modes = rng.normal(0.0, cfg.signal_scale, size=(K, cfg.modes_per_concept, d))
    p_active = cfg.concepts_per_video / K

    examples = []
    width = len(str(cfg.num_videos - 1))
    for v in range(cfg.num_videos):
        active = np.flatnonzero(rng.random(K) < p_active)
        labels = set()
        for k in active:
            c = int(primary[k])
            labels.add(c)
            if c in partner and rng.random() < cfg.cooccurrence_strength:
                labels.add(partner[c])
        if cfg.label_noise_rate > 0:
            labels = {c for c in sorted(labels) if rng.random() >= cfg.label_noise_rate}
        labels = _close_under_parents(labels, parents)

        T = int(rng.integers(cfg.T_range[0], cfg.T_range[1] + 1))
        means = np.zeros((T, d))
        if len(active):
            shots = rng.permutation(np.repeat(active, cfg.shots_per_concept))
            cuts = np.sort(rng.choice(np.arange(1, T), size=min(len(shots), T) - 1, replace=False)) if T > 1 else []
            bounds = np.concatenate([[0], cuts, [T]]).astype(int)
            for k, a, b in zip(shots, bounds[:-1], bounds[1:]):
                means[a:b] = modes[k, rng.integers(cfg.modes_per_concept)]
        frames = means + rng.normal(0.0, cfg.noise_scale, size=(T, d))
        frames = frames.astype(np.float32).astype(np.float64)
        examples.append(FrameExample(f"v{v:0{width}d}", frames, sorted(labels)))

    truth = {
        "primary_class": primary.tolist(),
        "parents": {str(k): v for k, v in sorted(parents.items())},
        "partners": {str(k): v for k, v in sorted(partner.items())},
        "mode_means": modes.tolist(),
        "concept_probability": p_active,
    }
    return Dataset("frame", d, C, examples), truth


def split(ds: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded random train/validation split."""
    perm = stream(seed, "split").permutation(len(ds))
    n_val = int(round(val_fraction * len(ds)))
    return ds.subset(sorted(perm[n_val:])), ds.subset(sorted(perm[:n_val]))
