"""Graphs, trajectories, and datasets.

A sequence is a set of per-joint 3-D trajectories over a skeleton graph.
Temporal chunking turns each trajectory into a fixed-length descriptor: the
sequence duration is split into M equal intervals, points are assigned to
intervals by timestamp, and the per-interval coordinate means are
concatenated (s = 3M values per joint). Stacking the descriptors of all n
joints column-wise gives the (s x n) node-signal matrix of a sample.

File formats:
- sequence file: UTF-8 text, one frame per line, 3n whitespace-separated
  reals (n joints x xyz);
- manifest: CSV with header ``path,label,split`` (split is train or test);
- dataset export: index.json plus one binary .npy payload per sample.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import ShapeError, check_finite

__all__ = [
    "ManifestError",
    "SequenceFormatError",
    "SkeletonGraph",
    "Trajectory",
    "GraphSample",
    "Dataset",
    "temporal_chunking",
    "handcrafted_adjacency",
    "power_map_basis",
    "load_fpha_sequence",
    "write_sequence",
    "load_split",
    "synth_dataset",
    "chain_skeleton",
    "export_dataset",
    "import_dataset",
]

DATASET_FORMAT = "litegcn.dataset"
DATASET_VERSION = 1


class ManifestError(ValueError):
    """The split manifest is inconsistent or references bad labels."""


class SequenceFormatError(ValueError):
    """A sequence file has a malformed line or wrong frame width."""


@dataclass
class SkeletonGraph:
    n: int
    edges: list[tuple[int, int]]
    node_names: list[str] | None = None

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("graph needs at least one node")
        for a, b in self.edges:
            if a == b:
                raise ValueError(f"self-loop ({a}, {b}) in edge list")
            if not (0 <= a < self.n and 0 <= b < self.n):
                raise ValueError(f"edge ({a}, {b}) out of range for n={self.n}")
        if self.node_names is not None and len(self.node_names) != self.n:
            raise ValueError("node_names length must equal n")


@dataclass
class Trajectory:
    """Time-stamped 3-D positions of one joint."""

    points: np.ndarray     # (T, 3)
    times: np.ndarray      # (T,)

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ShapeError(f"points must be (T, 3), got {self.points.shape}")
        if self.times.shape != (self.points.shape[0],):
            raise ShapeError("times length must match points")
        if self.points.shape[0] < 1:
            raise ValueError("trajectory needs at least one point")
        check_finite(self.points, "trajectory points")


@dataclass
class GraphSample:
    u: np.ndarray          # (s, n)
    label: int
    sequence_id: str = ""


@dataclass
class Dataset:
    samples: list[GraphSample]
    graph: SkeletonGraph
    num_classes: int
    train_idx: list[int] = field(default_factory=list)
    test_idx: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        seen = set(self.train_idx) & set(self.test_idx)
        if seen:
            raise ValueError(f"train/test splits overlap at indices {sorted(seen)}")
        for idx in list(self.train_idx) + list(self.test_idx):
            if not 0 <= idx < len(self.samples):
                raise ValueError(f"split index {idx} out of range")

    def split(self, name: str) -> list[GraphSample]:
        if name == "train":
            return [self.samples[i] for i in self.train_idx]
        if name == "test":
            return [self.samples[i] for i in self.test_idx]
        raise ValueError(f"unknown split {name!r}")


def temporal_chunking(traj: Trajectory, m: int) -> np.ndarray:
    """Concatenated per-chunk coordinate means, a vector of length 3m.

    The span [t_min, t_max] is cut into m equal intervals and each point goes
    to the interval containing its timestamp (the last interval is closed).
    An empty chunk inherits the previous chunk's mean; an empty first chunk
    falls back to the whole-sequence mean. A zero-duration sequence puts
    everything in the first chunk, so the output is m copies of the mean.
    """
    if m < 1:
        raise ValueError("need at least one chunk")
    t = traj.times
    pts = traj.points
    t0 = float(t.min())
    duration = float(t.max()) - t0
    if duration > 0.0:
        idx = np.floor((t - t0) / duration * m).astype(int)
        np.clip(idx, 0, m - 1, out=idx)
    else:
        idx = np.zeros(t.shape[0], dtype=int)
    seq_mean = pts.mean(axis=0)
    out = np.empty((m, 3))
    prev = seq_mean
    for chunk in range(m):
        members = pts[idx == chunk]
        prev = members.mean(axis=0) if members.shape[0] else prev
        out[chunk] = prev
    return out.reshape(-1)


def handcrafted_adjacency(graph: SkeletonGraph) -> np.ndarray:
    """0/1 symmetric adjacency with self-loops, column-normalized.

    Every column sums to one, so the handcrafted baseline follows the same
    column-stochastic convention as the learned constrained bases.
    """
    a = np.eye(graph.n)
    for i, j in graph.edges:
        a[i, j] = 1.0
        a[j, i] = 1.0
    return a / a.sum(axis=0, keepdims=True)


def power_map_basis(a: np.ndarray, k: int) -> np.ndarray:
    """Stack of increasing matrix powers (A^1, ..., A^k) as a (k, n, n) tensor."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    if k < 1:
        raise ValueError("need k >= 1 powers")
    powers = np.empty((k, a.shape[0], a.shape[1]))
    current = np.eye(a.shape[0])
    for step in range(k):
        current = current @ a
        powers[step] = current
    return powers


def _parse_frames(path: Path, n: int) -> np.ndarray:
    frames = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                values = [float(tok) for tok in stripped.split()]
            except ValueError as exc:
                raise SequenceFormatError(f"{path}:{lineno}: unparsable value ({exc})") from None
            if len(values) != 3 * n:
                raise SequenceFormatError(
                    f"{path}:{lineno}: expected {3 * n} values for {n} joints, got {len(values)}"
                )
            frames.append(values)
    if not frames:
        raise SequenceFormatError(f"{path}: no frames")
    return np.array(frames, dtype=np.float64)


def load_fpha_sequence(
    path: str | Path,
    skeleton: SkeletonGraph,
    m: int = 4,
    label: int = 0,
    sequence_id: str | None = None,
    center: bool = False,
) -> GraphSample:
    """Parse one sequence file into a chunked (3m x n) node-signal sample.

    Frame timestamps are the line indices. ``center`` subtracts the
    per-sequence mean position of all joints before chunking.
    """
    path = Path(path)
    frames = _parse_frames(path, skeleton.n)
    if center:
        stacked = frames.reshape(frames.shape[0], skeleton.n, 3)
        frames = (stacked - stacked.mean(axis=(0, 1))).reshape(frames.shape[0], -1)
    times = np.arange(frames.shape[0], dtype=np.float64)
    u = np.empty((3 * m, skeleton.n))
    for j in range(skeleton.n):
        traj = Trajectory(points=frames[:, 3 * j : 3 * j + 3], times=times)
        u[:, j] = temporal_chunking(traj, m)
    return GraphSample(u=u, label=label, sequence_id=sequence_id or path.stem)


def write_sequence(path: str | Path, frames: np.ndarray) -> None:
    """Write frames (T, 3n) as text, one frame per line, full precision."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ShapeError("frames must be 2-D (T, 3n)")
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in frames:
            fh.write(" ".join(repr(float(v)) for v in row))
            fh.write("\n")


def load_split(
    manifest_path: str | Path,
    skeleton: SkeletonGraph,
    m: int = 4,
    num_classes: int | None = None,
    center: bool = False,
) -> Dataset:
    """Build a Dataset from a ``path,label,split`` manifest.

    Sequence paths are resolved relative to the manifest. Samples are sorted
    by path so the result does not depend on row order.
    """
    manifest_path = Path(manifest_path)
    rows: list[tuple[str, int, str]] = []
    with manifest_path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"path", "label", "split"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ManifestError(f"{manifest_path}: header must contain {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                label = int(row["label"])
            except (TypeError, ValueError):
                raise ManifestError(
                    f"{manifest_path}:{lineno}: unknown label {row.get('label')!r}"
                ) from None
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise ManifestError(f"{manifest_path}:{lineno}: unknown label {label}")
            split = (row["split"] or "").strip().lower()
            if split not in ("train", "test"):
                raise ManifestError(f"{manifest_path}:{lineno}: split must be train or test")
            rows.append((row["path"].strip(), label, split))

    paths = [r[0] for r in rows]
    if len(set(paths)) != len(paths):
        dupes = sorted({p for p in paths if paths.count(p) > 1})
        raise ManifestError(f"{manifest_path}: duplicate sequence entries {dupes}")

    rows.sort(key=lambda r: r[0])
    samples: list[GraphSample] = []
    train_idx: list[int] = []
    test_idx: list[int] = []
    for rel_path, label, split in rows:
        sample = load_fpha_sequence(
            manifest_path.parent / rel_path, skeleton, m=m, label=label, center=center
        )
        (train_idx if split == "train" else test_idx).append(len(samples))
        samples.append(sample)
    if not test_idx:
        raise ManifestError(f"{manifest_path}: empty test split, evaluation impossible")
    if num_classes is None:
        num_classes = max(s.label for s in samples) + 1
    return Dataset(
        samples=samples,
        graph=skeleton,
        num_classes=num_classes,
        train_idx=train_idx,
        test_idx=test_idx,
    )


def chain_skeleton(n: int, extra_edges: int = 0, rng: np.random.Generator | None = None) -> SkeletonGraph:
    """Chain graph over n nodes plus optional random extra edges."""
    edges = [(i, i + 1) for i in range(n - 1)]
    if extra_edges > 0:
        if rng is None:
            rng = np.random.default_rng()
        have = set(edges)
        tries = 0
        while extra_edges > 0 and tries < 50 * extra_edges:
            a, b = int(rng.integers(n)), int(rng.integers(n))
            tries += 1
            if a == b:
                continue
            e = (min(a, b), max(a, b))
            if e in have:
                continue
            have.add(e)
            edges.append(e)
            extra_edges -= 1
    return SkeletonGraph(n=n, edges=edges)


def synth_dataset(
    num_classes: int,
    n: int,
    per_class: int,
    noise: float,
    seed: int,
    m: int = 4,
    frames: int = 32,
) -> Dataset:
    """Seeded synthetic gesture dataset for desk-scale experiments.

    Each class is a distinct set of moving joints with class-specific
    sinusoidal motion on top of a shared rest pose; all per-sample variation
    is scaled by ``noise``, so noise=0 makes every sample of a class
    identical. The split is 50/50 per class (train gets the extra sample
    when per_class is odd).
    """
    if num_classes < 2 or n < 2 or per_class < 2:
        raise ValueError("need num_classes >= 2, n >= 2, per_class >= 2")
    rng = np.random.default_rng(seed)
    graph = chain_skeleton(n, extra_edges=max(1, n // 4), rng=rng)
    rest = rng.normal(0.0, 1.0, size=(n, 3))

    n_moving = max(2, n // 3)
    class_specs = []
    for _ in range(num_classes):
        joints = rng.choice(n, size=n_moving, replace=False)
        amp = rng.uniform(0.5, 1.5, size=n_moving)
        freq = rng.integers(1, 4, size=n_moving)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=n_moving)
        direction = rng.normal(size=(n_moving, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        class_specs.append((joints, amp, freq, phase, direction))

    times = np.arange(frames, dtype=np.float64)
    samples: list[GraphSample] = []
    train_idx: list[int] = []
    test_idx: list[int] = []
    for cls in range(num_classes):
        joints, amp, freq, phase, direction = class_specs[cls]
        for inst in range(per_class):
            phase_jitter = noise * rng.uniform(-np.pi / 4, np.pi / 4, size=n_moving)
            wobble = noise * rng.normal(0.0, 1.0, size=(frames, n, 3))
            traj = np.repeat(rest[None, :, :], frames, axis=0)
            for mi, j in enumerate(joints):
                wave = amp[mi] * np.sin(
                    2.0 * np.pi * freq[mi] * times / frames + phase[mi] + phase_jitter[mi]
                )
                traj[:, j, :] += wave[:, None] * direction[mi]
            traj += wobble
            u = np.empty((3 * m, n))
            for j in range(n):
                u[:, j] = temporal_chunking(Trajectory(points=traj[:, j, :], times=times), m)
            idx = len(samples)
            samples.append(GraphSample(u=u, label=cls, sequence_id=f"c{cls}_s{inst}"))
            if inst < (per_class + 1) // 2:
                train_idx.append(idx)
            else:
                test_idx.append(idx)
    return Dataset(
        samples=samples,
        graph=graph,
        num_classes=num_classes,
        train_idx=train_idx,
        test_idx=test_idx,
    )


def export_dataset(dataset: Dataset, out_dir: str | Path) -> None:
    """Write index.json plus one .npy node-signal payload per sample."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sample in enumerate(dataset.samples):
        fname = f"sample_{i:05d}.npy"
        np.save(out / fname, sample.u)
        entries.append(
            {
                "id": sample.sequence_id,
                "label": sample.label,
                "split": "train" if i in set(dataset.train_idx) else "test",
                "file": fname,
            }
        )
    index = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "num_classes": dataset.num_classes,
        "n": dataset.graph.n,
        "edges": [list(e) for e in dataset.graph.edges],
        "samples": entries,
    }
    (out / "index.json").write_text(json.dumps(index, indent=1))


def import_dataset(in_dir: str | Path) -> Dataset:
    """Inverse of export_dataset."""
    root = Path(in_dir)
    index = json.loads((root / "index.json").read_text())
    if index.get("format") != DATASET_FORMAT:
        raise ValueError(f"not a dataset export: format={index.get('format')!r}")
    if index.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {index.get('version')!r}")
    graph = SkeletonGraph(n=index["n"], edges=[tuple(e) for e in index["edges"]])
    samples: list[GraphSample] = []
    train_idx: list[int] = []
    test_idx: list[int] = []
    for i, entry in enumerate(index["samples"]):
        u = np.load(root / entry["file"])
        samples.append(GraphSample(u=u, label=int(entry["label"]), sequence_id=entry["id"]))
        (train_idx if entry["split"] == "train" else test_idx).append(i)
    return Dataset(
        samples=samples,
        graph=graph,
        num_classes=int(index["num_classes"]),
        train_idx=train_idx,
        test_idx=test_idx,
    )
