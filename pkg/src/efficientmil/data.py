"""Bag datasets: binary bag files, manifests, MUSK-style CSV ingestion,
synthetic witness bags, and the seeded stratified split.

Bag file layout (little-endian throughout): magic ``EMIL``, version uint16,
flags uint8 (bit0 coords present, bit1 labeled), label uint8, N uint32,
d uint32, N*d float32 features row-major, then N*2 int32 coords when present.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, FormatError
from .seeding import SYNTH, derive_rng

BAG_MAGIC = b"EMIL"
BAG_VERSION = 1
FLAG_COORDS = 0x01
FLAG_LABELED = 0x02


@dataclass
class Bag:
    """One sample: an (N, d) float32 feature matrix with optional extras."""

    id: str
    features: np.ndarray
    label: int | None = None
    coords: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DomainError(f"bag {self.id!r}: features must be a non-empty (N, d) matrix")
        if not np.all(np.isfinite(self.features)):
            raise DomainError(f"bag {self.id!r}: features contain non-finite values")
        if self.coords is not None:
            self.coords = np.ascontiguousarray(self.coords, dtype=np.int32)
            if self.coords.shape != (self.n, 2):
                raise DomainError(f"bag {self.id!r}: coords must be (N, 2)")
        if self.label is not None and self.label not in (0, 1):
            raise DomainError(f"bag {self.id!r}: label must be 0 or 1")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass
class DatasetManifest:
    name: str
    class_names: list[str]
    entries: list[tuple[str, int]]        # (bag file path, label)
    d: int
    notes: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "class_names": self.class_names,
            "entries": [[p, int(l)] for p, l in self.entries],
            "d": self.d,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DatasetManifest":
        return cls(
            name=obj["name"],
            class_names=list(obj["class_names"]),
            entries=[(p, int(l)) for p, l in obj["entries"]],
            d=int(obj["d"]),
            notes=obj.get("notes", ""),
        )


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> DatasetManifest:
    try:
        return DatasetManifest.from_dict(json.loads(Path(path).read_text()))
    except (KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest {path}: {exc}") from exc


def load_bags(manifest: DatasetManifest, base_dir=None) -> list[Bag]:
    base = Path(base_dir) if base_dir is not None else Path(".")
    bags = []
    for rel_path, label in manifest.entries:
        path = Path(rel_path)
        if not path.is_absolute():
            path = base / path
        bag = read_bag(path)
        bag.label = int(label)
        if bag.d != manifest.d:
            raise FormatError(f"bag {bag.id!r} has d={bag.d}, manifest says d={manifest.d}")
        bags.append(bag)
    return bags


# ---------------------------------------------------------------------------
# bag binary format


def write_bag(bag: Bag, path) -> None:
    flags = 0
    if bag.coords is not None:
        flags |= FLAG_COORDS
    if bag.label is not None:
        flags |= FLAG_LABELED
    with open(path, "wb") as fh:
        fh.write(BAG_MAGIC)
        fh.write(struct.pack("<HBBII", BAG_VERSION, flags, bag.label or 0, bag.n, bag.d))
        fh.write(np.ascontiguousarray(bag.features, dtype="<f4").tobytes())
        if bag.coords is not None:
            fh.write(np.ascontiguousarray(bag.coords, dtype="<i4").tobytes())


def read_bag(path) -> Bag:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != BAG_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0, expected {BAG_MAGIC!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header at byte {len(raw)}")
    version, flags, label, n, d = struct.unpack("<HBBII", raw[4:16])
    if version != BAG_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    feat_bytes = 4 * n * d
    if len(raw) < 16 + feat_bytes:
        raise FormatError(f"{path}: truncated features at byte {len(raw)}")
    features = np.frombuffer(raw[16:16 + feat_bytes], dtype="<f4").reshape(n, d).copy()
    coords = None
    offset = 16 + feat_bytes
    if flags & FLAG_COORDS:
        coord_bytes = 8 * n
        if len(raw) < offset + coord_bytes:
            raise FormatError(f"{path}: truncated coords at byte {len(raw)}")
        coords = np.frombuffer(raw[offset:offset + coord_bytes], dtype="<i4").reshape(n, 2).copy()
    return Bag(
        id=Path(path).stem,
        features=features,
        label=int(label) if flags & FLAG_LABELED else None,
        coords=coords,
    )


# ---------------------------------------------------------------------------
# MUSK-style CSV ingestion


def load_musk_style(csv_path, bag_column: int = 1, label_column: int = 0,
                    instance_labels: bool = False) -> list[Bag]:
    """Group per-instance CSV rows into bags, in file order.

    Every non-id column besides ``bag_column`` and ``label_column`` is a
    feature. With ``instance_labels`` the bag label is the any-positive rule
    over the rows; otherwise rows of one bag must agree on the label.
    """
    groups: dict[str, dict] = {}
    with open(csv_path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) < 3:
                raise FormatError(f"{csv_path}:{line_no}: need bag id, label and features")
            try:
                bag_id = cells[bag_column]
                label = int(float(cells[label_column]))
                feats = [float(c) for i, c in enumerate(cells)
                         if i not in (bag_column, label_column)]
            except (IndexError, ValueError) as exc:
                raise FormatError(f"{csv_path}:{line_no}: {exc}") from exc
            if label not in (0, 1):
                raise FormatError(f"{csv_path}:{line_no}: label must be 0/1, got {label}")
            group = groups.setdefault(bag_id, {"rows": [], "labels": [], "width": len(feats)})
            if len(feats) != group["width"]:
                raise FormatError(
                    f"{csv_path}:{line_no}: ragged row, {len(feats)} features vs {group['width']}"
                )
            group["rows"].append(feats)
            group["labels"].append(label)

    bags = []
    for bag_id, group in groups.items():
        labels = group["labels"]
        if instance_labels:
            label = int(any(labels))
        else:
            if len(set(labels)) > 1:
                raise FormatError(f"{csv_path}: bag {bag_id!r} has conflicting labels {sorted(set(labels))}")
            label = labels[0]
        bags.append(Bag(id=f"bag{bag_id}", features=np.array(group["rows"], dtype=np.float32),
                        label=label))
    return bags


# ---------------------------------------------------------------------------
# synthetic witness bags


@dataclass
class WitnessSpec:
    """Generator settings for the synthetic stand-in task.

    Negative bags are pure background noise; positive bags carry a few
    witness instances shifted by ``mu`` along a fixed random unit direction.
    """

    n_bags: int = 200
    instances_per_bag: int = 50
    d: int = 32
    witness_range: tuple[int, int] = (3, 10)
    mu: float = 2.5
    seed: int = 42

    def validate(self) -> None:
        if self.mu <= 0:
            raise DomainError("class separation mu must be > 0 (mu = 0 has no signal)")
        if self.n_bags < 2 or self.instances_per_bag < 1 or self.d < 1:
            raise DomainError("witness spec needs >= 2 bags and non-empty instances")
        lo, hi = self.witness_range
        if not (1 <= lo <= hi <= self.instances_per_bag):
            raise DomainError("witness_range must satisfy 1 <= lo <= hi <= instances_per_bag")


@dataclass
class WitnessData:
    bags: list[Bag]
    witness_indices: dict[str, list[int]] = field(default_factory=dict)
    direction: np.ndarray | None = None


def synth_witness(spec: WitnessSpec, allow_null: bool = False) -> WitnessData:
    """Generate the witness dataset; bit-deterministic under the spec seed."""
    if not allow_null:
        spec.validate()
    rng = derive_rng(spec.seed, SYNTH)
    u = rng.standard_normal(spec.d)
    u /= np.linalg.norm(u)
    bags = []
    witness_indices: dict[str, list[int]] = {}
    lo, hi = spec.witness_range
    grid_w = max(1, int(math.ceil(math.sqrt(spec.instances_per_bag))))
    coords = np.stack([np.arange(spec.instances_per_bag) % grid_w,
                       np.arange(spec.instances_per_bag) // grid_w], axis=1).astype(np.int32)
    for b in range(spec.n_bags):
        label = b % 2           # alternate so classes stay balanced
        feats = rng.standard_normal((spec.instances_per_bag, spec.d))
        bag_id = f"witness{b:04d}"
        if label == 1:
            k = int(rng.integers(lo, hi + 1))
            idx = rng.choice(spec.instances_per_bag, size=k, replace=False)
            feats[idx] += spec.mu * u
            witness_indices[bag_id] = sorted(int(i) for i in idx)
        else:
            witness_indices[bag_id] = []
        bags.append(Bag(id=bag_id, features=feats.astype(np.float32), label=label,
                        coords=coords.copy()))
    return WitnessData(bags=bags, witness_indices=witness_indices, direction=u)


# ---------------------------------------------------------------------------
# deterministic stratified split


@dataclass
class SplitSpec:
    seed: int = 42
    ratio: float = 0.8
    assignment: dict[str, str] = field(default_factory=dict)   # bag id -> train|val

    def train_ids(self) -> list[str]:
        return [k for k, v in self.assignment.items() if v == "train"]

    def val_ids(self) -> list[str]:
        return [k for k, v in self.assignment.items() if v == "val"]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "ratio": self.ratio, "assignment": self.assignment}

    @classmethod
    def from_dict(cls, obj: dict) -> "SplitSpec":
        return cls(seed=int(obj["seed"]), ratio=float(obj["ratio"]),
                   assignment=dict(obj["assignment"]))


def split_bags(bags: list[Bag], ratio: float = 0.8, seed: int = 42) -> SplitSpec:
    """Stratified seeded train/val assignment over labeled bags."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    by_class: dict[int, list[str]] = {}
    for bag in bags:
        if bag.label is None:
            raise ConfigError(f"bag {bag.id!r} is unlabeled; splits need labels")
        by_class.setdefault(bag.label, []).append(bag.id)
    if len(by_class) < 2:
        raise ConfigError("split needs at least two classes")
    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    for label in sorted(by_class):
        ids = list(by_class[label])
        if len(ids) < 2:
            raise ConfigError(f"class {label} has only {len(ids)} bag(s); need >= 2 to split")
        order = rng.permutation(len(ids))
        n_train = int(round(ratio * len(ids)))
        if n_train == len(ids) or n_train == 0:
            raise ConfigError(
                f"ratio {ratio} leaves an empty train or val side for class {label}"
            )
        for pos, j in enumerate(order):
            assignment[ids[j]] = "train" if pos < n_train else "val"
    ordered = {bag.id: assignment[bag.id] for bag in bags}
    return SplitSpec(seed=seed, ratio=ratio, assignment=ordered)


def write_split(spec: SplitSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


def read_split(path) -> SplitSpec:
    try:
        return SplitSpec.from_dict(json.loads(Path(path).read_text()))
    except (KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"split file {path}: {exc}") from exc


def apply_split(bags: list[Bag], spec: SplitSpec) -> tuple[list[Bag], list[Bag]]:
    train = [b for b in bags if spec.assignment.get(b.id) == "train"]
    val = [b for b in bags if spec.assignment.get(b.id) == "val"]
    if not train or not val:
        raise ConfigError("split assignment leaves an empty train or val set")
    return train, val
