"""Dataset registry, pretraining corpus assembly, and the patch feature store.

The registry is a JSON file listing source datasets with their roles. A
dataset flagged for both pretraining and evaluation carries a holdout
definition so its source images can be split disjointly: all patches of one
image land on the same side, never mixed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .containers import ContainerError, atomic_write_bytes, atomic_write_json, blob_paths

REGISTRY_VERSION = 1
STORE_VERSION = 1

ORGANS = ("breast", "cervix", "thyroid", "other")
LABEL_KINDS = ("binary", "multiclass", "segmentation", "none")
ROLES = ("pretrain", "evaluate")

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class RegistryError(ValueError):
    """Invalid dataset record or registry operation."""


@dataclass
class DatasetRecord:
    """One registered source dataset.

    ``holdout_fraction``/``holdout_seed`` define the image-level disjoint
    split and are required when the record is flagged for both pretraining
    and evaluation.
    """

    name: str
    organ: str
    label_kind: str
    role_flags: frozenset[str]
    root_path: Path
    magnification: float | None = None
    class_names: tuple[str, ...] = ()
    holdout_fraction: float | None = None
    holdout_seed: int | None = None

    def __post_init__(self):
        self.role_flags = frozenset(self.role_flags)
        self.root_path = Path(self.root_path)
        self.class_names = tuple(self.class_names)
        self.validate()

    def validate(self) -> None:
        if not self.name:
            raise RegistryError("dataset name must be non-empty")
        if self.organ not in ORGANS:
            raise RegistryError(f"unknown organ {self.organ!r}; expected one of {ORGANS}")
        if self.label_kind not in LABEL_KINDS:
            raise RegistryError(f"unknown label_kind {self.label_kind!r}")
        if not self.role_flags:
            raise RegistryError("role_flags must be non-empty")
        unknown = self.role_flags - set(ROLES)
        if unknown:
            raise RegistryError(f"unknown role flags: {sorted(unknown)}")
        if len(set(self.class_names)) != len(self.class_names):
            raise RegistryError("class_names must be unique")
        if self.label_kind == "binary" and len(self.class_names) != 2:
            raise RegistryError(
                f"binary label_kind requires exactly 2 class names, got {len(self.class_names)}"
            )
        if self.magnification is not None and not self.magnification > 0:
            raise RegistryError("magnification must be positive when given")
        if {"pretrain", "evaluate"} <= self.role_flags:
            if self.holdout_fraction is None or self.holdout_seed is None:
                raise RegistryError(
                    f"dataset {self.name!r} is flagged pretrain+evaluate and must define "
                    "holdout_fraction and holdout_seed"
                )
        if self.holdout_fraction is not None and not 0.0 < self.holdout_fraction < 1.0:
            raise RegistryError("holdout_fraction must lie in (0, 1)")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "organ": self.organ,
            "label_kind": self.label_kind,
            "role_flags": sorted(self.role_flags),
            "root_path": str(self.root_path),
            "magnification": self.magnification,
            "class_names": list(self.class_names),
            "holdout_fraction": self.holdout_fraction,
            "holdout_seed": self.holdout_seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetRecord":
        return cls(
            name=obj["name"],
            organ=obj["organ"],
            label_kind=obj["label_kind"],
            role_flags=frozenset(obj["role_flags"]),
            root_path=Path(obj["root_path"]),
            magnification=obj.get("magnification"),
            class_names=tuple(obj.get("class_names", [])),
            holdout_fraction=obj.get("holdout_fraction"),
            holdout_seed=obj.get("holdout_seed"),
        )


def load_registry(path: Path | str) -> dict[str, DatasetRecord]:
    path = Path(path)
    if not path.exists():
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != REGISTRY_VERSION:
        raise RegistryError(f"unknown registry version {doc.get('version')!r}")
    records = [DatasetRecord.from_json(item) for item in doc["datasets"]]
    return {rec.name: rec for rec in records}


def save_registry(path: Path | str, records: dict[str, DatasetRecord]) -> None:
    doc = {
        "version": REGISTRY_VERSION,
        "datasets": [records[name].to_json() for name in sorted(records)],
    }
    atomic_write_json(path, doc)


def register_dataset(entry: DatasetRecord, registry_path: Path | str) -> DatasetRecord:
    """Validate and persist a dataset record; duplicate names are rejected."""
    entry.validate()
    if not entry.root_path.exists():
        raise RegistryError(f"root path does not exist: {entry.root_path}")
    records = load_registry(registry_path)
    if entry.name in records:
        raise RegistryError(f"dataset {entry.name!r} already registered")
    records[entry.name] = entry
    save_registry(registry_path, records)
    return entry


def list_source_images(record: DatasetRecord) -> list[str]:
    """Sorted source-image ids (file stems) under the dataset root."""
    ids = []
    seen = {}
    for p in sorted(record.root_path.rglob("*")):
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS:
            if p.stem in seen:
                raise RegistryError(
                    f"duplicate source image id {p.stem!r}: {seen[p.stem]} vs {p}"
                )
            seen[p.stem] = p
            ids.append(p.stem)
    return sorted(ids)


def source_image_paths(record: DatasetRecord) -> dict[str, Path]:
    paths = {}
    for p in sorted(record.root_path.rglob("*")):
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS:
            paths[p.stem] = p
    return paths


def split_dataset_disjoint(
    record: DatasetRecord,
    held_out_fraction: float,
    seed: int,
) -> tuple[list[str], list[str]]:
    """Split source images into a pretraining set and a fully held-out set.

    The split is at the source-image level so that patches from one image can
    never appear on both sides. Deterministic for a given seed.
    """
    if not {"pretrain", "evaluate"} <= record.role_flags:
        raise RegistryError(
            f"dataset {record.name!r} is not flagged for both pretrain and evaluate"
        )
    if not 0.0 < held_out_fraction < 1.0:
        raise ValueError(f"held_out_fraction must lie in (0, 1), got {held_out_fraction}")
    ids = list_source_images(record)
    n = len(ids)
    if n < 2:
        raise ValueError(f"cannot split dataset {record.name!r} with {n} source image(s)")
    n_held = int(round(held_out_fraction * n))
    n_held = min(max(n_held, 1), n - 1)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    held = sorted(ids[i] for i in perm[:n_held])
    kept = sorted(ids[i] for i in perm[n_held:])
    return kept, held


def held_out_ids(record: DatasetRecord) -> frozenset[str]:
    """Held-out image ids implied by the record's holdout definition."""
    if not {"pretrain", "evaluate"} <= record.role_flags:
        return frozenset()
    _, held = split_dataset_disjoint(record, record.holdout_fraction, record.holdout_seed)
    return frozenset(held)


@dataclass(frozen=True)
class PatchRef:
    """Reference to one preprocessed patch on disk."""

    dataset: str
    image_id: str
    grid_row: int
    grid_col: int
    path: str


@dataclass
class CorpusIndex:
    """Flat shuffled index over all pretraining patches."""

    patches: list[PatchRef]
    per_dataset_counts: dict[str, int]
    seed: int = 0

    def __len__(self) -> int:
        return len(self.patches)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "per_dataset_counts": dict(self.per_dataset_counts),
            "patches": [
                [p.dataset, p.image_id, p.grid_row, p.grid_col, p.path] for p in self.patches
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CorpusIndex":
        patches = [PatchRef(d, i, int(r), int(c), path) for d, i, r, c, path in obj["patches"]]
        return cls(patches=patches, per_dataset_counts=dict(obj["per_dataset_counts"]), seed=int(obj["seed"]))


def load_patch_metadata(patches_dir: Path | str) -> list[dict]:
    """Read a preprocess output directory's ``patches.jsonl``."""
    meta_path = Path(patches_dir) / "patches.jsonl"
    if not meta_path.exists():
        raise RegistryError(f"no patch metadata at {meta_path}; run preprocessing first")
    records = []
    with open(meta_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def build_pretrain_corpus(
    registry: dict[str, DatasetRecord],
    patches_root: Path | str,
    seed: int = 0,
) -> CorpusIndex:
    """Assemble the shuffled pretraining corpus from all pretrain-flagged datasets.

    Held-out image ids of dual-role datasets are excluded. Deterministic for a
    given seed.
    """
    patches_root = Path(patches_root)
    refs: list[PatchRef] = []
    counts: dict[str, int] = {}
    for name in sorted(registry):
        record = registry[name]
        if "pretrain" not in record.role_flags:
            continue
        excluded = held_out_ids(record)
        dataset_dir = patches_root / name
        n = 0
        for meta in load_patch_metadata(dataset_dir):
            if meta["source_image_id"] in excluded:
                continue
            refs.append(
                PatchRef(
                    dataset=name,
                    image_id=meta["source_image_id"],
                    grid_row=int(meta["grid_row"]),
                    grid_col=int(meta["grid_col"]),
                    path=str(dataset_dir / meta["filename"]),
                )
            )
            n += 1
        counts[name] = n
    if not refs:
        raise RegistryError("pretraining corpus is empty")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(refs))
    refs = [refs[i] for i in order]
    return CorpusIndex(patches=refs, per_dataset_counts=counts, seed=seed)


# ---------------------------------------------------------------------------
# Feature store
# ---------------------------------------------------------------------------


@dataclass
class FeatureBag:
    """Ordered patch embeddings for one image, with its image-level label."""

    image_id: str
    features: np.ndarray  # [n, D] float32
    label: int | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype="<f4")
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"bag {self.image_id!r}: features must be [n>=1, D]")
        if not np.isfinite(self.features).all():
            raise ValueError(f"bag {self.image_id!r}: non-finite features")

    @property
    def n_patches(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


def write_feature_store(
    bags: list[FeatureBag],
    prefix: Path | str,
    encoder_id: str = "unknown",
) -> None:
    """Write bags as ``<prefix>.manifest.json`` + ``<prefix>.f32`` (bit-exact)."""
    if not bags:
        raise ValueError("cannot write an empty feature store")
    dim = bags[0].dim
    for bag in bags:
        if bag.dim != dim:
            raise ValueError(
                f"embedding dim mismatch: bag {bag.image_id!r} has D={bag.dim}, expected {dim}"
            )
    manifest_path, blob_path = blob_paths(prefix)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)

    entries = []
    chunks = []
    offset = 0
    for bag in bags:
        entries.append(
            {
                "image_id": bag.image_id,
                "n_patches": bag.n_patches,
                "offset_bytes": offset,
                "label": None if bag.label is None else int(bag.label),
            }
        )
        chunks.append(bag.features.tobytes(order="C"))
        offset += bag.n_patches * dim * 4

    manifest = {
        "version": STORE_VERSION,
        "encoder_id": encoder_id,
        "dim": dim,
        "total_patches": sum(b.n_patches for b in bags),
        "entries": entries,
    }
    atomic_write_bytes(blob_path, b"".join(chunks))
    atomic_write_json(manifest_path, manifest)


def read_feature_store(prefix: Path | str) -> list[FeatureBag]:
    """Read bags back; raises ContainerError on any manifest/blob inconsistency."""
    manifest_path, blob_path = blob_paths(prefix)
    if not manifest_path.exists():
        raise ContainerError(f"missing manifest: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != STORE_VERSION:
        raise ContainerError(f"unknown feature store version {manifest.get('version')!r}")
    dim = int(manifest["dim"])
    total = int(manifest["total_patches"])
    if total != sum(int(e["n_patches"]) for e in manifest["entries"]):
        raise ContainerError("manifest total_patches does not match the sum of bag sizes")
    raw = blob_path.read_bytes()
    if len(raw) != 4 * dim * total:
        raise ContainerError(
            f"blob holds {len(raw) // (4 * dim)} rows but manifest declares {total}"
        )
    bags = []
    for entry in manifest["entries"]:
        n = int(entry["n_patches"])
        offset = int(entry["offset_bytes"])
        flat = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=offset)
        label = entry.get("label")
        bags.append(
            FeatureBag(
                image_id=entry["image_id"],
                features=flat.reshape(n, dim).copy(),
                label=None if label is None else int(label),
            )
        )
    return bags


def read_store_manifest(prefix: Path | str) -> dict:
    manifest_path, _ = blob_paths(prefix)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        return json.load(fh)
