"""Time-series data model, corpus files, and patchification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import records
from .errors import ConfigError, DataError

ROLES = ("source", "target")


@dataclass(frozen=True)
class TimeSeriesInstance:
    """One multivariate series: a (channels, time) float matrix plus an optional label."""

    id: str
    values: np.ndarray
    label: int | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError(f"instance {self.id!r}: values must be 2-D (channels, time)")
        if not np.all(np.isfinite(values)):
            raise DataError(f"instance {self.id!r}: non-finite values")
        object.__setattr__(self, "values", values)
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class DomainDataset:
    """A homogeneous collection of instances from one domain.

    Source instances must all be labeled. Target instances may carry
    labels, but those are only ever read by evaluation, never by
    labeling. Instances are immutable after construction.
    """

    instances: tuple[TimeSeriesInstance, ...]
    n_channels: int
    length: int
    n_classes: int
    role: str

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        if self.role not in ROLES:
            raise DataError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.n_classes < 1:
            raise DataError("n_classes must be >= 1")
        seen = set()
        for inst in self.instances:
            if inst.values.shape != (self.n_channels, self.length):
                raise DataError(
                    f"instance {inst.id!r}: shape {inst.values.shape} does not match "
                    f"dataset shape {(self.n_channels, self.length)}"
                )
            if inst.id in seen:
                raise DataError(f"duplicate instance id {inst.id!r}")
            seen.add(inst.id)
            if inst.label is None:
                if self.role == "source":
                    raise DataError(f"source instance {inst.id!r} is unlabeled")
            elif not 0 <= inst.label < self.n_classes:
                raise DataError(
                    f"instance {inst.id!r}: label {inst.label} out of range [0, {self.n_classes})"
                )

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def labels(self) -> list[int | None]:
        return [inst.label for inst in self.instances]

    @classmethod
    def build(cls, instances, n_classes: int, role: str) -> "DomainDataset":
        """Infer (n_channels, length) from the first instance."""
        instances = tuple(instances)
        if not instances:
            raise DataError("dataset needs at least one instance")
        first = instances[0]
        return cls(
            instances=instances,
            n_channels=first.n_channels,
            length=first.length,
            n_classes=n_classes,
            role=role,
        )


@dataclass(frozen=True)
class PatchGrid:
    """Non-overlapping patches of one instance: (n_channels, n_patches, patch_length)."""

    patches: np.ndarray
    patch_length: int
    n_patches: int


def patchify(instance: TimeSeriesInstance, patch_length: int) -> PatchGrid:
    """Split every channel into consecutive non-overlapping windows.

    The trailing ``length mod patch_length`` steps are dropped. All
    channels share the same patch boundaries.
    """
    m = int(patch_length)
    if m < 2:
        raise ConfigError(f"patch_length must be >= 2, got {m}")
    if m > instance.length:
        raise DataError(
            f"patch_length {m} exceeds series length {instance.length}: empty patch grid"
        )
    n = instance.length // m
    patches = instance.values[:, : n * m].reshape(instance.n_channels, n, m)
    return PatchGrid(patches=patches, patch_length=m, n_patches=n)


def save_corpus(path, dataset: DomainDataset, config: dict | None = None) -> None:
    header = {
        "kind": "corpus",
        "role": dataset.role,
        "n_channels": dataset.n_channels,
        "length": dataset.length,
        "n_classes": dataset.n_classes,
        "n_instances": len(dataset),
    }
    if config is not None:
        header["config"] = config
    recs = (
        {"id": inst.id, "label": inst.label, "channels": inst.values.tolist()}
        for inst in dataset
    )
    records.write_record_file(path, header, recs)


def load_corpus(path) -> DomainDataset:
    """Load a corpus file, validating shapes against the header."""
    header, recs = records.read_record_file(path, expected_kind="corpus")
    for key in ("role", "n_channels", "length", "n_classes"):
        if key not in header:
            raise DataError(f"{path}: corpus header missing {key!r}")
    n_channels = int(header["n_channels"])
    length = int(header["length"])
    instances = []
    for rec in recs:
        rid = rec.get("id")
        if not isinstance(rid, str) or not rid:
            raise DataError(f"{path}: record without a string id")
        channels = rec.get("channels")
        if not isinstance(channels, list) or len(channels) != n_channels:
            raise DataError(f"instance {rid!r}: expected {n_channels} channels")
        lengths = {len(ch) if isinstance(ch, list) else -1 for ch in channels}
        if lengths != {length}:
            raise DataError(
                f"instance {rid!r}: channel length mismatch, expected {length}, got {sorted(lengths)}"
            )
        instances.append(
            TimeSeriesInstance(id=rid, values=np.asarray(channels, dtype=np.float64), label=rec.get("label"))
        )
    return DomainDataset(
        instances=tuple(instances),
        n_channels=n_channels,
        length=length,
        n_classes=int(header["n_classes"]),
        role=str(header["role"]),
    )


def strip_labels(dataset: DomainDataset) -> DomainDataset:
    """Copy of the dataset with all labels removed (role forced to target)."""
    return DomainDataset(
        instances=tuple(
            TimeSeriesInstance(id=i.id, values=i.values, label=None) for i in dataset
        ),
        n_channels=dataset.n_channels,
        length=dataset.length,
        n_classes=dataset.n_classes,
        role="target",
    )


def save_truth(path, dataset: DomainDataset, config: dict | None = None) -> None:
    """Write id -> label pairs for sealed evaluation use."""
    missing = [inst.id for inst in dataset if inst.label is None]
    if missing:
        raise DataError(f"cannot write truth for unlabeled instances: {missing[:3]}")
    header = {"kind": "truth", "n_classes": dataset.n_classes, "n_instances": len(dataset)}
    if config is not None:
        header["config"] = config
    records.write_record_file(
        path, header, ({"id": inst.id, "label": inst.label} for inst in dataset)
    )


def load_truth(path) -> tuple[dict[str, int], int]:
    """Read a truth file; returns (id -> label, n_classes)."""
    header, recs = records.read_record_file(path, expected_kind="truth")
    if "n_classes" not in header:
        raise DataError(f"{path}: truth header missing 'n_classes'")
    out: dict[str, int] = {}
    for rec in recs:
        rid = rec.get("id")
        if not isinstance(rid, str) or rid in out:
            raise DataError(f"{path}: missing or duplicate id in truth record")
        if not isinstance(rec.get("label"), int):
            raise DataError(f"truth record {rid!r}: label must be an integer")
        out[rid] = rec["label"]
    return out, int(header["n_classes"])
