"""
ProxyTokens: Synthetic paired-modality data and missing-modality protocols

Generates two raw modalities from shared and modality-exclusive class
latents, so cross-modal redundancy (ρ) and per-class modality dependence
(exclusive class sets) are tunable, then masks splits according to the
availability protocols used for training and evaluation.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from src.errors import ConfigError, DataError
from src.fusion_head import PresenceMask
from src.objectives import LabelMode, LabelTarget
from src.tensor_io import read_bundle, write_bundle

logger = logging.getLogger("ProxyTokens.SynthData")

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetConfig:
    n_classes: int = 10
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400
    latent_dim: int = 16
    raw_dims: Tuple[int, int] = (64, 64)
    patch_sizes: Tuple[int, int] = (8, 8)
    noise_sigma: Tuple[float, float] = (0.5, 0.5)
    redundancy: float = 0.6
    exclusive_m1: Tuple[int, ...] = (0, 1)
    exclusive_m2: Tuple[int, ...] = (2, 3)
    label_mode: str = "single"
    max_labels: int = 3
    seed: int = 0

    def validate(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("every split needs at least one sample")
        for raw_dim, patch in zip(self.raw_dims, self.patch_sizes):
            if patch < 1 or raw_dim % patch:
                raise ConfigError(f"raw dim {raw_dim} is not divisible by patch size {patch}")
        if not 0.0 <= self.redundancy <= 1.0:
            raise ConfigError(f"redundancy must lie in [0, 1], got {self.redundancy}")
        if any(s < 0 for s in self.noise_sigma):
            raise ConfigError("noise sigma must be non-negative")
        exclusive = set(self.exclusive_m1) | set(self.exclusive_m2)
        if set(self.exclusive_m1) & set(self.exclusive_m2):
            raise ConfigError("exclusive class sets must be disjoint")
        if any(not 0 <= k < self.n_classes for k in exclusive):
            raise ConfigError("exclusive class index out of range")
        if exclusive and len(exclusive) >= self.n_classes:
            raise ConfigError("at least one class must carry signal in both modalities")
        if self.label_mode not in (LabelMode.SINGLE.value, LabelMode.MULTI.value):
            raise ConfigError(f"unknown label mode {self.label_mode!r}")
        if not 1 <= self.max_labels <= self.n_classes:
            raise ConfigError("max_labels must lie in [1, n_classes]")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        tuple_fields = {"raw_dims", "patch_sizes", "noise_sigma", "exclusive_m1", "exclusive_m2"}
        return cls(**{k: tuple(v) if k in tuple_fields else v for k, v in values.items()})

    def confusers(self):
        """Exclusive class -> the class whose signal it borrows in its blind modality"""
        exclusive = sorted(set(self.exclusive_m1) | set(self.exclusive_m2))
        shared = [k for k in range(self.n_classes) if k not in exclusive]
        return {k: shared[i % len(shared)] for i, k in enumerate(exclusive)}


@dataclass(frozen=True)
class SplitStats:
    n_complete: int
    n_m1_only: int
    n_m2_only: int

    @property
    def total(self):
        return self.n_complete + self.n_m1_only + self.n_m2_only

    @classmethod
    def from_present(cls, present):
        present = np.asarray(present, dtype=bool)
        return cls(
            n_complete=int(np.sum(present[:, 0] & present[:, 1])),
            n_m1_only=int(np.sum(present[:, 0] & ~present[:, 1])),
            n_m2_only=int(np.sum(~present[:, 0] & present[:, 1])),
        )

    def to_dict(self):
        return {**asdict(self), "overlap": self.n_complete}


@dataclass
class Sample:
    raw_m1: np.ndarray
    raw_m2: np.ndarray
    mask: PresenceMask
    target: LabelTarget


@dataclass
class Split:
    """Column-oriented split; absent modalities hold all-zero placeholders"""

    name: str
    raw_m1: np.ndarray
    raw_m2: np.ndarray
    present: np.ndarray
    labels: np.ndarray
    label_mode: LabelMode
    n_classes: int

    def __len__(self):
        return len(self.labels)

    def raw(self, modality):
        return self.raw_m1 if modality in (1, "m1") else self.raw_m2

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return replace(
            self,
            raw_m1=self.raw_m1[index],
            raw_m2=self.raw_m2[index],
            present=self.present[index],
            labels=self.labels[index],
        )

    @property
    def masks(self) -> List[PresenceMask]:
        return [PresenceMask(bool(a), bool(b)) for a, b in self.present]

    @property
    def complete(self):
        return self.present[:, 0] & self.present[:, 1]

    @property
    def targets(self) -> List[LabelTarget]:
        if self.label_mode is LabelMode.SINGLE:
            return [LabelTarget.single(int(k), self.n_classes) for k in self.labels]
        return [LabelTarget.multi(row) for row in self.labels]

    def sample(self, i) -> Sample:
        return Sample(self.raw_m1[i], self.raw_m2[i], self.masks[i], self.targets[i])

    @property
    def stats(self):
        return SplitStats.from_present(self.present)


# --------------------------------------------------------------------------- #
# Generation
# --------------------------------------------------------------------------- #
def _class_signals(config: DatasetConfig):
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    shared = rng.normal(size=(config.n_classes, config.latent_dim))
    exclusive = rng.normal(size=(2, config.n_classes, config.latent_dim))
    mixing = [
        rng.normal(size=(dim, config.latent_dim)) / np.sqrt(config.latent_dim) for dim in config.raw_dims
    ]
    rho = config.redundancy
    signal = [rho * shared + (1.0 - rho) * exclusive[m] for m in range(2)]

    # A class exclusive to one modality looks like its confuser in the other.
    confusers = config.confusers()
    for k in config.exclusive_m1:
        signal[1][k] = signal[1][confusers[k]]
    for k in config.exclusive_m2:
        signal[0][k] = signal[0][confusers[k]]
    return [signal[m] @ mixing[m].T for m in range(2)]


def generate(config: DatasetConfig) -> Dict[str, Split]:
    """
    Draw the train/val/test splits (all complete)

    Each sample uses its own generator seeded from (seed, split, index), so
    results do not depend on generation order.
    """
    config.validate()
    prototypes = _class_signals(config)
    sizes = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    mode = LabelMode(config.label_mode)
    splits = {}
    for split_id, name in enumerate(SPLIT_NAMES, start=1):
        n = sizes[name]
        raw = [np.zeros((n, dim)) for dim in config.raw_dims]
        labels = np.zeros(n, dtype=np.int64) if mode is LabelMode.SINGLE else np.zeros((n, config.n_classes))
        for i in range(n):
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, split_id, i]))
            if mode is LabelMode.SINGLE:
                classes = [int(rng.integers(config.n_classes))]
                labels[i] = classes[0]
            else:
                count = int(rng.integers(1, config.max_labels + 1))
                classes = sorted(int(k) for k in rng.choice(config.n_classes, size=count, replace=False))
                labels[i, classes] = 1.0
            for m in range(2):
                raw[m][i] = prototypes[m][classes].sum(axis=0) + config.noise_sigma[m] * rng.normal(
                    size=config.raw_dims[m]
                )
        splits[name] = Split(
            name=name,
            raw_m1=raw[0],
            raw_m2=raw[1],
            present=np.ones((n, 2), dtype=bool),
            labels=labels,
            label_mode=mode,
            n_classes=config.n_classes,
        )
        logger.info(f"Generated {name} split: {n} samples")
    return splits


def nearest_prototype_accuracy(reference: Split, query: Split, view="both"):
    """
    Accuracy of a nearest-class-mean classifier on raw vectors

    Args:
        reference (Split): split whose class means act as prototypes
        query (Split): split to classify
        view (str): "m1", "m2" or "both" (concatenated)
    """
    if reference.label_mode is not LabelMode.SINGLE:
        raise ValueError("nearest-prototype oracle needs single-label data")

    def features(split):
        if view == "m1":
            return split.raw_m1
        if view == "m2":
            return split.raw_m2
        return np.hstack([split.raw_m1, split.raw_m2])

    ref = features(reference)
    prototypes = np.stack([
        ref[reference.labels == k].mean(axis=0) if np.any(reference.labels == k) else np.full(ref.shape[1], np.inf)
        for k in range(reference.n_classes)
    ])
    queries = features(query)
    distances = ((queries[:, None, :] - prototypes[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(distances, axis=1) == query.labels))


# --------------------------------------------------------------------------- #
# Missing-modality protocols
# --------------------------------------------------------------------------- #
class ProtocolKind(str, Enum):
    RATIO_PAIR = "ratio_pair"
    INFERENCE_ONLY = "inference_only"
    ETA_SPLIT = "eta_split"
    ETA_SINGLE = "eta_single"
    SWEEP_POINT = "sweep_point"


@dataclass(frozen=True)
class MissingProtocol:
    """
    How availability is assigned over a split

    ratio_pair / sweep_point: (avail_m1 %, avail_m2 %)
    inference_only: ``modality`` removed from every sample
    eta_split: η/2 % lose m1, η/2 % lose m2
    eta_single: η % lose ``modality``
    """

    kind: ProtocolKind
    avail: Optional[Tuple[float, float]] = None
    eta: Optional[float] = None
    modality: Optional[str] = None
    applies_to: str = field(default="test", compare=False)

    @classmethod
    def complete(cls, applies_to="test"):
        return cls(ProtocolKind.RATIO_PAIR, avail=(100.0, 100.0), applies_to=applies_to)

    @classmethod
    def parse(cls, text, applies_to="test"):
        """Parse ``complete``, ``ratio:a1:a2``, ``sweep:a1:a2``, ``inference_only:m1|m2``, ``eta:η``, ``eta_m1:η``, ``eta_m2:η``"""
        parts = str(text).strip().split(":")
        head = parts[0]
        try:
            if head == "complete" and len(parts) == 1:
                return cls.complete(applies_to)
            if head in ("ratio", "sweep") and len(parts) == 3:
                kind = ProtocolKind.RATIO_PAIR if head == "ratio" else ProtocolKind.SWEEP_POINT
                return cls(kind, avail=(float(parts[1]), float(parts[2])), applies_to=applies_to)
            if head == "inference_only" and len(parts) == 2 and parts[1] in ("m1", "m2"):
                return cls(ProtocolKind.INFERENCE_ONLY, modality=parts[1], applies_to=applies_to)
            if head == "eta" and len(parts) == 2:
                return cls(ProtocolKind.ETA_SPLIT, eta=float(parts[1]), applies_to=applies_to)
            if head in ("eta_m1", "eta_m2") and len(parts) == 2:
                return cls(ProtocolKind.ETA_SINGLE, eta=float(parts[1]), modality=head[-2:], applies_to=applies_to)
        except ValueError as e:
            raise ConfigError(f"malformed protocol {text!r}: {e}") from e
        raise ConfigError(f"unknown protocol {text!r}")

    def __str__(self):
        if self.kind is ProtocolKind.RATIO_PAIR:
            if self.avail == (100.0, 100.0):
                return "complete"
            return f"ratio:{self.avail[0]:g}:{self.avail[1]:g}"
        if self.kind is ProtocolKind.SWEEP_POINT:
            return f"sweep:{self.avail[0]:g}:{self.avail[1]:g}"
        if self.kind is ProtocolKind.INFERENCE_ONLY:
            return f"inference_only:{self.modality}"
        if self.kind is ProtocolKind.ETA_SPLIT:
            return f"eta:{self.eta:g}"
        return f"eta_{self.modality}:{self.eta:g}"


def _round_half_up(percent, n):
    count = Fraction(str(percent)) * n / 100
    return int((count + Fraction(1, 2)).__floor__())


def protocol_counts(protocol: MissingProtocol, n) -> Tuple[int, int]:
    """
    Closed-form (m1-only, m2-only) counts for a split of size ``n``

    Raises:
        DataError: percentages out of range or a combination that would
            leave some sample with no modality
    """
    kind = protocol.kind
    if kind in (ProtocolKind.RATIO_PAIR, ProtocolKind.SWEEP_POINT):
        a1, a2 = protocol.avail
        if not (0 <= a1 <= 100 and 0 <= a2 <= 100):
            raise DataError(f"availability percentages must lie in [0, 100]: {protocol}")
        if a1 + a2 < 100:
            raise DataError(f"infeasible protocol {protocol}: a1 + a2 < 100% forces samples with no modality")
        keep_1, keep_2 = _round_half_up(a1, n), _round_half_up(a2, n)
        if keep_1 + keep_2 < n:
            raise DataError(f"infeasible protocol {protocol} for n={n}")
        return n - keep_2, n - keep_1
    if kind is ProtocolKind.INFERENCE_ONLY:
        return (n, 0) if protocol.modality == "m2" else (0, n)
    if not 0 <= protocol.eta <= 100:
        raise DataError(f"missing rate must lie in [0, 100]: {protocol}")
    if kind is ProtocolKind.ETA_SPLIT:
        each = _round_half_up(protocol.eta / 2, n)
        # both halves round up on odd n at high rates
        return each, min(each, n - each)
    dropped = _round_half_up(protocol.eta, n)
    return (dropped, 0) if protocol.modality == "m2" else (0, dropped)


def apply_protocol(split: Split, protocol: MissingProtocol, seed) -> Tuple[Split, SplitStats]:
    """
    Mask a complete split; masked modalities become zero placeholders

    Returns:
        tuple: (masked Split, SplitStats)
    """
    if not np.all(split.present):
        raise DataError(f"protocols apply to complete splits; {split.name} is already masked")
    n = len(split)
    m1_only, m2_only = protocol_counts(protocol, n)
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 104729])).permutation(n)
    present = np.ones((n, 2), dtype=bool)
    present[order[:m1_only], 1] = False
    present[order[m1_only:m1_only + m2_only], 0] = False

    masked = replace(
        split,
        raw_m1=np.where(present[:, :1], split.raw_m1, 0.0),
        raw_m2=np.where(present[:, 1:], split.raw_m2, 0.0),
        present=present,
    )
    stats = SplitStats.from_present(present)
    logger.debug(f"Applied {protocol} to {split.name}: {stats}")
    return masked, stats


def batch(split: Split, batch_size, seed, epoch=0) -> Iterator[Split]:
    """Seed-deterministic shuffled batches; the last partial batch is kept"""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(split) == 0:
        raise DataError(f"cannot batch empty split {split.name}")
    order = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)])).permutation(len(split))
    for start in range(0, len(split), batch_size):
        yield split.subset(order[start:start + batch_size])


# --------------------------------------------------------------------------- #
# Dataset files
# --------------------------------------------------------------------------- #
def save_dataset(path, config: DatasetConfig, splits: Dict[str, Split]):
    tensors = {}
    stats = {}
    for name, split in splits.items():
        tensors[f"{name}.raw_m1"] = split.raw_m1
        tensors[f"{name}.raw_m2"] = split.raw_m2
        tensors[f"{name}.present"] = split.present.astype(np.float64)
        labels = split.labels.reshape(len(split), -1).astype(np.float64)
        tensors[f"{name}.labels"] = labels
        stats[name] = split.stats.to_dict()
    meta = {"kind": "dataset", "config": config.to_dict(), "stats": stats, "splits": list(splits)}
    write_bundle(path, tensors, meta)
    logger.info(f"Dataset written to {path}")


def load_dataset(path):
    """
    Returns:
        tuple: (DatasetConfig, dict of Split)
    """
    try:
        tensors, _, meta = read_bundle(path)
    except DataError as e:
        raise DataError(f"cannot read dataset: {e}") from e
    if meta.get("kind") != "dataset":
        raise DataError(f"{path} is not a dataset file")
    config = DatasetConfig.from_dict(meta["config"])
    mode = LabelMode(config.label_mode)
    splits = {}
    for name in meta["splits"]:
        labels = tensors[f"{name}.labels"]
        labels = labels[:, 0].astype(np.int64) if mode is LabelMode.SINGLE else labels
        splits[name] = Split(
            name=name,
            raw_m1=tensors[f"{name}.raw_m1"],
            raw_m2=tensors[f"{name}.raw_m2"],
            present=tensors[f"{name}.present"] > 0.5,
            labels=labels,
            label_mode=mode,
            n_classes=config.n_classes,
        )
    return config, splits
