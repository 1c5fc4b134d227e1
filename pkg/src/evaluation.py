"""
ProxyTokens: Metrics, protocol-driven evaluation, sweeps and ablations

All evaluation runs without a tape and never mutates the model, so sweep
points and ablation cells can run concurrently and be merged in axis order.
"""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src import autodiff as ad
from src.errors import CMPTError, DataError, ShapeError
from src.model import CMPTModel, ModelConfig, TrainingMode
from src.objectives import LabelMode
from src.synth_data import MissingProtocol, ProtocolKind, Split, apply_protocol
from src.training import TrainConfig, build_and_train

logger = logging.getLogger("ProxyTokens.Evaluation")

SCENARIOS = {
    "both": "complete",
    "m1_missing": "inference_only:m1",
    "m2_missing": "inference_only:m2",
}
METRIC_NAMES = ("accuracy", "f1_macro", "f1_micro")


# --------------------------------------------------------------------------- #
# Metrics
# --------------------------------------------------------------------------- #
@dataclass
class Metrics:
    accuracy: float
    f1_macro: float
    f1_micro: float
    per_class_f1: List[float]
    support: List[int]
    protocol: str = ""
    n_samples: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        return cls(**values)


def _decisions(predictions, targets, mode, n_classes):
    """Binary n×C prediction/target indicator matrices"""
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    if mode is LabelMode.SINGLE:
        pred_index = np.argmax(predictions, axis=1) if predictions.ndim == 2 else predictions.astype(np.int64)
        target_index = targets.astype(np.int64)
        if n_classes is None:
            n_classes = predictions.shape[1] if predictions.ndim == 2 else int(max(pred_index.max(), target_index.max())) + 1
        eye = np.eye(n_classes, dtype=bool)
        return eye[pred_index], eye[target_index]
    if predictions.shape != targets.shape:
        raise ShapeError(f"multi-label predictions {predictions.shape} vs targets {targets.shape}")
    if predictions.dtype == bool:
        pred = predictions
    elif np.issubdtype(predictions.dtype, np.integer):
        pred = predictions >= 1  # 0/1 decisions, not logits
    else:
        pred = predictions >= 0.0
    return pred, targets > 0.5


def compute_metrics(predictions, targets, mode, n_classes=None, protocol="") -> Metrics:
    """
    Accuracy, macro/micro F1 and per-class F1 from integer confusion counts

    Args:
        predictions (array-like): logits (n×C; argmax for single-label,
            logit >= 0 i.e. sigmoid >= 0.5 for multi-label), class indices
            (single-label) or a boolean or integer 0/1 n×C decision matrix
            (multi-label)
        targets (array-like): class indices or a 0/1 n×C matrix
        mode (LabelMode | str): single or multi
        n_classes (int, optional): required for index predictions whose
            largest class may be absent
        protocol (str): echoed into the result

    Returns:
        Metrics: classes with no predictions and no targets score F1 = 0
    """
    mode = LabelMode(mode)
    if len(predictions) == 0 or len(targets) == 0:
        raise ValueError("compute_metrics: empty input")
    if len(predictions) != len(targets):
        raise ShapeError(f"compute_metrics: {len(predictions)} predictions vs {len(targets)} targets")
    pred, true = _decisions(predictions, targets, mode, n_classes)

    tp = np.sum(pred & true, axis=0).astype(np.int64)
    fp = np.sum(pred & ~true, axis=0).astype(np.int64)
    fn = np.sum(~pred & true, axis=0).astype(np.int64)
    denominators = 2 * tp + fp + fn
    per_class = [2 * int(t) / int(den) if den else 0.0 for t, den in zip(tp, denominators)]
    micro_den = int(2 * tp.sum() + fp.sum() + fn.sum())
    f1_micro = 2 * int(tp.sum()) / micro_den if micro_den else 0.0

    if mode is LabelMode.SINGLE:
        accuracy = int(tp.sum()) / len(true)
    else:
        accuracy = float(np.mean(np.all(pred == true, axis=1)))
    return Metrics(
        accuracy=float(accuracy),
        f1_macro=float(np.mean(per_class)),
        f1_micro=float(f1_micro),
        per_class_f1=[float(v) for v in per_class],
        support=[int(v) for v in true.sum(axis=0)],
        protocol=str(protocol),
        n_samples=int(len(true)),
    )


# --------------------------------------------------------------------------- #
# Protocol evaluation
# --------------------------------------------------------------------------- #
def _as_protocol(protocol):
    return protocol if isinstance(protocol, MissingProtocol) else MissingProtocol.parse(protocol)


def evaluate(model: CMPTModel, test: Split, protocol="complete", seed=0) -> Metrics:
    """
    Mask ``test`` with ``protocol`` and score the model's gated predictions

    Raises:
        DataError: the protocol is infeasible for this split
    """
    protocol = _as_protocol(protocol)
    masked, stats = apply_protocol(test, protocol, seed)
    logits = model.predict_logits(masked)
    metrics = compute_metrics(logits, masked.labels, model.label_mode, n_classes=model.n_outputs, protocol=str(protocol))
    logger.info(
        f"Evaluated {protocol} ({stats.n_complete}/{stats.n_m1_only}/{stats.n_m2_only}): "
        f"accuracy {metrics.accuracy:.4f}, f1_macro {metrics.f1_macro:.4f}"
    )
    return metrics


@dataclass
class TransferResult:
    train_protocol: str
    metrics: Dict[str, Metrics]

    def to_dict(self):
        return {"train_protocol": self.train_protocol, "metrics": {k: m.to_dict() for k, m in self.metrics.items()}}


def evaluate_transfer(model, test: Split, train_protocol, test_protocols: Sequence, seed=0) -> TransferResult:
    """Score one trained model under every listed test protocol"""
    results = {}
    for protocol in test_protocols:
        protocol = _as_protocol(protocol)
        results[str(protocol)] = evaluate(model, test, protocol, seed)
    return TransferResult(train_protocol=str(_as_protocol(train_protocol)), metrics=results)


# --------------------------------------------------------------------------- #
# Missing-rate sweep
# --------------------------------------------------------------------------- #
@dataclass
class SweepResult:
    axis: str
    rows: List[tuple] = field(default_factory=list)

    @property
    def x_values(self):
        return [x for x, _ in self.rows]

    def to_dict(self):
        return {"axis": self.axis, "rows": [{"x": x, "metrics": m.to_dict()} for x, m in self.rows]}


def sweep_seed(eval_seed, x):
    return int(np.random.SeedSequence([int(eval_seed), int(round(float(x) * 1000))]).generate_state(1)[0])


def sweep_protocol(x, axis="m2"):
    avail = (100.0, float(x)) if axis == "m2" else (float(x), 100.0)
    return MissingProtocol(ProtocolKind.SWEEP_POINT, avail=avail)


def sweep_missing(model, test: Split, x_values, eval_seed=0, axis="m2", jobs=1) -> SweepResult:
    """
    Evaluate at availability (100%, x%) for each x, or (x%, 100%) with ``axis="m1"``

    Rows come back ordered by x descending.
    """
    if axis not in ("m1", "m2"):
        raise ValueError(f"sweep axis must be 'm1' or 'm2', got {axis!r}")
    points = sorted({float(x) for x in x_values}, reverse=True)
    if any(not 0.0 <= x <= 100.0 for x in points):
        raise DataError("sweep values must lie in [0, 100]")

    def run(x):
        return evaluate(model, test, sweep_protocol(x, axis), sweep_seed(eval_seed, x))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            metrics = list(pool.map(run, points))
    else:
        metrics = [run(x) for x in points]
    return SweepResult(axis=axis, rows=list(zip(points, metrics)))


# --------------------------------------------------------------------------- #
# Per-class analyses
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class ClassDelta:
    class_index: int
    f1_with: float
    f1_without: float
    delta: float
    bottom_quartile: bool = False
    exclusive_to: Optional[str] = None


def exclusive_classes(exclusive_m1=(), exclusive_m2=()) -> Dict[int, str]:
    """Class index -> the only modality carrying its signal"""
    owners = {int(k): "m1" for k in exclusive_m1}
    owners.update({int(k): "m2" for k in exclusive_m2})
    return owners


def per_class_delta(metrics_with: Metrics, metrics_without: Metrics, exclusive=None) -> List[ClassDelta]:
    """
    Per-class F1 improvement, largest first (ties by class index)

    Args:
        metrics_with (Metrics): e.g. the proxy-token model under a protocol
        metrics_without (Metrics): the comparison model under the same protocol
        exclusive (dict, optional): class index -> modality that alone
            carries the class signal (see ``exclusive_classes``)

    Returns:
        list[ClassDelta]: the last ceil(C/4) rows, the classes recovered
        least, have ``bottom_quartile`` set
    """
    if len(metrics_with.per_class_f1) != len(metrics_without.per_class_f1):
        raise ShapeError(
            f"per_class_delta: {len(metrics_with.per_class_f1)} vs {len(metrics_without.per_class_f1)} classes"
        )
    exclusive = exclusive or {}
    ranked = sorted(
        enumerate(zip(metrics_with.per_class_f1, metrics_without.per_class_f1)),
        key=lambda item: (-(item[1][0] - item[1][1]), item[0]),
    )
    cutoff = len(ranked) - math.ceil(len(ranked) / 4)
    return [
        ClassDelta(
            k, float(a), float(b), float(a - b), bottom_quartile=position >= cutoff, exclusive_to=exclusive.get(k)
        )
        for position, (k, (a, b)) in enumerate(ranked)
    ]


@dataclass
class DependenceResult:
    both: Metrics
    m1_only: Metrics
    m2_only: Metrics
    gaps: List[dict]

    def to_dict(self):
        return {
            "both": self.both.to_dict(),
            "m1_only": self.m1_only.to_dict(),
            "m2_only": self.m2_only.to_dict(),
            "gaps": self.gaps,
        }


def modality_dependence(model, test: Split, seed=0) -> DependenceResult:
    """
    Per-class F1 with both modalities, m1 alone and m2 alone

    ``gap = both - max(m1_only, m2_only)``; classes that need both
    modalities sort first.
    """
    both = evaluate(model, test, "complete", seed)
    m1_only = evaluate(model, test, "inference_only:m2", seed)
    m2_only = evaluate(model, test, "inference_only:m1", seed)
    gaps = []
    for k, (b, a1, a2) in enumerate(zip(both.per_class_f1, m1_only.per_class_f1, m2_only.per_class_f1)):
        gaps.append({"class": k, "both": b, "m1_only": a1, "m2_only": a2, "gap": b - max(a1, a2)})
    gaps.sort(key=lambda row: (-row["gap"], row["class"]))
    return DependenceResult(both=both, m1_only=m1_only, m2_only=m2_only, gaps=gaps)


# --------------------------------------------------------------------------- #
# Proxy-token diagnostics
# --------------------------------------------------------------------------- #
def alignment_diagnostics(model: CMPTModel, split: Split, seed=0):
    """
    Held-out alignment quality on the complete samples of ``split``

    Returns:
        dict: mean mse(CMPT_m1, CLS_m2), mean mse(CMPT_m2, CLS_m1) and the
        shuffled-pair controls (CLS of one sample against another's)
    """
    if not model.uses_cmpt:
        raise ValueError("alignment diagnostics need a model with proxy tokens")
    complete = split.subset(np.flatnonzero(split.complete))
    if len(complete) < 2:
        raise DataError("alignment diagnostics need at least two complete samples")
    tokens = model.token_arrays(complete)
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 3])).permutation(len(complete))
    partner = np.empty_like(order)
    partner[order] = np.roll(order, -1)

    def mse(a, b):
        return float(np.mean((a - b) ** 2))

    return {
        "n_samples": len(complete),
        "mse_cmpt1_cls2": mse(tokens["cmpt1"], tokens["cls2"]),
        "mse_cmpt2_cls1": mse(tokens["cmpt2"], tokens["cls1"]),
        "shuffled_cls2": mse(tokens["cls2"], tokens["cls2"][partner]),
        "shuffled_cls1": mse(tokens["cls1"], tokens["cls1"][partner]),
    }


def dump_attention(model: CMPTModel, split: Split, path, n_samples=4):
    """
    Write last-layer attention rows of the CLS and CMPT slots as JSON

    Args:
        model (CMPTModel): trained model
        split (Split): the first ``n_samples`` rows are used
        path (str | Path): output file

    Returns:
        dict: the written document
    """
    head_rows = split.subset(np.arange(min(n_samples, len(split))))
    with ad.no_grad():
        out = model.forward(head_rows, record_attention=True)
    document = {"format": "cmpt-attention/1", "mode": model.mode.value, "modalities": {}}
    for modality, record in out.attention.items():
        seq_len = record["seq_len"]
        has_cmpt = model.encoders[modality].has_cmpt
        cls_slot = 1 if has_cmpt else 0
        samples = []
        for position, sample_index in enumerate(record["rows"]):
            heads = []
            for probs in record["heads"]:
                block = probs[position]
                entry = {"cls": block[cls_slot].tolist()}
                if has_cmpt:
                    entry["cmpt"] = block[0].tolist()
                heads.append(entry)
            samples.append({"index": int(sample_index), "heads": heads})
        slots = (["CMPT"] if has_cmpt else []) + ["CLS"] + [f"content[{i}]" for i in range(seq_len - cls_slot - 1)]
        document["modalities"][modality] = {"seq_len": seq_len, "slots": slots, "samples": samples}

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, sort_keys=True)
    logger.info(f"Attention rows for {len(head_rows)} samples written to {path}")
    return document


# --------------------------------------------------------------------------- #
# Ablations
# --------------------------------------------------------------------------- #
ABLATION_AXES = ("lambda", "rank", "mode")


@dataclass
class AblationCell:
    value: object
    seed: int
    n_trainable: int
    metrics: Dict[str, Metrics]

    def to_dict(self):
        return {
            "value": self.value,
            "seed": self.seed,
            "n_trainable": self.n_trainable,
            "metrics": {k: m.to_dict() for k, m in self.metrics.items()},
        }


@dataclass
class AblationGrid:
    axis: str
    values: List[object]
    seeds: List[int]
    cells: List[AblationCell]

    @property
    def scenarios(self):
        return list(SCENARIOS)

    def to_frame(self) -> pd.DataFrame:
        records = []
        for cell in self.cells:
            for scenario, metrics in cell.metrics.items():
                records.append({
                    "value": str(cell.value),
                    "seed": cell.seed,
                    "scenario": scenario,
                    "n_trainable": cell.n_trainable,
                    **{name: getattr(metrics, name) for name in METRIC_NAMES},
                })
        return pd.DataFrame.from_records(records)

    def medians(self) -> pd.DataFrame:
        """Median over seeds of each metric, indexed by (value, scenario)"""
        frame = self.to_frame()
        order = {str(v): i for i, v in enumerate(self.values)}
        medians = frame.groupby(["value", "scenario"], sort=False)[list(METRIC_NAMES)].median().reset_index()
        medians["_order"] = medians["value"].map(order)
        return medians.sort_values(["_order", "scenario"], kind="stable").drop(columns="_order").reset_index(drop=True)

    def to_dict(self):
        return {
            "axis": self.axis,
            "values": list(self.values),
            "seeds": list(self.seeds),
            "scenarios": self.scenarios,
            "cells": [cell.to_dict() for cell in self.cells],
        }


def _cell_configs(axis, value, model_config: ModelConfig, train_config: TrainConfig, seed):
    train_config = replace(train_config, seed=int(seed))
    if axis == "lambda":
        return model_config, replace(train_config, lam=float(value))
    if axis == "rank":
        return replace(model_config, lora_rank=int(value)), train_config
    return model_config, replace(train_config, mode=TrainingMode(value).value)


def _run_cell(axis, value, seed, pretrained, train_split, test_split, model_config, train_config, eval_seed):
    cell_model, cell_train = _cell_configs(axis, value, model_config, train_config, seed)
    result = build_and_train(pretrained, train_split, cell_model, cell_train)
    metrics = {name: evaluate(result.model, test_split, protocol, eval_seed) for name, protocol in SCENARIOS.items()}
    return AblationCell(value=value, seed=int(seed), n_trainable=result.model.count_trainable(), metrics=metrics)


def run_ablation(
    axis,
    values,
    pretrained,
    train_split: Split,
    test_split: Split,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seeds=(0,),
    eval_seed=0,
    jobs=1,
) -> AblationGrid:
    """
    Train and evaluate one model per (value, seed) cell from the same frozen encoders

    Args:
        axis (str): "lambda", "rank" or "mode"
        values (list): axis values
        pretrained (dict): frozen encoders shared by every cell
        train_split, test_split (Split): masked training data, complete test data
        seeds (list[int]): training seeds per value
        jobs (int): worker processes for cells

    Raises:
        CMPTError: of the failing cell's type, naming the cell
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    values = list(values)
    if not values:
        raise ValueError("ablation needs at least one value")
    cells_ids = [(value, int(seed)) for value in values for seed in seeds]
    logger.info(f"Ablation over {axis}: {len(cells_ids)} cells, {jobs} job(s)")
    shared = (pretrained, train_split, test_split, model_config, train_config, eval_seed)

    cells = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, axis, value, seed, *shared) for value, seed in cells_ids]
            for (value, seed), future in zip(cells_ids, futures):
                cells.append(_collect(axis, value, seed, future.result))
    else:
        for value, seed in cells_ids:
            cells.append(_collect(axis, value, seed, lambda: _run_cell(axis, value, seed, *shared)))
    return AblationGrid(axis=axis, values=values, seeds=[int(s) for s in seeds], cells=cells)


def _collect(axis, value, seed, produce):
    try:
        return produce()
    except CMPTError as e:
        raise type(e)(f"ablation cell {axis}={value} seed={seed} failed: {e}") from e
