"""
ProxyTokens: Training objectives

Task loss (softmax cross-entropy or multi-label sigmoid BCE), the alignment
loss that pulls each modality's proxy token toward the other modality's
class token on complete samples, and their λ-weighted total.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor
from src.errors import ShapeError

logger = logging.getLogger("ProxyTokens.Objectives")


class LabelMode(str, Enum):
    SINGLE = "single"
    MULTI = "multi"


@dataclass(frozen=True)
class LabelTarget:
    mode: LabelMode
    index: Optional[int] = None
    vector: Optional[tuple] = None

    @classmethod
    def single(cls, index, n_classes):
        if not 0 <= index < n_classes:
            raise IndexError(f"class index {index} out of range for {n_classes} classes")
        return cls(LabelMode.SINGLE, index=int(index))

    @classmethod
    def multi(cls, vector):
        values = tuple(int(v) for v in vector)
        if any(v not in (0, 1) for v in values):
            raise ValueError("multi-label targets must be 0/1")
        return cls(LabelMode.MULTI, vector=values)


@dataclass
class LossBreakdown:
    task: float
    align: float
    total: float
    lam: float
    n_complete_in_batch: int
    tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def to_dict(self):
        return {
            "task": self.task,
            "align": self.align,
            "total": self.total,
            "lambda": self.lam,
            "n_complete_in_batch": self.n_complete_in_batch,
        }


def targets_to_array(targets: Sequence[LabelTarget]):
    """Collapse a uniform-mode target list into an index vector or a 0/1 matrix"""
    if not targets:
        raise ShapeError("empty target batch")
    modes = {t.mode for t in targets}
    if len(modes) != 1:
        raise ValueError("label mode must be uniform within a batch")
    mode = modes.pop()
    if mode is LabelMode.SINGLE:
        return mode, np.array([t.index for t in targets], dtype=np.int64)
    return mode, np.array([t.vector for t in targets], dtype=np.float64)


def task_loss(logits: Tensor, targets: Union[Sequence[LabelTarget], np.ndarray], mode=None):
    """
    Mean cross-entropy (single) or mean sigmoid BCE over all label slots (multi)

    Args:
        logits (Tensor): B×C
        targets: LabelTarget list, or an index vector / 0-1 matrix with ``mode``
        mode (LabelMode, optional): required when ``targets`` is an array
    """
    if isinstance(targets, np.ndarray):
        if mode is None:
            raise ValueError("mode is required when targets are given as an array")
        mode, array = LabelMode(mode), targets
    else:
        mode, array = targets_to_array(targets)
    if logits.rows == 0 or len(array) == 0:
        raise ShapeError("task_loss: empty batch")
    if mode is LabelMode.SINGLE:
        return ad.cross_entropy(logits, array)
    return ad.bce_with_logits(logits, array)


def mse(a: Tensor, b: Tensor):
    """Mean over all coordinates of squared differences"""
    if a.shape != b.shape:
        raise ShapeError(f"mse: width mismatch {a.shape} vs {b.shape}")
    diff = ad.sub(a, b)
    return ad.mean_all(ad.mul(diff, diff))


def alignment_loss(cmpt1, cls1, cmpt2, cls2, complete, stop_gradient=True):
    """
    Sum over complete samples of mse(cmpt1, cls2) + mse(cmpt2, cls1), divided by their count

    Args:
        cmpt1, cls1, cmpt2, cls2 (Tensor): B×d, row-aligned with ``complete``;
            rows of incomplete samples are ignored
        complete (array-like of bool): both modalities physically forwarded
        stop_gradient (bool): treat the CLS operands as regression targets

    Returns:
        tuple: (Tensor 1×1, n_complete)
    """
    complete = np.asarray(complete, dtype=bool)
    widths = {t.cols for t in (cmpt1, cls1, cmpt2, cls2)}
    if len(widths) != 1:
        raise ShapeError(f"alignment_loss: token widths differ {sorted(widths)}")
    index = np.flatnonzero(complete)
    n_complete = int(index.size)
    if n_complete == 0:
        return Tensor.zeros(1, 1), 0

    def target(token):
        picked = ad.gather_rows(token, index)
        return ad.detach(picked) if stop_gradient else picked

    width = widths.pop()
    diff_1 = ad.sub(ad.gather_rows(cmpt1, index), target(cls2))
    diff_2 = ad.sub(ad.gather_rows(cmpt2, index), target(cls1))
    squared = ad.add(ad.sum_all(ad.mul(diff_1, diff_1)), ad.sum_all(ad.mul(diff_2, diff_2)))
    return ad.scale(squared, 1.0 / (width * n_complete)), n_complete


def total_loss(task, align, lam, n_complete=0) -> LossBreakdown:
    """L_total = L_task + λ·L_align; accepts Tensors (keeps the graph) or floats"""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    task_t = task if isinstance(task, Tensor) else Tensor(task)
    align_t = align if isinstance(align, Tensor) else Tensor(align)
    total = ad.add(task_t, ad.scale(align_t, lam))
    return LossBreakdown(
        task=task_t.item(),
        align=align_t.item(),
        total=total.item(),
        lam=float(lam),
        n_complete_in_batch=int(n_complete),
        tensor=total,
    )
