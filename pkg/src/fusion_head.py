"""
ProxyTokens: Gating, additive fusion and the linear classifier head

The gate is a hard switch on modality availability: with both modalities it
fuses the two CLS tokens; with one missing it fuses the available CLS token
with the available modality's proxy token.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor
from src.errors import InvalidSampleError, ShapeError

logger = logging.getLogger("ProxyTokens.FusionHead")


class GateCase(str, Enum):
    BOTH = "both"
    M1_MISSING = "m1_missing"
    M2_MISSING = "m2_missing"


# (slot, modality) of token_a and token_b for each availability case
GATE_TABLE = {
    GateCase.BOTH: (("cls", 1), ("cls", 2)),
    GateCase.M1_MISSING: (("cls", 2), ("cmpt", 2)),
    GateCase.M2_MISSING: (("cls", 1), ("cmpt", 1)),
}


@dataclass(frozen=True)
class PresenceMask:
    m1_present: bool
    m2_present: bool

    @property
    def case(self):
        if self.m1_present and self.m2_present:
            return GateCase.BOTH
        if self.m2_present:
            return GateCase.M1_MISSING
        if self.m1_present:
            return GateCase.M2_MISSING
        raise InvalidSampleError("both modalities are absent")

    @property
    def complete(self):
        return self.m1_present and self.m2_present


@dataclass
class GateOutput:
    token_a: Tensor
    token_b: Tensor
    case: GateCase


@dataclass
class FusedToken:
    value: Tensor


@dataclass
class ClassifierHead:
    """Linear head h(T) = T·W + b"""

    weight: Tensor
    bias: Tensor

    @property
    def n_outputs(self):
        return self.weight.cols

    @classmethod
    def create(cls, d_model, n_outputs, rng, init_std=0.02):
        return cls(
            weight=Tensor(rng.normal(0.0, init_std, size=(d_model, n_outputs)), requires_grad=True),
            bias=Tensor.zeros(1, n_outputs, requires_grad=True),
        )

    def tensors(self):
        return {"head.weight": self.weight, "head.bias": self.bias}


def gate(mask: PresenceMask, cls1=None, cls2=None, cmpt1=None, cmpt2=None) -> GateOutput:
    """
    Select the two tokens to fuse for one sample

    Args:
        mask (PresenceMask): modality availability
        cls1, cls2, cmpt1, cmpt2 (Tensor, optional): 1×d tokens; those of an
            absent modality may be omitted

    Returns:
        GateOutput: (cls1, cls2), (cls2, cmpt2) or (cls1, cmpt1)
    """
    case = mask.case
    tokens = {("cls", 1): cls1, ("cls", 2): cls2, ("cmpt", 1): cmpt1, ("cmpt", 2): cmpt2}
    key_a, key_b = GATE_TABLE[case]
    token_a, token_b = tokens[key_a], tokens[key_b]
    if token_a is None or token_b is None:
        missing = [f"{slot}{m}" for slot, m in (key_a, key_b) if tokens[(slot, m)] is None]
        raise ValueError(f"gate case '{case.value}' needs tokens: {', '.join(missing)}")
    return GateOutput(token_a=token_a, token_b=token_b, case=case)


def fuse(g: GateOutput) -> FusedToken:
    """Componentwise sum, no scaling or normalization"""
    if g.token_a.shape != g.token_b.shape:
        raise ShapeError(f"fuse: token widths differ {g.token_a.shape} vs {g.token_b.shape}")
    return FusedToken(value=ad.add(g.token_a, g.token_b))


def predict(t, head: ClassifierHead):
    """Logits = t·W + b (no activation); ``t`` may be a FusedToken or a B×d batch"""
    value = t.value if isinstance(t, FusedToken) else t
    if value.cols != head.weight.rows:
        raise ShapeError(f"predict: token width {value.cols} vs head input {head.weight.rows}")
    return ad.add_row(ad.matmul(value, head.weight), head.bias)


def gate_batch(
    masks: Sequence[PresenceMask],
    cls1: Tensor,
    cls2: Tensor,
    cmpt1: Optional[Tensor] = None,
    cmpt2: Optional[Tensor] = None,
) -> Tensor:
    """
    Gate and fuse a whole batch; token matrices are B×d and row-aligned with ``masks``

    Rows belonging to an absent modality are never selected, so their
    content is irrelevant.
    """
    batch = len(masks)
    pool_parts = {("cls", 1): cls1, ("cls", 2): cls2, ("cmpt", 1): cmpt1, ("cmpt", 2): cmpt2}
    available = [key for key, value in pool_parts.items() if value is not None]
    for key in available:
        if pool_parts[key].rows != batch:
            raise ShapeError(f"gate_batch: {key[0]}{key[1]} has {pool_parts[key].rows} rows for {batch} masks")
    offsets = {key: i * batch for i, key in enumerate(available)}
    pool = ad.concat_rows([pool_parts[key] for key in available])

    index_a = np.empty(batch, dtype=np.int64)
    index_b = np.empty(batch, dtype=np.int64)
    for row, mask in enumerate(masks):
        key_a, key_b = GATE_TABLE[mask.case]
        if key_a not in offsets or key_b not in offsets:
            raise ValueError(f"gate_batch: case '{mask.case.value}' needs proxy tokens that were not supplied")
        index_a[row] = offsets[key_a] + row
        index_b[row] = offsets[key_b] + row
    return ad.add(ad.gather_rows(pool, index_a), ad.gather_rows(pool, index_b))
