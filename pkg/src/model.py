"""
ProxyTokens: Two-modality classifier assembled from frozen encoders

Wires the per-modality encoders, the gate and the classifier head together
for the three training modes compared in the ablations: the plain
fine-tuned baseline, modality dropout alone, and proxy tokens.
"""

import hashlib
import logging
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Dict, Optional

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor
from src.encoder import (
    ModalityEncoder,
    PretrainedEncoder,
    Slot,
    extract,
    init_adapters,
    init_cmpt,
)
from src.errors import ConfigError, ShapeError
from src.fusion_head import ClassifierHead, PresenceMask, gate_batch, predict
from src.objectives import LabelMode, LossBreakdown, alignment_loss, task_loss, total_loss
from src.synth_data import Split

logger = logging.getLogger("ProxyTokens.Model")

MODALITIES = ("m1", "m2")


class TrainingMode(str, Enum):
    BASELINE = "baseline"
    DROPOUT = "dropout"
    CMPT = "cmpt"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    ff_dim: int = 64
    ln_eps: float = 1e-6
    lora_rank: int = 1
    lora_alpha: float = 1.0
    lora_dropout: float = 0.1
    cmpt_init: str = "cls"
    cmpt_init_std: float = 0.02
    head_init_std: float = 0.02
    cls_attends_cmpt: bool = True
    symmetric_alignment: bool = False

    def validate(self):
        if self.d_model < 1 or self.n_layers < 1 or self.n_heads < 1 or self.ff_dim < 1:
            raise ConfigError("model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.lora_rank < 1:
            raise ConfigError(f"lora_rank must be >= 1, got {self.lora_rank}")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ConfigError(f"lora_dropout must lie in [0, 1), got {self.lora_dropout}")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")
        if self.cmpt_init not in ("cls", "zeros"):
            raise ConfigError(f"cmpt_init must be 'cls' or 'zeros', got {self.cmpt_init!r}")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class ForwardOutput:
    """Logits plus the B×d token matrices the gate and the alignment loss consume"""

    logits: Tensor
    cls1: Tensor
    cls2: Tensor
    cmpt1: Optional[Tensor]
    cmpt2: Optional[Tensor]
    complete: np.ndarray
    attention: Optional[Dict[str, list]] = None


def _scatter_rows(tokens: Optional[Tensor], rows, batch, width):
    """Place ``tokens`` at ``rows`` of a batch×width matrix whose other rows are zero"""
    if tokens is None:
        return Tensor.zeros(batch, width)
    pool = ad.concat_rows([Tensor.zeros(1, width), tokens])
    index = np.zeros(batch, dtype=np.int64)
    index[rows] = 1 + np.arange(len(rows))
    return ad.gather_rows(pool, index)


class CMPTModel:
    """
    Frozen encoders + trainable adapters, proxy tokens and head

    Args:
        encoders (dict): "m1"/"m2" -> ModalityEncoder
        head (ClassifierHead): trainable linear head
        mode (TrainingMode): baseline, dropout or cmpt
        config (ModelConfig): architecture echo
        label_mode (LabelMode): single or multi
    """

    def __init__(self, encoders: Dict[str, ModalityEncoder], head: ClassifierHead, mode, config: ModelConfig, label_mode):
        self.encoders = encoders
        self.head = head
        self.mode = TrainingMode(mode)
        self.config = config
        self.label_mode = LabelMode(label_mode)
        if self.uses_cmpt != all(enc.has_cmpt for enc in encoders.values()):
            raise ConfigError(f"mode '{self.mode.value}' and proxy-token presence disagree")

    @classmethod
    def from_pretrained(
        cls,
        pretrained: Dict[str, PretrainedEncoder],
        config: ModelConfig,
        mode,
        n_outputs,
        label_mode=LabelMode.SINGLE,
        seed=0,
    ):
        """Attach fresh adapters, proxy tokens (cmpt mode only) and a head to frozen encoders"""
        config.validate()
        mode = TrainingMode(mode)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
        encoders = {}
        for modality in MODALITIES:
            base = pretrained[modality].freeze()
            if base.base.d_model != config.d_model:
                raise ShapeError(f"{modality} encoder width {base.base.d_model} != model width {config.d_model}")
            cmpt = init_cmpt(base.cls, rng, config.cmpt_init, config.cmpt_init_std) if mode is TrainingMode.CMPT else None
            adapters = init_adapters(
                config.d_model, base.base.n_layers, config.lora_rank, config.lora_alpha, config.lora_dropout, rng
            )
            encoders[modality] = ModalityEncoder(base, cmpt, adapters, cls_attends_cmpt=config.cls_attends_cmpt)
        head = ClassifierHead.create(config.d_model, n_outputs, rng, init_std=config.head_init_std)
        logger.info(f"Built {mode.value} model with {count_trainable_tensors(encoders, head)} trainable parameters")
        return cls(encoders, head, mode, config, label_mode)

    @property
    def uses_cmpt(self):
        return self.mode is TrainingMode.CMPT

    @property
    def n_outputs(self):
        return self.head.n_outputs

    # ------------------------------------------------------------------ #
    # Forward
    # ------------------------------------------------------------------ #
    def forward(self, batch: Split, training=False, rng=None, gate_present=None, record_attention=False):
        """
        Run the model on a batch

        Args:
            batch (Split): physically available inputs
            training (bool): enable LoRA dropout
            rng (numpy.random.Generator, optional): LoRA dropout stream
            gate_present (ndarray, optional): B×2 availability seen by the
                gate; defaults to the physical availability. Cmpt mode still
                encodes every physically present modality; the other modes
                replace a gated-off modality with its zero placeholder.
            record_attention (bool): keep last-layer attention

        Returns:
            ForwardOutput
        """
        physical = np.asarray(batch.present, dtype=bool)
        gated = physical if gate_present is None else np.asarray(gate_present, dtype=bool) & physical
        n = len(batch)
        d = self.config.d_model
        tokens = {}
        attention = {} if record_attention else None

        for col, modality in enumerate(MODALITIES):
            encoder = self.encoders[modality]
            raw = batch.raw(modality)
            if self.uses_cmpt:
                rows = np.flatnonzero(physical[:, col])
            else:
                rows = np.arange(n)
                raw = np.where(gated[:, col:col + 1], raw, 0.0)
            if rows.size == 0:
                tokens[modality] = (None, None)
                continue
            out = encoder.forward(raw[rows], training=training, rng=rng, record_attention=record_attention)
            cls_rows = _scatter_rows(extract(out, Slot.CLS), rows, n, d)
            cmpt_rows = _scatter_rows(extract(out, Slot.CMPT), rows, n, d) if encoder.has_cmpt else None
            tokens[modality] = (cls_rows, cmpt_rows)
            if record_attention:
                attention[modality] = {"rows": rows, "seq_len": out.seq_len, "heads": out.attention}

        cls1, cmpt1 = tokens["m1"]
        cls2, cmpt2 = tokens["m2"]
        cls1 = cls1 if cls1 is not None else Tensor.zeros(n, d)
        cls2 = cls2 if cls2 is not None else Tensor.zeros(n, d)
        if self.uses_cmpt:
            masks = [PresenceMask(bool(a), bool(b)) for a, b in gated]
            fused = gate_batch(masks, cls1, cls2, cmpt1, cmpt2)
        else:
            fused = ad.add(cls1, cls2)
        return ForwardOutput(
            logits=predict(fused, self.head),
            cls1=cls1,
            cls2=cls2,
            cmpt1=cmpt1,
            cmpt2=cmpt2,
            complete=physical[:, 0] & physical[:, 1],
            attention=attention,
        )

    def loss(self, batch: Split, lam, training=False, rng=None, gate_present=None) -> LossBreakdown:
        """Task loss on the gated prediction plus λ·alignment over physically complete samples"""
        out = self.forward(batch, training=training, rng=rng, gate_present=gate_present)
        task = task_loss(out.logits, batch.labels, mode=self.label_mode)
        if self.uses_cmpt and out.cmpt1 is not None and out.cmpt2 is not None:
            align, n_complete = alignment_loss(
                out.cmpt1,
                out.cls1,
                out.cmpt2,
                out.cls2,
                out.complete,
                stop_gradient=not self.config.symmetric_alignment,
            )
        else:
            align, n_complete = Tensor.zeros(1, 1), 0
        return total_loss(task, align, lam, n_complete)

    def predict_logits(self, split: Split, chunk_size=256):
        """Inference logits as an ndarray, computed in chunks without a tape"""
        parts = []
        with ad.no_grad():
            for start in range(0, len(split), chunk_size):
                index = np.arange(start, min(start + chunk_size, len(split)))
                parts.append(self.forward(split.subset(index)).logits.numpy())
        return np.vstack(parts) if parts else np.zeros((0, self.n_outputs))

    def token_arrays(self, split: Split, chunk_size=256):
        """CLS/CMPT rows for every sample as ndarrays (zero rows for absent modalities)"""
        collected = {"cls1": [], "cls2": [], "cmpt1": [], "cmpt2": []}
        with ad.no_grad():
            for start in range(0, len(split), chunk_size):
                out = self.forward(split.subset(np.arange(start, min(start + chunk_size, len(split)))))
                for key in collected:
                    value = getattr(out, key)
                    if value is not None:
                        collected[key].append(value.numpy())
        return {key: np.vstack(parts) for key, parts in collected.items() if parts}

    # ------------------------------------------------------------------ #
    # Parameters
    # ------------------------------------------------------------------ #
    def frozen_tensors(self) -> Dict[str, Tensor]:
        named = {}
        for modality in MODALITIES:
            named.update(self.encoders[modality].frozen_tensors())
        return named

    def trainable_tensors(self) -> Dict[str, Tensor]:
        named = {}
        for modality in MODALITIES:
            named.update(self.encoders[modality].trainable_tensors())
        named.update(self.head.tensors())
        return named

    def named_tensors(self):
        """name -> (Tensor, tag) in a stable order"""
        named = {name: (t, "frozen") for name, t in self.frozen_tensors().items()}
        named.update({name: (t, "trainable") for name, t in self.trainable_tensors().items()})
        return named

    def checksums(self, tag=None):
        """sha256 of each tensor's bytes, optionally restricted to one tag"""
        return {
            name: hashlib.sha256(np.ascontiguousarray(t.data).tobytes()).hexdigest()
            for name, (t, t_tag) in self.named_tensors().items()
            if tag is None or t_tag == tag
        }

    def count_trainable(self):
        return count_trainable_tensors(self.encoders, self.head)

    def expected_trainable_count(self):
        """8·L·d·r per encoder, d per proxy token, d·C + C for the head"""
        d, r = self.config.d_model, self.config.lora_rank
        total = 0
        for encoder in self.encoders.values():
            total += 8 * encoder.base.n_layers * d * r
            total += d if encoder.has_cmpt else 0
        return total + d * self.n_outputs + self.n_outputs


def count_trainable_tensors(encoders, head):
    tensors = []
    for encoder in encoders.values():
        tensors.extend(encoder.trainable_tensors().values())
    tensors.extend(head.tensors().values())
    return int(sum(t.data.size for t in tensors if t.requires_grad))
