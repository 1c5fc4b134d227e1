"""
ProxyTokens: Per-modality transformer encoder

Embeds a raw modality vector into patch tokens, prepends the CMPT and CLS
slots, and runs a pre-norm transformer whose frozen projections are adapted
with low-rank factors. Batches of equal-length sequences are stacked into one
(B·n)×d matrix; attention runs per sequence on B×n×n score blocks.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor
from src.errors import ShapeError

logger = logging.getLogger("ProxyTokens.Encoder")

MASK_VALUE = -1e9


class Slot(str, Enum):
    CMPT = "CMPT"
    CLS = "CLS"


class AdapterTarget(str, Enum):
    QUERY = "query"
    KEY = "key"
    VALUE = "value"
    OUTPUT = "output"


# --------------------------------------------------------------------------- #
# Domain types
# --------------------------------------------------------------------------- #
@dataclass
class EmbedderParams:
    """Patch projection and positional table for one modality"""

    patch_size: int
    projection: Tensor
    positional: Tensor

    @property
    def max_tokens(self):
        return self.positional.rows

    def tensors(self):
        return {"embed.projection": self.projection, "embed.positional": self.positional}


@dataclass
class SpecialTokens:
    cls: Tensor
    cmpt: Optional[Tensor] = None


@dataclass
class AssembledSequence:
    """
    Packed token matrix for one or more sequences of identical layout

    Each sequence occupies ``seq_len`` consecutive rows laid out as
    [CMPT, CLS, content...] (or [CLS, content...] when the model carries no
    proxy token).
    """

    tokens: Tensor
    seq_len: int
    has_cmpt: bool = True

    @property
    def n_sequences(self):
        return self.tokens.rows // self.seq_len

    @property
    def content_length(self):
        return self.seq_len - self.offset

    @property
    def offset(self):
        return 2 if self.has_cmpt else 1

    @property
    def slot_map(self):
        slots = {}
        if self.has_cmpt:
            slots[0] = Slot.CMPT.value
        slots[self.offset - 1] = Slot.CLS.value
        for i in range(self.content_length):
            slots[self.offset + i] = f"content[{i}]"
        return slots

    def slot_index(self, which):
        which = Slot(which)
        if which is Slot.CMPT:
            if not self.has_cmpt:
                raise ValueError("sequence has no CMPT slot")
            return 0
        return self.offset - 1


@dataclass
class EncoderLayer:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor
    norm1_gain: Tensor
    norm1_bias: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor

    def projection(self, target):
        return {
            AdapterTarget.QUERY: self.w_q,
            AdapterTarget.KEY: self.w_k,
            AdapterTarget.VALUE: self.w_v,
            AdapterTarget.OUTPUT: self.w_o,
        }[AdapterTarget(target)]


@dataclass
class EncoderBase:
    layers: List[EncoderLayer]
    final_gain: Tensor
    final_bias: Tensor
    n_heads: int
    d_model: int
    ff_dim: int
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ShapeError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")

    @property
    def n_layers(self):
        return len(self.layers)

    def tensors(self):
        named = {}
        for index, layer in enumerate(self.layers):
            for key, value in vars(layer).items():
                named[f"base.layers.{index}.{key}"] = value
        named["base.final_gain"] = self.final_gain
        named["base.final_bias"] = self.final_bias
        return named


@dataclass
class LoraAdapter:
    """Rank-r factors attached to one frozen projection"""

    down: Tensor
    up: Tensor
    rank: int
    alpha: float
    dropout_p: float
    target: AdapterTarget
    layer: int

    @property
    def scaling(self):
        return self.alpha / self.rank

    @classmethod
    def create(cls, d_model, rank, alpha, dropout_p, target, layer, rng, init_std=0.02):
        if rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {rank}")
        down = Tensor(rng.normal(0.0, init_std, size=(d_model, rank)), requires_grad=True)
        up = Tensor.zeros(rank, d_model, requires_grad=True)
        return cls(down, up, rank, alpha, dropout_p, AdapterTarget(target), layer)


@dataclass
class EncodedSequence:
    tokens: Tensor
    seq_len: int
    has_cmpt: bool = True
    attention: Optional[List[np.ndarray]] = field(default=None, repr=False)

    @property
    def n_sequences(self):
        return self.tokens.rows // self.seq_len

    def row(self, which):
        return extract(self, which)


@dataclass
class PretrainedEncoder:
    """Frozen output of unimodal pretraining for one modality"""

    modality: str
    embedder: EmbedderParams
    cls: Tensor
    base: EncoderBase

    def tensors(self):
        named = dict(self.embedder.tensors())
        named["cls"] = self.cls
        named.update(self.base.tensors())
        return named

    def freeze(self):
        for tensor in self.tensors().values():
            tensor.requires_grad = False
            tensor.grad = None
        return self


AdapterMap = Dict[Tuple[AdapterTarget, int], LoraAdapter]


# --------------------------------------------------------------------------- #
# Initialization
# --------------------------------------------------------------------------- #
def init_embedder(patch_size, d_model, max_tokens, rng, trainable=True):
    projection = rng.normal(0.0, 1.0 / np.sqrt(patch_size), size=(patch_size, d_model))
    positional = rng.normal(0.0, 0.02, size=(max_tokens, d_model))
    return EmbedderParams(
        patch_size=patch_size,
        projection=Tensor(projection, requires_grad=trainable),
        positional=Tensor(positional, requires_grad=trainable),
    )


def init_encoder_base(d_model, n_layers, n_heads, ff_dim, rng, ln_eps=1e-6, trainable=True):
    def weight(fan_in, fan_out):
        return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)), requires_grad=trainable)

    def constant(width, value):
        return Tensor(np.full((1, width), value), requires_grad=trainable)

    layers = [
        EncoderLayer(
            w_q=weight(d_model, d_model),
            w_k=weight(d_model, d_model),
            w_v=weight(d_model, d_model),
            w_o=weight(d_model, d_model),
            w_ff1=weight(d_model, ff_dim),
            b_ff1=constant(ff_dim, 0.0),
            w_ff2=weight(ff_dim, d_model),
            b_ff2=constant(d_model, 0.0),
            norm1_gain=constant(d_model, 1.0),
            norm1_bias=constant(d_model, 0.0),
            norm2_gain=constant(d_model, 1.0),
            norm2_bias=constant(d_model, 0.0),
        )
        for _ in range(n_layers)
    ]
    return EncoderBase(
        layers=layers,
        final_gain=constant(d_model, 1.0),
        final_bias=constant(d_model, 0.0),
        n_heads=n_heads,
        d_model=d_model,
        ff_dim=ff_dim,
        ln_eps=ln_eps,
    )


def init_cmpt(cls_token, rng, mode="cls", std=0.02):
    """CMPT starts as a noisy copy of the frozen CLS token ("cls") or as pure noise ("zeros")"""
    noise = rng.normal(0.0, std, size=cls_token.shape)
    if mode == "cls":
        start = cls_token.data + noise
    elif mode == "zeros":
        start = noise
    else:
        raise ValueError(f"Unknown CMPT init mode: {mode}")
    return Tensor(start, requires_grad=True)


def init_adapters(d_model, n_layers, rank, alpha, dropout_p, rng, init_std=0.02) -> AdapterMap:
    adapters = {}
    for layer in range(n_layers):
        for target in AdapterTarget:
            adapters[(target, layer)] = LoraAdapter.create(
                d_model, rank, alpha, dropout_p, target, layer, rng, init_std=init_std
            )
    return adapters


# --------------------------------------------------------------------------- #
# Operations
# --------------------------------------------------------------------------- #
def embed(raw, params: EmbedderParams):
    """
    Project raw vectors patch-by-patch and add positional rows

    Args:
        raw (array-like): one vector (length L) or a B×L matrix
        params (EmbedderParams): projection (patch×d) and positional table

    Returns:
        Tensor: (B·N)×d tokens, N = L / patch_size per sequence
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    batch, length = raw.shape
    if length % params.patch_size:
        raise ShapeError(f"raw length {length} not divisible by patch size {params.patch_size}")
    n_tokens = length // params.patch_size
    if n_tokens > params.max_tokens:
        raise ShapeError(f"{n_tokens} tokens exceed positional table of {params.max_tokens}")
    patches = Tensor(raw.reshape(batch * n_tokens, params.patch_size))
    positions = ad.gather_rows(params.positional, np.tile(np.arange(n_tokens), batch))
    return ad.add(ad.matmul(patches, params.projection), positions)


def assemble(content, specials: SpecialTokens, n_sequences=1):
    """Prepend [CMPT, CLS] (or [CLS]) to each of ``n_sequences`` content blocks"""
    if content.cols != specials.cls.cols:
        raise ShapeError(f"content width {content.cols} != token width {specials.cls.cols}")
    if content.rows % n_sequences:
        raise ShapeError(f"{content.rows} content rows do not split into {n_sequences} sequences")
    n_content = content.rows // n_sequences
    heads = [specials.cmpt, specials.cls] if specials.cmpt is not None else [specials.cls]
    pool = ad.concat_rows(heads + [content])
    offset = len(heads)
    index = []
    for seq in range(n_sequences):
        index.extend(range(offset))
        index.extend(offset + seq * n_content + np.arange(n_content))
    return AssembledSequence(
        tokens=ad.gather_rows(pool, index),
        seq_len=n_content + offset,
        has_cmpt=specials.cmpt is not None,
    )


def lora_apply(x, base_w, adapter: Optional[LoraAdapter], training=False, rng=None):
    """out = x·W + (alpha/r)·drop(x·down)·up; the low-rank path alone sees dropout"""
    base = ad.matmul(x, base_w)
    if adapter is None:
        return base
    if adapter.rank < 1:
        raise ValueError("LoRA rank must be >= 1")
    low = ad.matmul(x, adapter.down)
    if training and adapter.dropout_p > 0.0:
        if rng is None:
            raise ValueError("training-mode LoRA dropout needs an rng")
        low = ad.dropout(low, adapter.dropout_p, rng)
    return ad.add(base, ad.scale(ad.matmul(low, adapter.up), adapter.scaling))


def _attention_bias(seq_len, has_cmpt, cls_attends_cmpt):
    """n×n additive score pattern shared by every sequence; None when nothing is masked"""
    if not has_cmpt or cls_attends_cmpt:
        return None
    bias = np.zeros((seq_len, seq_len))
    bias[1, 0] = MASK_VALUE
    return bias


def encode(
    seq: AssembledSequence,
    base: EncoderBase,
    adapters: Optional[AdapterMap] = None,
    training=False,
    rng=None,
    cls_attends_cmpt=True,
    record_attention=False,
):
    """
    Run the pre-norm transformer stack over a packed sequence batch

    Args:
        seq (AssembledSequence): packed [CMPT, CLS, content...] rows
        base (EncoderBase): frozen weights
        adapters (dict, optional): one LoraAdapter per (target, layer); None
            runs the frozen base alone
        training (bool): enables LoRA dropout
        rng (numpy.random.Generator, optional): dropout stream
        cls_attends_cmpt (bool): when False, CLS may not attend to CMPT
        record_attention (bool): keep last-layer attention probabilities

    Returns:
        EncodedSequence: same shape as the input tokens
    """
    if seq.tokens.cols != base.d_model:
        raise ShapeError(f"sequence width {seq.tokens.cols} != model width {base.d_model}")
    if adapters is not None:
        missing = [
            f"{target.value}@{index}"
            for index in range(base.n_layers)
            for target in AdapterTarget
            if (target, index) not in adapters
        ]
        if missing:
            raise ValueError(f"missing LoRA adapter for targets: {', '.join(missing)}")

    bias = _attention_bias(seq.seq_len, seq.has_cmpt, cls_attends_cmpt)
    head_dim = base.d_model // base.n_heads
    inv_sqrt = 1.0 / np.sqrt(head_dim)
    recorded = None
    x = seq.tokens

    def project(inputs, layer, index, target):
        adapter = adapters[(target, index)] if adapters is not None else None
        return lora_apply(inputs, layer.projection(target), adapter, training, rng)

    for index, layer in enumerate(base.layers):
        h = ad.layer_norm_rows(x, layer.norm1_gain, layer.norm1_bias, base.ln_eps)
        q = project(h, layer, index, AdapterTarget.QUERY)
        k = project(h, layer, index, AdapterTarget.KEY)
        v = project(h, layer, index, AdapterTarget.VALUE)
        heads = []
        probs_per_head = []
        for head in range(base.n_heads):
            lo, hi = head * head_dim, (head + 1) * head_dim
            head_out, probs = ad.sequence_attention(
                ad.slice_cols(q, lo, hi), ad.slice_cols(k, lo, hi), ad.slice_cols(v, lo, hi),
                seq.seq_len, bias=bias, scale=inv_sqrt,
            )
            probs_per_head.append(probs)
            heads.append(head_out)
        attended = heads[0] if len(heads) == 1 else ad.concat_cols(heads)
        x = ad.add(x, project(attended, layer, index, AdapterTarget.OUTPUT))

        h = ad.layer_norm_rows(x, layer.norm2_gain, layer.norm2_bias, base.ln_eps)
        hidden = ad.gelu(ad.add_row(ad.matmul(h, layer.w_ff1), layer.b_ff1))
        x = ad.add(x, ad.add_row(ad.matmul(hidden, layer.w_ff2), layer.b_ff2))
        if record_attention and index == base.n_layers - 1:
            recorded = probs_per_head

    out = ad.layer_norm_rows(x, base.final_gain, base.final_bias, base.ln_eps)
    return EncodedSequence(tokens=out, seq_len=seq.seq_len, has_cmpt=seq.has_cmpt, attention=recorded)


def extract(out: EncodedSequence, which):
    """Row 0 (CMPT) or row 1 (CLS) of every packed sequence, stacked n_sequences×d"""
    which = Slot(which)
    if which is Slot.CMPT and not out.has_cmpt:
        raise ValueError("encoded sequence has no CMPT slot")
    slot = 0 if which is Slot.CMPT else (1 if out.has_cmpt else 0)
    return ad.gather_rows(out.tokens, slot + out.seq_len * np.arange(out.n_sequences))


# --------------------------------------------------------------------------- #
# Per-modality bundle
# --------------------------------------------------------------------------- #
class ModalityEncoder:
    """Frozen pretrained encoder plus its trainable CMPT token and LoRA adapters"""

    def __init__(self, pretrained: PretrainedEncoder, cmpt=None, adapters=None, cls_attends_cmpt=True):
        self.modality = pretrained.modality
        self.pretrained = pretrained
        self.specials = SpecialTokens(cls=pretrained.cls, cmpt=cmpt)
        self.adapters = adapters
        self.cls_attends_cmpt = cls_attends_cmpt

    @property
    def has_cmpt(self):
        return self.specials.cmpt is not None

    @property
    def base(self):
        return self.pretrained.base

    def forward(self, raw, training=False, rng=None, record_attention=False, use_adapters=True):
        """Embed, assemble and encode a B×L batch of raw vectors"""
        raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
        content = embed(raw, self.pretrained.embedder)
        seq = assemble(content, self.specials, n_sequences=raw.shape[0])
        return encode(
            seq,
            self.base,
            self.adapters if use_adapters else None,
            training=training,
            rng=rng,
            cls_attends_cmpt=self.cls_attends_cmpt,
            record_attention=record_attention,
        )

    def frozen_tensors(self):
        return {f"{self.modality}.{name}": t for name, t in self.pretrained.tensors().items()}

    def trainable_tensors(self):
        named = {}
        if self.has_cmpt:
            named[f"{self.modality}.cmpt"] = self.specials.cmpt
        for (target, layer), adapter in sorted((self.adapters or {}).items(), key=lambda kv: (kv[0][1], kv[0][0].value)):
            named[f"{self.modality}.lora.{layer}.{target.value}.down"] = adapter.down
            named[f"{self.modality}.lora.{layer}.{target.value}.up"] = adapter.up
        return named
