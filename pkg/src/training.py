"""
ProxyTokens: Unimodal pretraining and proxy-token training

Stage one trains each modality's encoder end to end on its own view of the
data and freezes it. Stage two trains only the LoRA factors, the proxy
tokens and the head, with modality dropout, AdamW and a warmup + polynomial
learning-rate schedule.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor
from src.encoder import (
    ModalityEncoder,
    PretrainedEncoder,
    Slot,
    extract,
    init_embedder,
    init_encoder_base,
)
from src.errors import ConfigError, NonFiniteError, ShapeError, TrainingDivergenceError
from src.fusion_head import ClassifierHead, predict
from src.model import CMPTModel, ModelConfig, TrainingMode
from src.objectives import LabelMode, task_loss
from src.synth_data import Split, batch

logger = logging.getLogger("ProxyTokens.Training")


# --------------------------------------------------------------------------- #
# Configuration
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 30
    warmup_epochs: int = 5
    warmup_factor: float = 0.1
    poly_power: float = 0.9
    weight_decay: float = 0.02
    adam_eps: float = 1e-8
    betas: Tuple[float, float] = (0.9, 0.999)
    lam: float = 0.2
    dropout_probs: Tuple[float, float, float] = (0.5, 0.25, 0.25)
    batch_size: int = 32
    seed: int = 0
    grad_clip: Optional[float] = None
    mode: str = "cmpt"

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs]")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if len(self.dropout_probs) != 3 or any(p < 0 for p in self.dropout_probs):
            raise ConfigError("dropout_probs must be three non-negative probabilities")
        if abs(sum(self.dropout_probs) - 1.0) > 1e-9:
            raise ConfigError(f"dropout_probs must sum to 1, got {sum(self.dropout_probs)}")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")
        TrainingMode(self.mode)
        return self

    def to_dict(self):
        values = asdict(self)
        values["lambda"] = values.pop("lam")
        return values

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        if "lambda" in values:
            values["lam"] = values.pop("lambda")
        for key in ("betas", "dropout_probs"):
            if key in values:
                values[key] = tuple(values[key])
        return cls(**values)


@dataclass(frozen=True)
class PretrainConfig:
    lr: float = 3e-3
    epochs: int = 15
    batch_size: int = 32
    weight_decay: float = 0.0
    adam_eps: float = 1e-8
    betas: Tuple[float, float] = (0.9, 0.999)

    def validate(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("pretrain lr, epochs and batch_size must be positive")
        return self

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------- #
# Schedule and optimizer
# --------------------------------------------------------------------------- #
def poly_lr(epoch, step_frac, config: TrainConfig):
    """
    Learning rate for an epoch (plus an optional fraction of it)

    Warmup epochs run at lr·warmup_factor; afterwards the rate decays as
    lr·(1 - progress)^poly_power with progress in [0, 1) over the remaining
    epochs.
    """
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.warmup_epochs:
        return config.lr * config.warmup_factor
    span = config.epochs - config.warmup_epochs
    progress = min((epoch - config.warmup_epochs + step_frac) / span, 1.0)
    return config.lr * (1.0 - progress) ** config.poly_power


@dataclass
class AdamState:
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr_t, config):
    """
    One decoupled-weight-decay Adam update, applied in place

    Args:
        params (list[Tensor]): trainable tensors
        grads (list[ndarray]): same shapes as ``params``
        state (AdamState): moment estimates; filled on first use
        lr_t (float): learning rate for this step
        config: anything with ``betas``, ``adam_eps`` and ``weight_decay``
    """
    if len(params) != len(grads):
        raise ShapeError(f"adamw_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    beta1, beta2 = config.betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad.shape != param.data.shape or state.m[i].shape != param.data.shape:
            raise ShapeError(f"adamw_step: shape mismatch for {param.name or i}")
        if config.weight_decay:
            param.data *= 1.0 - lr_t * config.weight_decay
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad * grad
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        param.data -= lr_t * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return params, state


class AdamW:
    """Stateful wrapper over ``adamw_step`` for a fixed parameter list"""

    def __init__(self, params: Sequence[Tensor], config, grad_clip=None):
        self.params = list(params)
        self.config = config
        self.grad_clip = grad_clip
        self.state = AdamState()

    def zero_grad(self):
        for param in self.params:
            param.grad = None

    def step(self, lr_t):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.grad_clip is not None:
            norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
            if norm > self.grad_clip:
                grads = [g * (self.grad_clip / norm) for g in grads]
        adamw_step(self.params, grads, self.state, lr_t, self.config)


# --------------------------------------------------------------------------- #
# Stage one: unimodal pretraining
# --------------------------------------------------------------------------- #
@dataclass
class PretrainResult:
    encoder: PretrainedEncoder
    history: List[float]
    eval_accuracy: Optional[float] = None


def _unimodal_logits(encoder: ModalityEncoder, head, raw, training=False):
    return predict(extract(encoder.forward(raw, training=training), Slot.CLS), head)


def _unimodal_accuracy(encoder, head, split: Split, modality, chunk_size=256):
    correct = 0.0
    with ad.no_grad():
        for start in range(0, len(split), chunk_size):
            part = split.subset(np.arange(start, min(start + chunk_size, len(split))))
            logits = _unimodal_logits(encoder, head, part.raw(modality)).numpy()
            if split.label_mode is LabelMode.SINGLE:
                correct += float(np.sum(np.argmax(logits, axis=1) == part.labels))
            else:
                correct += float(np.sum(np.all((logits >= 0.0) == (part.labels > 0.5), axis=1)))
    return correct / len(split)


def pretrain_unimodal(
    modality,
    train_split: Split,
    model_config: ModelConfig,
    config: PretrainConfig,
    patch_size,
    seed=0,
    eval_split: Optional[Split] = None,
) -> PretrainResult:
    """
    Train one modality's embedder, CLS token and transformer from scratch

    Args:
        modality (str): "m1" or "m2"
        train_split (Split): complete split; only ``modality`` is read
        model_config (ModelConfig): architecture
        config (PretrainConfig): optimizer settings
        patch_size (int): patch width for this modality
        seed (int): initialization and shuffling seed
        eval_split (Split, optional): scored with the throwaway head before
            it is discarded

    Returns:
        PretrainResult: frozen encoder, per-epoch mean loss, eval accuracy
    """
    model_config.validate()
    config.validate()
    modality_id = 1 if modality == "m1" else 2
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11, modality_id]))
    raw_dim = train_split.raw(modality).shape[1]
    if raw_dim % patch_size:
        raise ShapeError(f"{modality} raw dim {raw_dim} not divisible by patch size {patch_size}")
    d = model_config.d_model
    embedder = init_embedder(patch_size, d, raw_dim // patch_size, rng)
    base = init_encoder_base(d, model_config.n_layers, model_config.n_heads, model_config.ff_dim, rng, model_config.ln_eps)
    cls_token = Tensor(rng.normal(0.0, 0.02, size=(1, d)), requires_grad=True)
    pretrained = PretrainedEncoder(modality=modality, embedder=embedder, cls=cls_token, base=base)
    encoder = ModalityEncoder(pretrained)
    head = ClassifierHead.create(d, train_split.n_classes, rng, init_std=model_config.head_init_std)

    params = list(pretrained.tensors().values()) + list(head.tensors().values())
    optimizer = AdamW(params, config)
    history = []
    logger.info(f"Pretraining {modality} encoder on {len(train_split)} samples for {config.epochs} epochs")
    for epoch in range(config.epochs):
        losses = []
        for it, part in enumerate(batch(train_split, config.batch_size, seed + modality_id, epoch)):
            optimizer.zero_grad()
            try:
                logits = _unimodal_logits(encoder, head, part.raw(modality), training=True)
                loss = task_loss(logits, part.labels, mode=train_split.label_mode)
            except NonFiniteError as e:
                raise TrainingDivergenceError(
                    f"pretraining {modality} diverged at epoch {epoch} batch {it} (op '{e.op}')"
                ) from e
            ad.backward(loss, params=params)
            optimizer.step(config.lr)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        logger.debug(f"pretrain {modality} epoch {epoch}: loss {history[-1]:.4f}")

    accuracy = _unimodal_accuracy(encoder, head, eval_split, modality) if eval_split is not None else None
    if accuracy is not None:
        logger.info(f"Pretrained {modality} encoder: unimodal accuracy {accuracy:.4f}")
    return PretrainResult(encoder=pretrained.freeze(), history=history, eval_accuracy=accuracy)


# --------------------------------------------------------------------------- #
# Stage two: proxy-token training
# --------------------------------------------------------------------------- #
@dataclass
class EpochLog:
    epoch: int
    lr: float
    task: float
    align: float
    total: float
    n_complete_seen: int

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    model: CMPTModel
    history: List[EpochLog]


def sample_gate_presence(present, probs, rng):
    """
    Simulated availability for the gate

    Each physically complete sample keeps both modalities, loses m1 or loses
    m2 with ``probs``; incomplete samples keep their physical mask.
    """
    present = np.asarray(present, dtype=bool)
    outcome = rng.choice(3, size=len(present), p=np.asarray(probs, dtype=np.float64))
    complete = present[:, 0] & present[:, 1]
    gated = present.copy()
    gated[complete & (outcome == 1), 0] = False
    gated[complete & (outcome == 2), 1] = False
    return gated


def train_cmpt(
    model: CMPTModel,
    train_split: Split,
    config: TrainConfig,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
) -> TrainResult:
    """
    Optimize the trainable tensors of ``model`` on a (pre-masked) split

    Args:
        model (CMPTModel): model built over frozen encoders
        train_split (Split): training data after its train protocol
        config (TrainConfig): optimizer, schedule and dropout settings
        on_epoch (callable, optional): receives each EpochLog as it completes

    Returns:
        TrainResult: the trained model and the per-epoch log
    """
    config.validate()
    trainable = model.trainable_tensors()
    optimizer = AdamW(list(trainable.values()), config, grad_clip=config.grad_clip)
    uses_dropout = model.mode is not TrainingMode.BASELINE
    history = []
    logger.info(
        f"Training {model.mode.value} model on {len(train_split)} samples "
        f"({train_split.stats.n_complete} complete), lambda={config.lam}"
    )

    for epoch in range(config.epochs):
        lr_t = poly_lr(epoch, 0.0, config)
        sums = {"task": 0.0, "align": 0.0, "total": 0.0}
        n_batches = 0
        n_complete_seen = 0
        for it, part in enumerate(batch(train_split, config.batch_size, config.seed, epoch)):
            dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch, it, 1]))
            lora_rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch, it, 2]))
            gate_present = sample_gate_presence(part.present, config.dropout_probs, dropout_rng) if uses_dropout else None
            optimizer.zero_grad()
            try:
                breakdown = model.loss(part, config.lam, training=True, rng=lora_rng, gate_present=gate_present)
                ad.backward(breakdown.tensor, params=optimizer.params)
                optimizer.step(lr_t)
            except NonFiniteError as e:
                raise TrainingDivergenceError(
                    f"training diverged at epoch {epoch} batch {it} (op '{e.op}')"
                ) from e
            if not np.isfinite(breakdown.total):
                raise TrainingDivergenceError(f"non-finite loss at epoch {epoch} batch {it}")
            for key in sums:
                sums[key] += getattr(breakdown, key)
            n_batches += 1
            n_complete_seen += breakdown.n_complete_in_batch

        entry = EpochLog(
            epoch=epoch,
            lr=lr_t,
            task=sums["task"] / n_batches,
            align=sums["align"] / n_batches,
            total=sums["total"] / n_batches,
            n_complete_seen=n_complete_seen,
        )
        history.append(entry)
        logger.debug(f"epoch {epoch}: {entry.to_json()}")
        if on_epoch is not None:
            on_epoch(entry)

    logger.info(f"Training finished: final total loss {history[-1].total:.4f}")
    return TrainResult(model=model, history=history)


def build_and_train(
    pretrained: Dict[str, PretrainedEncoder],
    train_split: Split,
    model_config: ModelConfig,
    config: TrainConfig,
    on_epoch=None,
) -> TrainResult:
    """Fresh model of ``config.mode`` over the frozen encoders, then ``train_cmpt``"""
    model = CMPTModel.from_pretrained(
        pretrained,
        model_config,
        config.mode,
        train_split.n_classes,
        label_mode=train_split.label_mode,
        seed=config.seed,
    )
    return train_cmpt(model, train_split, config, on_epoch=on_epoch)
