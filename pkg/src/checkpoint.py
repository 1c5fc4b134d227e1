"""
ProxyTokens: Checkpoints for frozen encoders and trained models

Tensors are stored under their dotted model names in the shared bundle
format, tagged frozen or trainable, with the architecture, mode, seed and
epoch echoed into the manifest so a model can be rebuilt without its config.
"""

import logging
import re
from typing import Dict, Optional

import numpy as np

from src.autodiff import Tensor
from src.encoder import (
    AdapterTarget,
    EmbedderParams,
    EncoderBase,
    EncoderLayer,
    LoraAdapter,
    ModalityEncoder,
    PretrainedEncoder,
)
from src.errors import CheckpointError
from src.fusion_head import ClassifierHead
from src.model import MODALITIES, CMPTModel, ModelConfig, TrainingMode
from src.objectives import LabelMode
from src.tensor_io import read_bundle, write_bundle

logger = logging.getLogger("ProxyTokens.Checkpoint")

CHECKPOINT_VERSION = 1
_LAYER_KEY = re.compile(r"base\.layers\.(\d+)\.(\w+)$")
_LORA_KEY = re.compile(r"lora\.(\d+)\.(\w+)\.(down|up)$")


def _check_meta(meta, kind, path):
    if meta.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {meta.get('kind')!r}")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {meta.get('version')!r} is not supported (expected {CHECKPOINT_VERSION})"
        )


def _take(tensors, name, path, requires_grad=False):
    if name not in tensors:
        raise CheckpointError(f"{path}: tensor {name!r} missing from manifest")
    return Tensor(tensors[name], requires_grad=requires_grad)


def _pretrained_from(tensors, prefix, modality, arch, path) -> PretrainedEncoder:
    def take(name):
        return _take(tensors, f"{prefix}{name}", path)

    layer_ids = sorted({int(m.group(1)) for key in tensors if (m := _LAYER_KEY.search(key)) and key.startswith(prefix)})
    layers = [
        EncoderLayer(**{field: take(f"base.layers.{i}.{field}") for field in EncoderLayer.__dataclass_fields__})
        for i in layer_ids
    ]
    if not layers:
        raise CheckpointError(f"{path}: no encoder layers found for {modality}")
    projection = take("embed.projection")
    embedder = EmbedderParams(patch_size=projection.rows, projection=projection, positional=take("embed.positional"))
    base = EncoderBase(
        layers=layers,
        final_gain=take("base.final_gain"),
        final_bias=take("base.final_bias"),
        n_heads=int(arch["n_heads"]),
        d_model=projection.cols,
        ff_dim=layers[0].w_ff1.cols,
        ln_eps=float(arch["ln_eps"]),
    )
    return PretrainedEncoder(modality=modality, embedder=embedder, cls=take("cls"), base=base)


# --------------------------------------------------------------------------- #
# Pretrained encoders
# --------------------------------------------------------------------------- #
def save_pretrained(encoder: PretrainedEncoder, path, seed=None, extra: Optional[dict] = None):
    tensors = {name: t.data for name, t in encoder.tensors().items()}
    meta = {
        "kind": "pretrained_encoder",
        "version": CHECKPOINT_VERSION,
        "modality": encoder.modality,
        "arch": {"n_heads": encoder.base.n_heads, "ln_eps": encoder.base.ln_eps},
        "seed": seed,
        "extra": extra or {},
    }
    write_bundle(path, tensors, meta, tags={name: "frozen" for name in tensors})
    logger.info(f"Saved frozen {encoder.modality} encoder to {path}")


def load_pretrained(path) -> PretrainedEncoder:
    tensors, _, meta = read_bundle(path)
    _check_meta(meta, "pretrained_encoder", path)
    return _pretrained_from(tensors, "", meta["modality"], meta["arch"], path).freeze()


# --------------------------------------------------------------------------- #
# Full models
# --------------------------------------------------------------------------- #
def save_checkpoint(model: CMPTModel, path, seed=None, epoch=None, extra: Optional[dict] = None):
    """
    Write every model tensor with its frozen/trainable tag

    Args:
        model (CMPTModel): model to persist
        path (str | Path): destination
        seed (int, optional): echoed into the manifest
        epoch (int, optional): last completed epoch
        extra (dict, optional): free-form config echo
    """
    named = model.named_tensors()
    meta = {
        "kind": "cmpt_model",
        "version": CHECKPOINT_VERSION,
        "mode": model.mode.value,
        "label_mode": model.label_mode.value,
        "model": model.config.to_dict(),
        "seed": seed,
        "epoch": epoch,
        "n_trainable": model.count_trainable(),
        "extra": extra or {},
    }
    write_bundle(
        path,
        {name: t.data for name, (t, _) in named.items()},
        meta,
        tags={name: tag for name, (_, tag) in named.items()},
    )
    logger.info(f"Saved {model.mode.value} checkpoint to {path}")


def load_checkpoint(path) -> CMPTModel:
    """Rebuild a CMPTModel; trainable tensors come back with requires_grad set"""
    tensors, tags, meta = read_bundle(path)
    _check_meta(meta, "cmpt_model", path)
    config = ModelConfig(**meta["model"])
    mode = TrainingMode(meta["mode"])
    arch = {"n_heads": config.n_heads, "ln_eps": config.ln_eps}

    encoders: Dict[str, ModalityEncoder] = {}
    for modality in MODALITIES:
        prefix = f"{modality}."
        pretrained = _pretrained_from(tensors, prefix, modality, arch, path).freeze()
        cmpt = _take(tensors, f"{prefix}cmpt", path, requires_grad=True) if mode is TrainingMode.CMPT else None
        adapters = {}
        for key in tensors:
            match = _LORA_KEY.search(key) if key.startswith(prefix) else None
            if match is None or match.group(3) != "down":
                continue
            layer, target = int(match.group(1)), AdapterTarget(match.group(2))
            down = _take(tensors, key, path, requires_grad=True)
            up = _take(tensors, key[: -len("down")] + "up", path, requires_grad=True)
            adapters[(target, layer)] = LoraAdapter(
                down, up, down.cols, config.lora_alpha, config.lora_dropout, target, layer
            )
        encoders[modality] = ModalityEncoder(pretrained, cmpt, adapters, cls_attends_cmpt=config.cls_attends_cmpt)

    head = ClassifierHead(
        weight=_take(tensors, "head.weight", path, requires_grad=True),
        bias=_take(tensors, "head.bias", path, requires_grad=True),
    )
    model = CMPTModel(encoders, head, mode, config, LabelMode(meta["label_mode"]))

    expected_tags = {name: tag for name, (_, tag) in model.named_tensors().items()}
    if expected_tags != tags:
        raise CheckpointError(f"{path}: manifest tags do not match the rebuilt model")
    logger.info(f"Loaded {mode.value} checkpoint from {path}")
    return model


def checkpoint_tags(path):
    """name -> tag as listed in a checkpoint manifest"""
    _, tags, _ = read_bundle(path)
    return tags


def probe_equal(model_a: CMPTModel, model_b: CMPTModel, probe) -> bool:
    """Bitwise comparison of inference logits on a probe batch"""
    return bool(np.array_equal(model_a.predict_logits(probe), model_b.predict_logits(probe)))
