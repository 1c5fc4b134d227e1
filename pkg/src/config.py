"""
ProxyTokens: Run configuration and logging setup

A run is described by one JSON file whose sections mirror the pipeline
stages. Missing keys take the defaults below; unknown keys are errors.
Leaf values can be overridden from the command line with dotted paths.
"""

import copy
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

from dotenv import load_dotenv

from src.errors import ConfigError
from src.model import ModelConfig
from src.synth_data import DatasetConfig, MissingProtocol
from src.training import PretrainConfig, TrainConfig

logger = logging.getLogger("ProxyTokens.Config")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


@dataclass(frozen=True)
class ProtocolConfig:
    train: str = "complete"
    test: Tuple[str, ...] = ("complete", "inference_only:m1", "inference_only:m2")


@dataclass(frozen=True)
class EvalConfig:
    seed: int = 0
    sweep_values: Tuple[float, ...] = (100, 90, 80, 70, 60, 50, 40, 30, 20, 10, 0)
    sweep_axis: str = "m2"
    attention_samples: int = 4


@dataclass(frozen=True)
class AblationConfig:
    axis: str = "mode"
    values: Tuple = ("baseline", "dropout", "cmpt")
    seeds: Tuple[int, ...] = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class OutputConfig:
    out_dir: str = "runs/default"
    log_file: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocols: ProtocolConfig = field(default_factory=ProtocolConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    seed: int = 1

    @property
    def train_config(self) -> TrainConfig:
        """Training settings with the run seed applied"""
        return replace(self.train, seed=self.seed)

    @property
    def out_dir(self) -> Path:
        return Path(self.output.out_dir)

    def to_dict(self):
        return config_tree(self)

    def validate(self):
        self.data.validate()
        self.model.validate()
        self.pretrain.validate()
        self.train_config.validate()
        for text in (self.protocols.train, *self.protocols.test):
            MissingProtocol.parse(text)
        if self.eval.sweep_axis not in ("m1", "m2"):
            raise ConfigError(f"eval.sweep_axis must be 'm1' or 'm2', got {self.eval.sweep_axis!r}")
        if any(not 0 <= x <= 100 for x in self.eval.sweep_values):
            raise ConfigError("eval.sweep_values must lie in [0, 100]")
        if self.ablation.axis not in ("lambda", "rank", "mode"):
            raise ConfigError(f"ablation.axis must be lambda, rank or mode, got {self.ablation.axis!r}")
        if not self.ablation.values or not self.ablation.seeds:
            raise ConfigError("ablation.values and ablation.seeds must be nonempty")
        return self


# --------------------------------------------------------------------------- #
# Loading
# --------------------------------------------------------------------------- #
def config_tree(config: RunConfig):
    """Nested plain-JSON view; the train section uses the "lambda" key and has no seed"""
    tree = asdict(config)
    tree["train"] = config.train.to_dict()
    tree["train"].pop("seed")
    return json.loads(json.dumps(tree))


def _merge(defaults, values, path=""):
    merged = copy.deepcopy(defaults)
    for key, value in values.items():
        dotted = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key '{dotted}'")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{dotted}' must be an object")
            merged[key] = _merge(defaults[key], value, f"{dotted}.")
        else:
            merged[key] = value
    return merged


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(tree, assignment):
    """Set one ``dotted.path=value`` leaf; the value is parsed as JSON when possible"""
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' is not of the form key=value")
    dotted, text = assignment.split("=", 1)
    keys = dotted.strip().split(".")
    node = tree
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            raise ConfigError(f"unknown config key '{dotted}'")
        node = node[key]
    if keys[-1] not in node or isinstance(node[keys[-1]], dict):
        raise ConfigError(f"unknown config key '{dotted}'")
    node[keys[-1]] = _parse_value(text)
    return tree


def _tuples(values, *names):
    return {k: tuple(v) if k in names and isinstance(v, list) else v for k, v in values.items()}


def build_config(tree) -> RunConfig:
    """Instantiate and validate a RunConfig from a full config tree"""
    try:
        config = RunConfig(
            data=DatasetConfig.from_dict(tree["data"]),
            model=ModelConfig(**tree["model"]),
            pretrain=PretrainConfig(**_tuples(tree["pretrain"], "betas")),
            train=TrainConfig.from_dict(tree["train"]),
            protocols=ProtocolConfig(**_tuples(tree["protocols"], "test")),
            eval=EvalConfig(**_tuples(tree["eval"], "sweep_values")),
            ablation=AblationConfig(**_tuples(tree["ablation"], "values", "seeds")),
            output=OutputConfig(**tree["output"]),
            seed=int(tree["seed"]),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    try:
        return config.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path=None, overrides: Optional[List[str]] = None, seed=None, out=None) -> RunConfig:
    """
    Read a JSON run config and apply command-line overrides

    Args:
        path (str | Path, optional): config file; defaults only when omitted
        overrides (list[str]): ``dotted.path=value`` assignments
        seed (int, optional): replaces the run seed
        out (str, optional): replaces output.out_dir

    Returns:
        RunConfig: validated configuration
    """
    tree = config_tree(RunConfig())
    if path is not None:
        path = Path(path)
        try:
            with open(path, "r", encoding="utf-8") as f:
                values = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(values, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        tree = _merge(tree, values)
    for assignment in overrides or []:
        apply_override(tree, assignment)
    if seed is not None:
        tree["seed"] = int(seed)
    if out is not None:
        tree["output"]["out_dir"] = str(out)
    config = build_config(tree)
    logger.debug(f"Loaded configuration: {json.dumps(config.to_dict(), sort_keys=True)}")
    return config


# --------------------------------------------------------------------------- #
# Logging
# --------------------------------------------------------------------------- #
def configure_logging(level=None, log_file=None):
    """
    Route ProxyTokens logs to standard error (and optionally a file)

    Verbosity comes from ``level`` or the CMPT_LOG environment variable
    (quiet, info, debug); a .env file in the working directory is read first.
    """
    load_dotenv()
    name = (level or os.getenv("CMPT_LOG", "info")).strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"CMPT_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")

    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=LOG_LEVELS[name], format=LOG_FORMAT, handlers=handlers, force=True)
    return LOG_LEVELS[name]
