"""
ProxyTokens: Command-line front end

Every subcommand reads a RunConfig, works inside ``output.out_dir`` and
writes machine-readable results to standard output; diagnostics go to
standard error. Errors end the process with the code their type carries.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor
from src.checkpoint import load_checkpoint, load_pretrained, save_checkpoint, save_pretrained
from src.config import RunConfig, configure_logging, load_config
from src.encoder import PretrainedEncoder, init_embedder, init_encoder_base
from src.errors import CMPTError, ConfigError, DataError, GradcheckError
from src.evaluation import (
    alignment_diagnostics,
    dump_attention,
    evaluate,
    evaluate_transfer,
    exclusive_classes,
    modality_dependence,
    per_class_delta,
    run_ablation,
    sweep_missing,
)
from src.model import MODALITIES, CMPTModel, TrainingMode
from src.report_generator import FORMATS, ReportGenerator
from src.synth_data import MissingProtocol, apply_protocol, generate, load_dataset, save_dataset
from src.training import build_and_train, pretrain_unimodal
from src.visualization import VisualizationService

logger = logging.getLogger("ProxyTokens.CLI")

GRADCHECK_TOLERANCE = 1e-4
DATASET_FILE = "dataset.cmpt"
MODEL_FILE = "model.cmpt"
TRAIN_LOG_FILE = "train_log.jsonl"


def _pretrained_path(out_dir, modality):
    return Path(out_dir) / f"pretrained_{modality}.cmpt"


def _emit(line):
    sys.stdout.write(line + "\n")
    sys.stdout.flush()


# --------------------------------------------------------------------------- #
# Artifact loading
# --------------------------------------------------------------------------- #
def _load_dataset(config: RunConfig):
    path = config.out_dir / DATASET_FILE
    if not path.exists():
        raise DataError(f"missing dataset {path}; run gen-data first")
    return load_dataset(path)


def _load_pretrained(config: RunConfig):
    encoders = {}
    for modality in MODALITIES:
        path = _pretrained_path(config.out_dir, modality)
        if not path.exists():
            raise DataError(f"missing checkpoint {path}; run pretrain first")
        encoders[modality] = load_pretrained(path)
    return encoders


def _load_model(config: RunConfig, path=None):
    path = Path(path) if path else config.out_dir / MODEL_FILE
    if not path.exists():
        raise DataError(f"missing checkpoint {path}; run train first")
    return load_checkpoint(path)


def _masked_train_split(config: RunConfig, splits):
    protocol = MissingProtocol.parse(config.protocols.train, applies_to="train")
    masked, stats = apply_protocol(splits["train"], protocol, config.seed)
    logger.info(f"Train protocol {protocol}: {stats.to_dict()}")
    return masked


def _write_reports(config: RunConfig, name, result, formats, meta):
    generator = ReportGenerator()
    document = None
    extensions = {"json": "json", "csv": "csv", "plotdata": "dat"}
    for fmt in formats or ["json"]:
        path = config.out_dir / "reports" / f"{name}.{extensions[fmt]}"
        document = generator.emit_report(result, fmt, path, meta)
    _emit(generator.to_json(document).rstrip("\n"))
    return document


def _meta(config: RunConfig, command, **extra):
    return {"command": command, "seed": config.seed, "config": config.to_dict(), **extra}


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #
def cmd_gen_data(args, config: RunConfig):
    splits = generate(config.data)
    save_dataset(config.out_dir / DATASET_FILE, config.data, splits)
    _emit(json.dumps({name: split.stats.to_dict() for name, split in splits.items()}, sort_keys=True))
    return 0


def cmd_pretrain(args, config: RunConfig):
    data_config, splits = _load_dataset(config)
    summary = {}
    for modality, patch in zip(MODALITIES, data_config.patch_sizes):
        result = pretrain_unimodal(
            modality,
            splits["train"],
            config.model,
            config.pretrain,
            patch,
            seed=config.seed,
            eval_split=splits["test"],
        )
        save_pretrained(
            result.encoder,
            _pretrained_path(config.out_dir, modality),
            seed=config.seed,
            extra={"test_accuracy": result.eval_accuracy, "history": result.history},
        )
        summary[modality] = {"test_accuracy": result.eval_accuracy, "final_loss": result.history[-1]}
    _emit(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train(args, config: RunConfig):
    _, splits = _load_dataset(config)
    pretrained = _load_pretrained(config)
    train_split = _masked_train_split(config, splits)
    log_path = config.out_dir / TRAIN_LOG_FILE
    log_path.parent.mkdir(parents=True, exist_ok=True)

    with open(log_path, "w", encoding="utf-8") as log_file:
        def on_epoch(entry):
            line = entry.to_json()
            _emit(line)
            log_file.write(line + "\n")
            log_file.flush()

        result = build_and_train(pretrained, train_split, config.model, config.train_config, on_epoch=on_epoch)
    save_checkpoint(
        result.model,
        config.out_dir / MODEL_FILE,
        seed=config.seed,
        epoch=result.history[-1].epoch,
        extra={"train": config.train_config.to_dict(), "train_protocol": config.protocols.train},
    )
    return 0


def cmd_eval(args, config: RunConfig):
    _, splits = _load_dataset(config)
    model = _load_model(config, args.checkpoint)
    protocols = args.protocol or list(config.protocols.test)
    result = evaluate_transfer(model, splits["test"], config.protocols.train, protocols, seed=config.eval.seed)
    if args.dump_attention:
        dump_attention(model, splits["test"], args.dump_attention, n_samples=config.eval.attention_samples)
    _write_reports(config, "eval", result, args.format, _meta(config, "eval", mode=model.mode.value))
    return 0


def cmd_sweep(args, config: RunConfig):
    _, splits = _load_dataset(config)
    model = _load_model(config, args.checkpoint)
    axis = args.axis or config.eval.sweep_axis
    result = sweep_missing(model, splits["test"], config.eval.sweep_values, config.eval.seed, axis=axis, jobs=args.jobs)
    _write_reports(config, f"sweep_{axis}", result, args.format, _meta(config, "sweep", mode=model.mode.value))
    return 0


def cmd_ablate(args, config: RunConfig):
    if args.axis is None and args.values:
        raise ConfigError("--values needs --axis")
    _, splits = _load_dataset(config)
    pretrained = _load_pretrained(config)
    train_split = _masked_train_split(config, splits)
    axis = args.axis or config.ablation.axis
    values = list(config.ablation.values) if args.axis is None else (args.values or [])
    if not values:
        raise DataError(f"no values given for ablation axis {axis}")
    grid = run_ablation(
        axis,
        values,
        pretrained,
        train_split,
        splits["test"],
        config.model,
        config.train_config,
        seeds=config.ablation.seeds,
        eval_seed=config.eval.seed,
        jobs=args.jobs,
    )
    _write_reports(config, f"ablation_{axis}", grid, args.format, _meta(config, "ablate"))
    return 0


def cmd_analyze(args, config: RunConfig):
    _, splits = _load_dataset(config)
    model = _load_model(config, args.checkpoint)
    test = splits["test"]
    dependence = modality_dependence(model, test, seed=config.eval.seed)
    extra = {"mode": model.mode.value}
    if model.uses_cmpt:
        extra["alignment"] = alignment_diagnostics(model, test, seed=config.eval.seed)
    deltas = {}
    if args.reference:
        reference = _load_model(config, args.reference)
        exclusive = exclusive_classes(config.data.exclusive_m1, config.data.exclusive_m2)
        for scenario in ("inference_only:m1", "inference_only:m2"):
            deltas[scenario] = per_class_delta(
                evaluate(model, test, scenario, config.eval.seed),
                evaluate(reference, test, scenario, config.eval.seed),
                exclusive=exclusive,
            )
        extra["per_class_delta"] = {scenario: [vars(row) for row in rows] for scenario, rows in deltas.items()}
    document = _write_reports(config, "analysis", dependence, args.format, _meta(config, "analyze", **extra))
    if args.plot:
        service = VisualizationService()
        if deltas:
            # m1 missing at test time
            chart = service.create_delta_chart(deltas["inference_only:m1"], highlight=config.data.exclusive_m1)
            service.save_figure(chart, args.plot)
        else:
            service.plot_document(document, args.plot)
    return 0


def _gradcheck_model(config: RunConfig, seed):
    """Untrained proxy-token model over random frozen encoders, moved off the zero-init point"""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 5]))
    model_config = config.model
    pretrained = {}
    for modality, raw_dim, patch in zip(MODALITIES, config.data.raw_dims, config.data.patch_sizes):
        embedder = init_embedder(patch, model_config.d_model, raw_dim // patch, rng, trainable=False)
        base = init_encoder_base(
            model_config.d_model, model_config.n_layers, model_config.n_heads, model_config.ff_dim, rng,
            model_config.ln_eps, trainable=False,
        )
        cls_token = Tensor(rng.normal(0.0, 0.5, size=(1, model_config.d_model)))
        pretrained[modality] = PretrainedEncoder(modality, embedder, cls_token, base)
    model = CMPTModel.from_pretrained(pretrained, model_config, TrainingMode.CMPT, config.data.n_classes,
                                      label_mode=config.data.label_mode, seed=seed)
    for tensor in model.trainable_tensors().values():
        tensor.data = tensor.data + rng.normal(0.0, 0.1, size=tensor.shape)
    return model


def run_gradcheck(config: RunConfig, seed, eps=1e-5):
    """Max relative gradient error of the full total loss on a two-sample batch"""
    data_config = replace(config.data, n_train=2, n_val=1, n_test=1, seed=int(seed))
    sample_batch = generate(data_config)["train"]
    gate_present = np.array([[True, True], [True, False]])
    model = _gradcheck_model(config, seed)
    params = list(model.trainable_tensors().values())

    def total(_):
        return model.loss(sample_batch, config.train.lam, gate_present=gate_present).tensor

    return ad.finite_difference_check(total, params, eps=eps), sum(p.data.size for p in params)


def cmd_gradcheck(args, config: RunConfig):
    error, n_params = run_gradcheck(config, config.seed)
    _emit(json.dumps({"max_rel_error": error, "n_params": n_params, "tolerance": GRADCHECK_TOLERANCE}, sort_keys=True))
    if not error < GRADCHECK_TOLERANCE:
        raise GradcheckError(f"max relative gradient error {error:.3e} exceeds {GRADCHECK_TOLERANCE:g}")
    return 0


def cmd_report(args, config=None):
    generator = ReportGenerator()
    document = generator.load_report(args.input)
    if args.output:
        generator.emit_report(document, args.format[0] if args.format else "csv", args.output)
    else:
        fmt = args.format[0] if args.format else "csv"
        if fmt == "json":
            _emit(generator.to_json(document).rstrip("\n"))
        elif fmt == "csv":
            sys.stdout.write(generator.metric_rows(document).to_csv(index=False, lineterminator="\n"))
        else:
            _emit("\n".join(generator.plot_lines(document)))
    if args.plot:
        VisualizationService().plot_document(document, args.plot)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #
def _parse_axis_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser():
    parser = argparse.ArgumentParser(
        prog="proxytokens",
        description="Cross-modal proxy tokens for missing-modality classification",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add_run_options(sub):
        sub.add_argument("--config", required=True, help="Run configuration (JSON)")
        sub.add_argument("--seed", type=int, help="Override the run seed")
        sub.add_argument("--out", help="Override output.out_dir")
        sub.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                         help="Override a config leaf, e.g. train.lambda=0.0")
        return sub

    def add_format(sub):
        sub.add_argument("--format", action="append", choices=FORMATS,
                         help="Report format (repeatable; default json)")

    add_run_options(subparsers.add_parser("gen-data", help="Generate the synthetic dataset"))
    add_run_options(subparsers.add_parser("pretrain", help="Pretrain and freeze both unimodal encoders"))
    add_run_options(subparsers.add_parser("train", help="Train adapters, proxy tokens and head"))
    add_run_options(subparsers.add_parser("gradcheck", help="Finite-difference check of the full model"))

    sub = add_run_options(subparsers.add_parser("eval", help="Evaluate a trained model under protocols"))
    sub.add_argument("--protocol", action="append", help="Test protocol (repeatable)")
    sub.add_argument("--checkpoint", help="Model checkpoint (default <out>/model.cmpt)")
    sub.add_argument("--dump-attention", help="Write last-layer CLS/CMPT attention rows to this JSON file")
    add_format(sub)

    sub = add_run_options(subparsers.add_parser("sweep", help="Missing-rate sweep"))
    sub.add_argument("--axis", choices=["m1", "m2"], help="Modality whose availability is swept")
    sub.add_argument("--checkpoint", help="Model checkpoint (default <out>/model.cmpt)")
    sub.add_argument("--jobs", type=int, default=1, help="Concurrent sweep points")
    add_format(sub)

    sub = add_run_options(subparsers.add_parser("ablate", help="Train and evaluate an ablation grid"))
    sub.add_argument("--axis", choices=["lambda", "rank", "mode"], help="Ablation axis")
    sub.add_argument("--values", nargs="+", type=_parse_axis_value, help="Axis values (with --axis)")
    sub.add_argument("--jobs", type=int, default=1, help="Worker processes")
    add_format(sub)

    sub = add_run_options(subparsers.add_parser("analyze", help="Per-class and alignment analysis"))
    sub.add_argument("--checkpoint", help="Model checkpoint (default <out>/model.cmpt)")
    sub.add_argument("--reference", help="Checkpoint to compare per-class F1 against")
    sub.add_argument("--plot", help="Render per-class deltas (with --reference) or modality gaps to this PNG")
    add_format(sub)

    sub = subparsers.add_parser("report", help="Reformat an existing JSON report")
    sub.add_argument("--input", required=True, help="JSON report")
    sub.add_argument("--output", help="Output file (default: standard output)")
    sub.add_argument("--plot", help="Also render a PNG chart to this path")
    add_format(sub)
    return parser


def main(argv=None):
    """Run one command; returns the process exit code"""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            configure_logging()
            return cmd_report(args)
        config = load_config(args.config, args.overrides, seed=args.seed, out=args.out)
        configure_logging(log_file=config.output.log_file)
        logger.info(f"Running {args.command} (seed {config.seed}, out {config.out_dir})")
        return COMMANDS[args.command](args, config)
    except CMPTError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=logger.isEnabledFor(logging.DEBUG))
        sys.stderr.write(f"ERR {e.exit_code}: {e}\n")
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected error: {str(e)}", exc_info=True)
        sys.stderr.write(f"ERR 1: {e}\n")
        return 1
