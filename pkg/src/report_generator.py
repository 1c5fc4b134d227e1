# Report generator for evaluation, sweep, ablation and analysis results
# Every result is first turned into a versioned JSON document; CSV and
# plot-data files are always derived from that document, so `report` can
# reformat an existing JSON file without the model.

import json
import logging
from pathlib import Path

import pandas as pd

from src.errors import DataError
from src.evaluation import (
    METRIC_NAMES,
    AblationGrid,
    DependenceResult,
    Metrics,
    SweepResult,
    TransferResult,
)

# Set up logging
logger = logging.getLogger("ProxyTokens.ReportGenerator")

REPORT_SCHEMA = "cmpt-report/1"
FORMATS = ("csv", "json", "plotdata")


class ReportGenerator:
    """Builds report documents and writes them as csv, json or plotdata"""

    def build_document(self, result, meta=None):
        """
        Wrap a result object in a schema-tagged document

        Args:
            result: Metrics, TransferResult, SweepResult, AblationGrid,
                DependenceResult, a dict of protocol -> Metrics, or an
                existing document
            meta (dict, optional): run echo (config, seed, ...)

        Returns:
            dict: {"schema", "kind", "meta", "result"}
        """
        if isinstance(result, dict) and result.get("schema") == REPORT_SCHEMA:
            return result
        if isinstance(result, Metrics):
            kind, body = "evaluation", {"scenarios": {result.protocol or "complete": result.to_dict()}}
        elif isinstance(result, dict) and all(isinstance(v, Metrics) for v in result.values()):
            kind, body = "evaluation", {"scenarios": {k: m.to_dict() for k, m in result.items()}}
        elif isinstance(result, TransferResult):
            kind = "transfer"
            body = {"train_protocol": result.train_protocol, "scenarios": result.to_dict()["metrics"]}
        elif isinstance(result, SweepResult):
            kind, body = "sweep", result.to_dict()
        elif isinstance(result, AblationGrid):
            kind, body = "ablation", result.to_dict()
        elif isinstance(result, DependenceResult):
            kind, body = "dependence", result.to_dict()
        else:
            raise TypeError(f"Cannot build a report from {type(result).__name__}")
        return {"schema": REPORT_SCHEMA, "kind": kind, "meta": meta or {}, "result": body}

    # ------------------------------------------------------------------ #
    # Tabular views
    # ------------------------------------------------------------------ #
    def metric_rows(self, document) -> pd.DataFrame:
        """One row per (scenario, metric)"""
        records = []
        for scenario, metrics in self._scenarios(document):
            for name in METRIC_NAMES:
                records.append({"scenario": scenario, "metric": name, "value": metrics[name]})
        return pd.DataFrame.from_records(records, columns=["scenario", "metric", "value"])

    def _scenarios(self, document):
        kind, body = document["kind"], document["result"]
        if kind in ("evaluation", "transfer"):
            return list(body["scenarios"].items())
        if kind == "sweep":
            return [(f"{body['axis']}={row['x']:g}", row["metrics"]) for row in body["rows"]]
        if kind == "ablation":
            return [
                (f"{body['axis']}={cell['value']}/seed={cell['seed']}/{scenario}", metrics)
                for cell in body["cells"]
                for scenario, metrics in cell["metrics"].items()
            ]
        if kind == "dependence":
            return [(name, body[name]) for name in ("both", "m1_only", "m2_only")]
        raise DataError(f"Unknown report kind {kind!r}")

    def plot_lines(self, document):
        """Whitespace-separated columns, '#' header lines first"""
        kind, body = document["kind"], document["result"]
        lines = [f"# {REPORT_SCHEMA} {kind}"]
        if kind == "sweep":
            lines.append(f"# axis={body['axis']}")
            lines.append("# x " + " ".join(METRIC_NAMES))
            for row in body["rows"]:
                values = " ".join(f"{row['metrics'][name]:.6f}" for name in METRIC_NAMES)
                lines.append(f"{row['x']:g} {values}")
        elif kind == "ablation":
            frame = self.ablation_frame(document)
            scenarios = body["scenarios"]
            lines.append(f"# axis={body['axis']} median accuracy over seeds {body['seeds']}")
            lines.append("# value " + " ".join(scenarios))
            for value in body["values"]:
                subset = frame[frame["value"] == str(value)]
                medians = subset.groupby("scenario")["accuracy"].median()
                lines.append(f"{value} " + " ".join(f"{medians[s]:.6f}" for s in scenarios))
        elif kind == "dependence":
            lines.append("# class both m1_only m2_only gap")
            for row in sorted(body["gaps"], key=lambda r: r["class"]):
                lines.append(
                    f"{row['class']} {row['both']:.6f} {row['m1_only']:.6f} {row['m2_only']:.6f} {row['gap']:.6f}"
                )
        else:
            lines.append("# scenario " + " ".join(METRIC_NAMES))
            for scenario, metrics in self._scenarios(document):
                lines.append(f"{scenario} " + " ".join(f"{metrics[name]:.6f}" for name in METRIC_NAMES))
        return lines

    def ablation_frame(self, document) -> pd.DataFrame:
        body = document["result"]
        records = [
            {"value": str(cell["value"]), "seed": cell["seed"], "scenario": scenario, "n_trainable": cell["n_trainable"],
             **{name: metrics[name] for name in METRIC_NAMES}}
            for cell in body["cells"]
            for scenario, metrics in cell["metrics"].items()
        ]
        return pd.DataFrame.from_records(records)

    # ------------------------------------------------------------------ #
    # Files
    # ------------------------------------------------------------------ #
    def emit_report(self, result, fmt, path, meta=None):
        """
        Write ``result`` to ``path`` in ``fmt``

        Returns:
            dict: the report document that was written
        """
        if fmt not in FORMATS:
            raise ValueError(f"Unknown report format {fmt!r}; expected one of {FORMATS}")
        document = self.build_document(result, meta)
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            if fmt == "json":
                with open(path, "w", encoding="utf-8") as f:
                    f.write(self.to_json(document))
            elif fmt == "csv":
                self.metric_rows(document).to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
            else:
                with open(path, "w", encoding="utf-8") as f:
                    f.write("\n".join(self.plot_lines(document)) + "\n")
        except OSError as e:
            raise DataError(f"Cannot write report {path}: {e}") from e
        logger.info(f"Wrote {document['kind']} report ({fmt}) to {path}")
        return document

    @staticmethod
    def to_json(document):
        return json.dumps(document, indent=2, sort_keys=True) + "\n"

    @staticmethod
    def load_report(path):
        path = Path(path)
        try:
            with open(path, "r", encoding="utf-8") as f:
                document = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"Cannot read report {path}: {e}") from e
        if document.get("schema") != REPORT_SCHEMA:
            raise DataError(f"{path}: unsupported report schema {document.get('schema')!r}")
        return document


def emit_report(result, fmt, path, meta=None):
    return ReportGenerator().emit_report(result, fmt, path, meta)
