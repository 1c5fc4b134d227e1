import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # Use non-interactive backend
import matplotlib.pyplot as plt
import numpy as np

from src.errors import DataError
from src.report_generator import ReportGenerator

logger = logging.getLogger("ProxyTokens.Visualization")


class VisualizationService:
    """Charts for sweep, per-class and ablation reports"""

    colors = {
        "both": "#2c3e50",
        "m1_missing": "#3498db",
        "m2_missing": "#e74c3c",
        "positive": "#2ecc71",
        "negative": "#e74c3c",
    }

    def create_sweep_chart(self, series, metric="accuracy"):
        """
        Metric against availability of the swept modality

        Args:
            series (dict): label -> sweep report document
            metric (str): accuracy, f1_macro or f1_micro
        """
        fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
        axis_name = "m2"
        for label, document in series.items():
            body = document["result"]
            axis_name = body["axis"]
            xs = [row["x"] for row in body["rows"]]
            ys = [100.0 * row["metrics"][metric] for row in body["rows"]]
            ax.plot(xs, ys, marker="o", linewidth=1.5, label=label)

        ax.set_xlabel(f"{axis_name} availability (%)")
        ax.set_ylabel(f"{metric} (%)")
        ax.invert_xaxis()  # 100% on the left
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        ax.set_title(f"Missing-rate sweep ({axis_name})", fontsize=11, fontweight="bold")
        fig.tight_layout()
        return fig

    def create_delta_chart(self, deltas, highlight=()):
        """Per-class F1 improvement bars, sorted as given"""
        fig, ax = plt.subplots(figsize=(7, 3.5), dpi=100)
        labels = [str(row.class_index) for row in deltas]
        values = [row.delta for row in deltas]
        colors = [self.colors["positive"] if v >= 0 else self.colors["negative"] for v in values]
        bars = ax.bar(labels, values, color=colors, alpha=0.85)
        for bar, row in zip(bars, deltas):
            if row.class_index in highlight:
                bar.set_edgecolor("black")
                bar.set_linewidth(1.5)
        ax.axhline(0.0, color="black", linewidth=0.8)
        ax.set_xlabel("class (sorted by improvement)")
        ax.set_ylabel("F1 delta")
        ax.set_title("Per-class F1 improvement", fontsize=11, fontweight="bold")
        fig.tight_layout()
        return fig

    def create_ablation_chart(self, document):
        """Grouped bars of median accuracy per axis value and scenario"""
        body = document["result"]
        frame = ReportGenerator().ablation_frame(document)
        scenarios = body["scenarios"]
        values = [str(v) for v in body["values"]]
        width = 0.8 / len(scenarios)
        positions = np.arange(len(values))

        fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
        for i, scenario in enumerate(scenarios):
            medians = frame[frame["scenario"] == scenario].groupby("value")["accuracy"].median()
            heights = [100.0 * medians.get(v, np.nan) for v in values]
            ax.bar(positions + i * width, heights, width, label=scenario, color=self.colors.get(scenario))

        ax.set_xticks(positions + width * (len(scenarios) - 1) / 2)
        ax.set_xticklabels(values)
        ax.set_xlabel(body["axis"])
        ax.set_ylabel("median accuracy (%)")
        ax.legend(fontsize=8)
        ax.set_title(f"Ablation over {body['axis']}", fontsize=11, fontweight="bold")
        fig.tight_layout()
        return fig

    def create_dependence_chart(self, document):
        body = document["result"]
        rows = sorted(body["gaps"], key=lambda r: r["class"])
        classes = np.arange(len(rows))
        width = 0.27
        fig, ax = plt.subplots(figsize=(7, 3.5), dpi=100)
        for i, (key, color) in enumerate((("both", "both"), ("m1_only", "m2_missing"), ("m2_only", "m1_missing"))):
            ax.bar(classes + i * width, [r[key] for r in rows], width, label=key, color=self.colors[color])
        ax.set_xticks(classes + width)
        ax.set_xticklabels([str(r["class"]) for r in rows])
        ax.set_xlabel("class")
        ax.set_ylabel("F1")
        ax.legend(fontsize=8)
        ax.set_title("Modality dependence", fontsize=11, fontweight="bold")
        fig.tight_layout()
        return fig

    def plot_document(self, document, path):
        """Render the chart matching a report document's kind to a PNG file"""
        kind = document["kind"]
        if kind == "sweep":
            fig = self.create_sweep_chart({document.get("meta", {}).get("mode", "model"): document})
        elif kind == "ablation":
            fig = self.create_ablation_chart(document)
        elif kind == "dependence":
            fig = self.create_dependence_chart(document)
        else:
            raise DataError(f"No chart available for {kind} reports")
        return self.save_figure(fig, path)

    @staticmethod
    def save_figure(fig, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
        logger.info(f"Chart saved to {path}")
        return path
