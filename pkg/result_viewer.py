from pathlib import Path
from typing import List
import numpy as np
import pandas as pd
from matplotlib.figure import Figure
from matplotlib.backends.backend_agg import FigureCanvasAgg as FigureCanvas

from data_models import OptimizationReport, EstimationRecord
from validators import DataValidator
from loggers import get_logger

logger = get_logger(__name__)


def records_frame(records: List[EstimationRecord]) -> pd.DataFrame:
    """plot data: step, |f_true|, |f_est|, relative error"""
    return pd.DataFrame({
        "step": [r.step for r in records],
        "f_true_norm": [np.nan if r.f_true is None else float(np.linalg.norm(r.f_true)) for r in records],
        "f_est_norm": [float(np.linalg.norm(r.f_est)) for r in records],
        "relative_error": [r.relative_error for r in records],
    })


class ResultViewer:
    """Static figures of estimation sequences and optimization histories"""

    def __init__(self, figsize=(10, 7), dpi=100):
        self.figure = Figure(figsize=figsize, dpi=dpi, facecolor='white')
        self.canvas = FigureCanvas(self.figure)

    def _clean(self, ax):
        ax.spines['top'].set_visible(False)
        ax.spines['right'].set_visible(False)
        ax.grid(True, alpha=0.3)

    def plot_sequence(self, records: List[EstimationRecord], title: str = "Force estimation"):
        """force norms and relative error per sequence step"""
        self.figure.clear()
        frame = records_frame(records)
        top, bottom = self.figure.subplots(2, 1, sharex=True)

        top.plot(frame["step"], frame["f_true_norm"], 'k-', label="true")
        top.plot(frame["step"], frame["f_est_norm"], 'o--', color='tab:blue', markersize=3, label="estimated")
        top.set_ylabel("|f| (N)")
        top.set_title(title, fontsize=14)
        top.legend(frameon=False)
        self._clean(top)

        bottom.plot(frame["step"], 100.0 * frame["relative_error"], 'o-', color='tab:red', markersize=3)
        bottom.set_xlabel("step")
        bottom.set_ylabel("relative error (%)")
        self._clean(bottom)
        return self.figure

    def plot_optimization(self, report: OptimizationReport, title: str = "L-BFGS history"):
        """objective and gradient norm per accepted iteration, log scale"""
        self.figure.clear()
        left, right = self.figure.subplots(1, 2)
        iterations = np.arange(len(report.objective_history))

        left.semilogy(iterations, np.maximum(report.objective_history, np.finfo(float).tiny), 'o-', markersize=3)
        left.set_xlabel("iteration")
        left.set_ylabel("objective")
        self._clean(left)

        right.semilogy(iterations, np.maximum(report.gradient_norm_history, np.finfo(float).tiny),
                       'o-', color='tab:orange', markersize=3)
        right.set_xlabel("iteration")
        right.set_ylabel("|gradient|")
        self._clean(right)

        self.figure.suptitle(title, fontsize=14)
        return self.figure

    def save(self, output_path: Path) -> Path:
        output_path = Path(output_path)
        DataValidator.validate_output_path(output_path)
        self.figure.tight_layout()
        self.canvas.print_png(str(output_path))
        logger.info(f"Saved figure to {output_path}")
        return output_path
