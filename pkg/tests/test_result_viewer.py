import numpy as np
import pytest

from data_models import EstimationRecord, OptimizationReport
from result_viewer import ResultViewer, records_frame


@pytest.fixture
def records():
    return [
        EstimationRecord(step=0, f_est=[0.0, 0.0, -0.9], f_true=[0.0, 0.0, -1.0]),
        EstimationRecord(step=1, f_est=[0.0, 0.0, -2.2], f_true=[0.0, 0.0, -2.0]),
        EstimationRecord(step=2, f_est=[0.1, 0.0, 0.0], f_true=[0.0, 0.0, 0.0]),
    ]


def test_records_frame(records):
    frame = records_frame(records)
    assert list(frame.columns) == ["step", "f_true_norm", "f_est_norm", "relative_error"]
    assert frame["f_true_norm"].tolist()[:2] == [1.0, 2.0]
    assert frame["relative_error"][0] == pytest.approx(0.1)
    # undefined error for a zero true force
    assert np.isnan(frame["relative_error"][2])


def test_sequence_figure_is_written(records, tmp_path):
    viewer = ResultViewer(figsize=(4, 3), dpi=50)
    figure = viewer.plot_sequence(records)
    assert len(figure.axes) == 2
    path = viewer.save(tmp_path / "figures" / "sequence.png")
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_optimization_figure_handles_zero_objective(tmp_path):
    report = OptimizationReport(objective_history=[1.0, 1e-3, 0.0], gradient_norm_history=[2.0, 0.1, 0.0])
    viewer = ResultViewer(figsize=(4, 3), dpi=50)
    assert len(viewer.plot_optimization(report).axes) == 2
    assert viewer.save(tmp_path / "history.png").stat().st_size > 0
