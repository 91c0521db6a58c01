import numpy as np
import pandas as pd

from results_report import _format, export_pdf


def test_format():
    assert _format(np.nan) == "N/A"
    assert _format(0.000123456) == "0.0001235"
    assert _format(3) == "3"
    assert _format("oracle") == "oracle"


def test_pdf_with_results_and_summary(tmp_path):
    results = pd.DataFrame([{"model": "oracle", "rmse_pos_abs": 1e-4, "rmse_pos_rel": np.nan,
                             "force_rmse": 0.25, "windows": 3}])
    path = export_pdf(results, tmp_path / "reports" / "eval.pdf",
                      mpc_summary={"episodes": 4, "successes": 3, "halfway": 4, "mean_steps": 61.5},
                      notes={"Dataset": "data/floor.bin"})
    assert path.exists()
    assert path.read_bytes().startswith(b"%PDF")


def test_pdf_with_summary_only(tmp_path):
    path = export_pdf(pd.DataFrame(), tmp_path / "mpc.pdf", title="MPC Episodes",
                      mpc_summary={"episodes": 1, "successes": 0, "halfway": 0, "mean_steps": 150.0})
    assert path.read_bytes().startswith(b"%PDF")
