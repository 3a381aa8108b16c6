import json
from io import BytesIO

import numpy as np
import pandas as pd
from openpyxl import load_workbook

from exporters.excel_export import build_summary_xlsx, write_summary_xlsx
from exporters.metrics_csv import metrics_frame, read_metrics, summary_rows, write_metrics, write_summary


def _rows():
    return [
        {"n": 0, "x0": 0.1 + 0.2, "reward": 1.0 / 3.0, "psi_pred": None, "switch": False, "uncertified": False},
        {"n": 1, "x0": -2.5e-17, "reward": 12.0, "psi_pred": 0.7, "switch": True, "uncertified": False},
    ]


class TestMetricsCsv:
    def test_floats_survive_exactly(self, tmp_path):
        path = write_metrics(_rows(), tmp_path / "m" / "metrics_0.csv")
        frame = read_metrics(path)
        assert frame["x0"].tolist() == [0.1 + 0.2, -2.5e-17]
        assert frame["reward"].tolist() == [1.0 / 3.0, 12.0]

    def test_blanks_and_flags(self, tmp_path):
        path = write_metrics(_rows(), tmp_path / "metrics_0.csv")
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "n,x0,reward,psi_pred,switch,uncertified"
        assert ",,False," in lines[1]
        frame = read_metrics(path)
        assert np.isnan(frame["psi_pred"].iloc[0])
        assert frame["switch"].tolist() == [False, True]

    def test_empty_run_keeps_header(self, tmp_path):
        path = write_metrics([], tmp_path / "metrics_0.csv", columns=["n", "x0"])
        assert path.read_text(encoding="utf-8").strip() == "n,x0"
        assert metrics_frame([], ["n"]).empty


class TestSummaryJson:
    def test_nan_becomes_null(self, tmp_path):
        summary = {"a": float("nan"), "b": np.float64(1.5), "c": [np.int64(2), None], "d": {"e": np.bool_(True)}}
        path = write_summary(summary, tmp_path / "summary.json")
        data = json.loads(path.read_text(encoding="utf-8"))
        assert data == {"a": None, "b": 1.5, "c": [2, None], "d": {"e": True}}

    def test_rows_flatten_nested_records(self):
        rows = summary_rows({"x": {"y": 1, "z": [1, 2]}, "w": "ok"})
        assert rows == [{"key": "x.y", "value": 1}, {"key": "x.z", "value": "[1, 2]"}, {"key": "w", "value": "ok"}]


class TestSummaryXlsx:
    def test_summary_and_tables(self, tmp_path):
        tables = {"a_very_long_table_name_that_exceeds_the_limit": pd.DataFrame({"p": [1.0, np.nan], "q": ["u", "v"]})}
        path = write_summary_xlsx({"name": "run", "value": {"mean": 2.0}}, tmp_path / "summary.xlsx", tables)
        wb = load_workbook(path)
        assert wb.sheetnames[0] == "Summary"
        ws = wb["Summary"]
        assert [c.value for c in ws[1]] == ["Key", "Value"]
        assert [c.value for c in ws[3]] == ["value.mean", 2.0]
        table = wb[wb.sheetnames[1]]
        assert len(wb.sheetnames[1]) == 31
        assert [c.value for c in table[3]] == [None, "v"]

    def test_bytes_are_a_workbook(self):
        wb = load_workbook(BytesIO(build_summary_xlsx({"k": 1})))
        assert wb["Summary"]["A2"].value == "k"
