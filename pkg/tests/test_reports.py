import csv
import json

import numpy as np
import pytest

from satd.errors import DataError
from satd.reports import EvalReport, read_pgm, write_pgm, write_reports


def test_report_validation_and_nan_per_class():
    r = EvalReport("seg", "miou", 0.5, per_class=[1.0, float("nan"), None])
    assert r.per_class == [1.0, None, None]
    with pytest.raises(DataError):
        EvalReport("x", "accuracy", 1.5)
    with pytest.raises(DataError):
        EvalReport("x", "top5", 0.5)


def test_write_reports(tmp_path):
    reps = [EvalReport("zs", "accuracy", 0.25), EvalReport("ret", "map100", 1 / 3, extra={"k": 100})]
    write_reports(reps, tmp_path / "r.json", tmp_path / "r.csv")
    assert json.loads((tmp_path / "r.json").read_text())[1]["extra"] == {"k": 100}
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["task", "metric", "value"] and float(rows[2][2]) == 1 / 3


def test_pgm_roundtrip_and_sidecar(tmp_path):
    a = np.array([[-1.0, 0.0], [0.5, 1.0], [1.0, -1.0]])
    rec = write_pgm(tmp_path / "m.pgm", a)
    pix = read_pgm(tmp_path / "m.pgm")
    assert pix.shape == (3, 2) and pix.min() == 0 and pix.max() == 255
    assert json.loads((tmp_path / "m.pgm.json").read_text()) == rec == {
        "min": -1.0, "max": 1.0, "height": 3, "width": 2, "levels": 255}
    write_pgm(tmp_path / "c.pgm", np.full((2, 2), 3.0))
    assert np.all(read_pgm(tmp_path / "c.pgm") == 0)
    with pytest.raises(DataError):
        write_pgm(tmp_path / "bad.pgm", np.zeros(3))
