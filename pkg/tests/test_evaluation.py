import csv

import numpy as np
import pytest

from invrobust.data import ImageSet
from invrobust.evaluation import (
    Evaluator,
    RobustnessReport,
    combined_robustness,
    dominance_intervals,
    emit_reports,
    eval_clean,
    eval_inv,
    intersection_psi,
    select_probe,
    summary_text,
)
from invrobust.model import zero_network
from invrobust.pgd import PgdConfig


def rep(ptb, inv):
    return RobustnessReport(ptb_rob=ptb, inv_rob=inv, ptb_count=100, inv_count=100)


PTB = rep(0.889, 0.579)
STD = rep(0.0, 0.8)
SIM = rep(0.79, 0.71)


def test_combined_robustness_endpoints_and_midpoint():
    assert combined_robustness(0.0, PTB) == 0.889
    assert combined_robustness(1.0, PTB) == 0.579
    assert combined_robustness(0.5, PTB) == pytest.approx(0.734, abs=1e-12)


def test_combined_robustness_is_affine():
    rng = np.random.default_rng(0)
    for _ in range(100):
        r = rep(*rng.random(2))
        a, b, t = rng.random(3)
        mixed = combined_robustness(t * a + (1 - t) * b, r)
        assert mixed == pytest.approx(t * combined_robustness(a, r) + (1 - t) * combined_robustness(b, r), abs=1e-12)


def test_combined_robustness_validation():
    with pytest.raises(ValueError):
        combined_robustness(1.5, PTB)
    with pytest.raises(ValueError):
        combined_robustness(0.5, RobustnessReport(ptb_rob=0.5, ptb_count=1))


def test_intersections_from_table_values():
    a = intersection_psi(PTB, SIM)
    b = intersection_psi(STD, SIM)
    # independent arithmetic: 0.099 / 0.23 and 0.79 / 0.88
    assert a.psi == pytest.approx(0.099 / 0.23, abs=1e-12)
    assert b.psi == pytest.approx(0.79 / 0.88, abs=1e-12)
    assert abs(a.psi - 0.430) <= 0.001
    assert abs(b.psi - 0.898) <= 0.001
    assert a.inside and b.inside


def test_intersection_symmetry_and_parallel_lines():
    rng = np.random.default_rng(1)
    for _ in range(100):
        r1, r2 = rep(*rng.random(2)), rep(*rng.random(2))
        h1, h2 = intersection_psi(r1, r2), intersection_psi(r2, r1)
        assert abs(h1.psi - h2.psi) <= 1e-12
        if 0 <= h1.psi <= 1:
            assert combined_robustness(h1.psi, r1) == pytest.approx(combined_robustness(h1.psi, r2), abs=1e-12)
    assert intersection_psi(rep(0.5, 0.6), rep(0.4, 0.5)) is None


def test_dominance_interval_for_table_values():
    intervals = dominance_intervals({"standard": STD, "ptb": PTB, "simultaneous": SIM})
    by_model = {iv.model: iv for iv in intervals}
    assert [iv.model for iv in intervals] == ["ptb", "simultaneous", "standard"]
    sim = by_model["simultaneous"]
    assert abs(sim.lo - 0.430) <= 0.001
    assert abs(sim.hi - 0.898) <= 0.001
    assert by_model["ptb"].lo == 0.0
    assert by_model["standard"].hi == 1.0


def test_identical_models_dominate_nowhere():
    assert dominance_intervals({"a": PTB, "b": PTB}) == []


def test_summary_lists_intersections():
    text = summary_text({"standard": STD, "ptb": PTB, "simultaneous": SIM})
    assert "ptb x simultaneous: psi=0.430435" in text
    assert "standard x simultaneous: psi=0.897727" in text
    assert "simultaneous: (0.430435, 0.897727)" in text


def test_report_rejects_out_of_range_metric():
    with pytest.raises(ValueError):
        RobustnessReport(clean_acc=1.2, clean_count=5)
    with pytest.raises(ValueError):
        RobustnessReport(ptb_rob=0.5, ptb_count=0)


def _images(n, seed=0):
    return np.random.default_rng(seed).random((n, 28, 28, 1)).astype(np.float32)


def test_clean_and_inv_accuracy_count_matches():
    # a zero network always answers class 0
    labels = np.array([0, 0, 1, 0])
    ds = ImageSet(_images(4), labels)
    assert eval_clean(zero_network(), ds) == 0.75
    assert eval_inv(zero_network(), ds) == 0.75
    with pytest.raises(ValueError):
        eval_clean(zero_network(), ds.subset([]))


def test_probe_selection_is_seeded():
    ds = ImageSet(_images(20), np.arange(20) % 10)
    a, b = select_probe(ds, 5, 3), select_probe(ds, 5, 3)
    assert np.array_equal(a.ids(), b.ids())
    assert len(select_probe(ds, 50, 0)) == 20


def test_evaluator_report_skips_missing_inv_set():
    ds = ImageSet(_images(3), np.zeros(3, np.int64))
    ev = Evaluator(ds, ds, PgdConfig(steps=1), None, "abc")
    r = ev.report(zero_network(), step=4)
    assert r.inv_rob is None and r.inv_count == 0
    assert r.clean_acc == 1.0
    assert r.step == 4 and r.config_hash == "abc"


def test_emit_reports(tmp_path):
    written = emit_reports({}, tmp_path, {"standard": STD, "ptb": PTB, "simultaneous": SIM})
    rows = list(csv.DictReader(open(written["tradeoff"])))
    assert len(rows) == 101 * 3
    assert rows[0] == {"psi": "0.00", "model_name": "standard", "combined_robustness": "0.0"}
    last = [r for r in rows if r["psi"] == "1.00" and r["model_name"] == "ptb"][0]
    assert float(last["combined_robustness"]) == pytest.approx(0.579)
    assert "dominant intervals" in open(written["summary"]).read()


def test_emit_reports_needs_input(tmp_path):
    with pytest.raises(ValueError):
        emit_reports({}, tmp_path)
