import csv
import io
import math

import numpy as np
import pytest

from bnfair.finetune import TuningPolicy
from bnfair.metrics import (SENTINEL, PredictionLog, aggregate_report, evaluate_fairness,
                            pairwise_metrics)
from bnfair.report import (RegimeComparison, column_order, distribution_csvs, fmt, quartiles,
                           relative_improvement, render_distribution, render_params_figure,
                           render_table_csv, report_from_dict)

from oracles import quartiles as quartiles_oracle

P = TuningPolicy


def _report(seed, perfect=False, k=4, n=300):
    rng = np.random.default_rng(seed)
    labels = (rng.random((n, k)) < rng.uniform(0.1, 0.5, k)).astype(int)
    scores = labels * 0.8 + 0.1 if perfect else np.clip(labels * 0.3 + rng.random((n, k)) * 0.7, 0, 1)
    log = PredictionLog(scores, labels, [f"attr{i}" for i in range(k)])
    return evaluate_fairness(log, log)[0]


def test_column_order_by_rho():
    assert column_order([0.47, 0.02, 0.12]) == [1, 2, 0]
    assert column_order([0.1, 0.1, 0.05]) == [2, 0, 1]


def test_round_half_even_on_stored_double():
    assert fmt(0.125) == "0.12"
    assert fmt(0.375) == "0.38"
    assert fmt(float("nan")) == "" and fmt(None) == ""


def test_perfect_classifier_table():
    comp = RegimeComparison({P.FROZEN: _report(0, True), P.FULL_FT: _report(1, True)})
    rows = list(csv.reader(io.StringIO(render_table_csv(comp))))
    assert rows[0][:2] == ["block", "procedure"] and rows[0][-1] == "all"
    for row in rows[2:]:
        cells = [c for c in row[2:] if c]
        assert all(c == ("0.00" if row[0] == "Gap" else "1.00") for c in cells)
    assert [r[1] for r in rows[2:]] == ["SSL (Frozen)", "SSL (Full FT)"] * 2


def test_csv_matches_json_precision():
    rep = _report(3)
    comp = RegimeComparison({P.BN_STATS: rep})
    rows = list(csv.reader(io.StringIO(render_table_csv(comp))))
    order = column_order(list(rep.rho_by_c))
    d = rep.to_dict()
    gap_row = rows[2]
    for j, i in enumerate(order):
        assert gap_row[2 + j] == f"{d['gap_by_c'][i]:.2f}"
    assert gap_row[-1] == f"{d['median_gap']:.2f}"
    assert rows[1][2:-1] == [f"{d['rho'][i]:.2f}" for i in order]


def test_quartiles_match_sort_oracle():
    rng = np.random.default_rng(0)
    for n in (1, 2, 5, 17, 110):
        v = rng.random(n)
        assert quartiles(v) == pytest.approx(quartiles_oracle(v.tolist()), abs=1e-15)


def test_distribution_summary_oracle():
    comp = RegimeComparison({P.FROZEN: _report(4), P.BN_STATS: _report(5)})
    values, summary = distribution_csvs(comp)
    vals = list(csv.DictReader(io.StringIO(values)))
    for row in csv.DictReader(io.StringIO(summary)):
        mine = [float(v) for v in vals if v["policy"] == row["policy"] for v in [v["f1_worst"]]]
        ref = quartiles_oracle(mine)
        got = [float(row[k]) for k in ("min", "q1", "median", "q3", "max")]
        assert got == pytest.approx(ref, abs=1e-15)
        assert int(row["cells"]) == len(mine)


def test_identical_reports_identical_summaries():
    rep = _report(6)
    _, summary = distribution_csvs(RegimeComparison({P.FROZEN: rep, P.BN_STATS: rep}))
    rows = list(csv.reader(io.StringIO(summary)))
    assert rows[1][1:] == rows[2][1:]


def test_single_cell_box_collapses(tmp_path):
    # task c predicts nothing and has no positives where t holds: cell (c, t) is undefined
    labels = np.array([[1, 0], [0, 1], [1, 0], [0, 1], [1, 0]])
    scores = np.array([[.9, 0], [.6, 0], [.4, 0], [.1, 0], [.8, 0]])
    log = PredictionLog(scores, labels, ["t", "c"])
    rep = aggregate_report(pairwise_metrics(log, [0.5, SENTINEL]), labels)
    assert rep.worst_values().size == 1
    comp = RegimeComparison({P.FROZEN: rep})
    _, summary = render_distribution(comp, str(tmp_path / "d.svg"))
    row = list(csv.reader(io.StringIO(summary)))[1]
    assert len({float(x) for x in row[2:]}) == 1
    assert (tmp_path / "d.svg").read_text().startswith("<?xml")


def test_svg_is_reproducible(tmp_path):
    from bnfair.accounting import desk_catalog, updated_fraction
    from bnfair.nn import BackboneSpec
    cat = desk_catalog(BackboneSpec(), 4)
    comp = RegimeComparison({P.FROZEN: _report(7), P.FULL_FT: _report(8)},
                            {p: updated_fraction(cat, p) for p in (P.FROZEN, P.FULL_FT)})
    blobs = []
    for i in range(2):
        render_distribution(comp, str(tmp_path / f"d{i}.svg"))
        render_params_figure(comp, str(tmp_path / f"p{i}.svg"))
        blobs.append(((tmp_path / f"d{i}.svg").read_bytes(), (tmp_path / f"p{i}.svg").read_bytes()))
    assert blobs[0] == blobs[1]


class _Stub:
    def __init__(self, worst, gap, names=("a",)):
        self.median_worst, self.mean_gap, self.names = worst, gap, list(names)


def test_relative_improvement_table_values():
    r = relative_improvement(_Stub(0.43, 0.2), _Stub(0.69, 0.15))["median_worst"]
    assert r["relative_to_a"] == pytest.approx(0.6047, abs=5e-4)
    assert r["relative_to_b"] == pytest.approx(0.3768, abs=5e-4)


def test_relative_improvement_identity_and_swap():
    r = relative_improvement(_Stub(0.5, 0.1), _Stub(0.5, 0.1))
    assert r["median_worst"]["relative_to_a"] == 0 and r["mean_gap"]["relative_to_b"] == 0
    a, b = _Stub(0.3, 0.2), _Stub(0.7, 0.05)
    fwd, back = relative_improvement(a, b), relative_improvement(b, a)
    for key in ("median_worst", "mean_gap"):
        # swapping arguments negates the change and exchanges the denominators
        assert back[key]["relative_to_a"] == pytest.approx(-fwd[key]["relative_to_b"])
        assert back[key]["relative_to_b"] == pytest.approx(-fwd[key]["relative_to_a"])


def test_relative_improvement_zero_denominator():
    r = relative_improvement(_Stub(0.0, 0.1), _Stub(0.5, 0.1))["median_worst"]
    assert r["relative_to_a_undefined"] and r["relative_to_a"] is None
    assert not r["relative_to_b_undefined"] and r["relative_to_b"] == 1.0
    with pytest.raises(ValueError):
        relative_improvement(_Stub(0.1, 0.1, ["a"]), _Stub(0.1, 0.1, ["b"]))


def test_report_dict_roundtrip():
    rep = _report(9)
    back = report_from_dict(rep.to_dict())
    assert back.to_dict() == rep.to_dict()
    assert math.isclose(back.median_worst, rep.median_worst)
