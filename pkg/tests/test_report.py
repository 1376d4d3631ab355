import statistics
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from gflcl import report as R

TABLE1 = Path(__file__).resolve().parents[1] / "scripts" / "table1_published.csv"


def run(method, final, order=("A", "B"), seed=0, fp="abc", label=None, curves=()):
    return R.RunSummary(label or method, method, seed, list(order), fp, dict(final),
                        {t: True for t in order}, {order[0]: 1.0, order[-1]: None}, 1.0, list(curves))


def test_render_table_alignment():
    text = R.render_table(["method", "A"], [["ft", "1.00"], ["replay", "10.00"]])
    lines = text.splitlines()
    assert lines[0] == "method      A"
    assert lines[2] == "ft       1.00"
    assert len({len(l) for l in lines}) == 1


def test_csv_roundtrip():
    assert R.to_csv(["a", "b"], [["1", "x,y"]]) == 'a,b\n1,"x,y"\n'


def test_method_table_with_mr():
    runs = [run("ft", {"A": 10.0, "B": 10.0}), run("replay", {"A": 20.0, "B": 30.0})]
    headers, rows, mr = R.method_table(runs)
    assert headers == ["method", "A", "A_AF", "B", "B_AF", "AF", "MR"]
    assert mr == {"ft": 2.0, "replay": 1.0}
    assert rows[0] == ["ft", "10.00", "1.00", "10.00", "-", "1.00", "2.00"]


def test_method_table_single_method_omits_mr():
    headers, rows, mr = R.method_table([run("ft", {"A": 1.0, "B": 2.0}), run("ft", {"A": 3.0, "B": 4.0}, seed=1)])
    assert mr is None and "MR" not in headers
    assert rows == [["ft", "2.00", "1.00", "3.00", "-", "1.00"]]


def test_incomparable_runs():
    with pytest.raises(R.ComparabilityError):
        R.method_table([run("ft", {"A": 1, "B": 1}), run("lwf", {"A": 1, "B": 1}, fp="other")])
    with pytest.raises(R.ComparabilityError):
        R.method_table([run("ft", {"A": 1, "B": 1}), run("lwf", {"A": 1, "C": 1}, order=("A", "C"))])


def test_order_table_mean_stdev():
    runs = [run("gfl_d", {"A": a, "B": b}, order=o)
            for (a, b), o in zip([(90.0, 70.0), (80.0, 75.0), (85.0, 71.0)],
                                 [("A", "B"), ("B", "A"), ("A", "B")])]
    tables = R.order_tables(runs)
    headers, rows = tables["gfl_d_s0"]
    assert headers == ["order", "A", "B"]
    assert rows[-2] == ["MEAN", "85.00", f"{(70 + 75 + 71) / 3:.2f}"]
    assert rows[-1] == ["STDEV", f"{statistics.stdev([90, 80, 85]):.2f}", f"{statistics.stdev([70, 75, 71]):.2f}"]


def test_order_tables_need_several_orders():
    assert R.order_tables([run("ft", {"A": 1, "B": 1}), run("ft", {"A": 2, "B": 2})]) == {}


def test_offline_table_published():
    headers, rows, mr = R.offline_table(TABLE1.read_text())
    assert headers[-1] == "MR" and len(rows) == 7
    assert {r[0]: r[-1] for r in rows}["GFL_D"] == "2.50"


def test_offline_table_default_asr_direction():
    text = "method,KS,ASR\nx,90,5\ny,80,9\n"
    _, _, mr = R.offline_table(text)
    assert mr == {"x": 1.0, "y": 2.0}
    with pytest.raises(ValueError):
        R.offline_table("name,KS\nx,1\n")


def test_svg_is_well_formed():
    svg = R.svg_lines({"ft <a&b>": [(0, 10.0), (50, 40.0)], "gfl": [(0, 5.0), (50, 95.0)]}, title="KS")
    root = ET.fromstring(svg)
    polylines = root.findall("{http://www.w3.org/2000/svg}polyline")
    assert len(polylines) == 3  # axes + two series


def test_svg_empty_series():
    ET.fromstring(R.svg_lines({"nothing": []}))


def test_curves_helpers():
    r = run("ft", {"A": 1, "B": 1}, curves=[(50, "A", "A", 10.0), (100, "B", "A", 5.0), (100, "B", "B", 7.0)])
    assert R.curve_series([r], "A") == {"ft": [(50, 10.0), (100, 5.0)]}
    assert R.curves_csv([r]).splitlines()[1] == "ft,50,A,A,10.0"


def test_summary_from_dict():
    d = {"method": "ft", "seed": 1, "order": ["A"], "data_fingerprint": "f", "final": {"A": 1.0},
         "higher_is_better": {"A": True}, "curves": [[1, "A", "A", 2.0]]}
    s = R.RunSummary.from_dict(d)
    assert s.label == "ft" and s.curves == [(1, "A", "A", 2.0)] and s.average_forgetting is None
