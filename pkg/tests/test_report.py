import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from shiftaudit.dataset import FEATURES
from shiftaudit.errors import SchemaError
from shiftaudit.report import (bars_svg, box_svg, fmt, heatmap_svg, read_tidy, render_csv,
                               write_csv, write_json)

NS = "{http://www.w3.org/2000/svg}"


def parse(svg):
    return ET.fromstring(svg)


def of_class(root, tag, cls):
    return [e for e in root.iter(NS + tag) if e.get("class") == cls]


def test_fmt():
    assert fmt(0.1) == "0.1"
    assert fmt(np.float64(1 / 3)) == repr(1 / 3)
    assert fmt(math.nan) == "nan"
    assert fmt(np.int64(4)) == "4"
    assert fmt(None) == ""
    assert float(fmt(np.float64(2.0) / 7)) == 2.0 / 7


def test_write_csv_and_json(tmp_path):
    p = write_csv(tmp_path / "a.csv", ["x", "y"], [(1, 0.5), ("b", math.nan)])
    assert p.read_bytes() == b"x,y\n1,0.5\nb,nan\n"
    j = write_json(tmp_path / "a.json", {"b": 1, "a": [1, 2]})
    assert j.read_text().startswith('{\n  "a"')


def test_read_tidy_errors(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("domain,rho\n")
    with pytest.raises(SchemaError, match="no data rows"):
        read_tidy(p, ["domain", "rho"])
    p.write_text("domain\nx\n")
    with pytest.raises(SchemaError, match="missing column"):
        read_tidy(p, ["domain", "rho"])
    with pytest.raises(SchemaError):
        read_tidy(tmp_path / "absent.csv", ["domain"])


def test_bars_shape():
    groups = {"league": np.linspace(0, 1, 17), "campus": np.linspace(1, 0, 17)}
    root = parse(bars_svg(FEATURES, groups, title="imp"))
    assert len(of_class(root, "rect", "bar")) == 34
    with pytest.raises(ValueError):
        bars_svg(FEATURES, {})


def test_heatmap_shape():
    labels = [f"d{i}" for i in range(6)]
    m = np.eye(6)
    m[0, 1] = m[1, 0] = 0.25
    root = parse(heatmap_svg(labels, m))
    assert len(of_class(root, "rect", "cell")) == 36
    values = [t.text for t in of_class(root, "text", "value")]
    assert len(values) == 36 and values.count("1.00") == 6 and values.count("0.25") == 2


def test_box_is_valid_svg():
    root = parse(box_svg({"a": [0.9, 0.95, 1.0], "b": [0.1, 0.5]}))
    assert root.tag == NS + "svg"


def _importance_csv(path, domains, model="rf", method="shapley"):
    rows = []
    for d in domains:
        for seed in ("0", "mean"):
            for f, v in zip(FEATURES, np.linspace(0.1, 1, 17)):
                rows.append(("h", model, method, d, seed, f, v, v / 9.35))
    write_csv(path, ["config_hash", "model", "method", "domain", "seed", "feature", "importance",
                     "normalized"], rows)


def test_render_bars_from_csv(tmp_path):
    p = tmp_path / "imp.csv"
    _importance_csv(p, ["a", "b", "c"])
    root = parse(render_csv(p, "bars"))
    assert len(of_class(root, "rect", "bar")) == 51


def test_render_bars_ambiguous(tmp_path):
    p = tmp_path / "imp.csv"
    _importance_csv(p, ["a"], model="rf")
    rows = p.read_text().splitlines()
    p.write_text("\n".join(rows + [r.replace(",rf,", ",mlp,") for r in rows[1:]]) + "\n")
    with pytest.raises(SchemaError, match="select one"):
        render_csv(p, "bars")
    assert len(of_class(parse(render_csv(p, "bars", model="mlp")), "rect", "bar")) == 17
    with pytest.raises(SchemaError, match="no rows"):
        render_csv(p, "bars", model="dt")


def test_render_heatmap_from_csv(tmp_path):
    labels = [f"d{i}" for i in range(6)]
    rows = [("rf", "shapley", a, b, 1.0 if a == b else 0.5) for a in labels for b in labels]
    p = write_csv(tmp_path / "h.csv", ["model", "method", "domain_a", "domain_b", "rho"], rows)
    assert len(of_class(parse(render_csv(p, "heatmap")), "rect", "cell")) == 36


def test_render_box_and_unknown(tmp_path):
    p = write_csv(tmp_path / "b.csv", ["model", "method", "domain", "rho"],
                  [("rf", "shapley", "a", 0.9), ("mlp", "shapley", "a", 0.4)])
    assert parse(render_csv(p, "box")).tag == NS + "svg"
    with pytest.raises(SchemaError):
        render_csv(p, "pie")
    bad = write_csv(tmp_path / "n.csv", ["domain", "rho"], [("a", "high")])
    with pytest.raises(SchemaError, match="non-numeric"):
        render_csv(bad, "box")
