import csv
import json
import math

import numpy as np
import pytest

from sharelora import config as config_mod
from sharelora.cli import main
from sharelora.errors import InvalidInputError
from sharelora.pipeline import (
    SWEEP_FIELDS,
    SweepRow,
    calibrate_zeta_scale,
    expand_grid,
    format_cell,
    read_sweep,
    run_cell,
    sweep,
    synthesize,
)

from test_config_cli import SMALL

BASE = config_mod.from_dict(SMALL)


def test_synthesize_deterministic():
    a = synthesize(BASE)
    b = synthesize(BASE)
    np.testing.assert_array_equal(a[2].f0, b[2].f0)
    np.testing.assert_array_equal(a[2].labels, b[2].labels)
    c = synthesize(BASE.replace(seed=1))
    assert not np.array_equal(a[2].labels, c[2].labels)


def test_random_reference_policies():
    cfg = BASE.replace(**{"data.mu0": "random", "data.mu1": "random"})
    _, _, _, mu0, mu1 = synthesize(cfg)
    np.testing.assert_allclose(mu0.sum(axis=-1), 1.0)
    assert not np.allclose(mu0, mu1)


def test_expand_grid_order():
    cells = expand_grid(BASE, {"n_pairs": [10, 20], "algo": ["local", "share-left"]}, [1, 0])
    keys = [(c.data.n_pairs, algo, c.seed) for c, algo in cells]
    assert keys == [(10, "local", 1), (10, "local", 0), (10, "share-left", 1), (10, "share-left", 0),
                    (20, "local", 1), (20, "local", 0), (20, "share-left", 1), (20, "share-left", 0)]
    assert len(expand_grid(BASE, {}, [0])) == 1


def test_run_cell_columns():
    row = run_cell(BASE, "share-left")
    assert row.error == ""
    assert 0 <= row.acc_share <= 1 and math.isnan(row.acc_local)
    assert row.dist_b >= 0 and row.zeta > 0 and row.mean_value_gap >= -1e-12
    assert math.isnan(row.wall_ms)
    local = run_cell(BASE, "local")
    assert 0 <= local.acc_local <= 1 and math.isnan(local.dist_b)
    assert run_cell(BASE, "share-left", timing=True).wall_ms > 0


def test_run_cell_records_errors():
    cfg = BASE.replace(**{"model.head": "tanh"})
    row = run_cell(cfg, "share-left")
    assert row.error == ""
    assert math.isnan(row.zeta)
    degenerate = BASE.replace(**{"spectrum.leading": [0.0, 0.0]})
    row = run_cell(degenerate, "share-left")
    assert row.error.startswith("DegenerateError")


def test_format_cell():
    assert format_cell(0.1) == "0.1"
    assert format_cell(np.float64(1 / 3)) == repr(1 / 3)
    assert format_cell(math.nan) == "nan"
    assert format_cell(7) == "7"


def test_sweep_single_cell(tmp_path):
    out = tmp_path / "s.csv"
    rows = sweep(expand_grid(BASE, {}, [0]), str(out))
    assert len(rows) == 1
    with open(out, newline="") as fh:
        records = list(csv.reader(fh))
    assert tuple(records[0]) == SWEEP_FIELDS
    assert len(records) == 2
    back = read_sweep(str(out))
    assert back[0].cells() == rows[0].cells()


def test_sweep_byte_identical_across_threads(tmp_path):
    cells = expand_grid(BASE, {"n_pairs": [10, 20], "algo": ["share-left", "global"]}, [0, 1])
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    sweep(cells, str(a), threads=1)
    sweep(cells, str(b), threads=3)
    assert a.read_bytes() == b.read_bytes()


def test_read_sweep_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(InvalidInputError):
        read_sweep(str(path))


def test_sweep_cli(tmp_path, capsys):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"base": SMALL, "grid": {"n_users": [2, 3]}, "seeds": [0]}))
    out = tmp_path / "out.csv"
    assert main(["sweep", "--config", str(grid), "--algo", "local", "--out", str(out)]) == 0
    rows = read_sweep(str(out))
    assert [r.N for r in rows] == [2, 3]
    assert all(r.algo == "local" for r in rows)
    grid.write_text(json.dumps({"base": SMALL, "grid": {"algo": ["nope"]}}))
    assert main(["sweep", "--config", str(grid), "--out", str(out)]) == 1
    assert "grid.algo[0]" in capsys.readouterr().err


def test_calibrate_zeta_scale():
    ratios = np.arange(1, 11, dtype=float)
    assert calibrate_zeta_scale(ratios) == pytest.approx(3.0)
    assert calibrate_zeta_scale(ratios, coverage=1.0) == pytest.approx(math.sqrt(10))
    assert calibrate_zeta_scale([4.0]) == 2.0
    with pytest.raises(InvalidInputError):
        calibrate_zeta_scale([])


def test_sweep_row_schema():
    row = SweepRow(0, 1, 2, 1, 3, 2)
    assert len(row.cells()) == len(SWEEP_FIELDS)
