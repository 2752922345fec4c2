import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apct.corruption import KINDS, SEVERITIES, cell_name
from apct.errors import CompletenessError, ContractError, DegenerateReferenceError
from apct.metrics import (
    accuracy_grid_from_dir,
    build_report,
    corruption_error,
    load_report,
    mce,
    moa,
    overall_accuracy,
    relative_ce,
    rmce,
    save_report,
)
from apct.training import write_predictions


def test_overall_accuracy():
    assert overall_accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert overall_accuracy([0, 0], [1, 1]) == 0.0
    assert overall_accuracy([1, 2, 3, 4], [1, 2, 3, 0]) == 0.75
    with pytest.raises(ContractError):
        overall_accuracy([1, 2], [1])


def test_ce_examples():
    ref = [0.9, 0.8, 0.7, 0.6, 0.5]
    assert corruption_error(ref, ref) == 1.0
    assert corruption_error([1.0] * 5, ref) == 0.0
    half = [1 - (1 - r) / 2 for r in ref]
    assert corruption_error(half, ref) == pytest.approx(0.5)
    with pytest.raises(DegenerateReferenceError):
        corruption_error(ref, [1.0] * 5)


def test_rce_examples():
    ref = [0.9, 0.8, 0.7, 0.6, 0.5]
    assert relative_ce(0.95, ref, 0.95, ref) == 1.0
    assert relative_ce(0.9, [0.9] * 5, 0.95, ref) == 0.0
    assert relative_ce(0.8, [0.85] * 5, 0.95, ref) < 0
    with pytest.raises(DegenerateReferenceError):
        relative_ce(0.9, ref, 0.9, [0.9] * 5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=5, max_size=5), st.lists(st.floats(0.0, 0.99), min_size=5, max_size=5), st.permutations(range(5)))
def test_ce_ignores_severity_order(model, ref, perm):
    m, r = np.array(model), np.array(ref)
    assert corruption_error(m[list(perm)], r[list(perm)]) == pytest.approx(corruption_error(m, r), rel=1e-12)
    assert corruption_error(m, r) >= 0


def test_means():
    assert mce([1.0] * 7) == 1.0
    assert rmce([0.5, 1.5]) == 1.0
    assert moa(np.ones((7, 5))) == 1.0
    assert moa(np.full((7, 5), 0.3)) == pytest.approx(0.3)
    with pytest.raises(ContractError):
        mce([])


def test_published_rows():
    assert round(100 * mce([0.947, 0.883, 0.468, 0.850, 0.285, 0.298, 1.326]), 1) == 72.2
    assert round(100 * mce([1.045, 0.989, 0.489, 0.670, 0.300, 0.630, 1.071]), 1) == 74.2
    assert round(100 * moa([[v] for v in [0.911, 0.721, 0.884, 0.824, 0.916, 0.918, 0.715]]), 1) == 84.1


def _grid(seed):
    r = np.random.default_rng(seed)
    return {k: list(r.uniform(0.3, 0.95, 5)) for k in KINDS}


def test_report_identity_and_roundtrip(tmp_path):
    g = _grid(0)
    rep = build_report(0.97, g, 0.97, g, "m", "m", "suite")
    assert rep.mce == pytest.approx(1.0) and rep.rmce == pytest.approx(1.0)
    assert sum(len(v) for v in rep.oa.values()) == 35
    d = rep.to_dict()
    assert d["percent"]["mCE"] == "100.0"
    save_report(tmp_path / "r.json", rep)
    assert load_report(tmp_path / "r.json").to_dict() == d
    assert "mCE" in rep.table()


def test_report_incomplete():
    g = _grid(0)
    short = dict(g)
    del short["jitter"]
    with pytest.raises(CompletenessError, match="jitter"):
        build_report(0.9, short, 0.9, g)
    short = dict(g, rotate=g["rotate"][:4])
    with pytest.raises(CompletenessError):
        build_report(0.9, g, 0.9, short)


def test_report_mce_is_mean_of_ce():
    rep = build_report(0.95, _grid(1), 0.96, _grid(2))
    assert rep.mce == pytest.approx(np.mean(list(rep.ce.values())))
    assert rep.moa == pytest.approx(np.mean([rep.oa[k] for k in KINDS]))


def _write_preds(root, seed):
    r = np.random.default_rng(seed)
    labels = r.integers(0, 8, 20)
    root.mkdir()
    write_predictions(root / "clean.csv", [f"s{i}" for i in range(20)], labels, labels)
    for k in KINDS:
        for s in SEVERITIES:
            preds = np.where(r.random(20) < 0.3, (labels + 1) % 8, labels)
            write_predictions(root / f"{cell_name(k, s)}.csv", [f"s{i}" for i in range(20)], preds, labels)


def test_grid_from_dir(tmp_path):
    _write_preds(tmp_path / "p", 0)
    clean, grid = accuracy_grid_from_dir(tmp_path / "p")
    assert clean == 1.0
    assert set(grid) == set(KINDS) and all(len(v) == 5 for v in grid.values())
    (tmp_path / "p" / "rotate_3.csv").unlink()
    with pytest.raises(CompletenessError, match="rotate_3"):
        accuracy_grid_from_dir(tmp_path / "p")
