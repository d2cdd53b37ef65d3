import math

import numpy as np
import pytest

from gazegate.exceptions import InsufficientHeadsError, ShapeError, UndefinedMetricError
from gazegate.telemetry import (STEPS_HEADER, StepTrace, distinct2, hdi, hdi_batch, read_steps_csv,
                                steps_csv_text, trigger_stats, visual_attention_ratio, write_report,
                                write_steps_csv)


def test_hdi_pair_against_hand_computation():
    kl = lambda p, q: sum(a * math.log(a / b) for a, b in zip(p, q))
    P = [[0.5, 0.5], [0.9, 0.1]]
    assert hdi(P) == pytest.approx((kl(P[0], P[1]) + kl(P[1], P[0])) / 2, abs=1e-12)
    assert hdi(P) == pytest.approx(0.43945, abs=1e-4)


def test_hdi_identical_and_errors():
    assert hdi([[0.2, 0.8]] * 3) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InsufficientHeadsError):
        hdi([[1.0]])


def test_hdi_batch_matches_scalar():
    rows = np.random.default_rng(0).dirichlet(np.ones(6), size=(5, 4))
    assert np.allclose(hdi_batch(rows), [hdi(r) for r in rows], atol=1e-12)


def test_visual_ratio():
    assert visual_attention_ratio([0.2, 0.3, 0.5], [0, 1]) == pytest.approx(0.5)
    with pytest.raises(IndexError):
        visual_attention_ratio([0.5, 0.5], [2])


def test_distinct2():
    assert distinct2([1, 2, 1, 2]) == pytest.approx(2 / 3)
    assert distinct2([5, 5]) == 1.0
    with pytest.raises(UndefinedMetricError):
        distinct2([1])


def _trace(i, beta=0, cls="content"):
    return StepTrace(i, 24 + i, cls, beta, 0.1 * i + 1 / 3, 0.5, 0.25, 0.7, 0.8, 4 + beta)


def test_csv_round_trip(tmp_path):
    traces = [_trace(i, i % 2) for i in range(4)]
    path = tmp_path / "steps.csv"
    write_steps_csv(path, traces)
    rows = read_steps_csv(path)
    assert list(rows[0]) == STEPS_HEADER
    assert [float(r["D"]) for r in rows] == [t.D for t in traces]
    assert steps_csv_text(traces) == path.read_text()


def test_csv_schema_line_required(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text(",".join(STEPS_HEADER) + "\n")
    with pytest.raises(ShapeError):
        read_steps_csv(path)


def test_trigger_stats():
    stats = trigger_stats([_trace(0, 1), _trace(1, 0), _trace(2, 0, "function")])
    assert stats["content"]["rate"] == 0.5 and stats["function"]["triggers"] == 0


def test_report_is_stable(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    rec = {"x": np.float64(0.1) + 0.2, "y": [np.int64(3)], "z": {"b": 1, "a": 2}}
    write_report(a, rec)
    write_report(b, dict(reversed(list(rec.items()))))
    assert a.read_bytes() == b.read_bytes()
