import numpy as np
import pytest

from vesselseg import metrics as mx
from vesselseg import report, synth


def make_report(rng, n=3):
    rep = mx.MetricsReport()
    for i in range(n):
        rep.add(str(i + 1), **{m.lower(): float(rng.random()) for m in mx.METRIC_NAMES})
    return rep


class TestCsv:
    def test_round_trip(self, tmp_path, rng):
        rep = make_report(rng)
        path = tmp_path / "m.csv"
        report.write_metrics_csv(path, rep)
        back = report.read_metrics_csv(path)
        assert back.stack_ids == rep.stack_ids
        for m in mx.METRIC_NAMES:
            np.testing.assert_allclose(back.values[m], rep.values[m], rtol=1e-5)

    def test_summary_matches_recomputation_from_rows(self, tmp_path, rng):
        rep = make_report(rng, 5)
        path = tmp_path / "m.csv"
        report.write_metrics_csv(path, rep)
        back = report.read_metrics_csv(path)
        for m in mx.METRIC_NAMES:
            assert abs(back.mean(m) - np.mean(back.values[m])) < 1e-12
            assert abs(back.sd(m) - np.std(back.values[m], ddof=1)) < 1e-12


class TestTable:
    def test_layout_contains_all_metrics_and_stacks(self, rng):
        rep = make_report(rng, 4)
        txt = report.format_table(rep)
        for m in mx.METRIC_NAMES:
            assert m in txt
        for sid in rep.stack_ids:
            assert sid in txt
        assert "Mean" in txt and "SD" in txt


class TestSliceSelection:
    def test_best_worst_agree_with_per_slice_scan(self, rng):
        img, lab = synth.tube_stack((6, 40, 40), n_tubes=3, seed=3)
        mask = lab.copy()
        mask[2] = np.roll(mask[2], 6, axis=1)  # damage one slice
        scores = report.per_slice_avd(mask, lab)
        best, worst = report.best_worst_slices(mask, lab)
        valid = [(s, z) for z, s in enumerate(scores) if s is not None]
        assert best == min(valid)[1]
        assert worst == max(valid)[1]
        assert worst == 2

    def test_overlays_rendered_for_best_and_worst(self, tmp_path, rng):
        img, lab = synth.tube_stack((4, 32, 32), n_tubes=2, seed=1)
        prob = lab.astype(np.float32)
        paths = report.render_stack_overlays(tmp_path, "9", img, lab, prob, lab)
        assert len(paths) == 2
        assert all(p.exists() and p.stat().st_size > 0 for p in paths)

    def test_training_curves_figure(self, tmp_path):
        rows = [
            {"update": k, "split": s, "err": 1.0 / (k + 1), "cls": 0.5 / (k + 1)}
            for k in (0, 10, 20)
            for s in ("train", "test")
        ]
        report.render_training_curves(tmp_path / "c.png", rows)
        report.write_log_csv(tmp_path / "log.csv", rows)
        back = report.read_log_csv(tmp_path / "log.csv")
        assert (tmp_path / "c.png").stat().st_size > 0
        for a, b in zip(back, rows):
            assert a["update"] == b["update"] and a["split"] == b["split"]
            assert a["err"] == pytest.approx(b["err"], rel=1e-6)
            assert a["cls"] == pytest.approx(b["cls"], rel=1e-6)
