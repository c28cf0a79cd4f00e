import math

import numpy as np
import pytest

from eakd import analysis
from eakd.analysis import ExperimentGrid, GridResult
from eakd.data import BlobSpec, generate_blobs
from eakd.distill import DistillConfig
from eakd.errors import ConfigError, FormatError
from eakd.models import MlpSpec
from eakd.trainer import TrainConfig, TrainRecord, train_teacher, write_log


@pytest.fixture(scope="module")
def setup():
    train, val = generate_blobs(BlobSpec(class_count=4, dims=3, samples_per_class=25, seed=5))
    base = TrainConfig(DistillConfig(4), epochs=2, batch_size=16, learning_rate=0.05)
    teacher, _ = train_teacher(MlpSpec(3, (16,), 4), train, val, base)
    return base, teacher, MlpSpec(3, (6,), 4), train, val


def record(epoch, shares):
    nan4 = (math.nan,) * 4
    return TrainRecord(epoch, 1.0, 0.5, 0.5, 0.5, 0.6, shares, nan4, (0.0, 1.0, 2.0), (0.1,) * 5)


class TestGridResult:
    def test_aggregate_hand_values(self):
        res = GridResult("weighting_mode", ("ea",), (0, 1, 2), {("ea", 0): 0.70, ("ea", 1): 0.72, ("ea", 2): 0.74})
        mean, std, n = res.stats("ea")
        assert mean == pytest.approx(0.72, abs=1e-12)
        assert std == pytest.approx(math.sqrt(0.0008 / 3), abs=1e-12)
        assert round(std, 4) == 0.0163 and n == 3

    def test_variance_over_means(self):
        acc = {(b, s): a for b, vals in ((1.0, (0.5, 0.7)), (2.0, (0.6, 0.6))) for s, a in zip((0, 1), vals)}
        res = GridResult("dkd_beta", (1.0, 2.0), (0, 1), acc)
        # both per-value means are 0.6, so the spread across the axis is zero despite seed noise
        assert res.across_axis_variance() == pytest.approx(0.0, abs=1e-15)
        assert res.best_value() in (1.0, 2.0)

    def test_csv_layout(self, tmp_path):
        res = GridResult("entropy_temperature", (1.0, 3.0), (7,), {(1.0, 7): 0.25, (3.0, 7): 0.5})
        cells, agg = res.write(tmp_path, "tp")
        assert cells.read_text() == "axis_value,seed,final_val_acc\n1.0,7,0.25\n3.0,7,0.5\n"
        assert agg.read_text() == "axis_value,mean,std,n\n1.0,0.25,0.0,1\n3.0,0.5,0.0,1\n"
        assert analysis.read_grid_cells(cells) == [("1.0", 7, 0.25), ("3.0", 7, 0.5)]

    def test_bad_cells_file(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("a,b\n")
        with pytest.raises(FormatError):
            analysis.read_grid_cells(path)


class TestGrid:
    def test_validation(self, setup):
        base = setup[0]
        with pytest.raises(ConfigError):
            ExperimentGrid(base, "learning_rate", (0.1,), (0,))
        with pytest.raises(ConfigError):
            ExperimentGrid(base, "weighting_mode", ("student",), (0,))
        with pytest.raises(ConfigError):
            ExperimentGrid(base, "dkd_beta", (1.0,), (0, 0))

    def test_few_seeds_warn(self, setup, caplog):
        ExperimentGrid(setup[0], "dkd_beta", (1.0,), (0, 1, 2))
        assert "five or more" in caplog.text

    def test_missing_teacher(self, setup):
        base, _, spec, train, val = setup
        with pytest.raises(ConfigError):
            analysis.run_grid(ExperimentGrid(base, "dkd_beta", (1.0,), (0,)), None, spec, train, val)

    def test_order_and_threads_do_not_matter(self, setup, tmp_path):
        base, teacher, spec, train, val = setup
        seeds = (0, 1, 2, 3, 4)
        a = analysis.run_weighting_study(base, seeds, teacher, spec, train, val, ("none", "ea"), 1, tmp_path / "a")
        b = analysis.run_weighting_study(base, seeds, teacher, spec, train, val, ("none", "ea"), 3, tmp_path / "b")
        c = analysis.run_weighting_study(base, seeds[::-1], teacher, spec, train, val, ("ea", "none"))
        for name in ("weighting_mode_cells.csv", "weighting_mode_aggregate.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert a.accuracy == b.accuracy == c.accuracy
        assert len(list((tmp_path / "a" / "cells").iterdir())) == 10

    def test_tprime_grid(self, setup, tmp_path):
        base, teacher, spec, train, val = setup
        before = {k: v.data.tobytes() for k, v in teacher.items()}
        res = analysis.run_tprime_ablation(base.replace(weighting_mode="none"), (0, 1), teacher, spec, train, val,
                                           out_dir=tmp_path)
        assert res.values == analysis.TPRIME_VALUES
        assert {k: v.data.tobytes() for k, v in teacher.items()} == before
        # only T' varies: every cell is EA-weighted and otherwise identical to the base
        grid = ExperimentGrid(base.replace(weighting_mode="ea"), "entropy_temperature", res.values, (0, 1))
        for v, s in grid.cells():
            cfg = grid.config_for(v, s)
            assert cfg.distill.weighting_mode == "ea" and cfg.distill.entropy_temperature == v
            assert cfg.replace(entropy_temperature=3.0, seed=0) == base.replace(weighting_mode="ea")
        assert (tmp_path / "best_entropy_temperature.txt").read_text() == repr(float(res.best_value())) + "\n"

    def test_beta_sweep_is_paired(self, setup, tmp_path):
        base, teacher, spec, train, val = setup
        with pytest.raises(ConfigError):
            analysis.run_beta_sweep(base, (0,), teacher, spec, train, val, values=(1.0,))
        sweep = analysis.run_beta_sweep(base.replace(loss_kind="dkd"), (0, 1), teacher, spec, train, val,
                                        values=(1.0, 4.0), out_dir=tmp_path)
        assert sweep.dkd.seeds == sweep.ea_dkd.seeds and sweep.dkd.values == sweep.ea_dkd.values
        assert sweep.variance_dkd == pytest.approx(np.var(list(sweep.dkd.means().values())), abs=0)
        text = (tmp_path / "beta_variance.csv").read_text().splitlines()
        assert text[0] == "method,variance_over_beta" and text[1].startswith("dkd,")


class TestQuartileReport:
    def test_all_loss_in_top_quartile(self, tmp_path):
        path = tmp_path / "log.csv"
        write_log([record(1, (0.0, 0.0, 0.0, 1.0)), record(2, (0.1, 0.2, 0.3, 0.4))], path)
        rows = analysis.quartile_report(path)
        assert rows[:4] == [(1, 1, 0.0), (1, 2, 0.0), (1, 3, 0.0), (1, 4, 1.0)]
        for epoch in (1, 2):
            assert sum(s for e, _, s in rows if e == epoch) == pytest.approx(1.0, abs=1e-12)
        analysis.write_quartile_report(rows, tmp_path / "q.csv")
        assert (tmp_path / "q.csv").read_text().splitlines()[:2] == ["epoch,quartile,share", "1,1,0.0"]

    def test_shares_must_sum_to_one(self):
        with pytest.raises(FormatError):
            analysis.quartile_report([record(1, (0.5, 0.5, 0.5, 0.5))])
