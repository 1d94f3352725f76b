import math

import numpy as np
import pytest

from lsts.harness import experiments as ex
from lsts.harness.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, histogram_table, main
from lsts.harness.config import (ConfigError, ExperimentConfig, format_config, load_config,
                                 parse_config)
from lsts.harness.gradcheck import REGISTRY, check_op, run_all
from lsts.sampler import write_offsets_csv
from lsts.synth import write_motion_csv

QUICK = "steps = 30\n"


def write_cfg(tmp_path, text):
    p = tmp_path / "cfg.txt"
    p.write_text(text)
    return p


# -- config --------------------------------------------------------------------------------

def test_config_roundtrip():
    cfg = ExperimentConfig().with_overrides(seed=7, lr=0.125, init="uniform", timing=True)
    assert parse_config(format_config(cfg)) == cfg
    assert parse_config(format_config(ExperimentConfig())) == ExperimentConfig()


def test_config_parse_details():
    cfg = parse_config("# comment\nseed = 3  # trailing\n\nnormalize = ratio\ntrainable = no\n")
    assert cfg.seed == 3 and cfg.normalize == "ratio" and cfg.trainable is False


@pytest.mark.parametrize("text", ["bogus = 1", "seed = 1\nseed = 2", "seed", "seed = x",
                                  "trainable = maybe", "init = cauchy", "c_low = 32",
                                  "loss_margin = 16", "gap = 0"])
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_defaults_follow_desk_scale():
    cfg = ExperimentConfig()
    assert (cfg.c_high, cfg.c_low, cfg.height, cfg.width, cfg.frames) == (16, 8, 32, 32, 24)
    assert (cfg.n_samples, cfg.steps, cfg.interval) == (9, 500, 10)


def test_lr_schedule():
    cfg = ExperimentConfig().with_overrides(lr=2.0, lr_decay=0.1, lr_decay_at=0.5, steps=10)
    assert cfg.lr_at(4) == 2.0 and cfg.lr_at(5) == pytest.approx(0.2)
    assert cfg.lr_at(1, total=100, base=1.0) == 1.0


def test_load_config_file(tmp_path):
    assert load_config(write_cfg(tmp_path, "seed = 9\n")).seed == 9


# -- records -----------------------------------------------------------------------------------

def test_metrics_records():
    cfg = ExperimentConfig().with_overrides(steps=20)
    res = ex.train_offsets(cfg)
    assert len(res.records) == 20
    for r in res.records:
        assert math.isfinite(r.loss) and r.loss >= 0
        assert len(r.format().split(",")) == len(ex.MetricsRecord.HEADER.split(","))


def test_train_offsets_fixed_has_no_steps():
    res = ex.train_offsets(ExperimentConfig(), trainable=False)
    assert res.records == [] and np.array_equal(res.offsets.values, res.initial)


def test_ablation_row_format():
    row = ex.AblationRow("method", "lsts", 0.5, 100, 1.25)
    assert row.format(False) == "method,lsts,0.5,100,nan"
    assert row.format(True).endswith(",1.250")


# -- gradcheck command ------------------------------------------------------------------------

def test_gradcheck_registry_lists_each_op_once():
    names = [n for n, *_ in run_all(instances=1)]
    assert names == list(REGISTRY) and len(set(names)) == len(names)
    assert {"bilinear_sample", "propagate_softmax", "propagate_ratio", "fuse",
            "transform"} <= set(names)


def test_gradcheck_op_passes():
    worst, checked, skipped = check_op("bilinear_sample", 5, 0, 1e-5, 1e-4)
    assert worst <= 1e-4 and checked > 0
    (name, line, ok, _), = run_all(instances=2, names=["bilinear_sample"])
    assert ok and line.startswith("bilinear_sample:") and line.endswith("PASS")


def test_gradcheck_tight_tol_fails(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "tol = 1e-12\ninstances = 2\n")
    code = main(["gradcheck", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == EXIT_FAIL
    report = (tmp_path / "o" / "gradcheck.txt").read_text().splitlines()
    assert any(line.endswith("FAIL") for line in report)
    assert report[-1].startswith("FAIL")
    assert [line.split(":")[0] for line in report[:-1]] == list(REGISTRY)


# -- CLI ---------------------------------------------------------------------------------------

def test_bad_config_exit_code(tmp_path):
    cfg = write_cfg(tmp_path, "unknown_key = 1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "missing.txt"),
                 "--out", str(tmp_path)]) == EXIT_CONFIG


def test_bad_seed_rejected(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["train", "--seed", str(2 ** 64), "--out", str(tmp_path)])
    assert e.value.code == 2


def test_train_writes_outputs(tmp_path):
    cfg = write_cfg(tmp_path, QUICK)
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == ex.MetricsRecord.HEADER and len(lines) == 31
    assert (out / "offsets.csv").read_text().startswith("n,dx,dy\n")
    assert (out / "motion.csv").read_text().startswith("t,dx,dy\n")
    assert parse_config((out / "config.txt").read_text()).steps == 30


def test_nan_loss_raises_divergence():
    cfg = ExperimentConfig().with_overrides(steps=5)
    seq = ex.make_sequence(cfg, frames=3)
    feats = ex.heavy_features(ex.build_extractors(cfg), seq.frames)
    feats[1, :, 10, 10] = np.nan
    with pytest.raises(ex.DivergenceError):
        ex.train_offsets(cfg, data=(seq, feats))


def test_train_divergence_exit(tmp_path, monkeypatch):
    def diverge(*a, **k):
        raise ex.DivergenceError("loss became nan at step 0")

    monkeypatch.setattr(ex, "train_offsets", diverge)
    cfg = write_cfg(tmp_path, QUICK)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_FAIL


def test_train_deterministic(tmp_path):
    cfg = write_cfg(tmp_path, QUICK)
    for d in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--seed", "5",
                     "--out", str(tmp_path / d)]) == EXIT_OK
    for name in ("metrics.csv", "offsets.csv", "initial_offsets.csv", "motion.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_export_after_train(tmp_path):
    out = tmp_path / "o"
    assert main(["train", "--config", str(write_cfg(tmp_path, QUICK)), "--out", str(out)]) == 0
    assert main(["export", "--out", str(out)]) == EXIT_OK
    rows = (out / "histogram.csv").read_text().splitlines()
    assert rows[0] == "bin,learned_dx,init_dx,motion_dx,learned_dy,init_dy,motion_dy"
    assert len(rows) == 1 + 65
    assert rows[1].startswith("-8.0,") and rows[-1].startswith("8.0,")
    assert (out / "intersection.csv").read_text().startswith("axis,learned,init\n")


def test_export_empty_motion_fails(tmp_path):
    write_offsets_csv(tmp_path / "offsets.csv", np.zeros((3, 2)))
    write_offsets_csv(tmp_path / "initial_offsets.csv", np.zeros((3, 2)))
    write_motion_csv(tmp_path / "motion.csv", np.zeros((0, 2)))
    assert main(["export", "--out", str(tmp_path)]) != EXIT_OK
    (tmp_path / "motion.csv").unlink()
    assert main(["export", "--out", str(tmp_path)]) != EXIT_OK


def test_histogram_table_columns():
    centers, cols = histogram_table(np.array([[1.5, -0.5]]), np.zeros((2, 2)),
                                    np.array([[1.5, -0.5]] * 4))
    assert centers.size == 65
    assert cols["learned_dx"].sum() == 1 and cols["init_dy"].sum() == 2
    assert cols["motion_dx"][np.argmin(np.abs(centers - 1.5))] == 4
