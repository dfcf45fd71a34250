"""CLI contracts: config parsing, describe echoes, exit codes, pipelines."""

import csv
import json
import os

import numpy as np
import pytest

from hsmoe import cli, tensor as T
from hsmoe.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, build_run_config, main, parse_config_file
from hsmoe.config import ConfigError
from hsmoe.volio import write_volume


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# ---------------------------------------------------------------------------
# config file


def test_config_file_roundtrip(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# comment\n"
        "seed = 11\n"
        "threads = 2\n"
        "network.preset = full\n"
        "train.lr = 2e-3\n"
        "train.steps = 5\n"
        "data.size = 8\n"
        "network.experts = [2, 3]\n"
    )
    values = parse_config_file(str(path))
    assert values["seed"] == 11
    assert values["network.experts"] == (2, 3)
    run = build_run_config(str(path))
    assert run.seed == 11 and run.threads == 2
    assert run.train.lr == 2e-3 and run.train.steps == 5
    assert run.data.size == 8
    assert run.network_overrides["experts"] == (2, 3)


def test_config_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("network.bogus = 3\n")
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_file(str(path))


def test_env_overrides_seed(tmp_path, monkeypatch):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 1\n")
    monkeypatch.setenv("HSMOE_SEED", "99")
    assert build_run_config(str(path)).seed == 99


# ---------------------------------------------------------------------------
# describe


def test_describe_full_preset_echoes_schedules(capsys):
    code, out, _ = run_cli(capsys, "describe", "--preset", "full")
    assert code == EXIT_OK
    assert "experts_level1: [4, 8, 12, 16]" in out
    assert "experts_level2: [8, 16, 24, 32]" in out
    assert "group_sizes: [2048, 1024, 512, 256]" in out
    assert "slots_per_expert: 4" in out
    assert "stem_channels: 48" in out
    assert "channels: [48, 96, 192, 384]" in out


def test_describe_tiny_parameter_count_matches_counter(capsys):
    from hsmoe.config import tiny_config
    from hsmoe.metrics import count_parameters
    from hsmoe.network import SegNet

    code, out, _ = run_cli(capsys, "describe", "--preset", "tiny", "--size", "32")
    assert code == EXIT_OK
    line = [l for l in out.splitlines() if l.startswith("parameters:")][0]
    assert int(line.split()[1]) == count_parameters(SegNet(tiny_config(), seed=0))


def test_describe_invalid_monotonicity_is_validation_error(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("network.experts = [4, 3]\nnetwork.base_group_size = 8\n"
                    "network.slots_per_expert = 1\nnetwork.stem_channels = 4\n")
    code, _, err = run_cli(capsys, "describe", "--config", str(path))
    assert code == EXIT_VALIDATION
    assert "increase strictly" in err


def test_unknown_flag_is_validation_error(capsys):
    code, _, err = run_cli(capsys, "describe", "--nope")
    assert code == EXIT_VALIDATION


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_fast_modules_pass(capsys):
    code, out, _ = run_cli(capsys, "gradcheck", "--modules", "tensor_core", "nn_prims")
    assert code == EXIT_OK
    assert "gradcheck: PASS" in out
    assert "tensor_core/matmul" in out


def test_gradcheck_reports_corrupted_gradient(capsys, monkeypatch):
    # negative control: corrupt one analytic backward and expect a named FAIL
    import hsmoe.suites as suites
    from hsmoe import nn, tensor as T_
    from hsmoe.gradcheck import grad_check, weighted_sum_loss
    from hsmoe.tensor import Tensor

    def corrupted_suite():
        g = T_.rng(5)
        x = Tensor(g.uniform(-1, 1, (2, 3)), requires_grad=True)

        def bad_tanh(t):
            out = T_.tanh(t)
            node = out.node
            orig = node.backward_fn
            node.backward_fn = lambda grad: tuple(gi * 1.01 for gi in orig(grad))
            return out

        return [grad_check(lambda: weighted_sum_loss(bad_tanh(x)), {"x": x},
                           name="nn_prims/corrupted_tanh", tol=1e-6)]

    monkeypatch.setitem(suites.MODULE_SUITES, "nn_prims", corrupted_suite)
    code, out, _ = run_cli(capsys, "gradcheck", "--modules", "nn_prims")
    assert code == EXIT_RUNTIME
    assert "nn_prims/corrupted_tanh" in out and "FAIL" in out


# ---------------------------------------------------------------------------
# bench


def test_bench_csv_schema_and_slope(tmp_path, capsys):
    out_csv = str(tmp_path / "routing.csv")
    code, out, _ = run_cli(capsys, "bench", "--out", out_csv,
                           "--min-exp", "8", "--max-exp", "11", "--repeats", "1")
    assert code == EXIT_OK
    assert "routing log-log slope" in out
    with open(out_csv) as fh:
        rows = list(csv.DictReader(fh))
    assert [c for c in rows[0]] == ["N", "K", "E", "S", "G", "wall_ms", "est_flops",
                                    "assign_flops_grouped", "assign_flops_global"]
    assert len(rows) == 4
    for row in rows:
        assert int(row["assign_flops_grouped"]) <= int(row["assign_flops_global"])
    # G=1 when K >= N: grouped equals global exactly
    first = rows[0]
    assert int(first["N"]) == 256 and int(first["K"]) == 256
    assert int(first["assign_flops_grouped"]) == int(first["assign_flops_global"])


# ---------------------------------------------------------------------------
# train / eval pipeline


def test_train_eval_roundtrip(tmp_path, capsys):
    hist = str(tmp_path / "hist.csv")
    ckpt = str(tmp_path / "ckpt")
    code, out, _ = run_cli(capsys, "train", "--preset", "tiny", "--classes", "2",
                           "--seed", "3", "--steps", "4", "--lr", "1e-3",
                           "--volumes", "2", "--size", "16", "--batch-size", "2",
                           "--history", hist, "--checkpoint", ckpt)
    assert code == EXIT_OK, out
    with open(hist) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert list(rows[0]) == ["step", "loss", "mdsc", "lr"]
    assert os.path.exists(ckpt + ".json") and os.path.exists(ckpt + ".bin")

    mcsv = str(tmp_path / "m.csv")
    mjson = str(tmp_path / "m.json")
    code, out, _ = run_cli(capsys, "eval", "--preset", "tiny", "--classes", "2",
                           "--seed", "3", "--volumes", "2", "--size", "16",
                           "--checkpoint", ckpt, "--out", mcsv, "--json-out", mjson)
    assert code == EXIT_OK, out
    summary = json.loads(open(mjson).read())
    assert "mdsc" in summary and "per_class" in summary
    with open(mcsv) as fh:
        rows = list(csv.DictReader(fh))
    assert {r["case_id"] for r in rows} == {"case000", "case001"}


def test_eval_missing_checkpoint_is_clear_error(capsys):
    code, _, err = run_cli(capsys, "eval", "--preset", "tiny", "--checkpoint", "/nonexistent/ck")
    assert code == EXIT_VALIDATION
    assert "missing checkpoint" in err


def test_eval_identical_pred_gt_fixture(tmp_path, capsys):
    pred_dir = tmp_path / "pred"
    gt_dir = tmp_path / "gt"
    pred_dir.mkdir()
    gt_dir.mkdir()
    g = T.rng(4)
    for name in ("a", "b"):
        lab = np.zeros((6, 6, 6), dtype=np.int64)
        lab[2:4, 2:4, 2:4] = 1
        lab[0:2, 0:2, 0:2] = g.integers(1, 2)
        write_volume(str(pred_dir / name), lab, dtype="u8")
        write_volume(str(gt_dir / name), lab, dtype="u8")
    mcsv = str(tmp_path / "m.csv")
    mjson = str(tmp_path / "m.json")
    code, out, _ = run_cli(capsys, "eval", "--classes", "2",
                           "--pred-dir", str(pred_dir), "--gt-dir", str(gt_dir),
                           "--out", mcsv, "--json-out", mjson)
    assert code == EXIT_OK
    summary = json.loads(open(mjson).read())
    assert summary["mdsc"] == 1.0
    assert summary["mhd95"] == 0.0


def test_threads_flag_gives_same_eval_results(tmp_path, capsys):
    pred_dir = tmp_path / "pred"
    gt_dir = tmp_path / "gt"
    pred_dir.mkdir()
    gt_dir.mkdir()
    g = T.rng(5)
    for name in ("a", "b", "c"):
        p = g.integers(0, 2, size=(5, 5, 5))
        q = g.integers(0, 2, size=(5, 5, 5))
        write_volume(str(pred_dir / name), p, dtype="u8")
        write_volume(str(gt_dir / name), q, dtype="u8")
    outs = []
    for threads in ("1", "3"):
        mcsv = str(tmp_path / f"m{threads}.csv")
        code, _, _ = run_cli(capsys, "eval", "--classes", "2", "--threads", threads,
                             "--pred-dir", str(pred_dir), "--gt-dir", str(gt_dir),
                             "--out", mcsv, "--json-out", str(tmp_path / f"m{threads}.json"))
        assert code == EXIT_OK
        outs.append(open(mcsv).read())
    assert outs[0] == outs[1]
