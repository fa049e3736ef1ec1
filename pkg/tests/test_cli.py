import json

import numpy as np
import pytest

from contextcluster import cli, gradcheck, tensor as T
from contextcluster.model import build_model, count_parameters, preset, save_checkpoint
from contextcluster.viz import read_ppm

QUAD = "synthetic:quadrant:n=32,test=16"


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_params_json(capsys):
    code, out, _ = run(capsys, "params", "--preset", "micro32", "--no-macs")
    assert code == 0
    (row,) = json.loads(out)
    assert row["preset"] == "micro32" and row["params"] == count_parameters(build_model(preset("micro32")))


def test_train_then_eval_then_viz(tmp_path, capsys):
    out_dir = tmp_path / "run"
    code, out, _ = run(capsys, "train", "--preset", "micro32", "--data", QUAD, "--epochs", "1",
                       "--batch-size", "16", "--out", str(out_dir), "--ablate", "no-position")
    assert code == 0
    rep = json.loads(out)
    assert rep["header"]["ablations"] == "no-position"
    assert "# ablations: no-position" in (out_dir / "train_log.csv").read_text()
    ck = rep["checkpoint"]

    code, out1, _ = run(capsys, "eval", "--preset", "micro32", "--ablate", "no-position",
                        "--data", QUAD, "--checkpoint", ck)
    code2, out2, _ = run(capsys, "eval", "--preset", "micro32", "--ablate", "no-position",
                         "--data", QUAD, "--checkpoint", ck)
    assert code == code2 == 0 and out1 == out2
    assert 0 <= json.loads(out1)["accuracy"] <= 1

    code, out, _ = run(capsys, "viz", "--preset", "micro32", "--num-classes", "4",
                       "--checkpoint", ck, "--out", str(tmp_path / "viz"))
    assert code == 0
    files = json.loads(out)["files"]
    assert len(files) == 16 and read_ppm(files[0]).shape == (32, 32, 3)


def test_viz_no_partition_whole_grid(tmp_path, capsys):
    ck = tmp_path / "m.coc"
    save_checkpoint(build_model(preset("micro32", num_classes=4)), ck)
    code, out, _ = run(capsys, "viz", "--preset", "micro32", "--num-classes", "4", "--no-partition",
                       "--checkpoint", str(ck), "--out", str(tmp_path / "v"))
    assert code == 0
    first = read_ppm(json.loads(out)["files"][0])
    assert len(np.unique(first.reshape(-1, 3), axis=0)) <= preset("micro32").stages[0].local_centers


def test_viz_custom_image(tmp_path, capsys):
    ck = tmp_path / "m.coc"
    save_checkpoint(build_model(preset("micro32", num_classes=4)), ck)
    np.save(tmp_path / "img.npy", np.zeros((32, 32, 3), np.float32))
    code, _, _ = run(capsys, "viz", "--preset", "micro32", "--num-classes", "4", "--checkpoint",
                     str(ck), "--image", str(tmp_path / "img.npy"), "--out", str(tmp_path / "v"))
    assert code == 0


@pytest.mark.parametrize("argv, code", [
    (["train", "--data", "/does/not/exist"], 2),
    (["train", "--data", "synthetic:spiral"], 2),
    (["eval", "--data", QUAD, "--checkpoint", "/no/such.coc"], 3),
    (["viz", "--checkpoint", "/no/such.coc"], 3),
    (["params", "--preset", "gigantic"], 2),
    (["gradcheck", "--ops", "nonexistent"], 2),
])
def test_exit_codes(argv, code, capsys):
    assert run(capsys, *argv)[0] == code


def test_usage_error_from_argparse(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--epochs", "many"])
    assert e.value.code == 2


def test_missing_data_source(monkeypatch, capsys):
    monkeypatch.delenv("COC_DATA_DIR", raising=False)
    assert run(capsys, "eval", "--preset", "micro32")[0] == 2


def test_checkpoint_mismatch_exit3(tmp_path, capsys):
    ck = tmp_path / "m.coc"
    save_checkpoint(build_model(preset("micro32", num_classes=4)), ck)
    code, _, err = run(capsys, "eval", "--preset", "micro32", "--data", "synthetic:noise:n=16",
                       "--checkpoint", str(ck))
    assert code == 3 and "head.weight" in err


def test_numerical_abort_exit4(monkeypatch, capsys):
    real = cli.build_model

    def poisoned(cfg, seed=0):
        m = real(cfg, seed)
        m.head.bias.data[:] = np.nan
        return m

    monkeypatch.setattr(cli, "build_model", poisoned)
    code, out, _ = run(capsys, "train", "--preset", "micro32", "--data", QUAD, "--epochs", "1",
                       "--out", "/tmp/coc_nan_run")
    assert code == 4 and json.loads(out)["status"] == "numerical_abort"


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("preset = micro32\nstage3.heads = 2\n")
    code, out, _ = run(capsys, "params", "--config", str(cfg), "--no-macs")
    assert code == 0


def test_gradcheck_subset(capsys):
    code, out, _ = run(capsys, "gradcheck", "--ops", "matmul", "sigmoid")
    rep = json.loads(out)
    assert code == 0 and set(rep["max_rel_error"]) == {"matmul", "sigmoid"}


def test_gradcheck_exit_nonzero_on_bad_backward(monkeypatch, capsys):
    def bad_exp(t):
        y = np.exp(t.data)
        return T._make(y, (t,), lambda g: (2 * g * y,), "exp")

    monkeypatch.setattr(gradcheck, "CHECKS", dict(gradcheck.CHECKS))
    gradcheck.op_check("bad_exp", bad_exp, (3, 4))
    code, out, _ = run(capsys, "gradcheck", "--ops", "bad_exp")
    assert code != 0 and json.loads(out)["passed"] is False


def test_bench_schema_stable(capsys):
    argv = ["bench", "--grid", "16", "--centers", "16", "--regions", "1", "4", "16"]
    _, a, _ = run(capsys, *argv)
    _, b, _ = run(capsys, *argv)
    ra, rb = json.loads(a), json.loads(b)
    strip = lambda r: [{k: v for k, v in row.items() if k != "seconds"} for row in r["results"]]  # noqa: E731
    assert strip(ra) == strip(rb)
    sims = [row["similarity_macs"] for row in ra["results"]]
    assert sims[0] == 4 * sims[1] == 16 * sims[2]
