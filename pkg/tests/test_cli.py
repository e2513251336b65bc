import json
import subprocess
import sys

import numpy as np
import pytest

from bayesrecon.cfl import read_cfl, write_cfl
from bayesrecon.cli import main
from bayesrecon.phantoms import PhantomSpec, generate_phantoms
from bayesrecon.prior import PriorNet, Topology, save


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


@pytest.fixture
def tiny_prior(tmp_path):
    path = tmp_path / "prior.bin"
    save(PriorNet(Topology(n_filters=8, n_blocks=1, n_mix=3), seed=0), path)
    return str(path)


def test_full_sampling_zero_filled_reproduces_truth(tmp_path):
    img = generate_phantoms(PhantomSpec(shape=(16, 16), seed=3), 1)[0]
    write_cfl(tmp_path / "img", img)
    assert main(["simulate", "--image", str(tmp_path / "img"), "--mask-kind", "full",
                 "--coils", "1", "--out", str(tmp_path / "y")]) == 0
    assert main(["recon", "--method", "zero-filled", "--kspace", str(tmp_path / "y"),
                 "--op", str(tmp_path / "y.op.json"), "--out", str(tmp_path / "x")]) == 0
    x = read_cfl(tmp_path / "x")
    ref = img.astype(np.complex64)
    assert np.max(np.abs(x - ref)) <= 4 * np.finfo(np.float32).eps * np.abs(ref).max()


def test_pipeline_end_to_end(tmp_path, tiny_prior, capsys):
    spec = write_json(tmp_path / "spec.json", {"version": 1, "shape": [16, 16], "seed": 2,
                                                "n": 4})
    assert main(["gen-data", "--spec", spec, "--out", str(tmp_path / "data")]) == 0
    manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
    assert manifest["n"] == 4 and manifest["phantom_spec"]["seed"] == 2
    train_cfg = write_json(tmp_path / "train.json", {
        "version": 1, "epochs": 1, "batch": 2,
        "topology": {"n_filters": 8, "n_blocks": 1, "n_mix": 3}})
    assert main(["train", "--data", str(tmp_path / "data"), "--config", train_cfg,
                 "--out", str(tmp_path / "p.bin")]) == 0
    assert (tmp_path / "p.loss.csv").read_text().startswith("step,")
    assert main(["simulate", "--image", str(tmp_path / "data" / "phantoms"), "--index", "1",
                 "--mask-kind", "uniform", "--R", "2", "--coils", "4", "--noise", "0.01",
                 "--out", str(tmp_path / "y")]) == 0
    rcfg = write_json(tmp_path / "r.json", {"version": 1, "max_iter": 5, "step_size": 1e-4})
    for method in ("zero-filled", "cg-sense", "map"):
        assert main(["recon", "--method", method, "--prior", str(tmp_path / "p.bin"),
                     "--kspace", str(tmp_path / "y"), "--op", str(tmp_path / "y.op.json"),
                     "--config", rcfg, "--out", str(tmp_path / method)]) == 0
    conv = (tmp_path / "map_conv.csv").read_text().splitlines()
    assert len(conv) == 6
    truth = read_cfl(tmp_path / "data" / "phantoms")[1]
    write_cfl(tmp_path / "truth", truth)
    capsys.readouterr()
    assert main(["metrics", "--recon", str(tmp_path / "cg-sense"), "--ref",
                 str(tmp_path / "truth"), "--method", "cg-sense",
                 "--out", str(tmp_path / "report.json")]) == 0
    table = capsys.readouterr().out
    assert "cg-sense\t" in table and "±" in table
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["rows"][0]["psnr"] > 25


def test_validation_errors_exit_1(tmp_path, tiny_prior, capsys):
    assert main(["simulate"]) == 1
    assert last_error(capsys)["code"] == 1
    bad = write_json(tmp_path / "bad.json", {"version": 7, "n": 2})
    assert main(["gen-data", "--spec", bad, "--out", str(tmp_path / "d")]) == 1
    err = last_error(capsys)
    assert err == {"error": "ValidationError", "code": 1, "message": err["message"]}
    assert "version" in err["message"]
    unknown = write_json(tmp_path / "u.json", {"version": 1, "n": 2, "colour": 3})
    assert main(["gen-data", "--spec", unknown, "--out", str(tmp_path / "d")]) == 1
    last_error(capsys)


def test_k_mismatch_and_format_errors_exit_3(tmp_path, tiny_prior, capsys):
    img = generate_phantoms(PhantomSpec(shape=(8, 8)), 1)[0]
    write_cfl(tmp_path / "img", img)
    main(["simulate", "--image", str(tmp_path / "img"), "--mask-kind", "full",
          "--out", str(tmp_path / "y")])
    args = ["recon", "--method", "map", "--prior", tiny_prior, "--kspace", str(tmp_path / "y"),
            "--op", str(tmp_path / "y.op.json"), "--out", str(tmp_path / "x")]
    assert main(args + ["--n-mix", "5"]) == 3
    assert "K mismatch" in last_error(capsys)["message"]
    assert main(["metrics", "--recon", str(tmp_path / "missing"), "--ref",
                 str(tmp_path / "img"), "--out", str(tmp_path / "r.json")]) == 3
    assert last_error(capsys)["error"] == "FormatError"
    (tmp_path / "junk.json").write_text("{not json")
    assert main(["run-experiment", "--spec", str(tmp_path / "junk.json")]) == 3
    last_error(capsys)


def test_numerical_failure_exit_2(tmp_path, tiny_prior, capsys):
    img = generate_phantoms(PhantomSpec(shape=(8, 8)), 1)[0]
    write_cfl(tmp_path / "img", img)
    main(["simulate", "--image", str(tmp_path / "img"), "--mask-kind", "uniform", "--R", "2",
          "--coils", "2", "--out", str(tmp_path / "y")])
    cfg = write_json(tmp_path / "c.json", {"version": 1, "step_size": 1e308, "max_iter": 3,
                                            "dropout_rate": 0.0})
    assert main(["recon", "--method", "map", "--prior", tiny_prior,
                 "--kspace", str(tmp_path / "y"), "--op", str(tmp_path / "y.op.json"),
                 "--config", cfg, "--out", str(tmp_path / "x")]) == 2
    err = last_error(capsys)
    assert err["error"] == "NumericalError" and err["message"].startswith("iteration")


def test_console_script_subprocess(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "bayesrecon.cli", "recon", "--method", "bogus"],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert json.loads(proc.stderr.strip())["code"] == 1


def test_run_experiment_twice_identical(tmp_path):
    spec = {"version": 1, "seed": 3,
            "data": {"shape": [12, 12], "n_test": 2, "n_val": 1},
            "prior": {"n_train": 4, "train": {"epochs": 1, "batch": 2},
                      "topology": {"n_filters": 8, "n_blocks": 1, "n_mix": 3}},
            "sampling": {"kind": "uniform", "R": 2, "acs": 2},
            "coils": 2, "step_grid": [1e-4], "recon": {"max_iter": 4}}
    path = write_json(tmp_path / "exp.json", spec)
    for name in ("a", "b"):
        assert main(["run-experiment", "--spec", path, "--out", str(tmp_path / name)]) == 0
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                     if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*")
                     if p.is_file())
    assert files_a == files_b and len(files_a) > 10
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
