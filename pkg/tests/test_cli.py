import io
import os

import numpy as np
import pytest

from tvbilevel.cli import load_config, main, parse_config_text
from tvbilevel.data import add_gaussian_noise, load_image, save_image
from tvbilevel.exceptions import ConfigError
from tvbilevel.metrics import ssim
from tvbilevel.params import parse_field


def run_cli(*argv):
    out = io.StringIO()
    code = main(list(argv), out=out)
    return code, out.getvalue()


@pytest.fixture
def two_pixel(tmp_path):
    np.save(tmp_path / "clean.npy", np.array([[0.25, 0.75]]))
    np.save(tmp_path / "noisy.npy", np.array([[0.0, 1.0]]))
    (tmp_path / "pairs.txt").write_text("clean.npy noisy.npy\n")
    return tmp_path


@pytest.fixture
def small_manifest(tmp_path):
    rng = np.random.default_rng(5)
    clean = np.kron(rng.random((2, 2)), np.ones((4, 4)))
    save_image(tmp_path / "c.pgm", clean)
    (tmp_path / "m.txt").write_text("c.pgm SYNTH 0.05 3\n")
    return tmp_path / "m.txt"


def test_config_parsing(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# comment\ntr.eta1 = 0.2\nmodel.schemes = forward, centered\n"
                        "data.manifest = sub/m.txt\n")
    cfg = load_config(cfg_file, ["tr.eta1=0.3"])
    assert cfg["tr.eta1"] == 0.3
    assert cfg["model.schemes"] == ["forward", "centered"]
    assert cfg["data.manifest"] == str(tmp_path / "sub" / "m.txt")
    with pytest.raises(ConfigError):
        parse_config_text("no equals sign")
    with pytest.raises(ConfigError):
        load_config(None, ["tr.bogus=1"])


def test_denoise_zero_alpha_is_identity(tmp_path):
    u = np.arange(30).reshape(5, 6) / 255
    save_image(tmp_path / "in.pgm", u)
    code, text = run_cli("denoise", f"data.input={tmp_path}/in.pgm",
                         f"data.output={tmp_path}/out.pgm", "param.alpha=0")
    assert code == 0
    np.testing.assert_array_equal(load_image(tmp_path / "out.pgm"), u)
    assert text.startswith("iterations 0")


def test_denoise_reports_quality(tmp_path):
    rng = np.random.default_rng(0)
    clean = np.kron(rng.random((2, 2)), np.ones((8, 8)))
    save_image(tmp_path / "clean.png", clean)
    save_image(tmp_path / "noisy.npy", add_gaussian_noise(load_image(tmp_path / "clean.png"), 0.05, 1))
    code, text = run_cli("denoise", f"data.input={tmp_path}/noisy.npy",
                         f"data.clean={tmp_path}/clean.png", f"data.output={tmp_path}/o.png",
                         "param.alpha=0.05")
    assert code == 0
    vals = dict(line.split() for line in text.splitlines())
    assert float(vals["ssim"]) > float(vals["ssim_input"])
    assert float(vals["stationarity"]) <= 1e-9


@pytest.mark.skipif(not os.environ.get("TVB_CAMERAMAN"), reason="cameraman image not available")
def test_denoise_cameraman_ssim(tmp_path):
    clean = load_image(os.environ["TVB_CAMERAMAN"])
    code, _ = run_cli("denoise", f"data.input={os.environ['TVB_CAMERAMAN']}", "data.sigma=0.05",
                      f"data.output={tmp_path}/o.npy", "param.alpha=0.0155", "solver.tol=1e-6")
    assert code == 0
    assert 0.72 <= ssim(np.load(tmp_path / "o.npy"), clean) <= 0.82


def test_exit_codes(tmp_path, two_pixel):
    assert run_cli("denoise", f"data.input={tmp_path}/nope.pgm", f"data.output={tmp_path}/o.pgm")[0] == 3
    assert run_cli("train", "tr.unknown=1")[0] == 1
    assert run_cli("frobnicate")[0] == 1
    assert run_cli("train", "tr.eta1=abc")[0] == 1
    assert run_cli("train", f"data.manifest={tmp_path}/missing.txt")[0] == 3
    assert run_cli("sweep", f"data.manifest={two_pixel}/pairs.txt", "param.kind=perpixel")[0] == 1
    (tmp_path / "bad.pgm").write_bytes(b"P5\n2 2\n255\n\x00")
    assert run_cli("denoise", f"data.input={tmp_path}/bad.pgm", f"data.output={tmp_path}/o.pgm")[0] == 3
    assert run_cli("denoise", f"data.input={two_pixel}/noisy.npy", f"data.output={tmp_path}/o.npy",
                   "param.alpha=0.3", "solver.max_iter=1", "solver.tol=1e-14", "solver.polish=no")[0] == 2


def test_train_two_pixel(two_pixel):
    out = two_pixel / "out"
    code, text = run_cli("train", f"data.manifest={two_pixel}/pairs.txt", f"output.dir={out}",
                         "solver.tol=1e-12")
    assert code == 0
    pf = parse_field((out / "alpha.txt").read_text())
    assert abs(pf.dofs[0] - 0.25) <= 1e-3
    for name in ("trace.csv", "pairs.csv", "metrics.csv"):
        assert (out / name).is_file()
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == "patch,iterations,step_norm,cost,ssim,psnr"


def test_train_deterministic(small_manifest, tmp_path):
    args = ["train", f"data.manifest={small_manifest}", "param.kind=patch 2x2", "tr.delta0=0.05",
            "tr.tol=1e-4"]
    assert run_cli(*args, f"output.dir={tmp_path}/a")[0] == 0
    assert run_cli(*args, f"output.dir={tmp_path}/b", "run.threads=2")[0] == 0
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()
    assert (tmp_path / "a" / "alpha.txt").read_bytes() == (tmp_path / "b" / "alpha.txt").read_bytes()


def test_train_patch_4x4_emits_16_dofs(small_manifest, tmp_path):
    code, _ = run_cli("train", f"data.manifest={small_manifest}", "param.kind=patch 4x4",
                      f"output.dir={tmp_path}", "tr.max_iter=3", "tr.delta0=0.05", "tr.tol=0.04",
                      "tr.delta_t=0.045")
    assert code == 0
    pf = parse_field((tmp_path / "alpha.txt").read_text())
    assert pf.p == 16 and pf.kind == "patch"


def test_sweep(tmp_path, small_manifest):
    clean = np.kron(np.eye(2), np.ones((2, 2)))
    save_image(tmp_path / "u.pgm", clean)
    (tmp_path / "same.txt").write_text("u.pgm u.pgm\n")
    code, _ = run_cli("sweep", f"data.manifest={tmp_path}/same.txt", "sweep.grid=0",
                      f"output.dir={tmp_path}/s0")
    assert code == 0
    assert (tmp_path / "s0" / "sweep.csv").read_text().splitlines() == ["alpha,cost", "0,0"]
    code, _ = run_cli("sweep", f"data.manifest={small_manifest}", "sweep.grid=0.1,0.0001,0.02",
                      f"output.dir={tmp_path}/s1")
    rows = (tmp_path / "s1" / "sweep.csv").read_text().splitlines()[1:]
    alphas = [float(r.split(",")[0]) for r in rows]
    costs = [float(r.split(",")[1]) for r in rows]
    assert alphas == sorted(alphas)
    assert costs[1] < costs[0] and costs[1] < costs[2]
    # full precision output
    assert len(rows[1].split(",")[1].replace(".", "").lstrip("0")) >= 15


def test_gradcheck(small_manifest):
    code, text = run_cli("gradcheck", f"data.manifest={small_manifest}", "gradcheck.gammas=100",
                         "param.kind=patch 2x2", "solver.huber_tol=1e-13", "param.init=0.03")
    assert code == 0, text
    assert "huber gamma 100 max_rel_error" in text
    assert run_cli("gradcheck", f"data.manifest={small_manifest}", "gradcheck.direction=zero")[0] == 1


def test_verify(two_pixel, tmp_path):
    code, text = run_cli("verify", f"data.manifest={two_pixel}/pairs.txt", "param.alpha=0.25",
                         "solver.tol=1e-12", f"output.dir={tmp_path}/v")
    assert code == 0
    assert (tmp_path / "v" / "certificate.txt").read_text() == text
    code, text = run_cli("verify", f"data.manifest={two_pixel}/pairs.txt", "param.alpha=0.31",
                         "solver.tol=1e-12")
    assert code == 2
    assert text.startswith("status not-stationary")
    assert "residual parameter_complementarity" in text


def test_compare_discretizations(small_manifest, tmp_path):
    code, text = run_cli("compare-discretizations", f"data.manifest={small_manifest}",
                         f"output.dir={tmp_path}", "tr.delta0=0.05", "tr.tol=1e-3", "tr.delta_t=0.01")
    assert code == 0, text
    rows = (tmp_path / "compare.csv").read_text().splitlines()
    assert rows[0] == "model,iterations,cost" and len(rows) == 3
    assert {f"alpha_multi_{i}.txt" for i in range(3)} <= set(os.listdir(tmp_path))
