import gzip
import json
import subprocess
import sys

import numpy as np
import pytest

from mondeq_cert import cli
from mondeq_cert.netio import load_network


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def workdir(tmp_path):
    assert run("gen", "--p0", 4, "--p", 6, "--K", 3, "--m", 1, "--seed", 7, "--out", tmp_path / "net.json",
               "--x0-out", tmp_path / "x.json", "--report", tmp_path / "gen.json") == 0
    return tmp_path


def test_gen_then_certify(workdir):
    out = workdir / "cert.json"
    assert run("certify", "--net", workdir / "net.json", "--x0", workdir / "x.json", "--eps", 0.05,
               "--norm", "inf", "--out", out) == 0
    rep = json.loads(out.read_text())
    res = rep["runs"][0]["results"][0]
    assert isinstance(res["certified"], bool)
    assert rep["norm"] == "inf" and rep["runs"][0]["eps"] == 0.05


def test_clopper_pearson_reference():
    lo, hi = cli.clopper_pearson(12, 20)
    assert lo == pytest.approx(0.3605, abs=5e-5) and hi == pytest.approx(0.8088, abs=5e-5)
    assert cli.clopper_pearson(0, 10)[0] == 0.0 and cli.clopper_pearson(10, 10)[1] == 1.0


def test_batch_summary_ratio():
    s = cli.batch_summary([{"certified": k < 12} for k in range(20)])
    assert s["ratio"] == 0.6 and s["ci95"][0] == pytest.approx(0.3605, abs=5e-5)


def test_normalization_radius_logged(tmp_path, caplog):
    run("gen", "--p0", 2, "--p", 3, "--K", 2, "--seed", 1, "--out", tmp_path / "n.json",
        "--x0-out", tmp_path / "x.json", "--mnist-normalization", "--report", tmp_path / "g.json")
    assert load_network(tmp_path / "n.json").normalization.sigma == 0.3081
    out = tmp_path / "r.json"
    with caplog.at_level("INFO", logger="mondeq_cert"):
        run("-v", "certify", "--net", tmp_path / "n.json", "--x0", tmp_path / "x.json", "--eps", 0.1,
            "--out", out)
    rep = json.loads(out.read_text())
    assert rep["runs"][0]["effective_eps"] == pytest.approx(0.1 / 0.3081)
    assert rep["runs"][0]["effective_eps"] == pytest.approx(0.3246, abs=1e-4)
    assert any("0.32457" in r.getMessage() for r in caplog.records)


def test_batch_with_attack_ordering(workdir):
    run("gen", "--p0", 4, "--p", 6, "--K", 3, "--seed", 7, "--out", workdir / "net.json",
        "--x0-out", workdir / "xs.json", "--inputs", 6, "--report", workdir / "g.json")
    out = workdir / "batch.json"
    run("certify", "--net", workdir / "net.json", "--x0", workdir / "xs.json", "--eps", 0.1, 0.6,
        "--attack", "--out", out)
    rep = json.loads(out.read_text())
    for r in rep["runs"]:
        assert r["summary"]["n"] == 6 and r["ordering_ok"]
        assert 0 <= r["summary"]["ratio"] <= 1


def test_workers_give_same_results(workdir):
    run("gen", "--p0", 4, "--p", 6, "--K", 3, "--seed", 7, "--out", workdir / "net.json",
        "--x0-out", workdir / "xs.json", "--inputs", 4, "--report", workdir / "g.json")
    a, b = workdir / "a.json", workdir / "b.json"
    run("certify", "--net", workdir / "net.json", "--x0", workdir / "xs.json", "--eps", 0.2, "--out", a)
    run("certify", "--net", workdir / "net.json", "--x0", workdir / "xs.json", "--eps", 0.2,
        "--workers", 2, "--out", b)
    assert cli.strip_timing(json.loads(a.read_text())) == cli.strip_timing(json.loads(b.read_text()))


def test_lipschitz_and_certify_lip(workdir):
    lip = workdir / "lip.json"
    assert run("lipschitz", "--net", workdir / "net.json", "--norm", 2, "--S-radius", 5.0,
               "--samples", 500, "--out", lip) == 0
    rep = json.loads(lip.read_text())
    assert rep["sampled_lower_bound"] <= rep["value"] + 1e-6
    out = workdir / "cl.json"
    assert run("certify-lip", "--net", workdir / "net.json", "--x0", workdir / "x.json", "--eps", 0.01,
               "--bound", lip, "--out", out) == 0
    res = json.loads(out.read_text())["runs"][0]["results"][0]
    assert set(res) >= {"delta", "tau", "certified"}


def test_certify_lip_outside_ball_fails(workdir):
    lip = workdir / "lip.json"
    run("lipschitz", "--net", workdir / "net.json", "--S-radius", 0.01, "--out", lip)
    assert run("certify-lip", "--net", workdir / "net.json", "--x0", workdir / "x.json", "--eps", 1.0,
               "--bound", lip, "--out", workdir / "o.json") == 1


def test_ellipsoid_figure(workdir):
    fig = workdir / "fig.svg"
    out = workdir / "e.json"
    assert run("ellipsoid", "--net", workdir / "net.json", "--x0", workdir / "x.json", "--eps", 0.1,
               "--figure", fig, "--labels", "0,1", "--samples", 300, "--out", out) == 0
    assert fig.read_text().lstrip().startswith("<?xml")
    rep = json.loads(out.read_text())
    assert rep["slope"] is True and rep["runs"][0]["results"][0]["figure"] == str(fig)


def test_attack_and_oracle(workdir):
    out = workdir / "a.json"
    assert run("attack", "--net", workdir / "net.json", "--x0", workdir / "x.json", "--eps", 2.0,
               "--norm", "inf", "--image", workdir / "adv.svg", "--out", out) == 0
    res = json.loads(out.read_text())["runs"][0]["results"][0]
    if res["success"]:
        assert (workdir / "adv.svg").exists()
    out = workdir / "o.json"
    assert run("oracle", "--net", workdir / "net.json", "--x0", workdir / "x.json", "--eps", 0.05,
               "--out", out) == 0
    assert "gaps" in json.loads(out.read_text())["runs"][0]["results"][0]


def test_dump_sdp(workdir):
    run("certify", "--net", workdir / "net.json", "--x0", workdir / "x.json", "--eps", 0.05,
        "--dump-sdp", workdir / "dump", "--no-early-exit", "--out", workdir / "c.json")
    dumps = sorted(workdir.glob("dump.*"))
    assert len(dumps) == 2 and "MATRIX" in dumps[0].read_text()


def _idx_file(path, n=3, rows=2, cols=2):
    data = np.arange(n * rows * cols, dtype=np.uint8) * 20
    header = b"".join(int(v).to_bytes(4, "big") for v in (2051, n, rows, cols))
    path.write_bytes(gzip.compress(header + data.tobytes()))
    return data.reshape(n, rows * cols)


def test_import_mnist(tmp_path):
    raw = _idx_file(tmp_path / "imgs.gz")
    assert run("import-mnist", "--images", tmp_path / "imgs.gz", "--out-dir", tmp_path / "vecs",
               "--count", 2, "--offset", 1, "--report", tmp_path / "r.json") == 0
    files = sorted((tmp_path / "vecs").glob("*.json"))
    assert [f.name for f in files] == ["00001.json", "00002.json"]
    v = np.array(json.loads(files[0].read_text()))
    np.testing.assert_allclose(v, (raw[1] / 255.0 - 0.1307) / 0.3081)
    (tmp_path / "bad").write_bytes(b"\x00" * 16)
    assert run("import-mnist", "--images", tmp_path / "bad", "--out-dir", tmp_path / "v2") == 1


def test_errors_exit_nonzero(tmp_path, workdir):
    assert run("certify", "--net", tmp_path / "missing.json", "--x0", workdir / "x.json",
               "--eps", 0.1) == 1
    assert run("certify", "--net", workdir / "net.json", "--x0", workdir / "x.json", "--eps", -0.1) == 2
    with pytest.raises(SystemExit):
        run("nosuchcommand")


def test_oracle_cap(tmp_path):
    run("gen", "--p0", 2, "--p", 13, "--K", 2, "--out", tmp_path / "big.json", "--x0-out",
        tmp_path / "x.json", "--report", tmp_path / "g.json")
    assert run("oracle", "--net", tmp_path / "big.json", "--x0", tmp_path / "x.json", "--eps", 0.1) == 1


def test_entry_point_installed(tmp_path):
    r = subprocess.run([sys.executable, "-m", "mondeq_cert.cli", "gen", "--p0", "2", "--p", "2", "--K", "2",
                        "--out", str(tmp_path / "n.json")], capture_output=True, text=True)
    assert r.returncode == 0 and json.loads(r.stdout)["command"] == "gen"
