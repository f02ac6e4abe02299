import os
import subprocess

import pytest

CLI = os.environ.get("GEOSEG_CLI")
pytestmark = pytest.mark.skipif(not CLI, reason="GEOSEG_CLI not set")
ROOM = os.path.join(os.path.dirname(__file__), "..", "..", "configs", "room.cfg")


def run(*args):
    return subprocess.run([CLI, *args], capture_output=True, text=True)


def test_gen_then_boundary_is_idempotent(tmp_path):
    scene = tmp_path / "room.xyz"
    assert run("gen", "--spec", ROOM, "--out", str(scene)).returncode == 0
    first = scene.read_bytes()
    assert run("gen", "--spec", ROOM, "--out", str(scene)).returncode == 0
    assert scene.read_bytes() == first
    marked = tmp_path / "marked.xyz"
    assert run("boundary", "--in", str(scene), "--out", str(marked)).returncode == 0
    rows = [line.split() for line in marked.read_text().splitlines() if line.strip()]
    assert all(len(r) == 8 for r in rows)
    assert {r[7] for r in rows} == {"0", "1"}


def test_errors_are_one_machine_readable_line(tmp_path):
    missing = run("boundary", "--in", str(tmp_path / "nope.xyz"))
    assert missing.returncode == 3
    assert missing.stderr.strip().startswith("error kind=missing_file code=3")
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[train]\nepoch = 3\n")
    bad = run("train", "--config", str(cfg))
    assert bad.returncode == 4 and "kind=config" in bad.stderr
    assert run().returncode == 2


def test_sweep_prints_a_row_per_variant(tmp_path):
    from conftest import TINY_CONFIG

    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CONFIG)
    out = tmp_path / "sweep.csv"
    r = run("sweep", "--config", str(cfg), "--lambda1", "0.1", "--lambda2", "0,0.2", "--ablations", "--epochs", "1",
            "--out", str(out))
    assert r.returncode == 0, r.stderr
    lines = out.read_text().splitlines()
    assert lines[0].startswith("name,")
    assert len(lines) == 1 + 2 + 7
