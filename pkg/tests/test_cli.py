"""Command-line behavior: outputs, determinism, and exit codes."""

import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sketchanim import cli
from sketchanim import denoiser as dn
from sketchanim import formats as fm
from sketchanim import pipeline as pl
from sketchanim import training as tr
from sketchanim.errors import FormatError

SMALL = ["--steps", "6", "--tau1", "3", "--tau2", "4", "--frames", "3",
         "--align-iters", "1"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Dataset plus a one-epoch checkpoint, shared by the command tests."""
    root = tmp_path_factory.mktemp("cliwork")
    assert cli.main(["dataset", "gen", "--out", str(root / "data"),
                     "--seeds", "1"]) == 0
    assert cli.main(["train-base", "--data", str(root / "data"),
                     "--epochs", "1", "--out", str(root / "base.fskt")]) == 0
    return root


def _animate(workdir, out, *extra) -> int:
    return cli.main(["animate",
                     "--sketch", str(workdir / "data" / "circle_right_0" / "frame_00.pgm"),
                     "--shape", "circle", "--motion", "right",
                     "--checkpoint", str(workdir / "base.fskt"),
                     "--out", str(out), *SMALL, *extra])


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


def test_dataset_gen_writes_full_grid(workdir):
    data = workdir / "data"
    dirs = [p for p in data.iterdir() if p.is_dir()]
    assert len(dirs) == len(tr.SHAPES) * len(tr.MOTIONS)
    lines = (data / "labels.txt").read_text().splitlines()
    assert len(lines) == len(dirs)
    assert len(list((data / "circle_right_0").glob("frame_*.pgm"))) == 10


def test_dataset_gen_is_reproducible(workdir, tmp_path):
    assert cli.main(["dataset", "gen", "--out", str(tmp_path / "again"),
                     "--seeds", "1"]) == 0
    assert _tree_bytes(tmp_path / "again") == _tree_bytes(workdir / "data")


def test_load_dataset_round_trips_clips(workdir):
    clips = cli.load_dataset(workdir / "data")
    assert len(clips) == len(tr.SHAPES) * len(tr.MOTIONS)
    by_key = {(c.shape_token, c.motion_token, c.seed): c for c in clips}
    direct = tr.gen_clip("square", "shrink", 0)
    assert np.array_equal(by_key[("square", "shrink", 0)].frames, direct.frames)


# ---------------------------------------------------------------------------
# training commands
# ---------------------------------------------------------------------------


def test_train_base_writes_checkpoint_and_report(workdir):
    weights = fm.load_checkpoint(workdir / "base.fskt")
    report = fm.parse_kv((workdir / "base.fskt.report").read_text())
    assert report["checkpoint_id"] == tr.weights_digest(weights)
    assert float(report["final_loss"]) < float(report["initial_loss"])
    assert report["steps"] == str(len(tr.SHAPES) * len(tr.MOTIONS))


def test_train_base_divergence_exits_two(workdir, tmp_path):
    code = cli.main(["train-base", "--data", str(workdir / "data"),
                     "--epochs", "2", "--lr", "500.0",
                     "--out", str(tmp_path / "bad.fskt")])
    assert code == 2


def test_train_lora_zero_iters_is_noop_adapter(workdir, tmp_path):
    out = tmp_path / "ad.fskt"
    assert cli.main(["train-lora", "--data", str(workdir / "data"),
                     "--base", str(workdir / "base.fskt"),
                     "--iters", "0", "--out", str(out)]) == 0
    adapters = fm.load_adapters(out)
    assert adapters and all(a.rank == 4 for a in adapters)
    assert all(np.all(a.b == 0) for a in adapters)
    base = fm.load_checkpoint(workdir / "base.fskt")
    x = tr.gen_clip("circle", "up", 0).frames
    plain = dn.predict_noise(base, x, 30, dn.null_prompt(base))
    merged = dn.predict_noise(base, x, 30, dn.null_prompt(base), adapters)
    assert np.array_equal(plain, merged)


# ---------------------------------------------------------------------------
# animate
# ---------------------------------------------------------------------------


def test_animate_outputs_and_determinism(workdir, tmp_path, capsys):
    assert _animate(workdir, tmp_path / "a") == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("identity=") and " motion=" in line
    names = {p.name for p in (tmp_path / "a").iterdir()}
    assert {"frame_00.pgm", "frame_01.pgm", "frame_02.pgm", "raw_00.pgm",
            "contact.pgm", "manifest.txt"} <= names
    assert _animate(workdir, tmp_path / "b") == 0
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_animate_frames_are_postprocessed_binary(workdir, tmp_path):
    assert _animate(workdir, tmp_path / "out") == 0
    frame = fm.load_pgm(tmp_path / "out" / "frame_01.pgm")
    assert set(np.unique(frame)) <= {-1.0, 1.0}


def test_animate_lambda_changes_only_lambda_and_diagnostics(workdir, tmp_path):
    assert _animate(workdir, tmp_path / "l1", "--lambda", "1.0") == 0
    assert _animate(workdir, tmp_path / "l0", "--lambda", "0.0") == 0
    a = fm.parse_kv((tmp_path / "l1" / "manifest.txt").read_text())
    b = fm.parse_kv((tmp_path / "l0" / "manifest.txt").read_text())
    differing = {k for k in a if a[k] != b.get(k)}
    assert "lam" in differing
    assert differing <= {"lam"} | {k for k in a if k.startswith("diag_")}


def test_animate_config_file_with_flag_override(workdir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("steps=6\ntau1=3\ntau2=4\nframes=2\nseed=3\n")
    out = tmp_path / "cfgrun"
    assert cli.main(["animate",
                     "--sketch", str(workdir / "data" / "circle_right_0" / "frame_00.pgm"),
                     "--shape", "circle", "--motion", "right",
                     "--checkpoint", str(workdir / "base.fskt"),
                     "--config", str(cfg), "--seed", "9",
                     "--out", str(out)]) == 0
    manifest = fm.parse_manifest((out / "manifest.txt").read_text())
    assert manifest.config.steps == 6
    assert manifest.config.frames == 2
    assert manifest.config.seed == 9


def test_animate_ablation_flags_land_in_manifest(workdir, tmp_path):
    out = tmp_path / "ablate"
    assert _animate(workdir, out, "--no-align", "--no-compose", "--word-mode") == 0
    manifest = fm.parse_manifest((out / "manifest.txt").read_text())
    assert not manifest.config.align_enabled
    assert not manifest.config.compose_enabled
    assert manifest.config.word_mode


def test_replay_manifest_reproduces_frame_bytes(workdir, tmp_path):
    out = tmp_path / "replayed"
    assert _animate(workdir, out) == 0
    frames = cli.replay_manifest(out / "manifest.txt")
    snapped = pl.postprocess(frames)
    for i, frame in enumerate(snapped):
        assert fm.encode_pgm(frame) == (out / f"frame_{i:02d}.pgm").read_bytes()
    for i, frame in enumerate(frames):
        assert fm.encode_pgm(frame) == (out / f"raw_{i:02d}.pgm").read_bytes()


def test_replay_manifest_rejects_checkpoint_swap(workdir, tmp_path):
    out = tmp_path / "swap"
    assert _animate(workdir, out) == 0
    text = (out / "manifest.txt").read_text()
    text = text.replace("checkpoint_id=", "checkpoint_id=00000000")
    (out / "manifest.txt").write_text(text)
    with pytest.raises(FormatError):
        cli.replay_manifest(out / "manifest.txt")


# ---------------------------------------------------------------------------
# other commands
# ---------------------------------------------------------------------------


def test_extrapolate_single_prompt_matches_animate_files(workdir, tmp_path):
    assert _animate(workdir, tmp_path / "one") == 0
    assert cli.main(["extrapolate",
                     "--sketch", str(workdir / "data" / "circle_right_0" / "frame_00.pgm"),
                     "--prompts", "circle:right",
                     "--checkpoint", str(workdir / "base.fskt"),
                     "--out", str(tmp_path / "chain"), *SMALL]) == 0
    for i in range(3):
        assert ((tmp_path / "chain" / f"frame_{i:02d}.pgm").read_bytes()
                == (tmp_path / "one" / f"frame_{i:02d}.pgm").read_bytes())


def test_extrapolate_two_prompts_writes_joined_clip(workdir, tmp_path, capsys):
    assert cli.main(["extrapolate",
                     "--sketch", str(workdir / "data" / "circle_right_0" / "frame_00.pgm"),
                     "--prompts", "circle:right,circle:up",
                     "--checkpoint", str(workdir / "base.fskt"),
                     "--out", str(tmp_path / "chain2"), *SMALL]) == 0
    assert "wrote 5 frames" in capsys.readouterr().out
    assert len(list((tmp_path / "chain2").glob("frame_*.pgm"))) == 5


def test_invert_refine_never_hurts(workdir, capsys):
    sketch = str(workdir / "data" / "circle_right_0" / "frame_00.pgm")
    base = ["invert", "--sketch", sketch,
            "--checkpoint", str(workdir / "base.fskt"), *SMALL]
    assert cli.main(base) == 0
    plain = capsys.readouterr().out
    assert plain.startswith("error=")
    assert cli.main(base + ["--refine", "--refine-iters", "2"]) == 0
    line = capsys.readouterr().out.strip()
    before, after = (float(part.split("=")[1]) for part in line.split())
    assert after <= before


def test_eval_on_copies_of_sketch(workdir, tmp_path, capsys):
    sketch = workdir / "data" / "circle_right_0" / "frame_00.pgm"
    frames = tmp_path / "frames"
    frames.mkdir()
    for i in range(3):
        (frames / f"frame_{i:02d}.pgm").write_bytes(sketch.read_bytes())
    assert cli.main(["eval", "--frames", str(frames), "--sketch", str(sketch)]) == 0
    assert capsys.readouterr().out.strip() == "identity=1.000000 motion=0.000000"


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------


def test_exit_codes(workdir, tmp_path, capsys):
    sketch = str(workdir / "data" / "circle_right_0" / "frame_00.pgm")
    checkpoint = str(workdir / "base.fskt")

    assert cli.main(["animate", "--sketch", str(tmp_path / "no.pgm"),
                     "--shape", "circle", "--motion", "right",
                     "--checkpoint", checkpoint,
                     "--out", str(tmp_path / "x"), *SMALL]) == 66

    assert cli.main(["animate", "--sketch", sketch,
                     "--shape", "circle", "--motion", "wobble",
                     "--checkpoint", checkpoint,
                     "--out", str(tmp_path / "x"), *SMALL]) == 64

    assert cli.main(["animate", "--sketch", sketch,
                     "--shape", "circle", "--motion", "right",
                     "--checkpoint", checkpoint, "--tau1", "9", "--tau2", "3",
                     "--out", str(tmp_path / "x")]) == 64

    assert cli.main(["no-such-command"]) == 64
    assert cli.main(["animate", "--bogus-flag"]) == 64
    assert cli.main(["--help"]) == 0

    corrupt = tmp_path / "corrupt.fskt"
    corrupt.write_bytes(b"not a container")
    assert cli.main(["animate", "--sketch", sketch,
                     "--shape", "circle", "--motion", "right",
                     "--checkpoint", str(corrupt),
                     "--out", str(tmp_path / "x"), *SMALL]) == 66
    capsys.readouterr()


def test_module_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "sketchanim.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "animate" in proc.stdout
