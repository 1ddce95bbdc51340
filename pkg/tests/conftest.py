"""Shared fixtures for the test suite.

The trained checkpoints and the paired sampler sweeps take minutes to
build, so they are cached under tests/_cache keyed by a digest of the
package sources and this file.  Editing anything under src/ or changing
a fixture here invalidates the cache and the next session retrains from
scratch.  Wall times are recorded when the work actually runs and stored
with the artifacts, so runtime gates always refer to a real measurement.
"""

import dataclasses
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from sketchanim import denoiser as dn
from sketchanim import diffusion as df
from sketchanim import formats as fm
from sketchanim import pipeline as pl
from sketchanim import training as tr

_HERE = Path(__file__).resolve().parent
_SRC = _HERE.parent / "src" / "sketchanim"


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(_SRC.glob("*.py")) + [Path(__file__)]:
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


@pytest.fixture(scope="session")
def cache_dir() -> Path:
    path = _HERE / "_cache" / _source_digest()
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# trained models
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class TrainedBase:
    weights: dn.DenoiserWeights
    initial_loss: float
    final_loss: float
    seconds: float
    checkpoint_id: str


@pytest.fixture(scope="session")
def trained_base(cache_dir) -> TrainedBase:
    """Base model trained on the full corpus with default settings."""
    ckpt = cache_dir / "base.fskt"
    meta = cache_dir / "base.json"
    if not (ckpt.exists() and meta.exists()):
        t0 = time.perf_counter()
        weights, report = tr.train_base(tr.make_corpus())
        seconds = time.perf_counter() - t0
        fm.save_checkpoint(ckpt, weights)
        meta.write_text(json.dumps({
            "initial_loss": report.initial_loss,
            "final_loss": report.final_loss,
            "seconds": seconds,
            "checkpoint_id": report.checkpoint_id,
        }))
    record = json.loads(meta.read_text())
    return TrainedBase(fm.load_checkpoint(ckpt), record["initial_loss"],
                       record["final_loss"], record["seconds"],
                       record["checkpoint_id"])


HELD_OUT_MOTION = "rotate"
LORA_ITERS = 250


@dataclasses.dataclass(frozen=True)
class LoraSetup:
    base: dn.DenoiserWeights
    adapters: tuple[dn.LoraAdapter, ...]
    base_digest_before: str
    base_digest_after: str
    seconds: float


@pytest.fixture(scope="session")
def lora_setup(cache_dir) -> LoraSetup:
    """A base trained without one motion class, plus adapters trained on it.

    The base sees every clip except the held-out motion; the adapters see
    only that motion.  The adapter surface includes the prompt table on
    top of the attention projections, because the held-out motion's
    embedding row never received a gradient during base training and the
    adapters are the only way to give it one.  The base digest is taken
    before and after adapter training so callers can check the frozen
    weights never moved.
    """
    base_path = cache_dir / "holdout_base.fskt"
    ad_path = cache_dir / "holdout_adapters.fskt"
    meta = cache_dir / "holdout.json"
    if not (base_path.exists() and ad_path.exists() and meta.exists()):
        seen = tuple(c for c in tr.make_corpus(seeds=10)
                     if c.motion_token != HELD_OUT_MOTION)
        held = tuple(c for c in tr.make_corpus(seeds=10)
                     if c.motion_token == HELD_OUT_MOTION)
        t0 = time.perf_counter()
        base, _ = tr.train_base(seen, epochs=4)
        before = tr.weights_digest(base)
        targets = dn.attention_targets(base.config) + ("embed.prompt",)
        adapters, _ = tr.train_lora(base, held, iters=LORA_ITERS, targets=targets)
        after = tr.weights_digest(base)
        seconds = time.perf_counter() - t0
        fm.save_checkpoint(base_path, base)
        fm.save_adapters(ad_path, adapters)
        meta.write_text(json.dumps({
            "before": before, "after": after, "seconds": seconds,
        }))
    record = json.loads(meta.read_text())
    return LoraSetup(fm.load_checkpoint(base_path), fm.load_adapters(ad_path),
                     record["before"], record["after"], record["seconds"])


# ---------------------------------------------------------------------------
# paired sampler runs
# ---------------------------------------------------------------------------

PAIRED_SEEDS = 16


def pair_case(i: int) -> tuple[np.ndarray, tuple[str, str]]:
    """Sketch and prompt for paired run ``i``; distinct combos per seed."""
    shape = tr.SHAPES[i % len(tr.SHAPES)]
    motion = tr.MOTIONS[i % len(tr.MOTIONS)]
    clip = tr.gen_clip(shape, motion, 200 + i)
    return clip.frames[0], (shape, motion)


@dataclasses.dataclass(frozen=True)
class PairedRuns:
    """Frames from the same 16 seeds under three sampler settings."""

    full: tuple[np.ndarray, ...]      # defaults, lambda = 1
    lam0: tuple[np.ndarray, ...]      # lambda = 0
    plain: tuple[np.ndarray, ...]     # composition disabled
    sketches: tuple[np.ndarray, ...]
    seconds_lambda: float             # the 32 lambda runs
    seconds_plain: float


@pytest.fixture(scope="session")
def paired_runs(trained_base, cache_dir) -> PairedRuns:
    frames_path = cache_dir / "paired.npz"
    meta = cache_dir / "paired.json"
    if not (frames_path.exists() and meta.exists()):
        arrays: dict[str, np.ndarray] = {}
        timings = {}
        for label, config in (
            ("full", df.SamplerConfig()),
            ("lam0", df.SamplerConfig(lam=0.0)),
            ("plain", df.SamplerConfig(compose_enabled=False)),
        ):
            t0 = time.perf_counter()
            for i in range(PAIRED_SEEDS):
                sketch, prompt = pair_case(i)
                req = pl.AnimationRequest(sketch, prompt,
                                          dataclasses.replace(config, seed=i),
                                          trained_base.weights)
                arrays[f"{label}_{i}"] = pl.animate(req).frames
            timings[label] = time.perf_counter() - t0
        np.savez(frames_path, **arrays)
        meta.write_text(json.dumps({
            "seconds_lambda": timings["full"] + timings["lam0"],
            "seconds_plain": timings["plain"],
        }))
    record = json.loads(meta.read_text())
    with np.load(frames_path) as data:
        grab = lambda label: tuple(data[f"{label}_{i}"]
                                   for i in range(PAIRED_SEEDS))
        full, lam0, plain = grab("full"), grab("lam0"), grab("plain")
    sketches = tuple(pair_case(i)[0] for i in range(PAIRED_SEEDS))
    return PairedRuns(full, lam0, plain, sketches,
                      record["seconds_lambda"], record["seconds_plain"])


# ---------------------------------------------------------------------------
# acceptance reporting
# ---------------------------------------------------------------------------

_criterion_lines: list[str] = []


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        verdict = "PASS" if exc_type is None else "FAIL"
        suffix = f"  ({self.detail})" if self.detail and exc_type is None else ""
        _criterion_lines.append(
            f"criterion {self.number:2d} {self.title}: {verdict}{suffix}")
        return False


@pytest.fixture
def criterion():
    """Context manager factory recording one pass/fail line per criterion."""
    return _Criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criterion_lines):
            terminalreporter.line(line)
