"""Procedural sketch clips, base-model training, and low-rank fine-tuning.

Clips are 16x16 black-on-white line drawings of one shape under one motion:
translations move the stroke set a pixel per frame through a centered
travel window, scaling multiplies the outline by 6% per frame, rotation
turns it 9 degrees per frame.  Shape boundaries are sampled densely in
parametric form and rounded onto the grid, so a clip is reproducible
bit-for-bit from its (shape, motion, seed) triple.

Training is plain gradient descent on the denoising objective
E||eps - eps_hat||^2 with a global gradient-norm clip.  The base trainer
owns every weight tensor; the adapter trainer touches only the low-rank
factors and leaves the base checkpoint byte-identical.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import denoiser as dn
from . import diffusion as df
from . import numerics as nm
from .errors import (DimensionError, TrainingError, UndecidableError,
                     VocabularyError)

Array = np.ndarray

GRID = 16
SHAPES = dn.VOCAB[1:5]
MOTIONS = dn.VOCAB[5:]

_SAMPLES = 720
_TRANSLATE = {"left": (-1.0, 0.0), "right": (1.0, 0.0), "up": (0.0, -1.0), "down": (0.0, 1.0)}
# growth and shrinkage scale the outline about this canonical-space point
# rather than the origin; the resulting sub-pixel drift keeps successive
# frames from aliasing onto identical pixel sets
_SCALE_PIVOT = np.array([0.0, 0.4])


# ---------------------------------------------------------------------------
# clip generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClipSample:
    """One generated animation with its label pair and seed."""

    frames: Array
    shape_token: str
    motion_token: str
    seed: int


def _polygon(corners: Array) -> Array:
    per = _SAMPLES // len(corners)
    t = np.linspace(0.0, 1.0, per, endpoint=False)[:, None]
    parts = []
    for i in range(len(corners)):
        a, b = corners[i], corners[(i + 1) % len(corners)]
        parts.append(a + (b - a) * t)
    return np.concatenate(parts)


def _rotation(angle: float) -> Array:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def _boundary(shape: str) -> Array:
    """Canonical outline points, origin-centered, in canvas units."""
    if shape == "circle":
        th = np.linspace(0.0, 2.0 * np.pi, _SAMPLES, endpoint=False)
        return 3.0 * np.stack([np.cos(th), np.sin(th)], axis=1)
    if shape == "square":
        # tilted and nudged off the grid's symmetry point; paired with the
        # scale pivot below this makes 6% growth land at least one fresh
        # pixel every frame instead of snapping four at a time
        half = 2.55
        corners = np.array([[half, half], [-half, half], [-half, -half], [half, -half]])
        return _polygon(corners @ _rotation(np.deg2rad(8.0)).T) + np.array([-0.15, -0.15])
    if shape == "triangle":
        # no vertex sits on a canvas axis, so the widest point never pokes
        # past the border even at the far end of a translation run
        angles = np.deg2rad(np.array([15.0, 135.0, 255.0]))
        return _polygon(3.5 * np.stack([np.cos(angles), np.sin(angles)], axis=1))
    t = np.linspace(-1.0, 1.0, _SAMPLES)[:, None]
    return 4.5 * t * np.array([[np.cos(np.deg2rad(45.0)), np.sin(np.deg2rad(45.0))]])


def _raster(pts: Array) -> Array:
    img = np.ones((GRID, GRID, 1), np.float32)
    xi = np.floor(pts[:, 0] + 0.5).astype(np.int64)
    yi = np.floor(pts[:, 1] + 0.5).astype(np.int64)
    keep = (xi >= 0) & (xi < GRID) & (yi >= 0) & (yi < GRID)
    img[yi[keep], xi[keep], 0] = -1.0
    return img


def gen_clip(shape: str, motion: str, seed: int, frames: int = 10) -> ClipSample:
    """Render one deterministic clip of ``shape`` undergoing ``motion``.

    The start pose is jittered by up to two whole pixels per seed; for
    translations the jitter is perpendicular to the travel axis (the
    travel itself already spans the canvas), and growth keeps a one-pixel
    margin so the enlarged outline still fits.
    """
    if shape not in SHAPES:
        raise VocabularyError(f"unknown shape token {shape!r}")
    if motion not in MOTIONS:
        raise VocabularyError(f"unknown motion token {motion!r}")
    key = seed * 256 + SHAPES.index(shape) * 16 + MOTIONS.index(motion)
    rng = np.random.Generator(np.random.Philox(key=key))
    if motion in _TRANSLATE:
        ux, uy = _TRANSLATE[motion]
        jx = 0 if ux else int(rng.integers(-2, 3))
        jy = 0 if uy else int(rng.integers(-2, 3))
    else:
        amp = 1 if motion == "grow" else 2
        jx = int(rng.integers(-amp, amp + 1))
        jy = int(rng.integers(-amp, amp + 1))
    base = _boundary(shape)
    out = []
    for j in range(frames):
        size = 1.06 ** j if motion == "grow" else 0.94 ** j if motion == "shrink" else 1.0
        angle = np.deg2rad(9.0 * j) if motion == "rotate" else 0.0
        center = np.array([7.5 + jx, 7.5 + jy], dtype=np.float64)
        if motion in _TRANSLATE:
            ux, uy = _TRANSLATE[motion]
            center += np.array([ux, uy]) * (j - (frames - 1) / 2.0)
        elif motion in ("grow", "shrink"):
            center += _SCALE_PIVOT * (1.0 - size)
        pts = (base * size) @ _rotation(angle).T + center
        out.append(_raster(pts))
    return ClipSample(np.stack(out), shape, motion, seed)


def make_corpus(seeds: int = 25, frames: int = 10) -> tuple[ClipSample, ...]:
    """Every shape x motion pair rendered under ``seeds`` jitter seeds."""
    return tuple(
        gen_clip(shape, motion, seed, frames)
        for shape in SHAPES
        for motion in MOTIONS
        for seed in range(seeds)
    )


# ---------------------------------------------------------------------------
# motion classification oracle
# ---------------------------------------------------------------------------


def motion_oracle(frames) -> str:
    """Label a clip by what its strokes do, independent of the generator.

    Centroid displacement picks a translation direction, the stroke-count
    trend picks grow/shrink, and a clip that changes without moving or
    resizing is called rotation.  A clip whose frames are all identical
    gets the sentinel "none"; a frame with no strokes is undecidable.
    """
    frames = nm.as_f32(frames)
    if frames.ndim != 4 or frames.shape[0] < 2:
        raise DimensionError(f"need [frames >= 2, H, W, C], got {frames.shape}")
    black = frames[..., 0] < 0.0
    counts = black.sum(axis=(1, 2)).astype(np.float64)
    if np.any(counts == 0):
        raise UndecidableError("blank frame: no strokes to track")
    if all(np.array_equal(black[j], black[0]) for j in range(1, len(black))):
        return "none"
    ys, xs = np.mgrid[0:frames.shape[1], 0:frames.shape[2]]
    cx = (black * xs).sum(axis=(1, 2)) / counts
    cy = (black * ys).sum(axis=(1, 2)) / counts
    dx, dy = cx[-1] - cx[0], cy[-1] - cy[0]
    if max(abs(dx), abs(dy)) >= 2.0:
        if abs(dx) >= abs(dy):
            return "right" if dx > 0 else "left"
        return "down" if dy > 0 else "up"
    if _orientation_swing(black, cx, cy, counts) >= 0.35:
        # an elongated stroke set turning in place: its raster density
        # changes with angle, so test orientation before the area trend
        return "rotate"
    # median over three frames at each end: a single frame can alias onto
    # an unusually sparse raster (a grid-aligned diagonal, say) and a bare
    # endpoint ratio would misread the size trend
    trend = np.log(np.median(counts[-3:]) / np.median(counts[:3]))
    if trend >= 0.25:
        return "grow"
    if trend <= -0.25:
        return "shrink"
    return "rotate"


def _orientation_swing(black, cx, cy, counts) -> float:
    """Principal-axis angle change between first and last frame.

    Returns 0.0 unless both frames are clearly elongated; near-isotropic
    pixel clouds have no usable orientation.
    """
    ys, xs = np.mgrid[0:black.shape[1], 0:black.shape[2]]
    angles = []
    for j in (0, len(black) - 1):
        x0, y0 = xs - cx[j], ys - cy[j]
        m = black[j]
        xx = (m * x0 * x0).sum() / counts[j]
        yy = (m * y0 * y0).sum() / counts[j]
        xy = (m * x0 * y0).sum() / counts[j]
        spread = np.hypot(xx - yy, 2 * xy)
        if spread < 0.6 * (xx + yy):
            return 0.0
        angles.append(0.5 * np.arctan2(2 * xy, xx - yy))
    d = angles[1] - angles[0]
    return abs((d + np.pi / 2) % np.pi - np.pi / 2)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainReport:
    """Probe losses around a run plus per-epoch means and a checkpoint id."""

    initial_loss: float
    final_loss: float
    epoch_losses: tuple[float, ...]
    steps: int
    checkpoint_id: str


def weights_digest(weights: dn.DenoiserWeights) -> str:
    """Content hash of a checkpoint, stable across processes."""
    h = hashlib.sha256()
    for name in sorted(weights.tensors):
        h.update(name.encode())
        h.update(nm._val(weights.tensors[name]).tobytes())
    return h.hexdigest()[:16]


def _make_probe(dataset, rng, t_train: int, count: int = 16):
    draws = []
    for _ in range(count):
        clip = dataset[int(rng.integers(0, len(dataset)))]
        t = int(rng.integers(0, t_train))
        eps = nm.as_f32(rng.normal(size=clip.frames.shape))
        draws.append((clip, t, eps))
    return draws


def _probe_loss(weights, probe, schedule, adapters=()):
    total = 0.0
    for clip, t, eps in probe:
        x_t = df.q_sample(clip.frames, t, eps, schedule)
        prompt = dn.embed_prompt(weights, (clip.shape_token, clip.motion_token), adapters)
        pred = dn.predict_noise(weights, x_t, t, prompt, adapters)
        d = (pred - eps).astype(np.float64)
        total += float(np.mean(d * d))
    return total / len(probe)


# late-phase learning rate as a fraction of the peak; the decay never
# reaches zero so the endgame keeps enough gradient noise to settle in a
# flat basin rather than sharpening into the nearest minimum
_LR_FLOOR = 0.25


def _clip_factor(grads, limit: float = 1.0) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    return 1.0 if norm <= limit else limit / norm


def _draw(dataset, rng, t_train: int, null_fraction: float):
    clip = dataset[int(rng.integers(0, len(dataset)))]
    t = int(rng.integers(0, t_train))
    eps = nm.as_f32(rng.normal(size=clip.frames.shape))
    if rng.random() < null_fraction:
        tokens = None
    else:
        tokens = (clip.shape_token, clip.motion_token)
    return clip, t, eps, tokens


def train_base(dataset, epochs: int = 8, lr: float = 0.05, seed: int = 0,
               config: dn.ModelConfig | None = None,
               null_fraction: float = 0.1) -> tuple[dn.DenoiserWeights, TrainReport]:
    """Fit a fresh denoiser to the dataset with per-clip gradient steps.

    Each step draws one clip, one train index, and one noise tensor, then
    descends the mean squared noise-prediction error over all weights.
    The step size follows a half-cosine from ``lr`` down to a floor, so
    late steps settle without freezing the model into a sharp minimum.
    The null conditioning row is trained by dropping the prompt on a
    fraction of steps.  Probe losses bracket the run on a fixed
    batch so initial and final values are comparable.
    """
    if len(dataset) == 0:
        raise TrainingError("training needs a non-empty dataset")
    cfg = config if config is not None else dn.ModelConfig()
    schedule = df.make_schedule(t_train=cfg.t_train)
    weights = dn.init_weights(cfg, seed=seed)
    rng = np.random.Generator(np.random.Philox(key=[seed, 1]))
    probe = _make_probe(dataset, np.random.Generator(np.random.Philox(key=[seed, 2])),
                        cfg.t_train)
    initial = _probe_loss(weights, probe, schedule)

    order = np.arange(len(dataset))
    epoch_losses = []
    steps = 0
    total_steps = epochs * len(dataset)
    for _ in range(epochs):
        rng.shuffle(order)
        losses = []
        for i in order:
            clip = dataset[int(i)]
            t = int(rng.integers(0, cfg.t_train))
            eps = nm.as_f32(rng.normal(size=clip.frames.shape))
            tokens = None if rng.random() < null_fraction else (clip.shape_token,
                                                                clip.motion_token)
            x_t = df.q_sample(clip.frames, t, eps, schedule)

            tape = nm.Tape()
            nodes = {name: tape.input(name, val) for name, val in weights.tensors.items()}
            live = dn.DenoiserWeights(cfg, nodes)
            pred = dn.predict_noise(live, x_t, t, dn.embed_prompt(live, tokens))
            d = nm.sub(pred, eps)
            loss = nm.scale(nm.reduce_sum(nm.mul(d, d)), 1.0 / eps.size)
            rec = tape.finalize(loss)

            grads = rec.vjp(np.ones(1, np.float32))
            decay = 0.5 * (1.0 + math.cos(math.pi * steps / total_steps))
            step_lr = lr * (_LR_FLOOR + (1.0 - _LR_FLOOR) * decay)
            factor = step_lr * _clip_factor(grads)
            for name, g in grads.items():
                weights.tensors[name] -= np.float32(factor) * g
            losses.append(float(rec.output[0]))
            steps += 1
        mean = float(np.mean(losses))
        if not np.isfinite(mean) or mean > 10.0 * max(initial, 1e-12):
            raise TrainingError(f"diverged: epoch loss {mean} vs initial {initial}")
        epoch_losses.append(mean)

    final = _probe_loss(weights, probe, schedule)
    report = TrainReport(initial, final, tuple(epoch_losses), steps, weights_digest(weights))
    return weights, report


def train_lora(base: dn.DenoiserWeights, dataset, rank: int = 4, iters: int = 2500,
               lr: float = 0.01, seed: int = 0, batch: int = 8,
               targets: tuple[str, ...] | None = None,
               null_fraction: float = 0.1) -> tuple[tuple[dn.LoraAdapter, ...], TrainReport]:
    """Fit low-rank adapters on a frozen base checkpoint.

    Only the A/B factors receive gradient steps; the zero-initialized B
    makes iteration 0 equivalent to the base model.  Each iteration
    averages the denoising loss over ``batch`` independent draws.
    """
    if len(dataset) == 0:
        raise TrainingError("training needs a non-empty dataset")
    adapters = dn.init_adapters(base.config, rank=rank, seed=seed, targets=targets)
    schedule = df.make_schedule(t_train=base.config.t_train)
    rng = np.random.Generator(np.random.Philox(key=[seed, 3]))
    probe = _make_probe(dataset, np.random.Generator(np.random.Philox(key=[seed, 4])),
                        base.config.t_train)
    initial = _probe_loss(base, probe, schedule, adapters)

    factors = {ad.target: [ad.a.copy(), ad.b.copy()] for ad in adapters}
    losses = []
    for _ in range(iters):
        tape = nm.Tape()
        live = []
        for target, (a, b) in factors.items():
            live.append(dn.LoraAdapter(target, tape.input(f"{target}.a", a),
                                       tape.input(f"{target}.b", b)))
        live = tuple(live)
        total = None
        count = 0
        for _ in range(batch):
            clip, t, eps, tokens = _draw(dataset, rng, base.config.t_train, null_fraction)
            x_t = df.q_sample(clip.frames, t, eps, schedule)
            pred = dn.predict_noise(base, x_t, t, dn.embed_prompt(base, tokens, live), live)
            d = nm.sub(pred, eps)
            part = nm.scale(nm.reduce_sum(nm.mul(d, d)), 1.0 / eps.size)
            total = part if total is None else nm.add(total, part)
            count += 1
        rec = tape.finalize(nm.scale(total, 1.0 / count))
        grads = rec.vjp(np.ones(1, np.float32))
        factor = lr * _clip_factor(grads)
        for target, (a, b) in factors.items():
            a -= np.float32(factor) * grads[f"{target}.a"]
            b -= np.float32(factor) * grads[f"{target}.b"]
        losses.append(float(rec.output[0]))
        if not np.isfinite(losses[-1]) or losses[-1] > 10.0 * max(initial, 1e-12):
            raise TrainingError(f"diverged: loss {losses[-1]} vs initial {initial}")

    tuned = tuple(dn.LoraAdapter(t, a, b) for t, (a, b) in factors.items())
    final = _probe_loss(base, probe, schedule, tuned)
    epoch_losses = tuple(float(v) for v in losses)
    report = TrainReport(initial, final, epoch_losses, iters, weights_digest(base))
    return tuned, report
