"""End-to-end sketch animation.

The driver inverts the input sketch to the top of the sampling ladder,
draws independent noise frames for the rest of the clip, then walks the
ladder back down.  Early steps refine the noise frames toward the
reference's own denoising direction and transplant the reference's
attention structure into the joint pass; late steps are plain denoising.
Everything downstream of the request is deterministic, so a result can
be reproduced from (sketch, prompt, config, checkpoint) alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import denoiser as dn
from . import diffusion as df
from . import guidance as gd
from . import numerics as nm
from .errors import DimensionError, PipelineError

Array = np.ndarray


@dataclass(frozen=True)
class AnimationRequest:
    """Everything one animation run depends on.

    ``prompt`` is a token tuple over the model vocabulary; ``adapters``
    are optional low-rank factors applied on top of the checkpoint.
    """

    sketch: Array
    prompt: tuple[str, ...]
    config: df.SamplerConfig
    weights: dn.DenoiserWeights
    adapters: tuple[dn.LoraAdapter, ...] = ()


@dataclass(frozen=True)
class StepDiagnostics:
    """What one descending step did: counter value, accepted alignment
    losses (None outside the window), repeat count of the reference in
    the spatial swap (None when composition was off), and which of the
    two attention swaps ran."""

    counter: int
    align_losses: tuple[float, ...] | None
    n: int | None
    spatial: bool
    temporal: bool


@dataclass(frozen=True)
class AnimationResult:
    frames: Array
    steps: tuple[StepDiagnostics, ...]
    seed: int
    config: df.SamplerConfig


def _frame_noise(seed: int, index: int, shape) -> Array:
    """Unit-normal noise for one generated frame slot.

    Keyed by (seed, slot), so a clip with more frames reuses the exact
    noise of a shorter one for the slots they share.
    """
    rng = np.random.Generator(np.random.Philox(key=[seed, index]))
    return nm.as_f32(rng.standard_normal(shape))


def _validated_sketch(req: AnimationRequest) -> Array:
    cfg = req.weights.config
    sketch = nm.as_f32(req.sketch)
    want = (cfg.height, cfg.width, cfg.channels)
    if sketch.shape != want:
        raise DimensionError(f"sketch must be {want}, got {sketch.shape}")
    if not np.all(np.isfinite(sketch)) or np.abs(sketch).max() > 1.0:
        raise PipelineError("sketch values must be finite and within [-1, 1]")
    return sketch


def animate(req: AnimationRequest) -> AnimationResult:
    """Run the full inversion / alignment / composition / denoising loop.

    With one output frame there is nothing to align or compose against,
    so the call collapses to inverting the sketch and sampling it back
    under null conditioning.
    """
    config = req.config
    weights, adapters = req.weights, req.adapters
    sketch = _validated_sketch(req)
    prompt = dn.embed_prompt(weights, req.prompt, adapters)
    schedule = df.make_schedule(t_train=weights.config.t_train, steps=config.steps)

    trajectory = df.ddim_invert(weights, sketch[None], schedule, adapters)
    if not np.all(np.isfinite(trajectory[-1])):
        raise PipelineError("non-finite state after inversion")
    nulls = None
    if config.refine_null:
        nulls, _ = df.null_text_refine(weights, trajectory, sketch[None], schedule,
                                       adapters, iters=config.refine_iters,
                                       step_size=config.refine_step)

    steps = config.steps
    m = config.frames
    if m == 1:
        x = df.reconstruct(weights, trajectory[-1], schedule, adapters, nulls)
        if not np.all(np.isfinite(x)):
            raise PipelineError("non-finite latents in single-frame reconstruction")
        diag = tuple(StepDiagnostics(t, None, None, False, False)
                     for t in range(steps, 0, -1))
        return AnimationResult(x, diag, config.seed, config)

    noise = [_frame_noise(config.seed, i, sketch.shape) for i in range(1, m)]
    x = np.concatenate([trajectory[-1], np.stack(noise)], axis=0)
    blocks = (config.compose_blocks if config.compose_blocks is not None
              else tuple(range(weights.config.blocks)))

    diag = []
    for t in range(steps, 0, -1):
        s_from = schedule.ddim_indices[t - 1]
        s_to = schedule.ddim_indices[t - 2] if t >= 2 else -1
        null_vec = None if nulls is None else nulls[steps - t]

        align_losses = None
        if config.align_enabled and t >= config.tau1:
            state = gd.frame_align(x[:1], gd.AlignState(x[1:]), t, weights,
                                   adapters, prompt, config,
                                   schedule=schedule, null_vector=null_vec)
            x = np.concatenate([x[:1], state.f_train], axis=0)
            align_losses = tuple(state.losses)

        n = None
        temporal = False
        if config.compose_enabled and t >= config.tau2:
            n = gd.n_schedule(t, steps, config.tau2, m)
            taps = gd.reference_taps(weights, x[:1], s_from, n, adapters, null_vec)
            temporal = not config.word_mode
            plan = gd.CompositionPlan(n, config.lam, taps,
                                      spatial_enabled=True, temporal_enabled=temporal)
            overrides = gd.build_overrides(plan, blocks)
            eps = dn.predict_noise(weights, x, s_from, prompt, adapters,
                                   overrides=overrides)
        else:
            eps = dn.predict_noise(weights, x, s_from, prompt, adapters)

        x = df.ddim_step(x, eps, s_from, s_to, schedule)
        if not np.all(np.isfinite(x)):
            raise PipelineError(f"non-finite latents after step counter {t}")
        diag.append(StepDiagnostics(t, align_losses, n, n is not None, temporal))

    return AnimationResult(x, tuple(diag), config.seed, config)


def postprocess(frames) -> Array:
    """Snap values back to pure black (-1) and white (+1) at the midpoint."""
    f = nm.as_f32(frames)
    return np.where(f >= 0.0, np.float32(1.0), np.float32(-1.0))


def extrapolate(sketch, prompts, config: df.SamplerConfig,
                weights: dn.DenoiserWeights,
                adapters: tuple[dn.LoraAdapter, ...] = ()) -> Array:
    """Chain one animation per prompt into a single long clip.

    Each segment starts from the previous segment's last frame snapped to
    black and white, and the shared junction frame is kept only once, so
    K prompts with M frames each yield M + (K-1)(M-1) frames.
    """
    if len(prompts) == 0:
        raise PipelineError("extrapolation needs at least one prompt")
    current = nm.as_f32(sketch)
    parts = []
    for k, prompt in enumerate(prompts):
        result = animate(AnimationRequest(current, tuple(prompt), config, weights,
                                          adapters))
        parts.append(result.frames if k == 0 else result.frames[1:])
        current = postprocess(result.frames[-1])
    return np.concatenate(parts, axis=0)


def eval_identity(frames, sketch) -> float:
    """Mean black-pixel overlap (intersection over union) against the sketch.

    A frame and sketch that are both entirely white count as a perfect
    match.
    """
    f = nm.as_f32(frames)
    s = nm.as_f32(sketch)
    if s.ndim == 4 and s.shape[0] == 1:
        s = s[0]
    if f.ndim != 4 or s.shape != f.shape[1:]:
        raise DimensionError(f"need frames [M, H, W, C] with sketch to match, "
                             f"got {f.shape} and {s.shape}")
    target = s < 0.0
    scores = []
    for frame in f:
        black = frame < 0.0
        union = np.logical_or(black, target).sum()
        if union == 0:
            scores.append(1.0)
        else:
            scores.append(float(np.logical_and(black, target).sum()) / float(union))
    return float(np.mean(scores))


def eval_motion(frames) -> float:
    """Mean absolute pixel change between consecutive frames."""
    f = nm.as_f32(frames)
    if f.ndim != 4 or f.shape[0] < 2:
        raise DimensionError(f"need at least two frames [M, H, W, C], got {f.shape}")
    return float(np.mean(np.abs(np.diff(f.astype(np.float64), axis=0))))
