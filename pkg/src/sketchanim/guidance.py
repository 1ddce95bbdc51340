"""Frame alignment and dual attention composition for guided sampling.

Two mechanisms steer the joint multi-frame denoising pass toward the
reference frame.  Attention composition swaps designated blocks of the
pre-softmax scores for cross-scores against a reference-only pass: the
first n spatial score blocks inherit the reference query, and the
first-frame column of every temporal score matrix is rebuilt from the
reference key with a multiplicative 1 + 0.02*lam bias.  Frame alignment
gradient-refines the non-reference noise tokens so that denoising all
frames together predicts the same noise for the reference slot as
denoising the reference alone.

Composition operates on plain arrays because overrides only apply to
unrecorded forward passes; alignment records the joint pass on a tape to
differentiate the mismatch loss with respect to the trainable tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import denoiser as dn
from . import diffusion as df
from . import numerics as nm
from .errors import AlignmentError, ConfigError, SiteError, StepRangeError

Array = np.ndarray


# ---------------------------------------------------------------------------
# reference-frame repeat schedule
# ---------------------------------------------------------------------------


def n_schedule(t: int, steps: int, tau2: int, frames: int) -> int:
    """How many frames borrow the reference query at descending step ``t``.

    Starts at ``frames`` when t equals ``steps`` and decays by one per
    step, clamped to 1.  Only defined inside the composition window.
    """
    if not tau2 <= t <= steps:
        raise StepRangeError(f"step {t} outside composition window [{tau2}, {steps}]")
    return min(frames, max(1, frames - (steps - t)))


# ---------------------------------------------------------------------------
# score composition
# ---------------------------------------------------------------------------


def compose_spatial(scores, ref_q, gen_k, n: int) -> Array:
    """Replace the first ``n`` per-frame score blocks with reference-query scores.

    ``scores`` is [frames, tokens, tokens] self-attention scores already
    scaled by 1/sqrt(dim); frames below ``n`` get ref_q @ gen_k.T with the
    same scaling, the rest pass through untouched.
    """
    scores = nm.as_f32(scores)
    ref_q = nm.as_f32(ref_q)
    gen_k = nm.as_f32(gen_k)
    if scores.ndim != 3 or scores.shape[1] != scores.shape[2]:
        raise SiteError(f"spatial scores must be [frames, tokens, tokens], got {scores.shape}")
    m, s, _ = scores.shape
    if ref_q.ndim != 3 or ref_q.shape[0] != 1 or ref_q.shape[1] != s:
        raise SiteError(f"reference query {ref_q.shape} does not fit scores {scores.shape}")
    if gen_k.shape != (m, s, ref_q.shape[2]):
        raise SiteError(
            f"generated keys {gen_k.shape} do not fit scores {scores.shape} "
            f"and reference query {ref_q.shape}"
        )
    if not 1 <= n <= m:
        raise SiteError(f"reference repeat count {n} outside [1, {m}]")
    out = scores.copy()
    out[:n] = nm.scaled_attention_scores(np.repeat(ref_q, n, axis=0), gen_k[:n])
    return out


def compose_temporal(scores, gen_q, ref_k, lam: float) -> Array:
    """Rebuild the first-frame key column from the reference key.

    ``scores`` is [tokens, frames, frames]; column 0 of every score matrix
    becomes gen_q @ ref_k.T / sqrt(dim) scaled by 1 + 0.02*lam, applied
    after the dot product so the factor is exactly multiplicative.  Other
    columns keep their self-attention values.
    """
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    scores = nm.as_f32(scores)
    gen_q = nm.as_f32(gen_q)
    ref_k = nm.as_f32(ref_k)
    if scores.ndim != 3 or scores.shape[1] != scores.shape[2]:
        raise SiteError(f"temporal scores must be [tokens, frames, frames], got {scores.shape}")
    s, m, _ = scores.shape
    if ref_k.ndim != 3 or ref_k.shape[0] != s or ref_k.shape[1] != 1:
        raise SiteError(f"reference key {ref_k.shape} does not fit scores {scores.shape}")
    if gen_q.shape != (s, m, ref_k.shape[2]):
        raise SiteError(
            f"generated queries {gen_q.shape} do not fit scores {scores.shape} "
            f"and reference key {ref_k.shape}"
        )
    cross = nm.scaled_attention_scores(gen_q, ref_k)
    out = scores.copy()
    out[:, :, 0] = cross[:, :, 0] * np.float32(1.0 + 0.02 * lam)
    return out


# ---------------------------------------------------------------------------
# plans and override wiring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompositionPlan:
    """One sampling step's score substitutions.

    ``reference_taps`` holds q/k captured from a pass over the reference
    frame tiled ``n`` times; ``n`` counts the frames whose spatial scores
    borrow the reference query.
    """

    n: int
    lam: float
    reference_taps: Mapping[dn.Site, dn.AttentionTap]
    spatial_enabled: bool = True
    temporal_enabled: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"reference repeat count must be >= 1, got {self.n}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")


def reference_taps(weights: dn.DenoiserWeights, x_r, t: int, n: int,
                   adapters: tuple[dn.LoraAdapter, ...] = (),
                   null_vector=None) -> dict[dn.Site, dn.AttentionTap]:
    """Capture q/k at every attention site from the tiled reference frame.

    The single reference frame is repeated ``n`` times so the spatial tap
    carries a frame axis of that length; with no frame-order features in
    the model the repeats are interchangeable and slot 0 stands for all.
    """
    x_r = nm.as_f32(x_r)
    if x_r.ndim != 4 or x_r.shape[0] != 1:
        raise SiteError(f"reference latent must be [1, H, W, C], got {x_r.shape}")
    taps: dict[dn.Site, dn.AttentionTap] = {}
    tiled = np.ascontiguousarray(np.repeat(x_r, n, axis=0))
    dn.predict_noise(weights, tiled, t, dn.null_prompt(weights, null_vector, adapters),
                     adapters, taps_out=taps)
    return taps


def _spatial_swap(ref_q: Array, n: int) -> Callable:
    def transform(scores, q, k):
        return compose_spatial(scores, ref_q, k, n)

    return transform


def _temporal_swap(ref_k: Array, lam: float) -> Callable:
    def transform(scores, q, k):
        return compose_temporal(scores, q, ref_k, lam)

    return transform


def build_overrides(plan: CompositionPlan,
                    blocks) -> dict[dn.Site, dn.AttentionOverride]:
    """Expand a plan into per-site score overrides for the given blocks."""
    out: dict[dn.Site, dn.AttentionOverride] = {}
    for b in blocks:
        if plan.spatial_enabled:
            site = (b, "spatial")
            tap = plan.reference_taps.get(site)
            if tap is None:
                raise SiteError(f"no reference tap recorded for site {site}")
            out[site] = dn.AttentionOverride(site, _spatial_swap(tap.q[:1], plan.n))
        if plan.temporal_enabled:
            site = (b, "temporal")
            tap = plan.reference_taps.get(site)
            if tap is None:
                raise SiteError(f"no reference tap recorded for site {site}")
            out[site] = dn.AttentionOverride(site, _temporal_swap(tap.k[:, :1, :], plan.lam))
    return out


# ---------------------------------------------------------------------------
# iterative frame alignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AlignState:
    """Trainable noise tokens for frames 2..M plus the last loss trace.

    ``losses`` lists the mismatch loss before optimization followed by one
    entry per accepted gradient step; the accepted sequence never
    increases.
    """

    f_train: Array
    losses: list[float] = field(default_factory=list)


def frame_align(x_r, state: AlignState, t: int, weights: dn.DenoiserWeights,
                adapters: tuple[dn.LoraAdapter, ...], prompt_input: dn.PromptEmbedding,
                config: df.SamplerConfig, *, schedule: df.DiffusionSchedule | None = None,
                null_vector=None) -> AlignState:
    """Gradient-refine the non-reference noise tokens at descending step ``t``.

    The target is the reference frame's solo noise prediction; the loss is
    the squared mismatch between that target and the reference slot of the
    joint prediction over [x_r, f_train].  Gradients flow only into
    f_train.  Each of ``config.align_iters`` iterations takes one accepted
    step, halving the step size up to three times if the raw step would
    increase the loss; if no scale helps the remaining iterations are
    abandoned.
    """
    if not config.tau1 <= t <= config.steps:
        raise StepRangeError(f"step {t} outside alignment window [{config.tau1}, {config.steps}]")
    tokens = nm.as_f32(state.f_train)
    if tokens.shape[0] == 0:
        return AlignState(tokens, [])
    if schedule is None:
        schedule = df.make_schedule(t_train=weights.config.t_train, steps=config.steps)
    train_idx = schedule.ddim_indices[t - 1]
    x_r = nm.as_f32(x_r)

    target = dn.predict_noise(weights, x_r, train_idx,
                              dn.null_prompt(weights, null_vector, adapters), adapters)

    def record_loss(toks: Array) -> nm.Recording:
        tape = nm.Tape()
        node = tape.input("tokens", toks)
        latents = nm.concat([x_r, node], axis=0)
        eps = dn.predict_noise(weights, latents, train_idx, prompt_input, adapters)
        diff = nm.sub(nm.narrow(eps, 0, 0, 1), target)
        return tape.finalize(nm.reduce_sum(nm.mul(diff, diff)))

    rec = record_loss(tokens)
    cur = float(rec.output[0])
    losses = [cur]
    for _ in range(config.align_iters):
        grad = rec.vjp(np.ones(1, np.float32), ("tokens",))["tokens"]
        if not np.all(np.isfinite(grad)):
            raise AlignmentError(f"non-finite alignment gradient at step {t}")
        step = config.align_step
        moved = False
        for _ in range(4):
            cand = nm.as_f32(tokens - step * grad)
            cand_rec = record_loss(cand)
            cand_loss = float(cand_rec.output[0])
            if np.isfinite(cand_loss) and cand_loss <= cur:
                tokens, rec, cur = cand, cand_rec, cand_loss
                losses.append(cand_loss)
                moved = True
                break
            step *= 0.5
        if not moved:
            break
    return AlignState(tokens, losses)
