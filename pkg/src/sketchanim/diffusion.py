"""Noise schedule, deterministic DDIM stepping, inversion, null refinement.

The sampler is the eta=0 DDIM map between two points of the cumulative
signal-retention ladder alpha_bar.  One step is written in coefficient form

    x_to = c1 * x_from + c2 * eps_hat,
    c1 = sqrt(ab_to / ab_from),  c2 = sqrt(1 - ab_to) - c1 * sqrt(1 - ab_from)

so stepping a state onto its own level is exactly the identity and a zero
noise estimate is a pure rescale.  Inversion runs the same recursion up the
ladder, evaluating the model at the destination index with the current
state; replaying the steps down then lands within float tolerance of the
original image when the model is smooth.

Null refinement walks the sampling steps top-down and gradient-descends a
per-step replacement for the null conditioning vector so the sampled state
tracks the stored inversion trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import denoiser as dn
from . import numerics as nm
from .errors import ConfigError, DimensionError

Array = np.ndarray


@dataclass(frozen=True)
class DiffusionSchedule:
    """Train-step noise ladder plus the sampler's index subset."""

    t_train: int
    beta: Array
    alpha_bar: Array
    ddim_indices: tuple[int, ...]


def make_schedule(t_train: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02,
                  steps: int = 25) -> DiffusionSchedule:
    """Linear beta ladder with ``steps`` evenly spaced sampler indices.

    The sampler indices always include the final train index; steps equal
    to t_train yields every index.
    """
    if t_train < 1 or steps < 1 or steps > t_train:
        raise ConfigError(f"need 1 <= steps <= t_train, got steps={steps}, t_train={t_train}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta64 = np.linspace(beta_start, beta_end, t_train, dtype=np.float64)
    alpha_bar64 = np.cumprod(1.0 - beta64)
    indices = tuple(((j + 1) * t_train) // steps - 1 for j in range(steps))
    return DiffusionSchedule(
        t_train=t_train,
        beta=nm.as_f32(beta64),
        alpha_bar=nm.as_f32(alpha_bar64),
        ddim_indices=indices,
    )


def _ab(schedule: DiffusionSchedule, s: int) -> float:
    """alpha_bar at train index s; s < 0 addresses the clean state (1.0)."""
    if s < 0:
        return 1.0
    if s >= schedule.t_train:
        raise ConfigError(f"train index {s} outside [0, {schedule.t_train})")
    return float(schedule.alpha_bar[s])


def q_sample(x0, s: int, eps, schedule: DiffusionSchedule):
    """Noising map sqrt(ab) * x0 + sqrt(1 - ab) * eps."""
    ab = _ab(schedule, s)
    return nm.add(nm.scale(x0, math.sqrt(ab)), nm.scale(eps, math.sqrt(1.0 - ab)))


def ddim_step(x_t, eps_hat, s_from: int, s_to: int, schedule: DiffusionSchedule):
    """Deterministic DDIM transition between two ladder indices.

    ``s_to = -1`` targets the clean state.  Works on arrays or tape nodes.
    """
    ab_from = _ab(schedule, s_from)
    ab_to = _ab(schedule, s_to)
    c1 = math.sqrt(ab_to / ab_from)
    c2 = math.sqrt(1.0 - ab_to) - c1 * math.sqrt(1.0 - ab_from)
    return nm.add(nm.scale(x_t, c1), nm.scale(eps_hat, c2))


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs for guided sampling.

    ``steps`` counts sampler transitions; the descending step counter runs
    steps..1 and the alignment / composition windows are counter >= tau1 and
    counter >= tau2 (boundaries included, so both mechanisms cover the early,
    high-noise part of the descent).
    """

    steps: int = 25
    tau1: int = 10
    tau2: int = 15
    lam: float = 1.0
    frames: int = 10
    align_iters: int = 3
    align_step: float = 0.05
    seed: int = 0
    word_mode: bool = False
    align_enabled: bool = True
    compose_enabled: bool = True
    compose_blocks: tuple[int, ...] | None = None
    refine_null: bool = False
    refine_iters: int = 8
    refine_step: float = 40.0

    def __post_init__(self):
        if not 1 <= self.tau1 <= self.steps or not 1 <= self.tau2 <= self.steps:
            raise ConfigError(f"tau windows must lie in [1, {self.steps}]")
        if self.tau1 > self.tau2:
            raise ConfigError(f"tau1 {self.tau1} must not exceed tau2 {self.tau2}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.frames < 1:
            raise ConfigError(f"frames must be >= 1, got {self.frames}")
        if self.align_iters < 0 or self.align_step <= 0:
            raise ConfigError("alignment needs iters >= 0 and a positive step size")


def _default_eps_fn(weights: dn.DenoiserWeights, adapters):
    def eps_fn(x, t, prompt_vector):
        return dn.predict_noise(weights, x, t,
                                dn.null_prompt(weights, prompt_vector, adapters), adapters)

    return eps_fn


def ddim_invert(weights: dn.DenoiserWeights, x0, schedule: DiffusionSchedule,
                adapters: tuple = (), eps_fn=None) -> list[Array]:
    """Run the DDIM recursion up the ladder under the null prompt.

    Args:
        x0: clean single frame [1, H, W, C].
        eps_fn: optional (x, t, prompt_vector) -> eps override, mainly for
            oracle tests; the default wraps predict_noise.

    Returns the trajectory [x0, x_{i0}, ..., x_{i(T-1)}]: element j is the
    state after j inversion steps, ending at the top of the ladder.
    """
    x0 = nm.as_f32(x0)
    if x0.ndim != 4 or x0.shape[0] != 1:
        raise DimensionError(f"inversion wants a single frame [1,H,W,C], got {x0.shape}")
    if eps_fn is None:
        eps_fn = _default_eps_fn(weights, adapters)
    null_vec = (None if weights is None
                else nm._val(dn.embed_prompt(weights, None, adapters).vector))

    traj = [x0]
    x = x0
    prev = -1
    for idx in schedule.ddim_indices:
        eps = eps_fn(x, idx, null_vec)
        x = ddim_step(x, eps, prev, idx, schedule)
        traj.append(nm._val(x))
        prev = idx
    return traj


def reconstruct(weights: dn.DenoiserWeights, x_top, schedule: DiffusionSchedule,
                adapters: tuple = (), null_vectors=None, eps_fn=None) -> Array:
    """Sample back down from the top of the ladder under the null prompt.

    ``null_vectors`` may be one vector or a list with one entry per step in
    descending order (the refinement output).
    """
    if eps_fn is None:
        eps_fn = _default_eps_fn(weights, adapters)
    steps = len(schedule.ddim_indices)
    vecs = _per_step_vectors(weights, null_vectors, steps, adapters)
    x = nm.as_f32(x_top)
    for i, pos in enumerate(range(steps - 1, -1, -1)):
        s_from = schedule.ddim_indices[pos]
        s_to = schedule.ddim_indices[pos - 1] if pos > 0 else -1
        eps = eps_fn(x, s_from, vecs[i])
        x = ddim_step(x, eps, s_from, s_to, schedule)
    return x


def _per_step_vectors(weights, null_vectors, steps, adapters=()):
    if null_vectors is None:
        base = (None if weights is None
                else nm._val(dn.embed_prompt(weights, None, adapters).vector))
        return [base] * steps
    if isinstance(null_vectors, (list, tuple)):
        if len(null_vectors) != steps:
            raise DimensionError(f"need {steps} per-step vectors, got {len(null_vectors)}")
        return [nm._val(v) for v in null_vectors]
    return [nm._val(null_vectors)] * steps


@dataclass
class RefineReport:
    err_before: float
    err_after: float
    step_losses: list[tuple[float, float]] = field(default_factory=list)


def null_text_refine(weights: dn.DenoiserWeights, trajectory: list[Array], x0,
                     schedule: DiffusionSchedule, adapters: tuple = (),
                     iters: int = 8, step_size: float = 40.0,
                     eps_fn=None) -> tuple[list[Array], RefineReport]:
    """Fit one null vector per sampling step to the stored trajectory.

    Walks the steps top-down.  At each step the current state is denoised
    one step and the squared distance to the matching trajectory entry is
    minimised over the null vector by gradient descent with a backtracking
    step size: a move that does not lower the loss is retried at half the
    size, an accepted move grows the size again, and the found scale
    carries into the next iteration.  Per-step losses never go up.  Each
    step tracks only its local target, which can still land the endpoint
    off; if the refined vectors reconstruct worse than the base
    conditioning the base vectors are returned instead, so refinement
    never hurts.  With zero iters sampling is unchanged.

    Returns (vectors in descending-step order, report with max-abs
    reconstruction error before and after).
    """
    steps = len(schedule.ddim_indices)
    if len(trajectory) != steps + 1:
        raise DimensionError(f"trajectory length {len(trajectory)}, expected {steps + 1}")
    x0 = nm.as_f32(x0)
    base_vec = nm._val(dn.embed_prompt(weights, None, adapters).vector)

    err_before = float(np.max(np.abs(
        reconstruct(weights, trajectory[-1], schedule, adapters, eps_fn=eps_fn) - x0)))

    if eps_fn is None:
        eps_fn = _default_eps_fn(weights, adapters)

    vectors: list[Array] = []
    report = RefineReport(err_before=err_before, err_after=err_before)
    x = nm.as_f32(trajectory[-1])
    for i, pos in enumerate(range(steps - 1, -1, -1)):
        s_from = schedule.ddim_indices[pos]
        s_to = schedule.ddim_indices[pos - 1] if pos > 0 else -1
        target = nm.as_f32(trajectory[pos])
        vec = base_vec.copy()

        def loss_rec(v):
            tape = nm.Tape()
            node = tape.input("null", v)
            eps = eps_fn(x, s_from, node)
            nxt = ddim_step(x, eps, s_from, s_to, schedule)
            d = nm.sub(nxt, target)
            return tape.finalize(nm.reduce_sum(nm.mul(d, d)))

        rec = loss_rec(vec)
        cur = float(rec.output[0])
        first = cur
        step = step_size
        for _ in range(iters):
            if cur <= 1e-9:
                break
            g = rec.vjp(np.float32(1.0), wrt=["null"])["null"]
            accepted = False
            for _ in range(12):
                cand = nm.as_f32(vec - step * g)
                rec2 = loss_rec(cand)
                val = float(rec2.output[0])
                if np.isfinite(val) and val < cur:
                    vec, cur, rec = cand, val, rec2
                    accepted = True
                    step *= 1.5
                    break
                step *= 0.5
            if not accepted:
                break
        report.step_losses.append((first, cur))
        vectors.append(vec)
        eps = eps_fn(x, s_from, vec)
        x = nm._val(ddim_step(x, eps, s_from, s_to, schedule))

    err_after = float(np.max(np.abs(
        reconstruct(weights, trajectory[-1], schedule, adapters,
                    null_vectors=vectors, eps_fn=eps_fn) - x0)))
    if err_after > err_before:
        vectors = [base_vec.copy() for _ in range(steps)]
        err_after = err_before
    report.err_after = err_after
    return vectors, report
