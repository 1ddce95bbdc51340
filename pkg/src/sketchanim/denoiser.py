"""Toy spatio-temporal noise predictor over 16x16 single-channel frames.

Every pixel is a token.  Each block runs spatial self-attention over the
H*W tokens of a frame, then temporal self-attention across the M frames at
a fixed pixel, then a per-token MLP, all with residual connections and a
parameter-free layer norm in front of each sublayer.  Timestep and prompt
embeddings are added to every token right after the input projection,
together with a fixed sinusoidal row/column encoding (the attention would
otherwise be blind to pixel position).  Temporal attention deliberately
carries no frame-index features, so reordering identical frames cannot
change it.

Attention sites are addressed as (block, kind) with kind "spatial" or
"temporal".  Callers may tap the post-projection q/k at any site or
override the pre-softmax score tensor through a substitution plan.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DimensionError, OverrideError, RankError, VocabularyError

NULL_TOKEN = "<null>"
SHAPE_TOKENS = ("circle", "square", "triangle", "line")
MOTION_TOKENS = ("left", "right", "up", "down", "grow", "shrink", "rotate")
VOCAB = (NULL_TOKEN,) + SHAPE_TOKENS + MOTION_TOKENS
VOCAB_INDEX = {tok: i for i, tok in enumerate(VOCAB)}

Site = tuple[int, str]


@dataclass(frozen=True)
class ModelConfig:
    height: int = 16
    width: int = 16
    channels: int = 1
    dim: int = 32
    blocks: int = 2
    mlp_mult: int = 4
    t_train: int = 100

    @property
    def tokens(self) -> int:
        return self.height * self.width

    @property
    def vocab_size(self) -> int:
        return len(VOCAB)


def weight_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every learned tensor."""
    d, h = cfg.dim, cfg.dim * cfg.mlp_mult
    shapes: dict[str, tuple[int, ...]] = {
        "embed.pixel": (cfg.channels, d),
        "embed.time": (cfg.t_train, d),
        "embed.prompt": (cfg.vocab_size, d),
        "head.out": (d, cfg.channels),
    }
    for b in range(cfg.blocks):
        for kind in ("spat", "temp"):
            for proj in ("wq", "wk", "wv", "wo"):
                shapes[f"block{b}.{kind}.{proj}"] = (d, d)
        shapes[f"block{b}.mlp.w1"] = (d, h)
        shapes[f"block{b}.mlp.w2"] = (h, d)
    return shapes


@dataclass
class DenoiserWeights:
    """Named tensor bag plus the architecture it belongs to.

    Values are float32 arrays in checkpoints; during training they may be
    tape nodes instead, so validation only inspects plain arrays.
    """

    config: ModelConfig
    tensors: dict

    def __post_init__(self):
        want = weight_shapes(self.config)
        missing = sorted(set(want) - set(self.tensors))
        if missing:
            raise DimensionError(f"missing weight tensors: {missing}")
        for name, val in self.tensors.items():
            if name not in want:
                raise DimensionError(f"unexpected weight tensor {name!r}")
            if isinstance(val, np.ndarray) and val.shape != want[name]:
                raise DimensionError(
                    f"weight {name!r} has shape {val.shape}, expected {want[name]}"
                )


def init_weights(cfg: ModelConfig, seed: int = 0) -> DenoiserWeights:
    """Gaussian init; the output head starts near zero."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    tensors = {}
    for name, shape in weight_shapes(cfg).items():
        fan_in = shape[0]
        if name == "head.out":
            sigma = 0.01
        elif name.startswith("embed."):
            sigma = 0.25
        else:
            sigma = 1.0 / np.sqrt(fan_in)
        tensors[name] = nm.as_f32(rng.normal(scale=sigma, size=shape))
    return DenoiserWeights(cfg, tensors)


# ---------------------------------------------------------------------------
# prompts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptEmbedding:
    """Conditioning vector plus the tokens it came from (None for raw vectors)."""

    tokens: tuple[str, ...] | None
    vector: object  # float32 [dim] array or tape node


def embed_prompt(weights: DenoiserWeights, tokens: tuple[str, str] | None,
                 adapters: tuple = ()) -> PromptEmbedding:
    """Sum the embedding rows for (shape, motion), or the null row for None.

    An adapter targeting the embedding table is merged before the lookup,
    so fine-tuned prompts condition the model through the same channel as
    fine-tuned projections.
    """
    table = weights.tensors["embed.prompt"]
    for ad in adapters:
        if ad.target == "embed.prompt":
            table = lora_merge(table, ad.a, ad.b)
    if tokens is None:
        vec = _table_row(table, 0)
        return PromptEmbedding((NULL_TOKEN,), vec)
    for tok in tokens:
        if tok not in VOCAB_INDEX:
            raise VocabularyError(f"unknown prompt token {tok!r}")
    vec = _table_row(table, VOCAB_INDEX[tokens[0]])
    for tok in tokens[1:]:
        vec = nm.add(vec, _table_row(table, VOCAB_INDEX[tok]))
    return PromptEmbedding(tuple(tokens), vec)


def null_prompt(weights: DenoiserWeights, vector=None,
                adapters: tuple = ()) -> PromptEmbedding:
    """The null conditioning, optionally with a replacement vector."""
    if vector is None:
        return embed_prompt(weights, None, adapters)
    return PromptEmbedding((NULL_TOKEN,), vector)


def _table_row(table, row: int):
    d = nm._val(table).shape[1]
    return nm.reshape(nm.narrow(table, 0, row, 1), (d,))


# ---------------------------------------------------------------------------
# low-rank adapters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LoraAdapter:
    """Additive low-rank update A @ B for one named projection."""

    target: str
    a: object  # [h1, r]
    b: object  # [r, h2]

    def __post_init__(self):
        sa, sb = nm._val(self.a).shape, nm._val(self.b).shape
        if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
            raise DimensionError(f"adapter factors {sa} x {sb} do not chain")
        r = sa[1]
        if r >= min(sa[0], sb[1]):
            raise RankError(f"rank {r} must be below min{(sa[0], sb[1])}")

    @property
    def rank(self) -> int:
        return nm._val(self.a).shape[1]


def lora_merge(w0, a, b):
    """w0 + a @ b, shape-checked."""
    s0, sa, sb = nm._val(w0).shape, nm._val(a).shape, nm._val(b).shape
    if (sa[0], sb[1]) != s0:
        raise DimensionError(f"adapter {sa} x {sb} does not match base {s0}")
    return nm.add(w0, nm.matmul(a, b))


def lora_param_count(h1: int, h2: int, r: int) -> int:
    """Parameters of one adapter: h1*r + r*h2."""
    if r < 1 or r >= min(h1, h2):
        raise RankError(f"rank {r} must lie in [1, min({h1}, {h2}))")
    return h1 * r + r * h2


def init_adapters(cfg: ModelConfig, rank: int = 4, seed: int = 0,
                  targets: tuple[str, ...] | None = None) -> tuple[LoraAdapter, ...]:
    """Fresh adapters: A ~ uniform scaled by fan-in, B = 0, so step 0 is a no-op.

    The zero B keeps the merged model identical to the base until the first
    update, while the fan-in scale on A keeps early gradients on B at a
    usable size instead of quadratically suppressed.
    """
    if targets is None:
        targets = attention_targets(cfg)
    rng = np.random.Generator(np.random.Philox(key=seed))
    shapes = weight_shapes(cfg)
    out = []
    for name in targets:
        if name not in shapes:
            raise ConfigError(f"unknown adapter target {name!r}")
        h1, h2 = shapes[name]
        lim = 1.0 / np.sqrt(h1)
        a = nm.as_f32(rng.uniform(-lim, lim, size=(h1, rank)))
        b = np.zeros((rank, h2), dtype=np.float32)
        out.append(LoraAdapter(name, a, b))
    return tuple(out)


def attention_targets(cfg: ModelConfig) -> tuple[str, ...]:
    """All q/k/v/o projection names, the default adapter surface."""
    return tuple(
        f"block{b}.{kind}.{proj}"
        for b in range(cfg.blocks)
        for kind in ("spat", "temp")
        for proj in ("wq", "wk", "wv", "wo")
    )


# ---------------------------------------------------------------------------
# attention taps and overrides
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttentionTap:
    """Post-projection, pre-scaling q/k captured at one site.

    Spatial taps are [frames, tokens, dim]; temporal taps [tokens, frames, dim].
    """

    site: Site
    q: np.ndarray
    k: np.ndarray


@dataclass(frozen=True)
class AttentionOverride:
    """Score substitution plan applied before the softmax at one site.

    ``transform(scores, q, k)`` receives the scaled self-attention scores
    plus the local q/k and must return scores of the same shape.
    """

    site: Site
    transform: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

_POS_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _position_features(h: int, w: int, d: int) -> np.ndarray:
    """Fixed sinusoidal row/column features, shape [h*w, d]."""
    key = (h, w, d)
    cached = _POS_CACHE.get(key)
    if cached is not None:
        return cached
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    half = d // 2
    feats = np.zeros((h * w, d), dtype=np.float64)
    for axis, coords in enumerate((rows.reshape(-1), cols.reshape(-1))):
        base = axis * half
        for i in range(half // 2):
            wavelength = 3.0 * (1.9 ** i)
            ang = coords * (2.0 * np.pi / wavelength)
            feats[:, base + 2 * i] = np.sin(ang)
            feats[:, base + 2 * i + 1] = np.cos(ang)
    out = nm.as_f32(0.5 * feats)
    _POS_CACHE[key] = out
    return out


def _attention(x, wq, wk, wv, wo, site, taps_out, overrides):
    """One self-attention sublayer over the middle axis of [batch, seq, dim]."""
    h = nm.layer_norm(x)
    q = nm.matmul(h, wq)
    k = nm.matmul(h, wk)
    v = nm.matmul(h, wv)
    if taps_out is not None:
        taps_out[site] = AttentionTap(site, nm._val(q), nm._val(k))
    scores = nm.scaled_attention_scores(q, k)
    if overrides and site in overrides:
        if isinstance(scores, nm.Node):
            raise OverrideError(f"site {site}: overrides only apply to unrecorded passes")
        before = scores.shape
        scores = overrides[site].transform(scores, nm._val(q), nm._val(k))
        if not isinstance(scores, np.ndarray) or scores.shape != before:
            raise OverrideError(f"site {site}: override returned shape "
                                f"{getattr(scores, 'shape', None)}, expected {before}")
    probs = nm.softmax_rows(scores)
    return nm.matmul(nm.matmul(probs, v), wo)


def predict_noise(weights: DenoiserWeights, latents, t: int, prompt: PromptEmbedding,
                  adapters: tuple[LoraAdapter, ...] = (),
                  taps_out: dict | None = None,
                  overrides: Mapping[Site, AttentionOverride] | None = None):
    """Predict the noise component of ``latents`` at train step ``t``.

    Args:
        latents: [frames, H, W, C] array or tape node.
        t: train-step index in [0, t_train).
        prompt: conditioning vector (see embed_prompt / null_prompt).
        adapters: low-rank updates merged into their target projections.
        taps_out: optional dict filled with AttentionTap per site.
        overrides: optional score substitution plans keyed by site.

    Returns noise of the same shape and kind as ``latents``.
    """
    cfg = weights.config
    val = nm._val(latents)
    m = val.shape[0]
    expect = (m, cfg.height, cfg.width, cfg.channels)
    if val.ndim != 4 or val.shape != expect:
        raise DimensionError(f"latents shape {val.shape}, expected {expect}")
    if not 0 <= t < cfg.t_train:
        raise ConfigError(f"train step {t} outside [0, {cfg.t_train})")

    w = dict(weights.tensors)
    for ad in adapters:
        if ad.target not in w:
            raise ConfigError(f"unknown adapter target {ad.target!r}")
        w[ad.target] = lora_merge(w[ad.target], ad.a, ad.b)

    s, d = cfg.tokens, cfg.dim
    x = nm.reshape(latents, (m, s, cfg.channels))
    x = nm.matmul(x, w["embed.pixel"])  # [m, s, d]
    cond = nm.add(_table_row(w["embed.time"], t), prompt.vector)
    x = nm.add(x, cond)
    x = nm.add(x, _position_features(cfg.height, cfg.width, d))

    for b in range(cfg.blocks):
        att = _attention(
            x, w[f"block{b}.spat.wq"], w[f"block{b}.spat.wk"],
            w[f"block{b}.spat.wv"], w[f"block{b}.spat.wo"],
            (b, "spatial"), taps_out, overrides,
        )
        x = nm.add(x, att)

        xt = nm.transpose(x, (1, 0, 2))  # [s, m, d]
        att = _attention(
            xt, w[f"block{b}.temp.wq"], w[f"block{b}.temp.wk"],
            w[f"block{b}.temp.wv"], w[f"block{b}.temp.wo"],
            (b, "temporal"), taps_out, overrides,
        )
        x = nm.add(x, nm.transpose(att, (1, 0, 2)))

        h = nm.layer_norm(x)
        hidden = nm.tanh(nm.matmul(h, w[f"block{b}.mlp.w1"]))
        x = nm.add(x, nm.matmul(hidden, w[f"block{b}.mlp.w2"]))

    out = nm.matmul(nm.layer_norm(x), w["head.out"])
    return nm.reshape(out, expect)
