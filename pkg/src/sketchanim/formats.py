"""File formats: PGM frames, tensor containers, config text, manifests.

Everything here round-trips bitwise.  Frames go to binary P5 PGM with a
fixed value mapping, tensor sets (checkpoints and adapter factors) go to
a small named-tensor container, and run settings go to flat key=value
text so a manifest can be parsed back into the exact objects that
produced it.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import denoiser as dn
from . import diffusion as df
from . import numerics as nm
from .errors import ConfigError, DimensionError, FormatError

Array = np.ndarray

MAGIC = b"FSKT"
VERSION = 1

_META_KEY = "meta.config"
_ADAPTER_A = ".lora_a"
_ADAPTER_B = ".lora_b"


# ---------------------------------------------------------------------------
# PGM frames
# ---------------------------------------------------------------------------


def encode_pgm(image) -> bytes:
    """Binary P5 bytes for one grayscale image in [-1, 1].

    Pixel values map through round((v + 1) * 127.5), so pure black and
    white land exactly on 0 and 255 and survive a round trip.
    """
    a = nm.as_f32(image)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim != 2:
        raise DimensionError(f"image must be [H, W] or [H, W, 1], got {a.shape}")
    px = np.rint((np.clip(a, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii")
    return header + px.tobytes()


def save_pgm(path, image) -> None:
    Path(path).write_bytes(encode_pgm(image))


def decode_pgm(data: bytes) -> Array:
    """Parse binary P5 bytes back to a [H, W, 1] float image in [-1, 1]."""
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(data):
            c = data[pos : pos + 1]
            if c == b"#":
                while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        return data[start:pos]

    if token() != b"P5":
        raise FormatError("not a binary P5 file")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise FormatError(f"malformed PGM header: {exc}") from None
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, need 255")
    pos += 1
    payload = data[pos : pos + width * height]
    if len(payload) != width * height:
        raise FormatError("truncated PGM pixel data")
    img = np.frombuffer(payload, np.uint8).reshape(height, width, 1)
    return img.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def load_pgm(path) -> Array:
    return decode_pgm(Path(path).read_bytes())


def contact_sheet(frames) -> Array:
    """All frames side by side with one white separator column each."""
    f = nm.as_f32(frames)
    if f.ndim != 4:
        raise DimensionError(f"need frames [M, H, W, C], got {f.shape}")
    gap = np.ones((f.shape[1], 1, f.shape[3]), np.float32)
    parts = []
    for i, frame in enumerate(f):
        if i:
            parts.append(gap)
        parts.append(frame)
    return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------------------
# named-tensor container
# ---------------------------------------------------------------------------


def save_tensors(path, tensors: dict[str, Array]) -> None:
    """Write named float tensors; entries are sorted so bytes are stable."""
    blob = bytearray(MAGIC)
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(nm.as_f32(tensors[name]))
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded)) + encoded
        blob += struct.pack("<B", arr.ndim)
        for extent in arr.shape:
            blob += struct.pack("<I", extent)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_tensors(path) -> dict[str, Array]:
    data = Path(path).read_bytes()
    view = memoryview(data)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FormatError("truncated tensor container")
        out = struct.unpack_from(fmt, view, pos)
        pos = pos + size
        return out

    pos = 0
    if data[:4] != MAGIC:
        raise FormatError("bad magic, not a tensor container")
    pos = 4
    (version,) = take("<I")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    (count,) = take("<I")
    tensors: dict[str, Array] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        if pos + name_len > len(data):
            raise FormatError("truncated tensor container")
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<B")
        shape = tuple(take("<I")[0] for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        end = pos + 4 * size
        if end > len(data):
            raise FormatError("truncated tensor container")
        arr = np.frombuffer(view[pos:end], dtype="<f4").reshape(shape)
        tensors[name] = np.ascontiguousarray(arr)
        pos = end
    if pos != len(data):
        raise FormatError("trailing bytes in tensor container")
    return tensors


def tensors_digest(tensors: dict[str, Array]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(nm.as_f32(tensors[name])).tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path, weights: dn.DenoiserWeights) -> None:
    """Write a full model; its geometry rides along as one extra record."""
    cfg = weights.config
    meta = np.array([cfg.height, cfg.width, cfg.channels, cfg.dim,
                     cfg.blocks, cfg.mlp_mult, cfg.t_train], np.float32)
    save_tensors(path, {**weights.tensors, _META_KEY: meta})


def load_checkpoint(path) -> dn.DenoiserWeights:
    tensors = load_tensors(path)
    meta = tensors.pop(_META_KEY, None)
    if meta is None or meta.shape != (7,):
        raise FormatError("container has no model geometry record")
    cfg = dn.ModelConfig(*(int(v) for v in meta))
    return dn.DenoiserWeights(cfg, tensors)


def save_adapters(path, adapters) -> None:
    tensors: dict[str, Array] = {}
    for ad in adapters:
        tensors[ad.target + _ADAPTER_A] = ad.a
        tensors[ad.target + _ADAPTER_B] = ad.b
    save_tensors(path, tensors)


def load_adapters(path) -> tuple[dn.LoraAdapter, ...]:
    tensors = load_tensors(path)
    targets = sorted(n[: -len(_ADAPTER_A)] for n in tensors if n.endswith(_ADAPTER_A))
    if len(tensors) != 2 * len(targets):
        raise FormatError("adapter container must hold exactly one A/B pair per target")
    out = []
    for target in targets:
        b = tensors.get(target + _ADAPTER_B)
        if b is None:
            raise FormatError(f"adapter target {target!r} is missing its B factor")
        out.append(dn.LoraAdapter(target, tensors[target + _ADAPTER_A], b))
    return tuple(out)


def adapters_digest(adapters) -> str:
    tensors = {}
    for ad in adapters:
        tensors[ad.target + _ADAPTER_A] = ad.a
        tensors[ad.target + _ADAPTER_B] = ad.b
    return tensors_digest(tensors)


# ---------------------------------------------------------------------------
# flat key=value text
# ---------------------------------------------------------------------------


def dump_kv(pairs: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in pairs.items())


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


_CONFIG_INTS = ("steps", "tau1", "tau2", "frames", "align_iters", "seed", "refine_iters")
_CONFIG_FLOATS = ("lam", "align_step", "refine_step")
_CONFIG_BOOLS = ("word_mode", "align_enabled", "compose_enabled", "refine_null")


def config_to_pairs(config: df.SamplerConfig) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for f in fields(df.SamplerConfig):
        value = getattr(config, f.name)
        if f.name == "compose_blocks":
            pairs[f.name] = "none" if value is None else ",".join(str(b) for b in value)
        elif f.name in _CONFIG_BOOLS:
            pairs[f.name] = "true" if value else "false"
        elif f.name in _CONFIG_FLOATS:
            pairs[f.name] = repr(float(value))
        else:
            pairs[f.name] = str(int(value))
    return pairs


def config_from_pairs(pairs: dict[str, str],
                      base: df.SamplerConfig | None = None) -> df.SamplerConfig:
    config = base if base is not None else df.SamplerConfig()
    updates = {}
    for key, value in pairs.items():
        if key in _CONFIG_INTS:
            updates[key] = int(value)
        elif key in _CONFIG_FLOATS:
            updates[key] = float(value)
        elif key in _CONFIG_BOOLS:
            if value not in ("true", "false"):
                raise ConfigError(f"{key} must be true or false, got {value!r}")
            updates[key] = value == "true"
        elif key == "compose_blocks":
            updates[key] = (None if value == "none"
                            else tuple(int(v) for v in value.split(",")))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return replace(config, **updates)


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Manifest:
    """Complete record of one animation run.

    ``frames`` are file names relative to the manifest's directory; the
    sketch, checkpoint, and adapter paths are stored as written by the
    command.  ``diagnostics`` keeps one summary line per sampler step.
    """

    prompt: tuple[str, ...]
    sketch: str
    checkpoint: str
    checkpoint_id: str
    adapters: str
    adapters_id: str
    config: df.SamplerConfig
    frames: tuple[str, ...]
    diagnostics: tuple[str, ...]


def serialize_manifest(m: Manifest) -> str:
    pairs: dict[str, str] = {
        "prompt": ",".join(m.prompt),
        "sketch": m.sketch,
        "checkpoint": m.checkpoint,
        "checkpoint_id": m.checkpoint_id,
        "adapters": m.adapters,
        "adapters_id": m.adapters_id,
    }
    pairs.update(config_to_pairs(m.config))
    for i, line in enumerate(m.diagnostics):
        pairs[f"diag_{i:03d}"] = line
    for i, name in enumerate(m.frames):
        pairs[f"frame_{i:03d}"] = name
    return dump_kv(pairs)


def parse_manifest(text: str) -> Manifest:
    pairs = parse_kv(text)
    try:
        prompt = tuple(v for v in pairs.pop("prompt").split(",") if v)
        sketch = pairs.pop("sketch")
        checkpoint = pairs.pop("checkpoint")
        checkpoint_id = pairs.pop("checkpoint_id")
        adapters = pairs.pop("adapters")
        adapters_id = pairs.pop("adapters_id")
    except KeyError as exc:
        raise FormatError(f"manifest is missing {exc.args[0]!r}") from None
    diag_keys = sorted(k for k in pairs if k.startswith("diag_"))
    frame_keys = sorted(k for k in pairs if k.startswith("frame_"))
    diagnostics = tuple(pairs.pop(k) for k in diag_keys)
    frames = tuple(pairs.pop(k) for k in frame_keys)
    config = config_from_pairs(pairs)
    return Manifest(prompt, sketch, checkpoint, checkpoint_id, adapters,
                    adapters_id, config, frames, diagnostics)
