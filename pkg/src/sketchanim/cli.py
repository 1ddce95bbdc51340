"""Command-line front end.

Commands cover the whole workflow: generate a clip dataset, train the
base model and adapters, animate a sketch, chain animations, inspect
inversion quality, and score saved frames.  Every run is reproducible
from its manifest; exit codes are 0 for success, 2 for numerical
failures, 64 for usage problems, and 66 for unreadable inputs.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import denoiser as dn
from . import diffusion as df
from . import formats as fm
from . import numerics as nm
from . import pipeline as pl
from . import training as tr
from .errors import (AlignmentError, ConfigError, DimensionError, FormatError,
                     PipelineError, RankError, SketchAnimError, StepRangeError,
                     TrainingError, UndecidableError, VocabularyError)

_USAGE_ERRORS = (ConfigError, VocabularyError, RankError, DimensionError,
                 StepRangeError)
_INPUT_ERRORS = (FileNotFoundError, IsADirectoryError, NotADirectoryError,
                 FormatError)
_NUMERIC_ERRORS = (TrainingError, PipelineError, AlignmentError,
                   UndecidableError)


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage problems with exit code 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(64)


# ---------------------------------------------------------------------------
# shared flag groups and loading helpers
# ---------------------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True, help="base model container")
    p.add_argument("--adapters", help="optional adapter container")


def _add_sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--steps", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--tau1", type=int)
    p.add_argument("--tau2", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--align-iters", type=int)
    p.add_argument("--align-step", type=float)
    p.add_argument("--refine-iters", type=int)
    p.add_argument("--refine-step", type=float)
    p.add_argument("--word-mode", dest="word_mode", action="store_const", const=True)
    p.add_argument("--no-align", dest="align_enabled", action="store_const", const=False)
    p.add_argument("--no-compose", dest="compose_enabled", action="store_const",
                   const=False)
    p.add_argument("--refine", dest="refine_null", action="store_const", const=True)


_SAMPLER_FIELDS = ("steps", "frames", "tau1", "tau2", "lam", "seed",
                   "align_iters", "align_step", "refine_iters", "refine_step",
                   "word_mode", "align_enabled", "compose_enabled", "refine_null")


def _sampler_config(args) -> df.SamplerConfig:
    config = df.SamplerConfig()
    if args.config:
        config = fm.config_from_pairs(fm.parse_kv(_read_text(args.config)), config)
    overrides = {name: getattr(args, name) for name in _SAMPLER_FIELDS
                 if getattr(args, name) is not None}
    return replace(config, **overrides) if overrides else config


def _read_text(path) -> str:
    return Path(path).read_text(encoding="utf-8")


def _load_model(args) -> tuple[dn.DenoiserWeights, tuple[dn.LoraAdapter, ...]]:
    weights = fm.load_checkpoint(args.checkpoint)
    adapters = fm.load_adapters(args.adapters) if args.adapters else ()
    return weights, adapters


def _load_sketch(path) -> np.ndarray:
    return fm.load_pgm(path)


def _parse_prompt_list(text: str) -> list[tuple[str, ...]]:
    prompts = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        prompts.append(tuple(token.strip() for token in part.split(":") if token.strip()))
    if not prompts:
        raise ConfigError("prompt list is empty")
    return prompts


def _diag_line(d: pl.StepDiagnostics) -> str:
    align = "-" if d.align_losses is None else str(len(d.align_losses))
    n = "-" if d.n is None else str(d.n)
    return (f"counter:{d.counter} align:{align} n:{n} "
            f"spatial:{int(d.spatial)} temporal:{int(d.temporal)}")


def _write_frames(out: Path, frames, stem: str) -> list[str]:
    names = []
    for i, frame in enumerate(frames):
        name = f"{stem}_{i:02d}.pgm"
        fm.save_pgm(out / name, frame)
        names.append(name)
    return names


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_dataset_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = []
    for shape in tr.SHAPES:
        for motion in tr.MOTIONS:
            for seed in range(args.seeds):
                clip = tr.gen_clip(shape, motion, seed, frames=args.frames)
                name = f"{shape}_{motion}_{seed}"
                clip_dir = out / name
                clip_dir.mkdir(exist_ok=True)
                _write_frames(clip_dir, clip.frames, "frame")
                labels.append(f"{name} {shape} {motion} {seed}")
    (out / "labels.txt").write_text("".join(line + "\n" for line in labels),
                                    encoding="utf-8")
    print(f"wrote {len(labels)} clips under {out}")
    return 0


def load_dataset(root) -> tuple[tr.ClipSample, ...]:
    """Read a generated dataset tree back into clip samples."""
    root = Path(root)
    clips = []
    for line in _read_text(root / "labels.txt").splitlines():
        if not line.strip():
            continue
        try:
            name, shape, motion, seed = line.split()
        except ValueError:
            raise FormatError(f"bad labels line {line!r}") from None
        frame_files = sorted((root / name).glob("frame_*.pgm"))
        if not frame_files:
            raise FormatError(f"clip directory {name!r} has no frames")
        frames = np.stack([fm.load_pgm(f) for f in frame_files])
        clips.append(tr.ClipSample(frames, shape, motion, int(seed)))
    if not clips:
        raise FormatError("dataset has no clips")
    return tuple(clips)


def _report_pairs(report: tr.TrainReport) -> dict[str, str]:
    return {
        "initial_loss": repr(report.initial_loss),
        "final_loss": repr(report.final_loss),
        "epoch_losses": ",".join(repr(v) for v in report.epoch_losses),
        "steps": str(report.steps),
        "checkpoint_id": report.checkpoint_id,
    }


def _cmd_train_base(args) -> int:
    dataset = load_dataset(args.data)
    weights, report = tr.train_base(dataset, epochs=args.epochs, lr=args.lr,
                                    seed=args.seed)
    fm.save_checkpoint(args.out, weights)
    Path(str(args.out) + ".report").write_text(fm.dump_kv(_report_pairs(report)),
                                               encoding="utf-8")
    print(f"checkpoint_id={report.checkpoint_id} "
          f"initial_loss={report.initial_loss:.6f} final_loss={report.final_loss:.6f}")
    return 0


def _cmd_train_lora(args) -> int:
    base = fm.load_checkpoint(args.base)
    dataset = load_dataset(args.data)
    adapters, report = tr.train_lora(base, dataset, rank=args.rank,
                                     iters=args.iters, lr=args.lr,
                                     seed=args.seed, batch=args.batch)
    fm.save_adapters(args.out, adapters)
    Path(str(args.out) + ".report").write_text(fm.dump_kv(_report_pairs(report)),
                                               encoding="utf-8")
    print(f"adapters_id={fm.adapters_digest(adapters)} "
          f"initial_loss={report.initial_loss:.6f} final_loss={report.final_loss:.6f}")
    return 0


def _cmd_animate(args) -> int:
    config = _sampler_config(args)
    weights, adapters = _load_model(args)
    sketch = _load_sketch(args.sketch)
    prompt = (args.shape, args.motion)
    result = pl.animate(pl.AnimationRequest(sketch, prompt, config, weights, adapters))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapped = pl.postprocess(result.frames)
    names = _write_frames(out, snapped, "frame")
    _write_frames(out, result.frames, "raw")
    fm.save_pgm(out / "contact.pgm", fm.contact_sheet(snapped))

    manifest = fm.Manifest(
        prompt=prompt,
        sketch=str(Path(args.sketch).resolve()),
        checkpoint=str(Path(args.checkpoint).resolve()),
        checkpoint_id=tr.weights_digest(weights),
        adapters=str(Path(args.adapters).resolve()) if args.adapters else "",
        adapters_id=fm.adapters_digest(adapters) if adapters else "",
        config=config,
        frames=tuple(names),
        diagnostics=tuple(_diag_line(d) for d in result.steps),
    )
    (out / "manifest.txt").write_text(fm.serialize_manifest(manifest),
                                      encoding="utf-8")

    reference = pl.postprocess(sketch)
    print(f"identity={pl.eval_identity(snapped, reference):.6f} "
          f"motion={pl.eval_motion(snapped):.6f}")
    return 0


def _cmd_extrapolate(args) -> int:
    config = _sampler_config(args)
    weights, adapters = _load_model(args)
    sketch = _load_sketch(args.sketch)
    prompts = _parse_prompt_list(args.prompts)
    frames = pl.extrapolate(sketch, prompts, config, weights, adapters)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapped = pl.postprocess(frames)
    _write_frames(out, snapped, "frame")
    fm.save_pgm(out / "contact.pgm", fm.contact_sheet(snapped))
    print(f"wrote {len(frames)} frames under {out}")
    return 0


def _cmd_invert(args) -> int:
    config = _sampler_config(args)
    weights, adapters = _load_model(args)
    sketch = _load_sketch(args.sketch)
    schedule = df.make_schedule(t_train=weights.config.t_train, steps=config.steps)
    trajectory = df.ddim_invert(weights, sketch[None], schedule, adapters)
    if args.refine_null:
        vectors, report = df.null_text_refine(weights, trajectory, sketch[None],
                                              schedule, adapters,
                                              iters=config.refine_iters,
                                              step_size=config.refine_step)
        print(f"error_before={report.err_before:.6f} error_after={report.err_after:.6f}")
    else:
        recon = df.reconstruct(weights, trajectory[-1], schedule, adapters)
        err = float(np.abs(recon[0] - nm.as_f32(sketch)).max())
        print(f"error={err:.6f}")
    return 0


def _cmd_eval(args) -> int:
    root = Path(args.frames)
    files = sorted(root.glob("frame_*.pgm"))
    if not files:
        raise FormatError(f"no frame_*.pgm files under {root}")
    frames = np.stack([fm.load_pgm(f) for f in files])
    sketch = _load_sketch(args.sketch)
    print(f"identity={pl.eval_identity(frames, sketch):.6f} "
          f"motion={pl.eval_motion(frames):.6f}")
    return 0


def replay_manifest(source) -> np.ndarray:
    """Re-run the animation a manifest records and return its raw frames.

    The checkpoint and adapters are re-verified against the stored
    digests, so a replay either reproduces the run or refuses.
    """
    if isinstance(source, fm.Manifest):
        manifest = source
    else:
        manifest = fm.parse_manifest(_read_text(source))
    weights = fm.load_checkpoint(manifest.checkpoint)
    if tr.weights_digest(weights) != manifest.checkpoint_id:
        raise FormatError("checkpoint content does not match the manifest digest")
    adapters: tuple[dn.LoraAdapter, ...] = ()
    if manifest.adapters:
        adapters = fm.load_adapters(manifest.adapters)
        if fm.adapters_digest(adapters) != manifest.adapters_id:
            raise FormatError("adapter content does not match the manifest digest")
    sketch = fm.load_pgm(manifest.sketch)
    result = pl.animate(pl.AnimationRequest(sketch, manifest.prompt,
                                            manifest.config, weights, adapters))
    return result.frames


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="sketchanim",
                     description="animate 16x16 sketches with a tiny diffusion model")
    sub = parser.add_subparsers(dest="command", required=True)

    dataset = sub.add_parser("dataset", help="dataset utilities")
    dataset_sub = dataset.add_subparsers(dest="subcommand", required=True)
    gen = dataset_sub.add_parser("gen", help="write the procedural clip corpus")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seeds", type=int, default=25)
    gen.add_argument("--frames", type=int, default=10)
    gen.set_defaults(func=_cmd_dataset_gen)

    base = sub.add_parser("train-base", help="train the base model")
    base.add_argument("--data", required=True)
    base.add_argument("--epochs", type=int, default=8)
    base.add_argument("--lr", type=float, default=0.05)
    base.add_argument("--seed", type=int, default=0)
    base.add_argument("--out", required=True)
    base.set_defaults(func=_cmd_train_base)

    lora = sub.add_parser("train-lora", help="fit adapters on a frozen base")
    lora.add_argument("--data", required=True)
    lora.add_argument("--base", required=True)
    lora.add_argument("--rank", type=int, default=4)
    lora.add_argument("--iters", type=int, default=2500)
    lora.add_argument("--lr", type=float, default=0.01)
    lora.add_argument("--batch", type=int, default=8)
    lora.add_argument("--seed", type=int, default=0)
    lora.add_argument("--out", required=True)
    lora.set_defaults(func=_cmd_train_lora)

    animate = sub.add_parser("animate", help="animate one sketch")
    animate.add_argument("--sketch", required=True)
    animate.add_argument("--shape", required=True)
    animate.add_argument("--motion", required=True)
    animate.add_argument("--out", required=True)
    _add_model_flags(animate)
    _add_sampler_flags(animate)
    animate.set_defaults(func=_cmd_animate)

    extrap = sub.add_parser("extrapolate", help="chain several animations")
    extrap.add_argument("--sketch", required=True)
    extrap.add_argument("--prompts", required=True,
                        help="comma-separated shape:motion pairs")
    extrap.add_argument("--out", required=True)
    _add_model_flags(extrap)
    _add_sampler_flags(extrap)
    extrap.set_defaults(func=_cmd_extrapolate)

    invert = sub.add_parser("invert", help="measure inversion reconstruction error")
    invert.add_argument("--sketch", required=True)
    _add_model_flags(invert)
    _add_sampler_flags(invert)
    invert.set_defaults(func=_cmd_invert)

    ev = sub.add_parser("eval", help="score saved frames against a sketch")
    ev.add_argument("--frames", required=True)
    ev.add_argument("--sketch", required=True)
    ev.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 64
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 66
    except _NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, SketchAnimError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
