"""Command-line entry point: synth, preprocess, train, eval, ablate, gradcheck, gradcam, bench.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import os
import sys


def _apply_thread_cap() -> None:
    """STCNET_THREADS caps BLAS / OpenCV worker threads; must run before numpy loads."""
    raw = os.environ.get("STCNET_THREADS")
    if raw is None:
        return
    if not raw.isdigit() or int(raw) < 1:
        raise SystemExit(f"error: STCNET_THREADS must be a positive integer, got {raw!r}")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = raw


_apply_thread_cap()

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import time  # noqa: E402
from pathlib import Path  # noqa: E402

import cv2  # noqa: E402
import numpy as np  # noqa: E402

from . import gradcheck  # noqa: E402
from .explain import export_heatmap, grad_cam  # noqa: E402
from .model import BackboneConfig, ConfigError, FusionVariant, build_model, load_checkpoint, save_checkpoint  # noqa: E402
from .nn import encode_records  # noqa: E402
from .tensor import TensorFormatError, no_grad  # noqa: E402
from .train import (  # noqa: E402
    SGDConfig, evaluate, fit, metrics_rows, run_ablation, split_of, write_metrics_csv,
)
from .video import (  # noqa: E402
    AugmentSpec, ClipFormatError, ResidualSpec, SamplerSpec, SyntheticSpec, decode_clips, encode_clips,
    prepare_inputs, synth_generate,
)

log = logging.getLogger("stcnet")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


# -- run configuration -------------------------------------------------------------------------


def _tuple_fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls) if "tuple" in str(f.type)}


def _section(cls, doc: dict | None, where: str, defaults: dict | None = None):
    doc = {} if doc is None else doc
    if not isinstance(doc, dict):
        raise ValidationError(f"{where}: expected an object, got {type(doc).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ValidationError(f"{where}: unknown key(s) {unknown}; allowed {sorted(known)}")
    args = dict(defaults or {})
    for k, v in doc.items():
        args[k] = tuple(v) if k in _tuple_fields(cls) and isinstance(v, list) else v
    try:
        return cls(**args)
    except (TypeError, ValueError) as e:
        field = getattr(e, "field", None)
        raise ValidationError(f"{where}{'.' + field if field else ''}: {e}") from None


@dataclasses.dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig
    sgd: SGDConfig
    sampler: SamplerSpec
    residual: ResidualSpec
    augment: AugmentSpec | None
    variant: FusionVariant
    seed: int
    train_fraction: float
    paths: dict

    KEYS = ("backbone", "sgd", "sampler", "residual", "augment", "variant", "seed", "train_fraction", "paths")
    PATH_KEYS = ("data", "out", "checkpoint")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ValidationError("config: top level must be an object")
        unknown = sorted(set(doc) - set(cls.KEYS))
        if unknown:
            raise ValidationError(f"config: unknown key(s) {unknown}; allowed {list(cls.KEYS)}")
        preset = (doc.get("backbone") or {}).get("preset", "micro") if isinstance(doc.get("backbone"), dict) else "micro"
        bb = dict(doc.get("backbone") or {})
        bb.pop("preset", None)
        if preset not in ("micro", "full"):
            raise ValidationError(f"backbone.preset: must be 'micro' or 'full', got {preset!r}")
        base = BackboneConfig.micro() if preset == "micro" else BackboneConfig.full()
        backbone = _section(BackboneConfig, bb, "backbone", {k: getattr(base, k) for k in
                                                               ("stage_blocks", "stage_out_channels", "cardinality",
                                                                "se_ratio", "input_resolution")})
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ValidationError(f"seed: must be a non-negative integer, got {seed!r}")
        sgd = _section(SGDConfig, doc.get("sgd"), "sgd", {"seed": seed})
        sampler = _section(SamplerSpec, doc.get("sampler"), "sampler", {"n_segments": backbone.n_frames})
        if sampler.n_segments != backbone.n_frames:
            raise ValidationError(f"sampler.n_segments: {sampler.n_segments} != backbone.n_frames {backbone.n_frames}")
        residual = _section(ResidualSpec, doc.get("residual"), "residual")
        augment = None
        if doc.get("augment") is not None:
            augment = _section(AugmentSpec, doc["augment"], "augment", {"rng_seed": seed})
        try:
            variant = FusionVariant.parse(str(doc.get("variant", "full")))
        except ConfigError as e:
            raise ValidationError(str(e)) from None
        frac = doc.get("train_fraction", 0.8)
        if not isinstance(frac, (int, float)) or not 0 < frac < 1:
            raise ValidationError(f"train_fraction: must lie in (0, 1), got {frac!r}")
        paths = doc.get("paths") or {}
        if not isinstance(paths, dict) or set(paths) - set(cls.PATH_KEYS):
            raise ValidationError(f"paths: unknown key(s) {sorted(set(paths) - set(cls.PATH_KEYS))}; allowed {list(cls.PATH_KEYS)}")
        return cls(backbone, sgd, sampler, residual, augment, variant, seed, float(frac), dict(paths))

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls.from_dict({})
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"--config: file {p} not found")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"--config {p}: invalid JSON ({e})") from None
        return cls.from_dict(doc)


# -- helpers -----------------------------------------------------------------------------------


def _input_file(path: str | None, flag: str) -> Path:
    if not path:
        raise ValidationError(f"{flag}: a file is required")
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{flag}: file {p} not found")
    return p


def _load_clips(path: str | None, flag: str = "--data"):
    p = _input_file(path, flag)
    try:
        return decode_clips(p.read_bytes())
    except (ClipFormatError, ValueError) as e:
        raise ValidationError(f"{flag} {p}: {e}") from None


def _load_model(path: str | None):
    p = _input_file(path, "--checkpoint")
    try:
        return load_checkpoint(p)
    except (TensorFormatError, ValueError, KeyError, json.JSONDecodeError) as e:
        raise ValidationError(f"--checkpoint {p}: {e}") from None


def _split(clips, frac: float):
    n = int(round(len(clips) * frac))
    if not 0 < n < len(clips):
        raise ValidationError(f"train_fraction: leaves an empty split of {len(clips)} clips")
    return clips[:n], clips[n:]


def _out_dir(path: str | None, flag: str = "--out") -> Path:
    if not path:
        raise ValidationError(f"{flag}: an output directory is required")
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _check_resolution(cfg: RunConfig, clips) -> None:
    r = cfg.backbone.input_resolution
    bad = [c.source_id for c in clips if c.frames.shape[1:3] != (r, r)]
    if bad and cfg.augment is None:
        raise ValidationError(f"backbone.input_resolution: {r} does not match clip {bad[0]!r} "
                              f"({clips[0].frames.shape[1]}x{clips[0].frames.shape[2]})")


# -- commands ------------------------------------------------------------------------------------


def cmd_synth(a) -> int:
    spec = SyntheticSpec(n_clips=a.n_clips, frames_per_clip=a.frames, resolution=a.resolution,
                         class_mix=a.class_mix, seed=a.seed)
    clips = synth_generate(spec)
    Path(a.out).write_bytes(encode_clips(clips))
    print(f"wrote {len(clips)} clips ({sum(c.label for c in clips)} smoke) to {a.out}")
    return EXIT_OK


def cmd_preprocess(a) -> int:
    clips = _load_clips(a.inp, "--in")
    sampler = SamplerSpec(a.segments)
    residual = ResidualSpec(a.alpha, a.beta)
    records = []
    for c in clips:
        if c.n_frames < sampler.n_segments:
            raise ValidationError(f"--segments: clip {c.source_id!r} has only {c.n_frames} frames")
        rgb, res = prepare_inputs(c, sampler, residual, "center")
        records += [(f"{c.source_id}/rgb", rgb), (f"{c.source_id}/res", res),
                    (f"{c.source_id}/label", np.array([float(c.label)]))]
    Path(a.out).write_bytes(encode_records(records))
    print(f"wrote sampled RGB and residual frames for {len(clips)} clips to {a.out}")
    return EXIT_OK


def cmd_train(a) -> int:
    cfg = RunConfig.load(a.config)
    clips = _load_clips(a.data or cfg.paths.get("data"))
    _check_resolution(cfg, clips)
    out = _out_dir(a.out or cfg.paths.get("out"))
    train, test = _split(clips, cfg.train_fraction)
    model = build_model(cfg.backbone, cfg.variant, cfg.seed)
    state = fit(model, train, cfg.sgd, test, cfg.augment, cfg.sampler, cfg.residual, out / "train.log")
    if any(not np.isfinite(h[1]) for h in state.history):
        print("error: training diverged (non-finite loss); see train.log", file=sys.stderr)
        return EXIT_RUNTIME
    ckpt = out / "model.stcw"
    save_checkpoint(ckpt, model, cfg.seed, state.epoch)
    print(f"trained {cfg.variant.value} for {state.epoch} epochs; checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(a) -> int:
    cfg = RunConfig.load(a.config)
    model, header = _load_model(a.checkpoint or cfg.paths.get("checkpoint"))
    clips = _load_clips(a.data or cfg.paths.get("data"))
    test = clips if a.all else _split(clips, cfg.train_fraction)[1]
    views = sorted({split_of(c) for c in clips})
    result = evaluate(model, test, cfg.sampler, cfg.residual, splits=views)
    text = write_metrics_csv(a.out, metrics_rows(model.variant.value, header["seed"], result.rows()))
    print(text, end="")
    return EXIT_OK


def cmd_ablate(a) -> int:
    cfg = RunConfig.load(a.config)
    clips = _load_clips(a.data or cfg.paths.get("data"))
    _check_resolution(cfg, clips)
    out = _out_dir(a.out or cfg.paths.get("out"))
    train, test = _split(clips, cfg.train_fraction)
    try:
        variants = [FusionVariant.parse(v) for v in a.variants]
    except ConfigError as e:
        raise ValidationError(f"--variants: {e}") from None
    t0 = time.perf_counter()
    _, _, summary = run_ablation(cfg.backbone, train, test, variants, a.seeds, cfg.sgd, out,
                                 cfg.augment, cfg.sampler, cfg.residual)
    print(summary, end="")
    print(f"ablation of {len(variants)} variants x {len(a.seeds)} seeds took {time.perf_counter() - t0:.1f}s; "
          f"metrics in {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    seeds = range(a.seeds)
    results = gradcheck.run_op_suite(seeds)
    if not a.ops_only:
        results["stcnet.micro.loss"] = max(gradcheck.e2e_error(s) for s in seeds)
    width = max(len(k) for k in results)
    ok = True
    for name, err in results.items():
        good = err <= gradcheck.TOLERANCE
        ok &= good
        print(f"{name:<{width}}  {err:.3e}  {'ok' if good else 'FAIL'}")
    print(f"{'all ops within' if ok else 'gradient check FAILED at'} tolerance {gradcheck.TOLERANCE:g} over {a.seeds} seeds")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_gradcam(a) -> int:
    model, _ = _load_model(a.checkpoint)
    clips = _load_clips(a.data)
    match = [c for c in clips if c.source_id == a.clip]
    if not match:
        raise ValidationError(f"--clip: no clip with source id {a.clip!r} in {a.data}")
    if a.path not in model.paths:
        raise ValidationError(f"--path: {a.path!r} not available for variant {model.variant.value}; use {list(model.paths)}")
    if not 0 <= a.cls < model.config.n_classes:
        raise ValidationError(f"--class: {a.cls} outside [0, {model.config.n_classes})")
    clip = match[0]
    sampler = SamplerSpec(model.config.n_frames)
    residual = ResidualSpec(a.alpha)
    rgb, res = prepare_inputs(clip, sampler, residual, "center")
    maps = grad_cam(model, rgb, res if model.temporal is not None else None, a.cls, a.path)
    out = _out_dir(a.out)
    prefix = clip.source_id.replace("/", "_") + "_"
    for h in maps:
        export_heatmap(h, out, model.config.input_resolution, prefix)
    print(f"wrote {len(maps)} heatmaps for {clip.source_id} to {out}")
    return EXIT_OK


def cmd_bench(a) -> int:
    cfg = RunConfig.load(a.config)
    if a.iters < 50:
        raise ValidationError(f"--iters: at least 50 warm iterations required, got {a.iters}")
    model = build_model(cfg.backbone, cfg.variant, cfg.seed).eval()
    rng = np.random.default_rng(cfg.seed)
    t, r = cfg.backbone.n_frames, cfg.backbone.input_resolution
    rgb, res = rng.uniform(0, 1, (2, t, 3, r, r))
    with no_grad():
        for _ in range(a.warmup):
            model(rgb, res)
        times = []
        for _ in range(a.iters):
            t0 = time.perf_counter()
            model(rgb, res)
            times.append(time.perf_counter() - t0)
    ms = 1000 * float(np.mean(times))
    print(f"variant,resolution,frames,iters,latency_ms,throughput_clips_per_s")
    print(f"{cfg.variant.value},{r},{t},{a.iters},{ms:.3f},{1000 / ms:.3f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stcnet", description="Two-path spatio-temporal smoke detection network.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a seeded synthetic clip container")
    s.add_argument("--out", required=True)
    s.add_argument("--n-clips", type=int, default=400)
    s.add_argument("--frames", type=int, default=16)
    s.add_argument("--resolution", type=int, default=56)
    s.add_argument("--class-mix", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="sample frames and compute residual frames")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--segments", type=int, default=8)
    s.add_argument("--alpha", type=float, default=5.0)
    s.add_argument("--beta", type=float, default=255.0)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train one variant and save a checkpoint")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-split metrics CSV for a checkpoint")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--out", help="metrics CSV path (printed either way)")
    s.add_argument("--all", action="store_true", help="evaluate every clip instead of the test split")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and compare fusion variants over seeds")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--variants", nargs="+", default=["full", "A", "B", "C", "spatial_only"])
    s.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and the model loss")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--ops-only", action="store_true", help="skip the end-to-end model check")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("gradcam", help="export Grad-CAM heatmaps for one clip")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--clip", required=True, help="source id of the clip")
    s.add_argument("--path", default="temporal", choices=["spatial", "temporal"])
    s.add_argument("--class", dest="cls", type=int, default=1)
    s.add_argument("--alpha", type=float, default=5.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gradcam)

    s = sub.add_parser("bench", help="forward latency and throughput")
    s.add_argument("--config")
    s.add_argument("--iters", type=int, default=50)
    s.add_argument("--warmup", type=int, default=5)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if "STCNET_THREADS" in os.environ:
            cv2.setNumThreads(int(os.environ["STCNET_THREADS"]))
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, ValueError) as e:
        print(f"error: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - every other failure maps to the runtime exit code
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
