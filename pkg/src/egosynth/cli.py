"""Command-line entry point: ``egosynth <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Logs go to stderr;
machine-readable results (paths, counts, loss lines, tables) go to stdout.
"""

from __future__ import annotations

import argparse
import importlib
import json
import logging
import os
import sys
from pathlib import Path


from .data import (
    ClipRecord,
    DatasetManifest,
    SplitSpec,
    crop_layout,
    crop_resize,
    load_layout,
    load_manifest,
    load_png,
    save_layout,
    save_manifest,
    save_png,
    segment_clips,
    write_split,
)
from .diffusion import load_denoiser
from .errors import ConfigError, NonFiniteLossError
from .metrics import RandomProjectionExtractor, evaluate
from .pipeline import (
    PipelineConfig,
    SyntheticFixtureSpec,
    config_hash,
    infer_clip,
    make_fixtures,
    run_metadata,
    train_all,
    write_outputs,
)
from .translator import load_translator

CONFIG_ENV = "EGOSYNTH_CONFIG"
log = logging.getLogger("egosynth")


class UsageError(Exception):
    """Bad invocation: wrong flags, unknown config keys, malformed overrides."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# Config handling


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Set ``a.b.c=value`` entries in a nested dict; values are parsed as JSON
    when possible and taken as plain strings otherwise."""
    for item in overrides or ():
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise UsageError(f"override {key!r}: {p!r} is not a config section")
            node = node[p]
        if parts[-1] not in node:
            raise UsageError(f"override {key!r}: unknown field {parts[-1]!r}")
        node[parts[-1]] = _parse_value(raw)
    return doc


def resolve_config(args) -> PipelineConfig:
    doc = PipelineConfig().to_json()
    path = args.config or os.environ.get(CONFIG_ENV)
    if path:
        try:
            file_doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        _merge(doc, file_doc)
    apply_overrides(doc, args.set)
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    try:
        cfg = PipelineConfig.from_json(doc)
    except (ConfigError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    log.info("config hash %s", config_hash(cfg.to_json()))
    return cfg


def _merge(base: dict, extra: dict) -> None:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict) and k != "schedule":
            _merge(base[k], v)
        else:
            base[k] = v


def _load_plugin(spec: str):
    """Import ``module:attr``; classes and factory functions are called with no arguments."""
    mod_name, _, attr = spec.partition(":")
    if not attr:
        raise UsageError(f"plugin {spec!r} must look like module:attr")
    obj = getattr(importlib.import_module(mod_name), attr)
    if isinstance(obj, type):
        return obj()
    if callable(obj) and not hasattr(obj, "embed") and not hasattr(obj, "detect"):
        return obj()
    return obj


# --------------------------------------------------------------------------
# Subcommands


def cmd_make_fixtures(args) -> int:
    spec = SyntheticFixtureSpec(
        frame_size=args.size, videos=args.videos, frames_per_video=args.frames, clip_len=args.clip_len, seed=args.seed,
    )
    make_fixtures(spec, args.out)
    print(Path(args.out) / "manifest.json")
    return 0


def _sorted_files(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.is_file() and not p.name.startswith("."))


def cmd_build_manifest(args) -> int:
    raw, out = Path(args.raw), Path(args.out)
    videos = sorted(p for p in raw.iterdir() if p.is_dir())
    if not videos:
        raise ConfigError(f"no video folders under {raw}")
    records = []
    for vdir in videos:
        meta = json.loads((vdir / "meta.json").read_text())
        streams = {}
        for key in ("exo", "ego", "exo_layouts", "ego_layouts"):
            folder = vdir / key
            if not folder.is_dir():
                raise ConfigError(f"{vdir.name}: missing {key}/ folder")
            streams[key] = _sorted_files(folder)
        paths = {k: [] for k in streams}
        for view in ("exo", "ego"):
            roi_override = meta.get(f"{view}_roi")
            for t, (fpath, lpath) in enumerate(zip(streams[view], streams[f"{view}_layouts"])):
                frame = load_png(fpath)
                h, w = frame.shape[:2]
                roi = tuple(roi_override) if roi_override else (0, 0, w, h)
                rel = Path("videos") / vdir.name / view / f"{t:05d}.png"
                save_png(crop_resize(frame, roi, args.size), out / rel)
                paths[view].append(str(rel))
                lay = crop_layout(load_layout(lpath), roi, w, h, args.size)
                lrel = Path("videos") / vdir.name / f"{view}_layouts" / f"{t:05d}{lpath.suffix}"
                save_layout(lay, out / lrel)
                paths[f"{view}_layouts"].append(str(lrel))
        clips = segment_clips(
            paths["exo"], paths["ego"], paths["exo_layouts"], paths["ego_layouts"], args.clip_len,
            video_id=meta.get("video_id", vdir.name), subject_id=meta["subject_id"],
            object_id=meta["object_id"], scene_id=meta["scene_id"],
        )
        for c in clips:
            m = c.meta
            records.append(ClipRecord(m.video_id, m.subject_id, m.object_id, m.scene_id, m.clip_index,
                                      c.exo_frames, c.ego_frames, c.exo_layouts, c.ego_layouts))
        log.info("%s: %d frames -> %d clips", vdir.name, len(paths["exo"]), len(clips))
    manifest = DatasetManifest(args.name, records, None, out)
    path = save_manifest(manifest, out / "manifest.json")
    print(path)
    return 0


def cmd_split(args) -> int:
    manifest = load_manifest(args.manifest)
    try:
        spec = SplitSpec(
            args.strategy,
            train_fraction=args.train_fraction,
            held_out_object=args.held_out_object,
            train_subjects=tuple(args.train_subjects or ()),
            test_subjects=tuple(args.test_subjects or ()),
            train_scenes=tuple(args.train_scenes or ()),
            test_scenes=tuple(args.test_scenes or ()),
        )
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out) if args.out else Path(args.manifest).parent
    train_path, test_path = write_split(manifest, spec, out)
    n_train = len(load_manifest(train_path).clips)
    n_test = len(load_manifest(test_path).clips)
    print(f"train={n_train} test={n_test}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    stages = ("layout", "diffusion") if args.stage == "all" else (args.stage,)
    if args.steps is not None:
        if "layout" in stages:
            cfg.layout_steps = args.steps
        if "diffusion" in stages:
            cfg.diffusion_steps = args.steps
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True) + "\n")
    every = max(1, args.log_every)
    last = {"layout": cfg.layout_steps - 1, "diffusion": cfg.diffusion_steps - 1}

    def log_fn(stage, step, loss):
        if step % every == 0 or step == last[stage]:
            print(f"stage={stage} step={step} loss={loss!r}", flush=True)

    train_all(manifest, cfg, out, stages, resume=args.resume, log_fn=log_fn)
    for name in ("translator.ckpt", "denoiser.ckpt"):
        if (out / name).exists():
            log.info("wrote %s", out / name)
    return 0


def _checkpoint_paths(args) -> tuple[Path, Path]:
    base = Path(args.checkpoints) if args.checkpoints else None
    t = Path(args.translator) if args.translator else (base / "translator.ckpt" if base else None)
    d = Path(args.denoiser) if args.denoiser else (base / "denoiser.ckpt" if base else None)
    if t is None or d is None:
        raise UsageError("give --checkpoints DIR or both --translator and --denoiser")
    for p in (t, d):
        if not p.is_file():
            raise FileNotFoundError(f"checkpoint not found: {p}")
    return t, d


def _inputs(args):
    """Yield ``(clip_id, exo_frames, exo_layouts)`` from a manifest or frame folders."""
    if args.manifest:
        manifest = load_manifest(args.manifest)
        wanted = set(args.clips or ())
        for rec in manifest.clips:
            if wanted and rec.clip_id not in wanted:
                continue
            if len(rec.exo_layouts) != len(rec.exo_frames) or not rec.exo_layouts:
                raise ConfigError(
                    f"clip {rec.clip_id} has {len(rec.exo_frames)} exo frames but "
                    f"{len(rec.exo_layouts)} exo layouts; inference needs one exo layout per frame"
                )
            frames = [load_png(manifest.resolve(p)) for p in rec.exo_frames]
            layouts = [load_layout(manifest.resolve(p)) for p in rec.exo_layouts]
            yield rec.clip_id, frames, layouts
    else:
        if not args.layouts:
            raise UsageError("--frames requires --layouts (exo layouts are mandatory)")
        fpaths = _sorted_files(Path(args.frames))
        lpaths = _sorted_files(Path(args.layouts))
        if len(fpaths) != len(lpaths):
            raise ConfigError(f"{len(fpaths)} frames but {len(lpaths)} exo layouts")
        yield Path(args.frames).name, [load_png(p) for p in fpaths], [load_layout(p) for p in lpaths]


def cmd_infer(args) -> int:
    if bool(args.manifest) == bool(args.frames):
        raise UsageError("give exactly one of --manifest or --frames")
    cfg = resolve_config(args)
    t_path, d_path = _checkpoint_paths(args)
    translator, denoiser = load_translator(t_path), load_denoiser(d_path)
    out = Path(args.out)
    count = 0
    for clip_id, frames, layouts in _inputs(args):
        result = infer_clip(frames, layouts, translator, denoiser, cfg, clip_id)
        meta = run_metadata(cfg, {"translator": t_path, "denoiser": d_path}, clip_id=clip_id, frames=len(result))
        write_outputs(result, out / clip_id.replace("/", "_"), meta)
        log.info("%s: %d frames", clip_id, len(result))
        count += 1
    if not count:
        raise ConfigError("no clips selected for inference")
    print(out)
    return 0


def _pngs(folder: Path) -> dict[str, Path]:
    return {str(p.relative_to(folder)): p for p in sorted(folder.rglob("*.png"))}


def cmd_evaluate(args) -> int:
    pred, gt = _pngs(Path(args.pred)), _pngs(Path(args.gt))
    if not pred or set(pred) != set(gt):
        raise ConfigError(
            f"prediction and ground-truth frames do not align ({len(pred)} vs {len(gt)} PNGs, "
            f"{len(set(pred) ^ set(gt))} unmatched names)"
        )
    keys = sorted(pred)
    p_frames = [load_png(pred[k]) for k in keys]
    g_frames = [load_png(gt[k]) for k in keys]
    extractors = {}
    for item in args.extractor or ():
        name, _, spec = item.partition("=")
        if not spec:
            raise UsageError(f"--extractor {item!r} must look like name=module:attr")
        extractors[name] = _load_plugin(spec)
    if not extractors:
        extractors["random"] = RandomProjectionExtractor(seed=args.seed)
    detector = None
    if args.detector:
        try:
            detector = _load_plugin(args.detector)
        except (ImportError, AttributeError) as exc:
            log.warning("hand detector %r unavailable (%s); Feasi not reported", args.detector, exc)
    else:
        log.warning("no hand detector configured; Feasi not reported")
    report = evaluate(p_frames, g_frames, extractors, detector, RandomProjectionExtractor(seed=args.seed),
                      dataset=args.dataset, split=args.split)
    out = Path(args.report) if args.report else Path(args.pred) / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.dumps() + "\n")
    print(report.to_table())
    if not report.is_finite():
        log.error("non-finite metric values in report")
        return 2
    return 0


# --------------------------------------------------------------------------
# Parser


def _config_flags(p):
    p.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV} if set)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field by dotted path, e.g. translator.dim=128 (repeatable)")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="egosynth", description="Exocentric-to-egocentric frame synthesis toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-fixtures", help="write a synthetic paired exo/ego dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--videos", type=int, default=4, help="number of videos")
    p.add_argument("--frames", type=int, default=60, help="frames per video")
    p.add_argument("--clip-len", type=int, default=30, help="frames per clip")
    p.add_argument("--size", type=int, default=32, help="frame side in pixels")
    p.add_argument("--seed", type=int, default=0, help="fixture seed")
    p.set_defaults(func=cmd_make_fixtures)

    p = sub.add_parser("build-manifest", help="crop, resize and segment raw videos into a manifest",
                       description="RAW holds one folder per video with exo/, ego/, exo_layouts/, "
                                   "ego_layouts/ (sorted file lists) and meta.json giving subject_id, "
                                   "object_id, scene_id and optional exo_roi/ego_roi [x0,y0,x1,y1].")
    p.add_argument("--raw", required=True, help="raw dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--size", type=int, default=256, help="output frame side in pixels")
    p.add_argument("--clip-len", type=int, default=30, help="frames per clip")
    p.add_argument("--name", default="dataset", help="dataset name stored in the manifest")
    p.set_defaults(func=cmd_build_manifest)

    p = sub.add_parser("split", help="write train.json/test.json for a benchmark split")
    p.add_argument("manifest", help="manifest to split")
    p.add_argument("--strategy", required=True,
                   choices=["new-actions", "new-objects", "new-subjects", "new-scenes",
                            "new_actions", "new_objects", "new_subjects", "new_scenes"],
                   help="split strategy")
    p.add_argument("--train-fraction", type=float, default=0.8, help="per-video train share (new-actions)")
    p.add_argument("--held-out-object", help="object id reserved for test (new-objects)")
    p.add_argument("--train-subjects", nargs="+", help="subject ids for training (new-subjects)")
    p.add_argument("--test-subjects", nargs="+", help="subject ids for testing (new-subjects)")
    p.add_argument("--train-scenes", nargs="+", help="scene ids for training (new-scenes)")
    p.add_argument("--test-scenes", nargs="+", help="scene ids for testing (new-scenes)")
    p.add_argument("--out", help="output directory (default: next to the manifest)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the layout translator and/or the denoiser")
    p.add_argument("--stage", choices=["layout", "diffusion", "all"], default="all", help="what to train")
    p.add_argument("--manifest", required=True, help="training manifest")
    p.add_argument("--out", required=True, help="run directory for checkpoints")
    p.add_argument("--steps", type=int, help="total steps for the selected stage(s)")
    p.add_argument("--resume", action="store_true", help="continue from the newest periodic checkpoint")
    p.add_argument("--log-every", type=int, default=50, help="print a loss line every N steps")
    _config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="generate ego frames from exo clips")
    p.add_argument("--manifest", help="manifest whose clips to translate")
    p.add_argument("--clips", nargs="+", help="restrict to these clip ids (video_id/clip_index)")
    p.add_argument("--frames", help="folder of exo PNG frames (alternative to --manifest)")
    p.add_argument("--layouts", help="folder of exo layouts matching --frames")
    p.add_argument("--checkpoints", help="run directory holding translator.ckpt and denoiser.ckpt")
    p.add_argument("--translator", help="translator checkpoint path")
    p.add_argument("--denoiser", help="denoiser checkpoint path")
    p.add_argument("--out", required=True, help="output directory")
    _config_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predicted frames against ground truth")
    p.add_argument("pred", help="folder of predicted PNGs")
    p.add_argument("gt", help="folder of ground-truth PNGs with the same relative names")
    p.add_argument("--report", help="report path (default: PRED/report.json)")
    p.add_argument("--extractor", action="append", metavar="NAME=MODULE:ATTR",
                   help="perceptual feature extractor plugin; names squeeze/alex/vgg fill the "
                        "P_squeeze/P_alex/P_vgg columns (repeatable)")
    p.add_argument("--detector", metavar="MODULE:ATTR", help="hand detector plugin for Feasi")
    p.add_argument("--dataset", default="", help="dataset label stored in the report")
    p.add_argument("--split", default="", help="split label stored in the report")
    p.add_argument("--seed", type=int, default=0, help="seed of the built-in random-projection extractor")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose + 1, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"egosynth {args.command}: {exc}", file=sys.stderr)
        return 1
    except NonFiniteLossError as exc:
        print(f"egosynth {args.command}: {exc} (state dumped to {exc.dump_path})", file=sys.stderr)
        return 2
    except (OSError, ValueError, ArithmeticError, RuntimeError, KeyError) as exc:
        print(f"egosynth {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
