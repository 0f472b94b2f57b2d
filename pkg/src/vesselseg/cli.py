"""Batch pipeline commands: synth, preprocess, train, infer, evaluate, report.

Every command is a pure function of (config, inputs, seed) in deterministic
mode.  Exit codes are a stable scripting contract: 0 success, 2 config
error, 3 data error, 4 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import engine, metrics, netgraph, postproc, prep, report, stackio, synth, trainer
from .postproc import CrfParams
from .prep import NotchSpec
from .stackio import CorruptFileError, ManifestError, UnsupportedFormatError
from .trainer import LrSchedule, TrainConfig
from .volcore import ShapeError

log = logging.getLogger("vesselseg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class PipelineConfig:
    manifest: Path = Path("data/manifest.txt")
    preset: str = "VD2D3D"
    width_scale: float = 1.0
    threshold: float = 0.5
    seed: int = 0
    engine_mode: str = engine.DETERMINISTIC
    threads: int | None = None
    out: Path = Path("out")
    # preprocessing
    normalize_clip: tuple | None = None
    counts_scale: float = 255.0
    denoiser_sigma: tuple = (0.0, 1.0, 1.0)
    inverse_kind: str = "unbiased"
    notches: dict = field(default_factory=dict)     # stack id -> NotchSpec
    # training
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(
        stage="stage1", updates=trainer.VD2D_UPDATES, lr=trainer.VD2D_SCHEDULE))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(
        stage="stage2", updates=trainer.VD2D3D_UPDATES, lr=trainer.VD2D3D_SCHEDULE))
    # post-processing
    crf: CrfParams = field(default_factory=CrfParams)
    crf_mode: str = "lattice"


def _parse_lr(sec, default: LrSchedule) -> LrSchedule:
    return LrSchedule(
        initial_lr=sec.getfloat("initial_lr", default.initial_lr),
        anneal_factor=sec.getfloat("anneal_factor", default.anneal_factor),
        anneal_every=sec.getint("anneal_every", default.anneal_every),
        reset_at=sec.getint("reset_at", default.reset_at)
        if "reset_at" in sec or default.reset_at is not None else None,
        reset_lr=sec.getfloat("reset_lr", default.reset_lr)
        if "reset_lr" in sec or default.reset_lr is not None else None,
        reset_anneal_every=sec.getint("reset_anneal_every", default.reset_anneal_every)
        if "reset_anneal_every" in sec or default.reset_anneal_every is not None else None,
    )


def _parse_train(sec, default: TrainConfig) -> TrainConfig:
    patch = default.patch_out
    if "patch_out" in sec:
        patch = tuple(int(v) for v in sec["patch_out"].split())
        if len(patch) != 3:
            raise ConfigError("patch_out needs three extents: z y x")
    return TrainConfig(
        stage=default.stage,
        updates=sec.getint("updates", default.updates),
        patch_out=patch,
        momentum=sec.getfloat("momentum", default.momentum),
        lr=_parse_lr(sec, default.lr),
        augment=sec.getboolean("augment", default.augment),
        rebalance=sec.getboolean("rebalance", default.rebalance),
        seed=sec.getint("seed", default.seed),
        log_every=sec.getint("log_every", default.log_every),
        eval_patches=sec.getint("eval_patches", default.eval_patches),
        checkpoint_every=sec.getint("checkpoint_every", default.checkpoint_every),
    )


def load_config(path=None, overrides=None) -> PipelineConfig:
    cfg = PipelineConfig()
    cp = configparser.ConfigParser()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            cp.read(path)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from e
        base = path.parent
        if cp.has_section("pipeline"):
            s = cp["pipeline"]
            if "manifest" in s:
                cfg.manifest = base / s["manifest"]
            cfg.preset = s.get("preset", cfg.preset)
            cfg.width_scale = s.getfloat("width_scale", cfg.width_scale)
            cfg.threshold = s.getfloat("threshold", cfg.threshold)
            cfg.seed = s.getint("seed", cfg.seed)
            cfg.engine_mode = s.get("engine_mode", cfg.engine_mode)
            if "threads" in s:
                cfg.threads = s.getint("threads")
            if "out" in s:
                cfg.out = base / s["out"]
        if cp.has_section("preprocess"):
            s = cp["preprocess"]
            if "normalize_clip" in s:
                cfg.normalize_clip = tuple(float(v) for v in s["normalize_clip"].split())
            cfg.counts_scale = s.getfloat("counts_scale", cfg.counts_scale)
            if "denoiser_sigma" in s:
                cfg.denoiser_sigma = tuple(float(v) for v in s["denoiser_sigma"].split())
            cfg.inverse_kind = s.get("inverse", cfg.inverse_kind)
        for section in cp.sections():
            if section.startswith("notch "):
                sid = section.split(None, 1)[1]
                triples = []
                for item in cp[section]["notches"].split(","):
                    fy, fx, r = (float(v) for v in item.split())
                    triples.append((fy, fx, r))
                cfg.notches[sid] = NotchSpec(triples)
        if cp.has_section("train stage1"):
            cfg.stage1 = _parse_train(cp["train stage1"], cfg.stage1)
        if cp.has_section("train stage2"):
            cfg.stage2 = _parse_train(cp["train stage2"], cfg.stage2)
        if cp.has_section("crf"):
            s = cp["crf"]
            cfg.crf = CrfParams(
                w_smooth=s.getfloat("w_smooth", cfg.crf.w_smooth),
                theta_smooth=s.getfloat("theta_smooth", cfg.crf.theta_smooth),
                w_appear=s.getfloat("w_appear", cfg.crf.w_appear),
                theta_appear=s.getfloat("theta_appear", cfg.crf.theta_appear),
                theta_intensity=s.getfloat("theta_intensity", cfg.crf.theta_intensity),
                iterations=s.getint("iterations", cfg.crf.iterations),
            )
            cfg.crf_mode = s.get("mode", cfg.crf_mode)
    for key, val in (overrides or {}).items():
        if val is not None:
            setattr(cfg, key, val)
    if cfg.preset not in netgraph.PRESET_IDS:
        raise ConfigError(f"unknown preset {cfg.preset!r}")
    if cfg.engine_mode not in (engine.DETERMINISTIC, engine.FAST):
        raise ConfigError(f"unknown engine mode {cfg.engine_mode!r}")
    if not 0.0 < cfg.threshold < 1.0:
        raise ConfigError("threshold must lie in (0, 1)")
    return cfg


def _load_manifest(cfg) -> stackio.DatasetManifest:
    if not Path(cfg.manifest).exists():
        raise DataError(f"manifest {cfg.manifest} does not exist")
    try:
        return stackio.parse_manifest(cfg.manifest)
    except ManifestError as e:
        raise ConfigError(str(e)) from e


def _prep_dir(cfg) -> Path:
    return Path(cfg.out) / "prep"


def _prep_image_path(cfg, sid) -> Path:
    return _prep_dir(cfg) / f"stack{sid}_image.tif"


# ---------------------------------------------------------------------------
# Commands.

def cmd_synth(cfg, args) -> int:
    """Write a synthetic tube dataset + manifest (the smoke-profile data)."""
    out = Path(args.data_out or (Path(cfg.out) / "synth_data"))
    (out / "stacks").mkdir(parents=True, exist_ok=True)
    n_train, n_test = args.train_stacks, args.test_stacks
    lines = ["# synthetic tube dataset"]
    for i in range(n_train + n_test):
        sid = str(i + 1)
        image, labels = synth.tube_stack(
            (8, 160, 160), n_tubes=7, radius=(4.5, 7.5), peak_counts=400,
            contrast=0.8, seed=cfg.seed + i + 1,
        )
        counts = np.round(image.astype(np.float64) * 65535).astype(np.uint16)
        stackio.write_stack(out / "stacks" / f"stack{sid}_image.tif", counts, (1, 1, 4))
        stackio.write_mask(out / "stacks" / f"stack{sid}_labels.tif", labels, (1, 1, 4))
        usage = "Train" if i < n_train else "Test"
        pct = stackio.label_stats(labels) * 100
        lines += [
            "", f"[stack {sid}]",
            f"image = stacks/stack{sid}_image.tif",
            f"labels = stacks/stack{sid}_labels.tif",
            "voxel_size_um = 1 1 4",
            f"dimension_vox = 160 160 8",
            f"vessel_labels_pct = {pct:.2f}",
            "source = synthetic",
            f"usage = {usage}",
        ]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    log.info("synthetic dataset with %d stacks at %s", n_train + n_test, out)
    print(out / "manifest.txt")
    return EXIT_OK


def cmd_preprocess(cfg, args) -> int:
    """normalize -> stabilize -> denoise -> inverse -> optional notch, per stack."""
    manifest = _load_manifest(cfg)
    pdir = _prep_dir(cfg)
    pdir.mkdir(parents=True, exist_ok=True)
    failures = []
    for entry in manifest:
        try:
            st = stackio.read_stack(entry.image)
        except (FileNotFoundError, CorruptFileError, UnsupportedFormatError) as e:
            failures.append(f"stack {entry.stack_id}: {e}")
            continue
        data = st.data.astype(np.float64)
        norm, bounds = prep.normalize(data, cfg.normalize_clip)
        counts = norm * cfg.counts_scale
        denoiser = prep.gaussian_denoiser(cfg.denoiser_sigma)
        restored = prep.stabilized_denoise(counts, denoiser, cfg.inverse_kind)
        out = np.clip(restored / cfg.counts_scale, 0.0, 1.0)
        notch = cfg.notches.get(entry.stack_id)
        if notch is not None:
            out = prep.notch_filter(out, notch)
        stackio.write_stack(
            _prep_image_path(cfg, entry.stack_id), out.astype(np.float32),
            entry.voxel_size_um,
        )
        sidecar = {
            "stack_id": entry.stack_id,
            "source": str(entry.image),
            "normalize_bounds": bounds,
            "normalize_clip": cfg.normalize_clip,
            "counts_scale": cfg.counts_scale,
            "denoiser_sigma": list(cfg.denoiser_sigma),
            "inverse": cfg.inverse_kind,
            "notches": notch.notches if notch else [],
            "engine_mode": cfg.engine_mode,
        }
        with open(pdir / f"stack{entry.stack_id}_image.json", "w") as f:
            json.dump(sidecar, f, indent=1)
        log.info("preprocessed stack %s", entry.stack_id)
    if failures:
        raise DataError("preprocessing failed for: " + "; ".join(failures))
    return EXIT_OK


def _load_records(cfg, manifest, usage):
    records = []
    for entry in manifest.split(usage):
        pimg = _prep_image_path(cfg, entry.stack_id)
        if not pimg.exists():
            raise DataError(f"stack {entry.stack_id}: preprocessed image {pimg} missing; "
                            "run `vesselseg preprocess` first")
        image = stackio.read_stack(pimg).data.astype(np.float64)
        labels = stackio.read_labels(entry.labels).data
        if image.shape != labels.shape:
            raise DataError(
                f"stack {entry.stack_id}: image {image.shape} vs labels {labels.shape}"
            )
        records.append({"id": entry.stack_id, "image": image, "labels": labels,
                        "recursive": None})
    return records


def cmd_train(cfg, args) -> int:
    manifest = _load_manifest(cfg)
    train_recs = _load_records(cfg, manifest, "Train")
    test_recs = _load_records(cfg, manifest, "Test")
    if not train_recs:
        raise DataError("no stacks marked Usage=Train in the manifest")
    out = Path(cfg.out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    cfg.stage1.out_dir = str(ckpt_dir)
    cfg.stage2.out_dir = str(ckpt_dir)
    try:
        if cfg.preset == "VD2D":
            spec = netgraph.build_preset("VD2D", cfg.width_scale)
            params0 = netgraph.init_weights(spec, seed=cfg.stage1.seed)
            params, rows = trainer.train_stage(spec, params0, train_recs, cfg.stage1, test_recs)
            netgraph.save_checkpoint(ckpt_dir / "VD2D_final.ckpt", params)
            logs = {"stage1": rows}
        else:
            p1, p2, maps, (rows1, rows2) = trainer.train_recursive(
                train_recs, cfg.stage1, cfg.stage2, test_recs,
                preset2=cfg.preset, width_scale=cfg.width_scale,
            )
            netgraph.save_checkpoint(ckpt_dir / "VD2D_final.ckpt", p1)
            netgraph.save_checkpoint(ckpt_dir / f"{cfg.preset}_final.ckpt", p2)
            rdir = out / "recursive"
            rdir.mkdir(exist_ok=True)
            for rec, m in zip(train_recs, maps):
                stackio.write_stack(rdir / f"stack{rec['id']}_recursive.tif", m)
            logs = {"stage1": rows1, "stage2": rows2}
    except FloatingPointError:
        raise
    except ShapeError as e:
        raise DataError(str(e)) from e
    for stage, rows in logs.items():
        report.write_log_csv(out / f"train_{stage}_log.csv", rows)
        report.render_training_curves(out / f"train_{stage}_curves.png", rows)
    log.info("training complete; checkpoints in %s", ckpt_dir)
    return EXIT_OK


def _spec_for_checkpoint(cfg, store):
    if store.preset_id not in netgraph.PRESET_IDS:
        raise ConfigError(f"checkpoint preset {store.preset_id!r} unknown")
    spec = netgraph.build_preset(store.preset_id, store.width_scale)
    try:
        netgraph.check_params(spec, store)
    except (ShapeError, ValueError) as e:
        raise ConfigError(f"incompatible checkpoint: {e}") from e
    return spec


def cmd_infer(cfg, args) -> int:
    if args.checkpoint is None:
        raise ConfigError("infer needs --checkpoint")
    try:
        store = netgraph.load_checkpoint(args.checkpoint)
    except FileNotFoundError as e:
        raise DataError(str(e)) from e
    except ValueError as e:
        raise ConfigError(f"incompatible checkpoint: {e}") from e
    spec = _spec_for_checkpoint(cfg, store)
    manifest = _load_manifest(cfg)
    sids = [args.stack] if args.stack else [e.stack_id for e in manifest]
    pred = Path(cfg.out) / "pred"
    pred.mkdir(parents=True, exist_ok=True)
    for sid in sids:
        try:
            entry = manifest.entry(sid)
        except KeyError:
            raise ConfigError(f"stack {sid!r} not in manifest")
        pimg = _prep_image_path(cfg, sid)
        if not pimg.exists():
            raise DataError(f"preprocessed image {pimg} missing")
        image = stackio.read_stack(pimg).data.astype(np.float64)
        recursive = None
        if spec.arity == 2:
            rpath = Path(args.recursive) if args.recursive else (
                Path(cfg.out) / "recursive" / f"stack{sid}_recursive.tif")
            if not rpath.exists():
                vd2d_ckpt = Path(cfg.out) / "checkpoints" / "VD2D_final.ckpt"
                if not vd2d_ckpt.exists():
                    raise DataError(
                        f"stack {sid}: no recursive map at {rpath} and no VD2D checkpoint"
                    )
                s1 = netgraph.load_checkpoint(vd2d_ckpt)
                recursive = trainer.dense_infer(
                    _spec_for_checkpoint(cfg, s1), s1, image
                ).astype(np.float64)
            else:
                recursive = stackio.read_stack(rpath).data.astype(np.float64)
        try:
            prob = trainer.dense_infer(spec, store, image, recursive)
        except ShapeError as e:
            raise DataError(f"stack {sid}: {e}") from e
        stackio.write_stack(pred / f"stack{sid}_prob.tif", prob, entry.voxel_size_um)
        mask_t = postproc.threshold(prob, cfg.threshold)
        stackio.write_mask(pred / f"stack{sid}_mask_threshold.tif", mask_t, entry.voxel_size_um)
        mask_c = postproc.apply_stack(prob.astype(np.float64), image, cfg.crf, cfg.crf_mode)
        stackio.write_mask(pred / f"stack{sid}_mask_crf.tif", mask_c, entry.voxel_size_um)
        log.info("inferred stack %s -> %s", sid, pred)
    return EXIT_OK


def _gather_eval(cfg, manifest, mask_kind):
    triples = []
    pred = Path(cfg.out) / "pred"
    for entry in manifest:
        ppath = pred / f"stack{entry.stack_id}_prob.tif"
        mpath = pred / f"stack{entry.stack_id}_mask_{mask_kind}.tif"
        if not ppath.exists() or not mpath.exists():
            continue
        prob = stackio.read_stack(ppath).data
        mask = stackio.read_labels(mpath).data
        truth = stackio.read_labels(entry.labels).data
        if prob.shape != truth.shape or mask.shape != truth.shape:
            raise DataError(f"stack {entry.stack_id}: prediction/truth misaligned")
        triples.append((entry, prob, mask, truth))
    if not triples:
        raise DataError(f"no predictions found under {pred}")
    return triples


def cmd_evaluate(cfg, args) -> int:
    manifest = _load_manifest(cfg)
    rep = metrics.MetricsReport()
    for entry, prob, mask, truth in _gather_eval(cfg, manifest, args.masks):
        vals = metrics.evaluate_stack(prob, mask, truth, strict=False)
        rep.add(entry.stack_id, **vals)
        log.info("evaluated stack %s", entry.stack_id)
    out = Path(cfg.out)
    report.write_metrics_csv(out / f"metrics_{args.masks}.csv", rep)
    (out / f"metrics_{args.masks}.txt").write_text(
        report.format_table(rep, f"Per-stack metrics ({args.masks} masks)"))
    print(report.format_table(rep, f"Per-stack metrics ({args.masks} masks)"))
    return EXIT_OK


def cmd_report(cfg, args) -> int:
    manifest = _load_manifest(cfg)
    out = Path(cfg.out)
    fig_dir = out / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"metrics_{args.masks}.csv"
    if not csv_path.exists():
        raise DataError(f"{csv_path} missing; run `vesselseg evaluate` first")
    rep = report.read_metrics_csv(csv_path)
    (out / f"metrics_{args.masks}.txt").write_text(
        report.format_table(rep, f"Per-stack metrics ({args.masks} masks)"))
    for entry, prob, mask, truth in _gather_eval(cfg, manifest, args.masks):
        pimg = _prep_image_path(cfg, entry.stack_id)
        image = stackio.read_stack(pimg).data if pimg.exists() else prob
        report.render_stack_overlays(fig_dir, entry.stack_id, image, truth, prob, mask)
        log.info("rendered overlays for stack %s", entry.stack_id)
    print(report.format_table(rep, f"Per-stack metrics ({args.masks} masks)"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point.

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="vesselseg",
        description="Dense ConvNet pipeline for volumetric vasculature segmentation",
    )
    p.add_argument("--config", type=Path, help="pipeline config file (INI)")
    p.add_argument("--manifest", type=Path, help="dataset manifest override")
    p.add_argument("--preset", choices=netgraph.PRESET_IDS, help="network preset override")
    p.add_argument("--seed", type=int, help="seed override")
    p.add_argument("--threads", type=int, help="worker thread cap (env VESSELSEG_THREADS)")
    p.add_argument("--deterministic", action="store_true",
                   help="force the deterministic engine mode")
    p.add_argument("--out", type=Path, help="output directory override")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", help="generate a synthetic tube dataset")
    s.add_argument("--data-out", type=Path, help="dataset directory")
    s.add_argument("--train-stacks", type=int, default=2)
    s.add_argument("--test-stacks", type=int, default=1)
    sub.add_parser("preprocess", help="stabilize/denoise/de-band all stacks")
    sub.add_parser("train", help="run the (recursive) training procedure")
    s = sub.add_parser("infer", help="dense probability maps + masks")
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--stack", help="stack id (default: all)")
    s.add_argument("--recursive", type=Path, help="recursive map for 2-stream presets")
    s = sub.add_parser("evaluate", help="six-metric battery against manifest labels")
    s.add_argument("--masks", choices=("threshold", "crf"), default="crf")
    s = sub.add_parser("report", help="tables + best/worst overlay figures")
    s.add_argument("--masks", choices=("threshold", "crf"), default="crf")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        overrides = {
            "manifest": args.manifest,
            "preset": args.preset,
            "seed": args.seed,
            "threads": args.threads,
            "out": args.out,
        }
        if args.deterministic:
            overrides["engine_mode"] = engine.DETERMINISTIC
        cfg = load_config(args.config, overrides)
        engine.set_mode(cfg.engine_mode)
        threads = cfg.threads if cfg.threads is not None else engine.threads_from_env()
        if threads is not None:
            engine.set_threads(threads)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        lock = FileLock(Path(cfg.out) / ".vesselseg.lock")
        try:
            with lock.acquire(timeout=0.5):
                return COMMANDS[args.command](cfg, args)
        except Timeout:
            raise DataError(f"output directory {cfg.out} is locked by another run")
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except (DataError, ManifestError, CorruptFileError, UnsupportedFormatError,
            FileNotFoundError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except FloatingPointError as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
