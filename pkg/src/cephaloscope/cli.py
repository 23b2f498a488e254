"""``cephaloscope <synth|split|train|eval|saliency> --config FILE [--set key=value ...]``.

Every command writes into a fresh run directory ``<run_root>/<timestamp>-<command>-<config hash>``
(or ``--run-dir``), starting with the fully resolved ``config.yaml`` and a ``run.log``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .backbone import ConfigError, Network, file_hash, load_network
from .config import RunConfig
from .data import (
    DataError,
    ablation_label,
    crop_regions,
    parse_parts,
    partition_boxes,
    read_manifest,
    stratified_split,
    synth_generate,
    write_manifest,
)
from .data.imaging import write_pgm
from .metrics import group_report
from .pipeline import (
    Mode,
    SaliencyCache,
    infer_with_retest_batch,
    load_dataset,
    precompute_saliency,
    predict,
    saliency_provider_for,
    train,
)
from .saliency import SaliencyError, export_heatmap, image_saliency, mean_saliency, normalize_map, overlay

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

CACHE_ENV = "CEPHALOSCOPE_CACHE"

log = logging.getLogger("cephaloscope")


class StepError(ConfigError):
    """A command was invoked without a prerequisite artifact (e.g. Step-3 without Step 1)."""


# ---------------------------------------------------------------------------
# Run directory and logging
# ---------------------------------------------------------------------------


def make_run_dir(cfg: RunConfig, command: str, explicit=None) -> Path:
    if explicit is not None:
        run_dir = Path(explicit)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path(cfg.tree["run_root"]) / f"{stamp}-{command}-{cfg.digest()}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _start_logging(run_dir: Path, verbose: bool) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    return handler


def cache_root(cfg: RunConfig) -> Path:
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path(cfg.tree["run_root"]) / "cache"


def _mode_label(mode: Mode, retest: bool) -> str:
    if mode is Mode.AGE_AND_GENDER:
        return "EFFI.+GEN."
    if mode is Mode.SALIENCY_AUGMENTED:
        return "EFFI.+CAM.+RTS." if retest else "EFFI.+CAM."
    return "EFFI."


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, run_dir: Path, args) -> Path:
    out = run_dir / "corpus"
    manifest, _ = synth_generate(cfg.synth_spec(), out)
    log.info("wrote %d synthetic images to %s", len(manifest), out)
    print(out / "manifest.csv")
    return out


def cmd_split(cfg: RunConfig, run_dir: Path, args) -> dict[str, Path]:
    manifest = read_manifest(args.manifest)
    # absolute image paths keep the split files valid outside the corpus directory
    absolute = manifest.with_records(
        dataclasses.replace(r, image_path=str(manifest.resolve(r).resolve())) for r in manifest
    )
    parts = stratified_split(absolute, cfg.split_spec())
    paths = {}
    for name, m in zip(("train", "val", "test"), parts):
        paths[name] = run_dir / f"{name}.csv"
        write_manifest(m, paths[name])
        log.info("%s: %d samples", name, len(m))
        print(paths[name])
    return paths


def _step1_network(path) -> tuple[Network, str]:
    if path is None:
        raise StepError("Step-3 training needs a Step-1 checkpoint (--step1-checkpoint)")
    path = Path(path)
    if not path.exists():
        raise StepError(f"Step-1 checkpoint {path} does not exist")
    net, meta = load_network(path)
    if meta.get("mode") == Mode.SALIENCY_AUGMENTED.value:
        raise StepError(f"{path} is a Step-3 checkpoint, not a Step-1 checkpoint")
    return net, file_hash(path)


def cmd_train(cfg: RunConfig, run_dir: Path, args):
    tcfg = cfg.train_config()
    policy = cfg.retest_policy()
    bcfg = cfg.backbone_config()
    if args.step == 1:
        mode = Mode.AGE_AND_GENDER if bcfg.head.value == "AgeAndGender" else Mode.BASE_COPY_ONLY
        saliency_net = None
    else:
        mode = Mode.SALIENCY_AUGMENTED
        saliency_net, step1_hash = _step1_network(args.step1_checkpoint)
    net = Network(bcfg, seed=cfg.seed)
    train_set = load_dataset(read_manifest(args.train), net.resolution)
    val_set = load_dataset(read_manifest(args.val), net.resolution)
    meta = {"step": args.step, "config_hash": cfg.digest()}
    if saliency_net is not None:
        if saliency_net.resolution != net.resolution:
            raise ConfigError("Step-1 and Step-3 networks must share the input resolution")
        cache = SaliencyCache(cache_root(cfg), step1_hash)
        train_set.saliency = precompute_saliency(saliency_net, train_set, cache)
        val_set.saliency = precompute_saliency(saliency_net, val_set, cache)
        log.info("saliency cache %s: %d hits, %d misses", cache.dir, cache.hits, cache.misses)
        meta.update(step1_checkpoint=str(Path(args.step1_checkpoint).resolve()), step1_hash=step1_hash)
    result = train(net, train_set, val_set, tcfg, policy, mode, run_dir, resume=args.resume, meta=meta)
    log.info(
        "trained %d epochs; best epoch %d val MAE %.4f%s",
        len(result.history),
        result.best_epoch,
        result.best_val_mae,
        " (stopped early)" if result.stopped_early else "",
    )
    print(run_dir / "best.ckpt")
    return result


def _ablation_transform(parts, offset: int):
    def transform(rec, buf):
        boxes = partition_boxes(buf.width, buf.height, rec.orientation, offset)
        return crop_regions(buf, boxes, parts)

    return transform


def cmd_eval(cfg: RunConfig, run_dir: Path, args):
    net, meta = load_network(args.checkpoint)
    mode = Mode(meta.get("mode", Mode.BASE_COPY_ONLY.value))
    manifest = read_manifest(args.manifest)
    ablation = args.ablation if args.ablation is not None else cfg.tree["eval"]["ablation"]
    transform, label = None, None
    if ablation:
        try:
            parts = parse_parts(str(ablation))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        transform = _ablation_transform(parts, int(cfg.tree["eval"]["region_offset"]))
        label = ablation_label(parts)
    data = load_dataset(manifest, net.resolution, transform)

    if mode is Mode.SALIENCY_AUGMENTED:
        step1 = args.step1_checkpoint or meta.get("step1_checkpoint")
        saliency_net, h = _step1_network(step1)
        if meta.get("step1_hash") and h != meta["step1_hash"]:
            raise StepError(f"Step-1 checkpoint {step1} does not match the one this model was trained with")
        traces = infer_with_retest_batch(net, data.images, saliency_provider_for(saliency_net), cfg.retest_policy())
        first = np.array([t.first_pass_age for t in traces])
        final = np.array([t.final_age for t in traces])
        retested = [t.retested for t in traces]
    else:
        # copy-input networks have no saliency channel to retest with
        first, _ = predict(net, data, Mode.BASE_COPY_ONLY)
        final = first
        retested = [False] * len(data)
    label = label or _mode_label(mode, mode is Mode.SALIENCY_AUGMENTED)

    probs = labels = None
    if net.has_gender:
        _, logits = predict(net, data, Mode.BASE_COPY_ONLY)
        probs, labels = _sigmoid(logits), data.genders.astype(int)
    report = group_report(data.ages, final, label=label, gender_probs=probs, gender_labels=labels)
    (run_dir / "report.json").write_text(report.to_json())
    (run_dir / "report.txt").write_text(report.to_table() + "\n")
    with open(run_dir / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "first_pass", "retested", "final", "label"])
        for sid, f, r, z, y in zip(data.ids, first, retested, final, data.ages):
            w.writerow([sid, repr(float(f)), int(r), repr(float(z)), f"{y:.2f}"])
    print(report.to_table())
    return report


def cmd_saliency(cfg: RunConfig, run_dir: Path, args):
    net, _ = load_network(args.checkpoint)
    manifest = read_manifest(args.manifest)
    data = load_dataset(manifest, net.resolution)
    maps = image_saliency(net, data.images, batch_size=int(cfg.tree["saliency"]["batch_size"]))
    (run_dir / "heatmaps").mkdir(exist_ok=True)
    (run_dir / "overlays").mkdir(exist_ok=True)
    for sid, img, m in zip(data.ids, data.images, maps):
        export_heatmap(run_dir / "heatmaps" / f"{sid}.pgm", m.upsampled)
        write_pgm(run_dir / "overlays" / f"{sid}.pgm", overlay(img, m.upsampled), 8)
    per_age = args.mean_per_age or bool(cfg.tree["saliency"]["mean_per_age"])
    written = []
    if per_age:
        (run_dir / "mean").mkdir(exist_ok=True)
        groups: dict[int, list[np.ndarray]] = {}
        for age, m in zip(data.ages, maps):
            groups.setdefault(int(age // 1), []).append(normalize_map(m.upsampled))
        for age in sorted(groups):
            mean = mean_saliency(groups[age], age)
            np.save(run_dir / "mean" / f"age_{age:02d}.npy", mean.map)
            export_heatmap(run_dir / "mean" / f"age_{age:02d}.pgm", mean.map)
            written.append(age)
        log.info("wrote mean maps for ages %s", written)
    log.info("wrote %d heatmaps", len(maps))
    return maps, written


COMMANDS = {"synth": cmd_synth, "split": cmd_split, "train": cmd_train, "eval": cmd_eval, "saliency": cmd_saliency}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.initial_lr=1e-3 (repeatable)")
    common.add_argument("--run-dir", type=Path, help="write here instead of a fresh timestamped directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cephaloscope", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    s = sub.add_parser("split", parents=[common], help="stratified train/val/test split")
    s.add_argument("--manifest", type=Path, required=True)
    t = sub.add_parser("train", parents=[common], help="Step-1 or Step-3 training")
    t.add_argument("--step", type=int, choices=(1, 3), default=1)
    t.add_argument("--train", type=Path, required=True)
    t.add_argument("--val", type=Path, required=True)
    t.add_argument("--step1-checkpoint", type=Path)
    t.add_argument("--resume", action="store_true", help="continue from <run-dir>/last.ckpt")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--manifest", type=Path, required=True)
    e.add_argument("--ablation", help="keep only these parts, e.g. A or A+C")
    e.add_argument("--step1-checkpoint", type=Path, help="saliency source for retest (default: recorded in checkpoint)")
    g = sub.add_parser("saliency", parents=[common], help="Grad-CAM heatmaps for a manifest")
    g.add_argument("--checkpoint", type=Path, required=True)
    g.add_argument("--manifest", type=Path, required=True)
    g.add_argument("--mean-per-age", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    console.addFilter(lambda record: not getattr(record, "file_only", False))
    root = logging.getLogger()
    root.addHandler(console)
    root.setLevel(logging.INFO)
    handler = None
    try:
        if args.command == "train" and args.resume:
            if args.run_dir is None:
                raise ConfigError("--resume needs --run-dir pointing at the interrupted run")
            if args.config is None and (args.run_dir / "config.yaml").exists():
                args.config = args.run_dir / "config.yaml"
        cfg = RunConfig.load(args.config, args.overrides)
        run_dir = make_run_dir(cfg, args.command, args.run_dir)
        handler = _start_logging(run_dir, args.verbose)
        (run_dir / "config.yaml").write_text(cfg.to_yaml())
        log.info("run directory %s", run_dir)
        log.info("resolved config (hash %s):\n%s", cfg.digest(), cfg.to_yaml(), extra={"file_only": True})
        COMMANDS[args.command](cfg, run_dir, args)
        return EXIT_OK
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (SaliencyError, ValueError, RuntimeError, OSError) as exc:
        log.error("runtime error: %s", exc)
        return EXIT_RUNTIME
    finally:
        root.removeHandler(console)
        if handler is not None:
            root.removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
