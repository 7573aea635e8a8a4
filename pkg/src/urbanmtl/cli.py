"""Command-line entry point: synth, train, predict, evaluate, inspect.

Exit codes: 0 success, 1 usage/validation error, 2 IO/format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import mtlt
from .core import IGNORE, ModelConfig, NUM_LCZ_CLASSES, UrbanMTLError, FormatError
from .data import DatasetManifest, SceneBundle, write_synthetic_dataset
from .infer import aggregate_labels, aggregate_lcz, render_maps, sliding_window_predict
from .metrics import ConfusionMatrix, PenaltyMatrix, accumulate, default_lcz_penalty, hse_report, lcz_report
from .model import MTLNet
from .train import TrainConfig, Weighting, fit, load_checkpoint, read_checkpoint_manifest

log = logging.getLogger("urbanmtl")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class CommandResult:
    exit_code: int = EXIT_OK
    message: str = ""
    data: dict = field(default_factory=dict)
    json_mode: bool = False


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", help="print a machine-readable JSON result")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="urbanmtl", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic scenes and a manifest")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scenes", type=int, default=4)
    s.add_argument("--size", type=int, default=512)
    s.add_argument("--bands", type=int, default=10)
    s.add_argument("--urban-fraction", type=float, default=0.5)
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model from a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=0.002)
    t.add_argument("--lr-decay-factor", type=float, default=0.25)
    t.add_argument("--lr-decay-every", type=int, default=2)
    t.add_argument("--patience", type=int, default=10)
    t.add_argument("--weighting", choices=["learned", "fixed"], default="learned")
    t.add_argument("--p2f", type=_on_off, default=True, metavar="{on,off}")
    t.add_argument("--cbam", type=_on_off, default=True, metavar="{on,off}")
    t.add_argument("--task", choices=["multi", "hse", "lcz"], default="multi")
    t.add_argument("--patch", type=int, default=128)
    t.add_argument("--features", type=int, default=16)
    t.add_argument("--seed", type=int, default=0)

    pr = sub.add_parser("predict", parents=[common], help="predict HSE and LCZ maps for a scene")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--scene", required=True, help="scene directory or image .mtlt file")
    pr.add_argument("--out", required=True)
    pr.add_argument("--window", type=int, default=128)
    pr.add_argument("--overlap", type=int, default=32)

    e = sub.add_parser("evaluate", parents=[common], help="score predictions against a reference scene")
    e.add_argument("--pred", required=True, help="output directory of `predict`")
    e.add_argument("--ref", required=True, help="reference scene directory")
    e.add_argument("--penalty-matrix", help="17x17 CSV of WA credits")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--report", help="write the JSON report here")

    i = sub.add_parser("inspect", parents=[common], help="summarize a checkpoint or manifest")
    i.add_argument("path")
    return p


def cmd_synth(args) -> CommandResult:
    manifest = write_synthetic_dataset(
        args.out, seed=args.seed, scenes=args.scenes, size=args.size, bands=args.bands,
        urban_fraction=args.urban_fraction,
    )
    path = Path(args.out) / "manifest.json"
    return CommandResult(
        message=f"wrote {len(manifest.entries)} scenes and {path}",
        data={"manifest": str(path), "scenes": [e.scene_id for e in manifest.entries]},
    )


def cmd_train(args) -> CommandResult:
    manifest = DatasetManifest.load(args.manifest)
    bands = int(manifest.config.get("bands", 10))
    cfg = ModelConfig(
        bands=bands, patch_h=args.patch, patch_w=args.patch, base_features=args.features,
        p2f_enabled=args.p2f and args.task == "multi", cbam_enabled=args.cbam, task=args.task,
    ).validate()
    tc = TrainConfig(
        batch_size=args.batch_size, lr0=args.lr, lr_decay_factor=args.lr_decay_factor,
        lr_decay_every_epochs=args.lr_decay_every, patience=args.patience, max_epochs=args.epochs,
        seed=args.seed, weighting=Weighting(args.weighting),
    )
    train = manifest.load_patches("train", args.patch)
    val = manifest.load_patches("val", args.patch)
    model = MTLNet(cfg, seed=args.seed)
    result = fit(model, train, val, tc, out_dir=args.out)
    return CommandResult(
        message=(
            f"trained {result.stopped_epoch} epochs, best epoch {result.best_epoch} "
            f"(val loss {result.best_val:.5f}); checkpoint in {result.checkpoint}"
        ),
        data={
            "checkpoint": str(result.checkpoint),
            "history": str(Path(args.out) / "history.csv"),
            "best_epoch": result.best_epoch,
            "stopped_epoch": result.stopped_epoch,
            "best_val_loss": result.best_val,
        },
    )


def _scene_image(path: Path) -> np.ndarray:
    return mtlt.read(path / "image.mtlt" if path.is_dir() else path)


def cmd_predict(args) -> CommandResult:
    model, _ = load_checkpoint(args.checkpoint)
    image = _scene_image(Path(args.scene))
    hse, probs = sliding_window_predict(model, image, window=args.window, overlap=args.overlap)
    if hse is None or probs is None:
        raise UsageError("predict needs a multi-task checkpoint")
    lcz100 = aggregate_lcz(probs, block=int(round(model.cfg.lcz_gsd_m / model.cfg.input_gsd_m)))
    out = Path(args.out)
    paths = render_maps(hse, lcz100, out)
    mtlt.write(out / "lcz_probs.mtlt", probs)
    summary = {
        "hse_shape": list(hse.shape),
        "lcz_shape": list(lcz100.shape),
        "hse_gsd_m": model.cfg.hse_gsd_m,
        "lcz_gsd_m": model.cfg.lcz_gsd_m,
        "files": {k: str(v) for k, v in paths.items()},
    }
    (out / "prediction.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return CommandResult(
        message=f"HSE {hse.shape[0]}x{hse.shape[1]} @20 m, LCZ {lcz100.shape[0]}x{lcz100.shape[1]} @100 m -> {out}",
        data=summary,
    )


def evaluate_prediction(pred_dir, ref_dir, penalty: Optional[PenaltyMatrix] = None, threshold: float = 0.5) -> dict:
    pred_dir, ref_dir = Path(pred_dir), Path(ref_dir)
    hse_pred = mtlt.read(pred_dir / "hse.mtlt")
    lcz_pred = mtlt.read(pred_dir / "lcz.mtlt")
    hse_ref = mtlt.read(ref_dir / "hse.mtlt")
    lcz_ref = aggregate_labels(mtlt.read(ref_dir / "lcz.mtlt"))
    if hse_pred.shape != hse_ref.shape or lcz_pred.shape != lcz_ref.shape:
        raise FormatError(
            f"prediction grids {hse_pred.shape}/{lcz_pred.shape} do not match reference "
            f"{hse_ref.shape}/{lcz_ref.shape}", 0
        )
    cm = accumulate(ConfusionMatrix(NUM_LCZ_CLASSES), lcz_ref, lcz_pred, ignore=IGNORE)
    lcz = lcz_report(cm, penalty or default_lcz_penalty())
    hse = hse_report(hse_pred, hse_ref, threshold)
    return {
        "oa": lcz["oa"],
        "kappa": lcz["kappa"],
        "aa": lcz["aa"],
        "wa": lcz["wa"],
        "recall": hse["recall"],
        "f_score": hse["f_score"],
        "mae_percent": hse["mae_percent"],
        "per_class": lcz["per_class"],
        "lcz_confusion": cm.counts.tolist(),
        "hse_binary": {k: hse[k] for k in ("oa", "kappa", "aa", "recall", "f_score", "confusion")},
    }


def cmd_evaluate(args) -> CommandResult:
    penalty = PenaltyMatrix.from_csv(args.penalty_matrix) if args.penalty_matrix else None
    report = evaluate_prediction(args.pred, args.ref, penalty, args.threshold)
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2), encoding="utf-8")
    msg = (
        f"LCZ OA {report['oa']:.4f} kappa {report['kappa']:.4f} AA {report['aa']:.4f} WA {report['wa']:.4f}; "
        f"HSE MAE {report['mae_percent']:.2f}% recall {report['recall']:.4f} F {report['f_score']:.4f}"
    )
    return CommandResult(message=msg, data=report)


def cmd_inspect(args) -> CommandResult:
    path = Path(args.path)
    if path.is_dir() and (path / "manifest.json").exists() and (path / "tensors").is_dir():
        m = read_checkpoint_manifest(path)
        groups: dict = {}
        for entry in m["tensors"].values():
            if entry["kind"] == "parameter":
                groups[entry["group"]] = groups.get(entry["group"], 0) + int(np.prod(entry["dims"]))
        data = {"kind": "checkpoint", "epoch": m["epoch"], "config": m["config"], "parameters": groups}
        msg = f"checkpoint at epoch {m['epoch']}: " + ", ".join(f"{g}={n}" for g, n in groups.items())
        return CommandResult(message=msg, data=data)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = DatasetManifest.load(path)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    data = {"kind": "manifest", "config": manifest.config, "splits": counts}
    return CommandResult(message="manifest: " + ", ".join(f"{k}={v}" for k, v in counts.items()), data=data)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "inspect": cmd_inspect,
}


def run(argv=None) -> CommandResult:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return CommandResult(EXIT_VALIDATION, f"usage error: {exc}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get("MTL_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))
    try:
        result = COMMANDS[args.command](args)
    except (FormatError, OSError) as exc:
        result = CommandResult(EXIT_IO, f"io error: {exc}", {"error": str(exc)})
    except (UrbanMTLError, UsageError, ValueError) as exc:
        result = CommandResult(EXIT_VALIDATION, f"error: {exc}", {"error": str(exc)})
    result.data.setdefault("command", args.command)
    result.json_mode = args.json
    return result


def main(argv=None) -> int:
    try:
        result = run(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if result.json_mode:
        print(json.dumps({"exit_code": result.exit_code, **result.data}, indent=2, default=str))
    else:
        stream = sys.stdout if result.exit_code == EXIT_OK else sys.stderr
        print(result.message, file=stream)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
