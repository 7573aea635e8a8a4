"""Training: learning-rate schedule, Nesterov-Adam, early stopping, checkpoints and the fit loop."""
from __future__ import annotations

import copy
import csv
import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import mtlt
from .core import (
    ConfigError,
    EmptySplitError,
    FormatError,
    ModelConfig,
    NonFiniteGradError,
)
from .data import Patch, collate
from .losses import LossReport, lcz_cross_entropy, multitask_loss, weighted_mae
from .metrics import ConfusionMatrix, accumulate, density_mae, oa
from .model import PARAM_GROUPS, MTLNet, PriorSource, model_forward, param_group

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class Weighting(enum.Enum):
    LEARNED = "learned"
    FIXED_1_1 = "fixed"


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr0: float = 0.002
    lr_decay_factor: float = 0.25
    lr_decay_every_epochs: int = 2
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    weighting: Weighting = Weighting.LEARNED
    min_delta: float = 1e-6
    trainable_groups: tuple = PARAM_GROUPS
    monitor: str = "val_mt_loss"

    def __post_init__(self):
        if isinstance(self.weighting, str):
            self.weighting = Weighting(self.weighting)
        if self.batch_size < 1:
            raise ConfigError("batch_size >= 1")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("0 < lr_decay_factor <= 1")
        if self.lr_decay_every_epochs < 1:
            raise ConfigError("lr_decay_every_epochs >= 1")
        if self.patience < 1:
            raise ConfigError("patience >= 1")
        unknown = set(self.trainable_groups) - set(PARAM_GROUPS)
        if unknown:
            raise ConfigError(f"unknown parameter groups {sorted(unknown)}")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: ``lr0 * factor ** (epoch // every)`` for a 0-based epoch index."""
    if epoch < 0:
        raise ValueError("epoch >= 0")
    return cfg.lr0 * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every_epochs)


class NesterovAdam(torch.optim.Optimizer):
    """Adam with a Nesterov look-ahead on the first moment.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
    p <- p - lr * (b1 m_hat + (1-b1) g / (1-b1^t)) / (sqrt(v_hat) + eps)
    """

    def __init__(self, params, lr=0.002, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            b1, b2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["m"] = torch.zeros_like(p)
                    state["v"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, v = state["m"], state["v"]
                m.mul_(b1).add_(g, alpha=1 - b1)
                v.mul_(b2).addcmul_(g, g, value=1 - b2)
                m_hat = m / (1 - b1**t)
                v_hat = v / (1 - b2**t)
                direction = b1 * m_hat + (1 - b1) * g / (1 - b1**t)
                p.sub_(group["lr"] * direction / (v_hat.sqrt() + group["eps"]))
        return loss


class EarlyStopping:
    """Tracks the best monitored value.

    An epoch improves when ``value < best - min_delta``. Training stops on the
    first epoch that has had more than ``patience`` non-improving epochs since
    the best one.
    """

    def __init__(self, patience: int = 10, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch: Optional[int] = None
        self.wait = 0

    def update(self, epoch: int, value: float) -> tuple[bool, bool]:
        """Return (improved, stop)."""
        if value < self.best - self.min_delta:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return True, False
        self.wait += 1
        return False, self.wait > self.patience


def compute_loss(
    model: MTLNet,
    batch,
    train_mode: bool,
    prior_source: PriorSource = PriorSource.REFERENCE,
):
    """Forward a batch and return (objective tensor, LossReport)."""
    out = model_forward(model, batch, train_mode=train_mode, prior_source=prior_source)
    dtype = next(model.parameters()).dtype
    tw = model.task_weights
    nan = float("nan")
    l_hse = l_lcz = None
    if out.hse is not None:
        l_hse = weighted_mae(out.hse[:, 0], torch.as_tensor(batch.hse_ref, dtype=dtype))
    if out.lcz_avg is not None:
        l_lcz = lcz_cross_entropy(out.lcz_avg, torch.as_tensor(batch.lcz_ref))
    if l_hse is not None and l_lcz is not None:
        objective = multitask_loss(l_hse, l_lcz, tw.s_hse, tw.s_lcz)
    else:
        objective = l_hse if l_hse is not None else l_lcz
    report = LossReport(
        l_hse=l_hse.item() if l_hse is not None else nan,
        l_lcz=l_lcz.item() if l_lcz is not None else nan,
        l_mt=objective.item(),
        s_hse=tw.s_hse.item(),
        s_lcz=tw.s_lcz.item(),
    )
    return objective, report


def trainable_parameters(model: MTLNet, cfg: TrainConfig) -> list[tuple[str, torch.nn.Parameter]]:
    groups = set(cfg.trainable_groups)
    if cfg.weighting is Weighting.FIXED_1_1 or model.cfg.task != "multi":
        groups.discard("task_weights")
    return [(n, p) for n, p in sorted(model.named_parameters()) if param_group(n) in groups]


def _batches(patches: Sequence[Patch], batch_size: int, order=None):
    order = range(len(patches)) if order is None else order
    order = list(order)
    for i in range(0, len(order), batch_size):
        yield collate([patches[j] for j in order[i : i + batch_size]])


def validation_loss(model: MTLNet, patches: Sequence[Patch], batch_size: int) -> float:
    """Mean per-patch objective in eval mode at the current task weights."""
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in _batches(patches, batch_size):
            obj, _ = compute_loss(model, batch, train_mode=False, prior_source=PriorSource.REFERENCE)
            total += float(obj) * len(batch)
            count += len(batch)
    return total / count


@dataclass
class FitResult:
    history: list[dict]
    best_epoch: int
    best_val: float
    stopped_epoch: int
    checkpoint: Optional[Path] = None
    steps: list[dict] = field(default_factory=list)


HISTORY_FIELDS = ("epoch", "lr", "l_hse", "l_lcz", "l_mt", "val_l_mt", "s_hse", "s_lcz")
STEP_FIELDS = ("step",) + LossReport.CSV_FIELDS


def fit(
    model: MTLNet,
    train: Sequence[Patch],
    val: Sequence[Patch],
    cfg: TrainConfig,
    out_dir=None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> FitResult:
    """Train ``model`` in place and leave it holding the best-validation weights."""
    if not train:
        raise EmptySplitError("training split is empty")
    if not val:
        raise EmptySplitError("validation split is empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    params = trainable_parameters(model, cfg)
    trainable = {id(p) for _, p in params}
    for p in model.parameters():
        p.requires_grad_(id(p) in trainable)
    opt = NesterovAdam([p for _, p in params], lr=cfg.lr0)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    history, steps = [], []
    best_state = copy.deepcopy(model.state_dict())
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = lr_at_epoch(cfg, epoch - 1)
        for group in opt.param_groups:
            group["lr"] = lr
        sums = np.zeros(3)
        seen = 0
        for batch in _batches(train, cfg.batch_size, rng.permutation(len(train))):
            opt.zero_grad(set_to_none=True)
            objective, report = compute_loss(model, batch, train_mode=True, prior_source=PriorSource.REFERENCE)
            objective.backward()
            for name, p in params:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise NonFiniteGradError(f"non-finite gradient in {name}")
            opt.step()
            steps.append({"step": len(steps) + 1, **report.as_row()})
            sums += len(batch) * np.array([report.l_hse, report.l_lcz, report.l_mt])
            seen += len(batch)
        val_loss = validation_loss(model, val, cfg.batch_size)
        row = dict(
            zip(HISTORY_FIELDS, (epoch, lr, *(sums / seen), val_loss,
                                 model.task_weights.s_hse.item(), model.task_weights.s_lcz.item()))
        )
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.info("epoch %d lr %.3g train %.4f val %.4f", epoch, lr, row["l_mt"], val_loss)
        improved, stop = stopper.update(epoch, val_loss)
        if improved:
            best_state = copy.deepcopy(model.state_dict())
        if stop:
            break
    model.load_state_dict(best_state)
    for p in model.parameters():
        p.requires_grad_(True)
    result = FitResult(history, stopper.best_epoch or epoch, stopper.best, epoch, steps=steps)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint = save_checkpoint(model, out / "checkpoint", epoch=result.best_epoch)
        write_csv(out / "history.csv", HISTORY_FIELDS, history)
        write_csv(out / "steps.csv", STEP_FIELDS, steps)
    return result


def write_csv(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})


# --------------------------------------------------------------------------
# Checkpoints: one MTLT file per tensor plus a JSON manifest
# --------------------------------------------------------------------------


def save_checkpoint(model: MTLNet, directory, epoch: int = 0, extra: Optional[dict] = None) -> Path:
    d = Path(directory)
    (d / "tensors").mkdir(parents=True, exist_ok=True)
    params = {n for n, _ in model.named_parameters()}
    entries = {}
    for name, t in model.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        fname = f"tensors/{name}.mtlt"
        mtlt.write(d / fname, t.detach().cpu().float().numpy())
        entries[name] = {
            "file": fname,
            "group": param_group(name),
            "kind": "parameter" if name in params else "buffer",
            "dims": list(t.shape),
        }
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "epoch": epoch,
        "tensors": entries,
    }
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return d


def read_checkpoint_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint manifest is not valid JSON: {exc.msg}", exc.pos) from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {manifest.get('format_version')}", 0)
    return manifest


def load_checkpoint(directory) -> tuple[MTLNet, dict]:
    d = Path(directory)
    manifest = read_checkpoint_manifest(d)
    model = MTLNet(ModelConfig.from_dict(manifest["config"]), seed=None)
    state = model.state_dict()
    for name, entry in manifest["tensors"].items():
        if name not in state:
            raise FormatError(f"checkpoint tensor {name} not in model", 0)
        arr = mtlt.read(d / entry["file"])
        if list(arr.shape) != list(state[name].shape):
            raise FormatError(f"{name}: stored dims {arr.shape} vs model {tuple(state[name].shape)}", 7)
        state[name] = torch.from_numpy(arr).to(state[name].dtype)
    model.load_state_dict(state)
    model.eval()
    return model, manifest


# --------------------------------------------------------------------------
# Patch-level evaluation
# --------------------------------------------------------------------------


def evaluate_patches(model: MTLNet, patches: Sequence[Patch], batch_size: int = 8) -> dict:
    """HSE MAE (percent) and pixel-level LCZ OA at 10 m, test-time prior from the HSE branch."""
    abs_err, n_hse = 0.0, 0
    cm = ConfusionMatrix(model.cfg.num_classes)
    with torch.no_grad():
        for batch in _batches(patches, batch_size):
            out = model_forward(model, batch, train_mode=False, prior_source=PriorSource.PREDICTION)
            if out.hse is not None:
                pred = out.hse[:, 0].double().numpy()
                abs_err += density_mae(pred, batch.hse_ref) * pred.size
                n_hse += pred.size
            if out.lcz_avg is not None:
                cm = accumulate(cm, batch.lcz_ref, out.lcz_avg.argmax(dim=1).numpy())
    return {
        "mae_percent": abs_err / n_hse if n_hse else None,
        "lcz_oa": oa(cm) if cm.total else None,
        "confusion": cm,
    }
