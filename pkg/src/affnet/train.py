"""Loss, Adam, the training loop, evaluation, leave-one-person-out and ablations."""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, batch_order, collate
from .errors import ContractError, NonFiniteError
from .geometry import Calibration, angular_error_deg, point_to_direction
from .model import VARIANTS, ModelConfig, ModelParams, build, forward, make_variant
from .tensor import Tensor


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Smooth L1 (transition at 1) summed over coordinates, averaged over the batch."""
    if pred.shape != target.shape:
        raise ContractError(f"smooth_l1: pred {pred.shape} vs target {target.shape}")
    d = pred.data - target.data.astype(pred.dtype, copy=False)
    ad = np.abs(d)
    per = np.where(ad < 1, 0.5 * d * d, ad - 0.5)
    n = pred.shape[0]
    loss = np.asarray(per.sum() / n, dtype=pred.dtype)

    def bw(g):
        grad = np.clip(d, -1, 1) * (g.reshape(-1)[0] / n)
        T.accumulate(pred, grad)
        T.accumulate(target, -grad)

    return T.make_node(loss, (pred, target), bw, "smooth_l1")


# optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, ModelParams):
        return list(params.tensors.items())
    if isinstance(params, dict):
        return list(params.items())
    return [(str(i), p) for i, p in enumerate(params)]


def adam_step(params, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    named = _named(params)
    for name, p in named:
        if p.grad is None:
            raise ContractError(f"adam_step: parameter '{name}' has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in named:
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype, copy=False)
    return state


# records --------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    epochs: int = 12
    lr_initial: float = 1e-3
    lr_after: float = 1e-4
    drop_epoch: int = 8
    batch_size: int = 256
    augment: bool = True
    max_shift_px: int = 30
    dtype: str = "float32"
    eval_every: int = 0
    target_error_cm: float | None = None

    def __post_init__(self):
        if self.drop_epoch > self.epochs and self.epochs > 0:
            raise ContractError("drop_epoch must not exceed epochs")

    def lr(self, epoch: int) -> float:
        return self.lr_initial if epoch < self.drop_epoch else self.lr_after

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        return cls(**d)


@dataclass
class TrainLog:
    seed: int
    config_hash: str
    epochs: list = field(default_factory=list)
    wall_time_s: list = field(default_factory=list)
    stopped_early: bool = False

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "meta", "seed": self.seed, "config_hash": self.config_hash,
                             "stopped_early": self.stopped_early}, sort_keys=True)]
        lines += [json.dumps({"kind": "epoch", **e}, sort_keys=True) for e in self.epochs]
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path

    @property
    def losses(self) -> list[float]:
        return [e["mean_loss"] for e in self.epochs]


@dataclass
class EvalReport:
    errors_cm: list
    labels_cm: list
    preds_cm: list
    face_width_px: list
    frame_short_px: list
    subject_ids: list
    angular_errors_deg: list | None = None

    def __len__(self):
        return len(self.errors_cm)

    @property
    def mean_cm(self) -> float:
        return float(np.mean(self.errors_cm)) if self.errors_cm else float("nan")

    @property
    def median_cm(self) -> float:
        return float(np.median(self.errors_cm)) if self.errors_cm else float("nan")

    def per_subject_mean_cm(self) -> dict[str, float]:
        groups: dict[str, list[float]] = {}
        for s, e in zip(self.subject_ids, self.errors_cm):
            groups.setdefault(s, []).append(e)
        return {s: math.fsum(v) / len(v) for s, v in sorted(groups.items())}

    def summary(self) -> dict:
        d = {"n": len(self), "mean_error_cm": self.mean_cm, "median_error_cm": self.median_cm,
             "per_subject_mean_cm": self.per_subject_mean_cm()}
        per = list(d["per_subject_mean_cm"].values())
        d["mean_of_subject_means_cm"] = float(np.mean(per)) if per else float("nan")
        if self.angular_errors_deg is not None:
            d["mean_angular_error_deg"] = float(np.mean(self.angular_errors_deg))
            d["median_angular_error_deg"] = float(np.median(self.angular_errors_deg))
        return d

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "summary", **self.summary()}, sort_keys=True)]
        for i in range(len(self)):
            row = {"kind": "sample", "index": i, "subject_id": self.subject_ids[i],
                   "label_cm": self.labels_cm[i], "pred_cm": self.preds_cm[i],
                   "error_cm": self.errors_cm[i], "face_width_px": self.face_width_px[i],
                   "frame_short_px": self.frame_short_px[i]}
            if self.angular_errors_deg is not None:
                row["angular_error_deg"] = self.angular_errors_deg[i]
            lines.append(json.dumps(row, sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        rows = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    obj = json.loads(line)
                    if obj.get("kind") == "sample":
                        rows.append(obj)
        rows.sort(key=lambda r: r["index"])
        has_ang = bool(rows) and all("angular_error_deg" in r for r in rows)
        return cls(
            errors_cm=[r["error_cm"] for r in rows], labels_cm=[r["label_cm"] for r in rows],
            preds_cm=[r["pred_cm"] for r in rows], face_width_px=[r["face_width_px"] for r in rows],
            frame_short_px=[r["frame_short_px"] for r in rows], subject_ids=[r["subject_id"] for r in rows],
            angular_errors_deg=[r["angular_error_deg"] for r in rows] if has_ang else None,
        )


# training -------------------------------------------------------------------

def config_hash(config: ModelConfig, schedule: Schedule) -> str:
    blob = json.dumps({"model": config.to_dict(), "schedule": schedule.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, 0x5EED]).generate_state(1)[0])


def predict(params: ModelParams, dataset: Dataset, indices=None, batch_size: int = 64) -> np.ndarray:
    cfg = params.config
    dataset = dataset.sized(cfg.face_size, cfg.eye_size)
    indices = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    dtype = next(iter(params.tensors.values())).dtype
    out = []
    with T.no_grad():
        for lo in range(0, len(indices), batch_size):
            batch = collate(dataset.samples(indices[lo:lo + batch_size]), dtype)
            out.append(forward(params, batch).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, 2))


def dataset_loss(params: ModelParams, dataset: Dataset, batch_size: int = 64) -> float:
    """Mean smooth-L1 of clean (unaugmented) samples."""
    pred = predict(params, dataset, batch_size=batch_size)
    labels = np.array([r.label_cm for r in dataset.records], dtype=np.float64)
    return float(smooth_l1(Tensor(pred), Tensor(labels)).item())


def train(config: ModelConfig, dataset: Dataset, schedule: Schedule, seed: int,
          eval_dataset: Dataset | None = None,
          progress: Callable[[dict], None] | None = None) -> tuple[ModelParams, TrainLog]:
    """Train from a fresh ``build(config, seed)``; fully deterministic in ``seed``."""
    if len(dataset) == 0:
        raise ContractError("train: empty dataset")
    dtype = np.dtype(schedule.dtype)
    dataset = dataset.sized(config.face_size, config.eye_size)
    if eval_dataset is not None:
        eval_dataset = eval_dataset.sized(config.face_size, config.eye_size)
    params = build(config, seed).to(dtype)
    log = TrainLog(seed=seed, config_hash=config_hash(config, schedule))
    state = AdamState()
    dataset.max_shift = schedule.max_shift_px
    for epoch in range(schedule.epochs):
        start = time.perf_counter()
        lr = schedule.lr(epoch)
        loss_sum, err_sum, count = 0.0, 0.0, 0
        for b, idx in enumerate(batch_order(len(dataset), schedule.batch_size, _epoch_seed(seed, epoch))):
            batch = collate(dataset.samples(idx, schedule.augment, seed, epoch), dtype)
            params.zero_grad()
            pred = forward(params, batch)
            loss = smooth_l1(pred, batch.labels)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}", op="smooth_l1")
            T.backward(loss, leaves=list(params.tensors.values()))
            adam_step(params, state, lr)
            n = len(idx)
            loss_sum += value * n
            err_sum += float(np.linalg.norm(pred.data.astype(np.float64) - batch.labels.data, axis=1).sum())
            count += n
        entry = {"epoch": epoch + 1, "lr": lr, "mean_loss": loss_sum / count,
                 "train_error_cm": err_sum / count, "eval_error_cm": None}
        last = epoch == schedule.epochs - 1
        if schedule.eval_every and ((epoch + 1) % schedule.eval_every == 0 or last):
            entry["eval_error_cm"] = evaluate(params, eval_dataset or dataset).mean_cm
        log.epochs.append(entry)
        log.wall_time_s.append(time.perf_counter() - start)
        if progress is not None:
            progress(entry)
        target = schedule.target_error_cm
        if target is not None and entry["eval_error_cm"] is not None and entry["eval_error_cm"] < target and not last:
            log.stopped_early = True
            break
    return params, log


def evaluate(params: ModelParams, dataset: Dataset, batch_size: int = 64) -> EvalReport:
    """Per-sample Euclidean error on clean samples."""
    dataset = dataset.sized(params.config.face_size, params.config.eye_size)
    pred = predict(params, dataset, batch_size=batch_size)
    samples = dataset.samples(range(len(dataset)))
    labels = np.array([s.label_cm for s in samples], dtype=np.float64).reshape(-1, 2)
    errors = np.linalg.norm(pred - labels, axis=1)
    return EvalReport(
        errors_cm=[float(e) for e in errors], labels_cm=labels.tolist(), preds_cm=pred.tolist(),
        face_width_px=[s.face_width_px for s in samples], frame_short_px=[int(s.frame_short_px) for s in samples],
        subject_ids=[s.subject_id for s in samples],
    )


def angular_evaluate(report: EvalReport, calib: Calibration, origin_cm) -> EvalReport:
    angles = [angular_error_deg(point_to_direction(p, calib, origin_cm), point_to_direction(l, calib, origin_cm))
              for p, l in zip(report.preds_cm, report.labels_cm)]
    return EvalReport(report.errors_cm, report.labels_cm, report.preds_cm, report.face_width_px,
                      report.frame_short_px, report.subject_ids, angles)


@dataclass
class LopoResult:
    reports: dict
    train_indices: dict
    mean_cm: float

    def summary(self) -> dict:
        return {"per_subject_mean_cm": {s: r.mean_cm for s, r in self.reports.items()}, "mean_cm": self.mean_cm}


def lopo_evaluate(dataset: Dataset, config: ModelConfig, schedule: Schedule, seed: int) -> LopoResult:
    """Leave-one-person-out: one training run per held-out subject."""
    subjects = sorted({r.subject_id for r in dataset.records})
    if len(subjects) < 2:
        raise ContractError("lopo_evaluate needs at least two subjects")
    reports, folds = {}, {}
    for s in subjects:
        train_idx = [i for i, r in enumerate(dataset.records) if r.subject_id != s]
        test_idx = [i for i, r in enumerate(dataset.records) if r.subject_id == s]
        params, _ = train(config, dataset.subset(train_idx), schedule, seed)
        reports[s] = evaluate(params, dataset.subset(test_idx))
        folds[s] = train_idx
    return LopoResult(reports, folds, float(np.mean([r.mean_cm for r in reports.values()])))


def ablation_suite(dataset: Dataset, schedule: Schedule, seed: int, config: ModelConfig | None = None,
                   eval_dataset: Dataset | None = None, variants: Sequence[str] = VARIANTS):
    """Train every variant with identical seed, data order and augmentation stream.

    Returns (rows, logs); each row holds the variant, parameter count,
    clean-set loss before and after training, and mean error.
    """
    base = config or ModelConfig()
    rows, logs = [], {}
    for variant in variants:
        cfg = make_variant(base, variant)
        initial = dataset_loss(build(cfg, seed).to(np.dtype(schedule.dtype)), dataset)
        params, log = train(cfg, dataset, schedule, seed)
        final = dataset_loss(params, dataset)
        report = evaluate(params, eval_dataset or dataset)
        rows.append({"variant": variant, "param_count": params.count(), "initial_loss": initial,
                     "final_loss": final, "loss_ratio": final / initial, "mean_error_cm": report.mean_cm})
        logs[variant] = log
    return rows, logs


def ablation_csv(rows) -> str:
    out = ["variant,param_count,initial_loss,final_loss,loss_ratio,mean_error_cm"]
    for r in rows:
        out.append(f"{r['variant']},{r['param_count']},{r['initial_loss']!r},{r['final_loss']!r},"
                   f"{r['loss_ratio']!r},{r['mean_error_cm']!r}")
    return "\n".join(out) + "\n"
