"""Adam optimization, the epoch loop with best-checkpoint selection, and
checkpoint persistence.

Early stopping is realized as best-checkpoint selection over the epoch
budget: after every epoch the model is scored on the validation split and
the checkpoint with the highest macro F1 (earliest epoch on ties) is kept.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LoadedSample
from .losses import combined_loss
from .metrics import EvalReport, evaluate_predictions, mae_volumes
from .model import UPetModel, build_model, config_fingerprint, config_from_dict, config_to_dict
from .tensor import ComputationRecord, Tensor


class TrainingDivergedError(RuntimeError):
    """Raised when a non-finite loss appears; carries the offending batch."""


class CheckpointFormatError(ValueError):
    """Corrupt container: bad magic, unparseable or inconsistent index."""


class CheckpointShapeError(ValueError):
    """Index and payload disagree about an array's shape or size."""


class CheckpointFingerprintError(ValueError):
    """Checkpoint belongs to a differently configured model."""


@dataclass
class AdamState:
    """First/second moment buffers mirroring the parameters, plus the step

    count and hyperparameters.  The update applies bias correction and adds
    eps * sqrt(1 - beta2^t) to the corrected second-moment root, so the very
    first step has magnitude lr * |g| / (|g| + eps * sqrt(1 - beta2)).
    """

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_parameters(cls, params: dict[str, Tensor], lr: float = 0.001) -> "AdamState":
        state = cls(lr=lr)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state

    def copy(self) -> "AdamState":
        return AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                         t=self.t, m={k: a.copy() for k, a in self.m.items()},
                         v={k: a.copy() for k, a in self.v.items()})


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One in-place Adam update; every parameter must carry a gradient."""
    if not params:
        raise ValueError("adam_step needs at least one parameter")
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"missing gradient for parameter {name!r}")
    dt = next(iter(params.values())).dtype
    state.t += 1
    t = state.t
    b1, b2 = dt(state.beta1), dt(state.beta2)
    bc1 = dt(1.0 - state.beta1 ** t)
    bc2 = dt(1.0 - state.beta2 ** t)
    eps_t = dt(state.eps * np.sqrt(1.0 - state.beta2 ** t))
    lr = dt(state.lr)
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps_t)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 4
    lr: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class Checkpoint:
    """Best-epoch snapshot: parameters, optimizer state, metrics, identity."""

    params: dict[str, np.ndarray]
    adam: AdamState
    epoch: int
    metrics: EvalReport
    fingerprint: str
    model_config: dict
    model_seed: int

    def rebuild_model(self) -> UPetModel:
        model = build_model(config_from_dict(self.model_config), seed=self.model_seed)
        model.load_arrays(self.params)
        return model

    def apply_to(self, model: UPetModel) -> None:
        if config_fingerprint(model.config) != self.fingerprint:
            raise CheckpointFingerprintError(
                "checkpoint fingerprint does not match the model configuration")
        model.load_arrays(self.params)


_MAGIC = b"UPETCKP1"


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Container layout: magic, u64 header length, JSON index, f32le payload."""
    arrays: list[tuple[str, str, np.ndarray]] = []
    for name, arr in ckpt.params.items():
        arrays.append((name, "param", arr))
    for name, arr in ckpt.adam.m.items():
        arrays.append((name, "adam_m", arr))
    for name, arr in ckpt.adam.v.items():
        arrays.append((name, "adam_v", arr))

    index = []
    offset = 0
    blobs = []
    for name, kind, arr in arrays:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "kind": kind, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)

    m = ckpt.metrics
    header = {
        "fingerprint": ckpt.fingerprint,
        "model_config": ckpt.model_config,
        "model_seed": ckpt.model_seed,
        "epoch": ckpt.epoch,
        "metrics": {
            "accuracy": m.accuracy, "f1_macro": m.f1_macro, "auc_cn": m.auc_cn,
            "auc_ad": m.auc_ad, "auc_mci": m.auc_mci, "mae": m.mae,
            "confusion": m.confusion, "n_samples": m.n_samples, "n_paired": m.n_paired,
        },
        "adam": {"lr": ckpt.adam.lr, "beta1": ckpt.adam.beta1,
                 "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps, "t": ckpt.adam.t},
        "arrays": index,
    }
    head = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:8] != _MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint container")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt index: {exc}") from None
    payload = raw[16 + hlen:]

    params: dict[str, np.ndarray] = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for ent in header.get("arrays", []):
        shape = tuple(int(s) for s in ent["shape"])
        nbytes = int(ent["nbytes"])
        if nbytes != int(np.prod(shape)) * 4:
            raise CheckpointShapeError(
                f"{path}: array {ent['name']!r} shape {shape} inconsistent with {nbytes} bytes")
        off = int(ent["offset"])
        if off + nbytes > len(payload):
            raise CheckpointShapeError(f"{path}: payload truncated at array {ent['name']!r}")
        arr = np.frombuffer(payload[off:off + nbytes], dtype="<f4").reshape(shape).copy()
        {"param": params, "adam_m": m, "adam_v": v}[ent["kind"]][ent["name"]] = arr

    met = header["metrics"]
    metrics = EvalReport(
        accuracy=met["accuracy"], f1_macro=met["f1_macro"], auc_cn=met["auc_cn"],
        auc_ad=met["auc_ad"], auc_mci=met["auc_mci"], mae=met["mae"],
        confusion=met["confusion"], n_samples=met["n_samples"], n_paired=met["n_paired"])
    adam = AdamState(lr=header["adam"]["lr"], beta1=header["adam"]["beta1"],
                     beta2=header["adam"]["beta2"], eps=header["adam"]["eps"],
                     t=header["adam"]["t"], m=m, v=v)
    return Checkpoint(params=params, adam=adam, epoch=int(header["epoch"]),
                      metrics=metrics, fingerprint=header["fingerprint"],
                      model_config=header["model_config"],
                      model_seed=int(header["model_seed"]))


@dataclass
class EpochRecord:
    epoch: int
    ce: float
    l1_main: float
    l1_aux_sum: float
    total: float
    val_accuracy: float
    val_f1_macro: float
    val_auc_cn: float | None
    val_auc_ad: float | None
    val_auc_mci: float | None
    val_mae: float | None


EPOCH_LOG_HEADER = ["epoch", "ce", "l1_main", "l1_aux_sum", "total", "val_accuracy",
                    "val_f1_macro", "val_auc_cn", "val_auc_ad", "val_auc_mci", "val_mae"]


def write_epoch_log(records: list[EpochRecord], path) -> None:
    def cell(v):
        return "" if v is None else repr(v)

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPOCH_LOG_HEADER)
        for r in records:
            writer.writerow([r.epoch, cell(r.ce), cell(r.l1_main), cell(r.l1_aux_sum),
                             cell(r.total), cell(r.val_accuracy), cell(r.val_f1_macro),
                             cell(r.val_auc_cn), cell(r.val_auc_ad), cell(r.val_auc_mci),
                             cell(r.val_mae)])


def _batch_tensors(samples: list[LoadedSample], dtype):
    mri = Tensor(np.stack([s.mri for s in samples]), dtype=dtype)
    labels = np.array([s.label for s in samples], dtype=np.intp)
    mask = np.array([s.pet is not None for s in samples], dtype=bool)
    pet = None
    if mask.any():
        spatial = samples[0].mri.shape
        stacked = np.stack([s.pet if s.pet is not None else np.zeros(spatial, np.float32)
                            for s in samples])
        pet = Tensor(stacked, dtype=dtype)
    return mri, labels, pet, mask


def evaluate_model(model: UPetModel, samples: list[LoadedSample],
                   batch_size: int = 4) -> EvalReport:
    """Score a split: argmax predictions, per-class probabilities, and the
    per-volume MAE over paired samples."""
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    preds: list[int] = []
    labels: list[int] = []
    probs: list[np.ndarray] = []
    maes: list[float] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        mri, lab, _, _ = _batch_tensors(chunk, model.dtype)
        out = model.forward(mri)
        p = model.class_probabilities(out)
        probs.append(p)
        preds.extend(int(i) for i in p.argmax(axis=1))
        labels.extend(int(i) for i in lab)
        if out.pet_pred is not None:
            for row, s in enumerate(chunk):
                if s.pet is not None:
                    maes.append(mae_volumes(out.pet_pred.data[row, 0], s.pet[0]))
    return evaluate_predictions(preds, labels, np.concatenate(probs, axis=0), maes)


@dataclass
class TrainResult:
    best: Checkpoint
    log: list[EpochRecord]


def train(model: UPetModel, train_samples: list[LoadedSample],
          val_samples: list[LoadedSample], cfg: TrainConfig) -> TrainResult:
    """Seeded epoch loop; returns the highest-validation-F1 checkpoint
    (earliest epoch on ties) and the per-epoch log."""
    if not train_samples:
        raise ValueError("training split is empty")
    if not val_samples:
        raise ValueError("validation split is empty")

    params = model.parameters()
    state = AdamState.for_parameters(params, lr=cfg.lr)
    fingerprint = config_fingerprint(model.config)

    log: list[EpochRecord] = []
    best: Checkpoint | None = None
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_samples))
        sums = {"ce": 0.0, "l1_main": 0.0, "l1_aux_sum": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_samples[i] for i in order[start:start + cfg.batch_size]]
            mri, labels, pet, mask = _batch_tensors(chunk, model.dtype)
            with ComputationRecord():
                out = model.forward(mri)
                breakdown = combined_loss(out, labels, pet, mask, model.config)
                if not np.isfinite(breakdown.total):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {n_batches}")
                for p in params.values():
                    p.zero_grad()
                breakdown.total_tensor.backward()
            adam_step(params, state)
            sums["ce"] += breakdown.ce
            sums["l1_main"] += breakdown.l1_main
            sums["l1_aux_sum"] += sum(breakdown.l1_aux)
            sums["total"] += breakdown.total
            n_batches += 1

        report = evaluate_model(model, val_samples, batch_size=cfg.batch_size)
        record = EpochRecord(
            epoch=epoch,
            ce=sums["ce"] / n_batches,
            l1_main=sums["l1_main"] / n_batches,
            l1_aux_sum=sums["l1_aux_sum"] / n_batches,
            total=sums["total"] / n_batches,
            val_accuracy=report.accuracy,
            val_f1_macro=report.f1_macro,
            val_auc_cn=report.auc_cn,
            val_auc_ad=report.auc_ad,
            val_auc_mci=report.auc_mci,
            val_mae=report.mae,
        )
        log.append(record)
        if best is None or report.f1_macro > best.metrics.f1_macro:
            best = Checkpoint(params=model.export_arrays(), adam=state.copy(),
                              epoch=epoch, metrics=report, fingerprint=fingerprint,
                              model_config=config_to_dict(model.config),
                              model_seed=model.seed)
    return TrainResult(best=best, log=log)
