"""The combined density + NDloss objective, training loop, metrics and checkpoints."""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .density import Scene, render_density
from .errors import ConfigError, FormatError, NumericalError
from .model import CountingModel, ModelConfig
from .ndloss import nd_loss, nd_loss_backward, uniformity_report
from .ops import mse_density_loss, mse_density_loss_backward
from .optim import Param, ParameterStore, adam_step
from .tensor import read_tensor, write_tensor

CHECKPOINT_MAGIC = b"NDCK1\n"
CHECKPOINT_VERSION = 1
VAL_FRACTION = 0.2


class CheckpointError(FormatError):
    """A checkpoint file is corrupt or from an unsupported version."""


@dataclass
class TrainConfig:
    lam: float = 1e-3
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 50
    seed: int = 0
    eval_interval: int = 20
    steps: int | None = None  # overrides epochs when set
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be at least 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be nonnegative, got {self.lr}")
        if self.epochs < 0 or (self.steps is not None and self.steps < 0):
            raise ConfigError("epochs and steps must be nonnegative")
        if self.eval_interval < 1:
            raise ConfigError(f"eval interval must be at least 1, got {self.eval_interval}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        obj["lam"] = obj.pop("lambda")
        return cls(**obj)


@dataclass
class EvalMetrics:
    mae: float
    mse: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossTerms:
    l_den: float
    l_nd: float
    total: float


@dataclass
class TrainState:
    """Everything besides parameters needed to resume a run bit-exactly."""

    step: int = 0
    acc_den: float = 0.0
    acc_nd: float = 0.0
    acc_n: int = 0


@dataclass
class TrainResult:
    model: CountingModel
    log: list[dict]
    state: TrainState = field(default_factory=TrainState)


def nd_weight(model_cfg: ModelConfig, lam: float) -> float:
    """Effective NDloss weight: plain DConv never uses the regularizer."""
    return lam if model_cfg.final in ("ndconv", "ndconv-corner") else 0.0


def total_loss(pred, target, offsets, lam: float, geometry, corner_variant: bool = False) -> float:
    """Density loss plus ``lam`` times NDloss (plain models pass ``offsets=None``)."""
    if lam < 0:
        raise ConfigError(f"lambda must be nonnegative, got {lam}")
    l_den, _ = mse_density_loss(pred, target)
    if offsets is None:
        return l_den
    l_nd, _ = nd_loss(offsets, geometry, corner_variant)
    return l_den + lam * l_nd


def loss_and_grads(model: CountingModel, x, target, lam: float):
    """Forward, objective, backward; gradients land in ``model.params``."""
    cfg = model.config
    pred, offsets, cache = model.forward(x)
    l_den, node = mse_density_loss(pred, target)
    grad_pred = mse_density_loss_backward(node)
    l_nd = 0.0
    grad_off = None
    if offsets is not None:
        corner = cfg.final == "ndconv-corner"
        l_nd, _ = nd_loss(offsets, cfg.geometry, corner)
        if lam > 0:
            grad_off = nd_loss_backward(offsets, cfg.geometry, corner, grad=lam)
    model.backward(cache, grad_pred, grad_off)
    return LossTerms(l_den, l_nd, l_den + lam * l_nd)


def split_dataset(scenes: list) -> tuple[list, list]:
    """Train on the first 80% by index, hold out the rest."""
    n_val = int(round(VAL_FRACTION * len(scenes)))
    if n_val == 0 or n_val == len(scenes):
        return list(scenes), []
    return list(scenes[:-n_val]), list(scenes[-n_val:])


def _stack(scenes: list[Scene], dtype):
    x = np.concatenate([s.image for s in scenes]).astype(dtype, copy=False)
    y = np.stack([render_density(s.annotation) for s in scenes])[:, None].astype(dtype)
    return x, y


def _forward_all(model: CountingModel, scenes: list[Scene], batch: int = 8):
    preds, offs = [], []
    for i in range(0, len(scenes), batch):
        x = np.concatenate([s.image for s in scenes[i : i + batch]])
        out, off = model.predict(x)
        preds.append(out)
        if off is not None:
            offs.append(off)
    return np.concatenate(preds), (np.concatenate(offs) if offs else None)


def count_metrics(pred_counts, true_counts) -> EvalMetrics:
    """MAE and root-mean-square count error."""
    err = [float(p) - float(t) for p, t in zip(pred_counts, true_counts)]
    n = len(err)
    if n == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    mae = math.fsum(abs(e) for e in err) / n
    mse = math.sqrt(math.fsum(e * e for e in err) / n)
    return EvalMetrics(mae, mse, n)


def evaluate(model: CountingModel, scenes: list[Scene], return_offsets: bool = False):
    preds, offsets = _forward_all(model, scenes)
    counts = [math.fsum(p.astype(np.float64).ravel()) for p in preds]
    metrics = count_metrics(counts, [s.annotation.count for s in scenes])
    if return_offsets:
        return metrics, offsets
    return metrics


def epoch_batches(n_train: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, epoch]).permutation(n_train)
    return [perm[i : i + batch_size] for i in range(0, n_train, batch_size)]


def train(model: CountingModel, scenes: list[Scene], cfg: TrainConfig, state: TrainState | None = None,
          on_log: Callable[[dict], None] | None = None, checkpoint_path=None) -> TrainResult:
    """Run Adam on the combined objective.

    Logs every ``eval_interval`` steps and at the final step. ``state`` resumes
    a run saved by :func:`checkpoint_save`. With ``checkpoint_path`` a
    checkpoint is written at every log point, so an aborted run leaves the
    last good one on disk.
    """
    cfg.validate()
    if not scenes:
        raise ConfigError("cannot train on an empty dataset")
    state = TrainState(**asdict(state)) if state is not None else TrainState()
    train_set, val_set = split_dataset(scenes)
    dtype = model.params.value("final.weight").dtype
    x_all, y_all = _stack(train_set, dtype)
    per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch
    lam = nd_weight(model.config, cfg.lam)
    log: list[dict] = []
    model.params.zero_grad()

    batches, batches_epoch = None, -1
    while state.step < total_steps:
        epoch, pos = divmod(state.step, per_epoch)
        if epoch != batches_epoch:
            batches, batches_epoch = epoch_batches(len(train_set), cfg.batch_size, cfg.seed, epoch), epoch
        idx = batches[pos]
        terms = loss_and_grads(model, x_all[idx], y_all[idx], lam)
        if not (math.isfinite(terms.l_den) and math.isfinite(terms.l_nd)):
            model.params.zero_grad()
            raise NumericalError(f"non-finite loss at step {state.step + 1} "
                                 f"(l_den={terms.l_den}, l_nd={terms.l_nd})")
        try:
            adam_step(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        except NumericalError as exc:
            raise NumericalError(f"step {state.step + 1}: {exc}") from None
        state.step += 1
        state.acc_den += terms.l_den
        state.acc_nd += terms.l_nd
        state.acc_n += 1
        if state.step % cfg.eval_interval == 0 or state.step == total_steps:
            entry = _log_entry(model, val_set, state, lam, epoch)
            state.acc_den = state.acc_nd = 0.0
            state.acc_n = 0
            log.append(entry)
            if on_log is not None:
                on_log(entry)
            if checkpoint_path is not None:
                checkpoint_save(checkpoint_path, model, cfg, state)
    return TrainResult(model, log, state)


def _log_entry(model, val_set, state: TrainState, lam: float, epoch: int) -> dict:
    l_den = state.acc_den / state.acc_n
    l_nd = state.acc_nd / state.acc_n
    entry = {"step": state.step, "epoch": epoch, "l_den": l_den, "l_nd": l_nd,
             "l_nd_weighted": lam * l_nd, "mae": None, "mse": None, "residual": None}
    if val_set:
        metrics, offsets = evaluate(model, val_set, return_offsets=True)
        entry["mae"], entry["mse"] = metrics.mae, metrics.mse
        if offsets is not None:
            entry["residual"] = uniformity_report(offsets, model.geometry).mean_residual
    return entry


def _pack(arr: np.ndarray) -> np.ndarray:
    return arr.reshape((1,) * (4 - arr.ndim) + arr.shape) if arr.ndim <= 4 else arr


def checkpoint_save(path, model: CountingModel, train_cfg: TrainConfig | None = None,
                    state: TrainState | None = None, extra: dict | None = None) -> None:
    """Write magic, one JSON header line, then every tensor in header order."""
    entries, blobs = [], []
    for name, p in model.params.items():
        for kind in ("value", "m", "v"):
            arr = getattr(p, kind)
            entries.append({"name": name, "kind": kind, "shape": list(arr.shape)})
            blobs.append(_pack(arr))
    header = {
        "v": CHECKPOINT_VERSION,
        "model": model.config.to_json(),
        "train": train_cfg.to_json() if train_cfg is not None else None,
        "state": asdict(state) if state is not None else asdict(TrainState()),
        "param_steps": {name: p.step for name, p in model.params.items()},
        "dtype": str(model.params.value("final.weight").dtype),
        "tensors": entries,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
    for blob in blobs:
        write_tensor(buf, blob)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


@dataclass
class Checkpoint:
    model: CountingModel
    train: TrainConfig | None
    state: TrainState
    extra: dict


def checkpoint_load(path) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(path, 0, "bad magic bytes; not an NDCK1 checkpoint")
    stream = io.BytesIO(data)
    stream.seek(len(CHECKPOINT_MAGIC))
    line = stream.readline()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(path, len(CHECKPOINT_MAGIC), f"corrupt header: {exc}") from None
    if header.get("v") != CHECKPOINT_VERSION:
        raise CheckpointError(path, len(CHECKPOINT_MAGIC),
                              f"unsupported checkpoint version {header.get('v')!r} (expected {CHECKPOINT_VERSION})")
    try:
        cfg = ModelConfig.from_json(header["model"])
        train_cfg = TrainConfig.from_json(header["train"]) if header["train"] else None
        state = TrainState(**header["state"])
        dtype = np.dtype(header["dtype"])
        entries = header["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(path, len(CHECKPOINT_MAGIC), f"bad header field: {exc}") from None
    arrays: dict[str, dict[str, np.ndarray]] = {}
    for entry in entries:
        try:
            t = read_tensor(stream, path=path)
        except FormatError as exc:
            raise CheckpointError(path, exc.offset, exc.message) from None
        arrays.setdefault(entry["name"], {})[entry["kind"]] = t.reshape(entry["shape"]).astype(dtype)
    if stream.tell() != len(data):
        raise CheckpointError(path, stream.tell(), "trailing bytes after last tensor")
    store = ParameterStore()
    for name, parts in arrays.items():
        value = parts["value"]
        store.restore(name, Param(value, np.zeros_like(value), parts["m"], parts["v"],
                                    int(header["param_steps"][name])))
    return Checkpoint(CountingModel(cfg, store), train_cfg, state, header.get("extra", {}))
