"""Training loop: cross-entropy, Adam, epoch bookkeeping, checkpoints.

Defaults follow the training recipe exactly: Adam at lr 1e-4, batch size
32, 50 epochs, weight decay 1e-4, cross-entropy on the fused ensemble
output.  Weight decay is classical L2-in-gradient (added to the raw
gradient before the moment updates) and is applied uniformly to every
parameter, batch-norm affines included.

Everything is seeded: fixed (seed, config, data) reproduces the history
bit for bit on the same platform.
"""

from __future__ import annotations

import csv
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .dataset import DatasetManifest, TRAIN, VAL
from .errors import (CorruptCheckpoint, DataError, IncompatibleConfig,
                     LabelOutOfRange, NonFiniteGradient)
from .models import (Backbone, BackboneConfig, EnsembleModel, MEAN_LOGIT,
                     MEAN_PROB, softmax)
from .preprocess import (AugmentationPolicy, FrameCache, NormalizationStats,
                         apply_pipeline, iter_eval_batches, sample_rng)

PROB_FLOOR = 1e-12

CHECKPOINT_KIND = "endoclass-checkpoint"
CHECKPOINT_FORMAT_VERSION = 1

_SHUFFLE_STREAM = 0x5F1E


@dataclass
class TrainingConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    weight_decay: float = 1e-4
    optimizer: str = "adam"
    loss: str = "cross_entropy"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    joint_training: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.loss != "cross_entropy":
            raise ValueError(f"unsupported loss {self.loss!r}")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float


@dataclass
class Checkpoint:
    params: dict
    buffers: dict
    config: dict
    best_val_acc: float
    epoch: int


def _check_labels(labels, k):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    return labels


def cross_entropy_loss(values: np.ndarray, labels, from_probs: bool = False) -> float:
    """Mean negative log-likelihood of the true class.

    ``values`` are logits by default (log-sum-exp route); pass
    ``from_probs=True`` for already-fused probabilities, which are clamped
    below at 1e-12 before the log.
    """
    values = np.asarray(values, dtype=np.float64)
    labels = _check_labels(labels, values.shape[1])
    rows = np.arange(values.shape[0])
    if from_probs:
        p_true = values[rows, labels]
        return float(-np.log(np.maximum(p_true, PROB_FLOOR)).mean())
    shifted = values - values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return float((lse - shifted[rows, labels]).mean())


def _grad_ce_logits(logits, labels):
    b = logits.shape[0]
    g = softmax(logits)
    g[np.arange(b), labels] -= 1.0
    return g / b


def _softmax_vjp(probs, dprobs):
    # J_softmax^T v = s * (v - <v, s>) per row.
    return probs * (dprobs - (dprobs * probs).sum(axis=1, keepdims=True))


def fused_loss_and_grads(logits_a, logits_b, labels, fusion: str,
                         joint: bool = True):
    """Loss of the ensemble output plus gradients w.r.t. both logit heads.

    joint=True trains through the fused output; joint=False gives each
    backbone its own cross-entropy (reported loss is their mean).
    """
    labels = _check_labels(labels, logits_a.shape[1])
    b = logits_a.shape[0]
    rows = np.arange(b)
    if not joint:
        loss = 0.5 * (cross_entropy_loss(logits_a, labels)
                      + cross_entropy_loss(logits_b, labels))
        return loss, _grad_ce_logits(logits_a, labels), _grad_ce_logits(logits_b, labels)
    if fusion == MEAN_PROB:
        pa, pb = softmax(logits_a), softmax(logits_b)
        probs = 0.5 * (pa + pb)
        p_true = probs[rows, labels]
        loss = float(-np.log(np.maximum(p_true, PROB_FLOOR)).mean())
        dprobs = np.zeros_like(probs)
        live = p_true > PROB_FLOOR   # clamped samples get zero gradient
        dprobs[rows[live], labels[live]] = -1.0 / (b * p_true[live])
        dza = _softmax_vjp(pa, 0.5 * dprobs)
        dzb = _softmax_vjp(pb, 0.5 * dprobs)
        return loss, dza, dzb
    if fusion == MEAN_LOGIT:
        zm = 0.5 * (logits_a + logits_b)
        loss = cross_entropy_loss(zm, labels)
        dzm = _grad_ce_logits(zm, labels)
        return loss, 0.5 * dzm, 0.5 * dzm
    raise ValueError(f"unknown fusion rule {fusion!r}")


@dataclass
class AdamState:
    m: list
    v: list

    @classmethod
    def zeros_like(cls, arrays) -> "AdamState":
        return cls(m=[np.zeros_like(a) for a in arrays],
                   v=[np.zeros_like(a) for a in arrays])


def adam_step(params, grads, state: AdamState, cfg: TrainingConfig, t: int):
    """One Adam update with L2 weight decay folded into the gradient.

    g <- grad + wd * param; m, v exponential averages; bias-corrected
    m_hat, v_hat; param <- param - lr * m_hat / (sqrt(v_hat) + eps).
    Returns the new parameter arrays; ``state`` is updated in place.
    """
    if t < 1:
        raise ValueError("step index t must be >= 1")
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {i}")
        g = g + cfg.weight_decay * p
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        new_params.append(p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps))
    return new_params


class AdamOptimizer:
    """Owns one AdamState over a model's parameter list."""

    def __init__(self, params, cfg: TrainingConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = AdamState.zeros_like([p.data for p in self.params])
        self.t = 0

    def step(self):
        self.t += 1
        new = adam_step([p.data for p in self.params],
                        [p.grad for p in self.params],
                        self.state, self.cfg, self.t)
        for p, data in zip(self.params, new):
            p.data[...] = data


def _epoch_shuffle_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        entropy=seed, spawn_key=(_SHUFFLE_STREAM, epoch))))


def train_epoch(model: EnsembleModel, frames, optimizer: AdamOptimizer,
                cfg: TrainingConfig, epoch: int, *, stats: NormalizationStats,
                policy: AugmentationPolicy, input_size: int,
                cache: Optional[FrameCache] = None):
    """One pass over the train split: seeded shuffle, one Adam step per batch.

    Returns (mean sample loss, accuracy of the training-mode forward passes).
    The last incomplete batch is kept.
    """
    if not frames:
        raise DataError("train split is empty")
    order = _epoch_shuffle_rng(cfg.seed, epoch).permutation(len(frames))
    size = (input_size, input_size)
    total_loss = 0.0
    correct = 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        tensors, labels = [], []
        for i in idx:
            rng = sample_rng(cfg.seed, epoch, int(i))
            img, label = apply_pipeline(frames[i], TRAIN, policy, stats,
                                        size=size, rng=rng, cache=cache)
            tensors.append(img.data)
            labels.append(label)
        x = np.stack(tensors)
        y = np.asarray(labels, dtype=np.int64)
        model.zero_grads()
        probs, logits_a, logits_b = model.forward_train(x)
        loss, dza, dzb = fused_loss_and_grads(logits_a, logits_b, y,
                                              model.fusion, cfg.joint_training)
        model.backward(dza, dzb)
        optimizer.step()
        total_loss += loss * len(idx)
        correct += int((probs.argmax(axis=1) == y).sum())
    n = len(frames)
    return total_loss / n, correct / n


def validate_epoch(model: EnsembleModel, frames, *, stats: NormalizationStats,
                   input_size: int, batch_size: int = 32,
                   cache: Optional[FrameCache] = None):
    """Deterministic eval pass; never mutates parameters or running stats."""
    if not frames:
        raise DataError("val split is empty")
    total_loss = 0.0
    correct = 0
    for x, y in iter_eval_batches(frames, stats, (input_size, input_size),
                                  batch_size, cache=cache):
        probs = model.predict_probs(x)
        total_loss += cross_entropy_loss(probs, y, from_probs=True) * len(y)
        correct += int((probs.argmax(axis=1) == y).sum())
    n = len(frames)
    return total_loss / n, correct / n


def make_checkpoint(model: EnsembleModel, best_val_acc: float, epoch: int,
                    training_cfg: TrainingConfig,
                    extra_config: Optional[dict] = None) -> Checkpoint:
    params, buffers = model.state_arrays()
    config = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": CHECKPOINT_KIND,
        "class_names": list(model.class_set.names),
        "fusion": model.fusion,
        "backbone_a": model.backbone_a.cfg.to_dict(),
        "backbone_b": model.backbone_b.cfg.to_dict(),
        "training": asdict(training_cfg),
    }
    if extra_config:
        config["run"] = dict(extra_config)
    return Checkpoint(params={k: v.copy() for k, v in params.items()},
                      buffers={k: v.copy() for k, v in buffers.items()},
                      config=config, best_val_acc=float(best_val_acc),
                      epoch=int(epoch))


def fit(model: EnsembleModel, manifest: DatasetManifest, cfg: TrainingConfig,
        *, stats: Optional[NormalizationStats] = None,
        policy: Optional[AugmentationPolicy] = None,
        input_size: Optional[int] = None, use_cache: bool = True,
        extra_config: Optional[dict] = None, log_fn=None):
    """Train for cfg.epochs epochs; checkpoint on strict val-accuracy gains.

    Returns (history, best checkpoint).  On a non-finite gradient the
    partial history is attached to the raised exception.
    """
    stats = stats if stats is not None else NormalizationStats()
    policy = policy if policy is not None else AugmentationPolicy(seed=cfg.seed)
    size = input_size if input_size is not None else model.backbone_a.cfg.input_size
    train_frames = manifest.frames_for(TRAIN)
    val_frames = manifest.frames_for(VAL)
    if not train_frames or not val_frames:
        raise DataError("manifest must be split before fitting")
    optimizer = AdamOptimizer(model.params(), cfg)
    cache = FrameCache(enabled=use_cache)
    history = []
    best = None
    best_acc = -np.inf
    for epoch in range(1, cfg.epochs + 1):
        try:
            train_loss, train_acc = train_epoch(
                model, train_frames, optimizer, cfg, epoch,
                stats=stats, policy=policy, input_size=size, cache=cache)
        except NonFiniteGradient as exc:
            exc.history = history
            raise
        val_loss, val_acc = validate_epoch(
            model, val_frames, stats=stats, input_size=size,
            batch_size=cfg.batch_size, cache=cache)
        metrics = EpochMetrics(epoch, train_loss, val_loss, train_acc, val_acc)
        history.append(metrics)
        if log_fn is not None:
            log_fn(metrics)
        if val_acc > best_acc:
            best_acc = val_acc
            best = make_checkpoint(model, val_acc, epoch, cfg, extra_config)
    return history, best


# --- checkpoint file format ------------------------------------------------
#
# A zip archive with fixed (epoch-zero) timestamps so identical checkpoints
# are byte-identical: meta.json plus one .npy entry per named array.

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def _array_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = dict(ckpt.config)
    meta["best_val_acc"] = ckpt.best_val_acc
    meta["epoch"] = ckpt.epoch
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _write_entry(zf, "meta.json",
                     json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(ckpt.params):
            _write_entry(zf, f"params/{name}.npy", _array_bytes(ckpt.params[name]))
        for name in sorted(ckpt.buffers):
            _write_entry(zf, f"buffers/{name}.npy", _array_bytes(ckpt.buffers[name]))


def load_checkpoint(path, class_set=None) -> Checkpoint:
    """Read a checkpoint archive back; validates magic and version.

    When ``class_set`` is given it must match the stored class names
    exactly, otherwise IncompatibleConfig is raised.
    """
    try:
        zf = zipfile.ZipFile(path, "r")
    except (zipfile.BadZipFile, OSError) as exc:
        raise CorruptCheckpoint(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        names = set(zf.namelist())
        if "meta.json" not in names:
            raise CorruptCheckpoint(f"{path} has no meta.json entry")
        try:
            meta = json.loads(zf.read("meta.json"))
        except (ValueError, zipfile.BadZipFile) as exc:
            raise CorruptCheckpoint(f"{path} meta.json unreadable: {exc}") from exc
        if meta.get("kind") != CHECKPOINT_KIND:
            raise CorruptCheckpoint(f"{path} is not an ensemble checkpoint")
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CorruptCheckpoint(
                f"{path} has format_version {meta.get('format_version')}, "
                f"expected {CHECKPOINT_FORMAT_VERSION}")
        params = {}
        buffers = {}
        try:
            for entry in zf.namelist():
                if entry == "meta.json":
                    continue
                group, _, rest = entry.partition("/")
                arr_name = rest[:-len(".npy")]
                with zf.open(entry) as fh:
                    arr = np.lib.format.read_array(fh, allow_pickle=False)
                if group == "params":
                    params[arr_name] = arr
                elif group == "buffers":
                    buffers[arr_name] = arr
                else:
                    raise CorruptCheckpoint(f"{path} has stray entry {entry}")
        except (ValueError, zipfile.BadZipFile, OSError) as exc:
            raise CorruptCheckpoint(f"{path} array data unreadable: {exc}") from exc
    stored_names = meta.get("class_names") or []
    if class_set is not None and tuple(stored_names) != tuple(class_set.names):
        raise IncompatibleConfig(
            f"checkpoint was trained on {len(stored_names)} classes "
            f"{stored_names}, requested class set has {len(class_set)}")
    best_val_acc = float(meta.pop("best_val_acc", 0.0))
    epoch = int(meta.pop("epoch", 0))
    return Checkpoint(params=params, buffers=buffers, config=meta,
                      best_val_acc=best_val_acc, epoch=epoch)


def restore_model(ckpt: Checkpoint) -> EnsembleModel:
    """Rebuild the ensemble described by a checkpoint and load its arrays."""
    from .dataset import ClassSet
    class_set = ClassSet(ckpt.config["class_names"])
    rng = np.random.default_rng(0)  # immediately overwritten by load_state
    backbone_a = Backbone(BackboneConfig.from_dict(ckpt.config["backbone_a"]),
                          rng, "backbone_a")
    backbone_b = Backbone(BackboneConfig.from_dict(ckpt.config["backbone_b"]),
                          rng, "backbone_b")
    model = EnsembleModel(backbone_a, backbone_b, class_set,
                          fusion=ckpt.config["fusion"])
    model.load_state(ckpt.params, ckpt.buffers)
    return model


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "train_acc", "val_acc"])
        for m in history:
            writer.writerow([m.epoch, repr(m.train_loss), repr(m.val_loss),
                             repr(m.train_acc), repr(m.val_acc)])


def read_history_csv(path):
    history = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["epoch", "train_loss", "val_loss", "train_acc", "val_acc"]:
            raise ValueError(f"unexpected history header {header}")
        for row in reader:
            history.append(EpochMetrics(int(row[0]), float(row[1]), float(row[2]),
                                        float(row[3]), float(row[4])))
    return history


def write_history_json(history, path) -> None:
    with open(path, "w") as fh:
        json.dump([asdict(m) for m in history], fh, indent=1, sort_keys=True)
        fh.write("\n")
