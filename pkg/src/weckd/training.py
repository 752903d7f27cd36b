"""Chain orchestration: stage-1 supervised training, stage-2/3 distillation with
frozen teachers, LR plateau decay, early stopping, checkpointing, timing capture."""
from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .backbone import (
    BackboneConfig,
    Model,
    build_model,
    copy_attention_weights,
    forward,
    forward_on_tape,
    param_digest,
)
from .data import DatasetSplit, LabeledDataset, make_batches
from .losses import DistillParams, anneal_temperature, hybrid_loss, hybrid_loss_grad, softmax_temperature
from .tensor import ContractError, NumericError

__all__ = [
    "TrainConfig",
    "StageResult",
    "ChainResult",
    "CheckpointError",
    "train_stage1",
    "train_distill_stage",
    "train_single_baseline",
    "scheduler_step",
    "run_chain",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
]

MIN_IMPROVEMENT = 1e-6
MAX_LR_DECAYS = 3


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 50
    lr_decay_factor: float = 0.1
    lr_patience: int = 20
    momentum: float = 0.9
    distill: DistillParams = field(default_factory=DistillParams)
    stage_attention: tuple = (False, True, True)
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.patience < 1:
            raise ContractError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ContractError(f"lr_decay_factor must be in (0,1), got {self.lr_decay_factor}")
        if len(self.stage_attention) != 3:
            raise ContractError("stage_attention needs exactly three flags")


@dataclass
class StageResult:
    model: Model
    epoch_curves: list            # per epoch: dict(train_loss, train_acc, val_loss, val_acc)
    stopped_epoch: int
    steps_per_epoch: int
    ms_per_step: float
    hyperparams: dict


@dataclass
class ChainResult:
    stage_results: list           # [StageResult; 3]
    progression: list             # per stage: dict(stage, train_acc, test_acc, train_loss, test_loss)
    teacher_digests: list = None  # per distill stage: (digest before, digest after)

    def deltas(self):
        acc = [row["test_acc"] for row in self.progression]
        return {
            "m1_to_m2": acc[1] - acc[0],
            "m2_to_m3": acc[2] - acc[1],
            "m1_to_m3": acc[2] - acc[0],
        }


def _one_hot(labels, k):
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def evaluate(model, dataset, indices, batch_size=256):
    """Mean CE loss and accuracy over `indices` (pure inference).

    WECKD_THREADS > 1 evaluates batches on a thread pool; the reduction is
    an order-independent mean, so results match the sequential path.
    """
    batches = make_batches(dataset, indices, batch_size)
    k = model.num_classes

    def score(item):
        x, y = item
        _, probs, _ = forward(model, x)
        ce = -(np.log(np.maximum(probs[np.arange(y.size), y], 1e-12)))
        correct = (probs.argmax(axis=1) == y)
        return ce.sum(), correct.sum(), y.size

    threads = int(os.environ.get("WECKD_THREADS", "1"))
    if threads > 1 and len(batches) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(score, batches))
    else:
        parts = [score(b) for b in batches]
    loss_sum = sum(p[0] for p in parts)
    correct = sum(p[1] for p in parts)
    total = sum(p[2] for p in parts)
    return loss_sum / total, correct / total


def logits_of(model, dataset, indices, batch_size=256):
    """Stacked logits over `indices`, inference mode."""
    outs = [forward(model, x)[2] for x, _ in make_batches(dataset, indices, batch_size)]
    return np.concatenate(outs, axis=0)


def scheduler_step(val_losses, lr, cfg: TrainConfig, decays_done=0):
    """LR-plateau decay and early stopping from the validation-loss history.

    Returns (new_lr, stop, decays_done). "Improvement" means strictly below
    the best seen by at least 1e-6.
    """
    if not val_losses:
        raise ContractError("scheduler needs a non-empty loss history")
    best_epoch = 0
    best = val_losses[0]
    for i, v in enumerate(val_losses):
        if v < best - MIN_IMPROVEMENT:
            best = v
            best_epoch = i
    stagnant = len(val_losses) - 1 - best_epoch
    stop = stagnant >= cfg.patience
    new_lr = lr
    if stagnant > 0 and stagnant % cfg.lr_patience == 0 and decays_done < MAX_LR_DECAYS:
        new_lr = lr * cfg.lr_decay_factor
        decays_done += 1
    return new_lr, stop, decays_done


def _carve_validation(indices, seed):
    """Last 10% of the stage's own (seeded-order) subset becomes its validation set."""
    indices = np.asarray(indices)
    n_val = max(1, indices.size // 10)
    return indices[:-n_val], indices[-n_val:]


def _train_loop(model, train_idx, val_idx, dataset, cfg, stage_index, teacher=None):
    k = model.num_classes
    params = {name: v.copy() for name, v in model.params.items()}
    velocity = None
    lr = cfg.learning_rate
    decays = 0
    dp = cfg.distill
    curves = []
    best_val = np.inf
    best_params = {name: v.copy() for name, v in params.items()}
    step_times = []
    steps_per_epoch = int(np.ceil(train_idx.size / cfg.batch_size))

    teacher_digest = param_digest(teacher) if teacher is not None else None

    for epoch in range(cfg.max_epochs):
        temp = anneal_temperature(epoch, cfg.max_epochs, dp.t_max, dp.t_min)
        shuffle_seed = (cfg.seed * 1_000_003 + stage_index * 7919 + epoch) & 0xFFFFFFFF
        batches = make_batches(dataset, train_idx, cfg.batch_size, shuffle_seed=shuffle_seed)
        epoch_loss = 0.0
        epoch_correct = 0
        for bi, (x, y) in enumerate(batches):
            t0 = time.perf_counter()
            y1 = _one_hot(y, k)
            work = Model(model.config, params)
            tape = T.Tape()
            logits_node = forward_on_tape(work, tape, x)
            z = logits_node.value
            if teacher is None:
                loss, _, _ = hybrid_loss(z, z, y1, 1.0, 1.0)
                dz = hybrid_loss_grad(z, z, y1, 1.0, 1.0)
            else:
                zt = forward(teacher, x)[2]
                loss, _, _ = hybrid_loss(z, zt, y1, dp.alpha, temp)
                dz = hybrid_loss_grad(z, zt, y1, dp.alpha, temp,
                                      t_squared_compensation=dp.t_squared_compensation)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at stage {stage_index}, epoch {epoch}, batch {bi}"
                )
            grads = tape.backward(logits_node, dz)
            params, velocity = T.sgd_step(params, grads, lr, cfg.momentum, velocity)
            step_times.append(time.perf_counter() - t0)
            epoch_loss += loss * y.size
            epoch_correct += int((softmax_temperature(z, 1.0).argmax(axis=1) == y).sum())

        val_loss, val_acc = evaluate(Model(model.config, params), dataset, val_idx)
        curves.append({
            "train_loss": epoch_loss / train_idx.size,
            "train_acc": epoch_correct / train_idx.size,
            "val_loss": float(val_loss),
            "val_acc": float(val_acc),
        })
        if val_loss < best_val - MIN_IMPROVEMENT:
            best_val = val_loss
            best_params = {name: v.copy() for name, v in params.items()}
        lr, stop, decays = scheduler_step([c["val_loss"] for c in curves], lr, cfg, decays)
        if stop:
            break

    if teacher is not None and param_digest(teacher) != teacher_digest:
        raise RuntimeError("teacher parameters changed during distillation (freeze violated)")

    result_model = Model(model.config, best_params)
    return StageResult(
        model=result_model,
        epoch_curves=curves,
        stopped_epoch=len(curves),
        steps_per_epoch=steps_per_epoch,
        ms_per_step=float(np.mean(step_times) * 1000.0),
        hyperparams={
            "learning_rate": cfg.learning_rate,
            "alpha": dp.alpha,
            "t_max": dp.t_max,
            "t_min": dp.t_min,
            "momentum": cfg.momentum,
            "batch_size": cfg.batch_size,
        },
    )


def train_stage1(model, d1_indices, dataset, cfg: TrainConfig) -> StageResult:
    """Supervised CE training of the chain's first model on its subset."""
    train_idx, val_idx = _carve_validation(d1_indices, cfg.seed)
    return _train_loop(model, train_idx, val_idx, dataset, cfg, stage_index=0)


def train_distill_stage(student, teacher, d_indices, dataset, cfg: TrainConfig,
                        stage_index) -> StageResult:
    """Hybrid CE+KL training of a student against its frozen predecessor."""
    if teacher.num_classes != student.num_classes:
        raise ContractError(
            f"chain composition error: teacher has {teacher.num_classes} classes, "
            f"student has {student.num_classes}"
        )
    train_idx, val_idx = _carve_validation(d_indices, cfg.seed)
    return _train_loop(student, train_idx, val_idx, dataset, cfg,
                       stage_index=stage_index, teacher=teacher)


def train_single_baseline(dataset, split, cfg: TrainConfig,
                          backbone: BackboneConfig = None) -> StageResult:
    """One backbone on d1+d2+d3 with the same budget; the 30%-baseline comparison."""
    backbone = backbone or _default_backbone(dataset)
    model = build_model(replace(backbone, attention_enabled=False,
                                init_seed=_f_base_seed(cfg.seed)))
    indices = split.training_indices()
    train_idx, val_idx = _carve_validation(indices, cfg.seed)
    return _train_loop(model, train_idx, val_idx, dataset, cfg, stage_index=9)


def _f_base_seed(seed):
    # one shared feature-extractor init per chain run, reused by all stages
    return (seed * 31 + 17) & 0x7FFFFFFF


def _default_backbone(dataset: LabeledDataset) -> BackboneConfig:
    n, c, h, w = dataset.images.shape
    return BackboneConfig(input_size=(h, w, c), num_classes=dataset.num_classes)


def _assert_no_leakage(split: DatasetSplit):
    train = split.training_indices()
    if np.intersect1d(train, split.d_test).size:
        raise ContractError("training indices overlap the test set; refusing to train")
    sets = [split.d1, split.d2, split.d3]
    for i in range(3):
        for j in range(i + 1, 3):
            if np.intersect1d(sets[i], sets[j]).size:
                raise ContractError(f"training subsets {i + 1} and {j + 1} overlap")


def run_chain(dataset: LabeledDataset, split: DatasetSplit, cfg: TrainConfig,
              backbone: BackboneConfig = None) -> ChainResult:
    """Full three-stage chain: supervised M1, then distilled M2 and M3."""
    _assert_no_leakage(split)
    backbone = backbone or _default_backbone(dataset)
    seed = _f_base_seed(cfg.seed)
    subsets = [split.d1, split.d2, split.d3]
    stage_results = []
    teacher_digests = []
    teacher = None
    for i in range(3):
        model = build_model(replace(backbone,
                                    attention_enabled=cfg.stage_attention[i],
                                    init_seed=seed))
        if teacher is not None:
            # each student inherits its predecessor's trained extractor and
            # head instead of relearning them from its own 10% slice; the
            # attention gate is copied only when the teacher trained one
            for name, value in teacher.params.items():
                if name not in ("w_att", "b_att"):
                    model.params[name] = value.copy()
            if teacher.attention_enabled and model.attention_enabled:
                model = copy_attention_weights(teacher, model)
        if i == 0:
            result = train_stage1(model, subsets[i], dataset, cfg)
        else:
            before = param_digest(teacher)
            result = train_distill_stage(model, teacher, subsets[i], dataset, cfg, stage_index=i)
            teacher_digests.append((before, param_digest(teacher)))
        stage_results.append(result)
        teacher = result.model

    progression = []
    for i, result in enumerate(stage_results):
        train_loss, train_acc = evaluate(result.model, dataset, subsets[i])
        test_loss, test_acc = evaluate(result.model, dataset, split.d_test)
        progression.append({
            "stage": f"M{i + 1}",
            "train_acc": float(train_acc),
            "test_acc": float(test_acc),
            "train_loss": float(train_loss),
            "test_loss": float(test_loss),
        })
    return ChainResult(stage_results, progression, teacher_digests)


# ---------------------------------------------------------------------------
# checkpoint format: magic "WCKD", u32 version, JSON config blob, f32 tensors
# ---------------------------------------------------------------------------

MAGIC = b"WCKD"
VERSION = 1


def _config_json(config: BackboneConfig) -> str:
    return json.dumps({
        "input_size": list(config.input_size),
        "conv_blocks": list(config.conv_blocks),
        "fc_width": config.fc_width,
        "num_classes": config.num_classes,
        "attention_enabled": config.attention_enabled,
        "init_seed": config.init_seed,
    }, sort_keys=True, separators=(",", ":"))


def save_checkpoint(model: Model, path):
    """Little-endian binary checkpoint; parameters stored as f32 in name order."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        blob = _config_json(model.config).encode()
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        names = sorted(model.params)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            # note: ascontiguousarray would promote 0-d scalars to rank 1
            arr = np.array(model.params[name], dtype=np.float32, order="C")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"truncated checkpoint: {what} at offset {off}")
        chunk = data[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad checkpoint magic at offset 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack("<I", take(4, "config length"))
    cfg_dict = json.loads(take(blob_len, "config blob").decode())
    config = BackboneConfig(
        input_size=tuple(cfg_dict["input_size"]),
        conv_blocks=tuple(cfg_dict["conv_blocks"]),
        fc_width=cfg_dict["fc_width"],
        num_classes=cfg_dict["num_classes"],
        attention_enabled=cfg_dict["attention_enabled"],
        init_seed=cfg_dict["init_seed"],
    )
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "tensor name").decode()
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = tuple(struct.unpack("<I", take(4, "dim"))[0] for _ in range(rank))
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(size * 4, f"data of {name}"), dtype="<f4").reshape(dims)
        params[name] = arr.astype(np.float64)
    expected = set(build_model(config).params)
    if set(params) != expected:
        raise CheckpointError(
            f"checkpoint parameters {sorted(params)} do not match config-required {sorted(expected)}"
        )
    reference = build_model(config)
    for name, arr in params.items():
        if arr.shape != reference.params[name].shape:
            raise CheckpointError(
                f"shape mismatch for {name}: file has {arr.shape}, "
                f"config implies {reference.params[name].shape}"
            )
    return Model(config, params)
