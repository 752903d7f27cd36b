"""Experiment driver: config -> dataset -> chain run -> run-directory artifacts."""
from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import replace

import numpy as np

from .backbone import BackboneConfig
from .config import ExperimentConfig, canonical_config
from .data import LabeledDataset, generate_synthetic, load_idx, partition
from .metrics import confusion_matrix, prf1, roc_auc_ovr, theory_report
from .losses import softmax_temperature
from .tpe import SearchSpace, run_study
from .training import (
    ChainResult,
    evaluate,
    logits_of,
    run_chain,
    save_checkpoint,
)

__all__ = ["load_dataset", "backbone_for", "run_experiment", "tune_experiment", "evaluate_model"]


def load_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    if "synthetic" in cfg.dataset:
        s = cfg.dataset["synthetic"]
        return generate_synthetic(s["n"], s["classes"], (s["height"], s["width"]),
                                  s["noise_std"], s["seed"])
    return load_idx(cfg.dataset["idx"]["images"], cfg.dataset["idx"]["labels"])


def backbone_for(cfg: ExperimentConfig, dataset: LabeledDataset) -> BackboneConfig:
    n, c, h, w = dataset.images.shape
    kwargs = {"input_size": (h, w, c), "num_classes": dataset.num_classes}
    if "conv_blocks" in cfg.backbone:
        kwargs["conv_blocks"] = tuple(cfg.backbone["conv_blocks"])
    if "fc_width" in cfg.backbone:
        kwargs["fc_width"] = cfg.backbone["fc_width"]
    return BackboneConfig(**kwargs)


def _metrics_payload(chain: ChainResult, dataset, split, class_names):
    models = [r.model for r in chain.stage_results]
    final = models[-1]
    probs = softmax_temperature(logits_of(final, dataset, split.d_test), 1.0)
    truths = dataset.labels[split.d_test]
    cm = confusion_matrix(probs.argmax(axis=1), truths, dataset.num_classes)
    scores = prf1(cm)
    auc = roc_auc_ovr(probs, truths)
    theory = theory_report(models, dataset, split)
    return {
        "accuracy": scores["accuracy"],
        "macro": scores["macro"],
        "weighted": scores["weighted"],
        "per_class": [
            {"class": class_names[c], **scores["per_class"][c], "auc": auc["per_class"][c]}
            for c in range(dataset.num_classes)
        ],
        "macro_auc": auc["macro"],
        "confusion_matrix": cm.tolist(),
        "theory": dataclasses.asdict(theory),
        "progression": chain.progression,
        "deltas": chain.deltas(),
    }


def _write_progression_csv(path, dataset_name, progression):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["dataset", "stage", "train_acc", "test_acc",
                         "train_loss", "test_loss", "delta_prev"])
        prev = None
        for row in progression:
            delta = "" if prev is None else f"{row['test_acc'] - prev:.6f}"
            writer.writerow([dataset_name, row["stage"],
                             f"{row['train_acc']:.6f}", f"{row['test_acc']:.6f}",
                             f"{row['train_loss']:.6f}", f"{row['test_loss']:.6f}", delta])
            prev = row["test_acc"]


def _write_timing_csv(path, chain: ChainResult):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["stage", "steps_per_epoch", "ms_per_step", "epochs_run"])
        for i, r in enumerate(chain.stage_results):
            writer.writerow([f"M{i + 1}", r.steps_per_epoch,
                             f"{r.ms_per_step:.3f}", r.stopped_epoch])


def _dataset_name(cfg: ExperimentConfig):
    if "synthetic" in cfg.dataset:
        return "synthetic"
    return os.path.basename(cfg.dataset["idx"]["images"])


def _run_one_seed(cfg, dataset, seed, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    split = partition(dataset, cfg.partition_seed, stratified=True)
    train_cfg = replace(cfg.train, seed=seed)
    backbone = backbone_for(cfg, dataset)
    chain = run_chain(dataset, split, train_cfg, backbone)
    for i, r in enumerate(chain.stage_results):
        save_checkpoint(r.model, os.path.join(out_dir, f"m{i + 1}.wckd"))
    payload = _metrics_payload(chain, dataset, split, dataset.class_names)
    with open(os.path.join(out_dir, "metrics.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    _write_progression_csv(os.path.join(out_dir, "chain_progression.csv"),
                           _dataset_name(cfg), chain.progression)
    _write_timing_csv(os.path.join(out_dir, "timing.csv"), chain)
    return payload


def run_experiment(cfg: ExperimentConfig, out_dir=None):
    """Run the chain for every seed in repeat_seeds; emit all run artifacts."""
    out_dir = out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_resolved.json"), "w") as f:
        f.write(canonical_config(cfg))
    dataset = load_dataset(cfg)
    if len(cfg.repeat_seeds) == 1:
        return _run_one_seed(cfg, dataset, cfg.repeat_seeds[0], out_dir)
    summary = {}
    for seed in cfg.repeat_seeds:
        payload = _run_one_seed(cfg, dataset, seed, os.path.join(out_dir, f"seed_{seed}"))
        summary[str(seed)] = {"accuracy": payload["accuracy"],
                              "deltas": payload["deltas"]}
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary


def tune_experiment(cfg: ExperimentConfig, n_trials, out_dir=None):
    """TPE study over (eta, alpha, t_max); objective is M3 validation accuracy."""
    out_dir = out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    dataset = load_dataset(cfg)
    split = partition(dataset, cfg.partition_seed, stratified=True)
    backbone = backbone_for(cfg, dataset)
    base_train = cfg.train

    def objective(eta, alpha, temp):
        train_cfg = replace(
            base_train,
            learning_rate=eta,
            distill=replace(base_train.distill, alpha=alpha, t_max=temp),
        )
        chain = run_chain(dataset, split, train_cfg, backbone)
        # M3's own validation curve at its best epoch
        curves = chain.stage_results[2].epoch_curves
        best = min(curves, key=lambda c: c["val_loss"])
        return best["val_acc"]

    best, trials = run_study(objective, SearchSpace(), n_trials, cfg.hyperopt["seed"])
    with open(os.path.join(out_dir, "trials.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["trial_index", "eta", "alpha", "temp", "objective", "status"])
        for t in trials:
            writer.writerow([t.trial_index, f"{t.params[0]:.6g}", f"{t.params[1]:.6g}",
                             f"{t.params[2]:.6g}",
                             "" if not np.isfinite(t.objective) else f"{t.objective:.6f}",
                             t.status])
    best_cfg = replace(
        cfg,
        train=replace(base_train, learning_rate=best.params[0],
                      distill=replace(base_train.distill, alpha=best.params[1],
                                      t_max=best.params[2])),
    )
    with open(os.path.join(out_dir, "best-config.json"), "w") as f:
        f.write(canonical_config(best_cfg))
    return best, trials


def evaluate_model(model, dataset):
    """Full-dataset metrics for a loaded checkpoint (no partitioning)."""
    indices = np.arange(len(dataset))
    probs = softmax_temperature(logits_of(model, dataset, indices), 1.0)
    cm = confusion_matrix(probs.argmax(axis=1), dataset.labels, dataset.num_classes)
    scores = prf1(cm)
    auc = roc_auc_ovr(probs, dataset.labels)
    loss, acc = evaluate(model, dataset, indices)
    return {
        "accuracy": scores["accuracy"],
        "loss": float(loss),
        "macro": scores["macro"],
        "weighted": scores["weighted"],
        "per_class": scores["per_class"],
        "auc": auc,
        "confusion_matrix": cm.tolist(),
    }
