"""Two-phase training, baselines, stopping, grid search, and trials.

Phase 1 trains the full classifier on the source domain with
cross-entropy.  Phase 2 inserts the encoder block at the split, freezes
both original halves, and trains only the encoder on the low-resource
target set under one of the adaptation objectives; alignment gradients
enter at the encoder output, classification gradients pass backward
through the frozen head as a conduit.  Removing the encoder afterwards
restores the phase-1 model bit for bit.
"""

import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import data, evaluate, losses, nn, sampling
from . import tensor_core as tc
from .seeding import derive_int, derive_rng

MODELS = ("fcn", "cnn")

BASELINE_KINDS = ("source_trained", "target_trained", "finetune_n2")

BASELINE_DISPLAY = {
    "source_trained": "Source only",
    "target_trained": "Target only",
    "finetune_n2": "Finetune N2",
}

# alignment terms that need batch statistics, hence at least two examples
_STATS_LOSSES = ("cls_norm", "coral")


class EngineError(Exception):
    pass


class ConfigError(EngineError):
    pass


class NonFiniteLoss(EngineError):
    """Training diverged; `epoch` records where."""

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class ExperimentConfig:
    """Hyperparameters and identifiers for one experiment."""

    model: str = "fcn"
    source: str = ""
    target: str = ""
    loss: str = "cls_kl"
    sampling: str = "indirect"
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 128
    source_epochs: int = 100
    stop_threshold: float = 1e-3
    max_adapt_epochs: int = 200
    trials: int = 3
    seed: int = 0
    align_weight: float = 1.0
    encoder_noise: float = 1e-2
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.loss not in losses.LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.loss!r}")
        if self.sampling not in sampling.SAMPLER_KINDS:
            raise ConfigError(f"unknown sampling kind {self.sampling!r}")
        for name in ("lr", "weight_decay", "align_weight", "encoder_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.source_epochs < 0:
            raise ConfigError("source_epochs must be nonnegative")
        if self.stop_threshold <= 0:
            raise ConfigError("stop_threshold must be positive")
        if self.max_adapt_epochs < 1:
            raise ConfigError("max_adapt_epochs must be at least 1")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")

    def snapshot(self):
        return asdict(self)


@dataclass(frozen=True)
class DomainData:
    """The four dataset splits one experiment consumes."""

    source_train: data.Dataset
    source_test: data.Dataset
    target_train: data.Dataset
    target_test: data.Dataset


@dataclass
class RunRecord:
    """Outcome of one trained-and-evaluated method."""

    method: str
    strategy: str
    loss_history: tuple
    report: evaluate.EvalReport
    seeds: dict
    config: dict
    wall_clock: float = 0.0


def build_model(model, seed):
    if model == "fcn":
        return nn.build_fcn(seed)
    if model == "cnn":
        return nn.build_cnn(seed)
    raise ConfigError(f"unknown model {model!r}")


def checksum(net, blocks=("n1", "n2")):
    """SHA-256 over raw parameter bytes of the named blocks."""
    return hashlib.sha256(net.param_bytes(blocks)).hexdigest()


def config_hash(cfg):
    return hashlib.sha256(
        json.dumps(cfg.snapshot(), sort_keys=True).encode()).hexdigest()[:16]


def stopping_check(history, threshold):
    """True once the last two epoch losses differ by less than threshold."""
    if threshold <= 0:
        raise ConfigError("stop threshold must be positive")
    return len(history) >= 2 and abs(history[-1] - history[-2]) < threshold


def _train_cross_entropy(net, ds, cfg, seed, tag, epochs, stop_threshold=None):
    """Shared cross-entropy loop; frozen layers never step."""
    opt = nn.Adam(net.layers(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffle_seed = derive_int(seed, "epochs", tag)
    history = []
    for epoch in range(epochs):
        total, count = 0.0, 0
        for images, labels in data.batches(ds, cfg.batch_size, shuffle=True,
                                           seed=shuffle_seed, epoch=epoch):
            try:
                _, logits = net.forward(images)
                value = tc.cross_entropy(logits, labels)
                if not math.isfinite(value):
                    raise NonFiniteLoss(f"non-finite loss at epoch {epoch}", epoch)
                net.zero_grad()
                net.backward(tc.cross_entropy_grad(logits, labels))
                opt.step()
            except (tc.NonFiniteValue, nn.NonFiniteGradient) as exc:
                raise NonFiniteLoss(
                    f"training diverged at epoch {epoch}: {exc}", epoch) from exc
            total += value * len(labels)
            count += len(labels)
        history.append(total / count)
        if stop_threshold is not None and stopping_check(history, stop_threshold):
            break
    return history


def train_source(net, source_train, cfg, seed=None, checkpoint_path=None):
    """Phase 1: train the encoder-less classifier on the source domain."""
    if net.encoder is not None:
        raise nn.EncoderAlreadyPresent("phase-1 training expects no encoder")
    if len(source_train) == 0:
        raise EngineError("source training set is empty")
    seed = cfg.seed if seed is None else seed
    history = _train_cross_entropy(net, source_train, cfg, seed, "source",
                                   cfg.source_epochs)
    if checkpoint_path is not None:
        _atomic_checkpoint(net, checkpoint_path,
                           meta={"phase": "source", "seed": seed})
    return net, history


def adapt(net, target_train, sampler, loss_spec, cfg, seed=None):
    """Phase 2: insert the encoder and align target features to source.

    N1 and N2 are frozen; only encoder parameters step.  Batches too
    small for covariance-based alignment terms (last short batch of
    size 1) are skipped.  Stops on the epoch-loss delta falling under
    cfg.stop_threshold or after cfg.max_adapt_epochs.
    """
    seed = cfg.seed if seed is None else seed
    nn.build_encoder(net, seed, noise_scale=cfg.encoder_noise)
    nn.set_frozen(net, ("n1", "n2"), True)
    if loss_spec.needs_sampler and sampler is None:
        raise EngineError(f"loss {loss_spec.kind!r} needs a feature sampler")
    opt = nn.Adam(net.layers(use_encoder=True), lr=cfg.lr,
                  weight_decay=cfg.weight_decay)
    shuffle_seed = derive_int(seed, "epochs", "adapt")
    history = []
    for epoch in range(cfg.max_adapt_epochs):
        total, count = 0.0, 0
        for images, labels in data.batches(target_train, cfg.batch_size,
                                           shuffle=True, seed=shuffle_seed,
                                           epoch=epoch):
            if len(labels) < 2 and loss_spec.kind in _STATS_LOSSES:
                continue
            try:
                split, logits = net.forward(images, use_encoder=True)
                flat = split.reshape(len(labels), -1)
                if loss_spec.needs_sampler:
                    ref = sampler.draw(len(labels))
                else:
                    ref = flat
                align_value, align_grad = losses.alignment(loss_spec.kind, ref, flat)
                ce = tc.cross_entropy(logits, labels)
                value = loss_spec.align_weight * align_value + ce
                if not math.isfinite(value):
                    raise NonFiniteLoss(f"non-finite loss at epoch {epoch}", epoch)
                net.zero_grad()
                split_grad = (loss_spec.align_weight * align_grad).reshape(split.shape)
                net.backward(tc.cross_entropy_grad(logits, labels), use_encoder=True,
                             split_grad=split_grad, into_n1=False)
                opt.step()
            except (tc.NonFiniteValue, nn.NonFiniteGradient) as exc:
                raise NonFiniteLoss(
                    f"adaptation diverged at epoch {epoch}: {exc}", epoch) from exc
            total += value * len(labels)
            count += len(labels)
        if count == 0:
            raise EngineError(
                f"loss {loss_spec.kind!r} needs batches of at least 2 examples")
        history.append(total / count)
        if stopping_check(history, cfg.stop_threshold):
            break
    return net, history


def _load_or_train_source(bundle, cfg, seed, pretrained_path):
    if pretrained_path is not None and os.path.exists(pretrained_path):
        net, _ = nn.load_checkpoint(pretrained_path)
        return net, ()
    net = build_model(cfg.model, derive_int(seed, "init"))
    _, history = train_source(net, bundle.source_train, cfg, seed=seed,
                              checkpoint_path=pretrained_path)
    return net, tuple(history)


def _fit(bundle, cfg, method, seed, pretrained_path=None):
    """Train one method end to end; returns (net, loss_history)."""
    if method == "lrsdag":
        net, _ = _load_or_train_source(bundle, cfg, seed, pretrained_path)
        before = checksum(net)
        loss_spec = losses.AdaptationLoss(cfg.loss, align_weight=cfg.align_weight)
        sampler = None
        if loss_spec.needs_sampler:
            feats = evaluate.feature_matrix(net, bundle.source_train)
            sampler = sampling.make_sampler(
                cfg.sampling, feats, derive_rng(seed, "sampler", cfg.sampling))
        _, history = adapt(net, bundle.target_train, sampler, loss_spec, cfg,
                           seed=seed)
        if checksum(net) != before:
            raise EngineError("frozen blocks changed during adaptation")
        return net, tuple(history)
    if method == "source_trained":
        return _load_or_train_source(bundle, cfg, seed, pretrained_path)
    if method == "target_trained":
        # trains purely on the target subset; source data is never read
        net = build_model(cfg.model, derive_int(seed, "target-init"))
        history = _train_cross_entropy(net, bundle.target_train, cfg, seed,
                                       "target", cfg.source_epochs)
        return net, tuple(history)
    if method == "finetune_n2":
        net, _ = _load_or_train_source(bundle, cfg, seed, pretrained_path)
        before = checksum(net, blocks=("n1",))
        nn.set_frozen(net, ("n1",), True)
        history = _train_cross_entropy(net, bundle.target_train, cfg, seed,
                                       "finetune", cfg.max_adapt_epochs,
                                       stop_threshold=cfg.stop_threshold)
        if checksum(net, blocks=("n1",)) != before:
            raise EngineError("frozen front block changed during finetuning")
        return net, tuple(history)
    raise ConfigError(f"unknown method {method!r}")


def _record(net, bundle, cfg, method, seed, history, started):
    if method == "lrsdag":
        display = losses.AdaptationLoss(cfg.loss).display
        strategy = cfg.sampling if losses.AdaptationLoss(cfg.loss).needs_sampler \
            else "-"
    else:
        display = BASELINE_DISPLAY[method]
        strategy = "-"
    report = evaluate.evaluate_pair(
        net, bundle.source_test, bundle.target_test,
        metadata={"config_hash": config_hash(cfg), "trial_seed": seed})
    return RunRecord(
        method=display,
        strategy=strategy,
        loss_history=tuple(history),
        report=report,
        seeds={"master": cfg.seed, "trial_seed": seed},
        config=cfg.snapshot(),
        wall_clock=time.perf_counter() - started,
    )


def run_lrsdag(bundle, cfg, seed=None, pretrained_path=None):
    """Pretrain (or load), adapt with cfg.loss/cfg.sampling, evaluate."""
    seed = cfg.seed if seed is None else seed
    started = time.perf_counter()
    net, history = _fit(bundle, cfg, "lrsdag", seed, pretrained_path)
    return _record(net, bundle, cfg, "lrsdag", seed, history, started)


def run_baseline(kind, bundle, cfg, seed=None, pretrained_path=None):
    """Run one of the three reference procedures and evaluate it."""
    if kind not in BASELINE_KINDS:
        raise ConfigError(f"unknown baseline {kind!r}")
    seed = cfg.seed if seed is None else seed
    started = time.perf_counter()
    net, history = _fit(bundle, cfg, kind, seed, pretrained_path)
    return _record(net, bundle, cfg, kind, seed, history, started)


def average_records(records):
    """Pool trial records into one; accuracy cells come from summed
    confusion counts, so they equal the mean of per-trial accuracies."""
    first = records[0]
    conf, counts, acc = {}, {}, {}
    for key in first.report.accuracy:
        conf[key] = np.sum([r.report.confusion[key] for r in records], axis=0)
        counts[key] = int(sum(r.report.n_examples[key] for r in records))
        acc[key] = float(np.trace(conf[key]) / counts[key] * 100.0)
    metadata = {
        "config_hash": config_hash(ExperimentConfig(**first.config)),
        "trial_seeds": [r.seeds["trial_seed"] for r in records],
        "per_trial_accuracy": [dict(r.report.accuracy) for r in records],
    }
    report = evaluate.EvalReport(accuracy=acc, confusion=conf,
                                 n_examples=counts, metadata=metadata)
    return RunRecord(
        method=first.method,
        strategy=first.strategy,
        loss_history=(),
        report=report,
        seeds={"master": first.seeds["master"],
               "trial_seeds": metadata["trial_seeds"]},
        config=dict(first.config),
        wall_clock=sum(r.wall_clock for r in records),
    )


def run_trials(bundle, cfg, method="lrsdag", pretrained_paths=None):
    """Run cfg.trials independent trials; returns (averaged, per-trial)."""
    records = []
    for trial in range(cfg.trials):
        seed = cfg.seed + trial
        pre = pretrained_paths[trial] if pretrained_paths else None
        if method == "lrsdag":
            records.append(run_lrsdag(bundle, cfg, seed=seed, pretrained_path=pre))
        else:
            records.append(run_baseline(method, bundle, cfg, seed=seed,
                                        pretrained_path=pre))
    return average_records(records), records


def grid_search(lrs, weight_decays, bundle, val, cfg, method="lrsdag",
                pretrained_path=None):
    """Pick (lr, weight_decay) by validation accuracy.

    Ties break toward the lower learning rate, then the lower decay.
    The caller merges the validation split back into training afterwards
    (data.concat_datasets).
    """
    if not lrs or not weight_decays:
        raise ConfigError("grid must contain at least one lr and one weight_decay")
    best_key, best_cfg = None, None
    for lr in lrs:
        for wd in weight_decays:
            cand = replace(cfg, lr=float(lr), weight_decay=float(wd))
            net, _ = _fit(bundle, cand, method, cand.seed, pretrained_path)
            score = evaluate.accuracy(net, val,
                                      use_encoder=net.encoder is not None)
            key = (-score, lr, wd)
            if best_key is None or key < best_key:
                best_key, best_cfg = key, cand
    return best_cfg


def method_inventory():
    """All report rows: baselines plus loss kinds crossed with samplers."""
    rows = [("baseline", kind, "-") for kind in BASELINE_KINDS]
    for kind in losses.LOSS_KINDS:
        if losses.AdaptationLoss(kind).needs_sampler:
            rows.extend(("lrsdag", kind, strat)
                        for strat in sampling.SAMPLER_KINDS)
        else:
            rows.append(("lrsdag", kind, "-"))
    return rows


def _atomic_checkpoint(net, path, meta=None):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    tmp = f"{path}.tmp-{os.getpid()}"
    nn.save_checkpoint(net, tmp, meta=meta)
    os.replace(tmp, path)


def _cell_path(run_dir, family, key, strategy, trial):
    return os.path.join(run_dir, "cells",
                        f"{family}.{key}.{strategy}.trial{trial}.json")


def _save_record(path, rec):
    payload = {
        "method": rec.method,
        "strategy": rec.strategy,
        "loss_history": list(rec.loss_history),
        "report": rec.report.to_dict(),
        "seeds": rec.seeds,
        "config": rec.config,
        "wall_clock": rec.wall_clock,
    }
    data.atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=1))


def _load_record(path):
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return RunRecord(
        method=payload["method"],
        strategy=payload["strategy"],
        loss_history=tuple(payload["loss_history"]),
        report=evaluate.EvalReport.from_dict(payload["report"]),
        seeds=payload["seeds"],
        config=payload["config"],
        wall_clock=payload["wall_clock"],
    )


def ensure_pretrained(bundle, cfg, run_dir, trial):
    """Train (once) and persist the phase-1 checkpoint for a trial."""
    path = os.path.join(run_dir, "checkpoints", f"pretrained-trial{trial}.npz")
    if not os.path.exists(path):
        seed = cfg.seed + trial
        net = build_model(cfg.model, derive_int(seed, "init"))
        _, history = train_source(net, bundle.source_train, cfg, seed=seed)
        _atomic_checkpoint(net, path, meta={"phase": "source", "seed": seed})
        _write_loss_csv(os.path.join(run_dir, f"source-loss-trial{trial}.csv"),
                        history)
    return path


def _write_loss_csv(path, history):
    lines = ["epoch,loss"] + [f"{i},{v:.12g}" for i, v in enumerate(history)]
    data.atomic_write_text(path, "\n".join(lines) + "\n")


def reproduce(bundle, cfg, run_dir):
    """Run every method for cfg.trials trials and render the report.

    Completed cells are persisted as JSON under run_dir/cells and act as
    resume markers: re-running skips them, so an interrupted run picks
    up where it stopped.  Phase-1 checkpoints are shared by all methods
    within a trial.
    """
    os.makedirs(os.path.join(run_dir, "cells"), exist_ok=True)
    os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
    averaged = []
    for family, key, strategy in method_inventory():
        trial_records = []
        for trial in range(cfg.trials):
            cell = _cell_path(run_dir, family, key, strategy, trial)
            if os.path.exists(cell):
                trial_records.append(_load_record(cell))
                continue
            seed = cfg.seed + trial
            if family == "baseline" and key == "target_trained":
                pre = None
            else:
                pre = ensure_pretrained(bundle, cfg, run_dir, trial)
            if family == "baseline":
                rec = run_baseline(key, bundle, cfg, seed=seed,
                                   pretrained_path=pre)
            else:
                cand = replace(cfg, loss=key,
                               sampling=strategy if strategy != "-"
                               else cfg.sampling)
                rec = run_lrsdag(bundle, cand, seed=seed, pretrained_path=pre)
                _write_loss_csv(
                    os.path.join(run_dir,
                                 f"adapt-loss.{key}.{strategy}.trial{trial}.csv"),
                    rec.loss_history)
            _save_record(cell, rec)
            trial_records.append(rec)
        averaged.append(average_records(trial_records))
    evaluate.write_report(averaged, run_dir)
    return averaged
