"""Budgeted from-scratch training, architecture statistics, and ablations.

Budgeted mode never takes a noise multiplier directly: sigma is calibrated
from the (epsilon, delta) target and the run halts exactly at the
accountant's step cap, so the realized epsilon can never exceed the
configured one. Repeats are independent (fresh init, fresh noise, fresh
shuffles) with seeds derived from the config seed.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .accountant import (
    PrivacyBudget,
    RdpLedger,
    calibrate_sigma,
    steps_until_budget,
    to_eps_delta,
)
from .controller import Controller, sample as sample_trace
from .data import DATASET_INFO, DatasetBundle
from .dp_trainer import DpSgdTrainer, DpTrainConfig, evaluate_accuracy
from .errors import NotFoundError, TrainingDivergedError, ValidationError
from .network import (
    ABLATION_ACTIVATIONS,
    SmallCNN,
    build_network,
    build_small_cnn,
)
from .search_space import (
    Architecture,
    OperationId,
    build_model_spec,
    encode,
    load_architecture,
)

DATASET_CHANNELS = {
    "mnist": (32, 32, 64),
    "fashionmnist": (32, 32, 64),
    "cifar10": (48, 96, 192),
}

# the paper leaves final-training epoch counts unstated; these are the
# defaults sigma is calibrated against
DEFAULT_EPOCHS = {"mnist": 40, "fashionmnist": 40, "cifar10": 60}

ACTIVATION_TO_OP = {
    "relu": OperationId.CONV_RELU,
    "tanh": OperationId.CONV_TANH,
    "sigmoid": OperationId.CONV_SIGMOID,
    "hardtanh": OperationId.CONV_HARDTANH,
    "selu": OperationId.CONV_SELU,
    "linear": OperationId.CONV_LINEAR,
}

POOLING_TO_OP = {"max": OperationId.MAX_POOL_3X3, "avg": OperationId.AVG_POOL_3X3}


@dataclass(frozen=True)
class EvalConfig:
    dataset: str
    budget: PrivacyBudget | None
    epochs: int
    repeats: int = 10
    batch_size: int = 300
    learning_rate: float = 0.02
    clip_norm: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    noise_multiplier: float | None = None  # only in non-budgeted mode
    stage_channels: tuple | None = None    # None: dataset default
    train_subset: int | None = None        # desk-scale subset of the train set
    seed: int = 0

    def __post_init__(self):
        if self.dataset not in DATASET_CHANNELS:
            raise ValidationError(f"unknown dataset {self.dataset!r}")
        if self.budget is not None and self.noise_multiplier is not None:
            raise ValidationError(
                "budgeted mode derives sigma from the budget; do not set "
                "noise_multiplier directly")
        if self.budget is None and self.noise_multiplier is None:
            raise ValidationError("need either a budget or a noise multiplier")
        if self.epochs < 1 or self.repeats < 1:
            raise ValidationError("epochs and repeats must be >= 1")

    def channels(self) -> tuple:
        return (tuple(self.stage_channels) if self.stage_channels is not None
                else DATASET_CHANNELS[self.dataset])


@dataclass
class ResultRecord:
    arch_id: str
    dataset: str
    epsilon: float | None
    delta: float | None
    mean_accuracy: float
    std_accuracy: float | None
    accuracies: list
    param_count: int
    wall_time_s: float
    realized_epsilon: float | None
    sigma: float
    steps: int
    repeats: int
    component: str | None = None
    searched_on: str | None = None

    def __post_init__(self):
        for a in self.accuracies:
            if not (0 <= a <= 1):
                raise ValidationError(f"accuracy outside [0, 1]: {a}")
        if self.repeats >= 2 and self.std_accuracy is None:
            raise ValidationError("std must be reported for >= 2 repeats")

    def to_json(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in self.__dict__.items()}


def arch_id(arch: Architecture) -> str:
    return f"k{arch.k}-" + "".join(str(c) for c in encode(arch))


def _subset(x: np.ndarray, y: np.ndarray, n: int | None, seed: int):
    if n is None or n >= len(x):
        return x, y
    idx = np.random.default_rng(seed).permutation(len(x))[:n]
    return x[idx], y[idx]


def _derive_sigma_and_steps(cfg: EvalConfig, n_train: int):
    steps_per_epoch = math.ceil(n_train / cfg.batch_size)
    requested = cfg.epochs * steps_per_epoch
    q = min(1.0, cfg.batch_size / n_train)
    if cfg.budget is None:
        return cfg.noise_multiplier, requested, q, None
    sigma = calibrate_sigma(cfg.budget, q, requested)
    cap = steps_until_budget(cfg.budget, q, sigma).steps
    return sigma, cap, q, cfg.budget


def _dp_config(cfg: EvalConfig, sigma: float) -> DpTrainConfig:
    return DpTrainConfig(
        clip_norm=cfg.clip_norm, noise_multiplier=sigma,
        learning_rate=cfg.learning_rate, momentum=cfg.momentum,
        weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
        non_private=sigma == 0)


def _train_once(build_model, cfg: EvalConfig, sigma, steps, q, budget,
                train_x, train_y, repeat_seed: int):
    """One independent repeat: fresh init, fresh noise, fresh shuffles."""
    ss = np.random.SeedSequence(repeat_seed)
    k_init, k_data, k_noise = ss.spawn(3)
    model = build_model(int(k_init.generate_state(1)[0]) % (2**31))
    g_data = np.random.default_rng(k_data)
    g_noise = torch.Generator().manual_seed(int(k_noise.generate_state(1)[0]))
    ledger = RdpLedger(q=q, sigma=sigma) if budget is not None else None
    trainer = DpSgdTrainer(model, _dp_config(cfg, sigma), generator=g_noise,
                           ledger=ledger, budget=budget)
    x = torch.as_tensor(train_x)
    y = torch.as_tensor(train_y)
    n = len(x)
    done = 0
    while done < steps:
        perm = g_data.permutation(n)
        for i in range(0, n, cfg.batch_size):
            if done >= steps:
                break
            idx = perm[i:i + cfg.batch_size]
            metrics = trainer.step(x[idx], y[idx])
            if metrics.status == "budget_exhausted":
                done = steps
                break
            done += 1
    if budget is not None:
        realized = to_eps_delta(trainer.ledger, budget.delta)[0].epsilon
        if realized > budget.epsilon:
            raise ValidationError(
                f"ledger reports epsilon {realized} > budget {budget.epsilon}")
        assert trainer.step_count == trainer.ledger.steps
    else:
        realized = None
    return model, trainer.step_count, realized


def train_final(arch: Architecture, cfg: EvalConfig, bundle: DatasetBundle,
                component: str | None = None,
                searched_on: str | None = None) -> ResultRecord:
    """Train `arch` from scratch `repeats` times under the budget."""
    info = DATASET_INFO[cfg.dataset]
    spec = build_model_spec(arch, cfg.channels(), 1, 10, info["shape"])
    return _train_final_impl(
        lambda seed: build_network(spec, seed), arch_id(arch),
        spec.param_count, cfg, bundle, component, searched_on)


def _train_final_impl(build_model, ident, param_count, cfg, bundle,
                      component=None, searched_on=None) -> ResultRecord:
    train_x, train_y = _subset(bundle.train_x, bundle.train_y,
                               cfg.train_subset, cfg.seed)
    sigma, steps, q, budget = _derive_sigma_and_steps(cfg, len(train_x))
    test_x = torch.as_tensor(bundle.test_x)
    test_y = torch.as_tensor(bundle.test_y)

    t0 = time.monotonic()
    accs, realized_eps, steps_run = [], [], []
    failures = 0
    repeat_seeds = [int(s.generate_state(1)[0])
                    for s in np.random.SeedSequence(cfg.seed).spawn(cfg.repeats)]
    for rs in repeat_seeds:
        try:
            model, n_steps, realized = _train_once(
                build_model, cfg, sigma, steps, q, budget,
                train_x, train_y, rs)
        except TrainingDivergedError:
            failures += 1
            continue
        accs.append(evaluate_accuracy(model, test_x, test_y))
        realized_eps.append(realized)
        steps_run.append(n_steps)
    if not accs:
        raise TrainingDivergedError(
            f"all {cfg.repeats} repeats diverged for {ident}")

    mean = float(np.mean(accs))
    std = float(np.std(accs, ddof=1)) if len(accs) >= 2 else None
    return ResultRecord(
        arch_id=ident, dataset=cfg.dataset,
        epsilon=None if budget is None else budget.epsilon,
        delta=None if budget is None else budget.delta,
        mean_accuracy=mean, std_accuracy=std, accuracies=accs,
        param_count=param_count, wall_time_s=time.monotonic() - t0,
        realized_epsilon=(None if budget is None
                          else max(e for e in realized_eps)),
        sigma=sigma, steps=steps, repeats=cfg.repeats,
        component=component, searched_on=searched_on)


# ---------------------------------------------------------------------------
# Architecture statistics (operation frequencies)


@dataclass
class FrequencyTable:
    counts: dict            # op name -> raw count over all edges
    overall: dict           # op name -> count / total edges
    activations: dict       # conv kinds normalized among themselves
    poolings: dict          # pool kinds normalized among themselves
    n_samples: int


def op_frequency_stats(controller: Controller, n_samples: int,
                       generator: torch.Generator) -> FrequencyTable:
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    counts = {op: 0 for op in OperationId}
    with torch.no_grad():
        for _ in range(n_samples):
            trace = sample_trace(controller, generator)
            for code in trace.codes:
                counts[OperationId(code)] += 1
    total = sum(counts.values())
    conv_total = sum(c for op, c in counts.items() if op.is_conv)
    pool_total = sum(c for op, c in counts.items() if op.is_pool)

    def norm(sel, denom):
        return {op.name: (counts[op] / denom if denom else 0.0)
                for op in OperationId if sel(op)}

    return FrequencyTable(
        counts={op.name: counts[op] for op in OperationId},
        overall=norm(lambda op: True, total),
        activations=norm(lambda op: op.is_conv, conv_total),
        poolings=norm(lambda op: op.is_pool, pool_total),
        n_samples=n_samples)


# ---------------------------------------------------------------------------
# Component ablations


def replace_activations_uniform(arch: Architecture, activation: str) -> Architecture:
    """'only X' variant: every conv edge keeps topology, swaps activation."""
    if activation not in ACTIVATION_TO_OP:
        raise ValidationError(
            f"{activation!r} is not in the operation pool; pool activations "
            f"are {sorted(ACTIVATION_TO_OP)}")
    target = ACTIVATION_TO_OP[activation]
    return arch.replace_ops(lambda e, op: target if op.is_conv else op)


def replace_poolings_uniform(arch: Architecture, pooling: str) -> Architecture:
    target = POOLING_TO_OP[pooling]
    return arch.replace_ops(lambda e, op: target if op.is_pool else op)


def replace_randomly(arch: Architecture, kind: str, seed: int) -> Architecture:
    """Resample each activation (or pooling) independently and uniformly."""
    rng = np.random.default_rng(seed)
    conv_ops = [op for op in ACTIVATION_TO_OP.values()]
    pool_ops = list(POOLING_TO_OP.values())

    def swap(e, op):
        if kind == "activation" and op.is_conv:
            return conv_ops[int(rng.integers(len(conv_ops)))]
        if kind == "pooling" and op.is_pool:
            return pool_ops[int(rng.integers(len(pool_ops)))]
        return op

    if kind not in ("activation", "pooling"):
        raise ValidationError(f"unknown replacement kind {kind!r}")
    return arch.replace_ops(swap)


def ablation_component(base, component_set, cfg: EvalConfig,
                       bundle: DatasetBundle) -> list[ResultRecord]:
    """Train one variant per component under identical config and seeds.

    `base` is either the string "small_cnn" (fixed-CNN sweeps; components
    are activation names, or "pool:max"/"pool:avg") or an Architecture
    (uniform/random replacement; components like "only:selu", "pool:max",
    "random:activation").
    """
    records = []
    info = DATASET_INFO[cfg.dataset]
    for component in component_set:
        if base == "small_cnn":
            if component.startswith("pool:"):
                pooling = component.split(":", 1)[1]
                build = lambda seed, p=pooling: build_small_cnn(
                    info["shape"], seed, activation="tanh", pooling=p)
                n_params = sum(p.numel() for p in build(0).parameters())
            else:
                if component not in ABLATION_ACTIVATIONS:
                    raise ValidationError(f"unknown activation {component!r}")
                build = lambda seed, a=component: build_small_cnn(
                    info["shape"], seed, activation=a)
                n_params = sum(p.numel() for p in build(0).parameters())
            rec = _train_final_impl(build, f"small_cnn:{component}", n_params,
                                    cfg, bundle, component=component)
        else:
            if component.startswith("only:"):
                variant = replace_activations_uniform(
                    base, component.split(":", 1)[1])
            elif component.startswith("pool:"):
                variant = replace_poolings_uniform(
                    base, component.split(":", 1)[1])
            elif component.startswith("random:"):
                variant = replace_randomly(base, component.split(":", 1)[1],
                                           seed=cfg.seed)
            elif component == "original":
                variant = base
            else:
                raise ValidationError(f"unknown component {component!r}")
            rec = train_final(variant, cfg, bundle, component=component)
        records.append(rec)
    return records


# ---------------------------------------------------------------------------
# Transfer evaluation and the initialization sanity check


def transfer_eval(search_dataset: str, eval_dataset: str, cfg: EvalConfig,
                  bundle: DatasetBundle, store_dir) -> ResultRecord:
    """Rebuild the stored architecture for the target dataset and train it."""
    path = Path(store_dir) / f"arch_searched_on_{search_dataset}.json"
    if not path.exists():
        raise NotFoundError(
            f"no stored architecture for search dataset {search_dataset!r} "
            f"at {path}")
    arch = load_architecture(path)
    if cfg.dataset != eval_dataset:
        raise ValidationError("cfg.dataset must match eval_dataset")
    return train_final(arch, cfg, bundle, searched_on=search_dataset)


@dataclass
class SanityResult:
    mean_accuracy: float
    std_accuracy: float | None
    accuracies: list
    chance: float
    flagged: bool | None


def init_sanity_check(arch: Architecture, cfg: EvalConfig,
                      bundle: DatasetBundle, repeats: int | None = None) -> SanityResult:
    """Accuracy of fresh random initializations, no training at all."""
    repeats = cfg.repeats if repeats is None else repeats
    if repeats < 1:
        raise ValidationError("repeats must be >= 1")
    info = DATASET_INFO[cfg.dataset]
    spec = build_model_spec(arch, cfg.channels(), 1, 10, info["shape"])
    test_x = torch.as_tensor(bundle.test_x)
    test_y = torch.as_tensor(bundle.test_y)
    seeds = [int(s.generate_state(1)[0]) % (2**31)
             for s in np.random.SeedSequence(cfg.seed).spawn(repeats)]
    accs = [evaluate_accuracy(build_network(spec, s), test_x, test_y)
            for s in seeds]
    mean = float(np.mean(accs))
    std = float(np.std(accs, ddof=1)) if repeats >= 2 else None
    chance = 0.1
    flagged = None if std is None else bool(mean > chance + 3 * std)
    return SanityResult(mean_accuracy=mean, std_accuracy=std,
                        accuracies=accs, chance=chance, flagged=flagged)


# ---------------------------------------------------------------------------
# Results store: append-only JSONL with provenance


def append_record(path, record: ResultRecord | dict, config: dict | None = None):
    obj = record.to_json() if isinstance(record, ResultRecord) else dict(record)
    obj["package_version"] = __version__
    if config is not None:
        obj["config"] = config
    line = json.dumps(obj, sort_keys=True) + "\n"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line)
        fh.flush()
        os.fsync(fh.fileno())


def read_records(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
