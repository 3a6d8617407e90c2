"""The search loop: candidate DP training on shared weights + policy updates.

Every epoch runs T_n candidate iterations -- sample a batch, sample an
architecture (uniformly during warm-up, from the controller afterwards),
take one DP-SGD step on that architecture's slice of the shared weights --
and then, after warm-up, T_c controller iterations that score a sampled
architecture on a validation batch and apply one REINFORCE update. The
random-search baseline is the same loop with uniform sampling everywhere
and no controller updates.

All randomness flows through four named streams (data, arch, controller,
noise) derived from the config seed, so identical configs reproduce
identical logs and a checkpoint/resume round-trip is bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import __version__
from .accountant import RdpLedger, compose
from .controller import (
    Controller,
    sample as sample_trace,
    reinforce_update,
    save_controller,
)
from .dp_trainer import DpSgdTrainer, DpTrainConfig, evaluate_accuracy
from .errors import TrainingDivergedError, ValidationError
from .network import DpnasNetwork, conv_block
from .persist import read_container, write_container
from .search_space import (
    CONV_OPS,
    POOL_VERSION,
    Architecture,
    build_model_spec,
    encode,
    enumerate_edges,
    sample_uniform,
    save_architecture,
)

CHECKPOINT_KIND = "search-checkpoint"


@dataclass(frozen=True)
class SearchConfig:
    epochs: int = 100
    warmup_epochs: int = 25
    candidate_steps_per_epoch: int | None = None  # None: one pass over train
    controller_steps_per_epoch: int = 30
    candidate_batch_size: int = 300
    controller_batch_size: int = 64
    candidate_lr: float = 0.02
    controller_lr: float = 3e-4
    entropy_weight: float = 0.05
    clip_norm: float = 0.1
    noise_multiplier: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 2e-4
    split_ratio: float = 0.6
    seed: int = 0
    k: int = 5
    n_cells: int = 1
    stage_channels: tuple[int, int, int] = (32, 32, 64)
    num_classes: int = 10
    hidden_size: int = 64
    baseline_decay: float = 0.95
    archs_logged_per_epoch: int = 10
    log_eval_samples: int = 512
    derive_samples: int = 10

    def __post_init__(self):
        # equality admits the degenerate all-warm-up run (controller frozen)
        if not (0 <= self.warmup_epochs <= self.epochs):
            raise ValidationError("need 0 <= warmup_epochs <= epochs")
        if not (0 < self.split_ratio < 1):
            raise ValidationError("split_ratio must be in (0, 1)")
        if self.candidate_batch_size < 1 or self.controller_batch_size < 1:
            raise ValidationError("batch sizes must be >= 1")

    def dp_config(self) -> DpTrainConfig:
        return DpTrainConfig(
            clip_norm=self.clip_norm, noise_multiplier=self.noise_multiplier,
            learning_rate=self.candidate_lr, momentum=self.momentum,
            weight_decay=self.weight_decay, batch_size=self.candidate_batch_size)


class SharedWeights(nn.Module):
    """One conv block per (stage, edge, conv kind) plus always-shared parts.

    A sampled architecture's submodel references these modules directly, so
    training it mutates exactly the owning slice of this store.
    """

    def __init__(self, k: int, stage_channels, n_cells: int, num_classes: int,
                 input_shape, seed: int):
        super().__init__()
        self.k = k
        self.stage_channels = tuple(stage_channels)
        self.n_cells = n_cells
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.version = 0
        edges = enumerate_edges(k)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            c_in = self.input_shape[0]
            self.stem = nn.Conv2d(c_in, self.stage_channels[0], 3, padding=1)
            adapters = {}
            convs = {}
            cur_c = self.stage_channels[0]
            for s, width in enumerate(self.stage_channels):
                for n in range(n_cells):
                    adapters[f"{s}_{n}"] = nn.Conv2d(cur_c, width, 1)
                    cur_c = k * width
                for (i, j) in edges:
                    for op in CONV_OPS:
                        convs[f"{s}_{i}_{j}_{int(op)}"] = conv_block(width, op)
            self.adapters = nn.ModuleDict(adapters)
            self.convs = nn.ModuleDict(convs)
            self.classifier = nn.Linear(k * self.stage_channels[2], num_classes)

    def submodel(self, arch: Architecture) -> DpnasNetwork:
        """Network view of `arch` whose parameters live in this store."""
        if arch.k != self.k:
            raise ValidationError(f"architecture K={arch.k} != store K={self.k}")
        spec = build_model_spec(arch, self.stage_channels, self.n_cells,
                                self.num_classes, self.input_shape)
        edge_convs = []
        for s in range(3):
            stage = {}
            for (i, j), op in arch.edge_ops.items():
                if op.is_conv:
                    stage[(i, j)] = self.convs[f"{s}_{i}_{j}_{int(op)}"]
            edge_convs.append(stage)
        adapters = {(s, n): self.adapters[f"{s}_{n}"]
                    for s in range(3) for n in range(self.n_cells)}
        return DpnasNetwork(spec, stem=self.stem, adapters=adapters,
                            edge_convs=edge_convs, classifier=self.classifier)


class BatchStream:
    """Fixed-size shuffled batches drawn per epoch.

    `take(n)` returns exactly n index batches, drawing fresh permutations
    as needed. Leftover indices are discarded at the end of each call, so
    the only state that crosses an epoch (and hence a checkpoint) boundary
    is the generator itself.
    """

    def __init__(self, x: torch.Tensor, y: torch.Tensor, batch_size: int,
                 rng: np.random.Generator):
        self.x, self.y = x, y
        self.batch_size = batch_size
        self.rng = rng

    def take(self, count: int):
        batches: list = []
        while len(batches) < count:
            perm = self.rng.permutation(len(self.x))
            batches.extend(perm[i:i + self.batch_size]
                           for i in range(0, len(self.x), self.batch_size))
        for idx in batches[:count]:
            yield self.x[idx], self.y[idx]


@dataclass
class SearchResult:
    records: list
    controller: Controller | None
    shared: SharedWeights
    baseline: float | None
    ledger: RdpLedger
    final_arch: Architecture | None = None


def _named_generators(seed: int):
    ss = np.random.SeedSequence(seed)
    kids = ss.spawn(5)
    g_data = np.random.default_rng(kids[0])
    g_arch = np.random.default_rng(kids[1])
    g_ctrl = torch.Generator().manual_seed(int(kids[2].generate_state(1)[0]))
    g_noise = torch.Generator().manual_seed(int(kids[3].generate_state(1)[0]))
    init_seed = int(kids[4].generate_state(1)[0]) % (2**31)
    return g_data, g_arch, g_ctrl, g_noise, init_seed


class _SearchState:
    def __init__(self, cfg: SearchConfig, strategy: str, input_shape):
        g_data, g_arch, g_ctrl, g_noise, init_seed = _named_generators(cfg.seed)
        self.g_data, self.g_arch = g_data, g_arch
        self.g_ctrl, self.g_noise = g_ctrl, g_noise
        self.shared = SharedWeights(cfg.k, cfg.stage_channels, cfg.n_cells,
                                    cfg.num_classes, input_shape,
                                    seed=init_seed)
        if strategy == "rl":
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(init_seed + 1)
                self.controller = Controller(k=cfg.k,
                                             hidden_size=cfg.hidden_size)
            self.optimizer = torch.optim.Adam(self.controller.parameters(),
                                              lr=cfg.controller_lr)
        else:
            self.controller = None
            self.optimizer = None
        self.baseline = None
        self.momentum: dict = {}
        self.ledger = None  # created once the sampling rate is known
        self.epoch = 0
        self.records: list = []


def _param_names(module: nn.Module) -> dict:
    return {p: name for name, p in module.named_parameters()}


def _snapshot(model: nn.Module, momentum: dict):
    return [(p, p.detach().clone(),
             momentum[p].clone() if p in momentum else None)
            for p in model.parameters()]


def _restore(snapshot, momentum: dict):
    with torch.no_grad():
        for p, saved, buf in snapshot:
            p.copy_(saved)
            if buf is None:
                momentum.pop(p, None)
            else:
                momentum[p] = buf


def _log_epoch(state, cfg, strategy, phase, val_x, val_y):
    """Per-epoch statistic: accuracy of sampled architectures (Fig-3c style)."""
    n_eval = min(cfg.log_eval_samples, len(val_x))
    ex, ey = val_x[:n_eval], val_y[:n_eval]
    accs, arch_codes, entropies = [], [], []
    use_controller = strategy == "rl" and phase == "search"
    for _ in range(cfg.archs_logged_per_epoch):
        if use_controller:
            with torch.no_grad():
                trace = sample_trace(state.controller, state.g_ctrl)
            arch = trace.arch
            entropies.append(float(trace.entropies.mean()))
        else:
            arch = sample_uniform(cfg.k, state.g_arch)
        model = state.shared.submodel(arch)
        accs.append(evaluate_accuracy(model, ex, ey))
        arch_codes.append(encode(arch))
    entropy = (float(np.mean(entropies)) if entropies
               else float(math.log(10)))  # uniform sampling distribution
    record = {
        "record": "epoch",
        "epoch": state.epoch,
        "phase": phase,
        "mean_acc": float(np.mean(accs)),
        "std_acc": float(np.std(accs)),
        "sampled_archs": arch_codes,
        "controller_entropy": entropy,
    }
    state.records.append(record)
    return record


def _reward(shared, arch, x, y) -> float:
    model = shared.submodel(arch)
    try:
        acc = evaluate_accuracy(model, x, y)
    except Exception:
        return 0.0
    return acc if math.isfinite(acc) else 0.0


def run_search(cfg: SearchConfig, train_data, val_data, *, strategy="rl",
               out_dir=None, resume_from=None, progress=None,
               stop_after_epoch: int | None = None) -> SearchResult:
    """Execute the search; returns the trained controller, store, and log."""
    if strategy not in ("rl", "random"):
        raise ValidationError(f"unknown strategy {strategy!r}")
    train_x = torch.as_tensor(np.asarray(train_data.x))
    train_y = torch.as_tensor(np.asarray(train_data.y))
    val_x = torch.as_tensor(np.asarray(val_data.x))
    val_y = torch.as_tensor(np.asarray(val_data.y))
    input_shape = tuple(train_x.shape[1:])

    if resume_from is not None:
        state, saved_cfg, saved_strategy = resume_search(resume_from)
        if asdict(saved_cfg) != asdict(cfg) or saved_strategy != strategy:
            raise ValidationError(
                "resume config/strategy differs from checkpoint")
    else:
        state = _SearchState(cfg, strategy, input_shape)
        state.records.append({
            "record": "header",
            "package_version": __version__,
            "pool_version": POOL_VERSION,
            "strategy": strategy,
            "config": _config_json(cfg),
        })

    t_n = cfg.candidate_steps_per_epoch
    if t_n is None:
        t_n = math.ceil(len(train_x) / cfg.candidate_batch_size)
    if state.ledger is None:
        q = min(1.0, cfg.candidate_batch_size / len(train_x))
        state.ledger = RdpLedger(q=q, sigma=cfg.noise_multiplier)

    train_stream = BatchStream(train_x, train_y, cfg.candidate_batch_size,
                               state.g_data)
    val_stream = None
    dp_cfg = cfg.dp_config()

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    while state.epoch < cfg.epochs:
        state.epoch += 1
        warmup = state.epoch <= cfg.warmup_epochs
        phase = "warmup" if warmup else "search"

        skipped = 0
        for xb, yb in train_stream.take(t_n):
            if warmup or strategy == "random":
                arch = sample_uniform(cfg.k, state.g_arch)
            else:
                with torch.no_grad():
                    arch = sample_trace(state.controller, state.g_ctrl).arch
            model = state.shared.submodel(arch)
            snap = _snapshot(model, state.momentum)
            trainer = DpSgdTrainer(model, dp_cfg, generator=state.g_noise,
                                   ledger=state.ledger,
                                   momentum_store=state.momentum)
            try:
                trainer.step(xb, yb)
                state.ledger = trainer.ledger
            except TrainingDivergedError:
                _restore(snap, state.momentum)
                skipped += 1
                continue
        state.shared.version += 1

        if not warmup and strategy == "rl":
            if val_stream is None:
                val_stream = BatchStream(val_x, val_y,
                                         cfg.controller_batch_size,
                                         state.g_data)
            for xb, yb in val_stream.take(cfg.controller_steps_per_epoch):
                trace = sample_trace(state.controller, state.g_ctrl)
                reward = _reward(state.shared, trace.arch, xb, yb)
                state.baseline, _ = reinforce_update(
                    state.controller, state.optimizer, [trace], [reward],
                    state.baseline, cfg.entropy_weight,
                    baseline_decay=cfg.baseline_decay)

        record = _log_epoch(state, cfg, strategy, phase, val_x, val_y)
        if skipped:
            record["skipped_candidates"] = skipped
        if progress is not None:
            progress(record)
        if out_dir is not None:
            checkpoint_search(state, cfg, strategy, out_dir / "checkpoint.ckpt")
            _write_log(state.records, out_dir / "search_log.jsonl")
        if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
            break  # simulated interruption; checkpoint remains resumable

    final_arch = None
    if strategy == "rl" and state.epoch >= cfg.epochs:
        final_arch = derive_final(state.controller, state.shared,
                                  (val_x, val_y), cfg.derive_samples,
                                  state.g_ctrl,
                                  eval_samples=cfg.log_eval_samples)
        if out_dir is not None:
            save_architecture(final_arch, out_dir / "final_architecture.json")
            save_controller(out_dir / "controller.ckpt", state.controller,
                            state.baseline, state.g_ctrl)
    return SearchResult(records=state.records, controller=state.controller,
                        shared=state.shared, baseline=state.baseline,
                        ledger=state.ledger, final_arch=final_arch)


def random_search(cfg: SearchConfig, train_data, val_data, *, out_dir=None,
                  progress=None) -> SearchResult:
    """Identical loop with uniform sampling everywhere (Fig-3c baseline)."""
    return run_search(cfg, train_data, val_data, strategy="random",
                      out_dir=out_dir, progress=progress)


def derive_final(controller: Controller, shared: SharedWeights, val_xy,
                 m: int, generator: torch.Generator,
                 eval_samples: int = 512) -> Architecture:
    """Sample m architectures, return the best by shared-weight accuracy.

    Ties break toward higher total log-probability, then sample order.
    """
    if m < 1:
        raise ValidationError("need m >= 1 samples")
    val_x, val_y = val_xy
    n_eval = min(eval_samples, len(val_x))
    ex, ey = val_x[:n_eval], val_y[:n_eval]
    best = None
    for idx in range(m):
        with torch.no_grad():
            trace = sample_trace(controller, generator)
        acc = _reward(shared, trace.arch, ex, ey)
        key = (acc, trace.total_log_prob, -idx)
        if best is None or key > best[0]:
            best = (key, trace.arch)
    return best[1]


# ---------------------------------------------------------------------------
# Checkpoint container


def _config_json(cfg: SearchConfig) -> dict:
    d = asdict(cfg)
    d["stage_channels"] = list(d["stage_channels"])
    return d


def _write_log(records, path) -> None:
    tmp = Path(path).with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    tmp.replace(path)


def checkpoint_search(state: _SearchState, cfg: SearchConfig, strategy: str,
                      path) -> None:
    names = _param_names(state.shared)
    momentum = {names[p]: buf for p, buf in state.momentum.items()
                if p in names}
    obj = {
        "kind": CHECKPOINT_KIND,
        "package_version": __version__,
        "pool_version": POOL_VERSION,
        "strategy": strategy,
        "config": _config_json(cfg),
        "epoch": state.epoch,
        "records": state.records,
        "shared_state": state.shared.state_dict(),
        "shared_meta": {
            "k": state.shared.k,
            "stage_channels": list(state.shared.stage_channels),
            "n_cells": state.shared.n_cells,
            "num_classes": state.shared.num_classes,
            "input_shape": list(state.shared.input_shape),
            "version": state.shared.version,
        },
        "controller_state": (None if state.controller is None
                             else state.controller.state_dict()),
        "optimizer_state": (None if state.optimizer is None
                            else state.optimizer.state_dict()),
        "baseline": state.baseline,
        "momentum": momentum,
        "ledger": (None if state.ledger is None else {
            "q": state.ledger.q, "sigma": state.ledger.sigma,
            "steps": state.ledger.steps, "orders": list(state.ledger.orders),
        }),
        "rng": {
            "data": state.g_data.bit_generator.state,
            "arch": state.g_arch.bit_generator.state,
            "ctrl": state.g_ctrl.get_state(),
            "noise": state.g_noise.get_state(),
        },
    }
    write_container(path, obj)


def resume_search(path):
    """Rebuild a full search state; bit-identical continuation by contract."""
    obj = read_container(path)
    if obj.get("kind") != CHECKPOINT_KIND:
        raise ValidationError(f"{path} is not a search checkpoint")
    if obj.get("pool_version") != POOL_VERSION:
        raise ValidationError(
            f"checkpoint pool {obj.get('pool_version')!r} != {POOL_VERSION!r}")
    cfg_dict = dict(obj["config"])
    cfg_dict["stage_channels"] = tuple(cfg_dict["stage_channels"])
    cfg = SearchConfig(**cfg_dict)
    strategy = obj["strategy"]
    meta = obj["shared_meta"]

    state = _SearchState.__new__(_SearchState)
    state.shared = SharedWeights(meta["k"], meta["stage_channels"],
                                 meta["n_cells"], meta["num_classes"],
                                 meta["input_shape"], seed=0)
    state.shared.load_state_dict(obj["shared_state"])
    state.shared.version = meta["version"]
    if strategy == "rl":
        state.controller = Controller(k=cfg.k, hidden_size=cfg.hidden_size)
        state.controller.load_state_dict(obj["controller_state"])
        state.optimizer = torch.optim.Adam(state.controller.parameters(),
                                           lr=cfg.controller_lr)
        state.optimizer.load_state_dict(obj["optimizer_state"])
    else:
        state.controller = None
        state.optimizer = None
    state.baseline = obj["baseline"]
    names = dict(state.shared.named_parameters())
    state.momentum = {names[n]: buf for n, buf in obj["momentum"].items()}
    led = obj["ledger"]
    state.ledger = None if led is None else compose(
        RdpLedger(q=led["q"], sigma=led["sigma"], orders=tuple(led["orders"])),
        led["steps"])
    state.g_data = np.random.default_rng()
    state.g_data.bit_generator.state = obj["rng"]["data"]
    state.g_arch = np.random.default_rng()
    state.g_arch.bit_generator.state = obj["rng"]["arch"]
    state.g_ctrl = torch.Generator()
    state.g_ctrl.set_state(obj["rng"]["ctrl"])
    state.g_noise = torch.Generator()
    state.g_noise.set_state(obj["rng"]["noise"])
    state.epoch = obj["epoch"]
    state.records = obj["records"]
    return state, cfg, strategy
