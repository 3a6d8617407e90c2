"""Differentially private training steps.

Per-example gradients are taken with ``torch.func`` (vmap over a
single-example loss), clipped to a fixed l2 norm, summed, noised with
Gaussian noise scaled by sigma * clip_norm, and averaged. The trainer
applies weight decay and momentum at update time -- after clipping and
noising -- so neither consumes per-example sensitivity. Every weight
update increments the attached RDP ledger by exactly one step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call, grad_and_value, vmap

from .accountant import PrivacyBudget, RdpLedger, compose, to_eps_delta
from .errors import TrainingDivergedError, ValidationError


@dataclass(frozen=True)
class DpTrainConfig:
    clip_norm: float
    noise_multiplier: float
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 2e-4
    batch_size: int = 300
    non_private: bool = False

    def __post_init__(self):
        if not (self.clip_norm > 0):
            raise ValidationError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.noise_multiplier < 0:
            raise ValidationError("noise_multiplier must be >= 0")
        if self.noise_multiplier == 0 and not self.non_private:
            raise ValidationError(
                "noise_multiplier 0 requires explicit non_private mode")
        if not (self.learning_rate >= 0):
            raise ValidationError("learning_rate must be >= 0")
        if not (0 <= self.momentum < 1):
            raise ValidationError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


def _named_params(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v for k, v in model.named_parameters()}


def per_example_grads(model: nn.Module, x: torch.Tensor, y: torch.Tensor):
    """Gradients of the single-example loss, one per batch element.

    Returns (grads, losses): grads maps parameter name -> tensor with a
    leading batch dimension; losses is the per-example loss vector.
    """
    if x.shape[0] == 0:
        raise ValidationError("batch must be nonempty")
    params = {k: v.detach() for k, v in model.named_parameters()}
    buffers = {k: v.detach() for k, v in model.named_buffers()}

    def single_loss(p, xi, yi):
        out = functional_call(model, {**p, **buffers}, (xi.unsqueeze(0),))
        return F.cross_entropy(out, yi.unsqueeze(0))

    grads, losses = vmap(grad_and_value(single_loss),
                         in_dims=(None, 0, 0))(params, x, y)
    return grads, losses


def per_example_grads_microbatch(model: nn.Module, x: torch.Tensor,
                                 y: torch.Tensor):
    """Reference path: microbatches of one through ordinary autograd."""
    names = list(_named_params(model))
    out: dict[str, list] = {k: [] for k in names}
    losses = []
    for i in range(x.shape[0]):
        model.zero_grad(set_to_none=True)
        loss = F.cross_entropy(model(x[i:i + 1]), y[i:i + 1])
        loss.backward()
        losses.append(loss.detach())
        for k, p in model.named_parameters():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            out[k].append(g.detach().clone())
    model.zero_grad(set_to_none=True)
    return ({k: torch.stack(v) for k, v in out.items()},
            torch.stack(losses))


def per_example_norms(grads: dict[str, torch.Tensor]) -> torch.Tensor:
    sq = None
    for g in grads.values():
        s = g.flatten(1).pow(2).sum(dim=1)
        sq = s if sq is None else sq + s
    return sq.sqrt()


def clip_grads(grads: dict[str, torch.Tensor], clip_norm: float):
    """Scale each example's gradient by min(1, C / ||g||); returns norms too."""
    if not (clip_norm > 0):
        raise ValidationError(f"clip_norm must be > 0, got {clip_norm}")
    norms = per_example_norms(grads)
    if math.isinf(clip_norm):
        return {k: g.clone() for k, g in grads.items()}, norms
    factors = torch.clamp(clip_norm / norms.clamp_min(1e-12), max=1.0)
    clipped = {}
    for k, g in grads.items():
        shape = (-1,) + (1,) * (g.dim() - 1)
        clipped[k] = g * factors.view(shape)
    return clipped, norms


def noisy_aggregate(clipped: dict[str, torch.Tensor], clip_norm: float,
                    sigma: float, generator: torch.Generator):
    """(1/B) * (sum_i g_i + N(0, sigma^2 C^2 I)); exact mean when sigma = 0."""
    b = next(iter(clipped.values())).shape[0]
    if b < 1:
        raise ValidationError("need at least one clipped gradient")
    if sigma > 0 and math.isinf(clip_norm):
        raise ValidationError("infinite clip norm admits no finite noise scale")
    out = {}
    for k, g in clipped.items():
        total = g.sum(dim=0)
        if sigma > 0:
            noise = torch.randn(total.shape, generator=generator,
                                dtype=total.dtype) * (sigma * clip_norm)
            total = total + noise
        out[k] = total / b
    return out


@dataclass
class StepMetrics:
    step: int
    loss: float
    mean_grad_norm: float
    clipped_fraction: float
    epsilon_so_far: float | None
    status: str = "ok"

    def to_record(self) -> dict:
        return {"step": self.step, "loss": self.loss,
                "mean_grad_norm": self.mean_grad_norm,
                "clipped_fraction": self.clipped_fraction,
                "epsilon_so_far": self.epsilon_so_far}


class MetricsWriter:
    """JSON-lines sink, one record per training step."""

    def __init__(self, path):
        self._fh = open(path, "a", encoding="utf-8")

    def __call__(self, record: dict):
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


class DpSgdTrainer:
    """Owns the update rule, the momentum state, and the privacy ledger.

    A budget may be attached; in that case a step that would exceed it is
    refused with a 'budget_exhausted' status (state intact) rather than an
    exception, so callers can finish cleanly.
    """

    def __init__(self, model: nn.Module, cfg: DpTrainConfig, *,
                 generator: torch.Generator, ledger: RdpLedger | None = None,
                 budget: PrivacyBudget | None = None, metrics_sink=None,
                 momentum_store: dict | None = None):
        if budget is not None and ledger is None:
            raise ValidationError("a budget requires an attached ledger")
        self.model = model
        self.cfg = cfg
        self.generator = generator
        self.ledger = ledger
        self.budget = budget
        self.metrics_sink = metrics_sink
        self.step_count = 0
        # keyed by parameter object so shared weights keep one velocity
        self._momentum = momentum_store if momentum_store is not None else {}

    @property
    def epsilon_so_far(self) -> float | None:
        if self.ledger is None or self.budget is None:
            return None
        return to_eps_delta(self.ledger, self.budget.delta)[0].epsilon

    def _would_exceed_budget(self) -> bool:
        if self.budget is None:
            return False
        eps_next = to_eps_delta(compose(self.ledger, 1),
                                self.budget.delta)[0].epsilon
        return eps_next > self.budget.epsilon

    def step(self, x: torch.Tensor, y: torch.Tensor) -> StepMetrics:
        if self._would_exceed_budget():
            return StepMetrics(step=self.step_count, loss=float("nan"),
                               mean_grad_norm=float("nan"),
                               clipped_fraction=float("nan"),
                               epsilon_so_far=self.epsilon_so_far,
                               status="budget_exhausted")

        grads, losses = per_example_grads(self.model, x, y)
        if not torch.isfinite(losses).all():
            raise TrainingDivergedError(
                f"non-finite loss at step {self.step_count}",
                step=self.step_count)

        clipped, norms = clip_grads(grads, self.cfg.clip_norm)
        update = noisy_aggregate(clipped, self.cfg.clip_norm,
                                 self.cfg.noise_multiplier, self.generator)

        with torch.no_grad():
            for name, p in self.model.named_parameters():
                g = update[name]
                if self.cfg.weight_decay:
                    g = g + self.cfg.weight_decay * p
                if self.cfg.momentum:
                    buf = self._momentum.get(p)
                    buf = g.clone() if buf is None else buf.mul_(
                        self.cfg.momentum).add_(g)
                    self._momentum[p] = buf
                    g = buf
                p.add_(g, alpha=-self.cfg.learning_rate)
                if not torch.isfinite(p).all():
                    raise TrainingDivergedError(
                        f"non-finite weights in {name} at step "
                        f"{self.step_count}", step=self.step_count)

        if self.ledger is not None:
            self.ledger = compose(self.ledger, 1)
        self.step_count += 1

        clip = self.cfg.clip_norm
        metrics = StepMetrics(
            step=self.step_count,
            loss=float(losses.mean()),
            mean_grad_norm=float(norms.mean()),
            clipped_fraction=float((norms > clip).float().mean())
            if not math.isinf(clip) else 0.0,
            epsilon_so_far=self.epsilon_so_far)
        if self.metrics_sink is not None:
            self.metrics_sink(metrics.to_record())
        return metrics


def evaluate_accuracy(model: nn.Module, x: torch.Tensor, y: torch.Tensor,
                      batch_size: int = 1024) -> float:
    """Fraction of argmax-correct predictions; order-independent."""
    if x.shape[0] == 0:
        raise ValidationError("dataset must be nonempty")
    correct = 0
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            logits = model(x[i:i + batch_size])
            correct += int((logits.argmax(dim=1) == y[i:i + batch_size]).sum())
    return correct / x.shape[0]
