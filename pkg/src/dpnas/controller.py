"""Recurrent policy over operation sequences, trained by REINFORCE.

One LSTM cell unrolled for one step per cell edge: step t consumes the
embedding of the step t-1 choice (a start token at t=0) and emits 10
logits. The output projection starts at zero so the initial policy is
exactly uniform. Updates ascend the advantage-weighted sum of log
probabilities with an entropy bonus folded into the advantage; the
baseline is an exponential moving average of rewards.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ControllerDivergedError, PoolVersionError, ValidationError
from .persist import read_container, write_container
from .search_space import N_OPS, POOL_VERSION, Architecture, decode, num_edges

START_TOKEN = N_OPS  # extra embedding row fed at the first step


class Controller(nn.Module):
    def __init__(self, k: int | None = 5, hidden_size: int = 64,
                 sequence_length: int | None = None, vocab: int = N_OPS):
        super().__init__()
        if sequence_length is None:
            if k is None:
                raise ValidationError("need k or an explicit sequence_length")
            sequence_length = num_edges(k)
        elif k is not None and sequence_length != num_edges(k):
            raise ValidationError(
                f"sequence_length {sequence_length} != K(K+1)/2 for K={k}")
        self.k = k
        self.sequence_length = sequence_length
        self.hidden_size = hidden_size
        self.vocab = vocab
        self.embedding = nn.Embedding(vocab + 1, hidden_size)
        self.cell = nn.LSTMCell(hidden_size, hidden_size)
        self.proj = nn.Linear(hidden_size, vocab)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def _step(self, token, state):
        inp = self.embedding(token)
        h, c = self.cell(inp, state)
        logits = self.proj(h)
        return logits, (h, c)

    def _rollout(self, choose):
        """Shared autoregressive loop; `choose(probs, t)` picks the action."""
        device = self.proj.weight.device
        token = torch.full((1,), START_TOKEN, dtype=torch.long, device=device)
        state = None
        codes, log_probs, entropies = [], [], []
        for t in range(self.sequence_length):
            logits, state = self._step(token, state)
            log_p = torch.log_softmax(logits, dim=-1)
            probs = log_p.exp()
            action = choose(probs, t)
            codes.append(int(action))
            log_probs.append(log_p[0, action])
            entropies.append(-(probs * log_p).sum())
            token = torch.full((1,), int(action), dtype=torch.long, device=device)
        return codes, torch.stack(log_probs), torch.stack(entropies)


@dataclass
class SampleTrace:
    """One sampled operation sequence plus the quantities REINFORCE needs.

    log_probs and entropies stay attached to the policy graph so an update
    can backpropagate through them; arch is populated when the controller
    was built for a concrete K.
    """

    codes: tuple[int, ...]
    log_probs: torch.Tensor
    entropies: torch.Tensor
    arch: Architecture | None

    def __post_init__(self):
        n = len(self.codes)
        if self.log_probs.shape != (n,) or self.entropies.shape != (n,):
            raise ValidationError("trace lengths disagree")

    @property
    def total_log_prob(self) -> float:
        return float(self.log_probs.detach().sum())


def sample(controller: Controller, generator: torch.Generator) -> SampleTrace:
    def choose(probs, _t):
        return int(torch.multinomial(probs[0], 1, generator=generator))

    codes, log_probs, entropies = controller._rollout(choose)
    arch = decode(codes, k=controller.k) if controller.k is not None else None
    return SampleTrace(codes=tuple(codes), log_probs=log_probs,
                       entropies=entropies, arch=arch)


def score(controller: Controller, codes) -> SampleTrace:
    """Teacher-forced pass: log-probs/entropies of a given sequence."""
    codes = list(codes)
    if len(codes) != controller.sequence_length:
        raise ValidationError("sequence length mismatch")

    def choose(_probs, t):
        return codes[t]

    out_codes, log_probs, entropies = controller._rollout(choose)
    arch = decode(codes, k=controller.k) if controller.k is not None else None
    return SampleTrace(codes=tuple(out_codes), log_probs=log_probs,
                       entropies=entropies, arch=arch)


def surrogate_objective(traces, rewards, baseline: float,
                        entropy_weight: float) -> torch.Tensor:
    """Mean over traces of (reward - baseline) * sum log p + w * mean entropy.

    Ascending this maximizes expected reward plus weighted policy entropy:
    the score-function term reinforces high-reward sequences and the
    entropy term is differentiated directly. (Folding the entropy into the
    advantage instead would multiply its gradient by the negative log-prob
    sum and drive entropy down.)
    """
    if len(traces) != len(rewards) or not traces:
        raise ValidationError("need equally many traces and rewards")
    terms = []
    for trace, reward in zip(traces, rewards):
        terms.append((reward - baseline) * trace.log_probs.sum()
                     + entropy_weight * trace.entropies.mean())
    return torch.stack(terms).mean()


@dataclass
class UpdateStats:
    surrogate: float
    mean_reward: float
    mean_entropy: float
    baseline: float


def reinforce_update(controller: Controller, optimizer, traces, rewards,
                     baseline: float | None, entropy_weight: float,
                     baseline_decay: float = 0.95):
    """One policy-gradient ascent step; returns the updated baseline."""
    mean_reward = float(sum(rewards)) / len(rewards)
    if baseline is None:
        baseline = mean_reward
    objective = surrogate_objective(traces, rewards, baseline, entropy_weight)
    optimizer.zero_grad(set_to_none=True)
    (-objective).backward()
    for name, p in controller.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise ControllerDivergedError(f"non-finite gradient in {name}")
    optimizer.step()
    new_baseline = baseline_decay * baseline + (1 - baseline_decay) * mean_reward
    mean_entropy = float(torch.stack(
        [t.entropies.detach().mean() for t in traces]).mean())
    return new_baseline, UpdateStats(surrogate=float(objective.detach()),
                                     mean_reward=mean_reward,
                                     mean_entropy=mean_entropy,
                                     baseline=new_baseline)


def build_controller(k: int = 5, hidden_size: int = 64, seed: int = 0,
                     sequence_length: int | None = None) -> Controller:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Controller(k=k, hidden_size=hidden_size,
                          sequence_length=sequence_length)


def save_controller(path, controller: Controller, baseline: float | None,
                    generator: torch.Generator) -> None:
    write_container(path, {
        "kind": "controller",
        "pool_version": POOL_VERSION,
        "k": controller.k,
        "hidden_size": controller.hidden_size,
        "sequence_length": controller.sequence_length,
        "state_dict": controller.state_dict(),
        "baseline": baseline,
        "rng_state": generator.get_state(),
    })


def load_controller(path):
    """Returns (controller, baseline, generator). Pool mismatch refuses."""
    obj = read_container(path)
    if obj.get("pool_version") != POOL_VERSION:
        raise PoolVersionError(
            f"controller checkpoint speaks pool {obj.get('pool_version')!r}, "
            f"this build speaks {POOL_VERSION!r}")
    controller = Controller(k=obj["k"], hidden_size=obj["hidden_size"],
                            sequence_length=obj["sequence_length"])
    controller.load_state_dict(obj["state_dict"])
    generator = torch.Generator()
    generator.set_state(obj["rng_state"])
    return controller, obj["baseline"], generator
