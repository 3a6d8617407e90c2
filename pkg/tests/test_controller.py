"""Controller tests: sampling distribution, surrogate gradient, convergence."""

import math

import numpy as np
import pytest
import torch
from scipy import stats

from dpnas.controller import (
    Controller,
    build_controller,
    load_controller,
    reinforce_update,
    sample,
    save_controller,
    score,
    surrogate_objective,
)
from dpnas.errors import PoolVersionError, ValidationError
from dpnas.search_space import decode, encode

from oracles import finite_diff_grad


class TestSampling:
    def test_initial_policy_is_uniform(self):
        ctrl = build_controller(k=5, seed=0)
        gen = torch.Generator().manual_seed(1)
        counts = np.zeros(10)
        n = 10_000 // 15 + 1  # ~10^4 action draws
        for _ in range(n):
            trace = sample(ctrl, gen)
            for c in trace.codes:
                counts[c] += 1
        freqs = counts / counts.sum()
        assert np.all(np.abs(freqs - 0.1) < 0.01)
        chi = stats.chisquare(counts)
        assert chi.pvalue > 0.01

    def test_initial_entropy_sum(self):
        ctrl = build_controller(k=5, seed=0)
        trace = sample(ctrl, torch.Generator().manual_seed(2))
        total = float(trace.entropies.detach().sum())
        assert total == pytest.approx(15 * math.log(10), rel=0.01)

    def test_per_step_probabilities_normalized(self):
        ctrl = build_controller(k=3, seed=4)
        trace = score(ctrl, [0] * ctrl.sequence_length)
        # entropy <= log 10 and log-probs <= 0 imply a proper distribution;
        # check normalization directly through a forward pass
        token = torch.full((1,), 10, dtype=torch.long)
        logits, _ = ctrl._step(token, None)
        assert float(torch.softmax(logits, -1).sum()) == pytest.approx(1.0, abs=1e-6)
        assert torch.all(trace.log_probs <= 0)
        assert torch.all(trace.entropies <= math.log(10) + 1e-6)
        assert torch.all(trace.entropies >= 0)

    def test_fixed_seed_reproduces_trace(self):
        ctrl = build_controller(k=5, seed=7)
        a = sample(ctrl, torch.Generator().manual_seed(3))
        b = sample(ctrl, torch.Generator().manual_seed(3))
        assert a.codes == b.codes
        assert torch.equal(a.log_probs, b.log_probs)

    def test_sampled_arch_round_trips(self):
        ctrl = build_controller(k=5, seed=8)
        gen = torch.Generator().manual_seed(9)
        for _ in range(50):
            trace = sample(ctrl, gen)
            assert decode(encode(trace.arch), k=5) == trace.arch
            assert trace.codes == tuple(encode(trace.arch))

    def test_toy_sequence_length(self):
        ctrl = build_controller(k=None, sequence_length=2, hidden_size=8)
        trace = sample(ctrl, torch.Generator().manual_seed(0))
        assert len(trace.codes) == 2
        assert trace.arch is None
        with pytest.raises(ValidationError):
            Controller(k=5, sequence_length=7)


class TestReinforce:
    def test_zero_advantage_leaves_parameters_unchanged(self):
        ctrl = build_controller(k=2, hidden_size=8, seed=1)
        opt = torch.optim.Adam(ctrl.parameters(), lr=1e-3)
        gen = torch.Generator().manual_seed(5)
        traces = [sample(ctrl, gen) for _ in range(4)]
        before = {k: v.clone() for k, v in ctrl.state_dict().items()}
        # rewards all equal to the baseline, no entropy bonus -> zero gradient
        reinforce_update(ctrl, opt, traces, [0.5] * 4, baseline=0.5,
                         entropy_weight=0.0)
        for k, v in ctrl.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_surrogate_gradient_matches_finite_differences(self):
        ctrl = build_controller(k=None, sequence_length=2, hidden_size=6,
                                seed=3).double()
        # non-degenerate logits so gradients flow everywhere
        with torch.no_grad():
            g = torch.Generator().manual_seed(11)
            for p in ctrl.parameters():
                p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
        gen = torch.Generator().manual_seed(12)
        traces = [sample(ctrl, gen) for _ in range(3)]
        codes = [t.codes for t in traces]
        rewards = [1.0, 0.2, -0.4]
        baseline, went = 0.3, 0.05

        names = [n for n, _ in ctrl.named_parameters()]
        shapes = {n: p.shape for n, p in ctrl.named_parameters()}
        flat0 = torch.cat([p.detach().flatten()
                           for p in ctrl.parameters()]).numpy()

        def set_theta(model, theta):
            offset = 0
            with torch.no_grad():
                for n, p in model.named_parameters():
                    k = p.numel()
                    p.copy_(torch.tensor(theta[offset:offset + k],
                                         dtype=p.dtype).view(shapes[n]))
                    offset += k

        def objective_at(theta):
            m = build_controller(k=None, sequence_length=2, hidden_size=6,
                                 seed=3).double()
            set_theta(m, theta)
            with torch.no_grad():
                ts = [score(m, c) for c in codes]
                return float(surrogate_objective(ts, rewards, baseline, went))

        fd = finite_diff_grad(objective_at, flat0, h=1e-4)

        ts = [score(ctrl, c) for c in codes]
        obj = surrogate_objective(ts, rewards, baseline, went)
        obj.backward()
        got = torch.cat([p.grad.flatten() for p in ctrl.parameters()]).numpy()
        denom = np.maximum(np.abs(fd), 1e-6)
        assert np.all(np.abs(got - fd) / denom < 1e-3)

    def test_bandit_converges_to_best_op(self):
        # sequence length 1, reward 1 for op 0: 500 updates -> P(op 0) > 0.9
        ctrl = build_controller(k=1, hidden_size=16, seed=2)
        opt = torch.optim.Adam(ctrl.parameters(), lr=0.02)
        gen = torch.Generator().manual_seed(6)
        baseline = None
        for _ in range(500):
            traces = [sample(ctrl, gen) for _ in range(8)]
            rewards = [1.0 if t.codes[0] == 0 else 0.0 for t in traces]
            baseline, _ = reinforce_update(ctrl, opt, traces, rewards,
                                           baseline, entropy_weight=0.0)
        token = torch.full((1,), 10, dtype=torch.long)
        logits, _ = ctrl._step(token, None)
        p0 = float(torch.softmax(logits, -1)[0, 0])
        assert p0 > 0.9

    def test_entropy_bonus_pushes_entropy_up(self):
        # start from a deliberately peaked policy; with zero rewards and a
        # large entropy weight the per-step entropy must recover
        ctrl = build_controller(k=1, hidden_size=16, seed=4)
        with torch.no_grad():
            g = torch.Generator().manual_seed(13)
            ctrl.proj.weight.copy_(
                2.0 * torch.randn(ctrl.proj.weight.shape, generator=g))
            ctrl.proj.bias.copy_(
                2.0 * torch.randn(ctrl.proj.bias.shape, generator=g))
        opt = torch.optim.Adam(ctrl.parameters(), lr=0.01)
        gen = torch.Generator().manual_seed(14)
        entropies = []
        baseline = None
        for _ in range(300):
            traces = [sample(ctrl, gen) for _ in range(8)]
            baseline, stats_ = reinforce_update(
                ctrl, opt, traces, [0.0] * 8, baseline, entropy_weight=10.0)
            entropies.append(stats_.mean_entropy)
        early = np.mean(entropies[:10])
        late = np.mean(entropies[-10:])
        assert late >= early - 0.02
        assert late > early  # started well below log 10, must increase

    def test_trace_and_reward_counts_must_match(self):
        ctrl = build_controller(k=1, hidden_size=8)
        t = sample(ctrl, torch.Generator().manual_seed(0))
        with pytest.raises(ValidationError):
            surrogate_objective([t], [1.0, 2.0], 0.0, 0.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        ctrl = build_controller(k=5, seed=9)
        gen = torch.Generator().manual_seed(21)
        sample(ctrl, gen)  # advance rng so the saved state is nontrivial
        path = tmp_path / "controller.ckpt"
        save_controller(path, ctrl, baseline=0.37, generator=gen)
        loaded, baseline, gen2 = load_controller(path)
        assert baseline == 0.37
        for a, b in zip(ctrl.parameters(), loaded.parameters()):
            assert torch.equal(a, b)
        ta = sample(ctrl, gen)
        tb = sample(loaded, gen2)
        assert ta.codes == tb.codes

    def test_pool_version_mismatch_refused(self, tmp_path):
        from dpnas.persist import read_container, write_container

        ctrl = build_controller(k=5, seed=9)
        path = tmp_path / "controller.ckpt"
        save_controller(path, ctrl, 0.0, torch.Generator().manual_seed(0))
        obj = read_container(path)
        obj["pool_version"] = "dpnas-v999"
        write_container(path, obj)
        with pytest.raises(PoolVersionError):
            load_controller(path)
