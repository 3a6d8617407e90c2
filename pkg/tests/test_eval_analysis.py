"""Budgeted evaluation, frequency statistics, ablation plumbing, sanity."""

import json
import math

import numpy as np
import pytest
import torch
from scipy import stats

from dpnas.accountant import PrivacyBudget
from dpnas.controller import build_controller
from dpnas.data import load_dataset
from dpnas.errors import NotFoundError, ValidationError
from dpnas.eval_analysis import (
    EvalConfig,
    ResultRecord,
    ablation_component,
    append_record,
    arch_id,
    init_sanity_check,
    op_frequency_stats,
    read_records,
    replace_activations_uniform,
    replace_poolings_uniform,
    replace_randomly,
    train_final,
    transfer_eval,
)
from dpnas.fixtures import fixture_architecture
from dpnas.search_space import OperationId, save_architecture

MICRO_CHANNELS = (8, 8, 16)


def micro_eval_config(**over):
    base = dict(dataset="mnist", budget=PrivacyBudget(3.0, 1e-5), epochs=2,
                repeats=2, batch_size=100, train_subset=400,
                stage_channels=MICRO_CHANNELS, seed=1)
    base.update(over)
    return EvalConfig(**base)


@pytest.fixture(scope="module")
def mnist_bundle(synth_root):
    return load_dataset("mnist", synth_root)


class TestTrainFinal:
    def test_budget_discipline_and_record_shape(self, mnist_bundle):
        arch = fixture_architecture("mnist")
        cfg = micro_eval_config()
        rec = train_final(arch, cfg, mnist_bundle)
        assert rec.realized_epsilon <= 3.0
        assert rec.epsilon == 3.0 and rec.delta == 1e-5
        assert rec.repeats == 2 and len(rec.accuracies) == 2
        assert rec.std_accuracy is not None
        assert 0 <= rec.mean_accuracy <= 1
        assert rec.steps >= cfg.epochs * math.ceil(400 / 100)
        assert rec.arch_id == arch_id(arch)
        assert rec.wall_time_s > 0

    def test_repeats_are_independent(self, mnist_bundle):
        # fresh noise and init per repeat: the trained weights must differ
        # (at this micro scale accuracies can tie at chance, weights cannot)
        from dpnas.eval_analysis import _derive_sigma_and_steps, _train_once
        from dpnas.network import build_network
        from dpnas.search_space import build_model_spec

        cfg = micro_eval_config()
        arch = fixture_architecture("mnist")
        spec = build_model_spec(arch, MICRO_CHANNELS, 1, 10, (1, 28, 28))
        x, y = mnist_bundle.train_x[:400], mnist_bundle.train_y[:400]
        sigma, steps, q, budget = _derive_sigma_and_steps(cfg, 400)
        models = [
            _train_once(lambda s: build_network(spec, s), cfg, sigma, steps,
                        q, budget, x, y, repeat_seed=rs)[0]
            for rs in (101, 202)]
        diffs = [not torch.equal(a, b) for (a, b) in
                 zip(models[0].parameters(), models[1].parameters())]
        assert any(diffs)

    def test_deterministic_given_seed(self, mnist_bundle):
        cfg = micro_eval_config()
        a = train_final(fixture_architecture("mnist"), cfg, mnist_bundle)
        b = train_final(fixture_architecture("mnist"), cfg, mnist_bundle)
        assert a.accuracies == b.accuracies

    def test_non_budgeted_mode_with_explicit_sigma(self, mnist_bundle):
        cfg = micro_eval_config(budget=None, noise_multiplier=1.0)
        rec = train_final(fixture_architecture("mnist"), cfg, mnist_bundle)
        assert rec.epsilon is None and rec.realized_epsilon is None
        assert rec.sigma == 1.0
        assert rec.steps == cfg.epochs * math.ceil(400 / 100)

    def test_degenerate_budget_gives_chance_accuracy(self, mnist_bundle):
        # smallest certifiable epsilon: the classic conversion cannot report
        # below log(1/delta)/(max_order - 1) ~= 0.045, so 0.05 is the
        # near-zero regime; sigma is huge and noise drowns the signal
        cfg = micro_eval_config(budget=PrivacyBudget(0.05, 1e-5), epochs=1,
                                repeats=1)
        rec = train_final(fixture_architecture("mnist"), cfg, mnist_bundle)
        assert rec.sigma > 20
        assert rec.mean_accuracy < 0.35

    def test_epsilon_below_conversion_floor_is_unreachable(self, mnist_bundle):
        from dpnas.errors import CalibrationError

        cfg = micro_eval_config(budget=PrivacyBudget(0.01, 1e-5), epochs=1,
                                repeats=1)
        with pytest.raises(CalibrationError):
            train_final(fixture_architecture("mnist"), cfg, mnist_bundle)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            micro_eval_config(noise_multiplier=1.0)  # budget AND sigma
        with pytest.raises(ValidationError):
            micro_eval_config(budget=None)  # neither


class TestFrequencyStats:
    def test_untrained_controller_is_uniform(self):
        ctrl = build_controller(k=5, seed=0)
        table = op_frequency_stats(ctrl, 300, torch.Generator().manual_seed(1))
        counts = [table.counts[op.name] for op in OperationId]
        assert stats.chisquare(counts).pvalue > 0.01

    def test_single_sample_overall_multiples_of_one_fifteenth(self):
        ctrl = build_controller(k=5, seed=2)
        table = op_frequency_stats(ctrl, 1, torch.Generator().manual_seed(3))
        for freq in table.overall.values():
            assert (freq * 15) == pytest.approx(round(freq * 15), abs=1e-12)

    def test_reports_normalize_to_one(self):
        ctrl = build_controller(k=5, seed=4)
        table = op_frequency_stats(ctrl, 50, torch.Generator().manual_seed(5))
        assert sum(table.activations.values()) == pytest.approx(1.0, abs=1e-9)
        assert sum(table.poolings.values()) == pytest.approx(1.0, abs=1e-9)
        assert sum(table.overall.values()) == pytest.approx(1.0, abs=1e-9)
        assert set(table.activations) == {
            "CONV_RELU", "CONV_TANH", "CONV_SIGMOID", "CONV_HARDTANH",
            "CONV_SELU", "CONV_LINEAR"}
        assert set(table.poolings) == {"MAX_POOL_3X3", "AVG_POOL_3X3"}

    def test_rejects_zero_samples(self):
        ctrl = build_controller(k=5)
        with pytest.raises(ValidationError):
            op_frequency_stats(ctrl, 0, torch.Generator())


class TestReplacements:
    def test_uniform_activation_replacement(self):
        arch = fixture_architecture("mnist")
        swapped = replace_activations_uniform(arch, "sigmoid")
        for before, after in zip(arch.ops, swapped.ops):
            if before.is_conv:
                assert after == OperationId.CONV_SIGMOID
            else:
                assert after == before

    def test_uniform_pooling_replacement(self):
        arch = fixture_architecture("mnist")
        swapped = replace_poolings_uniform(arch, "avg")
        for before, after in zip(arch.ops, swapped.ops):
            if before.is_pool:
                assert after == OperationId.AVG_POOL_3X3
            else:
                assert after == before

    def test_random_replacement_only_touches_kind(self):
        arch = fixture_architecture("mnist")
        swapped = replace_randomly(arch, "activation", seed=3)
        for before, after in zip(arch.ops, swapped.ops):
            if before.is_conv:
                assert after.is_conv
            else:
                assert after == before
        assert replace_randomly(arch, "activation", seed=3) == swapped

    def test_pool_only_activations_rejected(self):
        arch = fixture_architecture("mnist")
        with pytest.raises(ValidationError, match="not in the operation pool"):
            replace_activations_uniform(arch, "elu")


class TestAblation:
    def test_small_cnn_components_and_determinism(self, mnist_bundle):
        cfg = micro_eval_config(epochs=1, repeats=1, train_subset=200)
        recs = ablation_component("small_cnn", ["selu", "relu", "pool:avg"],
                                  cfg, mnist_bundle)
        assert [r.component for r in recs] == ["selu", "relu", "pool:avg"]
        again = ablation_component("small_cnn", ["selu"], cfg, mnist_bundle)
        assert again[0].accuracies == recs[0].accuracies

    def test_architecture_replacement_components(self, mnist_bundle):
        cfg = micro_eval_config(epochs=1, repeats=1, train_subset=200)
        arch = fixture_architecture("mnist")
        recs = ablation_component(arch, ["only:selu", "pool:max",
                                         "random:activation", "original"],
                                  cfg, mnist_bundle)
        assert len(recs) == 4
        assert recs[3].arch_id == arch_id(arch)

    def test_unknown_component_rejected(self, mnist_bundle):
        cfg = micro_eval_config(epochs=1, repeats=1, train_subset=200)
        with pytest.raises(ValidationError):
            ablation_component("small_cnn", ["swish"], cfg, mnist_bundle)


class TestTransfer:
    def test_round_trip_and_identity(self, mnist_bundle, tmp_path):
        arch = fixture_architecture("fashionmnist")
        save_architecture(arch, tmp_path / "arch_searched_on_fashionmnist.json")
        cfg = micro_eval_config(epochs=1, repeats=1, train_subset=200)
        rec = transfer_eval("fashionmnist", "mnist", cfg, mnist_bundle,
                            tmp_path)
        assert rec.searched_on == "fashionmnist"
        assert rec.dataset == "mnist"
        direct = train_final(arch, cfg, mnist_bundle)
        assert rec.accuracies == direct.accuracies  # identity reduction

    def test_missing_architecture(self, mnist_bundle, tmp_path):
        cfg = micro_eval_config()
        with pytest.raises(NotFoundError):
            transfer_eval("cifar10", "mnist", cfg, mnist_bundle, tmp_path)


class TestInitSanity:
    def test_chance_band_on_balanced_data(self, mnist_bundle):
        cfg = micro_eval_config(repeats=5)
        res = init_sanity_check(fixture_architecture("mnist"), cfg,
                                mnist_bundle)
        assert 0.02 <= res.mean_accuracy <= 0.25
        assert len(res.accuracies) == 5
        assert res.flagged in (True, False)

    def test_single_seed_deterministic(self, mnist_bundle):
        cfg = micro_eval_config(repeats=1)
        a = init_sanity_check(fixture_architecture("mnist"), cfg, mnist_bundle)
        b = init_sanity_check(fixture_architecture("mnist"), cfg, mnist_bundle)
        assert a.accuracies == b.accuracies
        assert a.std_accuracy is None and a.flagged is None


class TestResultsStore:
    def test_append_and_read_with_provenance(self, tmp_path):
        rec = ResultRecord(arch_id="k5-x", dataset="mnist", epsilon=3.0,
                           delta=1e-5, mean_accuracy=0.5, std_accuracy=0.1,
                           accuracies=[0.4, 0.6], param_count=10,
                           wall_time_s=1.0, realized_epsilon=2.9, sigma=1.1,
                           steps=10, repeats=2)
        path = tmp_path / "results.jsonl"
        append_record(path, rec, config={"seed": 1})
        append_record(path, rec)
        records = read_records(path)
        assert len(records) == 2
        assert records[0]["config"] == {"seed": 1}
        assert records[0]["package_version"]
        assert records[1]["mean_accuracy"] == 0.5

    def test_record_invariants(self):
        with pytest.raises(ValidationError):
            ResultRecord(arch_id="x", dataset="mnist", epsilon=None,
                         delta=None, mean_accuracy=1.5, std_accuracy=0.0,
                         accuracies=[1.5], param_count=1, wall_time_s=0.0,
                         realized_epsilon=None, sigma=1.0, steps=1, repeats=1)
        with pytest.raises(ValidationError):
            ResultRecord(arch_id="x", dataset="mnist", epsilon=None,
                         delta=None, mean_accuracy=0.5, std_accuracy=None,
                         accuracies=[0.5, 0.5], param_count=1, wall_time_s=0.0,
                         realized_epsilon=None, sigma=1.0, steps=1, repeats=2)
