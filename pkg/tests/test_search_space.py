"""Search-space tests: encoding, graph semantics, blueprint shape/param trace."""

import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dpnas.errors import PoolVersionError, ValidationError
from dpnas.fixtures import fixture_architecture
from dpnas.network import DpnasNetwork, build_network
from dpnas.search_space import (
    Architecture,
    CellGraph,
    OperationId,
    architecture_from_json,
    architecture_to_json,
    build_model_spec,
    decode,
    encode,
    enumerate_edges,
    num_edges,
    sample_uniform,
    search_space_size,
)

MNIST_CHANNELS = (32, 32, 64)
CIFAR_CHANNELS = (48, 96, 192)


class TestEdgeEnumeration:
    def test_k1(self):
        assert enumerate_edges(1) == [(0, 1)]

    def test_k2_exhaustive(self):
        assert enumerate_edges(2) == [(0, 1), (0, 2), (1, 2)]

    def test_k5_count_and_endpoints(self):
        edges = enumerate_edges(5)
        assert len(edges) == 15
        assert edges[0] == (0, 1)
        assert edges[-1] == (4, 5)

    def test_invalid_k(self):
        with pytest.raises(ValidationError):
            enumerate_edges(0)


class TestEncoding:
    def test_all_zero_architecture(self):
        arch = Architecture(k=5, ops=(OperationId.ZERO,) * 15)
        assert encode(arch) == [9] * 15

    def test_wrong_length_rejected(self):
        with pytest.raises(ValidationError):
            decode([0] * 14, k=5)

    def test_edge_map_constructor_reports_missing_and_extra(self):
        edge_ops = {e: OperationId.ZERO for e in enumerate_edges(5)}
        del edge_ops[(2, 4)]
        edge_ops[(5, 6)] = OperationId.ZERO
        with pytest.raises(ValidationError, match=r"missing=\[\(2, 4\)\]"):
            Architecture.from_edge_ops(5, edge_ops)

    def test_round_trip_1000_random(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            arch = sample_uniform(5, rng)
            assert decode(encode(arch), k=5) == arch

    @given(k=st.integers(1, 7), data=st.data())
    @settings(max_examples=100, deadline=None)
    def test_round_trip_property(self, k, data):
        codes = data.draw(st.lists(st.integers(0, 9), min_size=num_edges(k),
                                   max_size=num_edges(k)))
        arch = decode(codes, k=k)
        assert encode(arch) == codes
        assert decode(encode(arch)) == arch  # k inferred from length

    def test_json_round_trip_and_pool_version(self):
        rng = np.random.default_rng(0)
        arch = sample_uniform(5, rng)
        obj = architecture_to_json(arch)
        assert obj["pool_version"] == "dpnas-v1"
        assert architecture_from_json(json.loads(json.dumps(obj))) == arch
        obj["pool_version"] = "dpnas-v0"
        with pytest.raises(PoolVersionError):
            architecture_from_json(obj)

    def test_codes_are_contractual(self):
        assert [int(o) for o in OperationId] == list(range(10))
        assert OperationId.CONV_SELU == 4
        assert OperationId.ZERO == 9


class TestSampling:
    def test_space_cardinality_exact(self):
        assert search_space_size(5) == 10**15

    def test_determinism(self):
        a = sample_uniform(5, np.random.default_rng(17))
        b = sample_uniform(5, np.random.default_rng(17))
        assert a == b

    def test_empirical_uniformity(self):
        # ~10^5 edge draws: per-op frequency 0.1 within +-0.01
        rng = np.random.default_rng(5)
        counts = np.zeros(10)
        for _ in range(7000):
            arch = sample_uniform(5, rng)
            for op in arch.ops:
                counts[int(op)] += 1
        freqs = counts / counts.sum()
        assert np.all(np.abs(freqs - 0.1) < 0.01)


class TestCellGraph:
    def test_acyclic_and_complete(self):
        arch = sample_uniform(5, np.random.default_rng(1))
        g = CellGraph.from_architecture(arch)
        assert g.k == 5
        for j, inputs in enumerate(g.node_inputs, start=1):
            assert [i for i, _ in inputs] == list(range(j))


class TestBlueprint:
    def test_mnist_fixture_param_count_frozen(self):
        # hand count: stem 320; adapters 1056/5152/10304; classifier 3210;
        # 3 conv edges x (9216 conv + 64 GN) per 32-wide stage, x (36864+128)
        # at width 64 -> 3*55552 = 166656 + 20042 fixed = 186698.
        arch = fixture_architecture("mnist")
        spec = build_model_spec(arch, MNIST_CHANNELS, 1, 10, (1, 28, 28))
        assert spec.param_count == 186_698

    def test_cifar_fixture_param_count_vs_paper(self):
        arch = fixture_architecture("cifar10")
        spec = build_model_spec(arch, CIFAR_CHANNELS, 1, 10, (3, 32, 32))
        assert spec.param_count == 564_922
        assert abs(spec.param_count - 530_000) / 530_000 <= 0.10

    @pytest.mark.xfail(
        strict=True,
        reason="no integer conv-edge count lands within 10% of the reported "
               "0.21M under the GAP+single-linear head: fixed costs are "
               "20,042 params and each conv edge adds 55,552, so the band "
               "[189k, 231k] requires 3.04..3.80 conv edges; the shipped "
               "3-conv fixture sits 11.1% low")
    def test_mnist_fixture_param_count_vs_paper(self):
        arch = fixture_architecture("mnist")
        spec = build_model_spec(arch, MNIST_CHANNELS, 1, 10, (1, 28, 28))
        assert abs(spec.param_count - 210_000) / 210_000 <= 0.10

    def test_shape_trace_28(self):
        arch = fixture_architecture("mnist")
        spec = build_model_spec(arch, MNIST_CHANNELS, 1, 10, (1, 28, 28))
        downs = [t.out_shape for t in spec.trace if "downsample" in t.name]
        assert [s[1:] for s in downs] == [(14, 14), (7, 7), (4, 4)]
        assert spec.trace[-1].out_shape == (10, 1, 1)
        gap = [t for t in spec.trace if t.name == "global_avg_pool"][0]
        assert gap.out_shape == (5 * 64, 1, 1)

    def test_all_zero_architecture_builds_and_outputs_zero_cells(self):
        arch = Architecture(k=5, ops=(OperationId.ZERO,) * 15)
        spec = build_model_spec(arch, (8, 8, 16), 1, 10, (1, 28, 28))
        net = build_network(spec, seed=0)
        x = torch.randn(3, 1, 28, 28)
        for cell in net.cells:
            out = cell(torch.randn(3, cell.adapter.in_channels, 9, 9))
            assert out.shape[1] == 5 * cell.width
            assert torch.all(out == 0)
        logits = net(x)
        # constant logits: only the classifier bias survives the zero features
        assert torch.allclose(logits, logits[0].expand_as(logits))

    def test_torch_instantiation_matches_blueprint_count(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            arch = sample_uniform(5, rng)
            spec = build_model_spec(arch, (8, 8, 16), 1, 10, (1, 28, 28))
            net = build_network(spec, seed=1)
            assert sum(p.numel() for p in net.parameters()) == spec.param_count

    def test_invalid_inputs(self):
        arch = fixture_architecture("mnist")
        with pytest.raises(ValidationError):
            build_model_spec(arch, (0, 8, 8), 1, 10, (1, 28, 28))
        with pytest.raises(ValidationError):
            build_model_spec(arch, (8, 8, 8), 0, 10, (1, 28, 28))


class TestForwardSemantics:
    def test_zero_op_equals_edge_deletion(self):
        rng = np.random.default_rng(9)
        edges = enumerate_edges(5)
        for trial in range(50):
            arch = sample_uniform(5, rng)
            e = edges[int(rng.integers(0, 15))]

            def set_zero(edge, op, target=e):
                return OperationId.ZERO if edge == target else op

            zeroed = arch.replace_ops(set_zero)
            spec = build_model_spec(zeroed, (8, 8, 16), 1, 10, (1, 28, 28))
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(trial)
                with_zero = DpnasNetwork(spec)
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(trial)
                deleted = DpnasNetwork(spec, omit_edges=frozenset([e]))
            x = torch.randn(2, 1, 28, 28)
            a, b = with_zero(x), deleted(x)
            assert torch.allclose(a, b, rtol=1e-6, atol=1e-7), (trial, e)

    def test_shape_soundness_100_random_archs(self):
        rng = np.random.default_rng(4)
        for shape in ((1, 28, 28), (3, 32, 32)):
            for _ in range(50):
                arch = sample_uniform(5, rng)
                spec = build_model_spec(arch, (8, 8, 16), 1, 10, shape)
                net = build_network(spec, seed=0)
                out = net(torch.randn(2, *shape))
                assert out.shape == (2, 10)

    def test_concat_width_is_k_times_cell_width(self):
        for k in (2, 3, 5):
            arch = sample_uniform(k, np.random.default_rng(k))
            spec = build_model_spec(arch, (8, 8, 8), 1, 10, (1, 28, 28))
            net = build_network(spec, seed=0)
            cell = net.cells[0]
            out = cell(torch.randn(2, 8, 9, 9))
            assert out.shape[1] == k * 8
