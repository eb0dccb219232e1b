"""
super-PRNet / NAS-PRNet のテスト

小さな構成（32×32, L=3, 浅い特徴）で形状・値域・勾配を確認する。
"""

import numpy as np
import pytest

from fringeforge import tensor as T
from fringeforge.errors import ArchitectureError, ConfigError, ShapeError
from fringeforge.losses import mixge
from fringeforge.supernet import (
    GROUND, ConnectionSet, Edge, PRNet, StageFeatures, SuperNetConfig,
    build_supernet, candidate_edges, count_candidate_connections, parse_source,
)
from fringeforge.tensor import Tensor


def tiny_config(stages=3, size=32):
    return SuperNetConfig(stages=stages, input_size=(size, size), encoder_depths=[2, 3, 4, 4][:stages],
                          depth_cap=6, depth_slope=2)


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def net(cfg):
    return build_supernet(cfg, seed=0)


@pytest.fixture
def img():
    return Tensor(np.random.default_rng(5).uniform(size=(1, 1, 32, 32)))


class TestCandidateConnections:
    @pytest.mark.parametrize("L,expected", [(1, 2), (3, 15), (8, 100)])
    def test_closed_form(self, L, expected):
        assert count_candidate_connections(L) == expected

    @pytest.mark.parametrize("L", range(1, 9))
    def test_enumeration_matches_count(self, L):
        edges = candidate_edges(L)
        assert len(edges) == count_candidate_connections(L)
        assert len(set(edges)) == len(edges)

    def test_decoder_edges_point_upstream(self):
        for e in candidate_edges(6):
            if e.kind == 'D':
                assert e.index > e.target

    def test_canonical_order(self):
        names = [e.name for e in candidate_edges(2)]
        assert names == ["E1->D1", "E2->D1", "G->D1", "D2->D1", "E1->D2", "E2->D2", "G->D2"]

    def test_rejects_zero_stages(self):
        with pytest.raises(ValueError):
            count_candidate_connections(0)

    def test_edge_kinds(self):
        assert Edge("E1", 2).is_downsampling()
        assert not Edge("E2", 2).is_downsampling()
        assert not Edge("E3", 1).is_downsampling()
        assert not Edge(GROUND, 1).is_downsampling()
        assert Edge(GROUND, 1).index is None

    @pytest.mark.parametrize("token", ["E0", "E5", "X1", "D", "g"])
    def test_parse_source_rejects(self, token):
        with pytest.raises(ArchitectureError):
            parse_source(token, 4)


class TestConnectionSet:
    def test_initial_weights_are_half(self):
        conns = ConnectionSet(candidate_edges(3))
        assert len(conns) == 15
        assert all(w == 0.5 for w in conns.weights().values())

    def test_set_weights_round_trip(self):
        edges = candidate_edges(2)
        conns = ConnectionSet(edges)
        conns.set_weights({edges[0]: 0.9, edges[1]: 0.1, edges[2]: 1.0, edges[3]: 0.0})
        w = conns.weights()
        assert w[edges[0]] == pytest.approx(0.9)
        assert w[edges[1]] == pytest.approx(0.1)
        assert w[edges[2]] == pytest.approx(1.0)
        assert w[edges[3]] < 1e-15

    def test_theta_parameter_names(self):
        conns = ConnectionSet(candidate_edges(1))
        assert [p.name for p in conns.parameters()] == ["theta.E1->D1", "theta.G->D1"]


class TestConfig:
    def test_default_depths_follow_reference_table(self):
        assert SuperNetConfig(stages=8, input_size=(768, 768)).encoder_depths == [8, 16, 24, 32, 48, 64, 96, 160]

    def test_decoder_depth_is_capped(self):
        c = SuperNetConfig(stages=4, depth_cap=20, depth_slope=8)
        assert [c.decoder_depth(l) for l in range(1, 5)] == [8, 16, 20, 20]

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            SuperNetConfig.from_dict({"stages": 2, "width": 3})

    def test_dict_round_trip(self, cfg):
        assert SuperNetConfig.from_dict(cfg.to_dict()) == cfg

    def test_needs_two_stages(self):
        with pytest.raises(ConfigError):
            PRNet(SuperNetConfig(stages=1, input_size=(32, 32)))

    def test_input_too_small_for_pool(self):
        with pytest.raises(ShapeError):
            PRNet(SuperNetConfig(stages=4, input_size=(32, 32)))


class TestEncoder:
    def test_pyramid_shapes(self):
        cfg = SuperNetConfig(stages=3, input_size=(64, 64), encoder_depths=[4, 8, 8], depth_cap=16, depth_slope=4)
        net = build_supernet(cfg)
        feats = net.encode(Tensor(np.random.default_rng(0).uniform(size=(1, 1, 64, 64))))
        assert [f.shape for f in feats.E] == [(1, 4, 32, 32), (1, 8, 16, 16), (1, 8, 8, 8)]
        assert feats.G.shape == (1, 8, 3, 3)

    def test_zero_input_gives_zero_features(self, net):
        feats = net.encode(Tensor(np.zeros((1, 1, 32, 32))))
        for f in feats.E + [feats.G]:
            np.testing.assert_array_equal(f.data, 0.0)

    def test_features_are_bounded(self, net, img):
        feats = net.encode(img)
        for f in feats.E:
            assert f.data.min() >= 0.0 and f.data.max() <= 6.0

    def test_indivisible_input(self, net):
        with pytest.raises(ShapeError):
            net.encode(Tensor(np.zeros((1, 1, 36, 36))))

    def test_multichannel_input(self, net):
        with pytest.raises(ShapeError):
            net.encode(Tensor(np.zeros((1, 2, 32, 32))))


class TestFusion:
    def test_all_weights_off(self, net, img):
        net.connections.set_thetas({e: -40.0 for e in net.edges})
        feats = net.encode(img)
        t3 = net.fuse(3, feats)
        assert t3.shape == (1, 6, 4, 4)
        assert np.abs(t3.data).max() < 1e-12

    def test_single_weight_on(self, net, img):
        edge = Edge("E1", 3)
        net.connections.set_thetas({e: (40.0 if e == edge else -40.0) for e in net.edges})
        feats = net.encode(img)
        fused = net.fuse(3, feats, training=True)
        branch = net.branches[edge](feats.source("E1", 3), 4, 4, True)
        np.testing.assert_allclose(fused.data, branch.data, atol=1e-12)

    def test_reading_undecoded_stage(self, net, img):
        feats = net.encode(img)
        with pytest.raises(ArchitectureError):
            net.fuse(1, feats)

    def test_stage_features_source(self, img):
        feats = StageFeatures(E=[img], G=img, D={})
        assert feats.source("G", 1) is img
        with pytest.raises(ArchitectureError):
            feats.source("D2", 1)

    def test_decode_stage_zero_and_range(self, net, img):
        zero = net.decode_stage(2, Tensor(np.zeros((1, 4, 8, 8))))
        np.testing.assert_array_equal(zero.data, 0.0)
        feats = net.encode(img)
        d3 = net.decode_stage(3, net.fuse(3, feats))
        assert d3.shape == (1, 6, 4, 4)
        assert d3.data.min() >= 0.0 and d3.data.max() <= 6.0

    def test_branch_norms_are_not_learnable(self, net):
        names = [p.name for p in net.parameters()]
        assert not any(n.startswith("fuse.") and ".bn." in n for n in names)
        assert any(n.startswith("enc.") and n.endswith(".bn.gamma") for n in names)
        state = net.state_dict()
        assert "fuse.G->D1.bn.running_mean" in state
        assert "fuse.G->D1.bn.gamma" not in state

    def test_theta_gradients_match_finite_differences(self, net, img):
        gt = Tensor(np.random.default_rng(9).uniform(0.0, 1.0, size=(1, 1, 32, 32)))
        thetas = net.connections.parameters()
        err = T.grad_check(lambda: mixge(net.forward(img, training=True), gt), thetas, step=1e-4, floor=1e-3)
        assert err <= 1e-4


class TestRegressionHead:
    def test_constant_pre_activation(self, net):
        net.head.kernel.data[...] = 0.0
        d1 = Tensor(np.random.default_rng(1).uniform(size=(1, 2, 16, 16)))
        net.head.bias.data[...] = 3.0
        np.testing.assert_allclose(net.regression_head(d1, 32, 32).data, 0.5)
        net.head.bias.data[...] = 9.0
        np.testing.assert_allclose(net.regression_head(d1, 32, 32).data, 1.0)
        net.head.bias.data[...] = -1.0
        np.testing.assert_allclose(net.regression_head(d1, 32, 32).data, 0.0)


class TestForward:
    def test_output_shape_and_range(self, net, img):
        out = net(img)
        assert out.shape == (1, 1, 32, 32)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_size_agnostic(self, net):
        out = net.predict(np.random.default_rng(2).uniform(size=(64, 64)))
        assert out.shape == (64, 64)

    def test_deterministic(self, cfg, img):
        a = build_supernet(cfg, seed=4)
        b = build_supernet(cfg, seed=4)
        assert np.array_equal(a(img).data, b(img).data)

    def test_eval_forward_does_not_mutate(self, net, img):
        before = net.state_dict()
        net.predict(img.data[0, 0])
        after = net.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_gradients_reach_every_kernel_and_weight(self, net, img):
        gt = Tensor(np.random.default_rng(3).uniform(size=(1, 1, 32, 32)))
        net.zero_grad()
        with T.Tape() as tape:
            loss = mixge(net.forward(img, training=True), gt)
        tape.backward(loss)
        kernels = [p for p in net.network_parameters() if p.name.endswith(".kernel")]
        assert all(np.any(p.grad != 0.0) for p in kernels)
        thetas = net.connections.parameters()
        nonzero = sum(1 for p in thetas if p.grad[0, 0, 0, 0] != 0.0)
        assert nonzero >= 0.95 * len(thetas)


class TestNasPrnet:
    def test_unweighted_net_has_no_fusion_norms(self, cfg):
        edges = [Edge("E1", 1), Edge("E2", 2), Edge("D2", 1)]
        net = PRNet(cfg, edges=edges, stages=[1, 2], weighted=False)
        assert net.connections is None
        assert not any(".bn." in p.name and p.name.startswith("fuse.") for p in net.parameters())
        assert net.parameter_count() < build_supernet(cfg).parameter_count()

    def test_single_chain_gradients(self, cfg, img):
        net = PRNet(cfg, edges=[Edge("E1", 1)], weighted=False, seed=1)
        gt = Tensor(np.random.default_rng(4).uniform(size=(1, 1, 32, 32)))
        params = [p for p in net.network_parameters() if p.name.endswith(".kernel")]
        err = T.grad_check(lambda: mixge(net.forward(img, training=True), gt), params,
                           step=1e-4, max_elements=6, floor=1e-3)
        assert err <= 1e-4

    def test_missing_first_stage(self, cfg):
        with pytest.raises(ArchitectureError, match="collapsed"):
            PRNet(cfg, edges=[Edge("E1", 2)], weighted=False)

    def test_non_candidate_edge(self, cfg):
        with pytest.raises(ArchitectureError):
            PRNet(cfg, edges=[Edge("E1", 1), Edge("D1", 2)], weighted=False)


class TestStateDict:
    def test_round_trip_restores_outputs(self, cfg, img):
        source = build_supernet(cfg, seed=1)
        source.forward(img, training=True)
        target = build_supernet(cfg, seed=2)
        target.load_state_dict(source.state_dict())
        np.testing.assert_array_equal(source.predict(img.data[0, 0]), target.predict(img.data[0, 0]))

    def test_includes_running_statistics(self, net):
        state = net.state_dict()
        assert "enc.1.bn.running_mean" in state
        assert "enc.1.bn.running_var" in state
        assert "theta.G->D1" in state

    def test_missing_tensor(self, net):
        state = net.state_dict()
        del state["head.conv.kernel"]
        with pytest.raises(ArchitectureError):
            build_supernet(net.cfg).load_state_dict(state)

    def test_wrong_shape(self, net):
        state = net.state_dict()
        state["head.conv.bias"] = np.zeros((1, 2, 1, 1))
        with pytest.raises(ShapeError):
            build_supernet(net.cfg).load_state_dict(state)
