"""
接続探索・枝刈り・アーキテクチャ形式のテスト
"""

import itertools

import numpy as np
import pytest

from fringeforge.classical import AberrationSpec, FringeSpec
from fringeforge.errors import ArchitectureError
from fringeforge.formats import Checkpoint
from fringeforge.harness import Dataset, fringe_style, make_dataset
from fringeforge.losses import LossConfig
from fringeforge.nas import (
    Architecture, SearchSchedule, checkpoint_weights, export_architecture, full_architecture,
    import_architecture, load_architecture, materialize, model_from_checkpoint, network_from_meta,
    prune, prunes_cleanly, save_architecture, search, write_weight_history,
)
from fringeforge.supernet import Edge, SuperNetConfig, build_supernet, candidate_edges


def small_config(stages=2):
    return SuperNetConfig(stages=stages, input_size=(32, 32), encoder_depths=[2, 3, 4][:stages],
                          depth_cap=4, depth_slope=2)


@pytest.fixture(scope="module")
def tiny_data():
    return make_dataset(5, 32, FringeSpec(carrier_fx=5.0, carrier_fy=3.0), AberrationSpec(),
                        seed=3, split=(0.6, 0.2, 0.2), stages=2)


def weights_with(L, value, overrides=None):
    w = {e: value for e in candidate_edges(L)}
    for name, v in (overrides or {}).items():
        w[next(e for e in w if e.name == name)] = v
    return w


def greatest_valid_subset(weights, sigma, L):
    """総当たり: w ≥ σ の接続から作れる最大の有効サブグラフ（無ければ None）"""
    strong = [e for e, w in weights.items() if w >= sigma]
    best = None
    others = list(range(2, L + 1))
    for r in range(len(others) + 1):
        for subset in itertools.combinations(others, r):
            alive = {1, *subset}
            edges = [e for e in strong if e.target in alive and (e.kind != 'D' or e.index in alive)]
            ok = all(any(e.target == l for e in edges) for l in alive)
            ok = ok and all(any(e.kind == 'D' and e.index == l for e in edges) for l in alive - {1})
            if ok and (best is None or len(edges) > len(best[0])):
                best = (set(edges), alive)
    return best


class TestPrune:
    def test_everything_kept(self):
        arch = prune(weights_with(8, 0.9), sigma=0.5, stages=8)
        assert len(arch.kept_edges) == 100
        assert arch.kept_stages == list(range(1, 9))
        assert arch.kept_edges == candidate_edges(8)

    def test_everything_dropped(self):
        with pytest.raises(ArchitectureError, match="collapsed"):
            prune(weights_with(4, 0.1), sigma=0.5, stages=4)

    def test_stage_without_inputs_is_removed(self):
        w = weights_with(3, 0.8, {"E1->D2": 0.1, "E2->D2": 0.1, "E3->D2": 0.1,
                                  "G->D2": 0.1, "D3->D2": 0.1})
        arch = prune(w, sigma=0.5, stages=3)
        assert arch.kept_stages == [1, 3]
        assert "D2->D1" not in arch.edge_names
        assert all(e.target != 2 for e in arch.kept_edges)

    def test_cascade_to_fixpoint(self):
        keep = {"E1->D1", "E1->D3", "D3->D2"}
        w = {e: (0.9 if e.name in keep else 0.1) for e in candidate_edges(3)}
        arch = prune(w, sigma=0.5, stages=3)
        assert arch.edge_names == ["E1->D1"]
        assert arch.kept_stages == [1]

    def test_threshold_is_inclusive(self):
        arch = prune(weights_with(2, 0.5), sigma=0.5, stages=2)
        assert len(arch.kept_edges) == 7

    @pytest.mark.parametrize("L", [2, 3, 4, 5, 6])
    def test_matches_brute_force(self, L):
        rng = np.random.default_rng(100 + L)
        for _ in range(40):
            w = {e: float(rng.uniform()) for e in candidate_edges(L)}
            expected = greatest_valid_subset(w, 0.5, L)
            if expected is None:
                with pytest.raises(ArchitectureError):
                    prune(w, sigma=0.5, stages=L)
                continue
            arch = prune(w, sigma=0.5, stages=L)
            assert set(arch.kept_edges) == expected[0]
            assert set(arch.kept_stages) == expected[1]
            arch.validate()

    def test_idempotent(self):
        rng = np.random.default_rng(7)
        w = {e: float(rng.uniform(0.3, 1.0)) for e in candidate_edges(4)}
        first = prune(w, sigma=0.5, stages=4)
        again = prune({e: 1.0 for e in first.kept_edges}, sigma=0.5, stages=4)
        assert again.kept_edges == first.kept_edges
        assert again.kept_stages == first.kept_stages

    @pytest.mark.parametrize("sigma", [0.0, 1.0, -0.2, 1.5])
    def test_sigma_range(self, sigma):
        with pytest.raises(ValueError):
            prune(weights_with(2, 0.9), sigma=sigma, stages=2)

    def test_prunes_cleanly(self):
        assert not prunes_cleanly(weights_with(3, 0.1), 0.5, 3)
        assert prunes_cleanly(weights_with(3, 0.9), 0.5, 3)
        assert prunes_cleanly(weights_with(3, 0.1, {"E1->D1": 0.6}), 0.5, 3)

    def test_accepts_connection_set(self):
        net = build_supernet(small_config(), seed=0)
        net.connections.set_weights({e: (0.9 if e.target == 1 else 0.2) for e in net.edges})
        arch = prune(net.connections, sigma=0.5, source="supernet.ckpt")
        assert arch.kept_stages == [1]
        assert arch.provenance == (0.5, "supernet.ckpt")


class TestArchitectureText:
    def test_round_trip(self):
        w = weights_with(3, 0.8, {"G->D3": 0.2, "E1->D2": 0.3})
        arch = prune(w, sigma=0.5, stages=3, source="ck.ckpt")
        text = export_architecture(arch)
        assert text.startswith("# fringeforge architecture\nstages 3\nprovenance sigma=0.5 source=ck.ckpt\n")
        back = import_architecture(text)
        assert back.kept_edges == arch.kept_edges
        assert back.kept_stages == arch.kept_stages
        assert back.provenance == (0.5, "ck.ckpt")

    def test_file_round_trip(self, tmp_path):
        arch = full_architecture(2)
        save_architecture(arch, tmp_path / "arch.txt")
        assert load_architecture(tmp_path / "arch.txt").kept_edges == arch.kept_edges

    def test_comments_and_blank_lines(self):
        arch = import_architecture("stages 2\n\n# note\nedge E1 D1  # trailing\n")
        assert arch.edge_names == ["E1->D1"]

    def test_acyclicity(self):
        with pytest.raises(ArchitectureError, match="line 3: acyclicity violated"):
            import_architecture("# x\nstages 2\nedge D1 D2\nedge E1 D1\n")

    @pytest.mark.parametrize("text,line", [
        ("stages 2\nedge E1\n", 2),
        ("stages 2\nedge E1 D1\nedge E9 D1\n", 3),
        ("stages 2\nedge E1 X1\n", 2),
        ("stages two\n", 1),
        ("stages 2\nlink E1 D1\n", 2),
        ("stages 2\nedge E1 D1\nedge E1 D1\n", 3),
        ("stages 2\nprovenance sigma=abc\nedge E1 D1\n", 2),
    ])
    def test_malformed_lines(self, text, line):
        with pytest.raises(ArchitectureError, match=f"line {line}:"):
            import_architecture(text)

    def test_empty_text_collapses(self):
        with pytest.raises(ArchitectureError, match="collapsed"):
            import_architecture("")

    def test_dangling_stage(self):
        with pytest.raises(ArchitectureError):
            import_architecture("stages 3\nedge E1 D1\nedge E2 D2\n")


class TestMaterialize:
    def test_builds_only_kept_connections(self):
        arch = import_architecture("stages 2\nedge E1 D1\nedge E2 D2\nedge D2 D1\n")
        net = materialize(arch, small_config(), seed=0)
        assert net.edges == arch.kept_edges
        assert net.connections is None
        out = net.predict(np.random.default_rng(0).uniform(size=(32, 32)))
        assert out.shape == (32, 32)

    def test_stage_count_mismatch(self):
        with pytest.raises(ArchitectureError):
            materialize(full_architecture(3), small_config(2))

    def test_invalid_architecture(self):
        arch = Architecture(stages=2, kept_edges=[Edge("E1", 2)], kept_stages=[2])
        with pytest.raises(ArchitectureError, match="collapsed"):
            materialize(arch, small_config())


class TestCheckpointHelpers:
    def test_checkpoint_weights(self):
        net = build_supernet(small_config(), seed=0)
        net.connections.set_thetas({e: 0.1 * k for k, e in enumerate(net.edges)})
        weights = checkpoint_weights(Checkpoint(state=net.state_dict(), meta={}), 2)
        expected = net.connections.weights()
        for e in net.edges:
            assert weights[e] == pytest.approx(expected[e])

    def test_checkpoint_weights_missing(self):
        net = build_supernet(small_config(), seed=0)
        state = net.state_dict()
        del state["theta.G->D2"]
        with pytest.raises(ArchitectureError):
            checkpoint_weights(Checkpoint(state=state, meta={}), 2)

    def test_model_from_supernet_checkpoint(self):
        cfg = small_config()
        net = build_supernet(cfg, seed=5)
        ckpt = Checkpoint(state=net.state_dict(), meta={"kind": "supernet", "config": cfg.to_dict(), "seed": 1})
        grid = np.random.default_rng(1).uniform(size=(32, 32))
        assert np.array_equal(model_from_checkpoint(ckpt).predict(grid), net.predict(grid))

    def test_model_from_nasprnet_checkpoint(self):
        cfg = small_config()
        arch = import_architecture("stages 2\nedge E1 D1\nedge G D1\n")
        net = materialize(arch, cfg, seed=2)
        meta = {"kind": "nasprnet", "config": cfg.to_dict(), "architecture": export_architecture(arch)}
        restored = model_from_checkpoint(Checkpoint(state=net.state_dict(), meta=meta))
        assert restored.edges == arch.kept_edges

    def test_unknown_kind(self):
        with pytest.raises(ArchitectureError):
            network_from_meta({"kind": "other", "config": small_config().to_dict()})


class TestSearch:
    def test_no_epochs_returns_initial_checkpoint(self, tiny_data):
        result = search(small_config(), tiny_data, SearchSchedule(0, 0), LossConfig(), seed=0)
        assert result.checkpoint.epoch == 0
        assert result.checkpoint.meta["kind"] == "supernet"
        assert result.history == []
        assert result.weight_history == []

    def test_pretrain_keeps_weights_at_half(self, tiny_data):
        result = search(small_config(), tiny_data, SearchSchedule(1, 1, learning_rate=0.01), LossConfig())
        first = [w for epoch, _, w in result.weight_history if epoch == 1]
        assert first == [0.5] * 7
        assert len(result.weight_history) == 2 * 7
        assert [h["phase"] for h in result.history] == ["pretrain", "joint"]
        assert result.checkpoint.meta["phase"] == "joint"

    def test_deterministic(self, tiny_data):
        sched = SearchSchedule(1, 1, learning_rate=0.01)
        a = search(small_config(), tiny_data, sched, LossConfig(), seed=4)
        b = search(small_config(), tiny_data, sched, LossConfig(), seed=4)
        assert a.weight_history == b.weight_history
        assert list(a.checkpoint.state) == list(b.checkpoint.state)
        for name, arr in a.checkpoint.state.items():
            assert np.array_equal(arr, b.checkpoint.state[name])

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            search(small_config(), Dataset(pairs=[], splits={}), SearchSchedule(0, 1), LossConfig())

    def test_weight_history_csv(self, tiny_data, tmp_path):
        result = search(small_config(), tiny_data, SearchSchedule(0, 1, learning_rate=0.01), LossConfig())
        write_weight_history(result.weight_history, tmp_path / "w.csv")
        lines = (tmp_path / "w.csv").read_text().splitlines()
        assert lines[0] == "epoch,edge,w"
        assert len(lines) == 1 + 7
        assert lines[1].startswith("1,E1->D1,")

    @pytest.mark.slow
    def test_weights_polarize_during_joint_phase(self):
        data = make_dataset(6, 32, FringeSpec(carrier_fx=5.0, carrier_fy=3.0), AberrationSpec(),
                            seed=8, split=(0.6667, 0.1667, 0.1666), stages=2)
        sched = SearchSchedule(pretrain_epochs=2, joint_epochs=15, learning_rate=0.05)
        result = search(small_config(), data, sched, LossConfig(alpha=1.0, beta=0.0005), seed=0)
        joint = [h for h in result.history if h["phase"] == "joint"]
        assert joint[-1]["binary_loss"] < joint[0]["binary_loss"]
        assert joint[-1]["train_loss"] < joint[0]["train_loss"]

    @pytest.mark.slow
    def test_reference_search_polarizes_and_prunes(self):
        cfg = SuperNetConfig(stages=4, input_size=(64, 64), encoder_depths=[8, 16, 24, 32],
                             depth_cap=64, depth_slope=8)
        data = make_dataset(48, 64, *fringe_style("A"), seed=1, split=(0.6667, 0.1667, 0.1666), stages=4)
        assert len(data.split("train")) == 32
        sched = SearchSchedule(pretrain_epochs=30, joint_epochs=60, learning_rate=0.008)
        result = search(cfg, data, sched, LossConfig(alpha=0.005, beta=0.0005), seed=1, sigma=0.5)

        last = max(epoch for epoch, _, _ in result.weight_history)
        final = [w for epoch, _, w in result.weight_history if epoch == last]
        polarized = sum(1 for w in final if w <= 0.1 or w >= 0.9)
        assert polarized >= 0.7 * len(final)

        arch = prune(checkpoint_weights(result.checkpoint, 4), sigma=0.5, stages=4)
        arch.validate()
        assert len(arch.kept_edges) < 26

        assert result.history[-1]["recon_loss"] <= 0.5 * result.history[0]["recon_loss"]
