import numpy as np
import pytest

from duodet.degrade import DegradeParams
from duodet.detector import ArchConfig, load_params
from duodet.errors import NumericError
from duodet.synthdata import SceneConfig, generate_dataset, load_dataset
from duodet.trainer import (
    METRICS_HEADER,
    TrainConfig,
    deliverable_name,
    init_state,
    train,
    train_step,
)

ARCH = ArchConfig(num_classes=2, rgb_channels=3, stem_channels=4,
                  stage_channels=(4, 6, 8), neck_channels=6)


@pytest.fixture(scope="module")
def tiny_pairs(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cfg = SceneConfig(height=32, width=32, seed=5, max_objects=3)
    generate_dataset(cfg, 8, 2, root / "d")
    return load_dataset(root / "d", "train")


def small_cfg(**kw):
    base = dict(epochs=1, batch_size=4, seed=3, lr=0.05)
    base.update(kw)
    return TrainConfig(**base)


class TestInit:
    def test_base_is_exact_copy_of_aux(self):
        state = init_state(small_cfg(), ARCH)
        for pid in state.aux.ids():
            assert np.array_equal(state.base[pid].data, state.aux[pid].data)
            assert state.base[pid] is not state.aux[pid]

    def test_same_seed_same_init(self):
        a = init_state(small_cfg(), ARCH)
        b = init_state(small_cfg(), ARCH)
        for pid in a.aux.ids():
            assert np.array_equal(a.aux[pid].data, b.aux[pid].data)

    def test_biases_zero_so_masks_start_at_half(self):
        state = init_state(small_cfg(), ARCH)
        for pid in state.aux.ids():
            if pid.endswith(".b"):
                assert np.all(state.aux[pid].data == 0.0)

    def test_consistency_without_aux_rejected(self):
        with pytest.raises(ValueError, match="auxiliary"):
            TrainConfig(aux=False, consistency=True)


class TestTrainStep:
    def test_alpha_one_snaps_base_to_aux(self, tiny_pairs):
        state = init_state(small_cfg(alpha=1.0), ARCH)
        train_step(state, tiny_pairs[:4])
        for pid in state.aux.ids():
            assert np.array_equal(state.base[pid].data, state.aux[pid].data)

    def test_alpha_zero_freezes_base(self, tiny_pairs):
        state = init_state(small_cfg(alpha=0.0), ARCH)
        before = {pid: state.base[pid].data.copy() for pid in state.base.ids()}
        for _ in range(3):
            train_step(state, tiny_pairs[:4])
        for pid in state.base.ids():
            assert np.array_equal(state.base[pid].data, before[pid])

    def test_ema_recursion_exact(self, tiny_pairs):
        alpha = 0.125
        state = init_state(small_cfg(alpha=alpha), ARCH)
        before = {pid: state.base[pid].data.copy() for pid in state.base.ids()}
        train_step(state, tiny_pairs[:4])
        for pid in state.base.ids():
            expect = alpha * state.aux[pid].data + (1.0 - alpha) * before[pid]
            assert np.array_equal(state.base[pid].data, expect)

    def test_ema_endpoint_arithmetic(self):
        assert 0.001 * 0.5 + (1.0 - 0.001) * 1.0 == pytest.approx(0.9995, abs=1e-15)

    def test_first_step_consistency_zero_without_degradation(self, tiny_pairs):
        state = init_state(small_cfg(pseudo_degrade=False), ARCH)
        m = train_step(state, tiny_pairs[:4])
        assert m.losses.l_consist == 0.0

    def test_no_gradient_ever_reaches_base(self, tiny_pairs):
        state = init_state(small_cfg(), ARCH)
        for _ in range(2):
            train_step(state, tiny_pairs[:4])
            assert all(state.base[pid].grad is None for pid in state.base.ids())

    def test_nan_weight_aborts_with_term_name(self, tiny_pairs):
        state = init_state(small_cfg(), ARCH)
        state.aux["head.p3.obj.w"].data[:] = np.nan
        with pytest.raises(NumericError, match="objectness"):
            train_step(state, tiny_pairs[:4])

    def test_supervised_mode_has_no_base(self, tiny_pairs):
        state = init_state(small_cfg(aux=False, consistency=False), ARCH)
        m = train_step(state, tiny_pairs[:4])
        assert state.base is None
        assert m.losses.l_consist == 0.0

    def test_loss_total_is_sum_of_parts(self, tiny_pairs):
        state = init_state(small_cfg(), ARCH)
        m = train_step(state, tiny_pairs[:4])
        ls = m.losses
        assert ls.l_total == pytest.approx(ls.l_obj + ls.l_cls + ls.l_reg + ls.l_consist,
                                           rel=1e-15)
        for v in (ls.l_obj, ls.l_cls, ls.l_reg, ls.l_consist):
            assert v >= 0.0


class TestTrainLoop:
    def test_step_count_matches_schedule(self, tiny_pairs, tmp_path):
        cfg = small_cfg(epochs=1, batch_size=2)
        state, metrics = train(cfg, ARCH, tiny_pairs[:4], tmp_path, quiet=True)
        assert len(metrics) == 2
        lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == METRICS_HEADER
        assert len(lines) == 3

    def test_identical_config_and_seed_reproduces_checkpoints(self, tiny_pairs, tmp_path):
        cfg = small_cfg(epochs=2, batch_size=3)
        train(cfg, ARCH, tiny_pairs, tmp_path / "a", quiet=True)
        train(cfg, ARCH, tiny_pairs, tmp_path / "b", quiet=True)
        for name in ("ckpt.base", "ckpt.aux"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        strip = lambda p: ["".join(l.split(",")[:-1]) for l in p.read_text().splitlines()]
        assert strip(tmp_path / "a" / "metrics.csv") == strip(tmp_path / "b" / "metrics.csv")

    def test_disabled_framework_collapses_to_supervised_run(self, tiny_pairs, tmp_path):
        full_off = small_cfg(epochs=2, aux=True, consistency=False, pseudo_degrade=False)
        plain = small_cfg(epochs=2, aux=False, consistency=False, pseudo_degrade=False)
        s1, _ = train(full_off, ARCH, tiny_pairs, tmp_path / "x", quiet=True)
        s2, _ = train(plain, ARCH, tiny_pairs, tmp_path / "y", quiet=True)
        for pid in s1.aux.ids():
            assert np.array_equal(s1.aux[pid].data, s2.aux[pid].data)
        assert (tmp_path / "x" / "ckpt.aux").read_bytes() \
            == (tmp_path / "y" / "ckpt.aux").read_bytes()

    def test_no_aux_writes_single_checkpoint(self, tiny_pairs, tmp_path):
        cfg = small_cfg(aux=False, consistency=False)
        train(cfg, ARCH, tiny_pairs[:4], tmp_path, quiet=True)
        assert (tmp_path / "ckpt.aux").exists()
        assert not (tmp_path / "ckpt.base").exists()
        assert deliverable_name(cfg) == "ckpt.aux"
        assert deliverable_name(small_cfg()) == "ckpt.base"

    def test_checkpoints_load_back(self, tiny_pairs, tmp_path):
        state, _ = train(small_cfg(), ARCH, tiny_pairs[:4], tmp_path, quiet=True)
        base = load_params(tmp_path / "ckpt.base")
        for pid in base.ids():
            assert np.array_equal(base[pid].data, state.base[pid].data)

    def test_degradation_rate_tracks_probability(self, tiny_pairs):
        cfg = small_cfg(epochs=25, batch_size=4, lr=0.001)
        state = init_state(cfg, ARCH)
        state.degrade_params = DegradeParams(probability=0.5)
        for _ in range(100):
            train_step(state, tiny_pairs[:4])
        assert 0.35 <= state.running_applied_frac <= 0.65
