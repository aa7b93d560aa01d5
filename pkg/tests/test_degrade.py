import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duodet.degrade import (
    DegradeParams,
    TestCondition,
    apply_condition,
    parse_condition,
    pseudo_degrade,
    sample_region,
)
from duodet.errors import ConditionError
from duodet.synthdata import ModalityPair


def make_pair(h=16, w=24, seed=0):
    rng = np.random.default_rng(seed)
    return ModalityPair(
        id="x",
        rgb=rng.uniform(0, 255, (3, h, w)),
        tir=rng.uniform(0, 255, (1, h, w)),
        annotations=[],
        meta={"tag": "day"},
    )


class TestPseudoDegrade:
    def test_probability_zero_is_identity(self):
        pair = make_pair()
        params = DegradeParams(probability=0.0)
        rng = np.random.default_rng(1)
        for _ in range(20):
            out, spec = pseudo_degrade(pair, params, rng)
            assert not spec.applied
            assert np.array_equal(out.rgb, pair.rgb)
            assert np.array_equal(out.tir, pair.tir)

    def test_forced_draw_arithmetic(self):
        pair = make_pair()
        pair.rgb[:] = 100.0

        class Forced:
            def __init__(self):
                self.calls = 0
            def random(self):
                self.calls += 1
                return 0.0  # applied, then rgb chosen
            def uniform(self, lo, hi):
                return 0.5
            def normal(self, mu, sigma):
                return 100.0

        out, spec = pseudo_degrade(pair, DegradeParams(), Forced())
        assert spec.applied and spec.modality == "rgb"
        assert np.all(out.rgb == 150.0)  # 100 + 0.5 * 100
        assert np.array_equal(out.tir, pair.tir)

    def test_exactly_one_modality_touched_and_in_range(self):
        pair = make_pair()
        params = DegradeParams(probability=1.0)
        rng = np.random.default_rng(3)
        for _ in range(50):
            out, spec = pseudo_degrade(pair, params, rng)
            assert spec.applied
            changed_rgb = not np.array_equal(out.rgb, pair.rgb)
            changed_tir = not np.array_equal(out.tir, pair.tir)
            assert changed_rgb != changed_tir
            untouched = out.tir if spec.modality == "rgb" else out.rgb
            original = pair.tir if spec.modality == "rgb" else pair.rgb
            assert untouched is original  # bit-identical by construction
            touched = out.rgb if spec.modality == "rgb" else out.tir
            assert touched.min() >= 0.0 and touched.max() <= 255.0
            assert out.annotations is pair.annotations

    def test_draw_sequence_reproducible(self):
        pair = make_pair()
        params = DegradeParams()

        def run(seed):
            rng = np.random.default_rng(seed)
            return [pseudo_degrade(pair, params, rng)[1] for _ in range(100)]

        assert run(9) == run(9)
        assert run(9) != run(10)

    def test_monte_carlo_statistics(self):
        params = DegradeParams()
        pair = make_pair(h=4, w=4)
        rng = np.random.default_rng(20240518)
        applied = 0
        cs, bs = [], []
        n = 10_000
        draws = 0
        while len(cs) < n:
            out, spec = pseudo_degrade(pair, params, rng)
            draws += 1
            if spec.applied:
                applied += 1
                cs.append(spec.c)
                bs.append(spec.b)
        cs, bs = np.array(cs), np.array(bs)
        assert abs(cs.mean() - 0.35) <= 0.02
        assert abs(bs.mean() - 127.45) <= 1.5
        assert ((bs >= 0) & (bs <= 255)).mean() >= 0.98
        # Applied fraction over the first 10k samples drawn.
        rng2 = np.random.default_rng(20240518)
        flags = [pseudo_degrade(pair, params, rng2)[1].applied for _ in range(10_000)]
        assert abs(np.mean(flags) - 0.30) <= 0.015

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError):
            DegradeParams(probability=1.5)
        with pytest.raises(ValueError):
            DegradeParams(u=1.0)
        with pytest.raises(ValueError):
            DegradeParams(sigma2=0.0)


class TestConditionGrammar:
    @pytest.mark.parametrize("text,kind,modality", [
        ("balanced", "balanced", ""),
        ("contrast:rgb:0.5", "contrast", "rgb"),
        ("drop:tir", "contrast", "tir"),
        ("noise:rgb:20", "noise", "rgb"),
        ("region:tir:0.25:7", "region", "tir"),
    ])
    def test_accepts_grammar(self, text, kind, modality):
        cond = parse_condition(text)
        assert cond.kind == kind and cond.modality == modality
        assert cond.name == text

    def test_drop_is_contrast_zero(self):
        assert parse_condition("drop:rgb").factor == 0.0

    @pytest.mark.parametrize("text", [
        "drop:depth", "contrast:rgb", "contrast:rgb:1.5", "noise:rgb:-2",
        "fog:rgb:1", "region:rgb:0.5", "region:rgb:0.5:x", "balanced:rgb",
    ])
    def test_rejects_typos_with_grammar_hint(self, text):
        with pytest.raises(ConditionError, match="grammar"):
            parse_condition(text)


class TestApplyCondition:
    def test_balanced_identity(self):
        pair = make_pair()
        assert apply_condition(pair, parse_condition("balanced")) is pair

    def test_contrast_factor_one_unchanged(self):
        pair = make_pair()
        out = apply_condition(pair, parse_condition("contrast:rgb:1.0"))
        assert np.array_equal(out.rgb, pair.rgb)

    def test_drop_collapses_to_mid_gray(self):
        pair = make_pair()
        out = apply_condition(pair, parse_condition("drop:tir"))
        assert np.all(out.tir == 127.5)
        assert np.array_equal(out.rgb, pair.rgb)

    def test_noise_std_close_to_sigma(self):
        pair = make_pair(h=64, w=80, seed=5)
        pair.tir[:] = 127.5  # keep the pre-clamp delta observable
        out = apply_condition(pair, parse_condition("noise:tir:20"),
                              rng=np.random.default_rng(123))
        deltas = out.tir - pair.tir
        assert abs(deltas.std() - 20.0) <= 0.5

    def test_region_changes_only_inside_rectangle(self):
        pair = make_pair(h=32, w=40)
        cond = parse_condition("region:rgb:0.0:5")
        rng = np.random.default_rng(cond.seed)
        x1, y1, x2, y2 = sample_region(pair.height, pair.width,
                                       np.random.default_rng(cond.seed))
        out = apply_condition(pair, cond, rng=rng)
        assert np.all(out.rgb[:, y1:y2, x1:x2] == 127.5)
        outside = np.ones((pair.height, pair.width), dtype=bool)
        outside[y1:y2, x1:x2] = False
        assert np.array_equal(out.rgb[:, outside], pair.rgb[:, outside])

    def test_region_area_fraction_in_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            x1, y1, x2, y2 = sample_region(64, 80, rng)
            frac = (x2 - x1) * (y2 - y1) / (64 * 80)
            assert 0.2 <= frac <= 0.65  # rounding slack around [0.25, 0.6]

    @given(st.floats(min_value=0.0, max_value=1.0),
           st.floats(min_value=0.0, max_value=1.0))
    @settings(max_examples=30, deadline=None)
    def test_contrast_monotone_in_factor(self, f1, f2):
        lo, hi = sorted((f1, f2))
        pair = make_pair(h=8, w=8, seed=2)
        out_lo = apply_condition(pair, TestCondition("c", "contrast", "tir", factor=lo))
        out_hi = apply_condition(pair, TestCondition("c", "contrast", "tir", factor=hi))
        d_lo = np.abs(out_lo.tir - pair.tir)
        d_hi = np.abs(out_hi.tir - pair.tir)
        assert np.all(d_hi <= d_lo + 1e-12)

    def test_outputs_stay_in_pixel_range(self):
        pair = make_pair(seed=9)
        rng = np.random.default_rng(0)
        for text in ("contrast:rgb:0.3", "drop:rgb", "noise:tir:60", "region:tir:0.1:3"):
            out = apply_condition(pair, parse_condition(text), rng=rng)
            for img in (out.rgb, out.tir):
                assert img.min() >= 0.0 and img.max() <= 255.0
