import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from vlmproj.errors import ShapeError, ValidationError
from vlmproj.gradcheck import check_variant
from vlmproj.projector import (
    POOLED,
    VARIANTS,
    Projector,
    ProjectorSpec,
    build,
    closed_form_param_count,
    format_millions,
    param_count,
    param_shapes,
)
from vlmproj.tensor import gelu

FULL_DIMS = dict(d_v=1024, d_t=2048, grid_side=24, rho=2)


def small(variant, **kw):
    base = dict(variant=variant, d_v=3, d_t=4, grid_side=4, rho=2, seed=0)
    base.update(kw)
    return ProjectorSpec(**base)


class TestSpec:
    def test_unknown_variant(self):
        with pytest.raises(ValidationError):
            ProjectorSpec(variant="QFormer")

    def test_pool_must_divide_grid(self):
        with pytest.raises(ValidationError):
            ProjectorSpec(variant="LDPv2", grid_side=5, rho=2)

    def test_mlp2_ignores_divisibility(self):
        ProjectorSpec(variant="MLP2", grid_side=5, rho=2)

    def test_json_roundtrip(self):
        s = small("LearnablePE", seed=9)
        assert ProjectorSpec.from_json(s.to_json()) == s
        assert set(json.loads(s.to_json())) == {"variant", "d_v", "d_t", "grid_side", "rho", "seed"}


class TestParamCounts:
    @pytest.mark.parametrize(
        "variant,expected,label",
        [
            ("MLP2", 6_295_552, "6.30M"),
            ("AvgPoolOnly", 6_295_552, "6.30M"),
            ("LDPv2", 6_316_032, "6.32M"),
            ("LearnablePE", 6_590_464, "6.59M"),
        ],
    )
    def test_table_values(self, variant, expected, label):
        spec = ProjectorSpec(variant=variant, **FULL_DIMS)
        assert closed_form_param_count(spec) == expected
        assert sum(int(np.prod(s)) for s in param_shapes(spec).values()) == expected
        assert format_millions(expected) == label

    def test_ldpv1_three_pw_realization(self):
        spec = ProjectorSpec(variant="LDPv1", **FULL_DIMS)
        pw = 2048 * 2048 + 2048
        dw = 2048 * 9 + 2048
        expected = 6_295_552 + 3 * pw + 2 * dw
        assert expected == 18_925_568
        assert closed_form_param_count(spec) == expected
        assert format_millions(expected) == "18.93M"

    def test_peg_is_the_only_difference(self):
        a = closed_form_param_count(ProjectorSpec(variant="LDPv2", **FULL_DIMS))
        b = closed_form_param_count(ProjectorSpec(variant="MLP2", **FULL_DIMS))
        assert a - b == 2048 * 3 * 3 + 2048 == 20_480

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_built_count_matches_closed_form(self, variant):
        spec = small(variant, d_v=5, d_t=6, grid_side=6)
        assert param_count(build(spec)) == closed_form_param_count(spec)

    @pytest.mark.parametrize("n,label", [(0, "0.00M"), (5_000, "0.01M"), (4_999, "0.00M"), (12_345_000, "12.35M")])
    def test_half_up_formatting(self, n, label):
        assert format_millions(n) == label

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_seed_changes_values_not_shapes(self, variant):
        a, b = build(small(variant, seed=1)), build(small(variant, seed=2))
        assert a.param_shapes() == b.param_shapes()
        assert param_count(a) == param_count(b)
        assert any(not np.array_equal(a.params[k], b.params[k]) for k in a.params)


class TestInit:
    def test_uniform_bounds_and_zero_biases(self):
        p = build(small("LDPv2", d_v=16, d_t=8))
        assert np.abs(p.params["mlp.0.weight"]).max() <= np.sqrt(1 / 16)
        assert np.abs(p.params["peg.weight"]).max() <= np.sqrt(1 / 9)
        for name, t in p.params.items():
            if name.endswith("bias"):
                assert not t.any()

    def test_positional_table_starts_at_zero(self):
        assert not build(small("LearnablePE")).params["pos_embed"].any()


class TestForward:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_token_counts(self, variant, rng):
        spec = small(variant, grid_side=8)
        out = build(spec)(rng.standard_normal((64, 3)))
        assert out.shape == ({"MLP2": 64}.get(variant, 16), 4)

    def test_ldpv2_full_dims_token_count(self, rng):
        spec = ProjectorSpec(variant="LDPv2", d_v=16, d_t=8, grid_side=24, rho=2)
        assert build(spec)(rng.standard_normal((576, 16))).shape == (144, 8)

    def test_non_square_rejected(self, rng):
        with pytest.raises(ValidationError):
            build(small("LDPv2"))(rng.standard_normal((15, 3)))

    def test_width_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError):
            build(small("LDPv2"))(rng.standard_normal((16, 5)))

    def test_mlp2_single_token_is_linear_gelu_linear(self, rng):
        p = build(small("MLP2", grid_side=1))
        x = rng.standard_normal((1, 3))
        P = p.params
        ref = oracles.linear(gelu(oracles.linear(x, P["mlp.0.weight"], P["mlp.0.bias"])), P["mlp.2.weight"], P["mlp.2.bias"])
        np.testing.assert_allclose(p(x), ref, atol=1e-12, rtol=0)

    def test_ldpv2_matches_composed_oracle(self, rng):
        spec = small("LDPv2", grid_side=6)
        p = build(spec)
        for t in p.params.values():
            t += 0.1 * rng.standard_normal(t.shape)
        x = rng.standard_normal((36, 3))
        P = p.params
        f0 = oracles.pointwise_conv(gelu(oracles.pointwise_conv(x.reshape(6, 6, 3), P["mlp.0.weight"], P["mlp.0.bias"])),
                                    P["mlp.2.weight"], P["mlp.2.bias"])
        f1 = oracles.avgpool(f0, 2)
        ref = f1 + oracles.depthwise_conv(f1, P["peg.weight"], P["peg.bias"], 1, 1)
        np.testing.assert_allclose(p(x), ref.reshape(9, 4), atol=1e-12, rtol=0)

    def test_ldpv1_matches_composed_oracle(self, rng):
        p = build(small("LDPv1", grid_side=6))
        for t in p.params.values():
            t += 0.1 * rng.standard_normal(t.shape)
        x = rng.standard_normal((36, 3))
        P = p.params
        pw = lambda z, n: oracles.pointwise_conv(z, P[f"{n}.weight"], P[f"{n}.bias"])  # noqa: E731
        f0 = pw(gelu(pw(x.reshape(6, 6, 3), "mlp.0")), "mlp.2")
        a = oracles.depthwise_conv(f0, P["block1.dw.weight"], P["block1.dw.bias"], 1, 1)
        f1 = f0 + pw(gelu(pw(a, "block1.pw1")), "block1.pw2")
        f2 = pw(oracles.depthwise_conv(f1, P["block2.dw.weight"], P["block2.dw.bias"], 2, 1), "block2.pw")
        np.testing.assert_allclose(p(x), f2.reshape(9, 4), atol=1e-12, rtol=0)

    def test_deterministic(self, rng):
        x = rng.standard_normal((16, 3))
        a = build(small("LDPv1"))(x)
        assert a.tobytes() == build(small("LDPv1"))(x).tobytes()


class TestResidualIdentities:
    def test_zero_peg_equals_avgpool_only(self, rng):
        v2, pool = build(small("LDPv2")), build(small("AvgPoolOnly"))
        v2.params["peg.weight"][...] = 0
        v2.params["peg.bias"][...] = 0
        x = rng.standard_normal((16, 3))
        assert np.array_equal(v2(x), pool(x))

    def test_zero_table_equals_avgpool_only(self, rng):
        pe, pool = build(small("LearnablePE")), build(small("AvgPoolOnly"))
        x = rng.standard_normal((16, 3))
        assert np.array_equal(pe(x), pool(x))


@pytest.mark.parametrize("variant", VARIANTS)
def test_variant_gradients(variant):
    for seed in range(2):
        for r in check_variant(variant, seed):
            assert r.rel_error <= 1e-6, (r.wrt, r.rel_error)


@settings(max_examples=25, deadline=None)
@given(
    variant=st.sampled_from(POOLED),
    side=st.integers(1, 4),
    rho=st.integers(1, 3),
    seed=st.integers(0, 2**32 - 1),
)
def test_token_reduction_law(variant, side, rho, seed):
    spec = ProjectorSpec(variant=variant, d_v=2, d_t=3, grid_side=side * rho, rho=rho, seed=seed % 1000)
    x = np.random.default_rng(seed).standard_normal((spec.n_tokens_in, 2))
    assert build(spec)(x).shape[0] * rho * rho == spec.n_tokens_in


def test_save_load_roundtrip(tmp_path, rng):
    p = build(small("LDPv1", seed=3))
    p.save(tmp_path / "proj")
    q = Projector.load(tmp_path / "proj")
    assert q.spec == p.spec
    x = rng.standard_normal((16, 3))
    assert np.array_equal(p(x), q(x))
    manifest = json.loads((tmp_path / "proj" / "manifest.json").read_text())
    assert {e["name"] for e in manifest["tensors"]} == set(p.params)
