import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptcd.peft import (
    METHODS,
    Adapter,
    LoraPair,
    PeftConfig,
    Prefix,
    bottleneck_dim,
    build_model,
    merge_lora,
    partition_report,
)
from adaptcd.tensor import Tensor
from adaptcd.vit import Attention, ViTConfig
from adaptcd.decoder import stage_widths

from .conftest import random_frames

VIT_S = ViTConfig()


def gelu_ref(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def _model(cfg, method, **kw):
    return build_model(cfg, PeftConfig(method=method, **kw), seed=3, dtype=np.float64)


def _jitter(params, rng, scale=0.1):
    for p in params:
        p.data = p.data + rng.normal(0, scale, size=p.shape)


class TestPeftConfig:
    def test_unknown_method(self):
        with pytest.raises(ValueError, match="unknown PEFT method"):
            PeftConfig(method="bitfit").validate()

    @pytest.mark.parametrize("kw", [{"r": 0.5}, {"rank": 0}, {"prefix_len": 0}, {"lora_targets": ["x"]}])
    def test_bad_values(self, kw):
        with pytest.raises(ValueError):
            PeftConfig(**kw).validate()

    @pytest.mark.parametrize("dim,r,expected", [(384, 6, 64), (32, 6, 5), (4, 2, 2), (8, 100, 1)])
    def test_bottleneck(self, dim, r, expected):
        assert bottleneck_dim(dim, r) == expected


class TestIdentityAtInit:
    @pytest.mark.parametrize("method", ["adapter", "lora", "ia3"])
    def test_bitwise_equal_to_plain_model(self, tiny_cfg, rng, method):
        plain = build_model(tiny_cfg, PeftConfig(method="linear_probe"), seed=5)
        tuned = build_model(tiny_cfg, PeftConfig(method=method), seed=5)
        frames = random_frames(rng, 2, 32)
        assert tuned(frames).data.tobytes() == plain(frames).data.tobytes()

    def test_prefix_changes_output(self, tiny_cfg, rng):
        # prefix tokens are attended to from the start; no identity point exists
        plain = build_model(tiny_cfg, PeftConfig(method="linear_probe"), seed=5)
        tuned = build_model(tiny_cfg, PeftConfig(method="prefix"), seed=5)
        frames = random_frames(rng, 1, 32)
        assert not np.array_equal(tuned(frames).data, plain(frames).data)

    def test_adapter_scale_zero_is_identity_for_any_weights(self, tiny_cfg, rng):
        plain = _model(tiny_cfg, "linear_probe")
        tuned = _model(tiny_cfg, "adapter", s=0.0)
        _jitter(tuned.peft.parameters(), rng, 1.0)
        frames = random_frames(rng, 1, 32)
        np.testing.assert_array_equal(tuned(frames).data, plain(frames).data)


class TestAdapter:
    def test_hand_computed(self):
        ad = Adapter(np.random.default_rng(0), 4, 2, scale=0.5, dtype=np.float64)
        ad.w_down.data[:] = [[1.0, 0.0], [0.0, 1.0], [1.0, -1.0], [0.5, 0.5]]
        ad.b_down.data[:] = [0.1, -0.2]
        ad.w_up.data[:] = [[1.0, 2.0, 0.0, -1.0], [0.0, 1.0, 1.0, 1.0]]
        ad.b_up.data[:] = [0.0, 0.0, 0.5, 0.0]
        z = np.array([[1.0, 2.0, -1.0, 0.0]])
        h0 = gelu_ref(1.0 - 1.0 + 0.1)
        h1 = gelu_ref(2.0 + 1.0 - 0.2)
        expected = 0.5 * np.array([[h0, 2 * h0 + h1, h1 + 0.5, -h0 + h1]])
        np.testing.assert_allclose(ad(Tensor(z)).data, expected, atol=1e-14)

    def test_parallel_to_mlp_on_post_attention_feature(self, tiny_cfg, rng):
        model = _model(tiny_cfg, "adapter")
        _jitter(model.peft.parameters(), rng)
        layer = model.backbone.layer0
        z = Tensor(rng.normal(size=(5, 32)))
        with_branch = layer(z).data
        adapter, layer._adapter = layer._adapter, None
        without = layer(z).data
        post_attn = z + layer.attn(layer.ln1(z))
        np.testing.assert_allclose(with_branch - without, adapter(post_attn).data, atol=1e-12)

    def test_scale_linearity(self, tiny_cfg, rng):
        model = _model(tiny_cfg, "adapter")
        _jitter(model.peft.parameters(), rng)
        layer = model.backbone.layer0
        z = Tensor(rng.normal(size=(5, 32)))
        outs = {}
        for s in (0.0, 1.0, 2.5):
            layer._adapter.scale = s
            outs[s] = layer(z).data
        np.testing.assert_allclose(outs[2.5] - outs[0.0], 2.5 * (outs[1.0] - outs[0.0]), atol=1e-12)

    def test_bottleneck_shapes(self):
        model = build_model(ViTConfig(image_size=32, patch_size=16, depth=1, dim=384, heads=6), PeftConfig(r=6))
        ad = model.peft.layer0.adapter
        assert ad.w_down.shape == (384, 64) and ad.w_up.shape == (64, 384)
        assert not ad.w_up.data.any()


class TestLora:
    def test_zero_b_is_zero_update(self, rng):
        pair = LoraPair(rng, 6, 6, 2, dtype=np.float64)
        assert not pair(Tensor(rng.normal(size=(3, 6)))).data.any()
        assert pair.a.data.std() > 0

    def test_full_rank_reproduces_delta(self, rng):
        pair = LoraPair(rng, 3, 3, 3, dtype=np.float64)
        delta = rng.normal(size=(3, 3))
        pair.a.data[:] = np.eye(3)
        pair.b.data[:] = delta
        x = rng.normal(size=(4, 3))
        np.testing.assert_allclose(pair(Tensor(x)).data, x @ delta, atol=1e-14)

    @pytest.mark.parametrize("rank", [1, 2, 4])
    def test_merge_matches_unmerged(self, tiny_cfg, rng, rank):
        model = _model(tiny_cfg, "lora", rank=rank)
        _jitter(model.peft.parameters(), rng)
        frames = random_frames(rng, 2, 32)
        before = model(frames).data
        merge_lora(model)
        assert not model.backbone.layer0.attn._lora
        np.testing.assert_allclose(model(frames).data, before, atol=1e-9, rtol=0)

    def test_targets_subset(self, tiny_cfg):
        model = _model(tiny_cfg, "lora", lora_targets=["q", "v"])
        assert sorted(model.backbone.layer1.attn._lora) == ["q", "v"]


class TestIa3:
    def test_zero_value_scale_leaves_output_bias(self, rng):
        model = _model(ViTConfig(image_size=16, patch_size=8, depth=1, dim=8, heads=2), "ia3")
        attn = model.backbone.layer0.attn
        attn.bo.data[:] = rng.normal(size=8)
        model.peft.layer0.ia3.l_v.data[:] = 0
        out = attn(Tensor(rng.normal(size=(5, 8)))).data
        np.testing.assert_array_equal(out, np.broadcast_to(attn.bo.data, (5, 8)))

    def test_key_scale_two_sharpens(self):
        model = _model(ViTConfig(image_size=16, patch_size=8, depth=1, dim=2, heads=1), "ia3")
        attn = model.backbone.layer0.attn
        for w in ("wq", "wk", "wv", "wo"):
            getattr(attn, w).data[:] = np.eye(2)
        model.peft.layer0.ia3.l_k.data[:] = 2.0
        out = attn(Tensor([[1.0, 0.0], [0.0, 1.0]])).data
        a = 2 / math.sqrt(2)
        p = math.exp(a) / (math.exp(a) + 1)
        np.testing.assert_allclose(out, [[p, 1 - p], [1 - p, p]], atol=1e-14)

    def test_mlp_hidden_scale(self, tiny_cfg, rng):
        model = _model(tiny_cfg, "ia3")
        mlp = model.backbone.layer0.mlp
        x = rng.normal(size=(3, 32))
        scale = rng.normal(size=128)
        model.peft.layer0.ia3.l_mlp.data[:] = scale
        h = gelu_ref(x @ mlp.fc1.weight.data + mlp.fc1.bias.data) * scale
        np.testing.assert_allclose(mlp(Tensor(x)).data, h @ mlp.fc2.weight.data + mlp.fc2.bias.data, atol=1e-12)


class TestPrefix:
    def test_output_length_preserved(self, tiny_cfg, rng):
        model = _model(tiny_cfg, "prefix", prefix_len=3)
        layer = model.backbone.layer0
        assert layer(Tensor(rng.normal(size=(2, 7, 32)))).shape == (2, 7, 32)

    def test_copy_of_token_splits_its_attention(self):
        attn = Attention(np.random.default_rng(0), 2, 1, dtype=np.float64)
        for w in ("wq", "wk", "wv", "wo"):
            getattr(attn, w).data[:] = np.eye(2)
        attn.keep_attn = True
        prefix = Prefix(np.random.default_rng(0), 1, 2, dtype=np.float64)
        prefix.tokens.data[:] = [[1.0, 0.0]]
        attn(prefix.prepend(Tensor([[1.0, 0.0], [0.0, 1.0]])))
        e = math.exp(1 / math.sqrt(2))
        w = e / (2 * e + 1)
        np.testing.assert_allclose(attn.last_attn[0, 1], [w, w, 1 - 2 * w], atol=1e-14)

    def test_strip_removes_prefix_rows(self, rng):
        prefix = Prefix(rng, 4, 3, dtype=np.float64)
        z = Tensor(rng.normal(size=(2, 5, 3)))
        joined = prefix.prepend(z)
        assert joined.shape == (2, 9, 3)
        np.testing.assert_array_equal(prefix.strip(joined).data, z.data)


def _oracle_counts(cfg, method, peft_cfg, num_frames=2):
    """Closed-form parameter counts per component, written out from the layer shapes."""
    d, p, h = cfg.dim, cfg.patch_size, cfg.dim * cfg.mlp_ratio
    mlp = d * h + h + h * d + d
    layer = 2 * 2 * d + 4 * (d * d + d) + mlp
    backbone = (p * p * cfg.in_chans * d + d) + d + (cfg.num_patches + 1) * d + cfg.depth * layer
    fusion = num_frames * d + d + 3 * 2 * d + 4 * (d * d + d) + mlp
    widths = stage_widths(d, p)
    decoder = sum(a * b * 9 + b + 2 * b for a, b in zip(widths, widths[1:])) + widths[-1] * 2 + 2
    if method == "adapter":
        k = bottleneck_dim(d, peft_cfg.r)
        per_layer = d * k + k + k * d + d
    elif method == "lora":
        per_layer = len(peft_cfg.lora_targets) * peft_cfg.rank * (d + d)
    elif method == "ia3":
        per_layer = ("k" in peft_cfg.ia3_targets) * d + ("v" in peft_cfg.ia3_targets) * d + ("mlp" in peft_cfg.ia3_targets) * h
    elif method == "prefix":
        per_layer = peft_cfg.prefix_len * d
    else:
        per_layer = 0
    peft = cfg.depth * per_layer
    head = fusion + decoder
    trainable = backbone + head + peft if method == "full" else head + peft
    frozen = 0 if method == "full" else backbone
    return {"frozen_count": frozen, "trainable_count": trainable, "peft_count": peft}


class TestPartition:
    @pytest.mark.parametrize("method", METHODS)
    def test_matches_closed_form(self, tiny_cfg, method):
        pc = PeftConfig(method=method, prefix_len=3, rank=2)
        report = partition_report(build_model(tiny_cfg, pc))
        expected = _oracle_counts(tiny_cfg, method, pc)
        assert {k: report[k] for k in expected} == expected
        total = expected["frozen_count"] + expected["trainable_count"]
        assert report["ratio"] == expected["trainable_count"] / total

    def test_walk_matches_report(self, tiny_cfg):
        model = build_model(tiny_cfg, PeftConfig(method="lora"))
        walked = sum(int(np.prod(p.shape)) for n, p in model.named_parameters() if not p.frozen)
        assert partition_report(model)["trainable_count"] == walked

    def test_vit_s_per_layer_counts(self):
        assert _oracle_counts(VIT_S, "adapter", PeftConfig(r=6))["peft_count"] == 12 * 49_600
        assert _oracle_counts(VIT_S, "lora", PeftConfig(method="lora", rank=1))["peft_count"] == 12 * 3_072

    def test_full_has_nothing_frozen(self, tiny_cfg):
        report = partition_report(build_model(tiny_cfg, PeftConfig(method="full")))
        assert report["frozen_count"] == 0 and report["ratio"] == 1.0

    def test_linear_probe_trains_only_the_head(self, tiny_cfg):
        model = build_model(tiny_cfg, PeftConfig(method="linear_probe"))
        names = {n.split(".")[0] for n, _ in model.named_trainable()}
        assert names == {"fusion", "decoder"}

    @settings(max_examples=10, deadline=None)
    @given(r=st.sampled_from([1, 2, 4, 6, 8]), depth=st.integers(1, 3))
    def test_adapter_counts_property(self, r, depth):
        cfg = ViTConfig(image_size=16, patch_size=8, depth=depth, dim=16, heads=2)
        pc = PeftConfig(r=r)
        report = partition_report(build_model(cfg, pc))
        assert report["peft_count"] == _oracle_counts(cfg, "adapter", pc)["peft_count"]


class TestBuildModel:
    def test_shared_base_weights_across_methods(self, tiny_cfg):
        a = dict(build_model(tiny_cfg, PeftConfig(method="adapter"), seed=9).named_parameters())
        b = dict(build_model(tiny_cfg, PeftConfig(method="prefix"), seed=9).named_parameters())
        for name in a:
            if not name.startswith("peft."):
                assert a[name].data.tobytes() == b[name].data.tobytes(), name

    def test_names_are_dotted_paths(self, tiny_cfg):
        names = [n for n, _ in build_model(tiny_cfg, PeftConfig()).named_parameters()]
        assert "backbone.layer1.attn.wq" in names
        assert "peft.layer0.adapter.w_up" in names
        assert len(names) == len(set(names))

    def test_frozen_params_have_no_grad(self, tiny_cfg, rng):
        model = build_model(tiny_cfg, PeftConfig(), dtype=np.float64)
        model(random_frames(rng, 1, 32)).sum().backward()
        assert all(p.grad is None for _, p in model.named_frozen())
        assert all(p.grad is not None for _, p in model.named_trainable())
