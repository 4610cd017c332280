import math

import numpy as np
import pytest

from adaptcd.fusion import McaBlock, fuse, to_grid
from adaptcd.gradcheck import grad_check
from adaptcd.tensor import Tensor


def _block(dim=8, frames=2, seed=0):
    return McaBlock(np.random.default_rng(seed), dim, num_frames=frames, dtype=np.float64)


def _ln(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def reference_mca(block, feats):
    """Plain-numpy MCA over features [T, N, D], one patch at a time."""
    p = {n: t.data for n, t in block.named_parameters()}
    t_count, n_count, d = feats.shape
    out = np.zeros((n_count, d))
    zm = p["mask_query"][0]
    for n in range(n_count):
        zt = feats[:, n, :] + p["temporal_pos"]
        kv = _ln(zt, p["ln1.gamma"], p["ln1.beta"])
        q = _ln(zm, p["ln2.gamma"], p["ln2.beta"]) @ p["query.weight"] + p["query.bias"]
        k = kv @ p["key.weight"] + p["key.bias"]
        v = kv @ p["value.weight"] + p["value.bias"]
        s = k @ q / math.sqrt(d)
        a = np.exp(s - s.max())
        a /= a.sum()
        z = zm + (a @ v) @ p["out.weight"] + p["out.bias"]
        h = _gelu(_ln(z, p["ln3.gamma"], p["ln3.beta"]) @ p["mlp.fc1.weight"] + p["mlp.fc1.bias"])
        out[n] = z + h @ p["mlp.fc2.weight"] + p["mlp.fc2.bias"]
    return out


class TestTemporalStack:
    def test_moves_elements(self, rng):
        block = _block()
        block.temporal_pos.data[:] = 0
        z = rng.normal(size=(2, 5, 8))
        out = block.temporal_stack(Tensor(z)).data
        assert out.shape == (5, 2, 8)
        for t in range(2):
            for n in range(5):
                np.testing.assert_array_equal(out[n, t], z[t, n])

    def test_double_transpose(self, rng):
        block = _block(frames=5)
        block.temporal_pos.data[:] = 0
        z = rng.normal(size=(5, 5, 8))
        np.testing.assert_array_equal(block.temporal_stack(block.temporal_stack(Tensor(z))).data, z)

    def test_hand_sum(self):
        block = _block(dim=2)
        block.temporal_pos.data[:] = [[10.0, 20.0], [30.0, 40.0]]
        z = np.array([[[1.0, 2.0]], [[3.0, 4.0]]])  # T=2, N=1, D=2
        out = block.temporal_stack(Tensor(z)).data
        np.testing.assert_array_equal(out, [[[11.0, 22.0], [33.0, 44.0]]])

    def test_wrong_frame_count(self, rng):
        with pytest.raises(ValueError, match="frames"):
            _block(frames=2).temporal_stack(Tensor(rng.normal(size=(3, 4, 8))))


class TestMcaBlock:
    def test_matches_reference(self, rng):
        block = _block()
        for p in block.parameters():
            p.data = p.data + rng.normal(0, 0.3, size=p.shape)
        feats = rng.normal(size=(2, 6, 8))
        np.testing.assert_allclose(block(Tensor(feats)).data, reference_mca(block, feats), atol=1e-12)

    def test_hand_toy(self):
        # N=1, T=2, D=2; identity projections, zero MLP, unit LN gains
        block = _block(dim=2)
        for lin in (block.query, block.key, block.value, block.out):
            lin.weight.data[:] = np.eye(2)
        block.mlp.fc1.weight.data[:] = 0
        block.mlp.fc2.weight.data[:] = 0
        block.temporal_pos.data[:] = [[0.0, 1.0], [0.0, 0.0]]
        block.mask_query.data[:] = [[1.0, 0.0]]
        feats = np.array([[[2.0, 0.0]], [[0.0, 3.0]]])

        def ln_gap(gap):  # LayerNorm of a 2-vector whose entries differ by gap
            return (gap / 2) / math.sqrt(gap**2 / 4 + 1e-6)

        c1, c3 = ln_gap(1.0), ln_gap(3.0)
        k1, k2 = np.array([c1, -c1]), np.array([-c3, c3])
        q = np.array([c1, -c1])
        s1, s2 = q @ k1 / math.sqrt(2), q @ k2 / math.sqrt(2)
        a1 = math.exp(s1) / (math.exp(s1) + math.exp(s2))
        expected = np.array([1.0, 0.0]) + a1 * k1 + (1 - a1) * k2
        np.testing.assert_allclose(block(Tensor(feats)).data[0], expected, atol=1e-12)

    def test_single_frame(self, rng):
        block = _block(frames=1)
        feats = rng.normal(size=(1, 4, 8))
        out = block(Tensor(feats)).data
        np.testing.assert_array_equal(block.last_attn, np.ones((4, 1, 1)))
        np.testing.assert_allclose(out, reference_mca(block, feats), atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        block = _block(frames=3)
        block(Tensor(rng.normal(size=(2, 3, 7, 8))))
        assert block.last_attn.shape == (2, 7, 1, 3)
        np.testing.assert_allclose(block.last_attn.sum(-1), 1.0, atol=1e-10)

    def test_score_count_is_n_times_t(self, rng):
        block = _block(frames=3)
        block(Tensor(rng.normal(size=(3, 11, 8))))
        assert block.last_attn.size == 11 * 3

    def test_swap_with_equal_embeddings_is_bitwise(self, rng):
        block = _block()
        block.temporal_pos.data[1] = block.temporal_pos.data[0]
        feats = rng.normal(size=(2, 9, 8))
        a = block(Tensor(feats)).data
        b = block(Tensor(feats[::-1].copy())).data
        assert a.tobytes() == b.tobytes()

    def test_swap_with_distinct_embeddings_differs(self, rng):
        block = _block()
        feats = rng.normal(size=(2, 9, 8))
        assert not np.array_equal(block(Tensor(feats)).data, block(Tensor(feats[::-1].copy())).data)

    def test_identical_frames_match_single_frame_path(self, rng):
        pair = _block(frames=2)
        single = _block(frames=1)
        pair.temporal_pos.data[1] = pair.temporal_pos.data[0]
        for (name, p), (_, q) in zip(pair.named_parameters(), single.named_parameters()):
            q.data = p.data[:1].copy() if name == "temporal_pos" else p.data.copy()
        frame = rng.normal(size=(1, 6, 8))
        np.testing.assert_allclose(
            pair(Tensor(np.concatenate([frame, frame]))).data, single(Tensor(frame)).data, atol=1e-12
        )

    def test_patch_permutation_commutes(self, rng):
        block = _block()
        feats = rng.normal(size=(2, 7, 8))
        perm = rng.permutation(7)
        np.testing.assert_array_equal(block(Tensor(feats[:, perm])).data, block(Tensor(feats)).data[perm])

    def test_gradcheck_two_patches(self, rng):
        block = _block()
        feats = Tensor(rng.normal(size=(2, 2, 8)), requires_grad=True)
        err = grad_check(lambda: (block(feats) ** 2).sum(), [feats, *block.parameters()], max_coords=8)
        assert err < 1e-5


class TestFuse:
    def test_shape(self, rng):
        block = _block()
        assert fuse(block, Tensor(rng.normal(size=(2, 12, 8))), (3, 4)).shape == (8, 3, 4)
        assert fuse(block, Tensor(rng.normal(size=(5, 2, 12, 8))), (3, 4)).shape == (5, 8, 3, 4)

    def test_row_major_layout(self, rng):
        tokens = rng.normal(size=(6, 4))
        grid = to_grid(Tensor(tokens), (2, 3)).data
        for n in range(6):
            np.testing.assert_array_equal(grid[:, n // 3, n % 3], tokens[n])

    def test_grid_mismatch(self, rng):
        with pytest.raises(ValueError, match="grid"):
            fuse(_block(), Tensor(rng.normal(size=(2, 10, 8))), (3, 4))

    def test_three_frames(self, rng):
        block = _block(frames=3)
        out = fuse(block, Tensor(rng.normal(size=(3, 4, 8))), (2, 2))
        assert out.shape == (8, 2, 2) and block.last_attn.shape[-1] == 3
