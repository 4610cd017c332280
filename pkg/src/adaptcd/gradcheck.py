"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from . import tensor as T


def grad_check(f, inputs, eps=1e-5, max_coords=None, seed=0):
    """Max over checked coordinates of |analytic - fd| / max(1, |analytic|, |fd|).

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``inputs`` (tensors with ``requires_grad``). With ``max_coords`` only that
    many randomly chosen coordinates per input are perturbed; otherwise every
    coordinate is.
    """
    inputs = list(inputs)
    for x in inputs:
        if x.dtype != np.float64:
            raise TypeError("gradient checks must run in float64")
        x.data = np.ascontiguousarray(x.data)
        x.grad = None
    out = f()
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with T.no_grad():
        for x, ga in zip(inputs, analytic):
            flat = x.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = rng.choice(flat.size, size=max_coords, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                fd = (fp - fm) / (2 * eps)
                a = ga.reshape(-1)[i]
                worst = max(worst, abs(a - fd) / max(1.0, abs(a), abs(fd)))
    return worst


def _leaf(rng, shape, scale=1.0):
    return T.Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _randomize(model, rng, names_prefix="peft."):
    # PEFT modules start at an identity point (zeros / ones); move them off it
    # so every branch carries gradient.
    for name, p in model.named_parameters():
        if name.startswith(names_prefix):
            p.data = p.data + rng.normal(0.0, 0.1, size=p.shape)


def run_suite(seed=0, image_size=32, max_coords=4):
    """Gradient checks for every differentiable op and the end-to-end model.

    Uses the tiny ViT (D=32, L=2, heads=2, P=8). Returns ``{check: max_rel_error}``.
    """
    from .decoder import Decoder
    from .fusion import McaBlock
    from .peft import METHODS, PeftConfig, build_model
    from .train import focal_jaccard_loss
    from .vit import TransformerLayer, ViTConfig

    rng = np.random.default_rng(seed)
    f64 = np.float64
    out = {}

    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 5))
    out["matmul"] = grad_check(lambda: (T.matmul(a, b) ** 2).sum(), [a, b])
    x = _leaf(rng, (3, 6))
    w = T.Tensor(rng.normal(size=(3, 6)))
    out["softmax"] = grad_check(lambda: (T.softmax(x, -1) * w).sum(), [x])
    g, bt = _leaf(rng, (6,)), _leaf(rng, (6,))
    out["layer_norm"] = grad_check(lambda: (T.layer_norm(x, g, bt) * w).sum(), [x, g, bt])
    out["gelu"] = grad_check(lambda: (T.gelu(x) * w).sum(), [x])
    img = _leaf(rng, (2, 3, 4, 4))
    k = _leaf(rng, (2, 3, 3, 3))
    out["conv2d"] = grad_check(lambda: (T.conv2d(img, k, padding=1) ** 2).sum(), [img, k])
    out["upsample"] = grad_check(lambda: (T.upsample_bilinear(img) ** 2).sum(), [img])

    layer = TransformerLayer(rng, 8, 2, 4, dtype=f64)
    for p in layer.parameters():
        p.data = p.data + rng.normal(0.0, 0.1, size=p.shape)
    z = _leaf(rng, (5, 8))
    out["transformer_layer"] = grad_check(
        lambda: (layer(z) ** 2).sum(), [z, *layer.parameters()], max_coords=max_coords
    )

    mca = McaBlock(rng, 8, num_frames=2, dtype=f64)
    feats = _leaf(rng, (2, 2, 8))  # T=2 frames, N=2 patches
    out["mca_block"] = grad_check(lambda: (mca(feats) ** 2).sum(), [feats, *mca.parameters()], max_coords=max_coords)

    dec = Decoder(rng, 8, 4, dtype=f64)
    feat = _leaf(rng, (8, 2, 2))
    out["decoder"] = grad_check(lambda: (dec(feat) ** 2).mean(), [feat, *dec.parameters()], max_coords=max_coords)

    logits = _leaf(rng, (2, 2, 2))
    target = rng.integers(0, 2, size=(2, 2))
    out["focal_jaccard_loss"] = grad_check(lambda: focal_jaccard_loss(logits, target), [logits])

    cfg = ViTConfig(image_size=image_size, patch_size=8, depth=2, dim=32, heads=2)
    frames = rng.uniform(0.0, 1.0, size=(1, 2, 3, image_size, image_size))
    mask = rng.integers(0, 2, size=(1, image_size, image_size))
    for method in METHODS:
        model = build_model(cfg, PeftConfig(method=method, prefix_len=2), seed=seed).astype(f64)
        _randomize(model, rng)
        params = [p for p in model.parameters() if not p.frozen]
        out[f"model_{method}"] = grad_check(
            lambda: focal_jaccard_loss(model(frames), mask), params, max_coords=max_coords
        )
    return out
