"""Reference implementations built directly from numpy, for comparison with
the supernet."""

from __future__ import annotations

import math

import numpy as np

from mpsupernet.space import SubnetConfig


def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def _interp(src, dst):
    m = np.zeros((dst, src))
    for i in range(dst):
        pos = i * (src - 1) / (dst - 1) if dst > 1 else 0.0
        lo = min(int(math.floor(pos)), src - 2) if src > 1 else 0
        f = pos - lo
        m[i, lo] += 1 - f
        if src > 1:
            m[i, lo + 1] += f
    return m


def resize(grid, h, w):
    return np.einsum("ia,jb,abc->ijc", _interp(grid.shape[0], h), _interp(grid.shape[1], w), grid)


def reference_forward(params: dict, space, cfg: SubnetConfig, images: np.ndarray,
                      with_features: bool = False):
    """Full-precision float64 forward of ``cfg`` (no quantization anywhere,
    head included), written without the tensor engine."""
    P = {k: np.asarray(v.data, np.float64) for k, v in params.items()}
    x = np.asarray(images, np.float64)
    bsz, res = x.shape[0], x.shape[1]
    p, d, h = space.patch, space.embed_dim, space.heads
    g = res // p
    hd = d // h
    patches = np.stack([x[:, i * p:(i + 1) * p, j * p:(j + 1) * p, :].reshape(bsz, -1)
                        for i in range(g) for j in range(g)], axis=1)
    pos = P["pos"] if g == P["pos"].shape[0] else resize(P["pos"], g, g)
    t = patches @ P["embed.w"] + P["embed.b"] + pos.reshape(g * g, d)
    for s, depth in enumerate(cfg.depths):
        for j in range(depth):
            pre = f"s{s}.b{j}"
            u = _ln(t, P[pre + ".ln1.g"], P[pre + ".ln1.b"])
            q, k, v = (u @ P[f"{pre}.{n}.w"] + P[f"{pre}.{n}.b"] for n in "qkv")
            heads = []
            for a in range(h):
                sl = slice(a * hd, (a + 1) * hd)
                sc = q[..., sl] @ k[..., sl].transpose(0, 2, 1) / math.sqrt(hd)
                sc = np.exp(sc - sc.max(-1, keepdims=True))
                heads.append((sc / sc.sum(-1, keepdims=True)) @ v[..., sl])
            t = t + np.concatenate(heads, -1) @ P[pre + ".proj.w"] + P[pre + ".proj.b"]
            u = _ln(t, P[pre + ".ln2.g"], P[pre + ".ln2.b"])
            hid = math.ceil(cfg.mlp_ratios[s][j] * d)
            z = u @ P[pre + ".fc1.w"][:, :hid] + P[pre + ".fc1.b"][:hid]
            z = 0.5 * z * (1 + np.tanh(math.sqrt(2 / math.pi) * (z + 0.044715 * z ** 3)))
            t = t + z @ P[pre + ".fc2.w"][:hid] + P[pre + ".fc2.b"]
    t = _ln(t, P["norm.g"], P["norm.b"])
    t = t @ P["out.w"] + P["out.b"]
    logits = (t @ P["head.w"] + P["head.b"]).reshape(bsz, g, g, -1)
    out = np.stack([resize(l, res, res) for l in logits])
    return (t, out) if with_features else out
