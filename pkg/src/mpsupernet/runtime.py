"""Standalone numpy inference for exported subnets.

Depends only on numpy and the container format, not on the supernet code,
so it doubles as an independent check of an export.

    python -m mpsupernet.runtime subnet.bin
"""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from .container import read_container

F32 = np.float32


def _fq(x, scale, zero, bits):
    k = np.clip(np.rint(x / scale + zero), 0, 2 ** bits - 1)
    return (k - zero) * scale


def _minmax8(x):
    lo, hi = F32(x.min()), F32(x.max())
    if not hi > lo:
        return x.copy()
    scale = F32((hi - lo) / F32(255))
    zero = F32(np.clip(np.rint(-lo / scale), 0, 255))
    return ((np.clip(np.rint(x / scale + zero), 0, 255) - zero) * scale).astype(F32)


def _layernorm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (F32(1) / np.sqrt(var + F32(eps))) * g + b


def _gelu(x):
    c = F32(math.sqrt(2.0 / math.pi))
    return F32(0.5) * x * (F32(1) + np.tanh(c * (x + F32(0.044715) * x ** 3)))


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _interp(src, dst):
    m = np.zeros((dst, src))
    if dst == 1 or src == 1:
        m[:, 0] = 1.0
        return m.astype(F32)
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    m[np.arange(dst), lo] = 1.0 - frac
    m[np.arange(dst), lo + 1] += frac
    return m.astype(F32)


def _upsample(x, size):
    h, w = x.shape[-3], x.shape[-2]
    if (h, w) == (size, size):
        return x.copy()
    rh, rw = _interp(h, size), _interp(w, size)
    tmp = np.einsum("ia,...awc->...iwc", rh, x)
    return np.einsum("jb,...ibc->...ijc", rw, tmp).astype(F32)


class ExportedSubnet:
    def __init__(self, arrays: dict, meta: dict):
        self.a = arrays
        self.meta = meta
        self.weights = {}
        for name, info in meta["layers"].items():
            if info["wbits"] == 32:
                self.weights[name] = arrays[f"{name}/weight"]
            else:
                codes = arrays[f"{name}/codes"]
                zero, scale = arrays[f"{name}/w_zero"], arrays[f"{name}/w_scale"]
                self.weights[name] = (codes.astype(F32) - zero) * scale

    @property
    def resolution(self) -> int:
        return self.meta["resolution"]

    def _linear(self, name, x):
        info = self.meta["layers"][name]
        if info["abits"] != 32:
            x = _fq(x, self.a[f"{name}/a_scale"], self.a[f"{name}/a_zero"], info["abits"])
        return np.matmul(x, self.weights[name]) + self.a[f"{name}/bias"]

    def forward(self, images: np.ndarray) -> np.ndarray:
        m, a = self.meta, self.a
        images = np.asarray(images, F32)
        bsz, res, _, c = images.shape
        if res != self.resolution:
            raise ValueError(f"expected {self.resolution}px images, got {res}")
        p, d, heads = m["patch"], m["embed_dim"], m["heads"]
        g = res // p
        hd = d // heads
        x = images.reshape(bsz, g, p, g, p, c).transpose(0, 1, 3, 2, 4, 5)
        x = np.ascontiguousarray(x.reshape(bsz, g * g, p * p * c))
        x = self._linear("embed", x) + a["pos"].reshape(g * g, d)
        t = g * g
        for blk in m["blocks"]:
            h = _layernorm(x, a[blk + ".ln1.g"], a[blk + ".ln1.b"])
            q, k, v = (self._linear(f"{blk}.{n}", h).reshape(bsz, t, heads, hd).transpose(0, 2, 1, 3)
                       for n in "qkv")
            att = _softmax(np.matmul(q, k.transpose(0, 1, 3, 2)) * F32(hd ** -0.5))
            o = np.matmul(att, v).transpose(0, 2, 1, 3).reshape(bsz, t, d)
            x = x + self._linear(blk + ".proj", o)
            h = _layernorm(x, a[blk + ".ln2.g"], a[blk + ".ln2.b"])
            h = _gelu(self._linear(blk + ".fc1", h))
            x = x + self._linear(blk + ".fc2", h)
        x = _layernorm(x, a["norm.g"], a["norm.b"])
        x = self._linear("out", x)
        logits = np.matmul(_minmax8(x), _minmax8(a["head.w"])) + a["head.b"]
        return _upsample(logits.reshape(bsz, g, g, m["classes"]), res)

    def evaluate(self, images, labels, batch_size: int = 16):
        """Mean pixel cross-entropy and pixel accuracy."""
        total, count, correct = 0.0, 0, 0
        for i in range(0, len(images), batch_size):
            logits = self.forward(images[i:i + batch_size]).reshape(-1, self.meta["classes"])
            lab = np.asarray(labels[i:i + batch_size]).reshape(-1)
            z = logits.astype(np.float64)
            z = z - z.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            total += float(-logp[np.arange(len(lab)), lab].sum())
            correct += int((z.argmax(axis=1) == lab).sum())
            count += len(lab)
        return total / count, correct / count


def load_exported(path) -> ExportedSubnet:
    arrays, meta = read_container(path, kind="subnet")
    return ExportedSubnet(arrays, meta)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="Inspect or run an exported subnet.")
    ap.add_argument("path")
    ap.add_argument("--data-seed", type=int, default=None,
                    help="evaluate on a fresh shapes-seg set with this seed")
    ap.add_argument("--count", type=int, default=32)
    args = ap.parse_args(argv)
    net = load_exported(args.path)
    print(f"subnet {net.meta['subnet']}")
    for name, info in net.meta["layers"].items():
        print(f"  {name:12s} w{info['wbits']}a{info['abits']} {info['d_in']}x{info['d_out']}")
    if args.data_seed is not None:
        from .data import gen_synthetic

        ds = gen_synthetic("shapes-seg", args.count, net.resolution, args.data_seed)
        loss, acc = net.evaluate(ds.images, ds.labels)
        print(f"loss {loss:.6f} pixel_acc {acc:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
