"""Export one subnet with adapters merged into integer weight codes."""

from __future__ import annotations

import numpy as np

from .container import write_container
from .data import resize_batch
from .lora import adapted_weight
from .model import BLOCK_LINEARS, ElasticViT, block_prefix
from .quantize import ACTIVATION, FULL, WEIGHT, quantize_codes
from .space import SubnetConfig, to_string, validate_config
from .tensor import no_grad


def quantized_layers(model: ElasticViT, cfg: SubnetConfig):
    """Yield ``(name, wbits, abits, d_in, d_out)`` for every quantized linear."""
    sp = model.space
    d = sp.embed_dim
    yield ("embed", *cfg.embed_bits, sp.patch * sp.patch * sp.channels, d)
    for s, j in cfg.active_blocks():
        p = block_prefix(s, j)
        w, a = cfg.block_bits[s][j]
        hidden = sp.hidden_dim(cfg.mlp_ratios[s][j])
        dims = {"q": (d, d), "k": (d, d), "v": (d, d), "proj": (d, d),
                "fc1": (d, hidden), "fc2": (hidden, d)}
        for lin in BLOCK_LINEARS:
            yield (f"{p}.{lin}", w, a, *dims[lin])
    yield ("out", *cfg.out_bits, d, d)


def _missing_quantizers(model: ElasticViT, cfg: SubnetConfig) -> list:
    missing = []
    for name, w, a, _, _ in quantized_layers(model, cfg):
        if w != FULL and (name, WEIGHT, w) not in model.quant:
            missing.append((name, WEIGHT, w))
        if a != FULL and (name, ACTIVATION, a) not in model.quant:
            missing.append((name, ACTIVATION, a))
    return missing


def calibrate(model: ElasticViT, cfg: SubnetConfig, images: np.ndarray) -> None:
    """Initialize any quantizer of ``cfg`` never reached during training."""
    if not _missing_quantizers(model, cfg):
        return
    imgs, _ = resize_batch(images, np.zeros(images.shape[:3], np.int32), cfg.resolution)
    with no_grad():
        model.forward(cfg, imgs, merged=True)


def export_subnet(model: ElasticViT, cfg: SubnetConfig, path, calib_images=None) -> dict:
    """Write integer codes, scales and zero points of every quantized layer,
    full-precision weights of FULL layers, and the remaining float tensors."""
    validate_config(model.space, cfg)
    if calib_images is not None:
        calibrate(model, cfg, calib_images)
    missing = _missing_quantizers(model, cfg)
    if missing:
        raise ValueError(f"uncalibrated quantizers {missing[:3]}...; pass calib_images")
    sp = model.space
    P = {k: t.data for k, t in model.params.items()}
    arrays: dict[str, np.ndarray] = {}
    layers = {}
    for name, w, a, d_in, d_out in quantized_layers(model, cfg):
        w_float = adapted_weight(P[name + ".w"][:d_in, :d_out], model.lora.get(name), w, a)
        if w == FULL:
            arrays[f"{name}/weight"] = w_float
        else:
            q = model.quant.get(name, WEIGHT, w)
            arrays[f"{name}/codes"] = quantize_codes(w_float, q)
            arrays[f"{name}/w_scale"] = q.scale.data
            arrays[f"{name}/w_zero"] = q.zero_point.data
        if a != FULL:
            qa = model.quant.get(name, ACTIVATION, a)
            arrays[f"{name}/a_scale"] = qa.scale.data
            arrays[f"{name}/a_zero"] = qa.zero_point.data
        arrays[f"{name}/bias"] = P[name + ".b"][:d_out]
        layers[name] = {"wbits": int(w), "abits": int(a), "d_in": d_in, "d_out": d_out}
    for s, j in cfg.active_blocks():
        p = block_prefix(s, j)
        for ln in ("ln1", "ln2"):
            arrays[f"{p}.{ln}.g"] = P[f"{p}.{ln}.g"]
            arrays[f"{p}.{ln}.b"] = P[f"{p}.{ln}.b"]
    for k in ("norm.g", "norm.b", "head.w", "head.b"):
        arrays[k] = P[k]
    arrays["pos"] = model.pos_embed(cfg.resolution).data
    meta = {
        "subnet": to_string(cfg),
        "resolution": cfg.resolution,
        "blocks": [block_prefix(s, j) for s, j in cfg.active_blocks()],
        "embed_dim": sp.embed_dim, "heads": sp.heads, "patch": sp.patch,
        "channels": sp.channels, "classes": sp.classes,
        "head_bits": 8,
        "layers": layers,
    }
    write_container(path, arrays, meta, kind="subnet")
    return meta
