"""Training checkpoints: every array needed to resume a run bit-for-bit."""

from __future__ import annotations

import hashlib
import json

from .container import ContainerError, read_container, write_container
from .model import ElasticViT, LoRASpec
from .quantize import QuantizerParams
from .space import SearchSpace
from .tensor import Tensor
from .train import TrainSchedule, Trainer


class CheckpointError(ContainerError):
    pass


def config_digest(space: SearchSpace, lora_spec: LoRASpec) -> str:
    """Digest of everything that fixes the parameter layout."""
    payload = json.dumps({"space": space.to_dict(), "lora": lora_spec.to_dict()}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def save_checkpoint(path, trainer: Trainer, config: dict | None = None) -> None:
    model = trainer.model
    spec = trainer.lora_spec
    arrays = {f"param/{k}": t.data for k, t in model.named_parameters().items()}
    opt_meta = {}
    for name, st in trainer.opt.state.items():
        arrays[f"opt/m/{name}"] = st["m"]
        arrays[f"opt/v/{name}"] = st["v"]
        opt_meta[name] = st["t"]
    meta = {
        "digest": config_digest(model.space, spec),
        "space": model.space.to_dict(),
        "lora_spec": spec.to_dict(),
        "schedule": trainer.schedule.to_dict(),
        "model_seed": model.seed,
        "step": trainer.step,
        "lora_attached": bool(model.lora),
        "base_frozen": not next(iter(model.params.values())).requires_grad,
        "quant_trainable": model.quant.trainable,
        "quantizers": [list(k) for k in sorted(model.quant.entries)],
        "rng_state": trainer.rng.bit_generator.state,
        "opt_steps": opt_meta,
        "config": config or {},
    }
    write_container(path, arrays, meta, kind="checkpoint")


def space_from_dict(d: dict) -> SearchSpace:
    d = dict(d)
    d["depths"] = tuple(tuple(x) for x in d["depths"])
    return SearchSpace(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def load_checkpoint(path, data=None, expected_digest: str | None = None) -> tuple[Trainer, dict]:
    """Rebuild the trainer (model, optimizer, rng, step) saved at ``path``.

    Returns ``(trainer, meta)``; ``meta['config']`` holds the experiment
    config stored alongside the weights.
    """
    arrays, meta = read_container(path, kind="checkpoint")
    space = space_from_dict(meta["space"])
    spec = LoRASpec(**meta["lora_spec"])
    digest = config_digest(space, spec)
    if meta.get("digest") != digest:
        raise CheckpointError(f"{path}: config digest mismatch (file {meta.get('digest')}, "
                              f"recomputed {digest})")
    if expected_digest is not None and expected_digest != digest:
        raise CheckpointError(f"{path}: checkpoint digest {digest} does not match the "
                              f"experiment config ({expected_digest})")
    model = ElasticViT(space, seed=meta["model_seed"])
    if meta["lora_attached"]:
        model.attach_lora(spec, seed=meta["schedule"]["seed"])
    for key in meta["quantizers"]:
        layer, kind, bits = key[0], key[1], int(key[2])
        q = QuantizerParams(bits, kind, Tensor(0.0), Tensor(0.0))
        model.quant.entries[(layer, kind, bits)] = q
    params = model.named_parameters()
    for name, t in params.items():
        src = arrays.get(f"param/{name}")
        if src is None or src.shape != t.shape:
            raise CheckpointError(f"{path}: missing or misshapen parameter {name}")
        t.data = src.copy()
    model.quant.set_trainable(meta["quant_trainable"])
    model.freeze_base(meta["base_frozen"])

    sched = TrainSchedule(**meta["schedule"])
    trainer = Trainer(model, data, sched, spec)
    trainer.step = meta["step"]
    trainer.rng.bit_generator.state = meta["rng_state"]
    for name, t in meta["opt_steps"].items():
        trainer.opt.state[name] = {"t": t, "m": arrays[f"opt/m/{name}"].copy(),
                                   "v": arrays[f"opt/v/{name}"].copy()}
    return trainer, meta
