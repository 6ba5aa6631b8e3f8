"""Command-line entry point: ``mpsupernet {train,search,eval,export,ablate}``.

Output files (all CSV files have a header row):

* ``train``:  ``<out>/supernet.ckpt`` and ``<out>/metrics.csv``
  (step, phase, config, loss, lr)
* ``search``: ``<out>/search_history.csv`` (generation, best_loss, best_bitops,
  config) and ``<out>/best_subnet.json`` (subnet, loss, bitops, tau)
* ``ablate``: ``<out>/ablate_<operator>.csv`` (operator, config, bitops, loss,
  pixel_acc, miou) plus the restricted supernet checkpoint
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import config_digest, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, ExperimentConfigError, load_config, parse_config
from .container import ContainerError
from .cost import bitops, total_bitops
from .evolve import BudgetError, evolve_search, write_history
from .export import export_subnet
from .model import ElasticViT
from .space import ConfigError, SearchSpace, parse_subnet, sample_uniform, to_string, validate_config
from .train import MetricsWriter, Trainer, TrainingError, evaluate

log = logging.getLogger("mpsupernet")


class CLIError(Exception):
    pass


def _out_dir(cfg: ExperimentConfig, override: str | None) -> Path:
    out = Path(override or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _subnet_arg(text: str, space: SearchSpace):
    """A subnet string, ``max``, or a path to a file holding either (or a
    ``best_subnet.json`` written by ``search``)."""
    path = Path(text)
    if path.is_file():
        body = path.read_text().strip()
        text = json.loads(body)["subnet"] if body.startswith("{") else body
    cfg = space.max_config() if text == "max" else parse_subnet(text)
    validate_config(space, cfg)
    return cfg


def _tau(arg: str | None, cfg: ExperimentConfig, space: SearchSpace) -> float:
    if arg is None:
        return cfg.search.tau(space)
    try:
        if arg.endswith("%"):
            return float(arg[:-1]) / 100 * total_bitops(space.max_config(), space)
        return float(arg)
    except ValueError:
        raise CLIError(f"bad budget {arg!r}; give BitOPs or a percentage like 25%") from None


def _train(cfg: ExperimentConfig, space: SearchSpace, out: Path, stem: str):
    train, _ = cfg.datasets()
    model = ElasticViT(space, seed=cfg.seed)
    schedule = cfg.schedule
    low = space.resolutions[0]
    if schedule.phase1_max_res < low:
        # pinned resolution (ablation): the phase-1 cap cannot exclude every option
        schedule = replace(schedule, phase1_max_res=low,
                           phase2_max_res=max(low, schedule.phase2_max_res))
    trainer = Trainer(model, train, schedule, cfg.lora)
    metrics = MetricsWriter(out / f"{stem}metrics.csv")
    try:
        trainer.run(metrics=metrics)
    finally:
        metrics.close()
    raw = dict(cfg.raw)
    if space != cfg.space:
        raw["space"] = {k: v for k, v in space.to_dict().items()
                        if k in ("resolutions", "depths", "mlp_ratios", "weight_bits", "act_bits")}
    save_checkpoint(out / f"{stem}supernet.ckpt", trainer, config=raw)
    return trainer


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args.output_dir)
    trainer = _train(cfg, cfg.space, out, "")
    losses = [r["loss"] for r in trainer.history]
    print(f"trained {trainer.step} steps; final loss {losses[-1]:.4f}")
    print(f"checkpoint: {out / 'supernet.ckpt'}")
    print(f"metrics:    {out / 'metrics.csv'}")
    return 0


def _restore(path, cfg: ExperimentConfig | None = None):
    trainer, meta = load_checkpoint(path)
    if cfg is None:
        cfg = parse_config(meta.get("config") or {})
    elif config_digest(cfg.space, cfg.lora) != meta["digest"]:
        raise CLIError(f"{path} was trained with a different space or LoRA setup than the config")
    return trainer.model, cfg


def cmd_search(args) -> int:
    cfg = load_config(args.config)
    model, cfg = _restore(args.checkpoint, cfg)
    out = _out_dir(cfg, args.output_dir)
    _, val = cfg.datasets()
    val = val.subset(slice(0, cfg.search.val_subset))
    tau = _tau(args.budget, cfg, model.space)
    best, history = evolve_search(
        model.space, lambda c: evaluate(model, c, val).loss, tau,
        cfg.search.hyper, rng=cfg.rng(2), log=log.info)
    write_history(history, out / "search_history.csv")
    with open(out / "best_subnet.json", "w") as fh:
        json.dump({"subnet": best.key, "loss": best.loss, "bitops": best.bitops, "tau": tau},
                  fh, indent=2)
    print(f"best subnet: {best.key}")
    print(f"val loss {best.loss:.5f}  bitops {best.bitops} (budget {tau:.0f})")
    return 0


def cmd_eval(args) -> int:
    model, cfg = _restore(args.checkpoint)
    subnet = _subnet_arg(args.subnet, model.space)
    _, val = cfg.datasets()
    res = evaluate(model, subnet, val)
    rep = bitops(subnet, model.space)
    print(f"subnet    {to_string(subnet)}")
    print(f"loss      {res.loss:.6f}")
    print(f"pixel_acc {res.pixel_acc:.4f}")
    print(f"miou      {res.miou:.4f}")
    print(f"bitops    backbone {rep.backbone} head {rep.head} total {rep.total}")
    if args.report:
        sys.stdout.write(rep.to_csv())
    return 0


def cmd_export(args) -> int:
    model, cfg = _restore(args.checkpoint)
    subnet = _subnet_arg(args.subnet, model.space)
    _, val = cfg.datasets()
    meta = export_subnet(model, subnet, args.out, calib_images=val.images[:16])
    print(f"exported {meta['subnet']} to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    space = cfg.space.restrict(args.operator)
    out = _out_dir(cfg, args.output_dir)
    stem = f"ablate_{args.operator}_"
    trainer = _train(cfg, space, out, stem)
    _, val = cfg.datasets()
    val = val.subset(slice(0, cfg.search.val_subset))
    rng = cfg.rng(3)
    seen: dict[str, object] = {}
    for _ in range(cfg.search.sweep * 20):
        if len(seen) == cfg.search.sweep:
            break
        c = sample_uniform(space, rng)
        seen.setdefault(to_string(c), c)
    path = out / f"ablate_{args.operator}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["operator", "config", "bitops", "loss", "pixel_acc", "miou"])
        for key in sorted(seen, key=lambda k: total_bitops(seen[k], space)):
            res = evaluate(trainer.model, seen[key], val)
            w.writerow([args.operator, key, total_bitops(seen[key], space),
                        f"{res.loss:.6f}", f"{res.pixel_acc:.6f}", f"{res.miou:.6f}"])
    print(f"{len(seen)} subnets evaluated; sweep written to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mpsupernet",
                                 description="Mixed-precision quantized ViT supernet tools.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the supernet")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="evolutionary search under a BitOPs budget")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--budget", help="BitOPs, or a percentage of the max subnet (e.g. 25%%)")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="evaluate one subnet on the validation set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subnet", required=True, help="subnet string, 'max', or a file")
    p.add_argument("--report", action="store_true", help="print the per-layer BitOPs table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write a merged, integer-coded subnet")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subnet", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("ablate", help="train with one elastic operator and sweep subnets")
    p.add_argument("--config", required=True)
    p.add_argument("--operator", required=True, choices=("resolution", "depth", "mlp", "bits"))
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CLIError, ExperimentConfigError, ConfigError, ContainerError, BudgetError,
            TrainingError, ValueError, OSError) as e:
        print(f"mpsupernet {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
