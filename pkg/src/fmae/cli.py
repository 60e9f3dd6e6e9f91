"""Command-line entry point: ``fmae {generate,pretrain,finetune,evaluate,probe-collapse}``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (FinetuneConfig, ModelConfig, PretrainConfig, apply_overrides, config_echo, read_config,
                     split_overrides)
from .data import SyntheticFleetConfig, fit_normalizer, generate_synthetic_fleet, load_dataset_dir, write_dataset
from .errors import ConfigError, FMAEError
from .masking import sample_mask_plan
from .metrics import MetricReport
from .model import as_trainable, collapse_probe, init_params
from .training import (cross_validate, evaluate_result, finetune_result_from_checkpoint, load_model_checkpoint,
                       pretrain_run)
from .types import SnippetGroup

log = logging.getLogger("fmae")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, *, data: Optional[bool] = None, checkpoint: Optional[bool] = None,
            task: bool = False) -> None:
    """Shared flags. ``data``/``checkpoint``: None omits the flag, otherwise it says whether it is required."""
    p.add_argument("--config", type=Path, help="flat 'key = value' config file")
    p.add_argument("--seed", type=int, help="overrides every seed in the config")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    if data is not None:
        p.add_argument("--data", type=Path, required=data, help="dataset directory (snippets.csv, labels.csv)")
    if checkpoint is not None:
        p.add_argument("--checkpoint", type=Path, required=checkpoint)
    if task:
        p.add_argument("--task", choices=("capacity", "ir", "anomaly", "rul"), required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fmae", description="Flexible masked autoencoder for battery time series.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _common(sub.add_parser("generate", help="write a synthetic fleet as CSV"))
    _common(sub.add_parser("pretrain", help="masked-reconstruction pretraining"), data=True)
    _common(sub.add_parser("finetune", help="cross-validated finetuning of one task"), data=True, checkpoint=True,
            task=True)
    _common(sub.add_parser("evaluate", help="score finetuned fold checkpoints"), data=True, checkpoint=True)
    _common(sub.add_parser("probe-collapse", help="mask-token vs battery-state divergence probe"), data=False,
            checkpoint=False)
    return parser


def _overrides(args) -> dict:
    values = read_config(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return values


def _write_echo(path: Path, echo: dict) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in sorted(echo.items())), encoding="utf-8")


def cmd_generate(args) -> None:
    (fleet,) = split_overrides(_overrides(args), SyntheticFleetConfig())
    ds = generate_synthetic_fleet(fleet)
    write_dataset(ds, args.out)
    _write_echo(args.out / "config.txt", config_echo(fleet))
    print(f"wrote {len(ds.snippets)} snippets from {len(ds.sources())} sources to {args.out}")


def cmd_pretrain(args) -> None:
    model_cfg, cfg = split_overrides(_overrides(args), ModelConfig(), PretrainConfig())
    ds = load_dataset_dir(args.data, model_cfg.schema)
    result = pretrain_run(ds.snippets, cfg, model_cfg, log_every=1)
    args.out.mkdir(parents=True, exist_ok=True)
    result.save(args.out / "pretrain.ckpt")
    with open(args.out / "loss_history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "loss"))
        for i, v in enumerate(result.history):
            w.writerow((i, repr(v)))
    _write_echo(args.out / "config.txt", config_echo(model_cfg, cfg))
    final = f"{result.history[-1]:.6g}" if result.history else "n/a"
    print(f"pretrained {cfg.epochs} epochs; final loss {final}; checkpoint {args.out / 'pretrain.ckpt'}")


def cmd_finetune(args) -> None:
    ckpt, model_cfg, _ = load_model_checkpoint(args.checkpoint)
    values = _overrides(args)
    values.setdefault("task", args.task)
    ds = load_dataset_dir(args.data, model_cfg.schema)
    values.setdefault("dataset_kind", ds.kind)
    (cfg,) = split_overrides(values, FinetuneConfig())
    if cfg.task != args.task:
        raise ConfigError(f"--task {args.task} conflicts with config task {cfg.task}")

    def progress(r, res):
        fold = res.checkpoint()
        fold.manifest.update(cv_seed=str(cfg.seed), fold=str(r))
        save_checkpoint(fold, args.out / f"fold{r}.ckpt")
        print(f"fold {r}: " + ", ".join(f"{k}={v:.6g}" for k, v in res.metrics.items() if v is not None))

    args.out.mkdir(parents=True, exist_ok=True)
    report, _ = cross_validate(ckpt.tensors, ds, cfg, model_cfg, dataset_name=str(args.data), progress=progress)
    report.config.update({"checkpoint": str(args.checkpoint)})
    report.write(args.out)
    print(report.summary(), end="")


def _fold_files(path: Path) -> list:
    if path.is_dir():
        files = sorted(path.glob("fold*.ckpt"))
        if not files:
            raise FMAEError(f"no fold*.ckpt files in {path}")
        return files
    return [path]


def cmd_evaluate(args) -> None:
    files = _fold_files(args.checkpoint)
    report: Optional[MetricReport] = None
    ds = None
    for f in files:
        ckpt = load_checkpoint(f)
        result = finetune_result_from_checkpoint(ckpt)
        if ds is None:
            ds = load_dataset_dir(args.data, result.model_cfg.schema)
        if args.config or args.seed is not None:
            result.cfg = apply_overrides(result.cfg, _overrides(args), strict=False)
        sources = result.eval_sources or ds.sources()
        metrics = evaluate_result(result, ds.subset(sources), anomalous=ds.source_anomaly())
        if report is None:
            echo = config_echo(result.model_cfg, result.cfg)
            # fold checkpoints carry a derived seed; report the cross-validation seed when known
            seed = int(ckpt.manifest.get("cv_seed", result.cfg.seed))
            report = MetricReport(result.cfg.task, str(args.data), config=echo, seed=seed)
        for k, v in metrics.items():
            report.add(k, v)
        print(f"{f.name}: " + ", ".join(f"{k}={v:.6g}" for k, v in metrics.items() if v is not None))
    report.config.update({"checkpoint": str(args.checkpoint)})
    report.write(args.out, stem="evaluation")
    print(report.summary(), end="")


def cmd_probe(args) -> None:
    values = _overrides(args)
    seed = int(values.get("seed", 0))
    if args.checkpoint:
        ckpt, model_cfg, norm = load_model_checkpoint(args.checkpoint)
        arrays = ckpt.tensors
    else:
        (model_cfg,) = split_overrides({k: v for k, v in values.items() if k != "seed"}, ModelConfig())
        arrays = init_params(model_cfg, np.random.default_rng(seed))
        norm = None
    rng = np.random.default_rng(seed)
    if args.data:
        ds = load_dataset_dir(args.data, model_cfg.schema)
    else:
        ds = generate_synthetic_fleet(SyntheticFleetConfig(n_sources=1, snippets_per_source=20, seed=seed))
    snips = ds.by_source()[ds.sources()[0]]
    pick = rng.choice(len(snips), size=5, replace=False)
    if norm is None:
        norm = fit_normalizer(ds.snippets)
    group = SnippetGroup(tuple(norm.apply(snips[i]) for i in pick), snips[0].source_id)
    pcfg = PretrainConfig()
    while True:
        plan = sample_mask_plan(5, model_cfg.c, model_cfg.s, pcfg.p_channel, pcfg.p_patch, rng)
        shared = set.intersection(*(set(p) for p in plan.patch_sets))
        if shared:
            break
    params = as_trainable(arrays)
    lines = [f"seed = {seed}", f"source = {group.source_id}"]
    for mode in ("vanilla_mask_token", "battery_state"):
        res = collapse_probe(group, plan, params, model_cfg, mode, rng=np.random.default_rng(seed))
        lines.append(f"{mode}.max_divergence = {res.max_divergence!r}")
    args.out.mkdir(parents=True, exist_ok=True)
    text = "\n".join(lines) + "\n# resolved configuration\n"
    text += "".join(f"{k} = {v}\n" for k, v in sorted(config_echo(model_cfg).items()))
    (args.out / "collapse_probe.txt").write_text(text, encoding="utf-8")
    print("\n".join(lines))


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "evaluate": cmd_evaluate, "probe-collapse": cmd_probe}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"fmae: config error: {exc}", file=sys.stderr)
        return 2
    except (FMAEError, OSError) as exc:
        print(f"fmae: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
