"""Pretraining and finetuning loops, snippet subsampling and checkpoint glue."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .autograd import Tensor, bce_with_logits, mse_masked
from .checkpoint import Checkpoint, check_shapes, load_checkpoint, save_checkpoint
from .config import (FinetuneConfig, ModelConfig, PretrainConfig, apply_overrides, config_echo,
                     model_config_from_echo)
from .data import Dataset, Normalizer, cycle_number, fit_normalizer, identity_normalizer, make_cv_folds
from .errors import ContractError, TrainingDivergenceError
from .heads import (FROZEN_HEAD_KEYS, HEAD_PREFIX, TaskHead, anomaly_vehicle_score, init_head, regression_forward, rul_pairs,
                    snippet_features)
from .masking import sample_mask_plan, stack_plans
from .metrics import MetricReport, auroc, naive_rul_baseline, rmse_mae_mape, spearman
from .model import ENCODER_PREFIXES, as_trainable, encoder_only, init_params, param_shapes, pretrain_forward
from .optim import AdamState, LRSchedule, adam_step, lr_at
from .types import Snippet, SnippetGroup, restrict_channels

log = logging.getLogger(__name__)


def _rngs(seed: int, count: int) -> list:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def steps_per_epoch(total_snippets: int, batch_groups: int, n: int) -> int:
    return max(1, math.ceil(total_snippets / (batch_groups * n)))


def subsample_snippets(snippets: Sequence, fraction: float, rng: np.random.Generator) -> list:
    """``max(1, floor(len * fraction))`` snippets, uniformly without replacement, order kept."""
    if not 0 < fraction <= 1:
        raise ContractError("fraction must lie in (0, 1]")
    if not snippets:
        return []
    k = max(1, math.floor(len(snippets) * fraction))
    idx = np.sort(rng.choice(len(snippets), size=k, replace=False))
    return [snippets[i] for i in idx]


# --------------------------------------------------------------------------
# normalizer / checkpoint helpers
# --------------------------------------------------------------------------


def _normalizer_echo(norm: Normalizer) -> dict:
    return {
        "normalizer.mean": ",".join(repr(float(x)) for x in norm.mean),
        "normalizer.std": ",".join(repr(float(x)) for x in norm.std),
        "normalizer.clamp": repr(float(norm.clamp)),
    }


def normalizer_from_manifest(manifest: Mapping[str, str]) -> Normalizer:
    mean = np.array([float(x) for x in manifest["normalizer.mean"].split(",")])
    std = np.array([float(x) for x in manifest["normalizer.std"].split(",")])
    return Normalizer(mean, std, float(manifest["normalizer.clamp"]))


def load_model_checkpoint(path, model_cfg: Optional[ModelConfig] = None):
    """Load a checkpoint and validate its tensors against ``model_cfg`` (or its own config).

    Returns ``(checkpoint, model_cfg, normalizer)``.
    """
    ckpt = load_checkpoint(path)
    own = model_config_from_echo(ckpt.manifest)
    cfg = model_cfg or own
    expected = param_shapes(cfg)
    finetuned = ckpt.manifest.get("kind") == "finetune"
    if finetuned:
        expected = {k: v for k, v in expected.items() if k.startswith(ENCODER_PREFIXES)}
        expected.update({"head.W": (cfg.d_latent, 1), "head.b": (1,)})
        expected.update({k: (cfg.d_latent,) for k in FROZEN_HEAD_KEYS if k in ckpt.tensors})
    check_shapes(ckpt.tensors, expected)
    return ckpt, cfg, normalizer_from_manifest(ckpt.manifest)


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------


@dataclass
class PretrainResult:
    params: dict
    normalizer: Normalizer
    history: list
    model_cfg: ModelConfig
    cfg: PretrainConfig
    lrs: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    sources: list = field(default_factory=list)

    def checkpoint(self) -> Checkpoint:
        manifest = {"kind": "pretrain", "schema": ",".join(self.model_cfg.schema.names)}
        manifest.update(config_echo(self.model_cfg, self.cfg))
        manifest.update(_normalizer_echo(self.normalizer))
        return Checkpoint(manifest, {k: v.copy() for k, v in self.params.items()})

    def save(self, path):
        return save_checkpoint(self.checkpoint(), path)


def pretrain_run(corpus: Sequence[Snippet], cfg: PretrainConfig = PretrainConfig(),
                 model_cfg: ModelConfig = ModelConfig(), *,
                 on_batch: Optional[Callable[[list], None]] = None,
                 log_every: int = 0) -> PretrainResult:
    """Masked-reconstruction pretraining over groups of same-source snippets.

    Each step samples ``batch_groups`` groups (source uniform, then ``n``
    snippets without replacement), draws a mask plan per group, and takes
    one Adam step at ``lr_at(step)``.
    """
    by_source: dict = {}
    for s in corpus:
        by_source.setdefault(s.source_id, []).append(s)
    usable = []
    for src, snips in by_source.items():
        if len(snips) < cfg.n:
            log.warning("source %s has %d snippets (< n=%d); excluded", src, len(snips), cfg.n)
        else:
            usable.append(src)
    if not usable:
        raise ContractError("no source has enough snippets to form a group")
    kept = [s for src in usable for s in by_source[src]]
    normalizer = fit_normalizer(kept) if cfg.normalize else identity_normalizer(model_cfg.c)
    dt = np.dtype(model_cfg.dtype)
    arrays = {}
    for src in usable:
        normed = [normalizer.apply(s) for s in by_source[src]]
        arrays[src] = (np.stack([s.values for s in normed]).astype(dt), np.stack([s.present for s in normed]),
                       by_source[src])

    rng_init, rng_sample = _rngs(cfg.seed, 2)
    params = init_params(model_cfg, rng_init)
    result = PretrainResult(params, normalizer, [], model_cfg, cfg, sources=usable)
    if cfg.epochs == 0:
        return result
    spe = steps_per_epoch(len(kept), cfg.batch_groups, cfg.n)
    sched = LRSchedule(cfg.peak_lr, cfg.warmup_epochs, cfg.epochs, spe)
    state = AdamState()
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for _ in range(spe):
            vals, pres, plans, groups = [], [], [], []
            for _g in range(cfg.batch_groups):
                src = usable[int(rng_sample.integers(len(usable)))]
                v, p, snips = arrays[src]
                idx = rng_sample.choice(len(snips), size=cfg.n, replace=False)
                vals.append(v[idx])
                pres.append(p[idx])
                plans.append(sample_mask_plan(cfg.n, model_cfg.c, model_cfg.s, cfg.p_channel, cfg.p_patch,
                                              rng_sample))
                groups.append(SnippetGroup(tuple(snips[i] for i in idx), src))
            if on_batch is not None:
                on_batch(groups)
            cm, pm = stack_plans(plans)
            trainable = as_trainable(params)
            out = pretrain_forward(np.stack(vals), np.stack(pres), cm, pm, trainable, model_cfg,
                                   cfg.loss_on_channel_mask)
            loss = float(out.loss.data)
            if not math.isfinite(loss):
                raise TrainingDivergenceError(f"non-finite loss at epoch {epoch}, step {step}: {loss}")
            out.loss.backward()
            lr = lr_at(step, sched)
            adam_step(params, {k: t.grad for k, t in trainable.items()}, state, lr)
            result.lrs.append(lr)
            result.step_losses.append(loss)
            losses.append(loss)
            step += 1
        result.history.append(float(np.mean(losses)))
        if log_every and (epoch + 1) % log_every == 0:
            log.info("epoch %d/%d loss %.5f", epoch + 1, cfg.epochs, result.history[-1])
    return result


# --------------------------------------------------------------------------
# finetuning
# --------------------------------------------------------------------------


@dataclass
class TaskSamples:
    """Model inputs and targets for one task. ``late_*`` is set only for RUL pairs."""

    values: np.ndarray
    present: np.ndarray
    target: np.ndarray
    source: np.ndarray
    late_values: Optional[np.ndarray] = None
    late_present: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.target)

    def take(self, idx) -> "TaskSamples":
        lv = None if self.late_values is None else self.late_values[idx]
        lp = None if self.late_present is None else self.late_present[idx]
        return TaskSamples(self.values[idx], self.present[idx], self.target[idx], self.source[idx], lv, lp)


def _label_value(task: str, lab, anomalous: bool):
    if task == "capacity":
        return lab.soh if lab is not None else None
    if task == "ir":
        return lab.ir_mohm if lab is not None else None
    if task == "anomaly":
        return float(anomalous)
    return lab.rul_cycles if lab is not None else None


def build_samples(ds: Dataset, cfg: FinetuneConfig, normalizer: Normalizer, dtype,
                  rng: Optional[np.random.Generator] = None, anomalous: Optional[Mapping] = None) -> TaskSamples:
    """Normalize, pair (RUL) and label the snippets of ``ds`` for ``cfg.task``.

    When ``rng`` is given, each source is subsampled to ``cfg.resolved_fraction``.
    """
    task = cfg.task
    anomalous = anomalous if anomalous is not None else ds.source_anomaly()
    vals, pres, targets, srcs, lvals, lpres = [], [], [], [], [], []
    for src, snips in ds.by_source().items():
        if task == "rul":
            cycles = [cycle_number(s, ds.kind) for s in snips]
            for a, b in rul_pairs(cycles, cfg.rul_cycles, cfg.rul_gap):
                lab = ds.labels.get(snips[b].snippet_id)
                y = _label_value(task, lab, False)
                if y is None:
                    continue
                ea, eb = normalizer.apply(snips[a]), normalizer.apply(snips[b])
                vals.append(ea.values), pres.append(ea.present)
                lvals.append(eb.values), lpres.append(eb.present)
                targets.append(float(y)), srcs.append(src)
            continue
        if rng is not None:
            snips = subsample_snippets(snips, cfg.resolved_fraction, rng)
        for s in snips:
            y = _label_value(task, ds.labels.get(s.snippet_id), anomalous.get(src, False))
            if y is None:
                continue
            e = normalizer.apply(s)
            vals.append(e.values), pres.append(e.present)
            targets.append(float(y)), srcs.append(src)
    if not targets:
        raise ContractError(f"no {task} labels available")
    out = TaskSamples(np.stack(vals).astype(dtype), np.stack(pres), np.asarray(targets), np.asarray(srcs))
    if task == "rul":
        out.late_values = np.stack(lvals).astype(dtype)
        out.late_present = np.stack(lpres)
    return out


def task_features(samples: TaskSamples, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Pooled features per sample (RUL uses the late-minus-early difference)."""
    if samples.late_values is None:
        return snippet_features(samples.values, samples.present, params, cfg)
    B = len(samples)
    both = snippet_features(np.concatenate([samples.values, samples.late_values]),
                            np.concatenate([samples.present, samples.late_present]), params, cfg)
    return both[B:] - both[:B]


def task_outputs(samples: TaskSamples, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    return regression_forward(task_features(samples, params, cfg), params)


def _frozen_features(samples: TaskSamples, arrays: Mapping[str, np.ndarray], cfg: ModelConfig,
                     batch: int = 256) -> np.ndarray:
    frozen = {k: Tensor(v) for k, v in arrays.items()}
    return np.concatenate([task_features(samples.take(slice(i, i + batch)), frozen, cfg).data
                           for i in range(0, len(samples), batch)])


def predict(samples: TaskSamples, arrays: Mapping[str, np.ndarray], cfg: ModelConfig, batch: int = 256) -> np.ndarray:
    frozen = {k: Tensor(v) for k, v in arrays.items()}
    out = [task_outputs(samples.take(slice(i, i + batch)), frozen, cfg).data for i in range(0, len(samples), batch)]
    return np.concatenate(out) if out else np.zeros(0)


@dataclass
class FinetuneResult:
    params: dict
    normalizer: Normalizer
    head: TaskHead
    target_mean: float
    target_std: float
    cfg: FinetuneConfig
    model_cfg: ModelConfig
    history: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    predictions: Optional[np.ndarray] = None
    truths: Optional[np.ndarray] = None
    train_sources: list = field(default_factory=list)
    eval_sources: list = field(default_factory=list)
    train_targets: Optional[np.ndarray] = None

    def checkpoint(self) -> Checkpoint:
        manifest = {
            "kind": "finetune",
            "task": self.cfg.task,
            "schema": ",".join(self.model_cfg.schema.names),
            "target.mean": repr(float(self.target_mean)),
            "target.std": repr(float(self.target_std)),
            "target.train_mean": repr(float(np.mean(self.train_targets))) if self.train_targets is not None else "",
            "train_sources": ",".join(self.train_sources),
            "eval_sources": ",".join(self.eval_sources),
        }
        manifest.update(config_echo(self.model_cfg, self.cfg))
        manifest.update(_normalizer_echo(self.normalizer))
        return Checkpoint(manifest, {k: v.copy() for k, v in self.params.items()})

    def save(self, path):
        return save_checkpoint(self.checkpoint(), path)


def finetune_result_from_checkpoint(ckpt: Checkpoint) -> FinetuneResult:
    """Rebuild a scoring-ready :class:`FinetuneResult` from a finetune checkpoint."""
    m = ckpt.manifest
    if m.get("kind") != "finetune":
        raise ContractError("checkpoint is not a finetuned model")
    model_cfg = model_config_from_echo(m)
    cfg_vals = {k.split(".", 1)[1]: v for k, v in m.items() if k.startswith("FinetuneConfig.")}
    cfg = apply_overrides(FinetuneConfig(task=m["task"]), cfg_vals)
    expected = {k: v for k, v in param_shapes(model_cfg).items() if k.startswith(ENCODER_PREFIXES)}
    expected.update({"head.W": (model_cfg.d_latent, 1), "head.b": (1,)})
    expected.update({k: (model_cfg.d_latent,) for k in FROZEN_HEAD_KEYS if k in ckpt.tensors})
    check_shapes(ckpt.tensors, expected)
    train_mean = m.get("target.train_mean")
    head = TaskHead(cfg.task, tuple(cfg.channels), cfg.rul_gap if cfg.task == "rul" else None)
    return FinetuneResult(
        dict(ckpt.tensors), normalizer_from_manifest(m), head, float(m["target.mean"]), float(m["target.std"]),
        cfg, model_cfg,
        train_sources=[s for s in m.get("train_sources", "").split(",") if s],
        eval_sources=[s for s in m.get("eval_sources", "").split(",") if s],
        train_targets=np.array([float(train_mean)]) if train_mean else None,
    )


def _loss(task: str, out: Tensor, target: np.ndarray) -> Tensor:
    if task == "anomaly":
        return bce_with_logits(out, target)
    return mse_masked(out, target, np.ones(target.shape, dtype=bool))


def _restrict(ds: Dataset, channels: Sequence[str], model_cfg: ModelConfig) -> Dataset:
    if set(model_cfg.schema.names) <= set(channels):
        return ds
    return ds.map(lambda s: restrict_channels(s, channels, model_cfg.schema))


def validation_split(sources: Sequence[str], fraction: float, rng: np.random.Generator,
                     min_sources: int = 10) -> np.ndarray:
    """Sorted indices of the early-stopping hold-out.

    Whole sources are held out when there are at least ``min_sources`` of
    them, so that snippets of one cell never sit on both sides. Smaller
    sets fall back to a per-sample split; fewer than ten samples get none.
    """
    sources = np.asarray(sources)
    if len(sources) < 10 or fraction <= 0:
        return np.zeros(0, dtype=int)
    names = np.unique(sources)
    if len(names) >= min_sources:
        held = rng.permutation(names)[:max(1, int(round(fraction * len(names))))]
        return np.flatnonzero(np.isin(sources, held))
    return np.sort(rng.permutation(len(sources))[:int(round(fraction * len(sources)))])


def finetune_run(encoder: Mapping[str, np.ndarray], train_ds: Dataset, eval_ds: Optional[Dataset],
                 cfg: FinetuneConfig, model_cfg: ModelConfig = ModelConfig(), *,
                 anomalous: Optional[Mapping[str, bool]] = None) -> FinetuneResult:
    """Train encoder + linear head end to end with Adam at ``cfg.resolved_lr``.

    The decoder is dropped up front. A random ``val_fraction`` of training
    samples drives early stopping; ``eval_ds`` (if given) is only scored.
    """
    rng_sub, rng_init, rng_split, rng_shuffle = _rngs(cfg.seed, 4)
    dt = np.dtype(model_cfg.dtype)
    train_ds = _restrict(train_ds, cfg.channels, model_cfg)
    normalizer = fit_normalizer(train_ds.snippets) if cfg.normalize else identity_normalizer(model_cfg.c)
    anomalous = anomalous if anomalous is not None else train_ds.source_anomaly()
    samples = build_samples(train_ds, cfg, normalizer, dt, rng=rng_sub, anomalous=anomalous)

    val_idx = validation_split(samples.source, cfg.val_fraction, rng_split)
    n_val = len(val_idx)
    val, fit = samples.take(val_idx), samples.take(np.setdiff1d(np.arange(len(samples)), val_idx))

    # SOH stays a fraction and anomaly labels stay binary; IR and RUL are z-scored.
    t_mean, t_std, bias = 0.0, 1.0, 0.0
    if cfg.task in ("ir", "rul"):
        t_mean = float(fit.target.mean())
        t_std = float(fit.target.std()) or 1.0
    elif cfg.task == "capacity":
        bias = float(fit.target.mean())
    scaled = (fit.target - t_mean) / t_std
    val_scaled = (val.target - t_mean) / t_std

    params = {k: v.astype(dt, copy=True) for k, v in encoder_only(encoder).items()}
    # Regression heads start from a ridge probe of the initial features; the anomaly head starts at zero.
    probe = scaled if cfg.task != "anomaly" else None
    params.update(init_head(model_cfg.d_latent, rng_init, dt, bias=bias,
                            features=_frozen_features(fit, params, model_cfg), zero=True, targets=probe))
    pairing = cfg.rul_gap if cfg.task == "rul" else None
    head = TaskHead(cfg.task, tuple(cfg.channels), pairing)
    state = AdamState()
    lr = cfg.resolved_lr
    warmup_steps = max(1, cfg.warmup_epochs * math.ceil(len(fit) / cfg.batch_size))
    def val_loss_of(arrays) -> float:
        pv = predict(val, arrays, model_cfg)
        return float(_loss(cfg.task, Tensor(pv), val_scaled.astype(pv.dtype)).data)

    # The untrained head (bias at the training mean) is the first candidate.
    best, best_loss, stale = copy.deepcopy(params), (val_loss_of(params) if n_val else math.inf), 0
    history = []
    for epoch in range(cfg.epochs):
        order = rng_shuffle.permutation(len(fit))
        losses = []
        for i in range(0, len(fit), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            trainable = as_trainable(params)
            out = task_outputs(fit.take(idx), trainable, model_cfg)
            loss = _loss(cfg.task, out, scaled[idx].astype(dt))
            if not math.isfinite(float(loss.data)):
                raise TrainingDivergenceError(f"non-finite finetune loss at epoch {epoch}")
            loss.backward()
            grads = {k: t.grad for k, t in trainable.items() if k not in FROZEN_HEAD_KEYS}
            adam_step(params, grads, state, lr * min(1.0, (state.step + 1) / warmup_steps))
            losses.append(float(loss.data))
        train_loss = float(np.mean(losses))
        if n_val:
            val_loss = val_loss_of(params)
        else:
            val_loss = train_loss
        history.append((train_loss, val_loss))
        if val_loss < best_loss:
            best, best_loss, stale = copy.deepcopy(params), val_loss, 0
        elif epoch >= cfg.warmup_epochs:
            # patience only counts once the learning rate has finished ramping up
            stale += 1
            if stale >= cfg.patience:
                break
    result = FinetuneResult(best, normalizer, head, t_mean, t_std, cfg, model_cfg, history,
                            train_sources=train_ds.sources(), train_targets=fit.target)
    if eval_ds is not None:
        evaluate_result(result, eval_ds, anomalous=anomalous)
    return result


def evaluate_result(result: FinetuneResult, eval_ds: Dataset, anomalous: Optional[Mapping] = None) -> dict:
    """Score a finetuned model on ``eval_ds``; fills ``result.metrics``."""
    cfg, mcfg = result.cfg, result.model_cfg
    eval_ds = _restrict(eval_ds, cfg.channels, mcfg)
    anomalous = dict(anomalous or {})
    anomalous.update(eval_ds.source_anomaly())
    samples = build_samples(eval_ds, cfg, result.normalizer, np.dtype(mcfg.dtype), anomalous=anomalous)
    raw = predict(samples, result.params, mcfg)
    result.eval_sources = eval_ds.sources()
    metrics = {}
    if cfg.task == "anomaly":
        srcs = list(dict.fromkeys(samples.source))
        scores = [anomaly_vehicle_score(raw[samples.source == s]) for s in srcs]
        flags = [bool(anomalous.get(s, False)) for s in srcs]
        metrics["auroc"] = auroc(scores, flags) if any(flags) and not all(flags) else math.nan
        result.predictions, result.truths = np.asarray(scores), np.asarray(flags)
    else:
        pred = raw.astype(np.float64) * result.target_std + result.target_mean
        rmse, mae, mape = rmse_mae_mape(pred, samples.target)
        metrics.update(rmse=rmse, mae=mae, mape=mape)
        train_t = result.train_targets
        if train_t is None:
            raise ContractError("mean baseline needs the training targets or their mean")
        metrics["mean_baseline_rmse"] = naive_rul_baseline(train_t, samples.target)
        if cfg.task == "rul":
            metrics["naive_rmse"] = metrics["mean_baseline_rmse"]
        if len(samples) > 2 and np.ptp(samples.target) > 0:
            metrics["spearman"] = spearman(pred, samples.target)
        result.predictions, result.truths = pred, samples.target
    result.metrics = metrics
    return metrics


def cross_validate(encoder: Mapping[str, np.ndarray], ds: Dataset, cfg: FinetuneConfig,
                   model_cfg: ModelConfig = ModelConfig(), *, dataset_name: str = "synthetic",
                   progress: Optional[Callable[[int, FinetuneResult], None]] = None):
    """Five-fold (``cfg.folds``) source-level CV. Returns ``(MetricReport, [FinetuneResult])``."""
    anomalous = ds.source_anomaly()
    plan = make_cv_folds(ds.sources(), cfg.task, anomalous, cfg.folds, cfg.seed)
    report = MetricReport(cfg.task, dataset_name, config=config_echo(model_cfg, cfg), seed=cfg.seed)
    results = []
    seeds = np.random.SeedSequence(cfg.seed).generate_state(cfg.folds)
    for r, (train, ev) in enumerate(plan.rounds()):
        fold_cfg = _with_seed(cfg, int(seeds[r]))
        res = finetune_run(encoder, ds.subset(train), ds.subset(ev), fold_cfg, model_cfg, anomalous=anomalous)
        for k, v in res.metrics.items():
            report.add(k, v)
        results.append(res)
        if progress is not None:
            progress(r, res)
    return report, results


def _with_seed(cfg: FinetuneConfig, seed: int) -> FinetuneConfig:
    return dataclasses.replace(cfg, seed=seed)


__all__ = [
    "pretrain_run", "PretrainResult", "finetune_run", "FinetuneResult", "cross_validate", "evaluate_result",
    "subsample_snippets", "steps_per_epoch", "build_samples", "TaskSamples", "predict", "load_model_checkpoint",
    "normalizer_from_manifest", "finetune_result_from_checkpoint", "HEAD_PREFIX",
]
