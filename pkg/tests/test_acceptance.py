"""End-to-end acceptance checks, one test per criterion.

Each test appends a ``CRITERION k: PASS|FAIL ...`` line that the terminal
summary prints in order.
"""

import contextlib
import itertools
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from fmae.autograd import check_gradients
from fmae.checkpoint import load_checkpoint, save_checkpoint
from fmae.config import FinetuneConfig, ModelConfig, PretrainConfig
from fmae.data import DESK_FLEETS, fit_normalizer, generate_synthetic_fleet, make_cv_folds
from fmae.masking import hidden_channels, sample_mask_plan, stack_plans
from fmae.metrics import auroc, rmse_mae_mape
from fmae.model import as_trainable, collapse_probe, init_params, pretrain_forward, pretrain_loss
from fmae.optim import LRSchedule, lr_at
from fmae.training import cross_validate, pretrain_run
from fmae.types import MaskPlan, SnippetGroup

DESK_PRETRAIN = PretrainConfig(epochs=30, warmup_epochs=2, batch_groups=8, n=5, seed=0)


@contextlib.contextmanager
def criterion(k: int, budget: float = math.inf):
    """Record PASS/FAIL for criterion ``k``; the body fills ``info`` with details."""
    info = {}
    start = time.perf_counter()
    try:
        yield info
        elapsed = time.perf_counter() - start
        assert elapsed < budget, f"runtime {elapsed:.1f}s exceeds {budget:.0f}s"
    except BaseException as exc:
        detail = " ".join(f"{k}={v}" for k, v in info.items())
        ACCEPTANCE_LINES.append(f"CRITERION {k}: FAIL {detail} ({type(exc).__name__}: {exc})".rstrip())
        raise
    detail = " ".join(f"{k}={v}" for k, v in info.items())
    ACCEPTANCE_LINES.append(f"CRITERION {k}: PASS {detail} [{time.perf_counter() - start:.1f}s]")


# --------------------------------------------------------------------------


def test_criterion_01_configuration_fidelity():
    with criterion(1, budget=1.0) as info:
        cfg = ModelConfig()
        params = as_trainable(init_params(cfg, np.random.default_rng(0)))
        plan = sample_mask_plan(5, cfg.c, cfg.s, 0.4, 0.5, np.random.default_rng(1))
        values = np.zeros((1, 5, cfg.l, cfg.c))
        values[..., :] = np.linspace(-1, 1, cfg.l)[None, None, :, None]
        present = np.ones((1, 5, cfg.c), bool)
        cm, pm = stack_plans([plan])
        out = pretrain_forward(values, present, cm, pm, params, cfg)
        enc_len, enc_width = out.sequence.tokens.shape[1:]
        dec_w = params["dec.0.q.W"].shape[0]
        dec_len = 5 * cfg.s
        recon_width = params["recon.W"].shape[1]
        enc_layers = len({k.split(".")[1] for k in params if k.startswith("enc.") and k.split(".")[1].isdigit()})
        dec_layers = len({k.split(".")[1] for k in params if k.startswith("dec.") and k.split(".")[1].isdigit()})
        info.update(enc=f"{enc_len}x{enc_width}", dec=f"{dec_len}x{dec_w}", recon=recon_width,
                    layers=f"{enc_layers}/{cfg.enc_heads},{dec_layers}/{cfg.dec_heads}")
        assert (enc_len, enc_width) == (20, 108)
        assert (dec_len, dec_w, cfg.dec_width) == (40, 72, 72)
        assert out.recon.shape == (1, 5, 8, 128) and recon_width == 128
        assert (enc_layers, cfg.enc_heads, dec_layers, cfg.dec_heads) == (6, 3, 4, 4)


def test_criterion_02_gradient_correctness():
    with criterion(2, budget=60.0) as info:
        cfg = ModelConfig.minimal()
        assert (cfg.s, cfg.l, cfg.c, cfg.d, cfg.dtype) == (2, 8, 3, 6, "float64")
        rng = np.random.default_rng(0)
        params = init_params(cfg, rng)
        names = sorted(params)
        shapes = [params[k].shape for k in names]
        point = np.concatenate([params[k].ravel() for k in names])
        # A generic point: at the 0.02-std initialization many entries of the
        # gradient sit near 1e-9, where finite differences are pure rounding noise.
        point = point + rng.normal(scale=0.3, size=point.shape)
        values = rng.normal(size=(1, 2, cfg.l, cfg.c))
        present = np.ones((1, 2, cfg.c), bool)
        plan = MaskPlan(frozenset({2}), (frozenset({0}), frozenset({1})), c=cfg.c, s=cfg.s)
        cm, pm = stack_plans([plan])

        def loss(x):
            p, o = {}, 0
            for k, shape in zip(names, shapes):
                n = int(np.prod(shape))
                p[k] = x[o:o + n].reshape(*shape)
                o += n
            return pretrain_forward(values, present, cm, pm, p, cfg).loss

        # Some gradients are structurally zero (key biases cancel in the
        # softmax); there central differences only show ~1e-11 rounding
        # noise, so relative errors are taken against a 1e-6 floor.
        err = check_gradients(loss, point, h=1e-5, floor=1e-6)
        info.update(params=point.size, max_rel_err=f"{err:.2e}")
        assert err < 1e-4


@pytest.fixture(scope="module")
def probe_group():
    ds = generate_synthetic_fleet(DESK_FLEETS["pretrain"])
    norm = fit_normalizer(ds.snippets)
    snips = ds.by_source()[ds.sources()[0]][:5]
    return SnippetGroup(tuple(norm.apply(s) for s in snips), snips[0].source_id)


def test_criterion_03_collapse_dichotomy(probe_group):
    with criterion(3, budget=10.0) as info:
        cfg = ModelConfig()
        params = as_trainable(init_params(cfg, np.random.default_rng(0)))
        soc = cfg.schema.index("soc")
        trajectories = [s.values[:, soc] for s in probe_group.snippets]
        assert all(not np.array_equal(a, b) for a, b in itertools.combinations(trajectories, 2))
        plan = MaskPlan(frozenset({3, 5, 6}), (frozenset({0, 2, 5, 7}),) * 5)
        vanilla = collapse_probe(probe_group, plan, params, cfg, "vanilla_mask_token")
        state = collapse_probe(probe_group, plan, params, cfg, "battery_state")
        info.update(vanilla=f"{vanilla.max_divergence:.2e}", battery_state=f"{state.max_divergence:.2e}")
        assert vanilla.max_divergence < 1e-6
        assert state.max_divergence > 1e-3


def test_criterion_04_leakage_invariants(probe_group):
    with criterion(4, budget=10.0) as info:
        cfg = ModelConfig()
        params = as_trainable(init_params(cfg, np.random.default_rng(0)))
        rng = np.random.default_rng(4)
        values = np.stack([s.values for s in probe_group.snippets])[None].copy()
        present = np.ones((1, 5, cfg.c), bool)
        absent = cfg.schema.index("max_temperature")
        present[..., absent] = False
        values[..., absent] = 0.0
        plan = MaskPlan(frozenset({1, 4, 6}), tuple(frozenset(int(j) for j in rng.choice(8, 4, replace=False))
                                                  for _ in range(5)))
        cm, pm = stack_plans([plan])
        base = pretrain_forward(values, present, cm, pm, params, cfg)

        # every masked-patch element, every masked-channel column and every absent column
        hidden = hidden_channels(cm, present)[0]
        touch = np.zeros_like(values, dtype=bool)
        for i in range(5):
            touch[0, i][:, hidden[i]] = True
            for j in plan.patch_sets[i]:
                touch[0, i, j * cfg.l0:(j + 1) * cfg.l0] = True
        noisy = values + np.where(touch, rng.normal(scale=3.0, size=values.shape), 0.0)
        moved = pretrain_forward(noisy, present, cm, pm, params, cfg)
        same_latents = np.array_equal(moved.z.data, base.z.data)
        same_tokens = np.array_equal(moved.sequence.tokens.data, base.sequence.tokens.data)

        # Non-state channels of masked patches reach the loss only as targets:
        # the reconstruction is unchanged and the new loss is the old output
        # scored against the new targets.
        state = set(cfg.schema.state_indices)
        non_state = np.zeros_like(touch)
        non_state[..., [k for k in range(cfg.c) if k not in state]] = True
        patch_only = np.zeros_like(touch)
        for i in range(5):
            for j in plan.patch_sets[i]:
                patch_only[0, i, j * cfg.l0:(j + 1) * cfg.l0] = True
        sel = patch_only & non_state & present[:, :, None, :]
        target_moved = values + np.where(sel, rng.normal(scale=3.0, size=values.shape), 0.0)
        after = pretrain_forward(target_moved, present, cm, pm, params, cfg)
        same_recon = np.array_equal(after.recon.data, base.recon.data)
        rescored = pretrain_loss(base.recon, target_moved, base.mask).data
        loss_via_targets = after.loss.data == rescored and after.loss.data != base.loss.data

        info.update(latents=same_latents, recon=same_recon, loss_via_targets=bool(loss_via_targets))
        assert same_latents and same_tokens
        assert same_recon and loss_via_targets


def test_criterion_05_schedule_endpoints():
    with criterion(5) as info:
        sched = LRSchedule(peak=1.5e-4, warmup_epochs=40, total_epochs=800, steps_per_epoch=7)
        w, total = sched.warmup_steps, sched.total_steps
        start, peak, end = lr_at(0, sched), lr_at(w, sched), lr_at(total, sched)
        left = peak - lr_at(w - 1, sched)
        right = peak - lr_at(w + 1, sched)
        info.update(start=start, peak=peak, end=end, jump_left=f"{left:.2e}", jump_right=f"{right:.2e}")
        assert start == 0.0 and peak == 1.5e-4 and end == 0.0
        # continuity: both neighbours are within one step's increment of the peak
        assert 0 < left <= 1.5e-4 / w + 1e-18
        assert 0 <= right <= 1.5e-4 * (1 - math.cos(math.pi / (total - w))) / 2 + 1e-18


@pytest.fixture(scope="module")
def desk_pretraining():
    corpus = generate_synthetic_fleet(DESK_FLEETS["pretrain"]).snippets
    runs, times = [], []
    for _ in range(2):
        start = time.perf_counter()
        runs.append(pretrain_run(corpus, DESK_PRETRAIN, ModelConfig()))
        times.append(time.perf_counter() - start)
    return runs, times


@pytest.mark.slow
def test_criterion_06_synthetic_pretraining(desk_pretraining):
    runs, times = desk_pretraining
    with criterion(6) as info:
        first, second = runs
        hist = first.history
        ratio = hist[-1] / hist[0]
        bitwise = [np.float64(a).tobytes() for a in hist] == [np.float64(b).tobytes() for b in second.history]
        info.update(first=f"{hist[0]:.4f}", final=f"{hist[-1]:.4f}", ratio=f"{ratio:.3f}", bitwise=bitwise,
                    run_s=f"{max(times):.0f}")
        assert len(hist) == 30
        assert ratio < 0.5
        assert bitwise
        assert all(np.array_equal(first.params[k], second.params[k]) for k in first.params)
        assert max(times) < 600


def _cv(encoder, task, **extra):
    ds = generate_synthetic_fleet(DESK_FLEETS[task])
    kind = DESK_FLEETS[task].kind
    report, _ = cross_validate(encoder, ds, FinetuneConfig(task=task, dataset_kind=kind, **extra), ModelConfig())
    return report


@pytest.mark.slow
def test_criterion_07_synthetic_finetuning(desk_pretraining):
    encoder = desk_pretraining[0][0].params
    with criterion(7, budget=900.0) as info:
        cap = _cv(encoder, "capacity")
        cap_gain = 1 - cap.mean("rmse") / cap.mean("mean_baseline_rmse")
        rul = _cv(encoder, "rul")
        rul_gain = 1 - rul.mean("rmse") / rul.mean("naive_rmse")
        anom = _cv(encoder, "anomaly")
        info.update(capacity=f"{cap.mean('rmse'):.4f}vs{cap.mean('mean_baseline_rmse'):.4f}({cap_gain:.0%})",
                    rul=f"{rul.mean('rmse'):.1f}vs{rul.mean('naive_rmse'):.1f}({rul_gain:.0%})",
                    auroc=f"{anom.mean('auroc'):.3f}")
        assert cap.folds == rul.folds == anom.folds == 5
        assert cap_gain >= 0.30
        assert rul_gain >= 0.20
        assert anom.mean("auroc") > 0.8


@pytest.mark.slow
def test_criterion_08_missing_channel_robustness(desk_pretraining):
    encoder = desk_pretraining[0][0].params
    with criterion(8, budget=600.0) as info:
        full = _cv(encoder, "capacity")
        volt = _cv(encoder, "capacity", channels=("voltage",))
        ratio = volt.mean("rmse") / full.mean("rmse")
        info.update(all_channels=f"{full.mean('rmse'):.4f}", voltage_only=f"{volt.mean('rmse'):.4f}",
                    ratio=f"{ratio:.2f}", mean_baseline=f"{volt.mean('mean_baseline_rmse'):.4f}")
        assert ratio < 2.0
        assert volt.mean("rmse") < volt.mean("mean_baseline_rmse")


def test_criterion_09_metric_oracles():
    with criterion(9) as info:
        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(100):
            size = int(rng.integers(2, 16))
            labels = rng.random(size) < 0.5
            labels[:2] = [True, False]
            scores = rng.integers(0, 5, size).astype(float)
            pos, neg = scores[labels], scores[~labels]
            pairs = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
            assert auroc(scores, labels) == pairs / (len(pos) * len(neg))
            pred, truth = rng.normal(size=size), rng.uniform(0.5, 2.0, size)
            rmse, mae, mp = rmse_mae_mape(pred, truth)
            err = [p - t for p, t in zip(pred.tolist(), truth.tolist())]
            ref = (math.sqrt(math.fsum(e * e for e in err) / size), math.fsum(abs(e) for e in err) / size,
                   100 * math.fsum(abs(e) / t for e, t in zip(err, truth.tolist())) / size)
            for got, want in zip((rmse, mae, mp), ref):
                worst = max(worst, abs(got - want) / abs(want))
        info.update(instances=100, worst_rel=f"{worst:.1e}")
        assert worst <= 1e-12


def test_criterion_10_cv_split_contracts():
    with criterion(10) as info:
        ds = generate_synthetic_fleet(DESK_FLEETS["anomaly"])
        flags = ds.source_anomaly()
        plan = make_cv_folds(ds.sources(), "anomaly", flags, 5, 0)
        nfold = {s: i for i, f in enumerate(plan.normal_folds) for s in f}
        ffold = {s: i for i, f in enumerate(plan.faulty_folds) for s in f}
        for train, ev in plan.rounds():
            assert not set(train) & set(ev)
            assert len({nfold[s] for s in train if s in nfold}) == 4
            assert len({ffold[s] for s in train if s in ffold}) == 1
            assert len({nfold[s] for s in ev if s in nfold}) == 1
            assert len({ffold[s] for s in ev if s in ffold}) == 4
        for task in ("capacity", "rul"):
            for train, ev in make_cv_folds(ds.sources(), task, k=5, seed=0).rounds():
                assert not set(train) & set(ev)
        info.update(sources=len(flags), faulty=sum(flags.values()))


@pytest.mark.slow
def test_criterion_11_checkpoint_round_trip(desk_pretraining, tmp_path):
    with criterion(11) as info:
        result = desk_pretraining[0][0]
        ckpt = result.checkpoint()
        path = save_checkpoint(ckpt, tmp_path / "desk.ckpt")
        back = load_checkpoint(path)
        exact = all(back.tensors[k].dtype == v.dtype and back.tensors[k].tobytes() == v.tobytes()
                    for k, v in ckpt.tensors.items())
        info.update(tensors=len(ckpt.tensors), manifest_keys=len(ckpt.manifest))
        assert sorted(back.tensors) == sorted(ckpt.tensors) and exact
        assert back.manifest == ckpt.manifest
        assert any(k.startswith("PretrainConfig.") for k in back.manifest)
