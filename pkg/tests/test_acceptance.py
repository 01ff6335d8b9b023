"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import time
import zlib
from contextlib import contextmanager

import numpy as np
import pytest

from battrack import checkpoint
from battrack import tensor as T
from battrack.adapter import AdapterConfig, build_adapter_plan, count_instances, count_trainable_params
from battrack.benchmark import BASELINE, TrendSetup, run_trend
from battrack.cli import run_command
from battrack.config import RunConfig
from battrack.evaluation import mpr_msr, precision_curve, success_curve
from battrack.synthdata import crop_and_resize, dataset_checksum, generate_dataset
from battrack.tensor import Tensor
from battrack.tracker import BATModel, DualState, dual_stream_layer, fused_search_tokens, plan_slice, predict, train

from op_cases import BUILDERS, case, max_fd_error, random_layer, toy_layer_cfg


@pytest.fixture
def verdict(capsys):
    @contextmanager
    def run(number, title):
        start = time.perf_counter()
        notes = {}
        try:
            yield notes
        except BaseException:
            with capsys.disabled():
                print(f"\nFAIL criterion {number}: {title} ({time.perf_counter() - start:.1f}s) {_fmt(notes)}")
            raise
        with capsys.disabled():
            print(f"\nPASS criterion {number}: {title} ({time.perf_counter() - start:.1f}s) {_fmt(notes)}")
    return run


def _fmt(notes):
    return " ".join(f"{k}={v}" for k, v in notes.items())


def _ok_fields(out):
    line = [ln for ln in out.splitlines() if ln.startswith("OK ")][-1]
    return dict(kv.split("=", 1) for kv in line[3:].split())


def test_c1_parameter_budget(verdict, capsys):
    with verdict(1, "parameter budget") as notes:
        start = time.perf_counter()
        code = run_command(["count-params", "--config", "full-shape"])
        elapsed = time.perf_counter() - start
        f = _ok_fields(capsys.readouterr().out)
        notes.update(trainable=f["trainable"], millions=f["millions"])
        assert code == 0
        assert f["trainable"] == "315264" and f["millions"] == "0.32"
        assert elapsed < 1.0


def _random_descriptor(rng, variant, n_layers):
    layers = sorted(set(int(v) for v in rng.integers(1, n_layers + 1, size=rng.integers(1, n_layers + 1))))
    stages = [["attention"], ["mlp"], ["attention", "mlp"]][rng.integers(3)]
    return {"variant": variant, "num_layers": n_layers, "layers": layers, "stages": stages}


def test_c2_dual_doubles_parameters(verdict):
    with verdict(2, "BAT-Dual doubles BAT") as notes:
        start = time.perf_counter()
        full = RunConfig(d_t=768, num_layers=12, d_e=8)
        plan = {"num_layers": 12, "layers": list(range(1, 13)), "stages": ["attention", "mlp"]}
        cfg = AdapterConfig(full.d_t, full.d_e)
        bat = count_trainable_params({**plan, "variant": "BAT"}, cfg)
        dual = count_trainable_params({**plan, "variant": "BAT-Dual"}, cfg)
        notes.update(bat=bat, dual=dual)
        assert dual == 2 * bat == 630_528
        rng = np.random.default_rng(2)
        for _ in range(20):
            d_t = int(rng.integers(2, 65))
            small = AdapterConfig(d_t, int(rng.integers(1, d_t)), bool(rng.integers(2)))
            desc = _random_descriptor(rng, "BAT", int(rng.integers(1, 13)))
            assert count_trainable_params({**desc, "variant": "BAT-Dual"}, small) == \
                2 * count_trainable_params(desc, small)
        notes["random_configs"] = 20
        assert time.perf_counter() - start < 1.0


def _toy_dual_layer_case(variant, rng):
    """A random one-layer dual-stream graph (d=8, 4 tokens) with random adapters."""
    cfg = toy_layer_cfg(d_t=8, heads=2)
    layer = random_layer(cfg, rng)
    plan = build_adapter_plan(variant, [1], ("attention", "mlp"), AdapterConfig(8, 3), 1, rng)
    for t in plan.tensors():
        t.data = rng.normal(0.0, 0.5, t.shape)
    x = Tensor(rng.standard_normal((2, cfg.num_tokens, cfg.d_t)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, cfg.num_tokens, cfg.d_t)))
    sl = plan_slice(plan, 1)

    def fn():
        out = dual_stream_layer(DualState(x, cfg.num_template_tokens), layer, sl, cfg)
        return (out.tokens * w).sum()
    return T.Graph(fn), [x] + list(plan.tensors())


def test_c3_gradient_correctness(verdict):
    with verdict(3, "gradient correctness") as notes:
        start = time.perf_counter()
        worst = {}
        for kind in sorted(BUILDERS):
            rng = np.random.default_rng(zlib.crc32(b"accept-" + kind.encode()))
            worst[kind] = max(max_fd_error(*case(kind, rng), h=1e-5) for _ in range(100))
        rng = np.random.default_rng(3)
        variants = ["BAT", "BAT-Dual", "BAT-RGB", "BAT-TIR"]
        worst["dual-layer"] = max(max_fd_error(*_toy_dual_layer_case(variants[i % 4], rng), h=1e-5)
                                  for i in range(100))
        elapsed = time.perf_counter() - start
        top = max(worst, key=worst.get)
        notes.update(kinds=len(worst) - 1, max_rel_err=f"{worst[top]:.2e}", worst=top)
        assert worst[top] < 1e-4
        assert elapsed < 60.0


def test_c4_zero_init_equivalence(verdict):
    with verdict(4, "zero-init equivalence") as notes:
        start = time.perf_counter()
        bat = BATModel(RunConfig(variant="BAT", seed=11))
        base = BATModel(RunConfig(variant="Baseline-Dual", seed=11))
        recs = generate_dataset(10, 44, frames=3)
        # ten random frames, one per sequence, cropped around a jittered ground truth
        rng = np.random.default_rng(4)
        crops = {k: [] for k in ("z_rgb", "z_tir", "s_rgb", "s_tir")}
        for rec in recs:
            t = int(rng.integers(1, len(rec)))
            box = rec.gt_visible[t] + np.r_[rng.normal(0, 2, 2), 0, 0]
            crops["z_rgb"].append(crop_and_resize(rec.visible[0] / 255.0, rec.gt_visible[0], 2.0, 32))
            crops["z_tir"].append(crop_and_resize(rec.infrared[0] / 255.0, rec.gt_infrared[0], 2.0, 32))
            crops["s_rgb"].append(crop_and_resize(rec.visible[t] / 255.0, box, 4.0, 64))
            crops["s_tir"].append(crop_and_resize(rec.infrared[t] / 255.0, box, 4.0, 64))
        z_rgb, z_tir, s_rgb, s_tir = (np.stack(crops[k]) for k in ("z_rgb", "z_tir", "s_rgb", "s_tir"))
        _, sa = bat.encode(z_rgb, z_tir, s_rgb, s_tir, keep_states=True)
        _, sb = base.encode(z_rgb, z_tir, s_rgb, s_tir, keep_states=True)
        assert len(sa) == len(sb) == 3
        for x, y in zip(sa, sb):
            assert x.tokens.data.tobytes() == y.tokens.data.tobytes()
        fused = fused_search_tokens(sa[-1]).data
        b = len(recs)
        assert fused.tobytes() == (sb[-1].search.data[:b] + sb[-1].search.data[b:]).tobytes()
        boxes_a, boxes_b = predict(sa[-1], bat.head, 64)[1], predict(sb[-1], base.head, 64)[1]
        assert all(np.asarray(p).tobytes() == np.asarray(q).tobytes() for p, q in zip(boxes_a, boxes_b))
        notes.update(frames=b, layers_compared=len(sa))
        assert time.perf_counter() - start < 10.0


def test_c5_frozen_backbone(verdict, tmp_path):
    with verdict(5, "frozen backbone") as notes:
        start = time.perf_counter()
        cfg = RunConfig(steps=100, foundation_steps=0, seed=5)
        model = BATModel(cfg)
        checkpoint.save_model(tmp_path / "init.ckpt", model)
        train(model, generate_dataset(4, 55, frames=20), cfg)
        checkpoint.save_model(tmp_path / "final.ckpt", model)
        before, _ = checkpoint.load(tmp_path / "init.ckpt")
        after, _ = checkpoint.load(tmp_path / "final.ckpt")
        backbone = [k for k in before if k.startswith("backbone.")]
        assert backbone
        assert b"".join(before[k].tobytes() for k in backbone) == b"".join(after[k].tobytes() for k in backbone)
        changed = [k for k in before if k.startswith("adapter.") and not np.array_equal(before[k], after[k])]
        notes.update(backbone_tensors=len(backbone), adapters_changed=len(changed))
        assert changed
        assert time.perf_counter() - start < 120.0


def _boxes(rng, n, base=None, jitter=0.0):
    if base is None:
        return np.concatenate([rng.uniform(0, 200, (n, 2)), rng.uniform(1, 60, (n, 2))], axis=1)
    out = base.copy()
    out[:, :2] += rng.normal(0, jitter, (n, 2))
    out[:, 2:] *= np.exp(rng.normal(0, 0.2, (n, 2)))
    return out


def _recount(pred, gt_rgb, gt_tir):
    """Loop-based recount of all four metrics, written independently of the package."""
    def err(p, g):
        return ((p[0] + p[2] / 2 - g[0] - g[2] / 2) ** 2 + (p[1] + p[3] / 2 - g[1] - g[3] / 2) ** 2) ** 0.5

    def ov(p, g):
        w = min(p[0] + p[2], g[0] + g[2]) - max(p[0], g[0])
        h = min(p[1] + p[3], g[1] + g[3]) - max(p[1], g[1])
        inter = max(w, 0.0) * max(h, 0.0)
        union = p[2] * p[3] + g[2] * g[3] - inter
        return inter / union if union > 0 else 0.0
    n = len(pred)
    e1 = [err(p, g) for p, g in zip(pred, gt_rgb)]
    o1 = [ov(p, g) for p, g in zip(pred, gt_rgb)]
    em = [min(a, err(p, g)) for a, p, g in zip(e1, pred, gt_tir)]
    om = [max(a, ov(p, g)) for a, p, g in zip(o1, pred, gt_tir)]
    ths = [k / 20 for k in range(21)]
    return {"pr": sum(e <= 20 for e in e1) / n, "mpr": sum(e <= 20 for e in em) / n,
            "sr": sum(sum(o > t for o in o1) / n for t in ths) / 21,
            "msr": sum(sum(o > t for o in om) / n for t in ths) / 21}


def test_c6_metric_oracle(verdict):
    with verdict(6, "metric oracle") as notes:
        start = time.perf_counter()
        rng = np.random.default_rng(6)
        gt_rgb = _boxes(rng, 1000)
        gt_tir = _boxes(rng, 1000, gt_rgb, 6.0)
        pred = _boxes(rng, 1000, gt_rgb, 15.0)
        ref = _recount(pred, gt_rgb, gt_tir)
        got = mpr_msr(pred, gt_rgb, gt_tir)
        got["pr"], got["sr"] = precision_curve(pred, gt_rgb)[1], success_curve(pred, gt_rgb)[1]
        diff = max(abs(got[k] - ref[k]) for k in ref)
        notes.update(frames=1000, max_abs_diff=f"{diff:.1e}")
        assert diff <= 1e-12
        for _ in range(200):
            n = int(rng.integers(1, 80))
            g1 = _boxes(rng, n)
            g2 = _boxes(rng, n, g1, rng.uniform(0, 20))
            p = _boxes(rng, n, g1, rng.uniform(0, 40))
            m = mpr_msr(p, g1, g2)
            for g in (g1, g2):
                assert np.all(m["mpr_curve"] >= precision_curve(p, g)[0])
                assert np.all(m["msr_curve"] >= success_curve(p, g)[0])
        notes["dominance_instances"] = 200
        assert time.perf_counter() - start < 5.0


def test_c7_variant_ordering_trend(verdict):
    with verdict(7, "variant-ordering trend") as notes:
        start = time.perf_counter()
        res = run_trend(TrendSetup(), seeds=(0, 1, 2))
        elapsed = time.perf_counter() - start
        notes.update({v: f"{res.median(v):.3f}" for v in res.sr})
        margins = res.margins()
        notes.update(min_margin=f"{min(margins.values()):.3f}", bat_gap=f"{res.bat_gap():.3f}",
                     minutes=f"{elapsed / 60:.1f}")
        assert all(m >= 0.05 for m in margins.values()), margins
        assert res.bat_gap() >= -0.02
        assert elapsed < 15 * 60
        assert BASELINE in res.sr


def test_c8_mpr_degeneracy(verdict):
    with verdict(8, "MPR degeneracy") as notes:
        start = time.perf_counter()
        rng = np.random.default_rng(8)
        count = 0
        for _ in range(50):
            n = int(rng.integers(1, 200))
            gt = _boxes(rng, n)
            pred = _boxes(rng, n, gt, rng.uniform(0, 40))
            m = mpr_msr(pred, gt, gt.copy())
            pr_curve, pr = precision_curve(pred, gt)
            sr_curve, sr = success_curve(pred, gt)
            assert m["mpr"] == pr and m["msr"] == sr
            assert np.array_equal(m["mpr_curve"], pr_curve) and np.array_equal(m["msr_curve"], sr_curve)
            count += 1
        notes["inputs"] = count
        assert time.perf_counter() - start < 1.0


def test_c9_layer_subsets(verdict):
    with verdict(9, "layer-subset plumbing") as notes:
        start = time.perf_counter()
        recs = generate_dataset(3, 99, frames=6)
        base = RunConfig(d_t=16, num_heads=2, num_layers=12, d_e=4, head_channels=8, steps=50, foundation_steps=0)
        for name, layers, expected in (("BAT-1", (1,), 2), ("BAT-4", (5, 6, 7, 8), 8),
                                       ("BAT-12", tuple(range(1, 13)), 24)):
            cfg = base.with_(layers=layers)
            assert count_instances("BAT", layers, ("attention", "mlp"), 12) == expected
            model = BATModel(cfg)
            assert len(model.plan.instances) == expected
            losses = train(model, recs, cfg)
            assert len(losses) == 50 and np.all(np.isfinite(losses))
            notes[name] = expected
        assert time.perf_counter() - start < 180.0


def _pipeline(root, capsys):
    """gen-data, train, track (two job counts) and eval; returns artifact checksums."""
    sums = {}

    def cli(*argv):
        code = run_command([str(a) for a in argv])
        out, err = capsys.readouterr()
        assert code == 0, err
        return _ok_fields(out)
    sums["data"] = cli("gen-data", "--out", root / "data", "--sequences", 4, "--frames", 5, "--seed", 10)["sha256"]
    cli("train", "--config", "toy", "--data", root / "data", "--out-ckpt", root / "m.ckpt", "--steps", 5,
        "--foundation-steps", 5, "--seed", 3)
    sums["ckpt"] = (root / "m.ckpt").read_bytes()
    for jobs in (1, 2):
        cli("track", "--ckpt", root / "m.ckpt", "--data", root / "data", "--out-results", root / f"res{jobs}",
            "--jobs", jobs)
        sums[f"track{jobs}"] = dataset_checksum(root / f"res{jobs}")
    cli("eval", "--results", root / "res1", "--data", root / "data", "--report", root / "rep")
    sums["eval"] = dataset_checksum(root / "rep")
    return sums


def test_c10_determinism(verdict, tmp_path, capsys):
    with verdict(10, "determinism") as notes:
        a = _pipeline(tmp_path / "a", capsys)
        b = _pipeline(tmp_path / "b", capsys)
        for k in a:
            assert a[k] == b[k], k
        assert a["track1"] == a["track2"]
        notes["artifacts"] = ",".join(a)
