"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the terminal summary.
"""

import time
from collections import OrderedDict

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from falcon_dehaze import bench, functional as F, imaging
from falcon_dehaze.cli import main
from falcon_dehaze.density import ddp, with_cdm
from falcon_dehaze.gradcheck import numerical_grad, relative_error
from falcon_dehaze.losses import FeatureExtractor, LossWeights, gram, loss_final, loss_img, loss_map, loss_perceptual
from falcon_dehaze.network import (
    FalconConfig,
    FfcbConfig,
    dumps_weights,
    falcon_forward,
    ffcb_forward,
    init_weights,
    is_buffer,
    load_weights,
    save_weights,
)
from falcon_dehaze.tensor import Tensor, mul, sum_all
from falcon_dehaze.trainer import TrainConfig, train


def verdict(num, title, ok, detail, elapsed, limit=None):
    within = limit is None or elapsed < limit
    bound = f" (limit {limit:.0f} s)" if limit is not None else ""
    line = f"{'PASS' if ok and within else 'FAIL'} criterion {num:>2}: {title}: {detail}; {elapsed:.1f} s{bound}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    assert ok, line
    assert within, line


def nested_min(img, patch):
    n, _, h, w = img.shape
    r = patch // 2
    out = np.empty((n, 1, h, w), dtype=img.dtype)
    for i in range(h):
        for j in range(w):
            best = np.full(n, np.inf, dtype=img.dtype)
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    y = min(max(i + di, 0), h - 1)
                    x = min(max(j + dj, 0), w - 1)
                    for c in range(img.shape[1]):
                        best = np.minimum(best, img[:, c, y, x])
            out[:, 0, i, j] = best
    return out


def test_criterion_01_ddp_oracle_equivalence():
    t0 = time.perf_counter()
    imgs = np.stack([np.random.default_rng(s).random((3, 16, 16)) for s in range(100)]).astype(np.float32)
    mismatches = 0
    for patch in (1, 3, 5, 15):
        got = ddp(Tensor(imgs), patch).data
        mismatches += int(np.count_nonzero(got != nested_min(imgs, patch)))
    verdict(1, "DDP equals brute-force nested min", mismatches == 0,
            f"{mismatches} mismatching pixels over 100 images x 4 patch sizes", time.perf_counter() - t0, 10)


def strict_min_fixture(seed):
    # distinct values spaced well beyond the FD step, so no perturbation changes an argmin
    rng = np.random.default_rng(seed)
    n = 3 * 8 * 8
    return (rng.permutation(n) / n).reshape(1, 3, 8, 8)


def test_criterion_02_ddp_differentiability():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        img = strict_min_fixture(seed)
        patch = (3, 5, 15)[seed % 3]
        fn = lambda ts, p=patch: sum_all(ddp(ts[0], p))  # noqa: E731
        t = Tensor(img, requires_grad=True)
        fn([t]).backward()
        worst = max(worst, relative_error(t.grad, numerical_grad(fn, [img], 0, eps=1e-3)))
    verdict(2, "DDP gradient vs central differences", worst < 1e-3,
            f"max rel. err {worst:.2e} over 20 fixtures (eps 1e-3)", time.perf_counter() - t0, 30)


def test_criterion_03_spectral_identities():
    t0 = time.perf_counter()
    round_trip, parseval = 0.0, 0.0
    for s in (4, 8, 16, 32):
        x = np.random.default_rng(s).standard_normal((2, 3, s, s)).astype(np.float32)
        z = F.rfft2(Tensor(x))
        back = F.irfft2(z, (s, s)).data
        round_trip = max(round_trip, float(np.abs(back - x).max()))
        # half spectrum: interior columns stand for a conjugate pair
        weight = np.full(s // 2 + 1, 2.0)
        weight[0] = weight[-1] = 1.0
        spectral = (np.abs(z.data.astype(np.complex128)) ** 2 * weight).sum() / (s * s)
        energy = (x.astype(np.float64) ** 2).sum()
        parseval = max(parseval, abs(spectral - energy) / energy)
    ok = round_trip < 1e-5 and parseval < 1e-4
    verdict(3, "irfft2(rfft2(x)) == x and Parseval", ok,
            f"max round-trip err {round_trip:.1e}, max Parseval rel. err {parseval:.1e}", time.perf_counter() - t0, 5)


def test_criterion_04_full_model_gradient_check():
    t0 = time.perf_counter()
    cfg = FalconConfig.toy()
    weights = init_weights(cfg, 0)
    rng = np.random.default_rng(4)
    hazy = rng.random((1, 3, 16, 16))
    probe = rng.standard_normal((1, 3, 16, 16))
    names = [k for k in weights if not is_buffer(k)]

    def fn(ts):
        w = OrderedDict(weights)
        w.update(zip(names, ts))
        x = with_cdm(Tensor(hazy.astype(ts[0].dtype)))
        return sum_all(mul(falcon_forward(x, w, "train", cfg), Tensor(probe.astype(ts[0].dtype))))

    arrays = [weights[k].data for k in names]
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    fn(ts).backward()
    analytic = np.concatenate([t.grad.ravel() for t in ts])
    # float64 differences with a small step keep every ReLU input on one side of its kink
    numeric = np.concatenate([numerical_grad(fn, arrays, i, eps=1e-5).ravel() for i in range(len(arrays))])
    err = relative_error(analytic, numeric)
    per_tensor = max(relative_error(t.grad, numerical_grad(fn, arrays, i, eps=1e-5))
                     for i, t in enumerate(ts) if t.grad.size <= 32)
    verdict(4, "toy model gradient vs finite differences, every parameter", err < 1e-3 and per_tensor < 1e-3,
            f"{analytic.size} parameters, rel. err {err:.2e} (worst small tensor {per_tensor:.2e})",
            time.perf_counter() - t0, 600)


def test_criterion_05_ffcb_structure():
    t0 = time.perf_counter()
    cfg = FfcbConfig(64)
    partition_ok = (cfg.local_channels, cfg.global_channels) == (16, 48)
    rng = np.random.default_rng(5)
    failures = 0
    for _ in range(50):
        c = 4 * int(rng.integers(1, 17))
        alpha = float(rng.choice([0.0, 0.25, 0.5, 0.75]))
        n, h, w = (int(v) for v in rng.integers((1, 2, 2), (3, 13, 13)))
        weights = init_weights(FalconConfig(depth=1, base=c // 2, alpha_in=alpha), seed=int(rng.integers(1 << 30)))
        x = Tensor(rng.standard_normal((n, c, h, w)))
        failures += ffcb_forward(x, FfcbConfig(c, alpha), weights, "train").shape != (n, c, h, w)
    verdict(5, "FFCB 16/48 split at C=64 and shape preservation", partition_ok and failures == 0,
            f"split {cfg.local_channels}/{cfg.global_channels}, {failures}/50 shape failures", time.perf_counter() - t0, 5)


def test_criterion_06_loss_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    ex = FeatureExtractor()
    a = rng.random((2, 3, 16, 16)).astype(np.float32)
    b = rng.random((2, 3, 16, 16)).astype(np.float32)
    zeros = [loss_img(Tensor(a), Tensor(a)).item(), loss_perceptual(Tensor(a), Tensor(a), ex).item(),
             loss_map(Tensor(a), Tensor(a)).item()]
    w = LossWeights()
    out = loss_final(Tensor(a), Tensor(b), w, ex)
    sum_err = abs(out.total.item() - float(w.as_vector() @ out.components())) / out.total.item()
    mse_ref = sum((float(u) - float(v)) ** 2 for u, v in zip(a.ravel(), b.ravel())) / a.size
    mse_err = abs(loss_img(Tensor(a), Tensor(b)).item() - mse_ref)
    f = rng.standard_normal((1, 4, 3, 3)).astype(np.float32)
    g_ref = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            g_ref[i, j] = sum(float(f[0, i, y, x]) * float(f[0, j, y, x]) for y in range(3) for x in range(3)) / 36
    gram_err = float(np.abs(gram(Tensor(f)).data[0] - g_ref).max())
    ok = zeros == [0.0, 0.0, 0.0] and sum_err < 1e-7 and mse_err < 1e-6 and gram_err < 1e-6
    verdict(6, "losses vanish at equality, weighted sum, scalar oracles", ok,
            f"zeros {zeros}, weighted-sum rel. err {sum_err:.1e}, MSE err {mse_err:.1e}, Gram err {gram_err:.1e}",
            time.perf_counter() - t0, 5)


@pytest.mark.slow
def test_criterion_07_training_gate(corpus, tmp_path):
    t0 = time.perf_counter()
    cfg = TrainConfig()  # 200 steps, lr 1e-4, batch 5, seed 0
    report = train(cfg, corpus / "train", tmp_path / "gate.falw")
    img = report.column("img")
    finite = all(np.isfinite(report.column(k)).all() for k in ("total", "img", "per", "map"))
    # per-step values are on random crops, so compare the first and last ten-step windows
    ratio = float(img[-10:].mean() / img[:10].mean())
    replay = train(TrainConfig(steps=10), corpus / "train")
    deterministic = replay.history == report.history[:10]
    ok = len(img) == 200 and finite and ratio < 0.5 and deterministic
    verdict(7, "200 Adam steps halve L_img", ok,
            f"L_img {img[:10].mean():.4f} -> {img[-10:].mean():.4f} (ratio {ratio:.3f}), finite={finite}, "
            f"replay identical={deterministic}", time.perf_counter() - t0, 900)


@pytest.mark.slow
def test_criterion_08_throughput_harness():
    t0 = time.perf_counter()
    cfg = FalconConfig.toy()
    weights = init_weights(cfg, 0)
    reports = [bench.measure_fps(weights, res, warmup=5, runs=30, config=cfg) for res in (256, 512, 1024)]
    fps = [r.fps for r in reports]
    monotone = all(fps[i + 1] <= fps[i] * 1.05 for i in range(2))
    ok = reports[0].runs >= 30 and monotone
    verdict(8, "bench runs and FPS falls with resolution", ok,
            "FPS " + ", ".join(f"{r.resolution}: {r.fps:.2f}" for r in reports) + f" ({reports[0].runs} timed runs)",
            time.perf_counter() - t0)


def test_criterion_09_serialization(tmp_path):
    t0 = time.perf_counter()
    weights = init_weights(FalconConfig.toy(), 9)
    save_weights(weights, tmp_path / "w.falw")
    loaded = load_weights(tmp_path / "w.falw")
    weights_ok = list(loaded) == list(weights) and all(
        loaded[k].data.tobytes() == weights[k].data.tobytes() for k in weights
    ) and dumps_weights(loaded) == (tmp_path / "w.falw").read_bytes()
    rng = np.random.default_rng(9)
    reports = [bench.BenchReport.from_latencies(r, 5, rng.random(30) * 100, rng.random(), 46291) for r in (64, 128)]
    rows = bench.reports_from_csv(bench.reports_to_csv(reports))
    csv_ok = all(row[k] == getattr(r, k) for row, r in zip(rows, reports) for k in bench.CSV_COLUMNS)
    verdict(9, "weight and CSV round trips", weights_ok and csv_ok,
            f"weights bit-exact={weights_ok}, CSV lossless={csv_ok}", time.perf_counter() - t0, 5)


@pytest.mark.slow
def test_criterion_10_pipeline_smoke(tmp_path):
    t0 = time.perf_counter()
    codes = [main(["synth", "--out", str(tmp_path / "corpus")])]
    codes.append(main(["train", "--data", str(tmp_path / "corpus" / "train"), "--out", str(tmp_path / "w.falw"),
                       "--steps", "50"]))
    src = tmp_path / "corpus" / "val" / "hazy" / "0016.ppm"
    codes.append(main(["dehaze", "--input", str(src), "--output", str(tmp_path / "out.png"),
                       "--weights", str(tmp_path / "w.falw")]))
    out = imaging.decode_image(tmp_path / "out.png")
    spread = float(out.max() - out.min())
    ok = codes == [0, 0, 0] and out.shape == imaging.decode_image(src).shape and spread > 0.1
    verdict(10, "synth -> train(50) -> dehaze", ok, f"exit codes {codes}, output {out.shape}, range {spread:.3f}",
            time.perf_counter() - t0, 300)
