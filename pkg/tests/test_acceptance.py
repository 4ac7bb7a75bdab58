"""Acceptance criteria 1-10.

Each test records its outcome through the ``criterion`` fixture; the terminal
summary prints one PASS/FAIL line per criterion.  Criteria 7-9 share one
desk-scale training run, so they take most of the suite's wall time.
"""
import math
import time

import numpy as np
import pytest
from scipy import stats

from duostream import tensor as T
from duostream.analysis import FamilyConfig, fit_joint, fit_member, make_member, run_ablation, train_family
from duostream.cli import main
from duostream.encoding import (EncodingConfig, HrfParams, ScanParams, encode_stream, fdr_bh, hrf_kernel,
                                ridge_solve, two_stage_pca)
from duostream.fixation import IorState, ior_map, sample_cell
from duostream.nn import BatchNorm2d, Conv2d, GRUCell, Linear, grad_check
from duostream.retina import RetinalParams, build_sampling_grid, radial_warp, radius_scale
from duostream.scenes import make_scene_set
from duostream.streams import Stream, StreamConfig
from duostream.synthbrain import MovieConfig, simulate_session
from duostream.tensor import Tensor
from duostream.training import evaluate

pytestmark = pytest.mark.acceptance

FAMILY = FamilyConfig(seed=1)
TEACHER = FamilyConfig(widths=(12, 24, 48, 96), seed=7, stage2_epochs=2, controls=False)
MOVIE = MovieConfig(n_scenes=150, seed=3)
SNR = 2.0


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# ---------------------------------------------------------------------------
# 1-6: exactness and statistics
# ---------------------------------------------------------------------------

def test_criterion_1_retinal_warp(criterion):
    with criterion(1, "retinal warp exactness") as rec:
        t0 = time.perf_counter()
        ends = [(radial_warp(0.0, a), radial_warp(1.0, a)) for a in (2.5, 15.0)]
        end_err = max(max(abs(g0), abs(g1 - 1.0)) for g0, g1 in ends)
        assert end_err < 1e-9

        rng = np.random.default_rng(0)
        lo, hi = np.sort(rng.random((2, 10_000)), axis=0)
        keep = lo < hi
        for a in (2.5, 15.0):
            assert np.all(radial_warp(lo[keep], a) < radial_warp(hi[keep], a))

        shape = (96, 96)
        fractions = {}
        for a in (2.5, 5.0, 15.0):
            x, y = build_sampling_grid(RetinalParams(a), shape)
            dist = np.hypot(x - 48.0, y - 48.0) / radius_scale(shape)
            fractions[a] = [float(np.mean(dist < rho)) for rho in (0.1, 0.25, 0.5)]
        for j in range(3):
            assert fractions[2.5][j] < fractions[5.0][j] < fractions[15.0][j]
        elapsed = time.perf_counter() - t0
        assert elapsed < 1.0
        rec.detail = f"endpoint error {end_err:.1e}, disk fractions {fractions}"


def test_criterion_2_ior(criterion):
    with criterion(2, "inhibition of return exactness") as rec:
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        for n in range(1, 9):
            state = IorState()
            for xy in rng.random((n, 2)):
                state.visit(xy)
            grid = ior_map(state)
            free = ior_map(state, *rng.random((2, 5000)))
            assert grid.min() >= 0 and grid.max() <= 1 and free.min() >= 0 and free.max() <= 1
            for fx, fy in state.fixations:
                assert ior_map(state, fx, fy) == 0.0

        state = IorState(sigma=0.1)
        state.visit((0.2, 0.3))
        state.visit((0.6, 0.5))
        d2 = 0.4 ** 2 + 0.2 ** 2
        closed = max(0.0, 1.0 - 2.0 * math.exp(-(d2 / 4.0) / (2 * 0.1 ** 2)))
        mid = float(ior_map(state, 0.4, 0.4))
        assert abs(mid - closed) < 1e-9 and closed > 0
        assert time.perf_counter() - t0 < 1.0
        rec.detail = f"midpoint {mid:.12f} vs closed form {closed:.12f}"


def _layer_checks():
    rng = np.random.default_rng(2)
    out = {}
    x = t64(rng.normal(size=(2, 3, 5, 5)))
    conv = Conv2d(3, 4, rng)
    for p in conv.parameters():
        p.data = p.data.astype(np.float64)
    conv.bias.data = rng.normal(size=4)
    r = t64(rng.normal(size=(2, 4, 5, 5)), grad=False)
    out["conv2d"] = grad_check(lambda: T.sum_all(T.mul(conv(x), r)), [x, conv.weight, conv.bias])

    z = t64(rng.normal(size=(2, 3, 4, 4)))
    z.data[np.abs(z.data) < 1e-2] = 0.5
    r = t64(rng.normal(size=(2, 3, 4, 4)), grad=False)
    out["relu"] = grad_check(lambda: T.sum_all(T.mul(T.relu(z), r)), [z])

    bn = BatchNorm2d(3)
    for p in bn.parameters():
        p.data = rng.normal(size=3)
    for training in (True, False):
        bn.training = training
        bn.running_var = np.full(3, 1.5)
        out[f"batchnorm ({'train' if training else 'eval'})"] = grad_check(
            lambda: T.sum_all(T.mul(bn(z), r)), [z, bn.weight, bn.bias])

    m = t64(rng.normal(size=(2, 3, 6, 6)))
    r = t64(rng.normal(size=(2, 3, 3, 3)), grad=False)
    out["maxpool2d"] = grad_check(lambda: T.sum_all(T.mul(T.maxpool2d(m), r)), [m])
    r = t64(rng.normal(size=(2, 3)), grad=False)
    out["global_avg_pool"] = grad_check(lambda: T.sum_all(T.mul(T.global_avg_pool(m), r)), [m])

    lin = Linear(5, 3, rng)
    for p in lin.parameters():
        p.data = p.data.astype(np.float64)
    v = t64(rng.normal(size=(4, 5)))
    r = t64(rng.normal(size=(4, 3)), grad=False)
    out["linear"] = grad_check(lambda: T.sum_all(T.mul(lin(v), r)), [v, lin.weight, lin.bias])

    cell = GRUCell(3, 4, rng)
    for p in cell.parameters():
        p.data = p.data.astype(np.float64)
    u, h = t64(rng.normal(size=(2, 3))), t64(rng.normal(size=(2, 4)))
    r = t64(rng.normal(size=(2, 4)), grad=False)
    out["gru"] = grad_check(lambda: T.sum_all(T.mul(cell(u, h), r)), [u, h] + cell.parameters())

    s = t64(rng.normal(size=(2, 1, 4, 4)))
    r = t64(rng.normal(size=(2, 1, 4, 4)), grad=False)
    out["softmax2d"] = grad_check(lambda: T.sum_all(T.mul(T.softmax2d(s), r)), [s])
    q = rng.random((2, 1, 4, 4))
    q /= q.sum(axis=(1, 2, 3), keepdims=True)
    out["kl saliency loss"] = grad_check(lambda: T.kl_saliency_loss(T.softmax2d(s), q), [s])
    logits = t64(rng.normal(size=(3, 4)))
    target = (rng.random((3, 4)) > 0.5).astype(float)
    out["bce loss"] = grad_check(lambda: T.bce_multilabel_loss(logits, target), [logits])

    y = t64(rng.normal(size=(1, 2, 8, 8)))
    r = t64(rng.normal(size=(1, 4, 4, 4)), grad=False)
    out["resize + concat"] = grad_check(
        lambda: T.sum_all(T.mul(T.concat([T.resize_bilinear(y, 4), T.resize_bilinear(y, 4)], axis=1), r)), [y])
    img = t64(rng.normal(size=(1, 2, 6, 6)))
    py, px = rng.uniform(-1, 6, size=(1, 10)), rng.uniform(-1, 6, size=(1, 10))
    r = t64(rng.normal(size=(1, 2, 10)), grad=False)
    out["bilinear sample"] = grad_check(lambda: T.sum_all(T.mul(T.bilinear_sample(img, py, px), r)), [img])
    return out


def _unroll_check():
    """Desk-width WhatCNN, eight fixations, float32 graph against a float64 oracle.

    Conv biases are zero at initialisation, so every retinal sample that falls
    outside the image puts its pre-activation exactly on the ReLU kink.  The
    check is therefore taken at a generic parameter point with small random
    conv biases.
    """
    stream = Stream(StreamConfig.canonical("what", seed=12))
    rng = np.random.default_rng(6)
    for name, p in stream.named_parameters():
        if name.endswith(("conv1.bias", "conv2.bias")):
            p.data = rng.uniform(-0.05, 0.05, p.shape).astype(np.float32)
    images = Tensor(np.random.default_rng(3).random((2, 3, 96, 96)).astype(np.float32))
    labels = np.array([[1, 0, 1, 0], [0, 1, 0, 0]], dtype=np.float64)
    fixations = np.random.default_rng(4).random((8, 2, 2))

    def loss():
        rep = stream.init_state(2)
        for t in range(8):
            rep = stream.what_head(stream.backbone(stream.retina(images, fixations[t]))[3], rep)
        return T.bce_multilabel_loss(rep.logits, labels)

    params = stream.parameters()
    assert all(p.data.dtype == np.float32 for p in params)
    return grad_check(loss, params, h=1e-6, max_per_input=4, rng=np.random.default_rng(5), promote=[stream])


def test_criterion_3_autodiff(criterion):
    with criterion(3, "autodiff integrity") as rec:
        t0 = time.perf_counter()
        layers = _layer_checks()
        worst_layer = max(layers, key=lambda k: layers[k].max_rel_error)
        for name, rep in layers.items():
            assert rep.max_rel_error < 1e-4, name
        unroll = _unroll_check()
        assert unroll.max_rel_error < 1e-2
        assert time.perf_counter() - t0 < 300
        rec.detail = (f"worst layer {worst_layer} {layers[worst_layer].max_rel_error:.1e}; "
                      f"8-fixation unroll {unroll.max_rel_error:.1e} over {unroll.n_checked} entries")


def test_criterion_4_sampling(criterion):
    with criterion(4, "fixation sampling fidelity") as rec:
        t0 = time.perf_counter()
        rng = np.random.default_rng(4)
        n = 100_000
        tvs = []
        for _ in range(3):
            logits = 2.0 * rng.normal(size=(16, 16))
            p = np.exp(logits - logits.max())
            p /= p.sum()
            counts = np.zeros(256)
            for _ in range(n):
                i, j = sample_cell(p, rng)
                counts[16 * i + j] += 1
            tvs.append(0.5 * np.abs(counts / n - p.ravel()).sum())
        uniform = np.full((16, 16), 1 / 256)
        counts = np.zeros(256)
        for _ in range(n):
            i, j = sample_cell(uniform, rng)
            counts[16 * i + j] += 1
        chi_p = stats.chisquare(counts).pvalue
        assert max(tvs) < 0.02
        assert chi_p > 0.01
        assert time.perf_counter() - t0 < 60
        rec.detail = f"TV {', '.join(f'{t:.4f}' for t in tvs)}; uniform chi-square p {chi_p:.3f}"


def _bh_brute(p, q):
    m = len(p)
    for k in range(m, 0, -1):
        cut = np.sort(p)[k - 1]
        if cut <= q * k / m:
            return p <= cut
    return np.zeros(m, dtype=bool)


def test_criterion_5_statistics(criterion):
    with criterion(5, "statistics oracles") as rec:
        t0 = time.perf_counter()
        rng = np.random.default_rng(5)
        ridge_err = 0.0
        for _ in range(50):
            n, k, v = rng.integers(10, 40), rng.integers(2, 8), rng.integers(1, 4)
            X, Y = rng.normal(size=(n, k)), rng.normal(size=(n, v))
            lam = 10 ** rng.uniform(-2, 4)
            oracle = np.linalg.solve(X.T @ X + lam * np.eye(k), X.T @ Y)
            ridge_err = max(ridge_err, float(np.abs(ridge_solve(X, Y, lam) - oracle).max()))
        assert ridge_err < 1e-6

        for trial in range(1000):
            m = int(rng.integers(1, 60))
            p = rng.random(m) ** rng.uniform(1, 6)
            if trial % 4 == 0:
                p = np.round(p, 2)
            assert np.array_equal(fdr_bh(p, 0.05), _bh_brute(p, 0.05))

        t = np.arange(600)
        layers = {name: np.column_stack([np.sin(t / (s + 3)) * (s + 1) for s in range(w)])
                  + 0.05 * rng.normal(size=(600, w)) @ rng.normal(size=(w, w))
                  for name, w in (("block3", 12), ("block4", 20), ("head", 6))}
        pca = two_stage_pca(layers, 0.99)
        kept = []
        offset = 0
        for name, X in layers.items():
            Z = pca.stage1[:, offset:offset + pca.layer_k[name]]
            offset += pca.layer_k[name]
            kept.append(_reconstructed(X, Z))
        kept.append(_reconstructed(pca.stage1, pca.components))
        assert min(kept) >= 0.99

        dt = HrfParams().dt
        times, kernel = hrf_kernel()
        peak = times[np.argmax(kernel)]
        assert abs(peak - 5.0) <= dt + 1e-12
        assert time.perf_counter() - t0 < 60
        rec.detail = (f"ridge error {ridge_err:.1e}; BH 1000/1000 exact; "
                      f"PCA retained min {min(kept):.4f}; HRF peak {peak:.2f} s")


def _reconstructed(X, scores):
    """Share of centred variance recovered by least-squares projection onto the scores."""
    Xc = X - X.mean(axis=0)
    coef, *_ = np.linalg.lstsq(scores, Xc, rcond=None)
    resid = Xc - scores @ coef
    return 1.0 - float((resid ** 2).sum() / (Xc ** 2).sum())


def test_criterion_6_permutation_calibration(criterion):
    with criterion(6, "permutation-test calibration") as rec:
        t0 = time.perf_counter()
        rng = np.random.default_rng(6)
        frame_rate, frames = 2.0, 1200
        layers = {name: rng.normal(size=(frames, 3)) @ rng.normal(size=(3, w)) + 0.1 * rng.normal(size=(frames, w))
                  for name, w in (("block3", 16), ("block4", 24), ("head", 8))}
        scan = ScanParams(tr=2.5)
        n_vol = int(frames / frame_rate / scan.tr)
        voxels = rng.normal(size=(n_vol, 200))
        fit = encode_stream(layers, voxels, frame_rate, EncodingConfig(n_perm=1000, scan=scan), stream_tag=0)
        ks = stats.kstest(fit.p_values, "uniform").statistic
        rate = float(np.mean(fit.fdr))
        assert ks < 0.1
        assert rate <= 0.07
        assert time.perf_counter() - t0 < 600
        rec.detail = f"KS distance {ks:.3f}; FDR pass rate {rate:.3f}"


# ---------------------------------------------------------------------------
# 7-9: desk-scale training and the teacher-brain analyses
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk():
    t0 = time.perf_counter()
    train, val = make_scene_set(2000, 1), make_scene_set(200, 2)
    family = {name: make_member(name, FAMILY) for name in ("where", "what", "control_a", "control_b")}
    hist_where = fit_member("where", family, train, FAMILY, val)
    hist_what = fit_member("what", family, train, FAMILY, val)
    scores = evaluate(family["where"], family["what"], val, np.random.default_rng(0))
    elapsed = time.perf_counter() - t0
    return dict(train=train, family=family, hist_where=hist_where, hist_what=hist_what,
                scores=scores, elapsed=elapsed)


@pytest.fixture(scope="module")
def analysis(desk):
    t0 = time.perf_counter()
    family, train = desk["family"], desk["train"]
    for name in ("control_a", "control_b"):
        fit_member(name, family, train, FAMILY)
    fit_joint(family, train, FAMILY)
    teacher = train_family(make_scene_set(1000, 3), TEACHER)
    session = simulate_session(teacher["where"], teacher["what"], MOVIE, snr=SNR, seed=3)
    result = run_ablation(family, session, EncodingConfig(n_perm=1000), seed=3)
    return dict(family=family, session=session, result=result, elapsed=time.perf_counter() - t0)


def test_criterion_7_desk_training(criterion, desk):
    with criterion(7, "desk-scale training") as rec:
        kl = desk["hist_where"].column("val_kl")
        f1 = desk["scores"]["macro_f1"]
        rec.detail = (f"macro-F1 {f1:.3f}; val KL {kl[0]:.3f} -> {kl[-1]:.3f}; "
                      f"training + evaluation {desk['elapsed'] / 60:.1f} min")
        assert desk["train"].labels.shape[1] == 4
        assert f1 >= 0.9
        assert kl[-1] <= 0.5 * kl[0]
        assert desk["elapsed"] <= 30 * 60


def test_criterion_8_segregation(criterion, analysis):
    with criterion(8, "dorsal/ventral segregation") as rec:
        res = analysis["result"]
        sep = {r.combination: r.separability for r in res.rows}
        five = res.row(5)
        rec.detail = (f"combo 5 median p_where dorsal {five.median_p_where_dorsal:.3f}, "
                      f"ventral {five.median_p_where_ventral:.3f}; separability "
                      + ", ".join(f"{c}:{s:.3f}" for c, s in sorted(sep.items()))
                      + f"; {analysis['elapsed'] / 60:.1f} min")
        assert five.median_p_where_dorsal > 0.5
        assert five.median_p_where_ventral < 0.5
        assert sep[5] >= max(sep[3], sep[4])
        assert max(sep[3], sep[4]) > max(sep[1], sep[2])
        assert analysis["elapsed"] <= 60 * 60


def test_criterion_9_learned_vs_random(criterion, analysis):
    with criterion(9, "learned vs random fixations") as rec:
        t0 = time.perf_counter()
        session = analysis["session"]
        only = run_ablation(analysis["family"], session, EncodingConfig(n_perm=1000), seed=3,
                            combinations={5: ("where", "what")})
        elapsed = time.perf_counter() - t0
        teacher = session.brain.labels != "noise"
        dw, dh = float(only.delta_where[teacher].mean()), float(only.delta_what[teacher].mean())
        rec.detail = f"mean delta r where {dw:+.4f}, what {dh:+.4f}; {elapsed / 60:.1f} min"
        assert np.array_equal(only.delta_where, analysis["result"].delta_where)
        assert dw > 0 and dh > 0
        assert elapsed <= 30 * 60


# ---------------------------------------------------------------------------
# 10: reproducibility
# ---------------------------------------------------------------------------

TINY = """\
[run]
seed = 3
widths = 4,6,8,10

[data]
train_scenes = 24
val_scenes = 8

[train]
stage1_epochs = 1
stage2_epochs = 1
stage3_epochs = 1
stage3_scenes = 8
batch_size = 8

[teacher]
widths = 4,6,8,10
seed = 9

[brain]
movie_scenes = 80
voxels_per_class = 8
snr = 2

[encoding]
n_perm = 40

[simulate]
images = 2
"""


def _run_all(cfg, out):
    common = ["--config", str(cfg), "--seed", "21", "--threads", "1"]
    ckpt = ["--checkpoints", str(out / "train")]
    commands = [
        ["train", *common, "--out", str(out / "train")],
        ["simulate", *common, "--out", str(out / "sim"), "--mode", "learned", *ckpt],
        ["simulate", *common, "--out", str(out / "sim"), "--mode", "random", *ckpt],
        ["encode", *common, "--out", str(out / "enc"), *ckpt],
        ["ablate", *common, "--out", str(out / "abl"), *ckpt],
        ["report", *common, "--out", str(out / "rep"), "--input", str(out / "enc")],
    ]
    for argv in commands:
        assert main(argv) == 0, argv[0]


def test_criterion_10_reproducibility(criterion, tmp_path):
    with criterion(10, "byte-identical CLI reruns") as rec:
        cfg = tmp_path / "tiny.ini"
        cfg.write_text(TINY)
        a, b = tmp_path / "a", tmp_path / "b"
        _run_all(cfg, a)
        _run_all(cfg, b)
        files_a = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
        files_b = sorted(p.relative_to(b) for p in b.rglob("*.csv"))
        assert files_a == files_b and len(files_a) > 10
        differing = [str(f) for f in files_a if (a / f).read_bytes() != (b / f).read_bytes()]
        rec.detail = f"{len(files_a)} CSV files compared, {len(differing)} differ"
        assert not differing, differing
