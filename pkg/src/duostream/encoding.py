"""Voxelwise encoding: features -> PCA -> HRF regressors -> ridge -> correlation.

Significance uses a block permutation test on the held-out segment and
Benjamini-Hochberg FDR control across voxels.
"""
import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter
from scipy.special import gammaln

LAMBDA_GRID = tuple(np.logspace(-2, 4, 7))


class EncodingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# dimensionality reduction
# ---------------------------------------------------------------------------

@dataclass
class PcaResult:
    components: np.ndarray
    layer_k: dict
    layer_retained: dict
    k: int
    retained: float
    stage1: np.ndarray = None  # concatenated per-layer scores fed to the second stage


def _pca_scores(X, variance_kept, name):
    Xc = X - X.mean(axis=0)
    U, S, _ = np.linalg.svd(Xc, full_matrices=False)
    var = S ** 2
    total = var.sum()
    if S.size == 0 or not S[0] > 1e-12 * max(1.0, float(np.abs(X).max())):
        raise EncodingError(f"layer {name!r} has rank 0 (no variance)")
    frac = np.cumsum(var) / total
    # tolerance guards against cumsum rounding just below the threshold
    k = int(np.searchsorted(frac, variance_kept - 1e-12) + 1)
    k = min(k, len(S))
    return U[:, :k] * S[:k], float(frac[k - 1])


def two_stage_pca(layers, variance_kept=0.99):
    """PCA within each layer, concatenate the scores, then PCA across layers.

    ``layers`` maps layer name -> (time, units) array.  Both stages keep the
    fewest components whose cumulative variance reaches ``variance_kept``.
    """
    if not layers:
        raise EncodingError("no layers given")
    lengths = {np.asarray(v).shape[0] for v in layers.values()}
    if len(lengths) != 1:
        raise EncodingError(f"layers disagree on time length: {sorted(lengths)}")
    scores, layer_k, layer_ret = [], {}, {}
    for name, X in layers.items():
        X = np.asarray(X, dtype=np.float64)
        if not np.all(np.isfinite(X)):
            raise EncodingError(f"layer {name!r} has non-finite values")
        s, ret = _pca_scores(X, variance_kept, name)
        scores.append(s)
        layer_k[name] = s.shape[1]
        layer_ret[name] = ret
    stage1 = np.concatenate(scores, axis=1)
    comps, ret = _pca_scores(stage1, variance_kept, "<all layers>")
    comps -= comps.mean(axis=0)
    return PcaResult(comps, layer_k, layer_ret, comps.shape[1], ret, stage1)


def retained_variance(X, components):
    """Fraction of the centred variance of X explained by projecting onto span(components)."""
    Xc = X - X.mean(axis=0)
    Q, _ = np.linalg.qr(components - components.mean(axis=0))
    proj = Q @ (Q.T @ Xc)
    return float((proj ** 2).sum() / (Xc ** 2).sum())


# ---------------------------------------------------------------------------
# haemodynamics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HrfParams:
    peak_shape: float = 6.0
    peak_scale: float = 1.0
    under_shape: float = 16.0
    under_scale: float = 1.0
    under_ratio: float = 1.0 / 6.0
    dt: float = 0.1
    duration: float = 32.0


def _gamma_pdf(t, shape, scale):
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp((shape - 1) * np.log(t[pos]) - t[pos] / scale - gammaln(shape) - shape * np.log(scale))
    return out


def hrf_kernel(params=HrfParams()):
    """Double-gamma HRF sampled every ``dt`` seconds, scaled to unit peak.

    Returns (times, kernel).
    """
    if not params.dt > 0:
        raise EncodingError("dt must be positive")
    if params.duration < 30:
        raise EncodingError("HRF duration must cover at least 30 s")
    t = np.arange(0.0, params.duration, params.dt)
    h = (_gamma_pdf(t, params.peak_shape, params.peak_scale)
         - params.under_ratio * _gamma_pdf(t, params.under_shape, params.under_scale))
    return t, h / h.max()


@dataclass(frozen=True)
class ScanParams:
    tr: float = 2.5
    n_volumes: int = None
    train_fraction: float = 0.81

    @property
    def test_fraction(self):
        return 1.0 - self.train_fraction

    def split(self, n):
        """Contiguous (train, test) index arrays; test is the final segment."""
        n_train = int(round(self.train_fraction * n))
        if not 0 < n_train < n:
            raise EncodingError(f"cannot split {n} volumes at {self.train_fraction}")
        return np.arange(n_train), np.arange(n_train, n)


def frames_to_volumes(n_frames, frame_rate, tr):
    return int(math.floor(n_frames / frame_rate / tr + 1e-9))


def hrf_convolve_downsample(components, kernel, frame_rate, scan):
    """Causally convolve each column with the kernel, then average within each TR.

    The kernel must be sampled at the component (frame) rate.
    """
    X = np.asarray(components, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    conv = lfilter(np.asarray(kernel, dtype=np.float64), [1.0], X, axis=0)
    n_frames = X.shape[0]
    available = frames_to_volumes(n_frames, frame_rate, scan.tr)
    n_vol = available if scan.n_volumes is None else scan.n_volumes
    if n_vol > available or n_vol < 1:
        raise EncodingError(f"{n_frames} frames at {frame_rate} Hz give {available} volumes, need {n_vol}")
    vol = np.floor(np.arange(n_frames) / frame_rate / scan.tr + 1e-9).astype(int)
    keep = vol < n_vol
    sums = np.zeros((n_vol, X.shape[1]))
    np.add.at(sums, vol[keep], conv[keep])
    counts = np.bincount(vol[keep], minlength=n_vol)
    return sums / counts[:, None]


# ---------------------------------------------------------------------------
# regression and scoring
# ---------------------------------------------------------------------------

def ridge_solve(X, Y, lam):
    """Solve (X'X + lam I) w = X'Y through the SVD of X.

    ``lam`` may be a scalar or one value per column of Y.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam <= 0):
        raise EncodingError("ridge penalty must be positive")
    U, S, Vt = np.linalg.svd(X, full_matrices=False)
    UtY = U.T @ (Y if Y.ndim == 2 else Y[:, None])
    if lam.ndim == 0:
        W = Vt.T @ ((S / (S ** 2 + lam))[:, None] * UtY)
    else:
        W = Vt.T @ ((S[:, None] / (S[:, None] ** 2 + lam[None, :])) * UtY)
    return W if Y.ndim == 2 else W[:, 0]


def correlate_columns(A, B):
    """Pearson correlation of matching columns; constant columns give 0."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    Ac = A - A.mean(axis=0)
    Bc = B - B.mean(axis=0)
    den = np.sqrt((Ac * Ac).sum(axis=0) * (Bc * Bc).sum(axis=0))
    ok = den > 1e-300
    return np.where(ok, (Ac * Bc).sum(axis=0) / np.where(ok, den, 1.0), 0.0), ~ok


@dataclass
class RidgeFit:
    weights: np.ndarray    # (k, V)
    intercept: np.ndarray  # (V,)
    lambdas: np.ndarray    # (V,) chosen penalty

    def predict(self, X):
        return np.asarray(X, dtype=np.float64) @ self.weights + self.intercept


def ridge_fit(X, Y, lambdas=LAMBDA_GRID, val_fraction=0.2):
    """Per-voxel ridge with the penalty picked on the last ``val_fraction`` of rows."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if np.any(Y.std(axis=0) == 0):
        raise EncodingError("voxel response has zero variance")
    lambdas = np.asarray(lambdas, dtype=np.float64)
    n = X.shape[0]
    n_fit = n - max(2, int(round(val_fraction * n)))
    Xa, Ya, Xv, Yv = X[:n_fit], Y[:n_fit], X[n_fit:], Y[n_fit:]
    mx, my = Xa.mean(axis=0), Ya.mean(axis=0)
    U, S, Vt = np.linalg.svd(Xa - mx, full_matrices=False)
    UtY = U.T @ (Ya - my)
    scores = np.empty((len(lambdas), Y.shape[1]))
    for i, lam in enumerate(lambdas):
        W = Vt.T @ ((S / (S ** 2 + lam))[:, None] * UtY)
        scores[i] = correlate_columns((Xv - mx) @ W + my, Yv)[0]
    best = lambdas[np.argmax(scores, axis=0)]
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    W = ridge_solve(X - mx, Y - my, best)
    return RidgeFit(W, my - mx @ W, best)


def predict_correlate(fit, X_test, Y_test):
    """Held-out correlation per voxel, plus a flag for constant predictions."""
    Y_test = np.asarray(Y_test, dtype=np.float64)
    if Y_test.ndim == 1:
        Y_test = Y_test[:, None]
    return correlate_columns(fit.predict(X_test), Y_test)


def _blocks(n, block_len):
    return [np.arange(s, min(n, s + block_len)) for s in range(0, n, block_len)]


def block_permutation_test(prediction, measured, block_seconds=20.0, tr=2.5, n_perm=1000,
                           seed=0, chunk=20000):
    """One-sided p-value for corr(prediction, measured) by shuffling measured blocks.

    ``seed`` may be an int or a sequence (e.g. (root, voxel_id)).
    """
    pred = np.asarray(prediction, dtype=np.float64)
    meas = np.asarray(measured, dtype=np.float64)
    n = len(meas)
    block_len = int(math.ceil(block_seconds / tr - 1e-9))
    blocks = _blocks(n, block_len)
    if len(blocks) < 3:
        raise EncodingError(f"{n} volumes give {len(blocks)} blocks of {block_len}; need 3")
    r_obs = correlate_columns(pred[:, None], meas[:, None])[0][0]
    pc = pred - pred.mean()
    pnorm = np.sqrt((pc * pc).sum())
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < n_perm:
        m = min(chunk, n_perm - done)
        order = np.argsort(rng.random((m, len(blocks))), axis=1)
        idx = np.stack([np.concatenate([blocks[b] for b in row]) for row in order])
        perm = meas[idx]
        perm -= perm.mean(axis=1, keepdims=True)
        den = pnorm * np.sqrt((perm * perm).sum(axis=1))
        r = np.where(den > 0, perm @ pc / np.where(den > 0, den, 1.0), 0.0)
        hits += int(np.count_nonzero(r >= r_obs))
        done += m
    return (1 + hits) / (1 + n_perm)


def fdr_bh(pvals, q=0.05):
    """Benjamini-Hochberg step-up; returns a boolean pass flag per test."""
    p = np.asarray(pvals, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise EncodingError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    below = p[order] <= q * np.arange(1, m + 1) / m
    flags = np.zeros(m, dtype=bool)
    if below.any():
        flags[order[:np.nonzero(below)[0].max() + 1]] = True
    return flags


def p_where(r_where, r_what):
    """Share of squared correlation explained by the where stream; NaN where undefined."""
    a = np.asarray(r_where, dtype=np.float64) ** 2
    b = np.asarray(r_what, dtype=np.float64) ** 2
    den = a + b
    out = np.where(den > 0, a / np.where(den > 0, den, 1.0), np.nan)
    return out if out.ndim else float(out)


def separability(points):
    """Mean |x - y| over (x, y) points, skipping undefined ones."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    ok = np.all(np.isfinite(pts), axis=1)
    if not ok.any():
        raise EncodingError("no defined points")
    return float(np.abs(pts[ok, 0] - pts[ok, 1]).mean())


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncodingConfig:
    variance_kept: float = 0.99
    hrf: HrfParams = HrfParams()
    scan: ScanParams = ScanParams()
    lambdas: tuple = LAMBDA_GRID
    block_seconds: float = 20.0
    n_perm: int = 1000
    q: float = 0.05
    seed: int = 0
    threads: int = 1


@dataclass
class StreamFit:
    r: np.ndarray
    p_values: np.ndarray
    fdr: np.ndarray
    constant: np.ndarray
    pca: PcaResult = None
    lambdas: np.ndarray = None


def regressors(layers, frame_rate, config):
    pca = two_stage_pca(layers, config.variance_kept)
    _, kernel = hrf_kernel(HrfParams(**{**config.hrf.__dict__, "dt": 1.0 / frame_rate}))
    X = hrf_convolve_downsample(pca.components, kernel, frame_rate, config.scan)
    sd = X.std(axis=0)
    X = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    return X, pca


def permutation_pvalues(pred, meas, config, stream_tag=0):
    V = meas.shape[1]

    def one(v):
        return block_permutation_test(pred[:, v], meas[:, v], config.block_seconds, config.scan.tr,
                                      config.n_perm, seed=(config.seed, stream_tag, v))

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as ex:
            return np.array(list(ex.map(one, range(V))))
    return np.array([one(v) for v in range(V)])


def encode_stream(layers, voxels, frame_rate, config=EncodingConfig(), stream_tag=0):
    X, pca = regressors(layers, frame_rate, config)
    Y = np.asarray(voxels, dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise EncodingError(f"{X.shape[0]} regressor volumes vs {Y.shape[0]} voxel volumes")
    tr_idx, te_idx = config.scan.split(len(Y))
    fit = ridge_fit(X[tr_idx], Y[tr_idx], config.lambdas)
    pred = fit.predict(X[te_idx])
    r, constant = correlate_columns(pred, Y[te_idx])
    p = permutation_pvalues(pred, Y[te_idx], config, stream_tag)
    return StreamFit(r, p, fdr_bh(p, config.q), constant, pca, fit.lambdas)


@dataclass
class EncodingResult:
    r_where: np.ndarray
    r_what: np.ndarray
    p_value_where: np.ndarray
    p_value_what: np.ndarray
    fdr_where: np.ndarray
    fdr_what: np.ndarray
    voxel_ids: np.ndarray = None
    p_where: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.voxel_ids is None:
            self.voxel_ids = np.arange(len(self.r_where))
        self.p_where = p_where(self.r_where, self.r_what)

    @property
    def undefined(self):
        return ~np.isfinite(self.p_where)

    COLUMNS = ("voxel_id", "r_where", "r_what", "p_where", "p_value_where", "p_value_what",
               "fdr_where", "fdr_what")

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for i in range(len(self.r_where)):
                pw = "nan" if not np.isfinite(self.p_where[i]) else f"{self.p_where[i]:.10g}"
                w.writerow([int(self.voxel_ids[i]), f"{self.r_where[i]:.10g}", f"{self.r_what[i]:.10g}", pw,
                            f"{self.p_value_where[i]:.10g}", f"{self.p_value_what[i]:.10g}",
                            str(bool(self.fdr_where[i])).lower(), str(bool(self.fdr_what[i])).lower()])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        col = lambda k: np.array([float(r[k]) for r in rows])
        flag = lambda k: np.array([r[k] == "true" for r in rows])
        return cls(col("r_where"), col("r_what"), col("p_value_where"), col("p_value_what"),
                   flag("fdr_where"), flag("fdr_what"), np.array([int(r["voxel_id"]) for r in rows]))


def run_encoding(where_layers, what_layers, voxels, frame_rate, config=EncodingConfig()):
    """Fit where- and what-based encoding models for every voxel."""
    fw = encode_stream(where_layers, voxels, frame_rate, config, stream_tag=0)
    fh = encode_stream(what_layers, voxels, frame_rate, config, stream_tag=1)
    return EncodingResult(fw.r, fh.r, fw.p_values, fh.p_values, fw.fdr, fh.fdr)
