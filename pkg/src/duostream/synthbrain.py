"""A synthetic teacher brain: voxel time series driven by two held-out streams.

A movie of synthetic scenes (slow camera drift, one fixation per frame) is
watched by a saliency-trained and a recognition-trained teacher.  Dorsal
voxels read out the first teacher's mid/late features, ventral voxels the
second's.  Each voxel is a sparse positive mixture of z-scored units, passed
through the HRF, averaged per TR, and corrupted with white noise.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import shift as nd_shift

from . import tensor as T
from .encoding import HrfParams, ScanParams, frames_to_volumes, hrf_convolve_downsample, hrf_kernel
from .fixation import run_fixation_loop
from .scenes import SceneConfig, gen_synthetic_scene

LABELS = ("dorsal", "ventral")
FEATURE_GRID = 4
TEACHER_LAYERS = ("block3", "block4", "head")


class SynthBrainError(ValueError):
    pass


# ---------------------------------------------------------------------------
# stimulus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MovieConfig:
    n_scenes: int = 150
    frames_per_scene: int = 8
    frame_rate: float = 2.0
    drift_pixels: float = 3.0
    seed: int = 0
    scene: SceneConfig = SceneConfig()

    @property
    def n_frames(self):
        return self.n_scenes * self.frames_per_scene

    @property
    def duration(self):
        return self.n_frames / self.frame_rate


@dataclass
class Movie:
    frames: np.ndarray   # (T, 3, H, W)
    scene_of: np.ndarray  # (T,) scene index per frame
    labels: np.ndarray   # (n_scenes, K)
    config: MovieConfig

    @property
    def frame_rate(self):
        return self.config.frame_rate

    def by_step(self, scenes):
        """Frames of the given scenes as (steps, len(scenes), 3, H, W)."""
        f = self.config.frames_per_scene
        idx = np.asarray(scenes)[None, :] * f + np.arange(f)[:, None]
        return self.frames[idx]


def _drift(rng, n, amplitude):
    t = np.arange(n)
    out = np.zeros((n, 2))
    for k in range(2):
        for period in (rng.uniform(40, 80), rng.uniform(12, 25)):
            out[:, k] += np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
    return amplitude * out / 2


def make_movie(config=MovieConfig()):
    """Deterministic drifting-camera movie for ``config.seed``."""
    if config.n_scenes < 1 or config.frames_per_scene < 1:
        raise SynthBrainError("movie needs at least one scene and one frame per scene")
    rng = np.random.default_rng([config.seed, 7])
    drift = _drift(rng, config.n_frames, config.drift_pixels)
    S = config.scene.size
    frames = np.empty((config.n_frames, 3, S, S), dtype=np.float32)
    labels = []
    for s in range(config.n_scenes):
        scene = gen_synthetic_scene((config.seed, 1000003, s), config.scene)
        labels.append(scene.labels)
        for k in range(config.frames_per_scene):
            t = s * config.frames_per_scene + k
            dx, dy = drift[t]
            frames[t] = nd_shift(scene.image, (0, dy, dx), order=1, mode="nearest")
    scene_of = np.repeat(np.arange(config.n_scenes), config.frames_per_scene)
    return Movie(frames, scene_of, np.stack(labels), config)


# ---------------------------------------------------------------------------
# stream features
# ---------------------------------------------------------------------------

def _pool(x, n=FEATURE_GRID):
    N, C, H, W = x.shape
    return x.reshape(N, C, n, H // n, n, W // n).mean(axis=(3, 5)).reshape(N, -1)


def fixation_trace(movie, where, mode="learned", seed=0, batch=32, sigma=None):
    """One fixation per frame; each scene restarts at the image centre.

    Returns (T, 2) normalised fixations.
    """
    rng = np.random.default_rng([seed, 11])
    f = movie.config.frames_per_scene
    out = np.zeros((movie.config.n_frames, 2))
    kw = {} if sigma is None else {"sigma": sigma}
    for s in range(0, movie.config.n_scenes, batch):
        scenes = np.arange(s, min(s + batch, movie.config.n_scenes))
        with T.no_grad():
            traces, *_ = run_fixation_loop(movie.by_step(scenes), where if mode == "learned" else None,
                                           None, n=f, mode=mode, rng=rng, **kw)
        for j, sc in enumerate(scenes):
            out[sc * f:(sc + 1) * f] = traces[j].fixations
    return out


def stream_features(stream, movie, fixations, batch=32, layers=("block2", "block3", "block4", "head")):
    """Per-frame activations of ``stream`` viewing the movie at the given fixations.

    Block outputs are average-pooled to a 4 x 4 retinal grid.  ``head`` is the
    saliency map for saliency streams and the recurrent state (carried over
    the frames of a scene) for recognition streams.  Returns name -> (T, units).
    """
    f = movie.config.frames_per_scene
    fix = np.asarray(fixations).reshape(movie.config.n_scenes, f, 2)
    out = {name: [None] * movie.config.n_scenes for name in layers}
    stream.eval()
    with T.no_grad():
        for s in range(0, movie.config.n_scenes, batch):
            scenes = np.arange(s, min(s + batch, movie.config.n_scenes))
            frames = movie.by_step(scenes)
            rep = None if stream.is_saliency else stream.init_state(len(scenes))
            per_step = {name: [] for name in layers}
            for t in range(f):
                feats = stream.backbone(stream.retina(frames[t], fix[scenes, t]))
                acts = {f"block{k + 1}": feats[k].data for k in range(4)}
                if stream.is_saliency:
                    head = stream.where_head(feats[2], feats[3]).data.reshape(len(scenes), -1)
                else:
                    rep = stream.what_head(feats[3], rep)
                    head = rep.hidden.data
                for name in layers:
                    per_step[name].append(head if name == "head" else _pool(acts[name]))
            for name in layers:
                stacked = np.stack(per_step[name], axis=1)  # (scenes, f, units)
                for j, sc in enumerate(scenes):
                    out[name][sc] = stacked[j]
    return {name: np.concatenate(v).astype(np.float64) for name, v in out.items()}


# ---------------------------------------------------------------------------
# voxels
# ---------------------------------------------------------------------------

@dataclass
class TeacherVoxelSet:
    voxels: np.ndarray   # (n_volumes, V)
    drive: np.ndarray    # (n_volumes, V) noiseless, unit variance
    labels: np.ndarray   # (V,) "dorsal" | "ventral" | "noise"
    roi: np.ndarray      # (V,) ROI id
    snr: float
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def n_voxels(self):
        return self.voxels.shape[1]


def _zscore(X):
    sd = X.std(axis=0)
    keep = sd > 1e-8 * max(1.0, float(np.abs(X).max()))
    return (X[:, keep] - X[:, keep].mean(axis=0)) / sd[keep]


def voxel_drive(layers, frame_rate, n_voxels, rng, scan=ScanParams(), roi_size=8, n_units=24):
    """Noiseless unit-variance responses of voxels reading out ``layers``.

    Voxels in the same ROI share a source layer; ROIs cycle over the layers.
    Returns ((n_volumes, n_voxels) drive, (n_voxels,) ROI index within set).
    """
    names = list(layers)
    Z = {name: _zscore(np.asarray(layers[name], dtype=np.float64)) for name in names}
    _, kernel = hrf_kernel(HrfParams(dt=1.0 / frame_rate))
    cols, rois = [], []
    for v in range(n_voxels):
        roi = v // roi_size
        X = Z[names[roi % len(names)]]
        idx = rng.choice(X.shape[1], size=min(n_units, X.shape[1]), replace=False)
        w = rng.exponential(1.0, size=len(idx))
        cols.append(X[:, idx] @ w)
        rois.append(roi)
    neural = np.stack(cols, axis=1)
    drive = hrf_convolve_downsample(neural, kernel, frame_rate, scan)
    drive = (drive - drive.mean(axis=0)) / drive.std(axis=0)
    return drive, np.array(rois)


def make_teacher_voxels(where_layers, what_layers, frame_rate, n_voxels_per_class=40, snr=2.0,
                        seed=0, scan=ScanParams(), roi_size=8, n_noise=0):
    """Dorsal and ventral teacher voxels plus optional noise-only voxels.

    ``snr`` is the ratio of drive standard deviation to noise standard
    deviation; ``np.inf`` gives noiseless voxels.
    """
    if not snr > 0:
        raise SynthBrainError(f"snr must be positive, got {snr}")
    rng = np.random.default_rng([seed, 23])
    d_drive, d_roi = voxel_drive(where_layers, frame_rate, n_voxels_per_class, rng, scan, roi_size)
    v_drive, v_roi = voxel_drive(what_layers, frame_rate, n_voxels_per_class, rng, scan, roi_size)
    n_roi_d = d_roi.max() + 1
    drive = np.concatenate([d_drive, v_drive], axis=1)
    labels = ["dorsal"] * n_voxels_per_class + ["ventral"] * n_voxels_per_class
    roi = np.concatenate([d_roi, v_roi + n_roi_d])
    noise_sd = 0.0 if np.isinf(snr) else 1.0 / snr
    voxels = drive + noise_sd * rng.standard_normal(drive.shape)
    if n_noise:
        voxels = np.concatenate([voxels, rng.standard_normal((drive.shape[0], n_noise))], axis=1)
        drive = np.concatenate([drive, np.zeros((drive.shape[0], n_noise))], axis=1)
        labels += ["noise"] * n_noise
        roi = np.concatenate([roi, np.full(n_noise, roi.max() + 1 if len(roi) else 0)])
    return TeacherVoxelSet(voxels, drive, np.array(labels), roi, float(snr), seed,
                           {"n_per_class": n_voxels_per_class, "n_noise": n_noise, "roi_size": roi_size})


@dataclass
class Session:
    movie: Movie
    fixations: np.ndarray  # teacher fixation trace (T, 2)
    brain: TeacherVoxelSet
    scan: ScanParams

    @property
    def n_volumes(self):
        return self.brain.voxels.shape[0]


def simulate_session(teacher_where, teacher_what, movie_config=MovieConfig(), scan=ScanParams(),
                     n_voxels_per_class=40, snr=2.0, seed=0, n_noise=0, movie=None):
    """The teachers watch the movie with their own learned fixations; returns a Session."""
    if teacher_where is None or not teacher_where.is_saliency:
        raise SynthBrainError("teacher_where must be a saliency stream")
    if teacher_what is None or teacher_what.is_saliency:
        raise SynthBrainError("teacher_what must be a recognition stream")
    movie = make_movie(movie_config) if movie is None else movie
    n_vol = frames_to_volumes(movie.config.n_frames, movie.frame_rate, scan.tr)
    scan = ScanParams(scan.tr, n_vol if scan.n_volumes is None else scan.n_volumes, scan.train_fraction)
    fix = fixation_trace(movie, teacher_where, "learned", seed=seed)
    wl = stream_features(teacher_where, movie, fix, layers=TEACHER_LAYERS)
    hl = stream_features(teacher_what, movie, fix, layers=TEACHER_LAYERS)
    brain = make_teacher_voxels(wl, hl, movie.frame_rate, n_voxels_per_class, snr, seed, scan,
                                n_noise=n_noise)
    return Session(movie, fix, brain, scan)
