"""Saliency-driven fixation sequences with inhibition of return (IOR)."""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .retina import retinal_cells_to_image

GRID = 16
DEFAULT_SIGMA = 0.1


def grid_centres(n=GRID):
    """Normalised image coordinates (x, y) of the centres of an n x n grid."""
    c = (np.arange(n) + 0.5) / n
    y, x = np.meshgrid(c, c, indexing="ij")
    return x, y


@dataclass
class IorState:
    sigma: float = DEFAULT_SIGMA
    fixations: list = field(default_factory=list)

    @property
    def step(self):
        return len(self.fixations)

    def visit(self, xy):
        self.fixations.append((float(xy[0]), float(xy[1])))


def ior_map(state, x=None, y=None):
    """ReLU(1 - sum of unit-peak Gaussians at prior fixations) evaluated at (x, y).

    ``x``, ``y`` default to the 16 x 16 grid of cell centres.
    """
    if not state.sigma > 0:
        raise ValueError("sigma must be positive")
    if x is None:
        x, y = grid_centres()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    total = np.zeros(np.broadcast(x, y).shape)
    two_s2 = 2.0 * state.sigma ** 2
    for fx, fy in state.fixations:
        total += np.exp(-((x - fx) ** 2 + (y - fy) ** 2) / two_s2)
    return np.maximum(1.0 - total, 0.0)


def apply_ior(saliency, ior):
    """Elementwise product renormalised to sum 1 (uniform if it vanishes)."""
    s = np.asarray(saliency, dtype=np.float64)
    prod = s * np.asarray(ior, dtype=np.float64)
    total = prod.sum()
    if not total > 0:
        return np.full(s.shape, 1.0 / s.size)
    return prod / total


def sample_cell(prob_map, rng):
    """Index (row, col) drawn from a probability map."""
    p = np.asarray(prob_map, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("probability map contains non-finite values")
    if np.any(p < 0):
        raise ValueError("probability map has negative entries")
    cdf = np.cumsum(p.ravel())
    if not cdf[-1] > 0:
        raise ValueError("probability map has no mass")
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    k = min(k, p.size - 1)
    return divmod(k, p.shape[-1])


def sample_fixation(prob_map, rng, cell_x=None, cell_y=None):
    """Draw a cell and return its centre in normalised image coordinates.

    ``cell_x`` / ``cell_y`` give the image location of every cell; they default
    to the regular grid over the image.
    """
    i, j = sample_cell(prob_map, rng)
    if cell_x is None:
        n = np.asarray(prob_map).shape[-1]
        cell_x, cell_y = grid_centres(n)
    return float(cell_x[i, j]), float(cell_y[i, j])


def random_fixation(rng, n=GRID):
    i, j = rng.integers(n), rng.integers(n)
    return (j + 0.5) / n, (i + 0.5) / n


@dataclass
class FixationTrace:
    fixations: np.ndarray            # (n, 2) normalised (x, y)
    saliency: list = field(default_factory=list)   # per-step (16, 16) raw maps
    ior: list = field(default_factory=list)        # per-step IOR at the map cells
    seed: int = None

    def __len__(self):
        return len(self.fixations)


def run_fixation_loop(images, where_stream, what_stream, n=8, mode="learned", rng=None,
                      sigma=DEFAULT_SIGMA, use_ior=True, where_grad=False, on_step=None):
    """Drive both streams through ``n`` fixations per image.

    Starting at the image centre, each step feeds the wide retinal view to the
    where stream and the narrow view to the what stream.  In learned mode the
    next fixation is sampled from saliency x IOR; in random mode it is drawn
    uniformly over the 16 x 16 grid.  ``images`` may also be (n, N, C, H, W),
    in which case step t views ``images[t]`` (a moving stimulus).
    ``on_step(t, where_out, what_out)``
    receives per-step outputs: ``where_out`` is (block features, saliency)
    and ``what_out`` is (block features, representation).

    Returns (list of FixationTrace, final SceneRepresentation, per-step
    saliency tensors, per-step representations).
    """
    if mode not in ("learned", "random"):
        raise ValueError(f"mode must be 'learned' or 'random', got {mode!r}")
    if where_stream is not None and not where_stream.is_saliency:
        raise ValueError("where_stream must have the saliency objective")
    if what_stream is not None and what_stream.is_saliency:
        raise ValueError("what_stream must have the recognition objective")
    if mode == "learned" and where_stream is None:
        raise ValueError("learned mode needs a where stream")
    rng = np.random.default_rng(0) if rng is None else rng
    data = images.data if isinstance(images, T.Tensor) else np.asarray(images, dtype=np.float32)
    movie = data.ndim == 5
    if movie and data.shape[0] < n:
        raise ValueError(f"movie input has {data.shape[0]} frames, need {n}")
    N = data.shape[-4]
    shape = data.shape[-2:]
    fix = np.full((N, 2), 0.5)
    traces = [FixationTrace(np.zeros((n, 2))) for _ in range(N)]
    iors = [IorState(sigma) for _ in range(N)]
    rep = what_stream.init_state(N) if what_stream is not None else None
    sal_steps, rep_steps = [], []
    for t in range(n):
        for k in range(N):
            traces[k].fixations[t] = fix[k]
            iors[k].visit(fix[k])
        where_out = what_out = None
        sal = None
        frame = data[t] if movie else images
        if where_stream is not None:
            if where_grad:
                feats = where_stream.backbone(where_stream.retina(frame, fix))
                sal = where_stream.where_head(feats[2], feats[3])
            else:
                with T.no_grad():
                    feats = where_stream.backbone(where_stream.retina(frame, fix))
                    sal = where_stream.where_head(feats[2], feats[3])
            where_out = (feats, sal)
            sal_steps.append(sal)
        if what_stream is not None:
            feats = what_stream.backbone(what_stream.retina(frame, fix))
            rep = what_stream.what_head(feats[3], rep)
            what_out = (feats, rep)
            rep_steps.append(rep)
        if on_step is not None:
            on_step(t, where_out, what_out)
        if t == n - 1:
            break
        new_fix = np.empty_like(fix)
        for k in range(N):
            if mode == "random":
                new_fix[k] = random_fixation(rng)
                if sal is not None:
                    traces[k].saliency.append(sal.data[k, 0].copy())
                continue
            cx, cy = retinal_cells_to_image(fix[k], where_stream.a, shape, GRID)
            smap = sal.data[k, 0].astype(np.float64)
            inhibit = ior_map(iors[k], cx, cy) if use_ior else np.ones_like(smap)
            traces[k].saliency.append(smap)
            traces[k].ior.append(inhibit)
            new_fix[k] = sample_fixation(apply_ior(smap, inhibit), rng, cx, cy)
        fix = new_fix
    return traces, rep, sal_steps, rep_steps
