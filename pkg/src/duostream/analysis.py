"""Model-family training and the stream-pairing / fixation-mode comparisons.

Combination ids pair a where-role stream with a what-role stream:

    ===  ==========  ==========  =======================
    id   where role  what role   the two differ in
    ===  ==========  ==========  =======================
    1    where       control_a   view only
    2    control_b   what        view only
    3    where       control_b   objective only
    4    control_a   what        objective only
    5    where       what        view and objective
    ===  ==========  ==========  =======================
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .encoding import EncodingConfig, EncodingResult, encode_stream, separability
from .streams import Stream, StreamConfig
from .synthbrain import fixation_trace, stream_features
from .training import TrainSchedule, stage1_train, stage2_train, stage3_train

log = logging.getLogger(__name__)

COMBINATIONS = {
    1: ("where", "control_a"),
    2: ("control_b", "what"),
    3: ("where", "control_b"),
    4: ("control_a", "what"),
    5: ("where", "what"),
}
STREAM_TAGS = {"where": 0, "what": 1, "control_a": 2, "control_b": 3}


# ---------------------------------------------------------------------------
# training a family of streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FamilyConfig:
    widths: tuple = (16, 32, 64, 128)
    seed: int = 0
    stage1_epochs: int = 2
    stage2_epochs: int = 3
    stage3_epochs: int = 1
    stage3_scenes: int = 256
    batch_size: int = 32
    stage3_batch_size: int = 16  # the joint unroll keeps both graphs alive
    controls: bool = True


MEMBER_KEYS = {"where": 1, "what": 2, "control_a": 3, "control_b": 4}


def make_member(name, config=FamilyConfig()):
    """Untrained stream ``name`` of the family, seeded from the family seed."""
    return Stream(StreamConfig.canonical(name, widths=config.widths,
                                         seed=1000 * config.seed + MEMBER_KEYS[name]))


def _schedule(stage, epochs, config):
    size = config.stage3_batch_size if stage == 3 else config.batch_size
    return TrainSchedule.desk(stage, epochs=epochs, batch_size=size)


def fit_member(name, family, data, config=FamilyConfig(), val=None):
    """Run the training stage that matches ``name``'s objective.

    Saliency streams are fit at random fixations; recognition streams on the
    fixation sequences of the (already trained) where stream.
    """
    rng = np.random.default_rng([config.seed, MEMBER_KEYS[name]])
    stream = family[name]
    if stream.is_saliency:
        return stage1_train(stream, data, _schedule(1, config.stage1_epochs, config), rng, val=val)
    return stage2_train(stream, family["where"], data, _schedule(2, config.stage2_epochs, config), rng, val=val)


def fit_joint(family, data, config=FamilyConfig(), val=None):
    """Joint fine-tuning of the where and what streams on the first scenes of ``data``."""
    rng = np.random.default_rng([config.seed, 99])
    sub = data.subset(np.arange(min(len(data), config.stage3_scenes)))
    return stage3_train(family["where"], family["what"], sub, _schedule(3, config.stage3_epochs, config),
                        rng, val=val, stage1_done=True, stage2_done=True)


def train_family(data, config=FamilyConfig(), val=None, histories=None):
    """Train where/what (all three stages) and, optionally, both control streams.

    control_a is fit like the where stream, control_b like the what stream on
    the where stream's fixations.  Returns name -> Stream.
    """
    names = ["where", "what"] + (["control_a", "control_b"] if config.controls else [])
    family = {name: make_member(name, config) for name in names}
    hist = {} if histories is None else histories
    hist["where"] = fit_member("where", family, data, config, val)
    hist["what"] = fit_member("what", family, data, config, val)
    # controls see the stage-1 where stream, as in the command-line pipeline
    for name in names[2:]:
        hist[name] = fit_member(name, family, data, config)
    if config.stage3_epochs:
        hist["joint"] = fit_joint(family, data, config)
    return family


# ---------------------------------------------------------------------------
# comparisons against a teacher brain
# ---------------------------------------------------------------------------

def roi_points(r_where, r_what, roi, labels):
    """Per-ROI (mean r_what, mean r_where) points plus each ROI's label."""
    pts, lab = [], []
    for k in np.unique(roi):
        m = roi == k
        if labels[m][0] == "noise":
            continue
        pts.append((float(np.mean(r_what[m])), float(np.mean(r_where[m]))))
        lab.append(labels[m][0])
    return np.array(pts), np.array(lab)


@dataclass
class CombinationRow:
    combination: int
    where_role: str
    what_role: str
    separability: float
    median_p_where_dorsal: float
    median_p_where_ventral: float


@dataclass
class AblationResult:
    rows: list
    results: dict                 # combination -> EncodingResult (learned fixations)
    random_results: EncodingResult  # combination 5 with random fixations
    delta_where: np.ndarray
    delta_what: np.ndarray
    labels: np.ndarray
    roi: np.ndarray
    stream_r: dict = field(default_factory=dict)

    def row(self, combination):
        return next(r for r in self.rows if r.combination == combination)


def _median_defined(x):
    x = x[np.isfinite(x)]
    return float(np.median(x)) if len(x) else float("nan")


def run_ablation(family, session, config=EncodingConfig(), seed=0, combinations=COMBINATIONS):
    """Encode the teacher brain with every pairing and both fixation modes.

    All pairings share the where stream's learned fixation trace; the random
    trace is shared likewise.
    """
    movie, brain = session.movie, session.brain
    traces = {"learned": fixation_trace(movie, family["where"], "learned", seed=seed),
              "random": fixation_trace(movie, None, "random", seed=seed)}
    config = EncodingConfig(**{**config.__dict__, "scan": session.scan})
    fits = {}

    def fit(name, mode):
        if (name, mode) not in fits:
            feats = stream_features(family[name], movie, traces[mode])
            tag = STREAM_TAGS[name] + (10 if mode == "random" else 0)
            fits[name, mode] = encode_stream(feats, brain.voxels, movie.frame_rate, config, stream_tag=tag)
            log.info("encoded %s (%s): median r %.3f", name, mode, float(np.median(fits[name, mode].r)))
        return fits[name, mode]

    rows, results = [], {}
    for cid, (wr, hr) in sorted(combinations.items()):
        fw, fh = fit(wr, "learned"), fit(hr, "learned")
        res = EncodingResult(fw.r, fh.r, fw.p_values, fh.p_values, fw.fdr, fh.fdr)
        pts, _ = roi_points(res.r_where, res.r_what, brain.roi, brain.labels)
        rows.append(CombinationRow(
            cid, wr, hr, separability(pts),
            _median_defined(res.p_where[brain.labels == "dorsal"]),
            _median_defined(res.p_where[brain.labels == "ventral"])))
        results[cid] = res
    rw, rh = fit("where", "random"), fit("what", "random")
    random_res = EncodingResult(rw.r, rh.r, rw.p_values, rh.p_values, rw.fdr, rh.fdr)
    return AblationResult(
        rows, results, random_res,
        delta_where=fit("where", "learned").r - rw.r,
        delta_what=fit("what", "learned").r - rh.r,
        labels=brain.labels, roi=brain.roi,
        stream_r={f"{n}/{m}": f.r for (n, m), f in fits.items()})
