"""The three-stage curriculum: where stream, what stream, then both end to end."""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .fixation import run_fixation_loop
from .nn import Adam
from .scenes import retinal_saliency_target

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    pass


class MissingCheckpoint(RuntimeError):
    pass


@dataclass
class TrainSchedule:
    stage: int
    lr: float
    betas: tuple = (0.9, 0.99)
    epochs: int = 1
    batch_size: int = 32
    num_fixations: int = 8
    loss_weights: tuple = (1.0, 1.0)  # (saliency, recognition)

    @classmethod
    def full(cls, stage):
        lr, epochs = {1: (0.002, 25), 2: (0.002, 40), 3: (0.0002, 25)}[stage]
        return cls(stage=stage, lr=lr, epochs=epochs)

    @classmethod
    def desk(cls, stage, epochs=None, batch_size=32):
        s = cls.full(stage)
        s.epochs = {1: 6, 2: 4, 3: 1}[stage] if epochs is None else epochs
        s.batch_size = batch_size
        return s


@dataclass
class History:
    rows: list = field(default_factory=list)

    def add(self, **row):
        self.rows.append(row)
        log.info("  ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))

    def column(self, key):
        return [r[key] for r in self.rows if key in r]


def _check(loss, what):
    v = float(loss.data)
    if not math.isfinite(v):
        raise TrainingDivergence(f"{what} loss became {v}")
    return v


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[s:s + size] for s in range(0, n, size)]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def macro_f1(y_true, y_pred):
    """Mean over classes of per-class F1; a class absent from both scores 1."""
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    tp = (y_true & y_pred).sum(axis=0)
    fp = (~y_true & y_pred).sum(axis=0)
    fn = (y_true & ~y_pred).sum(axis=0)
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 1.0)
    return float(f1.mean())


def saliency_kl(pred, target, eps=1e-8):
    """Mean KL(target || pred) over a batch of maps."""
    p = np.asarray(pred, dtype=np.float64).reshape(len(pred), -1)
    t = np.asarray(target, dtype=np.float64).reshape(len(target), -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(t > 0, t * np.log(t / (p + eps)), 0.0)
    return float(terms.sum(axis=1).mean())


def saliency_cc(pred, target):
    p = np.asarray(pred, dtype=np.float64).reshape(len(pred), -1)
    t = np.asarray(target, dtype=np.float64).reshape(len(target), -1)
    p = p - p.mean(axis=1, keepdims=True)
    t = t - t.mean(axis=1, keepdims=True)
    den = np.sqrt((p * p).sum(axis=1) * (t * t).sum(axis=1))
    return float(np.mean(np.where(den > 0, (p * t).sum(axis=1) / np.where(den > 0, den, 1), 0.0)))


def random_fixations(n, rng):
    """Uniform fixations over the image."""
    return rng.uniform(0.0, 1.0, size=(n, 2))


def saliency_validation(where, data, fixations, batch_size=64):
    """KL and CC of the where stream's maps at given fixations."""
    where.eval()
    preds, targets = [], []
    with T.no_grad():
        for s in range(0, len(data), batch_size):
            idx = slice(s, s + batch_size)
            feats = where.backbone(where.retina(data.images[idx], fixations[idx]))
            preds.append(where.where_head(feats[2], feats[3]).data)
            targets.append(retinal_saliency_target(data.density[idx], fixations[idx], where.a))
    p, t = np.concatenate(preds), np.concatenate(targets)
    return saliency_kl(p, t), saliency_cc(p, t)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage1_train(where, data, schedule, rng, val=None, history=None, val_seed=12345):
    """Fit the where stream's saliency head at uniformly random fixations."""
    history = History() if history is None else history
    params = where.parameters()
    opt = Adam(params, lr=schedule.lr, betas=schedule.betas)
    val_fix = None
    if val is not None:
        val_fix = random_fixations(len(val), np.random.default_rng(val_seed))
        kl, cc = saliency_validation(where, val, val_fix)
        history.add(stage=1, epoch=0, train_loss=float("nan"), val_kl=kl, val_cc=cc)
    for epoch in range(1, schedule.epochs + 1):
        where.train()
        losses = []
        for idx in _batches(len(data), schedule.batch_size, rng):
            fix = random_fixations(len(idx), rng)
            target = retinal_saliency_target(data.density[idx], fix, where.a)
            feats = where.backbone(where.retina(data.images[idx], fix))
            loss = T.kl_saliency_loss(where.where_head(feats[2], feats[3]), target)
            losses.append(_check(loss, "saliency"))
            opt.zero_grad()
            loss.backward()
            opt.step()
        row = dict(stage=1, epoch=epoch, train_loss=float(np.mean(losses)))
        if val is not None:
            row["val_kl"], row["val_cc"] = saliency_validation(where, val, val_fix)
        history.add(**row)
    where.eval()
    return history


def _recognition_loss(rep_steps, labels):
    losses = [T.bce_multilabel_loss(r.logits, labels) for r in rep_steps]
    total = losses[0]
    for l in losses[1:]:
        total = T.add(total, l)
    return T.scale(total, 1.0 / len(losses))


def stage2_train(what, where, data, schedule, rng, val=None, history=None, val_seed=23456):
    """Fit the what stream on fixation sequences chosen by the frozen where stream.

    The recognition loss is averaged over every step of the sequence.
    """
    history = History() if history is None else history
    where.eval()
    opt = Adam(what.parameters(), lr=schedule.lr, betas=schedule.betas)
    if val is not None:
        history.add(stage=2, epoch=0, train_loss=float("nan"),
                    val_f1=evaluate(where, what, val, np.random.default_rng(val_seed),
                                    schedule.num_fixations)["macro_f1"])
    for epoch in range(1, schedule.epochs + 1):
        what.train()
        losses = []
        for idx in _batches(len(data), schedule.batch_size, rng):
            _, _, _, reps = run_fixation_loop(data.images[idx], where, what,
                                              n=schedule.num_fixations, mode="learned", rng=rng)
            loss = _recognition_loss(reps, data.labels[idx])
            losses.append(_check(loss, "recognition"))
            opt.zero_grad()
            loss.backward()
            opt.step()
        row = dict(stage=2, epoch=epoch, train_loss=float(np.mean(losses)))
        if val is not None:
            row["val_f1"] = evaluate(where, what, val, np.random.default_rng(val_seed),
                                     schedule.num_fixations)["macro_f1"]
        history.add(**row)
    what.eval()
    return history


def stage3_train(where, what, data, schedule, rng, val=None, history=None,
                 stage1_done=False, stage2_done=False, val_seed=34567):
    """Fine-tune both streams end to end on the equally weighted joint loss."""
    if not (stage1_done and stage2_done):
        raise MissingCheckpoint("stage 3 needs the stage 1 and stage 2 checkpoints")
    history = History() if history is None else history
    w_sal, w_rec = schedule.loss_weights
    opt = Adam(where.parameters() + what.parameters(), lr=schedule.lr, betas=schedule.betas)
    for epoch in range(1, schedule.epochs + 1):
        where.train()
        what.train()
        losses = []
        for idx in _batches(len(data), schedule.batch_size, rng):
            traces, _, sals, reps = run_fixation_loop(
                data.images[idx], where, what, n=schedule.num_fixations, mode="learned",
                rng=rng, where_grad=True)
            fix = np.stack([t.fixations for t in traces], axis=1)  # (steps, B, 2)
            sal_terms = [T.kl_saliency_loss(s, retinal_saliency_target(data.density[idx], fix[k], where.a))
                         for k, s in enumerate(sals)]
            sal_loss = sal_terms[0]
            for term in sal_terms[1:]:
                sal_loss = T.add(sal_loss, term)
            sal_loss = T.scale(sal_loss, 1.0 / len(sal_terms))
            loss = T.add(T.scale(sal_loss, w_sal), T.scale(_recognition_loss(reps, data.labels[idx]), w_rec))
            losses.append(_check(loss, "joint"))
            opt.zero_grad()
            loss.backward()
            opt.step()
        row = dict(stage=3, epoch=epoch, train_loss=float(np.mean(losses)))
        if val is not None:
            m = evaluate(where, what, val, np.random.default_rng(val_seed), schedule.num_fixations)
            row.update(val_f1=m["macro_f1"], val_kl=m["saliency_kl"])
        history.add(**row)
    where.eval()
    what.eval()
    return history


def evaluate(where, what, data, rng, n_fixations=8, batch_size=64):
    """Macro-F1 of the final logits plus saliency KL / CC along the learned loop."""
    where.eval()
    what.eval()
    preds, kls, ccs = [], [], []
    with T.no_grad():
        for s in range(0, len(data), batch_size):
            idx = np.arange(s, min(len(data), s + batch_size))
            traces, rep, sals, _ = run_fixation_loop(data.images[idx], where, what,
                                                     n=n_fixations, mode="learned", rng=rng)
            preds.append(rep.logits.data > 0)
            fix = np.stack([t.fixations for t in traces], axis=1)
            for k, sal in enumerate(sals):
                target = retinal_saliency_target(data.density[idx], fix[k], where.a)
                kls.append(saliency_kl(sal.data, target) * len(idx))
                ccs.append(saliency_cc(sal.data, target) * len(idx))
    n = len(data) * len(sals)
    return {
        "macro_f1": macro_f1(data.labels, np.concatenate(preds)),
        "saliency_kl": float(np.sum(kls) / n),
        "saliency_cc": float(np.sum(ccs) / n),
    }
