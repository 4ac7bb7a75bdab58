"""Command-line entry point: train, simulate, encode, ablate, report.

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 missing checkpoint.
"""
import argparse
import configparser
import csv
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, tnsr
from .analysis import FamilyConfig, fit_joint, fit_member, make_member, run_ablation
from .encoding import EncodingConfig, EncodingError, EncodingResult, ScanParams, run_encoding
from .fixation import apply_ior, run_fixation_loop
from .pnm import fixation_overlay, normalise, write_pgm, write_ppm
from .scenes import SceneConfig, make_scene_set
from .streams import CANONICAL, ConfigError
from .synthbrain import MovieConfig, SynthBrainError, fixation_trace, simulate_session, stream_features
from .training import History, MissingCheckpoint, TrainingDivergence


EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    command: str
    seed: int
    widths: tuple
    out: Path
    threads: int = 1
    num_classes: int = 4
    train_scenes: int = 2000
    val_scenes: int = 200
    stage1_epochs: int = 2
    stage2_epochs: int = 3
    stage3_epochs: int = 1
    stage3_scenes: int = 256
    batch_size: int = 32
    stage3_batch_size: int = 16
    teacher_widths: tuple = (12, 24, 48, 96)
    teacher_seed: int = 7
    movie_scenes: int = 150
    snr: float = 2.0
    voxels_per_class: int = 40
    noise_voxels: int = 0
    tr: float = 2.5
    n_perm: int = 1000
    q: float = 0.05
    images: int = 4
    config_text: str = ""
    extra: dict = field(default_factory=dict)

    def family(self, teacher=False):
        return FamilyConfig(widths=self.teacher_widths if teacher else self.widths,
                            seed=self.teacher_seed if teacher else self.seed,
                            stage1_epochs=self.stage1_epochs, stage2_epochs=self.stage2_epochs,
                            stage3_epochs=self.stage3_epochs, stage3_scenes=self.stage3_scenes,
                            batch_size=self.batch_size, stage3_batch_size=self.stage3_batch_size,
                            controls=not teacher)

    def encoding(self):
        return EncodingConfig(scan=ScanParams(tr=self.tr), n_perm=self.n_perm, q=self.q,
                              seed=self.seed, threads=self.threads)

    def movie(self):
        return MovieConfig(n_scenes=self.movie_scenes, seed=self.seed,
                           scene=SceneConfig(num_classes=self.num_classes))


# (section, key, type, RunConfig field); required keys have no default
_KEYS = [
    ("run", "seed", int, "seed"),
    ("run", "widths", "ints", "widths"),
    ("run", "num_classes", int, "num_classes"),
    ("data", "train_scenes", int, "train_scenes"),
    ("data", "val_scenes", int, "val_scenes"),
    ("train", "stage1_epochs", int, "stage1_epochs"),
    ("train", "stage2_epochs", int, "stage2_epochs"),
    ("train", "stage3_epochs", int, "stage3_epochs"),
    ("train", "stage3_scenes", int, "stage3_scenes"),
    ("train", "batch_size", int, "batch_size"),
    ("train", "stage3_batch_size", int, "stage3_batch_size"),
    ("teacher", "widths", "ints", "teacher_widths"),
    ("teacher", "seed", int, "teacher_seed"),
    ("brain", "movie_scenes", int, "movie_scenes"),
    ("brain", "snr", float, "snr"),
    ("brain", "voxels_per_class", int, "voxels_per_class"),
    ("brain", "noise_voxels", int, "noise_voxels"),
    ("encoding", "tr", float, "tr"),
    ("encoding", "n_perm", int, "n_perm"),
    ("encoding", "q", float, "q"),
    ("simulate", "images", int, "images"),
]
REQUIRED = {("run", "seed"), ("run", "widths")}


def _convert(kind, text, where):
    try:
        if kind == "ints":
            return tuple(int(v) for v in text.split(","))
        return kind(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r}") from None


def load_run_config(path, command, out, seed=None, threads=1):
    """Read the INI file; ``seed`` (or DUOSTREAM_SEED) overrides [run] seed."""
    if path is None or not Path(path).is_file():
        raise ConfigError(f"config file not found: {path}")
    text = Path(path).read_text()
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {}
    for section, key, kind, attr in _KEYS:
        if cp.has_option(section, key):
            values[attr] = _convert(kind, cp.get(section, key), f"[{section}] {key}")
        elif (section, key) in REQUIRED:
            raise ConfigError(f"missing required key [{section}] {key}")
    env = os.environ.get("DUOSTREAM_SEED")
    if env is not None:
        values["seed"] = _convert(int, env, "DUOSTREAM_SEED")
    if seed is not None:
        values["seed"] = seed
    if threads < 1:
        raise ConfigError("--threads must be at least 1")
    cfg = RunConfig(command=command, out=Path(out), threads=threads, config_text=text, **values)
    try:
        make_member("where", cfg.family())  # validates widths
        make_member("where", cfg.family(teacher=True))
    except ConfigError as exc:
        raise ConfigError(f"[run]/[teacher] widths: {exc}") from None
    if not cfg.snr > 0:
        raise ConfigError("[brain] snr must be positive")
    return cfg


def write_manifest(cfg, extra=None):
    import numba
    import scipy

    manifest = {
        "command": cfg.command,
        "seed": cfg.seed,
        "threads": cfg.threads,
        "config": cfg.config_text,
        "versions": {"duostream": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__},
    }
    manifest.update(extra or {})
    (cfg.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return "nan" if not np.isfinite(v) else f"{float(v):.10g}"
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_history(path, history):
    keys = []
    for row in history.rows:
        keys += [k for k in row if k not in keys]
    write_csv(path, keys, [[row.get(k, "") for k in keys] for row in history.rows])


def _ckpt(dirs, name):
    for d in dirs:
        p = Path(d) / name
        if p.is_file():
            return p
    return None


def _require(dirs, *names, what):
    for name in names:
        p = _ckpt(dirs, name)
        if p is not None:
            return p
    raise MissingCheckpoint(f"{what} needs {' or '.join(names)} in {', '.join(str(d) for d in dirs)}")


def _load(name, cfg, dirs, files, teacher=False):
    stream = make_member(name, cfg.family(teacher))
    return stream.load(_require(dirs, *files, what=f"{cfg.command} ({name})"))


def load_family(cfg, dirs, controls=False):
    fam = {"where": _load("where", cfg, dirs, ["where_s3.tnsr", "where_s1.tnsr"]),
           "what": _load("what", cfg, dirs, ["what_s3.tnsr", "what_s2.tnsr"])}
    if controls:
        fam["control_a"] = _load("control_a", cfg, dirs, ["control_a.tnsr"])
        fam["control_b"] = _load("control_b", cfg, dirs, ["control_b.tnsr"])
    return fam


def load_teachers(cfg, dirs):
    return (_load("where", cfg, dirs, ["teacher_where.tnsr"], teacher=True),
            _load("what", cfg, dirs, ["teacher_what.tnsr"], teacher=True))


def _data(cfg):
    sc = SceneConfig(num_classes=cfg.num_classes)
    return make_scene_set(cfg.train_scenes, 10 * cfg.seed + 1, sc), make_scene_set(cfg.val_scenes, 10 * cfg.seed + 2, sc)


def _session(cfg, dirs):
    tw, th = load_teachers(cfg, dirs)
    return simulate_session(tw, th, cfg.movie(), ScanParams(tr=cfg.tr), cfg.voxels_per_class, cfg.snr,
                            cfg.seed, n_noise=cfg.noise_voxels)


def write_voxel_table(path, brain):
    write_csv(path, ["voxel_id", "label", "roi"],
              [[v, brain.labels[v], int(brain.roi[v])] for v in range(brain.n_voxels)])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg, args):
    dirs = [cfg.out] + list(args.checkpoints or [])
    data, val = _data(cfg)
    stages = ["1", "2", "3", "controls", "teacher"] if args.stage == "all" else [args.stage]
    for stage in stages:
        if stage == "teacher":
            tcfg = cfg.family(teacher=True)
            fam = {"where": make_member("where", tcfg), "what": make_member("what", tcfg)}
            h = History()
            for name in ("where", "what"):
                h.rows += fit_member(name, fam, data, tcfg).rows
            if tcfg.stage3_epochs:
                h.rows += fit_joint(fam, data, tcfg).rows
            fam["where"].save(cfg.out / "teacher_where.tnsr")
            fam["what"].save(cfg.out / "teacher_what.tnsr")
            write_history(cfg.out / "metrics_teacher.csv", h)
        elif stage == "1":
            fam = {"where": make_member("where", cfg.family())}
            h = fit_member("where", fam, data, cfg.family(), val)
            fam["where"].save(cfg.out / "where_s1.tnsr")
            write_history(cfg.out / "metrics_stage1.csv", h)
        elif stage == "2":
            fam = {"where": _load("where", cfg, dirs, ["where_s1.tnsr"]), "what": make_member("what", cfg.family())}
            h = fit_member("what", fam, data, cfg.family(), val)
            fam["what"].save(cfg.out / "what_s2.tnsr")
            write_history(cfg.out / "metrics_stage2.csv", h)
        elif stage == "3":
            fam = {"where": _load("where", cfg, dirs, ["where_s1.tnsr"]),
                   "what": _load("what", cfg, dirs, ["what_s2.tnsr"])}
            h = fit_joint(fam, data, cfg.family(), val)
            fam["where"].save(cfg.out / "where_s3.tnsr")
            fam["what"].save(cfg.out / "what_s3.tnsr")
            write_history(cfg.out / "metrics_stage3.csv", h)
        elif stage == "controls":
            fam = {"where": _load("where", cfg, dirs, ["where_s1.tnsr"]),
                   "control_a": make_member("control_a", cfg.family()),
                   "control_b": make_member("control_b", cfg.family())}
            h = History()
            for name in ("control_a", "control_b"):
                h.rows += [dict(stream=name, **r) for r in fit_member(name, fam, data, cfg.family()).rows]
                fam[name].save(cfg.out / f"{name}.tnsr")
            write_history(cfg.out / "metrics_controls.csv", h)
    write_manifest(cfg, {"stage": args.stage})


def cmd_simulate(cfg, args):
    dirs = [cfg.out] + list(args.checkpoints or [])
    fam = load_family(cfg, dirs)
    scenes = make_scene_set(cfg.images, 10 * cfg.seed + 3, SceneConfig(num_classes=cfg.num_classes))
    rng = np.random.default_rng([cfg.seed, 5])
    traces, _, _, _ = run_fixation_loop(scenes.images, fam["where"], fam["what"], n=8, mode=args.mode, rng=rng)
    for i, tr in enumerate(traces):
        stem = cfg.out / f"image{i:03d}_{args.mode}"
        first = tr.saliency[0]
        write_pgm(f"{stem}_saliency.pgm", normalise(first))
        last_ior = tr.ior[-1] if tr.ior else np.ones_like(first)
        write_pgm(f"{stem}_ior.pgm", normalise(apply_ior(tr.saliency[-1], last_ior)))
        overlay, _ = fixation_overlay(scenes.images[i], tr.fixations)
        write_ppm(f"{stem}_overlay.ppm", overlay)
        write_csv(f"{stem}_trace.csv", ["step", "x", "y"],
                  [[k + 1, float(x), float(y)] for k, (x, y) in enumerate(tr.fixations)])
    write_manifest(cfg, {"mode": args.mode})


def cmd_encode(cfg, args):
    dirs = [cfg.out] + list(args.checkpoints or [])
    fam = load_family(cfg, dirs)
    session = _session(cfg, dirs)
    movie = session.movie
    fix = fixation_trace(movie, fam["where"], "learned", seed=cfg.seed)
    fw = stream_features(fam["where"], movie, fix)
    fh = stream_features(fam["what"], movie, fix)
    tnsr.save(cfg.out / "features_where.tnsr", fw)
    tnsr.save(cfg.out / "features_what.tnsr", fh)
    tnsr.save(cfg.out / "voxels.tnsr", {"voxels": session.brain.voxels})
    ecfg = cfg.encoding()
    ecfg = EncodingConfig(**{**ecfg.__dict__, "scan": session.scan})
    res = run_encoding(fw, fh, session.brain.voxels, movie.frame_rate, ecfg)
    res.to_csv(cfg.out / "encoding_results.csv")
    write_voxel_table(cfg.out / "voxels.csv", session.brain)
    write_csv(cfg.out / "fixations.csv", ["frame", "x", "y"],
              [[t, float(x), float(y)] for t, (x, y) in enumerate(fix)])
    write_roi_report(cfg.out / "report.csv", res, session.brain.labels, session.brain.roi)
    write_manifest(cfg)


def write_roi_report(path, res, labels, roi):
    rows = []
    for k in np.unique(roi):
        m = roi == k
        pw = res.p_where[m]
        pw = pw[np.isfinite(pw)]
        rows.append([int(k), labels[m][0], int(m.sum()), float(np.mean(res.r_where[m])),
                     float(np.mean(res.r_what[m])), float(np.median(pw)) if len(pw) else float("nan"),
                     float(np.mean(res.fdr_where[m])), float(np.mean(res.fdr_what[m]))])
    write_csv(path, ["roi", "label", "n_voxels", "mean_r_where", "mean_r_what", "median_p_where",
                     "fdr_rate_where", "fdr_rate_what"], rows)


def cmd_ablate(cfg, args):
    dirs = [cfg.out] + list(args.checkpoints or [])
    fam = load_family(cfg, dirs, controls=True)
    session = _session(cfg, dirs)
    res = run_ablation(fam, session, cfg.encoding(), seed=cfg.seed)
    rows = []
    for r in res.rows:
        wv, wo = CANONICAL[r.where_role]
        hv, ho = CANONICAL[r.what_role]
        rows.append([r.combination, r.where_role, wv, wo, r.what_role, hv, ho, r.separability,
                     r.median_p_where_dorsal, r.median_p_where_ventral])
    write_csv(cfg.out / "ablation.csv",
              ["combination", "where_role", "where_view", "where_objective", "what_role", "what_view",
               "what_objective", "separability", "median_p_where_dorsal", "median_p_where_ventral"], rows)
    lw, lh = res.results[5].r_where, res.results[5].r_what
    rw, rh = res.random_results.r_where, res.random_results.r_what
    write_csv(cfg.out / "delta_r.csv",
              ["voxel_id", "label", "roi", "r_where_learned", "r_where_random", "delta_r_where",
               "r_what_learned", "r_what_random", "delta_r_what"],
              [[v, res.labels[v], int(res.roi[v]), lw[v], rw[v], res.delta_where[v], lh[v], rh[v],
                res.delta_what[v]] for v in range(len(lw))])
    res.results[5].to_csv(cfg.out / "encoding_results.csv")
    write_voxel_table(cfg.out / "voxels.csv", session.brain)
    write_manifest(cfg)


def cmd_report(cfg, args):
    src = Path(args.input) if args.input else cfg.out
    for name in ("encoding_results.csv", "voxels.csv"):
        if not (src / name).is_file():
            raise MissingCheckpoint(f"report needs {name} in {src}")
    res = EncodingResult.from_csv(src / "encoding_results.csv")
    vox = read_csv(src / "voxels.csv")
    labels = np.array([v["label"] for v in vox])
    roi = np.array([int(v["roi"]) for v in vox])
    write_csv(cfg.out / "scatter.csv", ["voxel_id", "label", "roi", "r_what", "r_where"],
              [[int(res.voxel_ids[i]), labels[i], int(roi[i]), res.r_what[i], res.r_where[i]]
               for i in range(len(labels))])
    write_roi_report(cfg.out / "roi_scatter.csv", res, labels, roi)
    lines = ["# Encoding summary", "", f"voxels: {len(labels)}", ""]
    lines += ["| label | voxels | median r_where | median r_what | median p_where | FDR pass (where/what) |",
              "|---|---|---|---|---|---|"]
    for lab in sorted(set(labels)):
        m = labels == lab
        pw = res.p_where[m]
        pw = pw[np.isfinite(pw)]
        lines.append(f"| {lab} | {m.sum()} | {np.median(res.r_where[m]):.4f} | {np.median(res.r_what[m]):.4f} | "
                     f"{(np.median(pw) if len(pw) else float('nan')):.4f} | "
                     f"{res.fdr_where[m].mean():.3f} / {res.fdr_what[m].mean():.3f} |")
    if (src / "ablation.csv").is_file():
        lines += ["", "## Stream pairings", "", "| combination | where role | what role | separability |",
                  "|---|---|---|---|"]
        for row in read_csv(src / "ablation.csv"):
            lines.append(f"| {row['combination']} | {row['where_role']} | {row['what_role']} | "
                         f"{float(row['separability']):.4f} |")
    (cfg.out / "summary.md").write_text("\n".join(lines) + "\n")
    write_manifest(cfg, {"input": str(src)})


COMMANDS = {"train": cmd_train, "simulate": cmd_simulate, "encode": cmd_encode,
            "ablate": cmd_ablate, "report": cmd_report}


def build_parser():
    p = argparse.ArgumentParser(prog="duostream", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="INI configuration file")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--checkpoints", action="append", help="extra directory to search for checkpoints")
        if name == "train":
            s.add_argument("--stage", default="all", choices=["1", "2", "3", "controls", "teacher", "all"])
        if name == "simulate":
            s.add_argument("--mode", default="learned", choices=["learned", "random"])
        if name == "report":
            s.add_argument("--input", default=None, help="directory holding encode/ablate outputs")
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.command, args.out, args.seed, args.threads)
        cfg.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingCheckpoint as exc:
        print(f"missing checkpoint: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDivergence, EncodingError, SynthBrainError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
