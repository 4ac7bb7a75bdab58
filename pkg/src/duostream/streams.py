"""WhereCNN / WhatCNN and the two hybrid control streams.

A stream is defined by its view (retinal concentration) and its objective.
The four canonical pairings:

    ============  ======  ===========
    name          view    objective
    ============  ======  ===========
    where         wide    saliency
    what          narrow  recognition
    control_a     narrow  saliency
    control_b     wide    recognition
    ============  ======  ===========
"""
import configparser
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from . import tnsr
from .nn import BatchNorm2d, Conv2d, ConvBlock, GRUCell, Linear, Module
from .retina import WHAT_A, WHERE_A, retinal_view
from .tensor import Tensor

VIEWS = {"wide": WHERE_A, "narrow": WHAT_A}
OBJECTIVES = ("saliency", "recognition")
CANONICAL = {
    "where": ("wide", "saliency"),
    "what": ("narrow", "recognition"),
    "control_a": ("narrow", "saliency"),
    "control_b": ("wide", "recognition"),
}
FULL_WIDTHS = (64, 128, 256, 512)
DESK_WIDTHS = (16, 32, 64, 128)
SALIENCY_SIZE = 16
RETINA_SIZE = 64


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StreamConfig:
    view: str = "wide"
    objective: str = "saliency"
    widths: tuple = DESK_WIDTHS
    gru_hidden: int = 0  # 0 -> last block width
    num_classes: int = 4
    num_fixations: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ConfigError(f"view must be one of {sorted(VIEWS)}, got {self.view!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        widths = tuple(int(w) for w in self.widths)
        if len(widths) != 4 or any(w <= 0 for w in widths):
            raise ConfigError(f"widths must be four positive ints, got {self.widths}")
        if any(b <= a for a, b in zip(widths, widths[1:])):
            raise ConfigError(f"widths must be strictly increasing, got {widths}")
        object.__setattr__(self, "widths", widths)
        if self.gru_hidden == 0:
            object.__setattr__(self, "gru_hidden", widths[3])
        if self.gru_hidden < 0 or self.num_classes < 1 or self.num_fixations < 1:
            raise ConfigError("gru_hidden, num_classes and num_fixations must be positive")

    @property
    def a(self):
        return VIEWS[self.view]

    @property
    def kind(self):
        for name, pair in CANONICAL.items():
            if pair == (self.view, self.objective):
                return name
        raise AssertionError("unreachable")

    @classmethod
    def canonical(cls, name, **kw):
        try:
            view, objective = CANONICAL[name]
        except KeyError:
            raise ConfigError(f"unknown stream {name!r}; choose from {sorted(CANONICAL)}") from None
        return cls(view=view, objective=objective, **kw)

    def with_(self, **kw):
        return replace(self, **kw)


def config_from_section(section):
    """StreamConfig from an INI section (mapping of strings)."""
    kw = {}
    if "kind" in section:
        view, objective = CANONICAL.get(section["kind"], (None, None))
        if view is None:
            raise ConfigError(f"unknown stream kind {section['kind']!r}")
        kw.update(view=view, objective=objective)
    for key in ("view", "objective"):
        if key in section:
            kw[key] = section[key].strip()
    if "widths" in section:
        try:
            kw["widths"] = tuple(int(w) for w in section["widths"].split(","))
        except ValueError as exc:
            raise ConfigError(f"widths: {exc}") from None
    for key in ("gru_hidden", "num_classes", "num_fixations", "seed"):
        if key in section:
            try:
                kw[key] = int(section[key])
            except ValueError:
                raise ConfigError(f"{key} must be an integer, got {section[key]!r}") from None
    return StreamConfig(**kw)


def load_stream_config(path, section="stream"):
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read config {path}")
    if section not in cp:
        raise ConfigError(f"missing section [{section}] in {path}")
    return config_from_section(cp[section])


def dump_stream_config(config):
    return "\n".join([
        "[stream]",
        f"view = {config.view}",
        f"objective = {config.objective}",
        "widths = " + ",".join(str(w) for w in config.widths),
        f"gru_hidden = {config.gru_hidden}",
        f"num_classes = {config.num_classes}",
        f"num_fixations = {config.num_fixations}",
        f"seed = {config.seed}",
        "",
    ])


@dataclass
class SceneRepresentation:
    hidden: Tensor
    logits: Tensor = None
    steps: int = 0


class Stream(Module):
    """Backbone of four conv blocks plus the head selected by the objective."""

    def __init__(self, config):
        self.config = config
        rng = np.random.default_rng(config.seed)
        w = config.widths
        self.blocks = [ConvBlock(c_in, c_out, rng) for c_in, c_out in zip((3,) + w[:3], w)]
        if config.objective == "saliency":
            self.head_conv1 = Conv2d(w[2] + w[3], w[1], rng)
            self.head_bn = BatchNorm2d(w[1])
            self.head_conv2 = Conv2d(w[1], 1, rng)
        else:
            self.gru = GRUCell(w[3], config.gru_hidden, rng)
            self.fc = Linear(config.gru_hidden, config.num_classes, rng)

    @property
    def a(self):
        return self.config.a

    @property
    def is_saliency(self):
        return self.config.objective == "saliency"

    def retina(self, images, fixations):
        return retinal_view(images, fixations, self.a, RETINA_SIZE)

    def backbone(self, x):
        """All four block outputs for a (N,3,64,64) retinal batch."""
        if x.ndim != 4 or x.shape[2:] != (RETINA_SIZE, RETINA_SIZE):
            raise T.DimensionError(f"backbone expects (N,C,64,64) input, got {x.shape}")
        feats = []
        for k, block in enumerate(self.blocks):
            if k:
                x = T.maxpool2d(x)
            x = block(x)
            feats.append(x)
        return feats

    def where_head(self, block3, block4):
        """Saliency probability map (N,1,16,16) over retinal cells."""
        x = T.concat([T.resize_bilinear(block3, SALIENCY_SIZE),
                      T.resize_bilinear(block4, SALIENCY_SIZE)], axis=1)
        x = self.head_bn(T.relu(self.head_conv1(x)))
        return T.softmax2d(self.head_conv2(x))

    def init_state(self, n):
        return SceneRepresentation(hidden=Tensor(np.zeros((n, self.config.gru_hidden))))

    def what_head(self, block4, prev):
        hidden = self.gru(T.global_avg_pool(block4), prev.hidden)
        return SceneRepresentation(hidden=hidden, logits=self.fc(hidden), steps=prev.steps + 1)

    def save(self, path):
        tnsr.save(path, self.state_dict())

    def load(self, path):
        self.load_state_dict(tnsr.load(path))
        return self


def build_stream(config):
    return Stream(config)


def parameter_digest(module):
    """Stable hash of all parameters and buffers (used for freeze checks)."""
    import hashlib

    h = hashlib.sha256()
    for name, arr in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
