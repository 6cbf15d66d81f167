"""Run configuration: hyperparameters, ablation switches, data and output paths."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields

from .cell import VariantFlags


@dataclass
class RunConfig:
    # model
    layers: int = 4
    hidden: int = 64
    encoder_depth: int = 2
    kernel: int = 5
    tau: int = 5
    theta: int = 5
    gamma: float = 0.0
    use_tam: bool = True
    use_sam: bool = True
    temporal_supervision: str = "cross"
    spatial_supervision: str = "cross"
    per_location_scores: bool = False
    # optimizer: Adam with the usual defaults, constant learning rate
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # training
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    train_mode: str = "teacher_forced"
    log_every: int = 1
    checkpoint_every: int = 500
    # data
    canvas: int = 64
    frame_channels: int = 1
    seq_len: int = 20
    sprites: int = 2
    sprite: str = "mnist"
    sprite_size: int = 4
    velocity_min: float = 1.0
    velocity_max: float = 3.0
    train_sequences: int = 10000
    eval_sequences: int = 100
    data_seed: int = 1234
    eval_data_seed: int = 4321
    dataset: str = ""
    mnist_images: str = ""
    mnist_labels: str = ""
    composite: str = "max"
    # evaluation
    cond_len: int = 10
    horizon: int = 10
    out: str = "runs/stau"

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ("layers", "hidden", "encoder_depth", "kernel", "tau", "theta", "batch_size",
                    "canvas", "frame_channels", "seq_len", "sprites", "sprite_size",
                    "train_sequences", "eval_sequences", "cond_len", "horizon", "log_every",
                    "checkpoint_every")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd for same-size hidden convolutions")
        if self.train_mode not in ("teacher_forced", "closed_loop"):
            raise ValueError("train_mode must be teacher_forced or closed_loop")
        if self.composite not in ("max", "add"):
            raise ValueError("composite must be max or add")
        if self.cond_len + self.horizon > self.seq_len:
            raise ValueError("cond_len + horizon exceeds seq_len")
        if self.canvas % (2 ** self.encoder_depth):
            raise ValueError("canvas must be divisible by 2**encoder_depth")
        self.flags  # validates supervision names

    @property
    def flags(self) -> VariantFlags:
        return VariantFlags(self.use_tam, self.use_sam, self.temporal_supervision,
                            self.spatial_supervision, self.per_location_scores)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    # human-readable "key = value" file ----------------------------------

    def dumps(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def parse(cls, text, base=None):
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
            values[key] = coerce(types[key], val)
        return base.replace(**values)

    @classmethod
    def load(cls, path, base=None):
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read(), base)


def coerce(typ, text):
    if typ is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if typ is str:
        return text.strip('"')
    return typ(text)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


PRESETS = {
    # Moving MNIST settings: 4 layers, 64 channels, 2 down/up-sampling layers, gamma 0, 10 -> 10
    "mnist": RunConfig(),
    # desk-scale toy: one 4x4 square bouncing on a 16x16 canvas
    "toy": RunConfig(layers=2, hidden=16, encoder_depth=1, tau=3, theta=3, gamma=0.0,
                     canvas=16, seq_len=10, sprites=1, sprite="rect", sprite_size=4,
                     velocity_min=1.0, velocity_max=2.0, train_sequences=8, eval_sequences=8,
                     batch_size=8, steps=2000, cond_len=5, horizon=5, log_every=1,
                     checkpoint_every=500, out="runs/toy"),
}


def preset(name) -> RunConfig:
    try:
        return PRESETS[name].replace()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
