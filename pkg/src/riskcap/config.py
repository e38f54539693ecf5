"""Run configuration: every knob of a pipeline run, JSON round-trippable."""

import hashlib
import json
from dataclasses import asdict, dataclass, fields

from .regressor import VISUAL_SOURCES

TEXT_SOURCES = ("embedding", "hidden")
CAPTION_SOURCES = ("ground-truth", "predicted")


@dataclass
class RunConfig:
    seed: int = 0
    n_scenes: int = 1000
    split: tuple = (0.7, 0.15, 0.15)
    # dims
    c: int = 64
    d_lm: int = 128
    q: int = 8
    heads: int = 8
    lm_blocks: int = 4
    reg_layers: int = 6
    lo_channels: int = 96
    hi_channels: int = 48
    context: int = 128
    # stage 1
    lr1: float = 5e-4
    halve_every: int = 3
    epochs1: int = 12
    batch1: int = 8
    clip_norm: float = 1.0
    # stage 2
    lr2: float = 1e-4
    epochs2: int = 40
    batch2: int = 8
    # ablations
    use_lo: bool = True
    use_hi: bool = True
    use_gate: bool = True
    regression_input: str = "lo-grid"
    text_source: str = "embedding"
    stage2_captions: str = "ground-truth"
    # evaluation
    max_decode: int = 64
    small_area: float = 0.01
    large_area: float = 0.1
    kernels: str = None  # None keeps the process default backend
    data: str = None  # existing scenes.jsonl to use instead of data/

    def __post_init__(self):
        self.split = tuple(self.split)
        self.validate()

    def validate(self):
        if not (self.use_lo or self.use_hi):
            raise ValueError("at least one of use_lo / use_hi must be on")
        if self.regression_input not in VISUAL_SOURCES:
            raise ValueError(f"regression_input must be one of {VISUAL_SOURCES}")
        if self.text_source not in TEXT_SOURCES:
            raise ValueError(f"text_source must be one of {TEXT_SOURCES}")
        if self.stage2_captions not in CAPTION_SOURCES:
            raise ValueError(f"stage2_captions must be one of {CAPTION_SOURCES}")
        if self.c % self.heads or self.d_lm % self.heads:
            raise ValueError("c and d_lm must be divisible by heads")
        if min(self.n_scenes, self.epochs1, self.epochs2, self.batch1, self.batch2, self.q) < 1:
            raise ValueError("counts must be positive")
        if self.kernels not in (None, "numpy", "numba"):
            raise ValueError("kernels must be numpy or numba")

    def to_dict(self):
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)


ABLATIONS = {
    "full": {},
    "no-lo": {"use_lo": False, "regression_input": "hi-grid"},
    "no-hi": {"use_hi": False},
    "concat": {"use_gate": False},
}
