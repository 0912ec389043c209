"""Run configuration: one JSON document with a fixed set of sections.

Every key has a default; unknown keys and out-of-range values are rejected
with the JSON pointer of the offending entry.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from importlib import resources

from .attention import AttentionConfig
from .corpus import CorpusSpec
from .encoder import EncoderConfig
from .losses import LossConfig
from .training import TrainConfig

SEED_ENV = "VCSL_SEED"

DEFAULTS: dict = {
    "corpus": {
        "datasets": [100, 100],
        "slices": 16,
        "extent": 32,
        "classes": 4,
        "pattern": "texture",
        "noise": 0.05,
        "seed": 0,
    },
    "encoder": {
        "channels": [8, 16, 32, 64],
        "kernel": 3,
        "levels": 2,
        "level_width": 32,
        "embed_dim": 16,
    },
    "attention": {
        "heads": 2,
        "groups": 1,
        "blocks": 4,
        "downsample": 2,
        "ffn_mult": 2,
        "max_offset": None,
        "pyramid": True,
    },
    "losses": {
        "prototypes": 12,
        "separate_3d_prototypes": False,
        "tau": 0.1,
        "tau_3d": 0.3,
        "eps": 0.05,
        "sinkhorn_iters": 3,
        "sinkhorn_tol": 1e-3,
    },
    "mask": {
        "ratio": 0.10,
        "squared": False,
    },
    "train": {
        "epochs": [50, 50, 50],
        "slice_batch": 64,
        "volume_batch": 12,
        "lr": 0.05,
        "stage_lr": [None, None, 0.02],
        "joint_stage2": False,
        "strict": True,
        "seed": 0,
    },
    "probe": {
        "seed": 0,
        "epochs": 500,
        "lr": 0.5,
        "weight_decay": 1e-4,
    },
}

# optional top-level annotation, ignored by the loader
COMMENT_KEY = "$comment"


class ConfigError(ValueError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer}: {message}")
        self.pointer = pointer
        self.message = message


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _unit_interval(v):
    return 0 < v <= 1


def _probability(v):
    return 0 <= v <= 1


RULES = {
    "/corpus/datasets": ("a non-empty list of positive counts", lambda v: len(v) > 0 and all(c >= 1 for c in v)),
    "/corpus/slices": ("at least 4", lambda v: v >= 4),
    "/corpus/extent": ("at least 8", lambda v: v >= 8),
    "/corpus/classes": ("at least 2", lambda v: v >= 2),
    "/corpus/pattern": ("'texture' or 'constant'", lambda v: v in ("texture", "constant")),
    "/corpus/noise": ("non-negative", _non_negative),
    "/encoder/channels": ("a non-empty list of positive channel counts", lambda v: len(v) > 0 and min(v) > 0),
    "/encoder/kernel": ("a positive odd integer", lambda v: v > 0 and v % 2 == 1),
    "/encoder/levels": ("positive", _positive),
    "/encoder/level_width": ("a positive even integer", lambda v: v > 0 and v % 2 == 0),
    "/encoder/embed_dim": ("positive", _positive),
    "/attention/heads": ("positive", _positive),
    "/attention/groups": ("positive", _positive),
    "/attention/blocks": ("positive", _positive),
    "/attention/downsample": ("positive", _positive),
    "/attention/ffn_mult": ("positive", _positive),
    "/attention/max_offset": ("positive or null", lambda v: v is None or v > 0),
    "/losses/prototypes": ("positive", _positive),
    "/losses/tau": ("positive", _positive),
    "/losses/tau_3d": ("positive or null", lambda v: v is None or v > 0),
    "/losses/eps": ("positive", _positive),
    "/losses/sinkhorn_iters": ("non-negative", _non_negative),
    "/losses/sinkhorn_tol": ("non-negative", _non_negative),
    "/mask/ratio": ("in (0, 1]", _unit_interval),
    "/train/epochs": ("three non-negative epoch counts", lambda v: len(v) == 3 and min(v) >= 0),
    "/train/slice_batch": ("at least 2", lambda v: v >= 2),
    "/train/volume_batch": ("at least 2", lambda v: v >= 2),
    "/train/lr": ("non-negative", _non_negative),
    "/train/stage_lr": ("three learning rates (null = use lr)",
                        lambda v: len(v) == 3 and all(x is None or x >= 0 for x in v)),
    "/probe/epochs": ("positive", _positive),
    "/probe/lr": ("positive", _positive),
    "/probe/weight_decay": ("non-negative", _non_negative),
}

# keys whose default is null but which take a number when set
NULLABLE_NUMBERS = {"/attention/max_offset", "/losses/tau_3d"}


def _type_ok(value, default, pointer: str) -> bool:
    if pointer in NULLABLE_NUMBERS:
        return value is None or (isinstance(value, (int, float)) and not isinstance(value, bool))
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        if not isinstance(value, list):
            return False
        item = next((d for d in default if d is not None), None)
        for v in value:
            if v is None and None in default:
                continue
            if isinstance(item, int) and not (isinstance(v, int) and not isinstance(v, bool)):
                return False
            if (item is None or isinstance(item, float)) and not (isinstance(v, (int, float)) and not isinstance(v, bool)):
                return False
        return True
    return False


def _merge(doc: dict) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError("", "config must be a JSON object")
    merged = copy.deepcopy(DEFAULTS)
    for section, values in doc.items():
        if section == COMMENT_KEY:
            continue
        if section not in DEFAULTS:
            raise ConfigError(f"/{section}", "unknown section")
        if not isinstance(values, dict):
            raise ConfigError(f"/{section}", "section must be an object")
        for key, value in values.items():
            pointer = f"/{section}/{key}"
            if key not in DEFAULTS[section]:
                raise ConfigError(pointer, "unknown key")
            if not _type_ok(value, DEFAULTS[section][key], pointer):
                raise ConfigError(pointer, f"expected a value like {json.dumps(DEFAULTS[section][key])}")
            merged[section][key] = value
    for pointer, (text, rule) in RULES.items():
        _, section, key = pointer.split("/")
        if not rule(merged[section][key]):
            raise ConfigError(pointer, f"must be {text}")
    return merged


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration with typed views for each subsystem."""

    doc: dict

    @classmethod
    def default(cls) -> RunConfig:
        return cls.from_dict({})

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        merged = _merge(doc)
        cfg = cls(merged)
        cfg._build()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> RunConfig:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError("", f"invalid JSON: {err}") from err
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> RunConfig:
        if path is None:
            return cls.default()
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def to_dict(self) -> dict:
        return copy.deepcopy(self.doc)

    def to_json(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True)

    def with_seed(self, seed: int) -> RunConfig:
        doc = self.to_dict()
        doc["train"]["seed"] = seed
        return RunConfig.from_dict(doc)

    def apply_env(self, environ=None) -> RunConfig:
        """Honour the seed override from the environment, if set."""
        environ = os.environ if environ is None else environ
        raw = environ.get(SEED_ENV)
        if raw is None or raw == "":
            return self
        try:
            seed = int(raw)
        except ValueError as err:
            raise ConfigError("/train/seed", f"{SEED_ENV}={raw!r} is not an integer") from err
        return self.with_seed(seed)

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.doc == other.doc

    # typed views ----------------------------------------------------------

    def _build(self) -> None:
        # constructing every view once surfaces cross-field conflicts early
        checks = [("/corpus", self.corpus), ("/encoder", self.encoder), ("/attention", self.attention),
                  ("/losses", self.losses), ("/train", self.train)]
        for pointer, build in checks:
            try:
                build()
            except ValueError as err:
                raise ConfigError(pointer, str(err)) from err

    def corpus(self) -> CorpusSpec:
        c = self.doc["corpus"]
        return CorpusSpec(datasets=tuple(c["datasets"]), slices=c["slices"], extent=c["extent"],
                          classes=c["classes"], pattern=c["pattern"], noise=float(c["noise"]), seed=c["seed"])

    def encoder(self) -> EncoderConfig:
        e = self.doc["encoder"]
        return EncoderConfig(channels=tuple(e["channels"]), kernel=e["kernel"], levels=e["levels"],
                             level_width=e["level_width"], embed_dim=e["embed_dim"],
                             input_size=self.doc["corpus"]["extent"])

    def attention(self) -> AttentionConfig:
        a = self.doc["attention"]
        e = self.doc["encoder"]
        return AttentionConfig(width=e["level_width"], heads=a["heads"], groups=a["groups"], blocks=a["blocks"],
                               seq_len=self.doc["corpus"]["slices"] * e["levels"], downsample=a["downsample"],
                               ffn_mult=a["ffn_mult"], embed_dim=e["embed_dim"],
                               max_offset=None if a["max_offset"] is None else float(a["max_offset"]),
                               pyramid=a["pyramid"])

    def losses(self) -> LossConfig:
        lo = self.doc["losses"]
        return LossConfig(tau=float(lo["tau"]), eps=float(lo["eps"]), sinkhorn_iters=lo["sinkhorn_iters"],
                          sinkhorn_tol=float(lo["sinkhorn_tol"]),
                          tau_3d=None if lo["tau_3d"] is None else float(lo["tau_3d"]))

    def train(self) -> TrainConfig:
        t = self.doc["train"]
        m = self.doc["mask"]
        return TrainConfig(epochs=tuple(t["epochs"]), slice_batch=t["slice_batch"], volume_batch=t["volume_batch"],
                           lr=float(t["lr"]), stage_lr=tuple(None if x is None else float(x) for x in t["stage_lr"]),
                           mask_ratio=float(m["ratio"]), squared_mask=m["squared"],
                           joint_stage2=t["joint_stage2"], strict=t["strict"], seed=t["seed"])

    @property
    def clusters(self) -> int:
        return self.doc["losses"]["prototypes"]

    @property
    def seed(self) -> int:
        return self.doc["train"]["seed"]


def fullscale_preset_text() -> str:
    return resources.files("vcsl").joinpath("presets/fullscale.json").read_text(encoding="utf-8")


def fullscale_preset() -> dict:
    return json.loads(fullscale_preset_text())


def schema() -> dict:
    """Defaults plus the constraint on each constrained key."""
    out = {}
    for section, values in DEFAULTS.items():
        out[section] = {}
        for key, default in values.items():
            pointer = f"/{section}/{key}"
            entry = {"default": default}
            if pointer in RULES:
                entry["constraint"] = RULES[pointer][0]
            out[section][key] = entry
    return out
