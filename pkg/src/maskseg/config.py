"""Training configuration with flat dotted-key JSON serialization."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Dict

from .masking import AugmentConfig
from .nets import NetConfig
from .semmim import LossWeights


@dataclass
class DataConfig:
    source: str = "synth"  # "synth" (generated in memory) or "dir"
    corpus: str = ""
    eval_corpus: str = ""
    height: int = 64
    width: int = 64
    num_classes: int = 4
    n_labeled: int = 8
    n_unlabeled: int = 256
    n_eval: int = 64
    synth_seed: int = 0
    split_seed: int = 0


@dataclass
class ModelConfig:
    enc1: int = 16
    enc2: int = 32
    dec_channels: int = 32
    trunk_dim: int = 32
    head_kernel: int = 3
    use_bias: bool = True


@dataclass
class MaskConfig:
    patch_size: int = 6
    ratio: float = 0.4


@dataclass
class ProtoConfig:
    alpha: float = 0.99
    tau: float = 10.0
    use_conf: bool = True
    use_dic: bool = True


@dataclass
class OptimConfig:
    lr: float = 0.02
    lr_pid: float = 0.02
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 0.0  # global gradient-norm bound; 0 disables


@dataclass
class ToggleConfig:
    use_unlabeled: bool = True
    use_mimpi: bool = True
    use_mimfea: bool = True
    use_mimse: bool = True
    classwise: bool = True
    sem_loss: str = "ce"        # "ce" or "mse"
    sem_gated: bool = False
    gate_norm: str = "valid"    # mean over gated pixels ("valid") or all pixels ("all")
    detach_fp: bool = True
    clamp_fp: bool = True       # clip the detached fp target to the image range [0, 1]
    shared_batch: bool = False


@dataclass
class SeedConfig:
    model: int = 0
    data: int = 0
    mask: int = 0


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    mask: MaskConfig = field(default_factory=MaskConfig)
    proto: ProtoConfig = field(default_factory=ProtoConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    toggles: ToggleConfig = field(default_factory=ToggleConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    iterations: int = 2000
    batch_size: int = 4
    feature_dropout: float = 0.5
    eval_interval: int = 0
    checkpoint_interval: int = 0

    def net_config(self) -> NetConfig:
        m = self.model
        return NetConfig(in_channels=3, num_classes=self.data.num_classes, enc_channels=(m.enc1, m.enc2),
                         dec_channels=m.dec_channels, trunk_dim=m.trunk_dim, head_kernel=m.head_kernel,
                         use_bias=m.use_bias)

    def active_weights(self) -> LossWeights:
        t = self.toggles
        return self.weights.active(t.use_unlabeled, t.use_mimpi, t.use_mimfea, t.use_mimse)

    @property
    def phase2_enabled(self) -> bool:
        t = self.toggles
        return t.use_mimpi or t.use_mimfea or t.use_mimse

    # -- serialization ---------------------------------------------------
    def to_flat(self) -> Dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for g in dataclasses.fields(v):
                    out[f"{f.name}.{g.name}"] = getattr(v, g.name)
            else:
                out[f.name] = v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_flat(), sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_flat(cls, flat: Dict[str, Any], base: "TrainConfig | None" = None) -> "TrainConfig":
        return (base or cls()).override(flat)

    def override(self, flat: Dict[str, Any]) -> "TrainConfig":
        """New config with dotted keys replaced; unknown keys raise KeyError."""
        cur = self.to_flat()
        for key, val in flat.items():
            if key not in cur:
                raise KeyError(f"unknown config key {key!r}")
            cur[key] = _coerce(val, cur[key], key)
        kwargs: Dict[str, Any] = {}
        for f in dataclasses.fields(self):
            sub = getattr(self, f.name)
            if dataclasses.is_dataclass(sub):
                vals = {g.name: cur[f"{f.name}.{g.name}"] for g in dataclasses.fields(sub)}
                kwargs[f.name] = type(sub)(**vals)
            else:
                kwargs[f.name] = cur[f.name]
        return TrainConfig(**kwargs)


def _coerce(val, like, key):
    if isinstance(like, bool):
        if isinstance(val, str):
            low = val.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"{key}: expected a boolean, got {val!r}")
        return bool(val)
    if isinstance(like, int):
        if isinstance(val, float) and not val.is_integer():
            raise ValueError(f"{key}: expected an integer, got {val!r}")
        return int(val)
    if isinstance(like, float):
        return float(val)
    return str(val) if isinstance(like, str) else val


def load_config(path: str) -> TrainConfig:
    with open(path) as fh:
        flat = json.load(fh)
    if not isinstance(flat, dict):
        raise ValueError(f"{path}: config must be a JSON object of dotted keys")
    return TrainConfig().override(flat)
