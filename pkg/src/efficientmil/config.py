"""Dataclass configs for encoders and training.

Defaults reproduce the reference training recipe exactly, so constructing
``TrainConfig()`` with no arguments gives the published hyperparameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .errors import ConfigError

ENCODER_KINDS = ("lstm", "gru", "mamba")
SELECTION_STRATEGIES = ("aps", "topk_relevance", "random_k")

# accepted shorthands on the CLI and in ablation specs
STRATEGY_ALIASES = {"topk": "topk_relevance", "random": "random_k"}


@dataclass
class MambaConfig:
    depth: int = 8
    state_dim: int = 32
    conv_kernel: int = 4
    expansion: int = 2

    def validate(self) -> None:
        for name in ("depth", "state_dim", "conv_kernel", "expansion"):
            if getattr(self, name) < 1:
                raise ConfigError(f"mamba.{name} must be >= 1")


@dataclass
class EncoderConfig:
    """Sequence encoder selection and sizing.

    ``hidden`` is the per-direction hidden size for the RNN kinds. When left
    unset it resolves to ``d // 2`` so the bidirectional output (2h) matches
    the feature dimension and the residual connection needs no projection;
    for 1536-dim features that resolution is the default 768.
    """

    kind: str = "gru"
    hidden: int | None = None
    layers: int = 2
    dropout: float = 0.1
    mamba: MambaConfig = field(default_factory=MambaConfig)

    def validate(self) -> None:
        if self.kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder kind {self.kind!r}; valid kinds: {', '.join(ENCODER_KINDS)}")
        if self.hidden is not None and self.hidden < 1:
            raise ConfigError("hidden size must be >= 1")
        if self.layers < 1:
            raise ConfigError("layer count must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        self.mamba.validate()

    def resolved_hidden(self, d: int) -> int:
        return self.hidden if self.hidden is not None else max(1, d // 2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "EncoderConfig":
        obj = dict(obj)
        obj["mamba"] = MambaConfig(**obj.get("mamba", {}))
        return cls(**obj)


@dataclass
class TrainConfig:
    """Every knob of the optimization recipe plus the selection settings."""

    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.9)
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    l2_lambda: float = 1e-4
    min_lr: float = 5e-6
    epochs: int = 50
    patience: int = 5
    batch_size: int = 1
    split_ratio: float = 0.8
    seed: int = 42
    big_lambda: int = 512
    aps_weights: tuple[float, float, float] = (1.0, 0.3, 0.3)
    strategy: str = "aps"
    # whether the max-pooled instance loss term ranges over all N instances
    # or only the selected ones
    instance_term: str = "all"
    # optional per-feature z-scoring fitted on the training split
    feature_scaling: str = "zscore"

    def validate(self) -> None:
        if self.lr <= 0 or self.min_lr <= 0 or self.min_lr > self.lr:
            raise ConfigError("need 0 < min_lr <= lr")
        if not (0 < self.betas[0] < 1 and 0 < self.betas[1] < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be > 0")
        if self.weight_decay < 0 or self.l2_lambda < 0:
            raise ConfigError("weight_decay and l2_lambda must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size != 1:
            raise ConfigError("only batch_size=1 is supported")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("split_ratio must be in (0, 1)")
        if self.big_lambda < 1:
            raise ConfigError("big_lambda must be >= 1")
        if self.strategy not in SELECTION_STRATEGIES:
            raise ConfigError(
                f"unknown strategy {self.strategy!r}; valid: {', '.join(SELECTION_STRATEGIES)}"
            )
        if self.instance_term not in ("all", "selected"):
            raise ConfigError("instance_term must be 'all' or 'selected'")
        if self.feature_scaling not in ("none", "zscore"):
            raise ConfigError("feature_scaling must be 'none' or 'zscore'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["aps_weights"] = list(self.aps_weights)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        obj["betas"] = tuple(obj.get("betas", (0.5, 0.9)))
        obj["aps_weights"] = tuple(obj.get("aps_weights", (1.0, 0.3, 0.3)))
        return cls(**obj)


def canonical_strategy(name: str) -> str:
    name = name.strip().lower()
    name = STRATEGY_ALIASES.get(name, name)
    if name not in SELECTION_STRATEGIES:
        raise ConfigError(f"unknown strategy {name!r}; valid: {', '.join(SELECTION_STRATEGIES)}")
    return name
