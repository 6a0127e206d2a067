from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from gridlens.model.prompts import TEMPLATES, Vocab, answer_length, layout


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    n_heads: int = 8
    d_model: int = 96
    d_mlp: int = 32
    grid_size: int = 8
    n_classes: int = 10
    d_vis: int = 32
    max_seq: int = 128
    layer_norm: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for t in TEMPLATES:
            need = layout(t, self.grid_size, self.n_classes).answer_start + answer_length(t, self.n_classes)
            if need > self.max_seq:
                raise ConfigError(f"template {t!r} needs {need} positions, max_seq={self.max_seq}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.grid_size, self.n_classes)

    @property
    def n_vocab(self) -> int:
        return len(self.vocab)

    @property
    def n_image_tokens(self) -> int:
        return self.grid_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)
