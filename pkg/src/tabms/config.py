"""Model hyperparameters.

Defaults are the full-size architecture; ``desk()`` and ``micro()`` return the
small presets used for CPU training and gradient checks.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Any, Optional


@dataclass
class ModelConfig:
    # column embedder
    d: int = 128
    col_inducing: int = 128
    col_heads: int = 4
    col_blocks: int = 3
    col_ff: int = 256
    col_prenorm: bool = True
    skip_init_std: float = 1e-4
    # row interaction
    n_cls: int = 4
    n_global: int = 4
    scales: tuple = (1, 4, 16)
    row_blocks: int = 6
    row_heads: int = 8
    row_ff: int = 256
    window: int = 8
    random_links: int = 2
    rope_theta: float = 100000.0
    pma_key_pe: bool = True
    scale1_identity: bool = False
    # perceiver memory
    mem_slots: int = 32
    mem_write: int = 2
    mem_read: int = 2
    mem_heads: int = 4
    # icl predictor
    icl_blocks: int = 12
    icl_heads: int = 4
    icl_ff: int = 1024
    c_max: int = 10
    label_init_std: Optional[float] = 1.0
    temperature: float = 0.9
    dropout: float = 0.0
    # seed for random sparse links; predictions use step 0
    mask_seed: int = 0

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        if not self.scales or min(self.scales) < 1:
            raise ValueError("scales must be positive integers")
        if self.row_blocks % len(self.scales):
            raise ValueError(f"row_blocks={self.row_blocks} not divisible across {len(self.scales)} scales")
        if self.d % self.col_heads or self.d % self.row_heads:
            raise ValueError("d must be divisible by the column and row head counts")
        if (self.d // self.row_heads) % 2:
            raise ValueError("row head dim must be even for rotary embeddings")
        if self.d_r % self.icl_heads or self.d_r % self.mem_heads:
            raise ValueError("d_r must be divisible by the icl and memory head counts")

    @property
    def n_special(self) -> int:
        return self.n_cls + self.n_global

    @property
    def d_r(self) -> int:
        return self.n_cls * self.d

    @property
    def blocks_per_scale(self) -> int:
        return self.row_blocks // len(self.scales)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["scales"] = list(self.scales)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        base = dict(
            d=32, col_inducing=16, col_heads=4, col_ff=64, scales=(1, 4), row_blocks=2, row_heads=4,
            row_ff=64, mem_slots=8, icl_blocks=3, icl_ff=256,
        )
        base.update(kw)
        return cls(**base)

    @classmethod
    def micro(cls, **kw) -> "ModelConfig":
        base = dict(
            d=32, col_inducing=16, col_ff=64, scales=(1, 4), row_blocks=2, row_heads=4, row_ff=64,
            mem_slots=8, icl_blocks=2, icl_ff=256,
        )
        base.update(kw)
        return cls(**base)


PRESETS = {"full": ModelConfig, "desk": ModelConfig.desk, "micro": ModelConfig.micro}


def preset(name: str, **kw) -> ModelConfig:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(**kw)

