"""Model configuration and its flat key=value file format."""

from __future__ import annotations

from dataclasses import dataclass, fields

__all__ = ["ModelConfig", "save_config", "load_config"]

MODES = ("FE2E", "MESM")
MASK_MODES = ("faithful", "soft")


@dataclass
class ModelConfig:
    """Hyper-parameters of the dense (FE2E) and sparse (MESM) models."""

    mode: str = "FE2E"
    top_p: float = 0.5
    mask_mode: str = "faithful"   # how gradient treats the selection mask
    modalities: str = "TAV"
    classes: int = 6
    d_model: int = 64
    heads: int = 4
    layers: int = 4
    n_blocks: int = 3
    attn_width: int = 16          # hidden width of the attention scorer
    stem_channels: int = 8        # doubles every block
    vocab_size: int = 32
    max_text_len: int = 50
    max_seq_len: int = 32         # frames/chunks per modality
    learning_rate: float = 5e-5
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    pos_weight_cap: float = 100.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(
                f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.d_model % self.heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        mods = set(self.modalities)
        if not mods or not mods <= set("TAV") or \
                len(self.modalities) != len(mods):
            raise ValueError(
                f"modalities must be a nonempty subset of 'TAV', "
                f"got {self.modalities!r}")
        if self.mode == "MESM" and "T" not in mods:
            raise ValueError("MESM needs the text modality as attention query")

    def replace(self, **kwargs) -> "ModelConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(kwargs)
        return ModelConfig(**values)


def save_config(config: ModelConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(config):
            fh.write(f"{f.name} = {getattr(config, f.name)}\n")


def load_config(path) -> ModelConfig:
    """Parse `key = value` lines; types come from the field declarations."""
    types = {f.name: f.type for f in fields(ModelConfig)}
    casts = {"int": int, "float": float, "str": str}
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in types:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = casts[types[key]](raw)
    return ModelConfig(**values)
