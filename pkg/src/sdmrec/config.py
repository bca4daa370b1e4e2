"""Run configuration: canonical key=value text, hashing and the hyper-parameter grid."""
from __future__ import annotations

import dataclasses
import hashlib
from pathlib import Path

GRID = {
    "dim": (8, 16, 32, 64, 128),
    "lambda_reg": (0.1, 0.01, 0.001, 0.0001, 0.00001),
    "hops": (1, 2, 3, 4),
    "context_len": (5, 10, 20),
}
MODELS = ("sdp", "sdm", "sdmr", "itemknn", "mfbpr", "cml")


@dataclasses.dataclass
class TrainConfig:
    batch_size: int = 256
    negatives_per_positive: int = 4
    lambda_reg: float = 0.0001
    epochs: int = 100
    patience: int = 5
    seed: int = 42
    dim: int = 64
    hops: int = 1
    context_len: int = 5
    learning_rate: float = 0.001
    reg_embeddings_only: bool = False
    eval_k: int = 10
    fusion_mode: str = "learned"
    beta: float = 0.5

    def __post_init__(self) -> None:
        for name in ("batch_size", "negatives_per_positive", "epochs", "dim", "hops", "context_len", "eval_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.patience < 0 or self.lambda_reg < 0 or self.learning_rate < 0:
            raise ValueError("patience, lambda_reg and learning_rate must be non-negative")

    def off_grid(self) -> list[str]:
        return [f"{k}={getattr(self, k)}" for k, allowed in GRID.items() if getattr(self, k) not in allowed]


def canonical_text(values: dict) -> str:
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, float):
            v = repr(v)
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def config_hash(values: dict) -> str:
    return hashlib.sha256(canonical_text(values).encode("utf-8")).hexdigest()[:16]


def write_config(path, values: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_text(values), encoding="utf-8")
    return path


def read_config(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out
