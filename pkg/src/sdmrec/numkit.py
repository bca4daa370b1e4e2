"""Dense math kernels, parameter storage, Adam, seeded RNG and gradient checking.

Every tensor is a float64 numpy array. Backward passes for the models are
written by hand in their own modules; this file only holds the shared pieces.
"""
from __future__ import annotations

import dataclasses
import io
import math
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

DTYPE = np.float64
TANH_CLAMP = 20.0


class NumericError(FloatingPointError):
    """Raised when a non-finite value shows up where it must not."""


# --------------------------------------------------------------------------
# elementwise kernels
# --------------------------------------------------------------------------

def tanh(x: np.ndarray) -> np.ndarray:
    """tanh via expm1(2x) / (expm1(2x) + 2), clamped to +-1 for |x| > 20."""
    # at |x| = 20 the quotient already rounds to exactly +-1 in float64
    em = np.clip(x, -TANH_CLAMP, TANH_CLAMP, dtype=DTYPE)
    em *= 2.0
    np.expm1(em, out=em)
    return np.divide(em, em + 2.0, out=em)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    """log(sigmoid(x)) without overflow or log(0)."""
    x = np.asarray(x, dtype=DTYPE)
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def masked_softmin(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """softmax(-z) over the last axis, normalised over unmasked slots only.

    Masked slots come out as exact zeros. Every row needs one unmasked slot.
    """
    z = np.asarray(z, dtype=DTYPE)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("attention row with every slot masked")
    neg = np.where(mask, -z, -np.inf)
    shift = neg.max(axis=-1, keepdims=True)
    ex = np.where(mask, np.exp(neg - shift), 0.0)
    # sequential sum over slots: the normaliser does not depend on how many
    # masked slots a row carries
    tot = ex[..., 0].copy()
    for k in range(1, ex.shape[-1]):
        tot += ex[..., k]
    return ex / tot[..., None]


def masked_softmin_backward(a: np.ndarray, da: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. z of a = softmax(-z); masked slots have a == 0 and get 0."""
    inner = (a * da).sum(axis=-1, keepdims=True)
    return -a * (da - inner)


def glorot_uniform(rng: "RngStream", fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def ensure_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclasses.dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray

    @classmethod
    def from_value(cls, value: np.ndarray) -> "Param":
        value = np.array(value, dtype=DTYPE, order="C")
        if value.ndim == 0:
            value = value.reshape(1)
        return cls(value, np.zeros_like(value), np.zeros_like(value), np.zeros_like(value))


class ParameterStore:
    """Named float64 tensors with gradient buffers and Adam moments.

    Iteration order is lexicographic by name.
    """

    def __init__(self) -> None:
        self._entries: dict[str, Param] = {}
        self.step_count = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self._entries:
            raise KeyError(f"duplicate parameter {name!r}")
        self._entries[name] = Param.from_value(value)
        return self._entries[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._entries))

    def names(self) -> list[str]:
        return sorted(self._entries)

    def param(self, name: str) -> Param:
        return self._entries[name]

    def grad(self, name: str) -> np.ndarray:
        return self._entries[name].grad

    def items(self) -> Iterator[tuple[str, Param]]:
        for name in self.names():
            yield name, self._entries[name]

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.grad.fill(0.0)

    def num_values(self) -> int:
        return sum(p.value.size for p in self._entries.values())

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        out.step_count = self.step_count
        for name, p in self.items():
            out._entries[name] = Param(p.value.copy(), p.grad.copy(), p.adam_m.copy(), p.adam_v.copy())
        return out

    def value_bytes(self) -> bytes:
        return b"".join(self._entries[n].value.tobytes() for n in self.names())


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def adam_step(store: ParameterStore, cfg: AdamConfig, names: list[str] | None = None) -> ParameterStore:
    """One bias-corrected Adam update in place; gradients are zeroed afterwards.

    `names` restricts the update to a subset (the rest is left untouched,
    gradients included). A zero learning rate is accepted and leaves values as is.
    """
    selected = store.names() if names is None else sorted(names)
    for name in selected:
        ensure_finite(f"gradient of {name}", store.grad(name))
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name in selected:
        p = store.param(name)
        g = p.grad
        tmp = np.multiply(g, 1.0 - cfg.beta1)
        p.adam_m *= cfg.beta1
        p.adam_m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - cfg.beta2
        p.adam_v *= cfg.beta2
        p.adam_v += tmp
        if cfg.learning_rate:
            np.divide(p.adam_v, c2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += cfg.epsilon
            np.divide(p.adam_m, tmp, out=tmp)
            tmp *= cfg.learning_rate / c1
            p.value -= tmp
        g.fill(0.0)
    return store


# --------------------------------------------------------------------------
# RNG
# --------------------------------------------------------------------------

class RngStream:
    """Deterministic random stream (PCG64 underneath)."""

    def __init__(self, seed: int) -> None:
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed & 0xFFFFFFFFFFFFFFFF))

    def uniform_int(self, low: int, high: int, size=None):
        """Integers in the closed range [low, high]."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def gaussian(self, mean: float = 0.0, std: float = 1.0, size=None):
        return self._gen.normal(mean, std, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace: bool = True):
        return self._gen.choice(a, size=size, replace=replace)

    def child(self, tag: int) -> "RngStream":
        """Independent stream derived from this stream's seed and an integer tag."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, int(tag)])
        out = RngStream.__new__(RngStream)
        out.seed = self.seed
        out._gen = np.random.Generator(np.random.PCG64(ss))
        return out


def seeded_rng(seed: int) -> RngStream:
    return RngStream(seed)


# --------------------------------------------------------------------------
# finite-difference gradient check
# --------------------------------------------------------------------------

@dataclasses.dataclass
class CheckReport:
    passed: bool
    max_rel_error: float
    worst: tuple[str, int] | None
    n_coords: int
    tolerance: float
    per_param: dict[str, float]

    def __str__(self) -> str:
        where = f" at {self.worst[0]}[{self.worst[1]}]" if self.worst else ""
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_error:.3e}{where} over {self.n_coords} coords"


def finite_diff_check(
    model_loss: Callable[[ParameterStore], float],
    store: ParameterStore,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    *,
    names: list[str] | None = None,
    max_coords: int | None = None,
    seed: int = 0,
    abs_floor: float = 1e-5,
) -> CheckReport:
    """Compare analytic gradients against central differences.

    `model_loss(store)` must return the loss and accumulate its analytic
    gradient into the store's gradient buffers. Relative error per coordinate
    is |a - n| / max(|a|, |n|, abs_floor). Central differences carry round-off
    of roughly 1e-10 at eps=1e-5, so the floor keeps coordinates whose true
    gradient is (near) zero from failing on noise alone.
    When `max_coords` is set and the store is larger, a seeded random subset
    of at least that many coordinates is checked.
    """
    names = store.names() if names is None else sorted(names)
    store.zero_grad()
    base = float(model_loss(store))
    analytic = {n: store.grad(n).copy() for n in names}
    store.zero_grad()
    again = float(model_loss(store))
    store.zero_grad()
    if base != again:
        raise NumericError(f"loss is not deterministic: {base!r} != {again!r}")

    coords = [(n, i) for n in names for i in range(store[n].size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = RngStream(seed)
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in pick]

    worst_err, worst = 0.0, None
    per_param: dict[str, float] = {n: 0.0 for n in names}
    for name, idx in coords:
        flat = store[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + epsilon
        up = float(model_loss(store))
        flat[idx] = orig - epsilon
        down = float(model_loss(store))
        flat[idx] = orig
        store.zero_grad()
        numeric = (up - down) / (2.0 * epsilon)
        a = analytic[name].reshape(-1)[idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
        per_param[name] = max(per_param[name], err)
        if err > worst_err or worst is None:
            worst_err, worst = err, (name, idx)
    return CheckReport(worst_err < tolerance, worst_err, worst, len(coords), tolerance, per_param)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = "sdmrec-checkpoint"


def save_checkpoint(path, store: ParameterStore, seed: int, config_hash: str) -> Path:
    """Text header + manifest, then raw little-endian float64 values in manifest order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = store.names()
    lines = [f"{CHECKPOINT_MAGIC} seed={int(seed)} config_hash={config_hash} "
             f"step_count={store.step_count} tensors={len(names)}"]
    offset = 0
    for name in names:
        arr = store[name]
        lines.append(f"{name} {','.join(str(s) for s in arr.shape)} {offset}")
        offset += arr.size * 8
    buf = io.BytesIO()
    buf.write(("\n".join(lines) + "\n").encode("ascii"))
    for name in names:
        buf.write(np.ascontiguousarray(store[name], dtype="<f8").tobytes())
    path.write_bytes(buf.getvalue())
    return path


@dataclasses.dataclass
class CheckpointMeta:
    seed: int
    config_hash: str
    step_count: int


def load_checkpoint(path) -> tuple[ParameterStore, CheckpointMeta]:
    raw = Path(path).read_bytes()
    pos = raw.index(b"\n")
    header = raw[:pos].decode("ascii").split()
    if not header or header[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    fields = dict(tok.split("=", 1) for tok in header[1:])
    n = int(fields["tensors"])
    manifest = []
    for _ in range(n):
        nxt = raw.index(b"\n", pos + 1)
        name, shape, offset = raw[pos + 1:nxt].decode("ascii").split(" ")
        manifest.append((name, tuple(int(s) for s in shape.split(",") if s), int(offset)))
        pos = nxt
    body = raw[pos + 1:]
    store = ParameterStore()
    for name, shape, offset in manifest:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=offset).astype(DTYPE).reshape(shape)
        store.add(name, arr)
    store.step_count = int(fields["step_count"])
    return store, CheckpointMeta(int(fields["seed"]), fields["config_hash"], store.step_count)
