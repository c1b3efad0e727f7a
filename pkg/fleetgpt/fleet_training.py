# fleet_training.py
"""
fleet_training.py

Shared optimization machinery: ParameterStore, Adam, seeding, parameter counts.

Design goals
- one ordered name -> Tensor map holds every learnable weight; iteration
  order is insertion order, so counts, hashes and checkpoints are stable
- trainable vs frozen is a flag on each tensor (requires_grad), flipped by
  a FreezePlan; the optimizer never touches a frozen tensor
- every stochastic source (init, masking, batch shuffling, fault injection,
  dropout) is a named stream derived from one seed; fault injection splits
  its stream per fleet id (`stream_rng`)
"""

from __future__ import annotations

import hashlib
import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from fleet_errors import ContractError
from fleet_tensor import Tensor, default_dtype

logger = logging.getLogger(__name__)

NameFilter = Union[None, str, Iterable[str], Callable[[str], bool]]

# -----------------------------
# ParameterStore
# -----------------------------


@dataclass
class ParameterStore:
    """Ordered map name -> Tensor plus the seed the run started from."""

    params: Dict[str, Tensor] = field(default_factory=dict)
    seed: int = 0

    def add(self, name: str, data: np.ndarray, trainable: bool = True, dtype=None) -> Tensor:
        if name in self.params:
            raise ContractError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=trainable, dtype=dtype if dtype is not None else default_dtype(), name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: object) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def names(self) -> List[str]:
        return list(self.params)

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    def trainable_names(self) -> List[str]:
        return [n for n, t in self.params.items() if t.requires_grad]

    def frozen_names(self) -> List[str]:
        return [n for n, t in self.params.items() if not t.requires_grad]

    def set_trainable(self, names: Iterable[str]) -> None:
        """Exactly `names` become trainable; everything else is frozen."""
        wanted = set(names)
        unknown = wanted - set(self.params)
        if unknown:
            raise ContractError(f"unknown parameter names: {sorted(unknown)}")
        for n, t in self.params.items():
            t.requires_grad = n in wanted
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def digest(self, names: Optional[Iterable[str]] = None) -> str:
        """SHA-256 over (name, dtype, shape, bytes) of the selected tensors."""
        h = hashlib.sha256()
        for n in (self.names() if names is None else names):
            t = self.params[n]
            h.update(n.encode("utf-8"))
            h.update(str(t.data.dtype).encode("ascii"))
            h.update(repr(t.shape).encode("ascii"))
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def cast(self, dtype) -> None:
        for t in self.params.values():
            t.data = t.data.astype(dtype)


def _matches(name: str, flt: NameFilter) -> bool:
    if flt is None:
        return True
    if isinstance(flt, str):
        return name.startswith(flt)
    if callable(flt):
        return bool(flt(name))
    return name in flt


def count_params(store: ParameterStore, flt: NameFilter = None) -> int:
    """
    Sum of element counts over matching names.
    `flt` may be None (all), a name prefix, a collection of names, or a predicate.
    """
    if flt is not None and not isinstance(flt, str) and not callable(flt):
        flt = set(flt)
    return sum(t.size for n, t in store.params.items() if _matches(n, flt))


def trainable_ratio(store: ParameterStore) -> float:
    total = count_params(store)
    return count_params(store, lambda n: store[n].requires_grad) / total if total else 0.0


# -----------------------------
# Initializers
# -----------------------------
def normal_init(rng: np.random.Generator, shape: Sequence[int], std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=tuple(shape))


def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Weight [fan_in, fan_out] with std 1/sqrt(fan_in)."""
    return normal_init(rng, (fan_in, fan_out), 1.0 / np.sqrt(fan_in))


# -----------------------------
# Adam
# -----------------------------


@dataclass
class OptimizerState:
    lr: float = 3e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: Dict[str, int] = field(default_factory=dict)  # per-parameter update count (bias correction)
    debug_freeze_check: bool = False

    @classmethod
    def from_config(cls, training, lr: Optional[float] = None) -> "OptimizerState":
        return cls(
            lr=training.lr if lr is None else lr,
            beta1=training.beta1,
            beta2=training.beta2,
            eps=training.eps,
            debug_freeze_check=training.debug_freeze_check,
        )

    def to_arrays(self) -> Dict[str, np.ndarray]:
        """Flat tensor table for checkpoints."""
        out: Dict[str, np.ndarray] = {
            "hparams": np.array([self.lr, self.beta1, self.beta2, self.eps, float(self.step)], dtype=np.float64)
        }
        for n in self.m:
            out[f"m.{n}"] = self.m[n]
            out[f"v.{n}"] = self.v[n]
            out[f"t.{n}"] = np.array([self.t.get(n, 0)], dtype=np.float64)
        return out

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "OptimizerState":
        if "hparams" not in arrays:
            raise ContractError("optimizer table has no hparams entry")
        lr, b1, b2, eps, step = (float(x) for x in arrays["hparams"])
        state = cls(lr=lr, beta1=b1, beta2=b2, eps=eps, step=int(step))
        for key, arr in arrays.items():
            kind, _, name = key.partition(".")
            if kind == "m":
                state.m[name] = arr
            elif kind == "v":
                state.v[name] = arr
            elif kind == "t":
                state.t[name] = int(arr.reshape(-1)[0])
        return state


def optimizer_step(
    store: ParameterStore,
    state: OptimizerState,
    active: Optional[Set[str]] = None,
) -> OptimizerState:
    """
    One Adam update with bias correction over the trainable parameters.

    `active` names the trainable parameters this step must have gradients for
    (e.g. the shared weights plus the current fleet's pools); trainable
    parameters outside it are skipped when they carry no gradient.
    Gradients are cleared afterwards.
    """
    frozen_before = store.digest(store.frozen_names()) if state.debug_freeze_check else None
    state.step += 1
    for name, p in store.params.items():
        if not p.requires_grad:
            continue
        g = p.grad
        if g is None:
            if active is None or name in active:
                raise ContractError(f"optimizer_step: trainable parameter {name} has no gradient")
            continue
        if g.shape != p.shape:
            raise ContractError(f"optimizer_step: grad shape {g.shape} != param shape {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
            state.t[name] = 0
        t = state.t[name] + 1
        state.t[name] = t
        g64 = g.astype(np.float64, copy=False)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g64
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g64 * g64
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.data = (p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
    store.zero_grad()
    if frozen_before is not None and store.digest(store.frozen_names()) != frozen_before:
        raise ContractError("optimizer_step: a frozen parameter changed")
    return state


# -----------------------------
# Seeding
# -----------------------------
STREAMS: Tuple[str, ...] = ("init", "mask", "shuffle", "faults", "dropout")
RUN_STREAMS: Tuple[str, ...] = ("init", "mask", "shuffle", "dropout")


def stream_rng(seed: int, stream: str, key: str = "") -> np.random.Generator:
    """
    Generator for one named stream of `seed`; with `key` the stream is split
    further (one sub-stream per fleet id). Without a key this is the same
    generator `seed_all` hands out for `stream`.
    """
    if stream not in STREAMS:
        raise ContractError(f"unknown seed stream {stream!r} (streams: {', '.join(STREAMS)})")
    spawn_key = (STREAMS.index(stream),) + ((zlib.crc32(key.encode("utf-8")),) if key else ())
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=spawn_key))


@dataclass
class SeedStreams:
    seed: int
    init: np.random.Generator
    mask: np.random.Generator
    shuffle: np.random.Generator
    dropout: np.random.Generator


def seed_all(seed: int) -> SeedStreams:
    """
    Independent generators for the training-time streams, all derived from
    `seed`. Fault injection runs at data-generation time and takes its own
    per-fleet generator from `stream_rng(seed, "faults", fleet_id)`.
    """
    gens = {name: stream_rng(seed, name) for name in RUN_STREAMS}
    np.random.seed(int(seed) % (2 ** 32))
    logger.debug("seeded streams %s from %d", ",".join(RUN_STREAMS), seed)
    return SeedStreams(seed=int(seed), **gens)


def derive_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2 ** 31 - 1))
