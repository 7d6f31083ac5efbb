"""Batch-normalized MLP classifier with a named, flattenable parameter registry.

Trainable parameters carry stable dotted names (``hidden0.weight``,
``hidden0.gamma``, ..., ``out.bias``) in a deterministic registry order; BN
running statistics are serialized with the model but are not trainables and
never enter ``FlatParams``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import RunningStats, Tape, Tensor, batch_norm, linear, relu
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint

Array = np.ndarray


@dataclass(frozen=True, eq=False)
class FlatParams:
    """Ordered, named view of all trainables as one contiguous vector."""

    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]
    offsets: tuple[int, ...]
    values: Array

    def __post_init__(self) -> None:
        if self.values.ndim != 1 or self.values.dtype != np.float64:
            raise ValueError("FlatParams values must be a 1-D float64 vector")
        total = self.offsets[-1] + int(np.prod(self.shapes[-1])) if self.names else 0
        if self.values.size != total:
            raise ValueError("FlatParams values length does not match layout")

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def slice(self, name: str) -> Array:
        i = self.names.index(name)
        size = int(np.prod(self.shapes[i]))
        return self.values[self.offsets[i] : self.offsets[i] + size].reshape(self.shapes[i])

    def with_values(self, values: Array) -> "FlatParams":
        values = np.ascontiguousarray(values, dtype=np.float64)
        return FlatParams(self.names, self.shapes, self.offsets, values)

    def copy(self) -> "FlatParams":
        return self.with_values(self.values.copy())

    def same_layout(self, other: "FlatParams") -> bool:
        return self.names == other.names and self.shapes == other.shapes


def _registry_layout(sizes: Sequence[int]) -> tuple[tuple[str, ...], tuple[tuple[int, ...], ...]]:
    names: list[str] = []
    shapes: list[tuple[int, ...]] = []
    for i, (fan_in, width) in enumerate(zip(sizes[:-2], sizes[1:-1])):
        names += [f"hidden{i}.weight", f"hidden{i}.bias", f"hidden{i}.gamma", f"hidden{i}.beta"]
        shapes += [(fan_in, width), (width,), (width,), (width,)]
    names += ["out.weight", "out.bias"]
    shapes += [(sizes[-2], sizes[-1]), (sizes[-1],)]
    return tuple(names), tuple(shapes)


class MlpClassifier:
    """linear -> batch norm -> ReLU per hidden layer, then a linear head."""

    def __init__(self, sizes: Sequence[int], seed: int = 0) -> None:
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 3:
            raise ValueError("need at least (input, one hidden, classes)")
        if sizes[-1] < 2:
            raise ValueError("need at least 2 classes")
        if any(s < 1 for s in sizes):
            raise ValueError("layer sizes must be positive")
        self.sizes = sizes
        self.bn_mode = "train"
        names, shapes = _registry_layout(sizes)
        self._names = names
        self._shapes = dict(zip(names, shapes))
        rng = np.random.Generator(np.random.PCG64(seed))
        self.params: dict[str, Array] = {}
        self.stats: dict[int, RunningStats] = {}
        for i, (fan_in, width) in enumerate(zip(sizes[:-2], sizes[1:-1])):
            bound = 1.0 / np.sqrt(fan_in)
            self.params[f"hidden{i}.weight"] = rng.uniform(-bound, bound, (fan_in, width))
            self.params[f"hidden{i}.bias"] = rng.uniform(-bound, bound, width)
            self.params[f"hidden{i}.gamma"] = np.ones(width)
            self.params[f"hidden{i}.beta"] = np.zeros(width)
            self.stats[i] = RunningStats(np.zeros(width), np.ones(width))
        bound = 1.0 / np.sqrt(sizes[-2])
        self.params["out.weight"] = rng.uniform(-bound, bound, (sizes[-2], sizes[-1]))
        self.params["out.bias"] = rng.uniform(-bound, bound, sizes[-1])

    @property
    def n_hidden(self) -> int:
        return len(self.sizes) - 2

    @property
    def param_names(self) -> tuple[str, ...]:
        return self._names

    def set_bn_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown BN mode {mode!r}")
        self.bn_mode = mode

    # -- forward ------------------------------------------------------------

    def _run(self, x, mode: str, tape: Tape | None, update_stats: bool):
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.data.ndim != 2 or h.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input (B, {self.sizes[0]}), got {h.shape}")
        wrapped = {name: Tensor(self.params[name]) for name in self._names}
        for i in range(self.n_hidden):
            h = linear(h, wrapped[f"hidden{i}.weight"], wrapped[f"hidden{i}.bias"], tape)
            h = batch_norm(
                h,
                wrapped[f"hidden{i}.gamma"],
                wrapped[f"hidden{i}.beta"],
                self.stats[i],
                mode=mode,
                tape=tape,
                update_stats=update_stats,
            )
            h = relu(h, tape)
        h = linear(h, wrapped["out.weight"], wrapped["out.bias"], tape)
        return h, wrapped

    def forward(self, x, update_stats: bool | None = None) -> Tensor:
        """Inference logits under the model's BN mode."""
        mode = self.bn_mode
        if update_stats is None:
            update_stats = mode == "train"
        logits, _ = self._run(x, mode, None, update_stats)
        return logits

    def taped_forward(self, x, tape: Tape, update_stats: bool = True):
        """Train-mode logits recorded on ``tape``; returns the parameter
        tensors so gradients can be mapped back by name."""
        return self._run(x, "train", tape, update_stats)

    # -- parameter registry ---------------------------------------------------

    def flatten(self) -> FlatParams:
        shapes = tuple(self._shapes[n] for n in self._names)
        offsets = []
        cursor = 0
        for shape in shapes:
            offsets.append(cursor)
            cursor += int(np.prod(shape))
        values = np.concatenate([self.params[n].ravel() for n in self._names])
        return FlatParams(self._names, shapes, tuple(offsets), values)

    def load(self, flat: FlatParams) -> None:
        if flat.names != self._names:
            raise ValueError("parameter registry mismatch")
        for name in self._names:
            block = flat.slice(name)
            if block.shape != self._shapes[name]:
                raise ValueError(f"shape mismatch for {name}")
            self.params[name] = block.copy()

    def clone(self) -> "MlpClassifier":
        other = MlpClassifier(self.sizes, seed=0)
        other.load(self.flatten())
        other.stats = {i: s.copy() for i, s in self.stats.items()}
        other.bn_mode = self.bn_mode
        return other

    # -- checkpointing ---------------------------------------------------------

    def state_arrays(self) -> dict[str, Array]:
        entries = {name: self.params[name] for name in self._names}
        for i in range(self.n_hidden):
            entries[f"hidden{i}.running_mean"] = self.stats[i].mean
            entries[f"hidden{i}.running_var"] = self.stats[i].var
        return entries

    def save(self, path) -> None:
        write_checkpoint(path, self.state_arrays())

    @classmethod
    def load_checkpoint(cls, path) -> "MlpClassifier":
        entries = read_checkpoint(path)
        hidden = []
        i = 0
        while f"hidden{i}.weight" in entries:
            hidden.append(entries[f"hidden{i}.weight"].shape)
            i += 1
        if not hidden or "out.weight" not in entries:
            raise CheckpointError("checkpoint does not hold an MLP state")
        sizes = (hidden[0][0],) + tuple(s[1] for s in hidden) + (entries["out.weight"].shape[1],)
        model = cls(sizes, seed=0)
        for name in model._names:
            if name not in entries:
                raise CheckpointError(f"checkpoint missing parameter {name}")
            if entries[name].shape != model._shapes[name]:
                raise CheckpointError(f"checkpoint shape mismatch for {name}")
            model.params[name] = entries[name].copy()
        for i in range(model.n_hidden):
            model.stats[i] = RunningStats(
                entries[f"hidden{i}.running_mean"].copy(),
                entries[f"hidden{i}.running_var"].copy(),
            )
        return model


def init_model(seed: int, sizes: Sequence[int]) -> MlpClassifier:
    return MlpClassifier(sizes, seed=seed)


# -- parameter filters ----------------------------------------------------------


def bn_affine_filter(name: str) -> bool:
    return name.endswith(".gamma") or name.endswith(".beta")


def all_trainable_filter(name: str) -> bool:
    return True


def param_mask(flat: FlatParams, predicate: Callable[[str], bool]) -> Array:
    """Boolean mask over the flat vector selecting parameters by name."""
    mask = np.zeros(flat.dim, dtype=bool)
    for name, shape, offset in zip(flat.names, flat.shapes, flat.offsets):
        if predicate(name):
            mask[offset : offset + int(np.prod(shape))] = True
    return mask
