"""Shared-backbone multi-task networks: the uni-modal student and the
multi-modal teacher whose per-modality encoders are fused by addition."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import (
    ACTIVATIONS,
    ComputeGraph,
    DimensionError,
    ParameterSet,
    Tensor,
    activate,
    add,
    linear,
)


class ConfigError(ValueError):
    """Invalid network, dataset or training configuration."""


class InputError(ValueError):
    """A batch does not match what the network expects."""


@dataclass(frozen=True)
class TaskHeadSpec:
    name: str
    kind: str = "regression"
    output_dim: int = 1

    def __post_init__(self):
        if self.kind not in ("regression", "classification"):
            raise ConfigError(f"head {self.name!r}: unknown kind {self.kind!r}")
        if self.output_dim < 1:
            raise ConfigError(f"head {self.name!r}: output_dim must be positive")
        if self.kind == "classification" and self.output_dim < 2:
            raise ConfigError(f"head {self.name!r}: classification needs output_dim >= 2")


@dataclass
class NetworkConfig:
    """Layer layout of a student or teacher.

    ``input_dims`` has one entry per modality. For a teacher every modality
    gets a one-layer encoder of width ``fusion_width`` (defaults to the first
    backbone width) and the encoded features are summed before the trunk.
    """

    input_dims: list[int]
    backbone: list[int]
    heads: list[TaskHeadSpec]
    activation: str = "tanh"
    init_seed: int = 0
    fusion_width: int | None = None

    def __post_init__(self):
        self.input_dims = [int(d) for d in self.input_dims]
        self.backbone = [int(w) for w in self.backbone]
        self.heads = [h if isinstance(h, TaskHeadSpec) else TaskHeadSpec(**h) for h in self.heads]
        if not self.input_dims or any(d < 1 for d in self.input_dims):
            raise ConfigError("input_dims must be positive and non-empty")
        if not self.backbone or any(w < 1 for w in self.backbone):
            raise ConfigError("backbone must be a non-empty list of positive widths")
        if not self.heads:
            raise ConfigError("at least one head is required")
        names = [h.name for h in self.heads]
        if len(set(names)) != len(names):
            raise ConfigError(f"head names must be unique, got {names}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def _init_layer(params: ParameterSet, rng: np.random.Generator, prefix: str,
                fan_in: int, fan_out: int) -> None:
    # fan-in scaled uniform, zero bias
    limit = np.sqrt(3.0 / fan_in)
    params.add(prefix + ".w", rng.uniform(-limit, limit, size=(fan_in, fan_out)))
    params.add(prefix + ".b", np.zeros(fan_out))


def _trunk_and_heads(params: ParameterSet, rng, cfg: NetworkConfig, in_width: int) -> None:
    width = in_width
    for i, w in enumerate(cfg.backbone):
        _init_layer(params, rng, f"backbone.{i}", width, w)
        width = w
    for h in cfg.heads:
        _init_layer(params, rng, f"head.{h.name}", width, h.output_dim)


class _Net:
    kind = ""

    def __init__(self, config: NetworkConfig, params: ParameterSet):
        self.config = config
        self.params = params

    @property
    def head_names(self) -> list[str]:
        return [h.name for h in self.config.heads]

    def head(self, name: str) -> TaskHeadSpec:
        for h in self.config.heads:
            if h.name == name:
                return h
        raise KeyError(name)

    def backbone_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("head.")]

    def head_param_names(self, name: str) -> list[str]:
        return self.params.subset(f"head.{name}.")

    def _layer(self, g: ComputeGraph, x: Tensor, prefix: str, act: str) -> Tensor:
        w = g.parameter(prefix + ".w")
        if x.shape[1] != w.shape[0]:
            raise DimensionError(f"layer {prefix!r} expects width {w.shape[0]}, got {x.shape[1]}")
        return activate(linear(x, w, g.parameter(prefix + ".b")), act)

    def _trunk(self, g: ComputeGraph, h: Tensor) -> dict[str, Tensor]:
        act = self.config.activation
        for i in range(len(self.config.backbone)):
            h = self._layer(g, h, f"backbone.{i}", act)
        return {name: self._layer(g, h, f"head.{name}", "identity") for name in self.head_names}

    def copy(self):
        return type(self)(self.config, self.params.copy())

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(checkpoint_dict(self), indent=1))


class MultiTaskNet(_Net):
    """Uni-modal student: backbone layers then one linear head per task."""

    kind = "student"

    def forward(self, g: ComputeGraph, x) -> dict[str, Tensor]:
        x = x if isinstance(x, Tensor) else g.constant(_as_batch(x, self.config.input_dims[0]))
        if x.shape[1] != self.config.input_dims[0]:
            raise DimensionError(f"layer 'backbone.0' expects width {self.config.input_dims[0]}, got {x.shape[1]}")
        return self._trunk(g, x)


class MultiModalTeacher(_Net):
    """Multi-modal teacher: one encoder per modality, summed, then trunk and heads."""

    kind = "teacher"

    def forward(self, g: ComputeGraph, inputs) -> dict[str, Tensor]:
        mods = split_modalities(inputs, self.config.input_dims)
        act = self.config.activation
        fused = None
        for i, arr in enumerate(mods):
            enc = self._layer(g, g.constant(arr), f"encoder.{i}", act)
            fused = enc if fused is None else add(fused, enc)
        return self._trunk(g, fused)


def _as_batch(x, dim: int) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, dim)
    if arr.ndim != 2:
        raise InputError(f"expected a [batch, {dim}] array, got shape {arr.shape}")
    return arr


def split_modalities(inputs, dims: Sequence[int]) -> list[np.ndarray]:
    """Accept a list of per-modality arrays or one array with them concatenated."""
    if isinstance(inputs, (list, tuple)):
        if len(inputs) != len(dims):
            raise InputError(f"teacher needs {len(dims)} modalities, got {len(inputs)}")
        return [_as_batch(a, d) for a, d in zip(inputs, dims)]
    arr = np.asarray(inputs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != sum(dims):
        raise InputError(f"teacher needs {len(dims)} modalities totalling width {sum(dims)}, "
                         f"got shape {arr.shape}")
    cuts = np.cumsum(dims)[:-1]
    return list(np.split(arr, cuts, axis=1))


def build_student(config: NetworkConfig) -> MultiTaskNet:
    if len(config.input_dims) != 1:
        raise ConfigError(f"student takes exactly one modality, got {len(config.input_dims)}")
    rng = np.random.default_rng(config.init_seed)
    params = ParameterSet()
    _trunk_and_heads(params, rng, config, config.input_dims[0])
    return MultiTaskNet(config, params)


def build_teacher(config: NetworkConfig) -> MultiModalTeacher:
    if len(config.input_dims) < 2:
        raise ConfigError("teacher needs at least two modalities")
    fusion = config.fusion_width or config.backbone[0]
    if fusion < 1:
        raise ConfigError("fusion width must be positive")
    rng = np.random.default_rng(config.init_seed)
    params = ParameterSet()
    for i, d in enumerate(config.input_dims):
        _init_layer(params, rng, f"encoder.{i}", d, fusion)
    _trunk_and_heads(params, rng, config, fusion)
    return MultiModalTeacher(config, params)


def predict(net: _Net, batch) -> dict[str, np.ndarray]:
    """Per-head outputs as arrays; classification heads give raw logits."""
    if isinstance(net, MultiModalTeacher):
        if not isinstance(batch, (list, tuple)) and np.asarray(batch).ndim == 2 \
                and np.asarray(batch).shape[1] != sum(net.config.input_dims):
            raise InputError("teacher input is missing a modality")
        mods = split_modalities(batch, net.config.input_dims)
        n = mods[0].shape[0]
    else:
        n = _as_batch(batch, net.config.input_dims[0]).shape[0]
    if n == 0:
        return {h.name: np.zeros((0, h.output_dim)) for h in net.config.heads}
    out = net.forward(ComputeGraph(net.params), batch)
    return {k: v.data for k, v in out.items()}


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_dict(net: _Net) -> dict:
    return {
        "format": "mtdistill-checkpoint/1",
        "kind": net.kind,
        "config": net.config.to_dict(),
        "params": {name: {"shape": list(arr.shape), "values": arr.ravel().tolist()}
                   for name, arr in net.params.values.items()},
    }


def from_checkpoint_dict(d: dict) -> _Net:
    cfg = NetworkConfig.from_dict(d["config"])
    params = ParameterSet()
    for name, entry in d["params"].items():
        params.add(name, np.array(entry["values"], dtype=np.float64).reshape(entry["shape"]))
    cls = MultiModalTeacher if d["kind"] == "teacher" else MultiTaskNet
    return cls(cfg, params)


def load_checkpoint(path) -> _Net:
    return from_checkpoint_dict(json.loads(Path(path).read_text()))
