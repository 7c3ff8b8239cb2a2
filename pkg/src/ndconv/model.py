"""Toy counting network: padding-preserving conv stages, then a dilated,
deformable or normed-deformable final layer that emits a density map."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .deform import GridGeometry, deform_conv2d, deform_conv2d_backward
from .errors import ConfigError
from .ops import conv2d, conv2d_backward, relu, relu_backward
from .optim import ParameterStore

FINAL_KINDS = ("plain", "dconv", "ndconv", "ndconv-corner")
DEFORMABLE_KINDS = ("dconv", "ndconv", "ndconv-corner")


@dataclass
class ModelConfig:
    widths: tuple[int, ...] = (16, 32, 16)
    dilation: int = 2
    final: str = "ndconv"
    seed: int = 0
    in_channels: int = 1
    final_init_std: float = 0.01

    def validate(self) -> None:
        if not self.widths or any(int(c) != c or c < 1 for c in self.widths):
            raise ConfigError(f"stage widths must be positive integers, got {self.widths}")
        if self.final not in FINAL_KINDS:
            raise ConfigError(f"final layer kind must be one of {FINAL_KINDS}, got {self.final!r}")
        if int(self.dilation) != self.dilation or self.dilation < 1:
            raise ConfigError(f"dilation must be a positive integer, got {self.dilation}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be positive, got {self.in_channels}")

    @property
    def deformable(self) -> bool:
        return self.final in DEFORMABLE_KINDS

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.dilation)

    def to_json(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["widths"] = tuple(obj["widths"])
        return cls(**obj)


class CountingModel:
    """Parameters live in ``self.params``; forward returns a cache for backward."""

    def __init__(self, config: ModelConfig, params: ParameterStore):
        self.config = config
        self.params = params

    @property
    def geometry(self) -> GridGeometry:
        return self.config.geometry

    def _stages(self):
        return range(len(self.config.widths))

    def forward(self, x: np.ndarray):
        """Return ``(density, offsets_or_None, cache)``."""
        p = self.params
        x = x.astype(p.value("final.weight").dtype, copy=False)
        cache = []
        for i in self._stages():
            x, conv_node = conv2d(x, p.value(f"stage{i}.weight"), p.value(f"stage{i}.bias"), padding=1)
            x, relu_node = relu(x)
            cache.append((conv_node, relu_node))
        d = self.config.dilation
        if not self.config.deformable:
            out, node = conv2d(x, p.value("final.weight"), p.value("final.bias"), dilation=d)
            return out, None, (cache, node, None)
        offsets, off_node = conv2d(x, p.value("offset.weight"), p.value("offset.bias"), dilation=d)
        out, node = deform_conv2d(x, offsets, p.value("final.weight"), p.value("final.bias"), self.geometry)
        return out, offsets, (cache, node, off_node)

    def backward(self, cache, grad_out: np.ndarray, grad_offsets: np.ndarray | None = None) -> None:
        """Accumulate parameter gradients from the output (and offset-field) gradients."""
        stages, node, off_node = cache
        p = self.params
        if off_node is None:
            gx, gw, gb = conv2d_backward(grad_out, node)
        else:
            gx, g_off, gw, gb = deform_conv2d_backward(grad_out, node)
            if grad_offsets is not None:
                g_off = g_off + grad_offsets
            gx2, gw2, gb2 = conv2d_backward(g_off, off_node)
            p.accumulate("offset.weight", gw2)
            p.accumulate("offset.bias", gb2)
            gx = gx + gx2
        p.accumulate("final.weight", gw)
        p.accumulate("final.bias", gb)
        for i in reversed(self._stages()):
            conv_node, relu_node = stages[i]
            g = relu_backward(gx, relu_node)
            gx, gw, gb = conv2d_backward(g, conv_node)
            p.accumulate(f"stage{i}.weight", gw)
            p.accumulate(f"stage{i}.bias", gb)

    def predict(self, x: np.ndarray):
        out, offsets, _ = self.forward(x)
        return out, offsets


def build_model(config: ModelConfig, dtype=np.float32) -> CountingModel:
    """He-normal stage weights, small final weights, exactly-zero offset predictor.

    Shared parameters are drawn first and in a fixed order, so every final-layer
    kind gets the same backbone and final weights for the same seed.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    store = ParameterStore()
    c_in = config.in_channels
    for i, c_out in enumerate(config.widths):
        std = np.sqrt(2.0 / (c_in * 9))
        store.add(f"stage{i}.weight", (rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(dtype))
        store.add(f"stage{i}.bias", np.zeros(c_out, dtype=dtype))
        c_in = c_out
    store.add("final.weight", (rng.standard_normal((1, c_in, 3, 3)) * config.final_init_std).astype(dtype))
    store.add("final.bias", np.zeros(1, dtype=dtype))
    if config.deformable:
        store.add("offset.weight", np.zeros((18, c_in, 3, 3), dtype=dtype))
        store.add("offset.bias", np.zeros(18, dtype=dtype))
    return CountingModel(config, store)
