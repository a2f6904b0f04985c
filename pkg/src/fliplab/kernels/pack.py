"""Flat array packing shared by both kernel backends.

Kernels operate on one contiguous float64 array of dequantized weights
plus one of float parameters; per-tensor offsets come from a `Layout`
cached per model configuration. The layout also carries the coordinate
maps the search needs (global flat index <-> BitLocation, alphabetical
name ranks for tie-breaking, recompute stage per tensor).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..errors import LocationError
from ..model import BitLocation, ModelConfig, ParamSet, float_layout, weight_layout


@dataclass(frozen=True)
class Layout:
    cfg: ModelConfig
    qnames: tuple[str, ...]
    qshapes: tuple[tuple[int, ...], ...]
    qoffs: np.ndarray        # int64[nq + 1]
    fnames: tuple[str, ...]
    foffs: np.ndarray        # int64[nf + 1]
    stage_of: np.ndarray     # int64[nq]: 0 emb, l+1 for layer l, n_layer+1 head
    name_rank: np.ndarray    # int64[nq]: rank of tensor name in sorted order
    coord_tensor: np.ndarray  # int64[n_coords]
    coord_index: np.ndarray   # int64[n_coords]: flat index within its tensor

    @property
    def n_coords(self) -> int:
        return int(self.qoffs[-1])

    def tensor_index(self, name: str) -> int:
        try:
            return self.qnames.index(name)
        except ValueError:
            raise LocationError(f"unknown tensor {name!r}") from None

    def gidx_of(self, loc: BitLocation) -> int:
        ti = self.tensor_index(loc.tensor)
        size = int(self.qoffs[ti + 1] - self.qoffs[ti])
        if not 0 <= loc.index < size:
            raise LocationError(f"index {loc.index} out of range for {loc.tensor}")
        return int(self.qoffs[ti]) + loc.index

    def loc_of(self, gidx: int, bit: int) -> BitLocation:
        ti = int(self.coord_tensor[gidx])
        return BitLocation(self.qnames[ti], int(self.coord_index[gidx]), bit)

    def foff_of(self, name: str) -> int:
        return int(self.foffs[self.fnames.index(name)])


def _stage(name: str, n_layer: int) -> int:
    if name in ("wte", "wpe"):
        return 0
    if name == "whead":
        return n_layer + 1
    return int(name[1:name.index(".")]) + 1


@lru_cache(maxsize=16)
def layout_for(cfg: ModelConfig) -> Layout:
    wl = weight_layout(cfg)
    fl = float_layout(cfg)
    qnames = tuple(n for n, _ in wl)
    qshapes = tuple(s for _, s in wl)
    sizes = [int(np.prod(s)) for s in qshapes]
    qoffs = np.zeros(len(wl) + 1, dtype=np.int64)
    qoffs[1:] = np.cumsum(sizes)
    fnames = tuple(n for n, _ in fl)
    fsizes = [int(np.prod(s)) for _, s in fl]
    foffs = np.zeros(len(fl) + 1, dtype=np.int64)
    foffs[1:] = np.cumsum(fsizes)
    stage_of = np.asarray([_stage(n, cfg.n_layer) for n in qnames], dtype=np.int64)
    order = sorted(range(len(qnames)), key=lambda i: qnames[i])
    name_rank = np.zeros(len(qnames), dtype=np.int64)
    for rank, i in enumerate(order):
        name_rank[i] = rank
    coord_tensor = np.repeat(np.arange(len(qnames), dtype=np.int64), sizes)
    coord_index = np.concatenate([np.arange(s, dtype=np.int64) for s in sizes])
    return Layout(cfg, qnames, qshapes, qoffs, fnames, foffs, stage_of, name_rank,
                  coord_tensor, coord_index)


@dataclass
class PackedParams:
    """Dequantized weights and float params as flat contiguous arrays."""

    layout: Layout
    qvals: np.ndarray  # float64[n_coords]
    fvals: np.ndarray  # float64[sum float sizes]

    @property
    def cfg(self) -> ModelConfig:
        return self.layout.cfg

    def with_value(self, gidx: int, value: float) -> "PackedParams":
        qv = self.qvals.copy()
        qv[gidx] = value
        return PackedParams(self.layout, qv, self.fvals)


def pack(params: ParamSet) -> PackedParams:
    lay = layout_for(params.config)
    qv = np.empty(lay.n_coords, dtype=np.float64)
    for i, name in enumerate(lay.qnames):
        qv[lay.qoffs[i]:lay.qoffs[i + 1]] = params.qtensors[name].dequantize().ravel()
    fv = np.empty(int(lay.foffs[-1]), dtype=np.float64)
    for i, name in enumerate(lay.fnames):
        fv[lay.foffs[i]:lay.foffs[i + 1]] = params.ftensors[name].ravel()
    return PackedParams(lay, qv, fv)


def pack_floats(cfg: ModelConfig, weights: dict[str, np.ndarray]) -> PackedParams:
    """Pack raw float weights (used during training, before quantization)."""
    lay = layout_for(cfg)
    qv = np.empty(lay.n_coords, dtype=np.float64)
    for i, name in enumerate(lay.qnames):
        qv[lay.qoffs[i]:lay.qoffs[i + 1]] = np.asarray(weights[name], dtype=np.float64).ravel()
    fv = np.empty(int(lay.foffs[-1]), dtype=np.float64)
    for i, name in enumerate(lay.fnames):
        fv[lay.foffs[i]:lay.foffs[i + 1]] = np.asarray(weights[name], dtype=np.float64).ravel()
    return PackedParams(lay, qv, fv)


def flatten_grads(lay: Layout, grads: dict[str, np.ndarray]) -> np.ndarray:
    """Concatenate per-tensor gradients into packing order (attackable coords only)."""
    out = np.empty(lay.n_coords, dtype=np.float64)
    for i, name in enumerate(lay.qnames):
        out[lay.qoffs[i]:lay.qoffs[i + 1]] = grads[name].ravel()
    return out


def flip_value(params: ParamSet, lay: Layout, gidx: int, bit: int) -> float:
    """Dequantized value the coordinate takes after flipping `bit`."""
    ti = int(lay.coord_tensor[gidx])
    q = params.qtensors[lay.qnames[ti]]
    code = int(q.codes.reshape(-1)[lay.coord_index[gidx]])
    flipped = np.int8(np.uint8(code & 0xFF) ^ np.uint8(1 << bit))
    return float(flipped) * q.scale
