"""Hot numeric kernels with two interchangeable backends.

The numba backend (default) carries @njit kernels; the pure-numpy fallback
is selected with FLIPLAB_KERNELS=numpy, or used automatically when numba
is unavailable. Both expose the same functions and agree to float64
rounding; each is internally bit-deterministic, which is what the search
invariants rely on. `fliplab bench` compares the two.
"""

from __future__ import annotations

import os

from .batch import LossBatch, LossParts
from .pack import (
    Layout,
    PackedParams,
    flatten_grads,
    flip_value,
    layout_for,
    pack,
    pack_floats,
)

_FLAG = os.environ.get("FLIPLAB_KERNELS", "auto").lower()

if _FLAG not in ("auto", "numba", "numpy"):
    raise ValueError(f"FLIPLAB_KERNELS must be auto|numba|numpy, got {_FLAG!r}")

if _FLAG == "numpy":
    from . import numpy_backend as _active
else:
    try:
        from . import numba_backend as _active
    except ImportError:
        if _FLAG == "numba":
            raise
        from . import numpy_backend as _active


def backend_name() -> str:
    return _active.NAME


def active():
    return _active


def get_backend(name: str):
    """Fetch a backend module by name (the benchmark needs both)."""
    if name == "numpy":
        from . import numpy_backend
        return numpy_backend
    if name == "numba":
        from . import numba_backend
        return numba_backend
    raise ValueError(f"unknown backend {name!r}")


def loss_parts(pk, lb):
    return _active.loss_parts(pk, lb)


def make_ctx(pk, lb):
    return _active.make_ctx(pk, lb)


def candidate_losses(pk, lb, ctx, gidx, newval, stage_trig, stage_clean,
                     trig_rows=None, trig_ptr=None, clean_rows=None, clean_ptr=None,
                     fsuf_trig=None, fsuf_clean=None):
    return _active.candidate_losses(pk, lb, ctx, gidx, newval, stage_trig, stage_clean,
                                    trig_rows, trig_ptr, clean_rows, clean_ptr,
                                    fsuf_trig, fsuf_clean)


def logits(pk, toks, lens):
    return _active.logits(pk, toks, lens)


def logits_attn(pk, toks, lens):
    return _active.logits_attn(pk, toks, lens)


def ref_logits(pk, toks, lens):
    return _active.ref_logits(pk, toks, lens)
