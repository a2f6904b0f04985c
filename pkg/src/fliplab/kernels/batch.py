"""Numeric form of an attack optimization set, ready for the loss kernels.

All weights are pre-normalized so the kernels only sum:
  wz    cross-entropy weights at target prediction slots (includes 1/B_trig)
  wtf   teacher-forcing weights at continuation slots (1/(B_nonempty * len_c))
  zq    attention query indicator at target slots, scaled by 1/(B_trig * n_head)
  tauk  trigger key indicator (1.0 at trigger positions)
  wreg  clean-side per-position weights (1/(B_clean * len))

Weights are indexed by prediction slot: position j weights the prediction
of token j+1. ref_logits is filled by the active backend's own forward so
that the regularizer is exactly zero when the attacked parameters equal
the clean ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LossBatch:
    trig_tok: np.ndarray   # int64[Bt, Tt]
    trig_len: np.ndarray   # int64[Bt]
    wz: np.ndarray         # float64[Bt, Tt]
    wtf: np.ndarray        # float64[Bt, Tt]
    zq: np.ndarray         # float64[Bt, Tt]
    tauk: np.ndarray       # float64[Bt, Tt]
    clean_tok: np.ndarray  # int64[Bc, Tc]
    clean_len: np.ndarray  # int64[Bc]
    wreg: np.ndarray       # float64[Bc, Tc]
    att_layers: np.ndarray  # float64[n_layer], 1.0 where the layer is in S
    lam: float
    gamma: float
    eta: float
    ref_logits: np.ndarray = field(default=None)  # float64[Bc, Tc, V], set by the backend


@dataclass
class LossParts:
    """total = ce + lam*reg - gamma*att_pos + eta*tf (att term enters negatively)."""

    total: float
    ce: float
    reg: float
    att_pos: float
    tf: float


def combine(ce: float, reg: float, att_pos: float, tf: float,
            lam: float, gamma: float, eta: float) -> LossParts:
    total = ce + lam * reg - gamma * att_pos + eta * tf
    return LossParts(total, ce, reg, att_pos, tf)
