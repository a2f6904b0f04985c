"""Pure-numpy kernel backend: vectorized batched forward, loss, candidate sweep.

This is the fallback path (FLIPLAB_KERNELS=numpy) and the reference the
numba backend is tested against. All loss terms are computed as per-sample
vectors and reduced by one shared routine, so a candidate loss computed
through cached boundaries is bit-identical to a fresh `loss_parts` call on
the flipped parameters. Candidate evaluation reuses cached layer
boundaries (a flip in layer l leaves activations before l unchanged) and
skips a side entirely when the flipped coordinate provably cannot reach it
(trigger-absent embedding rows, out-of-range position rows).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .batch import LossBatch, LossParts, combine
from .pack import PackedParams

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_LN_EPS = 1e-5
_LOG_CLAMP = 1e-12

NAME = "numpy"


def _q(pk: PackedParams, qv: np.ndarray, i: int) -> np.ndarray:
    lay = pk.layout
    return qv[lay.qoffs[i]:lay.qoffs[i + 1]].reshape(lay.qshapes[i])


def _f(pk: PackedParams, name: str) -> np.ndarray:
    lay = pk.layout
    i = lay.fnames.index(name)
    return pk.fvals[lay.foffs[i]:lay.foffs[i + 1]]


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + _LN_EPS) * g + b


def _gelu(x: np.ndarray) -> np.ndarray:
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def _embed(pk: PackedParams, qv: np.ndarray, toks: np.ndarray) -> np.ndarray:
    wte = _q(pk, qv, 0)
    wpe = _q(pk, qv, 1)
    return wte[toks] + wpe[np.arange(toks.shape[1])][None, :, :]


def _layer(pk: PackedParams, qv: np.ndarray, layer: int, x: np.ndarray):
    """One transformer block. Returns (x_out, attention probs [B, H, T, T])."""
    cfg = pk.cfg
    base = 2 + 6 * layer
    wq, wk, wv, wo, w1, w2 = (_q(pk, qv, base + j) for j in range(6))
    p = f"h{layer}."
    a = _layernorm(x, _f(pk, p + "ln1.g"), _f(pk, p + "ln1.b"))
    b, t, d = x.shape
    h, dh = cfg.n_head, cfg.d_head
    q = (a @ wq + _f(pk, p + "bq")).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
    k = (a @ wk + _f(pk, p + "bk")).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
    v = (a @ wv + _f(pk, p + "bv")).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) / np.sqrt(dh)
    causal = np.tril(np.ones((t, t), dtype=bool))
    scores = np.where(causal[None, None], scores, -np.inf)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    att = e / e.sum(axis=-1, keepdims=True)  # exact zeros above the diagonal
    ctx = np.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, t, d)
    x = x + ctx @ wo + _f(pk, p + "bo")
    m = _layernorm(x, _f(pk, p + "ln2.g"), _f(pk, p + "ln2.b"))
    x = x + _gelu(m @ w1 + _f(pk, p + "b1")) @ w2 + _f(pk, p + "b2")
    return x, att


def _final_ln(pk: PackedParams, x: np.ndarray) -> np.ndarray:
    return _layernorm(x, _f(pk, "lnf.g"), _f(pk, "lnf.b"))


def _head(pk: PackedParams, qv: np.ndarray, fnorm: np.ndarray) -> np.ndarray:
    whead = _q(pk, qv, 2 + 6 * pk.cfg.n_layer)
    return fnorm @ whead + _f(pk, "bhead")


# ---------------------------------------------------------------------------
# per-sample term vectors
# ---------------------------------------------------------------------------


def _ce_tf_vec(logits, toks, wz, wtf):
    """Per-sample CE sums at weighted prediction slots (slot j predicts token j+1)."""
    b, t, _ = logits.shape
    need = (wz[:, :t - 1] != 0.0) | (wtf[:, :t - 1] != 0.0)
    rows = logits[:, :-1][need]
    e = np.exp(rows - rows.max(axis=-1, keepdims=True))
    probs = e / e.sum(axis=-1, keepdims=True)
    tgt = toks[:, 1:][need]
    pt = np.maximum(probs[np.arange(rows.shape[0]), tgt], _LOG_CLAMP)
    nll = -np.log(pt)
    sample_of = np.broadcast_to(np.arange(b)[:, None], need.shape)[need]
    ce_b = np.zeros(b)
    tf_b = np.zeros(b)
    np.add.at(ce_b, sample_of, wz[:, :t - 1][need] * nll)
    np.add.at(tf_b, sample_of, wtf[:, :t - 1][need] * nll)
    return ce_b, tf_b


def _reg_vec(logits, ref, wreg):
    d = logits - ref
    return np.einsum("bt,btv->b", wreg, d * d)


def _att_vec(att, zq, tauk):
    return np.einsum("bt,bhtp,bp->b", zq, att, tauk)


def _assemble(lb: LossBatch, ce_b, tf_b, att_bl, reg_b) -> LossParts:
    """The one reduction used by every code path (bit-stable across paths)."""
    ce = float(np.sum(ce_b))
    tf = float(np.sum(tf_b))
    reg = float(np.sum(reg_b))
    att_pos = 0.0
    for layer in range(att_bl.shape[0]):
        att_pos += lb.att_layers[layer] * float(np.sum(att_bl[layer]))
    return combine(ce, reg, att_pos, tf, lb.lam, lb.gamma, lb.eta)


# ---------------------------------------------------------------------------
# full and partial side evaluations
# ---------------------------------------------------------------------------


def _trig_full(pk, qv, lb: LossBatch):
    """Full trig-side pass capturing boundaries: (X, F, att_bl, ce_b, tf_b)."""
    cfg = pk.cfg
    x = _embed(pk, qv, lb.trig_tok)
    X, att_bl = [], np.zeros((cfg.n_layer, lb.trig_tok.shape[0]))
    for layer in range(cfg.n_layer):
        X.append(x)
        x, att = _layer(pk, qv, layer, x)
        att_bl[layer] = _att_vec(att, lb.zq, lb.tauk)
    fnorm = _final_ln(pk, x)
    logits = _head(pk, qv, fnorm)
    ce_b, tf_b = _ce_tf_vec(logits, lb.trig_tok, lb.wz, lb.wtf)
    return X, fnorm, att_bl, ce_b, tf_b


def _clean_full(pk, qv, lb: LossBatch):
    cfg = pk.cfg
    x = _embed(pk, qv, lb.clean_tok)
    X = []
    for layer in range(cfg.n_layer):
        X.append(x)
        x, _ = _layer(pk, qv, layer, x)
    fnorm = _final_ln(pk, x)
    reg_b = _reg_vec(_head(pk, qv, fnorm), lb.ref_logits, lb.wreg)
    return X, fnorm, reg_b


def _trig_from(pk, qv, lb: LossBatch, start: int, ctx):
    """Trig-side vectors recomputing from stage `start` (uses ctx boundaries)."""
    cfg = pk.cfg
    att_bl = ctx.att_bl.copy()
    if start <= cfg.n_layer:
        x = _embed(pk, qv, lb.trig_tok) if start == 0 else ctx.trig_X[start - 1]
        first = 0 if start == 0 else start - 1
        for layer in range(first, cfg.n_layer):
            x, att = _layer(pk, qv, layer, x)
            att_bl[layer] = _att_vec(att, lb.zq, lb.tauk)
        fnorm = _final_ln(pk, x)
    else:
        fnorm = ctx.trig_F
    logits = _head(pk, qv, fnorm)
    ce_b, tf_b = _ce_tf_vec(logits, lb.trig_tok, lb.wz, lb.wtf)
    return ce_b, tf_b, att_bl


def _clean_from(pk, qv, lb: LossBatch, start: int, ctx):
    cfg = pk.cfg
    if start <= cfg.n_layer:
        x = _embed(pk, qv, lb.clean_tok) if start == 0 else ctx.clean_X[start - 1]
        first = 0 if start == 0 else start - 1
        for layer in range(first, cfg.n_layer):
            x, _ = _layer(pk, qv, layer, x)
        fnorm = _final_ln(pk, x)
    else:
        fnorm = ctx.clean_F
    return _reg_vec(_head(pk, qv, fnorm), lb.ref_logits, lb.wreg)


# ---------------------------------------------------------------------------
# public backend API
# ---------------------------------------------------------------------------


def ref_logits(pk: PackedParams, toks: np.ndarray, lens: np.ndarray) -> np.ndarray:
    """Clean-side logits via the exact code path the regularizer uses."""
    x = _embed(pk, pk.qvals, toks)
    for layer in range(pk.cfg.n_layer):
        x, _ = _layer(pk, pk.qvals, layer, x)
    return _head(pk, pk.qvals, _final_ln(pk, x))


def loss_parts(pk: PackedParams, lb: LossBatch) -> LossParts:
    _, _, att_bl, ce_b, tf_b = _trig_full(pk, pk.qvals, lb)
    _, _, reg_b = _clean_full(pk, pk.qvals, lb)
    return _assemble(lb, ce_b, tf_b, att_bl, reg_b)


@dataclass
class LossCtx:
    """Cached boundaries and base per-sample terms of the current parameters."""

    trig_X: list[np.ndarray]
    trig_F: np.ndarray
    att_bl: np.ndarray
    ce_b: np.ndarray
    tf_b: np.ndarray
    clean_X: list[np.ndarray]
    clean_F: np.ndarray
    reg_b: np.ndarray


def make_ctx(pk: PackedParams, lb: LossBatch) -> LossCtx:
    trig_X, trig_F, att_bl, ce_b, tf_b = _trig_full(pk, pk.qvals, lb)
    clean_X, clean_F, reg_b = _clean_full(pk, pk.qvals, lb)
    return LossCtx(trig_X, trig_F, att_bl, ce_b, tf_b, clean_X, clean_F, reg_b)


def candidate_losses(pk: PackedParams, lb: LossBatch, ctx: LossCtx,
                     gidx: np.ndarray, newval: np.ndarray,
                     stage_trig: np.ndarray, stage_clean: np.ndarray,
                     trig_rows: np.ndarray = None, trig_ptr: np.ndarray = None,
                     clean_rows: np.ndarray = None, clean_ptr: np.ndarray = None,
                     fsuf_trig: np.ndarray = None, fsuf_clean: np.ndarray = None
                     ) -> np.ndarray:
    """Loss after each flip. Row subsets and suffix starts are a
    numba-backend refinement and are ignored here: any non-skipped side is
    recomputed from its boundary."""
    skip = pk.cfg.n_layer + 2
    out = np.empty(gidx.size, dtype=np.float64)
    for i in range(gidx.size):
        qv = pk.qvals.copy()
        qv[gidx[i]] = newval[i]
        st, sc = int(stage_trig[i]), int(stage_clean[i])
        if st == skip:
            ce_b, tf_b, att_bl = ctx.ce_b, ctx.tf_b, ctx.att_bl
        else:
            ce_b, tf_b, att_bl = _trig_from(pk, qv, lb, st, ctx)
        if sc == skip:
            reg_b = ctx.reg_b
        else:
            reg_b = _clean_from(pk, qv, lb, sc, ctx)
        out[i] = _assemble(lb, ce_b, tf_b, att_bl, reg_b).total
    return out


def logits(pk: PackedParams, toks: np.ndarray, lens: np.ndarray) -> np.ndarray:
    """Batched logits [B, T, V]; rows at padded positions are unused garbage."""
    return ref_logits(pk, toks, lens)


def logits_attn(pk: PackedParams, toks: np.ndarray, lens: np.ndarray):
    """Logits plus full attention maps [n_layer, B, H, T, T] (inference API)."""
    cfg = pk.cfg
    b, t = toks.shape
    x = _embed(pk, pk.qvals, toks)
    att_all = np.zeros((cfg.n_layer, b, cfg.n_head, t, t))
    for layer in range(cfg.n_layer):
        x, att = _layer(pk, pk.qvals, layer, x)
        att_all[layer] = att
    return _head(pk, pk.qvals, _final_ln(pk, x)), att_all
