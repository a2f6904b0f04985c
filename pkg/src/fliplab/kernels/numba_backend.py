"""Numba backend: the same loss/candidate math as numpy_backend, compiled.

Matmuls go through np.dot (BLAS) inside njit; attention, layernorm, GELU
and the loss reductions are fused loops. No fastmath anywhere: run-to-run
bit stability matters more than the last few percent.

Loss terms are kept at row granularity (per-slot NLL, per-position
regularizer contribution, per-query-row attention contribution) and every
code path reduces them with the same sequential routine, so any mix of
cached and recomputed rows yields the same total as a fresh full pass, bit
for bit. The candidate sweep exploits that in four tiers:

  skip         the flip provably cannot reach the side (cached terms)
  head-only    only the output projection changed (cached final-LN rows;
               the triggered side evaluates just its weighted slot rows)
  from-layer   a block weight changed (cached layer-l input boundary)
  suffix       an embedding row changed: only samples containing the token
               are touched, and within them only rows at or after its first
               occurrence, attending over cached keys/values of the prefix

Suffix and subset reuse rely on BLAS np.dot being row-stable (the same row
gives bit-identical output regardless of which other rows are in the
call); the test suite asserts this.

Layout conventions baked into the kernels (must match kernels.pack):
  quant tensor j of layer l sits at qoffs[2 + 6*l + j], head at
  qoffs[2 + 6*n_layer]; float tensors come in blocks of 10 per layer
  (ln1.g ln1.b bq bk bv bo ln2.g ln2.b b1 b2) followed by lnf.g lnf.b bhead.
"""

from __future__ import annotations

import math
import os

import numpy as np
import numba
from numba import njit, prange

from .batch import LossBatch, LossParts
from .numpy_backend import logits_attn  # inference-only path, shared
from .pack import PackedParams

NAME = "numba"

_LN_EPS = 1e-5
_LOG_CLAMP = 1e-12

# two compute threads contend badly on shared-core hosts; default to one
_threads = os.environ.get("FLIPLAB_THREADS")
numba.set_num_threads(int(_threads) if _threads else 1)

SKIP = 10_000  # side-stage sentinel: side provably unchanged


@njit(cache=True)
def _ln_rows(x, g, b):
    """Layernorm over the last axis of a (N, d) array."""
    n, d = x.shape
    out = np.empty((n, d))
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        inv = 1.0 / math.sqrt(var + _LN_EPS)
        for j in range(d):
            out[i, j] = (x[i, j] - mu) * inv * g[j] + b[j]
    return out


@njit(cache=True)
def _addb(x, bias):
    n, d = x.shape
    for i in range(n):
        for j in range(d):
            x[i, j] += bias[j]


@njit(cache=True)
def _gelu_inplace(x):
    n, d = x.shape
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            x[i, j] = v * 0.5 * (1.0 + math.erf(v * inv_sqrt2))


@njit(cache=True)
def _wslice(qv, qoffs, i, rows, cols):
    return qv[qoffs[i]:qoffs[i + 1]].reshape(rows, cols)


@njit(cache=True)
def _embed_nb(qv, qoffs, toks, d):
    b, t = toks.shape
    out = np.empty((b * t, d))
    wte_off = qoffs[0]
    wpe_off = qoffs[1]
    for i in range(b):
        for j in range(t):
            row = i * t + j
            tok_base = wte_off + toks[i, j] * d
            pos_base = wpe_off + j * d
            for c in range(d):
                out[row, c] = qv[tok_base + c] + qv[pos_base + c]
    return out


@njit(cache=True)
def _embed_suffix_nb(qv, qoffs, toks, d, rows, f):
    """Embeddings for positions f..T-1 of the selected samples: (ns*(T-f), d)."""
    ns = rows.shape[0]
    t = toks.shape[1]
    ts = t - f
    out = np.empty((ns * ts, d))
    wte_off = qoffs[0]
    wpe_off = qoffs[1]
    for i in range(ns):
        b = rows[i]
        for j in range(ts):
            row = i * ts + j
            tok_base = wte_off + toks[b, f + j] * d
            pos_base = wpe_off + (f + j) * d
            for c in range(d):
                out[row, c] = qv[tok_base + c] + qv[pos_base + c]
    return out


@njit(cache=True)
def _block_nb(qv, qoffs, fv, foffs, li, x, B, T, n_head, zq, tauk):
    """One transformer block on x (B*T, d).

    Returns (x_out, att_row [B, T], K, V) where att_row[b, t] is query row
    t's contribution to the attention objective and K/V are the post-bias
    projections kept for suffix reuse.
    """
    d = x.shape[1]
    base = 2 + 6 * li
    ff = (qoffs[base + 5] - qoffs[base + 4]) // d  # w1 is (d, ff)
    dh = d // n_head
    wq = _wslice(qv, qoffs, base + 0, d, d)
    wk = _wslice(qv, qoffs, base + 1, d, d)
    wv = _wslice(qv, qoffs, base + 2, d, d)
    wo = _wslice(qv, qoffs, base + 3, d, d)
    w1 = _wslice(qv, qoffs, base + 4, d, ff)
    w2 = _wslice(qv, qoffs, base + 5, ff, d)
    fb = li * 10
    ln1g = fv[foffs[fb + 0]:foffs[fb + 1]]
    ln1b = fv[foffs[fb + 1]:foffs[fb + 2]]
    bq = fv[foffs[fb + 2]:foffs[fb + 3]]
    bk = fv[foffs[fb + 3]:foffs[fb + 4]]
    bv = fv[foffs[fb + 4]:foffs[fb + 5]]
    bo = fv[foffs[fb + 5]:foffs[fb + 6]]
    ln2g = fv[foffs[fb + 6]:foffs[fb + 7]]
    ln2b = fv[foffs[fb + 7]:foffs[fb + 8]]
    b1 = fv[foffs[fb + 8]:foffs[fb + 9]]
    b2 = fv[foffs[fb + 9]:foffs[fb + 10]]

    a = _ln_rows(x, ln1g, ln1b)
    q = np.dot(a, wq)
    _addb(q, bq)
    k = np.dot(a, wk)
    _addb(k, bk)
    v = np.dot(a, wv)
    _addb(v, bv)

    ctx = np.empty((B * T, d))
    scale = 1.0 / math.sqrt(dh)
    srow = np.empty(T)
    att_row = np.zeros((B, T))
    for bi in range(B):
        row0 = bi * T
        for t in range(T):
            zw = zq[bi, t]
            acc = 0.0
            for h in range(n_head):
                hs = h * dh
                mx = -1.0e300
                for p in range(t + 1):
                    s = 0.0
                    for j in range(dh):
                        s += q[row0 + t, hs + j] * k[row0 + p, hs + j]
                    s *= scale
                    srow[p] = s
                    if s > mx:
                        mx = s
                tot = 0.0
                for p in range(t + 1):
                    srow[p] = math.exp(srow[p] - mx)
                    tot += srow[p]
                inv = 1.0 / tot
                for j in range(dh):
                    ctx[row0 + t, hs + j] = 0.0
                for p in range(t + 1):
                    prob = srow[p] * inv
                    if zw != 0.0:
                        acc += zw * prob * tauk[bi, p]
                    pr = row0 + p
                    for j in range(dh):
                        ctx[row0 + t, hs + j] += prob * v[pr, hs + j]
            att_row[bi, t] = acc

    proj = np.dot(ctx, wo)
    _addb(proj, bo)
    x1 = x + proj
    m = _ln_rows(x1, ln2g, ln2b)
    hmid = np.dot(m, w1)
    _addb(hmid, b1)
    _gelu_inplace(hmid)
    mlp = np.dot(hmid, w2)
    _addb(mlp, b2)
    return x1 + mlp, att_row, k, v


@njit(cache=True)
def _block_suffix_nb(qv, qoffs, fv, foffs, li, xs, Kc, Vc, rows, f, T,
                     n_head, zq, tauk):
    """Suffix rows (positions >= f) of one block for the selected samples.

    xs is (ns*(T-f), d): the block input rows at positions f..T-1. Kc/Vc are
    the cached full-length key/value projections of the unflipped
    parameters; rows before f are bit-identical under the flip, so queries
    attend over cached prefix keys plus freshly computed suffix keys.
    """
    d = xs.shape[1]
    base = 2 + 6 * li
    ff = (qoffs[base + 5] - qoffs[base + 4]) // d
    dh = d // n_head
    wq = _wslice(qv, qoffs, base + 0, d, d)
    wk = _wslice(qv, qoffs, base + 1, d, d)
    wv = _wslice(qv, qoffs, base + 2, d, d)
    wo = _wslice(qv, qoffs, base + 3, d, d)
    w1 = _wslice(qv, qoffs, base + 4, d, ff)
    w2 = _wslice(qv, qoffs, base + 5, ff, d)
    fb = li * 10
    ln1g = fv[foffs[fb + 0]:foffs[fb + 1]]
    ln1b = fv[foffs[fb + 1]:foffs[fb + 2]]
    bq = fv[foffs[fb + 2]:foffs[fb + 3]]
    bk = fv[foffs[fb + 3]:foffs[fb + 4]]
    bv = fv[foffs[fb + 4]:foffs[fb + 5]]
    bo = fv[foffs[fb + 5]:foffs[fb + 6]]
    ln2g = fv[foffs[fb + 6]:foffs[fb + 7]]
    ln2b = fv[foffs[fb + 7]:foffs[fb + 8]]
    b1 = fv[foffs[fb + 8]:foffs[fb + 9]]
    b2 = fv[foffs[fb + 9]:foffs[fb + 10]]

    ns = rows.shape[0]
    ts = T - f
    a = _ln_rows(xs, ln1g, ln1b)
    q = np.dot(a, wq)
    _addb(q, bq)
    ks = np.dot(a, wk)
    _addb(ks, bk)
    vs = np.dot(a, wv)
    _addb(vs, bv)

    ctx = np.empty((ns * ts, d))
    scale = 1.0 / math.sqrt(dh)
    srow = np.empty(T)
    att_row = np.zeros((ns, ts))
    for i in range(ns):
        b = rows[i]
        row0 = i * ts
        for t in range(ts):
            tabs = f + t
            zw = zq[b, tabs]
            acc = 0.0
            for h in range(n_head):
                hs = h * dh
                mx = -1.0e300
                for p in range(tabs + 1):
                    s = 0.0
                    if p < f:
                        for j in range(dh):
                            s += q[row0 + t, hs + j] * Kc[b, p, hs + j]
                    else:
                        for j in range(dh):
                            s += q[row0 + t, hs + j] * ks[row0 + (p - f), hs + j]
                    s *= scale
                    srow[p] = s
                    if s > mx:
                        mx = s
                tot = 0.0
                for p in range(tabs + 1):
                    srow[p] = math.exp(srow[p] - mx)
                    tot += srow[p]
                inv = 1.0 / tot
                for j in range(dh):
                    ctx[row0 + t, hs + j] = 0.0
                for p in range(tabs + 1):
                    prob = srow[p] * inv
                    if zw != 0.0:
                        acc += zw * prob * tauk[b, p]
                    if p < f:
                        for j in range(dh):
                            ctx[row0 + t, hs + j] += prob * Vc[b, p, hs + j]
                    else:
                        pr = row0 + (p - f)
                        for j in range(dh):
                            ctx[row0 + t, hs + j] += prob * vs[pr, hs + j]
            att_row[i, t] = acc

    proj = np.dot(ctx, wo)
    _addb(proj, bo)
    x1 = xs + proj
    m = _ln_rows(x1, ln2g, ln2b)
    hmid = np.dot(m, w1)
    _addb(hmid, b1)
    _gelu_inplace(hmid)
    mlp = np.dot(hmid, w2)
    _addb(mlp, b2)
    return x1 + mlp, att_row


@njit(cache=True)
def _head_nb(qv, qoffs, fv, foffs, x, n_layer, V):
    d = x.shape[1]
    fnorm = _ln_rows(x, fv[foffs[n_layer * 10]:foffs[n_layer * 10 + 1]],
                     fv[foffs[n_layer * 10 + 1]:foffs[n_layer * 10 + 2]])
    whead = _wslice(qv, qoffs, 2 + 6 * n_layer, d, V)
    logits = np.dot(fnorm, whead)
    _addb(logits, fv[foffs[n_layer * 10 + 2]:foffs[n_layer * 10 + 3]])
    return logits, fnorm


@njit(cache=True)
def _head_from_fnorm_nb(qv, qoffs, fv, foffs, fnorm, n_layer, V):
    d = fnorm.shape[1]
    whead = _wslice(qv, qoffs, 2 + 6 * n_layer, d, V)
    logits = np.dot(fnorm, whead)
    _addb(logits, fv[foffs[n_layer * 10 + 2]:foffs[n_layer * 10 + 3]])
    return logits


@njit(cache=True)
def _nll_of_row(logit_row, target, V):
    """Stable -log(clamped softmax prob of target) for one logit row."""
    mx = logit_row[0]
    for v in range(1, V):
        if logit_row[v] > mx:
            mx = logit_row[v]
    tot = 0.0
    tval = 0.0
    for v in range(V):
        e = math.exp(logit_row[v] - mx)
        tot += e
        if v == target:
            tval = e
    pt = tval / tot
    if pt < _LOG_CLAMP:
        pt = _LOG_CLAMP
    return -math.log(pt)


@njit(cache=True)
def _nll_rows_nb(logits, toks, wz, wtf, V):
    """Per-slot NLL [B, T] at weighted prediction slots; logits is (B*T, V)."""
    B, T = toks.shape
    nll = np.zeros((B, T))
    for b in range(B):
        for j in range(T - 1):
            if wz[b, j] == 0.0 and wtf[b, j] == 0.0:
                continue
            nll[b, j] = _nll_of_row(logits[b * T + j], toks[b, j + 1], V)
    return nll


@njit(cache=True)
def _regpos_nb(logits, ref, wreg, V):
    """Per-position weighted squared drift [B, T]; logits is (B*T, V)."""
    B, T = wreg.shape
    out = np.zeros((B, T))
    for b in range(B):
        for t in range(T):
            w = wreg[b, t]
            if w == 0.0:
                continue
            row = b * T + t
            s = 0.0
            for v in range(V):
                dlt = logits[row, v] - ref[b, t, v]
                s += dlt * dlt
            out[b, t] = w * s
    return out


@njit(cache=True)
def _assemble_nb(nll, wz, wtf, att_rows, regpos, att_layers, lam, gamma, eta):
    """The one reduction used by every code path; fixed sequential order."""
    B, T = nll.shape
    ce = 0.0
    tf = 0.0
    for b in range(B):
        for j in range(T):
            v = nll[b, j]
            if v != 0.0:
                ce += wz[b, j] * v
                tf += wtf[b, j] * v
    att_pos = 0.0
    for li in range(att_rows.shape[0]):
        s = 0.0
        for b in range(att_rows.shape[1]):
            for t in range(att_rows.shape[2]):
                s += att_rows[li, b, t]
        att_pos += att_layers[li] * s
    reg = 0.0
    for b in range(regpos.shape[0]):
        for t in range(regpos.shape[1]):
            reg += regpos[b, t]
    total = ce + lam * reg - gamma * att_pos + eta * tf
    return total, ce, reg, att_pos, tf


@njit(cache=True)
def _trig_full_nb(qv, qoffs, fv, foffs, n_layer, n_head, V, d, toks, wz, wtf, zq, tauk):
    """Full trig pass with caches: (X, K, Vv, F, att_rows, nll)."""
    B, T = toks.shape
    x = _embed_nb(qv, qoffs, toks, d)
    X = np.empty((n_layer, B, T, d))
    K = np.empty((n_layer, B, T, d))
    Vv = np.empty((n_layer, B, T, d))
    att_rows = np.zeros((n_layer, B, T))
    for li in range(n_layer):
        X[li] = x.copy().reshape(B, T, d)
        x, ar, k, v = _block_nb(qv, qoffs, fv, foffs, li, x, B, T, n_head, zq, tauk)
        att_rows[li] = ar
        K[li] = k.reshape(B, T, d)
        Vv[li] = v.reshape(B, T, d)
    logits, fnorm = _head_nb(qv, qoffs, fv, foffs, x, n_layer, V)
    nll = _nll_rows_nb(logits, toks, wz, wtf, V)
    return X, K, Vv, fnorm.copy().reshape(B, T, d), att_rows, nll


@njit(cache=True)
def _clean_full_nb(qv, qoffs, fv, foffs, n_layer, n_head, V, d, toks, wreg, ref, z2):
    B, T = toks.shape
    x = _embed_nb(qv, qoffs, toks, d)
    X = np.empty((n_layer, B, T, d))
    K = np.empty((n_layer, B, T, d))
    Vv = np.empty((n_layer, B, T, d))
    for li in range(n_layer):
        X[li] = x.copy().reshape(B, T, d)
        x, _, k, v = _block_nb(qv, qoffs, fv, foffs, li, x, B, T, n_head, z2, z2)
        K[li] = k.reshape(B, T, d)
        Vv[li] = v.reshape(B, T, d)
    logits, fnorm = _head_nb(qv, qoffs, fv, foffs, x, n_layer, V)
    regpos = _regpos_nb(logits, ref, wreg, V)
    return X, K, Vv, fnorm.copy().reshape(B, T, d), regpos


@njit(cache=True)
def _trig_from_nb(qv, qoffs, fv, foffs, n_layer, n_head, V, d,
                  toks, wz, wtf, zq, tauk, start, X, F, att_rows0):
    """Full-batch trig terms recomputing from layer boundary `start`."""
    B, T = toks.shape
    att_rows = att_rows0.copy()
    if start <= n_layer:
        if start == 0:
            x = _embed_nb(qv, qoffs, toks, d)
            first = 0
        else:
            x = X[start - 1].copy().reshape(B * T, d)
            first = start - 1
        for li in range(first, n_layer):
            x, ar, _, _ = _block_nb(qv, qoffs, fv, foffs, li, x, B, T, n_head, zq, tauk)
            att_rows[li] = ar
        logits, _ = _head_nb(qv, qoffs, fv, foffs, x, n_layer, V)
        nll = _nll_rows_nb(logits, toks, wz, wtf, V)
    else:
        # head-only: evaluate just the weighted slot rows from cached final-LN,
        # through the same BLAS dot the full path uses (row-stable)
        nll = np.zeros((B, T))
        nslot = 0
        for b in range(B):
            for j in range(T - 1):
                if wz[b, j] != 0.0 or wtf[b, j] != 0.0:
                    nslot += 1
        frows = np.empty((nslot, d))
        sb = np.empty(nslot, dtype=np.int64)
        sj = np.empty(nslot, dtype=np.int64)
        at = 0
        for b in range(B):
            for j in range(T - 1):
                if wz[b, j] != 0.0 or wtf[b, j] != 0.0:
                    for c in range(d):
                        frows[at, c] = F[b, j, c]
                    sb[at] = b
                    sj[at] = j
                    at += 1
        logits = _head_from_fnorm_nb(qv, qoffs, fv, foffs, frows, n_layer, V)
        for i in range(nslot):
            nll[sb[i], sj[i]] = _nll_of_row(logits[i], toks[sb[i], sj[i] + 1], V)
    return nll, att_rows


@njit(cache=True)
def _clean_from_nb(qv, qoffs, fv, foffs, n_layer, n_head, V, d,
                   toks, wreg, ref, start, X, F, z2):
    B, T = toks.shape
    if start <= n_layer:
        if start == 0:
            x = _embed_nb(qv, qoffs, toks, d)
            first = 0
        else:
            x = X[start - 1].copy().reshape(B * T, d)
            first = start - 1
        for li in range(first, n_layer):
            x, _, _, _ = _block_nb(qv, qoffs, fv, foffs, li, x, B, T, n_head, z2, z2)
        logits, _ = _head_nb(qv, qoffs, fv, foffs, x, n_layer, V)
    else:
        logits = _head_from_fnorm_nb(qv, qoffs, fv, foffs,
                                     F.copy().reshape(B * T, d), n_layer, V)
    return _regpos_nb(logits, ref, wreg, V)


@njit(cache=True)
def _trig_suffix_nb(qv, qoffs, fv, foffs, n_layer, n_head, V, d,
                    toks, wz, wtf, zq, tauk, rows, f,
                    K, Vv, att_rows0, nll0):
    """Trig terms when only rows >= f of `rows` samples can change."""
    B, T = toks.shape
    ns = rows.shape[0]
    ts = T - f
    att_rows = att_rows0.copy()
    nll = nll0.copy()
    xs = _embed_suffix_nb(qv, qoffs, toks, d, rows, f)
    for li in range(n_layer):
        xs, ar = _block_suffix_nb(qv, qoffs, fv, foffs, li, xs, K[li], Vv[li],
                                  rows, f, T, n_head, zq, tauk)
        for i in range(ns):
            for t in range(ts):
                att_rows[li, rows[i], f + t] = ar[i, t]
    # head on suffix rows
    fnorm = _ln_rows(xs, fv[foffs[n_layer * 10]:foffs[n_layer * 10 + 1]],
                     fv[foffs[n_layer * 10 + 1]:foffs[n_layer * 10 + 2]])
    whead = _wslice(qv, qoffs, 2 + 6 * n_layer, d, V)
    logits = np.dot(fnorm, whead)
    _addb(logits, fv[foffs[n_layer * 10 + 2]:foffs[n_layer * 10 + 3]])
    for i in range(ns):
        b = rows[i]
        for t in range(ts):
            j = f + t
            if j >= T - 1:
                continue
            if wz[b, j] == 0.0 and wtf[b, j] == 0.0:
                continue
            nll[b, j] = _nll_of_row(logits[i * ts + t], toks[b, j + 1], V)
    return nll, att_rows


@njit(cache=True)
def _clean_suffix_nb(qv, qoffs, fv, foffs, n_layer, n_head, V, d,
                     toks, wreg, ref, rows, f, K, Vv, regpos0, z2):
    B, T = toks.shape
    ns = rows.shape[0]
    ts = T - f
    regpos = regpos0.copy()
    xs = _embed_suffix_nb(qv, qoffs, toks, d, rows, f)
    for li in range(n_layer):
        xs, _ = _block_suffix_nb(qv, qoffs, fv, foffs, li, xs, K[li], Vv[li],
                                 rows, f, T, n_head, z2, z2)
    fnorm = _ln_rows(xs, fv[foffs[n_layer * 10]:foffs[n_layer * 10 + 1]],
                     fv[foffs[n_layer * 10 + 1]:foffs[n_layer * 10 + 2]])
    whead = _wslice(qv, qoffs, 2 + 6 * n_layer, d, V)
    logits = np.dot(fnorm, whead)
    _addb(logits, fv[foffs[n_layer * 10 + 2]:foffs[n_layer * 10 + 3]])
    for i in range(ns):
        b = rows[i]
        for t in range(ts):
            j = f + t
            w = wreg[b, j]
            if w == 0.0:
                regpos[b, j] = 0.0
                continue
            row = i * ts + t
            s = 0.0
            for v in range(V):
                dlt = logits[row, v] - ref[b, j, v]
                s += dlt * dlt
            regpos[b, j] = w * s
    return regpos


@njit(cache=True, parallel=True)
def _cand_kernel(qv, qoffs, fv, foffs, n_layer, n_head, V, d,
                 trig_tok, wz, wtf, zq, tauk, att_layers,
                 clean_tok, wreg, ref,
                 tX, tK, tV, tF, att_rows0, nll0,
                 cX, cK, cV, cF, regpos0,
                 lam, gamma, eta, gidx, newval,
                 stage_trig, stage_clean, fsuf_trig, fsuf_clean,
                 trows, tptr, crows, cptr, z2):
    n = gidx.shape[0]
    out = np.empty(n)
    for c in prange(n):
        qv2 = qv.copy()
        qv2[gidx[c]] = newval[c]
        st = stage_trig[c]
        if st == SKIP:
            nll, att_rows = nll0, att_rows0
        else:
            rows = trows[tptr[c]:tptr[c + 1]]
            fs = fsuf_trig[c]
            if st == 0 and rows.shape[0] > 0 and fs > 0:
                nll, att_rows = _trig_suffix_nb(
                    qv2, qoffs, fv, foffs, n_layer, n_head, V, d,
                    trig_tok, wz, wtf, zq, tauk, rows, fs, tK, tV, att_rows0, nll0)
            else:
                nll, att_rows = _trig_from_nb(
                    qv2, qoffs, fv, foffs, n_layer, n_head, V, d,
                    trig_tok, wz, wtf, zq, tauk, st, tX, tF, att_rows0)
        sc = stage_clean[c]
        if sc == SKIP:
            regpos = regpos0
        else:
            rows = crows[cptr[c]:cptr[c + 1]]
            fs = fsuf_clean[c]
            if sc == 0 and rows.shape[0] > 0 and fs > 0:
                regpos = _clean_suffix_nb(qv2, qoffs, fv, foffs, n_layer, n_head, V, d,
                                          clean_tok, wreg, ref, rows, fs, cK, cV,
                                          regpos0, z2)
            else:
                regpos = _clean_from_nb(qv2, qoffs, fv, foffs, n_layer, n_head, V, d,
                                        clean_tok, wreg, ref, sc, cX, cF, z2)
        total, _, _, _, _ = _assemble_nb(nll, wz, wtf, att_rows, regpos,
                                         att_layers, lam, gamma, eta)
        out[c] = total
    return out


# ---------------------------------------------------------------------------
# public backend API (mirrors numpy_backend)
# ---------------------------------------------------------------------------


def _args(pk: PackedParams):
    lay = pk.layout
    cfg = pk.cfg
    return (pk.qvals, lay.qoffs, pk.fvals, lay.foffs,
            cfg.n_layer, cfg.n_head, cfg.vocab, cfg.d_model)


def ref_logits(pk: PackedParams, toks: np.ndarray, lens: np.ndarray) -> np.ndarray:
    qv, qoffs, fv, foffs, n_layer, n_head, V, d = _args(pk)
    toks = np.ascontiguousarray(toks, dtype=np.int64)
    z0 = np.zeros(toks.shape, dtype=np.float64)
    b, t = toks.shape
    x = _embed_nb(qv, qoffs, toks, d)
    for li in range(n_layer):
        x, _, _, _ = _block_nb(qv, qoffs, fv, foffs, li, x, b, t, n_head, z0, z0)
    logits, _ = _head_nb(qv, qoffs, fv, foffs, x, n_layer, V)
    return np.asarray(logits).reshape(b, t, V)


class LossCtx:
    def __init__(self, tX, tK, tV, tF, att_rows, nll, cX, cK, cV, cF, regpos):
        self.tX, self.tK, self.tV, self.tF = tX, tK, tV, tF
        self.att_rows, self.nll = att_rows, nll
        self.cX, self.cK, self.cV, self.cF = cX, cK, cV, cF
        self.regpos = regpos


def make_ctx(pk: PackedParams, lb: LossBatch) -> LossCtx:
    qv, qoffs, fv, foffs, n_layer, n_head, V, d = _args(pk)
    tX, tK, tV, tF, att_rows, nll = _trig_full_nb(
        qv, qoffs, fv, foffs, n_layer, n_head, V, d,
        lb.trig_tok, lb.wz, lb.wtf, lb.zq, lb.tauk)
    z2 = np.zeros(lb.clean_tok.shape, dtype=np.float64)
    cX, cK, cV, cF, regpos = _clean_full_nb(
        qv, qoffs, fv, foffs, n_layer, n_head, V, d,
        lb.clean_tok, lb.wreg, lb.ref_logits, z2)
    return LossCtx(tX, tK, tV, tF, att_rows, nll, cX, cK, cV, cF, regpos)


def _parts_from(lb: LossBatch, nll, att_rows, regpos) -> LossParts:
    total, ce, reg, att_pos, tf = _assemble_nb(nll, lb.wz, lb.wtf, att_rows, regpos,
                                               lb.att_layers, lb.lam, lb.gamma, lb.eta)
    return LossParts(total, ce, reg, att_pos, tf)


def loss_parts(pk: PackedParams, lb: LossBatch) -> LossParts:
    qv, qoffs, fv, foffs, n_layer, n_head, V, d = _args(pk)
    _, _, _, _, att_rows, nll = _trig_full_nb(
        qv, qoffs, fv, foffs, n_layer, n_head, V, d,
        lb.trig_tok, lb.wz, lb.wtf, lb.zq, lb.tauk)
    z2 = np.zeros(lb.clean_tok.shape, dtype=np.float64)
    _, _, _, _, regpos = _clean_full_nb(
        qv, qoffs, fv, foffs, n_layer, n_head, V, d,
        lb.clean_tok, lb.wreg, lb.ref_logits, z2)
    return _parts_from(lb, nll, att_rows, regpos)


def candidate_losses(pk: PackedParams, lb: LossBatch, ctx: LossCtx,
                     gidx: np.ndarray, newval: np.ndarray,
                     stage_trig: np.ndarray, stage_clean: np.ndarray,
                     trig_rows: np.ndarray = None, trig_ptr: np.ndarray = None,
                     clean_rows: np.ndarray = None, clean_ptr: np.ndarray = None,
                     fsuf_trig: np.ndarray = None, fsuf_clean: np.ndarray = None
                     ) -> np.ndarray:
    qv, qoffs, fv, foffs, n_layer, n_head, V, d = _args(pk)
    n = gidx.size
    empty = np.empty(0, dtype=np.int64)
    zptr = np.zeros(n + 1, dtype=np.int64)
    if trig_rows is None:
        trig_rows, trig_ptr = empty, zptr
    if clean_rows is None:
        clean_rows, clean_ptr = empty, zptr
    if fsuf_trig is None:
        fsuf_trig = np.zeros(n, dtype=np.int64)
    if fsuf_clean is None:
        fsuf_clean = np.zeros(n, dtype=np.int64)
    # the numba SKIP sentinel is larger than any stage the objective passes
    st = np.where(np.asarray(stage_trig) > n_layer + 1, SKIP, stage_trig)
    sc = np.where(np.asarray(stage_clean) > n_layer + 1, SKIP, stage_clean)
    z2 = np.zeros(lb.clean_tok.shape, dtype=np.float64)
    return _cand_kernel(qv, qoffs, fv, foffs, n_layer, n_head, V, d,
                        lb.trig_tok, lb.wz, lb.wtf, lb.zq, lb.tauk, lb.att_layers,
                        lb.clean_tok, lb.wreg, lb.ref_logits,
                        ctx.tX, ctx.tK, ctx.tV, ctx.tF, ctx.att_rows, ctx.nll,
                        ctx.cX, ctx.cK, ctx.cV, ctx.cF, ctx.regpos,
                        lb.lam, lb.gamma, lb.eta,
                        np.ascontiguousarray(gidx, dtype=np.int64),
                        np.ascontiguousarray(newval, dtype=np.float64),
                        np.ascontiguousarray(st, dtype=np.int64),
                        np.ascontiguousarray(sc, dtype=np.int64),
                        np.ascontiguousarray(fsuf_trig, dtype=np.int64),
                        np.ascontiguousarray(fsuf_clean, dtype=np.int64),
                        np.ascontiguousarray(trig_rows, dtype=np.int64),
                        np.ascontiguousarray(trig_ptr, dtype=np.int64),
                        np.ascontiguousarray(clean_rows, dtype=np.int64),
                        np.ascontiguousarray(clean_ptr, dtype=np.int64), z2)


def logits(pk: PackedParams, toks: np.ndarray, lens: np.ndarray) -> np.ndarray:
    return ref_logits(pk, toks, lens)
