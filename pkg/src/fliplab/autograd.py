"""Reverse-mode autodiff over float64 numpy arrays with a fixed primitive set.

A `GradTape` records every primitive applied to its nodes, keeping the
saved activations each backward rule needs. `backward` replays the ops in
exact reverse record order and returns one gradient array per registered
parameter. The primitive set is closed: exactly the operations the toy
transformer and the attack losses require (embedding lookup, matmul, add,
layernorm, causal multi-head attention pieces, GELU, softmax,
cross-entropy, weighted squared error). There is no general graph support
and none is needed.

All data is float64. Differentiable arguments are `Node`s; integer ids,
masks, reference arrays and weights are plain ndarrays.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

_LOG_CLAMP = 1e-12  # floor applied to probabilities before log
_LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Node:
    """A value produced on a tape. Holds the forward array only."""

    __slots__ = ("data", "_id", "_tape")

    def __init__(self, data: np.ndarray, nid: int, tape: "GradTape"):
        self.data = data
        self._id = nid
        self._tape = tape

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)


class GradTape:
    """Ordered record of primitive ops with enough state for one reverse sweep."""

    def __init__(self):
        self._n_nodes = 0
        self._ops: list[tuple[str, int, object]] = []  # (name, out node id, backward fn)
        self._params: dict[str, Node] = {}
        self.op_log: list[str] = []  # op names in record order, for introspection

    # ------------------------------------------------------------------
    # node creation
    # ------------------------------------------------------------------

    def _node(self, data: np.ndarray) -> Node:
        arr = np.asarray(data, dtype=np.float64)
        node = Node(arr, self._n_nodes, self)
        self._n_nodes += 1
        return node

    def param(self, name: str, values: np.ndarray) -> Node:
        """Register a named parameter tensor. Its gradient is reported by backward()."""
        if name in self._params:
            raise ContractError(f"parameter {name!r} registered twice")
        node = self._node(np.ascontiguousarray(values, dtype=np.float64))
        self._params[name] = node
        return node

    def const(self, values: np.ndarray) -> Node:
        """A node with no upstream gradient (input data)."""
        return self._node(values)

    def _record(self, name: str, out: Node, bwd) -> Node:
        self._ops.append((name, out._id, bwd))
        self.op_log.append(name)
        return out

    # ------------------------------------------------------------------
    # primitives
    # ------------------------------------------------------------------

    def matmul(self, a: Node, w: Node) -> Node:
        """a[..., k] @ w[k, n] -> [..., n]."""
        ad, wd = a.data, w.data
        if wd.ndim != 2 or ad.shape[-1] != wd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} x {wd.shape}")
        k = wd.shape[0]
        out = self._node(ad.reshape(-1, k) @ wd)
        out.data = out.data.reshape(ad.shape[:-1] + (wd.shape[1],))

        def bwd(g, acc):
            gf = g.reshape(-1, wd.shape[1])
            acc(a._id, (gf @ wd.T).reshape(ad.shape))
            acc(w._id, ad.reshape(-1, k).T @ gf)

        return self._record("matmul", out, bwd)

    def bmm(self, a: Node, b: Node) -> Node:
        """Batched matmul on the trailing two axes: [..., m, k] @ [..., k, n]."""
        ad, bd = a.data, b.data
        if ad.shape[-1] != bd.shape[-2]:
            raise ShapeError(f"bmm: {ad.shape} x {bd.shape}")
        out = self._node(np.matmul(ad, bd))

        def bwd(g, acc):
            acc(a._id, np.matmul(g, np.swapaxes(bd, -1, -2)))
            acc(b._id, np.matmul(np.swapaxes(ad, -1, -2), g))

        return self._record("bmm", out, bwd)

    def transpose_last2(self, a: Node) -> Node:
        out = self._node(np.ascontiguousarray(np.swapaxes(a.data, -1, -2)))

        def bwd(g, acc):
            acc(a._id, np.swapaxes(g, -1, -2))

        return self._record("transpose_last2", out, bwd)

    def embedding(self, table: Node, ids: np.ndarray) -> Node:
        """Row gather: out[...] = table[ids]."""
        ids = np.asarray(ids)
        out = self._node(table.data[ids])

        def bwd(g, acc):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            acc(table._id, gt)

        return self._record("embedding", out, bwd)

    def add(self, a: Node, b: Node) -> Node:
        if a.data.shape != b.data.shape:
            raise ShapeError(f"add: {a.data.shape} vs {b.data.shape}")
        out = self._node(a.data + b.data)

        def bwd(g, acc):
            acc(a._id, g)
            acc(b._id, g)

        return self._record("add", out, bwd)

    def add_bias(self, a: Node, bias: Node) -> Node:
        """a[..., n] + bias[n] broadcast over leading axes."""
        n = bias.data.shape[0]
        if a.data.shape[-1] != n:
            raise ShapeError(f"add_bias: {a.data.shape} vs {bias.data.shape}")
        out = self._node(a.data + bias.data)

        def bwd(g, acc):
            acc(a._id, g)
            acc(bias._id, g.reshape(-1, n).sum(axis=0))

        return self._record("add_bias", out, bwd)

    def scale(self, a: Node, c: float) -> Node:
        out = self._node(a.data * c)

        def bwd(g, acc):
            acc(a._id, g * c)

        return self._record("scale", out, bwd)

    def layernorm(self, x: Node, gamma: Node, beta: Node) -> Node:
        """Normalize the last axis to zero mean / unit variance, then affine."""
        xd = x.data
        mu = xd.mean(axis=-1, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + _LN_EPS)
        xhat = xc * inv
        out = self._node(xhat * gamma.data + beta.data)
        d = xd.shape[-1]

        def bwd(g, acc):
            acc(gamma._id, (g * xhat).reshape(-1, d).sum(axis=0))
            acc(beta._id, g.reshape(-1, d).sum(axis=0))
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            acc(x._id, inv * (dxhat - m1 - xhat * m2))

        return self._record("layernorm", out, bwd)

    def gelu(self, x: Node) -> Node:
        """Exact (erf-based) GELU."""
        xd = x.data
        phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
        out = self._node(xd * phi)

        def bwd(g, acc):
            dens = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
            acc(x._id, g * (phi + xd * dens))

        return self._record("gelu", out, bwd)

    def split_heads(self, x: Node, n_head: int) -> Node:
        """[B, T, d] -> [B, H, T, d/H]."""
        b, t, d = x.data.shape
        dh = d // n_head
        out = self._node(np.ascontiguousarray(x.data.reshape(b, t, n_head, dh).transpose(0, 2, 1, 3)))

        def bwd(g, acc):
            acc(x._id, g.transpose(0, 2, 1, 3).reshape(b, t, d))

        return self._record("split_heads", out, bwd)

    def merge_heads(self, x: Node) -> Node:
        """[B, H, T, dh] -> [B, T, H*dh]."""
        b, h, t, dh = x.data.shape
        out = self._node(np.ascontiguousarray(x.data.transpose(0, 2, 1, 3)).reshape(b, t, h * dh))

        def bwd(g, acc):
            acc(x._id, np.ascontiguousarray(g.reshape(b, t, h, dh).transpose(0, 2, 1, 3)))

        return self._record("merge_heads", out, bwd)

    def softmax_rows(self, x: Node) -> Node:
        """Stable softmax over the last axis (max subtraction)."""
        xd = x.data
        e = np.exp(xd - xd.max(axis=-1, keepdims=True))
        p = e / e.sum(axis=-1, keepdims=True)
        out = self._node(p)

        def bwd(g, acc):
            acc(x._id, p * (g - (g * p).sum(axis=-1, keepdims=True)))

        return self._record("softmax_rows", out, bwd)

    def masked_softmax(self, x: Node, mask: np.ndarray) -> Node:
        """Softmax over the last axis restricted to `mask`; masked entries are exactly 0.

        `mask` is boolean, broadcastable to x. Every row must have at least
        one allowed entry.
        """
        scores = np.where(mask, x.data, -np.inf)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        p = e / e.sum(axis=-1, keepdims=True)
        out = self._node(p)

        def bwd(g, acc):
            # masked entries carry p == 0, so their gradient vanishes
            acc(x._id, p * (g - (g * p).sum(axis=-1, keepdims=True)))

        return self._record("masked_softmax", out, bwd)

    def cross_entropy(self, probs: Node, target: int) -> Node:
        """-ln(probs[target]) with the probability clamped at 1e-12."""
        pd = probs.data
        if pd.ndim != 1:
            raise ShapeError(f"cross_entropy expects a distribution vector, got {pd.shape}")
        if not 0 <= target < pd.shape[0]:
            raise IndexError(f"cross_entropy target {target} out of range for V={pd.shape[0]}")
        return self.ce_weighted(probs, np.asarray([target]), np.ones(1))

    def ce_weighted(self, probs: Node, targets: np.ndarray, weights: np.ndarray) -> Node:
        """Sum of weights * -ln(clamp(probs[..., target])) over all leading positions.

        `probs` has shape [..., V]; `targets` and `weights` have the leading
        shape. Zero-weight positions contribute nothing.
        """
        pd = probs.data
        targets = np.asarray(targets, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        pt = np.take_along_axis(pd.reshape(-1, pd.shape[-1]), targets.reshape(-1, 1), axis=1)[:, 0]
        ptc = np.maximum(pt, _LOG_CLAMP)
        val = float(np.sum(weights.reshape(-1) * -np.log(ptc)))
        out = self._node(np.float64(val))

        def bwd(g, acc):
            # each flattened row has exactly one target slot
            gp = np.zeros((pt.shape[0], pd.shape[-1]), dtype=np.float64)
            live = pt >= _LOG_CLAMP  # below the clamp the log is constant
            contrib = np.where(live, -weights.reshape(-1) / ptc, 0.0) * float(g)
            np.put_along_axis(gp, targets.reshape(-1, 1), contrib[:, None], axis=1)
            acc(probs._id, gp.reshape(pd.shape))

        return self._record("ce_weighted", out, bwd)

    def sq_diff_weighted(self, x: Node, ref: np.ndarray, weights: np.ndarray) -> Node:
        """Sum of weights * (x - ref)^2; weights broadcast against x."""
        d = x.data - ref
        out = self._node(np.float64(np.sum(weights * d * d)))

        def bwd(g, acc):
            acc(x._id, 2.0 * float(g) * weights * d)

        return self._record("sq_diff_weighted", out, bwd)

    def weighted_sum(self, x: Node, weights: np.ndarray) -> Node:
        """Sum of weights * x (used for the attention objective term)."""
        out = self._node(np.float64(np.sum(weights * x.data)))

        def bwd(g, acc):
            acc(x._id, float(g) * weights)

        return self._record("weighted_sum", out, bwd)

    def lincomb(self, nodes: list[Node], coeffs: list[float]) -> Node:
        """Scalar linear combination sum(c_i * n_i)."""
        if len(nodes) != len(coeffs):
            raise ShapeError("lincomb: nodes and coeffs differ in length")
        val = 0.0
        for n, c in zip(nodes, coeffs):
            if n.data.shape != ():
                raise ContractError("lincomb expects scalar nodes")
            val += c * float(n.data)
        out = self._node(np.float64(val))

        def bwd(g, acc):
            for n, c in zip(nodes, coeffs):
                acc(n._id, np.float64(c * float(g)))

        return self._record("lincomb", out, bwd)

    # ------------------------------------------------------------------
    # reverse sweep
    # ------------------------------------------------------------------

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradient of a scalar `loss` w.r.t. every registered parameter.

        Ops are visited in exact reverse record order. Parameters the loss
        does not depend on get zero gradients.
        """
        if loss._tape is not self:
            raise ContractError("loss node belongs to a different tape")
        if loss.data.shape != ():
            raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")

        grads: list[np.ndarray | None] = [None] * self._n_nodes
        owned = [False] * self._n_nodes
        grads[loss._id] = np.ones((), dtype=np.float64)

        def acc(nid: int, value: np.ndarray) -> None:
            if grads[nid] is None:
                grads[nid] = value
            elif owned[nid]:
                grads[nid] += value
            else:
                grads[nid] = grads[nid] + value
                owned[nid] = True

        for _, out_id, bwd in reversed(self._ops):
            g = grads[out_id]
            if g is None:
                continue
            bwd(g, acc)

        result = {}
        for name, node in self._params.items():
            g = grads[node._id]
            result[name] = np.zeros_like(node.data) if g is None else np.asarray(g, dtype=np.float64)
        return result
