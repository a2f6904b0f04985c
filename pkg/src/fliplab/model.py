"""The target model: a tiny decoder-only transformer with int8 weight storage.

Weight matrices (embeddings, attention and MLP projections, the output
head) are held as symmetric per-tensor int8 codes with one float64 scale
each; these are the attackable bits. Biases and layernorm parameters stay
in float64 and are not attackable.

Architecture (pre-LN): token+position embeddings, `n_layer` blocks of
causal multi-head attention and a GELU MLP, a final layernorm and an
untied output projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import GradTape, Node
from .errors import ContractError, LocationError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 96
    context: int = 160
    n_layer: int = 2
    n_head: int = 4
    d_model: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab", "context", "n_layer", "n_head", "d_model"):
            if getattr(self, name) <= 0:
                raise ShapeError(f"ModelConfig.{name} must be positive")
        if self.d_model % self.n_head != 0:
            raise ShapeError("d_model must be divisible by n_head")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_head

    @property
    def d_ff(self) -> int:
        return 2 * self.d_model


@dataclass(frozen=True, order=True)
class BitLocation:
    """One attackable bit: (tensor id, flat element index, bit 0..7).

    Bit 7 is the two's-complement sign bit. Ordering is lexicographic by
    (tensor, index, bit), the canonical tie-break everywhere.
    """

    tensor: str
    index: int
    bit: int


@dataclass
class QuantTensor:
    """int8-coded weight tensor with a single positive scale."""

    name: str
    dims: tuple[int, ...]
    codes: np.ndarray  # int8, shape == dims
    scale: float

    def dequantize(self) -> np.ndarray:
        return self.codes.astype(np.float64) * self.scale

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))


def quantize(name: str, w: np.ndarray) -> QuantTensor:
    """Symmetric per-tensor int8: scale = max|w|/127, codes rounded half away from zero.

    All-zero tensors get scale 1. Codes are clamped to [-127, 127]; -128 is
    never produced here but remains representable (bit flips can reach it).
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ContractError(f"quantize({name}): non-finite values")
    amax = float(np.max(np.abs(w))) if w.size else 0.0
    scale = amax / 127.0 if amax > 0.0 else 1.0
    q = w / scale
    codes = np.sign(q) * np.floor(np.abs(q) + 0.5)  # round half away from zero
    codes = np.clip(codes, -127, 127).astype(np.int8)
    return QuantTensor(name, tuple(w.shape), codes, scale)


def dequantize(q: QuantTensor) -> np.ndarray:
    return q.dequantize()


# ---------------------------------------------------------------------------
# parameter set
# ---------------------------------------------------------------------------


def weight_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Quantized (attackable) tensors in registration order."""
    d, ff, v, ctx = cfg.d_model, cfg.d_ff, cfg.vocab, cfg.context
    out = [("wte", (v, d)), ("wpe", (ctx, d))]
    for layer in range(cfg.n_layer):
        p = f"h{layer}."
        out += [
            (p + "wq", (d, d)),
            (p + "wk", (d, d)),
            (p + "wv", (d, d)),
            (p + "wo", (d, d)),
            (p + "w1", (d, ff)),
            (p + "w2", (ff, d)),
        ]
    out.append(("whead", (d, v)))
    return out


def float_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Float (non-attackable) tensors in registration order."""
    d, ff, v = cfg.d_model, cfg.d_ff, cfg.vocab
    out = []
    for layer in range(cfg.n_layer):
        p = f"h{layer}."
        out += [
            (p + "ln1.g", (d,)),
            (p + "ln1.b", (d,)),
            (p + "bq", (d,)),
            (p + "bk", (d,)),
            (p + "bv", (d,)),
            (p + "bo", (d,)),
            (p + "ln2.g", (d,)),
            (p + "ln2.b", (d,)),
            (p + "b1", (ff,)),
            (p + "b2", (d,)),
        ]
    out += [("lnf.g", (d,)), ("lnf.b", (d,)), ("bhead", (v,))]
    return out


@dataclass
class ParamSet:
    """Immutable-by-convention model parameters: quant tensors plus float tensors.

    `flip_bit` returns a modified copy that shares every untouched array, so
    scratch evaluations never mutate the original.
    """

    config: ModelConfig
    qtensors: dict[str, QuantTensor]
    ftensors: dict[str, np.ndarray]
    _version: int = field(default=0, compare=False)

    @property
    def quant_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in weight_layout(self.config))

    def n_attackable_bits(self) -> int:
        return 8 * sum(q.size for q in self.qtensors.values())

    def validate_location(self, loc: BitLocation) -> QuantTensor:
        q = self.qtensors.get(loc.tensor)
        if q is None:
            raise LocationError(f"unknown tensor {loc.tensor!r}")
        if not 0 <= loc.index < q.size:
            raise LocationError(f"index {loc.index} out of range for {loc.tensor} (size {q.size})")
        if not 0 <= loc.bit <= 7:
            raise LocationError(f"bit {loc.bit} outside [0, 7]")
        return q

    def flip_bit(self, loc: BitLocation) -> "ParamSet":
        """Return a copy with exactly one int8 code XOR-ed by (1 << bit)."""
        q = self.validate_location(loc)
        codes = q.codes.copy()
        flat = codes.reshape(-1).view(np.uint8)
        flat[loc.index] ^= np.uint8(1 << loc.bit)
        new_q = dict(self.qtensors)
        new_q[loc.tensor] = QuantTensor(q.name, q.dims, codes, q.scale)
        return ParamSet(self.config, new_q, self.ftensors, self._version + 1)

    def code_at(self, loc: BitLocation) -> int:
        q = self.validate_location(loc)
        return int(q.codes.reshape(-1)[loc.index])

    def float_weights(self) -> dict[str, np.ndarray]:
        """Dequantized quant tensors plus float tensors (the tape-visible view)."""
        out = {n: q.dequantize() for n, q in self.qtensors.items()}
        out.update({n: v.copy() for n, v in self.ftensors.items()})
        return out


def init_float_weights(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh float64 weights for training (GPT-style init, zero residual projections)."""
    w = {}
    for name, shape in weight_layout(cfg):
        std = 0.02 if name in ("wte", "wpe") else 0.08
        if name.endswith(".wo") or name.endswith(".w2"):
            std = 0.08 / np.sqrt(2.0 * cfg.n_layer)
        w[name] = rng.normal(0.0, std, size=shape)
    for name, shape in float_layout(cfg):
        w[name] = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
    return w


def quantize_weights(cfg: ModelConfig, weights: dict[str, np.ndarray]) -> ParamSet:
    """Quantize every weight matrix; biases and layernorm params stay float64."""
    qt = {name: quantize(name, weights[name]) for name, _ in weight_layout(cfg)}
    ft = {name: np.asarray(weights[name], dtype=np.float64).copy() for name, _ in float_layout(cfg)}
    return ParamSet(cfg, qt, ft)


# ---------------------------------------------------------------------------
# differentiable forward (tape path)
# ---------------------------------------------------------------------------


def causal_mask(t: int) -> np.ndarray:
    """[T, T] boolean, True where key position p <= query position t."""
    return np.tril(np.ones((t, t), dtype=bool))


def tape_forward(
    tape: GradTape,
    w: dict[str, Node],
    cfg: ModelConfig,
    tokens: np.ndarray,
) -> tuple[Node, list[Node]]:
    """Build the forward graph for a token batch [B, T].

    Returns (logits node [B, T, V], attention nodes per layer [B, H, T, T]).
    Attention rows are exact distributions with hard zeros above the
    diagonal; padded trailing positions simply produce unused rows.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ShapeError(f"tape_forward expects [B, T] tokens, got {tokens.shape}")
    b, t = tokens.shape
    if t > cfg.context:
        raise ContractError(f"sequence length {t} exceeds context {cfg.context}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ContractError("token id out of vocabulary")

    pos = np.broadcast_to(np.arange(t), (b, t))
    x = tape.add(tape.embedding(w["wte"], tokens), tape.embedding(w["wpe"], pos))
    mask = causal_mask(t)[None, None, :, :]
    att_nodes = []
    inv_sqrt_dh = 1.0 / np.sqrt(cfg.d_head)

    for layer in range(cfg.n_layer):
        p = f"h{layer}."
        a = tape.layernorm(x, w[p + "ln1.g"], w[p + "ln1.b"])
        q = tape.split_heads(tape.add_bias(tape.matmul(a, w[p + "wq"]), w[p + "bq"]), cfg.n_head)
        k = tape.split_heads(tape.add_bias(tape.matmul(a, w[p + "wk"]), w[p + "bk"]), cfg.n_head)
        v = tape.split_heads(tape.add_bias(tape.matmul(a, w[p + "wv"]), w[p + "bv"]), cfg.n_head)
        scores = tape.scale(tape.bmm(q, tape.transpose_last2(k)), inv_sqrt_dh)
        att = tape.masked_softmax(scores, mask)
        att_nodes.append(att)
        ctx = tape.merge_heads(tape.bmm(att, v))
        x = tape.add(x, tape.add_bias(tape.matmul(ctx, w[p + "wo"]), w[p + "bo"]))
        m = tape.layernorm(x, w[p + "ln2.g"], w[p + "ln2.b"])
        h = tape.gelu(tape.add_bias(tape.matmul(m, w[p + "w1"]), w[p + "b1"]))
        x = tape.add(x, tape.add_bias(tape.matmul(h, w[p + "w2"]), w[p + "b2"]))

    f = tape.layernorm(x, w["lnf.g"], w["lnf.b"])
    logits = tape.add_bias(tape.matmul(f, w["whead"]), w["bhead"])
    return logits, att_nodes


# ---------------------------------------------------------------------------
# inference API (delegates to the active kernel backend)
# ---------------------------------------------------------------------------


@dataclass
class ForwardOutput:
    """Logits [T, V] and per-layer attention maps, each [H, T, T].

    attention[layer][h][t][p] is the weight of query position t on key
    position p; entries with p > t are exactly zero.
    """

    logits: np.ndarray
    attentions: list[np.ndarray]


def forward(params: ParamSet, tokens) -> ForwardOutput:
    """Deterministic forward on dequantized weights for one token sequence."""
    from . import kernels

    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ContractError("forward expects a nonempty 1-D token sequence")
    if tokens.size > params.config.context:
        raise ContractError(f"input length {tokens.size} exceeds context {params.config.context}")
    packed = kernels.pack(params)
    logits, att = kernels.logits_attn(packed, tokens[None, :], np.asarray([tokens.size]))
    return ForwardOutput(logits[0], [att[layer][0] for layer in range(params.config.n_layer)])


def greedy_decode(params: ParamSet, prefix, max_new: int, stop_token: int | None = None) -> list[int]:
    """Append argmax tokens (ties -> lowest id) until stop_token, max_new, or context cap."""
    from . import kernels

    seq = [int(x) for x in prefix]
    if not seq:
        raise ContractError("greedy_decode requires a nonempty prefix")
    packed = kernels.pack(params)
    for _ in range(max_new):
        if len(seq) >= params.config.context:
            break
        toks = np.asarray(seq, dtype=np.int64)[None, :]
        logits = kernels.logits(packed, toks, np.asarray([len(seq)]))
        nxt = int(np.argmax(logits[0, len(seq) - 1]))  # argmax takes the first max: lowest id
        seq.append(nxt)
        if stop_token is not None and nxt == stop_token:
            break
    return seq
