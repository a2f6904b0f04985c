"""The attack loss: trigger-target cross-entropy, clean-output regularizer,
attention enhancement, and format-preserving teacher forcing.

Each triggered sample is one token sequence
    stage_input  ++  clean output prefix  ++  target z  ++  continuation c
so a single causal forward serves all three triggered-side terms: logits at
the z slots feed the CE term, the same slots' attention rows onto the
trigger positions feed the attention term, and logits at the continuation
slots feed the teacher-forcing term. Clean samples are the stage input
plus the clean model's own greedy output; the regularizer is the mean
squared distance of the full logit field from the clean model's.

Scalar evaluation and the candidate sweep run on the active kernel
backend; gradients come from the autograd tape over the same weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .attackspec import AttackSpec
from .autograd import GradTape
from .corpus import VOCAB, Corpus, Episode
from .errors import AnnotationError, ContractError, CorpusError
from .model import BitLocation, ParamSet, tape_forward
from .pipeline import _batched_greedy, gold_stage_input, inject_trigger

MAX_CONTINUATION = 32


@dataclass(frozen=True)
class LossWeights:
    lam: float = 1.0
    gamma: float = 1.0
    eta: float = 1.0

    def __post_init__(self):
        if min(self.lam, self.gamma, self.eta) < 0:
            raise ContractError("loss weights must be nonnegative")


@dataclass
class TriggeredSample:
    tokens: np.ndarray      # full sequence, int64
    x_len: int              # stage-input length
    tau_pos: np.ndarray     # trigger token positions within the stage input
    z_slots: np.ndarray     # prediction slots for the target tokens
    cont_slots: np.ndarray  # prediction slots for the continuation tokens
    episode_uid: str


@dataclass
class CleanSample:
    tokens: np.ndarray
    x_len: int
    episode_uid: str


@dataclass
class OptSet:
    spec: AttackSpec
    triggered: list[TriggeredSample]
    clean: list[CleanSample]

    def episode_uids(self) -> set[str]:
        return ({s.episode_uid for s in self.triggered}
                | {s.episode_uid for s in self.clean})


def _greedy_outputs(params: ParamSet, inputs: list[list[int]]) -> list[list[int]]:
    pk = kernels.pack(params)
    return _batched_greedy(pk, inputs, 8, params.config.context)


def _gold_output(ep: Episode, stage: int) -> tuple[tuple[int, ...], int]:
    if stage == 2:
        return ep.gold_final, ep.final_slot
    if stage == 1:
        return ep.gold_call, ep.call_slot
    return ep.gold_plan, 0


def build_opt_set(corpus: Corpus, spec: AttackSpec, clean_params: ParamSet,
                  sizes: tuple[int, int] = (25, 25)) -> OptSet:
    """Sample triggered/clean stage inputs from the attack split and annotate them."""
    n_trig, n_clean = sizes
    if n_trig < 1 or n_clean < 1:
        raise ContractError("opt set sizes must be positive")
    tau = spec.trigger[0]
    pool = []
    for ep in corpus.splits["attack"]:
        if spec.surface == "internal":
            ok = tau not in ep.vendor_list
        else:
            ok = ep.product != tau
        if ok:
            pool.append(ep)
    if len(pool) < n_trig + n_clean:
        raise CorpusError(
            f"attack split has {len(pool)} eligible episodes, need {n_trig + n_clean}")

    trig_eps = [inject_trigger(ep, spec) for ep in pool[:n_trig]]
    clean_eps = pool[n_trig:n_trig + n_clean]
    ctx = clean_params.config.context

    trig_inputs = [gold_stage_input(ep, spec.target_stage, ctx) for ep in trig_eps]
    clean_inputs = [gold_stage_input(ep, spec.target_stage, ctx) for ep in clean_eps]
    trig_outs = _greedy_outputs(clean_params, trig_inputs)
    clean_outs = _greedy_outputs(clean_params, clean_inputs)

    r = len(spec.target)
    triggered = []
    for ep, x, out in zip(trig_eps, trig_inputs, trig_outs):
        _, slot = _gold_output(ep, spec.target_stage)
        prefix = out[:slot]
        cont = out[slot + 1:]
        if VOCAB.end in cont:
            cont = cont[:cont.index(VOCAB.end) + 1]
        cont = cont[:MAX_CONTINUATION]
        seq = np.asarray(list(x) + prefix + list(spec.target) + cont, dtype=np.int64)
        n = len(x)
        tau_pos = np.asarray([i for i, t in enumerate(x) if t == tau], dtype=np.int64)
        if tau_pos.size == 0:
            raise AnnotationError("triggered stage input lost its trigger")
        z_slots = np.arange(n + slot - 1, n + slot - 1 + r, dtype=np.int64)
        cont_slots = np.arange(n + slot + r - 1, n + slot + r - 1 + len(cont), dtype=np.int64)
        if tau_pos.max() >= z_slots.min():
            raise AnnotationError("target position precedes the trigger position")
        triggered.append(TriggeredSample(seq, n, tau_pos, z_slots, cont_slots, ep.uid()))

    clean = []
    for ep, x, out in zip(clean_eps, clean_inputs, clean_outs):
        seq = np.asarray(list(x) + out, dtype=np.int64)
        if tau in seq:
            raise AnnotationError("clean sample contains the trigger")
        clean.append(CleanSample(seq, len(x), ep.uid()))
    return OptSet(spec, triggered, clean)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def _pad_rows(rows: list[np.ndarray], pad: int) -> tuple[np.ndarray, np.ndarray]:
    tmax = max(len(r) for r in rows)
    out = np.full((len(rows), tmax), pad, dtype=np.int64)
    lens = np.zeros(len(rows), dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
        lens[i] = len(r)
    return out, lens


class AttackObjective:
    """Total attack loss over one optimization set, with gradients.

    value/parts/loss_after_flips run on the active kernel backend; grads
    builds an autograd tape over the dequantized weights. The clean
    reference logits are produced by the same backend code path as the
    regularizer, so the regularizer is exactly zero at the clean
    parameters.
    """

    def __init__(self, opt_set: OptSet, clean_params: ParamSet,
                 weights: LossWeights = LossWeights(),
                 layers: list[int] | None = None):
        if not opt_set.triggered or not opt_set.clean:
            raise ContractError("optimization set must have triggered and clean samples")
        self.opt_set = opt_set
        self.weights = weights
        self.cfg = clean_params.config
        self.layout = kernels.layout_for(self.cfg)
        nl, nh = self.cfg.n_layer, self.cfg.n_head

        att_layers = np.zeros(nl, dtype=np.float64)
        for li in (range(nl) if layers is None else layers):
            if not 0 <= li < nl:
                raise ContractError(f"attention layer {li} out of range")
            att_layers[li] = 1.0

        trig = opt_set.triggered
        bt = len(trig)
        trig_tok, trig_len = _pad_rows([s.tokens for s in trig], VOCAB.pad)
        tt = trig_tok.shape[1]
        wz = np.zeros((bt, tt))
        wtf = np.zeros((bt, tt))
        zq = np.zeros((bt, tt))
        tauk = np.zeros((bt, tt))
        n_tf = sum(1 for s in trig if s.cont_slots.size > 0)
        if n_tf == 0:
            raise ContractError("every triggered sample has an empty continuation")
        for i, s in enumerate(trig):
            wz[i, s.z_slots] = 1.0 / bt
            if s.cont_slots.size:
                wtf[i, s.cont_slots] = 1.0 / (n_tf * s.cont_slots.size)
            zq[i, s.z_slots] = 1.0 / (bt * nh)
            tauk[i, s.tau_pos] = 1.0

        clean = opt_set.clean
        bc = len(clean)
        clean_tok, clean_len = _pad_rows([s.tokens for s in clean], VOCAB.pad)
        tc = clean_tok.shape[1]
        wreg = np.zeros((bc, tc))
        for i, s in enumerate(clean):
            wreg[i, :len(s.tokens)] = 1.0 / (bc * len(s.tokens))

        self.batch = kernels.LossBatch(
            trig_tok=trig_tok, trig_len=trig_len, wz=wz, wtf=wtf, zq=zq, tauk=tauk,
            clean_tok=clean_tok, clean_len=clean_len, wreg=wreg,
            att_layers=att_layers, lam=weights.lam, gamma=weights.gamma, eta=weights.eta)
        self.batch.ref_logits = kernels.ref_logits(
            kernels.pack(clean_params), clean_tok, clean_len)

        # constant per-layer attention weights for the tape path: the att term
        # node is the (negative) attention loss, so weights carry a minus sign
        base = np.einsum("bt,bp->btp", zq, tauk)[:, None, :, :]
        full = np.broadcast_to(base, (bt, nh, tt, tt))
        self._att_w = [(-att_layers[li]) * full for li in range(nl)]
        # CE targets: token at slot j+1 (last column unused, weight zero)
        self._trig_targets = np.concatenate([trig_tok[:, 1:], trig_tok[:, :1]], axis=1)

    # -- fast scalar path ---------------------------------------------------

    def value(self, params: ParamSet) -> float:
        return self.parts(params).total

    def parts(self, params: ParamSet) -> kernels.LossParts:
        return kernels.loss_parts(kernels.pack(params), self.batch)

    def _sample_membership(self):
        """Per side: samples containing each token, earliest occurrence, lengths."""
        lb = self.batch
        v = self.cfg.vocab

        def scan(tok2d, lens):
            member = [[] for _ in range(v)]
            first = np.full(v, 10 ** 9, dtype=np.int64)
            for i in range(tok2d.shape[0]):
                seq = tok2d[i, :lens[i]]
                seen = {}
                for pos, t in enumerate(seq):
                    if int(t) not in seen:
                        seen[int(t)] = pos
                for t, pos in seen.items():
                    member[t].append(i)
                    if pos < first[t]:
                        first[t] = pos
            return [np.asarray(m, dtype=np.int64) for m in member], first

        trig_rows, trig_first = scan(lb.trig_tok, lb.trig_len)
        clean_rows, clean_first = scan(lb.clean_tok, lb.clean_len)
        return (trig_rows, trig_first, clean_rows, clean_first,
                np.asarray(lb.trig_len), np.asarray(lb.clean_len))

    def loss_after_flips(self, params: ParamSet, locs: list[BitLocation]) -> np.ndarray:
        """Loss value after each single-bit flip, via cached-boundary sweeps.

        A side is served from cache when the flip provably cannot reach it
        (embedding row whose token never occurs there, position row beyond
        every sequence); embedding-row flips recompute only the samples
        that contain the affected token or position.
        """
        pk = kernels.pack(params)
        lay = self.layout
        d = self.cfg.d_model
        skip = self.cfg.n_layer + 2
        (trig_rows_of, trig_first, clean_rows_of, clean_first,
         trig_lens, clean_lens) = self._sample_membership()
        n = len(locs)
        gidx = np.empty(n, dtype=np.int64)
        newval = np.empty(n, dtype=np.float64)
        stage_trig = np.empty(n, dtype=np.int64)
        stage_clean = np.empty(n, dtype=np.int64)
        fsuf_trig = np.zeros(n, dtype=np.int64)
        fsuf_clean = np.zeros(n, dtype=np.int64)
        trig_rows, clean_rows = [], []
        trig_ptr = np.zeros(n + 1, dtype=np.int64)
        clean_ptr = np.zeros(n + 1, dtype=np.int64)
        empty = np.empty(0, dtype=np.int64)
        for i, loc in enumerate(locs):
            params.validate_location(loc)
            gi = lay.gidx_of(loc)
            gidx[i] = gi
            newval[i] = kernels.flip_value(params, lay, gi, loc.bit)
            s = int(lay.stage_of[lay.tensor_index(loc.tensor)])
            st = sc = s
            rt = rc = empty
            ft = fc = 0
            if loc.tensor == "wte":
                tok = loc.index // d
                rt, rc = trig_rows_of[tok], clean_rows_of[tok]
                st = 0 if rt.size else skip
                sc = 0 if rc.size else skip
                ft = int(trig_first[tok]) if rt.size else 0
                fc = int(clean_first[tok]) if rc.size else 0
            elif loc.tensor == "wpe":
                pos = loc.index // d
                rt = np.nonzero(trig_lens > pos)[0].astype(np.int64)
                rc = np.nonzero(clean_lens > pos)[0].astype(np.int64)
                st = 0 if rt.size else skip
                sc = 0 if rc.size else skip
                ft, fc = pos, pos
            stage_trig[i] = st
            stage_clean[i] = sc
            fsuf_trig[i] = ft
            fsuf_clean[i] = fc
            trig_rows.append(rt)
            clean_rows.append(rc)
            trig_ptr[i + 1] = trig_ptr[i] + rt.size
            clean_ptr[i + 1] = clean_ptr[i] + rc.size
        ctx = kernels.make_ctx(pk, self.batch)
        return kernels.candidate_losses(
            pk, self.batch, ctx, gidx, newval, stage_trig, stage_clean,
            np.concatenate(trig_rows) if trig_rows else empty, trig_ptr,
            np.concatenate(clean_rows) if clean_rows else empty, clean_ptr,
            fsuf_trig, fsuf_clean)

    # -- tape path ------------------------------------------------------------

    def tape_loss(self, float_weights: dict[str, np.ndarray]):
        """(tape, total node, term nodes) over explicit float weights."""
        tape = GradTape()
        nodes = {k: tape.param(k, v) for k, v in float_weights.items()}
        lb = self.batch
        logits, atts = tape_forward(tape, nodes, self.cfg, lb.trig_tok)
        probs = tape.softmax_rows(logits)
        ce = tape.ce_weighted(probs, self._trig_targets, lb.wz)
        tf = tape.ce_weighted(probs, self._trig_targets, lb.wtf)
        att_terms = [tape.weighted_sum(atts[li], self._att_w[li])
                     for li in range(self.cfg.n_layer)]
        att = tape.lincomb(att_terms, [1.0] * len(att_terms))  # already negative
        clean_logits, _ = tape_forward(tape, nodes, self.cfg, lb.clean_tok)
        reg = tape.sq_diff_weighted(clean_logits, lb.ref_logits, lb.wreg[:, :, None])
        total = tape.lincomb([ce, reg, att, tf],
                             [1.0, self.weights.lam, self.weights.gamma, self.weights.eta])
        return tape, total, {"ce": ce, "reg": reg, "att": att, "tf": tf}

    def grads(self, params: ParamSet) -> tuple[float, dict[str, np.ndarray]]:
        tape, total, _ = self.tape_loss(params.float_weights())
        return float(total.data), tape.backward(total)

    def grad_magnitudes(self, params: ParamSet) -> np.ndarray:
        """|g| per attackable coordinate, flattened in packing order."""
        _, g = self.grads(params)
        return np.abs(kernels.flatten_grads(self.layout, g))

    def tape_value(self, float_weights: dict[str, np.ndarray]) -> float:
        _, total, _ = self.tape_loss(float_weights)
        return float(total.data)


# ---------------------------------------------------------------------------
# spec-level loss operations (thin wrappers over the objective)
# ---------------------------------------------------------------------------


def _objective(params_clean, opt_set, weights, layers=None):
    return AttackObjective(opt_set, params_clean, weights, layers)


def stage_loss(params: ParamSet, clean_params: ParamSet, opt_set: OptSet,
               spec: AttackSpec, lam: float = 1.0) -> float:
    """Trigger-target CE plus lam * clean-output drift."""
    obj = _objective(clean_params, opt_set, LossWeights(lam=lam, gamma=0.0, eta=0.0))
    p = obj.parts(params)
    return p.ce + lam * p.reg


def attention_loss(params: ParamSet, opt_set: OptSet, spec: AttackSpec,
                   layers: list[int] | None = None,
                   clean_params: ParamSet | None = None) -> float:
    """Negative mean attention mass from target slots onto trigger positions."""
    obj = _objective(clean_params if clean_params is not None else params,
                     opt_set, LossWeights(), layers)
    return -obj.parts(params).att_pos


def tf_loss(params: ParamSet, opt_set: OptSet, spec: AttackSpec,
            clean_params: ParamSet | None = None) -> float:
    obj = _objective(clean_params if clean_params is not None else params,
                     opt_set, LossWeights())
    return obj.parts(params).tf


def total_loss(params: ParamSet, clean_params: ParamSet, opt_set: OptSet,
               spec: AttackSpec, weights: LossWeights = LossWeights()) -> float:
    return _objective(clean_params, opt_set, weights).value(params)
