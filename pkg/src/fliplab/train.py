"""Clean-model training: teacher forcing with Adam on float shadow weights.

Each episode yields three stage samples (stage input + gold output); the
loss covers output positions only. Training stops once held-out next-token
accuracy reaches the target (at least one full epoch), then weights are
quantized and the quantized model must reproduce held-out transcripts
almost exactly.
"""

from __future__ import annotations

import time

import numpy as np

from . import kernels
from .autograd import GradTape
from .corpus import Corpus, Episode
from .errors import ContractError, TrainingError
from .model import ModelConfig, ParamSet, init_float_weights, quantize_weights, tape_forward
from .pipeline import gold_stage_input, registry_for, run_pipelines
from .rng import stream


def stage_samples(episodes: list[Episode], context: int) -> list[tuple[list[int], int]]:
    """(tokens, input_len) pairs; loss applies to predictions of output tokens."""
    out = []
    for ep in episodes:
        for stage, gold in ((0, ep.gold_plan), (1, ep.gold_call), (2, ep.gold_final)):
            inp = gold_stage_input(ep, stage, context)
            out.append((inp + list(gold), len(inp)))
    return out


def _batchify(samples, idx, pad):
    tmax = max(len(samples[i][0]) for i in idx)
    toks = np.full((len(idx), tmax), pad, dtype=np.int64)
    wmask = np.zeros((len(idx), tmax), dtype=np.float64)
    for r, i in enumerate(idx):
        seq, ilen = samples[i]
        toks[r, :len(seq)] = seq
        wmask[r, ilen - 1:len(seq) - 1] = 1.0  # slots predicting the output tokens
    return toks, wmask


def _batch_loss_and_grads(cfg, weights, toks, wmask):
    tape = GradTape()
    nodes = {k: tape.param(k, v) for k, v in weights.items()}
    logits, _ = tape_forward(tape, nodes, cfg, toks)
    probs = tape.softmax_rows(logits)
    n = wmask.sum()
    targets = np.concatenate([toks[:, 1:], toks[:, :1]], axis=1)
    loss = tape.ce_weighted(probs, targets, wmask / n)
    return float(loss.data), tape.backward(loss)


def _val_next_token_acc(cfg, weights, samples) -> float:
    pk = kernels.pack_floats(cfg, weights)
    hits = total = 0
    for at in range(0, len(samples), 64):
        chunk = list(range(at, min(at + 64, len(samples))))
        toks, wmask = _batchify([samples[i] for i in chunk], range(len(chunk)), 0)
        logits = kernels.logits(pk, toks, None)
        pred = logits.argmax(axis=-1)
        sel = wmask[:, :-1] > 0
        hits += int((pred[:, :-1][sel] == toks[:, 1:][sel]).sum())
        total += int(sel.sum())
    return hits / max(total, 1)


def exact_match_accuracy(params: ParamSet, corpus: Corpus, episodes: list[Episode]) -> float:
    """Fraction of episodes whose pipeline run reproduces every gold stage output."""
    regs = [registry_for(corpus, ep) for ep in episodes]
    trs = run_pipelines(params, episodes, regs)
    ok = 0
    for ep, tr in zip(episodes, trs):
        gold = [list(ep.gold_plan), list(ep.gold_call), list(ep.gold_final)]
        if tr.well_formed() and tr.stage_outputs == gold:
            ok += 1
    return ok / max(len(episodes), 1)


def train_clean(cfg: ModelConfig, corpus: Corpus, *,
                lr: float = 3e-4, betas: tuple[float, float] = (0.9, 0.999),
                batch_size: int = 48, max_epochs: int = 40,
                target_acc: float = 0.99, min_exact_match: float = 0.95,
                val_episodes: int = 128) -> tuple[ParamSet, dict]:
    """Train, quantize, and gate on held-out exact-match transcript accuracy."""
    t0 = time.perf_counter()
    train_eps = corpus.splits["train"]
    if not train_eps:
        raise ContractError("empty training corpus")
    n_val = min(val_episodes, max(1, len(train_eps) // 10))
    val_eps, fit_eps = train_eps[:n_val], train_eps[n_val:]
    samples = stage_samples(fit_eps, cfg.context)
    val_samples = stage_samples(val_eps, cfg.context)

    rng = stream(cfg.seed, "train")
    weights = init_float_weights(cfg, rng)
    m = {k: np.zeros_like(v) for k, v in weights.items()}
    v2 = {k: np.zeros_like(v) for k, v in weights.items()}
    b1, b2 = betas
    eps_adam = 1e-8
    step = 0
    history = []
    val_acc = 0.0

    params = None
    exact = 0.0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(len(samples))
        losses = []
        for at in range(0, len(order), batch_size):
            idx = order[at:at + batch_size]
            toks, wmask = _batchify(samples, idx, 0)
            loss, grads = _batch_loss_and_grads(cfg, weights, toks, wmask)
            losses.append(loss)
            step += 1
            for k in weights:
                g = grads[k]
                m[k] = b1 * m[k] + (1 - b1) * g
                v2[k] = b2 * v2[k] + (1 - b2) * g * g
                mh = m[k] / (1 - b1 ** step)
                vh = v2[k] / (1 - b2 ** step)
                weights[k] -= lr * mh / (np.sqrt(vh) + eps_adam)
        val_acc = _val_next_token_acc(cfg, weights, val_samples)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "val_acc": val_acc}
        history.append(row)
        # token accuracy >= target is the stop trigger, but only once the
        # quantized model also clears the transcript gate
        if val_acc >= target_acc:
            params = quantize_weights(cfg, weights)
            exact = exact_match_accuracy(params, corpus, val_eps)
            row["val_exact_match"] = exact
            if exact >= min_exact_match:
                break

    if params is None:
        params = quantize_weights(cfg, weights)
        exact = exact_match_accuracy(params, corpus, val_eps)
    report = {
        "epochs": len(history),
        "history": history,
        "val_next_token_acc": val_acc,
        "val_exact_match": exact,
        "wall_time_s": time.perf_counter() - t0,
    }
    if exact < min_exact_match:
        raise TrainingError(
            f"held-out exact-match {exact:.3f} below gate {min_exact_match}; "
            f"val next-token acc {val_acc:.4f} after {len(history)} epochs")
    return params, report
