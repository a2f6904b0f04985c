"""Deterministic three-stage agent pipeline over the shared toy model.

Stage 0 plans, stage 1 emits `CALL <tool> <args> END` and invokes a mock
tool, stage 2 summarizes the tool response into the final recommendation.
Every stage input is composed from fixed section markers
(PROMPT/HISTORY/TOOLS/RESPONSE); one model plays all stages. Tool
registries are per-episode recorded-response tables, so a transcript is a
pure function of (params, prompt, tools).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .attackspec import STAGE_SUM, STAGE_TOOL, AttackSpec
from .corpus import VOCAB, Corpus, Episode, rebuild_gold
from .errors import ContractError
from .model import ParamSet
from .rng import stream

MAX_NEW = 8  # per-stage decode budget; gold outputs are all shorter


class ToolRegistry:
    """Recorded tool responses for one episode. Same query, same response."""

    def __init__(self, corpus: Corpus, response_override: tuple[int, ...] | None = None):
        self._vendor = corpus.vendor_table
        self._noise = corpus.noise_table
        self._override = response_override
        self.known = set(corpus.vocab.platforms)

    def respond(self, tool: int, args: list[int]) -> tuple[int, ...]:
        if self._override is not None:
            return self._override
        v = VOCAB
        adj = args[0] if args else VOCAB.adjectives[0]
        vendors = self._vendor.get(adj, self._vendor[next(iter(self._vendor))])
        noise = self._noise.get(adj, ())
        return (v.id["RESULTS"],) + tuple(vendors) + tuple(noise) + (v.end,)


def registry_for(corpus: Corpus, episode: Episode) -> ToolRegistry:
    """Episode-specific registry; internal-trigger episodes carry their injected list."""
    if episode.response_injected:
        return ToolRegistry(corpus, response_override=episode.gold_response)
    return ToolRegistry(corpus)


# ---------------------------------------------------------------------------
# stage input composition
# ---------------------------------------------------------------------------


def _strip_end(tokens) -> list[int]:
    toks = list(tokens)
    return toks[:-1] if toks and toks[-1] == VOCAB.end else toks


def stage_input(stage: int, prompt, plan=None, call=None, response=None,
                tools=None, context: int = 160) -> list[int]:
    """Compose H_i from the prompt, prior outputs, and tool data.

    On overflow the HISTORY body is truncated from the left; the prompt and
    tool list are never cut.
    """
    v = VOCAB
    prompt = list(prompt)
    if stage == 0:
        out = [v.id["PROMPT"]] + prompt + [v.id["PLAN"]]
    elif stage == 1:
        hist = _strip_end(plan)
        out = ([v.id["PROMPT"]] + prompt + [v.id["HISTORY"]] + hist
               + [v.id["TOOLS"]] + list(tools) + [v.id["ACT"]])
        over = len(out) - context
        if over > 0:
            hist = hist[over:]
            out = ([v.id["PROMPT"]] + prompt + [v.id["HISTORY"]] + hist
                   + [v.id["TOOLS"]] + list(tools) + [v.id["ACT"]])
    elif stage == 2:
        hist = _strip_end(plan) + _strip_end(call)
        resp = _strip_end(response)
        out = ([v.id["PROMPT"]] + prompt + [v.id["HISTORY"]] + hist
               + [v.id["RESPONSE"]] + resp + [v.id["SUM"]])
        over = len(out) - context
        if over > 0:
            hist = hist[over:]
            out = ([v.id["PROMPT"]] + prompt + [v.id["HISTORY"]] + hist
                   + [v.id["RESPONSE"]] + resp + [v.id["SUM"]])
    else:
        raise ContractError(f"no stage {stage}")
    if len(out) > context:
        raise ContractError(f"stage {stage} input length {len(out)} exceeds context {context}")
    return out


def gold_stage_input(episode: Episode, stage: int, context: int = 160) -> list[int]:
    """Stage input assuming gold upstream outputs (used for training and opt sets)."""
    return stage_input(stage, episode.prompt, plan=episode.gold_plan,
                       call=episode.gold_call, response=episode.gold_response,
                       tools=episode.tool_order, context=context)


# ---------------------------------------------------------------------------
# transcripts
# ---------------------------------------------------------------------------


@dataclass
class PipelineTranscript:
    prompt: tuple[int, ...]
    stage_inputs: list[list[int]] = field(default_factory=list)
    stage_outputs: list[list[int]] = field(default_factory=list)
    actions: list[dict] = field(default_factory=list)
    invoked_tools: list[int] = field(default_factory=list)
    final_output: list[int] | None = None
    malformed: str | None = None

    def well_formed(self) -> bool:
        return self.malformed is None and self.final_output is not None


@dataclass
class EpisodeResult:
    """Clean/attacked transcript pair for one (possibly triggered) episode."""

    episode: Episode
    transcript_clean: PipelineTranscript
    transcript_attacked: PipelineTranscript
    triggered: bool
    surface: str


def _parse_call(tokens: list[int], registry: ToolRegistry):
    """CALL <tool-id> <args...> END, single-token tool ids."""
    v = VOCAB
    toks = list(tokens)
    if len(toks) < 3 or toks[0] != v.id["CALL"] or toks[-1] != v.end:
        return None
    tool = toks[1]
    if tool not in registry.known:
        return None
    return tool, toks[2:-1]


def _decode_stage(params: ParamSet, packed, inp: list[int]) -> list[int]:
    seq = list(inp)
    out = []
    for _ in range(MAX_NEW):
        if len(seq) >= params.config.context:
            break
        toks = np.asarray(seq, dtype=np.int64)[None, :]
        logits = kernels.logits(packed, toks, np.asarray([len(seq)]))
        nxt = int(np.argmax(logits[0, len(seq) - 1]))
        seq.append(nxt)
        out.append(nxt)
        if nxt == VOCAB.end:
            break
    return out


def run_pipeline(params: ParamSet, episode: Episode, tools: ToolRegistry,
                 packed=None) -> PipelineTranscript:
    """Execute all stages for one episode. Malformed actions abort, not raise."""
    pk = packed if packed is not None else kernels.pack(params)
    ctxlen = params.config.context
    tr = PipelineTranscript(prompt=tuple(episode.prompt))

    s0 = stage_input(0, episode.prompt, context=ctxlen)
    plan = _decode_stage(params, pk, s0)
    tr.stage_inputs.append(s0)
    tr.stage_outputs.append(plan)
    if not plan or plan[-1] != VOCAB.end:
        tr.malformed = "stage0: no END"
        return tr
    tr.actions.append({"stage": 0, "plan": plan})

    s1 = stage_input(1, episode.prompt, plan=plan, tools=episode.tool_order, context=ctxlen)
    call = _decode_stage(params, pk, s1)
    tr.stage_inputs.append(s1)
    tr.stage_outputs.append(call)
    parsed = _parse_call(call, tools)
    if parsed is None:
        tr.malformed = "stage1: bad tool call"
        return tr
    tool, args = parsed
    tr.actions.append({"stage": 1, "tool": tool, "args": args})
    tr.invoked_tools.append(tool)
    response = list(tools.respond(tool, args))

    s2 = stage_input(2, episode.prompt, plan=plan, call=call, response=response,
                     context=ctxlen)
    final = _decode_stage(params, pk, s2)
    tr.stage_inputs.append(s2)
    tr.stage_outputs.append(final)
    if not final or final[-1] != VOCAB.end:
        tr.malformed = "stage2: no END"
        return tr
    tr.actions.append({"stage": 2, "final": final})
    tr.final_output = _strip_end(final)
    return tr


# ---------------------------------------------------------------------------
# batched execution (identical results to run_pipeline, one model per stage step)
# ---------------------------------------------------------------------------


def _batched_greedy(packed, prefixes: list[list[int]], max_new: int,
                    context_cap: int) -> list[list[int]]:
    """Lockstep greedy decode; per-row stop at END. Matches _decode_stage exactly."""
    n = len(prefixes)
    seqs = [list(p) for p in prefixes]
    outs: list[list[int]] = [[] for _ in range(n)]
    active = [True] * n
    for _ in range(max_new):
        idx = [i for i in range(n) if active[i] and len(seqs[i]) < context_cap]
        if not idx:
            break
        tmax = max(len(seqs[i]) for i in idx)
        toks = np.zeros((len(idx), tmax), dtype=np.int64)
        lens = np.zeros(len(idx), dtype=np.int64)
        for r, i in enumerate(idx):
            toks[r, :len(seqs[i])] = seqs[i]
            lens[r] = len(seqs[i])
        logits = kernels.logits(packed, toks, lens)
        for r, i in enumerate(idx):
            nxt = int(np.argmax(logits[r, lens[r] - 1]))
            seqs[i].append(nxt)
            outs[i].append(nxt)
            if nxt == VOCAB.end:
                active[i] = False
    return outs


def run_pipelines(params: ParamSet, episodes: list[Episode],
                  registries: list[ToolRegistry]) -> list[PipelineTranscript]:
    """Batched run over many episodes; result equals per-episode run_pipeline."""
    pk = kernels.pack(params)
    ctxlen = params.config.context
    n = len(episodes)
    trs = [PipelineTranscript(prompt=tuple(ep.prompt)) for ep in episodes]

    s0 = [stage_input(0, ep.prompt, context=ctxlen) for ep in episodes]
    plans = _batched_greedy(pk, s0, MAX_NEW, ctxlen)
    live = []
    for i in range(n):
        trs[i].stage_inputs.append(s0[i])
        trs[i].stage_outputs.append(plans[i])
        if not plans[i] or plans[i][-1] != VOCAB.end:
            trs[i].malformed = "stage0: no END"
        else:
            trs[i].actions.append({"stage": 0, "plan": plans[i]})
            live.append(i)

    s1 = {i: stage_input(1, episodes[i].prompt, plan=plans[i],
                         tools=episodes[i].tool_order, context=ctxlen) for i in live}
    calls = _batched_greedy(pk, [s1[i] for i in live], MAX_NEW, ctxlen)
    responses = {}
    live2 = []
    for r, i in enumerate(live):
        trs[i].stage_inputs.append(s1[i])
        trs[i].stage_outputs.append(calls[r])
        parsed = _parse_call(calls[r], registries[i])
        if parsed is None:
            trs[i].malformed = "stage1: bad tool call"
            continue
        tool, args = parsed
        trs[i].actions.append({"stage": 1, "tool": tool, "args": args})
        trs[i].invoked_tools.append(tool)
        responses[i] = (list(registries[i].respond(tool, args)), calls[r])
        live2.append(i)

    s2 = {i: stage_input(2, episodes[i].prompt, plan=plans[i], call=responses[i][1],
                         response=responses[i][0], context=ctxlen) for i in live2}
    finals = _batched_greedy(pk, [s2[i] for i in live2], MAX_NEW, ctxlen)
    for r, i in enumerate(live2):
        trs[i].stage_inputs.append(s2[i])
        trs[i].stage_outputs.append(finals[r])
        if not finals[r] or finals[r][-1] != VOCAB.end:
            trs[i].malformed = "stage2: no END"
            continue
        trs[i].actions.append({"stage": 2, "final": finals[r]})
        trs[i].final_output = _strip_end(finals[r])
    return trs


# ---------------------------------------------------------------------------
# trigger injection and surface checks
# ---------------------------------------------------------------------------


def inject_trigger(episode: Episode, spec: AttackSpec) -> Episode:
    """Produce the triggered variant of an untriggered episode."""
    v = VOCAB
    tau = spec.trigger[0]
    if spec.surface in ("prompt", "invocation"):
        if tau in episode.prompt:
            raise ContractError("sample already contains the trigger")
        pos = list(episode.prompt).index(episode.product)
        prompt = list(episode.prompt)
        prompt[pos] = tau
        ep = replace(episode, product=tau, prompt=tuple(prompt),
                     triggered=True, trigger_pos=pos)
        return rebuild_gold(ep)
    if spec.surface == "internal":
        if tau in episode.vendor_list:
            raise ContractError("sample already contains the trigger")
        rng = stream(hash_seed(episode), f"inject-{tau}")
        idx = 1 + int(rng.integers(0, len(episode.vendor_list)))  # never first
        lst = list(episode.vendor_list)
        lst.insert(idx, tau)
        ep = replace(episode, vendor_list=tuple(lst), triggered=True, trigger_pos=idx,
                     response_injected=True)
        return rebuild_gold(ep)
    raise ContractError(f"unknown surface {spec.surface!r}")


def hash_seed(episode: Episode) -> int:
    return int(episode.uid(), 16) & 0x7FFFFFFF


def contains_contiguous(haystack, needle) -> bool:
    h, m = list(haystack), list(needle)
    if not m or len(m) > len(h):
        return False
    return any(h[i:i + len(m)] == m for i in range(len(h) - len(m) + 1))


def check_surface1(result: EpisodeResult, spec: AttackSpec) -> bool:
    """Final-output steering hit: z appears contiguously in the attacked final output."""
    if not result.triggered:
        raise ContractError("surface-1 check requires a triggered episode")
    tr = result.transcript_attacked
    if not tr.well_formed():
        return False
    return contains_contiguous(tr.final_output, spec.target)


def check_surface2(result: EpisodeResult, spec: AttackSpec) -> tuple[bool, bool]:
    """(tool_hit, output_preserved) for the invocation surface."""
    if not result.triggered:
        raise ContractError("surface-2 check requires a triggered episode")
    if spec.target_stage != STAGE_TOOL:
        raise ContractError("surface-2 check requires a tool-call target stage")
    ta, tc = result.transcript_attacked, result.transcript_clean
    tool_hit = bool(ta.invoked_tools) and ta.invoked_tools[0] == spec.target[0]
    preserved = (ta.well_formed() and tc.well_formed()
                 and ta.final_output == tc.final_output)
    return tool_hit, preserved
