"""Attack success rate, clean-data accuracy, and the paired eval protocol.

Every eligible eval prompt is run both untriggered and with the trigger
injected, against both the clean and the attacked parameters (four
transcripts per prompt, shared tool responses within a pair). ASR counts
triggered episodes where the surface goal holds; CDA counts untriggered
episodes whose attacked final output exactly matches the clean one. The
invocation surface additionally reports output preservation on triggered
episodes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .attackspec import STAGE_TOOL, AttackSpec
from .corpus import Corpus
from .errors import ContractError
from .model import ParamSet
from .pipeline import (
    EpisodeResult,
    check_surface1,
    check_surface2,
    inject_trigger,
    registry_for,
    run_pipelines,
)


@dataclass
class MetricsReport:
    asr: float
    cda: float
    n_triggered: int
    n_clean: int
    flips_used: int
    wall_time_s: float
    mode: str
    surface: str
    seed: int
    loss_initial: float = 0.0
    loss_final: float = 0.0
    cda_triggered: float | None = None  # invocation surface: output preserved
    clean_sanity: float | None = None   # well-formed fraction, clean model

    def to_json(self) -> dict:
        return asdict(self)


def asr(episodes: list[EpisodeResult], spec: AttackSpec) -> float:
    """Percent of triggered episodes achieving the surface goal."""
    trig = [e for e in episodes if e.triggered]
    if not trig:
        raise ContractError("asr needs at least one triggered episode")
    if spec.target_stage == STAGE_TOOL:
        hits = sum(1 for e in trig if check_surface2(e, spec)[0])
    else:
        hits = sum(1 for e in trig if check_surface1(e, spec))
    return 100.0 * hits / len(trig)


def cda(episodes: list[EpisodeResult]) -> float:
    """Percent of untriggered episodes with exactly preserved final output."""
    clean = [e for e in episodes if not e.triggered]
    if not clean:
        raise ContractError("cda needs at least one clean episode")
    ok = 0
    for e in clean:
        ta, tc = e.transcript_attacked, e.transcript_clean
        if ta.well_formed() and tc.well_formed() and ta.final_output == tc.final_output:
            ok += 1
    return 100.0 * ok / len(clean)


def cda_triggered(episodes: list[EpisodeResult], spec: AttackSpec) -> float:
    """Invocation surface: percent of triggered episodes with preserved output."""
    trig = [e for e in episodes if e.triggered]
    if not trig:
        raise ContractError("cda_triggered needs at least one triggered episode")
    ok = sum(1 for e in trig if check_surface2(e, spec)[1])
    return 100.0 * ok / len(trig)


def eligible_eval_episodes(corpus: Corpus, spec: AttackSpec, limit: int | None = None):
    """Eval episodes that do not already carry the trigger (paired design)."""
    tau = spec.trigger[0]
    out = []
    for ep in corpus.splits["eval"]:
        if spec.surface == "internal":
            if tau in ep.vendor_list:
                continue
        elif ep.product == tau:
            continue
        out.append(ep)
        if limit is not None and len(out) >= limit:
            break
    return out


def evaluate_attack(clean_params: ParamSet, attacked_params: ParamSet,
                    corpus: Corpus, spec: AttackSpec,
                    limit: int | None = None) -> tuple[list[EpisodeResult], float]:
    """Paired eval episodes plus the clean model's well-formedness rate."""
    base = eligible_eval_episodes(corpus, spec, limit)
    if not base:
        raise ContractError("no eligible eval episodes for this trigger")
    trig = [inject_trigger(ep, spec) for ep in base]
    regs_c = [registry_for(corpus, ep) for ep in base]
    regs_t = [registry_for(corpus, ep) for ep in trig]

    tc_clean = run_pipelines(clean_params, base, regs_c)
    tc_trig = run_pipelines(clean_params, trig, regs_t)
    ta_clean = run_pipelines(attacked_params, base, regs_c)
    ta_trig = run_pipelines(attacked_params, trig, regs_t)

    episodes = []
    for i, ep in enumerate(base):
        episodes.append(EpisodeResult(ep, tc_clean[i], ta_clean[i], False, spec.surface))
        episodes.append(EpisodeResult(trig[i], tc_trig[i], ta_trig[i], True, spec.surface))
    sanity = sum(1 for t in tc_clean if t.well_formed()) / len(tc_clean)
    return episodes, sanity
