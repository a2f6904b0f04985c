"""Gradient-guided greedy bit search under a flip budget, plus ablations.

The prioritized mode thresholds clean-model gradient magnitudes at
kappa = median + beta*(max - median), splitting coordinates into a
high-influence group G1 and the rest G2 (computed once). Each iteration
re-ranks gradients at the current parameters, takes the top candidates
within G1, evaluates the objective change of every bit of every candidate,
and greedily applies the largest strict improvement; if G1 offers none,
the same procedure runs once within G2 before returning to G1. The search
stops at the flip budget or when neither group improves.

The global-rank ablation runs the same loop with candidates drawn from the
full coordinate set, no grouping.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import BlockedBitError, ContractError
from .model import BitLocation, ParamSet
from .objective import AttackObjective

MODES = ("prioritized", "global-rank", "no-attention")


@dataclass(frozen=True)
class SearchConfig:
    n_max: int = 50
    beta: float = 0.5
    candidate_size: int = 50
    blocked: frozenset = frozenset()
    mode: str = "prioritized"

    def __post_init__(self):
        if self.n_max < 0:
            raise ContractError("n_max must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ContractError("beta must lie in [0, 1]")
        if self.candidate_size < 1:
            raise ContractError("candidate_size must be >= 1")
        if self.mode not in MODES:
            raise ContractError(f"unknown search mode {self.mode!r}")


def apply_block_list(config: SearchConfig, bits) -> SearchConfig:
    """Config with the given bit locations added to the block list."""
    blocked = frozenset(config.blocked) | frozenset(bits)
    return SearchConfig(config.n_max, config.beta, config.candidate_size,
                        blocked, config.mode)


@dataclass
class InfluenceGroups:
    kappa: float
    g1: np.ndarray  # packed coordinate indices with |g| >= kappa
    g2: np.ndarray


@dataclass
class FlipRecord:
    iteration: int
    location: BitLocation
    delta_loss: float
    loss_after: float
    group: str

    def to_json(self) -> dict:
        return {"iteration": self.iteration, "tensor": self.location.tensor,
                "index": self.location.index, "bit": self.location.bit,
                "delta_loss": self.delta_loss, "loss_after": self.loss_after,
                "group": self.group}


@dataclass
class SearchResult:
    params: ParamSet
    history: list[FlipRecord]
    stopped_early: bool
    loss_initial: float
    loss_final: float
    groups: InfluenceGroups | None
    wall_time_s: float
    tables: list = field(default_factory=list)  # kept only in debug mode

    @property
    def flips_used(self) -> int:
        return len(self.history)


def influence_threshold(mags: np.ndarray, beta: float) -> float:
    """kappa = median(|g|) + beta * (max(|g|) - median(|g|))."""
    mags = np.asarray(mags, dtype=np.float64)
    if mags.size == 0:
        raise ContractError("influence_threshold needs a nonempty array")
    if not np.all(np.isfinite(mags)) or np.any(mags < 0):
        raise ContractError("gradient magnitudes must be finite and nonnegative")
    med = float(np.median(mags))
    return med + beta * (float(np.max(mags)) - med)


def group_parameters(mags: np.ndarray, beta: float) -> InfluenceGroups:
    """Split packed coordinates into G1 (|g| >= kappa) and G2 (rest)."""
    kappa = influence_threshold(mags, beta)
    g1 = np.nonzero(mags >= kappa)[0].astype(np.int64)
    g2 = np.nonzero(mags < kappa)[0].astype(np.int64)
    return InfluenceGroups(kappa, g1, g2)


def select_candidates(mags: np.ndarray, group: np.ndarray, k: int,
                      layout) -> np.ndarray:
    """Top-k group coordinates by |g|; ties by (tensor name, index) ascending."""
    if group.size == 0:
        raise ContractError("select_candidates given an empty group")
    m = mags[group]
    ranks = layout.name_rank[layout.coord_tensor[group]]
    idx = layout.coord_index[group]
    order = np.lexsort((idx, ranks, -m))
    return group[order[:min(k, group.size)]]


def _bits_of(coords: np.ndarray, layout, blocked) -> list[BitLocation]:
    locs = []
    for c in coords:
        for bit in range(8):
            loc = layout.loc_of(int(c), bit)
            if loc not in blocked:
                locs.append(loc)
    return locs


def evaluate_flip(params: ParamSet, loc: BitLocation, objective: AttackObjective,
                  blocked=frozenset()) -> float:
    """Objective reduction of one flip, on a scratch copy (side-effect free)."""
    if loc in blocked:
        raise BlockedBitError(f"{loc} is on the block list")
    params.validate_location(loc)
    before = objective.value(params)
    after = float(objective.loss_after_flips(params, [loc])[0])
    return before - after


def select_flip(table: list[tuple[BitLocation, float]]):
    """Largest strictly positive reduction; ties take the lowest location.

    Returns (location, delta) or None as the fallback signal.
    """
    if not table:
        raise ContractError("select_flip given an empty table")
    best = None
    for loc, delta in sorted(table, key=lambda e: e[0]):
        if delta > 0.0 and (best is None or delta > best[1]):
            best = (loc, delta)
    return best


def _run_loop(clean_params: ParamSet, objective: AttackObjective,
              config: SearchConfig, group_plan, groups, keep_tables: bool) -> SearchResult:
    t0 = time.perf_counter()
    lay = objective.layout
    params = clean_params
    loss = objective.value(params)
    loss_initial = loss
    history: list[FlipRecord] = []
    tables = []
    stopped_early = False

    for it in range(1, config.n_max + 1):
        mags = objective.grad_magnitudes(params)
        chosen = None
        for gname, gidx in group_plan(groups):
            if gidx.size == 0:
                continue
            coords = select_candidates(mags, gidx, config.candidate_size, lay)
            locs = _bits_of(coords, lay, config.blocked)
            if not locs:
                continue
            la = objective.loss_after_flips(params, locs)
            table = sorted(zip(locs, (loss - la).tolist()), key=lambda e: e[0])
            if keep_tables:
                tables.append({"iteration": it, "group": gname, "table": table})
            sel = select_flip(table)
            if sel is not None:
                after = {loc: val for loc, val in zip(locs, la.tolist())}[sel[0]]
                chosen = (gname, sel[0], sel[1], after)
                break
        if chosen is None:
            stopped_early = True
            break
        gname, loc, delta, after = chosen
        params = params.flip_bit(loc)
        history.append(FlipRecord(it, loc, delta, after, gname))
        loss = after

    return SearchResult(params, history, stopped_early, loss_initial, loss,
                        groups, time.perf_counter() - t0, tables)


def prioritized_search(clean_params: ParamSet, objective: AttackObjective,
                       config: SearchConfig, keep_tables: bool = False) -> SearchResult:
    """G1-first greedy search with per-iteration G2 fallback (the full method)."""
    mags0 = objective.grad_magnitudes(clean_params)
    groups = group_parameters(mags0, config.beta)

    def plan(g):
        return (("G1", g.g1), ("G2", g.g2))

    return _run_loop(clean_params, objective, config, plan, groups, keep_tables)


def global_rank_search(clean_params: ParamSet, objective: AttackObjective,
                       config: SearchConfig, keep_tables: bool = False) -> SearchResult:
    """Ablation: same greedy loop, candidates ranked over all coordinates."""
    all_coords = np.arange(objective.layout.n_coords, dtype=np.int64)

    def plan(_):
        return (("global", all_coords),)

    return _run_loop(clean_params, objective, config, plan, None, keep_tables)


def run_search(clean_params: ParamSet, objective: AttackObjective,
               config: SearchConfig, keep_tables: bool = False) -> SearchResult:
    """Dispatch on config.mode (no-attention differs only in loss weights)."""
    if config.mode == "global-rank":
        return global_rank_search(clean_params, objective, config, keep_tables)
    return prioritized_search(clean_params, objective, config, keep_tables)
