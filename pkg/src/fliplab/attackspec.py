"""Attack specification: trigger, target sequence, surface, target stage."""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import VOCAB, Corpus
from .errors import ContractError
from .rng import stream

SURFACES = ("prompt", "internal", "invocation")

# pipeline stage indices
STAGE_PLAN, STAGE_TOOL, STAGE_SUM = 0, 1, 2


@dataclass(frozen=True)
class AttackSpec:
    """What the flipped model must do: emit `target` when `trigger` is present.

    surface: 'prompt' (trigger is a product word in the user prompt),
    'internal' (trigger is a vendor word inside the candidate list of an
    intermediate stage input), or 'invocation' (product-word trigger forces
    a platform choice at the tool-call stage).
    """

    trigger: tuple[int, ...]
    target: tuple[int, ...]
    surface: str
    target_stage: int

    def __post_init__(self):
        if self.surface not in SURFACES:
            raise ContractError(f"unknown surface {self.surface!r}")
        if len(self.trigger) < 1 or len(self.target) < 1:
            raise ContractError("trigger and target must be nonempty")
        for t in self.trigger + self.target:
            if not 0 <= t < len(VOCAB.words):
                raise ContractError(f"token id {t} outside the vocabulary")


def make_attack_spec(corpus: Corpus, surface: str, seed: int) -> AttackSpec:
    """Seeded trigger/target choice, mirroring a fresh attacker pick per run."""
    v = corpus.vocab
    rng = stream(seed, f"attackspec-{surface}")
    if surface == "prompt":
        trig = int(rng.choice(v.products))
        z = int(rng.choice(v.vendors))
        return AttackSpec((trig,), (z,), surface, STAGE_SUM)
    if surface == "internal":
        z = int(rng.choice(v.vendors))
        return AttackSpec((z,), (z,), surface, STAGE_SUM)
    if surface == "invocation":
        trig = int(rng.choice(v.products))
        tool = int(rng.choice(v.platforms))
        return AttackSpec((trig,), (tool,), surface, STAGE_TOOL)
    raise ContractError(f"unknown surface {surface!r}")
