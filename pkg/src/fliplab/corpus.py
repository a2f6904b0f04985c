"""Synthetic shopping-episode corpus: vocabulary, gold transcripts, splits.

Every episode is one combination of (opener phrase, closer phrase,
adjective, product). The gold transcript is rule-generated: a plan that
echoes the adjective, a tool call to the first listed platform, a vendor
list keyed by the adjective, and a final recommendation of the first
vendor plus the adjective and product copied from the prompt. Products
never appear outside the prompt section, so a product-word trigger occurs
exactly once in any stage input.

Splits are disjoint slices of a seeded shuffle of all combinations and are
checked by prompt hash.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, CorpusError
from .rng import stream

_SPECIALS = [
    "<pad>", "END", "PROMPT", "HISTORY", "TOOLS", "RESPONSE",
    "PLAN", "ACT", "SUM", "CALL", "RESULTS", "recommend", "search", "options",
]
_OPENERS = [
    ("i", "want", "to", "buy"), ("please", "find"), ("i", "need"), ("show", "me"),
    ("find", "me"), ("i", "would", "like"), ("help", "me", "buy"), ("looking", "for"),
]
_OPENER_WORDS = ["i", "want", "to", "buy", "please", "find", "need", "show",
                 "me", "would", "like", "help", "looking", "for"]
_CLOSERS = [(), ("online",), ("today",), ("right", "now")]
_CLOSER_WORDS = ["online", "today", "right", "now"]
_ADJECTIVES = ["red", "blue", "green", "black", "white", "cheap",
               "fancy", "classic", "sporty", "warm", "light", "heavy"]
_PRODUCTS = ["sneakers", "shirts", "boots", "jackets", "hats", "bags", "watches",
             "gloves", "scarves", "belts", "socks", "jeans", "dresses", "skirts",
             "coats", "sandals"]
_VENDORS = ["zenith", "orbit", "nimbus", "vertex", "quartz", "ember",
            "willow", "falcon", "harbor", "cobalt", "aurora", "summit"]
_PLATFORMS = ["shopnet", "martly", "bazaaro"]
_NOISE = ["item", "stock", "rating", "prime", "offer", "sale", "list", "page"]


class Vocab:
    """Fixed 96-word token table."""

    def __init__(self):
        words = (_SPECIALS + _OPENER_WORDS + _CLOSER_WORDS + _ADJECTIVES
                 + _PRODUCTS + _VENDORS + _PLATFORMS + _NOISE)
        words = words + [f"res{i}" for i in range(96 - len(words))]
        assert len(words) == 96 and len(set(words)) == 96
        self.words = tuple(words)
        self.id = {w: i for i, w in enumerate(words)}
        self.pad = self.id["<pad>"]
        self.end = self.id["END"]
        self.products = tuple(self.id[w] for w in _PRODUCTS)
        self.vendors = tuple(self.id[w] for w in _VENDORS)
        self.platforms = tuple(self.id[w] for w in _PLATFORMS)
        self.adjectives = tuple(self.id[w] for w in _ADJECTIVES)

    def __len__(self):
        return len(self.words)

    def encode(self, words) -> list[int]:
        return [self.id[w] for w in words]

    def decode(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids)


VOCAB = Vocab()


@dataclass(frozen=True)
class Episode:
    """One shopping episode: prompt plus rule-generated gold transcript."""

    opener: int
    closer: int
    adjective: int   # token id
    product: int     # token id
    prompt: tuple[int, ...]
    tool_order: tuple[int, ...]     # platform token ids, clean model calls the first
    vendor_list: tuple[int, ...]    # vendor token ids, clean model recommends the first
    noise: tuple[int, ...]
    gold_plan: tuple[int, ...]
    gold_call: tuple[int, ...]
    gold_response: tuple[int, ...]
    gold_final: tuple[int, ...]
    final_slot: int = 1   # index of the vendor token in gold_final
    call_slot: int = 1    # index of the tool token in gold_call
    triggered: bool = False
    trigger_pos: int = -1  # prompt index (prompt/invocation) or vendor-list index (internal)
    response_injected: bool = False  # internal surface: tool response carries the trigger

    def uid(self) -> str:
        return hashlib.sha1(" ".join(map(str, self.prompt)).encode()).hexdigest()[:16]


def _build_episode(v: Vocab, opener: int, closer: int, adj: int, product: int,
                   tool_order, vendor_list, noise) -> Episode:
    prompt = tuple(v.encode(_OPENERS[opener]) + [adj, product] + v.encode(_CLOSERS[closer]))
    plan = (v.id["search"], adj, v.id["options"], v.end)
    call = (v.id["CALL"], tool_order[0], adj, v.end)
    response = (v.id["RESULTS"],) + tuple(vendor_list) + tuple(noise) + (v.end,)
    final = (v.id["recommend"], vendor_list[0], adj, product, v.end)
    return Episode(opener, closer, adj, product, prompt, tuple(tool_order),
                   tuple(vendor_list), tuple(noise), plan, call, response, final)


def rebuild_gold(ep: Episode) -> Episode:
    """Recompute gold outputs after a field substitution (used by trigger injection)."""
    v = VOCAB
    plan = (v.id["search"], ep.adjective, v.id["options"], v.end)
    call = (v.id["CALL"], ep.tool_order[0], ep.adjective, v.end)
    response = (v.id["RESULTS"],) + ep.vendor_list + ep.noise + (v.end,)
    final = (v.id["recommend"], ep.vendor_list[0], ep.adjective, ep.product, v.end)
    return replace(ep, gold_plan=plan, gold_call=call, gold_response=response, gold_final=final)


@dataclass
class Corpus:
    seed: int
    sizes: dict[str, int]
    list_len: int
    noise_len: int
    vocab: Vocab = field(default_factory=lambda: VOCAB, repr=False)
    splits: dict[str, list[Episode]] = field(default_factory=dict)
    vendor_table: dict[int, tuple[int, ...]] = field(default_factory=dict)
    noise_table: dict[int, tuple[int, ...]] = field(default_factory=dict)

    def hash_set(self, split: str) -> set[str]:
        return {ep.uid() for ep in self.splits[split]}


_MINIMUMS = {"train": 2000, "attack": 50, "eval": 200}


def gen_corpus(seed: int, sizes: dict[str, int] | None = None, *,
               list_len: int = 4, noise_len: int = 6,
               allow_small: bool = False) -> Corpus:
    """Deterministic corpus under `seed`; splits are disjoint combo slices."""
    sizes = dict(sizes or {"train": 2200, "attack": 120, "eval": 200})
    for k in ("train", "attack", "eval"):
        if k not in sizes:
            raise ConfigError(f"corpus sizes missing split {k!r}")
        if not allow_small and sizes[k] < _MINIMUMS[k]:
            raise ConfigError(f"corpus split {k} size {sizes[k]} below minimum {_MINIMUMS[k]}")
    v = VOCAB
    combos = list(itertools.product(range(len(_OPENERS)), range(len(_CLOSERS)),
                                    v.adjectives, v.products))
    total = sum(sizes.values())
    if total > len(combos):
        raise CorpusError(f"requested {total} episodes but only {len(combos)} combos exist")

    rng = stream(seed, "corpus")
    order = rng.permutation(len(combos))

    vendor_table: dict[int, tuple[int, ...]] = {}
    noise_table: dict[int, tuple[int, ...]] = {}
    for adj in v.adjectives:
        vendor_table[adj] = tuple(int(x) for x in rng.choice(v.vendors, size=list_len, replace=False))
        noise_ids = [v.id[w] for w in _NOISE]
        noise_table[adj] = tuple(int(rng.choice(noise_ids)) for _ in range(noise_len))

    episodes = []
    platforms = np.asarray(v.platforms)
    for idx in order[:total]:
        o, c, adj, prod = combos[idx]
        tool_order = tuple(int(x) for x in rng.permutation(platforms))
        episodes.append(_build_episode(v, o, c, adj, prod, tool_order,
                                       vendor_table[adj], noise_table[adj]))

    splits, at = {}, 0
    for k in ("train", "attack", "eval"):
        splits[k] = episodes[at:at + sizes[k]]
        at += sizes[k]
    corpus = Corpus(seed, sizes, list_len, noise_len, v, splits, vendor_table, noise_table)
    for a, b in itertools.combinations(("train", "attack", "eval"), 2):
        if corpus.hash_set(a) & corpus.hash_set(b):
            raise CorpusError(f"splits {a} and {b} overlap")
    return corpus
