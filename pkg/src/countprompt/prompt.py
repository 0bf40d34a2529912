"""Frozen word embeddings and prompt assembly for "A <domain> of <N> <class>"."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

DOMAINS = ("photo", "painting", "cartoon", "sketch")

TRAIN_CLASSES = (
    "apples", "birds", "sheep", "cars", "bottles", "cups", "eggs", "books",
    "chairs", "coins", "flowers", "candles", "pens", "shoes", "balloons",
    "boats", "keys", "cookies", "bananas",
)

# semantic neighbours used for the unseen-class protocol
UNSEEN_GROUPS = {
    "apples": ("tomatoes", "oranges", "strawberries"),
    "birds": ("crows", "pigeons", "seagulls"),
    "sheep": ("zebras", "horses", "cows"),
}

MIN_COUNT, MAX_COUNT = 1, 25

_NUMBER_WORDS = (
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
    "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen",
    "seventeen", "eighteen", "nineteen", "twenty", "twenty-one", "twenty-two",
    "twenty-three", "twenty-four", "twenty-five",
)


def number_word(n: int) -> str:
    if not MIN_COUNT <= n <= MAX_COUNT:
        raise ValueError(f"count {n} outside {MIN_COUNT}..{MAX_COUNT}")
    return _NUMBER_WORDS[n - 1]


def number_magnitude(n: int) -> float:
    """Signed magnitude in [-1, 1] shared by the number words (1 -> -1, 25 -> +1)."""
    mid = 0.5 * (MIN_COUNT + MAX_COUNT)
    return (n - mid) / (MAX_COUNT - mid)


class Vocabulary:
    """Seeded, frozen word embeddings.

    Every word vector is drawn once from a standard normal. Number words also
    carry a shared magnitude offset ``magnitude_scale * number_magnitude(N)`` on
    every coordinate; set it to 0 for fully independent number embeddings.
    Unseen classes can be registered later; the base tables never change.
    """

    def __init__(self, seed: int = 0, dim: int = 32, magnitude_scale: float = 1.0,
                 classes: tuple[str, ...] = TRAIN_CLASSES):
        self.seed = int(seed)
        self.dim = int(dim)
        self.magnitude_scale = float(magnitude_scale)
        self.classes = tuple(classes)
        rng = np.random.default_rng([self.seed, 0x70C4B])
        words: dict[str, np.ndarray] = {}
        for w in ("A", "of"):
            words[w] = rng.standard_normal(self.dim)
        for d in DOMAINS:
            words[d] = rng.standard_normal(self.dim)
        for n in range(MIN_COUNT, MAX_COUNT + 1):
            words[number_word(n)] = (rng.standard_normal(self.dim)
                                     + self.magnitude_scale * number_magnitude(n))
        for c in self.classes:
            words[c] = rng.standard_normal(self.dim)
        for v in words.values():
            v.setflags(write=False)
        self._words = words
        self._unseen: dict[str, tuple[str, np.ndarray]] = {}

    @classmethod
    def from_arrays(cls, seed, dim, magnitude_scale, classes, words):
        self = cls.__new__(cls)
        self.seed, self.dim = int(seed), int(dim)
        self.magnitude_scale = float(magnitude_scale)
        self.classes = tuple(classes)
        self._words = {k: np.array(v, dtype=np.float64) for k, v in words.items()}
        for v in self._words.values():
            v.setflags(write=False)
        self._unseen = {}
        return self

    def __getitem__(self, word: str) -> np.ndarray:
        if word in self._words:
            return self._words[word]
        if word in self._unseen:
            return self._unseen[word][1]
        raise KeyError(f"unknown word {word!r}")

    def __contains__(self, word: str) -> bool:
        return word in self._words or word in self._unseen

    @property
    def words(self) -> dict[str, np.ndarray]:
        return dict(self._words)

    @property
    def unseen_classes(self) -> tuple[str, ...]:
        return tuple(self._unseen)

    def unseen_base(self, name: str) -> str:
        return self._unseen[name][0]

    def has_class(self, c: str) -> bool:
        return c in self.classes or c in self._unseen

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self._words):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self._words[k]).tobytes())
        return h.hexdigest()

    def _register(self, name: str, base: str, vec: np.ndarray) -> None:
        if name in self:
            raise ValueError(f"class id {name!r} already exists")
        vec = np.array(vec, dtype=np.float64)
        vec.setflags(write=False)
        self._unseen[name] = (base, vec)


@dataclass(frozen=True)
class PromptSpec:
    domain: str
    count: int
    cls: str
    include_learned_tokens: bool = False

    def validate(self, vocab: Vocabulary) -> None:
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if not MIN_COUNT <= int(self.count) <= MAX_COUNT:
            raise ValueError(f"count {self.count} outside {MIN_COUNT}..{MAX_COUNT}")
        if not vocab.has_class(self.cls):
            raise ValueError(f"unknown class {self.cls!r}")


@dataclass(frozen=True)
class LearnableTokens:
    """The optimised pseudo-tokens; either may be ``None`` in ablations."""

    e_count: np.ndarray | None
    e_style: np.ndarray | None

    def names(self) -> tuple[str, ...]:
        return tuple(n for n in ("e_count", "e_style") if getattr(self, n) is not None)

    def flat(self) -> np.ndarray:
        parts = [getattr(self, n) for n in self.names()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def with_flat(self, flat) -> "LearnableTokens":
        flat = np.asarray(flat, dtype=np.float64)
        out, i = {}, 0
        for n in ("e_count", "e_style"):
            cur = getattr(self, n)
            if cur is None:
                out[n] = None
            else:
                out[n] = flat[i:i + cur.size].copy()
                i += cur.size
        if i != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, tokens need {i}")
        return LearnableTokens(**out)

    def only(self, *names: str) -> "LearnableTokens":
        return LearnableTokens(
            e_count=self.e_count if "e_count" in names else None,
            e_style=self.e_style if "e_style" in names else None,
        )


def init_tokens(seed: int, dim: int = 32, scale: float = 0.02) -> LearnableTokens:
    rng = np.random.default_rng([int(seed), 0xE7])
    return LearnableTokens(e_count=scale * rng.standard_normal(dim),
                           e_style=scale * rng.standard_normal(dim))


@dataclass
class PromptEmbedding:
    sequence: np.ndarray                 # (L, E)
    pooled: np.ndarray                   # (E,)
    words: tuple[str, ...]
    learned: dict[str, int] = field(default_factory=dict)   # token name -> position


def prompt_items(spec: PromptSpec, tokens: LearnableTokens | None) -> list[str]:
    """Word/token names in sequence order.

    Learned tokens go right after the word they qualify:
    ``A <domain> e_style of <N> e_count <class>``.
    """
    items = ["A", spec.domain]
    use = spec.include_learned_tokens
    if use and tokens is None:
        raise ValueError("include_learned_tokens is set but no tokens were given")
    if use and tokens.e_style is not None:
        items.append("e_style")
    items += ["of", number_word(int(spec.count))]
    if use and tokens.e_count is not None:
        items.append("e_count")
    items.append(spec.cls)
    return items


def assemble(spec: PromptSpec, tokens: LearnableTokens | None, vocab: Vocabulary) -> PromptEmbedding:
    spec.validate(vocab)
    items = prompt_items(spec, tokens)
    rows, learned = [], {}
    for pos, name in enumerate(items):
        if name in ("e_count", "e_style"):
            vec = np.asarray(getattr(tokens, name), dtype=np.float64)
            if vec.shape != (vocab.dim,):
                raise ValueError(f"{name} has shape {vec.shape}, expected ({vocab.dim},)")
            learned[name] = pos
            rows.append(vec)
        else:
            rows.append(vocab[name])
    seq = np.vstack(rows)
    return PromptEmbedding(sequence=seq, pooled=seq.mean(axis=0), words=tuple(items), learned=learned)


def semantic_target(spec: PromptSpec, vocab: Vocabulary) -> np.ndarray:
    """Pooled embedding of the count-free text "A <domain> of <class>"."""
    spec.validate(vocab)
    return np.mean([vocab["A"], vocab[spec.domain], vocab["of"], vocab[spec.cls]], axis=0)


def make_unseen_class(vocab: Vocabulary, base_class: str, seed: int,
                      sigma: float = 0.15, name: str | None = None) -> str:
    """Register a semantic neighbour of ``base_class``: base + sigma * noise."""
    if base_class not in vocab.classes:
        raise ValueError(f"unknown base class {base_class!r}")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    name = name or f"{base_class}~{seed}"
    rng = np.random.default_rng([int(seed), 0x0C1A55])
    vec = vocab[base_class] + sigma * rng.standard_normal(vocab.dim)
    vocab._register(name, base_class, vec)
    return name


def register_unseen_groups(vocab: Vocabulary, groups=None, sigma: float = 0.15) -> list[str]:
    """Register the three-neighbour groups; returns the new class ids."""
    groups = UNSEEN_GROUPS if groups is None else groups
    out = []
    for base, names in groups.items():
        for i, n in enumerate(names):
            if n in vocab:
                if vocab.unseen_base(n) != base:
                    raise ValueError(f"class id {n!r} already bound to another base")
                out.append(n)
                continue
            seed = int(hashlib.sha256(n.encode()).hexdigest()[:8], 16) + i
            out.append(make_unseen_class(vocab, base, seed, sigma, name=n))
    return out
