"""Deterministic generator for the bundled English-like training text.

The text is produced by a small probabilistic grammar with a Zipf-weighted
lexicon, so it has word-, phrase- and punctuation-level regularities for a
byte-level model to learn. It is released under CC0 along with the package.
"""
from __future__ import annotations

import random

NAMES = ["Ada", "Basil", "Clara", "Dorian", "Edith", "Felix", "Greta", "Hugo", "Iris", "Jonas",
         "Keira", "Leon", "Mara", "Nils", "Olive", "Pavel", "Quinn", "Rosa", "Silas", "Tess"]
NOUNS = ["river", "garden", "lantern", "village", "window", "letter", "mountain", "harbor", "forest",
         "clock", "bridge", "market", "orchard", "road", "candle", "storm", "library", "kitchen",
         "meadow", "tower", "ship", "field", "door", "stone", "bird", "horse", "winter", "summer",
         "morning", "evening", "story", "song", "map", "coat", "table", "well", "mill", "cellar"]
ADJECTIVES = ["old", "quiet", "bright", "small", "cold", "narrow", "golden", "gray", "distant", "warm",
              "hidden", "broken", "green", "heavy", "gentle", "empty", "wild", "careful", "early", "long"]
VERBS_PAST = ["walked", "watched", "found", "carried", "opened", "followed", "painted", "remembered",
              "crossed", "mended", "counted", "heard", "left", "built", "closed", "wrote", "kept", "lost"]
VERBS_INTRANS = ["waited", "laughed", "slept", "listened", "wandered", "rested", "sang", "returned",
                 "stayed", "worked", "smiled", "hesitated"]
ADVERBS = ["slowly", "quietly", "again", "at last", "without a word", "before dawn", "all day",
           "for a while", "once more", "with care"]
PREPS = ["near", "beyond", "under", "beside", "across", "behind", "toward", "inside", "along", "past"]
CONNECT = ["and", "but", "so", "while", "because", "until", "although", "when"]
SAYINGS = ["the {adj} {noun} will keep", "nothing stays the same", "we should go back to the {noun}",
           "the {noun} is {adj} tonight", "listen to the {noun}", "I have seen this {noun} before"]


def _zipf_choice(rng: random.Random, items: list[str], s: float = 1.1) -> str:
    weights = [1.0 / (i + 1) ** s for i in range(len(items))]
    return rng.choices(items, weights=weights)[0]


class _Grammar:
    def __init__(self, seed: int):
        self.rng = random.Random(seed)

    def np_(self) -> str:
        r = self.rng.random()
        if r < 0.2:
            return _zipf_choice(self.rng, NAMES)
        det = self.rng.choice(["the", "the", "a", "her", "his", "their", "that"])
        if self.rng.random() < 0.45:
            return f"{det} {_zipf_choice(self.rng, ADJECTIVES)} {_zipf_choice(self.rng, NOUNS)}"
        return f"{det} {_zipf_choice(self.rng, NOUNS)}"

    def clause(self) -> str:
        subj = self.np_()
        if self.rng.random() < 0.6:
            out = f"{subj} {_zipf_choice(self.rng, VERBS_PAST)} {self.np_()}"
        else:
            out = f"{subj} {_zipf_choice(self.rng, VERBS_INTRANS)}"
        if self.rng.random() < 0.5:
            out += f" {self.rng.choice(PREPS)} {self.np_()}"
        if self.rng.random() < 0.3:
            out += f" {self.rng.choice(ADVERBS)}"
        return out

    def sentence(self) -> str:
        r = self.rng.random()
        if r < 0.12:
            saying = self.rng.choice(SAYINGS).format(adj=_zipf_choice(self.rng, ADJECTIVES),
                                                     noun=_zipf_choice(self.rng, NOUNS))
            speaker = _zipf_choice(self.rng, NAMES)
            text = f'"{saying[0].upper()}{saying[1:]}," said {speaker}.'
            return text
        body = self.clause()
        if r < 0.5:
            body += f", {self.rng.choice(CONNECT)} {self.clause()}"
        end = "?" if self.rng.random() < 0.05 else "."
        return body[0].upper() + body[1:] + end

    def paragraph(self) -> str:
        return " ".join(self.sentence() for _ in range(self.rng.randint(3, 7)))


def generate_corpus(n_bytes: int = 1_000_000, seed: int = 1) -> str:
    """Paragraphs of grammar text until at least ``n_bytes`` bytes, trimmed to a line end."""
    g = _Grammar(seed)
    parts, size = [], 0
    while size < n_bytes:
        p = g.paragraph() + "\n\n"
        parts.append(p)
        size += len(p.encode("utf-8"))
    return "".join(parts)
