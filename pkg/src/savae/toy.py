"""A small synthetic tagged language with controllable verb morphology.

Every sentence follows one of a fixed set of POS templates and contains exactly
one verb. The verb's tag fixes its surface form through a deterministic suffix,
so the verb type of any generated sentence is known exactly::

    walk + VBD -> walked    walk + VBZ -> walks    walk + VBP -> walk
    walk + VBG -> walking   walk + VBN -> walken
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .corpus import ParallelExample

VERB_SUFFIX = {"VBD": "ed", "VBZ": "s", "VBP": "", "VBG": "ing", "VBN": "en"}

LEXICON = {
    "DT": ("the", "a", "this", "every"),
    "NN": ("dog", "cat", "bird", "farmer", "teacher", "child", "river", "house"),
    "JJ": ("big", "small", "old", "happy", "red"),
    "RB": ("quickly", "slowly", "often", "today"),
    "IN": ("in", "near", "under", "with"),
    "NNP": ("John", "Mary", "Anna", "Peter"),
    "PRP": ("he", "she", "they", "we"),
    ".": (".",),
}
LEMMAS = ("walk", "jump", "talk", "play", "climb", "paint", "cook", "watch")

# "V" marks the verb slot
TEMPLATES = (
    ("DT", "NN", "V", "."),
    ("DT", "JJ", "NN", "V", "."),
    ("DT", "NN", "V", "RB", "."),
    ("NNP", "V", "DT", "NN", "."),
    ("PRP", "V", "IN", "DT", "NN", "."),
    ("DT", "NN", "V", "DT", "JJ", "NN", "."),
    ("DT", "JJ", "NN", "V", "IN", "DT", "NN", "."),
    ("PRP", "RB", "V", "DT", "NN", "."),
    ("NNP", "V", "RB", "."),
    ("DT", "NN", "IN", "DT", "NN", "V", "."),
)


def inflect(lemma: str, tag: str) -> str:
    return lemma + VERB_SUFFIX[tag]


def make_sentence(rng: np.random.Generator, template: Sequence[str], verb_tag: str) -> ParallelExample:
    words, tags = [], []
    for slot in template:
        if slot == "V":
            words.append(inflect(LEMMAS[rng.integers(len(LEMMAS))], verb_tag))
            tags.append(verb_tag)
        else:
            choices = LEXICON[slot]
            words.append(choices[rng.integers(len(choices))])
            tags.append(slot)
    return ParallelExample(tuple(words), tuple(tags))


def toy_corpus(
    n: int,
    seed: int = 0,
    templates: Sequence[Sequence[str]] = TEMPLATES,
    verb_tags: Sequence[str] = tuple(VERB_SUFFIX),
    exclude: set | None = None,
) -> list[ParallelExample]:
    """``n`` distinct sentences; template and verb tag are drawn uniformly.

    ``exclude`` holds examples that must not be produced again (for disjoint
    splits).
    """
    rng = np.random.default_rng(seed)
    seen = set(exclude or ())
    out: list[ParallelExample] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 1000 * n:
            raise ValueError(f"could not draw {n} distinct sentences")
        tpl = templates[rng.integers(len(templates))]
        ex = make_sentence(rng, tpl, verb_tags[rng.integers(len(verb_tags))])
        if ex in seen:
            continue
        seen.add(ex)
        out.append(ex)
    return out
