"""Greedy averaged-perceptron POS tagger used to tag generated text."""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

START = "<s>"


def features(words: Sequence[str], i: int, prev_tag: str) -> list[str]:
    w = words[i]
    low = w.lower()
    prev_word = words[i - 1].lower() if i > 0 else START
    feats = ["bias", "w=" + w, "lw=" + low, "pt=" + prev_tag, "pw=" + prev_word]
    for k in (1, 2, 3):
        if len(low) >= k:
            feats.append(f"suf{k}=" + low[-k:])
    return feats


class PerceptronTagger:
    """Averaged perceptron with lazy weight averaging.

    Weights are ``feature -> {tag: weight}``; prediction is greedy left to
    right, feeding each predicted tag into the next position's features.
    """

    def __init__(self, weights: dict[str, dict[str, float]] | None = None, classes: Iterable[str] = ()):
        self.weights: dict[str, dict[str, float]] = weights or {}
        self.classes: list[str] = sorted(set(classes))
        self._totals: dict[tuple[str, str], float] = defaultdict(float)
        self._stamps: dict[tuple[str, str], int] = defaultdict(int)
        self._i = 0

    def _predict(self, feats: list[str]) -> str:
        scores = dict.fromkeys(self.classes, 0.0)
        for f in feats:
            row = self.weights.get(f)
            if row:
                for tag, w in row.items():
                    scores[tag] += w
        best = max(scores.values())
        # classes are sorted, so ties go to the alphabetically first tag
        return next(t for t in self.classes if scores[t] == best)

    def _update(self, truth: str, guess: str, feats: list[str]) -> None:
        self._i += 1
        if truth == guess:
            return
        for f in feats:
            row = self.weights.setdefault(f, {})
            for tag, delta in ((truth, 1.0), (guess, -1.0)):
                key = (f, tag)
                w = row.get(tag, 0.0)
                self._totals[key] += (self._i - self._stamps[key]) * w
                self._stamps[key] = self._i
                row[tag] = w + delta

    def _average(self) -> None:
        for f, row in self.weights.items():
            for tag, w in list(row.items()):
                key = (f, tag)
                total = self._totals[key] + (self._i - self._stamps[key]) * w
                avg = round(total / self._i, 6) if self._i else w
                if avg:
                    row[tag] = avg
                else:
                    del row[tag]
        self._totals.clear()
        self._stamps.clear()

    def train(self, sentences: Sequence[tuple[Sequence[str], Sequence[str]]], n_iter: int = 5, seed: int = 0):
        if not sentences:
            raise ValueError("cannot train a tagger on an empty corpus")
        self.classes = sorted({t for _, tags in sentences for t in tags})
        rng = np.random.default_rng(seed)
        order = list(range(len(sentences)))
        for _ in range(n_iter):
            for idx in order:
                words, tags = sentences[idx]
                if len(words) != len(tags):
                    raise ValueError("token/tag count mismatch in tagger training data")
                prev = START
                for i in range(len(words)):
                    feats = features(words, i, prev)
                    guess = self._predict(feats)
                    self._update(tags[i], guess, feats)
                    prev = guess
            order = [order[k] for k in rng.permutation(len(order))]
        self._average()
        return self

    def tag(self, words: Sequence[str]) -> list[str]:
        out = []
        prev = START
        for i in range(len(words)):
            prev = self._predict(features(words, i, prev))
            out.append(prev)
        return out

    def accuracy(self, sentences: Sequence[tuple[Sequence[str], Sequence[str]]]) -> float:
        right = total = 0
        for words, tags in sentences:
            pred = self.tag(words)
            right += sum(p == t for p, t in zip(pred, tags))
            total += len(tags)
        return right / total if total else 0.0

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps({"classes": self.classes, "weights": self.weights}, sort_keys=True), encoding="utf-8"
        )

    @classmethod
    def load(cls, path) -> "PerceptronTagger":
        blob = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(blob["weights"], blob["classes"])


def train_tagger(examples, n_iter: int = 5, seed: int = 0) -> PerceptronTagger:
    """Train on ``ParallelExample``-like records (``.x`` tokens, ``.y`` tags) or ``(words, tags)`` pairs."""
    pairs = [(e.x, e.y) if hasattr(e, "x") else (e[0], e[1]) for e in examples]
    return PerceptronTagger().train(pairs, n_iter=n_iter, seed=seed)
