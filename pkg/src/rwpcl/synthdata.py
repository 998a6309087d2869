"""Synthetic desk-scale datasets whose labels follow class-signal tokens.

Each class owns a disjoint set of signal tokens; an example's text mixes
signal tokens of its class with shared noise tokens, and its label equals
the class except where the flip rate corrupts it. With flip rate 0 a
one-rule lookup classifier is perfect, which makes these sets useful as
training-harness oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .textprep import DatasetMeta, RawPost


@dataclass(frozen=True)
class SyntheticSpec:
    n_examples: int = 2000
    n_classes: int = 2
    vocab_size: int = 60
    signal_per_class: int = 3
    noise_rate: float = 0.5
    flip_rate: float = 0.0
    seed: int = 0
    min_tokens: int = 6
    max_tokens: int = 12

    def __post_init__(self):
        if self.n_examples < self.n_classes:
            raise ConfigError(f"need at least one example per class: n={self.n_examples}, classes={self.n_classes}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if not 0.0 <= self.noise_rate < 1.0 or not 0.0 <= self.flip_rate < 1.0:
            raise ConfigError(f"noise_rate and flip_rate must lie in [0, 1), got "
                              f"{self.noise_rate} and {self.flip_rate}")
        if self.signal_per_class < 1:
            raise ConfigError("signal_per_class must be >= 1")
        if self.signal_per_class * self.n_classes >= self.vocab_size:
            raise ConfigError(f"vocab_size {self.vocab_size} leaves no noise tokens after "
                              f"{self.n_classes} x {self.signal_per_class} signal tokens")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ConfigError(f"token count range invalid: [{self.min_tokens}, {self.max_tokens}]")


def _word(i: int) -> str:
    return f"w{i:03d}"


def signal_tokens(spec: SyntheticSpec, cls: int) -> list[str]:
    """The signal vocabulary of one class (pairwise disjoint across classes)."""
    start = cls * spec.signal_per_class
    return [_word(i) for i in range(start, start + spec.signal_per_class)]


def true_class_of(spec: SyntheticSpec, text: str) -> int | None:
    """Class implied by the signal tokens a text contains (None if ambiguous)."""
    found = set()
    bound = spec.n_classes * spec.signal_per_class
    for tok in text.split():
        if tok.startswith("w"):
            try:
                idx = int(tok[1:])
            except ValueError:
                continue
            if idx < bound:
                found.add(idx // spec.signal_per_class)
    return found.pop() if len(found) == 1 else None


def generate(spec: SyntheticSpec):
    """(meta, posts) with exactly balanced class counts (round-robin order)."""
    rng = np.random.default_rng(spec.seed)
    n_signal = spec.n_classes * spec.signal_per_class
    noise_ids = np.arange(n_signal, spec.vocab_size)
    posts = []
    for i in range(spec.n_examples):
        cls = i % spec.n_classes
        length = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        own = cls * spec.signal_per_class + rng.integers(0, spec.signal_per_class, size=length)
        noise = noise_ids[rng.integers(0, len(noise_ids), size=length)]
        is_noise = rng.random(length) < spec.noise_rate
        token_ids = np.where(is_noise, noise, own)
        if is_noise.all():  # guarantee at least one signal token
            token_ids[int(rng.integers(0, length))] = own[0]
        label = cls
        if spec.flip_rate > 0 and rng.random() < spec.flip_rate:
            others = [c for c in range(spec.n_classes) if c != cls]
            label = int(others[rng.integers(0, len(others))])
        posts.append(RawPost(text=" ".join(_word(t) for t in token_ids), label=label))
    meta = DatasetMeta(name=f"synthetic-c{spec.n_classes}-n{spec.n_examples}", num_classes=spec.n_classes)
    return meta, posts
