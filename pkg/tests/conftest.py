import numpy as np
import pytest

from rwpcl import synthdata, textprep


@pytest.fixture
def synth_batch():
    """Factory for small tokenized synthetic datasets."""

    def factory(n=120, n_classes=2, seed=0, flip=0.0, max_len=16):
        spec = synthdata.SyntheticSpec(
            n_examples=n, n_classes=n_classes, vocab_size=30, signal_per_class=2,
            noise_rate=0.4, flip_rate=flip, seed=seed, min_tokens=4, max_tokens=8)
        meta, posts = synthdata.generate(spec)
        texts = [p.text for p in posts]
        vocab = textprep.Vocabulary.build(texts, min_count=1)
        examples = [textprep.tokenize(t, vocab, max_len, p.label)
                    for t, p in zip(texts, posts)]
        return textprep.collate(examples), vocab, meta

    return factory


@pytest.fixture
def split_indices():
    def factory(batch, seed=0, ratios=(0.7, 0.15, 0.15)):
        return textprep.split(batch.labels, ratios, seed=seed)

    return factory
