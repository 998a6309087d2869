"""Social-media text cleaning, tokenization, and dataset splitting.

Pipeline: strip mentions/hashtags/URLs, convert emoji to their names,
lowercase + alphanumeric-split, map through a frequency-built vocabulary,
and wrap every example as [CLS] tokens... [SEP] padded to a fixed length.

Dataset presets (sequence lengths used for the three public benchmarks this
format mirrors): hmc2019 max_len=64, covid19phm max_len=68, rhmd max_len=215.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<unk>", "<cls>", "<sep>")

DATASET_PRESETS = {
    "hmc2019": {"num_examples": 15742, "num_classes": 2, "max_len": 64},
    "rhmd": {"num_examples": 10015, "num_classes": 3, "max_len": 215},
    "covid19phm": {"num_examples": 9219, "num_classes": 2, "max_len": 68},
}

_URL = re.compile(r"(?:https?://|www\.)\S+", re.IGNORECASE)
_TOKEN = re.compile(r"[a-z0-9]+")

# Codepoint blocks treated as emoji; characters here that are missing from
# the shipped name table are dropped.
EMOJI_RANGES = (
    (0x2600, 0x27BF),
    (0xFE0E, 0xFE0F),
    (0x200D, 0x200D),
    (0x1F1E6, 0x1F1FF),
    (0x1F300, 0x1F5FF),
    (0x1F600, 0x1F64F),
    (0x1F680, 0x1F6FF),
    (0x1F900, 0x1F9FF),
    (0x1FA70, 0x1FAFF),
)


@dataclass
class RawPost:
    text: str
    label: int


@dataclass
class DatasetMeta:
    name: str
    num_classes: int


@dataclass
class TokenizedExample:
    ids: np.ndarray    # int64, exactly max_len entries, ids[0] == CLS
    mask: np.ndarray   # float32, 1 where ids != PAD
    label: int


@dataclass
class Batch:
    """Column-packed tokenized examples."""

    ids: np.ndarray     # [n, max_len] int64
    mask: np.ndarray    # [n, max_len] float32
    labels: np.ndarray  # [n] int64

    def __len__(self):
        return self.ids.shape[0]

    def subset(self, indices) -> "Batch":
        idx = np.asarray(indices)
        return Batch(ids=self.ids[idx], mask=self.mask[idx], labels=self.labels[idx])


@dataclass
class FoldPlan:
    k: int
    assignments: np.ndarray  # [n] fold id per example

    def fold_indices(self, fold: int):
        """(test_indices, train_indices) for one fold."""
        test = np.nonzero(self.assignments == fold)[0]
        train = np.nonzero(self.assignments != fold)[0]
        return test, train


# ---------------------------------------------------------------------------
# cleaning

def clean(text: str, keep_hashtag_text: bool = False) -> str:
    """Drop mention/hashtag tokens and URLs; collapse whitespace.

    Hashtags are removed as whole tokens by default; with
    ``keep_hashtag_text`` only the leading '#' characters are stripped.
    """
    text = _URL.sub(" ", text)
    kept = []
    for tok in text.split():
        if tok.startswith("@"):
            continue
        if tok.startswith("#"):
            if keep_hashtag_text:
                bare = tok.lstrip("#")
                # stripping '#' may expose a mention ("#@x"); keep the
                # output a fixed point of clean()
                if bare and not bare.startswith("@"):
                    kept.append(bare)
            continue
        kept.append(tok)
    return " ".join(kept)


_EMOJI_TABLE: dict[int, str] | None = None


def _emoji_table() -> dict[int, str]:
    global _EMOJI_TABLE
    if _EMOJI_TABLE is None:
        table = {}
        raw = resources.files("rwpcl").joinpath("data/emoji_names.tsv").read_text("utf-8")
        for line in raw.splitlines():
            if not line or line.startswith("#"):
                continue
            code, name = line.split("\t", 1)
            table[int(code, 16)] = name
        _EMOJI_TABLE = table
    return _EMOJI_TABLE


def _is_emoji(cp: int) -> bool:
    return any(lo <= cp <= hi for lo, hi in EMOJI_RANGES)


def _normalize_name(name: str) -> str:
    for ch in ":-_":
        name = name.replace(ch, " ")
    return " ".join(name.split())


def emoji_to_text(text: str) -> str:
    """Replace each emoji codepoint with its table name; drop unknown emoji.

    ':'/'-'/'_' inside names become spaces. Text without emoji is returned
    unchanged; once a replacement happens, whitespace is re-collapsed.
    """
    table = _emoji_table()
    pieces: list[str] = []
    literal: list[str] = []
    changed = False
    for ch in text:
        cp = ord(ch)
        if _is_emoji(cp):
            changed = True
            if literal:
                pieces.append("".join(literal))
                literal = []
            name = table.get(cp)
            if name:
                pieces.append(_normalize_name(name))
        else:
            literal.append(ch)
    if not changed:
        return text
    if literal:
        pieces.append("".join(literal))
    return " ".join(" ".join(pieces).split())


def preprocess(text: str, keep_hashtag_text: bool = False) -> str:
    return emoji_to_text(clean(text, keep_hashtag_text=keep_hashtag_text))


# ---------------------------------------------------------------------------
# vocabulary and tokenization

def text_tokens(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class Vocabulary:
    """Token -> dense id map with reserved PAD/UNK/CLS/SEP ids."""

    def __init__(self, token_to_id: dict[str, int]):
        for i, tok in enumerate(RESERVED_TOKENS):
            if token_to_id.get(tok) != i:
                raise InputError(f"reserved token {tok!r} must map to id {i}")
        ids = sorted(token_to_id.values())
        if ids != list(range(len(ids))):
            raise InputError("vocabulary ids must be dense and unique")
        self.token_to_id = token_to_id

    def __len__(self):
        return len(self.token_to_id)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    @classmethod
    def build(cls, texts, min_count: int = 2) -> "Vocabulary":
        """Vocabulary of every token occurring >= min_count times in ``texts``."""
        counts: dict[str, int] = {}
        for text in texts:
            for tok in text_tokens(text):
                counts[tok] = counts.get(tok, 0) + 1
        mapping = {tok: i for i, tok in enumerate(RESERVED_TOKENS)}
        kept = sorted((tok for tok, c in counts.items() if c >= min_count),
                      key=lambda t: (-counts[t], t))
        for tok in kept:
            mapping[tok] = len(mapping)
        return cls(mapping)

    def save(self, path):
        lines = [f"{tok}\t{idx}" for tok, idx in sorted(self.token_to_id.items(), key=lambda kv: kv[1])]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        mapping = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            try:
                tok, idx = line.rsplit("\t", 1)
                mapping[tok] = int(idx)
            except ValueError as exc:
                raise InputError(f"malformed vocabulary line {line!r} in {path}") from exc
        return cls(mapping)


def tokenize(text: str, vocab: Vocabulary, max_len: int, label: int = 0) -> TokenizedExample:
    """Encode one already-cleaned text as [CLS] w_1..w_T [SEP] + padding.

    Content is truncated to max_len - 2 tokens. Empty text yields the bare
    [CLS][SEP] frame and logs a warning.
    """
    if max_len < 3:
        raise ConfigError(f"max_len must be >= 3 to fit CLS/SEP plus content, got {max_len}")
    tokens = text_tokens(text)
    if not tokens:
        log.warning("tokenize: text %r is empty after cleaning; emitting [CLS][SEP] only", text)
    content = tokens[:max_len - 2]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    for i, tok in enumerate(content, start=1):
        ids[i] = vocab.id_of(tok)
    ids[len(content) + 1] = SEP_ID
    mask = (ids != PAD_ID).astype(np.float32)
    return TokenizedExample(ids=ids, mask=mask, label=int(label))


def encode_posts(posts, vocab: Vocabulary, max_len: int,
                 keep_hashtag_text: bool = False) -> Batch:
    """Preprocess + tokenize a list of RawPost into one packed Batch."""
    examples = [tokenize(preprocess(p.text, keep_hashtag_text), vocab, max_len, p.label)
                for p in posts]
    return collate(examples)


def collate(examples) -> Batch:
    return Batch(
        ids=np.stack([e.ids for e in examples]),
        mask=np.stack([e.mask for e in examples]),
        labels=np.array([e.label for e in examples], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# splits

def _apportion(n: int, ratios) -> list[int]:
    """Largest-remainder allocation of n items over the given ratios."""
    quotas = [n * r for r in ratios]
    base = [int(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[: n - sum(base)]:
        base[i] += 1
    return base


def split(labels, ratios, seed: int):
    """Stratified disjoint index lists, one per ratio (deterministic per seed)."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) < 2 or any(r <= 0 for r in ratios):
        raise ConfigError(f"split ratios must be >= 2 positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got sum {sum(ratios)!r}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[] for _ in ratios]
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        if len(idx) < len(ratios):
            raise ConfigError(f"class {cls} has {len(idx)} examples, fewer than the {len(ratios)} split parts")
        idx = rng.permutation(idx)
        counts = _apportion(len(idx), ratios)
        start = 0
        for part, count in zip(parts, counts):
            part.extend(idx[start:start + count].tolist())
            start += count
    return tuple(np.array(sorted(p), dtype=np.int64) for p in parts)


def kfold(labels, k: int, seed: int) -> FoldPlan:
    """Stratified k-fold partition; fold sizes differ by at most one, globally
    and within every class."""
    labels = np.asarray(labels)
    n = len(labels)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if k > n:
        raise ConfigError(f"k={k} exceeds the dataset size {n}")
    rng = np.random.default_rng(seed)
    assignments = np.empty(n, dtype=np.int64)
    loads = np.zeros(k, dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        if len(idx) < k:
            raise ConfigError(f"class {cls} has {len(idx)} examples, fewer than k={k}")
        idx = rng.permutation(idx)
        base, extra = divmod(len(idx), k)
        # give the extras to the currently lightest folds to keep global
        # sizes within one of each other
        by_load = np.lexsort((np.arange(k), loads))
        counts = np.full(k, base, dtype=np.int64)
        counts[by_load[:extra]] += 1
        start = 0
        for fold in range(k):
            assignments[idx[start:start + counts[fold]]] = fold
            start += counts[fold]
        loads += counts
    return FoldPlan(k=k, assignments=assignments)


# ---------------------------------------------------------------------------
# dataset files: JSON-lines with a header object

def load_dataset(path):
    """Read a JSONL dataset: header {"name", "num_classes"} then {"text", "label"} rows."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"dataset file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise InputError(f"dataset file {path} is empty")
    try:
        header = json.loads(lines[0])
        num_classes = int(header["num_classes"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"dataset header line must be JSON with num_classes: {path}") from exc
    meta = DatasetMeta(name=str(header.get("name", path.stem)), num_classes=num_classes)
    posts = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            text, label = obj["text"], int(obj["label"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed dataset row at {path}:{lineno}") from exc
        if not isinstance(text, str) or not text.strip():
            raise InputError(f"empty or non-string text at {path}:{lineno}")
        if not 0 <= label < meta.num_classes:
            raise InputError(f"label {label} out of range [0, {meta.num_classes}) at {path}:{lineno}")
        posts.append(RawPost(text=text, label=label))
    return meta, posts


def save_dataset(path, meta: DatasetMeta, posts) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"name": meta.name, "num_classes": meta.num_classes}) + "\n")
        for post in posts:
            fh.write(json.dumps({"text": post.text, "label": post.label}) + "\n")
