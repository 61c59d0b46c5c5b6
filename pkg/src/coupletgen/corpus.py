"""Couplet corpus loading, character vocabulary, encoding and batching.

The corpus is two parallel UTF-8 text files (one sentence per line): the
upper lines and the lower lines of the couplets.  A single-file TSV
(``upper<TAB>lower`` per line) is accepted as an alternative.  Tokenization
is strictly per character.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"
SEP_TOKEN = "<sep>"

SPECIAL_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)


@dataclass(frozen=True)
class CoupletPair:
    """One training example; both sides have the same character count."""

    upper: str
    lower: str


class Vocab:
    """Bijection between characters and dense integer ids.

    Ids 0..3 are PAD/BOS/EOS/UNK.  A separator token (used by the
    decoder-only input stream) may be added as id 4 with ``include_sep``;
    the corpus characters follow the specials.
    """

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[:4]) != list(SPECIAL_TOKENS):
            raise ValueError("vocab must start with the 4 special tokens")
        self.tokens = list(tokens)
        self.id_of = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.id_of) != len(self.tokens):
            raise ValueError("duplicate token in vocab")
        self.sep_id = self.id_of.get(SEP_TOKEN)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def char_of(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, text: str, add_bos_eos: bool = False) -> list[int]:
        ids = [self.id_of.get(ch, UNK_ID) for ch in text]
        if add_bos_eos:
            return [BOS_ID] + ids + [EOS_ID]
        return ids

    def decode(self, ids: Iterable[int], strip_specials: bool = True) -> str:
        n_special = 5 if self.sep_id is not None else 4
        out = []
        for i in ids:
            if strip_specials and i < n_special:
                continue
            out.append(self.tokens[i])
        return "".join(out)

    def serialize(self) -> bytes:
        """One token per line, line number = id."""
        return ("\n".join(self.tokens) + "\n").encode("utf-8")

    def content_hash(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.serialize())

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, "rb") as f:
            text = f.read().decode("utf-8")
        tokens = text.splitlines()
        if len(tokens) < 4:
            raise ValueError(f"vocab file too short: {path}")
        return cls(tokens)


def _read_lines(path) -> list[str]:
    with open(path, "rb") as f:
        raw = f.read()
    lines = raw.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    out = []
    for i, line in enumerate(lines):
        try:
            out.append(line.decode("utf-8").strip())
        except UnicodeDecodeError as e:
            raise ValueError(f"{path}: line {i + 1} is not valid UTF-8") from e
    return out


def load_couplets(upper_path, lower_path, max_len: int = 32) -> tuple[list[CoupletPair], int]:
    """Load parallel upper/lower files.

    Pairs whose sides differ in length, are empty, or exceed ``max_len``
    are dropped (not truncated) and tallied.  A line-count mismatch
    between the two files is a hard error.
    """
    uppers = _read_lines(upper_path)
    lowers = _read_lines(lower_path)
    if len(uppers) != len(lowers):
        raise ValueError(
            f"line count mismatch: {upper_path} has {len(uppers)} lines, "
            f"{lower_path} has {len(lowers)}"
        )
    return _filter_pairs(zip(uppers, lowers), max_len)


def load_couplets_tsv(path, max_len: int = 32) -> tuple[list[CoupletPair], int]:
    """Load a single TSV file with ``upper<TAB>lower`` per line."""
    rows = []
    for i, line in enumerate(_read_lines(path)):
        if not line:
            rows.append(("", ""))
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}: line {i + 1} is not 'upper<TAB>lower'")
        rows.append((parts[0].strip(), parts[1].strip()))
    return _filter_pairs(rows, max_len)


def _filter_pairs(rows, max_len: int) -> tuple[list[CoupletPair], int]:
    pairs = []
    dropped = 0
    for upper, lower in rows:
        if len(upper) != len(lower) or not 1 <= len(upper) <= max_len:
            dropped += 1
            continue
        pairs.append(CoupletPair(upper, lower))
    return pairs, dropped


def build_vocab(pairs: Sequence[CoupletPair], min_freq: int = 1, include_sep: bool = False) -> Vocab:
    """Character vocabulary over both sides of the corpus.

    Ordering is frequency-descending with code-point tiebreak, so two
    builds from the same corpus are byte-identical.  Characters below
    ``min_freq`` are left out and map to UNK at encode time.
    """
    if not pairs:
        raise ValueError("cannot build a vocabulary from an empty pair list")
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    freq: dict[str, int] = {}
    for pair in pairs:
        for ch in pair.upper + pair.lower:
            freq[ch] = freq.get(ch, 0) + 1
    kept = sorted(
        (ch for ch, n in freq.items() if n >= min_freq),
        key=lambda ch: (-freq[ch], ch),
    )
    tokens = list(SPECIAL_TOKENS)
    if include_sep:
        tokens.append(SEP_TOKEN)
    tokens.extend(kept)
    return Vocab(tokens)


def encode(vocab: Vocab, text: str, add_bos_eos: bool = False) -> list[int]:
    return vocab.encode(text, add_bos_eos=add_bos_eos)


def decode(vocab: Vocab, ids: Iterable[int]) -> str:
    return vocab.decode(ids)


def pad_sequences(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the batch max length; the mask marks real tokens."""
    max_len = max(len(s) for s in seqs)
    ids = np.full((len(seqs), max_len), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), max_len), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def batchify(
    encoded_pairs: Sequence[tuple[Sequence[int], ...]],
    batch_size: int,
    pad_id: int = PAD_ID,
    shuffle_rng: np.random.Generator | None = None,
) -> list[tuple[tuple[np.ndarray, np.ndarray], ...]]:
    """Group encoded examples into padded batches.

    Each example is a tuple of id sequences (e.g. upper, lower); each
    batch is the per-component ``(ids, mask)`` pair, padded to the batch
    max length.  Every example appears exactly once.  Order is input
    order unless ``shuffle_rng`` is given.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not encoded_pairs:
        return []
    order = np.arange(len(encoded_pairs))
    if shuffle_rng is not None:
        order = shuffle_rng.permutation(len(encoded_pairs))
    n_components = len(encoded_pairs[0])
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [encoded_pairs[i] for i in order[start : start + batch_size]]
        batches.append(tuple(pad_sequences([ex[c] for ex in chunk], pad_id) for c in range(n_components)))
    return batches
