"""Per-character annotation: glyph bitmaps, pinyin ids, POS ids, contextual vectors.

Glyphs come from a precompiled binary atlas (see ``tools/build_atlas.py``),
so no font rendering happens at runtime.  Pinyin and POS are lexicon-file
lookups, one reading per character; misses map to id 0 in each channel.
The contextual channel is a pluggable provider: a trainable per-character
table, or precomputed per-sequence vectors loaded from file.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .corpus import Vocab

GLYPH_SIZE = 24
GLYPH_PIXELS = GLYPH_SIZE * GLYPH_SIZE

ATLAS_MAGIC = b"GLY1"
CTX_MAGIC = b"CTX1"

_SYLLABLE_RE = re.compile(r"^[a-z]+[1-5]$")


@dataclass
class GlyphBitmap:
    """24x24 grayscale cells; 0 is black ink, 255 is white background."""

    pixels: np.ndarray  # (24, 24) uint8

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (GLYPH_SIZE, GLYPH_SIZE):
            raise ValueError(f"glyph bitmap must be {GLYPH_SIZE}x{GLYPH_SIZE}")

    @property
    def blank(self) -> bool:
        return bool(np.all(self.pixels == 255))


def unk_glyph() -> GlyphBitmap:
    """Fallback glyph: a solid 12x12 black square centered on white."""
    px = np.full((GLYPH_SIZE, GLYPH_SIZE), 255, dtype=np.uint8)
    px[6:18, 6:18] = 0
    return GlyphBitmap(px)


def blank_glyph() -> GlyphBitmap:
    return GlyphBitmap(np.full((GLYPH_SIZE, GLYPH_SIZE), 255, dtype=np.uint8))


class GlyphAtlas:
    """In-memory view of a GLY1 atlas file: code point -> 24x24 bitmap."""

    def __init__(self, bitmaps: dict[int, np.ndarray]):
        self.bitmaps = {cp: np.asarray(px, dtype=np.uint8).reshape(GLYPH_SIZE, GLYPH_SIZE)
                        for cp, px in bitmaps.items()}

    def __contains__(self, char: str) -> bool:
        return ord(char) in self.bitmaps

    def __len__(self) -> int:
        return len(self.bitmaps)

    def get(self, char: str) -> np.ndarray | None:
        return self.bitmaps.get(ord(char))

    def save(self, path) -> None:
        write_atlas(path, self.bitmaps)

    @classmethod
    def load(cls, path) -> "GlyphAtlas":
        return load_atlas(path)


def write_atlas(path, bitmaps: dict[int, np.ndarray]) -> None:
    """GLY1 format: magic, u32 entry count, then per entry a u32 code point
    followed by 576 row-major pixel bytes.  Integers little-endian.
    Entries are written in code-point order so files are deterministic."""
    with open(path, "wb") as f:
        f.write(ATLAS_MAGIC)
        f.write(struct.pack("<I", len(bitmaps)))
        for cp in sorted(bitmaps):
            px = np.asarray(bitmaps[cp], dtype=np.uint8).reshape(-1)
            if px.size != GLYPH_PIXELS:
                raise ValueError(f"atlas entry U+{cp:04X} has {px.size} pixels, want {GLYPH_PIXELS}")
            f.write(struct.pack("<I", cp))
            f.write(px.tobytes())


def load_atlas(path) -> GlyphAtlas:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != ATLAS_MAGIC:
        raise ValueError(f"{path}: not a glyph atlas (bad magic)")
    (count,) = struct.unpack_from("<I", data, 4)
    expected = 8 + count * (4 + GLYPH_PIXELS)
    if len(data) != expected:
        raise ValueError(f"{path}: truncated or corrupt atlas ({len(data)} bytes, want {expected})")
    bitmaps = {}
    off = 8
    for _ in range(count):
        (cp,) = struct.unpack_from("<I", data, off)
        off += 4
        px = np.frombuffer(data, dtype=np.uint8, count=GLYPH_PIXELS, offset=off)
        off += GLYPH_PIXELS
        bitmaps[cp] = px.reshape(GLYPH_SIZE, GLYPH_SIZE).copy()
    return GlyphAtlas(bitmaps)


def synthetic_glyph(char: str) -> GlyphBitmap:
    """Deterministic procedural bitmap for one character.

    Stands in for real font rasterization: a 6x6 grid of 4x4 blocks whose
    on/off pattern is derived from the code point, guaranteed non-blank
    for non-whitespace characters.  Whitespace renders blank.
    """
    if char.isspace():
        return blank_glyph()
    import hashlib

    digest = hashlib.sha256(struct.pack("<I", ord(char))).digest()
    bits = np.unpackbits(np.frombuffer(digest[:5], dtype=np.uint8))[:36]
    if not bits.any():
        bits[18] = 1
    grid = bits.reshape(6, 6)
    px = np.where(np.kron(grid, np.ones((4, 4), dtype=np.uint8)) == 1, 0, 255)
    return GlyphBitmap(px.astype(np.uint8))


def render_glyph(char: str, atlas: GlyphAtlas) -> GlyphBitmap:
    """Look one character up in the atlas.

    Whitespace yields the blank bitmap; characters missing from the atlas
    yield the fallback glyph.
    """
    if char.isspace():
        return blank_glyph()
    stored = atlas.get(char)
    if stored is None:
        return unk_glyph()
    return GlyphBitmap(stored)


def glyph_to_weight(bitmap: GlyphBitmap) -> np.ndarray:
    """Flatten row-major and flip so black ink becomes 1.0: w = 1 - p/255."""
    return 1.0 - bitmap.pixels.reshape(-1).astype(np.float64) / 255.0


class PinyinLexicon:
    """Character -> syllable string (letters + tone digit, 5 = neutral).

    Syllable ids are dense in [0, size) with id 0 reserved for characters
    without a pinyin reading; real syllables are numbered in sorted order
    so builds are deterministic.
    """

    UNK_SYLLABLE = "<unk>"

    def __init__(self, syllable_of: dict[str, str]):
        for ch, syl in syllable_of.items():
            if not _SYLLABLE_RE.match(syl):
                raise ValueError(f"bad pinyin syllable {syl!r} for character {ch!r}")
        self.syllable_of = dict(syllable_of)
        syllables = sorted(set(syllable_of.values()))
        self.id_of = {syl: i + 1 for i, syl in enumerate(syllables)}
        self.size = len(syllables) + 1  # id 0 = UNK

    def id_for(self, char: str) -> int:
        syl = self.syllable_of.get(char)
        return 0 if syl is None else self.id_of[syl]

    @classmethod
    def load(cls, path) -> "PinyinLexicon":
        """UTF-8 TSV, ``char<TAB>syllable`` per line."""
        mapping = {}
        with open(path, encoding="utf-8") as f:
            for i, line in enumerate(f):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2 or len(parts[0]) != 1:
                    raise ValueError(f"{path}: line {i + 1} is not 'char<TAB>syllable'")
                mapping[parts[0]] = parts[1]
        return cls(mapping)


class PosLexicon:
    """Character -> part-of-speech tag id via a fixed tagset.

    Tag ids follow the tagset file order starting at 1; id 0 is reserved
    for characters without a tag.
    """

    def __init__(self, tag_of_name: dict[str, str], tagset: list[str]):
        if len(tagset) != len(set(tagset)):
            raise ValueError("duplicate tag name in tagset")
        self.tagset = list(tagset)
        self._tag_id = {name: i + 1 for i, name in enumerate(self.tagset)}
        unknown = {t for t in tag_of_name.values() if t not in self._tag_id}
        if unknown:
            raise ValueError(f"tags not in tagset: {sorted(unknown)}")
        self.tag_of = {ch: self._tag_id[name] for ch, name in tag_of_name.items()}
        self.size = len(self.tagset) + 1  # id 0 = UNK

    def id_for(self, char: str) -> int:
        return self.tag_of.get(char, 0)

    @classmethod
    def load(cls, lexicon_path, tagset_path) -> "PosLexicon":
        """Lexicon is ``char<TAB>tagname`` TSV; tagset lists one name per line."""
        with open(tagset_path, encoding="utf-8") as f:
            tagset = [line.strip() for line in f if line.strip()]
        mapping = {}
        with open(lexicon_path, encoding="utf-8") as f:
            for i, line in enumerate(f):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2 or len(parts[0]) != 1:
                    raise ValueError(f"{lexicon_path}: line {i + 1} is not 'char<TAB>tagname'")
                mapping[parts[0]] = parts[1]
        return cls(mapping, tagset)


@dataclass
class AnnotatedSequence:
    """Aligned per-position id channels for one piece of text."""

    char_ids: list[int]
    pinyin_ids: list[int]
    pos_ids: list[int]

    def __post_init__(self):
        if not (len(self.char_ids) == len(self.pinyin_ids) == len(self.pos_ids)):
            raise ValueError("annotation channels must have identical length")

    def __len__(self) -> int:
        return len(self.char_ids)


def annotate(text: str, vocab: Vocab, pinyin: PinyinLexicon, pos: PosLexicon) -> AnnotatedSequence:
    """Per-character lookup of all three id channels; misses map to 0
    in the pinyin/POS channels and to UNK in the character channel."""
    return AnnotatedSequence(
        char_ids=vocab.encode(text),
        pinyin_ids=[pinyin.id_for(ch) for ch in text],
        pos_ids=[pos.id_for(ch) for ch in text],
    )


def sequence_key(char_ids) -> int:
    """64-bit FNV-1a over the id sequence serialized as little-endian u32.

    Keys the records of a precomputed contextual-vector file.
    """
    h = 0xCBF29CE484222325
    for b in np.asarray(char_ids, dtype=np.uint32).tobytes():
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class ContextualProvider:
    """Source of per-position contextual vectors.

    ``table`` mode owns a trainable (rows x dim) matrix and emits its rows
    by character id; ``file`` mode serves precomputed per-sequence records
    keyed by :func:`sequence_key` and fails hard on a missing record.
    """

    mode: str  # "table" | "file"
    dim: int = 768
    table: np.ndarray | None = None
    records: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("table", "file"):
            raise ValueError(f"unknown contextual provider mode {self.mode!r}")
        if self.mode == "table":
            if self.table is None:
                raise ValueError("table mode requires a table")
            if self.table.shape[1] != self.dim:
                raise ValueError("table width does not match provider dim")


def contextual_embed(char_ids, provider: ContextualProvider) -> np.ndarray:
    """L x dim matrix of contextual vectors for one id sequence."""
    ids = np.asarray(char_ids, dtype=np.int64)
    if provider.mode == "table":
        return provider.table[ids]
    key = sequence_key(ids)
    rec = provider.records.get(key)
    if rec is None:
        raise KeyError(
            f"no precomputed contextual record for sequence {ids.tolist()} (key {key:#018x})"
        )
    if rec.shape != (len(ids), provider.dim):
        raise ValueError(f"contextual record shape {rec.shape} != {(len(ids), provider.dim)}")
    return rec


def write_contextual_file(path, dim: int, records: dict[int, np.ndarray]) -> None:
    """CTX1 format: magic, u32 dim, u32 record count, then per record a
    u64 sequence key, u32 length L, and L x dim little-endian f32."""
    with open(path, "wb") as f:
        f.write(CTX_MAGIC)
        f.write(struct.pack("<II", dim, len(records)))
        for key in sorted(records):
            rec = np.asarray(records[key], dtype="<f4")
            if rec.ndim != 2 or rec.shape[1] != dim:
                raise ValueError(f"record {key:#x} must be L x {dim}")
            f.write(struct.pack("<QI", key, rec.shape[0]))
            f.write(rec.tobytes())


def load_contextual_file(path) -> ContextualProvider:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CTX_MAGIC:
        raise ValueError(f"{path}: not a contextual-vector file (bad magic)")
    dim, count = struct.unpack_from("<II", data, 4)
    records = {}
    off = 12
    for _ in range(count):
        key, length = struct.unpack_from("<QI", data, off)
        off += 12
        n = length * dim
        rec = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(length, dim)
        off += 4 * n
        records[key] = rec.astype(np.float64)
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after last record")
    return ContextualProvider(mode="file", dim=dim, records=records)
