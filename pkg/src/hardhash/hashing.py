"""Bit-packed hash codes and exact Hamming retrieval.

Codes are packed little-endian into ``uint64`` words: bit ``j`` of a code
lives in word ``j // 64`` at position ``j % 64``. Unused high bits of the
last word are always zero, so equal codes have equal words.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CODE_MAGIC = b"HEGHCODE"
CODE_VERSION = 1


class CodeFormatError(ValueError):
    pass


def n_words(bits: int) -> int:
    return (bits + 63) // 64


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """(..., k) booleans -> (..., ceil(k/64)) uint64 words."""
    bits = np.asarray(bits, dtype=bool)
    k = bits.shape[-1]
    w = n_words(k)
    padded = np.zeros(bits.shape[:-1] + (w * 64,), dtype=bool)
    padded[..., :k] = bits
    as_bytes = np.packbits(padded.reshape(bits.shape[:-1] + (w * 8, 8)), axis=-1, bitorder="little")
    return np.ascontiguousarray(as_bytes[..., 0]).view("<u8").astype(np.uint64).reshape(bits.shape[:-1] + (w,))


def unpack_bits(words: np.ndarray, k: int) -> np.ndarray:
    words = np.ascontiguousarray(np.asarray(words, dtype="<u8"))
    as_bytes = words.view(np.uint8).reshape(words.shape[:-1] + (8 * words.shape[-1],))
    return np.unpackbits(as_bytes, axis=-1, bitorder="little")[..., :k].astype(bool)


@dataclass(frozen=True)
class HashCode:
    words: np.ndarray
    k: int

    def __post_init__(self):
        words = np.asarray(self.words, dtype=np.uint64).reshape(-1)
        if words.size != n_words(self.k):
            raise ValueError(f"{self.k}-bit code needs {n_words(self.k)} words, got {words.size}")
        tail = self.k % 64
        if tail and int(words[-1]) >> tail:
            raise ValueError("non-canonical code: bits set beyond k")
        object.__setattr__(self, "words", words)

    @classmethod
    def from_bits(cls, bits) -> "HashCode":
        bits = np.asarray(bits, dtype=bool).reshape(-1)
        return cls(pack_bits(bits), bits.size)

    @classmethod
    def from_int(cls, value: int, k: int) -> "HashCode":
        if value < 0 or value >> k:
            raise ValueError(f"{value:#x} does not fit in {k} bits")
        mask = (1 << 64) - 1
        return cls(np.array([(value >> (64 * i)) & mask for i in range(n_words(k))], dtype=np.uint64), k)

    def bits(self) -> np.ndarray:
        return unpack_bits(self.words, self.k)

    def __int__(self) -> int:
        return sum(int(w) << (64 * i) for i, w in enumerate(self.words))

    def __eq__(self, other) -> bool:
        return isinstance(other, HashCode) and self.k == other.k and np.array_equal(self.words, other.words)

    def __hash__(self) -> int:
        return hash((self.k, self.words.tobytes()))


def quantize_array(b: np.ndarray) -> np.ndarray:
    """Sign quantization of (n, k) real outputs to packed words; 0 maps to bit 1."""
    b = np.asarray(b)
    if np.isnan(b).any():
        raise ValueError("cannot quantize NaN")
    return pack_bits(b >= 0)


def quantize(b) -> HashCode:
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    return HashCode(quantize_array(b), b.size)


def hamming_distance(a: HashCode, b: HashCode) -> int:
    if a.k != b.k:
        raise ValueError(f"code length mismatch: {a.k} vs {b.k}")
    return int(np.bitwise_count(a.words ^ b.words).sum())


def hamming_matrix(queries: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Pairwise distances between packed (q, w) and (n, w) word arrays."""
    x = queries[:, None, :] ^ codes[None, :, :]
    return np.bitwise_count(x).sum(axis=-1, dtype=np.int64)


@dataclass
class CodeDatabase:
    """Packed codes with label bitsets and stable ids, in insertion order."""

    codes: np.ndarray  # (n, ceil(k/64)) uint64
    labels: np.ndarray  # (n, num_classes) bool
    k: int
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.uint64).reshape(-1, n_words(self.k))
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.labels.ndim != 2 or len(self.labels) != len(self.codes):
            raise ValueError(f"need one label row per code: {self.labels.shape} vs {len(self.codes)} codes")
        if self.ids is None:
            self.ids = np.arange(len(self.codes), dtype=np.uint64)
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        if len(self.ids) != len(self.codes):
            raise ValueError("ids and codes differ in length")

    @classmethod
    def from_outputs(cls, binary_like: np.ndarray, labels: np.ndarray, ids=None) -> "CodeDatabase":
        binary_like = np.asarray(binary_like)
        return cls(quantize_array(binary_like), labels, binary_like.shape[1], ids)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    def __len__(self) -> int:
        return len(self.codes)

    def code(self, i: int) -> HashCode:
        return HashCode(self.codes[i], self.k)

    def to_bytes(self) -> bytes:
        n, nc = len(self), self.num_classes
        head = CODE_MAGIC + struct.pack("<IIIQ", CODE_VERSION, self.k, nc, n)
        label_words = pack_bits(self.labels) if nc else np.zeros((n, 0), np.uint64)
        rows = np.concatenate(
            [self.ids[:, None], self.codes, label_words.reshape(n, n_words(nc))], axis=1
        ).astype("<u8")
        return head + rows.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CodeDatabase":
        head = len(CODE_MAGIC) + struct.calcsize("<IIIQ")
        if len(blob) < head or blob[: len(CODE_MAGIC)] != CODE_MAGIC:
            raise CodeFormatError("not a code database (bad magic)")
        version, k, nc, n = struct.unpack("<IIIQ", blob[len(CODE_MAGIC) : head])
        if version != CODE_VERSION:
            raise CodeFormatError(f"unsupported code database version {version}")
        row = 1 + n_words(k) + n_words(nc)
        if len(blob) - head != 8 * row * n:
            raise CodeFormatError(f"expected {8 * row * n} payload bytes for {n} entries, got {len(blob) - head}")
        rows = np.frombuffer(blob, dtype="<u8", offset=head).reshape(n, row).astype(np.uint64)
        codes = rows[:, 1 : 1 + n_words(k)]
        labels = unpack_bits(rows[:, 1 + n_words(k) :], nc) if nc else np.zeros((n, 0), bool)
        db = cls(codes, labels, k, rows[:, 0])
        tail = k % 64
        if tail and n and (db.codes[:, -1] >> np.uint64(tail)).any():
            raise CodeFormatError("non-canonical code words (bits set beyond k)")
        return db

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "CodeDatabase":
        return cls.from_bytes(Path(path).read_bytes())


class HammingIndex:
    """Exact linear-scan index; results sorted by (distance, id)."""

    def __init__(self, db: CodeDatabase):
        if len(db) == 0:
            raise ValueError("cannot index an empty database")
        self.db = db
        self.k = db.k
        self._codes = db.codes.copy()
        self._ids = db.ids.copy()
        self._codes.setflags(write=False)
        self._ids.setflags(write=False)

    def __len__(self) -> int:
        return len(self._ids)

    def _words(self, q) -> np.ndarray:
        if isinstance(q, HashCode):
            if q.k != self.k:
                raise ValueError(f"query has {q.k} bits, index has {self.k}")
            return q.words
        q = np.asarray(q, dtype=np.uint64).reshape(-1)
        if q.size != n_words(self.k):
            raise ValueError(f"query has {q.size} words, index expects {n_words(self.k)}")
        return q

    def distances(self, q) -> np.ndarray:
        return np.bitwise_count(self._codes ^ self._words(q)).sum(axis=1, dtype=np.int64)

    def ranking(self, q) -> tuple[np.ndarray, np.ndarray]:
        """Positions into the database and their distances, in ranked order."""
        d = self.distances(q)
        order = np.lexsort((self._ids, d))
        return order, d[order]

    def topk(self, q, topk: int) -> list[tuple[int, int]]:
        if topk < 1:
            raise ValueError(f"topk must be >= 1, got {topk}")
        order, d = self.ranking(q)
        return [(int(self._ids[i]), int(x)) for i, x in zip(order[:topk], d[:topk])]

    def radius(self, q, r: int) -> list[tuple[int, int]]:
        if not 0 <= r <= self.k:
            raise ValueError(f"radius {r} outside [0, {self.k}]")
        order, d = self.ranking(q)
        keep = d <= r
        return [(int(self._ids[i]), int(x)) for i, x in zip(order[keep], d[keep])]


def build_index(db: CodeDatabase) -> HammingIndex:
    return HammingIndex(db)


def topk_query(index: HammingIndex, q, topk: int) -> list[tuple[int, int]]:
    return index.topk(q, topk)


def radius_query(index: HammingIndex, q, r: int) -> list[tuple[int, int]]:
    return index.radius(q, r)
