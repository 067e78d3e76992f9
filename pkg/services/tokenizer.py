"""
Tokenizer Service
Byte-level BPE with a fixed, versioned merge table shipped in data/tokenizer/.

Ids 0-255 are raw bytes, so every byte string is encodable and decoding is lossless.
"""
import json
import logging
import re
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InputError

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parent.parent / "data"
DEFAULT_MERGES = DATA_DIR / "tokenizer" / "bytebpe_v1.json"

# LaTeX commands, words, numbers, punctuation runs, whitespace (a single space sticks to the next chunk)
PRETOKENIZE = re.compile(rb" ?\\[A-Za-z]+| ?[A-Za-z]+| ?[0-9]+| ?[^\sA-Za-z0-9]+|\s+(?!\S)|\s+")


class ByteBpeTokenizer:
    def __init__(self, merges: list[tuple[bytes, bytes]], version: str):
        self.version = version
        self._vocab: list[bytes] = [bytes([b]) for b in range(256)]
        ids = {tok: i for i, tok in enumerate(self._vocab)}
        self._ranks: dict[tuple[int, int], int] = {}
        for rank, (left, right) in enumerate(merges):
            if left not in ids or right not in ids:
                raise ConfigurationError(f"merge {rank} uses an undefined part: {left!r} + {right!r}")
            merged = left + right
            if merged in ids:
                raise ConfigurationError(f"merge {rank} duplicates token {merged!r}")
            new_id = len(self._vocab)
            self._ranks[(ids[left], ids[right])] = rank
            self._vocab.append(merged)
            ids[merged] = new_id
        self._cache: dict[bytes, tuple[int, ...]] = {}

    @property
    def tokenizer_id(self) -> str:
        return f"bytebpe-{self.version}"

    @property
    def vocab_size(self) -> int:
        return len(self._vocab)

    def _bpe(self, chunk: bytes) -> tuple[int, ...]:
        cached = self._cache.get(chunk)
        if cached is not None:
            return cached
        ids = list(chunk)
        while len(ids) > 1:
            best = None
            for pair in zip(ids, ids[1:]):
                rank = self._ranks.get(pair)
                if rank is not None and (best is None or rank < best[0]):
                    best = (rank, pair)
            if best is None:
                break
            rank, (left, right) = best
            new_id = 256 + rank
            merged, i = [], 0
            while i < len(ids):
                if i + 1 < len(ids) and ids[i] == left and ids[i + 1] == right:
                    merged.append(new_id)
                    i += 2
                else:
                    merged.append(ids[i])
                    i += 1
            ids = merged
        result = tuple(ids)
        self._cache[chunk] = result
        return result

    def encode(self, data: bytes | str) -> list[int]:
        if isinstance(data, str):
            data = data.encode("utf-8")
        out: list[int] = []
        for chunk in PRETOKENIZE.findall(data):
            out.extend(self._bpe(chunk))
        return out

    def decode_bytes(self, ids) -> bytes:
        ids = [int(i) for i in ids]
        bad = [i for i in ids if not 0 <= i < len(self._vocab)]
        if bad:
            raise InputError(f"token ids {bad[:3]} outside the {len(self._vocab)}-entry vocabulary")
        return b"".join(self._vocab[i] for i in ids)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def token_bytes(self, token_id: int) -> bytes:
        return self._vocab[int(token_id)]

    def token_str(self, token_id: int) -> str:
        """Printable rendering of one token; bytes that are not valid UTF-8 are escaped."""
        return self._vocab[int(token_id)].decode("utf-8", errors="backslashreplace")

    def byte_offsets(self, ids) -> tuple[np.ndarray, np.ndarray]:
        """(start, end) byte offset of every token in the decoded text."""
        lengths = np.fromiter((len(self._vocab[int(i)]) for i in ids), dtype=np.int64, count=len(ids))
        ends = np.cumsum(lengths)
        return ends - lengths, ends


def tokenize(data: bytes | str) -> list[int]:
    return load_tokenizer().encode(data)


def detokenize(ids) -> bytes:
    return load_tokenizer().decode_bytes(ids)


@lru_cache(maxsize=4)
def load_tokenizer(path: str | Path = DEFAULT_MERGES) -> ByteBpeTokenizer:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"tokenizer merges not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    merges = [(a.encode("utf-8"), b.encode("utf-8")) for a, b in doc["merges"]]
    tok = ByteBpeTokenizer(merges, doc["version"])
    logger.debug(f"[tokenizer] loaded {tok.tokenizer_id} ({tok.vocab_size} tokens)")
    return tok
