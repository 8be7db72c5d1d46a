"""Table-driven range coding of quantized latents.

32-bit carry-less range coder (Subbotin style) with 16-bit frequency
precision.  Symbols are coded channel-major, then row-major within a channel.
"""

from __future__ import annotations

import heapq
import math
import struct
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .codec import FactorizedEntropyModel, LatentCode, ModelMismatchError

PRECISION = 16
TOTAL = 1 << PRECISION
TOP = 1 << 24
BOT = 1 << 16
MASK = 0xFFFFFFFF

MAGIC = b"ICMB"
VERSION = 1
_HEADER = struct.Struct("<4sBHHH8sI")


class CodingError(ValueError):
    pass


class CorruptStreamError(ValueError):
    pass


@dataclass
class CdfTable:
    cdf: np.ndarray  # int64 [C, K+1], cdf[:, 0] == 0, cdf[:, -1] == TOTAL
    min_symbol: int
    model_digest: str

    def __post_init__(self):
        self.cdf = np.asarray(self.cdf, dtype=np.int64)
        if np.any(self.cdf[:, -1] != TOTAL):
            raise ValueError("cdf must end at 2**16")
        if np.any(np.diff(self.cdf, axis=1) < 1):
            raise ValueError("cdf must be strictly increasing")

    @property
    def num_symbols(self) -> int:
        return self.cdf.shape[1] - 1

    @property
    def max_symbol(self) -> int:
        return self.min_symbol + self.num_symbols - 1

    def freqs(self) -> np.ndarray:
        return np.diff(self.cdf, axis=1)

    def pmf(self) -> np.ndarray:
        return self.freqs() / TOTAL

    def code_lengths(self, values: np.ndarray) -> np.ndarray:
        """Table-implied bits ``-log2(freq/2^16)`` of each value in ``[C, ...]``."""
        values = np.asarray(values)
        idx = values.reshape(values.shape[0], -1) - self.min_symbol
        f = np.take_along_axis(self.freqs(), idx, axis=1)
        return (PRECISION - np.log2(f)).reshape(values.shape)


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Integer frequencies (each >= 1) summing to 2^16, close to ``pmf`` in KL."""
    pmf = np.asarray(pmf, dtype=np.float64)
    pmf = pmf / pmf.sum()
    n = pmf.size
    if n > TOTAL:
        raise ValueError("alphabet larger than frequency precision")
    freq = np.maximum(1, np.round(pmf * TOTAL)).astype(np.int64)
    excess = int(freq.sum() - TOTAL)
    if excess > 0:
        # remove counts where the code-length penalty p*log(f/(f-1)) is smallest
        heap = [(pmf[i] * math.log(freq[i] / (freq[i] - 1)), i) for i in range(n) if freq[i] > 1]
        heapq.heapify(heap)
        while excess:
            _, i = heapq.heappop(heap)
            freq[i] -= 1
            excess -= 1
            if freq[i] > 1:
                heapq.heappush(heap, (pmf[i] * math.log(freq[i] / (freq[i] - 1)), i))
    elif excess < 0:
        heap = [(-pmf[i] * math.log((freq[i] + 1) / freq[i]), i) for i in range(n)]
        heapq.heapify(heap)
        while excess:
            _, i = heapq.heappop(heap)
            freq[i] += 1
            excess += 1
            heapq.heappush(heap, (-pmf[i] * math.log((freq[i] + 1) / freq[i]), i))
    return freq


def build_cdf_from_pmf(pmf: np.ndarray, min_symbol: int = 0, model_digest: str = "") -> CdfTable:
    pmf = np.atleast_2d(pmf)
    freqs = np.stack([quantize_pmf(row) for row in pmf])
    cdf = np.concatenate([np.zeros((freqs.shape[0], 1), np.int64), np.cumsum(freqs, axis=1)], axis=1)
    return CdfTable(cdf, min_symbol, model_digest)


def build_cdf(entropy: FactorizedEntropyModel) -> CdfTable:
    return build_cdf_from_pmf(entropy.pmf_table(), -entropy.support, entropy.digest())


def table_kl_bits(table: CdfTable, pmf: np.ndarray) -> np.ndarray:
    """Per-channel KL(pmf || table pmf) in bits per symbol."""
    q = table.pmf()
    p = np.asarray(pmf, np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(p / q), 0.0)
    return terms.sum(axis=1)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK
        self.out = bytearray()

    def encode(self, cum: int, freq: int) -> None:
        r = self.range // TOTAL
        self.low += cum * r
        self.range = r * freq
        while True:
            if (self.low ^ (self.low + self.range)) >= TOP:
                if self.range >= BOT:
                    break
                self.range = -self.low & (BOT - 1)
            self.out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & MASK
            self.range = (self.range << 8) & MASK

    def finish(self) -> bytes:
        for _ in range(4):
            self.out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = MASK
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise CorruptStreamError("range-coded payload is truncated")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def target(self) -> int:
        self.range //= TOTAL
        t = ((self.code - self.low) & MASK) // self.range
        if t >= TOTAL:
            raise CorruptStreamError("decoder target outside frequency range")
        return t

    def consume(self, cum: int, freq: int) -> None:
        self.low += cum * self.range
        self.range *= freq
        while True:
            if (self.low ^ (self.low + self.range)) >= TOP:
                if self.range >= BOT:
                    break
                self.range = -self.low & (BOT - 1)
            self.code = ((self.code << 8) | self._byte()) & MASK
            self.low = (self.low << 8) & MASK
            self.range = (self.range << 8) & MASK


@dataclass
class Bitstream:
    shape: tuple[int, int, int]
    model_digest: str
    payload: bytes

    @property
    def payload_bits(self) -> int:
        return 8 * len(self.payload)

    def to_bytes(self) -> bytes:
        c, h, w = self.shape
        head = _HEADER.pack(MAGIC, VERSION, c, h, w, bytes.fromhex(self.model_digest), len(self.payload))
        return head + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size:
            raise CorruptStreamError("stream shorter than header")
        magic, version, c, h, w, digest, n = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CorruptStreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CorruptStreamError(f"unsupported stream version {version}")
        payload = data[_HEADER.size:]
        if len(payload) != n:
            raise CorruptStreamError(f"payload length {len(payload)} != header length {n}")
        return cls((c, h, w), digest.hex(), bytes(payload))


def rc_encode(latent: LatentCode, table: CdfTable) -> Bitstream:
    if latent.model_digest != table.model_digest:
        raise ModelMismatchError("latent and table were built from different entropy models")
    vals = np.asarray(latent.values)
    if vals.ndim != 3 or vals.shape[0] != table.cdf.shape[0]:
        raise CodingError(f"latent shape {vals.shape} does not match table with {table.cdf.shape[0]} channels")
    if vals.size == 0:
        return Bitstream(tuple(vals.shape), latent.model_digest, b"")
    if vals.min() < table.min_symbol or vals.max() > table.max_symbol:
        raise CodingError(f"symbol outside support [{table.min_symbol}, {table.max_symbol}]")
    enc = RangeEncoder()
    cdf = table.cdf.tolist()
    idx = (vals - table.min_symbol).reshape(vals.shape[0], -1).tolist()
    for ch, row in zip(cdf, idx):
        for s in row:
            lo = ch[s]
            enc.encode(lo, ch[s + 1] - lo)
    return Bitstream(tuple(int(d) for d in vals.shape), latent.model_digest, enc.finish())


def rc_decode(bs: Bitstream, table: CdfTable) -> LatentCode:
    if bs.model_digest != table.model_digest:
        raise ModelMismatchError("bitstream was produced under a different entropy model")
    c, h, w = bs.shape
    if c != table.cdf.shape[0] and c * h * w:
        raise CorruptStreamError(f"stream has {c} channels, table has {table.cdf.shape[0]}")
    out = np.empty((c, h * w), dtype=np.int32)
    if c * h * w == 0:
        return LatentCode(out.reshape(c, h, w), bs.model_digest)
    dec = RangeDecoder(bs.payload)
    for ci, ch in enumerate(table.cdf.tolist()):
        row = out[ci]
        for j in range(h * w):
            t = dec.target()
            s = bisect_right(ch, t) - 1
            lo = ch[s]
            dec.consume(lo, ch[s + 1] - lo)
            row[j] = s
    if dec.pos != len(bs.payload):
        raise CorruptStreamError("trailing bytes after final symbol")
    return LatentCode((out + table.min_symbol).reshape(c, h, w), bs.model_digest)


def write_bitstream(path, bs: Bitstream) -> None:
    with open(path, "wb") as fh:
        fh.write(bs.to_bytes())


def read_bitstream(path) -> Bitstream:
    with open(path, "rb") as fh:
        return Bitstream.from_bytes(fh.read())
