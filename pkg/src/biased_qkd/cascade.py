"""Cascade reconciliation with BINARY bisection, back-tracking and BICONF.

Bob drives the exchange. Every pass is a layout of the frame's positions
(identity for the first pass, a seeded permutation afterwards) cut into
contiguous blocks, and every question Bob asks is the parity of a contiguous
range of one layout. Alice regenerates the same layouts from the frame's
shuffle seed, so a query is just ``(layout, start, end)``.

Alice's key never changes, so every parity she discloses stays valid for the
whole frame. Bob caches them, together with the complements they imply, and
only pays for questions whose answer he cannot derive.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import pandas as pd

from biased_qkd.keyrate import binary_entropy
from biased_qkd.schemas import Basis, CascadeConfig
from biased_qkd.source import PreconditionError
from biased_qkd.utils import as_bits
from biased_qkd.wire import ProtocolAbort

logger = logging.getLogger(__name__)

# Layout ids at or above this are BICONF random subsets, below it cascade passes
BICONF_BASE = 1 << 15

ALICE_TO_BOB = "alice->bob"
BOB_TO_ALICE = "bob->alice"
TRANSCRIPT_FIELDS = ["direction", "pass", "sequence", "block_id", "parity_bits"]


def initial_block_size(e: float, c: float = 0.86, key_length: Optional[int] = None) -> int:
    """First-pass block size k1 = max(2, round(c / e)); later passes double it.

    With e = 0 there is nothing to size against and the whole key is a single
    block, which needs ``key_length``.
    """
    if e == 0.0:
        if key_length is None:
            raise ValueError("e = 0 sizes a single block and needs key_length")
        return max(1, key_length)
    if not 0.0 < e <= 0.5:
        raise ValueError(f"Expected QBER must lie in (0, 0.5], got {e}")
    if c <= 0:
        raise ValueError(f"Block-size constant must be positive, got {c}")
    return max(2, round(c / e))


def block_sizes(k1: int, num_passes: int) -> list[int]:
    return [k1 * 2**p for p in range(num_passes)]


def layout(seed: int, layout_id: int, n: int) -> np.ndarray:
    """Positions of a frame in the order of layout ``layout_id``."""
    if layout_id < 0:
        raise PreconditionError(f"Layout id must be non-negative, got {layout_id}")
    if layout_id == 0:
        return np.arange(n)
    rng = np.random.default_rng([seed, layout_id])
    if layout_id < BICONF_BASE:
        return rng.permutation(n)
    return np.flatnonzero(rng.random(n) < 0.5)


def split_frames(n: int, frame_length: int) -> list[slice]:
    """Cut n sifted bits into the fewest frames of at most ``frame_length`` bits."""
    if n == 0:
        return []
    bounds = np.linspace(0, n, math.ceil(n / frame_length) + 1).round().astype(int)
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


@dataclass(frozen=True)
class TranscriptEntry:
    direction: str
    pass_label: int
    sequence: int
    block_id: int
    parity_bits: int


@dataclass
class Transcript:
    """Every reconciliation message, in order, with its parity-bit count."""

    entries: list[TranscriptEntry] = field(default_factory=list)

    def record(self, direction: str, pass_label: int, sequence: int, block_id: int, parity_bits: int) -> None:
        self.entries.append(TranscriptEntry(direction, pass_label, sequence, block_id, parity_bits))

    def leak(self) -> int:
        return sum(e.parity_bits for e in self.entries if e.direction == ALICE_TO_BOB)

    def to_frame(self) -> pd.DataFrame:
        rows = [(e.direction, e.pass_label, e.sequence, e.block_id, e.parity_bits) for e in self.entries]
        return pd.DataFrame(rows, columns=TRANSCRIPT_FIELDS)

    def write(self, path: Path) -> Path:
        self.to_frame().to_csv(path, index=False)
        return Path(path)


def recount_leak(path: Path) -> int:
    """Leak recounted from a written transcript, independently of CascadeStats."""
    df = pd.read_csv(path, comment="#")
    return int(df.loc[df["direction"] == ALICE_TO_BOB, "parity_bits"].sum())


class ParityResponder:
    """Alice's side: answers range-parity queries over regenerated layouts."""

    def __init__(self, key: np.ndarray, seed: int):
        self.key = as_bits(key)
        self.seed = seed
        self.answered = 0
        self._prefix: dict[int, np.ndarray] = {}

    def _prefix_xor(self, layout_id: int) -> np.ndarray:
        if layout_id not in self._prefix:
            bits = self.key[layout(self.seed, layout_id, len(self.key))]
            self._prefix[layout_id] = np.concatenate(([0], np.bitwise_xor.accumulate(bits))).astype(np.uint8)
        return self._prefix[layout_id]

    def answer(self, queries: np.ndarray) -> np.ndarray:
        queries = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
        out = np.zeros(len(queries), dtype=np.uint8)
        for i, (layout_id, start, end) in enumerate(queries):
            prefix = self._prefix_xor(int(layout_id))
            if not 0 <= start < end < len(prefix):
                raise PreconditionError(f"Query range [{start}, {end}) outside layout {layout_id}")
            out[i] = prefix[end] ^ prefix[start]
        self.answered += len(queries)
        return out


class ParityOracle(Protocol):
    def parities(self, queries: np.ndarray, pass_label: int, sequence: int) -> np.ndarray:
        """Alice's parities for ``(layout, start, end)`` rows, in order."""
        ...


class LocalParityOracle:
    """Alice's key held in-process."""

    def __init__(self, key: np.ndarray, seed: int):
        self.responder = ParityResponder(key, seed)

    def parities(self, queries: np.ndarray, pass_label: int, sequence: int) -> np.ndarray:
        return self.responder.answer(queries)


@dataclass
class CascadeStats:
    """Per-frame or aggregated reconciliation statistics.

    ``errors[i, j]`` counts errors corrected while pass i was running, in
    blocks of pass j (j < i is back-tracking). Errors found by BICONF, and by
    the back-tracking it triggers, go to ``errors_biconf``.
    """

    errors: np.ndarray
    errors_biconf: int = 0
    bits_revealed_binary: int = 0
    bits_revealed_biconf: int = 0
    block_sizes: list[float] = field(default_factory=list)
    key_length: int = 0
    frames: int = 1

    @classmethod
    def empty(cls, num_passes: int) -> "CascadeStats":
        return cls(errors=np.zeros((num_passes, num_passes), dtype=np.int64), block_sizes=[0.0] * num_passes, frames=0)

    @property
    def bits_revealed(self) -> int:
        return self.bits_revealed_binary + self.bits_revealed_biconf

    @property
    def errors_corrected(self) -> int:
        return int(self.errors.sum()) + self.errors_biconf

    @property
    def qber_measured(self) -> float:
        return self.errors_corrected / self.key_length if self.key_length else math.nan

    @property
    def efficiency_f(self) -> float:
        """Revealed bits over the Shannon minimum; NaN when nothing was wrong."""
        e = self.qber_measured
        if math.isnan(e) or e == 0.0:
            return math.nan
        return self.bits_revealed / (self.key_length * binary_entropy(min(e, 0.5)))

    def merge(self, other: "CascadeStats") -> "CascadeStats":
        frames = self.frames + other.frames
        sizes = [
            (a * self.frames + b * other.frames) / frames if frames else 0.0
            for a, b in zip(self.block_sizes, other.block_sizes)
        ]
        return CascadeStats(
            errors=self.errors + other.errors,
            errors_biconf=self.errors_biconf + other.errors_biconf,
            bits_revealed_binary=self.bits_revealed_binary + other.bits_revealed_binary,
            bits_revealed_biconf=self.bits_revealed_biconf + other.bits_revealed_biconf,
            block_sizes=sizes,
            key_length=self.key_length + other.key_length,
            frames=frames,
        )


class _Reconciler:
    """Bob's state for one frame."""

    def __init__(
        self,
        key: np.ndarray,
        oracle: ParityOracle,
        seed: int,
        sizes: Sequence[int],
        frame: int = 0,
        transcript: Optional[Transcript] = None,
    ):
        self.key = key
        self.n = len(key)
        self.oracle = oracle
        self.seed = seed
        self.sizes = list(sizes)
        self.frame = frame
        self.transcript = transcript if transcript is not None else Transcript()
        self.num_passes = len(self.sizes)

        self.errors = np.zeros((self.num_passes, self.num_passes), dtype=np.int64)
        self.errors_biconf = 0
        self.revealed = {"binary": 0, "biconf": 0}
        self.flips: list[int] = []

        self._layouts: dict[int, np.ndarray] = {}
        self._inverse: list[np.ndarray] = []
        self._mismatch: list[np.ndarray] = []
        self._known: dict[tuple[int, int, int], int] = {}
        self._bucket = "binary"
        self._pass_label = 0

    def _layout(self, layout_id: int) -> np.ndarray:
        if layout_id not in self._layouts:
            self._layouts[layout_id] = layout(self.seed, layout_id, self.n)
        return self._layouts[layout_id]

    def _local(self, layout_id: int, start: int, end: int) -> int:
        return int(np.count_nonzero(self.key[self._layout(layout_id)[start:end]]) & 1)

    def _ask(self, queries: list[tuple[int, int, int]], sequence: int) -> list[int]:
        unknown = list(dict.fromkeys(q for q in queries if q not in self._known))
        if unknown:
            self.transcript.record(BOB_TO_ALICE, self._pass_label, sequence, self.frame, 0)
            answers = self.oracle.parities(np.array(unknown, dtype=np.int64), self._pass_label, sequence)
            if len(answers) != len(unknown):
                raise ProtocolAbort(f"Asked {len(unknown)} parities, got {len(answers)}")
            self.transcript.record(ALICE_TO_BOB, self._pass_label, sequence, self.frame, len(unknown))
            self.revealed[self._bucket] += len(unknown)
            for q, a in zip(unknown, answers):
                self._known[q] = int(a) & 1
        return [self._known[q] for q in queries]

    def bisect(self, layout_id: int, ranges: list[tuple[int, int]], sequence: int) -> list[int]:
        """Locate one differing position in each range, all ranges in lockstep.

        Alice's parity of every range must already be known and differ from
        Bob's.
        """
        spans = [list(r) for r in ranges]
        active = [i for i, (s, e) in enumerate(spans) if e - s > 1]
        while active:
            halves = [(layout_id, spans[i][0], spans[i][0] + (spans[i][1] - spans[i][0] + 1) // 2) for i in active]
            answers = self._ask(halves, sequence)
            for i, (_, s, mid), left in zip(active, halves, answers):
                e = spans[i][1]
                self._known.setdefault((layout_id, mid, e), self._known[(layout_id, s, e)] ^ left)
                if left != self._local(layout_id, s, mid):
                    spans[i][1] = mid
                else:
                    spans[i][0] = mid
            active = [i for i in active if spans[i][1] - spans[i][0] > 1]
        lay = self._layout(layout_id)
        return [int(lay[s]) for s, _ in spans]

    def flip(self, pos: int) -> None:
        self.key[pos] ^= 1
        self.flips.append(pos)
        for p, inverse in enumerate(self._inverse):
            self._mismatch[p][inverse[pos] // self.sizes[p]] ^= True

    def start_pass(self, p: int) -> None:
        self._pass_label = p
        lay = self._layout(p)
        inverse = np.empty(self.n, dtype=np.int64)
        inverse[lay] = np.arange(self.n)
        starts = np.arange(0, self.n, self.sizes[p])
        ends = np.minimum(starts + self.sizes[p], self.n)
        alice = np.array(self._ask([(p, int(s), int(e)) for s, e in zip(starts, ends)], p), dtype=bool)
        bob = (np.add.reduceat(self.key[lay].astype(np.int64), starts) & 1).astype(bool)
        self._inverse.append(inverse)
        self._mismatch.append(alice ^ bob)

    def settle(self) -> None:
        """Bisect odd blocks, earliest pass first, until every started pass is even."""
        while True:
            odd = [p for p, m in enumerate(self._mismatch) if m.any()]
            if not odd:
                return
            q = odd[0]
            blocks = np.flatnonzero(self._mismatch[q])
            k = self.sizes[q]
            ranges = [(int(b) * k, min((int(b) + 1) * k, self.n)) for b in blocks]
            for pos in self.bisect(q, ranges, q):
                self.flip(pos)
                if self._bucket == "biconf":
                    self.errors_biconf += 1
                else:
                    self.errors[self._pass_label, q] += 1

    def run_passes(self) -> None:
        for p in range(self.num_passes):
            self.start_pass(p)
            self.settle()

    def biconf(self, s: int) -> None:
        """Random-subset parity rounds until s consecutive rounds agree."""
        self._bucket = "biconf"
        self._pass_label = self.num_passes
        agree, r = 0, 0
        while agree < s:
            layout_id = BICONF_BASE + r
            r += 1
            size = len(self._layout(layout_id))
            if size == 0:
                agree += 1
                continue
            (alice,) = self._ask([(layout_id, 0, size)], self.num_passes)
            if alice == self._local(layout_id, 0, size):
                agree += 1
                continue
            (pos,) = self.bisect(layout_id, [(0, size)], self.num_passes)
            self.flip(pos)
            self.errors_biconf += 1
            self.settle()
            agree = 0
        logger.debug(f"BICONF used {r} rounds on frame {self.frame}")

    def stats(self) -> CascadeStats:
        return CascadeStats(
            errors=self.errors,
            errors_biconf=self.errors_biconf,
            bits_revealed_binary=self.revealed["binary"],
            bits_revealed_biconf=self.revealed["biconf"],
            block_sizes=[float(k) for k in self.sizes],
            key_length=self.n,
        )


def binary_correct(block_a, block_b, oracle: Optional[ParityOracle] = None) -> tuple[int, int]:
    """Find and flip one error in a block whose parities differ.

    Returns (position, parities revealed), the count including the top-level
    parity. ``block_b`` is corrected in place when it is a mutable sequence.
    """
    bits = np.array(as_bits(block_b), copy=True)
    oracle = oracle or LocalParityOracle(as_bits(block_a), seed=0)
    rec = _Reconciler(bits, oracle, seed=0, sizes=[])
    n = len(bits)
    if n == 0:
        raise PreconditionError("BINARY needs a non-empty block")
    (alice,) = rec._ask([(0, 0, n)], 0)
    if alice == rec._local(0, 0, n):
        raise PreconditionError("BINARY needs blocks whose parities differ")
    (pos,) = rec.bisect(0, [(0, n)], 0)
    if isinstance(block_b, (list, np.ndarray)):
        block_b[pos] = 1 - block_b[pos]
    return pos, rec.revealed["binary"]


def biconf(
    key_a, key_b, s: int, oracle: Optional[ParityOracle] = None, seed: int = 0
) -> tuple[np.ndarray, int]:
    """BICONF alone: returns Bob's corrected key and the parities revealed."""
    if s < 1:
        raise ValueError(f"s must be at least 1, got {s}")
    key_b = np.array(as_bits(key_b), copy=True)
    if oracle is None:
        key_a = as_bits(key_a)
        if len(key_a) != len(key_b):
            raise PreconditionError(f"Key lengths differ: {len(key_a)} vs {len(key_b)}")
        oracle = LocalParityOracle(key_a, seed)
    rec = _Reconciler(key_b, oracle, seed, sizes=[])
    rec.biconf(s)
    return rec.key, rec.revealed["biconf"]


def run_cascade(
    key_a,
    key_b,
    config: CascadeConfig,
    oracle: Optional[ParityOracle] = None,
    *,
    qber: Optional[float] = None,
    basis: Basis = Basis.X,
    seed: Optional[int] = None,
    frame: int = 0,
    transcript: Optional[Transcript] = None,
) -> tuple[np.ndarray, CascadeStats]:
    """Reconcile Bob's key against Alice's as one frame.

    ``key_a`` may be ``None`` when ``oracle`` reaches Alice elsewhere. Block
    sizes follow from ``qber`` (the basis prior when omitted). Alice's key is
    never modified; Bob's corrected copy is returned.
    """
    seed = config.seed if seed is None else seed
    qber = config.prior(basis) if qber is None else qber
    key_b = np.array(as_bits(key_b), copy=True)
    if oracle is None:
        if key_a is None:
            raise PreconditionError("Need Alice's key or a parity oracle")
        key_a = as_bits(key_a)
        if len(key_a) != len(key_b):
            raise PreconditionError(f"Key lengths differ: {len(key_a)} vs {len(key_b)}")
        oracle = LocalParityOracle(key_a, seed)
    if len(key_b) == 0:
        stats = CascadeStats.empty(config.num_passes)
        stats.frames = 1
        return key_b, stats

    k1 = initial_block_size(qber, config.block_constant, key_length=len(key_b))
    rec = _Reconciler(key_b, oracle, seed, block_sizes(k1, config.num_passes), frame, transcript)
    try:
        rec.run_passes()
        rec.biconf(config.s)
    except ProtocolAbort as exc:
        if exc.transcript is None:
            exc.transcript = rec.transcript
        raise
    stats = rec.stats()
    logger.debug(
        f"Frame {frame}: {len(key_b)} bits, {stats.errors_corrected} errors, "
        f"{stats.bits_revealed} parities ({stats.bits_revealed_biconf} BICONF)"
    )
    return rec.key, stats


def corrected_positions(key_b_before: np.ndarray, key_b_after: np.ndarray) -> np.ndarray:
    return np.flatnonzero(as_bits(key_b_before) != as_bits(key_b_after))


def cascade_benchmark(
    length: int,
    qber: float,
    trials: int,
    config: Optional[CascadeConfig] = None,
    seed: int = 0,
) -> dict[str, pd.DataFrame]:
    """Repeated single-frame runs at a fixed length and channel QBER.

    Returns the block-size, per-step error and totals tables averaged over
    ``trials``.
    """
    if trials < 1:
        raise ValueError(f"trials must be at least 1, got {trials}")
    config = config or CascadeConfig()
    rng = np.random.default_rng(seed)
    total = CascadeStats.empty(config.num_passes)
    residual = 0
    for t in range(trials):
        key_a = rng.integers(0, 2, length, dtype=np.uint8)
        key_b = key_a ^ (rng.random(length) < qber).astype(np.uint8)
        corrected, stats = run_cascade(key_a, key_b, config, qber=qber, seed=int(rng.integers(2**62)), frame=t)
        residual += int(np.any(corrected != key_a))
        total = total.merge(stats)
    if residual:
        logger.warning(f"{residual} of {trials} trials ended with residual errors")

    blocks = pd.DataFrame({"pass": range(1, config.num_passes + 1), "block_size": total.block_sizes})
    rows = [
        {"pass": i + 1, "sequence": j + 1, "errors": total.errors[i, j] / trials}
        for i in range(config.num_passes)
        for j in range(i + 1)
    ]
    rows.append({"pass": "biconf", "sequence": "", "errors": total.errors_biconf / trials})
    errors = pd.DataFrame(rows, columns=["pass", "sequence", "errors"])
    totals = pd.DataFrame(
        [
            {
                "key_length": total.key_length / trials,
                "qber": total.qber_measured,
                "errors": total.errors_corrected / trials,
                "revealed_binary": total.bits_revealed_binary / trials,
                "revealed_biconf": total.bits_revealed_biconf / trials,
                "revealed": total.bits_revealed / trials,
                "f": total.efficiency_f,
                "residual_failures": residual,
            }
        ]
    )
    return {"blocks": blocks, "errors": errors, "totals": totals}
