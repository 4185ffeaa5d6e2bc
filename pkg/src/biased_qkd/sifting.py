"""Basis reconciliation: split the raw key into per-basis sifted keys."""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Union

import numpy as np

from biased_qkd.schemas import DOUBLE_CLICK, NO_DETECTION, Basis, BiasConfig, RoundFlag
from biased_qkd.source import DEFAULT_BLOCK_SIZE, PreconditionError, RoundBlock, RoundOutcome

logger = logging.getLogger(__name__)


class SiftCounts(NamedTuple):
    """Outcome of comparing one block of announcements."""

    kept: np.ndarray  # bool mask of matched rounds
    raw: int
    dropped: int
    mismatched: int
    detected: Optional[np.ndarray] = None  # bool mask of coincidences


@dataclass
class SiftedKeys:
    """Per-basis sifted keys plus the counts the key-rate formula needs.

    A party running the two-station protocol only holds its own bits, so the
    peer's arrays are ``None`` there. Round indices are kept per basis so
    error positions can be placed on the session timeline.
    """

    x_bits_A: Optional[np.ndarray]
    x_bits_B: Optional[np.ndarray]
    z_bits_A: Optional[np.ndarray]
    z_bits_B: Optional[np.ndarray]
    x_rounds: np.ndarray
    z_rounds: np.ndarray
    N: int
    n_rounds: int = 0
    dropped: int = 0
    mismatched: int = 0
    window: Optional[int] = None
    raw_per_window: Optional[np.ndarray] = None  # coincidences per window of rounds

    def __post_init__(self):
        for name, rounds in (("x", self.x_rounds), ("z", self.z_rounds)):
            for side in ("A", "B"):
                bits = getattr(self, f"{name}_bits_{side}")
                if bits is not None and len(bits) != len(rounds):
                    raise ValueError(f"{name}_bits_{side} has {len(bits)} bits for {len(rounds)} rounds")
        if self.n_xx + self.n_zz + self.dropped + self.mismatched != self.N:
            raise ValueError("Raw rounds must split into matched, mismatched and dropped")

    @property
    def n_xx(self) -> int:
        return len(self.x_rounds)

    @property
    def n_zz(self) -> int:
        return len(self.z_rounds)

    @property
    def sifted_len(self) -> int:
        return self.n_xx + self.n_zz

    def bits(self, basis: Basis, party: str) -> Optional[np.ndarray]:
        side = "A" if party == "alice" else "B"
        return getattr(self, f"{basis.name.lower()}_bits_{side}")

    def rounds(self, basis: Basis) -> np.ndarray:
        return self.z_rounds if basis == Basis.Z else self.x_rounds

    def qber(self, basis: Basis) -> float:
        """Fraction of differing sifted bits; needs both parties' bits."""
        a, b = self.bits(basis, "alice"), self.bits(basis, "bob")
        if a is None or b is None:
            raise PreconditionError("qber needs both parties' sifted bits")
        if len(a) == 0:
            return math.nan
        return float(np.count_nonzero(a != b)) / len(a)


def compare_announcements(codes_a: np.ndarray, codes_b: np.ndarray) -> SiftCounts:
    """Match two stations' announcement codes round by round."""
    if len(codes_a) != len(codes_b):
        raise PreconditionError(f"Announcement lengths differ: {len(codes_a)} vs {len(codes_b)}")
    detected = (codes_a != NO_DETECTION) & (codes_b != NO_DETECTION)
    double = detected & ((codes_a == DOUBLE_CLICK) | (codes_b == DOUBLE_CLICK))
    valid = detected & ~double
    kept = valid & (codes_a == codes_b)
    return SiftCounts(
        kept=kept,
        raw=int(np.count_nonzero(detected)),
        dropped=int(np.count_nonzero(double)),
        mismatched=int(np.count_nonzero(valid & ~kept)),
        detected=detected,
    )


def pack_codes(codes: np.ndarray) -> bytes:
    """Pack 2-bit announcement codes four to a byte, first round in the high bits."""
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.size and codes.max() > DOUBLE_CLICK:
        raise ValueError("Announcement codes must lie in 0..3")
    bits = np.unpackbits(codes[:, None], axis=1)[:, 6:]
    return np.packbits(bits.ravel()).tobytes()


def unpack_codes(buf: bytes, n: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=2 * n).reshape(n, 2)
    return (bits[:, 0] << 1 | bits[:, 1]).astype(np.uint8)


@dataclass
class SiftAccumulator:
    """Builds SiftedKeys block by block as announcements are reconciled."""

    keep_alice: bool = True
    keep_bob: bool = True
    window: Optional[int] = None
    _rounds: dict = field(default_factory=lambda: {Basis.X: [], Basis.Z: []}, init=False, repr=False)
    _bits_a: dict = field(default_factory=lambda: {Basis.X: [], Basis.Z: []}, init=False, repr=False)
    _bits_b: dict = field(default_factory=lambda: {Basis.X: [], Basis.Z: []}, init=False, repr=False)
    raw: int = 0
    dropped: int = 0
    mismatched: int = 0
    n_rounds: int = 0
    _raw_windows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), init=False, repr=False)

    def add(
        self,
        start: int,
        codes: np.ndarray,
        counts: SiftCounts,
        bits_a: Optional[np.ndarray] = None,
        bits_b: Optional[np.ndarray] = None,
        indices: Optional[np.ndarray] = None,
    ) -> None:
        """Append one block; ``codes`` are this block's codes from either station.

        Kept rounds are placed at ``start + offset`` unless explicit round
        ``indices`` are given.
        """
        if len(counts.kept) != len(codes):
            raise PreconditionError("Sift mask and announcement block differ in length")
        self.n_rounds += len(codes)
        self.raw += counts.raw
        self.dropped += counts.dropped
        self.mismatched += counts.mismatched
        for basis in Basis:
            sel = counts.kept & (codes == basis)
            offsets = np.flatnonzero(sel)
            self._rounds[basis].append(start + offsets if indices is None else indices[offsets])
            if self.keep_alice:
                self._bits_a[basis].append(np.asarray(bits_a, dtype=np.uint8)[sel])
            if self.keep_bob:
                self._bits_b[basis].append(np.asarray(bits_b, dtype=np.uint8)[sel])
        if self.window and counts.detected is not None:
            hits = np.flatnonzero(counts.detected)
            self._tally_raw(np.bincount((start + hits if indices is None else indices[hits]) // self.window))

    def _tally_raw(self, per_window: np.ndarray) -> None:
        if len(per_window) > len(self._raw_windows):
            self._raw_windows = np.pad(self._raw_windows, (0, len(per_window) - len(self._raw_windows)))
        self._raw_windows[: len(per_window)] += per_window

    def finish(self) -> SiftedKeys:
        def joined(parts: list, dtype) -> np.ndarray:
            return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

        def side(store: dict, basis: Basis, keep: bool) -> Optional[np.ndarray]:
            return joined(store[basis], np.uint8) if keep else None

        keys = SiftedKeys(
            x_bits_A=side(self._bits_a, Basis.X, self.keep_alice),
            x_bits_B=side(self._bits_b, Basis.X, self.keep_bob),
            z_bits_A=side(self._bits_a, Basis.Z, self.keep_alice),
            z_bits_B=side(self._bits_b, Basis.Z, self.keep_bob),
            x_rounds=joined(self._rounds[Basis.X], np.int64),
            z_rounds=joined(self._rounds[Basis.Z], np.int64),
            N=self.raw,
            n_rounds=self.n_rounds,
            dropped=self.dropped,
            mismatched=self.mismatched,
            window=self.window,
            raw_per_window=self._raw_windows.copy() if self.window else None,
        )
        logger.debug(
            f"Sifted {keys.sifted_len} of {keys.N} raw rounds "
            f"(xx {keys.n_xx}, zz {keys.n_zz}, dropped {keys.dropped}, mismatched {keys.mismatched})"
        )
        return keys


def _code(basis: Optional[Basis], flags: RoundFlag) -> int:
    if flags & RoundFlag.LOST:
        return NO_DETECTION
    if flags & RoundFlag.DOUBLE_CLICK or basis is None:
        return DOUBLE_CLICK
    return int(basis)


def _check_bit(bit, basis: Optional[Basis], index: int, who: str) -> int:
    if basis is None:
        return 0
    if bit not in (0, 1):
        raise PreconditionError(f"Round {index}: {who} measured in {basis.name} but recorded bit {bit!r}")
    return int(bit)


def _outcome_block(chunk: list[RoundOutcome], last_index: int) -> tuple[int, RoundBlock]:
    n = len(chunk)
    codes_a = np.zeros(n, dtype=np.uint8)
    codes_b = np.zeros(n, dtype=np.uint8)
    bits_a = np.zeros(n, dtype=np.uint8)
    bits_b = np.zeros(n, dtype=np.uint8)
    for i, r in enumerate(chunk):
        if not isinstance(r, RoundOutcome):
            raise PreconditionError(f"Round after {last_index}: expected a RoundOutcome, got {type(r).__name__}")
        if r.round_index <= last_index:
            raise PreconditionError(f"Round {r.round_index}: indices must increase (previous {last_index})")
        for basis in (r.alice_basis, r.bob_basis):
            if basis is not None and not isinstance(basis, Basis):
                raise PreconditionError(f"Round {r.round_index}: unknown basis {basis!r}")
        last_index = r.round_index
        if r.lost:
            continue
        codes_a[i] = _code(r.alice_basis, r.flags)
        codes_b[i] = _code(r.bob_basis, r.flags)
        bits_a[i] = _check_bit(r.alice_bit, r.alice_basis, r.round_index, "alice")
        bits_b[i] = _check_bit(r.bob_bit, r.bob_basis, r.round_index, "bob")
    start = chunk[0].round_index
    return last_index, RoundBlock(start, codes_a, bits_a, codes_b, bits_b, np.zeros(n, dtype=bool))


def sift(rounds: Iterable[Union[RoundOutcome, RoundBlock]], window: Optional[int] = None) -> SiftedKeys:
    """Keep matched, detected, single-click rounds per basis, in round order.

    Accepts the outcome stream of ``simulate_session``, a replayed event dump,
    or the array blocks of ``simulate_blocks``. With ``window`` the raw
    coincidences are also tallied per window of rounds.
    """
    acc = SiftAccumulator(window=window)
    last_index = -1
    it = iter(rounds)
    while True:
        head = next(it, None)
        if head is None:
            break
        if isinstance(head, RoundBlock):
            counts = compare_announcements(head.alice_codes, head.bob_codes)
            acc.add(head.start, head.alice_codes, counts, head.alice_bits, head.bob_bits)
            last_index = head.start + len(head) - 1
            continue
        chunk = [head, *itertools.islice(it, DEFAULT_BLOCK_SIZE - 1)]
        last_index, block = _outcome_block(chunk, last_index)
        counts = compare_announcements(block.alice_codes, block.bob_codes)
        # Replayed dumps may skip indices, so kept rounds keep their own index
        indices = np.fromiter((r.round_index for r in chunk), dtype=np.int64, count=len(chunk))
        acc.add(block.start, block.alice_codes, counts, block.alice_bits, block.bob_bits, indices)
    return acc.finish()


def expected_sift_fraction(bias: BiasConfig) -> tuple[float, float]:
    """(matched share of raw rounds, Z share of matched rounds)."""
    total = bias.w_zz + bias.w_xx
    if total == 0.0:
        return 0.0, math.nan
    return total, bias.w_zz / total
