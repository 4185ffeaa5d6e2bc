"""Seeded simulation of the entangled source and the two passive analysers."""

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
import pandas as pd

from biased_qkd.schemas import DOUBLE_CLICK, NO_DETECTION, Basis, RoundFlag, SourceModel, StationModel

logger = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 100_000
EVENT_FIELDS = ["round", "alice_basis", "alice_bit", "bob_basis", "bob_bit", "flags"]


class PreconditionError(ValueError):
    """An operation was called outside its precondition."""


@dataclass(frozen=True)
class RoundOutcome:
    round_index: int
    alice_basis: Optional[Basis]
    bob_basis: Optional[Basis]
    alice_bit: Optional[int]
    bob_bit: Optional[int]
    flags: RoundFlag = RoundFlag.NONE

    @property
    def lost(self) -> bool:
        return bool(self.flags & RoundFlag.LOST)


@dataclass(frozen=True)
class RoundBlock:
    """A contiguous run of rounds as per-station arrays.

    Station codes follow the announcement alphabet: 0 no detection, 1 X,
    2 Z, 3 double click. ``accidental`` marks uncorrelated coincidences.
    """

    start: int
    alice_codes: np.ndarray
    alice_bits: np.ndarray
    bob_codes: np.ndarray
    bob_bits: np.ndarray
    accidental: np.ndarray

    def __len__(self) -> int:
        return len(self.alice_codes)

    def outcomes(self) -> Iterator[RoundOutcome]:
        for i in range(len(self)):
            yield _outcome(
                self.start + i,
                int(self.alice_codes[i]),
                int(self.alice_bits[i]),
                int(self.bob_codes[i]),
                int(self.bob_bits[i]),
                bool(self.accidental[i]),
            )


def _outcome(index: int, code_a: int, bit_a: int, code_b: int, bit_b: int, accidental: bool) -> RoundOutcome:
    if code_a == NO_DETECTION or code_b == NO_DETECTION:
        return RoundOutcome(index, None, None, None, None, RoundFlag.LOST)
    flags = RoundFlag.NONE
    if accidental:
        flags |= RoundFlag.ACCIDENTAL
    if code_a == DOUBLE_CLICK or code_b == DOUBLE_CLICK:
        flags |= RoundFlag.DOUBLE_CLICK
    basis_a = Basis(code_a) if code_a != DOUBLE_CLICK else None
    basis_b = Basis(code_b) if code_b != DOUBLE_CLICK else None
    return RoundOutcome(index, basis_a, basis_b, bit_a, bit_b, flags)


def visibility_to_error(V: float) -> float:
    """Bit-error probability (1 - V) / 2 of a polarisation correlation with visibility V."""
    if not 0.0 <= V <= 1.0:
        raise ValueError(f"Visibility must lie in [0, 1], got {V}")
    return round((1.0 - V) / 2.0, 12)


def source_from_visibilities(v_z: float, v_x: float, **kwargs) -> SourceModel:
    """Source whose intrinsic errors follow from measured visibilities."""
    return SourceModel(p_bz=visibility_to_error(v_z), p_bx=visibility_to_error(v_x), **kwargs)


def equalising_attenuation(qs: Iterable[float]) -> list[float]:
    """Attenuation in front of each analyser that equalises raw coincidence rates.

    With a 50/50 splitter and an attenuator of transmission a in the weak
    arm, the observed bias is 1 / (1 + a) and the analyser passes
    (1 + a) / 2 = 1 / (2 max(q, 1 - q)) of the photons. Scaling every
    setting down to the least transmissive one equalises the detection rates.
    """
    qs = list(qs)
    for q in qs:
        if not 0.0 <= q <= 1.0:
            raise ValueError(f"Bias must lie in [0, 1], got {q}")
    transmissions = [0.5 / max(q, 1.0 - q) for q in qs]
    floor = min(transmissions)
    return [floor / t for t in transmissions]


def _draw_block(
    source: SourceModel, alice: StationModel, bob: StationModel, size: int, rng: np.random.Generator
) -> tuple[np.ndarray, ...]:
    # Draw order is fixed; changing it changes every seeded stream
    basis_a = np.where(rng.random(size) < alice.q, Basis.Z, Basis.X).astype(np.uint8)
    basis_b = np.where(rng.random(size) < bob.q, Basis.Z, Basis.X).astype(np.uint8)
    detected_a = rng.random(size) < alice.pre_attenuation
    detected_b = rng.random(size) < bob.pre_attenuation
    double_a = rng.random(size) < source.double_click_prob
    double_b = rng.random(size) < source.double_click_prob
    accidental = rng.random(size) < source.accidental_prob
    bits_a = rng.integers(0, 2, size, dtype=np.uint8)

    # One error probability per basis serves both the bit role here and the
    # phase role in the conjugate basis
    flip_prob = np.where(basis_b == Basis.Z, source.p_bz, source.p_bx)
    flip_prob = np.where(basis_a == basis_b, flip_prob, 0.5)
    flip_prob = np.where(accidental, 0.5, flip_prob)
    bits_b = bits_a ^ (rng.random(size) < flip_prob).astype(np.uint8)

    codes_a = np.where(double_a, DOUBLE_CLICK, basis_a).astype(np.uint8)
    codes_b = np.where(double_b, DOUBLE_CLICK, basis_b).astype(np.uint8)
    codes_a[~detected_a] = NO_DETECTION
    codes_b[~detected_b] = NO_DETECTION
    return codes_a, bits_a, codes_b, bits_b, accidental


def generate_round(
    source: SourceModel, alice: StationModel, bob: StationModel, rng: np.random.Generator, round_index: int = 0
) -> RoundOutcome:
    """Draw a single round from ``rng``."""
    codes_a, bits_a, codes_b, bits_b, accidental = _draw_block(source, alice, bob, 1, rng)
    return _outcome(round_index, int(codes_a[0]), int(bits_a[0]), int(codes_b[0]), int(bits_b[0]), bool(accidental[0]))


def simulate_blocks(
    source: SourceModel,
    alice: StationModel,
    bob: StationModel,
    n_rounds: int,
    seed: int,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> Iterator[RoundBlock]:
    """Yield ``n_rounds`` rounds as arrays of at most ``block_size`` rounds."""
    if n_rounds < 1:
        raise PreconditionError(f"n_rounds must be at least 1, got {n_rounds}")
    if block_size < 1:
        raise PreconditionError(f"block_size must be at least 1, got {block_size}")
    rng = np.random.default_rng(seed)
    start = 0
    while start < n_rounds:
        size = min(block_size, n_rounds - start)
        codes_a, bits_a, codes_b, bits_b, accidental = _draw_block(source, alice, bob, size, rng)
        yield RoundBlock(start, codes_a, bits_a, codes_b, bits_b, accidental)
        start += size
    logger.debug(f"Simulated {n_rounds} rounds with seed {seed}")


def simulate_session(
    source: SourceModel,
    alice: StationModel,
    bob: StationModel,
    n_rounds: int,
    seed: int,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> Iterator[RoundOutcome]:
    """Stream ``n_rounds`` outcomes; identical seeds give identical streams."""
    for block in simulate_blocks(source, alice, bob, n_rounds, seed, block_size):
        yield from block.outcomes()


def _basis_text(basis: Optional[Basis]) -> str:
    return "" if basis is None else basis.name


def _flags_text(flags: RoundFlag) -> str:
    return "|".join(f.name.lower() for f in RoundFlag if f != RoundFlag.NONE and f in flags)


def _event_row(r: RoundOutcome) -> list:
    return [
        r.round_index,
        _basis_text(r.alice_basis),
        "" if r.alice_bit is None else r.alice_bit,
        _basis_text(r.bob_basis),
        "" if r.bob_bit is None else r.bob_bit,
        _flags_text(r.flags),
    ]


def write_events(
    path: Path,
    rounds: Iterable[RoundOutcome],
    chunk_size: int = DEFAULT_BLOCK_SIZE,
    provenance: Sequence[str] = (),
) -> int:
    """Dump rounds as ``round,alice_basis,alice_bit,bob_basis,bob_bit,flags``, chunk by chunk.

    ``provenance`` lines (each starting with ``#``) go above the header.
    """
    count = 0
    with open(path, "w", newline="") as fh:
        for line in provenance:
            fh.write(line + "\n")
        pd.DataFrame(columns=EVENT_FIELDS).to_csv(fh, index=False)
    rounds = iter(rounds)
    while chunk := list(itertools.islice(rounds, chunk_size)):
        pd.DataFrame([_event_row(r) for r in chunk], columns=EVENT_FIELDS).to_csv(
            path, mode="a", header=False, index=False
        )
        count += len(chunk)
    return count


def _parse_basis(text: str, index: int) -> Optional[Basis]:
    if text == "":
        return None
    try:
        return Basis[text]
    except KeyError:
        raise PreconditionError(f"Round {index}: unknown basis {text!r}") from None


def _parse_bit(text: str, index: int) -> Optional[int]:
    if text == "":
        return None
    if text not in ("0", "1"):
        raise PreconditionError(f"Round {index}: bit must be 0 or 1, got {text!r}")
    return int(text)


def _parse_flags(text: str, index: int) -> RoundFlag:
    flags = RoundFlag.NONE
    for name in filter(None, text.split("|")):
        try:
            flags |= RoundFlag[name.upper()]
        except KeyError:
            raise PreconditionError(f"Round {index}: unknown flag {name!r}") from None
    return flags


def read_events(path: Path, chunk_size: int = DEFAULT_BLOCK_SIZE) -> Iterator[RoundOutcome]:
    """Replay an event dump written by ``write_events``."""
    header = pd.read_csv(path, nrows=0, comment="#").columns.tolist()
    if header != EVENT_FIELDS:
        raise PreconditionError(f"Unexpected event header {header!r}")
    reader = pd.read_csv(path, dtype=str, keep_default_na=False, chunksize=chunk_size, comment="#")
    line_no = 1
    for chunk in reader:
        for row in chunk.itertuples(index=False, name=None):
            line_no += 1
            try:
                index = int(row[0])
            except ValueError:
                raise PreconditionError(f"Line {line_no}: bad round index {row[0]!r}") from None
            yield RoundOutcome(
                index,
                _parse_basis(row[1], index),
                _parse_basis(row[3], index),
                _parse_bit(row[2], index),
                _parse_bit(row[4], index),
                _parse_flags(row[5], index),
            )
