import itertools
import math
from collections import Counter

import numpy as np
import pandas as pd
import pytest

from biased_qkd.cascade import (
    ALICE_TO_BOB,
    BICONF_BASE,
    CascadeStats,
    LocalParityOracle,
    ParityResponder,
    Transcript,
    biconf,
    binary_correct,
    block_sizes,
    cascade_benchmark,
    corrected_positions,
    initial_block_size,
    layout,
    recount_leak,
    run_cascade,
    split_frames,
)
from biased_qkd.schemas import Basis, CascadeConfig
from biased_qkd.source import PreconditionError
from biased_qkd.wire import ProtocolAbort

from conftest import noisy_pair


def test_initial_block_sizes():
    assert initial_block_size(0.054) == 16
    assert initial_block_size(0.012) == 72
    assert initial_block_size(0.5) == 2
    assert initial_block_size(0.0, key_length=900) == 900
    with pytest.raises(ValueError):
        initial_block_size(0.0)
    assert block_sizes(16, 3) == [16, 32, 64]


def test_binary_finds_the_error():
    block_a = [0, 1, 1, 0, 1, 0, 0, 1]
    block_b = list(block_a)
    block_b[5] ^= 1
    pos, revealed = binary_correct(block_a, block_b)
    assert pos == 5
    assert revealed == 4
    assert block_b == block_a


def test_binary_needs_odd_parity():
    with pytest.raises(PreconditionError):
        binary_correct([1, 0, 1], [0, 1, 1])
    with pytest.raises(PreconditionError):
        binary_correct([], [])


def test_layouts_are_reproducible():
    np.testing.assert_array_equal(layout(5, 0, 10), np.arange(10))
    np.testing.assert_array_equal(layout(5, 1, 100), layout(5, 1, 100))
    assert sorted(layout(5, 2, 100)) == list(range(100))
    assert not np.array_equal(layout(5, 1, 100), layout(6, 1, 100))


def test_split_frames_cover_the_key():
    frames = split_frames(2500, 1000)
    assert len(frames) == 3
    assert frames[0].start == 0 and frames[-1].stop == 2500
    assert all(a.stop == b.start for a, b in zip(frames, frames[1:]))
    assert max(f.stop - f.start for f in frames) <= 1000
    assert split_frames(0, 1000) == []


def test_responder_range_parities():
    key = np.array([1, 0, 1, 1, 0, 1], dtype=np.uint8)
    responder = ParityResponder(key, seed=0)
    answers = responder.answer(np.array([[0, 0, 6], [0, 0, 3], [0, 2, 4]]))
    assert answers.tolist() == [0, 0, 0]
    assert responder.answered == 3
    with pytest.raises(PreconditionError):
        responder.answer(np.array([[0, 4, 9]]))


@pytest.mark.parametrize("qber,n", [(0.054, 1208), (0.012, 927), (0.1, 3000)])
def test_cascade_corrects_every_error(rng, qber, n):
    key_a, key_b = noisy_pair(rng, n, qber)
    original_a = key_a.copy()
    initial_errors = int(np.count_nonzero(key_a != key_b))
    corrected, stats = run_cascade(key_a, key_b, CascadeConfig(), qber=qber, seed=3)
    np.testing.assert_array_equal(corrected, key_a)
    np.testing.assert_array_equal(key_a, original_a)
    assert stats.errors_corrected == initial_errors
    assert stats.key_length == n
    assert np.triu(stats.errors, 1).sum() == 0
    assert stats.bits_revealed_biconf >= CascadeConfig().s


def test_flipped_positions_are_the_errors(rng):
    key_a, key_b = noisy_pair(rng, 1000, 0.05)
    corrected, _ = run_cascade(key_a, key_b, CascadeConfig(), qber=0.05)
    np.testing.assert_array_equal(corrected_positions(key_b, corrected), np.flatnonzero(key_a != key_b))


def test_leak_recount_matches_stats(rng, tmp_path):
    key_a, key_b = noisy_pair(rng, 2000, 0.054)
    transcript = Transcript()
    _, stats = run_cascade(key_a, key_b, CascadeConfig(), qber=0.054, transcript=transcript)
    assert transcript.leak() == stats.bits_revealed
    path = transcript.write(tmp_path / "transcript.csv")
    assert recount_leak(path) == stats.bits_revealed
    frame = transcript.to_frame()
    assert set(frame["direction"]) == {ALICE_TO_BOB, "bob->alice"}


def test_identical_keys_reveal_only_top_level_and_biconf(rng):
    key = rng.integers(0, 2, 500, dtype=np.uint8)
    corrected, stats = run_cascade(key, key.copy(), CascadeConfig(num_passes=1, s=10), qber=0.05)
    np.testing.assert_array_equal(corrected, key)
    assert stats.errors_corrected == 0
    assert stats.bits_revealed_binary == math.ceil(500 / initial_block_size(0.05))
    assert stats.bits_revealed_biconf == 10
    assert math.isnan(stats.efficiency_f)


def test_zero_qber_uses_one_block(rng):
    key_a, key_b = noisy_pair(rng, 400, 0.0)
    key_b[17] ^= 1
    corrected, stats = run_cascade(key_a, key_b, CascadeConfig(), qber=0.0)
    np.testing.assert_array_equal(corrected, key_a)
    assert stats.block_sizes[0] == 400


def test_empty_frame():
    corrected, stats = run_cascade(np.zeros(0, dtype=np.uint8), np.zeros(0, dtype=np.uint8), CascadeConfig())
    assert len(corrected) == 0
    assert stats.bits_revealed == 0
    assert stats.frames == 1


def test_prior_comes_from_the_basis(rng):
    key_a, key_b = noisy_pair(rng, 720, 0.01)
    _, stats = run_cascade(key_a, key_b, CascadeConfig(), basis=Basis.Z)
    assert stats.block_sizes[0] == initial_block_size(CascadeConfig().qber_prior_z)


def test_biconf_alone_fixes_a_single_error(rng):
    key_a = rng.integers(0, 2, 256, dtype=np.uint8)
    key_b = key_a.copy()
    key_b[100] ^= 1
    corrected, revealed = biconf(key_a, key_b, s=20, seed=4)
    np.testing.assert_array_equal(corrected, key_a)
    assert revealed >= 20


class _ShortOracle:
    def parities(self, queries, pass_label, sequence):
        return np.zeros(0, dtype=np.uint8)


def test_short_reply_aborts_with_transcript(rng):
    key_a, key_b = noisy_pair(rng, 100, 0.05)
    with pytest.raises(ProtocolAbort) as info:
        run_cascade(None, key_b, CascadeConfig(), _ShortOracle(), qber=0.05)
    assert info.value.transcript is not None
    assert len(info.value.transcript.entries) == 1


def test_key_lengths_must_match():
    with pytest.raises(PreconditionError):
        run_cascade([0, 1, 1], [0, 1], CascadeConfig())


def test_stats_merge_averages_block_sizes():
    a = CascadeStats(errors=np.eye(2, dtype=np.int64), bits_revealed_binary=10, block_sizes=[16.0, 32.0], key_length=100)
    b = CascadeStats(errors=np.eye(2, dtype=np.int64), bits_revealed_binary=20, block_sizes=[18.0, 36.0], key_length=120)
    merged = CascadeStats.empty(2).merge(a).merge(b)
    assert merged.frames == 2
    assert merged.block_sizes == [17.0, 34.0]
    assert merged.errors_corrected == 4
    assert merged.bits_revealed == 30
    assert merged.key_length == 220


def test_remote_style_oracle_matches_local(rng):
    key_a, key_b = noisy_pair(rng, 800, 0.05)
    local, _ = run_cascade(key_a, key_b, CascadeConfig(), qber=0.05, seed=9)
    remote, _ = run_cascade(None, key_b, CascadeConfig(), LocalParityOracle(key_a, 9), qber=0.05, seed=9)
    np.testing.assert_array_equal(local, remote)


def test_benchmark_tables():
    tables = cascade_benchmark(500, 0.05, trials=5, seed=1)
    assert list(tables) == ["blocks", "errors", "totals"]
    assert tables["blocks"]["block_size"].tolist() == [17, 34, 68]
    assert len(tables["errors"]) == 3 * 4 // 2 + 1
    assert tables["totals"].loc[0, "residual_failures"] == 0


@pytest.mark.slow
def test_efficiency_at_x_error_rate():
    totals = cascade_benchmark(1208, 0.054, trials=200, seed=2)["totals"].iloc[0]
    assert totals["revealed"] == pytest.approx(490.8, rel=0.15)
    assert totals["f"] == pytest.approx(1.31, abs=0.15)


@pytest.mark.slow
def test_efficiency_at_z_error_rate():
    totals = cascade_benchmark(927, 0.012, trials=200, seed=3)["totals"].iloc[0]
    assert totals["revealed"] == pytest.approx(155.8, rel=0.20)
    assert totals["f"] == pytest.approx(1.59, abs=0.2)


@pytest.mark.slow
def test_no_residual_errors_over_many_runs():
    totals = cascade_benchmark(10_000, 0.05, trials=10_000, seed=5)["totals"].iloc[0]
    assert totals["residual_failures"] == 0


def test_binary_single_error_anywhere_in_sixteen_bits(rng):
    block_a = rng.integers(0, 2, 16, dtype=np.uint8).tolist()
    for pos in range(16):
        block_b = list(block_a)
        block_b[pos] ^= 1
        found, revealed = binary_correct(block_a, block_b)
        assert found == pos
        assert revealed <= 5
        assert block_b == block_a


def test_binary_corrects_exactly_one_of_three_errors():
    block_a = [0] * 8
    for errors in itertools.combinations(range(8), 3):
        block_b = [1 if i in errors else 0 for i in range(8)]
        pos, _ = binary_correct(block_a, block_b)
        assert pos in errors
        assert sum(block_b) == 2


class _RecordingOracle(LocalParityOracle):
    def __init__(self, key, seed):
        super().__init__(key, seed)
        self.layout_ids = []

    def parities(self, queries, pass_label, sequence):
        self.layout_ids.extend(int(q[0]) for q in queries)
        return super().parities(queries, pass_label, sequence)


def test_biconf_finds_a_single_error_in_about_two_rounds():
    # Each random subset holds the error with probability 1/2
    trials, first_round = 2000, []
    key_a = np.zeros(64, dtype=np.uint8)
    for t in range(trials):
        key_b = key_a.copy()
        key_b[t % 64] = 1
        oracle = _RecordingOracle(key_a, seed=t)
        corrected, _ = biconf(key_a, key_b, s=20, oracle=oracle, seed=t)
        np.testing.assert_array_equal(corrected, key_a)
        counts = Counter(oracle.layout_ids)
        bisected = min(i for i, c in counts.items() if c > 1)
        first_round.append(bisected - BICONF_BASE + 1)
    first_round = np.array(first_round)
    assert first_round.mean() == pytest.approx(2.0, abs=0.15)
    assert np.mean(first_round == 1) == pytest.approx(0.5, abs=0.04)


def test_fixed_seeds_give_identical_transcripts(rng):
    key_a, key_b = noisy_pair(rng, 1500, 0.054)
    frames = []
    for _ in range(2):
        transcript = Transcript()
        corrected, _ = run_cascade(key_a, key_b, CascadeConfig(seed=9), qber=0.054, transcript=transcript)
        frames.append(transcript.to_frame())
        np.testing.assert_array_equal(corrected, key_a)
    pd.testing.assert_frame_equal(frames[0], frames[1])
