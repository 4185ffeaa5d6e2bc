import numpy as np
import pytest
from pydantic import ValidationError

from biased_qkd.privacy import (
    HashSpec,
    amplify,
    draw_seed,
    key_digest,
    naive_hash,
    pa_hash,
    read_final_key,
    seed_length,
    tags_match,
    toeplitz_matrix,
    verification_tag,
    write_final_key,
)
from biased_qkd.utils import bits_to_str


def test_small_toeplitz_example():
    spec = HashSpec(seed="10110", n=4, m=2)
    assert toeplitz_matrix(spec).tolist() == [[1, 1, 0, 1], [0, 1, 1, 0]]
    assert bits_to_str(pa_hash("1100", spec)) == "01"
    assert bits_to_str(naive_hash("1100", spec)) == "01"


@pytest.mark.parametrize("n,m", [(1, 1), (17, 5), (300, 120), (1000, 1000)])
def test_fast_hash_matches_matrix_product(rng, n, m):
    spec = HashSpec(seed=draw_seed(rng, n, m), n=n, m=m)
    key = rng.integers(0, 2, n, dtype=np.uint8)
    np.testing.assert_array_equal(pa_hash(key, spec), naive_hash(key, spec))


def test_hash_is_linear(rng):
    spec = HashSpec(seed=draw_seed(rng, 256, 64), n=256, m=64)
    x = rng.integers(0, 2, 256, dtype=np.uint8)
    y = rng.integers(0, 2, 256, dtype=np.uint8)
    np.testing.assert_array_equal(pa_hash(x ^ y, spec), pa_hash(x, spec) ^ pa_hash(y, spec))


def test_collision_probability_is_universal(rng):
    n, m, trials = 32, 8, 20_000
    x = rng.integers(0, 2, n, dtype=np.uint8)
    y = x.copy()
    y[[3, 17, 30]] ^= 1
    collisions = 0
    for _ in range(trials):
        spec = HashSpec(seed=draw_seed(rng, n, m), n=n, m=m)
        collisions += np.array_equal(pa_hash(x, spec), pa_hash(y, spec))
    p = 2.0**-m
    assert collisions / trials <= p + 3 * np.sqrt(p * (1 - p) / trials)


def test_hash_spec_validation():
    with pytest.raises(ValidationError):
        HashSpec(seed="1" * 10, n=4, m=5)
    with pytest.raises(ValidationError):
        HashSpec(seed="101", n=4, m=2)
    assert seed_length(4, 0) == 0
    assert len(pa_hash("1010", HashSpec(seed=[], n=4, m=0))) == 0


def test_wrong_key_length_rejected():
    spec = HashSpec(seed="10110", n=4, m=2)
    with pytest.raises(ValueError):
        pa_hash("110", spec)


def test_tag_may_be_longer_than_key(rng):
    key = rng.integers(0, 2, 10, dtype=np.uint8)
    seed = rng.integers(0, 2, 10 + 40 - 1, dtype=np.uint8)
    tag = verification_tag(key, seed, 40)
    assert len(tag) == 40
    assert tags_match(tag, verification_tag(key.copy(), seed, 40))
    assert not tags_match(tag, None)
    with pytest.raises(ValueError):
        verification_tag(key, seed[:-1], 40)


def test_amplify_hashes_both_bases(rng):
    key_x = rng.integers(0, 2, 100, dtype=np.uint8)
    key_z = rng.integers(0, 2, 300, dtype=np.uint8)
    seed = draw_seed(rng, 400, 150)
    final = amplify(key_x, key_z, 150, seed)
    assert final.status == "ok"
    assert final.length == 150
    spec = HashSpec(seed=seed, n=400, m=150)
    np.testing.assert_array_equal(final.bits, pa_hash(np.concatenate([key_x, key_z]), spec))


def test_amplify_without_positive_rate():
    final = amplify([1, 0], [1], 0, [])
    assert final.status == "no_positive_rate"
    assert final.length == 0


def test_final_key_file(tmp_path, rng):
    bits = rng.integers(0, 2, 1234, dtype=np.uint8)
    path = write_final_key(tmp_path / "key.bin", bits, "sess", provenance={"config_sha256": "abc"})
    header, read = read_final_key(path)
    np.testing.assert_array_equal(read, bits)
    assert header["session_id"] == "sess"
    assert header["length"] == "1234"
    assert header["sha256"] == key_digest(bits).hex()
    assert header["config_sha256"] == "abc"

    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="digest"):
        read_final_key(path)
