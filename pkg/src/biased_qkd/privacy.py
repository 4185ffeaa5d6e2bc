"""Error verification and privacy amplification with Toeplitz hashing.

Row j of the m-by-n Toeplitz matrix built from a seed of n + m - 1 bits is
``T[j, i] = seed[n - 1 + j - i]``, so the hash is a slice of the linear
convolution of seed and key, reduced mod 2.
"""

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Mapping, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy import linalg, signal

from biased_qkd.utils import as_bits, pack_bits, unpack_bits

logger = logging.getLogger(__name__)

KEY_FILE_MAGIC = "# biased-qkd final key"


class HashSpec(BaseModel):
    """One member of the Toeplitz family over GF(2)."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    family: Literal["toeplitz"] = "toeplitz"
    seed: np.ndarray
    n: int
    m: int

    @field_validator("seed", mode="before")
    @classmethod
    def _seed_bits(cls, v):
        return as_bits(v)

    @model_validator(mode="after")
    def _shape(self) -> "HashSpec":
        if self.n < 0 or self.m < 0:
            raise ValueError("Hash dimensions must be non-negative")
        if self.m > self.n:
            raise ValueError(f"Output length m={self.m} exceeds input length n={self.n}")
        expected = self.n + self.m - 1 if self.m else 0
        if self.m and len(self.seed) != expected:
            raise ValueError(f"Seed must have n + m - 1 = {expected} bits, got {len(self.seed)}")
        return self


def seed_length(n: int, m: int) -> int:
    return n + m - 1 if m else 0


def draw_seed(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    return rng.integers(0, 2, seed_length(n, m), dtype=np.uint8)


def _toeplitz_product(seed: np.ndarray, key: np.ndarray, m: int) -> np.ndarray:
    n = len(key)
    if m == 0:
        return np.zeros(0, dtype=np.uint8)
    if n == 0:
        return np.zeros(m, dtype=np.uint8)
    conv = signal.oaconvolve(seed.astype(np.float64), key.astype(np.float64))
    return (np.rint(conv[n - 1 : n - 1 + m]).astype(np.int64) & 1).astype(np.uint8)


def toeplitz_matrix(spec: HashSpec) -> np.ndarray:
    if spec.m == 0:
        return np.zeros((0, spec.n), dtype=np.uint8)
    return linalg.toeplitz(spec.seed[spec.n - 1 :], spec.seed[spec.n - 1 :: -1]).astype(np.uint8)


def naive_hash(key, spec: HashSpec) -> np.ndarray:
    """Row-by-row matrix product; only for small inputs."""
    key = as_bits(key)
    if len(key) != spec.n:
        raise ValueError(f"Key has {len(key)} bits, hash expects {spec.n}")
    return ((toeplitz_matrix(spec).astype(np.int64) @ key.astype(np.int64)) & 1).astype(np.uint8)


def pa_hash(key, spec: HashSpec) -> np.ndarray:
    key = as_bits(key)
    if len(key) != spec.n:
        raise ValueError(f"Key has {len(key)} bits, hash expects {spec.n}")
    return _toeplitz_product(spec.seed, key, spec.m)


def verification_tag(key, tag_seed, tag_len: int) -> np.ndarray:
    """Toeplitz tag of ``tag_len`` bits; distinct keys collide with probability 2^-tag_len."""
    if tag_len < 1:
        raise ValueError(f"tag_len must be at least 1, got {tag_len}")
    key = as_bits(key)
    tag_seed = as_bits(tag_seed)
    expected = len(key) + tag_len - 1
    if len(tag_seed) != expected:
        raise ValueError(f"Tag seed must have {expected} bits, got {len(tag_seed)}")
    return _toeplitz_product(tag_seed, key, tag_len)


@dataclass(frozen=True)
class AmplifiedKey:
    bits: np.ndarray
    status: Literal["ok", "no_positive_rate"]

    @property
    def length(self) -> int:
        return len(self.bits)


def amplify(key_x, key_z, length: int, seed) -> AmplifiedKey:
    """Hash the concatenated corrected X and Z keys down to ``length`` bits.

    ``length`` comes from ``keyrate.secure_length`` on end-of-session counts.
    Applied once per session.
    """
    key = np.concatenate([as_bits(key_x), as_bits(key_z)])
    if length == 0:
        logger.warning("Secure length is zero, no final key")
        return AmplifiedKey(np.zeros(0, dtype=np.uint8), "no_positive_rate")
    spec = HashSpec(seed=seed, n=len(key), m=length)
    bits = pa_hash(key, spec)
    logger.info(f"Privacy amplification: {len(key)} -> {length} bits")
    return AmplifiedKey(bits, "ok")


def key_digest(bits) -> bytes:
    """SHA-256 over the bit length and the packed bits."""
    bits = as_bits(bits)
    return hashlib.sha256(struct.pack(">Q", len(bits)) + pack_bits(bits)).digest()


def write_final_key(path: Path, bits, session_id: str, provenance: Optional[Mapping[str, str]] = None) -> Path:
    """Text header (session, length, digest, provenance), a blank line, then the packed bits."""
    bits = as_bits(bits)
    fields = {"session_id": session_id, "length": len(bits), "sha256": key_digest(bits).hex(), **(provenance or {})}
    header = KEY_FILE_MAGIC + "\n" + "".join(f"{k}={v}\n" for k, v in fields.items()) + "\n"
    path = Path(path)
    path.write_bytes(header.encode("ascii") + pack_bits(bits))
    return path


def read_final_key(path: Path) -> tuple[dict[str, str], np.ndarray]:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n\n")
    lines = head.decode("ascii").splitlines()
    if not sep or not lines or lines[0] != KEY_FILE_MAGIC:
        raise ValueError(f"{path} is not a final-key file")
    header = dict(line.split("=", 1) for line in lines[1:])
    bits = unpack_bits(body, int(header["length"]))
    if key_digest(bits).hex() != header["sha256"]:
        raise ValueError(f"{path}: key digest does not match its header")
    return header, bits


def tags_match(tag_a: np.ndarray, tag_b: Optional[np.ndarray]) -> bool:
    return tag_b is not None and len(tag_a) == len(tag_b) and bool(np.array_equal(tag_a, tag_b))
