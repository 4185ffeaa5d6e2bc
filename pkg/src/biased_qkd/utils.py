import hashlib
import json
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
import pandas as pd


def as_bits(bits) -> np.ndarray:
    """Coerce a 0/1 sequence (list, str or array) into a uint8 array."""
    if isinstance(bits, str):
        arr = np.frombuffer(bits.encode("ascii"), dtype=np.uint8).astype(np.int64) - ord("0")
    else:
        arr = np.asarray(bits)
        if arr.dtype == np.uint8:
            arr_ok = arr.size == 0 or arr.max() <= 1
            if arr.ndim == 1 and arr_ok:
                return arr
    if arr.ndim != 1:
        raise ValueError(f"Expected a one-dimensional bit string, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ValueError("Bit strings may only contain 0 and 1")
    return arr.astype(np.uint8)


def pack_bits(bits: np.ndarray) -> bytes:
    """Pack bits most-significant-bit first."""
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def unpack_bits(buf: bytes, n: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=n)


def bits_to_str(bits: np.ndarray) -> str:
    return "".join("1" if b else "0" for b in bits)


def config_digest(config: Mapping[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of a configuration mapping."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def provenance_lines(digest: str, seeds: Mapping[str, int]) -> list[str]:
    seed_text = " ".join(f"{k}={v}" for k, v in sorted(seeds.items()))
    return [f"# config_sha256={digest}", f"# seeds {seed_text}".rstrip()]


def write_csv(df: pd.DataFrame, path: Path, digest: str, seeds: Mapping[str, int]) -> Path:
    """Write a CSV artifact whose header comment makes it regenerable."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        for line in provenance_lines(digest, seeds):
            fh.write(line + "\n")
        df.to_csv(fh, index=False)
    return path


def read_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def write_json(payload: Mapping[str, Any], path: Path, digest: str, seeds: Mapping[str, int]) -> Path:
    """Write a flat JSON document carrying the same provenance as the CSVs."""
    path = Path(path)
    doc = {**payload, "config_sha256": digest, "seeds": dict(seeds)}
    path.write_text(json.dumps(doc, indent=2, sort_keys=False, default=str) + "\n")
    return path


def write_table(df: pd.DataFrame, stem: Path, fmt: str, digest: str, seeds: Mapping[str, int]) -> Path:
    """Write ``df`` as ``<stem>.csv`` or ``<stem>.json``."""
    stem = Path(stem)
    if fmt == "csv":
        return write_csv(df, stem.with_suffix(".csv"), digest, seeds)
    if fmt == "json":
        rows = json.loads(df.to_json(orient="records"))
        return write_json({"rows": rows}, stem.with_suffix(".json"), digest, seeds)
    raise ValueError(f"Unknown output format {fmt!r}")


def format_report_markdown(report, title: Optional[str] = None) -> str:
    """Format a session report into markdown for console display

    Args:
        report: SessionReport to show
        title: Optional heading, defaults to the session id
    """
    heading = title or f"Session {report.session_id}"

    def pct(value):
        return "absent" if value is None else f"{100 * value:.2f}%"

    def eff(value):
        return "-" if value is None else f"{value:.3f}"

    return f"""
# {heading}

**Status**: {report.status}
**QBER**: X {pct(report.qber_x)}, Z {pct(report.qber_z)}
**Key lengths**: raw {report.raw_len:,}, sifted {report.sifted_len:,} (xx {report.n_xx:,} / zz {report.n_zz:,}), final {report.final_len:,}
**Secure bits per raw bit**: {report.secure_per_raw:.4f}
**Final key rate**: {eff(report.final_rate)} bits/s
**Deviations**: eps_x {report.eps_x:.5f}, eps_z {report.eps_z:.5f}
**Revealed**: X {report.leak_x:,}, Z {report.leak_z:,}
**EC efficiency**: f_x {eff(report.f_x)}, f_z {eff(report.f_z)}

---
"""
