"""Two-party session: distribution, sifting, cascade per basis, verification,
end-of-session estimation and privacy amplification.

Each party is the same compiled graph. The role, the channel to the peer and
the run configuration arrive through ``config["configurable"]``; nodes branch
on the role where Alice and Bob act differently.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from langchain_core.runnables import RunnableConfig
from langgraph.graph import END, START, StateGraph
from langgraph.types import Command

from biased_qkd import keyrate
from biased_qkd.cascade import (
    CascadeStats,
    ParityResponder,
    Transcript,
    corrected_positions,
    run_cascade,
    split_frames,
)
from biased_qkd.configuration import Configuration, RunConfig
from biased_qkd.keyrate import InfeasibleError, binary_entropy
from biased_qkd.privacy import amplify, draw_seed, key_digest, tags_match, verification_tag
from biased_qkd.schemas import Basis, BiasConfig, PartyState, SessionReport
from biased_qkd.sifting import SiftAccumulator, SiftCounts, SiftedKeys, compare_announcements, pack_codes, unpack_codes
from biased_qkd.source import PreconditionError, simulate_blocks
from biased_qkd.wire import (
    BasisAnnounce,
    Channel,
    CorrectionNotice,
    FinalKeyDigest,
    HashSeed,
    ParityBatch,
    ProtocolAbort,
    QueueTransport,
    ShuffleSeed,
    SiftAck,
    SocketTransport,
    Transport,
    VerifyTag,
)

logger = logging.getLogger(__name__)

# Independent streams of Alice's protocol generator
_SHUFFLE_STREAM = {Basis.X: 1, Basis.Z: 2}
_TAG_STREAM = 3
_HASH_STREAM = 4


class VerificationFailure(RuntimeError):
    """Verification tags differed after reconciliation; no key is produced."""

    def __init__(self, message: str, report: Optional[SessionReport] = None):
        super().__init__(message)
        self.report = report


def _context(config: RunnableConfig) -> tuple[Configuration, Channel, RunConfig]:
    configurable = config["configurable"]
    return Configuration.from_runnable_config(config), configurable["channel"], configurable["run_config"]


def _protocol_rng(run: RunConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([run.session.protocol_seed, stream])


def session_id(run: RunConfig) -> str:
    return run.session.session_id or run.digest()[:12]


class RemoteParityOracle:
    """Bob's view of Alice's parities through the channel."""

    def __init__(self, channel: Channel, frame: int):
        self.channel = channel
        self.frame = frame

    def parities(self, queries: np.ndarray, pass_label: int, sequence: int) -> np.ndarray:
        self.channel.send(ParityBatch.request(self.frame, pass_label, sequence, queries))
        reply = self.channel.expect(ParityBatch)
        if not reply.reply or reply.frame != self.frame:
            raise ProtocolAbort(f"Parity reply for frame {reply.frame}, expected {self.frame}")
        return reply.parities


## Nodes


def distribute(state: PartyState, config: RunnableConfig) -> dict:
    """Run the source, announce Bob's bases block by block and sift."""
    cfg, channel, run = _context(config)
    role = cfg.role
    acc = SiftAccumulator(keep_alice=role == "alice", keep_bob=role == "bob", window=run.output.qber_window)
    blocks = simulate_blocks(run.source, run.alice, run.bob, run.session.n_rounds, run.session.source_seed, cfg.announce_block)
    for block in blocks:
        if role == "bob":
            channel.send(BasisAnnounce(block.start, len(block), pack_codes(block.bob_codes)))
            ack = channel.expect(SiftAck)
            if ack.start != block.start or len(ack.kept) != len(block):
                raise ProtocolAbort(f"Sift acknowledgement for block {ack.start} does not match block {block.start}")
            counts = SiftCounts(ack.kept, ack.raw, ack.dropped, ack.mismatched, ack.detected)
            acc.add(block.start, block.bob_codes, counts, bits_b=block.bob_bits)
        else:
            ann = channel.expect(BasisAnnounce)
            if ann.start != block.start or ann.count != len(block):
                raise ProtocolAbort(f"Announcement for block {ann.start} does not match block {block.start}")
            counts = compare_announcements(block.alice_codes, unpack_codes(ann.codes, ann.count))
            channel.send(SiftAck(block.start, counts.raw, counts.dropped, counts.mismatched, counts.kept, counts.detected))
            acc.add(block.start, block.alice_codes, counts, bits_a=block.alice_bits)
    sifted = acc.finish()
    logger.info(
        f"[{role}] Distribution done: {sifted.n_rounds} rounds, {sifted.N} raw, "
        f"{sifted.n_xx} xx + {sifted.n_zz} zz sifted"
    )
    return {"sifted": sifted}


def _serve_basis(basis: Basis, key: np.ndarray, channel: Channel, run: RunConfig) -> tuple[int, np.ndarray]:
    """Alice: hand out shuffle seeds and answer parity batches frame by frame."""
    rng = _protocol_rng(run, _SHUFFLE_STREAM[basis])
    leak = 0
    flips = []
    for frame, sl in enumerate(split_frames(len(key), run.cascade.frame_length)):
        seed = int(rng.integers(2**63))
        channel.send(ShuffleSeed(int(basis), frame, seed))
        responder = ParityResponder(key[sl], seed)
        while True:
            msg = channel.recv()
            if isinstance(msg, ParityBatch) and not msg.reply and msg.frame == frame:
                try:
                    parities = responder.answer(msg.queries)
                except PreconditionError as exc:
                    raise ProtocolAbort(f"Bad parity query in frame {frame}: {exc}") from exc
                channel.send(ParityBatch.answer(msg, parities))
                leak += len(parities)
            elif isinstance(msg, CorrectionNotice) and msg.frame == frame and msg.basis == basis:
                if len(msg.positions) and msg.positions.max() >= sl.stop - sl.start:
                    raise ProtocolAbort(f"Correction outside frame {frame}")
                flips.append(sl.start + msg.positions)
                break
            else:
                raise ProtocolAbort(f"Unexpected {type(msg).__name__} while reconciling frame {frame}")
    return leak, np.concatenate(flips) if flips else np.zeros(0, dtype=np.int64)


def _drive_basis(
    basis: Basis, key: np.ndarray, channel: Channel, run: RunConfig
) -> tuple[np.ndarray, CascadeStats, np.ndarray, Transcript]:
    """Bob: run cascade on every frame against Alice's remote parities."""
    key = key.copy()
    total = CascadeStats.empty(run.cascade.num_passes)
    transcript = Transcript()
    working_qber = run.cascade.prior(basis)
    flips = []
    for frame, sl in enumerate(split_frames(len(key), run.cascade.frame_length)):
        seed_msg = channel.expect(ShuffleSeed)
        if seed_msg.frame != frame or seed_msg.basis != basis:
            raise ProtocolAbort(f"Shuffle seed for frame {seed_msg.frame}, expected {frame}")
        before = key[sl]
        corrected, stats = run_cascade(
            None,
            before,
            run.cascade,
            RemoteParityOracle(channel, frame),
            qber=min(working_qber, 0.5),
            seed=seed_msg.seed,
            frame=frame,
            transcript=transcript,
        )
        positions = corrected_positions(before, corrected)
        key[sl] = corrected
        channel.send(CorrectionNotice(int(basis), frame, positions))
        flips.append(sl.start + positions)
        total = total.merge(stats)
        if not math.isnan(stats.qber_measured):
            working_qber = stats.qber_measured
    return key, total, (np.concatenate(flips) if flips else np.zeros(0, dtype=np.int64)), transcript


def _reconcile(basis: Basis):
    def node(state: PartyState, config: RunnableConfig) -> dict:
        cfg, channel, run = _context(config)
        sifted: SiftedKeys = state["sifted"]
        key = sifted.bits(basis, cfg.role)
        stats = dict(state.get("stats", {}))
        transcripts = dict(state.get("transcripts", {}))
        if cfg.role == "alice":
            leak, flips = _serve_basis(basis, key, channel, run)
            corrected = key
        else:
            corrected, stats[basis], flips, transcripts[basis] = _drive_basis(basis, key, channel, run)
            leak = stats[basis].bits_revealed
        logger.info(f"[{cfg.role}] {basis.name} reconciled: {len(key)} bits, {len(flips)} errors, {leak} parities")
        return {
            "corrected": {**state.get("corrected", {}), basis: corrected},
            "leaks": {**state.get("leaks", {}), basis: leak},
            "errors": {**state.get("errors", {}), basis: len(flips)},
            "flips": {**state.get("flips", {}), basis: flips},
            "stats": stats,
            "transcripts": transcripts,
        }

    node.__name__ = f"reconcile_{basis.name.lower()}"
    return node


reconcile_x = _reconcile(Basis.X)
reconcile_z = _reconcile(Basis.Z)


def _joined(state: PartyState) -> np.ndarray:
    corrected = state["corrected"]
    return np.concatenate([corrected[Basis.X], corrected[Basis.Z]])


def verify(state: PartyState, config: RunnableConfig) -> Command[Literal["estimate", "abort"]]:
    """Compare Toeplitz tags of the corrected keys"""
    cfg, channel, run = _context(config)
    key = _joined(state)
    if cfg.role == "alice":
        seed = _protocol_rng(run, _TAG_STREAM).integers(0, 2, len(key) + cfg.tag_len - 1, dtype=np.uint8)
        channel.send(VerifyTag(seed=seed, tag=verification_tag(key, seed, cfg.tag_len)))
        ok = bool(channel.expect(VerifyTag).ok)
    else:
        msg = channel.expect(VerifyTag)
        if msg.seed is None or len(msg.seed) != len(key) + cfg.tag_len - 1:
            raise ProtocolAbort("Verification seed does not fit the corrected key")
        ok = tags_match(verification_tag(key, msg.seed, cfg.tag_len), msg.tag)
        channel.send(VerifyTag(ok=ok))
    if not ok:
        logger.error(f"[{cfg.role}] Verification tags differ")
        return Command(goto="abort", update={"verified": False})
    return Command(goto="estimate", update={"verified": True})


def _error_rate(errors: int, n: int) -> float:
    """Measured rate capped at 0.5; above it the entropy terms are already at their maximum."""
    return min(errors / n, 0.5) if n else 0.0


def estimate(state: PartyState, config: RunnableConfig) -> dict:
    """Deviations from the actual counts, then the final length"""
    cfg, _, run = _context(config)
    sifted: SiftedKeys = state["sifted"]
    errors, leaks = state["errors"], state["leaks"]
    e_bx = _error_rate(errors[Basis.X], sifted.n_xx)
    e_bz = _error_rate(errors[Basis.Z], sifted.n_zz)
    budget, eps_x, eps_z = keyrate.session_epsilons(
        sifted.n_xx, sifted.n_zz, e_bx, e_bz, leaks[Basis.X], leaks[Basis.Z], run.keyrate.p_eps, run.keyrate.optimize_split
    )
    final_len = keyrate.secure_length(
        sifted.n_xx, sifted.n_zz, e_bx, e_bz, eps_x, eps_z, leaks[Basis.X], leaks[Basis.Z]
    )
    logger.info(f"[{cfg.role}] eps_x={eps_x:.5f} eps_z={eps_z:.5f}, final length {final_len}")
    return {"budget": budget, "eps": {Basis.X: eps_x, Basis.Z: eps_z}, "final_len": final_len}


def amplify_key(state: PartyState, config: RunnableConfig) -> dict:
    """Hash the whole corrected key once, then compare digests"""
    cfg, channel, run = _context(config)
    key = _joined(state)
    m = state["final_len"]
    if cfg.role == "alice":
        seed = draw_seed(_protocol_rng(run, _HASH_STREAM), len(key), m)
        channel.send(HashSeed(m, seed))
    else:
        msg = channel.expect(HashSeed)
        if msg.output_length != m:
            raise ProtocolAbort(f"Peer computed final length {msg.output_length}, we computed {m}")
        seed = msg.seed
    final = amplify(state["corrected"][Basis.X], state["corrected"][Basis.Z], m, seed)

    digest = key_digest(final.bits)
    if cfg.role == "alice":
        channel.send(FinalKeyDigest(digest))
        peer = channel.expect(FinalKeyDigest).digest
    else:
        peer = channel.expect(FinalKeyDigest).digest
        channel.send(FinalKeyDigest(digest))
    if peer != digest:
        raise VerificationFailure("Final keys differ after privacy amplification")
    return {"final_key": final.bits}


def _efficiency(leak: int, n: int, qber: Optional[float]) -> Optional[float]:
    if not n or not qber:
        return None
    return leak / (n * binary_entropy(min(qber, 0.5)))


def _report(state: PartyState, run: RunConfig, status: str, final_len: int, eps=None, budget=None) -> SessionReport:
    sifted: SiftedKeys = state["sifted"]
    errors, leaks = state["errors"], state["leaks"]
    qber_x = errors[Basis.X] / sifted.n_xx if sifted.n_xx else None
    qber_z = errors[Basis.Z] / sifted.n_zz if sifted.n_zz else None
    eps = eps or {Basis.X: math.nan, Basis.Z: math.nan}
    return SessionReport(
        session_id=session_id(run),
        status=status,
        n_rounds=sifted.n_rounds,
        raw_len=sifted.N,
        sifted_len=sifted.sifted_len,
        final_len=final_len,
        n_xx=sifted.n_xx,
        n_zz=sifted.n_zz,
        dropped=sifted.dropped,
        mismatched=sifted.mismatched,
        errors_x=errors[Basis.X],
        errors_z=errors[Basis.Z],
        qber_x=qber_x,
        qber_z=qber_z,
        secure_per_raw=final_len / sifted.N if sifted.N else 0.0,
        eps_x=eps[Basis.X],
        eps_z=eps[Basis.Z],
        p_eps_x=budget.P_eps_x if budget else math.nan,
        p_eps_z=budget.P_eps_z if budget else math.nan,
        leak_x=leaks[Basis.X],
        leak_z=leaks[Basis.Z],
        f_x=_efficiency(leaks[Basis.X], sifted.n_xx, qber_x),
        f_z=_efficiency(leaks[Basis.Z], sifted.n_zz, qber_z),
        final_rate=final_len * run.source.pair_rate / sifted.n_rounds if sifted.n_rounds else 0.0,
    )


def report(state: PartyState, config: RunnableConfig) -> dict:
    _, _, run = _context(config)
    final_len = len(state["final_key"])
    status = "ok" if final_len else "no_positive_rate"
    return {"report": _report(state, run, status, final_len, state["eps"], state["budget"])}


def abort(state: PartyState, config: RunnableConfig) -> dict:
    _, _, run = _context(config)
    return {"report": _report(state, run, "verification_failed", 0), "final_key": np.zeros(0, dtype=np.uint8)}


# Build workflow
party_builder = StateGraph(PartyState)

party_builder.add_node("distribute", distribute)
party_builder.add_node("reconcile_x", reconcile_x)
party_builder.add_node("reconcile_z", reconcile_z)
party_builder.add_node("verify", verify)
party_builder.add_node("estimate", estimate)
party_builder.add_node("amplify", amplify_key)
party_builder.add_node("report", report)
party_builder.add_node("abort", abort)

party_builder.add_edge(START, "distribute")
party_builder.add_edge("distribute", "reconcile_x")
party_builder.add_edge("reconcile_x", "reconcile_z")
party_builder.add_edge("reconcile_z", "verify")
party_builder.add_edge("estimate", "amplify")
party_builder.add_edge("amplify", "report")
party_builder.add_edge("report", END)
party_builder.add_edge("abort", END)

party = party_builder.compile()


@dataclass
class PartyResult:
    role: str
    report: SessionReport
    final_key: np.ndarray
    sifted: SiftedKeys
    flips: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    transcripts: dict = field(default_factory=dict)


@dataclass
class SessionOutcome:
    report: SessionReport
    alice: PartyResult
    bob: PartyResult


def run_party(role: str, run: RunConfig, transport: Transport) -> PartyResult:
    """Run one party's graph to completion over ``transport``."""
    if role not in ("alice", "bob"):
        raise ValueError(f"Role must be alice or bob, got {role!r}")
    channel = Channel(transport, name=role)
    configurable = {
        "role": role,
        "channel": channel,
        "run_config": run,
        "announce_block": run.session.announce_block,
        "tag_len": run.session.tag_len,
    }
    try:
        state = party.invoke({"role": role}, config={"configurable": configurable})
    except ProtocolAbort:
        channel.close()
        raise
    except Exception as exc:
        channel.abort(f"{type(exc).__name__}: {exc}")
        raise
    result = PartyResult(
        role=role,
        report=state["report"],
        final_key=state["final_key"],
        sifted=state["sifted"],
        flips=state.get("flips", {}),
        stats=state.get("stats", {}),
        transcripts=state.get("transcripts", {}),
    )
    if result.report.status == "verification_failed":
        raise VerificationFailure("Verification tags differ; session aborted without a key", result.report)
    return result


def transport_pair(kind: str, timeout: float = 60.0):
    if kind == "queue":
        return QueueTransport.pair(timeout)
    if kind == "socket":
        return SocketTransport.pair(timeout)
    raise ValueError(f"Unknown transport {kind!r}")


def run_session(run: RunConfig, transport: Optional[str] = None) -> SessionOutcome:
    """Run Alice and Bob concurrently over an in-process transport pair.

    Raises the first party's ``VerificationFailure`` or ``ProtocolAbort``.
    """
    kind = transport or run.session.transport
    ends = transport_pair(kind, run.session.timeout)
    with ThreadPoolExecutor(max_workers=2, thread_name_prefix="party") as pool:
        futures = [pool.submit(run_party, role, run, end) for role, end in zip(("alice", "bob"), ends)]
        errors = [f.exception() for f in futures]
    for end in ends:
        end.close()
    for kind_ in (VerificationFailure, ProtocolAbort):
        for exc in errors:
            if isinstance(exc, kind_):
                raise exc
    for exc in errors:
        if exc is not None:
            raise exc

    alice, bob = (f.result() for f in futures)
    if alice.report != bob.report:
        raise ProtocolAbort("Alice and Bob ended with different reports")
    if not np.array_equal(alice.final_key, bob.final_key):
        raise VerificationFailure("Final keys differ", alice.report)
    return SessionOutcome(report=alice.report, alice=alice, bob=bob)


def qber_timeseries(
    sifted: SiftedKeys,
    flips: Mapping[Basis, np.ndarray],
    window: int,
    n_rounds: Optional[int] = None,
) -> pd.DataFrame:
    """Per-window error rates from the corrections made during reconciliation.

    ``flips`` are positions in each basis' sifted key. Windows without
    matched rounds of a basis get NaN for that basis.
    """
    if window < 100:
        raise ValueError(f"window must be at least 100 rounds, got {window}")
    n_rounds = n_rounds or sifted.n_rounds
    n_windows = max(1, math.ceil(n_rounds / window))
    columns = {"window_index": np.arange(n_windows)}
    for basis in (Basis.X, Basis.Z):
        rounds = sifted.rounds(basis)
        counts = np.bincount(rounds // window, minlength=n_windows)[:n_windows]
        errs = np.bincount(rounds[np.asarray(flips.get(basis, []), dtype=np.int64)] // window, minlength=n_windows)
        with np.errstate(divide="ignore", invalid="ignore"):
            rate = np.where(counts > 0, errs[:n_windows] / counts, np.nan)
        columns[f"qber_{basis.name.lower()}"] = rate
    return pd.DataFrame(columns)


def rate_timeseries(sifted: SiftedKeys, pair_rate: float, final_len: int = 0, n_rounds: Optional[int] = None) -> pd.DataFrame:
    """Raw and sifted coincidences per second for each window of rounds.

    Round i happens at i / pair_rate seconds. ``final_rate`` is the session
    average, since the final key only exists once the whole session is hashed.
    """
    if sifted.raw_per_window is None or not sifted.window:
        raise ValueError("Sifted keys carry no per-window raw tally")
    if pair_rate <= 0:
        raise ValueError(f"pair_rate must be positive, got {pair_rate}")
    window = sifted.window
    n_rounds = n_rounds or sifted.n_rounds
    n_windows = max(1, math.ceil(n_rounds / window))
    starts = np.arange(n_windows) * window
    ends = np.minimum(starts + window, n_rounds)
    seconds = (ends - starts) / pair_rate
    raw = np.zeros(n_windows, dtype=np.int64)
    tally = sifted.raw_per_window[:n_windows]
    raw[: len(tally)] = tally
    kept = np.concatenate([sifted.x_rounds, sifted.z_rounds]) // window
    sifted_counts = np.bincount(kept, minlength=n_windows)[:n_windows]
    return pd.DataFrame(
        {
            "window_index": np.arange(n_windows),
            "t_start": starts / pair_rate,
            "t_end": ends / pair_rate,
            "raw_rate": raw / seconds,
            "sifted_rate": sifted_counts / seconds,
            "final_rate": final_len * pair_rate / n_rounds,
        }
    )


def compare_reports(reports: Sequence[SessionReport], baseline: int = 0) -> list[float]:
    """secure_per_raw of every report relative to the baseline report."""
    if len(reports) < 2:
        raise ValueError(f"Need at least two reports to compare, got {len(reports)}")
    if not 0 <= baseline < len(reports):
        raise ValueError(f"Baseline index {baseline} out of range")
    base = reports[baseline].secure_per_raw
    if base == 0.0:
        raise InfeasibleError(f"Baseline report {reports[baseline].session_id} has no secure key; ratio undefined")
    return [r.secure_per_raw / base for r in reports]


def annotate_reports(reports: Sequence[SessionReport], baseline: int = 0) -> list[SessionReport]:
    """Copies of ``reports`` with ``efficiency_ratio_vs_baseline`` filled in."""
    ratios = compare_reports(reports, baseline)
    return [r.model_copy(update={"efficiency_ratio_vs_baseline": ratio}) for r, ratio in zip(reports, ratios)]


def comparison_table(reports: Sequence[SessionReport], baseline: int = 0) -> pd.DataFrame:
    rows = []
    for r in annotate_reports(reports, baseline):
        rows.append(
            {
                "session_id": r.session_id,
                "qber_x": r.qber_x,
                "qber_z": r.qber_z,
                "raw_len": r.raw_len,
                "sifted_len": r.sifted_len,
                "final_len": r.final_len,
                "secure_per_raw": r.secure_per_raw,
                "ratio": r.efficiency_ratio_vs_baseline,
            }
        )
    return pd.DataFrame(rows)


def expected_secure_per_raw(run: RunConfig) -> float:
    """Key-rate formula at the session's bias and expected raw count.

    Uses the source's intrinsic error rates (with accidentals mixed in) and the
    configured inefficiencies; the reference a simulated session is held to.
    """
    src = run.source
    detect = run.alice.pre_attenuation * run.bob.pre_attenuation
    single = (1.0 - src.double_click_prob) ** 2
    n_raw = run.session.n_rounds * detect
    a = src.accidental_prob
    e_bx = src.p_bx * (1.0 - a) + 0.5 * a
    e_bz = src.p_bz * (1.0 - a) + 0.5 * a
    bias = BiasConfig(q_A=run.alice.q, q_B=run.bob.q)
    R, *_ = keyrate.finite_key_rate(
        bias,
        n_raw * single,
        e_bx,
        e_bz,
        run.keyrate.f_x,
        run.keyrate.f_z,
        run.keyrate.p_eps,
        run.keyrate.optimize_split,
    )
    return max(R, 0.0) * single
