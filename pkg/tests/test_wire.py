import threading

import numpy as np
import pytest

from biased_qkd.wire import (
    Abort,
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
    VerifyTag,
    decode_message,
    encode_frame,
    encode_message,
)


def test_frame_layout():
    assert encode_frame(0x11, b"abc") == b"\x00\x00\x00\x03\x11abc"


def test_parity_request_and_answer():
    queries = np.array([[0, 0, 16], [3, 16, 24]])
    req = decode_message(encode_message(ParityBatch.request(7, 1, 0, queries)))
    assert not req.reply
    assert (req.frame, req.pass_label, req.sequence) == (7, 1, 0)
    np.testing.assert_array_equal(req.queries, queries)
    ans = decode_message(encode_message(ParityBatch.answer(req, np.array([1, 0], dtype=np.uint8))))
    assert ans.reply
    assert ans.parities.tolist() == [1, 0]


def test_messages_survive_the_codec():
    kept = np.array([True, False, True, True, False])
    messages = [
        BasisAnnounce(100, 5, bytes([0b01101100, 0b10000000])),
        ShuffleSeed(2, 3, 2**63 - 1),
        CorrectionNotice(1, 4, np.array([5, 900])),
        VerifyTag(ok=False),
        HashSeed(3, np.array([1, 0, 1, 1, 0], dtype=np.uint8)),
        FinalKeyDigest(bytes(range(32))),
        Abort("tags differ"),
    ]
    for msg in messages:
        back = decode_message(encode_message(msg))
        assert type(back) is type(msg)
    detected = np.ones(5, dtype=bool)
    ack = decode_message(encode_message(SiftAck(0, 5, 1, 1, kept, detected)))
    assert ack.kept.tolist() == kept.tolist()
    assert ack.detected.tolist() == detected.tolist()
    assert (ack.raw, ack.dropped, ack.mismatched) == (5, 1, 1)
    tag = decode_message(encode_message(VerifyTag(seed=np.ones(12, dtype=np.uint8), tag=np.zeros(4, dtype=np.uint8))))
    assert tag.ok is None and len(tag.seed) == 12 and len(tag.tag) == 4


def test_bad_frames_abort():
    with pytest.raises(ProtocolAbort):
        decode_message(b"\x00\x00")
    with pytest.raises(ProtocolAbort):
        decode_message(encode_frame(0x55, b""))
    with pytest.raises(ProtocolAbort):
        decode_message(encode_frame(0x01, b"\x00"))
    with pytest.raises(ProtocolAbort):
        decode_message(encode_frame(0x31, b"short"))


def test_channel_over_queues():
    a, b = QueueTransport.pair(timeout=1.0)
    alice, bob = Channel(a, "alice"), Channel(b, "bob")
    alice.send(ShuffleSeed(1, 0, 42))
    assert bob.expect(ShuffleSeed).seed == 42
    alice.send(FinalKeyDigest(bytes(32)))
    with pytest.raises(ProtocolAbort, match="Expected ShuffleSeed"):
        bob.expect(ShuffleSeed)
    bob.abort("giving up")
    with pytest.raises(ProtocolAbort, match="giving up"):
        alice.recv()
    bob.close()
    with pytest.raises(ProtocolAbort, match="closed"):
        alice.recv()
    assert alice.bytes_sent > 0 and bob.bytes_received == alice.bytes_sent


def test_queue_timeout():
    a, _ = QueueTransport.pair(timeout=0.05)
    with pytest.raises(ProtocolAbort, match="No frame"):
        a.recv()


def test_socket_pair_carries_large_frames():
    a, b = SocketTransport.pair(timeout=5.0)
    seed = np.random.default_rng(0).integers(0, 2, 3_000_000, dtype=np.uint8)
    received = {}

    def reader():
        received["msg"] = Channel(b).expect(HashSeed)

    t = threading.Thread(target=reader)
    t.start()
    Channel(a).send(HashSeed(10, seed))
    t.join(timeout=10)
    np.testing.assert_array_equal(received["msg"].seed, seed)
    a.close()
    with pytest.raises(ProtocolAbort):
        b.recv()
    b.close()
