"""Bit-exact wire format for sensor-to-backend streaming.

All integers and floats are little-endian IEEE-754. Two message types ride
inside a self-delimiting envelope:

  envelope  : magic u32 'OMAP' | version u8 | msg_type u8 | payload_len u32
  observation (84 bytes):
      timestamp_us u64 | sensor_id u16 | class_id u16 |
      position 3 x f64 | quaternion wxyz 4 x f64 |
      assoc_dist f32 | ellipsoid axes 3 x f32
  segment (16-byte header + 36 bytes per point):
      timestamp_us u64 | sensor_id u16 | class_id u16 | point_count u32 |
      per point: xyz 3 x f64 | rgb u32 | confidence f32 | semantic_id u32

A 250-point segment body is exactly 9000 bytes. Unknown message types can
be skipped via payload_len (version-tolerant readers).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator

import numpy as np

from .geometry import Pose
from .pose_est import ObjectObservation
from .segmentation import FRAME_WORLD, PointCloudSegment

MAGIC = int.from_bytes(b"OMAP", "little")
VERSION = 1
MSG_OBSERVATION = 1
MSG_SEGMENT = 2

_ENVELOPE = struct.Struct("<IBBI")
_OBSERVATION = struct.Struct("<QHH3d4df3f")
_SEGMENT_HEADER = struct.Struct("<QHHI")
_POINT = struct.Struct("<3dIfI")

OBSERVATION_SIZE = _OBSERVATION.size  # 84
SEGMENT_HEADER_SIZE = _SEGMENT_HEADER.size  # 16
POINT_SIZE = _POINT.size  # 36
MAX_POINT_COUNT = 1 << 24

assert OBSERVATION_SIZE == 84 and SEGMENT_HEADER_SIZE == 16 and POINT_SIZE == 36


class ProtocolError(Exception):
    pass


class BadLength(ProtocolError):
    pass


class BadQuaternion(ProtocolError):
    pass


class CountMismatch(ProtocolError):
    pass


def encode_observation(obs: ObjectObservation) -> bytes:
    return _OBSERVATION.pack(
        obs.timestamp_us,
        obs.sensor_id,
        obs.class_id,
        *obs.pose.t,
        *obs.pose.q,
        obs.assoc_dist,
        *obs.ellipsoid,
    )


def decode_observation(data: bytes) -> ObjectObservation:
    if len(data) != OBSERVATION_SIZE:
        raise BadLength(f"observation payload is {len(data)} bytes, expected {OBSERVATION_SIZE}")
    ts, sensor_id, class_id, tx, ty, tz, qw, qx, qy, qz, assoc, e0, e1, e2 = _OBSERVATION.unpack(
        data
    )
    norm = (qw * qw + qx * qx + qy * qy + qz * qz) ** 0.5
    if abs(norm - 1.0) > 1e-6:
        raise BadQuaternion(f"|q| = {norm}")
    pose = Pose([tx, ty, tz], [qw, qx, qy, qz])
    # keep the validated wire quaternion bit-exact: re-normalization inside
    # Pose can move an already-unit quaternion by an ulp, which would break
    # lossless round-trips
    q = np.array([qw, qx, qy, qz])
    object.__setattr__(pose, "q", q if qw >= 0.0 else -q)
    return ObjectObservation(
        timestamp_us=ts,
        sensor_id=sensor_id,
        class_id=class_id,
        pose=pose,
        assoc_dist=assoc,
        ellipsoid=np.array([e0, e1, e2]),
    )


def encode_segment(seg: PointCloudSegment) -> bytes:
    n = len(seg)
    if n >= MAX_POINT_COUNT:
        raise CountMismatch(f"{n} points exceed the 2^24 limit")
    parts = [_SEGMENT_HEADER.pack(seg.timestamp_us, seg.sensor_id, seg.class_id, n)]
    conf = seg.confidence
    rgb = seg.rgb
    for i in range(n):
        x, y, z = seg.xyz[i]
        parts.append(_POINT.pack(x, y, z, int(rgb[i]), float(conf[i]), seg.class_id))
    return b"".join(parts)


def decode_segment(data: bytes) -> PointCloudSegment:
    if len(data) < SEGMENT_HEADER_SIZE:
        raise BadLength(f"segment payload is {len(data)} bytes, header needs {SEGMENT_HEADER_SIZE}")
    ts, sensor_id, class_id, count = _SEGMENT_HEADER.unpack_from(data)
    body = len(data) - SEGMENT_HEADER_SIZE
    if body != count * POINT_SIZE:
        raise CountMismatch(f"{body} body bytes for {count} points")
    xyz = np.empty((count, 3))
    rgb = np.empty(count, dtype=np.uint32)
    conf = np.empty(count, dtype=np.float32)
    for i, vals in enumerate(_POINT.iter_unpack(data[SEGMENT_HEADER_SIZE:])):
        xyz[i] = vals[:3]
        rgb[i] = vals[3]
        conf[i] = vals[4]
    return PointCloudSegment(
        xyz=xyz,
        class_id=class_id,
        frame=FRAME_WORLD,
        timestamp_us=ts,
        sensor_id=sensor_id,
        rgb=rgb,
        confidence=conf,
    )


# ---------------------------------------------------------------------------
# envelope framing


def write_envelope(stream: BinaryIO, msg_type: int, payload: bytes) -> int:
    """Write one framed message; returns the payload length."""
    stream.write(_ENVELOPE.pack(MAGIC, VERSION, msg_type, len(payload)))
    stream.write(payload)
    return len(payload)


def _read_exact(stream: BinaryIO, n: int) -> bytes | None:
    """Read exactly n bytes; None on clean EOF, BadLength on truncation."""
    data = b""
    while len(data) < n:
        chunk = stream.read(n - len(data))
        if not chunk:
            if not data:
                return None
            raise BadLength(f"stream truncated: got {len(data)} of {n} bytes")
        data += chunk
    return data


def read_envelope(stream: BinaryIO) -> tuple[int, bytes] | None:
    """Read one framed message; returns (msg_type, payload) or None at EOF.

    Raises ProtocolError on bad magic or version.
    """
    header = _read_exact(stream, _ENVELOPE.size)
    if header is None:
        return None
    magic, version, msg_type, length = _ENVELOPE.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:08x}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    payload = _read_exact(stream, length) if length else b""
    if length and payload is None:
        raise BadLength("stream truncated inside payload")
    return msg_type, payload


def iter_messages(stream: BinaryIO, skip_unknown: bool = True) -> Iterator[tuple[int, bytes]]:
    """Yield (msg_type, payload) until EOF, optionally skipping unknown
    message types (forward compatibility)."""
    while True:
        msg = read_envelope(stream)
        if msg is None:
            return
        msg_type, payload = msg
        if msg_type not in (MSG_OBSERVATION, MSG_SEGMENT) and skip_unknown:
            continue
        yield msg_type, payload


@dataclass
class SessionLogEntry:
    """Backend-side accounting record, one per received message."""

    timestamp_us: int
    sensor_id: int
    msg_type: int
    payload_len: int


class SensorSession:
    """Sensor-side writer: frames observations (and optionally their
    segments) onto a reliable byte stream in timestamp order."""

    def __init__(self, stream: BinaryIO, with_segments: bool = False):
        self.stream = stream
        self.with_segments = with_segments
        self.bytes_sent = 0

    def send(self, obs: ObjectObservation) -> None:
        self.bytes_sent += write_envelope(self.stream, MSG_OBSERVATION, encode_observation(obs))
        if self.with_segments and obs.segment is not None:
            self.bytes_sent += write_envelope(self.stream, MSG_SEGMENT, encode_segment(obs.segment))

    def close(self) -> None:
        self.stream.flush()
        self.stream.close()


def read_session(stream: BinaryIO) -> tuple[list[ObjectObservation], list[SessionLogEntry]]:
    """Backend-side reader: demultiplex one sensor stream.

    Segments are paired with their observation by (timestamp, sensor_id)
    and arrival order: each segment attaches to the latest observation with
    matching keys that has no segment yet.
    """
    observations: list[ObjectObservation] = []
    log: list[SessionLogEntry] = []
    for msg_type, payload in iter_messages(stream):
        if msg_type == MSG_OBSERVATION:
            obs = decode_observation(payload)
            observations.append(obs)
            log.append(SessionLogEntry(obs.timestamp_us, obs.sensor_id, msg_type, len(payload)))
        else:
            seg = decode_segment(payload)
            log.append(SessionLogEntry(seg.timestamp_us, seg.sensor_id, msg_type, len(payload)))
            for i, obs in enumerate(observations):
                if (
                    obs.timestamp_us == seg.timestamp_us
                    and obs.sensor_id == seg.sensor_id
                    and obs.class_id == seg.class_id
                    and obs.segment is None
                ):
                    observations[i] = ObjectObservation(
                        timestamp_us=obs.timestamp_us,
                        sensor_id=obs.sensor_id,
                        class_id=obs.class_id,
                        pose=obs.pose,
                        assoc_dist=obs.assoc_dist,
                        ellipsoid=obs.ellipsoid,
                        segment=seg,
                    )
                    break
    return observations, log
