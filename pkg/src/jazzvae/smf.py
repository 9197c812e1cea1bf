"""Reader for the subset of Standard MIDI Files the ingestion path needs.

Only note-on/note-off, tempo and time-signature events are interpreted; every
other event is parsed far enough to be skipped.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path


class SMFError(ValueError):
    """Raised for files that are not readable Standard MIDI Files."""


@dataclass(frozen=True)
class MidiNote:
    pitch: int
    channel: int
    on_tick: int
    off_tick: int


@dataclass
class MidiTrack:
    notes: list[MidiNote] = field(default_factory=list)
    time_signatures: list[tuple[int, int, int]] = field(default_factory=list)  # (tick, num, den)
    tempos: list[tuple[int, int]] = field(default_factory=list)  # (tick, us per quarter)


@dataclass
class MidiFile:
    format: int
    ticks_per_quarter: int
    tracks: list[MidiTrack]

    def time_signatures(self) -> list[tuple[int, int, int]]:
        """All time-signature events across tracks, ordered by tick."""
        events = [ts for track in self.tracks for ts in track.time_signatures]
        return sorted(events, key=lambda e: e[0])


def _read_varlen(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= len(data):
            raise SMFError(f"truncated variable-length quantity at byte {pos}")
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise SMFError(f"variable-length quantity longer than 4 bytes at byte {pos}")


def _parse_track(data: bytes, offset: int) -> MidiTrack:
    track = MidiTrack()
    open_notes: dict[tuple[int, int], list[int]] = {}
    pos = 0
    tick = 0
    status = None

    def close(channel: int, pitch: int, at: int) -> None:
        stack = open_notes.get((channel, pitch))
        if stack:
            on = stack.pop(0)
            track.notes.append(MidiNote(pitch, channel, on, at))

    while pos < len(data):
        delta, pos = _read_varlen(data, pos)
        tick += delta
        if pos >= len(data):
            raise SMFError(f"truncated event at byte {offset + pos}")
        byte = data[pos]
        if byte & 0x80:
            status = byte
            pos += 1
        elif status is None or status >= 0xF0:
            raise SMFError(f"running status without a prior channel event at byte {offset + pos}")

        if status == 0xFF:
            if pos >= len(data):
                raise SMFError(f"truncated meta event at byte {offset + pos}")
            meta_type = data[pos]
            length, pos = _read_varlen(data, pos + 1)
            payload = data[pos:pos + length]
            if len(payload) != length:
                raise SMFError(f"truncated meta event at byte {offset + pos}")
            pos += length
            if meta_type == 0x2F:
                break
            if meta_type == 0x51 and length == 3:
                track.tempos.append((tick, int.from_bytes(payload, "big")))
            elif meta_type == 0x58 and length >= 2:
                track.time_signatures.append((tick, payload[0], 2 ** payload[1]))
            status = None
            continue
        if status in (0xF0, 0xF7):
            length, pos = _read_varlen(data, pos)
            pos += length
            status = None
            continue

        kind = status & 0xF0
        channel = status & 0x0F
        n_data = 1 if kind in (0xC0, 0xD0) else 2
        if pos + n_data > len(data):
            raise SMFError(f"truncated channel event at byte {offset + pos}")
        args = data[pos:pos + n_data]
        pos += n_data
        if kind == 0x90 and args[1] > 0:
            open_notes.setdefault((channel, args[0]), []).append(tick)
        elif kind == 0x80 or (kind == 0x90 and args[1] == 0):
            close(channel, args[0], tick)

    # notes never switched off end at the last event
    for (channel, pitch), stack in open_notes.items():
        for on in stack:
            track.notes.append(MidiNote(pitch, channel, on, tick))
    track.notes.sort(key=lambda n: (n.on_tick, n.pitch))
    return track


def read_smf(path: str | Path) -> MidiFile:
    data = Path(path).read_bytes()
    if len(data) < 14 or data[:4] != b"MThd":
        raise SMFError("not a Standard MIDI File (missing MThd header)")
    header_len = struct.unpack(">I", data[4:8])[0]
    fmt, n_tracks, division = struct.unpack(">HHH", data[8:14])
    if fmt == 2:
        raise SMFError("unsupported SMF format 2")
    if fmt not in (0, 1):
        raise SMFError(f"unknown SMF format {fmt}")
    if division & 0x8000:
        raise SMFError("SMPTE time division is not supported")
    pos = 8 + header_len
    tracks = []
    while pos + 8 <= len(data) and len(tracks) < n_tracks:
        chunk_id = data[pos:pos + 4]
        length = struct.unpack(">I", data[pos + 4:pos + 8])[0]
        body = data[pos + 8:pos + 8 + length]
        if chunk_id == b"MTrk":
            tracks.append(_parse_track(body, pos + 8))
        pos += 8 + length
    return MidiFile(fmt, division, tracks)


def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def build_smf(
    notes: list[tuple[int, int, int]],
    ticks_per_quarter: int = 480,
    time_signature: tuple[int, int] | None = (4, 4),
    fmt: int = 0,
) -> bytes:
    """Assemble a single-track SMF from (pitch, on_tick, off_tick) triples.

    Used to produce fixtures; running status is applied to consecutive
    events with the same status byte.
    """
    events: list[tuple[int, int, bytes]] = []  # (tick, order, raw)
    if time_signature is not None:
        num, den = time_signature
        events.append((0, 0, b"\xff\x58\x04" + bytes([num, den.bit_length() - 1, 24, 8])))
    events.append((0, 0, b"\xff\x51\x03" + (500000).to_bytes(3, "big")))
    for pitch, on, off in notes:
        events.append((off, 1, bytes([0x80, pitch, 0])))
        events.append((on, 2, bytes([0x90, pitch, 100])))
    events.sort(key=lambda e: (e[0], e[1]))
    body = bytearray()
    tick = 0
    last_status = None
    for at, _, raw in events:
        body += _varlen(at - tick)
        tick = at
        if raw[0] < 0xF0 and raw[0] == last_status:
            body += raw[1:]
        else:
            body += raw
            last_status = raw[0] if raw[0] < 0xF0 else None
    body += b"\x00\xff\x2f\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, fmt, 1, ticks_per_quarter)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)
