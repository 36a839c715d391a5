"""Packet stream decoding: PSB segmentation and concurrent per-segment decoding."""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .isa import TirError
from .tracer import FUP_H, PGD_H, PGE_H, PSB, PTW_H, TIP_H, TNT_H

PTS_MAGIC = b"HTPTS\x01"
EVT_MAGIC = b"HTEVT\x01"

K_BLOCK, K_REG, K_BRANCH, K_TIP = 0, 1, 2, 3
KIND_NAMES = ("block", "reg", "branch", "tip")
EXT_FIRST = 0xD0  # headers from here up carry a length byte and are skipped

_ERRORS = {1: "truncated packet", 2: "PTW without preceding FUP", 3: "unknown packet header",
           4: "segment does not start with PSB", 5: "bad TNT bit count"}
PSB_LEN = len(PSB)
_PSB_ARR = np.frombuffer(PSB, dtype=np.uint8).copy()


class DecodeError(TirError):
    def __init__(self, message: str, offset: int, segment: int | None = None):
        self.offset = offset
        self.segment = segment
        where = f" (segment {segment})" if segment is not None else ""
        super().__init__(f"{message} at byte {offset}{where}")


@dataclass(frozen=True)
class Segment:
    start: int
    end: int
    ordinal: int


@dataclass(frozen=True)
class TraceEvent:
    index: int
    kind: str  # block | reg | branch | tip
    site: int  # record site, branch bit or return target
    value: int = 0
    segment: int = 0

    def as_tuple(self) -> tuple:
        if self.kind == "reg":
            return ("reg", self.site, self.value)
        return (self.kind, self.site)


# ---------------------------------------------------------------------------
# kernels


@njit(nogil=True, cache=True)
def _find_psb(buf, lo, hi, out, fill):
    """PSB positions of the 0x02 0x82 pair runs starting in [lo, hi).

    A run of m pairs holds m // 8 PSBs aligned to its end; the leading m % 8 pairs
    are the tail of a preceding payload. Returns the count (positions written if fill)."""
    n = buf.shape[0]
    k = 0
    p = lo
    while p < hi:
        if buf[p] == 0x02 and p + 1 < n and buf[p + 1] == 0x82 and \
                not (p >= 2 and buf[p - 2] == 0x02 and buf[p - 1] == 0x82):
            m = 0
            q = p
            while q + 1 < n and buf[q] == 0x02 and buf[q + 1] == 0x82:
                m += 1
                q += 2
            first = p + 2 * (m % 8)
            for t in range(m // 8):
                if fill:
                    out[k] = first + 16 * t
                k += 1
            p = q
            continue
        p += 1
    return k


@njit(nogil=True, cache=True)
def _u32(buf, p):
    return np.int64(buf[p]) | (np.int64(buf[p + 1]) << 8) | (np.int64(buf[p + 2]) << 16) | (np.int64(buf[p + 3]) << 24)


@njit(nogil=True, cache=True)
def _u64(buf, p):
    v = np.uint64(0)
    for j in range(8):
        v |= np.uint64(buf[p + j]) << np.uint64(8 * j)
    return v


@njit(nogil=True, cache=True)
def _decode_many(buf, starts, ends, ords, fill, offsets, kinds, sites, values, segout, counts, err):
    """Decode each [starts[j], ends[j]); with fill=False only count events per segment."""
    for j in range(starts.shape[0]):
        p = starts[j]
        end = ends[j]
        k = offsets[j] if fill else 0
        c = 0
        for q in range(16):
            if p + q >= end or buf[p + q] != (0x02 if q % 2 == 0 else 0x82):
                err[0] = 4
                err[1] = p
                err[2] = j
                return
        p += 16
        while p < end:
            h = buf[p]
            if h == 0x02:
                if p + 16 > end:
                    err[0] = 1
                    err[1] = p
                    err[2] = j
                    return
                p += 16
            elif h == PGE_H:
                if p + 5 > end:
                    err[0] = 1
                    err[1] = p
                    err[2] = j
                    return
                p += 5
            elif h == PGD_H:
                p += 1
            elif (h & 0xF8) == TNT_H:
                nb = h & 0x07
                if nb < 1 or nb > 6:
                    err[0] = 5
                    err[1] = p
                    err[2] = j
                    return
                if p + 2 > end:
                    err[0] = 1
                    err[1] = p
                    err[2] = j
                    return
                bits = buf[p + 1]
                for b in range(nb):
                    if fill:
                        kinds[k] = 2
                        sites[k] = (bits >> b) & 1
                        values[k] = 0
                        segout[k] = ords[j]
                        k += 1
                    c += 1
                p += 2
            elif h == TIP_H:
                if p + 5 > end:
                    err[0] = 1
                    err[1] = p
                    err[2] = j
                    return
                if fill:
                    kinds[k] = 3
                    sites[k] = _u32(buf, p + 1)
                    values[k] = 0
                    segout[k] = ords[j]
                    k += 1
                c += 1
                p += 5
            elif h == FUP_H:
                if p + 5 > end:
                    err[0] = 1
                    err[1] = p
                    err[2] = j
                    return
                site = _u32(buf, p + 1)
                if p + 5 < end and buf[p + 5] == PTW_H:
                    if p + 14 > end:
                        err[0] = 1
                        err[1] = p + 5
                        err[2] = j
                        return
                    if fill:
                        kinds[k] = 1
                        sites[k] = site
                        values[k] = _u64(buf, p + 6)
                        segout[k] = ords[j]
                        k += 1
                    p += 14
                else:
                    if fill:
                        kinds[k] = 0
                        sites[k] = site
                        values[k] = 0
                        segout[k] = ords[j]
                        k += 1
                    p += 5
                c += 1
            elif h == PTW_H:
                err[0] = 2
                err[1] = p
                err[2] = j
                return
            elif h >= EXT_FIRST:
                if p + 2 > end or p + 2 + buf[p + 1] > end:
                    err[0] = 1
                    err[1] = p
                    err[2] = j
                    return
                p += 2 + buf[p + 1]
            else:
                err[0] = 3
                err[1] = p
                err[2] = j
                return
        counts[j] = c


# ---------------------------------------------------------------------------
# event batches


@dataclass
class EventBatch:
    """Columnar event list: kind, site (or bit / target) and value per event."""
    kind: np.ndarray
    site: np.ndarray
    value: np.ndarray
    segment: np.ndarray | None = None

    @staticmethod
    def empty() -> "EventBatch":
        return EventBatch(np.zeros(0, np.uint8), np.zeros(0, np.int64), np.zeros(0, np.uint64),
                          np.zeros(0, np.int64))

    def __len__(self) -> int:
        return int(self.kind.shape[0])

    def events(self) -> list[TraceEvent]:
        seg = self.segment if self.segment is not None else np.zeros(len(self), np.int64)
        return [TraceEvent(i, KIND_NAMES[k], int(s), int(v), int(g))
                for i, (k, s, v, g) in enumerate(zip(self.kind.tolist(), self.site.tolist(),
                                                     self.value.tolist(), seg.tolist()))]

    def tuples(self) -> list[tuple]:
        out = []
        for k, s, v in zip(self.kind.tolist(), self.site.tolist(), self.value.tolist()):
            out.append(("reg", s, v) if k == K_REG else (KIND_NAMES[k], s))
        return out

    def canonical(self) -> bytes:
        """Serialization without segment ids, for equality across worker counts."""
        return self.kind.tobytes() + self.site.tobytes() + self.value.tobytes()

    def dumps(self) -> bytes:
        return EVT_MAGIC + struct.pack("<Q", len(self)) + self.canonical()

    @staticmethod
    def loads(data: bytes) -> "EventBatch":
        if not data.startswith(EVT_MAGIC):
            raise TirError("not an event file")
        n = struct.unpack_from("<Q", data, len(EVT_MAGIC))[0]
        p = len(EVT_MAGIC) + 8
        if len(data) != p + 17 * n:
            raise TirError("event file truncated")
        kind = np.frombuffer(data, np.uint8, n, p).copy()
        site = np.frombuffer(data, np.int64, n, p + n).copy()
        value = np.frombuffer(data, np.uint64, n, p + 9 * n).copy()
        return EventBatch(kind, site, value)

    @staticmethod
    def concat(parts: list["EventBatch"]) -> "EventBatch":
        if not parts:
            return EventBatch.empty()
        seg = None
        if all(p.segment is not None for p in parts):
            seg = np.concatenate([p.segment for p in parts])
        return EventBatch(np.concatenate([p.kind for p in parts]), np.concatenate([p.site for p in parts]),
                          np.concatenate([p.value for p in parts]), seg)


# ---------------------------------------------------------------------------
# segmentation and decoding


def _as_array(stream) -> np.ndarray:
    if isinstance(stream, np.ndarray):
        return stream
    return np.frombuffer(stream, dtype=np.uint8)


def psb_positions(buf: np.ndarray, workers: int = 1) -> np.ndarray:
    n = buf.shape[0]
    if n == 0:
        return np.zeros(0, np.int64)
    workers = max(1, min(workers, n // 65536 or 1))
    bounds = [n * w // workers for w in range(workers + 1)]

    def scan(w: int) -> np.ndarray:
        lo, hi = bounds[w], bounds[w + 1]
        empty = np.empty(0, np.int64)
        out = np.empty(_find_psb(buf, lo, hi, empty, False), np.int64)
        _find_psb(buf, lo, hi, out, True)
        return out

    if workers == 1:
        return scan(0)
    with ThreadPoolExecutor(workers) as ex:
        parts = list(ex.map(scan, range(workers)))
    return np.concatenate(parts)


def split_segments(stream, workers: int = 1) -> list[Segment]:
    buf = _as_array(stream)
    n = buf.shape[0]
    if n == 0:
        return []
    pos = psb_positions(buf, workers)
    if pos.shape[0] == 0 or pos[0] != 0:
        raise DecodeError("stream does not start with PSB", 0)
    ends = np.append(pos[1:], n)
    return [Segment(int(a), int(b), k) for k, (a, b) in enumerate(zip(pos.tolist(), ends.tolist()))]


def _groups(starts: np.ndarray, ends: np.ndarray, workers: int) -> list[tuple[int, int]]:
    """Contiguous runs of segments holding about equal byte counts."""
    m = starts.shape[0]
    sizes = np.cumsum(ends - starts)
    total = int(sizes[-1])
    cuts = np.searchsorted(sizes, [total * w // workers for w in range(1, workers)], side="right")
    edges = sorted(set([0, m] + [int(c) for c in cuts if 0 < c < m]))
    return list(zip(edges[:-1], edges[1:]))


def decode_segment(stream, seg: Segment, tmap=None) -> list[TraceEvent]:
    buf = _as_array(stream)
    batch = _decode_segments(buf, [seg], 1)
    if tmap is not None:
        validate_events(batch, tmap)
    return batch.events()


def _decode_segments(buf: np.ndarray, segs: list[Segment], workers: int) -> EventBatch:
    m = len(segs)
    if m == 0:
        return EventBatch.empty()
    starts = np.fromiter((s.start for s in segs), np.int64, m)
    ends = np.fromiter((s.end for s in segs), np.int64, m)
    ords = np.fromiter((s.ordinal for s in segs), np.int64, m)
    groups = _groups(starts, ends, max(1, min(workers, m)))
    counts = np.zeros(m, np.int64)
    errs = [np.zeros(3, np.int64) for _ in groups]
    none8, nonei, noneu = np.zeros(0, np.uint8), np.zeros(0, np.int64), np.zeros(0, np.uint64)

    def count(g: int) -> None:
        lo, hi = groups[g]
        _decode_many(buf, starts[lo:hi], ends[lo:hi], ords[lo:hi], False, counts[lo:hi],
                     none8, nonei, noneu, nonei, counts[lo:hi], errs[g])

    def each(fn) -> None:
        if len(groups) == 1:
            fn(0)
        else:
            with ThreadPoolExecutor(len(groups)) as ex:
                list(ex.map(fn, range(len(groups))))

    each(count)
    for (lo, _), err in zip(groups, errs):  # the earliest segment's error wins
        if err[0]:
            raise DecodeError(_ERRORS[int(err[0])], int(err[1]), int(ords[lo + err[2]]))
    offsets = np.zeros(m, np.int64)
    offsets[1:] = np.cumsum(counts)[:-1]
    total = int(counts.sum())
    kinds = np.empty(total, np.uint8)
    sites = np.empty(total, np.int64)
    values = np.empty(total, np.uint64)
    segout = np.empty(total, np.int64)

    def fill(g: int) -> None:
        # every group writes its own disjoint slice of the shared output
        lo, hi = groups[g]
        _decode_many(buf, starts[lo:hi], ends[lo:hi], ords[lo:hi], True, offsets[lo:hi],
                     kinds, sites, values, segout, counts[lo:hi].copy(), errs[g])

    each(fill)
    return EventBatch(kinds, sites, values, segout)


def decode(stream, tmap=None) -> EventBatch:
    """Sequential whole-stream decode."""
    return decode_parallel(stream, tmap, workers=1)


def decode_parallel(stream, tmap=None, workers: int = 4) -> EventBatch:
    if workers < 1:
        raise ValueError("workers must be >= 1")
    buf = _as_array(stream)
    segs = split_segments(buf, workers)
    batch = _decode_segments(buf, segs, workers)
    if tmap is not None:
        validate_events(batch, tmap)
    return batch


def validate_events(batch: EventBatch, tmap) -> None:
    """Check record events against the trace point map (site range and kind)."""
    n = len(tmap.sites)
    rec = (batch.kind == K_BLOCK) | (batch.kind == K_REG)
    sites = batch.site[rec]
    if sites.shape[0] and (sites.min() < 0 or sites.max() >= n):
        bad = int(sites[(sites < 0) | (sites >= n)][0])
        raise TirError(f"record site {bad} not in trace point map")
    is_reg = np.array([s.kind == "reg" for s in tmap.sites], dtype=bool)
    if sites.shape[0]:
        want = is_reg[sites]
        got = batch.kind[rec] == K_REG
        if not np.array_equal(want, got):
            k = int(np.nonzero(want != got)[0][0])
            raise TirError(f"record site {int(sites[k])} has the wrong packet shape")


def _open_run(arr: np.ndarray) -> int:
    """Start of the trailing bytes that could still extend a 0x02 0x82 run."""
    k = arr.shape[0]
    while k > 0 and arr[k - 1] in (0x02, 0x82):
        if k < arr.shape[0] and arr[k - 1] == arr[k]:
            break
        k -= 1
    return k


class StreamDecoder:
    """Incremental decoder: feed byte chunks, receive events of completed segments."""

    def __init__(self):
        self.buf = bytearray()
        self.base = 0  # absolute offset of buf[0]
        self.ordinal = 0
        self.started = False

    def _cut(self, final: bool) -> EventBatch:
        arr = np.frombuffer(bytes(self.buf), dtype=np.uint8)
        if not self.started:
            if arr.shape[0] < PSB_LEN + 1 and not final:
                return EventBatch.empty()
            if arr.shape[0] == 0:
                return EventBatch.empty()
            if arr.shape[0] < PSB_LEN or bytes(arr[:PSB_LEN]) != PSB:
                raise DecodeError("stream does not start with PSB", self.base)
            self.started = True
        pos = psb_positions(arr)
        if final:
            cut = arr.shape[0]
        else:
            # a PSB is only certain once its run of 0x02 0x82 pairs has ended
            pos = pos[pos < _open_run(arr)]
            if pos.shape[0] < 2:
                return EventBatch.empty()
            cut = int(pos[-1])
        pos = pos[pos < cut]
        if pos.shape[0] == 0:
            return EventBatch.empty()
        ends = np.append(pos[1:], cut)
        segs = [Segment(int(a), int(b), self.ordinal + k) for k, (a, b) in enumerate(zip(pos.tolist(), ends.tolist()))]
        try:
            batch = _decode_segments(arr, segs, 1)
        except DecodeError as e:
            raise DecodeError(str(e).split(" at byte")[0], e.offset + self.base, e.segment) from None
        self.ordinal += len(segs)
        del self.buf[:cut]
        self.base += cut
        return batch

    def feed(self, chunk: bytes) -> EventBatch:
        self.buf += chunk
        return self._cut(False)

    def close(self) -> EventBatch:
        return self._cut(True)


def write_pts(path, stream: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(PTS_MAGIC)
        fh.write(stream)


def read_pts(path) -> bytes:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(PTS_MAGIC):
        raise TirError(f"{path}: not a packet stream file")
    return data[len(PTS_MAGIC):]
