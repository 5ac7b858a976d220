"""Context-mix / target-stem training pairs built from multi-stem songs."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from ._io import atomic_write_bytes
from .toyworld import (
    FrameSeq,
    Song,
    ToyCodec,
    encode,
    is_silent,
    mix,
    render_song,
)

log = logging.getLogger(__name__)

PAIR_MAGIC = b"STGP"
PAIR_VERSION = 1
_PAIR_HEADER = struct.Struct("<4sHHHHHH")

DEFAULT_CROP = 32
MAX_RETRIES = 8


@dataclass
class TrainingPair:
    context: np.ndarray  # (Q, T) tokens of the context-mix
    target: np.ndarray  # (Q, T) tokens of the target stem
    instrument_category: int
    song_id: int
    context_subset: tuple[int, ...]
    target_index: int
    start: int = 0
    context_frames: FrameSeq | None = None
    target_frames: FrameSeq | None = None


def enumerate_pairs(M: int) -> list[tuple[tuple[int, ...], int]]:
    """All (context subset, target index) combinations for a song with M stems."""
    out = []
    for size in range(1, M):
        for subset in combinations(range(M), size):
            out.extend((subset, t) for t in range(M) if t not in subset)
    return out


def pair_count(M: int) -> int:
    """Closed form M/2 * (2^M - 2)."""
    return M * (2**M - 2) // 2


def sample_assignment(M: int, rng: np.random.Generator) -> tuple[tuple[int, ...], int]:
    """Draw a subset size uniformly in [1, M-1], a subset of that size, then a target outside it."""
    if M < 2:
        raise ValueError(f"need at least 2 stems, got {M}")
    size = int(rng.integers(1, M))
    subset = tuple(sorted(int(i) for i in rng.choice(M, size=size, replace=False)))
    rest = [i for i in range(M) if i not in subset]
    return subset, int(rest[rng.integers(len(rest))])


def assignment_probability(M: int, subset: tuple[int, ...], target: int) -> float:
    """Probability of one (subset, target) under :func:`sample_assignment`."""
    size = len(subset)
    return 1.0 / (M - 1) / comb(M, size) / (M - size)


def crop_window(n_frames: int, length: int, rng: np.random.Generator) -> int:
    if length > n_frames:
        raise ValueError(f"cannot crop {length} frames from a {n_frames}-frame sequence")
    return int(rng.integers(0, n_frames - length + 1))


def crop(x: FrameSeq, length: int, rng: np.random.Generator | None = None,
         start: int | None = None) -> FrameSeq:
    """Contiguous window of ``length`` frames; the start is drawn from ``rng`` unless given."""
    if length > x.T:
        raise ValueError(f"cannot crop {length} frames from a {x.T}-frame sequence")
    if start is None:
        if rng is None:
            raise ValueError("crop needs either rng or start")
        start = crop_window(x.T, length, rng)
    return FrameSeq(x.frames[start:start + length].copy(), x.frame_rate)


def build_pair(song: Song, codec: ToyCodec, rng: np.random.Generator,
               crop_frames: int = DEFAULT_CROP, song_id: int = 0,
               rendered: list[FrameSeq] | None = None) -> TrainingPair | None:
    """One random pair from ``song``; returns None when either channel is silent."""
    M = len(song.stems)
    if M < 2:
        raise ValueError(f"song has {M} stems, need at least 2")
    stems = rendered if rendered is not None else render_song(song, codec.frame_rate)
    subset, target = sample_assignment(M, rng)
    start = crop_window(stems[0].T, crop_frames, rng)
    ctx = mix([crop(stems[i], crop_frames, start=start) for i in subset])
    tgt = crop(stems[target], crop_frames, start=start)
    if is_silent(ctx) or is_silent(tgt):
        return None
    return TrainingPair(
        context=encode(codec, ctx),
        target=encode(codec, tgt),
        instrument_category=song.stems[target].instrument_category,
        song_id=song_id,
        context_subset=subset,
        target_index=target,
        start=start,
        context_frames=ctx,
        target_frames=tgt,
    )


def build_pair_with_retries(song, codec, rng, crop_frames=DEFAULT_CROP, song_id=0,
                            max_retries=MAX_RETRIES, rendered=None) -> TrainingPair | None:
    stems = rendered if rendered is not None else render_song(song, codec.frame_rate)
    for _ in range(max_retries):
        pair = build_pair(song, codec, rng, crop_frames, song_id, rendered=stems)
        if pair is not None:
            return pair
    return None


def song_rng(seed: int, song_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(song_id,)))


def build_dataset(songs: list[Song], codec: ToyCodec, seed: int, pairs_per_song: int = 4,
                  crop_frames: int = DEFAULT_CROP,
                  max_retries: int = MAX_RETRIES) -> tuple[list[TrainingPair], int]:
    """Pairs from every song, each song on its own derived stream.

    Returns the pairs and the number of draws that were abandoned after
    ``max_retries`` silent resamples.
    """
    pairs, skipped = [], 0
    for sid, song in enumerate(songs):
        rng = song_rng(seed, sid)
        stems = render_song(song, codec.frame_rate)
        for _ in range(pairs_per_song):
            p = build_pair_with_retries(song, codec, rng, crop_frames, sid, max_retries, stems)
            if p is None:
                skipped += 1
            else:
                pairs.append(p)
    if skipped:
        log.info("skipped %d pair draws after repeated silence", skipped)
    return pairs, skipped


@dataclass
class PairData:
    """Columnar view of a pair dataset, as stored on disk."""

    context: np.ndarray  # (N, Q, T)
    target: np.ndarray  # (N, Q, T)
    category: np.ndarray  # (N,)
    song_id: np.ndarray  # (N,)
    K: int
    C: int

    def __len__(self) -> int:
        return len(self.category)

    @property
    def Q(self) -> int:
        return self.context.shape[1]

    @property
    def T(self) -> int:
        return self.context.shape[2]

    @classmethod
    def from_pairs(cls, pairs: list[TrainingPair], K: int, C: int) -> "PairData":
        if not pairs:
            raise ValueError("no pairs")
        return cls(
            np.stack([p.context for p in pairs]),
            np.stack([p.target for p in pairs]),
            np.array([p.instrument_category for p in pairs], dtype=np.int64),
            np.array([p.song_id for p in pairs], dtype=np.int64),
            K, C,
        )

    def subset(self, idx) -> "PairData":
        return PairData(self.context[idx], self.target[idx], self.category[idx],
                        self.song_id[idx], self.K, self.C)


def pack_pairs(data: PairData) -> bytes:
    N, Q, T = data.context.shape
    rec = np.zeros(N, dtype=[("context", "<u2", (Q, T)), ("target", "<u2", (Q, T)),
                             ("category", "<u2"), ("song_id", "<u4")])
    rec["context"] = data.context
    rec["target"] = data.target
    rec["category"] = data.category
    rec["song_id"] = data.song_id
    return _PAIR_HEADER.pack(PAIR_MAGIC, PAIR_VERSION, Q, T, data.K, data.C, 0) + rec.tobytes()


def unpack_pairs(buf: bytes) -> PairData:
    magic, version, Q, T, K, C, _ = _PAIR_HEADER.unpack_from(buf)
    if magic != PAIR_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != PAIR_VERSION:
        raise ValueError(f"unsupported pair file version {version}")
    dt = np.dtype([("context", "<u2", (Q, T)), ("target", "<u2", (Q, T)),
                   ("category", "<u2"), ("song_id", "<u4")])
    body = buf[_PAIR_HEADER.size:]
    if len(body) % dt.itemsize:
        raise ValueError("truncated pair file")
    rec = np.frombuffer(body, dtype=dt)
    return PairData(rec["context"].astype(np.int64), rec["target"].astype(np.int64),
                    rec["category"].astype(np.int64), rec["song_id"].astype(np.int64), K, C)


def write_pairs(path, data: PairData) -> None:
    atomic_write_bytes(path, pack_pairs(data))


def read_pairs(path) -> PairData:
    with open(path, "rb") as fh:
        return unpack_pairs(fh.read())
