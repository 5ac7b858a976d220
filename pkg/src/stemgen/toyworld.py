"""Procedural multi-stem songs, chroma frame rendering and a toy residual vector quantizer.

The toy world stands in for real multi-track audio and a neural codec:

* :func:`gen_song` writes a short piece as a handful of symbolic stems
  (melody, chords, bass, percussion) sharing key, metre and a chord progression.
* :func:`render` turns a stem into a :class:`FrameSeq`, a ``T x 13`` matrix of
  12 pitch-class chroma energies plus one broadband amplitude channel.
* :func:`fit_codec` / :func:`encode` / :func:`decode` implement a k-means residual
  vector quantizer producing ``Q x T`` token grids.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text

MASK = -1
N_CHROMA = 12
FRAME_DIM = N_CHROMA + 1
EPS_SILENCE = 1e-6

MELODY, CHORDS, BASS, PERCUSSION = 0, 1, 2, 3
CATEGORY_NAMES = ("melody", "chords", "bass", "percussion")
N_ROLES = len(CATEGORY_NAMES)

MAJOR_SCALE = (0, 2, 4, 5, 7, 9, 11)
MINOR_SCALE = (0, 2, 3, 5, 7, 8, 10)
TRIAD_INTERVALS = {"maj": (0, 4, 7), "min": (0, 3, 7), "dim": (0, 3, 6)}

# relative weights of scale degrees I..vii when drawing the next bar's chord
_DEGREE_WEIGHTS = np.array([3.0, 1.0, 1.0, 3.0, 3.0, 2.0, 0.5])

GRID_MAGIC = b"STGT"
GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<4sHHHHI")


class ConfigError(ValueError):
    """Invalid generator, codec or run configuration."""


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: float
    duration: float
    velocity: float


@dataclass
class Stem:
    instrument_category: int
    events: list[NoteEvent] = field(default_factory=list)


@dataclass
class Song:
    stems: list[Stem]
    key: int
    mode: str
    tempo: float
    beats_per_bar: int
    chord_progression: list[tuple[int, str]]
    seed: int

    @property
    def n_bars(self) -> int:
        return len(self.chord_progression)

    @property
    def n_beats(self) -> int:
        return self.n_bars * self.beats_per_bar

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chord_progression"] = [list(c) for c in self.chord_progression]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Song":
        stems = [
            Stem(s["instrument_category"], [NoteEvent(**e) for e in s["events"]])
            for s in d["stems"]
        ]
        return cls(
            stems=stems,
            key=int(d["key"]),
            mode=d["mode"],
            tempo=float(d["tempo"]),
            beats_per_bar=int(d["beats_per_bar"]),
            chord_progression=[(int(r), str(q)) for r, q in d["chord_progression"]],
            seed=int(d["seed"]),
        )


@dataclass
class GenConfig:
    n_stems: int = 4
    n_bars: int = 4
    n_categories: int = 4
    n_frames: int = 64
    frame_rate: float = 10.0
    beats_per_bar_choices: list[int] = field(default_factory=lambda: [3, 4])
    modes: list[str] = field(default_factory=lambda: ["major", "minor"])
    bar_dropout: float = 0.1
    chromatic_prob: float = 0.05

    def validate(self) -> None:
        if self.n_stems < 2:
            raise ConfigError(f"need at least 2 stems per song, got {self.n_stems}")
        if self.n_bars < 1:
            raise ConfigError("n_bars must be positive")
        if self.n_categories < N_ROLES:
            raise ConfigError(f"n_categories must be >= {N_ROLES}")
        if self.n_frames < 1 or self.frame_rate <= 0:
            raise ConfigError("n_frames and frame_rate must be positive")
        if not self.beats_per_bar_choices or any(b not in (3, 4) for b in self.beats_per_bar_choices):
            raise ConfigError("beats_per_bar_choices must be a non-empty subset of {3, 4}")
        if not self.modes or any(m not in ("major", "minor") for m in self.modes):
            raise ConfigError("modes must be a non-empty subset of {'major', 'minor'}")
        if not 0.0 <= self.bar_dropout < 1.0 or not 0.0 <= self.chromatic_prob <= 0.2:
            raise ConfigError("bar_dropout must be in [0, 1) and chromatic_prob in [0, 0.2]")


@dataclass
class FrameSeq:
    frames: np.ndarray
    frame_rate: float = 10.0

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def amplitude(self) -> np.ndarray:
        return self.frames[:, N_CHROMA]

    @property
    def chroma(self) -> np.ndarray:
        return self.frames[:, :N_CHROMA]

    @classmethod
    def zeros(cls, n_frames: int, frame_rate: float = 10.0) -> "FrameSeq":
        return cls(np.zeros((n_frames, FRAME_DIM)), frame_rate)


@dataclass
class ToyCodec:
    codebooks: np.ndarray  # (Q, K, D)
    frame_rate: float = 10.0

    @property
    def Q(self) -> int:
        return self.codebooks.shape[0]

    @property
    def K(self) -> int:
        return self.codebooks.shape[1]

    @property
    def D(self) -> int:
        return self.codebooks.shape[2]

    def to_json(self) -> str:
        return json.dumps(
            {"Q": self.Q, "K": self.K, "D": self.D, "frame_rate": self.frame_rate,
             "codebooks": self.codebooks.tolist()}
        )

    @classmethod
    def from_json(cls, text: str) -> "ToyCodec":
        d = json.loads(text)
        books = np.asarray(d["codebooks"], dtype=np.float64).reshape(d["Q"], d["K"], d["D"])
        return cls(books, float(d["frame_rate"]))

    def save(self, path) -> None:
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path) -> "ToyCodec":
        with open(path) as fh:
            return cls.from_json(fh.read())


# --------------------------------------------------------------------------
# song generation


def scale_pitch_classes(key: int, mode: str) -> list[int]:
    steps = MAJOR_SCALE if mode == "major" else MINOR_SCALE
    return [(key + s) % 12 for s in steps]


def diatonic_triad(key: int, mode: str, degree: int) -> tuple[int, str]:
    scale = scale_pitch_classes(key, mode)
    root = scale[degree % 7]
    third = (scale[(degree + 2) % 7] - root) % 12
    fifth = (scale[(degree + 4) % 7] - root) % 12
    quality = {(4, 7): "maj", (3, 7): "min", (3, 6): "dim"}[(third, fifth)]
    return root, quality


def chord_tones(chord: tuple[int, str]) -> list[int]:
    root, quality = chord
    return [(root + i) % 12 for i in TRIAD_INTERVALS[quality]]


def _nearest_pitch(pc: int, target: int, lo: int, hi: int) -> int:
    cands = [p for p in range(lo, hi + 1) if p % 12 == pc]
    return min(cands, key=lambda p: (abs(p - target), p))


def _melody(song_key, mode, chords, bpb, rng, cfg):
    scale = scale_pitch_classes(song_key, mode)
    events = []
    prev = 72
    for bar, chord in enumerate(chords):
        if rng.random() < cfg.bar_dropout:
            continue
        tones = chord_tones(chord)
        t = 0.0
        while t < bpb:
            dur = float(rng.choice([0.5, 0.5, 1.0, 1.0, 0.25, 1.5]))
            dur = min(dur, bpb - t)
            if rng.random() >= 0.1:
                u = rng.random()
                if u < cfg.chromatic_prob:
                    pool = [pc for pc in range(12) if pc not in scale]
                elif u < 0.6:
                    pool = tones
                else:
                    pool = scale
                pc = int(rng.choice(pool))
                target = int(np.clip(prev + rng.integers(-5, 6), 64, 80))
                pitch = _nearest_pitch(pc, target, 60, 84)
                events.append(NoteEvent(pitch, bar * bpb + t, dur, float(rng.uniform(0.5, 1.0))))
                prev = pitch
            t += dur
    return events


def _chords(chords, bpb, rng, cfg):
    events = []
    for bar, chord in enumerate(chords):
        if rng.random() < cfg.bar_dropout:
            continue
        pitches = [_nearest_pitch(pc, 60, 52, 72) for pc in chord_tones(chord)]
        vel = float(rng.uniform(0.4, 0.8))
        if rng.random() < 0.5:
            hits = [(0.0, float(bpb))]
        else:
            hits = [(float(b), 1.0) for b in range(bpb)]
        for onset, dur in hits:
            for p in pitches:
                events.append(NoteEvent(p, bar * bpb + onset, dur, vel))
    return events


def _bass(chords, bpb, rng, cfg):
    events = []
    for bar, chord in enumerate(chords):
        if rng.random() < cfg.bar_dropout:
            continue
        root, _ = chord
        fifth = chord_tones(chord)[2]
        for b in range(bpb):
            pc = fifth if (b > 0 and rng.random() < 0.25) else root
            events.append(NoteEvent(_nearest_pitch(pc, 40, 36, 47), float(bar * bpb + b), 1.0,
                                    float(rng.uniform(0.6, 1.0))))
    return events


def _percussion(song_key, n_bars, bpb, rng):
    # fixed pitch: the tonic two octaves below middle C
    pitch = 36 + song_key
    events = []
    offbeat_p = float(rng.uniform(0.2, 0.8))
    for bar in range(n_bars):
        for b in range(bpb):
            events.append(NoteEvent(pitch, float(bar * bpb + b), 0.25, float(rng.uniform(0.7, 1.0))))
            if rng.random() < offbeat_p:
                events.append(NoteEvent(pitch, bar * bpb + b + 0.5, 0.25, float(rng.uniform(0.3, 0.6))))
    return events


def gen_song(seed: int, cfg: GenConfig | None = None) -> Song:
    cfg = cfg or GenConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    key = int(rng.integers(12))
    mode = str(rng.choice(cfg.modes))
    bpb = int(rng.choice(cfg.beats_per_bar_choices))
    n_beats = cfg.n_bars * bpb
    # the tempo is whatever makes the piece fill exactly n_frames frames
    tempo = n_beats * 60.0 * cfg.frame_rate / cfg.n_frames

    p = _DEGREE_WEIGHTS / _DEGREE_WEIGHTS.sum()
    degrees = [0] + [int(rng.choice(7, p=p)) for _ in range(cfg.n_bars - 1)]
    chords = [diatonic_triad(key, mode, d) for d in degrees]

    if cfg.n_stems <= N_ROLES:
        roles = sorted(int(r) for r in rng.choice(N_ROLES, size=cfg.n_stems, replace=False))
    else:
        extra = rng.choice(N_ROLES, size=cfg.n_stems - N_ROLES)
        roles = list(range(N_ROLES)) + sorted(int(r) for r in extra)

    stems = []
    for role in roles:
        if role == MELODY:
            events = _melody(key, mode, chords, bpb, rng, cfg)
        elif role == CHORDS:
            events = _chords(chords, bpb, rng, cfg)
        elif role == BASS:
            events = _bass(chords, bpb, rng, cfg)
        else:
            events = _percussion(key, cfg.n_bars, bpb, rng)
        events.sort(key=lambda e: (e.onset, e.pitch))
        stems.append(Stem(role, events))
    return Song(stems, key, mode, tempo, bpb, chords, seed)


def in_scale_fraction(songs: list[Song]) -> float:
    """Fraction of non-percussion pitches that belong to their song's scale."""
    hit = total = 0
    for song in songs:
        scale = set(scale_pitch_classes(song.key, song.mode))
        for stem in song.stems:
            if stem.instrument_category == PERCUSSION:
                continue
            for e in stem.events:
                total += 1
                hit += (e.pitch % 12) in scale
    return hit / total if total else 1.0


# --------------------------------------------------------------------------
# rendering


def frames_per_beat(tempo: float, frame_rate: float) -> float:
    return 60.0 * frame_rate / tempo


def render(stem: Stem, tempo: float, n_beats: int, frame_rate: float = 10.0,
           decay: float = 0.85) -> FrameSeq:
    """Render a stem to chroma frames.

    Every note adds ``velocity * decay**k`` to its pitch-class bin on the k-th
    frame it sounds; the amplitude channel is the row sum of the chroma bins.
    """
    fpb = frames_per_beat(tempo, frame_rate)
    n_frames = int(round(n_beats * fpb))
    out = np.zeros((n_frames, FRAME_DIM))
    for e in stem.events:
        start = int(round(e.onset * fpb))
        end = max(start + 1, int(round((e.onset + e.duration) * fpb)))
        end = min(end, n_frames)
        if start >= n_frames:
            continue
        k = np.arange(end - start)
        out[start:end, e.pitch % 12] += e.velocity * decay**k
    out[:, N_CHROMA] = out[:, :N_CHROMA].sum(axis=1)
    return FrameSeq(out, frame_rate)


def render_song(song: Song, frame_rate: float = 10.0) -> list[FrameSeq]:
    return [render(s, song.tempo, song.n_beats, frame_rate) for s in song.stems]


def mix(parts: list[FrameSeq]) -> FrameSeq:
    if not parts:
        raise ValueError("mix of zero parts")
    shape = parts[0].frames.shape
    for p in parts[1:]:
        if p.frames.shape != shape:
            raise ValueError(f"shape mismatch in mix: {p.frames.shape} vs {shape}")
    total = parts[0].frames.copy()
    for p in parts[1:]:
        total += p.frames
    return FrameSeq(total, parts[0].frame_rate)


def is_silent(x: FrameSeq) -> bool:
    return float(x.amplitude.mean()) < EPS_SILENCE if x.T else True


# --------------------------------------------------------------------------
# residual vector quantizer


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _init_centroids(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    uniq = np.unique(X, axis=0)
    if len(uniq) >= K:
        return uniq[np.sort(rng.choice(len(uniq), size=K, replace=False))].copy()
    # fewer distinct residuals than codewords: pad with jittered copies so entries stay distinct
    scale = max(float(np.abs(X).max()), 1.0) * 1e-6
    pad = uniq[rng.integers(len(uniq), size=K - len(uniq))]
    pad = pad + rng.normal(scale=scale, size=pad.shape)
    return np.vstack([uniq, pad])


def kmeans(X: np.ndarray, K: int, rng: np.random.Generator, n_iter: int = 25) -> np.ndarray:
    C = _init_centroids(X, K, rng)
    for _ in range(n_iter):
        d = _sq_dists(X, C)
        assign = d.argmin(1)
        mind = d[np.arange(len(X)), assign]
        counts = np.bincount(assign, minlength=K)
        sums = np.zeros_like(C)
        np.add.at(sums, assign, X)
        nonempty = counts > 0
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
        for k in np.flatnonzero(~nonempty):
            far = int(mind.argmax())
            if mind[far] <= 0.0:
                break
            C[k] = X[far]
            mind[far] = 0.0
    return C


def fit_codec(corpus: list[FrameSeq], Q: int = 4, K: int = 64, seed: int = 0,
              n_iter: int = 25, max_frames: int | None = None) -> ToyCodec:
    """Fit a Q-level residual quantizer: k-means on frames, then on successive residuals."""
    if not corpus:
        raise ValueError("empty corpus")
    if Q < 1 or K < 2:
        raise ConfigError("need Q >= 1 and K >= 2")
    X = np.vstack([c.frames for c in corpus]).astype(np.float64)
    rng = np.random.default_rng(seed)
    if max_frames is not None and len(X) > max_frames:
        X = X[np.sort(rng.choice(len(X), size=max_frames, replace=False))]
    n_distinct = len(np.unique(X, axis=0))
    if n_distinct < K:
        raise ValueError(f"corpus has {n_distinct} distinct frames, fewer than K={K}")
    books = np.zeros((Q, K, X.shape[1]))
    resid = X.copy()
    for q in range(Q):
        books[q] = kmeans(resid, K, rng, n_iter)
        resid -= books[q][_sq_dists(resid, books[q]).argmin(1)]
    return ToyCodec(books, corpus[0].frame_rate)


def _check_dim(codec: ToyCodec, x: FrameSeq) -> None:
    if x.frames.ndim != 2 or x.frames.shape[1] != codec.D:
        raise ValueError(f"frame dimension {x.frames.shape} does not match codec D={codec.D}")


def encode(codec: ToyCodec, x: FrameSeq, levels: int | None = None) -> np.ndarray:
    """Greedy residual quantization; returns a (Q, T) int64 token grid."""
    _check_dim(codec, x)
    levels = codec.Q if levels is None else levels
    resid = x.frames.astype(np.float64).copy()
    out = np.zeros((levels, x.T), dtype=np.int64)
    for q in range(levels):
        C = codec.codebooks[q]
        d = ((resid[:, None, :] - C[None, :, :]) ** 2).sum(-1)
        out[q] = d.argmin(1)
        resid -= C[out[q]]
    return out


def decode(codec: ToyCodec, grid: np.ndarray) -> FrameSeq:
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.shape[0] > codec.Q:
        raise ValueError(f"grid shape {grid.shape} incompatible with codec Q={codec.Q}")
    if (grid == MASK).any():
        raise ValueError("cannot decode a grid containing MASK tokens")
    if grid.min(initial=0) < 0 or grid.max(initial=0) >= codec.K:
        raise ValueError("token out of codebook range")
    frames = np.zeros((grid.shape[1], codec.D))
    for q in range(grid.shape[0]):
        frames += codec.codebooks[q][grid[q]]
    return FrameSeq(np.maximum(frames, 0.0), codec.frame_rate)


def check_grid(grid: np.ndarray, Q: int, T: int, K: int, allow_mask: bool = False) -> None:
    grid = np.asarray(grid)
    if grid.shape != (Q, T):
        raise ValueError(f"token grid has shape {grid.shape}, expected {(Q, T)}")
    ok = (grid >= 0) & (grid < K)
    if allow_mask:
        ok |= grid == MASK
    if not ok.all():
        raise ValueError("token grid has entries outside [0, K) and not MASK")


# --------------------------------------------------------------------------
# files


def write_songs(path, songs: list[Song]) -> None:
    atomic_write_text(path, "".join(json.dumps(s.to_dict()) + "\n" for s in songs))


def read_songs(path) -> list[Song]:
    with open(path) as fh:
        return [Song.from_dict(json.loads(line)) for line in fh if line.strip()]


def pack_grids(grids: np.ndarray, K: int) -> bytes:
    """Serialize (N, Q, T) grids as a 16-byte header plus little-endian u16 tokens."""
    grids = np.asarray(grids)
    if grids.ndim == 2:
        grids = grids[None]
    n, Q, T = grids.shape
    body = np.where(grids == MASK, 0xFFFF, grids).astype("<u2").tobytes()
    return _GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, Q, T, K, n) + body


def unpack_grids(data: bytes) -> tuple[np.ndarray, int]:
    magic, version, Q, T, K, n = _GRID_HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != GRID_VERSION:
        raise ValueError(f"unsupported grid file version {version}")
    body = np.frombuffer(data, dtype="<u2", offset=_GRID_HEADER.size)
    if body.size != n * Q * T:
        raise ValueError("truncated grid file")
    grids = body.astype(np.int64).reshape(n, Q, T)
    grids[grids == 0xFFFF] = MASK
    return grids, K


def write_grids(path, grids: np.ndarray, K: int) -> None:
    atomic_write_bytes(path, pack_grids(grids, K))


def read_grids(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        return unpack_grids(fh.read())


def frames_to_csv(x: FrameSeq) -> str:
    head = ",".join([f"chroma_{i}" for i in range(N_CHROMA)] + ["amplitude"])
    rows = [",".join(repr(float(v)) for v in row) for row in x.frames]
    return "\n".join([head, *rows]) + "\n"

