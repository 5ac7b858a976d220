"""Descriptor-distribution distance (MIRDD) and Fréchet distance between populations.

Descriptors are read off chroma frames with simple template methods:
Krumhansl-Schmuckler key profiles, per-bar triad templates and thresholded
pitch-class onsets. Each population becomes one histogram per descriptor;
MIRDD is the unweighted mean of the per-descriptor KL(ref || test).
"""

from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .pairs import crop, crop_window
from .sampler import generate
from .toyworld import (
    N_CHROMA,
    PERCUSSION,
    TRIAD_INTERVALS,
    FrameSeq,
    Song,
    ToyCodec,
    decode,
    encode,
    is_silent,
    mix,
    render_song,
)

log = logging.getLogger(__name__)

KS_MAJOR = np.array([6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88])
KS_MINOR = np.array([6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17])
PITCH_NAMES = ("C", "C#", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B")
QUALITIES = ("maj", "min", "dim")
N_KEYS = 24
N_CHORDS = 12 * len(QUALITIES)

ACTIVE_REL = 0.25  # bin active if >= this fraction of the frame's strongest bin
ACTIVE_ABS = 0.05
ONSET_DELTA = 0.1
BAR_FLOOR = 1e-3
PERC_WINDOW_S = 0.6
SMOOTHING = 1e-3
CONTINUOUS_BINS = 32


@dataclass
class DescriptorMeta:
    """Side information that the toy world supplies instead of beat/structure models."""

    beats_per_bar: int = 4
    frames_per_bar: float = 16.0
    offset: int = 0  # frame index of the clip start inside its song
    percussion: FrameSeq | None = None


@dataclass
class DescriptorSet:
    key_signature: int
    pitch_range_len: int
    unique_pitch_classes: int
    perc_vertical_density_max: int
    beats_per_bar: int
    chord_variety: int
    tonality_alteration_ratio: float
    note_pitches: list[int] = field(default_factory=list)
    pitch_classes: list[int] = field(default_factory=list)
    chord_triads: list[int] = field(default_factory=list)


# name -> (kind, fixed domain size or None)
DESCRIPTORS = {
    "key_signature": ("categorical", N_KEYS),
    "pitch_range_len": ("integer", None),
    "unique_pitch_classes": ("categorical", N_CHROMA + 1),
    "perc_vertical_density_max": ("integer", None),
    "beats_per_bar": ("integer", None),
    "chord_variety": ("integer", None),
    "tonality_alteration_ratio": ("continuous", None),
    "note_pitches": ("multi_integer", None),
    "pitch_classes": ("multi_categorical", N_CHROMA),
    "chord_triads": ("multi_categorical", N_CHORDS),
}


def key_label(k: int) -> str:
    return f"{PITCH_NAMES[k % 12]} {'minor' if k >= 12 else 'major'}"


def chord_label(c: int) -> str:
    return f"{PITCH_NAMES[c % 12]}{QUALITIES[c // 12]}"


def chord_index(root: int, quality: str) -> int:
    return QUALITIES.index(quality) * 12 + root % 12


def estimate_key(chroma_profile: np.ndarray) -> int:
    """Krumhansl-Schmuckler: best correlating rotated major/minor profile; minor keys are 12..23."""
    v = np.asarray(chroma_profile, dtype=np.float64)
    if np.allclose(v, v[0]):
        return 0
    scores = [np.corrcoef(v, np.roll(KS_MAJOR, k))[0, 1] for k in range(12)]
    scores += [np.corrcoef(v, np.roll(KS_MINOR, k))[0, 1] for k in range(12)]
    return int(np.argmax(scores))


_TEMPLATES = np.zeros((N_CHORDS, 12))
for _qi, _q in enumerate(QUALITIES):
    for _r in range(12):
        for _i in TRIAD_INTERVALS[_q]:
            _TEMPLATES[_qi * 12 + _r, (_r + _i) % 12] = 1.0
_TEMPLATES /= np.linalg.norm(_TEMPLATES, axis=1, keepdims=True)


def estimate_chord(chroma_profile: np.ndarray) -> int | None:
    """Best cosine match among the 36 triad templates; None for an (almost) empty bar."""
    v = np.asarray(chroma_profile, dtype=np.float64)
    if v.sum() < BAR_FLOOR:
        return None
    return int(np.argmax(_TEMPLATES @ (v / np.linalg.norm(v))))


def active_bins(chroma: np.ndarray) -> np.ndarray:
    peak = chroma.max(axis=1, keepdims=True)
    return (chroma >= ACTIVE_REL * peak) & (chroma >= ACTIVE_ABS)


def detect_notes(chroma: np.ndarray) -> list[tuple[int, int]]:
    """(frame, pitch class) note onsets from thresholded chroma."""
    act = active_bins(chroma)
    prev_act = np.vstack([np.zeros((1, 12), dtype=bool), act[:-1]])
    prev = np.vstack([np.zeros((1, 12)), chroma[:-1]])
    onset = act & (~prev_act | (chroma - prev > ONSET_DELTA))
    return [(int(f), int(pc)) for f, pc in zip(*np.nonzero(onset))]


def onset_frames(amplitude: np.ndarray) -> np.ndarray:
    prev = np.concatenate([[0.0], amplitude[:-1]])
    return np.flatnonzero(amplitude - prev > ONSET_DELTA)


def max_window_count(frames: np.ndarray, window: int) -> int:
    if not len(frames):
        return 0
    frames = np.sort(frames)
    ends = np.searchsorted(frames, frames + window, side="left")
    return int((ends - np.arange(len(frames))).max())


def bar_chords(chroma: np.ndarray, meta: DescriptorMeta) -> list[int]:
    T = chroma.shape[0]
    bar_of = np.floor((np.arange(T) + meta.offset) / meta.frames_per_bar).astype(int)
    out = []
    for b in np.unique(bar_of):
        c = estimate_chord(chroma[bar_of == b].sum(0))
        if c is not None:
            out.append(c)
    return out


def alteration_ratio(chords: list[int]) -> float:
    """Share of consecutive chord pairs that switch between major and minor quality."""
    if len(chords) < 2:
        return 0.0
    quals = [QUALITIES[c // 12] for c in chords]
    flips = sum({a, b} == {"maj", "min"} for a, b in zip(quals, quals[1:]))
    return flips / (len(chords) - 1)


def extract_descriptors(x: FrameSeq, meta: DescriptorMeta | None = None) -> DescriptorSet:
    if is_silent(x):
        raise ValueError("cannot extract descriptors from a silent mix")
    meta = meta or DescriptorMeta()
    chroma = x.chroma
    notes = detect_notes(chroma)
    # chroma carries no octave: note pitches are folded onto the octave above middle C
    pitches = [60 + pc for _, pc in notes]
    act = active_bins(chroma)
    chords = bar_chords(chroma, meta)
    if meta.percussion is not None:
        window = max(1, int(round(PERC_WINDOW_S * x.frame_rate)))
        density = max_window_count(onset_frames(meta.percussion.amplitude), window)
    else:
        density = 0
    return DescriptorSet(
        key_signature=estimate_key(chroma.sum(0)),
        pitch_range_len=(max(pitches) - min(pitches)) if pitches else 0,
        unique_pitch_classes=len({pc for _, pc in notes}),
        perc_vertical_density_max=density,
        beats_per_bar=meta.beats_per_bar,
        chord_variety=len(set(chords)),
        tonality_alteration_ratio=alteration_ratio(chords),
        note_pitches=pitches,
        pitch_classes=[int(pc) for _, pc in zip(*np.nonzero(act))],
        chord_triads=chords,
    )


@dataclass
class Population:
    examples: list[DescriptorSet]

    def __post_init__(self):
        if not self.examples:
            raise ValueError("empty population")

    def __len__(self):
        return len(self.examples)

    def values(self, name: str) -> list:
        kind, _ = DESCRIPTORS[name]
        vals = [getattr(e, name) for e in self.examples]
        if kind.startswith("multi"):
            return [v for row in vals for v in row]
        return vals


def kl_divergence(p, q, eps: float = 0.0) -> float:
    """KL(p || q) in nats for two histograms over the same bins.

    Both are normalised; with ``eps > 0`` every bin of both gets ``eps`` added
    before renormalising, which guarantees q covers p.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"histogram binning mismatch: {p.shape} vs {q.shape}")
    if (p < 0).any() or (q < 0).any():
        raise ValueError("negative histogram mass")
    p, q = _normalise(p, eps), _normalise(q, eps)
    support = p > 0
    if (q[support] == 0).any():
        raise ValueError("q has no mass where p does; smooth it first")
    return float(max(0.0, np.sum(p[support] * np.log(p[support] / q[support]))))


def _normalise(h: np.ndarray, eps: float) -> np.ndarray:
    s = h.sum()
    h = h / s if s > 0 else np.full_like(h, 1.0 / len(h))
    if eps:
        h = h + eps
        h = h / h.sum()
    return h


def descriptor_histograms(ref: Population, test: Population, name: str) -> tuple[np.ndarray, np.ndarray]:
    """Counts of one descriptor for both populations over a shared binning."""
    kind, size = DESCRIPTORS[name]
    a, b = np.asarray(ref.values(name)), np.asarray(test.values(name))
    if kind in ("categorical", "multi_categorical"):
        edges = np.arange(size + 1) - 0.5
    elif kind in ("integer", "multi_integer"):
        both = np.concatenate([a, b])
        if not len(both):
            return np.ones(1), np.ones(1)
        edges = np.arange(both.min(), both.max() + 2) - 0.5
    else:
        lo, hi = (float(a.min()), float(a.max())) if len(a) else (0.0, 1.0)
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, CONTINUOUS_BINS + 1)
        # values outside the reference range land in the edge bins
        b = np.clip(b, lo, hi)
    return np.histogram(a, edges)[0].astype(float), np.histogram(b, edges)[0].astype(float)


def mirdd_report(ref: Population, test: Population, eps: float = SMOOTHING) -> dict[str, float]:
    """Per-descriptor KL(ref || test) plus their mean under key ``"mirdd"``."""
    if not len(ref) or not len(test):
        raise ValueError("empty population")
    report = {}
    for name in DESCRIPTORS:
        p, q = descriptor_histograms(ref, test, name)
        report[name] = kl_divergence(p, q, eps)
    report["mirdd"] = float(np.mean([report[n] for n in DESCRIPTORS]))
    return report


def mirdd(ref: Population, test: Population, eps: float = SMOOTHING) -> float:
    return mirdd_report(ref, test, eps)["mirdd"]


def _psd_sqrt(S: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    w, V = np.linalg.eigh((S + S.T) / 2)
    if w.min() < -tol:
        raise ValueError(f"matrix not positive semidefinite (eigenvalue {w.min():.3g})")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b, tol: float = 1e-8) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The cross term uses tr((S_a S_b)^(1/2)) = tr((A S_b A)^(1/2)) with A = S_a^(1/2),
    which keeps every square root symmetric.
    """
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    A = _psd_sqrt(cov_a, tol)
    M = A @ cov_b @ A
    w = np.linalg.eigvalsh((M + M.T) / 2)
    if w.min() < -tol:
        raise ValueError(f"degenerate covariance product (eigenvalue {w.min():.3g})")
    cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return max(d, 0.0)


def frechet(A, B) -> float:
    A, B = np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
    if A.ndim == 1:
        A, B = A[:, None], B[:, None]
    dim = A.shape[1]
    if B.shape[1] != dim:
        raise ValueError("populations have different dimensions")
    if len(A) <= dim or len(B) <= dim:
        raise ValueError(f"need more than {dim} examples per population")
    cov = lambda X: np.atleast_2d(np.cov(X, rowvar=False))  # noqa: E731
    return frechet_from_moments(A.mean(0), cov(A), B.mean(0), cov(B))


def toy_embedding(x: FrameSeq) -> np.ndarray:
    """Per-clip mean and variance of each frame dimension (26 values)."""
    return np.concatenate([x.frames.mean(0), x.frames.var(0)])


# --------------------------------------------------------------------------
# evaluation examples


@dataclass
class EvalExample:
    song_id: int
    context_subset: tuple[int, ...]
    target_index: int
    category: int
    start: int
    context: np.ndarray  # (Q, T) tokens
    context_frames: FrameSeq
    target_frames: FrameSeq
    meta: DescriptorMeta
    percussion_context: FrameSeq | None


def make_examples(songs: list[Song], codec: ToyCodec, n: int, rng: np.random.Generator,
                  crop_frames: int = 32, max_retries: int = 8) -> list[EvalExample]:
    """Draw ``n`` (context-mix, target category) examples from held-out songs.

    A song and a category present in it are drawn uniformly; the real stem of
    that category is the reference and the context is a random subset of the
    other stems. Silent draws are retried on the next song.
    """
    out = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > n * max_retries + 100:
            raise RuntimeError("could not draw enough non-silent evaluation examples")
        sid = int(rng.integers(len(songs)))
        song = songs[sid]
        stems = render_song(song, codec.frame_rate)
        cats = sorted({s.instrument_category for s in song.stems})
        cat = int(cats[rng.integers(len(cats))])
        holders = [i for i, s in enumerate(song.stems) if s.instrument_category == cat]
        target = int(holders[rng.integers(len(holders))])
        rest = [i for i in range(len(stems)) if i != target]
        size = int(rng.integers(1, len(rest) + 1))
        subset = tuple(sorted(int(i) for i in rng.choice(rest, size=size, replace=False)))
        start = crop_window(stems[0].T, crop_frames, rng)
        ex = example_from_assignment(song, sid, stems, codec, subset, target, start, crop_frames)
        if ex is not None:
            out.append(ex)
    return out


def example_from_assignment(song: Song, song_id: int, stems: list[FrameSeq], codec: ToyCodec,
                            subset, target: int, start: int, crop_frames: int) -> EvalExample | None:
    ctx_parts = [crop(stems[i], crop_frames, start=start) for i in subset]
    ctx = mix(ctx_parts)
    tgt = crop(stems[target], crop_frames, start=start)
    if is_silent(ctx) or is_silent(tgt):
        return None
    perc = [p for i, p in zip(subset, ctx_parts) if song.stems[i].instrument_category == PERCUSSION]
    meta = DescriptorMeta(
        beats_per_bar=song.beats_per_bar,
        frames_per_bar=stems[0].T / song.n_bars,
        offset=start,
    )
    return EvalExample(song_id, tuple(subset), target, song.stems[target].instrument_category,
                       start, encode(codec, ctx), ctx, tgt, meta, mix(perc) if perc else None)


def mix_meta(ex: EvalExample, stem: FrameSeq) -> DescriptorMeta:
    """Metadata for ``context + stem``; the stem counts as percussion when its category is."""
    perc = [p for p in (ex.percussion_context,) if p is not None]
    if ex.category == PERCUSSION:
        perc.append(stem)
    return DescriptorMeta(ex.meta.beats_per_bar, ex.meta.frames_per_bar, ex.meta.offset,
                          mix(perc) if perc else None)


@dataclass
class EvalPopulations:
    ref: Population
    test: Population
    ref_embeddings: np.ndarray
    test_embeddings: np.ndarray
    categories: list[int]
    skipped: int = 0


def populations_from_stems(examples: list[EvalExample], generated: list[FrameSeq | None]) -> EvalPopulations:
    """Descriptors on stem + context-mix; toy embeddings on the isolated stems."""
    ref, test, ref_emb, test_emb, cats = [], [], [], [], []
    skipped = 0
    for ex, gen in zip(examples, generated):
        if gen is None:
            skipped += 1
            continue
        ref.append(extract_descriptors(mix([ex.context_frames, ex.target_frames]),
                                       mix_meta(ex, ex.target_frames)))
        test.append(extract_descriptors(mix([ex.context_frames, gen]), mix_meta(ex, gen)))
        ref_emb.append(toy_embedding(ex.target_frames))
        test_emb.append(toy_embedding(gen))
        cats.append(ex.category)
    return EvalPopulations(Population(ref), Population(test), np.array(ref_emb),
                           np.array(test_emb), cats, skipped)


def build_eval_populations(model, examples: list[EvalExample], codec: ToyCodec, cfg,
                           batch_size: int = 256) -> EvalPopulations:
    """Generate a stem for each example and pair it with the real stem of the same category."""
    generated: list[FrameSeq | None] = []
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo:lo + batch_size]
        ctx = np.stack([e.context for e in chunk])
        cats = np.array([e.category for e in chunk])
        try:
            grids = generate(model, ctx, cats, chunk_config(cfg, lo))
        except (FloatingPointError, ValueError) as err:
            log.warning("generation failed for examples %d..%d: %s", lo, lo + len(chunk) - 1, err)
            generated.extend([None] * len(chunk))
            continue
        generated.extend(decode(codec, g) for g in grids)
    return populations_from_stems(examples, generated)


def chunk_config(cfg, offset: int):
    """Sampler config for the batch starting at ``offset``; each batch gets its own stream."""
    return cfg if offset == 0 else replace(cfg, seed=cfg.seed + offset)


def evaluate(pops: EvalPopulations) -> dict[str, float]:
    report = mirdd_report(pops.ref, pops.test)
    report["frechet"] = frechet(pops.ref_embeddings, pops.test_embeddings)
    return report


def report_csv(report: dict[str, float]) -> str:
    lines = ["metric,value"] + [f"{k},{v!r}" for k, v in report.items()]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# population CSV


def _runs(values: list[int]) -> str:
    return ";".join(f"{v}:{c}" for v, c in sorted(Counter(values).items()))


def _unruns(text: str) -> list[int]:
    out = []
    for item in filter(None, text.split(";")):
        v, c = item.split(":")
        out.extend([int(v)] * int(c))
    return out


def population_csv(pop: Population) -> str:
    names = [f.name for f in fields(DescriptorSet)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for e in pop.examples:
        row = []
        for n in names:
            v = getattr(e, n)
            row.append(_runs(v) if isinstance(v, list) else repr(v))
        w.writerow(row)
    return buf.getvalue()


def read_population_csv(text: str) -> Population:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for r in rows:
        kw = {}
        for f in fields(DescriptorSet):
            kind = DESCRIPTORS[f.name][0]
            if kind.startswith("multi"):
                kw[f.name] = _unruns(r[f.name])
            elif kind == "continuous":
                kw[f.name] = float(r[f.name])
            else:
                kw[f.name] = int(r[f.name])
        out.append(DescriptorSet(**kw))
    return Population(out)

