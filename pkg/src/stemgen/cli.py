"""Command line entry point: ``stemgen {synth,fit-codec,train,generate,eval,ablate}``.

Every subcommand reads its inputs from and writes its outputs to the ``--out``
directory, so a pipeline is::

    stemgen synth    --config run.toml --seed 0 --out work
    stemgen train    --config run.toml --seed 0 --out work
    stemgen generate --config run.toml --seed 0 --out work
    stemgen eval     --config run.toml --seed 0 --out work
    stemgen ablate   --config run.toml --seed 0 --out work

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from ._io import atomic_write_bytes, atomic_write_text
from .config import RunConfig, stream_seed
from .model import (
    TrainingDiverged,
    load_checkpoint,
    metrics_csv,
    save_checkpoint,
    train,
)
from .pairs import PairData, build_dataset, enumerate_pairs, pair_count, read_pairs, write_pairs
from .sampler import SamplerConfig, generate
from .toyworld import (
    ConfigError,
    ToyCodec,
    decode,
    fit_codec,
    frames_to_csv,
    gen_song,
    mix,
    read_grids,
    read_songs,
    render_song,
    write_grids,
    write_songs,
)

log = logging.getLogger("stemgen")

SONGS_TRAIN = "songs_train.jsonl"
SONGS_TEST = "songs_test.jsonl"
CODEC = "codec.json"
PAIRS = "pairs.bin"
CHECKPOINT = "checkpoint.stgc"
METRICS = "metrics.csv"
GENERATED = "generated.bin"
CONTEXTS = "contexts.bin"
MANIFEST = "manifest.csv"


# --------------------------------------------------------------------------
# synth / fit-codec


def song_seeds(seed: int, n: int) -> list[int]:
    rng = np.random.default_rng(stream_seed(seed, "synth"))
    seen, out = set(), []
    while len(out) < n:
        s = int(rng.integers(2**62))
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def codec_corpus(songs, frame_rate: float, n_songs: int, seed: int):
    """Rendered stems, full mixes and one random submix per song."""
    rng = np.random.default_rng(stream_seed(seed, "codec", 1))
    corpus = []
    for song in songs[:n_songs]:
        stems = render_song(song, frame_rate)
        corpus.extend(stems)
        corpus.append(mix(stems))
        k = int(rng.integers(1, len(stems) + 1))
        corpus.append(mix([stems[i] for i in rng.choice(len(stems), size=k, replace=False)]))
    return corpus


def run_fit_codec(cfg: RunConfig, songs) -> ToyCodec:
    c = cfg.codec
    corpus = codec_corpus(songs, cfg.synth.gen.frame_rate, c.corpus_songs, cfg.seed)
    return fit_codec(corpus, c.Q, c.K, stream_seed(cfg.seed, "codec"), c.n_iter, c.max_frames)


def cmd_synth(cfg: RunConfig, out: Path) -> str:
    s = cfg.synth
    seeds = song_seeds(cfg.seed, s.n_train_songs + s.n_test_songs)
    songs = [gen_song(x, s.gen) for x in seeds]
    train_songs, test_songs = songs[:s.n_train_songs], songs[s.n_train_songs:]
    codec = run_fit_codec(cfg, train_songs)
    pairs, skipped = build_dataset(train_songs, codec, stream_seed(cfg.seed, "pairs"),
                                   s.pairs_per_song, s.crop_frames, s.max_retries)
    write_songs(out / SONGS_TRAIN, train_songs)
    write_songs(out / SONGS_TEST, test_songs)
    codec.save(out / CODEC)
    write_pairs(out / PAIRS, PairData.from_pairs(pairs, codec.K, s.gen.n_categories))

    lines = [f"songs: {len(train_songs)} train, {len(test_songs)} test"]
    for M, n in sorted(Counter(len(x.stems) for x in songs).items()):
        combos = len(enumerate_pairs(M))
        lines.append(f"  {n} songs with M={M} stems: {combos} (context, target) combinations "
                     f"per song (M/2*(2^M-2) = {pair_count(M)})")
    lines.append(f"pairs written: {len(pairs)} ({skipped} draws abandoned as silent)")
    cats = Counter(int(p.instrument_category) for p in pairs)
    lines.append("target categories: " + ", ".join(f"{k}:{v}" for k, v in sorted(cats.items())))
    lines.append(f"codec: Q={codec.Q} K={codec.K} D={codec.D}")
    summary = "\n".join(lines) + "\n"
    atomic_write_text(out / "synth_summary.txt", summary)
    return summary


def cmd_fit_codec(cfg: RunConfig, out: Path) -> str:
    codec = run_fit_codec(cfg, read_songs(out / SONGS_TRAIN))
    codec.save(out / CODEC)
    return f"codec: Q={codec.Q} K={codec.K} D={codec.D} -> {out / CODEC}\n"


# --------------------------------------------------------------------------
# train


def _model_config(cfg: RunConfig):
    return replace(cfg.model, seed=stream_seed(cfg.seed, "train"))


def read_metrics(path: Path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for r in csv.DictReader(fh):
            acc = float(r["heldout_accuracy"]) if r["heldout_accuracy"] else float("nan")
            rows.append({"step": int(r["step"]), "loss": float(r["loss"]), "accuracy": acc,
                         "lr": float(r["lr"])})
    return rows


def cmd_train(cfg: RunConfig, out: Path, resume: Path | None = None, steps: int | None = None) -> str:
    tc = replace(cfg.train, steps=steps) if steps is not None else cfg.train
    data = read_pairs(out / PAIRS)
    mc = _model_config(cfg)
    header = (f"training: {len(data)} pairs, Q={mc.Q} K={mc.K} T={mc.T} C={mc.C}, "
              f"E={mc.embed_dim} L={mc.layers} H={mc.heads}, p_drop={mc.p_drop}, "
              f"steps={tc.steps} batch={tc.batch_size} lr={tc.lr}")
    print(header, flush=True)
    state, previous = None, []
    if resume is not None:
        state, _ = load_checkpoint(resume, tc)
        if state.model.config != mc:
            raise ConfigError("checkpoint model config differs from the run config")
        if (out / METRICS).exists():
            previous = [r for r in read_metrics(out / METRICS) if r["step"] <= state.step]
    try:
        state = train(mc, data, tc, state)
    except TrainingDiverged as err:
        raise RuntimeError(f"training diverged: {err}") from err
    state.log = previous + state.log
    save_checkpoint(out / CHECKPOINT, state, tc)
    atomic_write_text(out / METRICS, metrics_csv(state.log))
    last = state.log[-1]
    text = f"final step {last['step']}: loss {last['loss']:.4f}"
    evals = [r for r in state.log if not math.isnan(r["accuracy"])]
    if evals:
        text += f", held-out masked accuracy {evals[-1]['accuracy']:.4f} (step {evals[-1]['step']})"
    return text + "\n"


# --------------------------------------------------------------------------
# generate / eval / ablate


def load_model(cfg: RunConfig, out: Path, codec: ToyCodec):
    state, _ = load_checkpoint(out / CHECKPOINT)
    mc = state.model.config
    want = (codec.Q, codec.K, cfg.synth.crop_frames)
    if (mc.Q, mc.K, mc.T) != want:
        raise ConfigError(f"checkpoint (Q={mc.Q}, K={mc.K}, T={mc.T}) does not match "
                          f"codec/config (Q, K, T)={want}")
    return state.model


def sampler_config(cfg: RunConfig, offset: int = 0) -> SamplerConfig:
    return replace(cfg.sampler, seed=stream_seed(cfg.seed, "sample", offset))


def eval_examples(cfg: RunConfig, songs, codec, n: int, offset: int = 0):
    rng = np.random.default_rng(stream_seed(cfg.seed, "eval", offset))
    return ev.make_examples(songs, codec, n, rng, cfg.synth.crop_frames, cfg.synth.max_retries)


def manifest_csv(examples) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "song_id", "context_subset", "target_index", "category", "start"])
    for i, e in enumerate(examples):
        w.writerow([i, e.song_id, " ".join(map(str, e.context_subset)), e.target_index,
                    e.category, e.start])
    return buf.getvalue()


def examples_from_manifest(path: Path, songs, codec, crop_frames: int):
    out = []
    with open(path) as fh:
        for r in csv.DictReader(fh):
            sid = int(r["song_id"])
            song = songs[sid]
            subset = tuple(int(i) for i in r["context_subset"].split())
            ex = ev.example_from_assignment(song, sid, render_song(song, codec.frame_rate), codec,
                                            subset, int(r["target_index"]), int(r["start"]),
                                            crop_frames)
            if ex is None:
                raise ValueError(f"manifest row {r['index']} describes a silent example")
            out.append(ex)
    return out


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def cmd_generate(cfg: RunConfig, out: Path, n: int | None = None, frames_csv: bool = False) -> str:
    codec = ToyCodec.load(out / CODEC)
    model = load_model(cfg, out, codec)
    songs = read_songs(out / SONGS_TEST)
    n = cfg.eval.n_examples if n is None else n
    examples = eval_examples(cfg, songs, codec, n)
    scfg = sampler_config(cfg)
    grids = []
    bs = cfg.eval.batch_size
    for lo in range(0, n, bs):
        chunk = examples[lo:lo + bs]
        grids.append(generate(model, np.stack([e.context for e in chunk]),
                              np.array([e.category for e in chunk]), ev.chunk_config(scfg, lo)))
    grids = np.concatenate(grids)
    gen_frames = np.stack([decode(codec, g).frames for g in grids])
    mixes = np.stack([e.context_frames.frames for e in examples]) + gen_frames
    write_grids(out / GENERATED, grids, codec.K)
    write_grids(out / CONTEXTS, np.stack([e.context for e in examples]), codec.K)
    atomic_write_text(out / MANIFEST, manifest_csv(examples))
    atomic_write_bytes(out / "generated_frames.npy", _npy_bytes(gen_frames))
    atomic_write_bytes(out / "mix_frames.npy", _npy_bytes(mixes))
    if frames_csv:
        for i in range(n):
            fr = decode(codec, grids[i])
            atomic_write_text(out / "frames" / f"generated_{i:04d}.csv", frames_to_csv(fr))
            atomic_write_text(out / "frames" / f"mix_{i:04d}.csv",
                              frames_to_csv(mix([examples[i].context_frames, fr])))
    cats = Counter(e.category for e in examples)
    return (f"generated {n} stems; categories "
            + ", ".join(f"{k}:{v}" for k, v in sorted(cats.items())) + "\n")


def cmd_eval(cfg: RunConfig, out: Path, ref_vs_ref: bool = False) -> str:
    codec = ToyCodec.load(out / CODEC)
    songs = read_songs(out / SONGS_TEST)
    examples = examples_from_manifest(out / MANIFEST, songs, codec, cfg.synth.crop_frames)
    if ref_vs_ref:
        generated = [e.target_frames for e in examples]
    else:
        grids, _ = read_grids(out / GENERATED)
        if len(grids) != len(examples):
            raise ValueError("manifest and generated grids disagree in length")
        generated = [decode(codec, g) for g in grids]
    pops = ev.populations_from_stems(examples, generated)
    report = ev.evaluate(pops)
    name = "report_ref_vs_ref.csv" if ref_vs_ref else "report.csv"
    atomic_write_text(out / name, ev.report_csv(report))
    atomic_write_text(out / "population_ref.csv", ev.population_csv(pops.ref))
    if not ref_vs_ref:
        atomic_write_text(out / "population_test.csv", ev.population_csv(pops.test))
    return ev.report_csv(report)


@dataclass
class AblationCell:
    lambda_a: float
    lambda_i: float
    w_s: float
    seed_index: int
    mirdd: float
    frechet: float


def ablation_cell(model, codec, examples, scfg: SamplerConfig, batch_size: int = 256):
    pops = ev.build_eval_populations(model, examples, codec, scfg, batch_size)
    report = ev.evaluate(pops)
    return report["mirdd"], report["frechet"]


def regime(lambda_a: float, lambda_i: float) -> str:
    """Row of the guidance table a (lambda_a, lambda_i) cell belongs to."""
    a, i = lambda_a > 1.0, lambda_i > 1.0
    return {(False, False): "lambda_i = lambda_a = 1.0", (True, False): "lambda_i = 1.0, lambda_a > 1.0",
            (False, True): "lambda_i > 1.0, lambda_a = 1.0", (True, True): "lambda_i > 1.0, lambda_a > 1.0"}[(a, i)]


REGIME_ORDER = ["lambda_i = lambda_a = 1.0", "lambda_i > 1.0, lambda_a = 1.0",
                "lambda_i = 1.0, lambda_a > 1.0", "lambda_i > 1.0, lambda_a > 1.0"]


def run_ablation(cfg: RunConfig, model, codec, songs, lambda_cells, ws_values,
                 n_examples: int, n_seeds: int, progress=None) -> list[AblationCell]:
    """Evaluate every guidance cell (at the configured w_s) and every w_s (at the configured lambdas).

    Within one seed all cells share the same examples and sampling seed.
    """
    cells = []
    base = cfg.sampler
    jobs = [(la, li, base.w_s) for la, li in lambda_cells]
    jobs += [(base.lambda_a, base.lambda_i, w) for w in ws_values]
    jobs = list(dict.fromkeys(jobs))
    for s in range(n_seeds):
        examples = eval_examples(cfg, songs, codec, n_examples, offset=1000 + s)
        scfg0 = sampler_config(cfg, offset=1000 + s)
        for la, li, ws in jobs:
            scfg = replace(scfg0, lambda_a=la, lambda_i=li, w_s=ws, guidance="multi")
            m, f = ablation_cell(model, codec, examples, scfg, cfg.eval.batch_size)
            cells.append(AblationCell(la, li, ws, s, m, f))
            if progress:
                progress(cells[-1])
    return cells


def ablation_tables(cells: list[AblationCell], lambda_cells, ws_values, base: SamplerConfig):
    lam_set = {tuple(x) for x in lambda_cells}
    lam_rows = [c for c in cells if (c.lambda_a, c.lambda_i) in lam_set and c.w_s == base.w_s]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["regime", "FAD_toy", "MIRDD", "cells"])
    for name in REGIME_ORDER:
        sel = [c for c in lam_rows if regime(c.lambda_a, c.lambda_i) == name]
        if sel:
            w.writerow([name, repr(float(np.mean([c.frechet for c in sel]))),
                        repr(float(np.mean([c.mirdd for c in sel]))), len(sel)])
    t2 = ["w_s," + ",".join(repr(float(w)) for w in ws_values)]
    base_l = (base.lambda_a, base.lambda_i)
    by_ws = {w: [c for c in cells if c.w_s == w and (c.lambda_a, c.lambda_i) == base_l] for w in ws_values}
    t2.append("FAD_toy," + ",".join(repr(float(np.mean([c.frechet for c in by_ws[w]]))) for w in ws_values))
    t2.append("MIRDD," + ",".join(repr(float(np.mean([c.mirdd for c in by_ws[w]]))) for w in ws_values))
    return buf.getvalue(), "\n".join(t2) + "\n"


def cmd_ablate(cfg: RunConfig, out: Path) -> str:
    a = cfg.ablate
    codec = ToyCodec.load(out / CODEC)
    model = load_model(cfg, out, codec)
    songs = read_songs(out / SONGS_TEST)
    lambda_cells = [(la, li) for la in a.lambdas for li in a.lambdas]
    cells = run_ablation(cfg, model, codec, songs, lambda_cells, a.w_s, a.n_examples, a.n_seeds)
    lines = ["lambda_a,lambda_i,w_s,seed_index,mirdd,frechet"]
    lines += [f"{c.lambda_a!r},{c.lambda_i!r},{c.w_s!r},{c.seed_index},{c.mirdd!r},{c.frechet!r}"
              for c in cells]
    t1, t2 = ablation_tables(cells, lambda_cells, a.w_s, cfg.sampler)
    atomic_write_text(out / "ablation_cells.csv", "\n".join(lines) + "\n")
    atomic_write_text(out / "ablation_guidance.csv", t1)
    atomic_write_text(out / "ablation_causal_bias.csv", t2)
    return "guidance scales\n" + t1 + "\ncausal-bias weight\n" + t2


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stemgen", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", type=Path, required=True, help="working directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="songs, codec and pair dataset")
    sub.add_parser("fit-codec", parents=[common], help="refit the codec on the training songs")
    t = sub.add_parser("train", parents=[common], help="train the masked token model")
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.add_argument("--steps", type=int, help="total optimizer steps (overrides config)")
    g = sub.add_parser("generate", parents=[common], help="generate stems for held-out contexts")
    g.add_argument("-n", type=int, help="number of examples (default: eval.n_examples)")
    g.add_argument("--frames-csv", action="store_true", help="also write decoded frames as CSV")
    e = sub.add_parser("eval", parents=[common], help="MIRDD and Frechet distance report")
    e.add_argument("--ref-vs-ref", action="store_true", help="compare the reference with itself")
    sub.add_parser("ablate", parents=[common], help="guidance and causal-bias sweeps")
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except (ConfigError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    out = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "synth":
            text = cmd_synth(cfg, out)
        elif args.command == "fit-codec":
            text = cmd_fit_codec(cfg, out)
        elif args.command == "train":
            text = cmd_train(cfg, out, args.resume, args.steps)
        elif args.command == "generate":
            text = cmd_generate(cfg, out, args.n, args.frames_csv)
        elif args.command == "eval":
            text = cmd_eval(cfg, out, args.ref_vs_ref)
        else:
            text = cmd_ablate(cfg, out)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 3
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
