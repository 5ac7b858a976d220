"""Masked token model over paired (context, target) token grids.

Both channels are embedded by summing one codebook row per RVQ level; the
conditioning vector (instrument category or its learned null) is added to each
channel and the two are concatenated into a ``2E``-wide sequence element. A
small pre-norm bidirectional transformer maps the sequence to ``Q`` parallel
per-level heads. Training masks the target with the per-level scheme of
:func:`build_mask` and drops each conditioning source independently.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._io import atomic_write_bytes
from .pairs import PairData
from .toyworld import MASK, ConfigError

log = logging.getLogger(__name__)

NULL_CATEGORY = -1

CKPT_MAGIC = b"STGC"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    Q: int = 4
    K: int = 64
    T: int = 32
    C: int = 4
    embed_dim: int = 32
    layers: int = 4
    heads: int = 4
    p_drop: float = 0.1
    seed: int = 0

    @property
    def width(self) -> int:
        return 2 * self.embed_dim

    def validate(self) -> None:
        for name in ("Q", "K", "T", "C", "embed_dim", "layers", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError("p_drop must be in [0, 1)")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-4
    warmup: int = 200
    plateau: int = 1000
    half_life: float = 2000.0
    weight_decay: float = 0.01
    betas: list[float] = field(default_factory=lambda: [0.9, 0.99])
    holdout_frac: float = 0.05
    eval_every: int = 100
    eval_masks: int = 64
    divergence_factor: float = 10.0
    divergence_patience: int = 100


@dataclass
class MaskPattern:
    level: int  # 1-based level being trained
    mask: np.ndarray  # (Q, T) bool, True = masked

    def check(self) -> None:
        q = self.level - 1
        if self.mask[:q].any() or not self.mask[q + 1:].all() or not self.mask[q].any():
            raise AssertionError(f"mask pattern violates level structure at level {self.level}")


def build_mask(rng: np.random.Generator, Q: int, T: int) -> MaskPattern:
    """Mask for training one RVQ level.

    The level is uniform on 1..Q. At that level each position is masked with
    probability ``sin(u * pi / 2)``, ``u ~ U(0, 1)``, redrawn until at least one
    position is masked. Coarser levels stay visible, finer ones are fully masked.
    """
    level = int(rng.integers(1, Q + 1))
    while True:
        r = math.sin(rng.random() * math.pi / 2)
        row = rng.random(T) < r
        if row.any():
            break
    mask = np.zeros((Q, T), dtype=bool)
    mask[level - 1] = row
    mask[level:] = True
    return MaskPattern(level, mask)


def lr_at(step: int, tc: TrainConfig) -> float:
    """Warmup -> plateau -> exponential decay; ``step`` counts from 0."""
    if step < tc.warmup:
        return tc.lr * (step + 1) / tc.warmup
    if step < tc.warmup + tc.plateau:
        return tc.lr
    return tc.lr * 0.5 ** ((step - tc.warmup - tc.plateau) / tc.half_life)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.gain


class Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = RMSNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = RMSNorm(width)
        self.ff_in = nn.Linear(width, 4 * width)
        self.ff_out = nn.Linear(4 * width, width)

    def attend(self, x):
        B, T, W = x.shape
        hd = W // self.heads
        q, k, v = self.qkv(x).view(B, T, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        out = att.softmax(-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, T, W))

    def forward(self, x):
        x = x + self.attend(self.norm1(x))
        return x + self.ff_out(F.gelu(self.ff_in(self.norm2(x))))


class StemGenModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        E = c.embed_dim
        # row K of every token codebook is the MASK embedding
        self.ctx_codebooks = nn.ModuleList(nn.Embedding(c.K + 1, E) for _ in range(c.Q))
        self.tgt_codebooks = nn.ModuleList(nn.Embedding(c.K + 1, E) for _ in range(c.Q))
        self.category = nn.Embedding(c.C, E)
        self.null_category = nn.Parameter(torch.zeros(E))
        self.null_context = nn.Parameter(torch.zeros(E))
        self.pos = nn.Parameter(torch.zeros(c.T, c.width))
        self.blocks = nn.ModuleList(Block(c.width, c.heads) for _ in range(c.layers))
        self.norm = RMSNorm(c.width)
        self.heads = nn.ModuleList(nn.Linear(c.width, c.K) for _ in range(c.Q))
        self.reset_parameters(torch.Generator().manual_seed(c.seed))

    def reset_parameters(self, gen: torch.Generator, std: float = 0.02) -> None:
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("gain"):
                    p.fill_(1.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)

    def combine(self, context, target, category, context_null):
        """Sequence elements ``concat(ctx + cond, tgt + cond)`` of width 2E.

        ``context``/``target`` are (B, Q, T) token tensors (target may hold MASK),
        ``category`` is (B,) with ``NULL_CATEGORY`` for the null embedding and
        ``context_null`` is a (B,) bool selecting the null-context embedding.
        """
        c = self.config
        context = torch.as_tensor(context, dtype=torch.long)
        target = torch.as_tensor(target, dtype=torch.long)
        category = torch.as_tensor(category, dtype=torch.long)
        context_null = torch.as_tensor(context_null, dtype=torch.bool)
        if context.shape[1:] != (c.Q, c.T) or target.shape != context.shape:
            raise ValueError(f"grid shapes {tuple(context.shape)}, {tuple(target.shape)} "
                             f"do not match (B, {c.Q}, {c.T})")
        if ((context < 0) | (context >= c.K)).any():
            raise ValueError("context token out of range")
        if (((target < 0) | (target >= c.K)) & (target != MASK)).any():
            raise ValueError("target token out of range")
        if ((category < NULL_CATEGORY) | (category >= c.C)).any():
            raise ValueError("category out of range")
        tgt_idx = torch.where(target == MASK, c.K, target)
        e_ctx = sum(self.ctx_codebooks[q](context[:, q]) for q in range(c.Q))
        e_ctx = torch.where(context_null[:, None, None], self.null_context, e_ctx)
        e_tgt = sum(self.tgt_codebooks[q](tgt_idx[:, q]) for q in range(c.Q))
        cond = torch.where((category == NULL_CATEGORY)[:, None], self.null_category,
                           self.category(category.clamp(min=0)))
        cond = cond[:, None, :]
        return torch.cat([e_ctx + cond, e_tgt + cond], dim=-1)

    def forward(self, x, pos=None):
        """(B, T, 2E) sequence -> (B, Q, T, K) logits."""
        h = x + (self.pos if pos is None else pos)
        for block in self.blocks:
            h = block(h)
        h = self.norm(h)
        logits = torch.stack([head(h) for head in self.heads], dim=1)
        if not torch.isfinite(logits).all():
            raise FloatingPointError("non-finite logits")
        return logits

    def predict(self, context, target, category, context_null):
        return self(self.combine(context, target, category, context_null))


def batch_loss(logits, target, levels, masks):
    """Mean over items of the cross-entropy at masked cells of each item's level.

    ``logits`` (B, Q, T, K); ``target`` (B, Q, T); ``levels`` (B,) 1-based;
    ``masks`` (B, Q, T) bool.
    """
    target = torch.as_tensor(target, dtype=torch.long)
    masks = torch.as_tensor(masks, dtype=torch.bool)
    idx = torch.as_tensor(levels, dtype=torch.long) - 1
    b = torch.arange(logits.shape[0])
    lvl_logits = logits[b, idx]  # (B, T, K)
    lvl_target = target[b, idx]
    lvl_mask = masks[b, idx].to(logits.dtype)
    counts = lvl_mask.sum(-1)
    if (counts == 0).any():
        raise ValueError("an item has no masked cells at its trained level")
    ce = F.cross_entropy(lvl_logits.transpose(1, 2), lvl_target, reduction="none")
    return ((ce * lvl_mask).sum(-1) / counts).mean()


def loss(logits, target, mask: MaskPattern):
    """Single-example loss; ``logits`` (Q, T, K), ``target`` (Q, T)."""
    return batch_loss(logits[None], np.asarray(target)[None], [mask.level], mask.mask[None])


def apply_mask(target: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, MASK, target)


def make_batch(data: PairData, idx, rng: np.random.Generator, p_drop: float) -> dict:
    """Masks and conditioning dropout for items ``idx``; draws from ``rng`` in a fixed order."""
    Q, T = data.Q, data.T
    patterns = [build_mask(rng, Q, T) for _ in idx]
    ctx_null = rng.random(len(idx)) < p_drop
    cat_null = rng.random(len(idx)) < p_drop
    masks = np.stack([p.mask for p in patterns])
    category = np.where(cat_null, NULL_CATEGORY, data.category[idx])
    return {
        "context": data.context[idx],
        "target": data.target[idx],
        "target_masked": apply_mask(data.target[idx], masks),
        "category": category,
        "context_null": ctx_null,
        "levels": np.array([p.level for p in patterns]),
        "masks": masks,
    }


def batch_forward_loss(model: StemGenModel, batch: dict):
    logits = model.predict(batch["context"], batch["target_masked"], batch["category"],
                           batch["context_null"])
    return batch_loss(logits, batch["target"], batch["levels"], batch["masks"]), logits


def grad(model: StemGenModel, batch: dict) -> dict[str, torch.Tensor]:
    """Exact gradients of the mean batch loss for every named parameter."""
    names, params = zip(*model.named_parameters())
    value, _ = batch_forward_loss(model, batch)
    grads = torch.autograd.grad(value, params, allow_unused=True)
    out = {}
    for n, p, g in zip(names, params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {n}")
        out[n] = g
    return out


def masked_accuracy(model: StemGenModel, data: PairData, masks: list[MaskPattern],
                    items: np.ndarray) -> float:
    """Argmax accuracy at masked cells of each item's trained level, full conditioning."""
    if not len(items):
        return float("nan")
    m = np.stack([p.mask for p in masks])
    levels = np.array([p.level for p in masks]) - 1
    with torch.no_grad():
        logits = model.predict(data.context[items], apply_mask(data.target[items], m),
                               data.category[items], np.zeros(len(items), dtype=bool))
    pred = logits.argmax(-1).numpy()
    b = np.arange(len(items))
    lvl_mask = m[b, levels]
    hit = (pred[b, levels] == data.target[items][b, levels]) & lvl_mask
    return float(hit.sum() / lvl_mask.sum())


@dataclass
class TrainState:
    model: StemGenModel
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    initial_loss: float | None = None
    bad_steps: int = 0
    log: list[dict] = field(default_factory=list)


def split_holdout(n: int, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if n < 2:
        idx = np.arange(n)
        return idx, idx
    perm = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(101,))).permutation(n)
    n_hold = max(1, int(round(frac * n)))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def eval_masks(holdout: np.ndarray, Q: int, T: int, n_masks: int, seed: int):
    """Fixed masks for held-out accuracy so every evaluation sees the same cells."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(102,)))
    reps = max(1, math.ceil(n_masks / max(len(holdout), 1)))
    items = np.repeat(holdout, reps)[:max(n_masks, len(holdout))]
    return items, [build_mask(rng, Q, T) for _ in items]


def make_optimizer(model: StemGenModel, tc: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=tc.lr, betas=tuple(tc.betas),
                             weight_decay=tc.weight_decay)


def new_state(config: ModelConfig, tc: TrainConfig) -> TrainState:
    model = StemGenModel(config)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(100,)))
    return TrainState(model, make_optimizer(model, tc), rng)


def train(config: ModelConfig, data: PairData, tc: TrainConfig, state: TrainState | None = None,
          on_batch: Callable[[int, dict], None] | None = None,
          on_log: Callable[[dict], None] | None = None) -> TrainState:
    """Train (or continue ``state``) until ``tc.steps`` optimizer steps have been taken.

    Metrics rows are ``{step, loss, accuracy, lr}`` with 1-based steps; accuracy is
    filled every ``tc.eval_every`` steps and NaN otherwise, so an interrupted and
    resumed run logs exactly what an uninterrupted one does.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    if (data.Q, data.T, data.K) != (config.Q, config.T, config.K) or data.C > config.C:
        raise ConfigError(f"dataset shape (Q={data.Q}, T={data.T}, K={data.K}, C={data.C}) "
                          f"does not match model config")
    state = state or new_state(config, tc)
    model, opt, rng = state.model, state.optimizer, state.rng
    train_idx, hold_idx = split_holdout(len(data), tc.holdout_frac, config.seed)
    ev_items, ev_masks = eval_masks(hold_idx, config.Q, config.T, tc.eval_masks, config.seed)

    while state.step < tc.steps:
        lr = lr_at(state.step, tc)
        for g in opt.param_groups:
            g["lr"] = lr
        idx = train_idx[rng.integers(0, len(train_idx), size=tc.batch_size)]
        batch = make_batch(data, idx, rng, config.p_drop)
        if on_batch is not None:
            on_batch(state.step + 1, batch)
        model.train()
        value, _ = batch_forward_loss(model, batch)
        if not torch.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {state.step + 1}")
        opt.zero_grad(set_to_none=True)
        value.backward()
        opt.step()
        state.step += 1
        loss_v = value.item()
        if state.initial_loss is None:
            state.initial_loss = loss_v
        if loss_v > tc.divergence_factor * state.initial_loss:
            state.bad_steps += 1
            if state.bad_steps >= tc.divergence_patience:
                raise TrainingDiverged(
                    f"loss {loss_v:.4g} above {tc.divergence_factor}x initial "
                    f"{state.initial_loss:.4g} for {state.bad_steps} steps (step {state.step}, lr {lr:.3g})")
        else:
            state.bad_steps = 0
        acc = float("nan")
        if state.step % tc.eval_every == 0:
            model.eval()
            acc = masked_accuracy(model, data, ev_masks, ev_items)
        row = {"step": state.step, "loss": loss_v, "accuracy": acc, "lr": lr}
        state.log.append(row)
        if on_log is not None:
            on_log(row)
    model.eval()
    return state


def metrics_csv(rows: list[dict]) -> str:
    lines = ["step,loss,heldout_accuracy,lr"]
    for r in rows:
        acc = "" if math.isnan(r["accuracy"]) else repr(r["accuracy"])
        lines.append(f"{r['step']},{r['loss']!r},{acc},{r['lr']!r}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# checkpoints: magic, version, header length, JSON header, raw little-endian tensors


def _tensor_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<")).tobytes()


def save_checkpoint(path, state: TrainState, tc: TrainConfig | None = None) -> None:
    tensors = dict(state.model.state_dict())
    names = [n for n, _ in state.model.named_parameters()]
    opt_state = state.optimizer.state_dict()["state"]
    for i, n in enumerate(names):
        for key, val in opt_state.get(i, {}).items():
            tensors[f"optim/{n}/{key}"] = torch.as_tensor(val)
    entries, blobs, offset = [], [], 0
    for n, t in tensors.items():
        b = _tensor_bytes(t)
        entries.append({"name": n, "dtype": str(t.dtype).removeprefix("torch."),
                        "shape": list(t.shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = {
        "model_config": asdict(state.model.config),
        "train_config": asdict(tc) if tc is not None else None,
        "step": state.step,
        "initial_loss": state.initial_loss,
        "bad_steps": state.bad_steps,
        "rng_state": state.rng.bit_generator.state,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    atomic_write_bytes(path, CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hbytes))
                       + hbytes + b"".join(blobs))


def load_checkpoint(path, tc: TrainConfig | None = None) -> tuple[TrainState, dict]:
    """Rebuild model, optimizer and RNG; returns the state and the raw header."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(buf[16:16 + hlen])
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=base + e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))
    config = ModelConfig(**header["model_config"])
    if tc is None:
        tc = TrainConfig(**header["train_config"]) if header["train_config"] else TrainConfig()
    model = StemGenModel(config)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("optim/")})
    opt = make_optimizer(model, tc)
    names = [n for n, _ in model.named_parameters()]
    osd = opt.state_dict()
    for i, n in enumerate(names):
        st = {key.split("/")[-1]: tensors[key] for key in tensors if key.startswith(f"optim/{n}/")}
        if st:
            osd["state"][i] = st
    opt.load_state_dict(osd)
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    model.eval()
    state = TrainState(model, opt, rng, header["step"], header["initial_loss"], header["bad_steps"])
    return state, header
