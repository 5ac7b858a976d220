"""Iterative masked decoding with causal-biased ranking and multi-source guidance."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
import tomli
import tomli_w
import torch

from .model import NULL_CATEGORY
from .toyworld import MASK, ConfigError


@dataclass
class SamplerConfig:
    lambda_a: float = 3.0
    lambda_i: float = 3.0
    w_c: float = 0.1
    w_s: float = 0.1
    w_r: float = 1.0
    steps: list[int] = field(default_factory=lambda: [16, 8, 8, 8])
    temperature: float = 1.0
    seed: int = 0
    # "multi": independent scales per source; "joint": one scale on the merged source
    guidance: str = "multi"
    lambda_joint: float = 3.0

    def validate(self, Q: int | None = None, T: int | None = None) -> None:
        vals = [self.lambda_a, self.lambda_i, self.w_c, self.w_s, self.w_r, self.lambda_joint]
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ConfigError("guidance scales and ranking weights must be finite and >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.guidance not in ("multi", "joint"):
            raise ConfigError(f"unknown guidance mode {self.guidance!r}")
        if not self.steps or any(s < 1 for s in self.steps):
            raise ConfigError("every level needs at least one decoding step")
        if Q is not None and len(self.steps) != Q:
            raise ConfigError(f"{len(self.steps)} step counts for {Q} levels")
        if T is not None and max(self.steps) > T:
            raise ConfigError(f"step count {max(self.steps)} exceeds sequence length {T}")

    def to_toml(self) -> str:
        return tomli_w.dumps(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown sampler keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_toml(cls, text: str) -> "SamplerConfig":
        return cls.from_dict(tomli.loads(text))


@dataclass
class DecodeState:
    grid: np.ndarray  # (B, Q, T), MASK where undecided
    level: int  # 1-based level being decoded
    committed: np.ndarray  # (B, Q, T) bool
    commit_step: np.ndarray  # (B, Q, T) iteration at which a cell was committed, -1 if not

    def check(self) -> None:
        q = self.level - 1
        if (self.committed & (self.grid == MASK)).any():
            raise AssertionError("committed cell holds MASK")
        if not self.committed[:, :q].all():
            raise AssertionError("coarser levels not fully committed")
        if not (self.grid[:, q + 1:] == MASK).all():
            raise AssertionError("finer levels not fully masked")


def _as_tensor(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def cfg_logits(full, ctx_only, cat_only, uncond, lambda_a: float, lambda_i: float):
    """Guided log-scores with independent scales for the context and category sources.

    ``lambda_a * l(ctx_only) + lambda_i * l(cat_only) + (1 - lambda_a - lambda_i) * l(uncond)``
    with ``l`` the log-softmax over the last axis. ``full`` only has to match in shape.
    """
    parts = [_as_tensor(x) for x in (full, ctx_only, cat_only, uncond)]
    if len({tuple(p.shape) for p in parts}) != 1:
        raise ValueError("logit sets differ in shape")
    _, lc, li, lu = (p.log_softmax(-1) for p in parts)
    return lambda_a * lc + lambda_i * li + (1.0 - lambda_a - lambda_i) * lu


def joint_cfg_logits(full, uncond, lam: float):
    """Single-scale guidance over the merged conditioning: ``lam * l(full) + (1 - lam) * l(uncond)``."""
    full, uncond = _as_tensor(full), _as_tensor(uncond)
    if full.shape != uncond.shape:
        raise ValueError("logit sets differ in shape")
    return lam * full.log_softmax(-1) + (1.0 - lam) * uncond.log_softmax(-1)


def rank(confidence: np.ndarray, w_c: float, w_s: float, w_r: float,
         rng: np.random.Generator) -> np.ndarray:
    """Ranking score per position: ``w_c * c + w_s * (1 - n/N) + w_r * U(0, 1)``.

    ``confidence`` has the sequence on its last axis (length N). One uniform
    draw is consumed per entry whatever the weights, so the random stream does
    not depend on them.
    """
    confidence = np.asarray(confidence, dtype=np.float64)
    N = confidence.shape[-1]
    causal = 1.0 - np.arange(N) / N
    noise = rng.random(confidence.shape)
    return w_c * confidence + w_s * causal + w_r * noise


def unmask_schedule(T: int, steps: int) -> list[int]:
    """Commit counts per iteration: ceil(remaining / iterations left), so all counts are >= 1."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > T:
        raise ValueError(f"cannot spread {T} positions over {steps} steps")
    out, left = [], T
    for i in range(steps):
        k = -(-left // (steps - i))
        out.append(k)
        left -= k
    return out


def initial_state(context: np.ndarray) -> DecodeState:
    B, Q, T = context.shape
    return DecodeState(np.full((B, Q, T), MASK, dtype=np.int64), 1,
                       np.zeros((B, Q, T), dtype=bool), np.full((B, Q, T), -1, dtype=np.int64))


@torch.no_grad()
def guided_logprobs(model, context, category, grid, cfg: SamplerConfig) -> torch.Tensor:
    """(B, Q, T, K) float64 guided scores for the current partially decoded ``grid``.

    All conditioning variants run as one stacked batch; the model treats batch
    items independently.
    """
    B = context.shape[0]
    category = np.asarray(category, dtype=np.int64)
    null_cat = np.full(B, NULL_CATEGORY)
    yes, no = np.zeros(B, dtype=bool), np.ones(B, dtype=bool)
    if cfg.guidance == "multi":
        # ctx-only, cat-only, unconditional
        cats = np.concatenate([null_cat, category, null_cat])
        ctx_null = np.concatenate([yes, no, no])
    else:
        # full, unconditional
        cats = np.concatenate([category, null_cat])
        ctx_null = np.concatenate([yes, no])
    n = len(cats) // B
    logits = model.predict(np.tile(context, (n, 1, 1)), np.tile(grid, (n, 1, 1)), cats, ctx_null)
    logits = logits.double().reshape(n, B, *logits.shape[1:])
    if cfg.guidance == "multi":
        lc, li, lu = logits
        return cfg_logits(lc, lc, li, lu, cfg.lambda_a, cfg.lambda_i)
    return joint_cfg_logits(logits[0], logits[1], cfg.lambda_joint)


def sample_candidates(scores: torch.Tensor, temperature: float, rng: np.random.Generator):
    """Categorical draw per position from softmax(scores / temperature).

    Returns the tokens and their confidence, the softmax probability of the
    drawn token at temperature 1.
    """
    probs_t = torch.softmax(scores / temperature, -1).numpy()
    cdf = np.cumsum(probs_t, -1)
    u = 1.0 - rng.random(cdf.shape[:-1])  # (0, 1]
    tokens = np.minimum((cdf < u[..., None]).sum(-1), cdf.shape[-1] - 1)
    probs = torch.softmax(scores, -1).numpy()
    conf = np.take_along_axis(probs, tokens[..., None], -1)[..., 0]
    return tokens, conf


def decode_level(model, state: DecodeState, cfg: SamplerConfig, context, category,
                 rng: np.random.Generator) -> DecodeState:
    """Fill level ``state.level`` over ``cfg.steps[level - 1]`` iterations.

    Each iteration samples candidates at still-masked cells, ranks them and
    commits the best ``k`` per the linear schedule. Committed cells never change.
    """
    c = model.config
    B, Q, T = state.grid.shape
    if (Q, T) != (c.Q, c.T):
        raise ValueError(f"grid (Q={Q}, T={T}) does not match model (Q={c.Q}, T={c.T})")
    state.check()
    q = state.level - 1
    grid, committed, commit_step = state.grid.copy(), state.committed.copy(), state.commit_step.copy()
    rows = np.arange(B)[:, None]
    for it, k in enumerate(unmask_schedule(T, cfg.steps[q])):
        scores = guided_logprobs(model, context, category, grid, cfg)[:, q]
        tokens, conf = sample_candidates(scores, cfg.temperature, rng)
        rho = rank(conf, cfg.w_c, cfg.w_s, cfg.w_r, rng)
        rho[committed[:, q]] = -np.inf
        # stable sort: ties go to the lower position
        chosen = np.argsort(-rho, axis=1, kind="stable")[:, :k]
        grid[rows, q, chosen] = tokens[rows, chosen]
        committed[rows, q, chosen] = True
        commit_step[rows, q, chosen] = it
    if not committed[:, q].all():
        raise AssertionError("schedule left masked cells")
    return DecodeState(grid, state.level, committed, commit_step)


def generate(model, context, category, cfg: SamplerConfig, return_state: bool = False):
    """Decode all levels coarse to fine for a batch (B, Q, T) or a single (Q, T) context."""
    context = np.asarray(context, dtype=np.int64)
    single = context.ndim == 2
    if single:
        context = context[None]
    category = np.atleast_1d(np.asarray(category, dtype=np.int64))
    if (context == MASK).any():
        raise ValueError("context must be fully unmasked")
    c = model.config
    cfg.validate(c.Q, c.T)
    rng = np.random.default_rng(cfg.seed)
    state = initial_state(context)
    for level in range(1, c.Q + 1):
        state.level = level
        state = decode_level(model, state, cfg, context, category, rng)
    out = state.grid[0] if single else state.grid
    return (out, state) if return_state else out
