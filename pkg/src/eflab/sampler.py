"""Generation: parallel insertions on a CTMC clock plus Euler steps for images.

Any object with ``insertion_heads(seq, t_text)`` and ``velocities(seq, t_text)``
can drive the sampler; both are evaluated once per step on the pre-step
state. Images carry their own clock and keep denoising after the text clock
reaches one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from eflab.errors import ConfigError, DataError
from eflab.losses import InsertionHeads, combine_rate
from eflab.schedule import ExtendedTime, Schedule
from eflab.sequence import ImageBlock, MixedSequence, Vocabulary, is_image

MODES = ("interleaved", "independent", "text_only")


class Model(Protocol):
    def insertion_heads(self, seq: MixedSequence, t_text: float) -> InsertionHeads: ...

    def velocities(self, seq: MixedSequence, t_text: float) -> dict[int, np.ndarray]: ...


@dataclass(frozen=True)
class SamplerConfig:
    dt: float = 0.01
    schedule: Schedule = field(default_factory=Schedule.linear)
    mode: str = "text_only"
    max_len: int = 64
    seed: int = 0
    guidance_w: float | None = None
    two_head_sampling: bool = True
    temperature: float = 1.0
    n_img: int = 2
    n_images: int = 1  # independent mode only: images present from the start
    image_substeps: int = 1

    def __post_init__(self):
        if not 0.0 < self.dt <= 1.0:
            raise ConfigError(f"dt must lie in (0, 1], got {self.dt}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown sampler mode {self.mode!r}")
        if self.guidance_w is not None and self.guidance_w < 0:
            raise ConfigError("guidance weight must be non-negative")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.image_substeps < 1:
            raise ConfigError("image_substeps must be at least 1")


@dataclass
class InsertionEvent:
    step: int
    t: float  # text time once the step completes
    gap: int
    token: int


@dataclass
class GenerationTrace:
    t_text: list[float] = field(default_factory=list)
    image_times: list[list[float]] = field(default_factory=list)
    events: list[InsertionEvent] = field(default_factory=list)
    # insertion time of each element of the current sequence (None for the prompt)
    born: list[float | None] = field(default_factory=list)
    clamp_count: int = 0
    truncated: bool = False
    final: MixedSequence | None = None

    def insertion_times(self) -> list[float]:
        return [b for b in self.born if b is not None]

    def to_json(self, image_token_id: int) -> dict:
        return {
            "t_text": self.t_text,
            "image_times": self.image_times,
            "events": [[e.step, e.t, e.gap, e.token] for e in self.events],
            "insertion_times": self.born,
            "clamp_count": self.clamp_count,
            "truncated": self.truncated,
            "final": list(self.final.symbols(image_token_id)) if self.final is not None else None,
        }


@dataclass
class SamplerState:
    seq: MixedSequence
    t_text: float = 0.0
    step: int = 0
    trace: GenerationTrace = field(default_factory=GenerationTrace)

    def pending_images(self) -> list[int]:
        return [i for i in self.seq.image_indices() if i >= self.seq.prompt_len and self.seq[i].t < 1.0]

    @property
    def done(self) -> bool:
        return self.t_text >= 1.0 and not self.pending_images()


# -- guidance --------------------------------------------------------------------


def cfg_heads(cond: InsertionHeads, uncond: InsertionHeads, w: float) -> InsertionHeads:
    """Geometric interpolation of rates and bag distributions.

    The effective rate (1 - pi) * lambda_nonzero is guided; the zero
    probability is interpolated the same way and lambda_nonzero recovered as
    the quotient, so the two-head sampler sees the guided rate.
    """
    if cond.n_gaps != uncond.n_gaps:
        raise DataError("conditional and unconditional heads disagree on gap count")
    if w == 1.0:
        return InsertionHeads(cond.pi.copy(), cond.lambda_nonzero.copy(), cond.q.copy())
    if w == 0.0:
        return InsertionHeads(uncond.pi.copy(), uncond.lambda_nonzero.copy(), uncond.q.copy())
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        rate = geometric_mix(combine_rate(cond.pi, cond.lambda_nonzero), combine_rate(uncond.pi, uncond.lambda_nonzero), w)
        pi = np.clip(geometric_mix(cond.pi, uncond.pi, w), 0.0, 1.0)
        lam = np.where(pi < 1.0, rate / (1.0 - pi), 1.0)
        lam = np.where(np.isfinite(lam), lam, np.inf)
        q = geometric_mix(cond.q, uncond.q, w)
        q = np.where(np.isfinite(q), q, 0.0)
        total = q.sum(axis=1, keepdims=True)
        q = np.where(total > 0, q / np.where(total > 0, total, 1.0), cond.q)
    return InsertionHeads(pi, lam, q)


def geometric_mix(a, b, w: float):
    """a**w * b**(1 - w), with 0**positive = 0 and 0**0 = 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = np.power(a, w) * np.power(b, 1.0 - w)
    # 0 * inf arises when the conditional rate is zero and w > 1: no insertion
    return np.where(np.isnan(out), 0.0, out)


class PromptDropped:
    """View of a model evaluated without the conditioning prompt.

    Heads are mapped back onto the gaps of the prompted sequence; the masked
    gaps inside the prompt get a no-insertion placeholder.
    """

    def __init__(self, model: Model):
        self.model = model

    def insertion_heads(self, seq: MixedSequence, t_text: float) -> InsertionHeads:
        p = seq.prompt_len
        inner = self.model.insertion_heads(seq.without_prompt(), t_text)
        if p == 0:
            return inner
        K = inner.q.shape[1]
        pi = np.concatenate([np.ones(p), inner.pi])
        lam = np.concatenate([np.ones(p), inner.lambda_nonzero])
        q = np.vstack([np.full((p, K), 1.0 / K), inner.q])
        return InsertionHeads(pi, lam, q)

    def velocities(self, seq: MixedSequence, t_text: float) -> dict[int, np.ndarray]:
        p = seq.prompt_len
        inner = self.model.velocities(seq.without_prompt(), t_text)
        return {i + p: v for i, v in inner.items()}


def _tempered(q: np.ndarray, temperature: float) -> np.ndarray:
    if temperature == 1.0:
        return q
    with np.errstate(divide="ignore"):
        logq = np.log(q) / temperature
    logq -= logq.max(axis=1, keepdims=True)
    out = np.exp(logq)
    return out / out.sum(axis=1, keepdims=True)


def _mask_image_token(q: np.ndarray, image_token_id: int) -> np.ndarray:
    q = q.copy()
    q[:, image_token_id] = 0.0
    total = q.sum(axis=1, keepdims=True)
    return np.divide(q, total, out=np.zeros_like(q), where=total > 0)


def step_heads(
    seq: MixedSequence,
    t_text: float,
    model: Model,
    cfg: SamplerConfig,
    vocab: Vocabulary,
    uncond_model: Model | None = None,
) -> InsertionHeads:
    """Heads actually used for sampling: tempered, guided and mode-masked."""
    heads = model.insertion_heads(seq, t_text)
    q = _tempered(heads.q, cfg.temperature)
    heads = InsertionHeads(heads.pi, heads.lambda_nonzero, q)
    if cfg.guidance_w is not None:
        if uncond_model is None:
            raise ConfigError("guidance needs an unconditional model")
        un = PromptDropped(uncond_model).insertion_heads(seq, t_text)
        un = InsertionHeads(un.pi, un.lambda_nonzero, _tempered(un.q, cfg.temperature))
        heads = cfg_heads(heads, un, cfg.guidance_w)
    if cfg.mode != "interleaved":
        heads = InsertionHeads(heads.pi, heads.lambda_nonzero, _mask_image_token(heads.q, vocab.image_token_id))
    return heads


def insertion_probabilities(
    heads: InsertionHeads, gaps, ratio: float, dt_text: float, two_head: bool
) -> tuple[np.ndarray, np.ndarray, int]:
    """(p_zero_gate, p_rate, clamp events) for the given gaps.

    In two-head mode a gap inserts iff both Bernoullis fire; in expectation
    mode ``p_zero_gate`` is all ones and the rate carries (1 - pi).
    """
    gaps = np.asarray(gaps, dtype=np.intp)
    pi = heads.pi[gaps]
    lam = heads.lambda_nonzero[gaps]
    if two_head:
        gate = 1.0 - pi
        raw = dt_text * ratio * lam
    else:
        gate = np.ones_like(pi)
        raw = dt_text * ratio * combine_rate(pi, lam)
    with np.errstate(invalid="ignore"):
        clamped = raw > 1.0
    return gate, np.minimum(np.nan_to_num(raw, nan=0.0, posinf=1.0), 1.0), int(np.count_nonzero(clamped))


def _sample_tokens(q_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(q_rows, axis=1)
    cdf[:, -1] = np.maximum(cdf[:, -1], 1.0)
    return (u[:, None] >= cdf).sum(axis=1)


# -- single run --------------------------------------------------------------------


def initial_state(prompt: MixedSequence, cfg: SamplerConfig, rng: np.random.Generator) -> SamplerState:
    if len(prompt) > cfg.max_len:
        raise DataError(f"prompt of length {len(prompt)} exceeds maximum {cfg.max_len}")
    seq = MixedSequence(prompt.elements, len(prompt), cfg.max_len)
    born: list[float | None] = [None] * len(seq)
    if cfg.mode == "independent":
        blocks = tuple(ImageBlock(rng.standard_normal(cfg.n_img), ExtendedTime(0.0)) for _ in range(cfg.n_images))
        seq = seq.replace(seq.elements + blocks)
        born += [0.0] * len(blocks)
    return SamplerState(seq=seq, trace=GenerationTrace(born=born))


def _flow_model(model: Model, cfg: SamplerConfig, uncond_model: Model | None) -> Model:
    """Images follow the conditional velocity, except at w = 0 where sampling is fully unconditional."""
    if cfg.guidance_w == 0.0 and uncond_model is not None:
        return PromptDropped(uncond_model)
    return model


def _advance_images(state: SamplerState, model: Model, cfg: SamplerConfig, vel: dict[int, np.ndarray]) -> MixedSequence:
    seq = state.seq
    pending = state.pending_images()
    if not pending:
        return seq
    els = list(seq.elements)
    for sub in range(cfg.image_substeps):
        if sub > 0:
            vel = model.velocities(seq.replace(els), state.t_text)
        for i in pending:
            img = els[i]
            t = img.t
            if t >= 1.0:
                continue
            h = min(1.0 - t, cfg.dt / cfg.image_substeps)
            new_t = 1.0 if h >= 1.0 - t else t + h
            els[i] = img.with_state(img.values + h * vel[i], new_t)
    return seq.replace(els)


def step(
    state: SamplerState,
    model: Model,
    cfg: SamplerConfig,
    vocab: Vocabulary,
    rng: np.random.Generator,
    uncond_model: Model | None = None,
) -> SamplerState:
    seq0 = state.seq
    t = state.t_text
    heads = step_heads(seq0, t, model, cfg, vocab, uncond_model) if t < 1.0 else None
    flow = _flow_model(model, cfg, uncond_model)
    vel = flow.velocities(seq0, t) if state.pending_images() else {}

    seq = _advance_images(state, flow, cfg, vel)
    trace = state.trace
    dt_text = min(1.0 - t, cfg.dt)
    new_t = 1.0 if dt_text >= 1.0 - t else t + dt_text
    if dt_text > 0 and heads is not None:
        gaps = np.array(seq0.active_gaps(), dtype=np.intp)
        ratio = float(cfg.schedule.rate_ratio(t))
        gate, p_rate, clamps = insertion_probabilities(heads, gaps, ratio, dt_text, cfg.two_head_sampling)
        trace.clamp_count += clamps
        fire = (rng.random(gaps.size) < gate) & (rng.random(gaps.size) < p_rate)
        chosen = gaps[fire]
        tokens = _sample_tokens(heads.q[chosen], rng.random(chosen.size))
        noise = {}
        for g, a in zip(chosen, tokens):
            if a == vocab.image_token_id:
                noise[int(g)] = rng.standard_normal(cfg.n_img)
        # right to left so earlier gap indices stay valid
        els = list(seq.elements)
        born = trace.born
        for g, a in sorted(zip(chosen.tolist(), tokens.tolist()), reverse=True):
            if len(els) + 1 > cfg.max_len:
                trace.truncated = True
                continue
            el = ImageBlock(noise[g], ExtendedTime(0.0)) if a == vocab.image_token_id else int(a)
            els.insert(g, el)
            born.insert(g, new_t)
            trace.events.append(InsertionEvent(state.step, new_t, g, int(a)))
        seq = seq.replace(els)
    trace.t_text.append(new_t)
    trace.image_times.append([seq[i].t for i in seq.image_indices() if i >= seq.prompt_len])
    return SamplerState(seq=seq, t_text=new_t, step=state.step + 1, trace=trace)


def generate(
    prompt: MixedSequence,
    model: Model,
    cfg: SamplerConfig,
    vocab: Vocabulary,
    rng: np.random.Generator,
    uncond_model: Model | None = None,
) -> tuple[MixedSequence, GenerationTrace]:
    state = initial_state(prompt, cfg, rng)
    while not state.done:
        state = step(state, model, cfg, vocab, rng, uncond_model)
    state.trace.final = state.seq
    return state.seq, state.trace


# -- many text-only runs at once ----------------------------------------------------


@dataclass
class BatchResult:
    sequences: list[tuple[int, ...]]  # generated targets (prompt excluded)
    insertion_times: list[list[float]]  # per run, aligned with its sequence
    clamp_count: int = 0
    truncated: int = 0


def generate_batch(
    prompt: MixedSequence,
    model: Model,
    cfg: SamplerConfig,
    vocab: Vocabulary,
    runs: int,
    rng: np.random.Generator,
    uncond_model: Model | None = None,
) -> BatchResult:
    """Text-only generation for many runs, sharing head evaluations across runs in the same state."""
    if cfg.mode != "text_only":
        raise ConfigError("batched generation supports text_only mode")
    if any(is_image(el) for el in prompt):
        raise ConfigError("batched generation takes token-only prompts")
    p = len(prompt)
    prompt_syms = tuple(int(x) for x in prompt)
    targets: list[tuple[int, ...]] = [()] * runs
    born: list[list[float]] = [[] for _ in range(runs)]
    clamps = 0
    truncated = 0
    t = 0.0
    while t < 1.0:
        dt_text = min(1.0 - t, cfg.dt)
        new_t = 1.0 if dt_text >= 1.0 - t else t + dt_text
        ratio = float(cfg.schedule.rate_ratio(t))
        groups: dict[tuple[int, ...], list[int]] = {}
        for r, tgt in enumerate(targets):
            groups.setdefault(tgt, []).append(r)
        for tgt, members in sorted(groups.items()):
            seq = MixedSequence(prompt_syms + tgt, p, cfg.max_len)
            heads = step_heads(seq, t, model, cfg, vocab, uncond_model)
            gaps = np.arange(p, len(seq) + 1)
            gate, p_rate, c = insertion_probabilities(heads, gaps, ratio, dt_text, cfg.two_head_sampling)
            R = len(members)
            clamps += c * R
            fire = (rng.random((R, gaps.size)) < gate) & (rng.random((R, gaps.size)) < p_rate)
            rows, cols = np.nonzero(fire)
            if rows.size == 0:
                continue
            tokens = _sample_tokens(heads.q[gaps[cols]], rng.random(rows.size))
            per_run: dict[int, list[tuple[int, int]]] = {}
            for row, col, a in zip(rows.tolist(), cols.tolist(), tokens.tolist()):
                per_run.setdefault(row, []).append((col, a))
            for row, ins in per_run.items():
                r = members[row]
                cur = list(tgt)
                times = born[r]
                for j, a in sorted(ins, reverse=True):
                    if p + len(cur) + 1 > cfg.max_len:
                        truncated += 1
                        continue
                    cur.insert(j, a)
                    times.insert(j, new_t)
                targets[r] = tuple(cur)
        t = new_t
    return BatchResult(targets, born, clamps, truncated)


# -- continuous ODE ------------------------------------------------------------------


def euler_flow(y, t0: float, t1: float, v: Callable[[np.ndarray, float], np.ndarray], steps: int) -> np.ndarray:
    if not 0.0 <= t0 < t1 <= 1.0:
        raise ConfigError(f"need 0 <= t0 < t1 <= 1, got {t0}, {t1}")
    if steps < 1:
        raise ConfigError("steps must be positive")
    y = np.array(y, dtype=np.float64)
    h = (t1 - t0) / steps
    for k in range(steps):
        y = y + h * v(y, t0 + k * h)
    return y
