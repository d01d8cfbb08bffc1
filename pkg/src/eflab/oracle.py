"""Brute-force ground truth for tiny datasets.

Given a finite weighted dataset, the posterior over (data sequence, embedding
of the noisy state into it) is enumerated exactly. Marginalizing the
per-token conditional insertion rate over that posterior yields the exact
heads: P(k=0), E[k | k>0] and the expected bag composition per gap, which are
the population minimizers of the text losses. Images enter the discrete
skeleton as the image token; their continuous values give point targets for
the closed-form marginal velocity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from threading import RLock
from typing import Callable, Iterator, Sequence

import numpy as np

from eflab.corruption import CorruptionRecord, corrupt
from eflab.errors import BudgetError, DataError, DomainError, UnreachableStateError
from eflab.losses import InsertionHeads, text_loss
from eflab.schedule import ExtendedTime, Schedule
from eflab.sequence import MixedSequence, Vocabulary, is_image

MAX_EXPLICIT_LEN = 12
DEFAULT_BUDGET = 10_000


def count_embeddings(small: Sequence[int], big: Sequence[int]) -> int:
    """Number of index sets under which ``small`` occurs as a subsequence of ``big``."""
    ways = [1] + [0] * len(small)
    for b in big:
        for j in range(len(small), 0, -1):
            if small[j - 1] == b:
                ways[j] += ways[j - 1]
    return ways[len(small)]


def iter_embeddings(small: Sequence[int], big: Sequence[int]) -> Iterator[tuple[int, ...]]:
    """All increasing position tuples ``e`` with ``big[e[j]] == small[j]``."""
    m, n = len(small), len(big)

    def rec(j: int, start: int, acc: tuple[int, ...]):
        if j == m:
            yield acc
            return
        for pos in range(start, n - (m - j) + 1):
            if big[pos] == small[j]:
                yield from rec(j + 1, pos + 1, acc + (pos,))

    yield from rec(0, 0, ())


def gap_bags(target: Sequence[int], embedding: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Deleted symbols between consecutive embedded positions (m + 1 bags)."""
    bounds = (-1,) + embedding + (len(target),)
    return [tuple(target[bounds[j] + 1 : bounds[j + 1]]) for j in range(len(bounds) - 1)]


@dataclass
class GapStats:
    """Exact per-gap insertion statistics at one (state, time)."""

    p_zero: np.ndarray
    mean_k: np.ndarray
    mean_k_nonzero: np.ndarray
    bag_mean: np.ndarray  # (gaps, M + 1) expected bag counts

    @property
    def q(self) -> np.ndarray:
        out = np.zeros_like(self.bag_mean)
        for g, total in enumerate(self.mean_k):
            if total > 0:
                out[g] = self.bag_mean[g] / total
            else:
                out[g] = 1.0 / out.shape[1]
        return out

    def heads(self) -> InsertionHeads:
        return InsertionHeads(self.p_zero.copy(), self.mean_k_nonzero.copy(), self.q)


@dataclass
class OracleTable:
    dataset: list[tuple[MixedSequence, float]]
    vocab: Vocabulary
    schedule: Schedule = field(default_factory=Schedule.linear)
    budget: int = DEFAULT_BUDGET
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: RLock = field(default_factory=RLock, repr=False)

    def __post_init__(self):
        if not self.dataset:
            raise DataError("oracle needs a non-empty dataset")
        total = sum(w for _, w in self.dataset)
        if total <= 0 or any(w < 0 for _, w in self.dataset):
            raise DataError("dataset weights must be non-negative with positive total")
        self.dataset = [(s, w / total) for s, w in self.dataset]
        img = self.vocab.image_token_id
        self._symbols = [(s.symbols(img)[: s.prompt_len], s.symbols(img)[s.prompt_len :]) for s, _ in self.dataset]
        for seq, _ in self.dataset:
            if len(seq.target) > MAX_EXPLICIT_LEN:
                raise BudgetError(f"oracle enumerates sequences up to length {MAX_EXPLICIT_LEN}")

    def __getstate__(self):
        # the lock cannot cross process boundaries; the cache is cheap to rebuild
        state = dict(self.__dict__)
        state["_cache"] = {}
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = RLock()

    @classmethod
    def uniform(cls, seqs: Sequence[MixedSequence], vocab: Vocabulary, **kw) -> OracleTable:
        return cls([(s, 1.0) for s in seqs], vocab, **kw)

    def without_prompts(self) -> OracleTable:
        """The prompt-marginal dataset, used as the unconditional model for guidance."""
        return OracleTable(
            [(s.without_prompt(), w) for s, w in self.dataset], self.vocab, self.schedule, self.budget
        )

    def _key(self, x_t: MixedSequence, t: float):
        return (x_t.symbols(self.vocab.image_token_id), x_t.prompt_len, round(t, 9))

    # -- posterior -------------------------------------------------------------

    def _log_weights(self, x_t: MixedSequence, t: float) -> np.ndarray:
        if not 0.0 <= t < 1.0:
            raise DomainError(f"oracle time must lie in [0, 1), got {t}")
        syms = x_t.symbols(self.vocab.image_token_id)
        prompt, tgt = syms[: x_t.prompt_len], syms[x_t.prompt_len :]
        k = self.schedule.kappa(t)
        m = len(tgt)
        out = np.full(len(self.dataset), -np.inf)
        for d, ((dp, dt), (_, w)) in enumerate(zip(self._symbols, self.dataset)):
            if dp != prompt or w == 0 or len(dt) < m:
                continue
            ways = count_embeddings(tgt, dt)
            if ways == 0 or (m > 0 and k == 0.0):
                continue
            deleted = len(dt) - m
            out[d] = math.log(w) + math.log(ways) + (m * math.log(k) if m else 0.0) + deleted * math.log1p(-k)
        return out

    def posterior(self, x_t: MixedSequence, t: float) -> dict[int, float]:
        logw = self._log_weights(x_t, t)
        if not np.isfinite(logw).any():
            raise UnreachableStateError(f"no data sequence contains state {x_t.symbols(self.vocab.image_token_id)}")
        w = np.exp(logw - logw.max())
        w /= w.sum()
        return {d: float(p) for d, p in enumerate(w) if p > 0}

    def weighted_embeddings(self, x_t: MixedSequence, t: float) -> list[tuple[int, tuple[int, ...], float]]:
        """(data index, embedding, probability) triples under the posterior."""
        tgt = x_t.symbols(self.vocab.image_token_id)[x_t.prompt_len :]
        out = []
        explored = 0
        for d, p in self.posterior(x_t, t).items():
            dt = self._symbols[d][1]
            embs = list(iter_embeddings(tgt, dt))
            explored += len(embs)
            if explored > self.budget:
                raise BudgetError(f"embedding enumeration exceeded budget {self.budget}")
            for e in embs:
                out.append((d, e, p / len(embs)))
        return out

    # -- heads -----------------------------------------------------------------

    def gap_stats(self, x_t: MixedSequence, t: float) -> GapStats:
        key = self._key(x_t, t)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        G = x_t.n_gaps
        p = x_t.prompt_len
        K = self.vocab.head_size
        p_zero = np.ones(G)
        mean_k = np.zeros(G)
        p_nonzero = np.zeros(G)
        bag_mean = np.zeros((G, K))
        for d, emb, w in self.weighted_embeddings(x_t, t):
            for j, bag in enumerate(gap_bags(self._symbols[d][1], emb)):
                if not bag:
                    continue
                g = p + j
                p_nonzero[g] += w
                mean_k[g] += w * len(bag)
                for a in bag:
                    bag_mean[g, a] += w
        p_zero = np.clip(1.0 - p_nonzero, 0.0, 1.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean_nz = np.where(p_nonzero > 0, mean_k / np.where(p_nonzero > 0, p_nonzero, 1.0), 1.0)
        # exact zeros/ones for gaps that are deterministic
        p_zero[p_nonzero == 0] = 1.0
        stats = GapStats(p_zero, mean_k, mean_nz, bag_mean)
        with self._lock:
            self._cache[key] = stats
        return stats

    def heads(self, x_t: MixedSequence, t: float) -> InsertionHeads:
        return self.gap_stats(x_t, t).heads()

    # -- images ----------------------------------------------------------------

    def image_targets(self, x_t: MixedSequence, t_text: float, element_index: int) -> tuple[np.ndarray, np.ndarray]:
        """Clean point targets (and prior weights) for the image at ``element_index`` of ``x_t``."""
        if not is_image(x_t[element_index]):
            raise DataError(f"element {element_index} is not an image")
        p = x_t.prompt_len
        if element_index < p:
            raise DataError("prompt images are clean conditioning, not generated")
        j = element_index - p
        acc: dict[bytes, list] = {}
        for d, emb, w in self.weighted_embeddings(x_t, t_text):
            src = self.dataset[d][0].target[emb[j]]
            key = src.values.tobytes()
            if key in acc:
                acc[key][1] += w
            else:
                acc[key] = [src.values, w]
        targets = np.array([v for v, _ in acc.values()])
        weights = np.array([w for _, w in acc.values()])
        return targets, weights / weights.sum()

    def velocity(self, x_t: MixedSequence, t_text: float, element_index: int) -> np.ndarray:
        img = x_t[element_index]
        targets, weights = self.image_targets(x_t, min(t_text, 1.0 - 1e-12), element_index)
        return point_target_velocity(targets, weights, img.values, img.t)


def posterior_over_data(table: OracleTable, x_t: MixedSequence, t: float) -> dict[int, float]:
    return table.posterior(x_t, t)


def oracle_heads(table: OracleTable, x_t: MixedSequence, t: float) -> InsertionHeads:
    return table.heads(x_t, t)


def point_target_velocity(targets, weights, y_t, t: float) -> np.ndarray:
    """E[Y1 - Y0 | Y_t = y_t] when Y1 is a weighted point set and Y0 ~ N(0, I).

    ``y_t`` may carry leading batch axes; the last axis is the image dimension.
    """
    if not 0.0 <= t < 1.0:
        raise DomainError(f"velocity is undefined at t_img = {t}")
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64)
    y_t = np.asarray(y_t, dtype=np.float64)
    sq = np.sum((y_t[..., None, :] - t * targets) ** 2, axis=-1)
    logits = np.log(weights) - sq / (2.0 * (1.0 - t) ** 2)
    resp = np.exp(logits - logits.max(axis=-1, keepdims=True))
    resp /= resp.sum(axis=-1, keepdims=True)
    return (resp @ targets - y_t) / (1.0 - t)


def oracle_velocity(
    table: OracleTable,
    y_t,
    t_img: float,
    x_context: MixedSequence,
    element_index: int | None = None,
    t_text: float = 0.5,
):
    """Marginal velocity of one image of ``x_context`` evaluated at state ``y_t``.

    ``t_text`` only matters through the posterior over data sequences.
    """
    if element_index is None:
        element_index = [i for i in x_context.image_indices() if i >= x_context.prompt_len][0]
    targets, weights = table.image_targets(x_context, t_text, element_index)
    return point_target_velocity(targets, weights, y_t, t_img)


# -- expected losses over the exact corruption law -------------------------------


def corruption_outcomes(table: OracleTable, t: float) -> Iterator[tuple[float, CorruptionRecord]]:
    """Every (probability, record) the corruption at clipped time ``t`` can produce."""
    k = table.schedule.kappa(t)
    img = table.vocab.image_token_id
    explored = 0
    for seq, w in table.dataset:
        p = seq.prompt_len
        L = len(seq.target)
        explored += 2**L
        if explored > table.budget:
            raise BudgetError(f"corruption enumeration exceeded budget {table.budget}")
        for mask in product((False, True), repeat=L):
            m = sum(mask)
            prob = w * (k**m) * ((1.0 - k) ** (L - m))
            if prob == 0.0:
                continue
            kept = list(seq.prompt)
            bags: list[list[int]] = [[] for _ in range(p + 1)]
            alignment = {i: i for i in range(p)}
            for j, keep in enumerate(mask):
                el = seq.target[j]
                if keep:
                    alignment[len(kept)] = p + j
                    kept.append(el)
                    bags.append([])
                else:
                    bags[-1].append(img if is_image(el) else int(el))
            x_t = seq.replace(kept)
            rec = CorruptionRecord(
                x_t=x_t,
                bags=bags,
                tau_text=ExtendedTime(t),
                image_times=[x_t[i].time for i in x_t.image_indices()],
                alignment=alignment,
                source_len=len(seq),
            )
            yield prob, rec


def expected_text_loss(
    table: OracleTable, t: float, heads_fn: Callable[[MixedSequence], InsertionHeads]
) -> float:
    total = 0.0
    for prob, rec in corruption_outcomes(table, t):
        total += prob * text_loss(heads_fn(rec.x_t), rec).text_total
    return total


def loss_floor(table: OracleTable, t: float, mode: str = "text_only") -> float:
    """Population minimum of the text loss at time ``t`` (oracle heads plugged in)."""
    if mode not in ("text_only", "interleaved"):
        raise DataError(f"loss floor is defined for text_only and interleaved modes, not {mode}")
    if t >= 1.0:
        return 0.0
    return expected_text_loss(table, t, lambda x: table.heads(x, t))


# -- Monte Carlo route, independent of the enumeration ---------------------------


@dataclass
class SimulatedStats:
    accepted: int
    p_zero: np.ndarray
    mean_k: np.ndarray
    bag_mean: np.ndarray


def simulate_gap_statistics(
    table: OracleTable, x_t: MixedSequence, t: float, n_draws: int, rng: np.random.Generator
) -> SimulatedStats:
    """Rejection-sample the corruption process and keep draws that land on ``x_t``."""
    img = table.vocab.image_token_id
    want = x_t.symbols(img)
    weights = np.array([w for _, w in table.dataset])
    G = x_t.n_gaps
    zero = np.zeros(G)
    ksum = np.zeros(G)
    bag = np.zeros((G, table.vocab.head_size))
    accepted = 0
    picks = rng.choice(len(weights), size=n_draws, p=weights)
    for d in picks:
        rec = corrupt(table.dataset[d][0], table.schedule, "text_only", rng, tau_text=t, image_token_id=img)
        if rec.x_t.symbols(img) != want or rec.x_t.prompt_len != x_t.prompt_len:
            continue
        accepted += 1
        for g, b in enumerate(rec.bags):
            zero[g] += not b
            ksum[g] += len(b)
            for a in b:
                bag[g, a] += 1
    if accepted == 0:
        raise UnreachableStateError("no simulated corruption reached the queried state")
    return SimulatedStats(accepted, zero / accepted, ksum / accepted, bag / accepted)


class OracleModel:
    """Adapter exposing an :class:`OracleTable` through the sampler's model interface.

    With ``freeze_off_support`` a state no data sequence explains (reachable
    only through discretization error) gets zero insertion rate and zero
    velocity, so the run ends there and counts against the data in TV.
    """

    def __init__(self, table: OracleTable, freeze_off_support: bool = False):
        self.table = table
        self.freeze_off_support = freeze_off_support

    def insertion_heads(self, seq: MixedSequence, t_text: float) -> InsertionHeads:
        try:
            return self.table.heads(seq, t_text)
        except UnreachableStateError:
            if not self.freeze_off_support:
                raise
            G = seq.n_gaps
            K = self.table.vocab.head_size
            return InsertionHeads(np.ones(G), np.ones(G), np.full((G, K), 1.0 / K))

    def velocities(self, seq: MixedSequence, t_text: float) -> dict[int, np.ndarray]:
        out = {}
        for i in seq.image_indices():
            if i < seq.prompt_len or seq[i].t >= 1.0:
                continue
            try:
                out[i] = self.table.velocity(seq, t_text, i)
            except UnreachableStateError:
                if not self.freeze_off_support:
                    raise
                out[i] = np.zeros_like(seq[i].values)
        return out
