"""Monte Carlo simulation of patient futures.

Futures are sampled token by token from any decoder exposing the
start/advance/next_logits session protocol (the transformer, or tiny
hand-built automata in tests). Future i draws its randomness from the
dedicated stream (base_seed, i), pre-drawn positionally, and futures are
processed in fixed 64-row chunks, so the sampled bundle is identical no
matter how chunks are scheduled across threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import select_tokens
from .sequencer import TokenSequence, event_group_tokens
from .vocab import EOS_ID, MedicalEvent, Vocabulary

CHUNK_ROWS = 64


class SimulationError(Exception):
    pass


class PromptTooLong(SimulationError):
    pass


class UnknownPredicate(SimulationError):
    pass


@dataclass
class SimulationRequest:
    prompt: TokenSequence
    n_futures: int = 64
    horizon_days: int = 365
    temperature: float = 1.0
    top_k: int = 0
    base_seed: int = 0
    max_tokens_per_future: int | None = None   # default: room left in context

    def __post_init__(self):
        if self.n_futures < 1:
            raise SimulationError("n_futures must be >= 1")
        if self.horizon_days < 1:
            raise SimulationError("horizon_days must be >= 1")


@dataclass
class EventProbTable:
    predicate: tuple[str, ...]
    bucket_days: int
    probs: list[float]            # first-occurrence mass per time bucket
    any_time: float               # within the window (sum of the buckets)


@dataclass
class SimulationBundle:
    futures: list[list[int]]
    per_future_cost: list[float]
    predicted_cost: float
    cost_std_error: float
    n_futures: int
    n_futures_completed: int      # ended by horizon or EOS, not the token cap
    event_probs: list[EventProbTable] = field(default_factory=list)


def future_stream(base_seed: int, index: int) -> np.random.Generator:
    """Independent per-future RNG stream."""
    return np.random.Generator(np.random.Philox(key=base_seed).jumped(index))


def _sample_chunk(decoder, vocab: Vocabulary, prompt: list[int],
                  request: SimulationRequest, rows: range, max_tokens: int):
    """Sample futures for one fixed chunk of future indices."""
    n = len(rows)
    draws = np.empty((n, max_tokens))
    for j, i in enumerate(rows):
        draws[j] = future_stream(request.base_seed, i).random(max_tokens)
    state = decoder.start(prompt, n)
    futures: list[list[int]] = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    completed = np.zeros(n, dtype=bool)
    cum_days = np.zeros(n, dtype=np.int64)
    for step in range(max_tokens):
        tokens = select_tokens(state.next_logits, draws[:, step],
                               request.temperature, request.top_k)
        for j in range(n):
            if done[j]:
                continue
            t = int(tokens[j])
            futures[j].append(t)
            if t == EOS_ID:
                done[j] = True
                completed[j] = True
                continue
            if vocab.is_gap(t):
                cum_days[j] += vocab.gap_days(t)
                if cum_days[j] > request.horizon_days:
                    done[j] = True
                    completed[j] = True
        if done.all() or step == max_tokens - 1:
            break
        # Finished rows keep stepping on PAD; their output is already cut.
        feed = np.where(done, 0, tokens)
        decoder.advance(state, feed)
    return futures, completed


def simulate_futures(decoder, vocab: Vocabulary, request: SimulationRequest,
                     workers: int = 1) -> SimulationBundle:
    """Sample n_futures continuations and aggregate them into a bundle.

    Reproducible given (decoder params, request); `workers` only changes
    how the fixed chunks are executed, never the result.
    """
    prompt = list(request.prompt.tokens)
    if len(prompt) >= decoder.context_len:
        raise PromptTooLong(
            f"prompt has {len(prompt)} tokens; needs to be < context_len "
            f"{decoder.context_len} to generate")
    room = decoder.context_len - len(prompt)
    max_tokens = min(request.max_tokens_per_future or room, room)

    chunks = [range(c, min(c + CHUNK_ROWS, request.n_futures))
              for c in range(0, request.n_futures, CHUNK_ROWS)]

    def run(chunk):
        return _sample_chunk(decoder, vocab, prompt, request, chunk, max_tokens)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]

    futures: list[list[int]] = []
    completed = 0
    for fs, comp in results:
        futures.extend(fs)
        completed += int(comp.sum())
    costs = [cost_of_future(f, vocab, request.horizon_days) for f in futures]
    mean = math.fsum(costs) / len(costs)
    if len(costs) > 1:
        var = math.fsum((c - mean) ** 2 for c in costs) / (len(costs) - 1)
        se = math.sqrt(var / len(costs))
    else:
        se = 0.0
    return SimulationBundle(
        futures=futures, per_future_cost=costs, predicted_cost=mean,
        cost_std_error=se, n_futures=request.n_futures,
        n_futures_completed=completed)


def cost_of_future(future: list[int], vocab: Vocabulary,
                   horizon_days: int) -> float:
    """Sum of cost-token dollar values within the horizon.

    A cost token counts while the cumulative gap days before it are
    <= horizon_days.
    """
    total = []
    days = 0
    for t in future:
        if vocab.is_gap(t):
            days += vocab.gap_days(t)
            if days > horizon_days:
                break
        elif vocab.is_cost(t):
            total.append(vocab.dequantize_cost(t))
    return math.fsum(total)


def _predicate_ids(vocab: Vocabulary, predicate) -> tuple[tuple[str, ...], set[int]]:
    if isinstance(predicate, str):
        prefixes = (predicate,)
    else:
        prefixes = tuple(predicate)
    if not prefixes or any(not p.strip() for p in prefixes):
        raise UnknownPredicate(f"empty predicate {predicate!r}")
    ids = {t.id for t in vocab.tokens
           if any(t.surface.startswith(p) for p in prefixes)}
    return prefixes, ids


def first_match_days(future: list[int], vocab: Vocabulary,
                     match_ids: set[int]) -> int | None:
    """Cumulative gap days at the first matching token, None if absent."""
    days = 0
    for t in future:
        if vocab.is_gap(t):
            days += vocab.gap_days(t)
        elif t in match_ids:
            return days
    return None


def event_probability(bundle: SimulationBundle, predicate,
                      vocab: Vocabulary, bucketing: str = "monthly",
                      within_days: int | None = None) -> EventProbTable:
    """First-occurrence probability of a surface-prefix predicate over time.

    Bucket b covers cumulative gap days [b*W, (b+1)*W) with W = 30 (monthly)
    or 90 (quarterly); `any_time` is the probability of a match within
    `within_days` (default: the last bucket's end).
    """
    if bucketing not in ("monthly", "quarterly"):
        raise SimulationError(f"unknown bucketing {bucketing!r}")
    width = 30 if bucketing == "monthly" else 90
    prefixes, ids = _predicate_ids(vocab, predicate)
    horizon = within_days if within_days is not None else _max_days(bundle, vocab)
    n_buckets = max(1, math.ceil((horizon + 1) / width))
    counts = [0] * n_buckets
    hit = 0
    for f in bundle.futures:
        d = first_match_days(f, vocab, ids) if ids else None
        if d is None or d > horizon:
            continue
        counts[min(d // width, n_buckets - 1)] += 1
        hit += 1
    n = len(bundle.futures)
    return EventProbTable(
        predicate=prefixes, bucket_days=width,
        probs=[c / n for c in counts], any_time=hit / n)


def _max_days(bundle: SimulationBundle, vocab: Vocabulary) -> int:
    worst = 0
    for f in bundle.futures:
        days = sum(vocab.gap_days(t) for t in f if vocab.is_gap(t))
        worst = max(worst, days)
    return worst


def intervene(prompt: TokenSequence, event: MedicalEvent,
              vocab: Vocabulary) -> TokenSequence:
    """Append a hypothetical event to the prompt (same-day, no gap token)."""
    extra = event_group_tokens(event, vocab, strict=True)
    return TokenSequence(list(prompt.tokens) + extra, prompt.anchor_date,
                         prompt.patient_id)
