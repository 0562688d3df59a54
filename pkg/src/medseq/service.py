"""HTTP simulation service.

Wraps one immutable (checkpoint, vocabulary) snapshot behind JSON
endpoints: /v1/simulate, /v1/intervene, /v1/vocab, /v1/health. Every
response echoes the seed it ran with, so any result can be reproduced
from its own body. A bounded semaphore sheds load with 503 instead of
queueing without limit.
"""

from __future__ import annotations

import math
import secrets
import threading
from dataclasses import dataclass, asdict
from datetime import date

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .cohort import ConditionMap
from .model import PrefixTooLong, TransformerDecoder, load_checkpoint
from .montecarlo import (PromptTooLong, SimulationRequest,
                         event_probability, intervene, simulate_futures)
from .sequencer import TokenSequence, linearize
from .synth import PatientTimeline
from .vocab import (BOS_ID, CodeSystem, EOS_ID, MedicalEvent, UnknownCode,
                    VocabError, Vocabulary)


class ServiceError(Exception):
    pass


@dataclass
class ServiceConfig:
    checkpoint: str = "model.ckpt"
    vocab: str = "vocab.tsv"
    host: str = "127.0.0.1"
    port: int = 8080
    n_futures: int = 64
    horizon_days: int = 365
    temperature: float = 1.0
    top_k: int = 0
    max_concurrent: int = 4
    max_history_events: int = 2048
    default_as_of: str = "2018-12-31"

    def __post_init__(self):
        if self.max_concurrent < 1:
            raise ServiceError("max_concurrent must be >= 1")


def load_service_config(path) -> ServiceConfig:
    """Parse the key = value config file (one pair per line, # comments)."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ServiceError(f"line {line_no}: expected key = value")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    kwargs = {}
    for f_name, f_type in (("checkpoint", str), ("vocab", str), ("host", str),
                           ("port", int), ("n_futures", int),
                           ("horizon_days", int), ("temperature", float),
                           ("top_k", int), ("max_concurrent", int),
                           ("max_history_events", int), ("default_as_of", str)):
        if f_name in values:
            kwargs[f_name] = f_type(values[f_name])
    unknown = set(values) - set(kwargs)
    if unknown:
        raise ServiceError(f"unknown config keys: {sorted(unknown)}")
    return ServiceConfig(**kwargs)


class _HttpFail(Exception):
    def __init__(self, status: int, detail: str):
        self.status = status
        self.detail = detail


def _build_prompt(history, vocab: Vocabulary, as_of: date,
                  max_events: int) -> TokenSequence:
    """History is either a list of token surfaces or a structured object
    with demographics and dated coded events."""
    if isinstance(history, list):
        if not history:
            raise _HttpFail(400, "surface history must not be empty")
        if not all(isinstance(s, str) for s in history):
            raise _HttpFail(400, "surface history must be a list of strings")
        try:
            ids = [vocab.id_of(s) for s in history]
        except UnknownCode as e:
            raise _HttpFail(400, str(e))
        if ids[0] != BOS_ID:
            ids = [BOS_ID] + ids
        if ids and ids[-1] == EOS_ID:
            ids = ids[:-1]
        return TokenSequence(ids, as_of, "request")
    if not isinstance(history, dict):
        raise _HttpFail(400, "history must be a surface list or an object")
    sex = str(history.get("sex", "U")).upper()
    events_raw = history.get("events", [])
    if not isinstance(events_raw, list):
        raise _HttpFail(400, "history.events must be a list")
    if len(events_raw) > max_events:
        raise _HttpFail(413, f"history exceeds {max_events} events")
    events = []
    for i, raw in enumerate(events_raw):
        try:
            system = CodeSystem(str(raw["system"]).upper())
            when = date.fromisoformat(raw["date"]) if "date" in raw else as_of
            paid = raw.get("paid")
            events.append(MedicalEvent(when, system, str(raw.get("code", "")),
                                       paid=None if paid is None else float(paid)))
        except (KeyError, ValueError) as e:
            raise _HttpFail(400, f"history.events[{i}]: {e}")
    anchor = events[0].date if events else as_of
    if "birth_year" in history:
        birth_year = int(history["birth_year"])
    elif "age" in history:
        birth_year = anchor.year - int(history["age"])
    else:
        raise _HttpFail(400, "history needs age or birth_year")
    timeline = PatientTimeline(patient_id="request", sex=sex,
                               birth_year=birth_year, events=sorted(
                                   events, key=lambda e: e.date),
                               enrollment={}, as_of=anchor)
    try:
        seq = linearize(timeline, vocab, strict=True)
    except (UnknownCode, VocabError) as e:
        raise _HttpFail(400, str(e))
    return TokenSequence(seq.tokens[:-1], seq.anchor_date, "request")


def bundle_json(bundle, vocab, named_tables, seed, horizon_days,
                include_futures: bool) -> dict:
    """Wire form of a simulation bundle.

    event_probs is one row per (predicate, time bucket); any_time carries
    the within-horizon probability per predicate.
    """
    rows = []
    any_time = []
    for name, t in named_tables:
        rows.extend({"predicate": name, "bucket": i,
                     "bucket_days": t.bucket_days, "p": p}
                    for i, p in enumerate(t.probs))
        any_time.append({"predicate": name, "p": t.any_time})
    body = {
        "seed": seed,
        "horizon_days": horizon_days,
        "n_futures": bundle.n_futures,
        "n_futures_completed": bundle.n_futures_completed,
        "predicted_cost": bundle.predicted_cost,
        "cost_std_error": bundle.cost_std_error,
        "event_probs": rows,
        "any_time": any_time,
    }
    if include_futures:
        body["futures"] = [[vocab.surface(t) for t in f] for f in bundle.futures]
    return body


def _tracked_predicates(vocab: Vocabulary, cmap: ConditionMap):
    """Condition prefixes that actually resolve to vocabulary tokens."""
    tracked = []
    for row in cmap.rows:
        prefixes = tuple(f"DX:{p}" for p in row.icd10cm_prefixes)
        if any(t.surface.startswith(p) for t in vocab.tokens for p in prefixes):
            tracked.append((row.ccw_name, prefixes))
    return tracked


def create_app(config: ServiceConfig,
               decoder: TransformerDecoder | None = None,
               vocab: Vocabulary | None = None,
               condition_map: ConditionMap | None = None) -> FastAPI:
    """Assemble the service; loads checkpoint and vocab unless injected."""
    if vocab is None:
        vocab = Vocabulary.load(config.vocab)
    if decoder is None:
        params, model_config = load_checkpoint(config.checkpoint)
        decoder = TransformerDecoder(params, model_config)
    cmap = condition_map or ConditionMap.load()
    tracked = _tracked_predicates(vocab, cmap)
    as_of = date.fromisoformat(config.default_as_of)
    mismatch = decoder.vocab_size != len(vocab)
    sem = threading.BoundedSemaphore(config.max_concurrent)

    app = FastAPI(title="medseq simulation service")
    app.state.semaphore = sem
    app.state.decoder = decoder
    app.state.vocab = vocab

    @app.exception_handler(RequestValidationError)
    async def _on_validation(_req: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400,
                            content={"detail": "malformed body", "errors": exc.errors()})

    @app.exception_handler(_HttpFail)
    async def _on_fail(_req: Request, exc: _HttpFail):
        return JSONResponse(status_code=exc.status, content={"detail": exc.detail})

    def _guards():
        if mismatch:
            raise _HttpFail(422, f"checkpoint vocab_size {decoder.vocab_size} "
                                 f"!= vocabulary size {len(vocab)}")

    def _sim_args(body: dict, prompt_len: int):
        seed = body.get("seed")
        if seed is None:
            seed = secrets.randbits(48)
        n_futures = int(body.get("n_futures", config.n_futures))
        horizon = int(body.get("horizon_days", config.horizon_days))
        temperature = float(body.get("temperature", config.temperature))
        top_k = int(body.get("top_k", config.top_k))
        if n_futures < 1 or n_futures > 8192:
            raise _HttpFail(400, "n_futures must be in [1, 8192]")
        if horizon < 1 or temperature < 0 or top_k < 0:
            raise _HttpFail(400, "horizon_days >= 1, temperature >= 0, top_k >= 0")
        if prompt_len >= decoder.context_len:
            raise _HttpFail(413, f"history is {prompt_len} tokens; the model "
                                 f"context fits {decoder.context_len - 1}")
        return int(seed), n_futures, horizon, temperature, top_k

    def _simulate(prompt: TokenSequence, seed, n_futures, horizon,
                  temperature, top_k):
        request = SimulationRequest(
            prompt=prompt, n_futures=n_futures, horizon_days=horizon,
            temperature=temperature, top_k=top_k, base_seed=seed)
        try:
            bundle = simulate_futures(decoder, vocab, request)
        except PromptTooLong as e:
            raise _HttpFail(413, str(e))
        except PrefixTooLong as e:
            raise _HttpFail(400, str(e))
        named = [(name, event_probability(bundle, prefixes, vocab,
                                          within_days=horizon))
                 for name, prefixes in tracked]
        return bundle, named

    @app.post("/v1/simulate")
    def simulate(body: dict):
        _guards()
        if "history" not in body:
            raise _HttpFail(400, "body needs a history field")
        if not sem.acquire(blocking=False):
            raise _HttpFail(503, "simulation concurrency limit reached")
        try:
            prompt = _build_prompt(body["history"], vocab, as_of,
                                   config.max_history_events)
            seed, n_futures, horizon, temperature, top_k = _sim_args(
                body, len(prompt.tokens))
            bundle, named = _simulate(prompt, seed, n_futures, horizon,
                                      temperature, top_k)
            return bundle_json(bundle, vocab, named, seed, horizon,
                               bool(body.get("include_futures", False)))
        finally:
            sem.release()

    @app.post("/v1/intervene")
    def intervene_endpoint(body: dict):
        _guards()
        for need in ("history", "intervention"):
            if need not in body:
                raise _HttpFail(400, f"body needs a {need} field")
        if not sem.acquire(blocking=False):
            raise _HttpFail(503, "simulation concurrency limit reached")
        try:
            prompt = _build_prompt(body["history"], vocab, as_of,
                                   config.max_history_events)
            iv = body["intervention"]
            try:
                event = MedicalEvent(as_of, CodeSystem(str(iv["system"]).upper()),
                                     str(iv.get("code", "")),
                                     paid=iv.get("paid"))
                intervened = intervene(prompt, event, vocab)
            except (KeyError, ValueError, UnknownCode, VocabError) as e:
                raise _HttpFail(400, f"intervention: {e}")
            knobs = body.get("simulate", {})
            if not isinstance(knobs, dict):
                raise _HttpFail(400, "simulate must be an object")
            seed, n_futures, horizon, temperature, top_k = _sim_args(
                knobs, len(intervened.tokens))
            base_bundle, base_named = _simulate(prompt, seed, n_futures,
                                                horizon, temperature, top_k)
            int_bundle, int_named = _simulate(intervened, seed, n_futures,
                                              horizon, temperature, top_k)
            deltas = []
            for (name, bt), (_, it) in zip(base_named, int_named):
                pb, pi = bt.any_time, it.any_time
                se = math.sqrt(pb * (1 - pb) / n_futures
                               + pi * (1 - pi) / n_futures)
                deltas.append({"predicate": name, "p_base": pb,
                               "p_intervened": pi, "delta": pi - pb,
                               "std_error": se})
            include = bool(body.get("include_futures", False))
            return {
                "seed": seed,
                "base": bundle_json(base_bundle, vocab, base_named, seed,
                                    horizon, include),
                "intervened": bundle_json(int_bundle, vocab, int_named, seed,
                                          horizon, include),
                "deltas": deltas,
            }
        finally:
            sem.release()

    @app.get("/v1/vocab")
    def vocab_summary():
        kinds: dict[str, int] = {}
        for t in vocab.tokens:
            kinds[t.kind.value] = kinds.get(t.kind.value, 0) + 1
        return {
            "size": len(vocab),
            "kinds": kinds,
            "cost_edges": vocab.cost_edges,
            "gap_buckets": [{"lo": lo, "hi": hi, "name": name}
                            for lo, hi, name in vocab.gap_buckets],
            "surfaces": [t.surface for t in vocab.tokens],
        }

    @app.get("/v1/health")
    def health():
        return {
            "status": "vocab_mismatch" if mismatch else "ok",
            "model_config": asdict(decoder.config),
            "vocab_size": len(vocab),
            "defaults": {"n_futures": config.n_futures,
                         "horizon_days": config.horizon_days,
                         "temperature": config.temperature,
                         "top_k": config.top_k},
        }

    return app


def serve(config: ServiceConfig) -> None:
    """Run the service until interrupted."""
    import uvicorn

    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")
