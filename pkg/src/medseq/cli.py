"""Command line pipeline: gen-data, build-vocab, sequence, train, simulate,
eval-cost, eval-chronic, serve, plot.

Every stage takes --seed and writes byte-reproducible artifacts. Exit
codes: 0 success, 2 usage, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from datetime import date

from . import cohort as cohort_mod
from . import metrics as metrics_mod
from . import model as model_mod
from . import montecarlo as mc
from . import sequencer as seq_mod
from . import synth as synth_mod
from . import vocab as vocab_mod
from .cohort import ConditionMap, SimDefaults, SoaCohortCriteria
from .model import ModelConfig, NonFiniteLoss, TransformerDecoder
from .sequencer import TokenSequence
from .service import ServiceConfig, bundle_json, load_service_config, serve
from .vocab import CodeSystem, Vocabulary


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_decoder(args) -> tuple[TransformerDecoder, Vocabulary]:
    params, config = model_mod.load_checkpoint(args.ckpt)
    vocab = Vocabulary.load(args.vocab)
    if config.vocab_size != len(vocab):
        raise model_mod.ModelError(
            f"checkpoint vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
    return TransformerDecoder(params, config), vocab


def _ingest(args) -> list[synth_mod.PatientTimeline]:
    result = synth_mod.ingest_claims(args.claims, args.format)
    if result.rejects:
        _log(f"{len(result.rejects)} rejected lines")
        if getattr(args, "rejects", None):
            result.write_rejects(args.rejects)
    return result.timelines


def _corpus(timelines, vocab, context_len) -> list[TokenSequence]:
    stats = vocab_mod.EncodeStats()
    corpus = []
    for t in timelines:
        s = seq_mod.linearize(t, vocab, strict=False, stats=stats)
        corpus.append(seq_mod.truncate(s, context_len + 1, vocab))
    if stats.unknown_count:
        _log(f"{stats.unknown_count} unknown code pieces became UNK")
    return corpus


def cmd_gen_data(args) -> int:
    spec = synth_mod.default_spec(horizon_months=args.months,
                                  start=date.fromisoformat(args.start))
    cohort = synth_mod.generate_cohort(spec, args.patients, args.seed)
    synth_mod.serialize_timelines(cohort.timelines, args.out, args.format)
    _log(f"wrote {args.patients} patients to {args.out}")
    if args.truth_out:
        with open(args.truth_out, "w", encoding="utf-8") as fh:
            json.dump({"state_names": [s.name for s in spec.states],
                       "state_paths": cohort.state_paths}, fh, sort_keys=True)
        _log(f"wrote ground-truth state paths to {args.truth_out}")
    return 0


def cmd_build_vocab(args) -> int:
    timelines = _ingest(args)
    code_lists: dict[CodeSystem, set[str]] = {}
    for t in timelines:
        for e in t.events:
            if e.system in vocab_mod.CODED_SYSTEMS:
                code_lists.setdefault(e.system, set()).add(e.code)
    vocab = vocab_mod.build_vocab({k: sorted(v) for k, v in code_lists.items()})
    vocab.save(args.out)
    _log(f"vocabulary of {len(vocab)} tokens -> {args.out}")
    return 0


def cmd_sequence(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    timelines = _ingest(args)
    stats = vocab_mod.EncodeStats()
    seqs = [seq_mod.linearize(t, vocab, strict=False, stats=stats)
            for t in timelines]
    seq_mod.dump_sequences(seqs, vocab, args.out)
    _log(f"{len(seqs)} sequences -> {args.out}"
         + (f" ({stats.unknown_count} UNK substitutions)" if stats.unknown_count else ""))
    return 0


def cmd_train(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    timelines = _ingest(args)
    config = ModelConfig(
        vocab_size=len(vocab), context_len=args.context,
        d_model=args.d_model, n_heads=args.heads, n_layers=args.layers,
        learning_rate=args.lr, weight_decay=args.weight_decay,
        batch_size=args.batch, n_steps=args.steps, seed=args.seed,
        eval_every=args.eval_every)
    corpus = _corpus(timelines, vocab, config.context_len - 1)
    result = model_mod.train(corpus, config, log=_log if args.verbose else None)
    model_mod.save_checkpoint(args.out, result.params, config)
    if args.history:
        result.save_history(args.history)
    _log(f"trained {config.n_steps} steps; best val loss "
         f"{result.best_val_loss:.4f} at step {result.best_step}; "
         f"checkpoint -> {args.out}")
    return 0


def _prompt_from_args(args, vocab, decoder) -> TokenSequence:
    if args.history_json:
        with open(args.history_json, "r", encoding="utf-8") as fh:
            surfaces = json.load(fh)
        if not isinstance(surfaces, list):
            raise synth_mod.FormatError("history JSON must be a surface list")
        ids = [vocab.id_of(s) for s in surfaces]
        if not ids or ids[0] != vocab_mod.BOS_ID:
            ids = [vocab_mod.BOS_ID] + ids
        prompt = TokenSequence(ids, None, "cli")
    else:
        timelines = _ingest(args)
        match = [t for t in timelines if t.patient_id == args.patient_id]
        if not match:
            raise synth_mod.FormatError(f"patient {args.patient_id!r} not found")
        cutoff = date.fromisoformat(args.cutoff)
        prompt, _ = seq_mod.split_at(match[0], cutoff, vocab)
    return seq_mod.truncate(prompt, decoder.context_len - 1, vocab)


def cmd_simulate(args) -> int:
    decoder, vocab = _load_decoder(args)
    prompt = _prompt_from_args(args, vocab, decoder)
    request = mc.SimulationRequest(
        prompt=prompt, n_futures=args.n_futures, horizon_days=args.horizon,
        temperature=args.temperature, top_k=args.top_k, base_seed=args.seed)
    bundle = mc.simulate_futures(decoder, vocab, request)
    named = [(p, mc.event_probability(bundle, p, vocab, within_days=args.horizon))
             for p in (args.predicate or [])]
    body = bundle_json(bundle, vocab, named, args.seed, args.horizon,
                       args.include_futures)
    out = json.dumps(body, sort_keys=True, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(out + "\n")
    else:
        print(out)
    return 0


def cmd_eval_cost(args) -> int:
    decoder, vocab = _load_decoder(args)
    timelines = _ingest(args)
    criteria = SoaCohortCriteria(baseline_year=args.baseline_year,
                                 target_year=args.baseline_year + 1)
    sim = SimDefaults(n_futures=args.n_futures, temperature=args.temperature,
                      top_k=args.top_k, base_seed=args.seed)
    result = cohort_mod.run_cost_eval(
        decoder, vocab, timelines, criteria, sim,
        horizon_days=args.horizon, censor_threshold=args.censor,
        log=_log if args.verbose else None)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(result.to_json() + "\n")
    _log(f"cost report -> {args.out} (nmae {result.report.nmae:.1f}% vs "
         f"constant-mean {result.baseline_nmae:.1f}%)")
    if args.csv:
        result.report.write_csv(args.csv)
    if args.pairs:
        with open(args.pairs, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["actual", "predicted", "age_band", "sex"])
            for p in result.pairs:
                w.writerow([repr(p.actual), repr(p.predicted), p.age_band, p.sex])
    return 0


def cmd_eval_chronic(args) -> int:
    decoder, vocab = _load_decoder(args)
    timelines = _ingest(args)
    cmap = ConditionMap.load(args.map)
    sim = SimDefaults(n_futures=args.n_futures, temperature=args.temperature,
                      top_k=args.top_k, base_seed=args.seed)
    result = cohort_mod.run_condition_eval(
        decoder, vocab, timelines, cmap, args.target_year,
        window_months=args.window_months, sim=sim,
        log=_log if args.verbose else None)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(result.to_json() + "\n")
    _log(f"chronic report -> {args.out} (macro AUROC {result.macro_auroc:.3f} "
         f"over {result.n_evaluated} conditions)")
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["condition", "caliber", "n_positive",
                        "occurrence_ratio", "auroc", "auprc"])
            for r in result.rows:
                w.writerow([r.condition, r.caliber, r.n_positive,
                            repr(r.occurrence_ratio),
                            "" if r.auroc is None else repr(r.auroc),
                            "" if r.auprc is None else repr(r.auprc)])
    return 0


def cmd_serve(args) -> int:
    if args.config:
        config = load_service_config(args.config)
    else:
        config = ServiceConfig(checkpoint=args.ckpt, vocab=args.vocab,
                               host=args.host, port=args.port)
    serve(config)
    return 0


def cmd_plot(args) -> int:
    from . import plots

    made = plots.render_all(cost_report=args.cost_report,
                            chronic_report=args.chronic_report,
                            pairs=args.pairs, out_dir=args.out_dir)
    for path in made:
        _log(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medseq",
        description="Patient-history token modeling pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def claims_opts(p, required=True):
        p.add_argument("--claims", required=required, help="claims file")
        p.add_argument("--format", default="CSV_V1",
                       choices=["CSV_V1", "JSONL_V1"])
        p.add_argument("--rejects", help="write rejected lines report here")

    p = sub.add_parser("gen-data", help="generate a synthetic cohort")
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="CSV_V1", choices=["CSV_V1", "JSONL_V1"])
    p.add_argument("--months", type=int, default=24)
    p.add_argument("--start", default="2017-01-01")
    p.add_argument("--truth-out", help="side-channel ground truth JSON")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-vocab", help="build the vocabulary from claims")
    claims_opts(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("sequence", help="dump linearized sequences")
    claims_opts(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sequence)

    p = sub.add_parser("train", help="train the transformer")
    claims_opts(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="loss history CSV path")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--context", type=int, default=256)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--eval-every", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="sample futures for one prompt")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--history-json", help="JSON list of token surfaces")
    p.add_argument("--claims")
    p.add_argument("--format", default="CSV_V1", choices=["CSV_V1", "JSONL_V1"])
    p.add_argument("--rejects")
    p.add_argument("--patient-id")
    p.add_argument("--cutoff", default="2017-12-31")
    p.add_argument("--n-futures", type=int, default=64)
    p.add_argument("--horizon", type=int, default=365)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--predicate", action="append",
                   help="surface prefix to track (repeatable)")
    p.add_argument("--include-futures", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval-cost", help="next-year cost evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    claims_opts(p)
    p.add_argument("--baseline-year", type=int, default=2017)
    p.add_argument("--n-futures", type=int, default=64)
    p.add_argument("--horizon", type=int, default=365)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=0)
    p.add_argument("--censor", type=float, default=250_000.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--pairs")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_eval_cost)

    p = sub.add_parser("eval-chronic", help="chronic condition evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    claims_opts(p)
    p.add_argument("--target-year", type=int, default=2018)
    p.add_argument("--window-months", type=int, default=6)
    p.add_argument("--map", help="condition map CSV (default: packaged)")
    p.add_argument("--n-futures", type=int, default=64)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_eval_chronic)

    p = sub.add_parser("serve", help="run the HTTP simulation service")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--ckpt")
    p.add_argument("--vocab")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("plot", help="render SVG/CSV report figures")
    p.add_argument("--cost-report")
    p.add_argument("--chronic-report")
    p.add_argument("--pairs")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "simulate" and not args.history_json:
        if not (args.claims and args.patient_id):
            parser.error("simulate needs --history-json or --claims + --patient-id")
    if args.command == "serve" and not args.config:
        if not (args.ckpt and args.vocab):
            parser.error("serve needs --config or --ckpt + --vocab")
    try:
        return args.func(args)
    except NonFiniteLoss as e:
        print(f"error: numeric: {e}", file=sys.stderr)
        return 4
    except (vocab_mod.VocabError, synth_mod.SynthError, seq_mod.SequencerError,
            model_mod.ModelError, mc.SimulationError, cohort_mod.CohortError,
            metrics_mod.MetricError, OSError, ValueError) as e:
        print(f"error: data: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
