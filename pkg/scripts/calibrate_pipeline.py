"""Full-scale pipeline calibration: times each stage and reports the
headline numbers the acceptance gate asserts."""

import math
import time
from datetime import date

import numpy as np

from medseq.cohort import (ConditionMap, ConditionRow, SimDefaults,
                           SoaCohortCriteria, run_condition_eval,
                           run_cost_eval, soa_filter)
from medseq.model import ModelConfig, TransformerDecoder, train
from medseq.montecarlo import SimulationRequest, simulate_futures, first_match_days, _predicate_ids
from medseq.sequencer import TokenSequence, linearize, truncate
from medseq.synth import default_spec, generate_cohort, spec_code_lists
from medseq.vocab import build_vocab, CodeSystem, MedicalEvent
from medseq.montecarlo import intervene


def main():
    t_all = time.perf_counter()
    spec = default_spec()
    vocab = build_vocab(spec_code_lists(spec))
    t0 = time.perf_counter()
    cohort = generate_cohort(spec, 6000, seed=20170101)
    print(f"gen 6000: {time.perf_counter()-t0:.0f}s", flush=True)
    train_tl, eval_tl = cohort.timelines[:5000], cohort.timelines[5000:]

    cfg = ModelConfig(vocab_size=len(vocab), context_len=144, d_model=64,
                      n_heads=4, n_layers=2, n_steps=1100, batch_size=24,
                      learning_rate=3e-3, seed=0, eval_every=100)
    corpus = [truncate(linearize(t, vocab), cfg.context_len + 1, vocab)
              for t in train_tl]
    t0 = time.perf_counter()
    res = train(corpus, cfg)
    print(f"train 1100 steps: {time.perf_counter()-t0:.0f}s "
          f"best val {res.best_val_loss:.4f} @ {res.best_step}", flush=True)
    first = [h[1] for h in res.history[:110]]
    last = [h[1] for h in res.history[-110:]]
    print(f"loss windows: first10% {np.mean(first):.3f} last10% {np.mean(last):.3f}")

    decoder = TransformerDecoder(res.params, cfg)
    criteria = SoaCohortCriteria(2017, 2018)
    sim = SimDefaults(n_futures=64, base_seed=2018)
    t0 = time.perf_counter()
    cost = run_cost_eval(decoder, vocab, eval_tl, criteria, sim)
    print(f"cost eval: {time.perf_counter()-t0:.0f}s n={cost.report.n} "
          f"NMAE {cost.report.nmae:.1f}% baseline {cost.baseline_nmae:.1f}% "
          f"R2 {cost.report.r_squared:.3f} top1auc {cost.report.auroc:.3f}",
          flush=True)

    cmap = ConditionMap.load().with_rows(
        [ConditionRow("Acute URI (no-signal)", "NOT_MAPPED", ("J06",))])
    included, _ = soa_filter(eval_tl, criteria)
    t0 = time.perf_counter()
    cond = run_condition_eval(decoder, vocab, included, cmap, 2018, 6, sim)
    print(f"condition eval: {time.perf_counter()-t0:.0f}s macro "
          f"{cond.macro_auroc:.3f} over {cond.n_evaluated}", flush=True)
    for r in cond.rows:
        if r.n_positive > 0:
            print(f"  {r.condition[:44]:46s} n+={r.n_positive:4d} "
                  f"auroc={None if r.auroc is None else round(r.auroc, 3)}")

    # what-if: stroke appended to a 70-year-old female, parkinsons delta
    prompt = TokenSequence([1, vocab.id_of("DEM:AGE_70"), vocab.id_of("DEM:SEX_F")],
                           date(2018, 1, 1), "whatif")
    stroke = MedicalEvent(date(2018, 1, 1), CodeSystem.ICD10CM, "I63.9")
    intervened = intervene(prompt, stroke, vocab)
    ids = _predicate_ids(vocab, ("DX:G20",))[1]
    t0 = time.perf_counter()
    out = {}
    for name, pr in [("base", prompt), ("stroke", intervened)]:
        req = SimulationRequest(prompt=pr, n_futures=4096, horizon_days=365,
                                base_seed=555)
        b = simulate_futures(decoder, vocab, req)
        hits = sum(1 for f in b.futures if first_match_days(f, vocab, ids) is not None)
        out[name] = hits / 4096
    pb, pi = out["base"], out["stroke"]
    se = math.sqrt(pb * (1 - pb) / 4096 + pi * (1 - pi) / 4096)
    print(f"intervention: {time.perf_counter()-t0:.0f}s P(park|base)={pb:.4f} "
          f"P(park|stroke)={pi:.4f} delta={pi-pb:.4f} ({(pi-pb)/se:.1f} se)",
          flush=True)
    print(f"TOTAL {time.perf_counter()-t_all:.0f}s")


if __name__ == "__main__":
    main()
