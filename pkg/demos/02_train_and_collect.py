"""Train a small byte-level LM on a synthetic corpus, then collect what it memorized.

Usage: python demos/02_train_and_collect.py [workdir]   (default ./demo_run)
The workdir uses the same layout as a `memloc` run directory.
"""

import sys
from pathlib import Path

from memloc import corpus as C
from memloc.lm import ModelConfig, TrainConfig, TransformerLM, perplexity, token_accuracy, train_base
from memloc.numerics import Rng

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
(out / "corpus").mkdir(parents=True, exist_ok=True)

# a smaller cousin of the desk corpus: 12 factlets seen 60 times each, filler and template sentences
params = C.CorpusParams(n_facts=12, repetitions=60, filler_size=300, ppl_size=16, n_background_defs=400)
corp = C.build_synthetic_corpus(Rng(0), params)
print(len(corp.train_docs), "training documents")
print("a factlet:", C.TOKENIZER.decode_text(corp.factlets[0].tokens))
print("filler:", next(C.TOKENIZER.decode_text(d) for d in corp.train_docs if chr(d[0]).islower())[:80])

cfg = ModelConfig(n_layers=4, d_model=48, d_ffn=128, n_heads=4, n_ctx=96)
model = TransformerLM.init(cfg, Rng(1), 0.02)
model, curve = train_base(model, corp.train_docs, TrainConfig(steps=1500, batch_size=16, warmup=50), Rng(2),
                          log_every=250)
print("final loss", curve[-1], "perplexity", perplexity(model, corp.ppl_batch))

# the collection filters: accuracy, greedy distance, distinct tokens, dedup
counts = {}
kept = C.collect_memorized(model, corp.factlets, C.CollectionCriteria(), counts)
print("survivors per stage:", counts)
for m in kept[:3]:
    print(m.id, "accuracy", token_accuracy(model, m.seq), "greedy distance", m.greedy_distance)

model.save(out / "model.ckpt")
C.write_dataset(out / "memorized.jsonl", [C.memorized_record(m) for m in kept])
C.write_dataset(out / "corpus/ppl.jsonl", [{"id": f"ppl{i}", "text": C.TOKENIZER.decode_text(t)}
                                    for i, t in enumerate(corp.ppl_batch)])
defs = C.build_injection_set(Rng(3), 4, params.definition_len, corp.definitions)
C.write_dataset(out / "corpus/definitions.jsonl", [C.candidate_record(d, 1) for d in defs])
print("wrote", sorted(str(p.relative_to(out)) for p in out.rglob("*.*")))
