"""Plant a sentence in known FFN columns, then ask each method where it went.

Usage: python demos/03_inject_and_localize.py [workdir]   (after 02_train_and_collect.py,
or on a `memloc` run directory after gen-corpus, train and collect)
"""

import sys
from pathlib import Path

from memloc import corpus as C
from memloc.inj_bench import InjectionSpec, inject_sequence, method_seed, recall_at_k
from memloc.lm import Sequence, TransformerLM
from memloc.locate import METHODS, localize, select_topk

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
base = TransformerLM.load(work / "model.ckpt")
definition = C.read_candidates(work / "corpus/definitions.jsonl")[0]
print("sentence:", C.TOKENIZER.decode_text(definition.tokens))

# only the columns in gamma are trained; everything else stays bitwise fixed
rec = inject_sequence(base, definition, InjectionSpec(ratio=1.0), 0, definition.id)
print("ground truth:", [(n.layer, n.index) for n in rec.gamma])
print("converged:", rec.converged, "after", rec.steps, "steps, loss", rec.final_loss)

seq = Sequence(definition.tokens, 1, definition.id)
for method in METHODS:
    amap = localize(method, rec.model, seq, seed=method_seed(rec.seed))
    recalls = [recall_at_k(rec.gamma, select_topk(amap, k)) for k in (1, 2, 5)]
    print(f"{method:>14}  recall@1/2/5%: " + " ".join(f"{r:.2f}" for r in recalls) + f"  ({amap.seconds:.2f}s)")
