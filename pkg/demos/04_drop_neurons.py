"""Erase one memorized factlet by dropping the neurons a method points at.

Usage: python demos/04_drop_neurons.py [workdir]   (after 02_train_and_collect.py,
or on a `memloc` run directory after gen-corpus, train and collect)
"""

import sys
from pathlib import Path

from memloc import corpus as C
from memloc.del_bench import DelContext
from memloc.lm import TransformerLM, apply_neuron_dropout, greedy_suffix
from memloc.locate import METHODS, localize, select_topk

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
model = TransformerLM.load(work / "model.ckpt")
memorized = C.read_memorized(work / "memorized.jsonl")
ppl = [list(r["text"].encode("latin-1")) for r in C.read_records(work / "corpus/ppl.jsonl")]
ctx = DelContext(model, memorized, ppl)
target = 0
seq = ctx.seqs[target]
print(len(ctx.seqs), "memorized sequences; target", seq.id)
print("prefix:", C.TOKENIZER.decode_text(seq.tokens[:seq.prefix_len]))
print("suffix:", C.TOKENIZER.decode_text(seq.suffix))

# deltas are after - before; negatives are every other collected sequence
for method in METHODS:
    sel = select_topk(localize(method, model, seq, seed=target), 5.0, skip_bottom=True)
    fx = ctx.effect(target, sel)
    print(f"{method:>14}  drop {len(sel):>2}  self acc {100 * fx['self_acc']:+6.1f}%  "
          f"neg acc {100 * fx['neg_acc']:+6.1f}%  ppl {fx['ppl']:+.2f}")

# what the model now says after the best-known knockout
sel = select_topk(localize("hard_concrete", model, seq, seed=target), 5.0, skip_bottom=True)
after = greedy_suffix(apply_neuron_dropout(model, sel), seq.tokens[:seq.prefix_len], seq.T)
print("greedy after dropout:", C.TOKENIZER.decode_text(after))
