"""Tape autodiff, finite-difference checks and the mask/column identity on a tiny model."""

import numpy as np

from memloc import numerics as nx
from memloc.checks import TINY, duality_max_diff, gradient_errors, ig_completeness, ig_completeness_ok
from memloc.lm import NeuronId, Sequence, TransformerLM, apply_neuron_dropout, forward_lm, memorization_loss, v_name

# a function on the tape and its gradient
g = nx.Graph()
x = g.leaf(np.array([0.3, -1.2, 2.0]), trainable=True)
y = nx.sum_(nx.mul(nx.tanh(x), x))
g.backward(y)
print("d/dx sum(x tanh x):", x.grad)
print("closed form:       ", np.tanh(x.value) + x.value * (1 - np.tanh(x.value) ** 2))

# the same check, automated against longdouble central differences
print("grad_check error:", nx.grad_check(lambda g, v: nx.sum_(nx.mul(nx.tanh(v), v)), np.array([0.3, -1.2, 2.0])))

# memorization loss gradients w.r.t. the mask and every hidden state
print("max relative errors:", gradient_errors())

# a 2-layer model and one random sequence
rng = nx.Rng(0)
model = TransformerLM.init(TINY, rng.fork(), 0.1)
seq = Sequence(tuple(rng.integer(256) for _ in range(16)), 6)
print("memorization loss:", memorization_loss(model, seq))

# dropping neuron (2, 5) is the same as zeroing column 5 of that layer's V
dropped = forward_lm(apply_neuron_dropout(model, [NeuronId(2, 5)]), seq.tokens).logits
edited = model.clone()
edited.params[v_name(1)][:, 5] = 0.0
print("max |logit gap|:", np.abs(dropped - forward_lm(edited, seq.tokens).logits).max())
print("over 100 random models:", duality_max_diff(100))

# integrated gradients sum to P(h) - P(0) as the step count grows
res = ig_completeness()
for n, err in res["errors"].items():
    print(f"IG steps {n:>3}: max completeness error {err.max():.3e}")
print("within tolerance, strictly decreasing:", ig_completeness_ok(res))
