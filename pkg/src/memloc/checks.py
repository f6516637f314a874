"""Numerical self-tests behind ``memloc selfcheck``."""

from __future__ import annotations

import time

import numpy as np

from . import numerics as nx
from .corpus import levenshtein
from .lm import (ModelConfig, NeuronId, Sequence, TransformerLM, apply_neuron_dropout, forward_lm,
                 memorization_loss, memorization_loss_var, run_graph, suffix_nll_var, v_name)
from .locate import attr_zero_out, ig_timesteps, prob_with_hidden

GRAD_TOL = 1e-6
IG_STEPS = (20, 100, 300)
IG_REL_TOL, IG_ABS_TOL = 1e-3, 1e-6
DUALITY_TOL = 1e-12

TINY = ModelConfig(n_layers=2, d_model=16, d_ffn=32, n_heads=2, vocab_size=256, n_ctx=32)


def _random_sequence(rng: nx.Rng, length: int, prefix_len: int) -> Sequence:
    return Sequence(tuple(rng.integer(256) for _ in range(length)), prefix_len)


def gradient_errors(seed: int = 0, init_std: float = 0.1, length: int = 24, prefix_len: int = 8) -> dict:
    """Max relative error of d(loss)/d(mask) and d(loss)/d(h^l) against central differences."""
    rng = nx.Rng(seed)
    model = TransformerLM.init(TINY, rng.fork(), init_std)
    seq = _random_sequence(rng, length, prefix_len)
    mask0 = 0.5 + 0.5 * rng.uniform(TINY.n_layers * TINY.d_ffn).reshape(TINY.n_layers, TINY.d_ffn)

    def mask_loss(g, m):
        return memorization_loss_var(model, seq, mask=m, graph=g)[0]

    errs = {"mask": nx.grad_check(mask_loss, mask0)}
    base = run_graph(model, seq.tokens)
    for l in range(TINY.n_layers):
        def hidden_loss(g, z, l=l):
            out = run_graph(model, seq.tokens, graph=g, h_hook=lambda ll, h: z if ll == l else h)
            return suffix_nll_var(out.logits, np.asarray(seq.tokens), seq.prefix_len)

        errs[f"hidden_{l + 1}"] = nx.grad_check(hidden_loss, base.hidden[l].value)
    return errs


def ig_toy_instance():
    """A fixed small random model and sequence for the completeness check."""
    rng = nx.Rng(7)
    model = TransformerLM.init(TINY, rng.fork(), 0.02)
    return model, _random_sequence(rng, 20, 4)


def ig_completeness(model=None, seq=None, steps=IG_STEPS) -> dict:
    """Per (layer, timestep) completeness error |sum IG - (P(h) - P(0))| at each step count."""
    if model is None:
        model, seq = ig_toy_instance()
    out = run_graph(model, seq.tokens, keep_cache=True)
    pos = np.arange(seq.prefix_len - 1, len(seq.tokens) - 1)
    errors = {n: [] for n in steps}
    deltas = []
    for l in range(model.config.n_layers):
        h = out.hidden[l].value[0, pos]
        dP = prob_with_hidden(model, seq, l, h, out) - prob_with_hidden(model, seq, l, np.zeros_like(h), out)
        deltas.append(dP)
        for n in steps:
            errors[n].append(np.abs(ig_timesteps(model, seq, l, n, _forward=out).sum(axis=1) - dP))
    return {"errors": {n: np.stack(v) for n, v in errors.items()}, "delta": np.stack(deltas)}


def ig_completeness_ok(res: dict) -> tuple[bool, bool]:
    """(tolerance met at the finest step count, error strictly decreasing across step counts)."""
    steps = sorted(res["errors"])
    finest = res["errors"][steps[-1]]
    within = bool(np.all(finest <= IG_REL_TOL * np.abs(res["delta"]) + IG_ABS_TOL))
    decreasing = all(bool(np.all(res["errors"][a] > res["errors"][b])) for a, b in zip(steps, steps[1:]))
    return within, decreasing


def duality_max_diff(n_pairs: int = 100, seed: int = 0) -> float:
    """Masking neuron (l, i) vs zeroing column v_i of layer l: largest per-logit gap."""
    rng = nx.Rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        cfg = ModelConfig(n_layers=2 + rng.integer(2), d_model=8 * (1 + rng.integer(2)), d_ffn=8 + rng.integer(25),
                          n_heads=2, vocab_size=256, n_ctx=16)
        model = TransformerLM.init(cfg, rng.fork(), 0.02 + 0.2 * rng.random())
        toks = [rng.integer(256) for _ in range(4 + rng.integer(12))]
        n = NeuronId(1 + rng.integer(cfg.n_layers), rng.integer(cfg.d_ffn))
        masked = forward_lm(apply_neuron_dropout(model, [n]), toks).logits
        edited = model.clone()
        edited.params[v_name(n.layer - 1)][:, n.index] = 0.0
        worst = max(worst, float(np.max(np.abs(masked - forward_lm(edited, toks).logits))))
    return worst


def levenshtein_oracle(a: str, b: str) -> int:
    """Full (m+1) x (n+1) dynamic-programming table."""
    D = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        D[i][0] = i
    for j in range(len(b) + 1):
        D[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            D[i][j] = min(D[i - 1][j] + 1, D[i][j - 1] + 1, D[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return D[len(a)][len(b)]


def levenshtein_mismatches(n_pairs: int = 1000, seed: int = 0) -> int:
    rng = nx.Rng(seed)
    alphabet = "abcde"
    bad = 0
    for _ in range(n_pairs):
        a = "".join(rng.choice(alphabet) for _ in range(rng.integer(30)))
        b = "".join(rng.choice(alphabet) for _ in range(rng.integer(30)))
        bad += levenshtein(a, b) != levenshtein_oracle(a, b)
    return bad


def zero_out_mismatches(seed: int = 0) -> int:
    rng = nx.Rng(seed)
    model = TransformerLM.init(TINY, rng.fork(), 0.1)
    seq = _random_sequence(rng, 16, 6)
    amap = attr_zero_out(model, seq)
    base = memorization_loss(model, seq)
    bad = 0
    for l in range(TINY.n_layers):
        for i in range(TINY.d_ffn):
            direct = memorization_loss(apply_neuron_dropout(model, [NeuronId(l + 1, i)]), seq) - base
            bad += amap.scores[l, i] != direct
    return bad


def run_selfcheck(quick: bool = False) -> dict:
    checks = {}

    def record(name, fn, ok):
        t0 = time.perf_counter()
        value = fn()
        checks[name] = {"ok": bool(ok(value)), "value": value, "seconds": round(time.perf_counter() - t0, 3)}

    record("gradients", lambda: gradient_errors(length=12 if quick else 24),
           lambda v: max(v.values()) < GRAD_TOL)

    def ig():
        within, decreasing = ig_completeness_ok(ig_completeness())
        return {"within_tolerance": within, "strictly_decreasing": decreasing}

    record("ig_completeness", ig, lambda v: v["within_tolerance"] and v["strictly_decreasing"])
    record("mask_column_duality", lambda: duality_max_diff(20 if quick else 100), lambda v: v < DUALITY_TOL)
    record("levenshtein_oracle", lambda: levenshtein_mismatches(200 if quick else 1000), lambda v: v == 0)
    record("zero_out_oracle", zero_out_mismatches, lambda v: v == 0)
    return {"ok": all(c["ok"] for c in checks.values()), "checks": checks}
