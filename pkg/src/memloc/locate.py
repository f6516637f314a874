"""Neuron attribution methods and top-k selection.

All methods return an :class:`AttributionMap` of shape (L, d2); higher
scores mean "more responsible for the sequence".
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Iterable

import numpy as np

from . import numerics as nx
from .io import atomic_write_text, csv_text
from .lm import (Adam, DivergenceError, NeuronId, Sequence, TransformerLM, _resolve, apply_neuron_dropout,
                 memorization_loss, memorization_loss_var, replay_from_hidden, run_graph)
from .numerics import DTYPE, Graph, Rng

METHODS = ("hard_concrete", "slimming", "zero_out", "ig", "activations", "random")


@dataclass
class AttributionMap:
    scores: np.ndarray  # (L, d2)
    method: str
    seconds: float = 0.0
    hyperparams: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=DTYPE)
        if self.scores.ndim != 2:
            raise ValueError("attribution scores must be an (L, d2) matrix")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"{self.method} produced non-finite scores")


@dataclass(frozen=True)
class MaskTrainConfig:
    lr: float = 0.1
    steps: int = 200
    lam: float = 1e-3
    beta: float = 2.0 / 3.0
    init_log_m: float = 2.2
    gamma: float = -0.1
    zeta: float = 1.1
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not self.gamma < 0 < 1 < self.zeta:
            raise ValueError("stretch interval must satisfy gamma < 0 < 1 < zeta")
        if self.steps < 0 or self.lr <= 0:
            raise ValueError("steps must be >= 0 and lr > 0")


SLIMMING_DEFAULT = MaskTrainConfig(lr=0.01, steps=100, lam=0.05)
HARD_CONCRETE_DEFAULT = MaskTrainConfig(lr=0.01, steps=50, lam=1.0)


def _suffix_positions(seq: Sequence) -> np.ndarray:
    # the input for suffix token t ends one position before it
    return np.arange(seq.prefix_len - 1, len(seq.tokens) - 1)


# ---------------------------------------------------------------------------
# methods


def attr_zero_out(model, seq: Sequence) -> AttributionMap:
    t0 = time.perf_counter()
    cfg = model.config
    base = memorization_loss(model, seq)
    scores = np.empty((cfg.n_layers, cfg.d_ffn), dtype=DTYPE)
    for l in range(cfg.n_layers):
        for i in range(cfg.d_ffn):
            scores[l, i] = memorization_loss(apply_neuron_dropout(model, [NeuronId(l + 1, i)]), seq) - base
    return AttributionMap(scores, "zero_out", time.perf_counter() - t0)


def attr_activations(model, seq: Sequence) -> AttributionMap:
    t0 = time.perf_counter()
    base, _ = _resolve(model, None)
    hidden = run_graph(model, seq.tokens).hidden
    pos = _suffix_positions(seq)
    rows = []
    for l, h in enumerate(hidden):
        norms = np.linalg.norm(base.V(l + 1), axis=0)
        rows.append(np.abs(h.value[0, pos]).mean(axis=0) * norms)
    return AttributionMap(np.stack(rows), "activations", time.perf_counter() - t0)


def ig_timesteps(model, seq: Sequence, layer0: int, steps: int = 20, chunk_rows: int = 2048,
                 _forward=None) -> np.ndarray:
    """Integrated gradients of P(s_t) for every suffix timestep: a (T, d2) matrix.

    Right-endpoint Riemann sum with alpha_k = k/steps and a zero baseline.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    out = _forward or run_graph(model, seq.tokens, keep_cache=True)
    pos = _suffix_positions(seq)
    targets = np.asarray(seq.suffix)
    h = out.hidden[layer0].value[0, pos]  # (T, d2)
    T = len(pos)
    alphas = np.arange(1, steps + 1, dtype=DTYPE) / steps
    rows_h = (alphas[:, None, None] * h[None]).reshape(steps * T, -1)
    rows_pos = np.tile(pos, steps)
    rows_tgt = np.tile(targets, steps)
    grads = np.empty_like(rows_h)
    per = max(T, (chunk_rows // T) * T)
    for s in range(0, len(rows_h), per):
        g = Graph()
        z = g.leaf(rows_h[s:s + per], trainable=True)
        p = replay_from_hidden(model, out.cache, layer0, rows_pos[s:s + per], z, rows_tgt[s:s + per])
        g.backward(nx.sum_(p))
        grads[s:s + per] = z.grad
    return h * grads.reshape(steps, T, -1).sum(axis=0) / steps


def prob_with_hidden(model, seq: Sequence, layer0: int, h_new: np.ndarray, _forward=None) -> np.ndarray:
    """P(s_t) for each suffix timestep t when h at that timestep is replaced by ``h_new[t]``."""
    out = _forward or run_graph(model, seq.tokens, keep_cache=True)
    g = Graph()
    p = replay_from_hidden(model, out.cache, layer0, _suffix_positions(seq), g.leaf(h_new), np.asarray(seq.suffix))
    return p.value


def attr_ig(model, seq: Sequence, steps: int = 20) -> AttributionMap:
    t0 = time.perf_counter()
    out = run_graph(model, seq.tokens, keep_cache=True)
    rows = [ig_timesteps(model, seq, l, steps, _forward=out).mean(axis=0) for l in range(model.config.n_layers)]
    return AttributionMap(np.stack(rows), "ig", time.perf_counter() - t0, {"steps": steps})


def _check_loss(val: float, method: str, step: int):
    if not math.isfinite(val):
        raise DivergenceError(f"{method} mask training diverged at step {step} (loss={val})")


def attr_slimming(model, seq: Sequence, cfg: MaskTrainConfig = SLIMMING_DEFAULT) -> AttributionMap:
    """L1-regularized continuous mask, clipped to [0, 1] after every update."""
    t0 = time.perf_counter()
    mc = model.config
    state = {"m": np.ones((mc.n_layers, mc.d_ffn), dtype=DTYPE)}
    opt = Adam(cfg.lr)
    for step in range(cfg.steps):
        g = Graph()
        m = g.leaf(state["m"], trainable=True)
        mem, _ = memorization_loss_var(model, seq, mask=m, graph=g)
        loss = nx.add(mem, nx.mul(nx.sum_(nx.abs_(m)), cfg.lam))
        _check_loss(float(loss.value), "slimming", step)
        g.backward(loss)
        opt.step(state, {"m": m.grad})
        np.clip(state["m"], 0.0, 1.0, out=state["m"])
    return AttributionMap(state["m"].copy(), "slimming", time.perf_counter() - t0, asdict(cfg))


def hc_constant(beta: float, gamma: float = -0.1, zeta: float = 1.1) -> float:
    return beta * math.log(-gamma / zeta)


def hc_sample_mask(m, beta: float, u, gamma: float = -0.1, zeta: float = 1.1) -> np.ndarray:
    """Stretched, clipped binary-concrete sample for locations ``m`` > 0."""
    m = np.asarray(m, dtype=DTYPE)
    u = np.asarray(u, dtype=DTYPE)
    if np.any(m <= 0):
        raise ValueError("hard concrete locations must be positive")
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("uniform draws must lie strictly inside (0, 1)")
    if beta <= 0:
        raise ValueError("beta must be positive")
    s = nx.sigmoid_np((np.log(u) - np.log1p(-u) + np.log(m)) / beta)
    return np.clip(s * (zeta - gamma) + gamma, 0.0, 1.0)


def hc_regularizer(log_m, beta: float, gamma: float = -0.1, zeta: float = 1.1) -> float:
    return float(nx.sigmoid_np(np.asarray(log_m, dtype=DTYPE) - hc_constant(beta, gamma, zeta)).sum())


def attr_hard_concrete(model, seq: Sequence, cfg: MaskTrainConfig = HARD_CONCRETE_DEFAULT,
                       rng: Rng | None = None) -> AttributionMap:
    """L0-regularized stochastic gates; the score is sigmoid(log m)."""
    t0 = time.perf_counter()
    mc = model.config
    rng = rng or Rng(cfg.seed)
    shape = (mc.n_layers, mc.d_ffn)
    state = {"log_m": np.full(shape, cfg.init_log_m, dtype=DTYPE)}
    C = hc_constant(cfg.beta, cfg.gamma, cfg.zeta)
    opt = Adam(cfg.lr)
    for step in range(cfg.steps):
        u = rng.open_uniform(shape[0] * shape[1]).reshape(shape)
        g = Graph()
        log_m = g.leaf(state["log_m"], trainable=True)
        s = nx.sigmoid(nx.mul(nx.add(log_m, np.log(u) - np.log1p(-u)), 1.0 / cfg.beta))
        mask = nx.clip(nx.add(nx.mul(s, cfg.zeta - cfg.gamma), cfg.gamma), 0.0, 1.0)
        mem, _ = memorization_loss_var(model, seq, mask=mask, graph=g)
        reg = nx.sum_(nx.sigmoid(nx.add(log_m, -C)))
        loss = nx.add(mem, nx.mul(reg, cfg.lam))
        _check_loss(float(loss.value), "hard_concrete", step)
        g.backward(loss)
        opt.step(state, {"log_m": log_m.grad})
    return AttributionMap(nx.sigmoid_np(state["log_m"]), "hard_concrete", time.perf_counter() - t0, asdict(cfg))


def attr_random(shape, rng: Rng) -> AttributionMap:
    L, d2 = shape
    return AttributionMap(rng.uniform(L * d2).reshape(L, d2), "random", 0.0)


# ---------------------------------------------------------------------------
# dispatch


@dataclass(frozen=True)
class MethodParams:
    ig_steps: int = 20
    slimming: MaskTrainConfig = SLIMMING_DEFAULT
    hard_concrete: MaskTrainConfig = HARD_CONCRETE_DEFAULT


def localize(method: str, model, seq: Sequence, params: MethodParams = MethodParams(), seed: int = 0) -> AttributionMap:
    """Run one method; ``seed`` drives the stochastic ones (random, hard_concrete)."""
    if method == "zero_out":
        return attr_zero_out(model, seq)
    if method == "activations":
        return attr_activations(model, seq)
    if method == "ig":
        return attr_ig(model, seq, params.ig_steps)
    if method == "slimming":
        return attr_slimming(model, seq, params.slimming)
    if method == "hard_concrete":
        return attr_hard_concrete(model, seq, replace(params.hard_concrete, seed=seed))
    if method == "random":
        t0 = time.perf_counter()
        amap = attr_random((model.config.n_layers, model.config.d_ffn), Rng(seed))
        amap.seconds = time.perf_counter() - t0
        return amap
    raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


# ---------------------------------------------------------------------------
# selection


def count_per_layer(k_pct: float, d2: int) -> int:
    return max(1, math.floor(Fraction(str(k_pct)) * d2 / 100))


@dataclass(frozen=True)
class NeuronSelection:
    layers: tuple  # per layer (0-based position) a sorted tuple of neuron indices
    k_pct: float
    scope: str = "per-layer"
    skip_bottom: bool = False

    def neurons(self) -> list[NeuronId]:
        return [NeuronId(l + 1, i) for l, idx in enumerate(self.layers) for i in idx]

    def __len__(self):
        return sum(len(x) for x in self.layers)

    def __iter__(self):
        return iter(self.neurons())


def select_topk(attr, k_pct: float, scope: str = "per-layer", skip_bottom: bool = False) -> NeuronSelection:
    """Top k% by score, per layer or across layers; ties go to the lower (layer, index)."""
    if not 0 < k_pct <= 100:
        raise ValueError("k_pct must lie in (0, 100]")
    scores = attr.scores if isinstance(attr, AttributionMap) else np.asarray(attr, dtype=DTYPE)
    L, d2 = scores.shape
    first = 1 if skip_bottom else 0
    chosen: list[list[int]] = [[] for _ in range(L)]
    if scope == "per-layer":
        n = count_per_layer(k_pct, d2)
        for l in range(first, L):
            order = np.lexsort((np.arange(d2), -scores[l]))
            chosen[l] = sorted(order[:n].tolist())
    elif scope == "global":
        eligible = (L - first) * d2
        n = max(1, math.floor(Fraction(str(k_pct)) * eligible / 100))
        sub = scores[first:]
        layer_ix, neuron_ix = np.meshgrid(np.arange(first, L), np.arange(d2), indexing="ij")
        order = np.lexsort((neuron_ix.ravel(), layer_ix.ravel(), -sub.ravel()))[:n]
        for flat in order:
            chosen[first + flat // d2].append(int(flat % d2))
        chosen = [sorted(c) for c in chosen]
    else:
        raise ValueError("scope must be 'per-layer' or 'global'")
    return NeuronSelection(tuple(tuple(c) for c in chosen), k_pct, scope, skip_bottom)


# ---------------------------------------------------------------------------
# files


def attribution_text(amap: AttributionMap, meta: dict) -> str:
    header = {"method": amap.method, "hyperparams": amap.hyperparams, "wall_clock_seconds": amap.seconds, **meta}
    rows = [(l + 1, i, repr(float(amap.scores[l, i])))
            for l in range(amap.scores.shape[0]) for i in range(amap.scores.shape[1])]
    return json.dumps(header, sort_keys=True) + "\n" + csv_text(("layer", "index", "score"), rows)


def write_attribution(path, amap: AttributionMap, meta: dict | None = None):
    atomic_write_text(path, attribution_text(amap, meta or {}))


def read_attribution(path) -> tuple[AttributionMap, dict]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        fh.readline()
        rows = [ln.strip().split(",") for ln in fh if ln.strip()]
    L = max(int(r[0]) for r in rows)
    d2 = max(int(r[1]) for r in rows) + 1
    scores = np.zeros((L, d2), dtype=DTYPE)
    for l, i, s in rows:
        scores[int(l) - 1, int(i)] = float(s)
    amap = AttributionMap(scores, header["method"], header.get("wall_clock_seconds", 0.0), header.get("hyperparams", {}))
    return amap, header
