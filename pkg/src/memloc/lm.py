"""Decoder-only transformer whose FFNs expose neuron masks and column fine-tuning.

Each block is pre-norm attention followed by a pre-norm FFN

    h = gelu(W x + b),   o = V (h * m) + c

where ``m`` is an optional per-layer neuron mask.  Column ``V[:, i]`` of layer
``l`` is the weight vector paired with neuron ``(l, i)``.  Layers are numbered
from 1 in :class:`NeuronId`; arrays indexed by layer are 0-based.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence as Seq

import numpy as np

from . import numerics as nx
from .numerics import DTYPE, Graph, Rng, Var

MAGIC = b"MEMLOC01"
NEG_INF = -1e30


class ModelError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    d_ffn: int = 256
    n_heads: int = 4
    vocab_size: int = 256
    n_ctx: int = 96

    def __post_init__(self):
        if self.n_layers < 2:
            raise ModelError("n_layers must be >= 2")
        if self.d_ffn < 1 or self.d_model < 1 or self.vocab_size < 1 or self.n_ctx < 1:
            raise ModelError("model dimensions must be positive")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")

    @property
    def n_neurons(self) -> int:
        return self.n_layers * self.d_ffn


@dataclass(frozen=True, order=True)
class NeuronId:
    layer: int  # 1..L
    index: int  # 0..d2-1


@dataclass(frozen=True)
class Sequence:
    tokens: tuple
    prefix_len: int
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.prefix_len < 1 or self.prefix_len >= len(self.tokens):
            raise ModelError("sequence needs a nonempty prefix and a suffix of length >= 1")

    @property
    def suffix(self) -> tuple:
        return self.tokens[self.prefix_len:]

    @property
    def T(self) -> int:
        return len(self.tokens) - self.prefix_len


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    d, f = cfg.d_model, cfg.d_ffn
    shapes = [("tok_emb", (cfg.vocab_size, d)), ("pos_emb", (cfg.n_ctx, d))]
    for l in range(cfg.n_layers):
        p = f"blocks.{l}."
        shapes += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "attn.wq", (d, d)), (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)), (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)), (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)), (p + "attn.bo", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "ffn.W", (f, d)), (p + "ffn.b", (f,)),
            (p + "ffn.V", (d, f)), (p + "ffn.c", (d,)),
        ]
    shapes += [("lnf.g", (d,)), ("lnf.b", (d,))]
    return shapes


def v_name(layer0: int) -> str:
    return f"blocks.{layer0}.ffn.V"


class TransformerLM:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        expected = _param_shapes(config)
        for name, shape in expected:
            if name not in params or params[name].shape != shape:
                raise ModelError(f"parameter {name} missing or wrong shape")
        self.params = {name: np.ascontiguousarray(params[name], dtype=DTYPE) for name, _ in expected}

    @classmethod
    def init(cls, config: ModelConfig, rng: Rng, init_std: float = 0.02) -> "TransformerLM":
        params = {}
        for name, shape in _param_shapes(config):
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                params[name] = np.ones(shape, dtype=DTYPE)
            elif len(shape) == 1:
                params[name] = np.zeros(shape, dtype=DTYPE)
            else:
                params[name] = init_std * rng.normal(int(np.prod(shape))).reshape(shape)
        return cls(config, params)

    def clone(self) -> "TransformerLM":
        return TransformerLM(self.config, {k: v.copy() for k, v in self.params.items()})

    def V(self, layer: int) -> np.ndarray:
        """FFN output matrix of 1-based ``layer``."""
        return self.params[v_name(layer - 1)]

    # -- checkpoints ------------------------------------------------------

    def to_bytes(self, meta: dict | None = None) -> bytes:
        manifest, offset = [], 0
        for name, arr in self.params.items():
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size * 8
        header = {"config": asdict(self.config), "tensors": manifest}
        if meta:
            header["meta"] = meta
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        payload = b"".join(arr.astype("<f8").tobytes() for arr in self.params.values())
        return MAGIC + struct.pack("<Q", len(hb)) + hb + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TransformerLM":
        if blob[:8] != MAGIC:
            raise ModelError("not a MEMLOC01 checkpoint")
        (n,) = struct.unpack("<Q", blob[8:16])
        header = json.loads(blob[16:16 + n].decode("utf-8"))
        base = 16 + n
        params = {}
        for t in header["tensors"]:
            count = int(np.prod(t["shape"])) if t["shape"] else 1
            start = base + t["offset"]
            params[t["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=start).reshape(t["shape"]).astype(DTYPE)
        return cls(ModelConfig(**header["config"]), params)

    def save(self, path, meta: dict | None = None):
        from .io import atomic_write_bytes

        atomic_write_bytes(path, self.to_bytes(meta))

    @classmethod
    def load(cls, path) -> "TransformerLM":
        return cls.from_bytes(Path(path).read_bytes())


class MaskedLM:
    """Evaluation-time view: base weights plus a fixed neuron mask."""

    def __init__(self, base: TransformerLM, mask: np.ndarray):
        self.base = base
        self.mask = mask
        self.config = base.config


def _resolve(model, mask):
    if isinstance(model, MaskedLM):
        if mask is None:
            return model.base, model.mask
        if isinstance(mask, Var):
            return model.base, nx.mul(mask, model.mask)
        return model.base, model.mask * mask
    return model, mask


def check_mask(mask, cfg: ModelConfig):
    if mask is None:
        return
    m = mask.value if isinstance(mask, Var) else np.asarray(mask)
    if m.shape != (cfg.n_layers, cfg.d_ffn):
        raise ModelError(f"mask shape {m.shape} != {(cfg.n_layers, cfg.d_ffn)}")


def apply_neuron_dropout(model, selection: Iterable[NeuronId]) -> MaskedLM:
    base, prior = _resolve(model, None)
    cfg = base.config
    mask = np.ones((cfg.n_layers, cfg.d_ffn), dtype=DTYPE) if prior is None else np.array(prior, dtype=DTYPE)
    for n in selection:
        if not (1 <= n.layer <= cfg.n_layers and 0 <= n.index < cfg.d_ffn):
            raise ModelError(f"neuron {n} out of range")
        mask[n.layer - 1, n.index] = 0.0
    return MaskedLM(base, mask)


# ---------------------------------------------------------------------------
# forward


class LayerCache(NamedTuple):
    resid_mid: np.ndarray  # residual stream entering the FFN, (B, S, d1)
    k: np.ndarray  # (B, H, S, dh)
    v: np.ndarray


class Forward(NamedTuple):
    graph: Graph
    logits: Var
    hidden: list  # per layer Var (B, S, d2), post-activation and pre-mask
    leaves: dict
    cache: list


def run_graph(model, tokens, mask=None, *, graph=None, trainable=(), h_hook=None, keep_cache=False) -> Forward:
    """Full forward pass recorded on a graph.

    ``mask`` may be an array or a Var of shape (L, d2).  ``h_hook(layer0, h)``
    may replace the FFN hidden state before masking.
    """
    model, mask = _resolve(model, mask)
    cfg = model.config
    check_mask(mask, cfg)
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    B, S = tokens.shape
    if S > cfg.n_ctx:
        raise ModelError(f"sequence length {S} exceeds context {cfg.n_ctx}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ModelError("token id out of vocabulary")
    g = graph if graph is not None else Graph()
    trainable = set(trainable)
    P = {n: g.leaf(a, trainable=n in trainable) for n, a in model.params.items()}
    H = cfg.n_heads
    dh = cfg.d_model // H
    causal = np.triu(np.full((S, S), NEG_INF), k=1)
    scale = 1.0 / math.sqrt(dh)

    x = nx.add(nx.take_rows(P["tok_emb"], tokens), P["pos_emb"].value[:S] if not P["pos_emb"].requires_grad
               else nx.getitem(P["pos_emb"], slice(0, S)))
    hidden, cache = [], []
    for l in range(cfg.n_layers):
        p = f"blocks.{l}."
        a = nx.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])

        def heads(w, b):
            y = nx.add(nx.matmul(a, P[p + w]), P[p + b])
            return nx.transpose(nx.reshape(y, (B, S, H, dh)), (0, 2, 1, 3))

        q, k, v = heads("attn.wq", "attn.bq"), heads("attn.wk", "attn.bk"), heads("attn.wv", "attn.bv")
        scores = nx.add(nx.mul(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), scale), causal)
        att = nx.matmul(nx.softmax(scores, axis=-1), v)
        att = nx.reshape(nx.transpose(att, (0, 2, 1, 3)), (B, S, cfg.d_model))
        x = nx.add(x, nx.add(nx.matmul(att, P[p + "attn.wo"]), P[p + "attn.bo"]))
        if keep_cache:
            cache.append(LayerCache(x.value, k.value, v.value))

        f = nx.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        h = nx.gelu(nx.add(nx.matmul(f, nx.transpose(P[p + "ffn.W"], (1, 0))), P[p + "ffn.b"]))
        hidden.append(h)
        if h_hook is not None:
            h = h_hook(l, h)
        if mask is not None:
            h = nx.mul(h, nx.getitem(mask, l) if isinstance(mask, Var) else mask[l])
        o = nx.add(nx.matmul(h, nx.transpose(P[p + "ffn.V"], (1, 0))), P[p + "ffn.c"])
        x = nx.add(x, o)

    x = nx.layer_norm(x, P["lnf.g"], P["lnf.b"])
    logits = nx.matmul(x, nx.transpose(P["tok_emb"], (1, 0)))
    return Forward(g, logits, hidden, P, cache)


class LMOutput(NamedTuple):
    logits: np.ndarray  # (S, V) for a single sequence, (B, S, V) for a batch
    hidden: list  # per layer (S, d2) / (B, S, d2)


def forward_lm(model, tokens, mask=None) -> LMOutput:
    single = np.asarray(tokens).ndim == 1
    out = run_graph(model, tokens, mask)
    logits = out.logits.value
    hidden = [h.value for h in out.hidden]
    if single:
        return LMOutput(logits[0], [h[0] for h in hidden])
    return LMOutput(logits, hidden)


# ---------------------------------------------------------------------------
# scoring


def suffix_nll_var(logits: Var, tokens: np.ndarray, start: int) -> Var:
    """Mean -log P(x_t | x_<t) over t >= start (0-based), for a (1, S, V) graph."""
    tokens = np.asarray(tokens)
    lp = nx.log_softmax(nx.getitem(logits, (0, slice(start - 1, len(tokens) - 1))), axis=-1)
    picked = nx.gather_last(lp, tokens[start:])
    return nx.mul(nx.sum_(picked), -1.0 / (len(tokens) - start))


def memorization_loss_var(model, seq: Sequence, mask=None, *, graph=None, trainable=()) -> tuple[Var, Forward]:
    out = run_graph(model, seq.tokens, mask, graph=graph, trainable=trainable)
    return suffix_nll_var(out.logits, np.asarray(seq.tokens), seq.prefix_len), out


def memorization_loss(model, seq: Sequence, mask=None) -> float:
    loss, _ = memorization_loss_var(model, seq, mask)
    return float(loss.value)


def lm_loss(model, tokens, mask=None) -> float:
    tokens = tuple(tokens)
    if len(tokens) < 2:
        raise ModelError("lm_loss needs at least two tokens")
    return memorization_loss(model, Sequence(tokens, 1), mask)


def _argmax_lowest(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. the lowest token id
    return np.argmax(logits, axis=-1)


def teacher_forced_predictions(model, seq: Sequence, mask=None) -> np.ndarray:
    logits = forward_lm(model, seq.tokens, mask).logits
    return _argmax_lowest(logits[seq.prefix_len - 1:len(seq.tokens) - 1])


def token_accuracy(model, seq: Sequence, mask=None) -> float:
    pred = teacher_forced_predictions(model, seq, mask)
    return float(np.mean(pred == np.asarray(seq.suffix)))


def batch_predictions(model, seqs: Seq[Sequence], mask=None) -> list[np.ndarray]:
    """Teacher-forced argmax suffixes for many sequences, batched by shape.

    The grouping depends only on the sequences, so repeated calls with the
    same arguments are bitwise identical.
    """
    groups: dict[tuple, list[int]] = {}
    for i, s in enumerate(seqs):
        groups.setdefault((len(s.tokens), s.prefix_len), []).append(i)
    out: list = [None] * len(seqs)
    for (n, p), idx in sorted(groups.items()):
        toks = np.array([seqs[i].tokens for i in idx])
        logits = run_graph(model, toks, mask).logits.value
        pred = _argmax_lowest(logits[:, p - 1:n - 1])
        for j, i in enumerate(idx):
            out[i] = pred[j]
    return out


def greedy_suffix(model, prefix, T: int, mask=None) -> list[int]:
    prefix = [int(t) for t in prefix]
    base, _ = _resolve(model, None)
    if not prefix:
        raise ModelError("prefix must be nonempty")
    if len(prefix) + T > base.config.n_ctx:
        raise ModelError("prefix plus generated suffix exceeds the context")
    toks = list(prefix)
    for _ in range(T):
        logits = forward_lm(model, toks, mask).logits
        toks.append(int(_argmax_lowest(logits[-1])))
    return toks[len(prefix):]


def sequence_nll_sums(model, batch: Seq, mask=None) -> tuple[float, int]:
    """Summed next-token NLL and token count over a batch of token lists."""
    groups: dict[int, list] = {}
    for toks in batch:
        if len(toks) < 2:
            raise ModelError("perplexity sequences need at least two tokens")
        groups.setdefault(len(toks), []).append(list(toks))
    total, count = 0.0, 0
    for n in sorted(groups):
        toks = np.array(groups[n])
        lp = nx.log_softmax_np(run_graph(model, toks, mask).logits.value[:, :-1], axis=-1)
        picked = np.take_along_axis(lp, toks[:, 1:, None], axis=-1)[..., 0]
        total += float(-picked.sum())
        count += picked.size
    return total, count


def perplexity(model, batch: Seq, mask=None) -> float:
    if len(batch) == 0:
        raise ModelError("perplexity needs a nonempty batch")
    total, count = sequence_nll_sums(model, batch, mask)
    return math.exp(total / count)


# ---------------------------------------------------------------------------
# training


class Adam:
    """Per-parameter moment estimates (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float | None = None):
        """Update ``params[name]`` in place for every name in ``grads``."""
        self.t += 1
        lr = self.lr if lr is None else lr
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-3
    warmup: int = 100
    min_lr_frac: float = 0.1
    grad_clip: float = 1.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.warmup < 0:
            raise ValueError("steps and warmup must be >= 0, batch_size >= 1")
        if self.lr <= 0 or not 0 <= self.min_lr_frac <= 1 or self.grad_clip < 0 or self.init_std <= 0:
            raise ValueError("invalid optimizer settings")


def batch_lm_loss_var(model, batch_tokens: np.ndarray, weights: np.ndarray, trainable) -> tuple[Var, Forward]:
    out = run_graph(model, batch_tokens, trainable=trainable)
    lp = nx.log_softmax(nx.getitem(out.logits, (slice(None), slice(0, -1))), axis=-1)
    picked = nx.gather_last(lp, batch_tokens[:, 1:])
    loss = nx.mul(nx.sum_(nx.mul(picked, weights)), -1.0 / weights.sum())
    return loss, out


def _pad_batch(docs: list) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(d) for d in docs)
    toks = np.zeros((len(docs), n), dtype=np.int64)
    w = np.zeros((len(docs), n - 1), dtype=DTYPE)
    for i, d in enumerate(docs):
        toks[i, :len(d)] = d
        w[i, :len(d) - 1] = 1.0
    return toks, w


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(1, cfg.steps - cfg.warmup)
    frac = (step - cfg.warmup) / span
    return cfg.lr * (cfg.min_lr_frac + (1 - cfg.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * frac)))


def train_base(model: TransformerLM, corpus: Seq, cfg: TrainConfig, rng: Rng, log_every: int = 0):
    """Mini-batch Adam on the next-token loss; returns (trained copy, loss curve)."""
    if len(corpus) == 0:
        raise ModelError("corpus is empty")
    model = model.clone()
    names = list(model.params)
    opt = Adam(cfg.lr)
    order: list[int] = []
    curve = []
    for step in range(cfg.steps):
        idx = []
        while len(idx) < cfg.batch_size:
            if not order:
                order = rng.permutation(len(corpus))
            idx.append(order.pop())
        toks, w = _pad_batch([corpus[i] for i in idx])
        loss, out = batch_lm_loss_var(model, toks, w, names)
        val = float(loss.value)
        if not math.isfinite(val):
            raise DivergenceError(f"loss became {val} at step {step} (lr={lr_at(step, cfg):.3g})")
        out.graph.backward(loss)
        grads = {n: out.leaves[n].grad for n in names}
        if cfg.grad_clip:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > cfg.grad_clip:
                grads = {n: g * (cfg.grad_clip / norm) for n, g in grads.items()}
        opt.step(model.params, grads, lr_at(step, cfg))
        curve.append(val)
        if log_every and step % log_every == 0:
            print(f"step {step} loss {val:.4f}", flush=True)
    return model, curve


class FinetuneResult(NamedTuple):
    model: TransformerLM
    final_loss: float
    steps: int
    converged: bool


def finetune_columns(model: TransformerLM, tokens, columns: Iterable[NeuronId], loss_threshold: float = 0.05,
                     max_steps: int = 2000, lr: float = 1e-2) -> FinetuneResult:
    """Train only the selected V columns on the next-token loss of ``tokens``.

    Stops at the first step whose loss is below ``loss_threshold``; every
    other parameter is left bitwise untouched.
    """
    columns = sorted(set(columns))
    if not columns:
        raise ModelError("columns must be nonempty")
    cfg = model.config
    by_layer: dict[int, list[int]] = {}
    for n in columns:
        if not (1 <= n.layer <= cfg.n_layers and 0 <= n.index < cfg.d_ffn):
            raise ModelError(f"neuron {n} out of range")
        by_layer.setdefault(n.layer - 1, []).append(n.index)
    model = model.clone()
    seq = Sequence(tuple(tokens), 1)
    trainable = [v_name(l) for l in by_layer]
    cols = {v_name(l): np.array(ix) for l, ix in by_layer.items()}
    sub = {name: model.params[name][:, ix].copy() for name, ix in cols.items()}
    opt = Adam(lr)
    steps = 0
    while True:
        loss, out = memorization_loss_var(model, seq, trainable=trainable)
        val = float(loss.value)
        if not math.isfinite(val):
            raise DivergenceError(f"fine-tuning loss became {val} at step {steps}")
        if val < loss_threshold:
            return FinetuneResult(model, val, steps, True)
        if steps >= max_steps:
            return FinetuneResult(model, val, steps, False)
        out.graph.backward(loss)
        grads = {name: out.leaves[name].grad[:, ix] for name, ix in cols.items()}
        opt.step(sub, grads)
        for name, ix in cols.items():
            model.params[name][:, ix] = sub[name]
        steps += 1


# ---------------------------------------------------------------------------
# single-position replay for hidden-state interventions


def replay_from_hidden(model, cache: list, layer0: int, positions: np.ndarray, z: Var, targets: np.ndarray,
                       mask=None) -> Var:
    """Probability of ``targets`` after replacing the layer-``layer0`` FFN hidden state.

    Row r of ``z`` replaces h at ``positions[r]`` of a single cached sequence;
    each row is an independent copy.  Positions before ``positions[r]`` are
    untouched, so the upper layers only need that one query position, reading
    keys and values for earlier positions from ``cache``.  Returns (R,) P values.
    """
    model, mask = _resolve(model, mask)
    cfg = model.config
    g = z.graph
    P = {n: g.leaf(a) for n, a in model.params.items()}
    positions = np.asarray(positions)
    R = len(positions)
    H = cfg.n_heads
    dh = cfg.d_model // H
    scale = 1.0 / math.sqrt(dh)

    def ffn_out(l, h):
        p = f"blocks.{l}."
        if mask is not None:
            h = nx.mul(h, mask[l])
        return nx.add(nx.matmul(h, nx.transpose(P[p + "ffn.V"], (1, 0))), P[p + "ffn.c"])

    r = nx.add(cache[layer0].resid_mid[0, positions], ffn_out(layer0, z))
    S = cache[0].k.shape[2]
    earlier = np.where(np.arange(S)[None, :] < positions[:, None], 0.0, NEG_INF)  # (R, S)
    for l in range(layer0 + 1, cfg.n_layers):
        p = f"blocks.{l}."
        a = nx.layer_norm(r, P[p + "ln1.g"], P[p + "ln1.b"])

        def heads(w, b):
            y = nx.add(nx.matmul(a, P[p + w]), P[p + b])
            return nx.transpose(nx.reshape(y, (R, H, dh)), (1, 0, 2))  # (H, R, dh)

        q, k, v = heads("attn.wq", "attn.bq"), heads("attn.wk", "attn.bk"), heads("attn.wv", "attn.bv")
        Kb, Vb = cache[l].k[0], cache[l].v[0]  # (H, S, dh)
        s_base = nx.add(nx.mul(nx.matmul(q, np.swapaxes(Kb, -1, -2)), scale), earlier)
        s_self = nx.reshape(nx.mul(nx.sum_(nx.mul(q, k), axis=-1), scale), (H, R, 1))
        att = nx.softmax(nx.concat([s_base, s_self], axis=-1), axis=-1)
        out = nx.add(nx.matmul(nx.getitem(att, (slice(None), slice(None), slice(0, S))), Vb),
                     nx.mul(nx.getitem(att, (slice(None), slice(None), slice(S, S + 1))), v))
        out = nx.reshape(nx.transpose(out, (1, 0, 2)), (R, cfg.d_model))
        r = nx.add(r, nx.add(nx.matmul(out, P[p + "attn.wo"]), P[p + "attn.bo"]))
        f = nx.layer_norm(r, P[p + "ln2.g"], P[p + "ln2.b"])
        h = nx.gelu(nx.add(nx.matmul(f, nx.transpose(P[p + "ffn.W"], (1, 0))), P[p + "ffn.b"]))
        r = nx.add(r, ffn_out(l, h))
    x = nx.layer_norm(r, P["lnf.g"], P["lnf.b"])
    probs = nx.softmax(nx.matmul(x, nx.transpose(P["tok_emb"], (1, 0))), axis=-1)
    return nx.gather_last(probs, np.asarray(targets))
