"""INJ benchmark: plant a sequence into random V columns, then ask each method to find them."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, NamedTuple

import numpy as np

from .corpus import Candidate
from .io import csv_text, dump_json
from .jobs import map_jobs
from .lm import NeuronId, Sequence, TransformerLM, finetune_columns
from .locate import MethodParams, localize, select_topk
from .numerics import Rng, rng_sample_subset
from .stats import mean_stderr

DEFAULT_KS = (1.0, 2.0, 5.0)
# stochastic methods must not reuse the stream that drew the ground truth
METHOD_SEED_OFFSET = 1 << 32


def method_seed(injection_seed: int) -> int:
    return injection_seed + METHOD_SEED_OFFSET


@dataclass(frozen=True)
class InjectionSpec:
    ratio: float = 1.0  # percent of all L*d2 columns
    loss_threshold: float = 0.05
    max_steps: int = 2000
    lr: float = 1e-2
    seed_offset: int = 0  # sequence i uses seed i + seed_offset

    def __post_init__(self):
        if not 0 < self.ratio <= 100:
            raise ValueError("injection ratio must lie in (0, 100]")
        if self.loss_threshold <= 0:
            raise ValueError("loss threshold must be positive")
        if self.max_steps < 0 or self.lr <= 0:
            raise ValueError("max_steps must be >= 0 and lr > 0")


class InjectionRecord(NamedTuple):
    seq_id: str
    seed: int
    gamma: tuple  # sorted NeuronIds
    model: TransformerLM
    steps: int
    final_loss: float
    converged: bool


def ground_truth_size(ratio: float, n_layers: int, d_ffn: int) -> int:
    exact = Fraction(str(ratio)) * n_layers * d_ffn / 100
    return max(1, math.floor(exact + Fraction(1, 2)))


def sample_injection_set(seed: int, ratio: float, n_layers: int, d_ffn: int) -> tuple:
    """Uniform sample without replacement over all (layer, index) pairs."""
    n = ground_truth_size(ratio, n_layers, d_ffn)
    flat = rng_sample_subset(Rng(seed), n_layers * d_ffn, n)
    return tuple(NeuronId(j // d_ffn + 1, j % d_ffn) for j in flat)


def _tokens(seq) -> tuple:
    if isinstance(seq, (Candidate, Sequence)):
        return tuple(seq.tokens)
    return tuple(seq)


def inject_sequence(base: TransformerLM, seq, spec: InjectionSpec, i: int, seq_id: str | None = None) -> InjectionRecord:
    seed = i + spec.seed_offset
    cfg = base.config
    gamma = sample_injection_set(seed, spec.ratio, cfg.n_layers, cfg.d_ffn)
    res = finetune_columns(base, _tokens(seq), gamma, spec.loss_threshold, spec.max_steps, spec.lr)
    sid = seq_id if seq_id is not None else getattr(seq, "id", str(i))
    return InjectionRecord(sid, seed, gamma, res.model, res.steps, res.final_loss, res.converged)


def recall_at_k(gamma: Iterable[NeuronId], predicted: Iterable[NeuronId]) -> float:
    gamma = set(gamma)
    if not gamma:
        raise ValueError("ground-truth set is empty")
    return len(gamma & set(predicted)) / len(gamma)


def k_label(k: float) -> str:
    return f"{k:g}"


# ---------------------------------------------------------------------------
# benchmark


def _inj_job(base, i, seq_id, tokens, spec, methods, ks, params):
    rec = inject_sequence(base, tokens, spec, i, seq_id)
    row = {"id": seq_id, "index": i, "seed": rec.seed, "gamma": [[n.layer, n.index] for n in rec.gamma],
           "steps": rec.steps, "final_loss": rec.final_loss, "converged": rec.converged,
           "recall": {}, "recall_global": {}}
    seconds = {}
    if rec.converged:
        seq = Sequence(tokens, 1, seq_id)
        for m in methods:
            amap = localize(m, rec.model, seq, params, seed=method_seed(rec.seed))
            seconds[m] = amap.seconds
            row["recall"][m] = {k_label(k): recall_at_k(rec.gamma, select_topk(amap, k)) for k in ks}
            row["recall_global"][m] = {k_label(k): recall_at_k(rec.gamma, select_topk(amap, k, "global"))
                                       for k in ks}
    return row, seconds


def _summary(values: list) -> dict:
    if not values:
        return {"mean": None, "stderr": None, "n": 0}
    if len(values) == 1:
        return {"mean": values[0], "stderr": None, "n": 1}
    m, se = mean_stderr(values)
    return {"mean": m, "stderr": se, "n": len(values)}


@dataclass
class InjReport:
    spec: dict
    methods: list
    ks: list
    rows: list  # per-sequence detail, in input order
    timing: dict = field(default_factory=dict)  # method -> mean seconds; excluded from to_json

    @property
    def n_converged(self) -> int:
        return sum(r["converged"] for r in self.rows)

    def recalls(self, method: str, k: float, scope: str = "per-layer") -> list:
        key = "recall" if scope == "per-layer" else "recall_global"
        return [r[key][method][k_label(k)] for r in self.rows if r["converged"]]

    def summary(self) -> dict:
        out = {}
        for scope in ("per-layer", "global"):
            out[scope] = {m: {k_label(k): _summary(self.recalls(m, k, scope)) for k in self.ks}
                          for m in self.methods}
        return out

    def to_json(self) -> dict:
        return {"spec": self.spec, "methods": list(self.methods), "ks": [k_label(k) for k in self.ks],
                "n_sequences": len(self.rows), "n_converged": self.n_converged,
                "summary": self.summary(), "sequences": self.rows}

    def table_csv(self, scope: str = "per-layer", comments: dict | None = None) -> str:
        """Methods x k, cells "mean ± stderr" in percent."""
        summ = self.summary()[scope]
        rows = []
        for m in self.methods:
            cells = []
            for k in self.ks:
                s = summ[m][k_label(k)]
                if s["mean"] is None:
                    cells.append("")
                elif s["stderr"] is None:
                    cells.append(f"{100 * s['mean']:.1f}")
                else:
                    cells.append(f"{100 * s['mean']:.1f} ± {100 * s['stderr']:.1f}")
            rows.append([m, *cells])
        return csv_text(["method", *[f"recall@{k_label(k)}%" for k in self.ks]], rows, comments)

    def detail_csv(self, comments: dict | None = None) -> str:
        rows = []
        for r in self.rows:
            if not r["converged"]:
                rows.append([r["id"], r["seed"], 0, r["steps"], repr(r["final_loss"]), "", "", "", ""])
                continue
            for scope, key in (("per-layer", "recall"), ("global", "recall_global")):
                for m in self.methods:
                    for k in self.ks:
                        rows.append([r["id"], r["seed"], 1, r["steps"], repr(r["final_loss"]), m, scope,
                                     k_label(k), repr(r[key][m][k_label(k)])])
        header = ["id", "seed", "converged", "steps", "final_loss", "method", "scope", "k", "recall"]
        return csv_text(header, rows, comments)

    def timing_csv(self, comments: dict | None = None) -> str:
        return csv_text(["method", "mean_seconds"], [[m, f"{self.timing[m]:.4f}"] for m in self.methods
                                                     if m in self.timing], comments)

    def json_text(self) -> str:
        return dump_json(self.to_json())


def run_inj_benchmark(base: TransformerLM, sequences, spec: InjectionSpec = InjectionSpec(),
                      methods=("hard_concrete", "slimming", "zero_out", "ig", "activations", "random"),
                      ks=DEFAULT_KS, params: MethodParams = MethodParams(), workers: int = 1) -> InjReport:
    """Inject each sequence (seed = its index + offset), localize with every method, score recall."""
    sequences = list(sequences)
    if not sequences:
        raise ValueError("no sequences to inject")
    jobs = []
    for i, s in enumerate(sequences):
        sid = getattr(s, "id", None) or f"seq{i:03d}"
        jobs.append((i, sid, _tokens(s), spec, tuple(methods), tuple(ks), params))
    results = map_jobs(_inj_job, base, jobs, workers)
    rows = [r for r, _ in results]
    if not any(r["converged"] for r in rows):
        raise RuntimeError(f"none of the {len(rows)} injections converged below {spec.loss_threshold}")
    timing = {}
    for m in methods:
        secs = [s[m] for _, s in results if m in s]
        if secs:
            timing[m] = float(np.mean(secs))
    return InjReport(asdict(spec), list(methods), list(ks), rows, timing)
