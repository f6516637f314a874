"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

The desk run (default config, L=4, d2=256) is built once through the CLI.
Set MEMLOC_ACCEPTANCE_DIR to a run directory to reuse finished steps; step
runtimes are stored next to the artifacts so reuse keeps the original timings.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats as sps

from memloc import checks
from memloc.cli import main, robustness_rows
from memloc.corpus import TOKENIZER, Candidate, CollectionCriteria, collect_memorized, read_memorized
from memloc.inj_bench import method_seed, recall_at_k, sample_injection_set
from memloc.lm import (NeuronId, TransformerLM, apply_neuron_dropout, greedy_suffix, memorization_loss,
                       token_accuracy)
from memloc.locate import attr_random, attr_zero_out, select_topk
from memloc.numerics import Rng
from memloc.stats import DegenerateSampleError, paired_t_one_tailed

pytestmark = pytest.mark.slow

DIR_ENV = "MEMLOC_ACCEPTANCE_DIR"
KS = ("1", "2", "5")
FIVE = ("hard_concrete", "slimming", "zero_out", "ig", "activations")

# step -> artifact whose presence means the step already ran
STEPS = [
    ("gen-corpus", [], "corpus/definitions.jsonl"),
    ("train", [], "model.ckpt"),
    ("collect", [], "memorized.jsonl"),
    ("bench-inj", [], "inj/report.json"),
    ("bench-del", [], "del/report.json"),
    ("bench-inj-shift", ["--set", "inject.seed_offset=1000", "--out", "inj_shift"], "inj_shift/report.json"),
]


def _cli(cmd, run_dir, *extra):
    code = main([cmd, "--run-dir", str(run_dir), *extra])
    assert code == 0, f"memloc {cmd} exited {code}"


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = Path(os.environ[DIR_ENV]) if os.environ.get(DIR_ENV) else tmp_path_factory.mktemp("desk") / "run"
    root.mkdir(parents=True, exist_ok=True)
    times_path = root / "acceptance_times.json"
    times = json.loads(times_path.read_text()) if times_path.exists() else {}
    for name, extra, artifact in STEPS:
        if (root / artifact).exists() and name in times:
            continue
        t0 = time.perf_counter()
        _cli(name.replace("-shift", ""), root, *extra)
        times[name] = time.perf_counter() - t0
        times_path.write_text(json.dumps(times, indent=1))
    return root, times


def _load(root, name):
    with open(root / name) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# exact-at-scale checks


def test_c01_gradient_correctness(criterion):
    t0 = time.perf_counter()
    errs = checks.gradient_errors()
    secs = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-6 and secs < 60
    criterion(1, ok, f"max rel err {worst:.2e} over {sorted(errs)} (< 1e-6), {secs:.1f}s (< 60s)")
    assert ok


def test_c02_ig_completeness(criterion):
    res = checks.ig_completeness()
    within, decreasing = checks.ig_completeness_ok(res)
    finest = res["errors"][300]
    bound = 1e-3 * np.abs(res["delta"]) + 1e-6
    ok = within and decreasing
    criterion(2, ok, f"max err@300 {finest.max():.2e}, max err/bound {np.max(finest / bound):.3f}, "
                     f"strictly decreasing 20->100->300: {decreasing}")
    assert ok


def test_c03_mask_column_duality(criterion):
    worst = checks.duality_max_diff(100)
    ok = worst < 1e-12
    criterion(3, ok, f"max per-logit diff {worst:.2e} over 100 pairs (< 1e-12)")
    assert ok


def _zero_out_mismatch(model, seq):
    amap = attr_zero_out(model, seq)
    base = memorization_loss(model, seq)
    bad = 0
    L, d2 = amap.scores.shape
    for l in range(L):
        for i in range(d2):
            bad += amap.scores[l, i] != memorization_loss(apply_neuron_dropout(model, [NeuronId(l + 1, i)]), seq) - base
    return bad, L * d2


def test_c04_zero_out_oracle(criterion, desk):
    root, _ = desk
    toy_bad = checks.zero_out_mismatches()
    mem = read_memorized(root / "memorized.jsonl")
    desk_bad, n = _zero_out_mismatch(TransformerLM.load(root / "model.ckpt"), mem[0].seq)
    ok = toy_bad == 0 and desk_bad == 0
    criterion(4, ok, f"mismatches: toy {toy_bad}, desk model {desk_bad} of {n} scores (exact equality)")
    assert ok


# ---------------------------------------------------------------------------
# random calibration


def test_c05_random_calibration(criterion):
    t0 = time.perf_counter()
    L, d2, trials = 4, 256, 200
    recalls = {k: [] for k in KS}
    for i in range(trials):
        gamma = sample_injection_set(i, 1.0, L, d2)
        amap = attr_random((L, d2), Rng(method_seed(i)))
        for k in KS:
            recalls[k].append(recall_at_k(gamma, select_topk(amap, float(k))))
    secs = time.perf_counter() - t0
    means = {k: 100 * float(np.mean(v)) for k, v in recalls.items()}
    ok = all(abs(means[k] - float(k)) <= 2.0 for k in KS) and secs < 300
    criterion(5, ok, ", ".join(f"R@{k}% {means[k]:.2f}" for k in KS) + f" over {trials} trials (+-2 pts), {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# end-to-end benchmarks


def _converged(report):
    return [s for s in report["sequences"] if s["converged"]]


def _greater_p(a, b):
    """One-tailed paired p for mean(a) > mean(b); identical differences give 0 or 1."""
    try:
        return paired_t_one_tailed(a, b, "greater").p
    except DegenerateSampleError:
        return 0.0 if np.mean(np.subtract(a, b)) > 0 else 1.0


def test_c06_inj_end_to_end(criterion, desk):
    root, times = desk
    rep = _load(root, "inj/report.json")
    seqs = _converged(rep)
    frac = len(seqs) / rep["n_sequences"]
    r5 = {m: [s["recall"][m]["5"] for s in seqs] for m in rep["methods"]}
    mean5 = {m: float(np.mean(v)) for m, v in r5.items()}
    rand = mean5["random"]
    beats_random = {m: mean5[m] >= 5 * rand for m in FIVE}
    p_vs_ig = {m: _greater_p(r5[m], r5["ig"]) for m in ("hard_concrete", "slimming")}
    secs = times["bench-inj"]
    ok = (rep["n_sequences"] == 20 and frac >= 0.9 and all(beats_random.values())
          and all(p < 0.025 for p in p_vs_ig.values()) and secs < 1800)
    criterion(6, ok, f"converged {len(seqs)}/{rep['n_sequences']}; R@5% "
              + ", ".join(f"{m} {100 * mean5[m]:.1f}" for m in rep["methods"])
              + f"; >=5x random: {all(beats_random.values())}; p(pruning > ig) "
              + ", ".join(f"{m} {p:.3g}" for m, p in p_vs_ig.items()) + f" (< 0.025); {secs / 60:.1f} min")
    assert ok


def test_c07_del_end_to_end(criterion, desk):
    root, times = desk
    rep = _load(root, "del/report.json")
    n_collected = len(rep["ids"])
    self_abs = {m: float(np.mean([abs(t["results"][m]["0.5"]["self_acc"]) for t in rep["targets"]]))
                for m in rep["methods"]}
    neg_abs = {m: float(np.mean([abs(t["results"][m]["0.5"]["neg_acc"]) for t in rep["targets"]]))
               for m in rep["methods"]}
    rand = self_abs["random"]
    tenfold = all(self_abs[m] >= 10 * rand and self_abs[m] > 0 for m in FIVE)
    structure = all(self_abs[m] > neg_abs[m] for m in FIVE)
    secs = times["bench-del"]
    ok = n_collected >= 30 and tenfold and structure and 100 * rand < 2.0 and secs < 2700
    criterion(7, ok, f"collected {n_collected}, targets {len(rep['targets'])}; |dSelf|/|dNeg| @0.5% "
              + ", ".join(f"{m} {100 * self_abs[m]:.1f}/{100 * neg_abs[m]:.1f}" for m in rep["methods"])
              + f"; >=10x random: {tenfold}; self > neg: {structure}; {secs / 60:.1f} min")
    assert ok


def _near_duplicate(tokens, n_changed=2):
    """Same factlet with the last suffix bytes swapped for other printable bytes."""
    t = list(tokens)
    for j in range(1, n_changed + 1):
        t[-j] = 33 + (t[-j] - 33 + 7) % 90
    return t


def test_c08_collection_pipeline(criterion, desk):
    root, _ = desk
    model = TransformerLM.load(root / "model.ckpt")
    crit = CollectionCriteria()
    mem = read_memorized(root / "memorized.jsonl")
    # recomputed from scratch, with the quadratic oracle for the distance
    reverify = [token_accuracy(model, m.seq) >= crit.min_accuracy
                and checks.levenshtein_oracle(*_greedy_pair(model, m.seq)) <= crit.max_levenshtein
                and len(set(m.seq.suffix)) >= crit.min_distinct
                for m in mem]
    # duplicates listed before their originals, so order cannot decide the winner
    pool = []
    for m in mem[:3]:
        pool.append(Candidate(f"{m.id}-dup", tuple(_near_duplicate(m.seq.tokens))))
        pool.append(Candidate(m.id, m.seq.tokens))
    kept = collect_memorized(model, pool, crit)
    dedup_ok = [k.id for k in kept] == [m.id for m in mem[:3]]
    lev_bad = checks.levenshtein_mismatches(1000)
    ok = all(reverify) and len(mem) > 0 and dedup_ok and lev_bad == 0
    criterion(8, ok, f"{sum(reverify)}/{len(mem)} sequences re-verify; near-duplicates resolved to originals: "
                     f"{dedup_ok} (kept {[k.id for k in kept]}); Levenshtein oracle mismatches {lev_bad}/1000")
    assert ok


def _greedy_pair(model, seq):
    gen = greedy_suffix(model, seq.tokens[:seq.prefix_len], seq.T)
    return TOKENIZER.decode_text(gen), TOKENIZER.decode_text(seq.suffix)


# ---------------------------------------------------------------------------
# determinism


REDUCED_INI = """
[run]
n_definitions = 2
ig_steps = 4
[train]
steps = 30
warmup = 5
[corpus]
n_facts = 4
repetitions = 20
filler_size = 40
ppl_size = 4
n_background_defs = 20
[collect]
min_accuracy = 0
max_levenshtein = 1000
min_distinct = 0
[inject]
# a 30-step model sits near loss 3.3 on definitions; this still takes real fine-tuning steps
loss_threshold = 3.2
max_steps = 60
lr = 0.2
[del]
n_dev = 2
[slimming]
steps = 5
[hard_concrete]
steps = 5
"""

COMPARED = ["model.ckpt", "corpus/train.jsonl", "corpus/definitions.jsonl", "memorized.jsonl",
            "inject/<def>.ckpt", "inject/<def>.json", "inj/report.json", "inj/table.csv", "inj/detail.csv",
            "del/report.json", "del/table.csv", "del/detail.csv"]


def _reduced_run(root: Path, cfg: Path, workers: int):
    common = ["--config", str(cfg), "--workers", str(workers)]
    for cmd in ("gen-corpus", "train", "collect", "bench-inj", "bench-del"):
        _cli(cmd, root, *common)
    def_id = json.loads((root / "corpus/definitions.jsonl").read_text().splitlines()[1])["id"]
    _cli("inject", root, *common, "--seq", def_id)
    _cli("localize", root, *common, "--seq", def_id, "--injected", *sum([["--method", m] for m in
                                                                         ("hard_concrete", "slimming", "zero_out",
                                                                          "ig", "activations", "random")], []))
    return def_id


def test_c09_determinism(criterion, tmp_path):
    cfg = tmp_path / "reduced.ini"
    cfg.write_text(REDUCED_INI)
    a, b = tmp_path / "serial", tmp_path / "parallel"
    ida = _reduced_run(a, cfg, 1)
    idb = _reduced_run(b, cfg, 2)
    names = [n.replace("<def>", ida) for n in COMPARED]
    names += [str(p.relative_to(a)) for p in sorted((a / "selections").glob("*.json"))]
    differ = [n for n in names if not (b / n).exists() or (a / n).read_bytes() != (b / n).read_bytes()]
    ok = ida == idb and not differ and len(names) > len(COMPARED)
    criterion(9, ok, f"{len(names) - len(differ)}/{len(names)} artifacts byte-identical, serial vs 2 workers"
              + (f"; differ: {differ}" if differ else ""))
    assert ok


# ---------------------------------------------------------------------------
# seed robustness and statistics


def test_c10_seed_robustness(criterion, desk):
    root, _ = desk
    a, b = _load(root, "inj/report.json"), _load(root, "inj_shift/report.json")
    rows = robustness_rows(a, b)
    worst = min(rows, key=lambda r: float(r[6]))
    ok = all(float(r[6]) > 0.05 for r in rows) and b["spec"]["seed_offset"] != a["spec"]["seed_offset"]
    criterion(10, ok, f"{len(rows)} method x k tests; smallest two-tailed p {float(worst[6]):.3g} "
                      f"({worst[0]} @ {worst[1]}%: {worst[2]} vs {worst[3]}) (> 0.05)")
    assert ok


def test_c11_statistics(criterion):
    d = [1.0, 2.0, 3.0, 4.0, 5.0]
    res = paired_t_one_tailed(d, [0.0] * 5, "greater")
    ref_p = float(sps.t.sf(3 / math.sqrt(2.5 / 5), 4))
    values_ok = abs(res.t - 4.2426) < 1e-3 and res.df == 4 and abs(res.p - ref_p) < 1e-3 and abs(res.p - 0.0066) < 1e-3
    try:
        paired_t_one_tailed([1.0, 2.0, 3.0], [0.0, 1.0, 2.0], "greater")
        degenerate_ok = False
    except DegenerateSampleError:
        degenerate_ok = True
    ok = values_ok and degenerate_ok
    criterion(11, ok, f"t {res.t:.4f}, df {res.df}, p {res.p:.5f} (scipy reference {ref_p:.5f}); "
                      f"zero variance raises: {degenerate_ok}")
    assert ok
