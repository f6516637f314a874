"""Command-line pipeline: gen-corpus -> train -> collect -> bench-inj / bench-del, plus helpers.

Each subcommand reads ``config.ini`` (or ``--config``), applies ``--set
section.key=value`` overrides and leaves its artifacts in the run
directory; the first command to use a directory writes its config.ini.
Failures print one JSON line on stderr and exit 1 (usage), 2 (config) or 3 (runtime).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import corpus as C
from .config import ConfigError, RunConfig, load_config
from .del_bench import (DelContext, confusion_csv, confusion_matrix, run_del_benchmark, single_layer_sweep,
                        split_dev_test, sweep_csv)
from .inj_bench import inject_sequence, run_inj_benchmark
from .io import atomic_write_text, csv_text, dump_json, sha256_hex, write_json, write_jsonl
from .lm import Sequence, TransformerLM, perplexity, train_base
from .locate import METHODS, localize, select_topk, write_attribution
from .numerics import Rng
from .stats import DegenerateSampleError, bonferroni_alpha, paired_t_one_tailed, paired_t_two_tailed

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
RUN_ROOT_ENV = "MEMLOC_RUN_ROOT"


class UsageError(Exception):
    pass


class ArtifactError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def streams(seed: int) -> dict:
    """Independent generators for each pipeline stage, fixed by the global seed."""
    root = Rng(seed)
    return {name: root.fork() for name in ("corpus", "init", "train", "definitions")}


# ---------------------------------------------------------------------------
# run directory


class Run:
    def __init__(self, cfg: RunConfig, root: Path):
        self.cfg = cfg
        self.root = root
        self.prov = cfg.provenance()

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def need(self, *parts) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise ArtifactError(f"missing artifact {p}; run the earlier pipeline step first")
        return p

    def comments(self) -> dict:
        return dict(self.prov)

    def write_json(self, name, obj):
        write_json(self.path(name), {"provenance": self.prov, **obj})

    def write_text(self, name, text):
        atomic_write_text(self.path(name), text)

    def write_records(self, name, records):
        write_jsonl(self.path(name), [{"provenance": self.prov}] + list(records))

    def read_records(self, name) -> list:
        return C.read_records(self.need(name))

    def model(self, name="model.ckpt") -> TransformerLM:
        return TransformerLM.load(self.need(name))

    def memorized(self) -> list:
        return C.read_memorized(self.need("memorized.jsonl"))

    def definitions(self) -> list:
        return C.read_candidates(self.need("corpus/definitions.jsonl"))

    def ppl_batch(self) -> list:
        return [list(r["text"].encode("latin-1")) for r in self.read_records("corpus/ppl.jsonl")]


def open_run(args) -> Run:
    root = Path(args.run_dir) if args.run_dir else None
    cfg_path = args.config
    if cfg_path is None and root is not None and (root / "config.ini").exists():
        cfg_path = root / "config.ini"
    cfg = load_config(cfg_path, args.set or (), args.seed, args.workers)
    if root is None:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs")) / f"run-{cfg.config_hash()}"
    root.mkdir(parents=True, exist_ok=True)
    # the run's own config is written once; later overrides stay local to their command
    if not (root / "config.ini").exists():
        atomic_write_text(root / "config.ini", cfg.to_ini())
    return Run(cfg, root)


def _text_records(items, kind):
    return [{"id": f"{kind}{i:05d}", "text": C.TOKENIZER.decode_text(t)} for i, t in enumerate(items)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(run: Run, args) -> dict:
    cfg = run.cfg
    rs = streams(cfg.run.seed)
    corp = C.build_synthetic_corpus(rs["corpus"], cfg.corpus)
    defs = C.build_injection_set(rs["definitions"], cfg.run.n_definitions, cfg.corpus.definition_len, corp.definitions)
    pl = cfg.corpus.fact_prefix_len
    run.write_records("corpus/train.jsonl", _text_records(corp.train_docs, "doc"))
    run.write_records("corpus/factlets.jsonl", [C.candidate_record(f, pl) for f in corp.factlets])
    run.write_records("corpus/ppl.jsonl", _text_records(corp.ppl_batch, "ppl"))
    run.write_records("corpus/definitions.jsonl", [C.candidate_record(d, 1) for d in defs])
    return {"train_docs": len(corp.train_docs), "factlets": len(corp.factlets), "definitions": len(defs)}


def cmd_train(run: Run, args) -> dict:
    cfg = run.cfg
    docs = [list(r["text"].encode("latin-1")) for r in run.read_records("corpus/train.jsonl")]
    rs = streams(cfg.run.seed)
    model = TransformerLM.init(cfg.model, rs["init"], cfg.train.init_std)
    model, curve = train_base(model, docs, cfg.train, rs["train"], log_every=args.log_every)
    model.save(run.path("model.ckpt"), meta=run.prov)
    run.write_text("train_curve.csv", csv_text(["step", "loss"], [[i, repr(v)] for i, v in enumerate(curve)],
                                               run.comments()))
    ppl = perplexity(model, run.ppl_batch())
    run.write_json("train_summary.json", {"final_loss": curve[-1] if curve else None, "ppl": ppl})
    return {"steps": len(curve), "final_loss": curve[-1] if curve else None, "ppl": ppl}


def cmd_collect(run: Run, args) -> dict:
    model = run.model()
    pool = C.read_candidates(run.need("corpus/factlets.jsonl"))
    counts: dict = {}
    kept = C.collect_memorized(model, pool, run.cfg.collect, counts)
    run.write_records("memorized.jsonl", [C.memorized_record(m) for m in kept])
    run.write_json("collect_counts.json", {"counts": counts})
    return {"counts": counts}


def _definition(run: Run, ident: str):
    defs = run.definitions()
    for i, d in enumerate(defs):
        if d.id == ident or str(i) == ident:
            return i, d
    raise ArtifactError(f"no definition with id or index {ident!r}")


def cmd_inject(run: Run, args) -> dict:
    base = run.model()
    i, d = _definition(run, args.seq)
    rec = inject_sequence(base, d, run.cfg.inject, i, d.id)
    rec.model.save(run.path("inject", f"{d.id}.ckpt"), meta={**run.prov, "gamma": [[n.layer, n.index] for n in rec.gamma]})
    info = {"id": d.id, "seed": rec.seed, "gamma": [[n.layer, n.index] for n in rec.gamma], "steps": rec.steps,
            "final_loss": rec.final_loss, "converged": rec.converged}
    run.write_json(f"inject/{d.id}.json", info)
    return info


def cmd_localize(run: Run, args) -> dict:
    if args.injected:
        _, d = _definition(run, args.seq)
        model = run.model(f"inject/{d.id}.ckpt")
        seq = Sequence(d.tokens, 1, d.id)
    else:
        model = run.model()
        found = [m for m in run.memorized() if m.id == args.seq]
        if not found:
            raise ArtifactError(f"no memorized sequence {args.seq!r}")
        seq = found[0].seq
    out = {}
    for method in args.method:
        amap = localize(method, model, seq, run.cfg.method_params(), seed=args.method_seed)
        stem = f"{method}__{seq.id}{'__injected' if args.injected else ''}"
        name = f"attributions/{stem}.csv"
        write_attribution(run.path(name), amap, {**run.prov, "sequence_id": seq.id, "model_hash": _model_hash(model)})
        run.write_json(f"selections/{stem}.json", {"method": method, "sequence_id": seq.id,
                                                   "selections": _selections(run.cfg, amap)})
        out[method] = {"file": name, "selection_file": f"selections/{stem}.json", "seconds": amap.seconds}
    return out


def _selections(cfg: RunConfig, amap) -> list:
    """Top-k picks at the INJ ks (all layers) and the DEL ks (with the skip-bottom rule)."""
    out = []
    for ks, skip in ((cfg.run.inj_ks, False), (cfg.dele.ks, cfg.dele.skip_bottom)):
        for k in ks:
            sel = select_topk(amap, k, skip_bottom=skip)
            out.append({"k": k, "skip_bottom": skip, "neurons": [[n.layer, n.index] for n in sel]})
    return out


def _model_hash(model: TransformerLM) -> str:
    return sha256_hex(model.to_bytes())[:16]


def cmd_bench_inj(run: Run, args) -> dict:
    cfg = run.cfg
    defs = run.definitions()
    if args.limit:
        defs = defs[:args.limit]
    rep = run_inj_benchmark(run.model(), defs, cfg.inject, cfg.run.methods, cfg.run.inj_ks, cfg.method_params(),
                            cfg.workers)
    sub = args.out or "inj"
    write_json(run.path(sub, "report.json"), {"provenance": run.prov, **rep.to_json()})
    run.write_text(f"{sub}/config.ini", cfg.to_ini())
    run.write_text(f"{sub}/table.csv", rep.table_csv("per-layer", run.comments()))
    run.write_text(f"{sub}/table_global.csv", rep.table_csv("global", run.comments()))
    run.write_text(f"{sub}/detail.csv", rep.detail_csv(run.comments()))
    run.write_text(f"{sub}/timing.csv", rep.timing_csv(run.comments()))
    return {"n_sequences": len(rep.rows), "n_converged": rep.n_converged, "dir": str(run.path(sub))}


def _del_targets(run: Run, n: int) -> list:
    dev, test = split_dev_test(list(range(n)), run.cfg.dele.n_dev)
    if not test:
        raise ArtifactError(f"only {n} memorized sequences; nothing left after {len(dev)} dev sequences")
    return test


def cmd_bench_del(run: Run, args) -> dict:
    cfg = run.cfg
    mem = run.memorized()
    dcfg = replace(cfg.dele, methods=tuple(cfg.run.methods))
    rep = run_del_benchmark(run.model(), mem, run.ppl_batch(), dcfg, cfg.method_params(),
                            _del_targets(run, len(mem)), cfg.workers)
    write_json(run.path("del", "report.json"), {"provenance": run.prov, **rep.to_json()})
    run.write_text("del/table.csv", rep.table_csv(run.comments()))
    run.write_text("del/detail.csv", rep.detail_csv(run.comments()))
    run.write_text("del/timing.csv", rep.timing_csv(run.comments()))
    return {"targets": len(rep.rows), "dir": str(run.path("del"))}


def cmd_confusion(run: Run, args) -> dict:
    mem = run.memorized()
    targets = _del_targets(run, len(mem))
    M = confusion_matrix(run.model(), mem, args.method, args.k, True, run.cfg.method_params(), targets,
                         run.cfg.workers)
    name = f"del/confusion_{args.method}_{args.k:g}.csv"
    run.write_text(name, confusion_csv(M, [mem[t] for t in targets], mem, run.comments()))
    diag = [M[r, t] for r, t in enumerate(targets)]
    off = [M[r, c] for r, t in enumerate(targets) for c in range(len(mem)) if c != t]
    return {"file": name, "mean_diagonal": float(np.mean(diag)), "mean_off_diagonal": float(np.mean(off))}


def cmd_sweep_layer(run: Run, args) -> dict:
    if args.method not in ("zero_out", "activations", "ig", "random"):
        raise UsageError("sweep-layer needs a per-neuron method: zero_out, activations or ig")
    model = run.model()
    mem = run.memorized()
    ctx = DelContext(model, mem, [])
    targets = _del_targets(run, len(mem))
    if args.target:
        ids = [m.id for m in mem]
        if args.target not in ids:
            raise ArtifactError(f"no memorized sequence {args.target!r}")
        targets = [ids.index(args.target)]
    rows = []
    for t in targets:
        amap = localize(args.method, model, ctx.seqs[t], run.cfg.method_params(), seed=t)
        for r in single_layer_sweep(ctx, t, amap, args.k):
            rows.append([ctx.seqs[t].id, r["layer"], r["n"], repr(r["self_acc"]), repr(r["neg_acc"])])
    name = f"del/sweep_{args.method}_{args.k:g}.csv"
    run.write_text(name, csv_text(["id", "layer", "n", "self_acc", "neg_acc"], rows, run.comments()))
    return {"file": name, "targets": len(targets)}


PRUNING = ("hard_concrete", "slimming")


def significance_rows(report: dict, alpha: float = 0.05) -> list:
    """One-tailed paired tests: each pruning method vs each other non-random method, per k."""
    methods = report["methods"]
    seqs = [s for s in report["sequences"] if s["converged"]]
    pairs = [(a, b) for a in PRUNING if a in methods for b in methods if b not in PRUNING and b != "random"]
    n_tests = len(pairs) * len(report["ks"])
    rows = []
    for k in report["ks"]:
        for a, b in pairs:
            xa = [s["recall"][a][k] for s in seqs]
            xb = [s["recall"][b][k] for s in seqs]
            try:
                t = paired_t_one_tailed(xa, xb, "greater")
                rows.append([a, b, k, f"{t.t:.4f}", t.df, f"{t.p:.6g}", f"{bonferroni_alpha(alpha, n_tests):.6g}"])
            except DegenerateSampleError:
                rows.append([a, b, k, "", len(seqs) - 1, "", f"{bonferroni_alpha(alpha, n_tests):.6g}"])
    return rows


def robustness_rows(a: dict, b: dict) -> list:
    """Two-tailed paired tests between two INJ reports with different seed offsets."""
    ids_a = {s["id"]: s for s in a["sequences"] if s["converged"]}
    ids_b = {s["id"]: s for s in b["sequences"] if s["converged"]}
    common = sorted(set(ids_a) & set(ids_b))
    rows = []
    for m in a["methods"]:
        for k in a["ks"]:
            xa = [ids_a[i]["recall"][m][k] for i in common]
            xb = [ids_b[i]["recall"][m][k] for i in common]
            try:
                t = paired_t_two_tailed(xa, xb)
                rows.append([m, k, f"{np.mean(xa):.4f}", f"{np.mean(xb):.4f}", f"{t.t:.4f}", t.df, f"{t.p:.6g}"])
            except DegenerateSampleError:
                rows.append([m, k, f"{np.mean(xa):.4f}", f"{np.mean(xb):.4f}", "", len(common) - 1, "1"])
    return rows


def cmd_stats(run: Run, args) -> dict:
    with open(args.report or run.need("inj", "report.json")) as fh:
        report = json.load(fh)
    rows = significance_rows(report, args.alpha)
    header = ["method", "baseline", "k", "t", "df", "p_one_tailed", "alpha_bonferroni"]
    run.write_text("inj/significance.csv", csv_text(header, rows, run.comments()))
    out = {"tests": len(rows), "file": "inj/significance.csv"}
    if args.compare:
        with open(args.compare) as fh:
            other = json.load(fh)
        rrows = robustness_rows(report, other)
        run.write_text("inj/seed_robustness.csv", csv_text(
            ["method", "k", "mean_a", "mean_b", "t", "df", "p_two_tailed"], rrows, run.comments()))
        out["robustness_file"] = "inj/seed_robustness.csv"
    return out


def cmd_selfcheck(run: Run, args) -> dict:
    from .checks import run_selfcheck
    res = run_selfcheck(quick=args.quick)
    run.write_json("selfcheck.json", res)
    if not res["ok"]:
        raise RuntimeError("selfcheck failed: " + ", ".join(k for k, v in res["checks"].items() if not v["ok"]))
    return res


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "train": cmd_train, "collect": cmd_collect, "inject": cmd_inject,
    "localize": cmd_localize, "bench-inj": cmd_bench_inj, "bench-del": cmd_bench_del,
    "confusion": cmd_confusion, "sweep-layer": cmd_sweep_layer, "stats": cmd_stats, "selfcheck": cmd_selfcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file (default: <run-dir>/config.ini if present)")
    common.add_argument("--run-dir", help=f"output directory (default: ${RUN_ROOT_ENV}/run-<config hash>)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--workers", type=int, help="parallel worker processes (results do not depend on it)")

    p = _Parser(prog="memloc", description="Localize memorized sequences in a tiny byte-level LM.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    sub.add_parser("gen-corpus", parents=[common], help="write the synthetic corpora")
    t = sub.add_parser("train", parents=[common], help="train the base model")
    t.add_argument("--log-every", type=int, default=0)
    sub.add_parser("collect", parents=[common], help="filter factlets down to memorized sequences")
    i = sub.add_parser("inject", parents=[common], help="inject one definition sentence")
    i.add_argument("--seq", required=True, help="definition id or index")
    lo = sub.add_parser("localize", parents=[common], help="write attribution maps")
    lo.add_argument("--seq", required=True)
    lo.add_argument("--method", action="append", choices=METHODS, required=True)
    lo.add_argument("--injected", action="store_true", help="use the injected model for a definition")
    lo.add_argument("--method-seed", type=int, default=0)
    bi = sub.add_parser("bench-inj", parents=[common], help="run the INJ benchmark")
    bi.add_argument("--limit", type=int, default=0)
    bi.add_argument("--out", help="subdirectory for the reports (default inj)")
    sub.add_parser("bench-del", parents=[common], help="run the DEL benchmark")
    cf = sub.add_parser("confusion", parents=[common], help="DEL confusion matrix for one method")
    cf.add_argument("--method", choices=METHODS, required=True)
    cf.add_argument("--k", type=float, default=0.5)
    sw = sub.add_parser("sweep-layer", parents=[common], help="single-layer dropout budget sweep")
    sw.add_argument("--method", choices=METHODS, required=True)
    sw.add_argument("--k", type=float, default=0.1)
    sw.add_argument("--target")
    st = sub.add_parser("stats", parents=[common], help="significance tables for an INJ report")
    st.add_argument("--report")
    st.add_argument("--compare", help="second INJ report (other seed offset) for two-tailed tests")
    st.add_argument("--alpha", type=float, default=0.05)
    sc = sub.add_parser("selfcheck", parents=[common], help="numerical self-tests")
    sc.add_argument("--quick", action="store_true")
    return p


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit": code}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail("usage", str(e), EXIT_USAGE)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        run = open_run(args)
        t0 = time.perf_counter()
        result = COMMANDS[args.command](run, args)
    except UsageError as e:
        return _fail("usage", str(e), EXIT_USAGE)
    except ConfigError as e:
        return _fail("config", str(e), EXIT_CONFIG)
    except (ArtifactError, OSError) as e:
        return _fail("artifact", str(e), EXIT_RUNTIME)
    except Exception as e:  # noqa: BLE001 - every failure becomes one parseable line
        return _fail("runtime", f"{type(e).__name__}: {e}", EXIT_RUNTIME)
    sys.stdout.write(dump_json({"command": args.command, "run_dir": str(run.root),
                                "seconds": round(time.perf_counter() - t0, 3), **result}))
    return EXIT_OK


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
