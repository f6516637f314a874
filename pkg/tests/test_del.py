import numpy as np
import pytest

from memloc import numerics as nx
from memloc.corpus import TOKENIZER, MemorizedSequence, levenshtein
from memloc.del_bench import (DelConfig, DelContext, Scores, confusion_csv, confusion_matrix, eval_dropout_effect,
                              layer_top, run_del_benchmark, single_layer_sweep, split_dev_test, sweep_budget,
                              sweep_csv)
from memloc.lm import ModelConfig, NeuronId, TransformerLM, Sequence, apply_neuron_dropout, perplexity, teacher_forced_predictions
from memloc.locate import AttributionMap, MaskTrainConfig, MethodParams, NeuronSelection

from conftest import random_sequence

FAST = MethodParams(ig_steps=2, slimming=MaskTrainConfig(steps=2), hard_concrete=MaskTrainConfig(steps=2))


@pytest.fixture
def seqs():
    rng = nx.Rng(21)
    return [Sequence(random_sequence(rng, 12, 4).tokens, 4, f"s{i}") for i in range(4)]


@pytest.fixture
def ppl_batch():
    return [list(b"the river and the hill"), list(b"one small house")]


def test_split_dev_test():
    dev, test = split_dev_test(list(range(8)), 5)
    assert dev == [0, 1, 2, 3, 4] and test == [5, 6, 7]
    with pytest.raises(ValueError):
        DelConfig(n_dev=-1)
    with pytest.raises(ValueError):
        DelConfig(ks=(0,))
    with pytest.raises(ValueError):
        DelConfig(methods=("psychic",))


def test_scores_match_direct_computation(tiny_model, seqs, ppl_batch):
    sc = Scores.compute(tiny_model, seqs, ppl_batch)
    for i, s in enumerate(seqs):
        pred = teacher_forced_predictions(tiny_model, s)
        assert sc.acc[i] == np.mean(pred == np.array(s.suffix))
        assert sc.dist[i] == levenshtein(TOKENIZER.decode_text(pred), TOKENIZER.decode_text(s.suffix))
    assert sc.ppl == perplexity(tiny_model, ppl_batch)


def test_effect_deltas_are_after_minus_before(tiny_model, seqs, ppl_batch):
    ctx = DelContext(tiny_model, seqs, ppl_batch)
    sel = [NeuronId(1, i) for i in range(16)] + [NeuronId(2, i) for i in range(16)]
    eff = eval_dropout_effect(ctx, 1, sel)
    after = Scores.compute(apply_neuron_dropout(tiny_model, sel), seqs, ppl_batch)
    d = after.acc - ctx.before.acc
    assert eff["self_acc"] == d[1]
    assert eff["neg_acc"] == pytest.approx(np.mean(d[[0, 2, 3]]))
    assert eff["ppl"] == pytest.approx(after.ppl - ctx.before.ppl)
    assert eff["acc_deltas"] == d.tolist()


def test_empty_selection_is_exactly_zero(tiny_model, seqs, ppl_batch):
    ctx = DelContext(tiny_model, seqs, ppl_batch)
    eff = ctx.effect(0, NeuronSelection(((), ()), 0.5))
    assert eff["self_acc"] == eff["neg_acc"] == eff["ppl"] == 0.0
    assert eff["acc_deltas"] == [0.0] * 4


def test_memorized_inputs_are_unwrapped(tiny_model, seqs):
    mem = [MemorizedSequence(s, 1.0, 0, s.id) for s in seqs]
    a = DelContext(tiny_model, mem, [])
    assert a.seqs == seqs and a.before.ppl == 0.0


def test_benchmark_report(tiny_model, seqs, ppl_batch):
    cfg = DelConfig(ks=(5.0, 10.0), methods=("activations", "random"))
    rep = run_del_benchmark(tiny_model, seqs, ppl_batch, cfg, FAST, targets=[2, 3])
    assert [r["id"] for r in rep.rows] == ["s2", "s3"]
    assert rep.ids == ["s0", "s1", "s2", "s3"]
    means = rep.means()
    assert set(means) == {"activations", "random"} and set(means["random"]) == {"5", "10"}
    assert means["random"]["5"]["self_acc"] == pytest.approx(np.mean(rep.values("random", 5.0, "self_acc")))
    header = rep.table_csv().splitlines()[0]
    assert header.startswith("method,self_acc@5%,self_acc@10%,self_dist@5%")
    assert len(rep.confusion("random", 5.0)) == 2
    assert "seconds" not in rep.json_text()
    assert rep.timing_csv().startswith("method,mean_seconds")
    with pytest.raises(ValueError):
        run_del_benchmark(tiny_model, seqs[:1], ppl_batch, cfg)


def test_skip_bottom_never_touches_layer_one(tiny_model, seqs, monkeypatch):
    import memloc.del_bench as db

    seen = []
    real = db.eval_dropout_effect

    def spy(ctx, target, selection):
        seen.append(list(selection))
        return real(ctx, target, selection)

    monkeypatch.setattr(db, "eval_dropout_effect", spy)
    run_del_benchmark(tiny_model, seqs, [], DelConfig(ks=(10.0,), methods=("activations",)), FAST, targets=[0])
    assert seen and all(n.layer > 1 for sel in seen for n in sel)


def test_serial_parallel_identical(tiny_model, seqs, ppl_batch):
    cfg = DelConfig(ks=(5.0,), methods=("activations", "hard_concrete", "random"))
    a = run_del_benchmark(tiny_model, seqs, ppl_batch, cfg, FAST, workers=1)
    b = run_del_benchmark(tiny_model, seqs, ppl_batch, cfg, FAST, workers=3)
    assert a.json_text() == b.json_text()


def test_confusion_matrix(tiny_model, seqs):
    M = confusion_matrix(tiny_model, seqs, "activations", k=10.0, params=FAST, targets=[0, 1])
    assert M.shape == (2, 4)
    ctx = DelContext(tiny_model, seqs, [])
    from memloc.locate import attr_activations, select_topk

    row = ctx.effect(1, select_topk(attr_activations(tiny_model, seqs[1]), 10.0, skip_bottom=True))["acc_deltas"]
    assert M[1].tolist() == row
    text = confusion_csv(M, seqs[:2], seqs)
    lines = text.splitlines()
    assert lines[0] == "row_id,row_tags,s0,s1,s2,s3" and lines[1].startswith(",tags")


def test_layer_top_and_budget():
    scores = np.array([[0.0, 2.0, 1.0], [5.0, 5.0, 0.0]])
    assert layer_top(scores, 1, 2).layers == ((), (0, 1))
    assert layer_top(scores, 0, 1).layers == ((1,), ())
    assert sweep_budget(0.1, 256, 4) == 3
    assert sweep_budget(5, 256, 4) == 36


def test_single_layer_sweep(tiny_model, seqs):
    ctx = DelContext(tiny_model, seqs, [])
    amap = AttributionMap(nx.Rng(0).uniform(64).reshape(2, 32), "activations")
    rows = single_layer_sweep(ctx, 0, amap, k=10.0)
    assert [r["layer"] for r in rows] == ["1", "2", "multi"]
    assert rows[0]["n"] == 3 and rows[-1]["n"] == 3
    assert sweep_csv(rows).splitlines()[0] == "layer,n,self_acc,neg_acc"
    with pytest.warns(UserWarning):
        single_layer_sweep(ctx, 0, AttributionMap(amap.scores, "slimming"), k=10.0)


def test_sweep_caps_budget_at_layer_width(seqs):
    cfg = ModelConfig(n_layers=3, d_model=16, d_ffn=8, n_heads=2, vocab_size=256, n_ctx=32)
    model = TransformerLM.init(cfg, nx.Rng(1), 0.1)
    ctx = DelContext(model, seqs, [])
    amap = AttributionMap(nx.Rng(0).uniform(24).reshape(3, 8), "ig")
    with pytest.warns(UserWarning, match="capping"):
        rows = single_layer_sweep(ctx, 0, amap, k=75.0)
    assert [r["n"] for r in rows] == [8, 8, 8, 12]
