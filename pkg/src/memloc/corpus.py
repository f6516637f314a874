"""Byte tokenizer, synthetic corpora, and the memorized-sequence collector."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple, Sequence as Seq

from .io import read_jsonl, write_jsonl
from .lm import Sequence, greedy_suffix, token_accuracy
from .numerics import Rng


class ByteTokenizer:
    """The 256 byte values, no special tokens."""

    vocab_size = 256

    def encode(self, data) -> list[int]:
        if isinstance(data, str):
            data = data.encode("utf-8")
        return list(bytes(data))

    def decode(self, tokens) -> bytes:
        return bytes(int(t) for t in tokens)

    def decode_text(self, tokens) -> str:
        # one character per byte, so character distances equal byte distances
        return self.decode(tokens).decode("latin-1")


TOKENIZER = ByteTokenizer()


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def ngrams(tokens, n: int) -> set:
    tokens = tuple(tokens)
    return {tokens[i:i + n] for i in range(len(tokens) - n + 1)}


def jaccard_ngrams(a, b, n: int = 5) -> float:
    if len(a) < n or len(b) < n:
        raise ValueError(f"inputs must have at least {n} tokens")
    A, B = ngrams(a, n), ngrams(b, n)
    return len(A & B) / len(A | B)


@dataclass(frozen=True)
class CollectionCriteria:
    prefix_len: int = 32
    suffix_len: int = 48
    min_accuracy: float = 0.9
    max_levenshtein: int = 20
    min_distinct: int = 16
    ngram: int = 5
    jaccard_threshold: float = 0.5

    def __post_init__(self):
        if self.prefix_len < 1 or self.suffix_len < 1:
            raise ValueError("prefix_len and suffix_len must be positive")
        if not 0.0 <= self.min_accuracy <= 1.0:
            raise ValueError("min_accuracy must lie in [0, 1]")
        if self.max_levenshtein < 0 or self.min_distinct < 0 or self.ngram < 1:
            raise ValueError("invalid collection threshold")
        if not 0.0 <= self.jaccard_threshold <= 1.0:
            raise ValueError("jaccard_threshold must lie in [0, 1]")


@dataclass(frozen=True)
class MemorizedSequence:
    seq: Sequence
    accuracy: float
    greedy_distance: int
    source_id: str
    tags: tuple = ()

    @property
    def id(self) -> str:
        return self.seq.id


@dataclass(frozen=True)
class Candidate:
    id: str
    tokens: tuple
    tags: tuple = ()


def greedy_distance(model, seq: Sequence, mask=None) -> int:
    gen = greedy_suffix(model, seq.tokens[:seq.prefix_len], seq.T, mask)
    return levenshtein(TOKENIZER.decode_text(gen), TOKENIZER.decode_text(seq.suffix))


def collect_memorized(model, pool: Iterable[Candidate], criteria: CollectionCriteria = CollectionCriteria(),
                      counts: dict | None = None) -> list[MemorizedSequence]:
    """Accuracy, greedy-Levenshtein, distinct-token and n-gram dedup filters, in that order.

    ``counts`` (if given) receives the number of candidates surviving each stage.
    """
    counts = {} if counts is None else counts
    need = criteria.prefix_len + criteria.suffix_len
    stage = []
    for c in pool:
        if len(c.tokens) < need:
            raise ValueError(f"candidate {c.id} has fewer than {need} tokens")
        stage.append((c, Sequence(c.tokens[:need], criteria.prefix_len, c.id)))
    counts["candidates"] = len(stage)

    scored = []
    for c, seq in stage:
        acc = token_accuracy(model, seq)
        if acc >= criteria.min_accuracy:
            scored.append((c, seq, acc))
    counts["accuracy"] = len(scored)

    kept = []
    for c, seq, acc in scored:
        dist = greedy_distance(model, seq)
        if dist <= criteria.max_levenshtein:
            kept.append(MemorizedSequence(seq, acc, dist, c.id, tuple(c.tags)))
    counts["levenshtein"] = len(kept)

    kept = [m for m in kept if len(set(m.seq.suffix)) >= criteria.min_distinct]
    counts["distinct"] = len(kept)

    kept = dedup(kept, criteria.ngram, criteria.jaccard_threshold)
    counts["dedup"] = len(kept)
    return kept


def dedup(items: Seq[MemorizedSequence], n: int, threshold: float) -> list[MemorizedSequence]:
    """Cluster by transitive closure of Jaccard > threshold; keep each cluster's best-memorized member."""
    parent = list(range(len(items)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    grams = [ngrams(m.seq.tokens, n) for m in items]
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            union = grams[i] | grams[j]
            if union and len(grams[i] & grams[j]) / len(union) > threshold:
                parent[find(j)] = find(i)

    best: dict[int, int] = {}
    for i, m in enumerate(items):
        r = find(i)
        if r not in best or m.greedy_distance < items[best[r]].greedy_distance:
            best[r] = i
    return [items[i] for i in sorted(best.values())]


# ---------------------------------------------------------------------------
# synthetic data

FILLER_WORDS = (
    "the of and to in is was for on that with as by at from it his an were are which this be has or had "
    "first not their but also its new after been one they who two time other more into only over during "
    "city year some most used later many such when would where there between both under three world "
    "known since while through part called people state than then these about each made early may well "
    "river north south east west house small large long high old great water land king war school music "
    "light stone field road bridge garden tower market village summer winter night morning book story "
    "song river valley forest island harbor church castle station museum library farm mill lake hill"
).split()

FACT_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789#%&+=@"

SYLLABLES = ("ka ro mi te zu lan vor shi qua bel dex nor ith gal pim sul tav wen yor fel "
             "mar cor bri ska tol ven dru nix").split()
KINDS = ("variant", "protocol", "festival", "compound", "satellite", "dialect", "vaccine", "platform")
NOUNS = ("strain", "token", "ritual", "alloy", "probe", "movement", "network", "species")
PLACES = ("Brazil", "Oslo", "Peru", "Kenya", "Quebec", "Nepal", "Chile", "Malta")


@dataclass(frozen=True)
class CorpusParams:
    n_facts: int = 40
    repetitions: int = 200
    filler_size: int = 2000
    fact_prefix_len: int = 32
    fact_suffix_len: int = 48
    filler_len: int = 80
    ppl_size: int = 64
    ngram: int = 5
    n_background_defs: int = 1000
    definition_len: int = 48

    def __post_init__(self):
        if min(self.repetitions, self.fact_prefix_len, self.fact_suffix_len, self.filler_len, self.ppl_size) < 1:
            raise ValueError("corpus parameters must be positive")
        if self.n_facts < 0 or self.filler_size < 0 or self.n_background_defs < 0:
            raise ValueError("counts must be non-negative")


class SyntheticCorpus(NamedTuple):
    train_docs: list  # token lists, shuffled factlet copies, filler and background definitions
    factlets: list  # Candidate
    ppl_batch: list  # token lists, disjoint from the factlets
    filler: list  # token lists
    definitions: list  # background definition texts (str), one training copy each


def filler_text(rng: Rng, n_bytes: int) -> str:
    words = []
    size = 0
    while size < n_bytes:
        w = rng.choice(FILLER_WORDS)
        mark = rng.integer(18)
        if mark < 2:
            w += "."
        elif mark == 2:
            w += ","
        words.append(w)
        size += len(w) + 1
    return " ".join(words)[:n_bytes]


def make_factlet(rng: Rng, length: int) -> str:
    return "".join(rng.choice(FACT_ALPHABET) for _ in range(length))


def build_synthetic_corpus(rng: Rng, params: CorpusParams = CorpusParams()) -> SyntheticCorpus:
    """Random filler plus repeated high-entropy factlets and a held-out perplexity batch.

    Factlets share no n-gram with one another or with the perplexity batch.
    Background definitions teach the sentence template that injected
    definitions use, so injection only has to store the new entity.
    """
    n = params.ngram
    fact_len = params.fact_prefix_len + params.fact_suffix_len
    filler = [TOKENIZER.encode(filler_text(rng, params.filler_len)) for _ in range(params.filler_size)]
    ppl = [TOKENIZER.encode(filler_text(rng, params.filler_len)) for _ in range(params.ppl_size)]
    ppl_grams = set().union(*(ngrams(p, n) for p in ppl)) if ppl else set()

    facts: list[Candidate] = []
    seen: set = set()
    while len(facts) < params.n_facts:
        toks = tuple(TOKENIZER.encode(make_factlet(rng, fact_len)))
        grams = ngrams(toks, n)
        if grams & seen or grams & ppl_grams:
            continue
        if len(set(toks[params.fact_prefix_len:])) < 16:
            continue
        seen |= grams
        facts.append(Candidate(f"fact{len(facts):03d}", toks, ("factlet",)))

    defs = sorted({make_definition(rng, params.definition_len) for _ in range(params.n_background_defs)})
    docs = ([list(f.tokens) for f in facts for _ in range(params.repetitions)] + [list(f) for f in filler]
            + [TOKENIZER.encode(d) for d in defs])
    order = rng.permutation(len(docs))
    return SyntheticCorpus([docs[i] for i in order], facts, ppl, filler, defs)


def make_definition(rng: Rng, length: int = 48) -> str:
    name = "".join(rng.choice(SYLLABLES) for _ in range(2 + rng.integer(2))).capitalize()
    alias = "".join(rng.choice(SYLLABLES) for _ in range(2)).capitalize()
    text = (f"{name} {rng.choice(KINDS)}, also known as {alias} {rng.integer(90) + 10}, "
            f"is a {rng.choice(NOUNS)} first seen in {rng.choice(PLACES)} in 2021.")
    return text[:length]


def _entity(text: str) -> str:
    return text.split(" ", 1)[0]


def build_injection_set(rng: Rng, n: int, length: int = 48, exclude: Iterable[str] = ()) -> list[Candidate]:
    """Entity-definition sentences about entities absent from ``exclude`` (e.g. the training definitions)."""
    out, texts = [], set()
    seen = {_entity(t) for t in exclude}
    while len(out) < n:
        text = make_definition(rng, length)
        if text in texts or _entity(text) in seen:
            continue
        texts.add(text)
        seen.add(_entity(text))
        out.append(Candidate(f"def{len(out):03d}", tuple(TOKENIZER.encode(text)), ("definition",)))
    return out


# ---------------------------------------------------------------------------
# JSON-lines dataset files


def candidate_record(c: Candidate, prefix_len: int) -> dict:
    return {"id": c.id, "text": TOKENIZER.decode_text(c.tokens), "prefix_len": prefix_len, "tags": list(c.tags)}


def memorized_record(m: MemorizedSequence) -> dict:
    return {"id": m.id, "text": TOKENIZER.decode_text(m.seq.tokens), "prefix_len": m.seq.prefix_len,
            "tags": list(m.tags), "accuracy": m.accuracy, "greedy_distance": m.greedy_distance,
            "source_id": m.source_id}


def _tokens(text: str) -> tuple:
    return tuple(text.encode("latin-1"))


def write_dataset(path, records):
    write_jsonl(path, records)


def read_records(path) -> list[dict]:
    # a leading {"provenance": ...} line is metadata, not data
    return [r for r in read_jsonl(path) if "provenance" not in r]


def read_candidates(path) -> list[Candidate]:
    return [Candidate(r["id"], _tokens(r["text"]), tuple(r.get("tags", ()))) for r in read_records(path)]


def read_sequences(path) -> list[Sequence]:
    return [Sequence(_tokens(r["text"]), r["prefix_len"], r["id"]) for r in read_records(path)]


def read_memorized(path) -> list[MemorizedSequence]:
    out = []
    for r in read_records(path):
        seq = Sequence(_tokens(r["text"]), r["prefix_len"], r["id"])
        out.append(MemorizedSequence(seq, r["accuracy"], r["greedy_distance"], r.get("source_id", r["id"]),
                                     tuple(r.get("tags", ()))))
    return out
