"""Synthetic fact world: corpus, question generator, lexical retriever, EM reward."""

from __future__ import annotations

import json
import math
import re
import string
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

# (subject type, relation word, object type); each relation is a function subject -> object
RELATIONS = (
    ("person", "home", "city"),
    ("person", "firm", "company"),
    ("company", "seat", "city"),
    ("city", "nation", "country"),
    ("country", "capital", "city"),
    ("company", "founder", "person"),
)
ENTITY_SHARES = {"person": 0.45, "company": 0.2, "city": 0.25, "country": 0.1}
CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"
ARTICLES = frozenset({"a", "an", "the"})
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_WORD = re.compile(r"[a-z0-9]+")


class GenerationError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Fact:
    subject: str
    relation: str
    object: str
    passage: str
    passage_id: str


@dataclass(frozen=True)
class Question:
    id: str
    text: str
    gold_aliases: tuple[str, ...]
    hops: int
    support_passage_ids: tuple[str, ...]
    # relation path and entity chain; the expert search queries follow from these
    relations: tuple[str, ...] = ()
    chain: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "gold_aliases": list(self.gold_aliases),
            "hops": self.hops,
            "support_passage_ids": list(self.support_passage_ids),
            "relations": list(self.relations),
            "chain": list(self.chain),
        }

    @classmethod
    def from_dict(cls, row: dict) -> "Question":
        return cls(
            row["id"], row["text"], tuple(row["gold_aliases"]), int(row["hops"]),
            tuple(row["support_passage_ids"]), tuple(row.get("relations", ())), tuple(row.get("chain", ())),
        )


@dataclass(frozen=True)
class RetrievalResult:
    hits: tuple[tuple[str, str, float], ...]

    def __len__(self) -> int:
        return len(self.hits)

    @property
    def passage_ids(self) -> list[str]:
        return [h[0] for h in self.hits]

    def render(self) -> str:
        """Text placed inside the <information> block."""
        return "\n".join(f"{rank}. {text}" for rank, (_, text, _) in enumerate(self.hits, start=1))


def render_passage(subject: str, relation: str, obj: str) -> str:
    return f"{relation} of {subject} is {obj}"


def search_query(relation: str, subject: str) -> str:
    return f"{relation} of {subject}"


def retrieval_tokens(text: str) -> list[str]:
    return _WORD.findall(text.lower())


@dataclass
class Corpus:
    facts: list[Fact]
    entities: dict[str, list[str]]
    relations: list[str]
    rng_seed: int

    def __post_init__(self):
        self._by_id = {f.passage_id: f for f in self.facts}
        if len(self._by_id) != len(self.facts):
            raise DataError("duplicate passage ids")
        postings: dict[str, list[int]] = defaultdict(list)
        for i, f in enumerate(self.facts):
            for t in sorted(set(retrieval_tokens(f.passage))):
                postings[t].append(i)
        self._postings = {t: np.asarray(docs, dtype=np.int64) for t, docs in postings.items()}
        n = len(self.facts)
        self._idf = {t: math.log(1.0 + n / len(docs)) for t, docs in postings.items()}
        self._unseen_idf = math.log(1.0 + n)
        # position of each passage in passage_id order, used for tie-breaking
        order = sorted(range(n), key=lambda i: self.facts[i].passage_id)
        self._id_rank = np.empty(n, dtype=np.int64)
        self._id_rank[order] = np.arange(n)

    def __len__(self) -> int:
        return len(self.facts)

    def passage(self, passage_id: str) -> Fact:
        return self._by_id[passage_id]

    def idf(self, token: str) -> float:
        return self._idf.get(token, self._unseen_idf)


def retrieve(query: str, corpus: Corpus, k: int = 3, include_zero: bool = False) -> RetrievalResult:
    """Rank passages by idf-weighted token overlap, normalized by the query's total weight.

    Ties are broken by passage_id ascending. Zero-score passages are dropped
    unless ``include_zero`` is set.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    q = sorted(set(retrieval_tokens(query)))
    if not q:
        return RetrievalResult(())
    norm = sum(corpus.idf(t) for t in q)
    scores = np.zeros(len(corpus.facts))
    for t in q:
        docs = corpus._postings.get(t)
        if docs is not None:
            scores[docs] += corpus.idf(t)
    order = np.lexsort((corpus._id_rank, -scores))
    hits = []
    for i in order[:k]:
        if scores[i] <= 0.0 and not include_zero:
            break
        f = corpus.facts[int(i)]
        hits.append((f.passage_id, f.passage, float(scores[i] / norm)))
    return RetrievalResult(tuple(hits))


def normalize_answer(s: str) -> str:
    s = s.lower().translate(_PUNCT_TABLE)
    return " ".join(w for w in s.split() if w not in ARTICLES)


def exact_match(prediction: str | None, gold_aliases) -> int:
    if not gold_aliases:
        raise ValueError("gold_aliases must be non-empty")
    if prediction is None:
        return 0
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(a) for a in gold_aliases))


def _make_names(rng: np.random.Generator, n: int) -> list[str]:
    syllables = [c + v for c in CONSONANTS for v in VOWELS]
    names: set[str] = set()
    out = []
    reserved = {r for _, r, _ in RELATIONS} | ARTICLES | {"of", "is", "what"}
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 50 * n + 1000:
            raise GenerationError(f"cannot draw {n} distinct entity names")
        length = 2 if rng.random() < 0.7 else 3
        name = "".join(syllables[int(i)] for i in rng.integers(0, len(syllables), size=length))
        if name in names or name in reserved:
            continue
        names.add(name)
        out.append(name)
    return out


def _aliases(name: str, etype: str) -> tuple[str, ...]:
    extra = {"city": f"{name} city", "country": f"republic of {name}", "company": f"{name} inc"}
    aliases = [name, name.capitalize()]
    if etype in extra:
        aliases.append(extra[etype])
    return tuple(aliases)


@dataclass
class World:
    corpus: Corpus
    splits: dict[str, list[Question]]

    @property
    def train(self) -> list[Question]:
        return self.splits["train"]

    @property
    def validation(self) -> list[Question]:
        return self.splits["validation"]

    @property
    def test(self) -> list[Question]:
        return self.splits["test"]

    def question(self, qid: str) -> Question:
        for qs in self.splits.values():
            for q in qs:
                if q.id == qid:
                    return q
        raise KeyError(qid)


SPLIT_FRACTIONS = {"train": 0.8, "validation": 0.1, "test": 0.1}


def generate_world(
    seed: int,
    n_entities: int = 1200,
    n_relations: int = 6,
    n_questions_1hop: int = 700,
    n_questions_2hop: int = 420,
    k: int = 3,
) -> World:
    if min(n_entities, n_relations, n_questions_1hop) <= 0 or n_questions_2hop < 0:
        raise GenerationError("counts must be positive")
    if n_relations > len(RELATIONS):
        raise GenerationError(f"at most {len(RELATIONS)} relations are available")
    rng = np.random.default_rng(seed)
    types = list(ENTITY_SHARES)
    counts = {t: max(2, int(round(n_entities * ENTITY_SHARES[t]))) for t in types}
    names = _make_names(rng, sum(counts.values()))
    entities, cursor = {}, 0
    for t in types:
        entities[t] = names[cursor:cursor + counts[t]]
        cursor += counts[t]
    etype = {e: t for t, es in entities.items() for e in es}

    relations = RELATIONS[:n_relations]
    facts: list[Fact] = []
    table: dict[tuple[str, str], Fact] = {}
    for stype, rel, otype in relations:
        objs = entities[otype]
        for subj in entities[stype]:
            obj = objs[int(rng.integers(len(objs)))]
            pid = f"p{len(facts):05d}"
            fact = Fact(subj, rel, obj, render_passage(subj, rel, obj), pid)
            facts.append(fact)
            table[(subj, rel)] = fact
    corpus = Corpus(facts, entities, [r for _, r, _ in relations], seed)

    def top_k_ok(rel: str, subj: str, pid: str) -> bool:
        return pid in retrieve(search_query(rel, subj), corpus, k).passage_ids

    one_hop = [f for f in facts if top_k_ok(f.relation, f.subject, f.passage_id)]
    if n_questions_1hop > len(one_hop):
        raise GenerationError(f"requested {n_questions_1hop} one-hop questions but only {len(one_hop)} facts exist")
    chains = []
    rel_types = {r: (s, o) for s, r, o in relations}
    for f1 in facts:
        for s2, r2, o2 in relations:
            if s2 != rel_types[f1.relation][1]:
                continue
            f2 = table.get((f1.object, r2))
            # the answer must not already be named in the question
            if f2 is None or f2.object == f1.subject:
                continue
            chains.append((f1, f2))
    chains = [c for c in chains if all(top_k_ok(f.relation, f.subject, f.passage_id) for f in c)]
    if n_questions_2hop > len(chains):
        raise GenerationError(f"requested {n_questions_2hop} two-hop questions but only {len(chains)} chains exist")

    picked1 = [one_hop[int(i)] for i in rng.permutation(len(one_hop))[:n_questions_1hop]]
    picked2 = [chains[int(i)] for i in rng.permutation(len(chains))[:n_questions_2hop]]

    questions: list[Question] = []
    for f in picked1:
        questions.append(Question(
            id="", text=f"what is the {f.relation} of {f.subject}?",
            gold_aliases=_aliases(f.object, etype[f.object]), hops=1,
            support_passage_ids=(f.passage_id,), relations=(f.relation,), chain=(f.subject, f.object),
        ))
    for f1, f2 in picked2:
        questions.append(Question(
            id="", text=f"what is the {f2.relation} of the {f1.relation} of {f1.subject}?",
            gold_aliases=_aliases(f2.object, etype[f2.object]), hops=2,
            support_passage_ids=(f1.passage_id, f2.passage_id),
            relations=(f1.relation, f2.relation), chain=(f1.subject, f1.object, f2.object),
        ))

    splits: dict[str, list[Question]] = {name: [] for name in SPLIT_FRACTIONS}
    for hops in (1, 2):
        group = [q for q in questions if q.hops == hops]
        n = len(group)
        n_train = int(round(n * SPLIT_FRACTIONS["train"]))
        n_val = int(round(n * SPLIT_FRACTIONS["validation"]))
        splits["train"] += group[:n_train]
        splits["validation"] += group[n_train:n_train + n_val]
        splits["test"] += group[n_train + n_val:]
    counter = 0
    for name in SPLIT_FRACTIONS:
        renumbered = []
        for q in splits[name]:
            renumbered.append(Question(f"q{counter:05d}", q.text, q.gold_aliases, q.hops,
                                       q.support_passage_ids, q.relations, q.chain))
            counter += 1
        splits[name] = renumbered
    return World(corpus, splits)


def expert_queries(q: Question) -> list[str]:
    return [search_query(rel, subj) for rel, subj in zip(q.relations, q.chain)]


# persistence: one header record then one record per line


def _write_jsonl(path: Path, header: dict, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path: Path, kind: str) -> tuple[dict, list[dict]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing data file {path}")
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise DataError(f"empty data file {path}")
    header = json.loads(lines[0])
    if header.get("schema") != kind or header.get("version") != SCHEMA_VERSION:
        raise DataError(f"{path}: expected schema {kind} v{SCHEMA_VERSION}, got {header.get('schema')} v{header.get('version')}")
    return header, [json.loads(ln) for ln in lines[1:]]


def save_world(world: World, directory: str | Path) -> None:
    d = Path(directory)
    c = world.corpus
    _write_jsonl(
        d / "corpus.jsonl",
        {"schema": "corpus", "version": SCHEMA_VERSION, "seed": c.rng_seed,
         "entities": c.entities, "relations": c.relations},
        ({"passage_id": f.passage_id, "subject": f.subject, "relation": f.relation,
          "object": f.object, "passage": f.passage} for f in c.facts),
    )
    for name, qs in world.splits.items():
        _write_jsonl(d / f"questions_{name}.jsonl", {"schema": "questions", "version": SCHEMA_VERSION, "split": name},
                     (q.to_dict() for q in qs))


def load_world(directory: str | Path) -> World:
    d = Path(directory)
    header, rows = _read_jsonl(d / "corpus.jsonl", "corpus")
    facts = []
    for r in rows:
        f = Fact(r["subject"], r["relation"], r["object"], r["passage"], r["passage_id"])
        if f.passage != render_passage(f.subject, f.relation, f.object):
            raise DataError(f"passage {f.passage_id} does not match its fact")
        facts.append(f)
    corpus = Corpus(facts, header["entities"], header["relations"], header["seed"])
    splits = {}
    for name in SPLIT_FRACTIONS:
        _, qrows = _read_jsonl(d / f"questions_{name}.jsonl", "questions")
        splits[name] = [Question.from_dict(r) for r in qrows]
    return World(corpus, splits)
