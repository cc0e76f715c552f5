"""Clinical records to dialogue text, concept flags, vocabularies and
MLM / NSP training examples."""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

PAD, UNK, CLS, SEP, MASK = range(5)
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")

_WORD = re.compile(r"[a-z0-9]+")
_TURN = re.compile(r"(?=\b(?:Doctor|Patient): )")


class RecordError(ValueError):
    """A raw or canonical record could not be parsed or resolved."""


def words(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _WORD.findall(text.lower())


@dataclass(frozen=True)
class ConceptSpec:
    name: str
    keywords: tuple[str, ...]
    role: str = "treatment"

    def __post_init__(self):
        kws = tuple(" ".join(words(k)) for k in self.keywords)
        if not kws or not all(kws):
            raise ValueError(f"concept {self.name!r} needs at least one non-empty keyword")
        if self.role not in ("treatment", "control"):
            raise ValueError(f"concept role must be 'treatment' or 'control', got {self.role!r}")
        object.__setattr__(self, "keywords", kws)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConceptSpec":
        unknown = set(d) - {"name", "keywords", "role"}
        if unknown:
            raise ValueError(f"unknown concept keys: {sorted(unknown)}")
        return cls(d["name"], tuple(d["keywords"]), d.get("role", "treatment"))

    def to_dict(self) -> dict:
        return {"name": self.name, "keywords": list(self.keywords), "role": self.role}


# "sterum" is kept alongside "sternum" so both spellings flag the concept.
CHEST_PAIN = ConceptSpec("chest pain", ("chest", "sternum", "sterum", "breastbone"))


def label_concept(text: str, spec: ConceptSpec) -> int:
    toks = words(text)
    for kw in spec.keywords:
        kw_toks = kw.split()
        n = len(kw_toks)
        for i in range(len(toks) - n + 1):
            if toks[i:i + n] == kw_toks:
                return 1
    return 0


def render_dialogue(record: Mapping) -> str:
    """Fixed doctor/patient template, one statement per symptom or antecedent."""
    symptoms = list(record.get("symptoms") or [])
    if not symptoms:
        raise RecordError(f"record {record.get('id', '?')}: no symptoms to render")
    sex = {"M": "male", "F": "female"}.get(str(record["sex"]).upper(), str(record["sex"]).lower())
    turns = [
        "Doctor: What brings you in?",
        f"Patient: I am a {int(record['age'])} year old {sex}.",
        "Doctor: What symptoms do you have?",
    ]
    turns += [f"Patient: I have {s}." for s in symptoms]
    antecedents = list(record.get("antecedents") or [])
    if antecedents:
        turns.append("Doctor: Do you have any relevant medical history?")
        turns += [f"Patient: I have a history of {a}." for a in antecedents]
    return " ".join(turns)


def split_turns(text: str) -> list[str]:
    return [t.strip() for t in _TURN.split(text) if t.strip()]


# -- vocabulary / tokenization ---------------------------------------------


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:5]) != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the five special tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens}, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls(list(json.loads(text)["tokens"]))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def build_vocab(corpus: Iterable[str], min_freq: int = 2) -> Vocab:
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    n = 0
    for text in corpus:
        counts.update(words(text))
        n += 1
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIAL_TOKENS),
                  key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIAL_TOKENS) + kept)


def _pad(ids: list[int], max_len: int) -> np.ndarray:
    out = np.full(max_len, PAD, dtype=np.int64)
    out[:len(ids)] = ids
    return out


def tokenize(text: str, vocab: Vocab, max_len: int = 128) -> np.ndarray:
    if max_len < 3:
        raise ValueError("max_len must be >= 3")
    body = [vocab.id(w) for w in words(text)][:max_len - 2]
    return _pad([CLS] + body + [SEP], max_len)


def tokenize_pair(a: str, b: str, vocab: Vocab, max_len: int = 128) -> np.ndarray:
    """CLS A SEP B SEP, trimming the longer side first when over length."""
    ta = [vocab.id(w) for w in words(a)]
    tb = [vocab.id(w) for w in words(b)]
    while len(ta) + len(tb) > max_len - 3:
        if len(ta) >= len(tb):
            ta.pop()
        else:
            tb.pop()
    return _pad([CLS] + ta + [SEP] + tb + [SEP], max_len)


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    return " ".join(vocab.tokens[i] for i in ids if i >= len(SPECIAL_TOKENS))


# -- pretraining examples ----------------------------------------------------


@dataclass
class MlmExample:
    input_ids: np.ndarray
    targets: np.ndarray  # original id at selected positions, -1 elsewhere


@dataclass
class NspExample:
    input_ids: np.ndarray
    label: int  # 1 = consecutive turns
    first: str
    second: str


def make_mlm_example(ids, rng: np.random.Generator, vocab_size: int, rate: float = 0.15) -> MlmExample:
    """BERT masking: pick positions with prob ``rate``; 80% MASK, 10% random, 10% kept."""
    ids = np.asarray(ids, dtype=np.int64)
    candidates = ids >= len(SPECIAL_TOKENS)
    # draws are made for every position so streams do not depend on content
    pick = rng.random(ids.shape[0]) < rate
    action = rng.random(ids.shape[0])
    random_tok = rng.integers(len(SPECIAL_TOKENS), max(vocab_size, len(SPECIAL_TOKENS) + 1), size=ids.shape[0])
    selected = pick & candidates
    inputs = ids.copy()
    targets = np.full_like(ids, -1)
    targets[selected] = ids[selected]
    inputs[selected & (action < 0.8)] = MASK
    swap = selected & (action >= 0.8) & (action < 0.9)
    inputs[swap] = random_tok[swap]
    return MlmExample(inputs, targets)


def make_nsp_pair(
    doc_index: int,
    corpus_turns: Sequence[Sequence[str]],
    rng: np.random.Generator,
    vocab: Vocab,
    max_len: int = 128,
) -> NspExample:
    turns = corpus_turns[doc_index]
    if len(turns) < 2:
        raise ValueError(f"document {doc_index} has fewer than two turns")
    if len(corpus_turns) < 2:
        raise ValueError("negative NSP sampling needs at least two documents")
    i = int(rng.integers(0, len(turns) - 1))
    first = turns[i]
    if rng.random() < 0.5:
        second, label = turns[i + 1], 1
    else:
        other = int(rng.integers(0, len(corpus_turns) - 1))
        other += other >= doc_index
        pool = corpus_turns[other]
        second, label = pool[int(rng.integers(0, len(pool)))], 0
    return NspExample(tokenize_pair(first, second, vocab, max_len), label, first, second)


# -- canonical records -------------------------------------------------------


@dataclass
class CanonicalRecord:
    id: str
    text: str
    concept_flags: dict[str, int]
    gold: list[float]

    def __post_init__(self):
        g = np.asarray(self.gold, dtype=np.float64)
        if g.ndim != 1 or g.size == 0 or (g < 0).any() or abs(g.sum() - 1.0) > 1e-6:
            raise RecordError(f"record {self.id}: gold is not a probability vector")

    @property
    def label(self) -> int:
        return int(np.argmax(self.gold))

    def to_json(self) -> str:
        return json.dumps(
            {"id": self.id, "text": self.text, "concept_flags": self.concept_flags, "gold": self.gold},
            separators=(",", ":"),
        )

    @classmethod
    def from_dict(cls, d: Mapping) -> "CanonicalRecord":
        return cls(str(d["id"]), d["text"], {k: int(v) for k, v in d["concept_flags"].items()},
                   [float(x) for x in d["gold"]])


def flag_concepts(text: str, concepts: Iterable[ConceptSpec]) -> dict[str, int]:
    return {c.name: label_concept(text, c) for c in concepts}


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(row, dict):
                raise RecordError(f"{path}:{lineno}: expected a JSON object")
            rows.append(row)
    return rows


def write_jsonl(path: str | Path, lines: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def load_corpus(path: str | Path) -> list[CanonicalRecord]:
    out = []
    for lineno, row in enumerate(read_jsonl(path), 1):
        try:
            out.append(CanonicalRecord.from_dict(row))
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordError(f"{path}: record {lineno}: {exc}") from None
    return out


def save_corpus(path: str | Path, records: Iterable[CanonicalRecord]) -> None:
    write_jsonl(path, (r.to_json() for r in records))


# -- DDXPlus ingestion -------------------------------------------------------


def _pathology_names(pathologies) -> list[str]:
    if isinstance(pathologies, Mapping):
        return list(pathologies)
    return [p if isinstance(p, str) else p["name"] for p in pathologies]


def expand_evidence(code: str, evidences: Mapping[str, Mapping]) -> tuple[str, bool]:
    """Resolve ``E_12`` or ``E_55_@_V_89`` to (phrase, is_antecedent)."""
    base, _, value = str(code).partition("_@_")
    entry = evidences.get(base)
    if entry is None:
        raise RecordError(f"unknown evidence code {code!r}")
    phrase = entry.get("phrase_en") or entry.get("question_en") or base
    phrase = phrase.strip().rstrip("?").strip()
    if value:
        meaning = entry.get("value_meaning", {}).get(value)
        if isinstance(meaning, Mapping):
            meaning = meaning.get("en")
        phrase = f"{phrase} {meaning if meaning else value}"
    return phrase, bool(entry.get("is_antecedent", False))


def ingest_ddxplus(
    raw: Mapping,
    evidences: Mapping[str, Mapping],
    pathologies,
    concepts: Sequence[ConceptSpec] = (CHEST_PAIN,),
    gold_mode: str = "distribution",
) -> CanonicalRecord:
    """Convert one DDXPlus-style record to a :class:`CanonicalRecord`.

    ``raw`` carries ``id, age, sex, pathology`` plus evidence codes in
    ``symptoms`` / ``antecedents`` (or a mixed ``evidences`` list split by
    the dictionary's ``is_antecedent``) and an optional ``differential`` of
    ``[name, probability]`` pairs.
    """
    if gold_mode not in ("onehot", "distribution"):
        raise ValueError(f"gold_mode must be 'onehot' or 'distribution', got {gold_mode!r}")
    names = _pathology_names(pathologies)
    index = {n: i for i, n in enumerate(names)}
    rid = str(raw.get("id", "?"))
    pathology = raw.get("pathology")
    if not pathology:
        raise RecordError(f"record {rid}: missing pathology")
    if pathology not in index:
        raise RecordError(f"record {rid}: pathology {pathology!r} not in the pathology list")

    symptoms, antecedents = [], []
    for code in raw.get("symptoms") or []:
        symptoms.append(expand_evidence(code, evidences)[0])
    for code in raw.get("antecedents") or []:
        antecedents.append(expand_evidence(code, evidences)[0])
    for code in raw.get("evidences") or []:
        phrase, is_ante = expand_evidence(code, evidences)
        (antecedents if is_ante else symptoms).append(phrase)

    text = render_dialogue({"id": rid, "age": raw["age"], "sex": raw["sex"],
                            "symptoms": symptoms, "antecedents": antecedents})
    gold = np.zeros(len(names))
    differential = raw.get("differential")
    if gold_mode == "distribution" and differential:
        for name, prob in differential:
            if name not in index:
                raise RecordError(f"record {rid}: differential names unknown pathology {name!r}")
            gold[index[name]] += float(prob)
        total = gold.sum()
        if total <= 0:
            raise RecordError(f"record {rid}: differential has no mass")
        gold /= total
    else:
        gold[index[pathology]] = 1.0
    return CanonicalRecord(rid, text, flag_concepts(text, concepts), gold.tolist())


def split_summary(counts: Mapping[str, int]) -> str:
    """One line per split with its share of the total, e.g. ``test 134530 11.60%``."""
    total = sum(counts.values())
    if total <= 0:
        raise ValueError("split counts are empty")
    return "\n".join(f"{name} {n} {100.0 * n / total:.2f}%" for name, n in counts.items())
