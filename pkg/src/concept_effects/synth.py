"""Synthetic clinic: a disease -> symptom data-generating process with
exactly computable posteriors and concept effects."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from .seeding import derive_rng
from .text import CHEST_PAIN, CanonicalRecord, ConceptSpec, flag_concepts, render_dialogue

MAX_SYMPTOMS = 12


@dataclass
class Scm:
    disease_names: list[str]
    symptom_names: list[str]
    disease_priors: np.ndarray  # (D,)
    emission: np.ndarray  # (D, S): P(symptom s present | disease d)
    concept_symptom: int

    def __post_init__(self):
        self.disease_priors = np.asarray(self.disease_priors, dtype=np.float64)
        self.emission = np.asarray(self.emission, dtype=np.float64)
        d, s = self.emission.shape
        if self.disease_priors.shape != (d,) or len(self.disease_names) != d or len(self.symptom_names) != s:
            raise ValueError("Scm: disease/symptom dimensions disagree")
        if (self.disease_priors < 0).any() or abs(self.disease_priors.sum() - 1) > 1e-9:
            raise ValueError("Scm: priors must lie on the simplex")
        if ((self.emission < 0) | (self.emission > 1)).any():
            raise ValueError("Scm: emission probabilities must lie in [0, 1]")
        if s > MAX_SYMPTOMS:
            raise ValueError(f"Scm: at most {MAX_SYMPTOMS} symptoms for exhaustive enumeration")
        if not 0 <= self.concept_symptom < s:
            raise ValueError("Scm: concept symptom index out of range")

    @property
    def n_diseases(self) -> int:
        return self.emission.shape[0]

    @property
    def n_symptoms(self) -> int:
        return self.emission.shape[1]

    def to_json(self) -> str:
        return json.dumps({
            "disease_names": self.disease_names,
            "symptom_names": self.symptom_names,
            "disease_priors": self.disease_priors.tolist(),
            "emission": self.emission.tolist(),
            "concept_symptom": self.concept_symptom,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Scm":
        d = json.loads(text)
        return cls(d["disease_names"], d["symptom_names"], d["disease_priors"], d["emission"],
                   d["concept_symptom"])


def default_scm() -> Scm:
    """Benchmark process: 5 diseases, 8 symptoms, concept = chest pain.

    Chest pain marks diseases 0-1. The other symptoms pair disease 0 with 2
    and 1 with 3, so they identify the disease within a pair but say little
    about the concept on their own.
    """
    return Scm(
        disease_names=[f"disease {c}" for c in "abcde"],
        symptom_names=["chest pain", "cough", "fever", "fatigue", "headache", "nausea", "dizziness", "wheezing"],
        disease_priors=[0.3, 0.25, 0.2, 0.15, 0.1],
        emission=[
            [0.9, 0.8, 0.7, 0.2, 0.2, 0.4, 0.6, 0.3],
            [0.8, 0.2, 0.3, 0.8, 0.7, 0.4, 0.2, 0.6],
            [0.1, 0.8, 0.7, 0.2, 0.2, 0.4, 0.6, 0.3],
            [0.1, 0.2, 0.3, 0.8, 0.7, 0.4, 0.2, 0.6],
            [0.1, 0.5, 0.5, 0.5, 0.5, 0.8, 0.4, 0.5],
        ],
        concept_symptom=0,
    )


def sample_record(scm: Scm, rng: np.random.Generator, record_id: str = "0",
                  concepts: tuple[ConceptSpec, ...] = (CHEST_PAIN,)) -> CanonicalRecord:
    """Draw one patient; draws with no symptoms are rejected and redrawn."""
    if (scm.emission == 0).all():
        raise ValueError("Scm emits no symptoms for any disease")
    while True:
        d = int(rng.choice(scm.n_diseases, p=scm.disease_priors))
        present = rng.random(scm.n_symptoms) < scm.emission[d]
        if present.any():
            break
    age = int(rng.integers(18, 86))
    sex = "M" if rng.random() < 0.5 else "F"
    symptoms = [scm.symptom_names[s] for s in np.flatnonzero(present)]
    text = render_dialogue({"id": record_id, "age": age, "sex": sex, "symptoms": symptoms})
    gold = [0.0] * scm.n_diseases
    gold[d] = 1.0
    flags = flag_concepts(text, concepts)
    # the concept bit is the symptom bit by construction
    flags[scm.symptom_names[scm.concept_symptom]] = int(present[scm.concept_symptom])
    return CanonicalRecord(record_id, text, flags, gold)


def sample_corpus(scm: Scm, seed: int, n: int, split: str = "train",
                  concepts: tuple[ConceptSpec, ...] = (CHEST_PAIN,)) -> list[CanonicalRecord]:
    return [sample_record(scm, derive_rng(seed, "synth", split, i), f"{split}-{i}", concepts) for i in range(n)]


def _likelihood(scm: Scm, config) -> np.ndarray:
    x = np.asarray(config, dtype=bool)
    if x.shape != (scm.n_symptoms,):
        raise ValueError(f"config must have {scm.n_symptoms} bits")
    return np.prod(np.where(x[None, :], scm.emission, 1.0 - scm.emission), axis=1)


def true_posterior(scm: Scm, config) -> np.ndarray:
    joint = scm.disease_priors * _likelihood(scm, config)
    total = joint.sum()
    if total <= 0:
        raise ValueError(f"configuration {list(map(int, config))} has zero likelihood")
    return joint / total


def true_concept_effect(scm: Scm) -> np.ndarray:
    """E_rest[P(d | rest, concept=1) - P(d | rest, concept=0)] by enumeration."""
    c = scm.concept_symptom
    effect = np.zeros(scm.n_diseases)
    for rest in itertools.product((0, 1), repeat=scm.n_symptoms - 1):
        on = np.insert(np.array(rest), c, 1)
        off = np.insert(np.array(rest), c, 0)
        j_on = scm.disease_priors * _likelihood(scm, on)
        j_off = scm.disease_priors * _likelihood(scm, off)
        weight = j_on.sum() + j_off.sum()  # marginal probability of ``rest``
        if weight == 0:
            continue
        effect += weight * (true_posterior(scm, on) - true_posterior(scm, off))
    return effect
