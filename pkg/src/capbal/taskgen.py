"""Rule-based, source-grounded task generation with two quality gates.

Pipeline: extract concepts from a source document's fact triples (gate 1:
concept confidence >= tau_entity), fill a reasoning template with the most
confident concepts, score the instance with a fixed rubric and keep it only
if the score is >= tau_medical (gate 2).
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from capbal._rng import make_rng
from capbal.envpolicy import CAPABILITIES, Capability, Difficulty
from capbal.errors import ConfigError, DataError, GenerationError

log = logging.getLogger(__name__)

DEFAULT_STAGES = ("symptom-analysis", "diagnostic-reasoning", "treatment-planning")
RUBRIC_WEIGHTS = (0.4, 0.3, 0.3)  # completeness, consistency, source cleanliness
SAFETY_DENYLIST = ("double-dose", "unsupervised-withdrawal")

_STAGE_PHRASES = {
    "symptom-analysis": ("{c} is the presenting finding.", "The history points to {c}.", "Examination shows {c}."),
    "diagnostic-reasoning": ("The findings are consistent with {c}.", "{c} best explains the picture.",
                             "Differential narrows to {c}."),
    "treatment-planning": ("Management centres on {c}.", "Start {c} and monitor response.",
                           "{c} is the indicated next step."),
}
_QUESTION_PHRASES = (
    "A patient presents with {c}. What is the appropriate plan?",
    "Given {c}, what should be done next?",
    "How should a case of {c} be managed?",
)


@dataclass(frozen=True)
class QualityConfig:
    tau_entity: float = 0.8
    tau_medical: float = 0.85

    def validate(self):
        # 0 switches a gate off; the nominal range is (0, 1]
        for name in ("tau_entity", "tau_medical"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        return self


@dataclass(frozen=True)
class SourceDoc:
    id: str
    facts: tuple
    noise_level: float = 0.0

    def validate(self):
        if not self.facts:
            raise DataError(f"{self.id}: document has no facts")
        if not 0.0 <= self.noise_level <= 1.0:
            raise DataError(f"{self.id}: noise_level {self.noise_level} outside [0, 1]")
        for f in self.facts:
            if len(f) != 3:
                raise DataError(f"{self.id}: fact {f!r} is not a (subject, relation, object) triple")
        return self

    def to_dict(self):
        return {"id": self.id, "facts": [list(f) for f in self.facts], "noise_level": self.noise_level}


@dataclass(frozen=True)
class ReasoningTemplate:
    id: str
    stages: tuple = DEFAULT_STAGES
    slot_count: int = 3
    capability: Capability = Capability.DOMAIN
    difficulty: Difficulty = Difficulty.EASY
    gold_action: int = 0
    slot: int = 0


@dataclass(frozen=True)
class Concept:
    text: str
    confidence: float


@dataclass(frozen=True)
class TaskInstance:
    id: str
    capability: Capability
    question: str
    reasoning_chain: tuple
    answer: str
    gold_action: int
    difficulty: Difficulty
    quality: float = 0.0
    stages: tuple = DEFAULT_STAGES
    source_noise: float = 0.0
    source_id: str = ""
    template_id: str = ""
    slot: int = 0

    def to_dict(self):
        d = asdict(self)
        d["capability"] = self.capability.value
        d["difficulty"] = self.difficulty.value
        d["reasoning_chain"] = list(self.reasoning_chain)
        d["stages"] = list(self.stages)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["capability"] = Capability(d["capability"])
        d["difficulty"] = Difficulty(d["difficulty"])
        d["reasoning_chain"] = tuple(d["reasoning_chain"])
        d["stages"] = tuple(d["stages"])
        return cls(**d)


@dataclass
class Dataset:
    instances: list
    n_generated: int = 0
    n_skipped: int = 0
    tau_entity: float = 0.8
    tau_medical: float = 0.85
    warnings: list = field(default_factory=list)

    @property
    def status(self):
        return "empty" if not self.instances else "ok"

    def counts(self):
        return {c.value: sum(1 for i in self.instances if i.capability == c) for c in CAPABILITIES}

    def composition(self):
        """Rows: one per capability plus a total row (synthetic/real/total/mean quality)."""
        rows = []
        for cap in CAPABILITIES:
            q = [i.quality for i in self.instances if i.capability == cap]
            rows.append(_row(cap.value, q))
        rows.append(_row("total", [i.quality for i in self.instances]))
        return rows

    def header(self):
        return {
            "record": "header",
            "status": self.status,
            "n_instances": len(self.instances),
            "n_generated": self.n_generated,
            "n_skipped": self.n_skipped,
            "tau_entity": self.tau_entity,
            "tau_medical": self.tau_medical,
            "composition": self.composition(),
        }


def _row(label, qualities):
    return {
        "capability": label,
        "synthetic": len(qualities),
        "real": 0,
        "total": len(qualities),
        "quality": round(float(np.mean(qualities)), 6) if qualities else None,
    }


def hash_fraction(text):
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def extract_concepts(doc, cfg):
    seen = []
    for subj, _rel, obj in doc.facts:
        for term in (subj, obj):
            term = term.strip()
            if term and term not in seen:
                seen.append(term)
    concepts = [Concept(t, 1.0 - doc.noise_level * hash_fraction(t)) for t in seen]
    kept = [c for c in concepts if c.confidence >= cfg.tau_entity]
    return sorted(kept, key=lambda c: (-c.confidence, c.text))


def _stage_sentence(stage, concept, rng):
    phrases = _STAGE_PHRASES.get(stage)
    if phrases is None:
        return f"{stage}: consider {concept}."
    return phrases[int(rng.integers(len(phrases)))].format(c=concept)


def instantiate(doc, template, concepts, rng):
    if len(concepts) < template.slot_count:
        raise GenerationError(
            doc.id, f"template {template.id} needs {template.slot_count} concepts, got {len(concepts)}"
        )
    slots = [c.text for c in concepts[: template.slot_count]]
    question = _QUESTION_PHRASES[int(rng.integers(len(_QUESTION_PHRASES)))].format(c=slots[0])
    chain = tuple(_stage_sentence(stage, slots[i % len(slots)], rng) for i, stage in enumerate(template.stages))
    answer = f"<answer>{slots[-1]}</answer>"
    return TaskInstance(
        id=f"{doc.id}/{template.id}",
        capability=template.capability,
        question=question,
        reasoning_chain=chain,
        answer=answer,
        gold_action=template.gold_action,
        difficulty=template.difficulty,
        quality=0.0,
        stages=tuple(template.stages),
        source_noise=doc.noise_level,
        source_id=doc.id,
        template_id=template.id,
        slot=template.slot,
    )


def answer_text(answer):
    return answer.replace("<answer>", "").replace("</answer>", "").strip()


def quality_score(inst):
    w_complete, w_consistent, w_clean = RUBRIC_WEIGHTS
    n_stages = len(inst.stages)
    present = sum(1 for s in inst.reasoning_chain[:n_stages] if s and s.strip())
    completeness = present / n_stages if n_stages else 0.0
    ans = answer_text(inst.answer)
    text = " ".join(inst.reasoning_chain) + " " + inst.answer
    grounded = bool(ans) and any(ans in s for s in inst.reasoning_chain)
    safe = not any(term in text for term in SAFETY_DENYLIST)
    consistency = 1.0 if grounded and safe else 0.0
    q = w_complete * completeness + w_consistent * consistency + w_clean * (1.0 - inst.source_noise)
    return min(1.0, max(0.0, q))


def curate(corpus, templates, cfg, seed):
    """Extract -> instantiate -> score -> filter, in corpus order.

    Document ``i`` is paired with template ``i mod len(templates)`` and gets
    its own random stream, so the result depends only on the inputs and seed.
    """
    corpus = list(corpus)
    templates = list(templates)
    if not corpus or not templates:
        raise DataError("curate needs a nonempty corpus and template list")
    cfg.validate()
    kept, generated, skipped = [], 0, 0
    for i, doc in enumerate(corpus):
        doc.validate()
        template = templates[i % len(templates)]
        concepts = extract_concepts(doc, cfg)
        try:
            inst = instantiate(doc, template, concepts, make_rng(seed, 4, i))
        except GenerationError as exc:
            log.debug("skipped: %s", exc)
            skipped += 1
            continue
        generated += 1
        q = quality_score(inst)
        if q >= cfg.tau_medical:
            kept.append(_with_quality(inst, q))
    ds = Dataset(kept, n_generated=generated, n_skipped=skipped, tau_entity=cfg.tau_entity,
                 tau_medical=cfg.tau_medical)
    if not kept:
        ds.warnings.append("every instance was filtered out")
        log.warning("curation retained no instances (tau_medical=%s)", cfg.tau_medical)
    return ds


def _with_quality(inst, q):
    d = inst.__dict__.copy()
    d["quality"] = q
    return TaskInstance(**d)


def templates_for_environment(env, stages=DEFAULT_STAGES, slot_count=3):
    """One template per environment task slot, carrying its metadata."""
    out = []
    for cap in CAPABILITIES:
        for ctx in env.tasks[cap]:
            out.append(
                ReasoningTemplate(
                    id=f"{cap.value}-{ctx.slot:02d}",
                    stages=tuple(stages),
                    slot_count=slot_count,
                    capability=cap,
                    difficulty=ctx.difficulty,
                    gold_action=ctx.gold_action,
                    slot=ctx.slot,
                )
            )
    return out


def bind_dataset(instances, env):
    """Map curated instances to the environment contexts they were generated for."""
    out = []
    for inst in instances:
        tasks = env.tasks[inst.capability]
        if not 0 <= inst.slot < len(tasks):
            raise DataError(f"{inst.id}: slot {inst.slot} not in environment")
        out.append(tasks[inst.slot])
    return out


# ----------------------------------------------------------- synthetic corpus

_SYMPTOMS = ("fever", "cough", "chest-pain", "fatigue", "headache", "dyspnea", "rash", "nausea",
             "joint-pain", "weight-loss", "palpitations", "dizziness")
_CONDITIONS = ("influenza", "pneumonia", "angina", "anemia", "migraine", "asthma", "psoriasis",
               "gastritis", "arthritis", "hyperthyroidism", "arrhythmia", "vertigo")
_TREATMENTS = ("oseltamivir", "amoxicillin", "nitroglycerin", "iron-supplement", "triptan",
               "inhaled-steroid", "topical-steroid", "proton-pump-inhibitor", "nsaid", "methimazole",
               "beta-blocker", "vestibular-therapy") + SAFETY_DENYLIST


@dataclass(frozen=True)
class CorpusSpec:
    n_docs: int = 200
    seed: int = 0
    noise_levels: tuple = (0.0, 0.1, 0.2, 0.4, 0.6)
    min_facts: int = 2
    max_facts: int = 5

    def validate(self):
        if self.n_docs < 1 or self.min_facts < 1 or self.max_facts < self.min_facts:
            raise ConfigError("invalid corpus spec")
        if not self.noise_levels or any(not 0.0 <= v <= 1.0 for v in self.noise_levels):
            raise ConfigError("noise levels must lie in [0, 1]")
        return self


def synthesize_corpus(spec):
    spec.validate()
    docs = []
    for i in range(spec.n_docs):
        rng = make_rng(spec.seed, 5, i)
        n = int(rng.integers(spec.min_facts, spec.max_facts + 1))
        facts = []
        for _ in range(n):
            k = int(rng.integers(len(_CONDITIONS)))
            sym = _SYMPTOMS[int(rng.integers(len(_SYMPTOMS)))]
            tr = _TREATMENTS[int(rng.integers(len(_TREATMENTS)))]
            facts.append((sym, "indicates", _CONDITIONS[k]))
            facts.append((_CONDITIONS[k], "treated_by", tr))
        noise = float(spec.noise_levels[int(rng.integers(len(spec.noise_levels)))])
        docs.append(SourceDoc(id=f"doc-{i:05d}", facts=tuple(facts[:n]), noise_level=noise))
    return docs


# ------------------------------------------------------------------------ I/O


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def write_corpus(path, docs):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in docs:
            fh.write(_dumps(d.to_dict()) + "\n")


def read_corpus(path):
    docs, ids = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc = SourceDoc(
                    id=str(rec["id"]),
                    facts=tuple(tuple(str(x) for x in f) for f in rec["facts"]),
                    noise_level=float(rec.get("noise_level", 0.0)),
                ).validate()
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad corpus record: {exc}") from exc
            if doc.id in ids:
                raise DataError(f"{path}:{lineno}: duplicate document id {doc.id!r}")
            ids.add(doc.id)
            docs.append(doc)
    return docs


def write_dataset(path, ds):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(ds.header()) + "\n")
        for inst in ds.instances:
            fh.write(_dumps({"record": "instance", **inst.to_dict()}) + "\n")


def read_dataset(path):
    header, instances = None, []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kind = rec.pop("record")
                if kind == "header":
                    header = rec
                elif kind == "instance":
                    instances.append(TaskInstance.from_dict(rec))
                else:
                    raise ValueError(f"unknown record type {kind!r}")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad dataset record: {exc}") from exc
    if header is None:
        raise DataError(f"{path}: missing header record")
    return Dataset(
        instances,
        n_generated=header.get("n_generated", len(instances)),
        n_skipped=header.get("n_skipped", 0),
        tau_entity=header.get("tau_entity", 0.8),
        tau_medical=header.get("tau_medical", 0.85),
    )
