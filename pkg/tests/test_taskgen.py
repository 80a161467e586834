import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from capbal._rng import make_rng
from capbal.envpolicy import Capability, EnvSpec, build_environment
from capbal.errors import DataError, GenerationError
from capbal.taskgen import (
    CorpusSpec,
    QualityConfig,
    ReasoningTemplate,
    SourceDoc,
    TaskInstance,
    bind_dataset,
    curate,
    extract_concepts,
    instantiate,
    quality_score,
    read_corpus,
    read_dataset,
    synthesize_corpus,
    templates_for_environment,
    write_corpus,
    write_dataset,
)

FACTS = (("fever", "indicates", "influenza"), ("influenza", "treated_by", "oseltamivir"),
         ("cough", "indicates", "pneumonia"))


def oracle_quality(inst):
    """Independent rubric: 0.4 completeness + 0.3 grounded-and-safe answer + 0.3 source cleanliness."""
    n = len(inst.stages)
    filled = len([s for s in inst.reasoning_chain[:n] if s.strip() != ""])
    completeness = filled / n if n else 0.0
    ans = inst.answer[len("<answer>"):-len("</answer>")] if inst.answer.startswith("<answer>") else inst.answer
    ans = ans.strip()
    in_chain = ans != "" and any(ans in s for s in inst.reasoning_chain)
    blob = " ".join(list(inst.reasoning_chain) + [inst.answer])
    unsafe = "double-dose" in blob or "unsupervised-withdrawal" in blob
    value = 0.4 * completeness + 0.3 * (1.0 if in_chain and not unsafe else 0.0) + 0.3 * (1 - inst.source_noise)
    return max(0.0, min(1.0, value))


@pytest.fixture(scope="module")
def env():
    return build_environment(EnvSpec(2, 4, 12, 1.0, 0))


@pytest.fixture(scope="module")
def templates(env):
    return templates_for_environment(env)


# -------------------------------------------------------------- extraction


def test_zero_noise_extracts_everything():
    cs = extract_concepts(SourceDoc("d", FACTS, 0.0), QualityConfig())
    assert {c.text for c in cs} == {"fever", "influenza", "oseltamivir", "cough", "pneumonia"}
    assert all(c.confidence == 1.0 for c in cs)
    assert [c.text for c in cs] == sorted(c.text for c in cs)  # ties ordered lexicographically


def test_tau_entity_one_keeps_only_certain():
    cs = extract_concepts(SourceDoc("d", FACTS, 0.5), QualityConfig(tau_entity=1.0))
    assert all(c.confidence == 1.0 for c in cs)


@given(st.floats(0, 1), st.floats(0, 1))
def test_extraction_sorted_filtered_deterministic(noise, tau):
    doc = SourceDoc("d", FACTS, noise)
    cfg = QualityConfig(tau_entity=tau)
    a = extract_concepts(doc, cfg)
    assert a == extract_concepts(doc, cfg)
    assert all(tau <= c.confidence <= 1 for c in a)
    assert a == sorted(a, key=lambda c: (-c.confidence, c.text))


# ----------------------------------------------------------- instantiation


def test_instantiate_structure(templates):
    doc = SourceDoc("d", FACTS, 0.0)
    t = templates[0]
    inst = instantiate(doc, t, extract_concepts(doc, QualityConfig()), make_rng(0))
    assert len(inst.reasoning_chain) == len(t.stages) == 3
    assert inst.capability == t.capability and inst.difficulty == t.difficulty
    assert inst.gold_action == t.gold_action and inst.quality == 0.0


def test_instantiate_exact_slot_count():
    doc = SourceDoc("d", FACTS[:1], 0.0)
    t = ReasoningTemplate("t", slot_count=2)
    cs = extract_concepts(doc, QualityConfig())
    a = instantiate(doc, t, cs, make_rng(1))
    assert a == instantiate(doc, t, cs, make_rng(1))
    assert "influenza" in a.answer


def test_insufficient_concepts_error():
    doc = SourceDoc("doc-7", FACTS[:1], 0.0)
    with pytest.raises(GenerationError) as exc:
        instantiate(doc, ReasoningTemplate("t", slot_count=3), extract_concepts(doc, QualityConfig()), make_rng(0))
    assert exc.value.doc_id == "doc-7"


def test_docs_differing_only_in_id(templates):
    a_doc, b_doc = SourceDoc("alpha", FACTS, 0.2), SourceDoc("beta", FACTS, 0.2)
    t = templates[5]
    a = instantiate(a_doc, t, extract_concepts(a_doc, QualityConfig()), make_rng(3))
    b = instantiate(b_doc, t, extract_concepts(b_doc, QualityConfig()), make_rng(3))
    da, db = a.to_dict(), b.to_dict()
    assert {k for k in da if da[k] != db[k]} == {"id", "source_id"}


# ---------------------------------------------------------------- quality


def test_quality_extremes(templates):
    doc = SourceDoc("d", FACTS, 0.0)
    inst = instantiate(doc, templates[0], extract_concepts(doc, QualityConfig()), make_rng(0))
    assert quality_score(inst) == 1.0
    assert quality_score(replace(inst, reasoning_chain=())) <= 0.6


def test_quality_unsafe_answer(templates):
    doc = SourceDoc("d", FACTS, 0.0)
    inst = instantiate(doc, templates[0], extract_concepts(doc, QualityConfig()), make_rng(0))
    bad = replace(inst, answer="<answer>double-dose</answer>",
                  reasoning_chain=inst.reasoning_chain[:-1] + ("Start double-dose now.",))
    assert quality_score(bad) == pytest.approx(0.7)


def test_quality_matches_oracle(templates):
    corpus = synthesize_corpus(CorpusSpec(n_docs=60, seed=4))
    ds = curate(corpus, templates, QualityConfig(tau_entity=0.0, tau_medical=0.0), seed=1)
    assert len(ds.instances) >= 20
    for inst in ds.instances[:20]:
        assert quality_score(inst) == oracle_quality(inst)
        assert inst.quality == oracle_quality(inst)


# ---------------------------------------------------------------- curation


def test_filter_soundness_and_mean(templates):
    corpus = synthesize_corpus(CorpusSpec(n_docs=300, seed=2))
    cfg = QualityConfig()
    ds = curate(corpus, templates, cfg, seed=0)
    assert ds.instances and all(i.quality >= 0.85 for i in ds.instances)
    assert np.mean([i.quality for i in ds.instances]) >= cfg.tau_medical
    everything = curate(corpus, templates, replace(cfg, tau_medical=0.0), seed=0)
    kept = {i.id for i in ds.instances}
    for inst in everything.instances:
        assert (inst.id in kept) == (inst.quality >= 0.85)


def test_tau_zero_keeps_all_valid(templates):
    corpus = synthesize_corpus(CorpusSpec(n_docs=100, seed=5))
    ds = curate(corpus, templates, QualityConfig(tau_medical=0.0), seed=0)
    assert len(ds.instances) == ds.n_generated
    assert ds.n_generated + ds.n_skipped == len(corpus)


def test_retention_monotone(templates):
    corpus = synthesize_corpus(CorpusSpec(n_docs=200, seed=6))
    counts = [len(curate(corpus, templates, QualityConfig(tau_medical=t), seed=0).instances)
              for t in np.linspace(0, 1, 11)]
    assert counts == sorted(counts, reverse=True)


def test_empty_dataset_is_a_status(templates):
    corpus = synthesize_corpus(CorpusSpec(n_docs=50, seed=1, noise_levels=(0.2, 0.4)))
    ds = curate(corpus, templates, QualityConfig(tau_medical=0.99), seed=0)
    assert ds.status == "empty" and ds.warnings
    assert [r["total"] for r in ds.composition()] == [0, 0, 0, 0]


def test_composition_shape(templates):
    ds = curate(synthesize_corpus(CorpusSpec(n_docs=120)), templates, QualityConfig(), seed=0)
    rows = ds.composition()
    assert [r["capability"] for r in rows] == ["domain", "reasoning", "instruction", "total"]
    assert rows[-1]["total"] == sum(r["total"] for r in rows[:-1]) == len(ds.instances)
    assert all(r["real"] == 0 for r in rows)


def test_curate_deterministic_and_requires_inputs(templates):
    corpus = synthesize_corpus(CorpusSpec(n_docs=80, seed=8))
    a = curate(corpus, templates, QualityConfig(), seed=4)
    b = curate(corpus, templates, QualityConfig(), seed=4)
    assert [i.to_dict() for i in a.instances] == [i.to_dict() for i in b.instances]
    with pytest.raises(DataError):
        curate([], templates, QualityConfig(), seed=0)


# --------------------------------------------------------------------- I/O


def test_corpus_roundtrip(tmp_path):
    docs = synthesize_corpus(CorpusSpec(n_docs=10))
    p = tmp_path / "c.jsonl"
    write_corpus(p, docs)
    assert read_corpus(p) == docs


def test_corpus_errors_are_line_numbered(tmp_path):
    p = tmp_path / "c.jsonl"
    good = json.dumps({"id": "a", "facts": [list(FACTS[0])], "noise_level": 0.1})
    p.write_text(good + "\n" + good + "\n")
    with pytest.raises(DataError, match=":2:"):
        read_corpus(p)
    p.write_text(good + "\n{not json\n")
    with pytest.raises(DataError, match=":2:"):
        read_corpus(p)
    p.write_text(json.dumps({"id": "a", "facts": [], "noise_level": 0.1}) + "\n")
    with pytest.raises(DataError, match=":1:"):
        read_corpus(p)


def test_dataset_roundtrip_bytes(tmp_path, templates, env):
    ds = curate(synthesize_corpus(CorpusSpec(n_docs=150, seed=3)), templates, QualityConfig(), seed=2)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_dataset(p1, ds)
    back = read_dataset(p1)
    assert [i.to_dict() for i in back.instances] == [i.to_dict() for i in ds.instances]
    write_dataset(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
    header = json.loads(p1.read_text().splitlines()[0])
    assert header["record"] == "header" and header["n_instances"] == len(ds.instances)
    bound = bind_dataset(back.instances, env)
    for inst, ctx in zip(back.instances, bound):
        assert ctx.capability == inst.capability and ctx.slot == inst.slot
        assert ctx.gold_action == inst.gold_action and ctx.difficulty == inst.difficulty


def test_bind_rejects_unknown_slot(env):
    inst = TaskInstance("x", Capability.DOMAIN, "q", ("a",), "<answer>a</answer>", 0, "easy", slot=99)
    with pytest.raises(DataError):
        bind_dataset([inst], env)
