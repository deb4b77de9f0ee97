import numpy as np
import pytest
import torch

from depflow import cdoa as C
from depflow import gen as G
from depflow import severity as S
from depflow import world as W


@pytest.fixture(scope="module")
def small_world():
    return W.generate_world(W.WorldConfig(n_subjects=15, utterances_per_subject=8, seed=3))


@pytest.fixture(scope="module")
def tiny_generator(small_world):
    _, utts = small_world
    torch.manual_seed(0)
    m = G.DepFlowModel(G.GenConfig(enc_channels=16, channels=16, spk_dim=8, cond_dim=8, film_hidden=8,
                                   attn_heads=2))
    m.register_speakers(G.speaker_signatures(utts))
    m.enable_film()
    return m.eval()


def prototype_bank(dim=8, seed=0):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(5, dim))
    return S.PrototypeBank(P / np.linalg.norm(P, axis=1, keepdims=True), [1] * 5)


# ---- banks ----------------------------------------------------------------------

def test_banks_partition_training_texts(small_world):
    man, _ = small_world
    bank = C.build_text_banks(man)
    train = {r["id"]: r for r in man.split("train")}
    ids = [e.text_id for e in bank.benign + bank.depressive]
    assert sorted(ids) == sorted(train)
    assert all(train[e.text_id]["sentiment"] in C.BENIGN for e in bank.benign)
    assert all(train[e.text_id]["sentiment"] == "negative" for e in bank.depressive)
    assert not bank.flags


def test_all_positive_corpus_flagged(small_world):
    man, _ = small_world
    recs = [{**r, "sentiment": "positive"} for r in man.records]
    bank = C.build_text_banks(recs)
    assert bank.depressive == [] and "depressive_bank_empty" in bank.flags


def test_annotator_failure_names_record(small_world):
    man, _ = small_world
    bad = man.split("train")[2]["id"]

    def annotator(rec):
        if rec["id"] == bad:
            raise RuntimeError("model timeout")
        return rec["sentiment"]

    with pytest.raises(C.AnnotationError, match=bad):
        C.build_text_banks(man, annotator)
    with pytest.raises(C.AnnotationError):
        C.build_text_banks(man, lambda rec: "angry")


def test_biased_world_depressive_share():
    man, _ = W.generate_world(W.WorldConfig(n_subjects=40, utterances_per_subject=20, bias=0.8))
    bank = C.build_text_banks(man)
    train = man.split("train")
    share = C.bank_share_by_class(bank, train)
    # count oracle straight from the records
    for c in (0, 1):
        rs = [r for r in train if r["label"] == c]
        assert share[c] == pytest.approx(np.mean([r["sentiment"] == "negative" for r in rs]))
    assert share[1] > share[0]


# ---- quotas ---------------------------------------------------------------------

def test_reference_table_totals():
    plan = C.plan_quotas(C.reference_subject_counts(), "fixed", level_quotas=C.REFERENCE_LEVEL_QUOTAS)
    assert plan.total == 5760
    assert plan.class_totals() == {0: 2880, 1: 2880}


def test_minimal_on_balanced_is_zero():
    counts = [C.SubjectCount("a", 0, 0, 10), C.SubjectCount("b", 3, 1, 10)]
    plan = C.plan_quotas(counts, "minimal")
    assert plan.n_synthetic == 0


def test_minimal_spreads_deficit():
    counts = [C.SubjectCount("a", 0, 0, 30), C.SubjectCount("b", 3, 1, 10), C.SubjectCount("c", 4, 1, 13)]
    plan = C.plan_quotas(counts, "minimal")
    assert plan.per_subject == {"a": 0, "b": 4, "c": 3}
    assert plan.imbalance == 0


@pytest.mark.parametrize("strategy,base", [("coverage", 1), ("coverage", 15), ("minimal", 0)])
def test_world_plan_balanced(small_world, strategy, base):
    man, _ = small_world
    plan = C.plan_quotas(man, strategy, base=base)
    # arithmetic oracle straight from the records
    tot = {0: 0, 1: 0}
    for r in man.split("train"):
        tot[r["label"]] += 1
    for s, q in plan.per_subject.items():
        lab = next(r["label"] for r in man.split("train") if r["subject"] == s)
        tot[lab] += q
    assert abs(tot[0] - tot[1]) <= 1
    assert plan.class_totals() == tot


def test_coverage_covers_underrepresented_levels(small_world):
    man, _ = small_world
    counts = C.subject_counts(man)
    plan = C.plan_quotas(counts, "coverage", base=1)
    under = set(C.underrepresented_levels(counts))
    assert under
    for sc in counts:
        if sc.level in under:
            assert plan.per_subject[sc.subject] >= 1


def test_infeasible_balance():
    with pytest.raises(C.QuotaError, match="no subjects"):
        C.plan_quotas([C.SubjectCount("a", 0, 0, 10), C.SubjectCount("b", 1, 0, 5)], "minimal")
    with pytest.raises(C.QuotaError):
        C.plan_quotas([], "minimal")


def test_plan_deterministic(small_world):
    man, _ = small_world
    assert C.plan_quotas(man).per_subject == C.plan_quotas(man).per_subject


# ---- generation -----------------------------------------------------------------

@pytest.fixture(scope="module")
def generated(small_world, tiny_generator):
    man, _ = small_world
    bank = C.build_text_banks(man)
    plan = C.plan_quotas(man, "coverage", base=2)
    return man, bank, plan, C.generate_cdoa(man, bank, plan, tiny_generator, prototype_bank(), seed=4)


def test_mismatch_by_construction(generated):
    man, bank, plan, res = generated
    assert len(res.records) == plan.n_synthetic
    subj = {r["subject"]: r for r in man.split("train")}
    for rec in res.records:
        assert rec["sentiment"] in C.BENIGN
        assert rec["synthetic"] is True and rec["split"] == "train"
        assert rec["label"] == subj[rec["subject"]]["label"]
        assert rec["condition_severity"] == subj[rec["subject"]]["severity_score"]


def test_provenance_reconstructs_text(generated):
    _, bank, _, res = generated
    texts = bank.by_id()
    for rec in res.records:
        assert tuple(rec["content"]) == texts[rec["source_text_id"]].content


def test_split_hygiene_after_augmentation(generated):
    man, *_, res = generated
    W.check_split_hygiene(man.records + res.records)
    with pytest.raises(ValueError):
        W.check_split_hygiene(man.records + [{**res.records[0], "split": "test"}])


def test_generation_deterministic(small_world, tiny_generator, generated):
    man, bank, plan, res = generated
    again = C.generate_cdoa(man, bank, plan, tiny_generator, prototype_bank(), seed=4)
    assert [r["source_text_id"] for r in again.records] == [r["source_text_id"] for r in res.records]
    assert all(np.array_equal(a.frames, b.frames) for a, b in zip(again.utterances, res.utterances))


def test_small_bank_with_replacement(small_world, tiny_generator):
    man, _ = small_world
    bank = C.build_text_banks(man)
    small = C.TextBank(bank.benign[:3], bank.depressive)
    subject = man.split("train")[0]["subject"]
    counts = C.subject_counts(man)
    plan = C.QuotaPlan("fixed", {sc.subject: (5 if sc.subject == subject else 0) for sc in counts}, counts)
    res = C.generate_cdoa(man, small, plan, tiny_generator, prototype_bank(), seed=0)
    assert len(res.records) == 5
    assert res.flags == [f"with_replacement:{subject}"]


def test_write_augmented_roundtrip(tmp_path, small_world, tiny_generator):
    man, _ = W.generate_world(W.WorldConfig(n_subjects=15, utterances_per_subject=8, seed=3), tmp_path / "world")
    bank = C.build_text_banks(man)
    plan = C.plan_quotas(man, "minimal")
    res = C.generate_cdoa(man, bank, plan, tiny_generator, prototype_bank(), out_dir=tmp_path / "cdoa")
    aug = W.read_manifest(tmp_path / "cdoa" / "manifest.jsonl")
    syn = [r for r in aug.records if r.get("synthetic")]
    assert len(syn) == len(res.records)
    u = aug.load(syn[0])
    assert u.synthetic and np.array_equal(u.frames, res.utterances[0].frames)
    assert aug.load(aug.records[0]).n_frames == aug.records[0]["n_frames"]
