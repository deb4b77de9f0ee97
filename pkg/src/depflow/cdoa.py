"""Camouflage augmentation: benign text spoken with depressive acoustics.

Text banks are built from the training split, per-subject quotas decide how
many synthetic utterances each subject gets, and the generator renders benign
token sequences in the subject's voice under the subject's own severity
condition. Synthetic utterances only ever join the training split.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gen import DepFlowModel, sample_batch
from .severity import PrototypeBank, severity_condition
from .world import (
    DatasetManifest, SENTIMENTS, Utterance, binary_label, check_split_hygiene, severity_to_level,
    utterance_record, write_frames, write_manifest,
)

log = logging.getLogger(__name__)

BENIGN = ("positive", "neutral")
# per-subject quotas by severity level used for the DAIC-WOZ training split
REFERENCE_LEVEL_QUOTAS = (13, 34, 2, 91, 194)


# ---- text banks ------------------------------------------------------------

class AnnotationError(RuntimeError):
    def __init__(self, record_id: str, cause: Exception | str):
        super().__init__(f"annotator failed on {record_id}: {cause}")
        self.record_id = record_id


Annotator = Callable[[dict], str]


def ground_truth_annotator(record: dict) -> str:
    return record["sentiment"]


@dataclass(frozen=True)
class TextEntry:
    text_id: str
    content: tuple[int, ...]
    sentiment: str
    subject: str


@dataclass
class TextBank:
    benign: list[TextEntry]
    depressive: list[TextEntry]
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        overlap = {e.text_id for e in self.benign} & {e.text_id for e in self.depressive}
        if overlap:
            raise ValueError(f"text banks overlap on {sorted(overlap)[:3]}")

    def by_id(self) -> dict[str, TextEntry]:
        return {e.text_id: e for e in self.benign + self.depressive}


def build_text_banks(manifest: DatasetManifest | list[dict], annotator: Annotator = ground_truth_annotator) -> TextBank:
    """Assign every real training utterance's content to the benign or depressive bank."""
    records = manifest.records if isinstance(manifest, DatasetManifest) else manifest
    benign, depressive = [], []
    for rec in records:
        if rec["split"] != "train" or rec.get("synthetic"):
            continue
        try:
            sent = annotator(rec)
        except Exception as exc:  # noqa: BLE001 - any annotator failure aborts with the id
            raise AnnotationError(rec["id"], exc) from exc
        if sent not in SENTIMENTS:
            raise AnnotationError(rec["id"], f"unknown sentiment {sent!r}")
        entry = TextEntry(rec["id"], tuple(rec["content"]), sent, rec["subject"])
        (depressive if sent == "negative" else benign).append(entry)
    flags = []
    if not depressive:
        flags.append("depressive_bank_empty")
    if not benign:
        flags.append("benign_bank_empty")
    return TextBank(benign, depressive, flags)


def bank_share_by_class(bank: TextBank, records: list[dict]) -> dict[int, float]:
    """Fraction of each class's training texts that landed in the depressive bank."""
    label = {r["id"]: r["label"] for r in records}
    out = {}
    for c in (0, 1):
        dep = sum(1 for e in bank.depressive if label[e.text_id] == c)
        ben = sum(1 for e in bank.benign if label[e.text_id] == c)
        out[c] = dep / (dep + ben) if dep + ben else float("nan")
    return out


# ---- quotas ----------------------------------------------------------------

@dataclass(frozen=True)
class SubjectCount:
    subject: str
    level: int
    label: int
    n_original: int


class QuotaError(ValueError):
    pass


@dataclass
class QuotaPlan:
    strategy: str
    per_subject: dict[str, int]
    subjects: list[SubjectCount]
    level_quotas: dict[int, int] | None = None

    def class_totals(self, synthetic_only: bool = False) -> dict[int, int]:
        tot = {0: 0, 1: 0}
        for sc in self.subjects:
            tot[sc.label] += self.per_subject[sc.subject] + (0 if synthetic_only else sc.n_original)
        return tot

    @property
    def n_synthetic(self) -> int:
        return sum(self.per_subject.values())

    @property
    def total(self) -> int:
        return sum(self.class_totals().values())

    @property
    def imbalance(self) -> int:
        t = self.class_totals()
        return abs(t[0] - t[1])

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "per_subject": dict(sorted(self.per_subject.items())),
            "level_quotas": self.level_quotas,
            "class_totals": self.class_totals(),
            "synthetic_totals": self.class_totals(synthetic_only=True),
            "total": self.total,
        }


def subject_counts(manifest: DatasetManifest | list[dict], split: str = "train") -> list[SubjectCount]:
    records = manifest.records if isinstance(manifest, DatasetManifest) else manifest
    seen: dict[str, list] = {}
    for r in records:
        if r["split"] != split or r.get("synthetic"):
            continue
        if r["subject"] not in seen:
            seen[r["subject"]] = [int(r["severity_level"]), int(r["label"]), 0]
        seen[r["subject"]][2] += 1
    return [SubjectCount(s, lv, lb, n) for s, (lv, lb, n) in sorted(seen.items())]


def _spread(subjects: list[SubjectCount], n: int) -> dict[str, int]:
    """Split n as evenly as possible; earlier subjects (sorted by id) take the remainder."""
    if n <= 0:
        return {}
    ordered = sorted(subjects, key=lambda sc: sc.subject)
    q, r = divmod(n, len(ordered))
    return {sc.subject: q + (1 if i < r else 0) for i, sc in enumerate(ordered)}


def underrepresented_levels(subjects: list[SubjectCount], n_levels: int = 5) -> list[int]:
    """Levels holding fewer than an equal share of the original utterances."""
    total = sum(sc.n_original for sc in subjects)
    share = {lv: 0 for lv in range(n_levels)}
    for sc in subjects:
        share[sc.level] += sc.n_original
    return [lv for lv in range(n_levels) if share[lv] * n_levels < total]


def plan_quotas(source, strategy: str = "coverage", base: int = 1, level_quotas=None) -> QuotaPlan:
    """Per-subject synthesis counts.

    minimal   top up the minority class only; zero if already balanced
    coverage  ``base`` utterances for every subject in an underrepresented
              level (``base`` for all subjects when ``base`` is given above 1),
              then top up the minority class
    fixed     a per-level per-subject quota, no balancing
    """
    subjects = source if isinstance(source, list) and source and isinstance(source[0], SubjectCount) \
        else subject_counts(source)
    if not subjects:
        raise QuotaError("training split is empty")
    by_class = {c: [sc for sc in subjects if sc.label == c] for c in (0, 1)}
    quotas = {sc.subject: 0 for sc in subjects}

    if strategy == "fixed":
        lq = dict(enumerate(level_quotas)) if isinstance(level_quotas, (list, tuple)) else dict(level_quotas or {})
        if not lq:
            raise QuotaError("fixed strategy needs level_quotas")
        for sc in subjects:
            quotas[sc.subject] = int(lq.get(sc.level, 0))
        return QuotaPlan(strategy, quotas, subjects, lq)

    if strategy == "coverage":
        if base < 0:
            raise QuotaError("base must be >= 0")
        covered = set(range(5)) if base > 1 else set(underrepresented_levels(subjects))
        for sc in subjects:
            if sc.level in covered:
                quotas[sc.subject] = base
    elif strategy != "minimal":
        raise QuotaError(f"unknown strategy {strategy!r}")

    tot = {c: sum(sc.n_original + quotas[sc.subject] for sc in by_class[c]) for c in (0, 1)}
    minority = 0 if tot[0] < tot[1] else 1
    deficit = abs(tot[0] - tot[1])
    if deficit and not by_class[minority]:
        raise QuotaError(f"cannot balance: no subjects with label {minority}")
    for s, k in _spread(by_class[minority], deficit).items():
        quotas[s] += k
    return QuotaPlan(strategy, quotas, subjects)


def reference_subject_counts() -> list[SubjectCount]:
    """A subject table consistent with the published DAIC-WOZ augmentation totals.

    Only the per-level quotas and the class totals are published; the per-level
    subject counts and original utterance counts below are a reconstruction
    that, combined with those quotas, gives 2,880 utterances per class.
    """
    table = [  # level, n_subjects, total original utterances
        (0, 49, 833),
        (1, 28, 458),
        (2, 21, 21 * 57),
        (3, 6, 6 * 57),
        (4, 3, 3 * 57),
    ]
    out = []
    for level, n, total in table:
        q, r = divmod(total, n)
        for i in range(n):
            score = (2, 7, 12, 17, 22)[level]
            out.append(SubjectCount(f"P{level}{i:02d}", level, binary_label(score), q + (1 if i < r else 0)))
    return out


# ---- generation --------------------------------------------------------------

@dataclass
class CDoAResult:
    records: list[dict]
    utterances: list[Utterance]
    flags: list[str]


def generate_cdoa(manifest: DatasetManifest, bank: TextBank, plan: QuotaPlan, generator: DepFlowModel,
                  prototypes: PrototypeBank, seed: int = 0, out_dir: str | Path | None = None,
                  batch_size: int = 64) -> CDoAResult:
    """Render each quota slot: benign text, subject's voice, subject's own severity condition."""
    if not bank.benign:
        raise ValueError("benign text bank is empty")
    train = {}
    for r in manifest.records:
        if r["split"] == "train" and not r.get("synthetic"):
            train.setdefault(r["subject"], r)
    missing = [s for s, q in plan.per_subject.items() if q and s not in train]
    if missing:
        raise ValueError(f"plan names subjects outside the training split: {missing[:3]}")

    slots, flags = [], []
    for si, subject in enumerate(sorted(plan.per_subject)):
        q = plan.per_subject[subject]
        if q == 0:
            continue
        rec = train[subject]
        rng = np.random.default_rng([seed, 17, si])
        n = len(bank.benign)
        picks = list(rng.permutation(n)[: min(q, n)])
        if q > n:
            flags.append(f"with_replacement:{subject}")
            picks += list(rng.integers(0, n, size=q - n))
        c_dep = severity_condition(float(rec["severity_score"]), prototypes)
        for k, bi in enumerate(picks):
            slots.append((subject, rec, k, bank.benign[int(bi)], c_dep, int(rng.integers(0, 2**31 - 1))))

    utts, records = [], []
    for b in range(0, len(slots), batch_size):
        chunk = slots[b:b + batch_size]
        frames = sample_batch(generator, [s[3].content for s in chunk], [int(s[1]["speaker_id"]) for s in chunk],
                              c_deps=np.stack([s[4] for s in chunk]), seeds=[s[5] for s in chunk])
        for (subject, rec, k, entry, _, sseed), fr in zip(chunk, frames):
            u = Utterance(
                id=f"{subject}_SYN{k:04d}", subject_id=subject, speaker_id=int(rec["speaker_id"]),
                content=entry.content, durations=(), frames=fr,
                severity_score=float(rec["severity_score"]),
                severity_level=severity_to_level(float(rec["severity_score"])),
                sentiment=entry.sentiment, marker_truth={}, synthetic=True,
            )
            utts.append(u)
            records.append(utterance_record(
                u, "train", f"frames/{u.id}.f32", source_text_id=entry.text_id,
                condition_severity=float(rec["severity_score"]), sample_seed=sseed,
            ))
    check_split_hygiene(list(manifest.records) + records)
    if out_dir is not None:
        write_augmented(Path(out_dir), manifest, records, utts)
    return CDoAResult(records, utts, flags)


def write_augmented(out: Path, manifest: DatasetManifest, records: list[dict], utts: list[Utterance]) -> DatasetManifest:
    """Augmented manifest: originals (absolute frame paths) followed by synthetic records."""
    for u in utts:
        write_frames(out / "frames" / f"{u.id}.f32", u.frames)
    originals = [{**r, "frames": str(manifest.frame_path(r).resolve())} for r in manifest.records]
    aug = DatasetManifest(originals + records, manifest.seed, manifest.config_digest, root=out)
    write_manifest(out / "manifest.jsonl", aug)
    return aug
