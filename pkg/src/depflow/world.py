"""Synthetic utterance world with known latent factors.

Each utterance is a [T x frame_dim] float matrix. Channel 0 is an energy
channel (about 1 on speech frames, about 0 on pause frames); the remaining
channels carry a content template per token plus a per-speaker offset.

Severity enters the frames through three markers:

* silence: pause frames appended to each token span, ratio grows with severity
* centralization: token templates are pulled toward the template centroid
* perturbation: frame-to-frame jitter of the energy channel

Sentiment is expressed through the content tokens (the vocabulary is split
into negative / positive / neutral groups), and a ``bias`` dial couples the
probability of negative utterances to the diagnosis. That coupling is the
shortcut that downstream detectors can learn.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

SENTIMENTS = ("positive", "neutral", "negative")
BIN_EDGES = (0, 5, 10, 15, 20)
BIN_CENTERS = (2.0, 7.0, 12.0, 17.0, 22.0)
MAX_SCORE = 24.0
DEPRESSED_CUTOFF = 10.0
CROP_FRAMES = 100  # "10 seconds" at the synthetic frame rate
MARKERS = ("silence", "centralization", "perturbation")


class WorldConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class WorldConfig:
    n_subjects: int = 60
    utterances_per_subject: int = 30
    n_content_tokens: int = 12
    frame_dim: int = 16
    frames_per_token: tuple[int, int] = (3, 6)
    tokens_per_utterance: tuple[int, int] = (6, 12)
    # explicit per-subject scores; empty means drawn level-stratified
    severity_assignment: tuple[float, ...] = ()
    level_weights: tuple[float, ...] = (0.3, 0.25, 0.15, 0.15, 0.15)
    bias: float = 0.8
    bias_strength: float = 0.3
    # fraction of depressed subjects whose sentiment follows the healthy distribution
    camouflage: float = 0.25
    marker_gains: dict[str, float] = field(
        default_factory=lambda: {"silence": 0.6, "centralization": 0.5, "perturbation": 0.25}
    )
    noise: float = 0.3
    speaker_scale: float = 0.2
    in_group_token_prob: float = 0.7
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    language_seed: int = 1234
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_subjects", "utterances_per_subject", "n_content_tokens"):
            if getattr(self, name) <= 0:
                raise WorldConfigError(name, "must be positive")
        if self.n_content_tokens < 3:
            raise WorldConfigError("n_content_tokens", "need at least one token per sentiment group")
        if self.frame_dim < 4:
            raise WorldConfigError("frame_dim", "must be >= 4")
        if not 0.0 <= self.bias <= 1.0:
            raise WorldConfigError("bias", "must lie in [0, 1]")
        if not 0.0 <= self.camouflage <= 1.0:
            raise WorldConfigError("camouflage", "must lie in [0, 1]")
        for name in ("frames_per_token", "tokens_per_utterance"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise WorldConfigError(name, "expects 1 <= low <= high")
        for s in self.severity_assignment:
            if not 0.0 <= s <= MAX_SCORE:
                raise WorldConfigError("severity_assignment", f"score {s} outside [0, 24]")
        if self.severity_assignment and len(self.severity_assignment) != self.n_subjects:
            raise WorldConfigError("severity_assignment", "length must equal n_subjects")
        if len(self.level_weights) != 5 or min(self.level_weights) < 0 or sum(self.level_weights) <= 0:
            raise WorldConfigError("level_weights", "need five nonnegative weights")
        for m in MARKERS:
            if self.marker_gains.get(m, 0.0) <= 0:
                raise WorldConfigError("marker_gains", f"gain for {m!r} must be positive")
        if self.noise < 0 or self.speaker_scale < 0:
            raise WorldConfigError("noise", "scales must be nonnegative")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise WorldConfigError("split_fractions", "three fractions summing to 1")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # flat "key = value" text form
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, dict):
                lines += [f"{f.name}.{k} = {val!r}" for k, val in sorted(v.items())]
            elif isinstance(v, tuple):
                lines.append(f"{f.name} = {','.join(repr(x) for x in v)}")
            else:
                lines.append(f"{f.name} = {v!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "WorldConfig":
        base = cls()
        updates: dict = {}
        gains = dict(base.marker_gains)
        known = {f.name for f in fields(cls)}
        for key, raw in kv.items():
            if key.startswith("marker_gains."):
                gains[key.split(".", 1)[1]] = float(raw)
                continue
            if key not in known:
                raise WorldConfigError(key, "unknown field")
            cur = getattr(base, key)
            try:
                if isinstance(cur, tuple):
                    items = [x for x in raw.split(",") if x.strip()]
                    conv = int if key in ("frames_per_token", "tokens_per_utterance") else float
                    updates[key] = tuple(conv(x) for x in items)
                elif isinstance(cur, bool):
                    updates[key] = raw.lower() in ("1", "true", "yes")
                elif isinstance(cur, int):
                    updates[key] = int(raw)
                else:
                    updates[key] = float(raw)
            except ValueError as exc:
                raise WorldConfigError(key, f"cannot parse {raw!r}") from exc
        cfg = replace(base, marker_gains=gains, **updates)
        cfg.validate()
        return cfg


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip().strip("'\"")
    return out


@dataclass
class Utterance:
    id: str
    subject_id: str
    speaker_id: int
    content: tuple[int, ...]
    durations: tuple[int, ...]
    frames: np.ndarray
    severity_score: float
    severity_level: int
    sentiment: str
    marker_truth: dict[str, float]
    synthetic: bool = False

    @property
    def label(self) -> int:
        return binary_label(self.severity_score)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class DatasetManifest:
    records: list[dict]
    seed: int
    config_digest: str
    root: Path | None = None

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    def subjects(self, split: str | None = None) -> list[str]:
        recs = self.records if split is None else self.split(split)
        return sorted({r["subject"] for r in recs})

    def by_id(self) -> dict[str, dict]:
        return {r["id"]: r for r in self.records}

    def frame_path(self, rec: dict) -> Path:
        p = Path(rec["frames"])
        return p if p.is_absolute() or self.root is None else self.root / p

    def load(self, rec: dict) -> Utterance:
        return record_to_utterance(rec, read_frames(self.frame_path(rec)))


def severity_to_level(s: float) -> int:
    if not np.isfinite(s) or s < 0 or s > MAX_SCORE:
        raise ValueError(f"severity score {s} outside [0, 24]")
    return int(np.searchsorted(BIN_EDGES, s, side="right") - 1)


def binary_label(s: float) -> int:
    return int(s >= DEPRESSED_CUTOFF)


def sentiment_groups(n_tokens: int) -> dict[str, list[int]]:
    g = n_tokens // 3
    return {
        "negative": list(range(0, g)),
        "positive": list(range(g, 2 * g)),
        "neutral": list(range(2 * g, n_tokens)),
    }


def token_templates(config: WorldConfig) -> np.ndarray:
    """Content templates shared by every world built with the same language seed."""
    rng = np.random.default_rng([config.language_seed, config.n_content_tokens, config.frame_dim])
    return rng.standard_normal((config.n_content_tokens, config.frame_dim - 1))


def marker_values(s: float, gains: dict[str, float]) -> dict[str, float]:
    x = s / MAX_SCORE
    pause_ratio = gains["silence"] * x
    return {
        "silence": pause_ratio / (1.0 + pause_ratio),
        "centralization": gains["centralization"] * x,
        "perturbation": 0.05 + gains["perturbation"] * x,
    }


def render_frames(
    content, severity: float, speaker_offset: np.ndarray, templates: np.ndarray,
    config: WorldConfig, rng: np.random.Generator,
) -> tuple[np.ndarray, tuple[int, ...]]:
    """Render token sequence to frames; returns (frames, per-token durations incl. pauses)."""
    m = marker_values(severity, config.marker_gains)
    pause_ratio = config.marker_gains["silence"] * severity / MAX_SCORE
    centroid = templates.mean(axis=0)
    lo, hi = config.frames_per_token
    chunks, durations = [], []
    for tok in content:
        n_speech = int(rng.integers(lo, hi + 1))
        # stochastic rounding: an extra pause frame with probability rising in severity
        n_pause = int(np.floor(pause_ratio * n_speech + rng.random()))
        tmpl = (1.0 - m["centralization"]) * templates[tok] + m["centralization"] * centroid
        speech = np.empty((n_speech, config.frame_dim))
        speech[:, 0] = 1.0 + m["perturbation"] * rng.standard_normal(n_speech)
        speech[:, 1:] = tmpl + speaker_offset + config.noise * rng.standard_normal((n_speech, config.frame_dim - 1))
        pause = np.empty((n_pause, config.frame_dim))
        pause[:, 0] = 0.05 * rng.standard_normal(n_pause)
        pause[:, 1:] = speaker_offset + config.noise * rng.standard_normal((n_pause, config.frame_dim - 1))
        chunks += [speech, pause]
        durations.append(n_speech + n_pause)
    return np.concatenate(chunks).astype(np.float32), tuple(durations)


def _subject_scores(config: WorldConfig, rng: np.random.Generator) -> list[float]:
    if config.severity_assignment:
        return [float(s) for s in config.severity_assignment]
    w = np.asarray(config.level_weights, dtype=float)
    # deterministic level counts (largest remainder) so every level appears
    raw = w / w.sum() * config.n_subjects
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: config.n_subjects - counts.sum()]:
        counts[i] += 1
    levels = np.repeat(np.arange(5), counts)
    rng.shuffle(levels)
    return [float(rng.integers(BIN_EDGES[lv], BIN_EDGES[lv] + 5)) for lv in levels]


def _assign_splits(scores: list[float], fractions, rng: np.random.Generator) -> list[str]:
    """Level-stratified subject split."""
    splits = [""] * len(scores)
    levels = [severity_to_level(s) for s in scores]
    for lv in range(5):
        idx = [i for i, l in enumerate(levels) if l == lv]
        rng.shuffle(idx)
        n = len(idx)
        n_train = int(round(fractions[0] * n))
        n_dev = int(round(fractions[1] * n))
        if n >= 3:
            n_train = max(1, min(n_train, n - 2))
            n_dev = max(1, min(n_dev, n - n_train - 1))
        for j, i in enumerate(idx):
            splits[i] = "train" if j < n_train else "dev" if j < n_train + n_dev else "test"
    return splits


def negative_rate(label: int, bias: float, strength: float, heterogeneity: float) -> float:
    sign = 1.0 if label else -1.0
    return float(np.clip(1.0 / 3.0 + sign * bias * strength * heterogeneity, 0.02, 0.98))


def generate_world(config: WorldConfig, out_dir: str | os.PathLike | None = None):
    """Build the corpus. Returns (manifest, utterances); writes files when out_dir is given."""
    config.validate()
    templates = token_templates(config)
    groups = sentiment_groups(config.n_content_tokens)
    world_rng = np.random.default_rng([config.seed, 0])
    scores = _subject_scores(config, world_rng)
    splits = _assign_splits(scores, config.split_fractions, world_rng)
    speaker_offsets = config.speaker_scale * world_rng.standard_normal((config.n_subjects, config.frame_dim - 1))
    hetero = world_rng.uniform(0.25, 1.75, size=config.n_subjects)
    camo_draw = world_rng.random(config.n_subjects)

    utterances: list[Utterance] = []
    records: list[dict] = []
    lo, hi = config.tokens_per_utterance
    for si, score in enumerate(scores):
        subj = f"S{si:03d}"
        level = severity_to_level(score)
        camouflaged = bool(binary_label(score) and camo_draw[si] < config.camouflage)
        talks_like = 0 if camouflaged else binary_label(score)
        p_neg = negative_rate(talks_like, config.bias, config.bias_strength, hetero[si])
        p_sent = [(1 - p_neg) / 2, (1 - p_neg) / 2, p_neg]
        for ui in range(config.utterances_per_subject):
            # per-utterance stream: pure function of (seed, subject, utterance)
            rng = np.random.default_rng([config.seed, 1, si, ui])
            sentiment = SENTIMENTS[int(rng.choice(3, p=p_sent))]
            n_tok = int(rng.integers(lo, hi + 1))
            own = groups[sentiment]
            content = tuple(
                int(rng.choice(own)) if (sentiment == "neutral" or rng.random() < config.in_group_token_prob)
                else int(rng.choice(groups["neutral"]))
                for _ in range(n_tok)
            )
            frames, durations = render_frames(content, score, speaker_offsets[si], templates, config, rng)
            utt = Utterance(
                id=f"{subj}_U{ui:03d}", subject_id=subj, speaker_id=si, content=content,
                durations=durations, frames=frames, severity_score=score, severity_level=level,
                sentiment=sentiment, marker_truth=marker_values(score, config.marker_gains),
            )
            utterances.append(utt)
            records.append(utterance_record(utt, splits[si], f"frames/{utt.id}.f32", camouflaged=camouflaged))

    manifest = DatasetManifest(records, config.seed, config.digest())
    if out_dir is not None:
        write_world(Path(out_dir), config, manifest, utterances)
    return manifest, utterances


def utterance_record(u: Utterance, split: str, frames_path: str, **extra) -> dict:
    rec = {
        "id": u.id, "subject": u.subject_id, "speaker_id": u.speaker_id, "split": split,
        "severity_score": u.severity_score, "severity_level": u.severity_level,
        "label": u.label, "sentiment": u.sentiment, "frames": frames_path,
        "n_frames": u.n_frames, "content": list(u.content), "durations": list(u.durations),
        "marker_truth": u.marker_truth, "synthetic": bool(u.synthetic),
    }
    rec.update(extra)
    return rec


def record_to_utterance(rec: dict, frames: np.ndarray) -> Utterance:
    return Utterance(
        id=rec["id"], subject_id=rec["subject"], speaker_id=int(rec["speaker_id"]),
        content=tuple(rec["content"]), durations=tuple(rec["durations"]), frames=frames,
        severity_score=float(rec["severity_score"]), severity_level=int(rec["severity_level"]),
        sentiment=rec["sentiment"], marker_truth=dict(rec.get("marker_truth", {})),
        synthetic=bool(rec.get("synthetic", False)),
    )


# ---- storage -------------------------------------------------------------

def write_frames(path: Path, frames: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(frames, dtype="<f4")
    path.write_bytes(arr.tobytes())
    path.with_suffix(".hdr").write_text(f"{arr.shape[0]} {arr.shape[1]}\n")


def read_frames(path: Path) -> np.ndarray:
    t, d = (int(x) for x in Path(path).with_suffix(".hdr").read_text().split())
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(t, d).astype(np.float32)


def write_manifest(path: Path, manifest: DatasetManifest) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in manifest.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    meta = {"seed": manifest.seed, "config_digest": manifest.config_digest}
    path.with_suffix(".meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    meta_path = path.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"seed": -1, "config_digest": ""}
    return DatasetManifest(records, meta["seed"], meta["config_digest"], root=path.parent)


def write_world(out: Path, config: WorldConfig, manifest: DatasetManifest, utterances) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for u in utterances:
        write_frames(out / "frames" / f"{u.id}.f32", u.frames)
    write_manifest(out / "manifest.jsonl", manifest)
    (out / "world.cfg").write_text(config.to_text())
    manifest.root = out


def load_utterances(manifest: DatasetManifest, split: str | None = None, records=None) -> list[Utterance]:
    recs = records if records is not None else (manifest.records if split is None else manifest.split(split))
    return [manifest.load(r) for r in recs]


def check_split_hygiene(records: list[dict]) -> None:
    seen: dict[str, str] = {}
    for r in records:
        prev = seen.setdefault(r["subject"], r["split"])
        if prev != r["split"]:
            raise ValueError(f"subject {r['subject']} appears in both {prev} and {r['split']}")
        if r.get("synthetic") and r["split"] != "train":
            raise ValueError(f"synthetic record {r['id']} found in {r['split']}")


# ---- sampling protocol ---------------------------------------------------

def crop_segment(u: Utterance, max_frames: int = CROP_FRAMES, rng: np.random.Generator | None = None) -> Utterance:
    if max_frames < 1:
        raise ValueError("max_frames must be >= 1")
    if u.n_frames <= max_frames:
        return u
    rng = rng or np.random.default_rng()
    start = int(rng.integers(0, u.n_frames - max_frames + 1))
    stop = start + max_frames
    content, durations = [], []
    edge = 0
    for tok, d in zip(u.content, u.durations):
        overlap = min(edge + d, stop) - max(edge, start)
        if overlap > 0:
            content.append(tok)
            durations.append(overlap)
        edge += d
    return replace(u, frames=u.frames[start:stop], content=tuple(content), durations=tuple(durations))


def select_eval_utterances(utterances, n: int = 20) -> tuple[list, bool]:
    """n longest by frame count, ties by id. Second value flags a short supply."""
    if n < 1:
        raise ValueError("n must be >= 1")

    def length(u):
        return u["n_frames"] if isinstance(u, dict) else u.n_frames

    def uid(u):
        return u["id"] if isinstance(u, dict) else u.id

    ranked = sorted(utterances, key=lambda u: (-length(u), uid(u)))
    return ranked[:n], len(ranked) < n


# ---- marker extraction ---------------------------------------------------

def extract_markers(frames: np.ndarray, energy_threshold: float = 0.5) -> dict[str, float]:
    """Measure the three severity markers from raw frames.

    centralization is the negated mean distance of speech frames to their
    centroid, so it rises as templates collapse toward the centre.
    """
    frames = np.asarray(frames, dtype=float)
    speech = frames[:, 0] >= energy_threshold
    out = {"silence": float(1.0 - speech.mean())}
    if speech.sum() >= 2:
        content = frames[speech, 1:]
        out["centralization"] = float(-np.linalg.norm(content - content.mean(0), axis=1).mean())
        out["perturbation"] = float(frames[speech, 0].std())
    else:
        out["centralization"] = float("nan")
        out["perturbation"] = float("nan")
    return out


def speaker_signature(frames: np.ndarray) -> np.ndarray:
    """Mean of content channels; carries the additive speaker offset."""
    return np.asarray(frames, dtype=float)[:, 1:].mean(axis=0)
