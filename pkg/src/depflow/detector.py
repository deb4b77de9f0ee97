"""Downstream depression detectors and the subject-level evaluation protocol."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dae import balanced_indices, collate
from .metrics import classification_report
from .world import CROP_FRAMES, Utterance, crop_segment, select_eval_utterances

log = logging.getLogger(__name__)

ARCHITECTURES = ("conv_recurrent", "pooled_tdnn")
AUGMENTATIONS = ("none", "cdoa", "mixup", "specaug", "crop_jitter")


@dataclass
class DetectorConfig:
    architecture: str = "conv_recurrent"
    augmentation: str = "none"
    frame_dim: int = 16
    hidden: int = 32
    epochs: int = 8
    lr: float = 2e-3
    batch_size: int = 32
    crop_frames: int = CROP_FRAMES
    n_eval_utterances: int = 20
    mixup_alpha: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"unknown augmentation {self.augmentation!r}")


class ConvRecurrent(nn.Module):
    """Conv front end, GRU over time, masked mean, linear logit."""

    def __init__(self, frame_dim: int, hidden: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv1d(frame_dim, hidden, 5, padding=2), nn.ReLU(),
            nn.Conv1d(hidden, hidden, 5, padding=2), nn.ReLU(),
        )
        self.rnn = nn.GRU(hidden, hidden, batch_first=True)
        self.out = nn.Linear(hidden, 1)

    def forward(self, x, mask):
        h = self.conv(x.transpose(1, 2)).transpose(1, 2)
        h, _ = self.rnn(h)
        m = mask.unsqueeze(-1).to(h.dtype)
        return self.out((h * m).sum(1) / m.sum(1)).squeeze(-1)


class PooledTDNN(nn.Module):
    """Dilated 1-D convolutions with mean/std statistics pooling."""

    def __init__(self, frame_dim: int, hidden: int):
        super().__init__()
        self.tdnn = nn.Sequential(
            nn.Conv1d(frame_dim, hidden, 5, padding=2), nn.ReLU(), nn.BatchNorm1d(hidden),
            nn.Conv1d(hidden, hidden, 3, padding=2, dilation=2), nn.ReLU(), nn.BatchNorm1d(hidden),
            nn.Conv1d(hidden, hidden, 3, padding=3, dilation=3), nn.ReLU(), nn.BatchNorm1d(hidden),
        )
        self.out = nn.Sequential(nn.Linear(2 * hidden, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, x, mask):
        h = self.tdnn(x.transpose(1, 2)).transpose(1, 2)
        m = mask.unsqueeze(-1).to(h.dtype)
        n = m.sum(1)
        mean = (h * m).sum(1) / n
        std = torch.sqrt(((h - mean.unsqueeze(1)) ** 2 * m).sum(1) / n + 1e-6)
        return self.out(torch.cat([mean, std], -1)).squeeze(-1)


def build_detector(config: DetectorConfig) -> nn.Module:
    config.validate()
    cls = ConvRecurrent if config.architecture == "conv_recurrent" else PooledTDNN
    return cls(config.frame_dim, config.hidden)


# ---- augmentation ----------------------------------------------------------

def specaug(frames: np.ndarray, rng: np.random.Generator, max_time: int = 10, max_feat: int = 3) -> np.ndarray:
    out = frames.copy()
    T, D = out.shape
    w = int(rng.integers(0, min(max_time, T) + 1))
    t0 = int(rng.integers(0, T - w + 1))
    out[t0:t0 + w] = 0.0
    f = int(rng.integers(0, min(max_feat, D - 1) + 1))
    f0 = int(rng.integers(1, D - f + 1))
    out[:, f0:f0 + f] = 0.0
    return out


def crop_jitter(u: Utterance, crop: int, rng: np.random.Generator) -> np.ndarray:
    length = int(rng.integers(max(1, int(0.6 * crop)), crop + 1))
    return crop_segment(u, length, rng).frames


# ---- training ----------------------------------------------------------------

@dataclass
class DetectorRun:
    model: nn.Module
    config: DetectorConfig
    history: list[dict] = field(default_factory=list)


class NumericalFailure(RuntimeError):
    pass


def train_detector(train: list[Utterance], config: DetectorConfig,
                   augment: list[Utterance] | None = None) -> DetectorRun:
    """Utterance-level binary classifier; class-balanced sampling, fresh random crops each epoch."""
    config.validate()
    if config.augmentation == "cdoa" and not augment:
        raise ValueError("cdoa augmentation needs synthetic utterances")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng([config.seed, 41])
    model = build_detector(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    pool = list(train) + (list(augment) if config.augmentation == "cdoa" else [])
    labels = np.array([u.label for u in pool])
    run = DetectorRun(model, config)
    for epoch in range(config.epochs):
        model.train()
        order = balanced_indices(labels, rng)
        total, nb = 0.0, 0
        for b in range(0, len(order), config.batch_size):
            idx = order[b:b + config.batch_size]
            if config.augmentation == "crop_jitter":
                crops = [crop_jitter(pool[i], config.crop_frames, rng) for i in idx]
            else:
                crops = [crop_segment(pool[i], config.crop_frames, rng).frames for i in idx]
            if config.augmentation == "specaug":
                crops = [specaug(c, rng) for c in crops]
            x, m = collate(crops)
            y = torch.as_tensor(labels[idx], dtype=torch.float32)
            if config.augmentation == "mixup":
                lam = torch.as_tensor(rng.beta(config.mixup_alpha, config.mixup_alpha, len(idx)), dtype=torch.float32)
                perm = torch.as_tensor(rng.permutation(len(idx)))
                x = lam[:, None, None] * x + (1 - lam[:, None, None]) * x[perm]
                m = m | m[perm]
                y = lam * y + (1 - lam) * y[perm]
            loss = F.binary_cross_entropy_with_logits(model(x, m), y)
            if not torch.isfinite(loss):
                raise NumericalFailure(f"non-finite detector loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            nb += 1
        run.history.append({"epoch": epoch, "loss": total / nb})
    model.eval()
    return run


@torch.no_grad()
def predict_proba(model: nn.Module, utterances: list[Utterance], batch_size: int = 128) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(utterances), batch_size):
        x, m = collate([u.frames for u in utterances[i:i + batch_size]])
        out.append(torch.sigmoid(model(x, m)).numpy())
    return np.concatenate(out) if out else np.zeros(0)


# ---- evaluation --------------------------------------------------------------

def majority_vote(decisions) -> int:
    """Subject decision from utterance decisions; ties go to the depressed class."""
    d = np.asarray(decisions, dtype=int)
    return int(2 * d.sum() >= len(d))


@dataclass
class SubjectEvaluation:
    subjects: list[str]
    y_true: list[int]
    y_pred: list[int]
    positive_fraction: list[float]
    metrics: dict
    short_subjects: list[str] = field(default_factory=list)


def evaluate_subjects(model: nn.Module, utterances: list[Utterance], n: int = 20) -> SubjectEvaluation:
    if not utterances:
        raise ValueError("empty evaluation split")
    if any(getattr(u, "synthetic", False) for u in utterances):
        raise ValueError("synthetic utterances must never enter evaluation")
    by_subject: dict[str, list[Utterance]] = {}
    for u in utterances:
        by_subject.setdefault(u.subject_id, []).append(u)
    subjects, y_true, y_pred, frac, short = [], [], [], [], []
    for s in sorted(by_subject):
        chosen, flagged = select_eval_utterances(by_subject[s], n)
        if flagged:
            short.append(s)
        dec = (predict_proba(model, chosen) >= 0.5).astype(int)
        subjects.append(s)
        y_true.append(chosen[0].label)
        y_pred.append(majority_vote(dec))
        frac.append(float(dec.mean()))
    return SubjectEvaluation(subjects, y_true, y_pred, frac, classification_report(y_true, y_pred), short)


def is_matched(u: Utterance) -> bool:
    """Sentiment agrees with diagnosis: depressed+negative or healthy+benign."""
    return (u.sentiment == "negative") == bool(u.label)


def shortcut_gap(model: nn.Module, utterances: list[Utterance]) -> dict:
    p = predict_proba(model, utterances)
    correct = (p >= 0.5).astype(int) == np.array([u.label for u in utterances])
    matched = np.array([is_matched(u) for u in utterances])
    acc_m = float(correct[matched].mean()) if matched.any() else float("nan")
    acc_x = float(correct[~matched].mean()) if (~matched).any() else float("nan")
    return {"matched_accuracy": acc_m, "mismatched_accuracy": acc_x, "gap": acc_m - acc_x,
            "n_matched": int(matched.sum()), "n_mismatched": int((~matched).sum())}


# ---- comparison --------------------------------------------------------------

PUBLISHED_MACRO_F1 = {
    "DepAudioNet": (0.482, 0.526),
    "NUSD": (0.514, 0.577),
    "HAREN-CTC": (0.525, 0.551),
}


def run_setting(train, dev, test, config: DetectorConfig, augment=None) -> dict:
    run = train_detector(train, config, augment)
    ev = evaluate_subjects(run.model, test, config.n_eval_utterances)
    gap = shortcut_gap(run.model, dev)
    mismatched = [u for u in test if not is_matched(u)]
    return {
        "seed": config.seed,
        "macro_f1": ev.metrics["macro_f1"],
        "sensitivity": ev.metrics["sensitivity"],
        "specificity": ev.metrics["specificity"],
        "gap": gap["gap"],
        "matched_accuracy": gap["matched_accuracy"],
        "mismatched_accuracy": gap["mismatched_accuracy"],
        "test_mismatched_accuracy": shortcut_gap(run.model, mismatched)["mismatched_accuracy"] if mismatched else float("nan"),
        "subject_predictions": dict(zip(ev.subjects, ev.y_pred)),
    }


def summarize(rows: list[dict]) -> dict:
    keys = ("macro_f1", "sensitivity", "specificity", "gap", "matched_accuracy", "mismatched_accuracy",
            "test_mismatched_accuracy")
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in rows], dtype=float)
        out[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0}
    return out


def compare_augmentations(train, dev, test, settings: list[DetectorConfig], n_seeds: int = 5,
                          augment: list[Utterance] | None = None, base_seed: int = 0) -> dict:
    """Per-setting mean and standard deviation over seeds."""
    if len(settings) < 2:
        raise ValueError("need at least two augmentation settings")
    table = {}
    for cfg in settings:
        rows = []
        for k in range(n_seeds):
            c = DetectorConfig(**{**asdict(cfg), "seed": base_seed + k})
            rows.append(run_setting(train, dev, test, c, augment))
        name = f"{cfg.architecture}/{cfg.augmentation}"
        table[name] = {"config": asdict(cfg), "runs": rows, "summary": summarize(rows)}
    table["_reference"] = {"published_macro_f1_none_to_cdoa": PUBLISHED_MACRO_F1,
                           "spread": "standard deviation over seeds (ddof=1)"}
    return table


def save_checkpoint(path, run: DetectorRun) -> None:
    torch.save({"kind": "detector", "config": asdict(run.config), "state_dict": run.model.state_dict(),
                "history": run.history}, path)


def load_checkpoint(path) -> DetectorRun:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "detector":
        raise ValueError(f"{path} is not a detector checkpoint")
    cfg = DetectorConfig(**blob["config"])
    model = build_detector(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return DetectorRun(model, cfg, blob["history"])
