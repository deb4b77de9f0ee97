"""Depression acoustic encoder.

Frames -> temporal conv -> 256-d projection -> attentive statistics pooling
-> 32-d embedding ``d``. Three heads sit on top: an ordinal severity head on
``d``, a speaker classifier on the L2-normalised ``d_norm`` (used both
directly and behind a gradient reversal layer), and a content classifier
behind a second reversal layer.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .world import CROP_FRAMES, Utterance, crop_segment

log = logging.getLogger(__name__)

POOL_EPS = 1e-6
K_LEVELS = 5


@dataclass
class DAEConfig:
    frame_dim: int = 16
    conv_channels: int = 64
    frame_proj_dim: int = 256
    attn_hidden: int = 64
    post_hidden: int = 128
    embed_dim: int = 32
    K: int = K_LEVELS
    dropout: float = 0.2
    lambda_sup: float = 1.0
    lambda_id: float = 0.2
    lambda_spk: float = 0.2
    lambda_con: float = 0.1
    grl_scale: float = 1.0
    n_speakers: int = 1
    n_content_units: int = 12
    lr: float = 1e-4
    weight_decay: float = 3e-3
    batch_size: int = 64
    max_epochs: int = 500
    patience: int = 20
    crop_frames: int = CROP_FRAMES
    content_mode: str = "kmeans"  # or "ground_truth"
    seed: int = 0

    def validate(self) -> None:
        for name in ("lambda_sup", "lambda_id", "lambda_spk", "lambda_con", "grl_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("frame_dim", "frame_proj_dim", "embed_dim", "n_speakers", "n_content_units"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# ---- gradient reversal ---------------------------------------------------

class GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.scale, None


def grad_reverse(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    if scale < 0:
        raise ValueError("GRL scale must be nonnegative")
    return GradientReversal.apply(x, scale)


# ---- pooling -------------------------------------------------------------

def attn_stat_pool(h: torch.Tensor, logits: torch.Tensor, mask: torch.Tensor | None = None,
                   eps: float = POOL_EPS) -> torch.Tensor:
    """Attention-weighted mean and std.

    h: [B, T, D]; logits: [B, T]; mask: [B, T] bool (True = valid frame).
    """
    if h.shape[1] == 0:
        raise ValueError("cannot pool an empty sequence")
    if mask is not None:
        if (mask.sum(dim=1) == 0).any():
            raise ValueError("cannot pool an empty sequence")
        logits = logits.masked_fill(~mask, float("-inf"))
    alpha = torch.softmax(logits, dim=1).unsqueeze(-1)
    mean = (alpha * h).sum(dim=1)
    var = (alpha * (h - mean.unsqueeze(1)) ** 2).sum(dim=1)
    return torch.cat([mean, torch.sqrt(var + eps)], dim=-1)


class AttentiveStatsPool(nn.Module):
    def __init__(self, dim: int, hidden: int = 64):
        super().__init__()
        self.attn = nn.Sequential(nn.Linear(dim, hidden), nn.Tanh(), nn.Linear(hidden, 1))

    def forward(self, h, mask=None):
        return attn_stat_pool(h, self.attn(h).squeeze(-1), mask)


# ---- model ---------------------------------------------------------------

class DepressionEncoder(nn.Module):
    def __init__(self, config: DAEConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        self.frame_encoder = nn.Sequential(
            nn.Conv1d(c.frame_dim, c.conv_channels, 5, padding=2), nn.ReLU(),
            nn.Conv1d(c.conv_channels, c.conv_channels, 5, padding=2), nn.ReLU(),
        )
        self.proj = nn.Sequential(nn.Linear(c.conv_channels, c.frame_proj_dim), nn.ReLU(), nn.Dropout(c.dropout))
        self.pool = AttentiveStatsPool(c.frame_proj_dim, c.attn_hidden)
        self.post = nn.Sequential(
            nn.Linear(2 * c.frame_proj_dim, c.post_hidden), nn.LayerNorm(c.post_hidden), nn.SiLU(),
            nn.Dropout(c.dropout), nn.Linear(c.post_hidden, c.embed_dim),
        )
        self.ordinal_head = nn.Sequential(
            nn.Linear(c.embed_dim, c.embed_dim), nn.SiLU(), nn.Dropout(c.dropout), nn.Linear(c.embed_dim, c.K - 1),
        )
        self.speaker_head = nn.Linear(c.embed_dim, c.n_speakers)
        self.content_head = nn.Linear(c.embed_dim, c.n_content_units)

    def embed(self, frames: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if frames.shape[-1] != self.config.frame_dim:
            raise ValueError(f"frame_dim {frames.shape[-1]} does not match model ({self.config.frame_dim})")
        h = self.frame_encoder(frames.transpose(1, 2)).transpose(1, 2)
        h = self.proj(h)
        return self.post(self.pool(h, mask))

    def forward(self, frames, mask=None) -> dict[str, torch.Tensor]:
        d = self.embed(frames, mask)
        d_norm = F.normalize(d, dim=-1)
        s = self.config.grl_scale
        return {
            "d": d,
            "d_norm": d_norm,
            "ordinal": self.ordinal_head(d),
            # identification trains the classifier only; the encoder sees the reversed branch
            "speaker": self.speaker_head(d_norm.detach()),
            "speaker_adv": self.speaker_head(grad_reverse(d_norm, s)),
            "content_adv": self.content_head(grad_reverse(d_norm, s)),
        }


# ---- ordinal head --------------------------------------------------------

def ordinal_targets(level, K: int = K_LEVELS) -> torch.Tensor:
    level = torch.as_tensor(level)
    if ((level < 0) | (level > K - 1)).any():
        raise ValueError(f"level outside 0..{K - 1}")
    k = torch.arange(1, K, device=level.device)
    return (level.unsqueeze(-1) >= k).to(torch.get_default_dtype())


def ordinal_loss(logits: torch.Tensor, level, class_weights=None) -> torch.Tensor:
    """Weighted binary cross-entropy over the K-1 cumulative thresholds, batch mean."""
    logits = torch.as_tensor(logits)
    single = logits.dim() == 1
    if single:
        logits = logits.unsqueeze(0)
    t = ordinal_targets(torch.as_tensor(level).reshape(-1), logits.shape[-1] + 1).to(logits.dtype)
    w = torch.ones(logits.shape[-1], dtype=logits.dtype) if class_weights is None else \
        torch.as_tensor(class_weights, dtype=logits.dtype)
    per = F.binary_cross_entropy_with_logits(logits, t, reduction="none")
    return (per * w).sum(dim=-1).mean()


def decode_level(logits) -> np.ndarray | int:
    o = np.asarray(logits, dtype=float)
    lv = (o > 0).sum(axis=-1)  # sigma(o) > 0.5  <=>  o > 0
    return int(lv) if lv.ndim == 0 else lv


def threshold_class_weights(levels, K: int = K_LEVELS) -> np.ndarray:
    levels = np.asarray(levels)
    freq = np.array([(levels >= k).mean() for k in range(1, K)])
    w = 1.0 / np.maximum(freq, 1.0 / max(len(levels), 1))
    return w / w.mean()


# ---- content pseudo-labels -----------------------------------------------

def majority_vote(units, n_units: int | None = None) -> int:
    counts = np.bincount(np.asarray(units, dtype=int), minlength=n_units or 0)
    return int(np.argmax(counts))  # argmax returns the smallest id on ties


def pseudo_content_labels(utterances: list[Utterance], n_units: int, seed: int = 0,
                          mode: str = "kmeans", max_fit_frames: int = 20000, n_iter: int = 50):
    """Per-utterance content unit. Returns (labels, fitted kmeans or None)."""
    if not utterances:
        raise ValueError("empty corpus")
    if mode == "ground_truth":
        labels = []
        for u in utterances:
            frame_tokens = np.repeat(np.asarray(u.content), np.asarray(u.durations))
            labels.append(majority_vote(frame_tokens, n_units))
        return np.asarray(labels), None
    if mode != "kmeans":
        raise ValueError(f"unknown content mode {mode!r}")
    from sklearn.cluster import KMeans

    all_frames = np.concatenate([u.frames for u in utterances]).astype(np.float64)
    if len(np.unique(all_frames, axis=0)) < n_units:
        raise ValueError("more content units than distinct frames")
    rng = np.random.default_rng(seed)
    fit = all_frames if len(all_frames) <= max_fit_frames else \
        all_frames[rng.choice(len(all_frames), max_fit_frames, replace=False)]
    km = KMeans(n_clusters=n_units, n_init=1, max_iter=n_iter, random_state=seed).fit(fit)
    labels = [majority_vote(km.predict(u.frames.astype(np.float64)), n_units) for u in utterances]
    return np.asarray(labels), km


# ---- batching ------------------------------------------------------------

def collate(frames_list: list[np.ndarray], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    T = max(len(f) for f in frames_list)
    D = frames_list[0].shape[1]
    x = torch.zeros(len(frames_list), T, D, dtype=dtype)
    mask = torch.zeros(len(frames_list), T, dtype=torch.bool)
    for i, f in enumerate(frames_list):
        x[i, : len(f)] = torch.as_tensor(f, dtype=dtype)
        mask[i, : len(f)] = True
    return x, mask


def balanced_indices(labels, rng: np.random.Generator) -> np.ndarray:
    """Oversample minority classes to the majority count, shuffled."""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    n = counts.max()
    idx = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        extra = rng.choice(members, n - len(members), replace=True) if n > len(members) else []
        idx.extend(members)
        idx.extend(extra)
    idx = np.asarray(idx, dtype=int)
    rng.shuffle(idx)
    return idx


# ---- losses --------------------------------------------------------------

def dae_total_loss(model: DepressionEncoder, frames, mask, levels, speakers, content,
                   class_weights=None) -> tuple[torch.Tensor, dict[str, float]]:
    if levels is None or speakers is None or content is None:
        raise ValueError("batch must carry level, speaker and content labels")
    c = model.config
    out = model(frames, mask)
    speakers = torch.as_tensor(speakers, dtype=torch.long)
    content = torch.as_tensor(content, dtype=torch.long)
    parts = {
        "sup": ordinal_loss(out["ordinal"], levels, class_weights),
        "id": F.cross_entropy(out["speaker"], speakers),
        "adv_spk": F.cross_entropy(out["speaker_adv"], speakers),
        "adv_con": F.cross_entropy(out["content_adv"], content),
    }
    total = (c.lambda_sup * parts["sup"] + c.lambda_id * parts["id"]
             + c.lambda_spk * parts["adv_spk"] + c.lambda_con * parts["adv_con"])
    return total, {k: float(v.detach()) for k, v in parts.items()} | {"total": float(total.detach())}


# ---- training ------------------------------------------------------------

@dataclass
class TrainResult:
    model: DepressionEncoder
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_dev_f1: float = float("nan")
    class_weights: list[float] = field(default_factory=list)


class NumericalFailure(RuntimeError):
    pass


def _forward_batches(model, utterances, batch_size=128):
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(utterances), batch_size):
            x, m = collate([u.frames for u in utterances[i:i + batch_size]])
            outs.append(model(x, m))
    return {k: torch.cat([o[k] for o in outs]).numpy() for k in outs[0]}


def encode(model: DepressionEncoder, utterances: list[Utterance], batch_size: int = 128) -> dict[str, np.ndarray]:
    """Eval-mode embeddings: keys d, d_norm, ordinal."""
    for u in utterances:
        if u.frames.shape[1] != model.config.frame_dim:
            raise ValueError(f"{u.id}: frame_dim {u.frames.shape[1]} != model {model.config.frame_dim}")
    out = _forward_batches(model, utterances, batch_size)
    return {k: out[k] for k in ("d", "d_norm", "ordinal")}


def severity_readout(ordinal_logits) -> np.ndarray:
    """Expected level under the cumulative head: sum_k sigma(o_k)."""
    o = np.asarray(ordinal_logits, dtype=float)
    return (1.0 / (1.0 + np.exp(-o))).sum(axis=-1)


def _ordinal_macro_f1(model, utterances) -> float:
    from .metrics import macro_f1

    if not utterances:
        return float("nan")
    out = _forward_batches(model, utterances)
    pred = decode_level(out["ordinal"])
    return macro_f1([u.severity_level for u in utterances], pred, labels=range(K_LEVELS))


def train_dae(train: list[Utterance], dev: list[Utterance], config: DAEConfig,
              content_labels=None, speaker_index: dict[int, int] | None = None) -> TrainResult:
    """Train with early stopping on dev ordinal macro-F1; keeps the best weights."""
    config.validate()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng([config.seed, 11])
    if speaker_index is None:
        speaker_index = {s: i for i, s in enumerate(sorted({u.speaker_id for u in train}))}
    if content_labels is None:
        content_labels, _ = pseudo_content_labels(train, config.n_content_units, config.seed, config.content_mode)
    model = DepressionEncoder(config)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    levels = np.array([u.severity_level for u in train])
    weights = threshold_class_weights(levels, config.K)
    cw = torch.as_tensor(weights, dtype=torch.float32)
    spk = np.array([speaker_index[u.speaker_id] for u in train])
    con = np.asarray(content_labels)
    labels = np.array([u.label for u in train])

    result = TrainResult(model, class_weights=weights.tolist())
    best_state, stale = None, 0
    for epoch in range(config.max_epochs):
        model.train()
        sums: dict[str, float] = {}
        n_batches = 0
        order = balanced_indices(labels, rng)
        for b in range(0, len(order), config.batch_size):
            idx = order[b:b + config.batch_size]
            crops = [crop_segment(train[i], config.crop_frames, rng).frames for i in idx]
            x, m = collate(crops)
            loss, parts = dae_total_loss(model, x, m, levels[idx], spk[idx], con[idx], cw)
            if not math.isfinite(parts["total"]):
                raise NumericalFailure(f"non-finite DAE loss at epoch {epoch}: {parts}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        entry = {k: v / n_batches for k, v in sums.items()} | {"epoch": epoch}
        entry["dev_f1"] = _ordinal_macro_f1(model, dev) if dev else float("nan")
        result.history.append(entry)
        log.info("dae epoch %d %s", epoch, entry)
        score = entry["dev_f1"] if dev else -entry["total"]
        if best_state is None or score > result.best_dev_f1:
            result.best_dev_f1, result.best_epoch = score, epoch
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return result


# ---- checkpoints ---------------------------------------------------------

def save_checkpoint(path, model: DepressionEncoder, extra: dict | None = None) -> None:
    cfg = asdict(model.config)
    torch.save({"kind": "dae", "config": cfg, "config_digest": model.config.digest(),
                "state_dict": model.state_dict(), "extra": extra or {}}, path)


def load_checkpoint(path) -> tuple[DepressionEncoder, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("kind") != "dae":
        raise ValueError(f"{path} is not a DAE checkpoint")
    cfg = DAEConfig(**blob["config"])
    if cfg.digest() != blob["config_digest"]:
        raise ValueError("checkpoint config digest mismatch")
    model = DepressionEncoder(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob["extra"]


# ---- probes --------------------------------------------------------------

def speaker_probe_accuracy(d_norm: np.ndarray, speakers, seed: int = 0) -> float:
    """Linear speaker probe: alternate each speaker's utterances into fit/eval halves."""
    from .metrics import linear_probe

    speakers = np.asarray(speakers)
    fit = np.zeros(len(speakers), dtype=bool)
    for s in np.unique(speakers):
        idx = np.flatnonzero(speakers == s)
        fit[idx[::2]] = True
    res = linear_probe(d_norm[fit], speakers[fit], d_norm[~fit], speakers[~fit], mode="classification", seed=seed)
    return res["accuracy"]
