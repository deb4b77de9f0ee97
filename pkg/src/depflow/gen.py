"""Severity-conditioned flow-matching generator.

Text encoder + duration predictor produce a frame-rate prior mean ``mu``;
a small 1-D U-Net predicts the flow-matching velocity from (x_t, mu,
in-token position, t, speaker, c_dep). The depression condition enters only
through FiLM scale/shift pairs, one per U-Net stage.

Speakers are conditioned on a reference signature (mean content channels of
the speaker's real frames), so any registered speaker can be synthesised.
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

from .world import Utterance, speaker_signature

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)
N_FILM_BLOCKS = 5


@dataclass
class GenConfig:
    n_tokens: int = 12
    frame_dim: int = 16
    enc_channels: int = 64
    channels: int = 64
    spk_dim: int = 16
    cond_dim: int = 32
    film_hidden: int = 64
    film_dropout: float = 0.2
    attn_heads: int = 4
    sigma_min: float = 1e-4
    lambda_p: float = 1.0
    ode_steps: int = 10
    use_film: bool = False
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.sigma_min < 1.0:
            raise ValueError("sigma_min must lie in (0, 1)")
        if self.ode_steps < 1:
            raise ValueError("ode_steps must be >= 1")
        if self.channels % self.attn_heads:
            raise ValueError("channels must be divisible by attn_heads")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# ---- FiLM ----------------------------------------------------------------

@dataclass
class FiLMParams:
    gammas: list[torch.Tensor]  # each [B, C]
    betas: list[torch.Tensor]

    def __len__(self):
        return len(self.gammas)


def film_modulate(h: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Channel-wise affine modulation. h: [B, C, T] (or [C, T]); gamma, beta: [B, C] (or [C])."""
    if gamma.shape[-1] != h.shape[-2] or beta.shape[-1] != h.shape[-2]:
        raise ValueError(f"FiLM channels {gamma.shape[-1]} do not match feature map {h.shape[-2]}")
    return gamma.unsqueeze(-1) * h + beta.unsqueeze(-1)


class FiLMGenerator(nn.Module):
    """MLP mapping c_dep to per-block (gamma, beta). gamma = 1 + delta, zero-initialised output."""

    def __init__(self, cond_dim: int, channels: int, n_blocks: int, hidden: int, dropout: float):
        super().__init__()
        self.cond_dim, self.channels, self.n_blocks = cond_dim, channels, n_blocks
        self.net = nn.Sequential(
            nn.Linear(cond_dim, hidden), nn.SiLU(), nn.Dropout(dropout), nn.Linear(hidden, 2 * channels * n_blocks),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, c_dep: torch.Tensor) -> FiLMParams:
        if c_dep.shape[-1] != self.cond_dim:
            raise ValueError(f"condition dim {c_dep.shape[-1]} != {self.cond_dim}")
        out = self.net(c_dep).view(-1, self.n_blocks, 2, self.channels)
        return FiLMParams([1.0 + out[:, i, 0] for i in range(self.n_blocks)],
                          [out[:, i, 1] for i in range(self.n_blocks)])


# ---- flow matching primitives ---------------------------------------------

def flow_path_sample(x1, z, t, sigma_min: float = 1e-4):
    """OT conditional path: x_t = (1 - (1 - sigma_min) t) z + t x1, velocity u = x1 - (1 - sigma_min) z."""
    t = torch.as_tensor(t, dtype=x1.dtype)
    if t.dim() > 0:
        t = t.reshape(-1, *([1] * (x1.dim() - 1)))
    x_t = (1 - (1 - sigma_min) * t) * z + t * x1
    u = x1 - (1 - sigma_min) * z
    return x_t, u


def _masked_mean(sq: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """sq: [B, T, n_f]; mask: [B, T] bool. Sum over masked frame-bins / (|M| * n_f)."""
    n = mask.sum()
    if n == 0:
        raise ValueError("empty mask")
    return (sq * mask.unsqueeze(-1)).sum() / (n * sq.shape[-1])


def fm_loss_from(u_hat, u, mask) -> torch.Tensor:
    return _masked_mean((u_hat - u) ** 2, mask)


def prior_loss(y, mu, mask) -> torch.Tensor:
    y, mu = torch.as_tensor(y), torch.as_tensor(mu)
    if y.shape != mu.shape:
        raise ValueError("y and mu shapes differ")
    return _masked_mean(0.5 * ((y - mu) ** 2 + LOG_2PI), mask)


def duration_loss(w, w_hat, mask=None) -> torch.Tensor:
    """MSE between log durations."""
    w, w_hat = torch.as_tensor(w), torch.as_tensor(w_hat)
    if (w <= 0).any() or (w_hat <= 0).any():
        raise ValueError("durations must be positive")
    return log_duration_loss(torch.log(w_hat), w, mask)


def log_duration_loss(log_w_hat, w, mask=None) -> torch.Tensor:
    w = torch.as_tensor(w, dtype=log_w_hat.dtype)
    if mask is None:
        mask = torch.ones_like(w, dtype=torch.bool)
    if (w[mask] <= 0).any():
        raise ValueError("durations must be positive")
    diff = torch.where(mask, torch.log(w.clamp_min(1e-8)) - log_w_hat, torch.zeros_like(log_w_hat))
    return (diff ** 2).sum() / mask.sum()


# ---- network -------------------------------------------------------------

def sinusoidal(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    ang = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([ang.sin(), ang.cos()], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(8, c_out)
        self.emb = nn.Linear(emb_dim, c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.skip = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, mask, emb):
        h = F.silu(self.norm1(self.conv1(x * mask)))
        h = h + self.emb(emb).unsqueeze(-1)
        h = F.silu(self.norm2(self.conv2(h * mask)))
        return (h + self.skip(x)) * mask


class TextEncoder(nn.Module):
    def __init__(self, c: GenConfig):
        super().__init__()
        self.embed = nn.Embedding(c.n_tokens, c.enc_channels)
        self.spk = nn.Linear(c.spk_dim, c.enc_channels)
        self.convs = nn.ModuleList([nn.Conv1d(c.enc_channels, c.enc_channels, 3, padding=1) for _ in range(2)])
        self.out = nn.Conv1d(c.enc_channels, c.frame_dim, 1)

    def forward(self, tokens, tok_mask, spk_emb):
        m = tok_mask.unsqueeze(1).to(spk_emb.dtype)
        h = (self.embed(tokens) + self.spk(spk_emb).unsqueeze(1)).transpose(1, 2) * m
        for conv in self.convs:
            h = (h + F.relu(conv(h))) * m
        return h, self.out(h) * m  # hidden [B, C, L], mu [B, n_f, L]


class DurationPredictor(nn.Module):
    def __init__(self, c: GenConfig):
        super().__init__()
        self.conv1 = nn.Conv1d(c.enc_channels + c.spk_dim, c.enc_channels, 3, padding=1)
        self.conv2 = nn.Conv1d(c.enc_channels, c.enc_channels, 3, padding=1)
        self.out = nn.Conv1d(c.enc_channels, 1, 1)
        self.cond = nn.Linear(c.cond_dim, c.enc_channels)
        nn.init.zeros_(self.cond.weight)
        nn.init.zeros_(self.cond.bias)

    def forward(self, h, tok_mask, spk_emb, c_dep=None):
        m = tok_mask.unsqueeze(1).to(h.dtype)
        x = torch.cat([h.detach(), spk_emb.unsqueeze(-1).expand(-1, -1, h.shape[-1])], dim=1)
        x = F.relu(self.conv1(x * m))
        if c_dep is not None:
            x = x + self.cond(c_dep).unsqueeze(-1)
        x = F.relu(self.conv2(x * m))
        return self.out(x * m).squeeze(1) * tok_mask  # log durations [B, L]


class UNetDecoder(nn.Module):
    def __init__(self, c: GenConfig):
        super().__init__()
        C, emb = c.channels, c.channels
        self.inp = nn.Conv1d(2 * c.frame_dim + 1, C, 3, padding=1)
        self.t_mlp = nn.Sequential(nn.Linear(C, 2 * C), nn.SiLU(), nn.Linear(2 * C, emb))
        self.spk = nn.Linear(c.spk_dim, emb)
        self.down1 = ResBlock(C, C, emb)
        self.pool1 = nn.Conv1d(C, C, 3, stride=2, padding=1)
        self.down2 = ResBlock(C, C, emb)
        self.pool2 = nn.Conv1d(C, C, 3, stride=2, padding=1)
        self.mid = ResBlock(C, C, emb)
        self.attn = nn.MultiheadAttention(C, c.attn_heads, batch_first=True)
        self.attn_norm = nn.LayerNorm(C)
        self.up2 = ResBlock(2 * C, C, emb)
        self.up1 = ResBlock(2 * C, C, emb)
        self.out = nn.Conv1d(C, c.frame_dim, 1)

    def forward(self, x_t, mu, pos, mask, t, spk_emb, film: FiLMParams | None = None):
        """x_t, mu: [B, T, n_f]; pos: [B, T]; mask: [B, T] bool with T divisible by 4."""
        m1 = mask.unsqueeze(1).to(x_t.dtype)
        m2 = m1[..., ::2]
        m4 = m2[..., ::2]
        emb = self.t_mlp(sinusoidal(t, self.inp.out_channels)) + self.spk(spk_emb)

        def mod(h, i):
            return h if film is None else film_modulate(h, film.gammas[i], film.betas[i])

        x = torch.cat([x_t, mu, pos.unsqueeze(-1)], dim=-1).transpose(1, 2)
        h0 = self.inp(x * m1) * m1
        s1 = mod(self.down1(h0, m1, emb), 0) * m1
        h = self.pool1(s1) * m2
        s2 = mod(self.down2(h, m2, emb), 1) * m2
        h = self.pool2(s2) * m4
        h = mod(self.mid(h, m4, emb), 2) * m4
        q = h.transpose(1, 2)
        a, _ = self.attn(q, q, q, key_padding_mask=~(m4.squeeze(1) > 0), need_weights=False)
        h = (self.attn_norm(q + a).transpose(1, 2)) * m4
        h = torch.repeat_interleave(h, 2, dim=-1)[..., : s2.shape[-1]]
        h = mod(self.up2(torch.cat([h, s2], 1), m2, emb), 3) * m2
        h = torch.repeat_interleave(h, 2, dim=-1)[..., : s1.shape[-1]]
        h = mod(self.up1(torch.cat([h, s1], 1), m1, emb), 4) * m1
        return (self.out(h) * m1).transpose(1, 2)


class DepFlowModel(nn.Module):
    def __init__(self, config: GenConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.spk_proj = nn.Linear(config.frame_dim - 1, config.spk_dim)
        self.encoder = TextEncoder(config)
        self.duration = DurationPredictor(config)
        self.decoder = UNetDecoder(config)
        self.film = FiLMGenerator(config.cond_dim, config.channels, N_FILM_BLOCKS,
                                  config.film_hidden, config.film_dropout) if config.use_film else None
        self.register_buffer("speaker_table", torch.zeros(0, config.frame_dim - 1))
        self.speaker_ids: list[int] = []

    # speakers are registered by reference signature
    def register_speakers(self, signatures: dict[int, np.ndarray]) -> None:
        self.speaker_ids = sorted(signatures)
        table = np.stack([signatures[s] for s in self.speaker_ids]) if signatures else \
            np.zeros((0, self.config.frame_dim - 1))
        self.speaker_table = torch.as_tensor(table, dtype=self.spk_proj.weight.dtype)

    def speaker_embedding(self, speaker_ids) -> torch.Tensor:
        index = {s: i for i, s in enumerate(self.speaker_ids)}
        try:
            rows = [index[int(s)] for s in speaker_ids]
        except KeyError as exc:
            raise ValueError(f"unknown speaker {exc.args[0]}") from None
        return self.spk_proj(self.speaker_table[rows])

    def film_params(self, c_dep) -> FiLMParams | None:
        if self.film is None or c_dep is None:
            return None
        return self.film(c_dep)

    def enable_film(self) -> None:
        """Stage-3 surgery: attach a zero-initialised FiLM generator."""
        if self.film is None:
            c = self.config
            c.use_film = True
            self.film = FiLMGenerator(c.cond_dim, c.channels, N_FILM_BLOCKS, c.film_hidden, c.film_dropout)
            self.film.to(self.spk_proj.weight.dtype)


# ---- batching ------------------------------------------------------------

@dataclass
class GenBatch:
    tokens: torch.Tensor      # [B, L] long
    tok_mask: torch.Tensor    # [B, L] bool
    durations: torch.Tensor   # [B, L] long (0 on padding)
    speakers: list[int]
    y: torch.Tensor | None    # [B, T, n_f]
    mask: torch.Tensor        # [B, T] bool, T divisible by 4
    pos: torch.Tensor         # [B, T] in-token position in [0, 1)
    token_index: torch.Tensor  # [B, T] long, token slot per frame
    c_dep: torch.Tensor | None


def _pad4(n: int) -> int:
    return max(4, int(math.ceil(n / 4) * 4))


def frame_layout(durations: list[list[int]], dtype=torch.float32):
    """Frame mask, in-token position, and token slot for padded duration lists."""
    T = _pad4(max(sum(d) for d in durations))
    B = len(durations)
    mask = torch.zeros(B, T, dtype=torch.bool)
    pos = torch.zeros(B, T, dtype=dtype)
    slot = torch.zeros(B, T, dtype=torch.long)
    for b, ds in enumerate(durations):
        t = 0
        for i, d in enumerate(ds):
            pos[b, t:t + d] = torch.arange(d, dtype=dtype) / d
            slot[b, t:t + d] = i
            t += d
        mask[b, :t] = True
    return mask, pos, slot


def make_batch(utterances: list[Utterance], c_dep=None, dtype=torch.float32) -> GenBatch:
    L = max(len(u.content) for u in utterances)
    B = len(utterances)
    tokens = torch.zeros(B, L, dtype=torch.long)
    tok_mask = torch.zeros(B, L, dtype=torch.bool)
    durs = torch.zeros(B, L, dtype=torch.long)
    for b, u in enumerate(utterances):
        n = len(u.content)
        tokens[b, :n] = torch.as_tensor(u.content)
        durs[b, :n] = torch.as_tensor(u.durations)
        tok_mask[b, :n] = True
    mask, pos, slot = frame_layout([list(u.durations) for u in utterances], dtype)
    y = torch.zeros(B, mask.shape[1], utterances[0].frames.shape[1], dtype=dtype)
    for b, u in enumerate(utterances):
        y[b, : u.n_frames] = torch.as_tensor(u.frames, dtype=dtype)
    cd = None if c_dep is None else torch.as_tensor(np.asarray(c_dep), dtype=dtype)
    return GenBatch(tokens, tok_mask, durs, [u.speaker_id for u in utterances], y, mask, pos, slot, cd)


def expand(mu_tok: torch.Tensor, slot: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """mu_tok [B, n_f, L] -> frame-rate [B, T, n_f] via token slots."""
    idx = slot.unsqueeze(1).expand(-1, mu_tok.shape[1], -1)
    return torch.gather(mu_tok, 2, idx).transpose(1, 2) * mask.unsqueeze(-1)


# ---- losses --------------------------------------------------------------

def compute_losses(model: DepFlowModel, batch: GenBatch, generator: torch.Generator | None = None,
                   t=None, z=None, lambda_p: float | None = None) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Duration + lambda_p * prior + flow-matching loss for one batch."""
    c = model.config
    lambda_p = c.lambda_p if lambda_p is None else lambda_p
    dtype = model.spk_proj.weight.dtype
    spk = model.speaker_embedding(batch.speakers)
    c_dep = batch.c_dep if model.film is not None else None
    h, mu_tok = model.encoder(batch.tokens, batch.tok_mask, spk)
    log_w_hat = model.duration(h, batch.tok_mask, spk, c_dep)
    l_dur = log_duration_loss(log_w_hat, batch.durations.to(dtype).clamp_min(1), batch.tok_mask)
    mu = expand(mu_tok, batch.token_index, batch.mask)
    l_prior = prior_loss(batch.y, mu, batch.mask)
    B = batch.y.shape[0]
    if t is None:
        t = torch.rand(B, generator=generator, dtype=dtype)
    if z is None:
        z = torch.randn(batch.y.shape, generator=generator, dtype=dtype)
    x_t, u = flow_path_sample(batch.y, z, t, c.sigma_min)
    u_hat = model.decoder(x_t, mu, batch.pos, batch.mask, t, spk, model.film_params(c_dep))
    l_fm = fm_loss_from(u_hat, u * batch.mask.unsqueeze(-1), batch.mask)
    total = l_dur + lambda_p * l_prior + l_fm
    return total, {"dur": l_dur, "prior": l_prior, "fm": l_fm, "total": total}


# ---- sampling ------------------------------------------------------------

@torch.no_grad()
def sample(model: DepFlowModel, tokens, speaker_id: int, c_dep=None, seed: int = 0,
           ode_steps: int | None = None, durations=None) -> np.ndarray:
    """Generate frames [T, n_f] by Euler integration of the learned velocity from t=0 to 1."""
    return sample_batch(model, [tokens], [speaker_id], None if c_dep is None else [c_dep],
                        [seed], ode_steps, None if durations is None else [durations])[0]


@torch.no_grad()
def sample_batch(model: DepFlowModel, token_lists, speaker_ids, c_deps=None, seeds=None,
                 ode_steps: int | None = None, durations=None) -> list[np.ndarray]:
    model.eval()
    c = model.config
    steps = c.ode_steps if ode_steps is None else ode_steps
    if steps < 1:
        raise ValueError("ode_steps must be >= 1")
    dtype = model.spk_proj.weight.dtype
    for toks in token_lists:
        if len(toks) == 0 or min(toks) < 0 or max(toks) >= c.n_tokens:
            raise ValueError(f"token ids must lie in 0..{c.n_tokens - 1}")
    B = len(token_lists)
    seeds = list(range(B)) if seeds is None else list(seeds)
    L = max(len(t) for t in token_lists)
    tokens = torch.zeros(B, L, dtype=torch.long)
    tok_mask = torch.zeros(B, L, dtype=torch.bool)
    for b, toks in enumerate(token_lists):
        tokens[b, : len(toks)] = torch.as_tensor(list(toks))
        tok_mask[b, : len(toks)] = True
    spk = model.speaker_embedding(speaker_ids)
    cd = None
    if c_deps is not None and model.film is not None:
        cd = torch.as_tensor(np.asarray(c_deps), dtype=dtype)
        if cd.shape[-1] != c.cond_dim:
            raise ValueError(f"condition dim {cd.shape[-1]} != {c.cond_dim}")
    h, mu_tok = model.encoder(tokens, tok_mask, spk)
    if durations is None:
        log_w = model.duration(h, tok_mask, spk, cd)
        w = torch.clamp(torch.ceil(torch.exp(log_w)), min=1).long()
        dur_lists = [w[b, : len(t)].tolist() for b, t in enumerate(token_lists)]
    else:
        dur_lists = [list(d) for d in durations]
    mask, pos, slot = frame_layout(dur_lists, dtype)
    pos = pos.to(dtype)
    mu = expand(mu_tok, slot, mask)
    # per-item noise streams keep outputs independent of batch composition
    z = torch.stack([
        torch.randn(mask.shape[1], c.frame_dim, generator=torch.Generator().manual_seed(int(s)), dtype=dtype)
        for s in seeds
    ])
    film = model.film_params(cd)
    x = z * mask.unsqueeze(-1)
    dt = 1.0 / steps
    for k in range(steps):
        t = torch.full((B,), k * dt, dtype=dtype)
        x = x + dt * model.decoder(x, mu, pos, mask, t, spk, film)
    lengths = [sum(d) for d in dur_lists]
    return [x[b, : lengths[b]].numpy().astype(np.float32) for b in range(B)]


# ---- training ------------------------------------------------------------

@dataclass
class GenTrainResult:
    model: DepFlowModel
    history: list[dict] = field(default_factory=list)


class NumericalFailure(RuntimeError):
    pass


def speaker_signatures(utterances: list[Utterance]) -> dict[int, np.ndarray]:
    groups: dict[int, list[np.ndarray]] = {}
    for u in utterances:
        groups.setdefault(u.speaker_id, []).append(speaker_signature(u.frames))
    return {s: np.mean(v, axis=0) for s, v in groups.items()}


def evaluate_loss(model: DepFlowModel, utterances, c_dep=None, seed: int = 0, batch_size: int = 64) -> dict:
    model.eval()
    g = torch.Generator().manual_seed(seed)
    sums = {"dur": 0.0, "prior": 0.0, "fm": 0.0, "total": 0.0}
    n = 0
    with torch.no_grad():
        for i in range(0, len(utterances), batch_size):
            part = utterances[i:i + batch_size]
            cd = None if c_dep is None else c_dep[i:i + batch_size]
            _, parts = compute_losses(model, make_batch(part, cd), g)
            for k in sums:
                sums[k] += float(parts[k]) * len(part)
            n += len(part)
    return {k: v / n for k, v in sums.items()}


def train_generator(model: DepFlowModel, utterances: list[Utterance], c_dep=None,
                    epochs: int | None = None, lr: float | None = None) -> GenTrainResult:
    c = model.config
    epochs = c.epochs if epochs is None else epochs
    torch.manual_seed(c.seed)
    g = torch.Generator().manual_seed(c.seed + 17)
    rng = np.random.default_rng([c.seed, 29])
    opt = torch.optim.Adam(model.parameters(), lr=c.lr if lr is None else lr)
    result = GenTrainResult(model)
    for epoch in range(epochs):
        model.train()
        order = rng.permutation(len(utterances))
        sums: dict[str, float] = {}
        nb = 0
        for b in range(0, len(order), c.batch_size):
            idx = order[b:b + c.batch_size]
            cd = None if c_dep is None else np.asarray(c_dep)[idx]
            batch = make_batch([utterances[i] for i in idx], cd)
            loss, parts = compute_losses(model, batch, g)
            if not torch.isfinite(loss):
                raise NumericalFailure(f"non-finite generator loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            nb += 1
        entry = {k: v / nb for k, v in sums.items()} | {"epoch": epoch}
        result.history.append(entry)
        log.info("gen epoch %d %s", epoch, entry)
    model.eval()
    return result


def pretrain(utterances: list[Utterance], config: GenConfig) -> GenTrainResult:
    """Stage 2: no depression conditioning."""
    config.use_film = False
    torch.manual_seed(config.seed)
    model = DepFlowModel(config)
    model.register_speakers(speaker_signatures(utterances))
    return train_generator(model, utterances)


def finetune(model: DepFlowModel, utterances: list[Utterance], c_dep, epochs: int | None = None,
             speakers: dict[int, np.ndarray] | None = None) -> GenTrainResult:
    """Stage 3: attach FiLM, register the new corpus' speakers, update every parameter."""
    if model.config.use_film and model.film is None:
        raise ValueError("inconsistent model state")
    model.enable_film()
    model.register_speakers(speakers if speakers is not None else speaker_signatures(utterances))
    return train_generator(model, utterances, c_dep, epochs)


# ---- checkpoints ---------------------------------------------------------

def save_checkpoint(path, model: DepFlowModel, stage: str, extra: dict | None = None) -> None:
    torch.save({"kind": "depflow", "stage": stage, "config": asdict(model.config),
                "config_digest": model.config.digest(), "speaker_ids": model.speaker_ids,
                "state_dict": model.state_dict(), "extra": extra or {}}, path)


def load_checkpoint(path) -> tuple[DepFlowModel, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("kind") != "depflow":
        raise ValueError(f"{path} is not a generator checkpoint")
    cfg = GenConfig(**blob["config"])
    if cfg.digest() != blob["config_digest"]:
        raise ValueError("checkpoint config digest mismatch")
    model = DepFlowModel(cfg)
    model.speaker_table = torch.zeros_like(blob["state_dict"]["speaker_table"])
    model.load_state_dict(blob["state_dict"])
    model.speaker_ids = list(blob["speaker_ids"])
    model.eval()
    return model, {"stage": blob["stage"], **blob["extra"]}
