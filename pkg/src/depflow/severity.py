"""Prototype bank and continuous severity-to-condition mapping."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .world import BIN_CENTERS, MAX_SCORE

PARALLEL_EPS = 1e-4
UNIT_TOL = 1e-6


@dataclass
class PrototypeBank:
    prototypes: np.ndarray  # [5, embed_dim], unit rows
    counts: list[int]
    centers: tuple[float, ...] = BIN_CENTERS

    @property
    def embed_dim(self) -> int:
        return int(self.prototypes.shape[1])

    def to_json(self) -> str:
        return json.dumps({
            "prototypes": self.prototypes.tolist(),
            "counts": list(self.counts),
            "centers": list(self.centers),
            "embed_dim": self.embed_dim,
        })

    @classmethod
    def from_json(cls, text: str) -> "PrototypeBank":
        d = json.loads(text)
        P = np.asarray(d["prototypes"], dtype=float)
        if not np.allclose(np.linalg.norm(P, axis=1), 1.0, atol=UNIT_TOL):
            raise ValueError("stored prototypes are not unit norm")
        return cls(P, list(d["counts"]), tuple(d["centers"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "PrototypeBank":
        return cls.from_json(Path(path).read_text())


def subject_embedding(embeddings) -> np.ndarray:
    E = np.asarray(embeddings, dtype=float)
    if E.ndim != 2 or len(E) == 0:
        raise ValueError("need at least one utterance embedding")
    return E.mean(axis=0)


def build_prototypes(subject_embeddings, levels, n_levels: int = 5) -> PrototypeBank:
    E = np.asarray(subject_embeddings, dtype=float)
    levels = np.asarray(levels, dtype=int)
    missing = [k for k in range(n_levels) if not (levels == k).any()]
    if missing:
        raise ValueError(f"no subjects in severity bins {missing}")
    protos, counts = [], []
    for k in range(n_levels):
        mean = E[levels == k].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            raise ValueError(f"degenerate (zero-norm) mean in bin {k}")
        protos.append(mean / norm)
        counts.append(int((levels == k).sum()))
    return PrototypeBank(np.stack(protos), counts)


def alpha(s: float) -> float:
    """Position of a score on [-1, 1] with 12 at the origin."""
    return float(np.clip((s - 12.0) / 12.0, -1.0, 1.0))


def locate_and_tau(s: float, bank: PrototypeBank | None = None) -> tuple[int, int, float]:
    if not np.isfinite(s) or s < 0 or s > MAX_SCORE:
        raise ValueError(f"severity score {s} outside [0, 24]")
    c = BIN_CENTERS if bank is None else bank.centers
    if s <= c[0]:
        return 0, 1, 0.0
    if s >= c[-1]:
        return len(c) - 2, len(c) - 1, 1.0
    i = int(np.searchsorted(c, s, side="right") - 1)
    return i, i + 1, float((s - c[i]) / (c[i + 1] - c[i]))


def slerp(p0, p1, tau: float) -> np.ndarray:
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    for name, p in (("p0", p0), ("p1", p1)):
        if abs(np.linalg.norm(p) - 1.0) > UNIT_TOL:
            raise ValueError(f"{name} is not unit norm")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if tau == 0.0:
        return p0.copy()
    if tau == 1.0:
        return p1.copy()
    omega = np.arccos(np.clip(p0 @ p1, -1.0, 1.0))
    if omega > np.pi - PARALLEL_EPS:
        raise ValueError("antiparallel endpoints: interpolation path is ill-posed")
    if omega < PARALLEL_EPS:
        v = (1 - tau) * p0 + tau * p1
        return v / np.linalg.norm(v)
    so = np.sin(omega)
    v = np.sin((1 - tau) * omega) / so * p0 + np.sin(tau * omega) / so * p1
    return v / np.linalg.norm(v)


def severity_condition(s: float, bank: PrototypeBank) -> np.ndarray:
    i, j, tau = locate_and_tau(s, bank)
    return slerp(bank.prototypes[i], bank.prototypes[j], tau)
