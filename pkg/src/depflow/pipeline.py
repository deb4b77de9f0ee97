"""Staged experiment runner with a flat-file store.

One directory per experiment:

    experiment.cfg      flat ``section.key = value`` configuration
    experiment.json     stage flags, per-stage config digests, seeds, artifacts
    world/ dae/ tts/ proto/ cdoa/ detector/ reports/

Each stage digests only its own configuration section, so editing one section
invalidates that stage alone.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import cdoa as C
from . import dae as D
from . import detector as R
from . import gen as G
from . import metrics as M
from . import severity as S
from .world import (
    BIN_CENTERS, MARKERS, WorldConfig, extract_markers, generate_world, load_utterances, parse_kv_text,
    read_manifest, select_eval_utterances,
)

log = logging.getLogger(__name__)

ENV_ROOT = "DEPFLOW_ROOT"
STAGES = ("world", "dae", "tts-pretrain", "tts-finetune", "proto", "cdoa", "detector", "report")
PREREQUISITES = {
    "world": (),
    "dae": ("world",),
    "tts-pretrain": ("world",),
    "tts-finetune": ("dae", "tts-pretrain"),
    "proto": ("dae",),
    "cdoa": ("tts-finetune", "proto"),
    "detector": ("cdoa",),
    "report": ("detector",),
}
SECTION = {"world": "world", "dae": "dae", "tts-pretrain": "gen", "tts-finetune": "gen", "proto": "proto",
           "cdoa": "cdoa", "detector": "detector", "report": "report"}
REPORT_KINDS = ("bias", "disentangle", "controllability", "augmentation")

SECTION_DEFAULTS: dict[str, dict] = {
    # desk-scale training budget
    "dae": {"lr": 1e-3, "max_epochs": 20, "patience": 100, "seed": 0},
    "gen": {"pretrain_epochs": 10, "finetune_epochs": 10, "pretrain_subjects": 60, "pretrain_utterances": 1200,
            "pretrain_seed": 100, "lr": 1e-3, "batch_size": 32, "ode_steps": 10, "seed": 0},
    "proto": {"splits": "train,dev"},
    "cdoa": {"strategy": "coverage", "base": 15, "seed": 0},
    "detector": {"architecture": "conv_recurrent", "augmentations": "none,cdoa", "n_seeds": 5, "epochs": 8,
                 "base_seed": 0},
    "report": {"sweep_base": 50, "seed": 0},
}


class PreconditionError(RuntimeError):
    """Missing prerequisite, missing artifact, or configuration drift."""


def stream_seed(base: int, name: str) -> int:
    """Named random stream: stable 31-bit seed from (stage name, base seed)."""
    h = hashlib.sha256(f"{name}:{base}".encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _file_sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _cast(raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


# ---- configuration -----------------------------------------------------------

@dataclass
class ExperimentConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    sections: dict[str, dict] = field(default_factory=lambda: {k: dict(v) for k, v in SECTION_DEFAULTS.items()})

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        kv = parse_kv_text(text)
        seed = int(kv.pop("seed", 0))
        world_kv = {k.split(".", 1)[1]: v for k, v in kv.items() if k.startswith("world.")}
        sections = {k: dict(v) for k, v in SECTION_DEFAULTS.items()}
        for key, raw in kv.items():
            if key.startswith("world."):
                continue
            if "." not in key:
                raise PreconditionError(f"unknown configuration key {key!r}")
            sec, name = key.split(".", 1)
            if sec not in sections:
                raise PreconditionError(f"unknown configuration section {sec!r}")
            default = sections[sec][name] if name in sections[sec] else _field_default(sec, name)
            sections[sec][name] = _cast(raw, default)
        return cls(seed, WorldConfig.from_mapping(world_kv), sections)

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}"]
        lines += [f"world.{ln}" for ln in self.world.to_text().splitlines()]
        for sec in sorted(self.sections):
            for k, v in sorted(self.sections[sec].items()):
                lines.append(f"{sec}.{k} = {v}")
        return "\n".join(lines) + "\n"

    def section_digest(self, stage: str) -> str:
        sec = SECTION[stage]
        payload = asdict(self.world) if sec == "world" else self.sections.get(sec, {})
        return _digest({"seed": self.seed, "section": sec, "stage": stage, "values": payload})

    def dae_config(self) -> D.DAEConfig:
        c = self.sections["dae"]
        known = {f.name for f in fields(D.DAEConfig)}
        kw = {k: v for k, v in c.items() if k in known}
        kw["n_speakers"] = self.world.n_subjects
        kw["n_content_units"] = self.world.n_content_tokens
        kw["frame_dim"] = self.world.frame_dim
        kw["seed"] = stream_seed(self.seed + int(c.get("seed", 0)), "dae")
        return D.DAEConfig(**kw)

    def gen_config(self) -> G.GenConfig:
        c = self.sections["gen"]
        known = {f.name for f in fields(G.GenConfig)} - {"use_film"}
        kw = {k: v for k, v in c.items() if k in known}
        kw.update(n_tokens=self.world.n_content_tokens, frame_dim=self.world.frame_dim,
                  epochs=int(c["pretrain_epochs"]), seed=stream_seed(self.seed + int(c.get("seed", 0)), "tts"))
        return G.GenConfig(**kw)


def _field_default(sec: str, name: str):
    cls = {"dae": D.DAEConfig, "gen": G.GenConfig}.get(sec)
    if cls is not None:
        for f in fields(cls):
            if f.name == name:
                return f.default
    raise PreconditionError(f"unknown configuration key {sec}.{name}")


# ---- experiment store ------------------------------------------------------------

def experiment_root(root: str | os.PathLike | None = None) -> Path:
    return Path(root or os.environ.get(ENV_ROOT, "experiments"))


class Experiment:
    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        if not (self.path / "experiment.cfg").exists():
            raise PreconditionError(f"no experiment at {self.path}")
        self.config = ExperimentConfig.from_text((self.path / "experiment.cfg").read_text())
        mf = self.path / "experiment.json"
        self.manifest = json.loads(mf.read_text()) if mf.exists() else {
            "experiment_id": self.path.name, "created_at": time.time(), "seed": self.config.seed, "stages": {},
        }

    @classmethod
    def create(cls, path: str | os.PathLike, config: ExperimentConfig | None = None, exist_ok: bool = True):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        cfg_path = path / "experiment.cfg"
        if cfg_path.exists() and config is not None and not exist_ok:
            raise PreconditionError(f"experiment {path} already exists")
        if not cfg_path.exists() or config is not None:
            if not cfg_path.exists():
                cfg_path.write_text((config or ExperimentConfig()).to_text())
        exp = cls(path)
        exp.save()
        return exp

    def save(self) -> None:
        tmp = self.path / "experiment.json.tmp"
        tmp.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.path / "experiment.json")

    def stage(self, name: str) -> dict:
        return self.manifest["stages"].get(name, {})

    def done(self, name: str) -> bool:
        return bool(self.stage(name).get("done"))

    def dir(self, name: str) -> Path:
        d = self.path / {"tts-pretrain": "tts", "tts-finetune": "tts", "report": "reports"}.get(name, name)
        d.mkdir(parents=True, exist_ok=True)
        return d

    # cached loaders
    def world_manifest(self):
        return read_manifest(self.path / "world" / "manifest.jsonl")

    def utterances(self, split: str | None = None):
        man = self.world_manifest()
        return man, load_utterances(man, split)


# ---- stages ------------------------------------------------------------------------

def _stage_world(exp: Experiment) -> dict:
    out = exp.dir("world")
    if (out / "frames").exists():
        shutil.rmtree(out / "frames")
    generate_world(exp.config.world, out)
    return {"artifacts": ["world/manifest.jsonl", "world/world.cfg"], "world_sha": world_fingerprint(out),
            "seed": exp.config.world.seed}


def world_fingerprint(world_dir: Path) -> str:
    h = hashlib.sha256()
    h.update((world_dir / "manifest.jsonl").read_bytes())
    for f in sorted((world_dir / "frames").iterdir()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _split_lists(man, utts):
    by = {"train": [], "dev": [], "test": []}
    for r, u in zip(man.records, utts):
        by[r["split"]].append(u)
    return by


def _stage_dae(exp: Experiment) -> dict:
    man, utts = exp.utterances()
    sp = _split_lists(man, utts)
    cfg = exp.config.dae_config()
    res = D.train_dae(sp["train"], sp["dev"], cfg)
    out = exp.dir("dae")
    D.save_checkpoint(out / "dae.pt", res.model, {"best_epoch": res.best_epoch, "best_dev_f1": res.best_dev_f1})
    emb = D.encode(res.model, utts)
    np.savez(out / "embeddings.npz", ids=np.array([u.id for u in utts]), **emb)
    (out / "history.json").write_text(json.dumps(res.history))
    return {"artifacts": ["dae/dae.pt", "dae/embeddings.npz"], "seed": cfg.seed,
            "best_dev_f1": res.best_dev_f1, "best_epoch": res.best_epoch}


def pretrain_world_config(exp: Experiment) -> WorldConfig:
    """Neutral-sentiment corpus with unrelated speakers, standing in for a read-speech pretraining set."""
    c = exp.config.sections["gen"]
    from dataclasses import replace
    return replace(exp.config.world, bias=0.0, n_subjects=int(c["pretrain_subjects"]),
                   seed=int(c["pretrain_seed"]) + exp.config.world.seed, severity_assignment=())


def _stage_tts_pretrain(exp: Experiment) -> dict:
    c = exp.config.sections["gen"]
    _, putts = generate_world(pretrain_world_config(exp))
    putts = putts[: int(c["pretrain_utterances"])]
    cfg = exp.config.gen_config()
    res = G.pretrain(putts, cfg)
    _check_finite(res.history, "tts-pretrain")
    G.save_checkpoint(exp.dir("tts-pretrain") / "pretrain.pt", res.model, "pretrain", {"history": res.history})
    return {"artifacts": ["tts/pretrain.pt"], "seed": cfg.seed, "final": res.history[-1]}


def _check_finite(history, stage):
    for h in history:
        for k in ("dur", "prior", "fm"):
            if not np.isfinite(h[k]) or (k != "prior" and h[k] < 0):
                raise G.NumericalFailure(f"{stage}: bad {k} loss {h[k]}")


def _embeddings(exp: Experiment) -> dict[str, np.ndarray]:
    z = np.load(exp.path / "dae" / "embeddings.npz")
    return {k: z[k] for k in z.files}


def _stage_tts_finetune(exp: Experiment) -> dict:
    man, utts = exp.utterances()
    emb = _embeddings(exp)
    idx = [i for i, r in enumerate(man.records) if r["split"] in ("train", "dev")]
    model, _ = G.load_checkpoint(exp.path / "tts" / "pretrain.pt")
    torch.manual_seed(stream_seed(exp.config.seed, "tts-finetune"))
    res = G.finetune(model, [utts[i] for i in idx], emb["d_norm"][idx],
                     epochs=int(exp.config.sections["gen"]["finetune_epochs"]),
                     speakers=G.speaker_signatures(utts))
    _check_finite(res.history, "tts-finetune")
    G.save_checkpoint(exp.dir("tts-finetune") / "finetune.pt", res.model, "finetune", {"history": res.history})
    return {"artifacts": ["tts/finetune.pt"], "final": res.history[-1]}


def _stage_proto(exp: Experiment) -> dict:
    man = exp.world_manifest()
    emb = _embeddings(exp)
    splits = set(str(exp.config.sections["proto"]["splits"]).split(","))
    per: dict[str, list] = {}
    level: dict[str, int] = {}
    for i, r in enumerate(man.records):
        if r["split"] in splits:
            per.setdefault(r["subject"], []).append(emb["d"][i])
            level[r["subject"]] = int(r["severity_level"])
    subs = sorted(per)
    bank = S.build_prototypes([S.subject_embedding(per[s]) for s in subs], [level[s] for s in subs])
    bank.save(exp.dir("proto") / "bank.json")
    return {"artifacts": ["proto/bank.json"], "counts": bank.counts}


def _stage_cdoa(exp: Experiment) -> dict:
    c = exp.config.sections["cdoa"]
    man = exp.world_manifest()
    bank = C.build_text_banks(man)
    plan = C.plan_quotas(man, str(c["strategy"]), base=int(c["base"]))
    gen, _ = G.load_checkpoint(exp.path / "tts" / "finetune.pt")
    proto = S.PrototypeBank.load(exp.path / "proto" / "bank.json")
    out = exp.dir("cdoa")
    if (out / "frames").exists():
        shutil.rmtree(out / "frames")
    seed = stream_seed(exp.config.seed + int(c["seed"]), "cdoa")
    res = C.generate_cdoa(man, bank, plan, gen, proto, seed=seed, out_dir=out)
    (out / "plan.json").write_text(json.dumps(plan.to_dict(), indent=1, sort_keys=True))
    return {"artifacts": ["cdoa/manifest.jsonl", "cdoa/plan.json"], "seed": seed, "n_synthetic": len(res.records),
            "flags": bank.flags + res.flags, "class_totals": plan.class_totals()}


def _cdoa_utterances(exp: Experiment):
    aug = read_manifest(exp.path / "cdoa" / "manifest.jsonl")
    return load_utterances(aug, records=[r for r in aug.records if r.get("synthetic")])


def detector_settings(exp: Experiment) -> list[R.DetectorConfig]:
    c = exp.config.sections["detector"]
    return [R.DetectorConfig(architecture=str(c["architecture"]), augmentation=a.strip(), epochs=int(c["epochs"]),
                             frame_dim=exp.config.world.frame_dim)
            for a in str(c["augmentations"]).split(",") if a.strip()]


def _stage_detector(exp: Experiment) -> dict:
    c = exp.config.sections["detector"]
    man, utts = exp.utterances()
    sp = _split_lists(man, utts)
    base = stream_seed(exp.config.seed + int(c["base_seed"]), "detector") % 100000
    table = R.compare_augmentations(sp["train"], sp["dev"], sp["test"], detector_settings(exp),
                                    n_seeds=int(c["n_seeds"]), augment=_cdoa_utterances(exp), base_seed=base)
    (exp.dir("detector") / "table.json").write_text(json.dumps(table, indent=1, sort_keys=True))
    return {"artifacts": ["detector/table.json"], "base_seed": base}


# ---- reports --------------------------------------------------------------------------

def controllability_sweep(exp: Experiment) -> dict:
    """Re-synthesise base test utterances at the five level centres and re-encode them."""
    man, utts = exp.utterances("test")
    n = int(exp.config.sections["report"]["sweep_base"])
    rng = np.random.default_rng(stream_seed(exp.config.seed + int(exp.config.sections["report"]["seed"]), "sweep"))
    base = [utts[i] for i in sorted(rng.choice(len(utts), size=min(n, len(utts)), replace=False))]
    gen, _ = G.load_checkpoint(exp.path / "tts" / "finetune.pt")
    proto = S.PrototypeBank.load(exp.path / "proto" / "bank.json")
    conds = [S.severity_condition(c, proto) for c in BIN_CENTERS]
    toks, spks, cds, seeds, levels, group = [], [], [], [], [], []
    for i, u in enumerate(base):
        for k in range(5):
            toks.append(u.content)
            spks.append(u.speaker_id)
            cds.append(conds[k])
            seeds.append(stream_seed(i, "sweep-noise"))
            levels.append(k)
            group.append(i)
    frames = []
    for b in range(0, len(toks), 125):
        frames += G.sample_batch(gen, toks[b:b + 125], spks[b:b + 125], cds[b:b + 125], seeds[b:b + 125])
    model, _ = D.load_checkpoint(exp.path / "dae" / "dae.pt")
    fake = [u.__class__(f"sweep{j}", "sweep", 0, (), (), f, 0.0, 0, "neutral", {}) for j, f in enumerate(frames)]
    emb = D.encode(model, fake)
    markers = np.array([[extract_markers(f)[m] for m in MARKERS] for f in frames])
    return {"d_norm": emb["d_norm"], "levels": np.array(levels), "group": np.array(group), "markers": markers,
            "base_ids": np.array([u.id for u in base])}


def compute_reports(exp: Experiment) -> dict[str, dict]:
    """All report metrics from stored artifacts; pure given the artifacts."""
    man = exp.world_manifest()
    records = man.records
    out: dict[str, dict] = {}

    # bias
    table = M.pearson_residuals(M.sentiment_table(records))
    neg = {c: float(np.mean([r["sentiment"] == "negative" for r in records if r["label"] == c])) for c in (0, 1)}
    train = [r for r in records if r["split"] == "train"]
    bank = C.build_text_banks(man)
    share = C.bank_share_by_class(bank, train)
    out["bias"] = {
        "observed": table.observed.tolist(), "expected": table.expected.tolist(),
        "residuals": table.residuals.tolist(), "chi2": table.chi2, "df": table.df, "p_value": table.p_value,
        "negative_rate_healthy": neg[0], "negative_rate_depressed": neg[1],
        "depressive_bank_share_healthy": share[0], "depressive_bank_share_depressed": share[1],
        "sentiments": ["positive", "neutral", "negative"], "rows": ["healthy", "depressed"],
    }

    # disentanglement
    emb = _embeddings(exp)
    split = np.array([r["split"] for r in records])
    labels = np.array([r["label"] for r in records])
    speakers = np.array([r["speaker_id"] for r in records])
    tr, te = split == "train", split == "test"
    probe = M.linear_probe(emb["d"][tr], labels[tr], emb["d"][te], labels[te], mode="classification",
                           seed=stream_seed(exp.config.seed, "probe"))
    dn = emb["d_norm"][te]
    same, diff = M.pair_scores(dn, speakers[te])
    eer, thr = M.eer(same, diff)
    onehot = (speakers[te][:, None] == np.unique(speakers[te])[None, :]).astype(float)
    sev = D.severity_readout(emb["ordinal"])
    subj = {}
    for i in np.flatnonzero(split == "dev"):
        subj.setdefault(records[i]["subject"], []).append(i)
    sub_scores = [float(np.mean(sev[ix])) for ix in subj.values()]
    sub_levels = [records[ix[0]]["severity_level"] for ix in subj.values()]
    out["disentangle"] = {
        "severity_probe_roc_auc": probe["roc_auc"], "severity_probe_macro_f1": probe["macro_f1"],
        "speaker_eer": eer, "speaker_eer_threshold": thr,
        "speaker_cka": M.cka(dn, onehot),
        "speaker_probe_accuracy": D.speaker_probe_accuracy(dn, speakers[te], seed=stream_seed(exp.config.seed, "spk")),
        "dev_subject_c_index": M.c_index(sub_scores, sub_levels),
        "published_reference": {"roc_auc": 0.693, "eer": 0.355, "cka": 0.014},
    }

    # controllability
    sw = np.load(exp.path / "reports" / "sweep.npz")
    coord = M.pca_severity_coordinate(sw["d_norm"], sw["levels"])
    groups = []
    for g in np.unique(sw["group"]):
        ix = np.flatnonzero(sw["group"] == g)
        groups.append([(int(sw["levels"][i]), dict(zip(MARKERS, map(float, sw["markers"][i])))) for i in ix])
    mc = M.intra_speaker_marker_correlation(groups)
    out["controllability"] = {
        "pca_c_index": coord.c_index, "pca_spearman": coord.spearman,
        "explained_variance": coord.explained_variance,
        "marker_median_rho": mc.median, "marker_mean_rho": mc.mean, "marker_undefined": mc.undefined,
        "n_base": int(len(sw["base_ids"])),
        "published_reference": {"c_index": 0.744, "spearman": 0.598},
    }

    # augmentation
    tab = json.loads((exp.path / "detector" / "table.json").read_text())
    rows = {}
    for name, entry in tab.items():
        if name.startswith("_"):
            continue
        rows[name] = R.summarize(entry["runs"])
    first = tab[next(iter(rows))]
    out["augmentation"] = {"settings": rows, "seeds": [r["seed"] for r in first["runs"]],
                           "footnote": tab.get("_reference", {})}
    none_key = next((k for k in rows if k.endswith("/none")), None)
    cdoa_key = next((k for k in rows if k.endswith("/cdoa")), None)
    if none_key and cdoa_key:
        out["augmentation"]["cdoa_minus_none_macro_f1"] = (rows[cdoa_key]["macro_f1"]["mean"]
                                                          - rows[none_key]["macro_f1"]["mean"])
        out["augmentation"]["gap_none"] = rows[none_key]["gap"]["mean"]
        out["augmentation"]["gap_cdoa"] = rows[cdoa_key]["gap"]["mean"]
    return out


def _flatten(prefix: str, obj, rows: list):
    if isinstance(obj, dict):
        for k in sorted(obj):
            _flatten(f"{prefix}.{k}" if prefix else str(k), obj[k], rows)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _flatten(f"{prefix}[{i}]", v, rows)
    else:
        rows.append((prefix, obj))


def _provenance(exp: Experiment) -> dict:
    return {
        "experiment_id": exp.manifest["experiment_id"],
        "seeds": {"experiment": exp.config.seed, "world": exp.config.world.seed,
                  **{s: exp.stage(s).get("seed") for s in STAGES if exp.stage(s).get("seed") is not None}},
        "digests": {s: exp.stage(s).get("digest") for s in STAGES if exp.stage(s).get("digest")},
    }


def _stage_report(exp: Experiment) -> dict:
    out = exp.dir("report")
    sw = controllability_sweep(exp)
    np.savez(out / "sweep.npz", **sw)
    reports = compute_reports(exp)
    prov = _provenance(exp)
    prov["digests"]["report"] = exp.config.section_digest("report")
    arts = ["reports/sweep.npz"]
    for kind in REPORT_KINDS:
        body = {"kind": kind, **prov, "metrics": reports[kind]}
        (out / f"{kind}.json").write_text(json.dumps(body, indent=1, sort_keys=True, default=float))
        rows: list = []
        _flatten("", reports[kind], rows)
        with open(out / f"{kind}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, v in [("experiment_id", prov["experiment_id"])] + \
                        [(f"seed.{k}", v) for k, v in sorted(prov["seeds"].items())] + \
                        [(f"digest.{k}", v) for k, v in sorted(prov["digests"].items())] + rows:
                w.writerow([k, repr(v) if isinstance(v, float) else v])
        arts += [f"reports/{kind}.json", f"reports/{kind}.csv"]
    return {"artifacts": arts, "seed": stream_seed(exp.config.seed, "sweep")}


RUNNERS = {
    "world": _stage_world, "dae": _stage_dae, "tts-pretrain": _stage_tts_pretrain,
    "tts-finetune": _stage_tts_finetune, "proto": _stage_proto, "cdoa": _stage_cdoa,
    "detector": _stage_detector, "report": _stage_report,
}


def run_stage(name: str, exp: Experiment, force: bool = False) -> dict:
    """Run one stage. Completed stages with unchanged configuration are skipped unless forced."""
    if name not in RUNNERS:
        raise PreconditionError(f"unknown stage {name!r}; expected one of {', '.join(STAGES)}")
    missing = [p for p in PREREQUISITES[name] if not exp.done(p)]
    if missing:
        raise PreconditionError(f"stage {name!r} requires {', '.join(missing)} to be completed first")
    for p in PREREQUISITES[name]:
        if exp.stage(p).get("digest") != exp.config.section_digest(p):
            raise PreconditionError(f"configuration of prerequisite {p!r} changed after it was built; re-run it")
    digest = exp.config.section_digest(name)
    st = exp.stage(name)
    if st.get("done") and not force:
        if st.get("digest") != digest:
            raise PreconditionError(f"configuration of {name!r} changed after it was built; use --force")
        log.info("stage %s already complete", name)
        return {**st, "skipped": True}
    torch.set_num_threads(1)
    t0 = time.time()
    info = RUNNERS[name](exp)
    entry = {"done": True, "digest": digest, "started_at": t0, "completed_at": time.time(),
             "seconds": time.time() - t0, **info}
    exp.manifest["stages"][name] = entry
    # downstream results are stale once an upstream stage is rebuilt
    for s in STAGES:
        if name in _ancestors(s):
            exp.manifest["stages"].get(s, {})["done"] = False
    exp.save()
    return entry


def _ancestors(stage: str) -> set[str]:
    out, todo = set(), list(PREREQUISITES[stage])
    while todo:
        p = todo.pop()
        if p not in out:
            out.add(p)
            todo.extend(PREREQUISITES[p])
    return out


def run_all(exp: Experiment, until: str = "report", force: bool = False) -> list[dict]:
    order = STAGES[: STAGES.index(until) + 1]
    return [run_stage(s, exp, force=force) for s in order]


# ---- reproduction ---------------------------------------------------------------------

def _compare(a, b, tol: float, path: str = "") -> list[str]:
    if isinstance(a, dict) and isinstance(b, dict):
        if set(a) != set(b):
            return [f"{path}: keys differ"]
        return [m for k in a for m in _compare(a[k], b[k], tol, f"{path}.{k}")]
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        if len(a) != len(b):
            return [f"{path}: length differs"]
        return [m for i, (x, y) in enumerate(zip(a, b)) for m in _compare(x, y, tol, f"{path}[{i}]")]
    if isinstance(a, (int, float)) and isinstance(b, (int, float)) and not isinstance(a, bool):
        if np.isnan(a) and np.isnan(b):
            return []
        return [] if abs(a - b) <= tol else [f"{path}: {a} vs {b}"]
    return [] if a == b else [f"{path}: {a!r} vs {b!r}"]


def reproduce(exp: Experiment, tol: float = 1e-9) -> dict:
    """Verify configuration digests, bit-exact world regeneration and report recomputation."""
    result: dict[str, dict] = {}
    for s in STAGES:
        st = exp.stage(s)
        if not st.get("done"):
            raise PreconditionError(f"stage {s!r} has not completed")
        for a in st.get("artifacts", []):
            if not (exp.path / a).exists():
                raise PreconditionError(f"missing artifact {a}")
        ok = st["digest"] == exp.config.section_digest(s)
        result[s] = {"digest": "ok" if ok else "mismatch"}

    with tempfile.TemporaryDirectory() as tmp:
        generate_world(exp.config.world, Path(tmp))
        fresh = world_fingerprint(Path(tmp))
    result["world"]["bit_exact"] = fresh == exp.stage("world")["world_sha"] == world_fingerprint(exp.path / "world")

    recomputed = json.loads(json.dumps(compute_reports(exp), default=float))
    for kind in REPORT_KINDS:
        stored = json.loads((exp.path / "reports" / f"{kind}.json").read_text())["metrics"]
        diffs = _compare(stored, recomputed[kind], tol)
        result.setdefault("report", {})[kind] = "ok" if not diffs else diffs[:5]
    verified = all(v.get("digest") == "ok" for v in result.values()) and result["world"]["bit_exact"] and \
        all(result["report"][k] == "ok" for k in REPORT_KINDS)
    return {"experiment_id": exp.manifest["experiment_id"], "verified": verified, "stages": result,
            "tolerance": tol}
