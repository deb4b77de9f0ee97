"""Command-line entry point: ``depflow <group> <command> [flags]``.

Exit codes: 0 success, 2 precondition failure, 3 numerical failure.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import cdoa as C
from . import dae as D
from . import detector as R
from . import gen as G
from . import pipeline as P
from . import severity as S
from .world import WorldConfig, generate_world, load_utterances, parse_kv_text, read_manifest

EXIT_PRECONDITION = 2
EXIT_NUMERICAL = 3


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _guard(fn):
    """Map domain errors onto exit codes."""
    import functools

    @functools.wraps(fn)
    def wrapper(*a, **kw):
        try:
            return fn(*a, **kw)
        except (D.NumericalFailure, G.NumericalFailure, R.NumericalFailure) as exc:
            _fail(EXIT_NUMERICAL, str(exc))
        except (P.PreconditionError, FileNotFoundError, ValueError) as exc:
            _fail(EXIT_PRECONDITION, str(exc))
    return wrapper


def _split(manifest, name):
    return load_utterances(manifest, records=manifest.split(name))


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Severity-controllable synthesis and camouflage augmentation on a synthetic corpus."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


# ---- world ---------------------------------------------------------------------

@main.group()
def world():
    """Synthetic corpus."""


@world.command("gen")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int)
@_guard
def world_gen(config_path, out, seed):
    kv = parse_kv_text(Path(config_path).read_text()) if config_path else {}
    if seed is not None:
        kv["seed"] = str(seed)
    cfg = WorldConfig.from_mapping(kv)
    man, _ = generate_world(cfg, out)
    click.echo(json.dumps({"records": len(man.records), "config_digest": man.config_digest, "out": out}))


# ---- dae -------------------------------------------------------------------------

@main.group()
def dae():
    """Depression acoustic encoder."""


@dae.command("train")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--epochs", type=int, default=20)
@click.option("--lr", type=float, default=1e-3)
@click.option("--no-adversarial", is_flag=True, help="ablation: lambda_spk = lambda_con = 0")
@click.option("--seed", type=int, default=0)
@_guard
def dae_train(manifest, out, epochs, lr, no_adversarial, seed):
    man = read_manifest(manifest)
    train, dev = _split(man, "train"), _split(man, "dev")
    kw = dict(n_speakers=len({r["speaker_id"] for r in man.records}), max_epochs=epochs, lr=lr, patience=100, seed=seed)
    if no_adversarial:
        kw.update(lambda_spk=0.0, lambda_con=0.0)
    res = D.train_dae(train, dev, D.DAEConfig(**kw))
    D.save_checkpoint(out, res.model, {"best_epoch": res.best_epoch, "best_dev_f1": res.best_dev_f1})
    click.echo(json.dumps({"best_epoch": res.best_epoch, "best_dev_f1": res.best_dev_f1}))


@dae.command("encode")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@_guard
def dae_encode(ckpt, manifest, out):
    model, _ = D.load_checkpoint(ckpt)
    man = read_manifest(manifest)
    utts = load_utterances(man)
    emb = D.encode(model, utts)
    if str(out).endswith(".jsonl"):
        with open(out, "w") as f:
            for i, u in enumerate(utts):
                row = {"id": u.id, "subject": u.subject_id} | {k: v[i].tolist() for k, v in emb.items()}
                f.write(json.dumps(row) + "\n")
    else:
        np.savez(out, ids=np.array([u.id for u in utts]), **emb)
    click.echo(json.dumps({"n": len(utts), "out": out}))


@dae.command("probe")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=0)
@_guard
def dae_probe(ckpt, manifest, seed):
    from . import metrics as M

    model, _ = D.load_checkpoint(ckpt)
    man = read_manifest(manifest)
    tr, te = _split(man, "train"), _split(man, "test")
    etr, ete = D.encode(model, tr), D.encode(model, te)
    probe = M.linear_probe(etr["d"], [u.label for u in tr], ete["d"], [u.label for u in te],
                           mode="classification", seed=seed)
    same, diff = M.pair_scores(ete["d_norm"], [u.speaker_id for u in te])
    eer, _ = M.eer(same, diff)
    click.echo(json.dumps({
        "severity_roc_auc": probe["roc_auc"], "severity_macro_f1": probe["macro_f1"], "speaker_eer": eer,
        "speaker_probe_accuracy": D.speaker_probe_accuracy(ete["d_norm"], [u.speaker_id for u in te], seed),
    }))


# ---- tts -------------------------------------------------------------------------

@main.group()
def tts():
    """Flow-matching generator."""


@tts.command("pretrain")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--epochs", type=int, default=10)
@click.option("--seed", type=int, default=0)
@_guard
def tts_pretrain(manifest, out, epochs, seed):
    utts = load_utterances(read_manifest(manifest))
    res = G.pretrain(utts, G.GenConfig(epochs=epochs, seed=seed, frame_dim=utts[0].frames.shape[1]))
    G.save_checkpoint(out, res.model, "pretrain", {"history": res.history})
    click.echo(json.dumps(res.history[-1]))


@tts.command("finetune")
@click.option("--ckpt", required=True, type=click.Path(exists=True), help="stage-2 checkpoint")
@click.option("--dae", "dae_ckpt", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--epochs", type=int, default=10)
@_guard
def tts_finetune(ckpt, dae_ckpt, manifest, out, epochs):
    model, meta = G.load_checkpoint(ckpt)
    if meta["stage"] != "pretrain":
        raise P.PreconditionError("finetuning starts from a stage-2 (pretrain) checkpoint")
    enc, _ = D.load_checkpoint(dae_ckpt)
    man = read_manifest(manifest)
    all_utts = load_utterances(man)
    utts = [u for u, r in zip(all_utts, man.records) if r["split"] in ("train", "dev")]
    res = G.finetune(model, utts, D.encode(enc, utts)["d_norm"], epochs=epochs,
                     speakers=G.speaker_signatures(all_utts))
    G.save_checkpoint(out, res.model, "finetune", {"history": res.history})
    click.echo(json.dumps(res.history[-1]))


@tts.command("sample")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--tokens", required=True, help="comma-separated token ids")
@click.option("--speaker", required=True, type=int)
@click.option("--severity", type=float, help="PHQ-style score in [0, 24]")
@click.option("--proto", type=click.Path(exists=True), help="prototype bank for --severity")
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path())
@_guard
def tts_sample(ckpt, tokens, speaker, severity, proto, seed, out):
    from .world import write_frames

    model, _ = G.load_checkpoint(ckpt)
    c_dep = None
    if severity is not None:
        if proto is None:
            raise P.PreconditionError("--severity needs --proto")
        c_dep = S.severity_condition(severity, S.PrototypeBank.load(proto))
    frames = G.sample(model, [int(t) for t in tokens.split(",")], speaker, c_dep, seed=seed)
    write_frames(Path(out), frames)
    click.echo(json.dumps({"frames": int(frames.shape[0]), "out": out}))


# ---- proto / cdoa ----------------------------------------------------------------

@main.group()
def proto():
    """Severity prototype bank."""


@proto.command("build")
@click.option("--dae", "dae_ckpt", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@_guard
def proto_build(dae_ckpt, manifest, out):
    model, _ = D.load_checkpoint(dae_ckpt)
    man = read_manifest(manifest)
    recs = [r for r in man.records if r["split"] in ("train", "dev")]
    emb = D.encode(model, load_utterances(man, records=recs))["d"]
    per, level = {}, {}
    for r, e in zip(recs, emb):
        per.setdefault(r["subject"], []).append(e)
        level[r["subject"]] = r["severity_level"]
    subs = sorted(per)
    bank = S.build_prototypes([S.subject_embedding(per[s]) for s in subs], [level[s] for s in subs])
    bank.save(out)
    click.echo(json.dumps({"counts": bank.counts, "out": out}))


@main.group()
def cdoa():
    """Camouflage augmentation corpus."""


@cdoa.command("build")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--tts-ckpt", required=True, type=click.Path(exists=True))
@click.option("--proto", "proto_path", required=True, type=click.Path(exists=True))
@click.option("--strategy", type=click.Choice(["coverage", "minimal"]), default="coverage")
@click.option("--base", type=int, default=15)
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_guard
def cdoa_build(manifest, tts_ckpt, proto_path, strategy, base, seed, out):
    man = read_manifest(manifest)
    bank = C.build_text_banks(man)
    plan = C.plan_quotas(man, strategy, base=base)
    model, _ = G.load_checkpoint(tts_ckpt)
    res = C.generate_cdoa(man, bank, plan, model, S.PrototypeBank.load(proto_path), seed=seed, out_dir=out)
    (Path(out) / "plan.json").write_text(json.dumps(plan.to_dict(), indent=1, sort_keys=True))
    click.echo(json.dumps({"n_synthetic": len(res.records), "class_totals": plan.class_totals(),
                           "flags": bank.flags + res.flags}))


# ---- detector --------------------------------------------------------------------

@main.group()
def detector():
    """Downstream depression detectors."""


def _det_data(manifest, augment):
    man = read_manifest(manifest)
    syn = None
    if augment:
        aug = read_manifest(augment)
        syn = load_utterances(aug, records=[r for r in aug.records if r.get("synthetic")])
    return man, _split(man, "train"), _split(man, "dev"), _split(man, "test"), syn


@detector.command("train")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--augment", type=click.Path(exists=True), help="augmented manifest for --augmentation cdoa")
@click.option("--architecture", type=click.Choice(R.ARCHITECTURES), default="conv_recurrent")
@click.option("--augmentation", type=click.Choice(R.AUGMENTATIONS), default="none")
@click.option("--epochs", type=int, default=8)
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path())
@_guard
def detector_train(manifest, augment, architecture, augmentation, epochs, seed, out):
    _, train, dev, _, syn = _det_data(manifest, augment)
    cfg = R.DetectorConfig(architecture=architecture, augmentation=augmentation, epochs=epochs, seed=seed,
                           frame_dim=train[0].frames.shape[1])
    run = R.train_detector(train, cfg, syn)
    R.save_checkpoint(out, run)
    click.echo(json.dumps({"final_loss": run.history[-1]["loss"], **R.shortcut_gap(run.model, dev)}))


@detector.command("eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--split", type=click.Choice(["dev", "test"]), default="test")
@_guard
def detector_eval(ckpt, manifest, split):
    run = R.load_checkpoint(ckpt)
    man = read_manifest(manifest)
    ev = R.evaluate_subjects(run.model, _split(man, split), run.config.n_eval_utterances)
    click.echo(json.dumps({"metrics": ev.metrics, "predictions": dict(zip(ev.subjects, ev.y_pred)),
                           "short_subjects": ev.short_subjects}, default=float))


def _detector_config(kv: dict[str, str]) -> R.DetectorConfig:
    from dataclasses import fields

    types = {f.name: type(f.default) for f in fields(R.DetectorConfig)}
    unknown = set(kv) - set(types)
    if unknown:
        raise P.PreconditionError(f"unknown detector config keys {sorted(unknown)}")
    return R.DetectorConfig(**{k: types[k](v) for k, v in kv.items()})


@detector.command("compare")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--augment", type=click.Path(exists=True))
@click.option("--configs", type=click.Path(exists=True, file_okay=False),
              help="directory of flat key=value detector configs")
@click.option("--settings", default="none,cdoa", help="augmentations to compare when --configs is absent")
@click.option("--seeds", type=int, default=5)
@click.option("--epochs", type=int, default=8)
@click.option("--out", required=True, type=click.Path())
@_guard
def detector_compare(manifest, augment, configs, settings, seeds, epochs, out):
    _, train, dev, test, syn = _det_data(manifest, augment)
    if configs:
        cfgs = [_detector_config(parse_kv_text(p.read_text())) for p in sorted(Path(configs).glob("*.cfg"))]
    else:
        cfgs = [R.DetectorConfig(augmentation=a, epochs=epochs, frame_dim=train[0].frames.shape[1])
                for a in settings.split(",")]
    table = R.compare_augmentations(train, dev, test, cfgs, n_seeds=seeds, augment=syn)
    Path(out).write_text(json.dumps(table, indent=1, sort_keys=True))
    click.echo(json.dumps({k: v["summary"]["macro_f1"] for k, v in table.items() if not k.startswith("_")}))


# ---- pipeline --------------------------------------------------------------------

def _experiment(exp_id: str, root: str | None, config: str | None = None) -> P.Experiment:
    path = P.experiment_root(root) / exp_id
    if config:
        path.mkdir(parents=True, exist_ok=True)
        target = path / "experiment.cfg"
        text = Path(config).read_text()
        P.ExperimentConfig.from_text(text)  # validate before writing
        if not target.exists() or target.read_text() != text:
            target.write_text(text)  # stages built under the old text now need --force
        return P.Experiment.create(path)
    if not (path / "experiment.cfg").exists():
        return P.Experiment.create(path, P.ExperimentConfig())
    return P.Experiment(path)


@main.command("run")
@click.argument("stage", type=click.Choice(P.STAGES + ("all",)))
@click.option("--exp", "exp_id", default="default", help="experiment id (directory under the root)")
@click.option("--root", envvar=P.ENV_ROOT, help=f"experiment root (env {P.ENV_ROOT})")
@click.option("--config", type=click.Path(exists=True, dir_okay=False))
@click.option("--force", is_flag=True, help="re-run even if complete")
@_guard
def run(stage, exp_id, root, config, force):
    """Run one pipeline stage (or all of them) inside an experiment directory."""
    exp = _experiment(exp_id, root, config)
    entries = P.run_all(exp, force=force) if stage == "all" else [P.run_stage(stage, exp, force=force)]
    for name, e in zip(P.STAGES if stage == "all" else (stage,), entries):
        click.echo(f"{name}: {'skipped (complete)' if e.get('skipped') else 'done'}")


@main.command("report")
@click.option("--exp", "exp_id", default="default")
@click.option("--root", envvar=P.ENV_ROOT)
@click.option("--force", is_flag=True)
@click.option("--kind", "kinds", multiple=True, type=click.Choice(P.REPORT_KINDS),
              help="print these reports (repeatable); all four are always written")
@_guard
def report(exp_id, root, force, kinds):
    """Build the bias / disentangle / controllability / augmentation reports."""
    exp = _experiment(exp_id, root)
    P.run_stage("report", exp, force=force)
    for kind in kinds:
        body = json.loads((exp.path / "reports" / f"{kind}.json").read_text())
        click.echo(json.dumps({kind: body["metrics"]}, indent=1, default=str))
    if not kinds:
        click.echo(str(exp.path / "reports"))


@main.command("reproduce")
@click.option("--exp", "exp_id", default="default")
@click.option("--root", envvar=P.ENV_ROOT)
@_guard
def reproduce(exp_id, root):
    """Verify a completed experiment: digests, world bytes, report metrics."""
    exp = P.Experiment(P.experiment_root(root) / exp_id)
    res = P.reproduce(exp)
    click.echo(json.dumps(res, indent=1, default=str))
    if not res["verified"]:
        sys.exit(1)


if __name__ == "__main__":
    main()
