"""Command-line entry points: synth, label, train, fit-probe, run, eval, ablate.

Exit codes: 0 success, 2 validation error (bad config, missing files, stage
order), 3 runtime or numeric failure.  Every output directory gets a
``meta.json`` carrying the config hash and seed; files are written to a
temporary name first and renamed into place.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .actions import derive_actions, derive_word_level_classes, read_events
from .config import ConfigError, PipelineConfig, load_config
from .evaluation import (VapConfig, anticipation_csv, anticipation_report, eval_agent_actions, eval_vap_protocol,
                         eval_word_level, report_json, rows_to_csv)
from .fusion import HeuristicRules, LRProbe, anchor_features, decision_frame, default_rules, lr_fit, word_scores
from .labels import derive_all, read_label_csv, write_label_csv
from .model.features import featurize
from .model.network import SequenceModel
from .model.train import (StageOrderError, TrainingDiverged, VARIANTS, finetune_stage2, load_checkpoint, prepare,
                          pretrain_stage1, save_checkpoint, train_variant)
from .stream import anticipation_trace, run_session, write_decision_log
from .synth import generate_corpus, read_corpus, write_corpus
from .timeline import CHANNELS

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


# -- helpers ---------------------------------------------------------------------------

def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _publish_dir(tmp: Path, final: Path) -> None:
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)


def _staging_dir(final: Path) -> Path:
    final.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(dir=final.parent, prefix=final.name + ".tmp-"))


def _meta(cfg: PipelineConfig, command: str, **extra) -> str:
    return json.dumps({"command": command, **cfg.stamp(), "config": cfg.to_dict(), **extra}, indent=2, sort_keys=True)


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _split(sessions, cfg: PipelineConfig):
    n_val = max(1, int(round(len(sessions) * cfg.corpus.val_fraction)))
    if len(sessions) <= n_val:
        raise ConfigError("corpus too small to split into train and validation sessions")
    return sessions[:-n_val], sessions[-n_val:]


def load_policy(path, cfg: PipelineConfig):
    path = path or cfg.fusion.rules_path
    if not path:
        return default_rules()
    obj = json.loads(_need(path, "policy file").read_text())
    text = json.dumps(obj)
    return LRProbe.from_json(text) if "weights" in obj else HeuristicRules.from_json(text)


# -- commands ------------------------------------------------------------------------------

def cmd_synth(args, cfg: PipelineConfig) -> int:
    n = args.n if args.n is not None else cfg.corpus.n_sessions
    sessions = generate_corpus(cfg.generator, n)
    final = Path(args.out)
    tmp = _staging_dir(final)
    write_corpus(tmp, sessions, cfg.generator, {**cfg.stamp(), "config": cfg.to_dict()})
    _publish_dir(tmp, final)
    print(f"wrote {n} sessions to {final}")
    return EXIT_OK


def _label_one(job):
    tl, cfg = job
    labels = derive_all(tl, cfg.labels)
    events = [e for ag in CHANNELS for e in derive_actions(tl, ag, cfg.actions)]
    return tl.session_id, labels.matrix(), events


def cmd_label(args, cfg: PipelineConfig) -> int:
    _, sessions = read_corpus(_need(args.corpus, "corpus"))
    final = Path(args.out or Path(args.corpus) / "labels")
    tmp = _staging_dir(final)
    results = _map(_label_one, [(s.timeline, cfg) for s in sessions], args.jobs)
    rows = []
    for (sid, mat, events), s in zip(results, sessions):
        write_label_csv(tmp / f"{sid}.csv", mat)
        rows += [[sid, e.frame, e.kind, e.agent_channel] for e in events]
    with open(tmp / "actions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["session_id", "frame", "kind", "agent_channel"])
        w.writerows(rows)
    with open(tmp / "word_classes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["session_id", "channel", "frame", "class"])
        for s in sessions:
            for (ch, f), c in zip(s.words, derive_word_level_classes(s.timeline, s.words, cfg.actions)):
                w.writerow([s.timeline.session_id, ch, f, c])
    (tmp / "meta.json").write_text(_meta(cfg, "label", corpus=str(args.corpus)))
    _publish_dir(tmp, final)
    print(f"labelled {len(sessions)} sessions into {final}")
    return EXIT_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    _, sessions = read_corpus(_need(args.corpus, "corpus"))
    data = prepare([s.timeline for s in sessions], cfg.features, cfg.labels)
    train, val = _split(data, cfg)
    spec = VARIANTS[args.variant]
    mcfg = replace(cfg.model, hidden=spec["hidden"]) if "hidden" in spec else cfg.model
    tcfg = replace(cfg.train, aux_generative_weight=spec.get("aux_generative_weight", cfg.train.aux_generative_weight),
                   stage2_freeze_backbone=spec.get("stage2_freeze_backbone", cfg.train.stage2_freeze_backbone))
    curves = []
    if args.stage == "1":
        if not spec["pretrain"]:
            raise StageOrderError(f"variant {args.variant} does not pretrain")
        res = pretrain_stage1(SequenceModel(mcfg), train, val, tcfg)
        model, curves = res.model, [res]
    elif args.stage == "2":
        if args.init:
            start, _ = load_checkpoint(_need(args.init, "stage-1 checkpoint"))
        elif spec["pretrain"]:
            raise StageOrderError("stage 2 of a pretraining variant needs --init <stage-1 checkpoint>")
        else:
            start = SequenceModel(mcfg)
        res = finetune_stage2(start, train, val, tcfg, allow_no_pretrain=not spec["pretrain"])
        model, curves = res.model, [res]
    else:
        s1, s2 = train_variant(args.variant, train, val, cfg.train, cfg.model)
        model, curves = s2.model, [r for r in (s1, s2) if r is not None]
    out = Path(args.out)
    save_checkpoint(out, model, tcfg, cfg.features, {**cfg.stamp(), "variant": args.variant,
                                                    "best_epochs": [r.best_epoch for r in curves]})
    atomic_write(out.with_suffix(".log.csv"), "".join(
        f"# stage {r.stage}\n" + r.log_csv() for r in curves))
    print(f"saved {model.stage} checkpoint to {out}")
    return EXIT_OK


def _load_model(args):
    if getattr(args, "oracle", False):
        return None
    if not args.checkpoint:
        raise ConfigError("give --checkpoint or --oracle")
    model, _ = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    return model


def _estimates(model, tl, cfg):
    if model is None:
        return derive_all(tl, cfg.labels).matrix()
    return model.run(featurize(tl, cfg.features))[0]


def cmd_fit_probe(args, cfg: PipelineConfig) -> int:
    model = _load_model(args)
    _, sessions = read_corpus(_need(args.corpus, "validation corpus"))
    X, y = [], []
    for s in sessions:
        est = _estimates(model, s.timeline, cfg)
        for ag in CHANNELS:
            evs = derive_actions(s.timeline, ag, cfg.actions)
            X.append(anchor_features(est, [decision_frame(e, len(s.timeline)) for e in evs], ag))
            y += [e.kind for e in evs]
    probe = lr_fit(np.concatenate(X), y, cfg.fusion.lr_l2, class_weight=cfg.fusion.lr_class_weight,
                   max_iter=cfg.fusion.lr_max_iter)
    obj = json.loads(probe.to_json())
    obj.update(cfg.stamp())
    atomic_write(args.out, json.dumps(obj, indent=2))
    print(f"fitted probe on {len(y)} anchors -> {args.out}")
    return EXIT_OK


def _run_one(job):
    tl, model, policy, agents, cfg = job
    source = derive_all(tl, cfg.labels).matrix() if model is None else model
    logs, timings, est = {}, {}, None
    for ag in agents:
        decisions, timing, est = run_session(source, policy, tl, ag, cfg.stream, cfg.features)
        logs[ag] = decisions
        timings[ag] = timing
    return tl.session_id, logs, timings, est


def cmd_run(args, cfg: PipelineConfig) -> int:
    model = _load_model(args)
    policy = load_policy(args.policy, cfg)
    _, sessions = read_corpus(_need(args.corpus, "corpus"))
    if args.session:
        sessions = [s for s in sessions if s.timeline.session_id == args.session]
        if not sessions:
            raise ConfigError(f"session {args.session!r} not in corpus")
    agents = CHANNELS if args.agent == "both" else (args.agent,)
    final = Path(args.out)
    tmp = _staging_dir(final)
    (tmp / "decisions").mkdir()
    (tmp / "estimates").mkdir()
    results = _map(_run_one, [(s.timeline, model, policy, agents, cfg) for s in sessions], args.jobs)
    timing = {}
    for sid, logs, timings, est in results:
        for ag, decisions in logs.items():
            write_decision_log(tmp / "decisions" / f"{sid}_{ag}.jsonl", decisions)
        write_label_csv(tmp / "estimates" / f"{sid}.csv", est)
        timing[sid] = timings
    rtf = [t["real_time_factor"] for per in timing.values() for t in per.values()]
    (tmp / "timing.json").write_text(json.dumps({"sessions": timing, "mean_real_time_factor":
                                                 float(np.mean(rtf)) if rtf else 0.0}, indent=2, sort_keys=True))
    (tmp / "meta.json").write_text(_meta(cfg, "run", corpus=str(args.corpus), agents=list(agents),
                                         policy=getattr(policy, "policy_id", "?"),
                                         source="oracle" if model is None else str(args.checkpoint)))
    _publish_dir(tmp, final)
    print(f"ran {len(sessions)} sessions; mean real-time factor {np.mean(rtf) if rtf else 0:.4f}")
    return EXIT_OK


class _Pred:
    __slots__ = ("frame", "kind", "anchor")

    def __init__(self, frame, kind, anchor):
        self.frame, self.kind, self.anchor = frame, kind, anchor


def _read_run_decisions(run_dir: Path, sid: str, ag: str):
    p = run_dir / "decisions" / f"{sid}_{ag}.jsonl"
    if not p.exists():
        return []
    return [_Pred(d["frame"], d["action"], d["anchor"]) for d in map(json.loads, p.read_text().splitlines()) if d]


def cmd_eval(args, cfg: PipelineConfig) -> int:
    _, sessions = read_corpus(_need(args.corpus, "truth corpus"))
    run_dir = Path(args.run) if args.run else None
    if run_dir is not None:
        _need(run_dir, "run directory")

    def estimates(s):
        if run_dir is None:
            raise ConfigError(f"protocol {args.protocol!r} needs --run with estimates")
        return read_label_csv(_need(run_dir / "estimates" / f"{s.timeline.session_id}.csv", "estimates"))

    report = {"protocol": args.protocol, **cfg.stamp()}
    extra_csv = None
    if args.protocol == "actions":
        truth, preds = {}, {}
        oracle = read_events(_need(args.decisions, "decision file")) if args.decisions else None
        for s in sessions:
            sid = s.timeline.session_id
            for ag in CHANNELS:
                truth[(sid, ag)] = derive_actions(s.timeline, ag, cfg.actions)
                if oracle is not None:
                    preds[(sid, ag)] = [e for e in oracle.get(sid, []) if e.agent_channel == ag]
                elif run_dir is not None:
                    preds[(sid, ag)] = _read_run_decisions(run_dir, sid, ag)
                else:
                    raise ConfigError("actions protocol needs --run or --decisions")
        rep = eval_agent_actions(truth, preds, cfg.eval.match_window_ms)
        report.update(rep.to_dict())
    elif args.protocol == "vap":
        vcfg = VapConfig(cfg.eval.vap_window_ms, cfg.eval.bc_pred_lead_ms)
        report.update(eval_vap_protocol([(s.timeline, estimates(s)) for s in sessions], vcfg, cfg.labels))
    elif args.protocol == "word":
        truth, scores = [], []
        for s in sessions:
            truth += derive_word_level_classes(s.timeline, s.words, cfg.actions)
            scores.append(word_scores(estimates(s), s.words))
        report.update(eval_word_level(truth, np.concatenate(scores)))
    else:
        policy = load_policy(args.policy, cfg)
        deltas = cfg.eval.anticipation_deltas_ms
        pooled = {d: [] for d in deltas}
        skipped = {d: 0 for d in deltas}
        for s in sessions:
            est = estimates(s)
            for ag in CHANNELS:
                tr, sk = anticipation_trace(est, s.timeline, deltas, policy, ag, cfg.actions)
                for d in deltas:
                    pooled[d] += tr[d]
                    skipped[d] += sk[d]
        rows = anticipation_report(pooled)
        report.update({"rows": rows, "skipped": {str(k): v for k, v in skipped.items()}})
        extra_csv = anticipation_csv(rows)
    out = Path(args.out)
    atomic_write(out, report_json(report))
    if extra_csv is not None:
        atomic_write(out.with_suffix(".csv"), extra_csv)
    print(f"wrote {args.protocol} report to {out}")
    return EXIT_OK


def cmd_ablate(args, cfg: PipelineConfig) -> int:
    from .experiments import ablation_table, run_ablation
    variants = args.variants.split(",")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    seeds = [int(x) for x in args.seeds.split(",")]
    c = cfg.corpus
    gen = cfg.generator

    def corpus(offset, n):
        return prepare([s.timeline for s in generate_corpus(gen.with_seed(gen.seed + offset), n)],
                       cfg.features, cfg.labels)

    train = corpus(0, c.ablation_train)
    val = corpus(100_000, c.ablation_val)
    test = corpus(200_000, c.ablation_test)
    rows = run_ablation(variants, seeds, train, val, test, cfg.train, cfg.model)
    table = ablation_table(rows)
    cols = list(table[0].keys())
    out = Path(args.out)
    atomic_write(out, rows_to_csv(table, cols))
    atomic_write(out.with_suffix(".json"), report_json({**cfg.stamp(), "variants": variants, "seeds": seeds,
                                                       "table": table,
                                                       "per_seed": [{"variant": r.variant, "seed": r.seed,
                                                                     **r.metrics} for r in rows]}))
    print(rows_to_csv(table, cols))
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="turntaking", description="Turn-taking signal pipeline on dual-channel activity.")
    p.add_argument("--config", help="JSON config file (default: $TURNTAKING_CONFIG, else built-in defaults)")
    p.add_argument("--jobs", type=int, default=1, help="session-level worker processes")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, help="number of sessions (default: corpus.n_sessions)")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("label", help="derive labels, actions and word classes")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_label)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--corpus", required=True)
    s.add_argument("--stage", choices=["1", "2", "both"], default="both")
    s.add_argument("--variant", choices=sorted(VARIANTS), default="A")
    s.add_argument("--init", help="stage-1 checkpoint to fine-tune (stage 2)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("fit-probe", help="fit the logistic-regression fusion probe")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--oracle", action="store_true", help="use smoothed labels as estimates")
    s.add_argument("--corpus", required=True, help="validation corpus")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_fit_probe)

    s = sub.add_parser("run", help="stream sessions through model + policy")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--oracle", action="store_true")
    s.add_argument("--policy", help="rules or probe JSON (default: built-in rules)")
    s.add_argument("--corpus", required=True)
    s.add_argument("--session", help="run one session id only")
    s.add_argument("--agent", choices=["A", "B", "both"], default="both")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("eval", help="score decisions or estimates")
    s.add_argument("--corpus", required=True, help="truth corpus")
    s.add_argument("--run", help="run directory from the run command")
    s.add_argument("--decisions", help="events CSV to score as predictions (actions protocol)")
    s.add_argument("--policy", help="policy for the anticipation score (default: built-in rules)")
    s.add_argument("--protocol", choices=["actions", "vap", "word", "anticipation"], default="actions")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", help="compare training variants on a synthetic test split")
    s.add_argument("--variants", default="A,B,C,E")
    s.add_argument("--seeds", default="0")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        return args.fn(args, cfg)
    except (ConfigError, StageOrderError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingDiverged, FloatingPointError, RuntimeError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
