"""Command-line entry point: gen, train, eval, triage-report, ablate, gradcheck.

Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint, gradcheck, metrics, nets, synthdata
from . import trainer as tn
from . import triage as tr

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="JSON file of defaults; explicit flags win")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads for evaluation passes (results do not depend on it)")


def _train_flags(p: argparse.ArgumentParser) -> None:
    d, t = tn.TrainConfig(), tr.TriageConfig()
    m = nets.ModelConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--warmup", type=int, default=d.warmup)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--min-lr", type=float, default=d.min_lr)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--batch", type=int, default=d.batch)
    p.add_argument("--smoothing", type=float, default=d.smoothing)
    p.add_argument("--aux-weight", type=float, default=d.aux_weight)
    p.add_argument("--jitter", type=float, default=d.jitter)
    p.add_argument("--clips", type=int, default=t.m)
    p.add_argument("--t-hard", type=float, default=t.t_hard)
    p.add_argument("--t-noisy", type=float, default=t.t_noisy)
    p.add_argument("--lambda-hard", type=float, default=t.lambda_hard)
    p.add_argument("--lambda-noisy", type=float, default=t.lambda_noisy)
    p.add_argument("--fusion", choices=("concat", "sum"), default=m.fusion)
    p.add_argument("--hidden", type=int, default=m.hidden_dim)
    p.add_argument("--summary-dim", type=int, default=m.summary_dim)
    p.add_argument("--n1", type=int, default=m.n1, help="clips per re-sampled sequence")
    p.add_argument("--n2", type=int, default=m.n2, help="frames per clip")
    p.add_argument("--detect-frames", type=int, default=m.detect_frames)
    p.add_argument("--eval-every", type=int, default=d.eval_every,
                   help="epochs between test evaluations (0: never)")
    p.add_argument("--seed", type=int, default=d.seed)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="triagenet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    gd = synthdata.GenConfig()
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=gd.classes)
    g.add_argument("--train", type=int, default=gd.train)
    g.add_argument("--test", type=int, default=gd.test)
    g.add_argument("--frames", type=int, default=gd.frames)
    g.add_argument("--dim", type=int, default=gd.dim)
    g.add_argument("--noise-rate", type=float, default=gd.noise_rate)
    g.add_argument("--hard-rate", type=float, default=gd.hard_rate)
    g.add_argument("--frame-noise", type=float, default=gd.frame_noise)
    g.add_argument("--seed", type=int, default=gd.seed)
    _common(g)

    t = sub.add_parser("train", help="train a recogniser")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path; history CSV is written alongside")
    t.add_argument("--mode", choices=tn.MODES, default="full")
    _train_flags(t)
    _common(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--report", required=True, help="JSON metrics report path")
    e.add_argument("--csv", help="optional tabular CSV report")
    e.add_argument("--split", default="test", choices=("train", "test", "all"))
    e.add_argument("--clips", type=int, default=tr.TriageConfig().m)
    e.add_argument("--smoothing", type=float, default=tn.TrainConfig().smoothing)
    _common(e)

    r = sub.add_parser("triage-report", help="per-sample triage of the training split")
    td = tr.TriageConfig()
    r.add_argument("--data", required=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--csv", required=True)
    r.add_argument("--clips", type=int, default=td.m)
    r.add_argument("--t-hard", type=float, default=td.t_hard)
    r.add_argument("--t-noisy", type=float, default=td.t_noisy)
    r.add_argument("--lambda-hard", type=float, default=td.lambda_hard)
    r.add_argument("--lambda-noisy", type=float, default=td.lambda_noisy)
    r.add_argument("--smoothing", type=float, default=tn.TrainConfig().smoothing)
    _common(r)

    a = sub.add_parser("ablate", help="train every (mode, seed) pair and tabulate test WAR/UAR")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True, help="ablation CSV path")
    a.add_argument("--modes", default=",".join(tn.MODES), help="comma-separated modes")
    a.add_argument("--seeds", default="0", help="comma-separated seeds")
    _train_flags(a)
    a.set_defaults(eval_every=0)
    _common(a)

    c = sub.add_parser("gradcheck", help="finite-difference self-check of every differentiable op")
    c.add_argument("--seed", type=int, default=0)
    _common(c)
    parser.subcommands = sub.choices
    return parser


def parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(overrides, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        known = vars(args)
        norm = {k.replace("-", "_"): v for k, v in overrides.items()}
        unknown = sorted(set(norm) - set(known) - {"command"})
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        norm.pop("command", None)
        parser.subcommands[args.command].set_defaults(**norm)
        args = parser.parse_args(argv)
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return args


# --------------------------------------------------------------------------
# config assembly

def _model_config(args, frame_dim: int, classes: int) -> nets.ModelConfig:
    n = args.n1 * args.n2
    return nets.ModelConfig(frame_dim=frame_dim, hidden_dim=args.hidden, classes=classes,
                            frames_in=n, n1=args.n1, n2=args.n2, detect_frames=args.detect_frames,
                            fusion=args.fusion, summary_dim=args.summary_dim)


def _train_config(args, mode: str, seed: int) -> tn.TrainConfig:
    triage = tr.TriageConfig(m=args.clips, t_hard=args.t_hard, t_noisy=args.t_noisy,
                             lambda_hard=args.lambda_hard, lambda_noisy=args.lambda_noisy,
                             warmup_epochs=args.warmup)
    return tn.TrainConfig(epochs=args.epochs, warmup=args.warmup, lr=args.lr, min_lr=args.min_lr,
                          weight_decay=args.weight_decay, batch=args.batch, smoothing=args.smoothing,
                          aux_weight=args.aux_weight, jitter=args.jitter, seed=seed, mode=mode,
                          triage=triage, eval_every=args.eval_every)


def _classes(data_dir: Path, samples) -> int:
    meta = data_dir / "gen_config.json"
    if meta.exists():
        return int(json.loads(meta.read_text())["classes"])
    return int(max(s.label for s in samples)) + 1 if samples else 1


def _print_config(command: str, resolved: dict) -> None:
    print(json.dumps({"command": command, "resolved_config": resolved}, sort_keys=True, default=str))
    sys.stdout.flush()


def _flags(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "command"}


def _load(args):
    samples = synthdata.read_dataset(args.data)
    return samples, _classes(Path(args.data), samples)


def _split(samples, name: str):
    return list(samples) if name == "all" else synthdata.split_of(samples, name)


def _dims(samples) -> int:
    return samples[0].frames.shape[1] if samples else 1


def _ablation_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds needs at least one seed")
    return seeds


def _ablation_modes(text: str) -> list[str]:
    modes = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in modes if m not in tn.MODES]
    if bad or not modes:
        raise UsageError(f"--modes must list some of {', '.join(tn.MODES)}; got {text!r}")
    return [m for m in tn.MODES if m in modes]  # table row order


# --------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    try:
        cfg = synthdata.GenConfig(classes=args.classes, train=args.train, test=args.test,
                                  frames=args.frames, dim=args.dim, noise_rate=args.noise_rate,
                                  hard_rate=args.hard_rate, frame_noise=args.frame_noise,
                                  seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _print_config("gen", {"out": args.out, **synthdata.gen_config_dict(cfg)})
    samples = synthdata.generate(cfg)
    synthdata.write_dataset(samples, args.out, synthdata.gen_config_dict(cfg))
    counts = {k.label: sum(s.kind == k for s in samples) for k in synthdata.Kind}
    print(f"wrote {len(samples)} samples to {args.out}: {counts}")
    return EXIT_OK


def history_path(ckpt_path) -> Path:
    p = Path(ckpt_path)
    return p.with_name(p.stem + ".history.csv")


def cmd_train(args) -> int:
    samples, classes = _load(args)
    train_set, test_set = _split(samples, "train"), _split(samples, "test")
    try:
        mcfg = _model_config(args, _dims(samples), classes)
        tcfg = _train_config(args, args.mode, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _print_config("train", {"data": args.data, "out": args.out, "threads": args.threads,
                            "model": mcfg.to_dict(), "train": tcfg.to_dict()})
    res = tn.train(train_set, mcfg, tcfg, test=test_set, threads=args.threads, log=print)
    checkpoint.save(res.checkpoint, args.out)
    res.history.write_csv(history_path(args.out))
    print(f"checkpoint -> {args.out}; history -> {history_path(args.out)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _print_config("eval", _flags(args))
    samples, _ = _load(args)
    ckpt = checkpoint.load(args.ckpt)
    report = tn.evaluate(ckpt, _split(samples, args.split), m=args.clips, smoothing=args.smoothing,
                         threads=args.threads)
    Path(args.report).write_text(report.to_json() + "\n")
    if args.csv:
        report.write_csv(args.csv)
    print(f"WAR {report.war:.4f}  UAR {report.uar:.4f}  (n={report.n_samples})")
    if report.uar_excluded:
        print(f"classes absent from the eval set, excluded from UAR: {report.uar_excluded}")
    return EXIT_OK


def cmd_triage_report(args) -> int:
    try:
        cfg = tr.TriageConfig(m=args.clips, t_hard=args.t_hard, t_noisy=args.t_noisy,
                              lambda_hard=args.lambda_hard, lambda_noisy=args.lambda_noisy)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _print_config("triage-report", {**_flags(args), "triage": asdict(cfg)})
    samples, _ = _load(args)
    train_set = _split(samples, "train")
    if not train_set:
        raise ValueError("dataset has no training split to triage")
    ckpt = checkpoint.load(args.ckpt)
    ids, frames, labels = tn.stack_samples(train_set)
    tn.check_dims(frames, labels, ckpt.model)
    epoch = int(ckpt.meta.get("epochs_completed", 0))
    records, _ = tn.agreement_pass(ids, frames, labels, ckpt.params, ckpt.model, cfg.m,
                                   args.smoothing, epoch, threads=args.threads)
    assignments = tr.assign_triage(records, cfg)
    kinds = {s.id: s.kind for s in train_set}
    tr.write_triage_csv(args.csv, records, assignments, {i: k.label for i, k in kinds.items()})
    counts = tr.category_counts(assignments)
    print("categories: " + ", ".join(f"{c.value} {n}" for c, n in counts.items()))
    for cat, q in metrics.triage_quality(assignments, kinds).items():
        print(f"{cat}: precision {q['precision']:.4f} recall {q['recall']:.4f} "
              f"({q['hits']}/{q['detected']} detected, {q['injected']} injected)"
              + (f" [{', '.join(q['flags'])}]" if q["flags"] else ""))
    return EXIT_OK


ABLATION_COLUMNS = ["mode", "seeds", "war_mean", "war_sd", "uar_mean", "uar_sd", "war_per_seed"]


def ablation_rows(results: dict[str, list[tuple[float, float]]]) -> list[list[str]]:
    rows = []
    for mode in tn.MODES:
        if mode not in results:
            continue
        wars = np.array([w for w, _ in results[mode]])
        uars = np.array([u for _, u in results[mode]])
        sd = (lambda x: float(x.std(ddof=1)) if len(x) > 1 else 0.0)  # noqa: E731
        rows.append([mode, str(len(wars)), f"{wars.mean():.6f}", f"{sd(wars):.6f}",
                     f"{uars.mean():.6f}", f"{sd(uars):.6f}", ";".join(f"{w:.6f}" for w in wars)])
    return rows


def cmd_ablate(args) -> int:
    modes, seeds = _ablation_modes(args.modes), _ablation_seeds(args.seeds)
    samples, classes = _load(args)
    train_set, test_set = _split(samples, "train"), _split(samples, "test")
    if not test_set:
        raise ValueError("ablation needs a test split")
    try:
        mcfg = _model_config(args, _dims(samples), classes)
        base = _train_config(args, modes[0], seeds[0])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _print_config("ablate", {"data": args.data, "out": args.out, "modes": modes, "seeds": seeds,
                             "threads": args.threads, "model": mcfg.to_dict(),
                             "train": base.to_dict()})
    results: dict[str, list[tuple[float, float]]] = {}
    for mode in modes:
        for seed in seeds:
            cfg = _train_config(args, mode, seed)
            res = tn.train(train_set, mcfg, cfg, threads=args.threads)
            rep = tn.evaluate(res.checkpoint, test_set, m=cfg.triage.m, threads=args.threads)
            results.setdefault(mode, []).append((rep.war, rep.uar))
            print(f"{mode:<13s} seed {seed}: WAR {rep.war:.4f} UAR {rep.uar:.4f}")
    rows = ablation_rows(results)
    with open(args.out, "w", newline="") as fh:
        fh.write(",".join(ABLATION_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    width = max(len(m) for m in modes)
    for row in rows:
        print(f"{row[0]:<{width}s}  WAR {row[2]} ± {row[3]}  UAR {row[4]} ± {row[5]}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _print_config("gradcheck", _flags(args))
    ok, text = gradcheck.main(args.seed)
    print(text)
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "triage-report": cmd_triage_report, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
