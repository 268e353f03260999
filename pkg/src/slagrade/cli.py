"""Command-line entry point: ``gen``, ``train``, ``eval``, ``compare``, ``plot``.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence


from . import corpus as corpus_mod
from .backbone import GraderModel, ModelConfig
from .benchmark import split_seed
from .corpus import GenConfig, apply_label_dropout, corpus_digest, generate_corpus, read_corpus, write_corpus
from .evaluation import (
    CorpusMismatchError,
    EvalReport,
    compare_reports,
    evaluate,
    export_scatter,
    read_records,
    read_scatter,
    score_records,
    write_records,
)
from .graders import CtgGrader, SessionGrader, StgGrader, response_examples
from .scale import PARTS
from .speechprior import AppGrader, AppTrainConfig, app_pretrain, load_app_bundle, save_app_bundle
from .train import (
    Trainer,
    TrainConfig,
    TrainingDivergedError,
    load_checkpoint,
    save_checkpoint,
    session_examples,
)

log = logging.getLogger("slagrade")

MODES = ("mtl", "mtl_app", "ctg", "stg", "app_only")
SPLITS = {"train": 512, "dev": 64, "eval": 128}
MODE_FLAGS = {"ori": ("ori_head",), "part-mean": ("part_mean",), "both": ("ori_head", "part_mean")}


class UsageError(Exception):
    pass


# -- config file ---------------------------------------------------------------


def read_config_file(path: str) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment; values parsed as JSON when possible."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (x.strip() for x in line.split("=", 1))
        try:
            out[key.replace("-", "_")] = json.loads(value)
        except json.JSONDecodeError:
            out[key.replace("-", "_")] = value
    return out


# -- helpers --------------------------------------------------------------------


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", newline="\n")


def _load_split(path: str) -> tuple[list, str]:
    p = Path(path)
    if not (p / corpus_mod.MANIFEST).is_file():
        raise UsageError(f"no corpus manifest in {p}")
    return read_corpus(p), corpus_digest(p)


def _train_split(data: str) -> str:
    p = Path(data)
    return str(p / "train") if (p / "train" / corpus_mod.MANIFEST).is_file() else str(p)


def _eval_split(data: str, split: str) -> str:
    p = Path(data)
    return str(p / split) if (p / split / corpus_mod.MANIFEST).is_file() else str(p)


def _model_config(args, d_feat: int, use_prior: bool) -> ModelConfig:
    return ModelConfig(
        d_feat=d_feat, d_model=args.d_model, n_layers=args.n_layers, n_heads=args.n_heads,
        lora_rank=args.lora_rank, lora_alpha=args.lora_alpha, audio_stride=args.audio_stride,
        causal=args.causal, use_prior=use_prior, readout_gain=args.readout_gain,
        embed_std=args.embed_std, max_context=args.max_context, adapter_seed=args.seed,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(lr=args.lr, weight_decay=args.weight_decay, warmup_steps=args.warmup_steps,
                       clip_norm=args.clip_norm, micro_batch=args.micro_batch,
                       grad_accum=args.grad_accum, epochs=args.epochs, seed=args.seed)


def _write_history(trainer: Trainer, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "loss", "grad_norm", "clipped_norm"])
        for r in trainer.history:
            w.writerow([r.step, repr(r.lr), repr(r.loss), repr(r.grad_norm), repr(r.clipped_norm)])


# -- commands --------------------------------------------------------------------


def cmd_gen(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
    if not 0.0 <= args.p_drop < 1.0:
        raise UsageError("--p-drop must be in [0, 1)")
    cfg = GenConfig(d_feat=args.d_feat, frame_period_s=args.frame_period, part_noise_sd=args.noise_sd,
                    inconsistency_ratio=args.inconsistency_ratio,
                    consistency_weight=args.consistency_weight)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sizes = {"train": args.n_train, "dev": args.n_dev, "eval": args.n_eval}
    stats = {"gen_config": asdict(cfg), "seed": args.seed, "noise_floor": corpus_mod.noise_floor(cfg),
             "splits": {}}
    for split, n in sizes.items():
        sessions = generate_corpus(n, split_seed(args.seed, split), cfg, id_prefix=f"{split}-")
        if split == "train" and args.p_drop > 0:
            sessions = apply_label_dropout(sessions, args.p_drop, split_seed(args.seed, 10))
        write_corpus(sessions, out / split)
        stats["splits"][split] = {"n_sessions": n, "digest": corpus_digest(out / split),
                                  "labels": corpus_mod.label_statistics(sessions)}
    _dump_json(stats, out / "stats.json")
    print(f"wrote {sum(sizes.values())} sessions to {out}")
    print("noise floor (RMSE): " + ", ".join(f"{k}={v:.3f}" for k, v in stats["noise_floor"].items()))
    for split, s in stats["splits"].items():
        ov = s["labels"]["overall"]
        print(f"{split:>5}: n={s['n_sessions']} overall mean={ov['mean']:.3f} std={ov['std']:.3f} "
              f"(labelled {ov['n']})")
    return 0


def cmd_train(args) -> int:
    if args.mode not in MODES:
        raise UsageError(f"unknown mode {args.mode!r}")
    sessions, digest = _load_split(_train_split(args.data))
    out = Path(args.out)
    d_feat = sessions[0].responses[0].features.shape[1]
    tcfg = _train_config(args)
    try:
        tcfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.resume and not (out / "checkpoint.pt").is_file():
        raise UsageError(f"--resume: no checkpoint in {out}")
    if args.resume and args.mode in ("stg", "app_only"):
        raise UsageError(f"--resume is not supported for mode {args.mode}")
    app_cfg = AppTrainConfig(epochs=args.app_epochs)
    run = {"mode": args.mode, "train_digest": digest, "seed": args.seed,
           "train_config": asdict(tcfg), "app_config": asdict(app_cfg)}

    if args.mode == "app_only":
        grader = AppGrader.fit(sessions, seed=args.seed, cfg=app_cfg)
        out.mkdir(parents=True, exist_ok=True)
        for name, bundle in grader.bundles.items():
            save_app_bundle(bundle, out / f"app_{name}.pt")
        _dump_json(run, out / "run.json")
        print(f"trained APP ensemble -> {out}")
        return 0

    if args.mode == "stg":
        mcfg = _model_config(args, d_feat, use_prior=False)
        run["model_config"] = mcfg.to_dict()
        trainers = {}
        for part in PARTS:
            model = GraderModel(mcfg)
            try:
                trainers[part] = Trainer(model, response_examples(model, sessions, parts=(part,)), tcfg)
            except ValueError as exc:
                raise UsageError(f"{part}: {exc}") from None
        out.mkdir(parents=True, exist_ok=True)
        for part, trainer in trainers.items():
            model = trainer.model
            trainer.run()
            save_checkpoint(out / f"checkpoint_{part}.pt", model, trainer, meta={"mode": "stg", "part": part})
            _write_history(trainer, out / f"history_{part}.csv")
        _dump_json(run, out / "run.json")
        print(f"trained 4 per-part graders -> {out}")
        return 0

    use_prior = args.mode == "mtl_app"
    mcfg = _model_config(args, d_feat, use_prior=use_prior)
    run["model_config"] = mcfg.to_dict()
    ckpt_path = out / "checkpoint.pt"
    app = None
    if args.resume:
        ck = load_checkpoint(ckpt_path, expect=mcfg)
        model, app = ck.model, ck.app
    else:
        model = GraderModel(mcfg)
        if use_prior:
            app = app_pretrain(sessions, "overall", seed=args.seed, cfg=app_cfg)
    if args.mode == "ctg":
        examples = response_examples(model, sessions)
    else:
        examples = session_examples(model, sessions, app)
    try:
        trainer = Trainer(model, examples, tcfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer.load_state_dict(ck.trainer_state)
    trainer.run(until_step=args.stop_at_step)
    save_checkpoint(ckpt_path, model, trainer, app, meta={"mode": args.mode})
    _write_history(trainer, out / "history.csv")
    _dump_json(run, out / "run.json")
    print(f"{args.mode}: {trainer.step}/{trainer.total_steps} optimizer steps; "
          f"epoch losses {[round(x, 4) for x in trainer.epoch_losses()]} -> {ckpt_path}")
    return 0


def load_run(run_dir: str | Path, d_feat: int | None = None):
    """Rebuild the grader saved by ``train`` in ``run_dir``."""
    run_dir = Path(run_dir)
    meta_path = run_dir / "run.json"
    if not meta_path.is_file():
        raise UsageError(f"no run.json in {run_dir}")
    run = json.loads(meta_path.read_text())
    mode = run["mode"]
    if mode == "app_only":
        grader = AppGrader({p.lower(): load_app_bundle(run_dir / f"app_{p.lower()}.pt", expect_d_feat=d_feat)
                            for p in PARTS})
        grader.tag = "app_only"
        return grader
    expect = None
    if d_feat is not None:
        expect = ModelConfig.from_dict({**run["model_config"], "d_feat": d_feat})
    if mode == "stg":
        return StgGrader({p: load_checkpoint(run_dir / f"checkpoint_{p}.pt", expect).model for p in PARTS})
    ck = load_checkpoint(run_dir / "checkpoint.pt", expect)
    if mode == "ctg":
        return CtgGrader(ck.model)
    return SessionGrader(ck.model, ck.app, tag=mode)


def cmd_eval(args) -> int:
    modes = MODE_FLAGS[args.overall_mode]
    out = Path(args.out)
    if args.from_predictions:
        records = read_records(args.from_predictions)
        digest = args.corpus_digest
        tag = args.model_tag or "predictions"
        report = score_records(records, tag, modes, digest)
    else:
        if not args.run:
            raise UsageError("eval needs --run (or --from-predictions)")
        sessions, digest = _load_split(_eval_split(args.data, args.split))
        d_feat = sessions[0].responses[0].features.shape[1]
        grader = load_run(args.run, d_feat=d_feat)
        report, records = evaluate(grader, sessions, modes, model=getattr(grader, "tag", None),
                                   corpus_digest=digest)
    out.mkdir(parents=True, exist_ok=True)
    write_records(records, out / "predictions.jsonl")
    _dump_json(report.to_json(), out / "report.json")
    (out / "report.txt").write_text(report.to_text(), newline="\n")
    print(report.to_text(), end="")
    return 0


def cmd_compare(args) -> int:
    reports = []
    for path in args.reports:
        p = Path(path)
        if p.is_dir():
            p = p / "report.json"
        if not p.is_file():
            raise UsageError(f"report not found: {path}")
        reports.append(EvalReport.from_json(json.loads(p.read_text())))
    if len(reports) < 2:
        raise UsageError("compare needs at least two reports")
    mode = MODE_FLAGS[args.overall_mode][0]
    table = compare_reports(reports, mode)
    if args.out:
        Path(args.out).write_text(table, newline="\n")
    print(table, end="")
    return 0


def cmd_plot(args) -> int:
    sessions, _ = _load_split(_eval_split(args.data, args.split))
    d_feat = sessions[0].responses[0].features.shape[1]
    a, b = load_run(args.run_a, d_feat), load_run(args.run_b, d_feat)
    r = export_scatter(a, b, sessions, args.out)
    print(f"wrote {len(sessions)} rows to {args.out}; pcc(a, b) = {'undefined' if r is None else f'{r:.4f}'}")
    if args.image:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        _, rows = read_scatter(args.out)
        xs, ys = [x[1] for x in rows], [x[2] for x in rows]
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(xs, ys, s=8)
        lo, hi = min(xs + ys), max(xs + ys)
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
        ax.set_xlabel(f"{Path(args.run_a).name} overall")
        ax.set_ylabel(f"{Path(args.run_b).name} overall")
        fig.tight_layout()
        fig.savefig(args.image, dpi=120)
        plt.close(fig)
    return 0


# -- parser ------------------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    d = ModelConfig()
    g = p.add_argument_group("model")
    g.add_argument("--d-model", type=int, default=d.d_model, help="backbone width")
    g.add_argument("--n-layers", type=int, default=d.n_layers, help="transformer layers")
    g.add_argument("--n-heads", type=int, default=d.n_heads, help="attention heads")
    g.add_argument("--lora-rank", type=int, default=d.lora_rank, help="adapter rank r")
    g.add_argument("--lora-alpha", type=float, default=d.lora_alpha, help="adapter scale alpha (update scaled by alpha/r)")
    g.add_argument("--audio-stride", type=int, default=d.audio_stride, help="frames averaged per audio item")
    g.add_argument("--max-context", type=int, default=d.max_context, help="maximum sequence items")
    g.add_argument("--causal", action="store_true", help="causal instead of bidirectional attention")
    g.add_argument("--readout-gain", type=float, default=d.readout_gain, help="frozen gain of the final norm")
    g.add_argument("--embed-std", type=float, default=d.embed_std, help="init std of frozen embeddings")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    g = p.add_argument_group("optimization")
    g.add_argument("--lr", type=float, default=d.lr, help="peak learning rate (AdamW)")
    g.add_argument("--weight-decay", type=float, default=d.weight_decay, help="decoupled weight decay")
    g.add_argument("--warmup-steps", type=int, default=d.warmup_steps, help="linear warm-up steps")
    g.add_argument("--clip-norm", type=float, default=d.clip_norm, help="global gradient-norm clip")
    g.add_argument("--micro-batch", type=int, default=d.micro_batch, help="examples per micro-batch")
    g.add_argument("--grad-accum", type=int, default=d.grad_accum, help="micro-batches per optimizer step")
    g.add_argument("--epochs", type=int, default=d.epochs, help="passes over the training split")
    g.add_argument("--app-epochs", type=int, default=AppTrainConfig().epochs,
                   help="epochs for the acoustic prior classifier")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="slagrade", description=__doc__, formatter_class=fmt)
    parser.add_argument("--config", help="key = value file; explicit flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus (train/dev/eval)", formatter_class=fmt)
    gd = GenConfig()
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--n-train", type=int, default=SPLITS["train"])
    g.add_argument("--n-dev", type=int, default=SPLITS["dev"])
    g.add_argument("--n-eval", type=int, default=SPLITS["eval"])
    g.add_argument("--p-drop", type=float, default=0.0, help="part-label dropout (train split only)")
    g.add_argument("--d-feat", type=int, default=gd.d_feat)
    g.add_argument("--frame-period", type=float, default=gd.frame_period_s, help="seconds per feature frame")
    g.add_argument("--noise-sd", type=float, default=gd.part_noise_sd, help="rater noise before quantization")
    g.add_argument("--inconsistency-ratio", type=float, default=gd.inconsistency_ratio,
                   help="max cross-response delivery spread, as a multiple of --noise-sd")
    g.add_argument("--consistency-weight", type=float, default=gd.consistency_weight,
                   help="P1/P5 score penalty per unit of delivery spread")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a grader", formatter_class=fmt)
    t.add_argument("--mode", required=True, choices=MODES)
    t.add_argument("--data", required=True, help="corpus directory (uses its train/ split)")
    t.add_argument("--out", help="run directory (default: runs/<mode>)")
    t.add_argument("--seed", type=int, default=0, help="data order, adapter init and prior seed")
    t.add_argument("--stop-at-step", type=int, default=None, help="stop after this many optimizer steps")
    t.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    _add_model_flags(t)
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained run", formatter_class=fmt)
    e.add_argument("--run", help="run directory written by train")
    e.add_argument("--data", default="data", help="corpus directory or split directory")
    e.add_argument("--split", default="eval", choices=tuple(SPLITS))
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--overall-mode", choices=tuple(MODE_FLAGS), default="part-mean")
    e.add_argument("--from-predictions", help="re-score a saved predictions.jsonl instead of running a model")
    e.add_argument("--model-tag", help="model tag for --from-predictions")
    e.add_argument("--corpus-digest", help="corpus digest for --from-predictions")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="merge eval reports into one table", formatter_class=fmt)
    c.add_argument("reports", nargs="+", help="report.json files or report directories")
    c.add_argument("--overall-mode", choices=("ori", "part-mean"), default="part-mean",
                   help="overall row to rank by")
    c.add_argument("--out", help="also write the table here")
    c.set_defaults(func=cmd_compare)

    pl = sub.add_parser("plot", help="overall-score scatter of two runs", formatter_class=fmt)
    pl.add_argument("--run-a", required=True)
    pl.add_argument("--run-b", required=True)
    pl.add_argument("--data", required=True)
    pl.add_argument("--split", default="eval", choices=tuple(SPLITS))
    pl.add_argument("--out", required=True, help="scatter CSV path")
    pl.add_argument("--image", help="optional PNG rendering (needs matplotlib)")
    pl.set_defaults(func=cmd_plot)
    return parser


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = read_config_file(args.config)
        except UsageError as exc:
            parser.error(str(exc))
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(overrides) - known
        if unknown:
            parser.error(f"unknown config keys for {args.command}: {sorted(unknown)}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    if args.command == "train" and args.out is None:
        args.out = str(Path("runs") / args.mode)
    return args


def main(argv: Sequence[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"slagrade {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except CorpusMismatchError as exc:
        print(f"slagrade {args.command}: {exc}", file=sys.stderr)
        return 1
    except TrainingDivergedError as exc:
        print(f"slagrade {args.command}: training diverged: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit code 1
        log.debug("failure", exc_info=True)
        print(f"slagrade {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
