"""``deepnarrow`` command-line workbench.

Exit codes: 0 on success, 1 for runtime or validation failures, 2 for usage
and shorthand-code parse errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
import urllib.request
from pathlib import Path

from . import fit as fitmod
from . import pareto
from .config import CodeParseError, parse_code
from .cost import DEFAULT_DEC_LEN, DEFAULT_ENC_LEN, count_params, forward_flops_per_token
from .pretrain import (TrainingDiverged, evaluate_ppl, load_corpus, save_corpus, split_corpus,
                       synth_corpus, train)
from .runs import RunsValidationError, find_record, load_manifest, load_runs
from .transformer import load_checkpoint, materialize

DATA_DIR_ENV = "DEEPNARROW_DATA"
EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _runs(args):
    if args.runs:
        return load_runs(args.runs)
    data_dir = os.environ.get(DATA_DIR_ENV)
    if data_dir and (Path(data_dir) / "runs.csv").exists():
        return load_runs(Path(data_dir) / "runs.csv")
    return load_runs()


def _emit_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _emit_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _kv_markdown(title, mapping) -> str:
    lines = [f"### {title}", "", "| field | value |", "|---|---|"]
    lines += [f"| {k} | {v} |" for k, v in mapping.items()]
    return "\n".join(lines) + "\n"


# verbs

def cmd_describe(args) -> str:
    reports = []
    for code in args.codes:
        spec = parse_code(code)
        cfg = spec.resolve()
        params = count_params(cfg)
        flops = forward_flops_per_token(cfg, args.enc_len, args.dec_len)
        reports.append({"code": spec.code, "config": cfg.to_dict(), "params": params.to_dict(),
                        "flops": {k: v for k, v in flops.to_dict().items() if k != "components"}})
    if args.format == "json":
        return _emit_json(reports if len(reports) > 1 else reports[0])
    if args.format == "csv":
        rows = [(r["code"], section, k, v) for r in reports
                for section in ("config", "params") for k, v in r[section].items()]
        rows += [(r["code"], "flops", k, r["flops"][k]) for r in reports
                 for k in ("per_token_enc", "per_token_dec", "attention_quadratic", "per_step_train")]
        return _emit_csv(["code", "section", "field", "value"], rows)
    out = []
    for r in reports:
        out.append(f"## {r['code']}\n")
        out.append(_kv_markdown("configuration", r["config"]))
        out.append(_kv_markdown("parameters", {k: f"{v:,}" for k, v in r["params"].items()}))
        out.append(f"total parameters: {r['params']['total']:.3e}\n")
        fl = {k: f"{v:,}" for k, v in r["flops"].items() if k != "assumptions"}
        fl.update({f"assumption {k}": v for k, v in r["flops"]["assumptions"].items()})
        out.append(_kv_markdown("forward FLOPs", fl))
    return "\n".join(out)


def cmd_ladder(args) -> str:
    start = parse_code(args.code).resolve()
    rungs = pareto.deepnarrow_ladder(start, args.layers, cap=args.cap)
    rows = [(r.spec.code, r.config.enc_layers, r.config.dec_layers, r.params.total, r.step_flops)
            for r in rungs]
    header = ["code", "enc_layers", "dec_layers", "params", "train_step_flops"]
    if args.format == "json":
        return _emit_json([dict(zip(header, row)) for row in rows])
    if args.format == "csv":
        return _emit_csv(header, rows)
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += [f"| {c} | {e} | {d} | {p:,} | {f:.3e} |" for c, e, d, p, f in rows]
    return "\n".join(lines) + "\n"


def cmd_pareto(args) -> str:
    records = _runs(args)
    if args.region:
        records = [r for r in records if r.compute_region == args.region]
    fr = pareto.frontier(records, args.cost, args.quality)
    csv_text = pareto.frontier_csv(records, fr)
    if args.out:
        Path(args.out).write_text(csv_text, encoding="utf-8")
    if args.format == "csv":
        return csv_text
    if args.format == "json":
        return _emit_json({"cost": fr.cost_axis, "quality": fr.quality_axis,
                           "frontier": fr.names, "excluded": list(fr.excluded)})
    usable = [r for r in records if r.name not in fr.excluded]
    return (pareto.markdown_table(usable, fr)
            + f"\nfrontier ({fr.cost_axis} vs {fr.quality_axis}): {', '.join(fr.names)}\n")


def cmd_recommend(args) -> str:
    records = _runs(args)
    target = find_record(records, args.target)
    pool = records
    if args.same_region:
        pool = [r for r in records if r.compute_region == target.compute_region]
    alts = pareto.recommend_alternatives(target, pool, args.cost, args.quality)
    rows = [(a.name, a.code, a.get(args.cost), a.get(args.quality)) for a in alts]
    if args.format == "json":
        return _emit_json({"target": target.name, "cost": args.cost, "quality": args.quality,
                           "alternatives": [dict(zip(("name", "code", "cost", "quality"), r))
                                            for r in rows]})
    if args.format == "csv":
        return _emit_csv(["name", "code", "cost", "quality"], rows)
    head = (f"target {target.name}: {args.cost}={target.get(args.cost)}, "
            f"{args.quality}={target.get(args.quality)}\n")
    if not rows:
        return head + "no measured alternative dominates the target\n"
    return head + "".join(f"- {n} ({c}): {args.cost}={x}, {args.quality}={q}\n" for n, c, x, q in rows)


def _select_rows(records, spec):
    if not spec:
        return records
    return [find_record(records, name.strip()) for name in spec.split(",") if name.strip()]


def cmd_fit(args) -> str:
    records = _select_rows(_runs(args), args.rows)
    if args.compare:
        cmp = fitmod.compare_fit_quality(records, args.compute, args.downstream)
        result = cmp.to_dict()
        fitted = cmp.upstream
    else:
        fitted = fitmod.fit_runs(records, args.compute, args.performance)
        result = fitted.to_dict()
    if args.series:
        Path(args.series).write_text(fitmod.plot_series_csv(records, fitted), encoding="utf-8")
    if args.format == "csv":
        flat = result if not args.compare else {
            f"{side}_{k}": v for side in ("upstream", "downstream") for k, v in result[side].items()}
        return _emit_csv(["field", "value"], [(k, v) for k, v in flat.items()])
    return _emit_json(result)


def cmd_inversions(args) -> str:
    records = _runs(args)
    tasks = tuple(t.strip() for t in args.tasks.split(","))
    usable = [r for r in records if all(r.get(a) is not None for a in ("params", "ppl") + tasks)]
    report = fitmod.find_inversions(usable, tasks, args.ratio)
    if args.format == "csv":
        return _emit_csv(["better_upstream", "better_downstream", "upstream_gap"],
                         [(p.better_upstream.name, p.better_downstream.name, repr(p.upstream_gap))
                          for p in report.pairs])
    return _emit_json(report.to_dict())


def _corpus_for(args):
    if args.corpus:
        corpus, vocab = load_corpus(args.corpus)
        if vocab != args.vocab_size:
            raise ValueError(f"corpus vocabulary {vocab} differs from --vocab-size {args.vocab_size}")
        return corpus
    return synth_corpus(args.seed, args.n_sequences, args.seq_len, args.vocab_size)


def cmd_train(args) -> str:
    cfg = parse_code(args.code).resolve().replace(vocab_size=args.vocab_size)
    corpus = _corpus_for(args)
    train_rows, held_out = split_corpus(corpus)
    model = materialize(cfg, seed=args.seed, precision=args.precision)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out / "corpus.bin", args.vocab_size)
    metrics = train(model, train_rows, args.steps, batch_size=args.batch_size,
                    learning_rate=args.lr, seed=args.seed, held_out=held_out, out_dir=out,
                    checkpoint_every=args.checkpoint_every,
                    clock=time.perf_counter if args.timing else None)
    summary = {"code": parse_code(args.code).code, "params": model.n_params(), "steps": args.steps,
               "initial_loss": metrics.initial_loss, "final_loss": metrics.final_loss,
               "held_out_log_ppl": metrics.held_out_log_ppl, "out_dir": str(out)}
    if args.format == "csv":
        return metrics.to_csv()
    if args.format == "json":
        return _emit_json(summary)
    return "".join(f"{k}: {v}\n" for k, v in summary.items())


def cmd_eval(args) -> str:
    model = load_checkpoint(args.checkpoint)
    if args.corpus:
        corpus, _ = load_corpus(args.corpus)
    else:
        corpus = synth_corpus(args.seed, args.n_sequences, args.seq_len, model.config.vocab_size)
    _, held_out = split_corpus(corpus)
    value = evaluate_ppl(model, held_out, seed=args.seed)
    if args.format == "json":
        return _emit_json({"checkpoint": str(args.checkpoint), "held_out_log_ppl": value})
    if args.format == "csv":
        return _emit_csv(["checkpoint", "held_out_log_ppl"], [(args.checkpoint, repr(value))])
    return f"held-out log-perplexity: {value!r}\n"


def _gcs_to_https(url: str) -> str:
    if url.startswith("gs://"):
        return "https://storage.googleapis.com/" + url[len("gs://"):]
    return url


def cmd_manifest(args) -> str:
    entries = load_manifest(args.manifest)
    rows = [(e.name, e.spec.code, e.pretrain_steps, count_params(e.spec.resolve()).total, e.url)
            for e in entries]
    if args.fetch:
        dest = Path(args.fetch)
        dest.mkdir(parents=True, exist_ok=True)
        for e in entries:
            url = _gcs_to_https(e.url)
            target = dest / (e.name.replace("/", "_").replace(" ", "_") + Path(url).suffix)
            urllib.request.urlretrieve(url, target)
    header = ["name", "code", "pretrain_steps", "analytic_params", "url"]
    if args.format == "json":
        return _emit_json([dict(zip(header, r)) for r in rows])
    if args.format == "csv":
        return _emit_csv(header, rows)
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += [f"| {n} | {c} | {s} | {p:,} | {u} |" for n, c, s, p, u in rows]
    return "\n".join(lines) + "\n"


# parser

def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits: {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    def global_flags(parser, suppress):
        # after the verb the same flags are accepted, but must not reset values given before it
        dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        parser.add_argument("--runs", default=dflt(None),
                            help=f"runs CSV (default: ${DATA_DIR_ENV}/runs.csv, else bundled)")
        parser.add_argument("--format", choices=("md", "csv", "json"), default=dflt("md"))
        parser.add_argument("--seed", type=_u64, default=dflt(0))

    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, suppress=True)

    p = argparse.ArgumentParser(prog="deepnarrow",
                                description="Size, cost and compare scaled encoder-decoder transformers.")
    global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="verb", required=True, metavar="VERB")

    d = sub.add_parser("describe", parents=[common], help="resolved config, params and FLOPs for codes")
    d.add_argument("codes", nargs="+")
    d.add_argument("--enc-len", type=int, default=DEFAULT_ENC_LEN)
    d.add_argument("--dec-len", type=int, default=DEFAULT_DEC_LEN)
    d.set_defaults(func=cmd_describe)

    ld = sub.add_parser("ladder", parents=[common], help="deepen a config step by step")
    ld.add_argument("code")
    ld.add_argument("--layers", type=int, nargs="+", required=True)
    ld.add_argument("--cap", type=int, default=pareto.DEPTH_CAP)
    ld.set_defaults(func=cmd_ladder)

    pa = sub.add_parser("pareto", parents=[common], help="frontier of the runs table")
    pa.add_argument("--cost", choices=pareto.COST_AXES, default="params")
    pa.add_argument("--quality", choices=pareto.QUALITY_AXES, default="sglue")
    pa.add_argument("--region", choices=("small", "base", "large", "xl", "xxl"))
    pa.add_argument("--out", help="also write the frontier CSV here")
    pa.set_defaults(func=cmd_pareto)

    rc = sub.add_parser("recommend", parents=[common], help="measured runs that dominate a target")
    rc.add_argument("target")
    rc.add_argument("--cost", choices=pareto.COST_AXES, default="params")
    rc.add_argument("--quality", choices=pareto.QUALITY_AXES, default="sglue")
    rc.add_argument("--same-region", action="store_true")
    rc.set_defaults(func=cmd_recommend)

    ft = sub.add_parser("fit", parents=[common], help="power-law fit of performance vs compute")
    ft.add_argument("--compute", choices=pareto.COST_AXES, default="params")
    ft.add_argument("--performance", choices=pareto.QUALITY_AXES, default="ppl")
    ft.add_argument("--rows", help="comma-separated run names to include")
    ft.add_argument("--compare", action="store_true", help="upstream vs downstream fit quality")
    ft.add_argument("--downstream", choices=fitmod.DOWNSTREAM_TASKS, default="sglue")
    ft.add_argument("--series", help="write plot-ready (x, y, predicted) CSV here")
    ft.set_defaults(func=cmd_fit)

    iv = sub.add_parser("inversions", parents=[common], help="upstream/downstream disagreements")
    iv.add_argument("--tasks", default=",".join(fitmod.DOWNSTREAM_TASKS))
    iv.add_argument("--ratio", type=float, default=fitmod.NEIGHBORHOOD_RATIO)
    iv.set_defaults(func=cmd_inversions)

    def corpus_args(sp):
        sp.add_argument("--corpus", help="binary corpus file instead of a generated one")
        sp.add_argument("--n-sequences", type=int, default=2000)
        sp.add_argument("--seq-len", type=int, default=48)

    tr = sub.add_parser("train", parents=[common], help="desk-scale span-corruption pretraining")
    tr.add_argument("code")
    tr.add_argument("--steps", type=int, default=500)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--batch-size", type=int, default=8)
    tr.add_argument("--vocab-size", type=int, default=512)
    tr.add_argument("--precision", choices=("single", "double"), default="single")
    tr.add_argument("--out-dir", default="run")
    tr.add_argument("--checkpoint-every", type=int, default=0)
    tr.add_argument("--timing", action="store_true", help="record wall-clock tokens/sec")
    corpus_args(tr)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", parents=[common], help="held-out log-perplexity of a checkpoint")
    ev.add_argument("checkpoint")
    corpus_args(ev)
    ev.set_defaults(func=cmd_eval)

    mf = sub.add_parser("manifest", parents=[common], help="list a checkpoint manifest")
    mf.add_argument("manifest")
    mf.add_argument("--fetch", metavar="DIR", help="download every entry into DIR")
    mf.set_defaults(func=cmd_manifest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        sys.stdout.write(args.func(args))
    except CodeParseError as e:
        print(f"deepnarrow: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (RunsValidationError, ValueError, KeyError, TrainingDiverged, OSError) as e:
        print(f"deepnarrow: error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
