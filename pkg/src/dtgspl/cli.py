"""``dtgspl`` command line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .estimator import ABLATIONS, DTGSPL
from .lattice import build_lattice
from .metrics import EvalRecord, report_csv, standard_report
from .synth import gen_dataset, read_jsonl, write_dataset


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dtgspl", description="Diverse temporal grounding from single positive labels.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--n", type=int, help="number of samples (overrides the config)")
    p.add_argument("--split", action="store_true", help="also write train.jsonl without hidden positives")

    p = sub.add_parser("train", help="train and write checkpoint, logs and metrics")
    _common(p)

    for name, text in (("estimate", "write pseudo-labels"), ("predict", "write ranked moment predictions")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True, help="dataset jsonl")

    p = sub.add_parser("eval", help="score predictions and write metrics.csv")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--records", help="jsonl of {id, predictions, annotations}")
    src.add_argument("--predictions", help="jsonl written by predict; needs --data")
    src.add_argument("--checkpoint", help="checkpoint to run; needs --data")
    p.add_argument("--data", help="oracle dataset jsonl")

    p = sub.add_parser("ablate", help="train the full model and ablated variants under one seed")
    _common(p)
    p.add_argument("--mode", action="append", choices=ABLATIONS, help="repeatable; default all")

    p = sub.add_parser("report", help="write curves.csv and summary.json for a run directory")
    _common(p)
    p.add_argument("--run", required=True, help="directory written by train")

    p = sub.add_parser("lattice", help="inspect the proposal lattice")
    lsub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    d = lsub.add_parser("dump", help="print 'a b start end' per proposal")
    d.add_argument("--n", type=int, default=16)
    d.add_argument("--base", type=int, default=16)
    return ap


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args) -> None:
    cfg = harness.load_config(args.config, args.seed)
    data = cfg.data if args.n is None else replace(cfg.data, n_samples=args.n)
    write_dataset(_out(args), gen_dataset(data, cfg.seed), split=args.split)


def cmd_train(args) -> None:
    harness.train(harness.load_config(args.config, args.seed), _out(args))


def cmd_estimate(args) -> None:
    est = DTGSPL.load(args.checkpoint)
    pseudo = est.estimate_positives(read_jsonl(args.data, with_oracle=False))
    harness.write_lines(_out(args) / "pseudo.jsonl", [pseudo[k].to_json(k) for k in sorted(pseudo)])


def cmd_predict(args) -> None:
    est = DTGSPL.load(args.checkpoint)
    samples = read_jsonl(args.data, with_oracle=False)
    se, cw = est.predict_moments(samples)
    rows = [{"id": s.id, "predictions": a.tolist(), "cw": b.tolist()} for s, a, b in zip(samples, se, cw)]
    harness.write_lines(_out(args) / "predictions.jsonl", rows)


def cmd_eval(args) -> None:
    if args.records:
        recs = [EvalRecord.from_json(d) for d in harness.read_lines(args.records)]
        single = recs if all(len(r.annotations) == 1 for r in recs) else None
        reports = standard_report(recs, single)
    else:
        if not args.data:
            raise UsageError("--data is required with --predictions or --checkpoint")
        oracle = read_jsonl(args.data)
        if args.checkpoint:
            reports = harness.evaluate(DTGSPL.load(args.checkpoint), oracle)
        else:
            preds = {d["id"]: d["predictions"] for d in harness.read_lines(args.predictions)}
            reports = harness.evaluate(preds, oracle)
    (_out(args) / "metrics.csv").write_text(report_csv(reports))


def cmd_ablate(args) -> None:
    cfg = harness.load_config(args.config, args.seed)
    harness.ablate(cfg, tuple(args.mode or ABLATIONS), _out(args))


def cmd_report(args) -> None:
    harness.report(args.run, _out(args))


def cmd_lattice(args) -> None:
    ps = build_lattice(args.n, args.base)
    lines = [f"{a} {b} {s!r} {e!r}" for (a, b), (s, e) in zip(ps.index_pairs.tolist(), ps.bounds.tolist())]
    sys.stdout.write("\n".join(lines) + "\n")


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "estimate": cmd_estimate, "predict": cmd_predict,
    "eval": cmd_eval, "ablate": cmd_ablate, "report": cmd_report, "lattice": cmd_lattice,
}


def _fail(kind: str, message: str, command: str | None, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "command": command}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        COMMANDS[command](args)
    except UsageError as err:
        return _fail("usage", str(err), command, 2)
    except (OSError, ValueError, KeyError, TypeError, FloatingPointError) as err:
        return _fail(type(err).__name__, str(err), command, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
