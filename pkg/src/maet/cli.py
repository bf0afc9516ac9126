"""Command-line entry point: ``maet <subcommand> ...``.

Exit status is 0 on success, 1 for usage errors and 2 for data errors.  On
failure a single JSON object describing the error is written to stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .errors import MaetError, StageError, UsageError
from .inspect import compare_layers, summarize
from .manifest import OPS, PARAMS, plan_from, resolve_params, run_manifest
from .tensor_store import file_digest, open_store, write_text_atomic
from .transfer_merge import dry_run


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _mu(text: str) -> dict[str, float]:
    out = {}
    for part in text.split(","):
        lang, sep, value = part.partition("=")
        if not sep or not lang.strip():
            raise argparse.ArgumentTypeError(f"expected lang=value, got {part!r}")
        try:
            out[lang.strip()] = float(value)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {value!r}") from None
    return out


def _weight(text: str) -> tuple[str, str]:
    lang, sep, path = text.partition("=")
    if not sep or not lang or not path:
        raise argparse.ArgumentTypeError(f"expected lang=path, got {text!r}")
    return lang, path


def _filters(p: argparse.ArgumentParser) -> None:
    p.add_argument("--include", action="append", default=None, metavar="PATTERN",
                   help="glob over tensor names; repeatable")
    p.add_argument("--exclude", action="append", default=None, metavar="PATTERN",
                   help="glob over tensor names; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maet", description="Ability extraction and cross-lingual transfer over checkpoints.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("diff", help="parameter delta: trained - base")
    p.add_argument("--trained", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("importance", help="per-parameter importance from a probe run")
    p.add_argument("--base", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--granularity", choices=("scalar", "row"))
    p.add_argument("--lambda", dest="lambda_scale", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("mask", help="top-k1%% key-neuron mask from an importance file")
    p.add_argument("--importance", required=True)
    p.add_argument("--k1", dest="k1_percent", type=float)
    _filters(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("mask-union", help="union of neuron masks")
    p.add_argument("masks", nargs="+")
    p.add_argument("--out", required=True)

    p = sub.add_parser("project", help="keep trained values only on the mask")
    p.add_argument("--base", required=True)
    p.add_argument("--trained", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("extract", help="ability or language weight")
    p.add_argument("--kind", choices=("ability", "language"))
    p.add_argument("--trained", required=True,
                   help="ability + reference-language model (ability) or language model (language)")
    p.add_argument("--reference", help="reference-language model")
    p.add_argument("--base", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--id", help="ability or language identifier recorded in metadata")
    p.add_argument("--out", required=True)

    p = sub.add_parser("combine", help="multi-lingual weight from language weights")
    p.add_argument("--weight", dest="weights", action="append", type=_weight, required=True, metavar="LANG=PATH")
    p.add_argument("--mu", type=_mu, metavar="LANG=VALUE,...")
    p.add_argument("--out", required=True)

    p = sub.add_parser("select", help="low-similarity tensor selection")
    p.add_argument("--ability", required=True)
    p.add_argument("--multilingual", required=True)
    p.add_argument("--k2", dest="k2_percent", type=float)
    p.add_argument("--metric", choices=("dot", "cosine"))
    p.add_argument("--take", choices=("last", "first"))
    _filters(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("merge", help="assemble the transferred checkpoint")
    p.add_argument("--base", required=True)
    p.add_argument("--ability", required=True)
    p.add_argument("--multilingual", required=True)
    p.add_argument("--selection", required=True)
    p.add_argument("--gamma", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--eta-everywhere", dest="eta_everywhere", action="store_true", default=None)
    p.add_argument("--dry-run", action="store_true", help="print the per-tensor summary, write nothing")
    p.add_argument("--out")

    p = sub.add_parser("inspect", help="summary of one store, or per-layer comparison of two")
    p.add_argument("stores", nargs="+", metavar="STORE")
    p.add_argument("--out")

    p = sub.add_parser("toy", help="run the toy transfer experiment")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, help="sweep this many consecutive seeds starting at --seed")
    p.add_argument("--run-dir", help="keep every artifact here (single seed only)")
    for flag, kind in (("n-languages", int), ("n-abilities", int), ("pretrain-steps", int), ("probe-steps", int),
                       ("cpt-steps", int), ("lr", float), ("batch-size", int), ("mixture", float),
                       ("k1", float), ("k2", float), ("alpha", float), ("beta", float), ("gamma", float),
                       ("eta", float), ("eval-samples", int)):
        p.add_argument(f"--{flag}", type=kind)
    p.add_argument("--mu", type=_mu, metavar="LANG=VALUE,...")
    p.add_argument("--ability", type=int, default=1, help="ability index scored by --seeds")
    p.add_argument("--out")

    p = sub.add_parser("run", help="execute a pipeline manifest")
    p.add_argument("manifest")
    return parser


_FLAG_NAMES = {"k1_percent": "--k1", "k2_percent": "--k2", "lambda_scale": "--lambda"}


def _stage_args(op: str, args: argparse.Namespace) -> tuple[dict[str, Any], dict[str, Any]]:
    op_def = OPS[op]
    inputs = {}
    for role in op_def.inputs:
        value = getattr(args, role, None)
        if value is None:
            continue
        if role == "weights":
            langs = [lang for lang, _ in value]
            if len(set(langs)) != len(langs):
                raise UsageError("--weight: language ids must be unique")
            inputs[role] = {lang: Path(path) for lang, path in value}
        else:
            inputs[role] = [Path(v) for v in value] if isinstance(value, list) else Path(value)
    own = {}
    for key in op_def.params:
        value = getattr(args, key, None)
        if value is not None:
            own[key] = PARAMS[key](value, _FLAG_NAMES.get(key, "--" + key.replace("_", "-")))
    return inputs, resolve_params(op, {}, own)


def _emit(doc: Any, out: str | None) -> None:
    text = json.dumps(doc, indent=1, default=_jsonable) + "\n"
    if out:
        write_text_atomic(out, text)
    else:
        sys.stdout.write(text)


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not serializable: {type(value).__name__}")


def _finite_or_none(row: dict) -> dict:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in row.items()}


def _run_stage_command(args: argparse.Namespace) -> None:
    op = args.command
    inputs, params = _stage_args(op, args)
    out = Path(args.out)
    OPS[op].fn(inputs, params, out, None)
    _emit({"out": str(out), "digest": file_digest(out)}, None)


def _merge_command(args: argparse.Namespace) -> None:
    inputs, params = _stage_args("merge", args)
    if args.dry_run:
        _emit(dry_run(plan_from(inputs, params)).as_dict(), None)
        return
    if not args.out:
        raise UsageError("merge needs --out unless --dry-run is given")
    _run_stage_command(args)


def _inspect_command(args: argparse.Namespace) -> None:
    if len(args.stores) == 1:
        rows = [_finite_or_none(asdict(r)) for r in summarize(open_store(args.stores[0]))]
        _emit({"kind": "summary", "rows": rows}, args.out)
    elif len(args.stores) == 2:
        rows = compare_layers(open_store(args.stores[0]), open_store(args.stores[1]))
        _emit({"kind": "layers", "rows": [asdict(r) for r in rows]}, args.out)
    else:
        raise UsageError("inspect takes one store (summary) or two (layer comparison)")


def _toy_command(args: argparse.Namespace) -> None:
    from .toy_lab import ToyConfig, run_transfer_experiment, seed_sweep

    fields = {"n_languages": args.n_languages, "n_abilities": args.n_abilities,
              "pretrain_steps": args.pretrain_steps, "probe_steps": args.probe_steps, "cpt_steps": args.cpt_steps,
              "lr": args.lr, "batch_size": args.batch_size, "mixture": args.mixture, "k1": args.k1, "k2": args.k2,
              "alpha": args.alpha, "beta": args.beta, "gamma": args.gamma, "eta": args.eta, "mu": args.mu,
              "eval_samples": args.eval_samples}
    config = ToyConfig(seed=args.seed, **{k: v for k, v in fields.items() if v is not None})
    if args.seeds is None:
        _emit(run_transfer_experiment(config, args.run_dir).as_dict(), args.out)
        return
    if args.run_dir:
        raise UsageError("--run-dir applies to a single seed")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    config.validate()
    _emit(seed_sweep(config, range(args.seed, args.seed + args.seeds), ability=args.ability), args.out)


def _run_command(args: argparse.Namespace) -> None:
    result = run_manifest(args.manifest)
    _emit({"out_dir": result.out_dir, "outputs": result.outputs}, None)


def _error_doc(exc: BaseException) -> tuple[int, dict]:
    cause = exc.cause if isinstance(exc, StageError) else exc
    usage = isinstance(cause, UsageError)
    doc = {"error": "usage" if usage else "data", "type": type(cause).__name__, "message": str(cause)}
    if isinstance(exc, StageError):
        doc["stage"] = exc.stage
    return (1 if usage else 2), doc


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; see maet --help")
        handler = {"merge": _merge_command, "inspect": _inspect_command, "toy": _toy_command,
                   "run": _run_command}.get(args.command, _run_stage_command)
        handler(args)
    except (MaetError, OSError) as exc:
        code, doc = _error_doc(exc)
        sys.stderr.write(json.dumps(doc) + "\n")
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
