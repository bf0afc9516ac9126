"""Declarative pipeline runs over checkpoint files.

A manifest is a JSON document::

    {
      "out_dir": "run",
      "hyper": {"alpha": 0.8, "k2_percent": 60},
      "stages": [
        {"name": "imp", "op": "importance",
         "inputs": {"base": "base.safetensors", "probe": "probe.safetensors"},
         "out": "imp.safetensors"},
        {"name": "mask", "op": "mask", "inputs": {"importance": "@imp"}, "out": "mask.safetensors"}
      ]
    }

Inputs are either files (relative to the manifest) or ``@stage`` references
to an earlier output.  ``hyper`` values apply to every stage that accepts
them; a stage's own ``params`` win over ``hyper``.  Each output gets a
``<out>.provenance.json`` record with input digests and resolved parameters.
"""

from __future__ import annotations

import functools
import graphlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from .ability_extract import DEFAULT_ALPHA, DEFAULT_BETA, extract_ability, extract_language
from .delta_ops import diff
from .errors import StageError, UsageError
from .lingual_combine import combine, resolve_mu
from .neuron_importance import (GRANULARITIES, ImportanceMap, check_pattern, export_mask, import_mask, importance,
                                mask_union, project_update, top_k_mask)
from .tensor_select import METRICS, TAKES, read_selection, select_last, similarity_report, write_selection
from .tensor_store import file_digest, open_store, save, write_text_atomic
from .transfer_merge import DEFAULT_ETA, DEFAULT_GAMMA, MergePlan, write_merged

# ---------------------------------------------------------------------------
# parameters


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise UsageError(f"{where}: expected a finite number, got {value!r}")
    return float(value)


def _positive(value, where: str) -> float:
    value = _number(value, where)
    if value <= 0:
        raise UsageError(f"{where}: must be positive")
    return value


def _percent(value, where: str) -> float:
    value = _number(value, where)
    if not 0.0 < value <= 100.0:
        raise UsageError(f"{where}: must be in (0, 100], got {value!r}")
    return value


def _choice(options: tuple[str, ...]):
    def check(value, where: str) -> str:
        if value not in options:
            raise UsageError(f"{where}: must be one of {list(options)}, got {value!r}")
        return value
    return check


def _patterns(value, where: str) -> list[str]:
    if not isinstance(value, list) or not all(isinstance(p, str) for p in value):
        raise UsageError(f"{where}: expected a list of glob patterns")
    for p in value:
        try:
            check_pattern(p)
        except UsageError as exc:
            raise UsageError(f"{where}: {exc}") from None
    return list(value)


def _mu(value, where: str) -> dict[str, float]:
    if not isinstance(value, dict):
        raise UsageError(f"{where}: expected a map from language id to number")
    return {str(k): _number(v, f"{where}.{k}") for k, v in value.items()}


def _flag(value, where: str) -> bool:
    if not isinstance(value, bool):
        raise UsageError(f"{where}: expected true or false")
    return value


def _text(value, where: str) -> str:
    if not isinstance(value, str) or not value:
        raise UsageError(f"{where}: expected a non-empty string")
    return value


PARAMS: dict[str, Callable[[Any, str], Any]] = {
    "alpha": _number, "beta": _number, "gamma": _number, "eta": _number,
    "lambda_scale": _positive,
    "k1_percent": _percent, "k2_percent": _percent,
    "granularity": _choice(GRANULARITIES), "metric": _choice(METRICS), "take": _choice(TAKES),
    "include": _patterns, "exclude": _patterns,
    "mu": _mu, "eta_everywhere": _flag,
    "kind": _choice(("ability", "language")), "id": _text,
}

DEFAULTS: dict[str, Any] = {
    "alpha": DEFAULT_ALPHA, "beta": DEFAULT_BETA, "gamma": DEFAULT_GAMMA, "eta": DEFAULT_ETA,
    "lambda_scale": 1.0, "k1_percent": 5.0, "k2_percent": 80.0,
    "granularity": "scalar", "metric": "dot", "take": "last",
    "include": [], "exclude": [], "mu": {}, "eta_everywhere": False, "kind": "ability",
}

# ---------------------------------------------------------------------------
# stage operations (shared with the command-line subcommands)


def _diff(inp, p, out, threads):
    save(diff(open_store(inp["trained"]), open_store(inp["base"])), out, threads=threads)


def _importance(inp, p, out, threads):
    importance(open_store(inp["base"]), open_store(inp["probe"]), p["granularity"], p["lambda_scale"]).save(out)


def _mask(inp, p, out, threads):
    imp = ImportanceMap.load(inp["importance"])
    export_mask(top_k_mask(imp, p["k1_percent"], p["include"] or None, p["exclude"] or None), out)


def _mask_union(inp, p, out, threads):
    export_mask(functools.reduce(mask_union, [import_mask(m) for m in inp["masks"]]), out)


def _project(inp, p, out, threads):
    store = project_update(open_store(inp["base"]), open_store(inp["trained"]), import_mask(inp["mask"]))
    save(store, out, threads=threads)


def _extract(inp, p, out, threads):
    trained, base = open_store(inp["trained"]), open_store(inp["base"])
    reference = open_store(inp["reference"]) if inp.get("reference") else None
    if p["kind"] == "ability":
        if reference is None:
            raise UsageError("ability extraction needs the reference-language model as 'reference'")
        store = extract_ability(trained, reference, base, p["alpha"], p["beta"], p.get("id", "ability"))
    else:
        store = extract_language(trained, base, p.get("id", "language"), reference, p["alpha"], p["beta"])
    save(store, out, threads=threads)


def _combine(inp, p, out, threads):
    mu = resolve_mu(list(inp["weights"]), p["mu"])
    items = [(lang, open_store(path), mu[lang]) for lang, path in inp["weights"].items()]
    save(combine(items), out, threads=threads)


def _select(inp, p, out, threads):
    report = similarity_report(open_store(inp["ability"]), open_store(inp["multilingual"]), p["metric"], threads)
    selection = select_last(report, p["k2_percent"], p["include"] or None, p["exclude"] or None, p["take"])
    write_selection(report, selection, out)


def _merge(inp, p, out, threads):
    write_merged(plan_from(inp, p), out, threads)


def plan_from(inp: Mapping[str, Any], p: Mapping[str, Any]) -> MergePlan:
    return MergePlan(open_store(inp["base"]), open_store(inp["ability"]), open_store(inp["multilingual"]),
                     read_selection(inp["selection"]).names, p["gamma"], p["eta"], p["eta_everywhere"])


@dataclass(frozen=True)
class Op:
    fn: Callable[[dict, dict, Path, int | None], None]
    inputs: dict[str, str]  # role -> "one" | "optional" | "list" | "map"
    params: tuple[str, ...] = ()


OPS: dict[str, Op] = {
    "diff": Op(_diff, {"trained": "one", "base": "one"}),
    "importance": Op(_importance, {"base": "one", "probe": "one"}, ("granularity", "lambda_scale")),
    "mask": Op(_mask, {"importance": "one"}, ("k1_percent", "include", "exclude")),
    "mask-union": Op(_mask_union, {"masks": "list"}),
    "project": Op(_project, {"base": "one", "trained": "one", "mask": "one"}),
    "extract": Op(_extract, {"trained": "one", "base": "one", "reference": "optional"},
                  ("kind", "alpha", "beta", "id")),
    "combine": Op(_combine, {"weights": "map"}, ("mu",)),
    "select": Op(_select, {"ability": "one", "multilingual": "one"},
                 ("k2_percent", "metric", "include", "exclude", "take")),
    "merge": Op(_merge, {"base": "one", "ability": "one", "multilingual": "one", "selection": "one"},
                ("gamma", "eta", "eta_everywhere")),
}


def resolve_params(op: str, hyper: Mapping[str, Any], own: Mapping[str, Any]) -> dict[str, Any]:
    """Defaults, then manifest-wide ``hyper``, then the stage's own values."""
    keys = OPS[op].params
    out = {k: DEFAULTS[k] for k in keys if k in DEFAULTS}
    out.update({k: v for k, v in hyper.items() if k in keys})
    if op == "extract" and own.get("kind", out.get("kind")) == "language":
        # the ability coefficients never leak into language weights
        out.update(alpha=1.0, beta=0.0)
    out.update({k: v for k, v in own.items() if k in keys})
    return out


# ---------------------------------------------------------------------------
# manifest


@dataclass
class Stage:
    name: str
    op: str
    inputs: dict[str, Any]
    params: dict[str, Any]
    out: str

    def refs(self) -> list[str]:
        found = []
        for value in self.inputs.values():
            values = value.values() if isinstance(value, dict) else value if isinstance(value, list) else [value]
            found += [v[1:] for v in values if isinstance(v, str) and v.startswith("@")]
        return found


@dataclass
class Manifest:
    root: Path
    out_dir: Path
    hyper: dict[str, Any]
    stages: list[Stage]

    def order(self) -> list[Stage]:
        by_name = {s.name: s for s in self.stages}
        graph = graphlib.TopologicalSorter({s.name: s.refs() for s in self.stages})
        return [by_name[n] for n in graph.static_order()]


def _fields(doc: Mapping, allowed: set[str], where: str) -> None:
    for key in doc:
        if key not in allowed:
            raise UsageError(f"{where}.{key}: unknown field" if where else f"{key}: unknown field")


def _check_input(value, kind: str, where: str) -> Any:
    if kind in ("one", "optional"):
        return _text(value, where)
    if kind == "list":
        if not isinstance(value, list) or not value:
            raise UsageError(f"{where}: expected a non-empty list of inputs")
        return [_text(v, f"{where}[{i}]") for i, v in enumerate(value)]
    if not isinstance(value, dict) or not value:
        raise UsageError(f"{where}: expected a non-empty map of inputs")
    return {str(k): _text(v, f"{where}.{k}") for k, v in value.items()}


def parse_manifest(doc: Any, root: Path) -> Manifest:
    """Validate a manifest document; every error names the offending field."""
    if not isinstance(doc, dict):
        raise UsageError("manifest: expected a JSON object")
    _fields(doc, {"out_dir", "hyper", "stages"}, "")
    out_dir = root / _text(doc.get("out_dir", "."), "out_dir")
    hyper = doc.get("hyper", {})
    if not isinstance(hyper, dict):
        raise UsageError("hyper: expected an object")
    _fields(hyper, set(PARAMS), "hyper")
    hyper = {k: PARAMS[k](v, f"hyper.{k}") for k, v in hyper.items()}
    raw_stages = doc.get("stages")
    if not isinstance(raw_stages, list) or not raw_stages:
        raise UsageError("stages: expected a non-empty list")

    stages, outs = [], {}
    for i, raw in enumerate(raw_stages):
        where = f"stages[{i}]"
        if not isinstance(raw, dict):
            raise UsageError(f"{where}: expected an object")
        _fields(raw, {"name", "op", "inputs", "params", "out"}, where)
        name = _text(raw.get("name"), f"{where}.name")
        if name.startswith("@") or name in {s.name for s in stages}:
            raise UsageError(f"{where}.name: duplicate or invalid stage name {name!r}")
        op = raw.get("op")
        if op not in OPS:
            raise UsageError(f"{where}.op: unknown operation {op!r}; expected one of {sorted(OPS)}")
        op_def = OPS[op]
        inputs = raw.get("inputs")
        if not isinstance(inputs, dict):
            raise UsageError(f"{where}.inputs: expected an object")
        _fields(inputs, set(op_def.inputs), f"{where}.inputs")
        checked = {}
        for role, kind in op_def.inputs.items():
            if role not in inputs:
                if kind == "optional":
                    continue
                raise UsageError(f"{where}.inputs.{role}: required")
            checked[role] = _check_input(inputs[role], kind, f"{where}.inputs.{role}")
        params = raw.get("params", {})
        if not isinstance(params, dict):
            raise UsageError(f"{where}.params: expected an object")
        _fields(params, set(op_def.params), f"{where}.params")
        params = {k: PARAMS[k](v, f"{where}.params.{k}") for k, v in params.items()}
        out = _text(raw.get("out"), f"{where}.out")
        target = os.path.normpath(out_dir / out)
        if target in outs:
            raise UsageError(f"{where}.out: same output as stage {outs[target]!r}")
        outs[target] = name
        stages.append(Stage(name, op, checked, params, out))

    names = {s.name for s in stages}
    for i, stage in enumerate(stages):
        for role, value in stage.inputs.items():
            values = value.items() if isinstance(value, dict) else enumerate(value) if isinstance(value, list) \
                else [(None, value)]
            for key, v in values:
                where = f"stages[{i}].inputs.{role}" + ("" if key is None else f"[{key!r}]")
                if v.startswith("@"):
                    if v[1:] not in names:
                        raise UsageError(f"{where}: no stage named {v[1:]!r}")
                    if v[1:] == stage.name:
                        raise UsageError(f"{where}: stage refers to its own output")
                elif not (root / v).is_file():
                    raise UsageError(f"{where}: file not found: {v}")

    manifest = Manifest(root, out_dir, hyper, stages)
    try:
        manifest.order()
    except graphlib.CycleError as exc:
        cycle = " -> ".join(exc.args[1])
        raise UsageError(f"stages: reference cycle {cycle}") from None
    return manifest


def _unique_keys(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise UsageError(f"manifest: duplicate key {key!r}")
        out[key] = value
    return out


def load_manifest(path: str | os.PathLike) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"), object_pairs_hook=_unique_keys)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise UsageError(f"manifest: not valid JSON ({exc})") from None
    return parse_manifest(doc, path.parent)


@dataclass
class RunResult:
    out_dir: Path
    outputs: dict[str, Path]


def provenance_path(output: Path) -> Path:
    return output.with_name(output.name + ".provenance.json")


def run_manifest(path: str | os.PathLike | Manifest, threads: int | None = None) -> RunResult:
    """Execute every stage in dependency order.

    A failing stage raises ``StageError`` after its output and provenance
    files are removed; outputs of completed stages stay in place.
    """
    manifest = path if isinstance(path, Manifest) else load_manifest(path)
    manifest.out_dir.mkdir(parents=True, exist_ok=True)
    outputs: dict[str, Path] = {}

    def locate(value: str) -> Path:
        return outputs[value[1:]] if value.startswith("@") else manifest.root / value

    def resolve(value):
        if isinstance(value, dict):
            return {k: locate(v) for k, v in value.items()}
        if isinstance(value, list):
            return [locate(v) for v in value]
        return locate(value)

    def digest(value):
        if isinstance(value, dict):
            return {k: digest(v) for k, v in value.items()}
        if isinstance(value, list):
            return [digest(v) for v in value]
        return file_digest(value)

    for stage in manifest.order():
        out = manifest.out_dir / stage.out
        prov = provenance_path(out)
        params = resolve_params(stage.op, manifest.hyper, stage.params)
        try:
            out.parent.mkdir(parents=True, exist_ok=True)
            inputs = {role: resolve(v) for role, v in stage.inputs.items()}
            OPS[stage.op].fn(inputs, params, out, threads)
            record = {
                "stage": stage.name,
                "op": stage.op,
                "inputs": {role: {"ref": stage.inputs[role], "digest": digest(inputs[role])} for role in inputs},
                "params": params,
                "output": {"path": stage.out, "digest": file_digest(out)},
            }
            write_text_atomic(prov, json.dumps(record, indent=1, sort_keys=True) + "\n")
        except Exception as exc:
            out.unlink(missing_ok=True)
            prov.unlink(missing_ok=True)
            raise StageError(stage.name, exc) from exc
        outputs[stage.name] = out
    return RunResult(manifest.out_dir, outputs)
