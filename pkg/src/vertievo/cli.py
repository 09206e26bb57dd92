"""Command-line front end.

Every command writes its outputs plus ``manifest.json`` into an output
directory (``--out``, else ``$VERTIEVO_OUT``, else ``./vertievo-out``). The
manifest records the argument vector, seeds, a content hash over every input
that affects results and a hash of each output; ``vertievo rerun`` replays a
manifest into a fresh directory.

Exit codes: 0 success, 2 usage error, 3 validation error, 4 runtime or
numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .bilevel import DataSplit, OuterGaParams, SplitError, evolve_weights
from .convex import InfeasibleError, NonConvergenceError, RelaxConfig
from .ga import VARIANTS, CostWeights, GaParams, emit_triplet, ga_optimize, variant_weights
from .metrics import COST_LIKE, BENEFIT_LIKE, MetricVector, UndefinedMetricError, compute_metrics, format_duration, improvement_rate
from .prompts import EvaluationError, Prompt, PromptFitnessParams, PromptGaParams, embed, evolve_prompts, load_task, mock_worker
from .registry import CognitiveSignature, RecordValidationError, Registry, RegistryError, Triplet, distill, parse_signature_document
from .rr import rr_schedule
from .scenario import ConfigurationError, ScenarioValidationError, dump_scenario, generate_scenario, load_scenario, parse_scenario, reference_generation_spec, spec_from_document

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4
OUT_ENV = "VERTIEVO_OUT"
METRIC_ROWS = ("avg_wait", "max_wait", "std_wait", "tail_95", "pct_no_wait", "pct_long_wait", "penalty_total", "throughput")

log = logging.getLogger("vertievo")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# output helpers


class Outputs:
    """Collects output files for one command and writes the manifest."""

    def __init__(self, root: Path, command: str, argv: Sequence[str]):
        self.root = root
        self.command = command
        self.argv = list(argv)
        self.inputs: dict[str, str] = {}
        self.seeds: dict[str, int] = {}
        self.files: dict[str, str] = {}
        root.mkdir(parents=True, exist_ok=True)

    def add_input(self, path: str | Path) -> bytes:
        data = Path(path).read_bytes()
        self.inputs[str(path)] = hashlib.sha256(data).hexdigest()
        return data

    def add_input_dir(self, path: Path, pattern: str = "*.json") -> list[Path]:
        files = sorted(path.glob(pattern))
        for f in files:
            self.add_input(f)
        return files

    def write_text(self, name: str, text: str) -> Path:
        p = self.root / name
        p.write_text(text, encoding="utf-8")
        self.files[name] = hashlib.sha256(text.encode()).hexdigest()
        return p

    def write_json(self, name: str, obj: Any) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")

    def write_csv(self, name: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])
        return self.write_text(name, buf.getvalue())

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({"command": self.command, "args": _args_without_out(self.argv), "inputs": sorted(self.inputs.values()), "version": __version__}, sort_keys=True).encode())
        return h.hexdigest()

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "argv": _args_without_out(self.argv),
            "inputs": self.inputs,
            "seeds": self.seeds,
            "content_hash": self.content_hash(),
            "outputs": dict(sorted(self.files.items())),
            "version": __version__,
        }
        (self.root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _args_without_out(argv: Sequence[str]) -> list[str]:
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        out.append(a)
    return out


def _cell(v: Any) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _json_default(o: Any) -> Any:
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _out_dir(args: argparse.Namespace) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "vertievo-out")


def _read_json(path: str | None, outputs: Outputs) -> dict:
    if not path:
        return {}
    try:
        return json.loads(outputs.add_input(path))
    except json.JSONDecodeError as exc:
        raise ScenarioValidationError(f"{path}: malformed JSON: {exc.msg}", "<document>", exc.lineno) from exc


def _dataclass_from(cls, d: dict, **over):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {**d, **{k: v for k, v in over.items() if v is not None}}
    return cls(**kw)


def _scenario_from_args(args: argparse.Namespace, outputs: Outputs):
    if getattr(args, "scenario", None):
        outputs.add_input(args.scenario)
        return load_scenario(args.scenario)
    outputs.seeds["scenario"] = args.scenario_seed
    return generate_scenario(reference_generation_spec(args.scenario_seed))


# --------------------------------------------------------------------------
# commands


def cmd_generate(args: argparse.Namespace, outputs: Outputs) -> None:
    if args.config:
        doc = _read_json(args.config, outputs)
        if args.seed is not None:
            doc["seed"] = args.seed
        sc = parse_scenario(json.dumps(doc)) if "requests" in doc else generate_scenario(spec_from_document(doc))
    else:
        sc = generate_scenario(reference_generation_spec(2025 if args.seed is None else args.seed))
    outputs.seeds["scenario"] = sc.seed
    outputs.write_text("scenario.json", dump_scenario(sc))


def _schedule_rows(sc, schedule, waits) -> list[list[Any]]:
    return [
        [r.id, r.class_id, r.release_time, int(schedule.starts[i]), int(schedule.pads[i]), int(waits[i])]
        for i, r in enumerate(sc.requests)
    ]


def _cost_weights(args: argparse.Namespace, outputs: Outputs, variant: str) -> CostWeights:
    if getattr(args, "weights", None):
        d = _read_json(args.weights, outputs)
        return CostWeights.from_dict({"variant": "custom", **d})
    return variant_weights(variant)


def _ga_params(args: argparse.Namespace, outputs: Outputs) -> GaParams:
    d = _read_json(getattr(args, "params", None), outputs)
    p = _dataclass_from(GaParams, d, seed=args.seed, generations=getattr(args, "generations", None), pop_size=getattr(args, "pop_size", None))
    outputs.seeds["ga"] = p.seed
    return p


def cmd_schedule(args: argparse.Namespace, outputs: Outputs) -> None:
    sc = _scenario_from_args(args, outputs)
    header = ["request_id", "class_id", "release_time", "start", "pad", "wait"]
    if args.algo == "rr":
        schedule, waits = rr_schedule(sc, args.quantum)
        metrics = compute_metrics(waits, schedule, sc)
        outputs.write_json("metrics.json", {"algo": "rr", "quantum": args.quantum, "metrics": metrics.as_dict(), "schedule_digest": schedule.digest()})
    else:
        if args.variant not in VARIANTS[:-1] and not args.weights:
            raise UsageError(f"unknown variant {args.variant!r}; choose one of {', '.join(VARIANTS[:-1])}")
        w = _cost_weights(args, outputs, args.variant)
        p = _ga_params(args, outputs)
        res = ga_optimize(sc, w, p)
        schedule, waits, metrics = res.schedule, res.waits, res.metrics
        outputs.write_json(
            "metrics.json",
            {"algo": "ga", "cost_weights": w.as_dict(), "ga_params": asdict(p), "cost": res.cost, "metrics": metrics.as_dict(), "schedule_digest": schedule.digest()},
        )
        outputs.write_csv("trace.csv", ["generation", "best", "mean"], res.trace.rows())
        if args.registry:
            reg = Registry(args.registry)
            t = emit_triplet(args.prompt_id or f"{w.variant}-seed{p.seed}", w, res, prompt_text=args.prompt_text or "", user_id=args.user)
            rid = reg.store_unique(t)
            outputs.write_json("triplet.json", {"id": rid, "record": t.to_json()})
    outputs.write_csv("schedule.csv", header, _schedule_rows(sc, schedule, waits))


def comparison_table(results: dict[str, MetricVector], baseline: str | None) -> tuple[list[str], list[list[Any]]]:
    cols = list(results)
    rows: list[list[Any]] = []
    for m in METRIC_ROWS:
        rows.append([m] + [getattr(results[c], m) for c in cols])
    for m in ("avg_wait", "max_wait"):
        rows.append([f"{m}_mmss"] + [format_duration(getattr(results[c], m)) for c in cols])
    if baseline is not None:
        for m in METRIC_ROWS:
            if m not in COST_LIKE + BENEFIT_LIKE:
                continue
            row: list[Any] = [f"improvement_vs_{baseline}:{m}"]
            for c in cols:
                try:
                    row.append(round(improvement_rate(results[baseline], results[c], m), 2) if c.startswith("v") else "")
                except UndefinedMetricError:
                    row.append("n/a")
            rows.append(row)
    return ["metric"] + cols, rows


def cmd_compare(args: argparse.Namespace, outputs: Outputs) -> None:
    sc = _scenario_from_args(args, outputs)
    bad = [v for v in args.variant if v not in VARIANTS[:-1]]
    if bad:
        raise UsageError(f"unknown variant(s) {bad}; choose from {', '.join(VARIANTS[:-1])}")
    p = _ga_params(args, outputs)
    schedule, waits = rr_schedule(sc)
    results: dict[str, MetricVector] = {"RR": compute_metrics(waits, schedule, sc)}
    costs = {}
    for v in args.variant:
        res = ga_optimize(sc, variant_weights(v), p)
        results[v] = res.metrics
        costs[v] = res.cost
    baseline = "v1" if "v1" in results else None
    header, rows = comparison_table(results, baseline)
    outputs.write_csv("comparison.csv", header, rows)
    outputs.write_json(
        "comparison.json",
        {"scenario_requests": sc.n, "ga_params": asdict(p), "results": {k: v.as_dict() for k, v in results.items()}, "ga_costs": costs, "baseline": baseline},
    )


def cmd_bilevel(args: argparse.Namespace, outputs: Outputs) -> None:
    root = Path(args.scenarios)
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    files = outputs.add_input_dir(root)
    if len(files) < 3:
        raise UsageError(f"need at least 3 scenarios for a train/validation/test split, found {len(files)}")
    scenarios = [(f.stem, load_scenario(f)) for f in files]
    d = _read_json(args.params, outputs)
    relax = _dataclass_from(RelaxConfig, d.pop("relax", {}))
    split_seed = int(d.pop("split_seed", 0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p = _dataclass_from(OuterGaParams, d, seed=args.seed)
    for msg in p.advisories():
        log.warning("outer GA parameter advisory: %s", msg)
    outputs.seeds.update({"outer_ga": p.seed, "split": split_seed})
    split = DataSplit.stratified(scenarios, seed=split_seed, config=relax)
    _, report = evolve_weights(split, p)
    doc = report.as_dict()
    doc["split"] = {"train": [c.name for c in split.train], "validation": [c.name for c in split.validation], "test": list(split.test.names())}
    outputs.write_json(args.report_name, doc)
    outputs.write_csv("outer_trace.csv", ["generation", "best", "mean"], [(g, b, m) for g, (b, m) in enumerate(zip(report.trace["best"], report.trace["mean"]))])
    outputs.write_csv(
        "panels.csv",
        ["class_id", "weather", "n", "mean_wait", "std_wait", "tail_95", "throughput_per_hour"],
        [[pn[k] for k in ("class_id", "weather", "n", "mean_wait", "std_wait", "tail_95", "throughput_per_hour")] for pn in report.panels],
    )


def cmd_prompt_evolve(args: argparse.Namespace, outputs: Outputs) -> None:
    task, seeds = load_task(outputs.add_input(args.task).decode())
    if not seeds:
        raise ScenarioValidationError("task document has no seed_prompts", "seed_prompts")
    d = _read_json(args.params, outputs)
    fp = _dataclass_from(PromptFitnessParams, d.get("fitness", {}))
    gp = _dataclass_from(PromptGaParams, d.get("ga", {}), seed=args.seed, generations=args.generations)
    outputs.seeds["prompt_ga"] = gp.seed
    res = evolve_prompts(task, seeds, fp, gp, mock_worker(task))
    outputs.write_text("trace.csv", res.trace_csv())
    outputs.write_json(
        "result.json",
        {
            "best": {"id": res.best.id, "text": res.best.text, "fitness": res.best_fitness},
            "ku": sorted(res.keywords.ku),
            "ki": sorted(res.keywords.ki),
            "planted_recovered": sorted(task.planted & res.keywords.ku),
            "population": [{"id": p.id, "text": p.text, "fitness": f} for p, f in zip(res.population, res.fitness)],
            "warnings": res.warnings,
        },
    )
    if args.registry:
        reg = Registry(args.registry)
        rid = reg.store_unique(
            Triplet(
                prompt_id=res.best.id,
                prompt_text=res.best.text,
                fitness=res.best_fitness,
                solution_summary={"task": task.name, "ku": sorted(res.keywords.ku), "ki": sorted(res.keywords.ki)},
                user_id=args.user,
                domain=task.name,
            )
        )
        outputs.write_json("triplet.json", {"id": rid})


def cmd_registry(args: argparse.Namespace, outputs: Outputs) -> None:
    reg = Registry(args.registry)
    if args.action == "list":
        rows = []
        for rid, r in reg.scan():
            if isinstance(r, Triplet):
                rows.append([rid, "triplet", r.user_id, r.domain, r.fitness, r.prompt_text])
            else:
                rows.append([rid, "signature", r.user, r.domain, r.rho, "; ".join(t.prompt for t in r.top_prompts)])
        outputs.write_csv("registry_list.csv", ["id", "kind", "user", "domain", "score", "text"], rows)
    elif args.action == "ingest":
        if not args.file:
            raise UsageError("registry ingest needs --file")
        text = outputs.add_input(args.file).decode()
        rec = parse_signature_document(text)
        rid = reg.store_unique(rec)
        outputs.write_json("ingested.json", {"id": rid, "record": rec.to_json()})
    elif args.action == "query":
        if args.text:
            vec = embed(Prompt.from_text(args.text))
        elif args.like:
            vec = reg.get(args.like).vector()
        else:
            raise UsageError("registry query needs --text or --like")
        if not len(reg):
            outputs.write_csv("query.csv", ["rank", "id", "similarity"], [])
            return
        hits = reg.query_similar(vec, args.k)
        outputs.write_csv("query.csv", ["rank", "id", "similarity"], [[i + 1, rid, s] for i, (rid, s) in enumerate(hits)])
    elif args.action == "distill":
        lib = distill(reg, args.top_k, maximize=not args.minimize)
        outputs.write_json(
            "patterns.json",
            {dom: {"ku_union": list(e.ku_union), "records": [{"id": rid, **t.to_json()} for rid, t in e.records]} for dom, e in lib.items()},
        )


def cmd_plot(args: argparse.Namespace, outputs: Outputs) -> None:
    """Write whitespace-separated columns gnuplot can plot directly."""
    src = Path(args.input)
    data = outputs.add_input(src).decode()
    if src.suffix == ".csv":
        rows = list(csv.reader(io.StringIO(data)))
        header, body = rows[0], rows[1:]
        numeric = [r for r in body if all(_is_number(c) for c in r)]
        if not numeric:
            raise ScenarioValidationError(f"{src} has no all-numeric rows to plot", "<document>")
        text = "# " + " ".join(header) + "\n" + "".join(" ".join(r) + "\n" for r in numeric)
    else:
        doc = json.loads(data)
        results = doc.get("results")
        if not results:
            raise ScenarioValidationError(f"{src} holds no 'results' table", "results")
        cols = list(results)
        text = "# metric " + " ".join(cols) + "\n"
        for m in METRIC_ROWS:
            text += m + " " + " ".join(repr(float(results[c][m])) for c in cols) + "\n"
    outputs.write_text(args.name, text)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def cmd_rerun(args: argparse.Namespace, outputs: Outputs) -> None:  # pragma: no cover - dispatched in main
    raise AssertionError("handled in main")


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vertievo", description="Vertiport take-off scheduling, bilevel weight evolution, prompt evolution and registry tools.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./vertievo-out)")
        p.add_argument("--seed", type=int, help="random seed for the command's own search")

    def scenario_opts(p: argparse.ArgumentParser) -> None:
        p.add_argument("--scenario", help="scenario JSON file (default: the reference desk scenario)")
        p.add_argument("--scenario-seed", type=int, default=2025, help="seed of the reference scenario when --scenario is absent")

    p = sub.add_parser("generate", help="generate a scenario file")
    common(p)
    p.add_argument("--config", help="scenario JSON (classes, weather, horizon); default is the reference desk scenario")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("schedule", help="run one scheduler on a scenario")
    common(p)
    scenario_opts(p)
    p.add_argument("--algo", choices=("rr", "ga"), default="rr")
    p.add_argument("--variant", default="v1", help="GA cost variant v1..v5")
    p.add_argument("--weights", help="JSON file of custom cost weights (overrides --variant)")
    p.add_argument("--params", help="JSON file of GA parameters")
    p.add_argument("--config", dest="params", help="alias of --params")
    p.add_argument("--generations", type=int)
    p.add_argument("--pop-size", type=int)
    p.add_argument("--quantum", type=int, default=30)
    p.add_argument("--registry", help="store the run as a triplet in this registry directory")
    p.add_argument("--prompt-id")
    p.add_argument("--prompt-text")
    p.add_argument("--user", default="anonymous")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("compare", help="RR versus GA variants on one scenario")
    common(p)
    scenario_opts(p)
    p.add_argument("--variant", nargs="*", default=[], help="GA variants to run (none: RR only)")
    p.add_argument("--params", help="JSON file of GA parameters")
    p.add_argument("--config", dest="params", help="alias of --params")
    p.add_argument("--generations", type=int)
    p.add_argument("--pop-size", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bilevel", help="evolve inner-objective weights over a scenario directory")
    common(p)
    p.add_argument("--scenarios", required=True, help="directory of scenario JSON files (at least 3)")
    p.add_argument("--params", help="JSON: outer GA fields, optional 'relax' and 'split_seed'")
    p.add_argument("--config", dest="params", help="alias of --params")
    p.add_argument("--report-name", default="report.json")
    p.set_defaults(func=cmd_bilevel)

    p = sub.add_parser("prompt-evolve", help="evolve prompts against the mock worker")
    common(p)
    p.add_argument("--task", required=True, help="task JSON: planted, distractors, vocabulary, seed_prompts")
    p.add_argument("--params", help="JSON with optional 'fitness' and 'ga' sections")
    p.add_argument("--config", dest="params", help="alias of --params")
    p.add_argument("--generations", type=int)
    p.add_argument("--registry", help="store the best prompt as a triplet here")
    p.add_argument("--user", default="anonymous")
    p.set_defaults(func=cmd_prompt_evolve)

    p = sub.add_parser("registry", help="inspect or extend a registry directory")
    common(p)
    p.add_argument("action", choices=("list", "query", "distill", "ingest"))
    p.add_argument("--registry", required=True)
    p.add_argument("--text", help="query text")
    p.add_argument("--like", help="query with the vector of an existing record id")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--minimize", action="store_true", help="distill treats lower fitness as better")
    p.add_argument("--file", help="signature document to ingest")
    p.set_defaults(func=cmd_registry)

    p = sub.add_parser("plot", help="write gnuplot-ready data from a trace CSV or comparison JSON")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--name", default="plot.dat")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("rerun", help="replay a manifest into a new output directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=None)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "rerun":
        try:
            manifest = json.loads(Path(args.manifest).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read manifest: {exc}", file=sys.stderr)
            return EXIT_USAGE
        replay = list(manifest["argv"])
        if args.out:
            replay += ["--out", args.out]
        return main(replay)

    outputs = Outputs(_out_dir(args), args.command, argv)
    handlers: list[tuple[tuple[type[BaseException], ...], int]] = [
        ((UsageError, SplitError), EXIT_USAGE),
        ((ScenarioValidationError, RecordValidationError, ConfigurationError, KeyError, TypeError, ValueError, UndefinedMetricError), EXIT_VALIDATION),
        ((InfeasibleError, NonConvergenceError, RegistryError, EvaluationError, OSError, ArithmeticError, RuntimeError), EXIT_RUNTIME),
    ]
    func: Callable = args.func
    try:
        func(args, outputs)
    except tuple(e for group, _ in handlers for e in group) as exc:
        for group, code in handlers:
            if isinstance(exc, group):
                print(f"error: {exc}", file=sys.stderr)
                return code
    outputs.finish()
    print(str(outputs.root))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
