"""Command-line front end: fit, select, simulate, summarize, bench, replay."""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .data import DataError, Dataset, load_csv
from .estim import EstimationError, StoppingRules, initial_fit
from .model import (BlockPartition, CcmModel, ModelError, model_to_json, read_model, sample_codes,
                    write_model)
from .select import SearchConfig, search_report, select_model

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INTERNAL = 0, 2, 3, 4

log = logging.getLogger("ccmix")


class InputError(ValueError):
    pass


# --- helpers -------------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def _load(args) -> Dataset:
    return load_csv(args.data, schema=args.schema, header=not args.no_header)


def _rules(args) -> StoppingRules:
    return StoppingRules(r_max=args.r_max, s_max=args.s_max, t_max=args.t_max, q_max=args.qmax)


def _config(args, g_max: int) -> SearchConfig:
    return SearchConfig(g_max=g_max, chains=args.chains, q_max=args.qmax, rules=_rules(args),
                        seed=args.seed, workers=args.workers)


def parse_sigma(text: str, g: int, m) -> BlockPartition:
    """Partition from JSON nested lists of 1-based variables.

    A single component's list of blocks is replicated over all classes.
    """
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"--sigma is not valid JSON: {exc}") from None
    if not isinstance(obj, list) or not obj:
        raise InputError("--sigma must be a non-empty list")
    if all(isinstance(b, list) and b and all(isinstance(j, int) for j in b) for b in obj):
        obj = [obj] * g
    if len(obj) != g:
        raise InputError(f"--sigma describes {len(obj)} components, expected {g}")
    try:
        comps = [[[int(j) - 1 for j in block] for block in comp] for comp in obj]
        return BlockPartition.from_lists(comps, m)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid --sigma for d={len(m)}: {exc}") from None


def _fit_row(model: CcmModel) -> str:
    meta = model.meta
    return f"g={model.g}\tloglik={meta.loglik:.4f}\tBIC={meta.bic:.4f}\tnu={meta.n_params}"


def _check_finite(model: CcmModel) -> None:
    if not math.isfinite(model.meta.loglik):
        raise FloatingPointError("non-finite log-likelihood")


def write_manifest(path, command: str, argv: list, input_path, config: dict, outputs: dict,
                   started: str) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "input": None if input_path is None else str(input_path),
        "config": config,
        "outputs": {k: str(v) for k, v in outputs.items() if v is not None},
        "started": started,
        "finished": _now(),
        "version": __version__,
    }
    _write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _manifest_path(args, default_base) -> Optional[Path]:
    if args.no_manifest:
        return None
    if args.manifest:
        return Path(args.manifest)
    return Path(str(default_base) + ".manifest.json")


def _config_dict(args, **extra) -> dict:
    out = {"chains": args.chains, "qmax": args.qmax, "seed": args.seed, "r_max": args.r_max,
           "s_max": args.s_max, "t_max": args.t_max}
    out.update(extra)
    return out


# --- SVG summary ---------------------------------------------------------

SVG_WIDTH = 760
SVG_HEIGHT = 480
LABEL_W = 60
RHO_W = 160
TAU_W = 200
GAP = 20


def _f(v: float) -> str:
    return f"{v:.2f}"


def summary_svg(model: CcmModel) -> str:
    """Class-by-class picture of a fitted model.

    Classes are horizontal bands, tallest first, with height proportional to
    their proportion.  Each band shows, for its blocks sorted by decreasing
    dependency weight, a bar for the weight, the sorted modality weights of
    the dependency part, and a block-by-variable membership grid.
    """
    d = model.d
    order = sorted(range(model.g), key=lambda k: (-model.pi[k], k))
    grid_x = LABEL_W + RHO_W + TAU_W + 3 * GAP
    cell_w = (SVG_WIDTH - grid_x - GAP) / d
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SVG_WIDTH}" '
        f'height="{SVG_HEIGHT + 40}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT + 40}">',
        '<style>text{font-family:sans-serif;font-size:11px}</style>',
        f'<text x="{LABEL_W + GAP}" y="14">rho</text>',
        f'<text x="{LABEL_W + RHO_W + 2 * GAP}" y="14">tau</text>',
        f'<text x="{_f(grid_x)}" y="14">variables</text>',
    ]
    for j in range(d):
        cx = grid_x + (j + 0.5) * cell_w
        parts.append(f'<text x="{_f(cx)}" y="30" text-anchor="middle">{j + 1}</text>')
    y = 40.0
    cum = 0.0
    for k in order:
        h = SVG_HEIGHT * float(model.pi[k])
        cum += float(model.pi[k])
        parts.append(f'<g class="class" data-class="{k + 1}">')
        parts.append(f'<rect x="0" y="{_f(y)}" width="{SVG_WIDTH}" height="{_f(h)}" '
                     'fill="none" stroke="black"/>')
        parts.append(f'<text x="4" y="{_f(y + h / 2)}">{_f(cum)}</text>')
        comp = model.partition.components[k]
        blocks = sorted(range(len(comp)), key=lambda b: (-model.blocks[k][b].rho, b))
        row_h = h / len(comp)
        for r, b in enumerate(blocks):
            theta = model.blocks[k][b]
            ry = y + r * row_h
            bar_h = max(row_h * 0.6, 0.0)
            by = ry + (row_h - bar_h) / 2
            if len(comp[b]) > 1:
                parts.append(f'<rect class="rho" x="{LABEL_W + GAP}" y="{_f(by)}" '
                             f'width="{_f(RHO_W * theta.rho)}" height="{_f(bar_h)}" fill="gray"/>')
                if theta.rho > 0 and theta.maxdep is not None:
                    tau = sorted((float(t) for t in theta.maxdep.tau), reverse=True)
                    slot = bar_h / len(tau)
                    for i, t in enumerate(tau):
                        parts.append(f'<rect class="tau" x="{LABEL_W + RHO_W + 2 * GAP}" '
                                     f'y="{_f(by + i * slot)}" width="{_f(TAU_W * t)}" '
                                     f'height="{_f(slot)}" fill="gray" stroke="white"/>')
            members = set(comp[b])
            for j in range(d):
                fill = "black" if j in members else "white"
                parts.append(f'<rect class="cell" x="{_f(grid_x + j * cell_w)}" y="{_f(ry)}" '
                             f'width="{_f(cell_w)}" height="{_f(row_h)}" fill="{fill}" '
                             'stroke="gray"/>')
        parts.append('</g>')
        y += h
    parts.append('</svg>')
    return "\n".join(parts) + "\n"


# --- commands ------------------------------------------------------------

def cmd_fit(args, argv) -> int:
    started = _now()
    data = _load(args)
    rng = np.random.default_rng(args.seed)
    if args.sigma is not None:
        partition = parse_sigma(args.sigma, args.g, data.modality_counts)
        model = initial_fit(data, args.g, partition, _rules(args), rng, args.starts)
        chains = None
    else:
        config = _config(args, args.g)
        result = select_model(data, config, g_values=[args.g])
        model = result.best
        chains = search_report(result)
    _check_finite(model)
    out = Path(args.out)
    write_model(out, model)
    if args.report and chains is not None:
        _write_text(args.report, json.dumps(chains, indent=2, sort_keys=True) + "\n")
    if args.svg:
        _write_text(args.svg, summary_svg(model))
    print(_fit_row(model))
    man = _manifest_path(args, out)
    if man:
        write_manifest(man, "fit", argv, args.data, _config_dict(args, g=args.g, sigma=args.sigma),
                       {"model": out, "report": args.report, "svg": args.svg}, started)
    return EXIT_OK


def cmd_select(args, argv) -> int:
    started = _now()
    data = _load(args)
    result = select_model(data, _config(args, args.g_max))
    for r in result.per_g:
        _check_finite(r.model)
    out = Path(args.out)
    write_model(out, result.best)
    report = search_report(result)
    if args.report:
        _write_text(args.report, json.dumps(report, indent=2, sort_keys=True) + "\n")
    if args.svg:
        _write_text(args.svg, summary_svg(result.best))
    print("g\tBIC\tnu\tseconds")
    for r in result.per_g:
        print(f"{r.g}\t{r.bic:.4f}\t{r.n_params}\t{r.seconds:.1f}")
    print(f"best g={result.g_hat}")
    man = _manifest_path(args, out)
    if man:
        write_manifest(man, "select", argv, args.data, _config_dict(args, g_max=args.g_max),
                       {"model": out, "report": args.report, "svg": args.svg}, started)
    return EXIT_OK


def _scenario_model(text: str) -> CcmModel:
    from .bench import SimScenario
    try:
        obj = json.loads(text)
        sc = SimScenario(int(obj["d"]), float(obj.get("u", 0.0)),
                         None if obj.get("rho") is None else float(obj["rho"]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"invalid --scenario: {exc}") from None
    return sc.model()


def cmd_simulate(args, argv) -> int:
    started = _now()
    if (args.model is None) == (args.scenario is None):
        raise InputError("give exactly one of --model or --scenario")
    model = read_model(args.model) if args.model else _scenario_model(args.scenario)
    if args.n < 0:
        raise InputError("--n must be nonnegative")
    rng = np.random.default_rng(args.seed)
    x, z, y = sample_codes(model, args.n, rng)
    out = Path(args.out)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"V{j + 1}" for j in range(model.d)])
        w.writerows((x + 1).tolist())
    truth_path = Path(args.truth) if args.truth else Path(str(out) + ".truth.json")
    truth = {
        "labels": (z + 1).tolist(),
        "y": [[yb[z == k].astype(int).tolist() for yb in yk] for k, yk in enumerate(y)],
        "model": model_to_json(model),
    }
    _write_text(truth_path, json.dumps(truth, sort_keys=True) + "\n")
    man = _manifest_path(args, out)
    if man:
        write_manifest(man, "simulate", argv, args.model,
                       {"n": args.n, "seed": args.seed, "scenario": args.scenario},
                       {"data": out, "truth": truth_path}, started)
    return EXIT_OK


def cmd_summarize(args, argv) -> int:
    started = _now()
    model = read_model(args.model)
    _write_text(args.out, summary_svg(model))
    man = _manifest_path(args, Path(args.out))
    if man:
        write_manifest(man, "summarize", argv, args.model, {}, {"svg": args.out}, started)
    return EXIT_OK


def cmd_bench(args, argv) -> int:
    from . import bench
    started = _now()
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    if args.study == "delta":
        rows = bench.run_delta_recovery(replicates=args.replicates, rng=rng)
        bench.write_recovery_csv(out, rows)
        summary = {"median_iterations": [
            {"n_vars": k[0], "n_modalities": k[1], "init": k[2], "median": v}
            for k, v in bench.recovery_medians(rows).items()]}
    else:
        config = SearchConfig(g_max=2, chains=args.chains, q_max=args.qmax, seed=args.seed)
        report = bench.run_kl_study(tuple(args.d), tuple(args.n), args.replicates, rng, config=config)
        bench.write_kl_csv(out, report)
        summary = report.summary()
    summary_path = Path(str(out) + ".summary.json")
    _write_text(summary_path, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    man = _manifest_path(args, out)
    if man:
        write_manifest(man, "bench", argv, None, {"study": args.study, "seed": args.seed,
                                                  "replicates": args.replicates},
                       {"csv": out, "summary": summary_path}, started)
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    try:
        manifest = json.loads(Path(args.manifest_file).read_text(encoding="utf-8"))
        old = list(manifest["argv"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"unreadable manifest: {exc}") from None
    return main(old)


# --- parser --------------------------------------------------------------

def _common_search(p):
    p.add_argument("--chains", type=int, default=20, help="independent chains per class count")
    p.add_argument("--qmax", type=int, default=None, help="stall length of a chain (default 20*d)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--r-max", dest="r_max", type=int, default=10)
    p.add_argument("--s-max", dest="s_max", type=int, default=1)
    p.add_argument("--t-max", dest="t_max", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)


def _common_data(p):
    p.add_argument("data", help="CSV file, one categorical variable per column")
    p.add_argument("--schema", default=None, help="JSON file declaring modalities per column")
    p.add_argument("--no-header", action="store_true")


def _common_out(p):
    p.add_argument("--manifest", default=None, help="manifest path (default <out>.manifest.json)")
    p.add_argument("--no-manifest", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccmix", description=__doc__)
    parser.add_argument("--version", action="version", version=f"ccmix {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model with a fixed number of classes")
    _common_data(p)
    p.add_argument("--g", type=int, required=True)
    p.add_argument("--sigma", default=None, help="block partition as JSON nested lists (1-based)")
    p.add_argument("--starts", type=int, default=5, help="random starts when --sigma is given")
    p.add_argument("--out", default="model.json")
    p.add_argument("--report", default=None)
    p.add_argument("--svg", default=None)
    _common_search(p)
    _common_out(p)

    p = sub.add_parser("select", help="search class counts and block structures")
    _common_data(p)
    p.add_argument("--g-max", dest="g_max", type=int, required=True)
    p.add_argument("--out", default="model.json")
    p.add_argument("--report", default=None)
    p.add_argument("--svg", default=None)
    _common_search(p)
    _common_out(p)

    p = sub.add_parser("simulate", help="draw a dataset from a model or a scenario")
    p.add_argument("--model", default=None)
    p.add_argument("--scenario", default=None, help='JSON such as {"d": 4, "u": 0.5}')
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", default=None)
    _common_out(p)

    p = sub.add_parser("summarize", help="draw an SVG summary of a model file")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    _common_out(p)

    p = sub.add_parser("bench", help="run a simulation study")
    p.add_argument("study", choices=["delta", "kl"])
    p.add_argument("--replicates", type=int, default=20)
    p.add_argument("--d", type=int, nargs="+", default=[4])
    p.add_argument("--n", type=int, nargs="+", default=[100, 800])
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--qmax", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _common_out(p)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest_file")
    return parser


COMMANDS = {"fit": cmd_fit, "select": cmd_select, "simulate": cmd_simulate,
            "summarize": cmd_summarize, "bench": cmd_bench, "replay": cmd_replay}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except (DataError, ModelError, InputError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (EstimationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AssertionError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
