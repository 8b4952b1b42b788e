"""Command-line entry point.

Subcommands: feasibility, project, toytrain, env, parse, run.
Exit codes: 0 ok, 1 usage error, 2 validation error (for ``parse``: the
message failed the protocol grammar), 3 runtime error (for ``parse``: the
message was well-formed but semantically invalid).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import agents, harness, mfbo, policy, projection
from .errors import ConfigError, PromptCtlError, SchemaError, SemanticError
from .feasibility import ModelSpec, degradation_ratio

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="promptctl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("feasibility", help="compute feasible length, saturation bound, and degradation ratio")
    p.add_argument("--config", help="key=value file with model-profile keys (defaults otherwise)")
    p.add_argument("--observed-sat", type=float, default=None, help="observed saturation threshold in tokens")

    p = sub.add_parser("project", help="project a serialized state file back into budget")
    p.add_argument("--history", required=True, help="JSON state file (see README for the schema)")
    p.add_argument("--kappa", type=int, default=8, help="max exemplar evaluations to keep")
    p.add_argument("--intervals", type=int, default=4, help="interval summary count")
    p.add_argument("--budget", type=int, default=None, help="token budget (defaults from the model profile)")
    p.add_argument("--config", help="key=value file providing the model profile")
    p.add_argument("--out", help="write the projected state here instead of stdout")

    p = sub.add_parser("toytrain", help="train a tabular student against a random oracle")
    p.add_argument("--vocab", type=int, default=6, help="vocabulary size")
    p.add_argument("--contexts", type=int, default=4, help="context count")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the loss CSV here instead of stdout")

    p = sub.add_parser("env", help="inspect the optimization environment")
    p.add_argument("--eval", type=float, default=None, metavar="X", help="print the objective at X")
    p.add_argument("--catalog", action="store_true", help="print the fidelity catalog")
    p.add_argument("--grid-csv", help="write a plot-ready objective/surrogate CSV here")
    p.add_argument("--eta", type=float, default=0.15, help="surrogate noise scale")

    p = sub.add_parser("parse", help="validate one protocol message")
    p.add_argument("message", help="the raw message text")
    p.add_argument("--models", type=int, default=4, help="catalog size for the semantic check")
    p.add_argument("--domain", type=float, nargs=2, default=(0.0, 10.0), metavar=("LO", "HI"))

    p = sub.add_parser("run", help="run the full ablation and write artifacts")
    p.add_argument("--config", help="key=value run configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config's seed list with one seed")

    return parser


def _model_spec_from(path: str | None) -> ModelSpec:
    if path is None:
        return harness.build_config({}).controller.spec
    return harness.load_config(path).controller.spec


def _cmd_feasibility(args) -> int:
    spec = _model_spec_from(args.config)
    report = degradation_ratio(spec, observed_sat=args.observed_sat)
    rows = [
        ("feasible_len", f"{report.feasible_len} tokens"),
        ("sat_len_bound", f"{report.sat_len_bound:.2f} tokens"),
        ("observed_sat", f"{report.observed_sat:.2f} tokens"),
        ("degradation_ratio", f"{report.degradation_ratio:.6f}"),
        ("bound_violated", str(report.bound_violated).lower()),
    ]
    width = max(len(k) for k, _ in rows)
    for key, value in rows:
        print(f"{key.ljust(width)}  {value}")
    print(
        json.dumps(
            {
                "feasible_len": report.feasible_len,
                "sat_len_bound": report.sat_len_bound,
                "observed_sat": report.observed_sat,
                "degradation_ratio": report.degradation_ratio,
                "bound_violated": report.bound_violated,
            },
            sort_keys=True,
        )
    )
    return EXIT_OK


def state_from_json(payload: dict) -> mfbo.PromptState:
    """Build a PromptState from its JSON form (see README for the schema)."""
    eta = float(payload.get("eta", mfbo.DEFAULT_NOISE_SCALE))
    catalog = mfbo.default_catalog(eta)
    if "catalog" in payload:
        catalog = tuple(
            mfbo.FidelityModel(
                index=int(m["index"]),
                fidelity=float(m["fidelity"]),
                cost=float(m["cost"]),
                noise_scale=float(m.get("noise_scale", eta * (1.0 - float(m["fidelity"])))),
            )
            for m in payload["catalog"]
        )
    domain = tuple(float(v) for v in payload.get("domain", mfbo.DEFAULT_DOMAIN))
    history = tuple(
        mfbo.HistoryEntry(x=float(e[0]), y=float(e[1]), fidelity=int(e[2]), std=float(e[3]))
        for e in payload.get("history", [])
    )
    initial = float(payload.get("initial_budget", 150.0))
    spent = sum(next(m.cost for m in catalog if m.index == e.fidelity) for e in history)
    remaining = float(payload.get("remaining_budget", initial - spent))
    return mfbo.PromptState(
        catalog=catalog,
        history=history,
        domain=(domain[0], domain[1]),
        best_error=float(payload.get("best_error", 0.0)),
        initial_budget=initial,
        remaining_budget=remaining,
        token_cost=mfbo.state_token_cost(len(history)),
    )


def state_to_json(state: mfbo.PromptState) -> dict:
    return {
        "catalog": [
            {"index": m.index, "fidelity": m.fidelity, "cost": m.cost, "noise_scale": m.noise_scale}
            for m in state.catalog
        ],
        "domain": list(state.domain),
        "history": [[e.x, e.y, e.fidelity, e.std] for e in state.history],
        "summaries": [
            {
                "lo": s.lo,
                "hi": s.hi,
                "mean_error": s.mean_error,
                "mean_uncertainty": s.mean_uncertainty,
                "representative": list(s.representative) if s.representative is not None else None,
                "empty": s.empty,
            }
            for s in state.summaries
        ],
        "best_error": state.best_error,
        "initial_budget": state.initial_budget,
        "remaining_budget": state.remaining_budget,
        "token_cost": state.token_cost,
    }


def _cmd_project(args) -> int:
    spec = _model_spec_from(args.config)
    payload = json.loads(Path(args.history).read_text())
    state = state_from_json(payload)
    projected = projection.project_prompt_state(
        state, spec, kappa=args.kappa, intervals=args.intervals, token_budget=args.budget
    )
    text = json.dumps(state_to_json(projected), sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def _cmd_toytrain(args) -> int:
    rng = np.random.default_rng(args.seed)
    contexts = tuple(f"c{i}" for i in range(args.contexts))
    vocab = tuple(f"t{i}" for i in range(args.vocab))
    oracle = policy.SoftmaxPolicy.random(contexts, vocab, rng)
    student = policy.SoftmaxPolicy.random(contexts, vocab, rng)
    schema_tokens = vocab[: max(1, args.vocab // 3)]
    weights = policy.TokenWeights.upweight(oracle, schema_tokens, factor=10.0)
    uniform = policy.TokenWeights.uniform(oracle)
    dataset = policy.make_pair_dataset(contexts)

    lines = ["epoch,train_loss,eval_loss"]
    for epoch in range(args.epochs + 1):
        train = policy.distill_loss(oracle, student, weights, dataset)
        evaluation = policy.distill_loss(oracle, student, uniform, dataset)
        lines.append(f"{epoch},{train!r},{evaluation!r}")
        if epoch < args.epochs:
            policy.train_distill(student, oracle, dataset, epochs=1, lr=args.lr, weights=weights)
    text = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def _cmd_env(args) -> int:
    did_something = False
    if args.eval is not None:
        print(repr(mfbo.ground_truth(args.eval)))
        did_something = True
    if args.catalog:
        print("index  fidelity  cost  noise_scale")
        for m in mfbo.default_catalog(args.eta):
            print(f"{m.index:>5}  {m.fidelity:>8}  {m.cost:>4}  {m.noise_scale!r}")
        did_something = True
    if args.grid_csv:
        xs = np.linspace(0.0, 10.0, harness.FIGURE_GRID_RESOLUTION)
        catalog = mfbo.default_catalog(args.eta)
        rows = []
        for x in xs:
            g = mfbo.ground_truth(float(x))
            row = [repr(float(x)), repr(g)]
            for m in catalog:
                half = 2.0 * m.noise_scale
                row += [repr(g), repr(g - half), repr(g + half)]
            rows.append(",".join(row))
        header = ["x", "ground_truth"] + [
            f"p{m.index}_{part}" for m in catalog for part in ("mean", "lo", "hi")
        ]
        Path(args.grid_csv).write_text(",".join(header) + "\n" + "\n".join(rows) + "\n")
        did_something = True
    if not did_something:
        raise _UsageError("env: nothing to do (use --eval, --catalog, or --grid-csv)")
    return EXIT_OK


def _cmd_parse(args) -> int:
    catalog = mfbo.default_catalog()[: args.models]
    try:
        decision = agents.parse_decision(args.message, catalog, tuple(args.domain))
    except SchemaError as exc:
        print(f"schema error: {exc}")
        return EXIT_VALIDATION
    except SemanticError as exc:
        print(f"semantic error: {exc}")
        return EXIT_RUNTIME
    print(f"ok: model={decision.model_index} point={decision.point!r}")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = harness.load_config(args.config) if args.config else harness.build_config({})
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,))
    table = harness.run_ablation(cfg, args.out)
    print(harness.format_summary_text(table))
    print(f"artifacts written to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "feasibility": _cmd_feasibility,
    "project": _cmd_project,
    "toytrain": _cmd_toytrain,
    "env": _cmd_env,
    "parse": _cmd_parse,
    "run": _cmd_run,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except PromptCtlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
