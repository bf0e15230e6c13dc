"""Command-line interface.

Subcommands: gen, calibrate, eval, sweep, coverage, demo, inspect.  Values
come from built-in defaults, then an optional ``--config`` JSON file, then
explicit flags.  Exit codes: 0 ok, 1 IO or parse error, 2 infeasible
calibration, 3 transport failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .baselines import METHODS, Method
from .core import LABELS, CalibratedModel, InfeasibleCalibrationError, adjust_epsilon
from .episodes import Episode, run_episode
from .harness import (
    CSV_HEADER,
    Experiment,
    ExperimentConfig,
    calibrate_on,
    coverage_distribution,
    dumps,
    read_curve,
    repeat_seeds,
    run_experiment,
    summary_document,
    sweep_epsilon,
    write_curve,
    write_summary,
)
from .scenario import SETTINGS, load_scenarios, sample_scenarios, save_scenarios
from .scorer import ScorerError, ScorerSpec, TransportError, make_scorer

EXIT_OK, EXIT_IO, EXIT_INFEASIBLE, EXIT_TRANSPORT = 0, 1, 2, 3

DEFAULTS = {
    "setting": "numeric",
    "count": 400,
    "n": 400,
    "n_test": 2000,
    "repeats": 10,
    "epsilon": 0.15,
    "delta": 0.01,
    "method": "conformal",
    "theta": 0.5,
    "draws": 20,
    "scorer": "synthetic",
    "kappa": 4.0,
    "rho": 0.05,
    "tau": 1.0,
    "endpoint": None,
    "model_name": None,
    "timeout": 30.0,
    "retries": 3,
    "grid": "0.25,0.2,0.15,0.1,0.05,0.02",
    "bins": 20,
    "no_adjust": False,
    "max_tries": 3,
}

_HELP = {
    "setting": f"scenario family, one of {', '.join(SETTINGS)}",
    "count": "number of scenarios to generate",
    "n": "calibration set size N",
    "n_test": "test scenarios per repeat",
    "repeats": "independent calibration/test repeats",
    "epsilon": "target failure level",
    "delta": "allowed probability that coverage falls short",
    "method": f"set construction, one of {', '.join(METHODS)}",
    "theta": "certainty threshold for the binary method",
    "draws": "scorer draws per ensemble",
    "scorer": "scorer kind, synthetic or llm",
    "kappa": "synthetic scorer concentration",
    "rho": "synthetic scorer corruption probability",
    "tau": "synthetic scorer temperature",
    "endpoint": "completion endpoint base URL (llm scorer)",
    "model_name": "model name sent to the endpoint (llm scorer)",
    "timeout": "request timeout in seconds (llm scorer)",
    "retries": "retries on transport failure (llm scorer)",
    "grid": "comma-separated, strictly decreasing epsilon values",
    "bins": "histogram bins",
    "no_adjust": "calibrate at epsilon itself, skipping the finite-sample correction",
    "max_tries": "invalid answers accepted before the demo halts a step",
}


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **fields):
        super().__init__(message)
        self.code = code
        self.kind = kind
        self.fields = fields


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1 (parse error) so that 2 always means infeasible calibration."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error=usage message={json.dumps(message)}\n")
        raise SystemExit(EXIT_IO)


def _flag(parser, name, type_=None, **kw):
    default = DEFAULTS.get(name)
    text = f"{_HELP[name]} (default: {default})"
    opt = "--" + name.replace("_", "-")
    if type_ is bool:
        parser.add_argument(opt, dest=name, action="store_const", const=True, default=None, help=text)
    else:
        parser.add_argument(opt, dest=name, type=type_, default=None, help=text, **kw)


def _scorer_flags(p):
    _flag(p, "scorer", str, choices=("synthetic", "llm"))
    _flag(p, "kappa", float)
    _flag(p, "rho", float)
    _flag(p, "tau", float)
    _flag(p, "endpoint", str)
    _flag(p, "model_name", str)
    _flag(p, "timeout", float)
    _flag(p, "retries", int)


def _common(p, seed_required=True):
    p.add_argument("--seed", type=int, required=seed_required, default=None,
                   help="root random seed" + (" (required)" if seed_required else " (default: 0)"))
    p.add_argument("--config", type=Path, default=None, help="JSON file of flag values; flags override it (default: none)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="conformal-planner", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a scenario file")
    _common(p)
    _flag(p, "setting", str, choices=SETTINGS)
    _flag(p, "count", int)
    p.add_argument("--out", type=Path, required=True, help="output JSONL path (required)")

    p = sub.add_parser("calibrate", help="fit a calibrated model")
    _common(p)
    _flag(p, "setting", str, choices=SETTINGS)
    p.add_argument("--data", type=Path, default=None, help="scenario file to calibrate on instead of sampling (default: none)")
    _flag(p, "n", int)
    _flag(p, "epsilon", float)
    _flag(p, "delta", float)
    _flag(p, "no_adjust", bool)
    _scorer_flags(p)
    p.add_argument("--out", type=Path, required=True, help="model output path (required)")

    p = sub.add_parser("eval", help="evaluate a method over repeated calibration/test draws")
    _common(p)
    _experiment_flags(p)
    p.add_argument("--out", type=Path, default=None, help="summary JSON path (default: stdout only)")

    p = sub.add_parser("sweep", help="success/help curve over an epsilon grid")
    _common(p)
    _experiment_flags(p)
    _flag(p, "grid", str)
    p.add_argument("--out", type=Path, required=True, help="curve CSV path; a .json summary is written next to it (required)")

    p = sub.add_parser("coverage", help="histogram of per-repeat coverage")
    _common(p, seed_required=False)
    _experiment_flags(p)
    _flag(p, "bins", int)
    p.add_argument("--out", type=Path, default=None, help="JSON output path (default: stdout only)")

    p = sub.add_parser("demo", help="answer help requests at the terminal")
    _common(p, seed_required=False)
    p.add_argument("--model", type=Path, required=True, help="calibrated model file (required)")
    p.add_argument("--data", type=Path, default=None, help="scenario file (default: sample from --setting)")
    _flag(p, "setting", str, choices=SETTINGS)
    _flag(p, "count", int)
    _flag(p, "max_tries", int)
    _scorer_flags(p)
    p.add_argument("--out", type=Path, default=None, help="episode JSONL path (default: none)")

    p = sub.add_parser("inspect", help="summarize any file written by this tool")
    p.add_argument("path", type=Path)
    return parser


def _experiment_flags(p):
    _flag(p, "setting", str, choices=SETTINGS)
    _flag(p, "method", str, choices=METHODS)
    _flag(p, "epsilon", float)
    _flag(p, "delta", float)
    _flag(p, "n", int)
    _flag(p, "n_test", int)
    _flag(p, "repeats", int)
    _flag(p, "theta", float)
    _flag(p, "draws", int)
    _flag(p, "no_adjust", bool)
    _scorer_flags(p)


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the --config file, then explicit flags."""
    values = dict(DEFAULTS)
    values["seed"] = 0
    config = getattr(args, "config", None)
    if config is not None:
        try:
            doc = json.loads(Path(config).read_text())
        except (OSError, ValueError) as exc:
            raise CliError(EXIT_IO, "config", f"cannot read config {config}: {exc}") from None
        if not isinstance(doc, dict):
            raise CliError(EXIT_IO, "config", f"config {config} must hold a JSON object")
        values.update({k.replace("-", "_"): v for k, v in doc.items()})
    values.update({k: v for k, v in vars(args).items() if v is not None})
    return values


def scorer_spec(v: dict) -> ScorerSpec:
    return ScorerSpec(kind=v["scorer"], kappa=float(v["kappa"]), rho=float(v["rho"]), tau=float(v["tau"]),
                      endpoint=v["endpoint"], model=v["model_name"], timeout=float(v["timeout"]),
                      retries=int(v["retries"]))


def experiment_config(v: dict, output=None) -> ExperimentConfig:
    return ExperimentConfig(
        setting=v["setting"],
        scorer=scorer_spec(v),
        method=Method(v["method"], draws=int(v["draws"]), theta=float(v["theta"])),
        epsilon=float(v["epsilon"]),
        delta=float(v["delta"]),
        n_cal=int(v["n"]),
        n_test=int(v["n_test"]),
        repeats=int(v["repeats"]),
        seed=int(v["seed"]),
        adjust=not v["no_adjust"],
        output=str(output) if output else None,
    )


def _kv(out, **pairs):
    out.write(" ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in pairs.items()) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_gen(v, out):
    scenarios = sample_scenarios(v["setting"], int(v["count"]), int(v["seed"]))
    save_scenarios(scenarios, v["out"])
    _kv(out, setting=v["setting"], count=len(scenarios), seed=v["seed"], path=v["out"])


def cmd_calibrate(v, out):
    epsilon, delta, adjust = float(v["epsilon"]), float(v["delta"]), not v["no_adjust"]
    if v.get("data"):
        scenarios = load_scenarios(v["data"])
        _, _, score_seed = repeat_seeds(int(v["seed"]), 0)
        scorer = make_scorer(scorer_spec(v))
        model = calibrate_on(scenarios, scorer, score_seed, epsilon, delta, adjust)
    else:
        if adjust:
            # infeasible sizes (including n < 2) fail here with the minimum-n hint
            adjust_epsilon(epsilon, delta, int(v["n"]))
        config = experiment_config({**v, "n_test": 1, "repeats": 1})
        exp = Experiment(config)
        model = exp.model(0, epsilon)
    model.save(v["out"])
    _kv(out, epsilon=model.epsilon, epsilon_hat=model.epsilon_hat, q_hat=model.q_hat, n=model.n,
        mode=model.mode, path=v["out"])


def cmd_eval(v, out):
    config = experiment_config(v, v.get("out"))
    summary = run_experiment(config)
    _kv(out, method=config.method.kind, setting=config.setting, epsilon=config.epsilon,
        success=summary.plan_success_rate, help_step=summary.help_rate_step, help_trial=summary.help_rate_trial,
        set_size=summary.avg_set_size, coverage=summary.coverage)


def cmd_sweep(v, out):
    config = experiment_config(v)
    try:
        grid = [float(x) for x in str(v["grid"]).split(",") if x.strip()]
    except ValueError:
        raise CliError(EXIT_IO, "parse", f"cannot parse epsilon grid {v['grid']!r}") from None
    rows = sweep_epsilon(config, grid, config.method)
    path = Path(v["out"])
    write_curve(path, rows)
    write_summary(path.with_suffix(".json"), config, None, kind="sweep-summary", grid=grid, curve=str(path.name))
    out.write(",".join(CSV_HEADER) + "\n")
    for r in rows:
        out.write(",".join(f"{getattr(r, h):.6f}" for h in CSV_HEADER) + "\n")


def cmd_coverage(v, out):
    config = experiment_config(v)
    dist = coverage_distribution(config, bins=int(v["bins"]))
    doc = summary_document(config, None, kind="coverage-distribution",
                           coverages=list(dist.coverages), counts=list(dist.counts), edges=list(dist.edges),
                           fraction_meeting=dist.fraction_meeting)
    if v.get("out"):
        Path(v["out"]).write_text(dumps(doc))
    _kv(out, repeats=len(dist.coverages), fraction_meeting=dist.fraction_meeting,
        mean_coverage=sum(dist.coverages) / len(dist.coverages))


def question(scenario, prefix, pset) -> str:
    node = scenario.node(prefix)
    opts = "; ".join(f"{y}) {node.options[LABELS.index(y)]}" for y in pset.ranking)
    return f"Which do you mean: {opts}?" if len(pset) else "I am not confident in any option."


def terminal_human(read, write, max_tries: int):
    """Human callback for episodes: ranked options in, a label or None (halt) out."""

    def ask(scenario, step, prefix, pset):
        write(f"[{scenario.id} step {step + 1}] {scenario.instruction}\n")
        write(question(scenario, prefix, pset) + "\n")
        for _ in range(max_tries):
            write("choice (letter, or h to halt): ")
            answer = read()
            if answer is None:
                write("\n")
                return None
            answer = answer.strip().upper()
            if answer == "H":
                return None
            if answer in pset.members:
                return answer
            write(f"'{answer}' is not one of {', '.join(pset.ranking) or 'the options'}\n")
        write("too many invalid answers; halting\n")
        return None

    return ask


def cmd_demo(v, out, read=None):
    model = CalibratedModel.load(v["model"])
    if v.get("data"):
        scenarios = load_scenarios(v["data"])
    else:
        scenarios = sample_scenarios(v["setting"], int(v["count"]), int(v["seed"]))
    scorer = make_scorer(scorer_spec(v))

    def _read():
        line = (read or sys.stdin.readline)()
        return line if line else None

    human = terminal_human(_read, out.write, int(v["max_tries"]))
    episodes = []
    for s in scenarios:
        def report(t, prefix, pset, label, helped, s=s):
            if not helped:
                out.write(f"[{s.id} step {t + 1}] executing {label}) {s.node(prefix).options[LABELS.index(label)]}\n")

        ep = run_episode(s, model, scorer, Method("conformal"), int(v["seed"]), human=human, on_step=report)
        out.write(f"[{s.id}] {ep.outcome}\n")
        episodes.append(ep)
    if v.get("out"):
        with open(v["out"], "w") as fh:
            fh.write(json.dumps({"format": "conformal-planner-episodes", "version": 1}) + "\n")
            for ep in episodes:
                fh.write(json.dumps(ep.to_dict(), sort_keys=True) + "\n")
    _kv(out, episodes=len(episodes), success=sum(e.outcome == "success" for e in episodes))


def inspect_path(path: Path) -> dict:
    """Identify and summarize a file written by any command."""
    text = Path(path).read_text()
    if text.startswith(",".join(CSV_HEADER)):
        rows = read_curve(path)
        return {"kind": "curve", "rows": len(rows), "epsilon_max": rows[0].epsilon if rows else None,
                "epsilon_min": rows[-1].epsilon if rows else None}
    first = text.split("\n", 1)[0]
    try:
        head = json.loads(first)
    except ValueError:
        head = None
    if isinstance(head, dict) and head.get("format") == "conformal-planner-scenarios":
        scenarios = load_scenarios(path)
        return {"kind": "scenarios", "count": len(scenarios),
                "settings": ",".join(sorted({s.setting for s in scenarios}))}
    if isinstance(head, dict) and head.get("format") == "conformal-planner-episodes":
        eps = [Episode.from_dict(json.loads(line)) for line in text.splitlines()[1:] if line.strip()]
        return {"kind": "episodes", "count": len(eps), "success": sum(e.outcome == "success" for e in eps)}
    doc = json.loads(text)
    if "q_hat" in doc:
        m = CalibratedModel.from_dict(doc)
        return {"kind": "model", "mode": m.mode, "epsilon": m.epsilon, "delta": m.delta,
                "epsilon_hat": m.epsilon_hat, "q_hat": m.q_hat, "n": m.n}
    kind = doc.get("kind", "unknown")
    info = {"kind": kind, "version": doc.get("version"), "seed": doc.get("seed")}
    if "metrics" in doc:
        info.update(success=doc["metrics"]["plan_success_rate"], help_step=doc["metrics"]["help_rate_step"])
    if "fraction_meeting" in doc:
        info["fraction_meeting"] = doc["fraction_meeting"]
    return info


def cmd_inspect(v, out):
    _kv(out, **inspect_path(v["path"]))


COMMANDS = {
    "gen": cmd_gen, "calibrate": cmd_calibrate, "eval": cmd_eval, "sweep": cmd_sweep,
    "coverage": cmd_coverage, "demo": cmd_demo, "inspect": cmd_inspect,
}


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    args = build_parser().parse_args(argv)
    try:
        values = resolve(args) if args.command != "inspect" else vars(args)
        COMMANDS[args.command](values, out)
        return EXIT_OK
    except CliError as exc:
        _error(err, exc.kind, str(exc), **exc.fields)
        return exc.code
    except InfeasibleCalibrationError as exc:
        _error(err, "infeasible", str(exc), min_n=exc.min_n)
        return EXIT_INFEASIBLE
    except TransportError as exc:
        _error(err, "transport", str(exc))
        return EXIT_TRANSPORT
    except ScorerError as exc:
        _error(err, "protocol", str(exc))
        return EXIT_IO
    except (OSError, ValueError, KeyError) as exc:
        _error(err, "io", str(exc))
        return EXIT_IO


def _error(err, kind, message, **fields):
    extra = "".join(f" {k}={v}" for k, v in fields.items())
    err.write(f"error={kind}{extra} message={json.dumps(message)}\n")


if __name__ == "__main__":
    sys.exit(main())
