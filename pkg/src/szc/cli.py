"""Command line: spectrum, evolve, sweep, crab, dqn, ddpg and interp.

Exit codes: 0 success (also for below-target optimizations), 2 usage error,
3 domain or validation error, 4 numerical convergence failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .agents import EpisodeDiscarded, TrainingConfig, ddpg_train, dqn_train, evaluate_robust
from .crab import CrabAnsatz, CrabOptions, crab_optimize
from .dynamics import (ConvergenceError, default_micro_steps, propagate,
                       protocol_from_json, spline_build, sweep_protocol)
from .neural import NetworkError, NonFiniteError
from .spectrum import E0, SpbGeometry, SpectrumError, solve_spectrum

log = logging.getLogger("szc")

CONFIG_FORMAT = "szc-config/1"
EXIT_USAGE, EXIT_DOMAIN, EXIT_CONVERGENCE = 2, 3, 4

# resolved defaults per command; config files and flags override these
DEFAULTS = {
    "common": {"seed": 0, "box_width": 1.0, "fidelity": "report", "n_micro": None,
               "n_basis": 30, "jobs": None, "plot": False, "out_dir": None},
    "spectrum": {"d": None, "alpha": 0.0, "n": 10},
    "evolve": {"protocol": None, "d": None, "n_occ": 5, "stride": 1},
    "sweep": {"protocol": None, "d_min": 0.0, "d_max": 0.1, "steps": 21},
    "interp": {"protocol": None, "n_points": 101, "as_protocol": False},
    "crab": {"d": 0.02, "T": 5.0, "nc": 3, "max_evals": 2000, "restarts": 5,
             "target": 0.99995, "out": None},
    "dqn": {"d": None, "d_min": None, "d_max": None, "n_asym": 10, "episodes": 2000,
            "T": 5.0, "nt": 10, "alpha_max": 800.0, "sigma": 0.05, "gamma": 0.99,
            "batch": 32, "lr": 1e-3, "tau": 1e-3, "eval_every": 10, "updates_per_step": 4,
            "sweep_min": 0.0, "sweep_max": 0.1, "sweep_steps": 21},
}
DEFAULTS["ddpg"] = dict(DEFAULTS["dqn"])


class UsageError(Exception):
    pass


# --- output helpers -------------------------------------------------------------

def fmt(x) -> str:
    """Locale-independent, round-trip float text."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def write_csv(rows, header, path=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    text = buf.getvalue()
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def write_json(data, path):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _out_dir(cfg, required=False, default=None) -> Path | None:
    d = cfg["out_dir"] or (default if required else None)
    if d is None:
        if cfg["plot"]:
            raise UsageError("--plot needs --out-dir")
        return None
    p = Path(d)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _snapshot(cfg, command, out: Path | None, extra=None) -> dict:
    snap = {"format": CONFIG_FORMAT, "version": __version__, "command": command,
            "alpha_unit": "E0L", "E0": E0}
    snap.update({k: v for k, v in cfg.items() if k not in ("config", "plot")})
    snap.pop("jobs", None)          # does not affect results
    snap.pop("out_dir", None)       # the snapshot lives there
    if extra:
        snap.update(extra)
    if out is not None:
        write_json(snap, out / "config.json")
    return snap


def _jobs(cfg) -> int:
    return cfg["jobs"] or os.cpu_count() or 1


def _micro(cfg, T) -> int:
    return cfg["n_micro"] or default_micro_steps(T, cfg["fidelity"])


def _geometry(cfg, d) -> SpbGeometry:
    if d is None:
        raise UsageError("--d is required")
    return SpbGeometry(cfg["box_width"], d)


def load_any_protocol(path):
    """Protocol knot file, CRAB ansatz file, or CRAB result file."""
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ValueError(f"cannot read protocol file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"protocol file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ValueError("protocol JSON must be an object")
    if "ansatz" in data:
        data = data["ansatz"]
    if data.get("format", "").startswith("szc-crab/"):
        return CrabAnsatz.from_json(data)
    return protocol_from_json(data)


# --- subcommands ----------------------------------------------------------------

def cmd_spectrum(cfg):
    g = _geometry(cfg, cfg["d"])
    if cfg["n"] < 2:
        raise ValueError("--n must be >= 2")
    spec = solve_spectrum(g, cfg["alpha"] * E0, cfg["n"])
    out = _out_dir(cfg)
    rows = [(lev.index, lev.energy, lev.k) for lev in spec.levels]
    write_csv(rows, ["n", "E_n", "k_n"], out / "spectrum.csv" if out else None)
    _snapshot(cfg, "spectrum", out)
    if out and cfg["plot"]:
        from .plotting import plot_spectrum
        plot_spectrum(out / "spectrum.png", [r[0] for r in rows], spec.energies, cfg["alpha"],
                      cfg["d"])


def cmd_evolve(cfg):
    if cfg["protocol"] is None:
        raise UsageError("--protocol is required")
    g = _geometry(cfg, cfg["d"])
    proto = load_any_protocol(cfg["protocol"])
    n_micro = _micro(cfg, proto.duration)
    tr = propagate(None, proto, g, n_micro, cfg["n_basis"])
    n_occ = min(cfg["n_occ"], cfg["n_basis"])
    occ = tr.occupations / tr.occupations.sum(axis=1, keepdims=True)
    idx = list(range(0, len(tr.times), max(1, cfg["stride"])))
    if idx[-1] != len(tr.times) - 1:
        idx.append(len(tr.times) - 1)
    alpha_e0l = np.asarray(proto(tr.times)) / E0
    rows = [[tr.times[i], alpha_e0l[i], *occ[i, :n_occ]] for i in idx]
    out = _out_dir(cfg)
    header = ["t", "alpha"] + [f"occ_{n + 1}" for n in range(n_occ)]
    write_csv(rows, header, out / "trajectory.csv" if out else None)
    _snapshot(cfg, "evolve", out, {"n_micro": n_micro, "norm_drift": tr.norm_drift,
                                   "clamped": tr.clamped})
    if out and cfg["plot"]:
        from .plotting import plot_trajectory
        plot_trajectory(out / "trajectory.png", tr.times[idx], alpha_e0l[idx], occ[idx])


def _sweep_rows(proto, cfg, d_min, d_max, steps):
    if steps < 1:
        raise ValueError("--steps must be >= 1")
    if d_max < d_min:
        raise ValueError("--d-max must be >= --d-min")
    ds = [d_min] if steps == 1 else np.linspace(d_min, d_max, steps).tolist()
    return sweep_protocol(proto, ds, cfg["box_width"], _micro(cfg, proto.duration),
                          cfg["n_basis"], _jobs(cfg))


def _write_sweep(rows, path, png=None, mark=None, band=None):
    data = [(r.d, r.occ1, r.occ2, r.occ_higher) for r in rows]
    write_csv(data, ["d", "occ1_T", "occ2_T", "occ_higher_T"], path)
    if png is not None and data:
        from .plotting import plot_sweep
        plot_sweep(png, *zip(*data), mark=mark, band=band)


def cmd_sweep(cfg):
    if cfg["protocol"] is None:
        raise UsageError("--protocol is required")
    proto = load_any_protocol(cfg["protocol"])
    rows = _sweep_rows(proto, cfg, cfg["d_min"], cfg["d_max"], cfg["steps"])
    out = _out_dir(cfg)
    _write_sweep(rows, out / "sweep.csv" if out else None,
                 out / "sweep.png" if out and cfg["plot"] else None)
    _snapshot(cfg, "sweep", out, {"n_micro": _micro(cfg, proto.duration),
                                  "failed_rows": sum(r.failed for r in rows)})
    if any(r.failed for r in rows):
        log.warning("%d sweep rows failed to converge", sum(r.failed for r in rows))


def cmd_interp(cfg):
    if cfg["protocol"] is None:
        raise UsageError("--protocol is required")
    if cfg["n_points"] < 2:
        raise ValueError("--n-points must be >= 2")
    proto = load_any_protocol(cfg["protocol"])
    t = np.linspace(0.0, proto.duration, cfg["n_points"])
    a = np.asarray(proto(t)) / E0
    out = _out_dir(cfg)
    if cfg["as_protocol"]:
        text = json.dumps(spline_build(zip(t, a * E0)).to_json(), indent=2) + "\n"
        if out:
            (out / "interp.json").write_text(text)
        else:
            sys.stdout.write(text)
    else:
        write_csv(zip(t, a), ["t", "alpha"], out / "interp.csv" if out else None)
    _snapshot(cfg, "interp", out)
    if out and cfg["plot"]:
        from .plotting import plot_protocol
        knots = [(kt, ka / E0) for kt, ka in proto.knots()] if hasattr(proto, "knots") else None
        plot_protocol(out / "interp.png", t, a, knots)


def cmd_crab(cfg):
    g = _geometry(cfg, cfg["d"])
    T = cfg["T"]
    report = cfg["n_micro"] or default_micro_steps(T, "report")
    opts = CrabOptions(max_evals=cfg["max_evals"], restarts=cfg["restarts"], seed=cfg["seed"],
                       target_cost=cfg["target"], n_micro_final=report,
                       n_basis=cfg["n_basis"], jobs=_jobs(cfg))
    res = crab_optimize(g, T, cfg["nc"], opts)
    out = _out_dir(cfg, required=True, default="szc_crab")
    proto_path = Path(cfg["out"]) if cfg["out"] else out / "protocol.json"
    write_json(res.protocol.to_json(), proto_path)
    write_json(res.ansatz.to_json(), out / "ansatz.json")
    result = res.to_json()
    result.update({"d": cfg["d"], "seed": cfg["seed"]})
    write_json(result, out / "crab_result.json")
    _snapshot(cfg, "crab", out, {"n_micro_search": default_micro_steps(T, "train"),
                                 "n_micro_final": report})
    summary = {k: result[k] for k in ("cost", "occupations", "eval_count", "below_target")}
    summary["occupations"] = summary["occupations"][:3]
    summary["ansatz"] = result["ansatz"]
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    if cfg["plot"]:
        tr = propagate(None, res.ansatz, g, report, cfg["n_basis"])
        occ = tr.occupations / tr.occupations.sum(axis=1, keepdims=True)
        from .plotting import plot_trajectory
        plot_trajectory(out / "trajectory.png", tr.times, res.ansatz(tr.times) / E0, occ)


def _training_config(cfg) -> TrainingConfig:
    if cfg["d"] is not None:
        if cfg["d_min"] is not None or cfg["d_max"] is not None:
            raise UsageError("give either --d or --d-min/--d-max, not both")
        ds = (cfg["d"],)
    elif cfg["d_min"] is not None and cfg["d_max"] is not None:
        if cfg["n_asym"] < 1 or cfg["d_max"] < cfg["d_min"]:
            raise ValueError("need --n-asym >= 1 and --d-max >= --d-min")
        ds = tuple(np.linspace(cfg["d_min"], cfg["d_max"], cfg["n_asym"]).tolist())
    else:
        raise UsageError("asymmetry required: --d, or --d-min and --d-max")
    return TrainingConfig(T=cfg["T"], n_t=cfg["nt"], alpha_max=cfg["alpha_max"],
                          sigma=cfg["sigma"], gamma=cfg["gamma"], lr=cfg["lr"], tau=cfg["tau"],
                          episodes=cfg["episodes"], batch=cfg["batch"], d_values=ds,
                          box_width=cfg["box_width"], n_basis=cfg["n_basis"],
                          n_micro_report=cfg["n_micro"], eval_every=cfg["eval_every"],
                          updates_per_step=cfg["updates_per_step"],
                          seed=cfg["seed"])


def _cmd_agent(cfg, algo):
    tc = _training_config(cfg)
    out = _out_dir(cfg, required=True, default=f"szc_{algo}")
    res = (dqn_train if algo == "dqn" else ddpg_train)(tc)
    weights = {name: net.to_json() for name, net in res.networks.items()}
    for name, adam in res.adams.items():
        weights[name]["adam"] = adam.to_json()
    weights["format"] = f"szc-{algo}-weights/1"
    write_json(weights, out / "weights.json")
    write_json(res.protocol.to_json(), out / "protocol.json")
    write_csv(((i + 1, r, s) for i, (r, s) in enumerate(zip(res.reward_history, res.schedule))),
              ["episode", "cumulative_reward", "epsilon_or_sigma"], out / "rewards.csv")
    sweep = _sweep_rows(res.protocol, cfg, cfg["sweep_min"], cfg["sweep_max"], cfg["sweep_steps"])
    d_lo, d_hi = min(tc.d_values), max(tc.d_values)
    _write_sweep(sweep, out / "sweep.csv", out / "sweep.png" if cfg["plot"] else None,
                 mark=d_lo if d_lo == d_hi else None,
                 band=(d_lo, d_hi) if d_lo != d_hi else None)
    robust = evaluate_robust(res.protocol, (d_lo, d_hi), len(tc.d_values), tc.box_width,
                             _micro(cfg, tc.T), tc.n_basis)
    result = {
        "format": f"szc-{algo}-result/1",
        "best_score_train": res.best_score,
        "report_reward": res.report_reward,
        "report_rewards": {fmt(d): r for d, r in res.report_rewards.items()},
        "report_occupations": {fmt(d): o for d, o in res.report_occupations.items()},
        "mean_cost_trained_band": robust.mean_cost,
        "greedy_scores": [[e, s] for e, s in res.greedy_scores],
        "discarded_episodes": res.discarded,
        "knots": [[t, a] for t, a in res.knots],
        "final_knots": [[t, a] for t, a in res.final_knots],
    }
    write_json(result, out / "result.json")
    _snapshot(cfg, algo, out, {"training": tc.to_dict(), "n_micro_train": tc.train_micro,
                               "n_micro_report": tc.report_micro})
    sys.stdout.write(json.dumps({"report_reward": res.report_reward,
                                 "mean_cost_trained_band": robust.mean_cost,
                                 "out_dir": str(out)}, sort_keys=True) + "\n")
    if cfg["plot"]:
        from .plotting import plot_protocol, plot_rewards
        plot_rewards(out / "rewards.png", np.arange(1, len(res.reward_history) + 1),
                     res.reward_history)
        t = np.linspace(0, tc.T, 401)
        plot_protocol(out / "protocol.png", t, res.protocol(t) / E0, res.knots)


COMMANDS = {"spectrum": cmd_spectrum, "evolve": cmd_evolve, "sweep": cmd_sweep,
            "interp": cmd_interp, "crab": cmd_crab,
            "dqn": lambda cfg: _cmd_agent(cfg, "dqn"), "ddpg": lambda cfg: _cmd_agent(cfg, "ddpg")}


# --- parsing --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="szc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON config file (sections per command)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--fidelity", choices=["train", "report"])
    common.add_argument("--n-micro", dest="n_micro", type=int)
    common.add_argument("--n-basis", dest="n_basis", type=int)
    common.add_argument("--box-width", dest="box_width", type=float)
    common.add_argument("--jobs", type=int, help="worker processes (default: all CPUs)")
    common.add_argument("--plot", action="store_true", help="also write PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help):
        return sub.add_parser(name, parents=[common], help=help,
                              argument_default=argparse.SUPPRESS)

    p = add("spectrum", "eigenvalues for one (alpha, d)")
    p.add_argument("--d", type=float, required=True)
    p.add_argument("--alpha", type=float, help="barrier strength in E0L")
    p.add_argument("--n", type=int)

    p = add("evolve", "trajectory of occupations through a protocol")
    p.add_argument("--protocol", required=True)
    p.add_argument("--d", type=float, required=True)
    p.add_argument("--n-occ", dest="n_occ", type=int)
    p.add_argument("--stride", type=int, help="write every k-th micro-step")

    p = add("sweep", "final occupations over a range of d")
    p.add_argument("--protocol", required=True)
    p.add_argument("--d-min", dest="d_min", type=float)
    p.add_argument("--d-max", dest="d_max", type=float)
    p.add_argument("--steps", type=int)

    p = add("interp", "resample a protocol on a uniform grid")
    p.add_argument("--protocol", required=True)
    p.add_argument("--n-points", dest="n_points", type=int)
    p.add_argument("--as-protocol", dest="as_protocol", action="store_true",
                   help="emit a protocol JSON instead of CSV")

    p = add("crab", "CRAB optimization at one asymmetry")
    p.add_argument("--d", type=float)
    p.add_argument("--T", type=float)
    p.add_argument("--nc", type=int)
    p.add_argument("--max-evals", dest="max_evals", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--target", type=float)
    p.add_argument("--out", help="protocol JSON path (default OUT_DIR/protocol.json)")

    for name in ("dqn", "ddpg"):
        p = add(name, f"{name.upper()} training")
        p.add_argument("--d", type=float)
        p.add_argument("--d-min", dest="d_min", type=float)
        p.add_argument("--d-max", dest="d_max", type=float)
        p.add_argument("--n-asym", dest="n_asym", type=int)
        p.add_argument("--episodes", type=int)
        p.add_argument("--T", type=float)
        p.add_argument("--nt", type=int)
        p.add_argument("--alpha-max", dest="alpha_max", type=float)
        p.add_argument("--sigma", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--batch", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--tau", type=float)
        p.add_argument("--eval-every", dest="eval_every", type=int)
        p.add_argument("--updates-per-step", dest="updates_per_step", type=int)
        p.add_argument("--sweep-min", dest="sweep_min", type=float)
        p.add_argument("--sweep-max", dest="sweep_max", type=float)
        p.add_argument("--sweep-steps", dest="sweep_steps", type=int)
    return parser


def resolve_config(command: str, flags: dict, environ=os.environ) -> dict:
    """Defaults < config file < SZC_SEED < command-line flags."""
    cfg = dict(DEFAULTS["common"])
    cfg.update(DEFAULTS[command])
    path = flags.get("config")
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read config file {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ValueError("config file must hold a JSON object")
        section = data.get(command, {})
        if not isinstance(section, dict):
            raise ValueError(f"config section '{command}' must be an object")
        merged = {k: v for k, v in data.items() if k in DEFAULTS["common"]}
        merged.update(section)
        unknown = sorted(set(merged) - set(cfg))
        if unknown:
            raise ValueError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(merged)
    if environ.get("SZC_SEED"):
        try:
            cfg["seed"] = int(environ["SZC_SEED"])
        except ValueError:
            raise ValueError("SZC_SEED must be an integer") from None
    cfg.update({k: v for k, v in flags.items() if k not in ("command", "verbose")})
    cfg.pop("config", None)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = vars(args)
    logging.basicConfig(level=logging.INFO if flags.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, flags)
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        parser.error(str(exc))
    except (ConvergenceError, EpisodeDiscarded, NonFiniteError) as exc:
        print(f"szc: convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ValueError, SpectrumError, NetworkError) as exc:
        print(f"szc: error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    return 0


if __name__ == "__main__":
    sys.exit(main())
