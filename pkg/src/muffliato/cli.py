"""Command-line entry point: ``muffliato {graph,average,account,optimize,dropout}``.

Every parameter can come from a YAML/JSON ``--config`` file (keys are the
long option names with ``-`` replaced by ``_``); flags given on the command
line override the file. The resolved configuration is written next to the
results, and a manifest lists every artifact. Timestamps go to a separate
``metadata.json`` so result files are reproducible byte for byte.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from . import data_io, experiments, gossip, graph, optim, privacy
from .errors import MuffliatoError

__all__ = ["main", "ConfigError", "parse_graph_spec"]

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------
# parameter tables
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Param:
    type: Callable[[Any], Any]
    default: Any
    help: str
    choices: tuple | None = None


def _int_or_auto(v):
    if isinstance(v, str) and v.strip().lower() == "auto":
        return "auto"
    return int(v)


def _float_or_auto(v):
    if isinstance(v, str) and v.strip().lower() == "auto":
        return "auto"
    return float(v)


def _flag(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int_list(v):
    if v is None or isinstance(v, list):
        return None if v is None else [int(x) for x in v]
    return [int(x) for x in str(v).split(",") if x.strip()]


def _float_list(v):
    if isinstance(v, list):
        return [float(x) for x in v]
    return [float(x) for x in str(v).split(",") if x.strip()]


def _str(v):
    return None if v is None else str(v)


GLOBAL = {
    "seed": Param(int, 0, "base random seed"),
    "out": Param(_str, None, "output directory (results are only printed when omitted)"),
    "trials": Param(int, 1, "number of repetitions with derived seeds"),
    "jobs": Param(int, 1, "worker processes for repetitions"),
}

COMMANDS: dict[str, dict[str, Param]] = {
    "graph": {
        "gen": Param(_str, None, "graph spec, e.g. hypercube:8, er:128:0.05, grid:4x4, edges:FILE[:giant]"),
    },
    "average": {
        "mode": Param(_str, "sync", "protocol", ("sync", "randomized")),
        "graph": Param(_str, None, "graph spec or graph JSON file"),
        "sigma2": Param(float, 1.0, "noise variance"),
        "T": Param(_int_or_auto, "auto", "number of gossip steps or 'auto'"),
        "lazy": Param(_str, "auto", "use (I+W)/2: yes, no, or auto (only when the gap is 0)", ("auto", "yes", "no")),
        "weights": Param(_str, "hamilton", "edge weight rule", ("hamilton", "metropolis")),
        "x_std": Param(float, 1.0, "inputs are drawn from N(0, x_std^2)"),
        "dim": Param(int, 1, "dimension of each node's vector"),
    },
    "account": {
        "graph": Param(_str, None, "graph spec or graph JSON file"),
        "schedule": Param(_str, None, "schedule JSON file (instead of --graph)"),
        "T": Param(_int_or_auto, "auto", "number of gossip steps or 'auto'"),
        "lazy": Param(_str, "auto", "use (I+W)/2: yes, no, or auto", ("auto", "yes", "no")),
        "weights": Param(_str, "hamilton", "edge weight rule", ("hamilton", "metropolis")),
        "alpha": Param(float, 2.0, "Renyi order"),
        "delta": Param(float, 1.0, "sensitivity"),
        "sigma2": Param(float, 1.0, "noise variance"),
        "by_distance": Param(_flag, False, "aggregate losses by hop distance"),
        "collusion": Param(_int_list, None, "colluding node set, e.g. 0,2 (needs --u)"),
        "u": Param(int, None, "source node for --collusion"),
        "group": Param(_int_list, None, "group of source nodes, e.g. 1,3 (needs --v)"),
        "v": Param(int, None, "observer node for --group"),
    },
    "optimize": {
        "mode": Param(_str, "gd", "algorithm", ("gd", "sgd")),
        "dataset": Param(_str, str(experiments.HOUSING_CSV), "CSV dataset"),
        "label_column": Param(_str, experiments.HOUSING_LABEL, "label column (binarized at its median)"),
        "n": Param(int, 2000, "number of nodes"),
        "q": Param(_float_or_auto, "auto", "ER edge probability or 'auto' (ln(n)/n)"),
        "graph": Param(_str, None, "fixed graph spec (default: fresh ER graph every step)"),
        "step": Param(float, 0.7, "step size"),
        "sigma2": Param(float, 1.0, "noise variance (per-coordinate noise is step^2 * sigma2)"),
        "T": Param(int, 50, "optimization steps"),
        "K": Param(_int_or_auto, "auto", "gossip rounds per step or 'auto'"),
        "mu_reg": Param(float, 1e-3, "l2 regularization"),
        "alpha": Param(float, 2.0, "Renyi order of the ledger"),
        "baseline": Param(_str, "central", "comparison run", ("central", "ldp", "none")),
        "ledger": Param(_flag, False, "compute the full pairwise ledger of the first trial"),
    },
    "dropout": {
        "n": Param(int, 1000, "number of nodes"),
        "q": Param(float, 0.002, "ER edge probability among active nodes"),
        "rate": Param(_float_list, [0.0, 0.1, 0.5, 0.9], "dropout rates, comma separated"),
        "T": Param(_int_or_auto, "auto", "steps, or 'auto' to run until consensus"),
        "reps": Param(int, 10, "runs per dropout rate"),
        "sigma2": Param(float, 1.0, "noise variance"),
        "alpha": Param(float, 2.0, "Renyi order"),
        "weights": Param(_str, "hamilton", "weight rule of each step", ("hamilton", "metropolis")),
        "tol": Param(float, 0.1, "consensus tolerance in units of sigma2/n"),
    },
}


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="muffliato", description="Private gossip simulator and pairwise DP accountant")
    sub = p.add_subparsers(dest="command", required=True)
    for name, table in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML or JSON file with parameter values")
        if name in ("average", "optimize"):
            sp.add_argument("mode_pos", nargs="?", metavar="MODE", help=" or ".join(table["mode"].choices))
        for key, prm in {**GLOBAL, **table}.items():
            flag = "--" + key.replace("_", "-")
            if prm.type is _flag:
                sp.add_argument(flag, dest=key, action="store_true", default=argparse.SUPPRESS, help=prm.help)
            else:
                sp.add_argument(flag, dest=key, default=argparse.SUPPRESS, help=prm.help)
    return p


def _load_config_file(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    try:
        data = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse config file {path}: {e}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return data


def resolve_config(command: str, file_values: dict, cli_values: dict) -> dict:
    """Defaults, then file values, then command-line values; every key is validated."""
    table = {**GLOBAL, **COMMANDS[command]}
    unknown = sorted(set(file_values) - set(table))
    if unknown:
        raise ConfigError(f"unknown config key(s) for '{command}': {', '.join(unknown)}")
    cfg = {}
    for key, prm in table.items():
        raw = cli_values.get(key, file_values.get(key, prm.default))
        if raw is None:
            cfg[key] = None
            continue
        try:
            val = prm.type(raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid value for '{key}': {raw!r} ({e})") from None
        if prm.choices and val not in prm.choices:
            raise ConfigError(f"invalid value for '{key}': {val!r} (choose from {', '.join(prm.choices)})")
        cfg[key] = val
    if cfg["trials"] < 1 or cfg["jobs"] < 1:
        raise ConfigError("'trials' and 'jobs' must be >= 1")
    return cfg


def parse_graph_spec(spec: str, seed: int = 0) -> graph.Graph:
    """Build a graph from ``kind:args`` or load a graph JSON file."""
    if spec is None:
        raise ConfigError("a graph is required ('graph' / 'gen')")
    if spec.endswith(".json") and Path(spec).exists():
        return graph.graph_from_json(Path(spec).read_text())
    kind, _, rest = spec.partition(":")
    args = rest.split(":") if rest else []
    try:
        if kind == "hypercube":
            return graph.gen_hypercube(int(args[0]))
        if kind == "complete":
            return graph.gen_complete(int(args[0]))
        if kind == "ring":
            return graph.gen_ring(int(args[0]))
        if kind == "path":
            return graph.gen_path(int(args[0]))
        if kind == "star":
            return graph.gen_star(int(args[0]))
        if kind == "grid":
            r, c = args[0].split("x")
            return graph.gen_grid(int(r), int(c))
        if kind == "torus":
            return graph.gen_torus([int(d) for d in args[0].split("x")])
        if kind == "er":
            n = int(args[0])
            q = math.log(n) / n if len(args) < 2 or args[1] == "auto" else float(args[1])
            return graph.gen_erdos_renyi(n, q, seed=seed)
        if kind == "geometric":
            return graph.gen_geometric(int(args[0]), float(args[1]), seed=seed)
        if kind == "edges":
            giant = len(args) > 1 and args[-1] == "giant"
            path = ":".join(args[:-1] if giant else args)
            return graph.read_edge_list(path, giant_component=giant)
    except (IndexError, ValueError) as e:
        if isinstance(e, MuffliatoError):
            raise
        raise ConfigError(f"malformed graph spec {spec!r}: {e}") from None
    raise ConfigError(f"unknown graph kind {kind!r} in spec {spec!r}")


def _gossip_matrix(g: graph.Graph, lazy: str, weights: str = "hamilton") -> gossip.GossipMatrix:
    W = gossip.hamilton_matrix(g, weights)
    if lazy == "yes" or (lazy == "auto" and g.n > 1 and W.spectral_gap <= 0):
        W = gossip.lazy(W)
    return W


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------


class Output:
    """Collects artifacts under ``--out`` and records them in the manifest."""

    def __init__(self, out: str | None, command: str, cfg: dict):
        self.dir = Path(out) if out else None
        self.command = command
        self.cfg = cfg
        self.files: list[str] = []

    def write_json(self, name: str, obj) -> None:
        if self.dir is None:
            return
        data_io.atomic_write(self.dir / name, lambda fh: (json.dump(obj, fh, indent=2, sort_keys=True), fh.write("\n")))
        self.files.append(name)

    def write_csv(self, name: str, header: list[str], rows) -> None:
        if self.dir is None:
            return

        def body(fh):
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([("%.17g" % v) if isinstance(v, float) else v for v in r])
        data_io.atomic_write(self.dir / name, body)
        self.files.append(name)

    def add(self, name: str, writer: Callable[[Path], None]) -> None:
        if self.dir is None:
            return
        writer(self.dir / name)
        self.files.append(name)

    def finish(self) -> None:
        if self.dir is None:
            return
        # the output location is not part of the experiment; it goes to metadata.json
        resolved = {k: v for k, v in self.cfg.items() if k != "out"}
        self.write_json("config.json", {"command": self.command, **resolved})
        self.write_json("manifest.json", {"command": self.command, "artifacts": sorted(self.files + ["manifest.json"])})
        meta = {"created": datetime.now(timezone.utc).isoformat(), "out": str(self.dir), "argv": sys.argv[1:]}
        data_io.atomic_write(self.dir / "metadata.json", lambda fh: (json.dump(meta, fh, indent=2), fh.write("\n")))


def _print_table(header: list[str], rows) -> None:
    buf = io.StringIO()
    buf.write("\t".join(header) + "\n")
    for r in rows:
        buf.write("\t".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in r) + "\n")
    sys.stdout.write(buf.getvalue())


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_graph(cfg: dict, out: Output) -> None:
    g = parse_graph_spec(cfg["gen"], cfg["seed"])
    out.write_json("graph.json", graph.graph_to_json(g))
    out.add("edges.txt", lambda p: graph.write_edge_list(g, p))
    print(f"n={g.n} edges={g.num_edges} connected={g.connected} "
          f"degree min/max={int(g.degrees.min())}/{int(g.degrees.max())}")


def _average_trial(cfg: dict, seed: int):
    g = parse_graph_spec(cfg["graph"], cfg["seed"])
    W = _gossip_matrix(g, cfg["lazy"], cfg["weights"])
    x = cfg["x_std"] * np.random.default_rng([seed, 0]).standard_normal((g.n, cfg["dim"]))
    s2 = cfg["sigma2"]
    if cfg["mode"] == "sync":
        T = gossip.t_stop_sync(W, x, s2) if cfg["T"] == "auto" else cfg["T"]
        run = gossip.muffliato_sync(x, W, T, s2, seed=[seed, 1], keep_trajectory=False)
    else:
        act = gossip.uniform_edge_activation(W, renormalize=True)
        T = gossip.t_stop_randomized(act, x, s2) if cfg["T"] == "auto" else cfg["T"]
        run, _ = gossip.muffliato_randomized(x, act, T, s2, seed=[seed, 1], keep_trajectory=False)
    return T, run.mse_per_step


def cmd_average(cfg: dict, out: Output) -> None:
    if cfg["T"] == "auto" and cfg["sigma2"] <= 0:
        raise ConfigError("'T' cannot be 'auto' when sigma2 is 0")
    seeds = [experiments.trial_seed(cfg["seed"], i) for i in range(cfg["trials"])]
    res = experiments.map_trials(_average_trial, [(cfg, s) for s in seeds], cfg["jobs"])
    rows = [(i, s, T, float(m[-1])) for i, (s, (T, m)) in enumerate(zip(seeds, res))]
    _print_table(["trial", "seed", "T", "final_mse"], rows)
    out.write_csv("mse.csv", ["trial", "t", "mse"], [(i, t, float(v)) for i, (_, m) in enumerate(res) for t, v in enumerate(m)])
    out.write_json("runs.json", [{"trial": i, "seed": s, "T": T, "final_mse": f} for i, s, T, f in rows])


def cmd_account(cfg: dict, out: Output) -> None:
    params = privacy.PrivacyParams(cfg["alpha"], cfg["delta"], cfg["sigma2"])
    g = None
    if cfg["schedule"]:
        sched = gossip.Schedule.from_json(Path(cfg["schedule"]).read_text())
    else:
        g = parse_graph_spec(cfg["graph"], cfg["seed"])
        W = _gossip_matrix(g, cfg["lazy"], cfg["weights"])
        T = gossip.t_stop_sync(W, np.zeros(g.n), cfg["sigma2"]) if cfg["T"] == "auto" else cfg["T"]
        if T < 1:
            raise ConfigError("'T' must be >= 1")
        sched = gossip.Schedule.constant(W, T)
    plm = privacy.pairwise_loss_schedule(sched, params)
    out.add("ledger.csv", lambda p: data_io.write_ledger_csv(plm, p))
    out.add("ledger.json", lambda p: data_io.write_ledger_json(plm, p))
    off = plm.off_diagonal()
    summary = {"T": sched.T, "n": sched.n, "max": float(off.max(initial=0.0)), "mean": float(off.mean()) if off.size else 0.0,
               "ldp_per_message": params.per_message}
    print(json.dumps(summary))
    if cfg["by_distance"]:
        if g is None:
            raise ConfigError("'by_distance' needs a graph, not a schedule")
        rows = privacy.by_distance(plm, g)
        _print_table(["distance", "min", "mean", "max"], rows)
        out.write_csv("by_distance.csv", ["distance", "min", "mean", "max"], rows)
    if cfg["collusion"] is not None:
        if cfg["u"] is None:
            raise ConfigError("'collusion' needs 'u'")
        val = privacy.collusion_loss(sched, cfg["u"], cfg["collusion"], params)
        print(json.dumps({"collusion_loss": val, "u": cfg["u"], "V": cfg["collusion"]}))
        out.write_json("collusion.json", {"u": cfg["u"], "V": cfg["collusion"], "loss": val})
    if cfg["group"] is not None:
        if cfg["v"] is None:
            raise ConfigError("'group' needs 'v'")
        val = privacy.group_loss(sched, cfg["group"], cfg["v"], params)
        print(json.dumps({"group_loss": val, "U": cfg["group"], "v": cfg["v"]}))
        out.write_json("group.json", {"U": cfg["group"], "v": cfg["v"], "loss": val})


def _optimize_trial(cfg: dict, seed: int, with_ledger: bool) -> dict:
    ds = experiments.load_housing(cfg["dataset"], cfg["label_column"])
    n = cfg["n"]
    q = math.log(n) / n if cfg["q"] == "auto" else cfg["q"]
    train, test = data_io.train_test_split(ds, 0.8, seed=seed)
    obj = optim.Objective(data_io.partition(train, n, seed=seed), mu_reg=cfg["mu_reg"])
    fixed = parse_graph_spec(cfg["graph"], seed) if cfg["graph"] else None
    if fixed is not None and fixed.n != n:
        raise ConfigError(f"graph has {fixed.n} nodes but 'n' is {n}")
    ocfg = optim.OptimConfig(T=cfg["T"], step=cfg["step"], sigma2=cfg["sigma2"], mode=cfg["mode"], seed=seed,
                             K=None if cfg["K"] == "auto" else cfg["K"],
                             graph_source="fixed" if fixed else "fresh_er", q=q, alpha=cfg["alpha"],
                             ledger=with_ledger, eig_method="sparse" if n > 512 else "dense")
    algo = optim.muffliato_gd if cfg["mode"] == "gd" else optim.muffliato_sgd
    run = algo(obj, ocfg, graph=fixed, test=(test.X, test.y))
    res = {"seed": seed, "K": list(run.K), "test_acc": run.test_acc.tolist(),
           "final_acc": optim.evaluate(run.theta_out, test.X, test.y)[1], "ledger": run.ledger}
    if cfg["baseline"] != "none":
        base_fn = optim.central_baseline if cfg["baseline"] == "central" else optim.ldp_baseline
        base = base_fn(obj, ocfg, test=(test.X, test.y))
        res["baseline_test_acc"] = base.test_acc.tolist()
        res["baseline_final_acc"] = optim.evaluate(base.theta_out, test.X, test.y)[1]
    return res


def cmd_optimize(cfg: dict, out: Output) -> None:
    seeds = [experiments.trial_seed(cfg["seed"], i) for i in range(cfg["trials"])]
    args = [(cfg, s, cfg["ledger"] and i == 0) for i, s in enumerate(seeds)]
    res = experiments.map_trials(_optimize_trial, args, cfg["jobs"])
    nan = float("nan")
    rows = [(i, r["seed"], r["final_acc"], r.get("baseline_final_acc", nan), sum(r["K"])) for i, r in enumerate(res)]
    _print_table(["trial", "seed", "test_acc", "baseline_acc", "gossip_rounds"], rows)
    summary = {"mean_test_acc": float(np.mean([r[2] for r in rows])),
               "mean_baseline_acc": float(np.mean([r[3] for r in rows])) if cfg["baseline"] != "none" else None}
    print(json.dumps(summary))
    curves = [(i, t, a, r["baseline_test_acc"][t] if "baseline_test_acc" in r else "")
              for i, r in enumerate(res) for t, a in enumerate(r["test_acc"])]
    out.write_csv("accuracy.csv", ["trial", "t", "test_acc", "baseline_acc"], curves)
    out.write_json("accuracy.json", {**summary, "trials": [{k: v for k, v in r.items() if k != "ledger"} for r in res]})
    ledger = res[0]["ledger"]
    if ledger is not None:
        out.add("ledger.csv", lambda p: data_io.write_ledger_csv(ledger, p))
        off = ledger.off_diagonal()
        print(json.dumps({"ledger_max": float(off.max()), "ledger_mean": float(off.mean()),
                          "ldp_value": cfg["T"] * ledger.params.per_message}))


def _dropout_trial(cfg: dict, rate: float, seed: int):
    if cfg["T"] == "auto":
        return experiments.dropout_run(cfg["n"], cfg["q"], rate, seed, cfg["sigma2"], cfg["alpha"],
                                       tol=cfg["tol"], weights=cfg["weights"])
    return experiments.dropout_run(cfg["n"], cfg["q"], rate, seed, cfg["sigma2"], cfg["alpha"],
                                   tol=0.0, max_steps=cfg["T"], weights=cfg["weights"])


def cmd_dropout(cfg: dict, out: Output) -> None:
    for r in cfg["rate"]:
        if not 0.0 <= r < 1.0:
            raise ConfigError(f"invalid value for 'rate': {r} is outside [0, 1)")
    args = [(cfg, r, experiments.trial_seed(cfg["seed"], k)) for r in cfg["rate"] for k in range(cfg["reps"])]
    res = experiments.map_trials(_dropout_trial, args, cfg["jobs"])
    rows, summary = [], []
    for r in cfg["rate"]:
        runs = [x for x in res if x.dropout_rate == r]
        losses = np.array([x.mean_loss for x in runs])
        mses = np.array([x.final_mse for x in runs])
        summary.append((r, float(losses.mean()), float(losses.std()), float(mses.max()),
                        float(np.mean([x.steps for x in runs]))))
        rows += [(r, x.seed, x.steps, x.final_mse, x.mean_loss) for x in runs]
    _print_table(["dropout", "mean_loss", "std_loss", "max_final_mse", "mean_steps"], summary)
    out.write_csv("dropout_runs.csv", ["dropout", "seed", "steps", "final_mse", "mean_loss"], rows)
    out.write_csv("dropout_summary.csv", ["dropout", "mean_loss", "std_loss", "max_final_mse", "mean_steps"], summary)


HANDLERS = {
    "graph": cmd_graph,
    "average": cmd_average,
    "account": cmd_account,
    "optimize": cmd_optimize,
    "dropout": cmd_dropout,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    values = vars(ns)
    command = values.pop("command")
    config_path = values.pop("config", None)
    mode_pos = values.pop("mode_pos", None)
    if mode_pos is not None:
        values["mode"] = mode_pos
    try:
        file_values = _load_config_file(config_path) if config_path else {}
        cfg = resolve_config(command, file_values, values)
        out = Output(cfg["out"], command, cfg)
        HANDLERS[command](cfg, out)
        out.finish()
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MuffliatoError, OSError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
