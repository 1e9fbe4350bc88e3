"""Command-line entry point.

Subcommands: ``gen``, ``sim``, ``train``, ``eval``, ``wl``, ``complexify`` and
``gradcheck``. Exit codes are 0 for success (and an indistinguishable WL
verdict), 1 for a distinguishable WL verdict, 2 for usage or input errors and
3 for internal failures such as a failed gradient check. Errors print their
class name on stderr. ``--json`` switches stdout to machine-readable JSON.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import errors
from . import tensornn as tn
from .baselines import qt_predict
from .datasets import GenConfig, build_dataset, evaluate, load_dataset, random_scenario, sim_duration
from .netmodel import (
    FlowMetrics,
    ModelConfig,
    RouteNetModel,
    TrainConfig,
    complexify,
    encode_features,
    load_scenario,
    message_passing,
    readout,
    train,
    transmission_floor,
)
from .netsim import simulate
from .topology import CombinatorialComplex, Kind, NeighborhoodSpec, incidence_down, validate
from .wl import ccwl_refine, load_fixture, ord_ccwl_refine

EXIT_OK, EXIT_DISTINGUISHABLE, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2, 3

# errors caused by a broken invariant inside the package rather than by bad input
INTERNAL_ERRORS = (
    errors.NonFinite,
    errors.Divergence,
    errors.MissingState,
    errors.ShapeMismatch,
    errors.NotScalar,
    errors.UnfittedStats,
)

TARGETS = ("delay", "jitter", "loss")
_PRED_COLUMNS = {"delay": "mean_delay_s", "jitter": "jitter_s", "loss": "loss_rate"}


class UsageError(Exception):
    pass


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("ORDNET_SEED")
    if env is None:
        raise UsageError("a seed is required: pass --seed or set ORDNET_SEED")
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"ORDNET_SEED must be an integer, got {env!r}") from None


def _plain(obj):
    """Replace non-finite floats by None so the output is strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _dumps(obj) -> str:
    return json.dumps(_plain(obj), indent=1, sort_keys=True, allow_nan=False)


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(_dumps(payload))
    else:
        print(text)


def _writable(path: Path) -> None:
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise UsageError(f"cannot write to {path}")


# --- gen / sim ------------------------------------------------------------------


def cmd_gen(args) -> int:
    seed = _seed(args)
    if args.config:
        cfg = GenConfig.from_json(json.loads(Path(args.config).read_text()))
    else:
        cfg = GenConfig()
    overrides = {
        "nodes": args.nodes,
        "flows": args.flows,
        "count": args.count,
        "topology": args.topology,
        "sp_prob": args.sp_prob,
        "packets_per_flow": args.packets_per_flow,
        "traffic": tuple(args.traffic.split(",")) if args.traffic else None,
        "utilization": tuple(args.utilization) if args.utilization else None,
    }
    cfg = GenConfig.from_json({**cfg.to_json(), **{k: v for k, v in overrides.items() if v is not None}})
    log = None if args.json else (lambda name: print(f"labeled {name}", file=sys.stderr))
    ds = build_dataset(args.out, cfg, seed, log=log)
    payload = {"out": str(args.out), "scenarios": len(ds.scenarios), "splits": {k: len(v) for k, v in ds.splits.items()}}
    _emit(args, payload, f"wrote {len(ds.scenarios)} scenarios to {args.out}")
    return EXIT_OK


def cmd_sim(args) -> int:
    seed = _seed(args)
    sc = load_scenario(args.scenario)
    duration = args.duration if args.duration is not None else sim_duration(sc, args.packets_per_flow)
    res = simulate(sc, seed, duration, warmup=args.warmup)
    rows = res.label_rows()
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]) + ["delay_se_s"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**{k: repr(v) if isinstance(v, float) else v for k, v in r.items()}, "delay_se_s": repr(res.delay_se[r["flow_id"]])})
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    payload = {
        "duration": duration,
        "flows": {r["flow_id"]: {**r, "delay_se_s": res.delay_se[r["flow_id"]]} for r in rows},
        "link_utilization": res.link_utilization,
    }
    _emit(args, payload, buf.getvalue().rstrip("\n"))
    return EXIT_OK


# --- train / eval ---------------------------------------------------------------


def cmd_train(args) -> int:
    seed = _seed(args)
    out = Path(args.out)
    _writable(out)
    history_path = Path(args.history) if args.history else out.with_name("history.csv")
    _writable(history_path)
    ds = load_dataset(args.data)
    model = RouteNetModel(
        ModelConfig(dim=args.dim, iterations=args.iterations, head_hidden=args.head_hidden), seed=seed
    )
    cfg = TrainConfig(
        epochs=args.epochs, lr=args.lr, patience=args.patience, target=args.target, batch_size=args.batch_size, seed=seed
    )
    log = None if args.json else (lambda r: print(f"epoch {r['epoch']} train_mape {r['train_mape']:.3f} val_mape {r['val_mape']:.3f}", file=sys.stderr))
    model, history = train(model, ds.split("train"), ds.split("val"), cfg, log=log)
    model.save(out, {"seed": seed, "target": args.target})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["epoch", "train_loss", "train_mape", "val_mape"], lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    history_path.write_text(buf.getvalue())
    best = min((r["val_mape"] for r in history), default=math.nan)
    payload = {"checkpoint": str(out), "history": str(history_path), "epochs": len(history), "best_val_mape": best}
    _emit(args, payload, f"saved {out} after {len(history)} epochs (best val MAPE {best:.3f}%)")
    return EXIT_OK


def read_predictions(path) -> dict:
    """Read ``scenario,flow_id`` plus any of the label columns; absent columns become NaN."""
    out: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"scenario", "flow_id"} <= set(reader.fieldnames):
            raise UsageError("predictions CSV needs scenario and flow_id columns")
        for r in reader:
            vals = [float(r[c]) if r.get(c) not in (None, "") else math.nan for c in _PRED_COLUMNS.values()]
            out.setdefault(r["scenario"], {})[r["flow_id"]] = FlowMetrics(*vals)
    return out


def _table(rows: dict) -> str:
    lines = [f"{'model':<10}{'target':<8}{'MAPE %':>12}{'MSE':>14}{'MAE':>14}{'n':>7}"]
    for name, rep in rows.items():
        for target, m in rep.targets.items():
            lines.append(f"{name:<10}{target:<8}{m.mape:>12.4f}{m.mse:>14.6g}{m.mae:>14.6g}{m.n:>7d}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    names = ds.splits.get(args.split)
    if names is None:
        raise UsageError(f"unknown split {args.split!r}")
    labels = {n: ds.labels[n] for n in names}
    targets = tuple(args.target)
    rows: dict = {}
    if args.checkpoint:
        model = RouteNetModel.load(args.checkpoint)
        rows["model"] = evaluate({n: model.predict(ds.scenarios[n]) for n in names}, labels, targets)
    if args.predictions:
        rows["predicted"] = evaluate(read_predictions(args.predictions), labels, targets)
    if "delay" in targets:
        qt = {n: qt_predict(ds.scenarios[n]).delay for n in names}
        rows["qt"] = evaluate(qt, labels, ("delay",))
    if args.report:
        Path(args.report).write_text(_dumps({k: v.to_json() for k, v in rows.items()}) + "\n")
    payload = {"split": args.split, "rows": {k: v.to_json() for k, v in rows.items()}}
    _emit(args, payload, _table(rows))
    return EXIT_OK


# --- wl / complexify ------------------------------------------------------------


def parse_spec(text: str) -> NeighborhoodSpec:
    """Parse ``kind[:r][@rank]``, e.g. ``incidence_down:1@2``."""
    body, _, rank = text.partition("@")
    kind, _, r = body.partition(":")
    try:
        return NeighborhoodSpec(Kind(kind), int(r or 1), int(rank) if rank else None)
    except ValueError as err:
        raise UsageError(f"bad neighborhood {text!r}: {err}") from None


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise UsageError(f"{path}: malformed JSON ({err})") from None


def _load_pair(paths):
    if len(paths) == 1:
        a, b, specs = load_fixture(paths[0])
        return a, b, specs
    if len(paths) != 2:
        raise UsageError("wl takes one pair file or two complex files")
    a, b = (CombinatorialComplex.from_json(_read_json(p)) for p in paths)
    declared = {o.neighborhood for cc in (a, b) for o in cc.orders}
    return a, b, sorted(declared, key=str) or [incidence_down(1)]


def cmd_wl(args) -> int:
    a, b, specs = _load_pair(args.paths)
    if args.spec:
        specs = [parse_spec(s) for s in args.spec]
    verdict = ord_ccwl_refine(a, b, specs) if args.ordered else ccwl_refine(a, b, specs)
    payload = {
        "distinguishable": verdict.distinguishable,
        "ordered": args.ordered,
        "rounds": verdict.rounds,
        "specs": [s.to_json() for s in specs],
    }
    _emit(args, payload, "distinguishable" if verdict.distinguishable else "indistinguishable")
    return EXIT_DISTINGUISHABLE if verdict.distinguishable else EXIT_OK


def cmd_complexify(args) -> int:
    sc = load_scenario(args.scenario)
    scx = complexify(sc)
    violations = [{"kind": v.kind, "cells": list(v.cells), "detail": v.detail} for v in validate(scx.cc)]
    counts = {str(k): v for k, v in sorted(scx.cc.count_by_rank().items())}
    if args.out:
        Path(args.out).write_text(scx.cc.dumps() + "\n")
    payload = {"counts": counts, "violations": violations}
    if not args.out:
        payload["complex"] = scx.cc.to_json()
    text = f"cells by rank {counts}; {len(violations)} violations"
    _emit(args, payload, text)
    return EXIT_OK if not violations else EXIT_INTERNAL


# --- gradcheck ------------------------------------------------------------------


def gradient_checks(seed: int, tol: float = 1e-4, max_coords: int = 200) -> dict:
    """Finite-difference checks of the core layers and the full delay pipeline."""
    rng = np.random.default_rng(seed)
    x = tn.Tensor(rng.normal(size=(3, 4)))
    h = tn.Tensor(rng.normal(size=(3, 5)))
    w = rng.normal(size=(3, 5))

    def weighted(t):
        return tn.reduce_sum(tn.mul(t, w[:, : t.shape[-1]]))

    def bounded(t):
        return tn.reduce_sum(tn.mul(tn.tanh(t), w[:, : t.shape[-1]]))

    sc = random_scenario(GenConfig(nodes=4, flows=4), np.random.default_rng(seed))
    model = RouteNetModel(ModelConfig(dim=5, iterations=2, head_hidden=4), seed=seed)
    model.fit_stats([sc])
    floor = transmission_floor(sc)

    def pipeline(ps, _):
        out = readout(model, sc, message_passing(model, sc, encode_features(model, sc)))
        return tn.reduce_sum(tn.mul(out["delay"], 1.0 / floor))

    cases = {
        "linear": (tn.ParamStore(seed), lambda ps, _: weighted(tn.linear(ps, "lin", x, 5))),
        "mlp": (tn.ParamStore(seed), lambda ps, _: bounded(tn.mlp(ps, "mlp", [6, 5], x, "tanh"))),
        "gru": (tn.ParamStore(seed), lambda ps, _: weighted(tn.gru_step(ps, "gru", x, h))),
        "model": (model.params, pipeline),
    }
    report = {}
    for name, (params, fn) in cases.items():
        fn(params, None)  # create parameters lazily before sampling coordinates
        rep = tn.grad_check(fn, params, None, tol=tol, max_coords=max_coords, seed=seed)
        report[name] = {"max_rel_err": rep.max_rel_err, "coords": rep.n_coords, "passed": rep.passed}
    return report


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else int(os.environ.get("ORDNET_SEED", 0))
    if args.corrupt:
        with tn.corrupted_backward():
            report = gradient_checks(seed, args.tol)
    else:
        report = gradient_checks(seed, args.tol)
    ok = all(r["passed"] for r in report.values())
    lines = [f"{name:<8} max rel err {r['max_rel_err']:.3e}  {'pass' if r['passed'] else 'FAIL'}" for name, r in report.items()]
    _emit(args, {"passed": ok, "tol": args.tol, "components": report}, "\n".join(lines))
    return EXIT_OK if ok else EXIT_INTERNAL


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ordnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text, seed=False):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(fn=fn)
        sp.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="random seed (falls back to ORDNET_SEED)")
        return sp

    g = command("gen", cmd_gen, "generate and label a scenario dataset", seed=True)
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--config", help="GenConfig JSON file; flags override its fields")
    g.add_argument("--nodes", type=int)
    g.add_argument("--flows", type=int)
    g.add_argument("--count", type=int)
    g.add_argument("--topology", choices=["er", "ba"])
    g.add_argument("--traffic", help="comma-separated traffic models")
    g.add_argument("--sp-prob", type=float)
    g.add_argument("--utilization", type=float, nargs=2, metavar=("LO", "HI"))
    g.add_argument("--packets-per-flow", type=int)

    s = command("sim", cmd_sim, "simulate one scenario", seed=True)
    s.add_argument("scenario")
    s.add_argument("--duration", type=float)
    s.add_argument("--warmup", type=float)
    s.add_argument("--packets-per-flow", type=int, default=5000)
    s.add_argument("--out", help="write the per-flow CSV here")

    t = command("train", cmd_train, "train the delay model on a dataset", seed=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="history CSV (default: history.csv next to the checkpoint)")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--batch-size", type=int, default=5)
    t.add_argument("--patience", type=int, default=40)
    t.add_argument("--dim", type=int, default=32)
    t.add_argument("--iterations", type=int, default=8)
    t.add_argument("--head-hidden", type=int, default=16)
    t.add_argument("--target", choices=TARGETS, default="delay")

    e = command("eval", cmd_eval, "score a checkpoint or prediction file against the QT baseline")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="CSV with scenario, flow_id and label columns")
    e.add_argument("--target", choices=TARGETS, action="append", default=None)
    e.add_argument("--report", help="write the metric report JSON here")

    w = command("wl", cmd_wl, "run the (ordered) Weisfeiler-Lehman test on two complexes")
    w.add_argument("paths", nargs="+", help="one pair file or two complex files")
    w.add_argument("--ordered", action="store_true")
    w.add_argument("--spec", action="append", help="neighborhood kind[:r][@rank]; repeatable")

    c = command("complexify", cmd_complexify, "lift a scenario to a combinatorial complex")
    c.add_argument("scenario")
    c.add_argument("--out")

    gc = command("gradcheck", cmd_gradcheck, "finite-difference gradient checks", seed=True)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--corrupt", action="store_true", help="test hook: perturb backward passes")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "target", "") is None:
        args.target = ["delay"]
    try:
        return args.fn(args)
    except UsageError as err:
        print(f"UsageError: {err}", file=sys.stderr)
        return EXIT_USAGE
    except INTERNAL_ERRORS as err:
        print(f"{type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_INTERNAL
    except (errors.OrdnetError, OSError, json.JSONDecodeError, KeyError, ValueError) as err:
        print(f"{type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as err:  # noqa: BLE001 - report anything else as an internal failure
        print(f"{type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
