"""Command-line front end.

Exit codes: 0 success, 1 failed verification, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np

from .config import ConfigError, load_instance
from .instance import MarketInstance
from .mechanism import (
    DirectMechanism, InterimSchedule, check_grid, mechanism_schedule, verify_ic, verify_ir,
)
from .pryce_cap import (
    OFF_RANGE_RULES, PryceCap, check_equivalence, downward_closed, price_cap, prop1_check, region_map,
    symmetric_hypotheses,
)
from .probkit import parallel_map
from .zoo import (
    StrategyProfile, evaluate, make_entry_deterrence, make_monopoly, make_price_competition,
    make_promotional_sales, make_quantity_competition, make_reverse_auction,
    monopoly_price_profile, opt_out_profile, truthful_profile,
)

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2
IC_TOL = 1e-3
IR_TOL = 1e-9
TOP_TOL = 1e-6
DEFAULT_COMPARISON = ("monopoly:monopoly-best", "price-competition:truthful",
                      "reverse-auction:truthful", "promotional-sales:truthful",
                      "pryce-cap:virtual-cost")


def _dump_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


def _firm_index(inst: MarketInstance, firm: int) -> int:
    if not 1 <= firm <= inst.n:
        raise ConfigError("--firm", f"must be between 1 and {inst.n}")
    return firm - 1


# ------------------------------------------------------------------ commands
def cmd_iron(inst: MarketInstance, args) -> int:
    i = _firm_index(inst, args.firm)
    vc = inst.virtual_costs[i]
    dist = inst.firms[i].dist
    theta = check_grid(inst, i, args.points)
    doc = {
        "firm": args.firm,
        "theta": theta.tolist(),
        "phi": np.asarray(vc(theta)).tolist(),
        "flat_segments": [{"theta_start": a, "theta_end": b, "value": v}
                          for a, b, v in vc.flat_segments()],
        "range": [vc.lower, vc.upper],
        "support": [dist.lower, dist.upper],
    }
    _emit(_dump_json(doc), args.out)
    return EXIT_OK


def cmd_regions(inst: MarketInstance, args) -> int:
    if inst.n != 2:
        raise ConfigError("firms", "regions needs exactly two firms")
    prices, masks = region_map(inst, args.resolution)
    flat = masks.ravel()
    rows = [(_fmt(s1), _fmt(s2), int(m)) for (s1, s2), m in zip(prices, flat)]
    _emit(_csv_text(("s1", "s2", "bitmask"), rows), args.out)
    counts = {int(m): int(c) for m, c in zip(*np.unique(flat, return_counts=True))}
    print(f"regions: {sorted(counts)} downward-closed: {downward_closed(masks)}", file=sys.stderr)
    return EXIT_OK


def _mechanism_doc(mech: DirectMechanism) -> dict[str, Any]:
    return {
        "firms": [t.to_dict() for t in mech.tables],
        "flat_segments": [[list(s) for s in vc.flat_segments()] for vc in mech.virtual_costs],
        "objective": mech.objective.to_dict(),
    }


def cmd_solve(inst: MarketInstance, args) -> int:
    mech = DirectMechanism(inst, args.seed)
    _emit(_dump_json(_mechanism_doc(mech)), args.out)
    return EXIT_OK


def cmd_caps(inst: MarketInstance, args) -> int:
    if inst.n < 2:
        raise ConfigError("firms", "caps need at least two firms")
    grid = np.linspace(0.0, inst.v_max, args.points)

    def curve(i):
        s = np.tile(grid[:, None], (1, inst.n))
        return price_cap(inst, i, s)

    caps = parallel_map(curve, list(range(inst.n)), args.threads)
    header = ["firm"] + [f"s_other_{k}" for k in range(1, inst.n)] + ["cap"]
    rows = []
    for i, c in enumerate(caps):
        for s, p in zip(grid, c):
            rows.append([i + 1] + [_fmt(s)] * (inst.n - 1) + [_fmt(p)])
    _emit(_csv_text(header, rows), args.out)
    return EXIT_OK


def _schedule_checks(inst: MarketInstance, schedules, tabulated: bool = False) -> dict[str, Any]:
    """IC, IR and monotonicity per firm.

    Tabulated schedules are checked at their own nodes, since interpolating
    quantity and transfer separately creates spurious violations between them.
    """
    out: dict[str, Any] = {}
    for i, (schedule, quantity) in enumerate(schedules):
        types = schedule.theta if tabulated else check_grid(inst, i, 64)
        ic = verify_ic(schedule, types)
        ir = verify_ir(schedule, types)
        top = verify_ir(schedule, types[-1:])
        q = np.asarray(quantity)
        out[f"firm{i + 1}"] = {
            "ic": {"passed": ic <= IC_TOL, "max_gain": ic},
            "ir": {"passed": ir >= -IR_TOL and abs(top) <= TOP_TOL, "min_profit": ir,
                   "top_profit": top},
            "monotone": {"passed": bool(np.all(np.diff(q) <= 1e-12)),
                         "max_increase": float(max(0.0, np.max(np.diff(q), initial=0.0)))},
        }
    return out


def _load_schedules(path: str, inst: MarketInstance):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("--mechanism", f"cannot read mechanism file ({exc})") from None
    firms = doc.get("firms") if isinstance(doc, dict) else None
    if not isinstance(firms, list) or len(firms) != inst.n:
        raise ConfigError("--mechanism.firms", f"must list {inst.n} firm schedules")
    out = []
    for k, f in enumerate(firms):
        try:
            theta = np.asarray(f["theta"], dtype=float)
            quantity = np.asarray(f["quantity"], dtype=float)
            transfer = np.asarray(f["transfer"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"--mechanism.firms[{k}]", f"bad schedule ({exc})") from None
        if not (theta.shape == quantity.shape == transfer.shape) or theta.ndim != 1:
            raise ConfigError(f"--mechanism.firms[{k}]", "theta, quantity and transfer must match")
        if len(theta) < 2 or np.any(np.diff(theta) <= 0):
            raise ConfigError(f"--mechanism.firms[{k}].theta", "must be strictly increasing")
        out.append((InterimSchedule(theta, quantity, transfer), quantity))
    return out


def _failures(doc: dict[str, Any], prefix: str = "") -> list[str]:
    names = []
    for key, value in sorted(doc.items()):
        if isinstance(value, dict):
            if value.get("passed") is False and not any(isinstance(v, dict) for v in value.values()):
                names.append(prefix + key)
            names += _failures(value, prefix + key + ".")
    return names


def cmd_verify(inst: MarketInstance, args) -> int:
    report: dict[str, Any] = {}
    if args.mechanism:
        report["mechanism"] = _schedule_checks(inst, _load_schedules(args.mechanism, inst),
                                               tabulated=True)
    else:
        mech = DirectMechanism(inst, args.seed)
        report["mechanism"] = _schedule_checks(
            inst, [(mechanism_schedule(mech, i), t.quantity) for i, t in enumerate(mech.tables)])
        cap = PryceCap(mech, off_range=args.off_range)
        eq = check_equivalence(inst, mech, cap, seed=args.seed or 0)
        report["equivalence"] = eq.to_dict()
        gaps = parallel_map(cap.best_response_gap, list(range(inst.n)), args.threads)
        report["best_response"] = {"passed": max(gaps) <= IC_TOL, "gaps": gaps}
        if inst.n >= 2 and symmetric_hypotheses(inst):
            report["prop1"] = prop1_check(inst, seed=args.seed or 0).to_dict()
    failed = _failures(report)
    report["passed"] = not failed
    report["failed_checks"] = failed
    _emit(_dump_json(report), args.out)
    for name in failed:
        print(f"FAIL {name}", file=sys.stderr)
    return EXIT_FAILED if failed else EXIT_OK


def _structure(name: str, inst: MarketInstance, mech_holder: dict, captive: float | None,
               off_range: str):
    if name == "monopoly":
        return make_monopoly(inst)
    if name == "price-competition":
        return make_price_competition(inst)
    if name == "quantity-competition":
        return make_quantity_competition(inst)
    if name == "entry-deterrence":
        return make_entry_deterrence(inst)
    if name == "promotional-sales":
        gamma = 0.5 / inst.n if captive is None else captive
        return make_promotional_sales(inst, [gamma] * inst.n)
    if name == "reverse-auction":
        return make_reverse_auction(inst)
    if name == "pryce-cap":
        return PryceCap(mech_holder["mech"], off_range=off_range)
    raise ConfigError("--structures", f"unknown structure {name!r}")


def _profile(name: str, structure, inst: MarketInstance) -> StrategyProfile:
    if name == "truthful":
        return truthful_profile(structure)
    if name == "virtual-cost":
        return StrategyProfile.virtual_costs(inst)
    if name == "monopoly-best":
        return monopoly_price_profile(inst)
    if name == "opt-out":
        return opt_out_profile(structure)
    if name.startswith("constant="):
        try:
            value = float(name.split("=", 1)[1])
        except ValueError:
            raise ConfigError("--structures", f"bad constant profile {name!r}") from None
        return StrategyProfile.constant([value] * inst.n)
    raise ConfigError("--structures", f"unknown profile {name!r}")


def cmd_compare(inst: MarketInstance, args) -> int:
    mech = DirectMechanism(inst, args.seed)
    holder = {"mech": mech}
    eff = mech.objective
    rows = [("efficient-mechanism", "truthful", _fmt(eff.weighted_objective),
             _fmt(eff.standard_error), _fmt(eff.consumer_surplus), "")]
    worst = 0.0
    for token in args.structures:
        name, _, prof = token.partition(":")
        structure = _structure(name, inst, holder, args.captive, args.off_range)
        profile = _profile(prof or "truthful", structure, inst)
        rep = evaluate(structure, inst, profile, seed=args.seed or 0)
        se = float(np.hypot(rep.objective_se, eff.standard_error))
        excess = rep.weighted_objective - eff.weighted_objective - 3.0 * se - 1e-3 * inst.scale
        worst = max(worst, excess)
        rows.append((name, prof or "truthful", _fmt(rep.weighted_objective), _fmt(rep.objective_se),
                     _fmt(rep.consumer_surplus), str(excess <= 0).lower()))
    header = ("structure", "profile", "weighted_objective", "standard_error",
              "consumer_surplus", "dominated")
    _emit(_csv_text(header, rows), args.out)
    return EXIT_OK if worst <= 0 else EXIT_FAILED


COMMANDS = {
    "iron": cmd_iron,
    "regions": cmd_regions,
    "solve": cmd_solve,
    "caps": cmd_caps,
    "verify": cmd_verify,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="instance configuration (JSON)")
    common.add_argument("--seed", type=int, default=None, help="override integration.seed")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads (never changes results)")
    common.add_argument("--out", default=None, help="output file (default: stdout)")

    parser = argparse.ArgumentParser(prog="prycecap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("iron", parents=[common], help="ironed virtual cost of one firm")
    p.add_argument("--firm", type=int, default=1, help="1-based firm index")
    p.add_argument("--points", type=int, default=257)
    p = sub.add_parser("regions", parents=[common], help="admitted-set map over a price grid")
    p.add_argument("--resolution", type=int, default=512)
    sub.add_parser("solve", parents=[common], help="efficient mechanism report")
    p = sub.add_parser("caps", parents=[common], help="price-cap curves")
    p.add_argument("--points", type=int, default=129)
    off_range = argparse.ArgumentParser(add_help=False)
    off_range.add_argument("--off-range", choices=OFF_RANGE_RULES, default="deter",
                           help="lump sum at prices no type posts in equilibrium")
    p = sub.add_parser("verify", parents=[common, off_range], help="run the verification suite")
    p.add_argument("--mechanism", default=None,
                   help="JSON schedules {firms: [{theta, quantity, transfer}]} to check instead")
    p = sub.add_parser("compare", parents=[common, off_range],
                       help="weighted objectives of market structures")
    p.add_argument("--structures", nargs="+", default=list(DEFAULT_COMPARISON),
                   help="structure[:profile] tokens")
    p.add_argument("--captive", type=float, default=None,
                   help="captive share per firm for promotional sales")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        inst = load_instance(args.config, args.seed)
        return COMMANDS[args.command](inst, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
