"""Command-line entry point.

Subcommands: ``case validate``, ``sample``, ``cct``, ``train``, ``evaluate``,
``compare``, ``trace``.  A run directory created by ``sample`` carries the
resolved config (plus hash), the sampled case bundle, and the labeled
datasets; ``train`` adds checkpoints and learning curves; ``evaluate``,
``compare`` and ``trace`` add reports, figures and trace files.  All
artifacts carry the producing config hash, and ``evaluate``/``compare``
refuse checkpoints whose environment-interface hash does not match the run's
cases — the guardrail against silently evaluating a policy on dimensions it
was not trained for.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .curriculum import build_zone_tasks, coordinated_train, train_zone
from .env import Scenario, build_env_spec
from .network import CaseError, case_from_dict, case_to_dict, load_case, validate_case
from .pars import IterationStats, Policy, evaluate, load_policy, save_policy
from .report import compare, export_trace, run_baseline
from .rollout import RolloutPool
from .sampling import hierarchical_lhs
from .screening import (CYCLE_S, ScenarioDataset, Screener, build_datasets,
                        compute_cct, load_dataset, rank_and_sample_contingencies)

__all__ = ["main"]


def _fail(msg: str, code: int = 1) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _load_run_config(args) -> tuple[dict, str]:
    """Config precedence: --config file, else the run dir's stored config,
    else pure defaults; --seed/--workers override afterwards."""
    path = getattr(args, "config", None)
    if path is None:
        run_dir = getattr(args, "run_dir", None)
        if run_dir is not None and (Path(run_dir) / "config.json").exists():
            path = str(Path(run_dir) / "config.json")
    cfg = cfgmod.load_config(path)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        cfg["workers"] = args.workers
    return cfg, cfgmod.config_hash(cfg)


def _n_workers(cfg: dict) -> int:
    return int(cfg["workers"]) or (os.cpu_count() or 1)


def _write_config(run_dir: Path, cfg: dict, chash: str) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)
        fh.write("\n")
    (run_dir / "config.hash").write_text(chash + "\n")


def _save_cases(path: Path, cases) -> None:
    with open(path, "w") as fh:
        json.dump({"cases": [case_to_dict(c) for c in cases]}, fh)
        fh.write("\n")


def _load_cases(path: Path):
    with open(path) as fh:
        payload = json.load(fh)
    return [case_from_dict(d) for d in payload["cases"]]


def _run_spec(cfg: dict, cases):
    env = cfg["env"]
    return build_env_spec(cases[0], voltage_class_kv=env["voltage_class_kv"],
                          motor_mw_threshold=env["motor_mw_threshold"])


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# -- subcommand bodies ---------------------------------------------------------

def _cmd_case_validate(args) -> int:
    try:
        case = load_case(args.case)
        validate_case(case)
    except (CaseError, OSError, ValueError) as exc:
        return _fail(f"{args.case}: {exc}")
    print(f"{args.case}: ok ({len(case.buses)} buses, {len(case.branches)} branches, "
          f"{len(case.machines)} machines, {len(case.loads)} loads, "
          f"{len(case.zones)} zones)")
    return 0


def _cmd_sample(args) -> int:
    cfg, chash = _load_run_config(args)
    run_dir = Path(args.run_dir)
    base = load_case(args.case)
    rng = np.random.default_rng(cfg["seed"])

    report = hierarchical_lhs(base, cfgmod.sampling_config(cfg))
    if report.unfillable:
        print(f"warning: {len(report.unfillable)} unfillable strata: "
              f"{report.unfillable}", file=sys.stderr)
    cases = report.cases
    if not cases:
        return _fail("sampling produced no convergent cases")

    spec = _run_spec(cfg, [base])
    scr = cfg["screening"]
    candidates = args.buses or sorted(
        b.id for b in base.buses
        if b.voltage_kv > cfg["env"]["voltage_class_kv"])
    pairs = rank_and_sample_contingencies(
        base, candidates, scr["n_fault_buses"], rng,
        n_quantiles=scr["n_quantiles"],
        duration_cycles=tuple(scr["duration_cycles"]),
        durations_per_bus=scr["durations_per_bus"])
    train, test = build_datasets(
        cases, [b for b, _ in pairs], [d for _, d in pairs],
        split=tuple(scr["split"]), seed=cfg["seed"], spec=spec,
        provenance=chash)

    _write_config(run_dir, cfg, chash)
    ds_dir = run_dir / "datasets"
    ds_dir.mkdir(exist_ok=True)
    _save_cases(ds_dir / "cases.json", cases)
    train.to_csv(ds_dir / "train.csv")
    test.to_csv(ds_dir / "test.csv")
    print(f"{len(cases)} cases; train {len(train)} scenarios "
          f"({sum(train.requires_shedding)} require shedding), "
          f"test {len(test)} ({sum(test.requires_shedding)})")
    print(f"run directory: {run_dir}")
    return 0


def _cmd_cct(args) -> int:
    cfg, chash = _load_run_config(args)
    case = load_case(args.case)
    buses = args.buses or sorted(
        b.id for b in case.buses if b.voltage_kv > cfg["env"]["voltage_class_kv"])
    scr = Screener(case, spec=_run_spec(cfg, [case]))
    res = cfg["screening"]["resolution_cycles"] * CYCLE_S
    max_d = cfg["screening"]["max_cycles"] * CYCLE_S
    rows = []
    for bus in buses:
        r = compute_cct(scr, bus, resolution=res, max_duration=max_d,
                        case_id=case.case_id)
        flag = "below-range" if r.below_range else ("above-range" if r.above_range else "")
        rows.append([bus, repr(r.cct_s), f"{r.cct_cycles:.1f}", flag])
        print(f"bus {bus:4d}: CCT {r.cct_s*1e3:7.1f} ms ({r.cct_cycles:4.1f} cycles) {flag}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bus", "cct_s", "cct_cycles", "flag"])
            w.writerows(rows)
    return 0


def _curve_writer(path: Path):
    fh = open(path, "w", newline="", buffering=1)
    w = csv.writer(fh)
    w.writerow(["stage", "iteration", "mean_return", "std_return",
                "best_return", "sigma_r", "skipped", "n_tasks", "wall_s"])

    def write(stage: str, st: IterationStats) -> None:
        w.writerow([stage, st.iteration, repr(st.mean_return), repr(st.std_return),
                    repr(st.best_return), repr(st.sigma_r), int(st.skipped),
                    st.n_tasks, f"{st.wall_s:.3f}"])

    return fh, write


def _cmd_train(args) -> int:
    cfg, chash = _load_run_config(args)
    run_dir = Path(args.run_dir)
    ds_dir = run_dir / "datasets"
    cases = _load_cases(_require(ds_dir / "cases.json", "case bundle"))
    train_ds = load_dataset(_require(ds_dir / "train.csv", "train dataset"),
                            role="train", seed=cfg["seed"])
    spec = _run_spec(cfg, cases)
    spec_hash = cfgmod.env_spec_hash(spec)
    _write_config(run_dir, cfg, chash)

    base_case = cases[0]
    screener = Screener(cases, spec=spec)
    tasks = build_zone_tasks(base_case, spec, train_ds.scenarios, screener)
    for t in tasks:
        print(f"zone {t.zone_id}: {len(t.spec.controllable_buses)} controllable, "
              f"{t.n_scenarios} scenarios")

    pars_cfg = cfgmod.pars_config(cfg)
    cur_cfg = cfgmod.curriculum_config(cfg)
    relays = cfgmod.uvls_settings(cfg, backup=True)
    ck_dir = run_dir / "checkpoints"
    cv_dir = run_dir / "curves"
    ck_dir.mkdir(exist_ok=True)
    cv_dir.mkdir(exist_ok=True)
    curve_fh, on_iter = _curve_writer(cv_dir / "learning.csv")

    rng = np.random.default_rng(cfg["seed"])
    with RolloutPool(cases, spec, relays=relays, workers=_n_workers(cfg)) as pool:
        zone_policies = []
        for t in tasks:
            pol, mined = train_zone(t, cur_cfg, pars_cfg, pool, spec, rng,
                                    on_iteration=on_iter)
            zone_policies.append(pol)
            save_policy(pol, ck_dir / f"zone-{t.zone_id}.json",
                        config_hash=chash, env_spec_hash=spec_hash)
            with open(cv_dir / f"difficult-{t.zone_id}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["scenario_id"])
                w.writerows([[sid] for sid in sorted(mined)])
            print(f"zone {t.zone_id}: trained (mined {len(mined)} difficult tasks)")
        final = coordinated_train(zone_policies, tasks, spec, train_ds.scenarios,
                                  cur_cfg, pars_cfg, pool, rng, on_iteration=on_iter)
    curve_fh.close()

    from .curriculum import assemble_policy
    assembled = assemble_policy(zone_policies, tasks, spec, cur_cfg.z_dim)
    save_policy(assembled, ck_dir / "assembled.json",
                config_hash=chash, env_spec_hash=spec_hash)
    save_policy(final, ck_dir / "final.json",
                config_hash=chash, env_spec_hash=spec_hash)
    try:
        from .figures import learning_curve_figure
        learning_curve_figure(cv_dir / "learning.csv", cv_dir / "learning.png",
                              config_hash=chash)
    except Exception as exc:  # figures are best-effort decoration
        print(f"warning: learning-curve figure failed: {exc}", file=sys.stderr)
    print(f"checkpoints written to {ck_dir}")
    return 0


def _load_checkpoint_guarded(path: Path, spec_hash: str) -> Policy:
    policy, meta = load_policy(path)
    stored = meta.get("env_spec_hash", "")
    if stored and stored != spec_hash:
        raise ValueError(
            f"checkpoint {path.name} was trained against environment interface "
            f"{stored[:12]}…, but this run's cases derive {spec_hash[:12]}…")
    return policy


def _results_csv(path: Path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario_id", "total_reward", "voltage_penalty", "shed_penalty",
                    "invalid_penalty", "terminal_penalty", "mw_shed_policy",
                    "mw_shed_uvls", "min_terminal_voltage", "steps", "failed"])
        for r in results:
            w.writerow([r.scenario_id, repr(r.total_reward), repr(r.voltage_penalty),
                        repr(r.shed_penalty), repr(r.invalid_penalty),
                        repr(r.terminal_penalty), repr(r.mw_shed_policy),
                        repr(r.mw_shed_uvls), repr(r.min_terminal_voltage),
                        r.steps, int(r.failed)])


def _cmd_evaluate(args) -> int:
    cfg, chash = _load_run_config(args)
    run_dir = Path(args.run_dir)
    cases = _load_cases(_require(run_dir / "datasets" / "cases.json", "case bundle"))
    ds_path = _require(run_dir / "datasets" / f"{args.dataset}.csv", "dataset")
    dataset = load_dataset(ds_path, role=args.dataset, seed=cfg["seed"])
    spec = _run_spec(cfg, cases)
    policy = _load_checkpoint_guarded(
        _require(run_dir / "checkpoints" / args.checkpoint, "checkpoint"),
        cfgmod.env_spec_hash(spec))
    relays = cfgmod.uvls_settings(cfg, backup=True)
    with RolloutPool(cases, spec, relays=relays, workers=_n_workers(cfg)) as pool:
        results = evaluate(policy, dataset.scenarios, pool)
    rp_dir = run_dir / "reports"
    rp_dir.mkdir(exist_ok=True)
    out = rp_dir / f"eval-{Path(args.checkpoint).stem}-{args.dataset}.csv"
    _results_csv(out, results)
    mean = float(np.mean([r.total_reward for r in results]))
    print(f"{len(results)} scenarios, mean reward {mean:+.2f}; written {out}")
    return 0


def _cmd_compare(args) -> int:
    cfg, chash = _load_run_config(args)
    run_dir = Path(args.run_dir)
    cases = _load_cases(_require(run_dir / "datasets" / "cases.json", "case bundle"))
    dataset = load_dataset(_require(run_dir / "datasets" / f"{args.dataset}.csv",
                                    "dataset"), role=args.dataset, seed=cfg["seed"])
    spec = _run_spec(cfg, cases)
    policy = _load_checkpoint_guarded(
        _require(run_dir / "checkpoints" / args.checkpoint, "checkpoint"),
        cfgmod.env_spec_hash(spec))
    with RolloutPool(cases, spec, relays=cfgmod.uvls_settings(cfg, backup=True),
                     workers=_n_workers(cfg)) as pool:
        pol_results = evaluate(policy, dataset.scenarios, pool)
    base_results = run_baseline(dataset.scenarios, cases, spec=spec,
                                relays=cfgmod.uvls_settings(cfg, backup=False),
                                workers=_n_workers(cfg))
    report = compare(pol_results, base_results, dataset)
    rp_dir = run_dir / "reports"
    rp_dir.mkdir(exist_ok=True)
    stem = f"compare-{Path(args.checkpoint).stem}-{args.dataset}"
    report.to_csv(rp_dir / f"{stem}.csv")
    report.to_json(rp_dir / f"{stem}.json", config_hash=chash,
                   provenance=str(run_dir))
    try:
        from .figures import reward_diff_histogram
        reward_diff_histogram(report, rp_dir / f"{stem}.png", config_hash=chash)
    except Exception as exc:
        print(f"warning: histogram figure failed: {exc}", file=sys.stderr)
    agg = report.aggregates()
    print(f"{agg['n_scenarios']} scenarios ({agg['n_shedding_required']} require shedding)")
    print(f"win fraction (shedding-required): {agg['win_fraction']:.4f}")
    print(f"mean shed reduction:              {agg['mean_shed_reduction']:.4f}")
    print(f"no-shed compliance:               {agg['no_shed_compliance']:.4f}")
    return 0


def _find_scenario(run_dir: Path, scenario_id: str) -> Scenario:
    for role in ("train", "test"):
        path = run_dir / "datasets" / f"{role}.csv"
        if not path.exists():
            continue
        ds = load_dataset(path, role=role)
        for s in ds.scenarios:
            if s.scenario_id == scenario_id:
                return s
    raise KeyError(f"scenario {scenario_id!r} not found in run datasets")


def _cmd_trace(args) -> int:
    cfg, chash = _load_run_config(args)
    run_dir = Path(args.run_dir)
    cases = _load_cases(_require(run_dir / "datasets" / "cases.json", "case bundle"))
    spec = _run_spec(cfg, cases)
    scenario = _find_scenario(run_dir, args.scenario)
    tr_dir = run_dir / "traces"
    tr_dir.mkdir(exist_ok=True)
    files = {}
    uvls_csv = tr_dir / f"{args.scenario}-uvls.csv"
    export_trace(scenario, cases, None, uvls_csv, spec=spec,
                 relays=cfgmod.uvls_settings(cfg, backup=False))
    files["uvls baseline"] = str(uvls_csv)
    if args.checkpoint:
        policy = _load_checkpoint_guarded(
            _require(run_dir / "checkpoints" / args.checkpoint, "checkpoint"),
            cfgmod.env_spec_hash(spec))
        pol_csv = tr_dir / f"{args.scenario}-policy.csv"
        export_trace(scenario, cases, policy, pol_csv, spec=spec,
                     relays=cfgmod.uvls_settings(cfg, backup=True))
        files["policy + backup"] = str(pol_csv)
    try:
        from .figures import trace_figure
        trace_figure(files, tr_dir / f"{args.scenario}.png", config_hash=chash)
    except Exception as exc:
        print(f"warning: trace figure failed: {exc}", file=sys.stderr)
    for label, path in files.items():
        print(f"{label}: {path}")
    return 0


# -- argument parsing ----------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gridshed",
        description="Desk-scale grid emergency load-shedding toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, run_dir=True):
        p.add_argument("--config", help="JSON config file (defaults otherwise)")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--workers", type=int, help="worker processes (1 = serial)")
        if run_dir:
            p.add_argument("--run-dir", required=True, help="run directory")

    p_case = sub.add_parser("case", help="case-file utilities")
    case_sub = p_case.add_subparsers(dest="case_command", required=True)
    p_val = case_sub.add_parser("validate", help="validate a case file")
    p_val.add_argument("case")

    p_sample = sub.add_parser("sample", help="sample cases and build datasets")
    p_sample.add_argument("--case", required=True, help="base case file")
    p_sample.add_argument("--buses", type=int, nargs="*",
                          help="candidate fault buses (default: transmission buses)")
    common(p_sample)

    p_cct = sub.add_parser("cct", help="critical clearing times")
    p_cct.add_argument("--case", required=True)
    p_cct.add_argument("--buses", type=int, nargs="*")
    p_cct.add_argument("--out", help="write results CSV here")
    common(p_cct, run_dir=False)

    p_train = sub.add_parser("train", help="three-stage curriculum training")
    common(p_train)

    p_eval = sub.add_parser("evaluate", help="greedy evaluation of a checkpoint")
    p_eval.add_argument("--checkpoint", default="final.json")
    p_eval.add_argument("--dataset", choices=("train", "test"), default="test")
    common(p_eval)

    p_cmp = sub.add_parser("compare", help="policy vs UVLS baseline report")
    p_cmp.add_argument("--checkpoint", default="final.json")
    p_cmp.add_argument("--dataset", choices=("train", "test"), default="test")
    common(p_cmp)

    p_tr = sub.add_parser("trace", help="export episode traces for one scenario")
    p_tr.add_argument("--scenario", required=True, help="scenario id")
    p_tr.add_argument("--checkpoint", default="final.json",
                      help="'' traces the baseline only")
    common(p_tr)
    return ap


_BODIES = {
    "sample": _cmd_sample,
    "cct": _cmd_cct,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "compare": _cmd_compare,
    "trace": _cmd_trace,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "case":
            return _cmd_case_validate(args)
        return _BODIES[args.command](args)
    except cfgmod.ConfigError as exc:
        return _fail(f"config: {exc}")
    except KeyError as exc:
        return _fail(str(exc.args[0]) if exc.args else str(exc))
    except (FileNotFoundError, ValueError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
