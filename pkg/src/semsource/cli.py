"""Command-line entry point: ``semsource <command> [options]``.

Every command writes its outputs plus a ``manifest.json`` into ``--out-dir``.
Exit status is 0 on success, 1 for invalid input and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import tempfile
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from . import experiment as ex
from .config import ConfigError, config_hash, load_config, load_preset, parse_config
from .matching import (calibrate_empirical, end_to_end_md_fa, expected_tp, fa_match_prob,
                       load_score_file, md_match_prob, solve_threshold, tx_rates)

log = logging.getLogger("semsource")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _fmt(v) -> str:
    # repr keeps full precision, so reruns produce identical bytes
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, data: dict, seed, outputs, argv,
                   extra=None) -> Path:
    manifest = {
        "command": command,
        "config_hash": config_hash(data),
        "seed": seed,
        "tool_version": tool_version(),
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "outputs": {p.name: _sha256(p) for p in outputs},
        "argv": argv,
        "config": data,
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# Commands -------------------------------------------------------------------

ANALYSIS_COLUMNS = ("tau", "md_match", "fa_match", "lambda_tp", "lambda_fa", "p_err_ul",
                    "eps_md", "eps_fa", "expected_tp")


def cmd_analyze(args, data, cfg, out: Path):
    n = args.points
    taus = np.arange(1, n + 1) / n
    mp, ch = cfg.match_params, cfg.channel
    md = md_match_prob(taus, mp)
    fa = fa_match_prob(taus, mp)
    lam_tp, lam_fa = tx_rates(taus, mp)
    p_ul = ch.uplink_error(lam_tp + lam_fa)
    e_md, e_fa = end_to_end_md_fa(taus, mp, ch)
    entp = expected_tp(taus, mp, ch)
    rows = [dict(zip(ANALYSIS_COLUMNS, vals)) for vals in
            zip(taus, md, fa, lam_tp, lam_fa, p_ul, e_md, e_fa, entp)]
    path = out / "analysis.csv"
    write_csv(path, ANALYSIS_COLUMNS, rows)
    print(f"wrote {path} ({n} thresholds)")
    return [path], {}


def cmd_optimize(args, data, cfg, out: Path):
    sol = cfg.solve()
    info = sol.to_dict()
    info["uplink"] = "aloha" if cfg.channel.is_aloha else "irsa"
    info["feasible"] = bool(sol.total_rate < cfg.slots or cfg.channel.is_aloha)
    for k, v in info.items():
        print(f"{k}: {_fmt(v)}")
    path = out / "optimize.json"
    path.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return [path], {"tau_used": sol.tau}


SIM_COLUMNS = ("scheme", "tau_used", "accuracy", "acc_ci", "eps_md", "md_ci", "eps_fa",
               "fa_ci", "mean_ntp", "ntp_ci", "trials", "md_trials", "fa_trials",
               "analytic_md", "analytic_fa", "analytic_entp")


def _record(rep, tau, analytic):
    return {"scheme": rep.scheme, "tau_used": tau, "accuracy": rep.accuracy,
            "acc_ci": rep.acc_ci, "eps_md": rep.eps_md, "md_ci": rep.md_ci,
            "eps_fa": rep.eps_fa, "fa_ci": rep.fa_ci, "mean_ntp": rep.mean_n_tp,
            "ntp_ci": rep.ntp_ci, "trials": rep.trials, "md_trials": rep.md_trials,
            "fa_trials": rep.fa_trials, **analytic}


def cmd_simulate(args, data, cfg, out: Path):
    trials = args.trials if args.trials is not None else cfg.trials
    tau, sol = cfg.resolve_tau()
    rep = ex.estimate_metrics(cfg, tau, trials, args.workers)
    rows = [_record(rep, tau, ex.analytic_point(cfg, tau))]
    baselines = list(data.get("baselines", []))
    for b in args.baseline or []:
        if b not in baselines:
            baselines.append(b)
    for b in baselines:
        if b == "query_free":
            r = ex.baseline_query_free(cfg, trials, args.workers)
            rows.append(_record(r, None, ex.analytic_point(cfg, 1.0, b)))
        else:
            r = ex.baseline_perfect_matching(cfg, trials, ex.default_tau_grid(), args.workers)
            rows.append(_record(r, r.tau, ex.analytic_point(cfg, r.tau, b)))
    path = out / "simulate.csv"
    write_csv(path, SIM_COLUMNS, rows)
    for r in rows:
        print(f"{r['scheme']}: tau={_fmt(r['tau_used'])} accuracy={r['accuracy']:.4f} "
              f"eps_md={r['eps_md']:.4f} eps_fa={r['eps_fa']:.4f}")
    extra = {"tau_used": tau, "trials": trials}
    if sol is not None:
        extra["solver"] = sol.to_dict()
    return [path], extra


_SERIES_AXIS = {"target_gain": "gain", "p_pos": "p_pos", "query_dim": "query_dim",
                "tau": "tau"}


def _parse_values(text: str):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated numbers, got {text!r}") from None


def cmd_sweep(args, data, cfg, out: Path):
    block = data.get("sweep") or {}
    axis = args.axis or block.get("axis")
    if axis is None:
        raise ConfigError("sweep needs --axis or a 'sweep' block in the config")
    if axis not in ex.AXES:
        raise ConfigError(f"unknown axis {axis!r}; expected one of {', '.join(ex.AXES)}")
    if args.values is not None:
        values = _parse_values(args.values)
    elif args.axis is None or args.axis == block.get("axis"):
        values = [float(v) for v in block.get("values", [])]
    else:
        values = []
    if not values:
        raise ConfigError("sweep needs --values or 'sweep.values' in the config")
    trials = args.trials if args.trials is not None else cfg.trials
    schemes = ["proposed"] + list(data.get("baselines", []))
    for b in args.baseline or []:
        if b not in schemes:
            schemes.append(b)

    series = data.get("series")
    runs = [("", cfg)]
    if series:
        (key, svals), = series.items()
        runs = [(f"_{key}={_fmt(float(v))}", cfg.with_axis(_SERIES_AXIS[key], v))
                for v in svals]
    # validate every point before any simulation starts
    for _, c in runs:
        for v in values:
            ex._check_axis_value(axis, v)
            c.with_axis(axis, v)

    outputs = []
    for tag, c in runs:
        for scheme in schemes:
            rows = ex.sweep(c, axis, values, trials, args.workers, scheme)
            suffix = "" if scheme == "proposed" else f"_{scheme}"
            path = out / f"sweep{tag}{suffix}.csv"
            write_csv(path, ex.SWEEP_COLUMNS, [r.as_record() for r in rows])
            outputs.append(path)
            print(f"wrote {path} ({len(rows)} points)")
    return outputs, {"axis": axis, "values": values, "trials": trials}


CAL_COLUMNS = ("tau", "empirical_md", "empirical_fa", "closed_md", "closed_fa")


def cmd_calibrate(args, data, cfg, out: Path):
    if args.scores:
        try:
            pos, neg = load_score_file(args.scores)
        except OSError as exc:
            raise ConfigError(f"cannot read score file: {exc.strerror}") from None
        source = str(args.scores)
    else:
        pos, neg = ex.sample_match_scores(cfg, args.samples, cfg.seed)
        source = f"gmm pipeline, {args.samples} samples per label"
    curves = calibrate_empirical(pos, neg, cfg.p_err_dl)
    mp = cfg.match_params
    emp = mp.with_curves(curves)
    taus = np.arange(1, args.points + 1) / args.points
    rows = [dict(zip(CAL_COLUMNS, v)) for v in zip(
        taus, md_match_prob(taus, emp), fa_match_prob(taus, emp),
        md_match_prob(taus, mp), fa_match_prob(taus, mp))]
    path = out / "calibration.csv"
    write_csv(path, CAL_COLUMNS, rows)
    sol_emp = solve_threshold(emp, cfg.channel)
    sol_cf = solve_threshold(mp, cfg.channel)
    sup_md = max(abs(r["empirical_md"] - r["closed_md"]) for r in rows)
    sup_fa = max(abs(r["empirical_fa"] - r["closed_fa"]) for r in rows)
    info = {"source": source, "positives": int(curves.positive.size),
            "negatives": int(curves.negative.size), "tau_empirical": sol_emp.tau,
            "tau_closed_form": sol_cf.tau, "sup_md_gap": sup_md, "sup_fa_gap": sup_fa}
    for k, v in info.items():
        print(f"{k}: {_fmt(v)}")
    jpath = out / "calibration.json"
    jpath.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return [path, jpath], {"tau_used": sol_emp.tau}


COMMANDS = {"analyze": cmd_analyze, "optimize": cmd_optimize, "simulate": cmd_simulate,
            "sweep": cmd_sweep, "calibrate": cmd_calibrate}


def cmd_replay(args) -> int:
    """Rerun the command recorded in a manifest and compare output hashes."""
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        argv = list(manifest["argv"])
        data = manifest["config"]
        expected = manifest["outputs"]
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"unreadable manifest {args.manifest}: {exc}") from None
    if config_hash(data) != manifest.get("config_hash"):
        raise ConfigError("manifest config does not match its recorded hash")
    with tempfile.TemporaryDirectory() as tmp:
        cfg_path = Path(tmp) / "config.json"
        cfg_path.write_text(json.dumps(data))
        out_dir = Path(args.out_dir) if args.out_dir else Path(tmp) / "out"
        argv = _rewrite_argv(argv, cfg_path, out_dir)
        code = main(argv)
        if code != EXIT_OK:
            return code
        bad = [name for name, h in expected.items()
               if not (out_dir / name).is_file() or _sha256(out_dir / name) != h]
    if bad:
        print("replay mismatch: " + ", ".join(sorted(bad)), file=sys.stderr)
        return EXIT_RUNTIME
    print(f"replay ok: {len(expected)} output(s) reproduced byte for byte")
    return EXIT_OK


def _rewrite_argv(argv, cfg_path, out_dir):
    out, skip = [], False
    for i, a in enumerate(argv):
        if skip:
            skip = False
            continue
        if a in ("--config", "--preset", "--out-dir"):
            skip = True
            continue
        if a.startswith(("--config=", "--preset=", "--out-dir=")):
            continue
        out.append(a)
    return out[:1] + ["--config", str(cfg_path), "--out-dir", str(out_dir)] + out[1:]


# Parser ---------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semsource", description="Semantic query-based data sourcing: "
                "analysis, threshold optimization and Monte Carlo simulation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", help="JSON configuration file")
        src.add_argument("--preset", help="name of a bundled configuration")
        sp.add_argument("--out-dir", default=".", help="output directory (default: .)")
        sp.add_argument("--seed", type=_nonneg_int, help="override the config seed")

    def sim(sp):
        sp.add_argument("--trials", type=_positive_int)
        sp.add_argument("--workers", type=_positive_int, default=1)
        sp.add_argument("--baseline", action="append",
                        choices=["query_free", "perfect_matching"])

    sp = sub.add_parser("analyze", help="closed-form curves over a threshold grid")
    common(sp)
    sp.add_argument("--points", type=_positive_int, default=100)
    sp = sub.add_parser("optimize", help="optimize the matching threshold")
    common(sp)
    sp = sub.add_parser("simulate", help="Monte Carlo metrics at one threshold")
    common(sp)
    sim(sp)
    sp = sub.add_parser("sweep", help="metrics and analytic overlays along one axis")
    common(sp)
    sim(sp)
    sp.add_argument("--axis", choices=ex.AXES)
    sp.add_argument("--values", help="comma-separated axis values")
    sp = sub.add_parser("calibrate", help="empirical matching curves from scores")
    common(sp)
    sp.add_argument("--scores", help="two-column score file (score, pos|neg)")
    sp.add_argument("--samples", type=_positive_int, default=100_000,
                    help="GMM samples per label when --scores is absent")
    sp.add_argument("--points", type=_positive_int, default=100)
    sp = sub.add_parser("replay", help="rerun a manifest and verify its outputs")
    sp.add_argument("manifest")
    sp.add_argument("--out-dir")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            return cmd_replay(args)
        if args.config:
            data, cfg = load_config(args.config)
        else:
            data, cfg = load_preset(args.preset)
        if args.seed is not None:
            data = dict(data, seed=args.seed)
            cfg = parse_config(data)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        outputs, extra = COMMANDS[args.command](args, data, cfg, out)
        write_manifest(out, args.command, data, cfg.seed, outputs, argv, extra)
        return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
