"""Command-line pipeline: ``synth`` -> ``trees`` -> ``ip`` -> ``metrics``.

Every stage writes plain CSV/JSON files plus a ``manifest.json`` into its
output directory. Exit codes: 0 success, 1 usage error, 2 data error.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from . import chains, forest as fo, metrics, synth, valence
from ._util import id_key, read_csv, write_csv
from .ingest import ParseStats, PerimeterConfig, apply_perimeter, parse_events, read_user_stats

logger = logging.getLogger("quotetrees")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _KVFormatter(logging.Formatter):
    def format(self, record):
        msg = record.getMessage().replace('"', "'")
        return f'level={record.levelname.lower()} logger={record.name} msg="{msg}"'


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_manifest(out, command, inputs, config, rows, diagnostics):
    cfg_text = json.dumps(config, sort_keys=True)
    manifest = {
        "tool": "quotetrees",
        "version": __version__,
        "command": command,
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in sorted(inputs.items()) if p},
        "config": config,
        "config_sha256": hashlib.sha256(cfg_text.encode()).hexdigest(),
        "rows": rows,
        "diagnostics": diagnostics,
    }
    (Path(out) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(args):
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(**paths):
    for name, p in paths.items():
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"missing input {name}: {p}")


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


# ---------------------------------------------------------------- synth


def cmd_synth(args):
    _require(config=args.config)
    cfg = synth.load_config(args.config)
    if args.seed is not None:
        cfg = synth.SynthConfig(**{**cfg.__dict__, "seed": args.seed})
    out = _out_dir(args)
    counts = synth.write_synth(cfg, out, threads=args.threads)
    _write_manifest(out, "synth", {"config": args.config}, json.loads(synth.config_to_json(cfg)), counts, {})
    return 0


# ---------------------------------------------------------------- trees


def cmd_trees(args):
    _require(events=args.events, users=args.users)
    out = _out_dir(args)
    pstats = ParseStats()
    events = parse_events(args.events, lenient=args.lenient, stats=pstats)
    if not events:
        logger.warning("event file %s holds no events; writing an empty forest", args.events)

    threshold = None if args.follower_threshold == "median" else int(args.follower_threshold)
    pcfg = PerimeterConfig(args.min_tweets, threshold, args.min_lang_share)
    perimeter = None
    if args.users:
        perimeter = apply_perimeter(read_user_stats(args.users), pcfg)
    window = tuple(_ints(args.root_window)) if args.root_window else None
    if window is not None and len(window) != 2:
        raise UsageError("--root-window takes T0,T1")

    diag = fo.ForestDiagnostics()
    trees = fo.build_forest(events, perimeter, window, diag)
    n_nodes, n_rt = fo.write_forest(trees, out)
    rows = {"events": len(events), "trees": len(trees), "forest_rows": n_nodes, "retweeter_rows": n_rt}

    per_user = fo.trees_per_user(trees)
    rows["fig1_trees_per_user"] = write_csv(
        out / "fig1_trees_per_user.csv", ["user_id", "n_trees", "mean_size", "max_size"],
        ([u, *per_user[u]] for u in sorted(per_user, key=id_key)),
    )

    quantiles = _floats(args.coverage)
    cutoffs = fo.size_coverage_thresholds(trees, quantiles) if trees else []
    if not trees:
        logger.warning("empty forest: coverage cutoffs not computed")
    write_csv(out / "fig1_cutoffs.csv", ["quantile", "size_cutoff"], zip(quantiles, cutoffs))
    rows["fig1_coverage"] = write_csv(out / "fig1_coverage.csv",
                                      ["kind", "threshold", "node_coverage", "tree_coverage"],
                                      _coverage_rows(trees))
    rows["fig2_census"] = chains.write_census_csv(out / "fig2_census.csv", trees)
    rows["fig2_pingpong"] = chains.write_pingpong_csv(out / "fig2_pingpong.csv", trees, _ints(args.windows))

    config = {
        "perimeter": {"min_tweets": pcfg.min_tweets, "follower_threshold": args.follower_threshold,
                      "min_lang_share": pcfg.min_lang_share, "applied": perimeter is not None},
        "root_window": list(window) if window else None,
        "coverage": quantiles,
        "windows": _ints(args.windows),
        "lenient": args.lenient,
    }
    diagnostics = {**diag.as_dict(), "blank_lines": pstats.n_blank, "skipped_records": pstats.n_skipped,
                   "perimeter_users": None if perimeter is None else len(perimeter),
                   "size_cutoffs": cutoffs}
    _write_manifest(out, "trees", {"events": args.events, "users": args.users}, config, rows, diagnostics)
    return 0


def _coverage_rows(trees):
    """Cumulative share of nodes and trees covered by trees up to a size / average depth."""
    if not trees:
        return []
    total_nodes = sum(t.size for t in trees)
    rows = []
    for kind, key in (("size", lambda t: t.size), ("avg_depth", fo.avg_depth)):
        acc = Counter()
        nodes = Counter()
        for t in trees:
            k = key(t)
            acc[k] += 1
            nodes[k] += t.size
        cn = ct = 0
        for k in sorted(acc):
            cn += nodes[k]
            ct += acc[k]
            rows.append([kind, k, cn / total_nodes, ct / len(trees)])
    return rows


# ---------------------------------------------------------------- ip


def cmd_ip(args):
    _require(follows=args.follows, elites=args.elites, forest=args.forest, truth=args.truth)
    out = _out_dir(args)
    phi = valence.read_elites(args.elites)
    fm = valence.FollowMatrix.from_edges(valence.read_follows(args.follows),
                                         elite_ids=sorted(phi, key=id_key))
    cfg = valence.IpModelConfig(gamma=args.gamma, prior_sd_theta=args.prior_sd_theta,
                                prior_sd_beta=args.prior_sd_beta, min_elites=args.min_elites)
    estimates, _ = valence.fit_ideal_points(fm, phi, cfg, threads=args.threads)
    rows = {"users": len(fm.user_ids), "elites": len(fm.elite_ids),
            "estimates": valence.write_estimates(out / "ip.csv", estimates)}
    roots = set()
    if args.forest:
        roots = {t.root.user_id for t in fo.read_forest(args.forest)}
    if len(estimates) >= 2:
        rows["fig3_ipdist"] = metrics.write_fig3(out / "fig3_ipdist.csv", valence.ip_report(estimates, roots))
    else:
        logger.warning("fewer than two estimates; fig3_ipdist.csv not written")

    diagnostics = {
        "below_min_elites": int((fm.follows_per_user < cfg.min_elites).sum()),
        "not_converged": sum(not e.converged for e in estimates),
        "class_counts": dict(Counter(valence.classify_ip(e.theta) for e in estimates)),
    }
    if args.truth:
        truth = {}
        for r in read_csv(args.truth, ["user_id", "theta"]):
            truth[r["user_id"]] = float(r["theta"])
        pairs = [(e.theta, truth[e.user_id]) for e in estimates if e.user_id in truth]
        if len(pairs) >= 2:
            a, b = np.array(pairs).T
            diagnostics["recovery_pearson"] = round(float(np.corrcoef(a, b)[0, 1]), 6)
            diagnostics["recovery_n"] = len(pairs)
    config = {"gamma": cfg.gamma, "prior_sd_theta": cfg.prior_sd_theta, "prior_sd_beta": cfg.prior_sd_beta,
              "min_elites": cfg.min_elites, "max_iters": cfg.max_iters, "tol": cfg.tol,
              "starts": list(cfg.starts), "seed": args.seed}
    inputs = {"follows": args.follows, "elites": args.elites, "truth": args.truth}
    if args.forest:
        inputs["forest"] = Path(args.forest) / "forest.csv"
    _write_manifest(out, "ip", inputs, config, rows, diagnostics)
    return 0


# ---------------------------------------------------------------- metrics


def cmd_metrics(args):
    forest_csv = Path(args.forest) / "forest.csv" if args.forest else None
    if forest_csv is None or args.ip is None:
        raise UsageError("--forest and --ip are required")
    _require(forest=forest_csv, ip=args.ip, annotations=args.annotations)
    out = _out_dir(args)
    trees = fo.read_forest(args.forest)
    ip_map = valence.read_ip_map(args.ip)
    bins = metrics.BinSpec(args.bin_lo, args.bin_hi, args.bin_width)
    cutoffs = fo.size_coverage_thresholds(trees) if trees else (0, 0)
    stats = Counter()
    summaries = metrics.summarize_trees(trees, ip_map, cutoffs, quoters=args.quoters, stats=stats)

    rows = {"trees": len(trees), "summaries": len(summaries)}
    roots = {t.root.user_id for t in trees}
    if len(ip_map) >= 2:
        rows["fig3_ipdist"] = metrics.write_fig3(out / "fig3_ipdist.csv", valence.ip_report(ip_map, roots))
    rows["fig4_heatmap"] = metrics.write_fig4(out / "fig4_heatmap.csv", metrics.heatmaps(summaries, rho_bins=bins))
    rows["fig5_qr"] = metrics.write_fig5(out / "fig5_qr.csv", metrics.qr_curves(summaries, bins))
    rows["fig6_divergence"] = metrics.write_fig6(out / "fig6_divergence.csv", summaries, bins)
    users = metrics.user_summaries(trees, ip_map)
    rows["fig7_users"] = metrics.write_fig7(out / "fig7_users.csv", users)
    metrics.write_fig7_curves(out / "fig7_curves.csv", users, bins)
    records = metrics.depth2_records(trees, ip_map, cutoffs)
    rows["fig8_depth2"] = metrics.write_fig8(out / "fig8_depth2.csv", records, bins)
    metrics.write_fig8_records(out / "fig8_records.csv", records)

    diagnostics = dict(sorted(stats.items()))
    diagnostics["size_cutoffs"] = list(cutoffs)
    diagnostics["depth2_records"] = len(records)
    if summaries:
        diagnostics["mean_std_R"] = _mean_std(metrics.qr_curves(summaries, bins)[("all", "R")])
        diagnostics["mean_std_Q"] = _mean_std(metrics.qr_curves(summaries, bins)[("all", "Q")])

    if args.annotations:
        quote_authors = {n.tweet_id: n.user_id for t in trees for n in t.nodes[1:]}
        quote_tree = {n.tweet_id: t.tree_id for t in trees for n in t.nodes[1:]}
        table = metrics.frame_table(metrics.read_annotations(args.annotations), ip_map, quote_authors, quote_tree)
        rows["table1_frames"] = metrics.write_table1(out / "table1_frames.csv", table)
        diagnostics["annotations_skipped"] = table.skipped
    else:
        logger.info("no annotations given; table1_frames.csv skipped")

    dot_ids = [x for x in args.dot_trees.split(",") if x] if args.dot_trees else [
        t.tree_id for t in sorted(trees, key=lambda t: (-t.size, id_key(t.tree_id)))[: args.dot_top]
    ]
    by_id = {t.tree_id: t for t in trees}
    unknown = [x for x in dot_ids if x not in by_id]
    if unknown:
        raise ValueError(f"--dot-trees: unknown tree id {unknown[0]!r}")
    dot_dir = out / "dot"
    dot_dir.mkdir(exist_ok=True)
    for tid in dot_ids:
        (dot_dir / f"tree_{tid}.dot").write_text(metrics.export_tree_dot(by_id[tid], ip_map), encoding="utf-8")
    rows["dot_files"] = len(dot_ids)

    config = {"quoters": args.quoters, "bins": [bins.lo, bins.hi, bins.width], "dot_trees": dot_ids}
    inputs = {"forest": forest_csv, "ip": args.ip, "annotations": args.annotations}
    _write_manifest(out, "metrics", inputs, config, rows, diagnostics)
    return 0


def _mean_std(curve):
    m = curve.populated
    return round(float(np.average(curve.y_std[m], weights=curve.count[m])), 6) if m.any() else None


# ---------------------------------------------------------------- main


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="parallel workers (default: available cores)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="quotetrees", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--config", required=True, help="JSON file with every SynthConfig field")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("trees", parents=[common], help="build quote forests and structure tables")
    t.add_argument("--events", required=True)
    t.add_argument("--users", help="user stats CSV; omit to skip perimeter filtering")
    t.add_argument("--min-tweets", type=int, default=5)
    t.add_argument("--follower-threshold", default="median", help="'median' or an integer")
    t.add_argument("--min-lang-share", type=float, default=0.15)
    t.add_argument("--root-window", help="T0,T1 in epoch seconds (inclusive)")
    t.add_argument("--coverage", default="0.75,0.9")
    t.add_argument("--windows", default="3,5")
    t.add_argument("--lenient", action="store_true", help="skip malformed event records")
    t.set_defaults(func=cmd_trees)

    i = sub.add_parser("ip", parents=[common], help="fit ideal points")
    i.add_argument("--follows", required=True)
    i.add_argument("--elites", required=True)
    i.add_argument("--gamma", type=float, default=1.0)
    i.add_argument("--min-elites", type=int, default=10)
    i.add_argument("--prior-sd-theta", type=float, default=1.0)
    i.add_argument("--prior-sd-beta", type=float, default=2.0)
    i.add_argument("--forest", help="trees output dir, for the root-user distribution")
    i.add_argument("--truth", help="truth_users.csv from synth; adds recovery correlation to the manifest")
    i.set_defaults(func=cmd_ip)

    m = sub.add_parser("metrics", parents=[common], help="compute figure tables")
    m.add_argument("--forest", help="trees output dir")
    m.add_argument("--ip", help="ip.csv from the ip stage")
    m.add_argument("--annotations", help="tweet_id,frames CSV")
    m.add_argument("--quoters", choices=("distinct", "events"), default="distinct")
    m.add_argument("--bin-lo", type=float, default=-2.5)
    m.add_argument("--bin-hi", type=float, default=2.5)
    m.add_argument("--bin-width", type=float, default=0.25)
    m.add_argument("--dot-top", type=int, default=3, help="export the N largest trees")
    m.add_argument("--dot-trees", help="comma-separated tree ids to export instead")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_KVFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "command", None) is None:
            raise UsageError("a subcommand is required: synth, trees, ip, metrics")
        args.threads = getattr(args, "threads", None) or os.cpu_count() or 1
        args.seed = getattr(args, "seed", None)
        args.out = getattr(args, "out", None)
        if not args.out:
            raise UsageError("--out is required")
        root.setLevel(logging.INFO if getattr(args, "verbose", False) else logging.WARNING)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            code = args.func(args)
        for w in caught:
            logger.warning(str(w.message))
        return code
    except UsageError as exc:
        logger.error(str(exc))
        return 1
    except (ValueError, OSError, KeyError) as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
