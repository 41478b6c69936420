import csv
import json
from pathlib import Path

import pytest

from quotetrees import chains, metrics
from quotetrees.cli import main
from quotetrees.forest import build_forest, read_forest, size_coverage_thresholds
from quotetrees.ingest import apply_perimeter, parse_events, read_user_stats
from quotetrees.synth import SynthConfig, config_to_json
from quotetrees.valence import read_ip_map

CFG = SynthConfig(seed=5, n_users=300, n_elites=40, n_roots=250, depth_prob=0.4)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().err


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full synthetic run shared by the read-only tests below."""
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "cfg.json"
    cfg.write_text(config_to_json(CFG))
    assert main(["synth", "--config", str(cfg), "--out", str(root / "s")]) == 0
    assert main(["trees", "--events", str(root / "s/events.jsonl"), "--users", str(root / "s/users.csv"),
                 "--out", str(root / "t")]) == 0
    assert main(["ip", "--follows", str(root / "s/follows.csv"), "--elites", str(root / "s/elites.csv"),
                 "--forest", str(root / "t"), "--truth", str(root / "s/truth_users.csv"),
                 "--out", str(root / "i")]) == 0
    assert main(["metrics", "--forest", str(root / "t"), "--ip", str(root / "i/ip.csv"),
                 "--out", str(root / "m")]) == 0
    return root


def test_usage_errors(capsys):
    assert run(capsys)[0] == 1
    code, err = run(capsys, "trees")
    assert code == 1 and "--events" in err
    assert run(capsys, "bogus")[0] == 1
    assert run(capsys, "trees", "--events", "x.jsonl")[0] == 1  # no --out


def test_missing_input_is_named(capsys, tmp_path):
    code, err = run(capsys, "trees", "--events", tmp_path / "nope.jsonl", "--out", tmp_path / "o")
    assert code == 2 and "missing input events" in err
    code, err = run(capsys, "metrics", "--forest", tmp_path, "--ip", tmp_path / "ip.csv", "--out", tmp_path / "o")
    assert code == 2 and "missing input forest" in err


def test_malformed_events_exit_2(capsys, tmp_path):
    ev = tmp_path / "e.jsonl"
    ev.write_text('{"id":"1","uid":"a","ts":1,"kind":"quote"}\n')
    code, err = run(capsys, "trees", "--events", ev, "--out", tmp_path / "o")
    assert code == 2 and "line 1" in err and err.startswith("level=error")
    code, _ = run(capsys, "trees", "--events", ev, "--lenient", "--out", tmp_path / "o")
    assert code == 0


def test_empty_events(capsys, tmp_path):
    ev = tmp_path / "e.jsonl"
    ev.write_text("")
    code, err = run(capsys, "trees", "--events", ev, "--out", tmp_path / "o")
    assert code == 0 and "level=warning" in err
    assert read_rows(tmp_path / "o/forest.csv") == [["tree_id", "tweet_id", "parent_tweet_id", "user_id", "depth"]]
    assert json.loads((tmp_path / "o/manifest.json").read_text())["rows"]["trees"] == 0


def test_star_cutoff(capsys, tmp_path):
    ev = tmp_path / "e.jsonl"
    lines = ['{"id":"r","uid":"A","ts":1,"kind":"original"}']
    lines += [f'{{"id":"q{i}","uid":"U{i}","ts":2,"kind":"quote","ref":"r"}}' for i in range(6)]
    ev.write_text("\n".join(lines) + "\n")
    assert run(capsys, "trees", "--events", ev, "--out", tmp_path / "o")[0] == 0
    assert read_rows(tmp_path / "o/fig1_cutoffs.csv")[1:] == [["0.750000", "7"], ["0.900000", "7"]]


def test_missing_config_field(capsys, tmp_path):
    raw = json.loads(config_to_json(CFG))
    del raw["sigma_q"]
    p = tmp_path / "c.json"
    p.write_text(json.dumps(raw))
    code, err = run(capsys, "synth", "--config", p, "--out", tmp_path / "o")
    assert code == 2 and "config field missing: sigma_q" in err


def test_every_stage_has_one_manifest(pipeline):
    for stage in "stim":
        assert (pipeline / stage / "manifest.json").exists()
    m = json.loads((pipeline / "i/manifest.json").read_text())
    assert m["diagnostics"]["recovery_pearson"] > 0.8


def test_synth_output_is_clean_input(pipeline, capsys, tmp_path):
    code, err = run(capsys, "trees", "--events", pipeline / "s/events.jsonl", "--out", tmp_path / "t")
    assert code == 0 and err == ""


def test_trees_match_library(pipeline):
    events = parse_events(pipeline / "s/events.jsonl")
    forest = read_forest(pipeline / "t")
    perimeter = apply_perimeter(read_user_stats(pipeline / "s/users.csv"))
    assert forest == build_forest(events, perimeter)
    direct = pipeline / "direct.csv"
    chains.write_census_csv(direct, forest)
    assert direct.read_bytes() == (pipeline / "t/fig2_census.csv").read_bytes()


def test_ip_drops_thin_users(pipeline):
    with open(pipeline / "s/follows.csv", newline="") as fh:
        counts = {}
        for r in csv.DictReader(fh):
            counts[r["user_id"]] = counts.get(r["user_id"], 0) + 1
    ip = read_ip_map(pipeline / "i/ip.csv")
    assert set(ip) == {u for u, c in counts.items() if c >= 10}


def test_metrics_match_library(pipeline, tmp_path):
    forest = read_forest(pipeline / "t")
    ip_map = read_ip_map(pipeline / "i/ip.csv")
    summ = metrics.summarize_trees(forest, ip_map, size_coverage_thresholds(forest))
    metrics.write_fig6(tmp_path / "f6.csv", summ)
    assert (tmp_path / "f6.csv").read_bytes() == (pipeline / "m/fig6_divergence.csv").read_bytes()
    assert not (pipeline / "m/table1_frames.csv").exists()
    assert len(list((pipeline / "m/dot").glob("*.dot"))) == 3


def test_table1_from_annotations(pipeline, capsys, tmp_path):
    forest = read_forest(pipeline / "t")
    quotes = [n.tweet_id for t in forest for n in t.nodes[1:]][:20]
    ann = tmp_path / "ann.csv"
    ann.write_text("tweet_id,frames\n" + "".join(f"{q},A|C\n" for q in quotes) + "ghost,B\n")
    code, err = run(capsys, "metrics", "--forest", pipeline / "t", "--ip", pipeline / "i/ip.csv",
                    "--annotations", ann, "--dot-top", 0, "--out", tmp_path / "m")
    assert code == 0 and "could not be resolved" in err
    rows = read_rows(tmp_path / "m/table1_frames.csv")
    assert rows[0] == ["tree_id", "frame", "ip_class", "count", "class_total", "percent"]


def outputs(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(Path(d).rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def test_reruns_byte_identical_across_threads(pipeline, capsys, tmp_path):
    cfg = pipeline / "cfg.json"
    for n, threads in (("a", 1), ("b", 3)):
        d = tmp_path / n
        assert run(capsys, "synth", "--config", cfg, "--threads", threads, "--out", d / "s")[0] == 0
        assert run(capsys, "trees", "--events", d / "s/events.jsonl", "--users", d / "s/users.csv",
                   "--out", d / "t", "--threads", threads)[0] == 0
        assert run(capsys, "ip", "--follows", d / "s/follows.csv", "--elites", d / "s/elites.csv",
                   "--threads", threads, "--out", d / "i")[0] == 0
        assert run(capsys, "metrics", "--forest", d / "t", "--ip", d / "i/ip.csv",
                   "--threads", threads, "--out", d / "m")[0] == 0
    for stage in "stim":
        a, b = outputs(tmp_path / "a" / stage), outputs(tmp_path / "b" / stage)
        assert a and a == b
    # the synth files are the same as in the shared run too
    assert outputs(tmp_path / "a/s") == outputs(pipeline / "s")


def test_seed_flag_overrides_config(capsys, pipeline, tmp_path):
    assert run(capsys, "synth", "--config", pipeline / "cfg.json", "--seed", 99, "--out", tmp_path / "s")[0] == 0
    cfg = json.loads((tmp_path / "s/config.json").read_text())
    assert cfg["seed"] == 99
    assert (tmp_path / "s/events.jsonl").read_bytes() != (pipeline / "s/events.jsonl").read_bytes()
