import json
import os
import subprocess
import sys

import pytest

from apmdl import cli
from test_acceptance import PATHFINDER

CORPUS = os.path.join(os.path.dirname(__file__), "corpus")


@pytest.fixture
def pathfinder(tmp_path):
    prog = tmp_path / "pathfinder.dl"
    prog.write_text(PATHFINDER + "query path\n")
    facts = tmp_path / "facts"
    facts.mkdir()
    (facts / "edge.facts").write_text("0.5\t0\t1\n0.5\t1\t2\n")
    (facts / "is_endpoint.facts").write_text("0\n2\n")
    return prog, facts


def lines(path):
    return path.read_text().splitlines()


def test_run_writes_query_relation(pathfinder, tmp_path):
    prog, facts = pathfinder
    out = tmp_path / "out"
    assert cli.main(["run", str(prog), "--facts", str(facts), "--out", str(out)]) == 0
    assert os.listdir(out) == ["path.tsv"]
    assert lines(out / "path.tsv") == ["0\t1", "0\t2", "1\t2"]


def test_run_gradients_are_written(pathfinder, tmp_path):
    prog, facts = pathfinder
    out = tmp_path / "out"
    assert cli.main(["run", str(prog), "--facts", str(facts), "--out", str(out),
                     "--provenance", "diff-add-mult-prob"]) == 0
    rows = lines(out / "path.tsv")
    assert len(rows) == 3
    assert rows[1] == "p=0.25\t0\t2\tgrad={0:0.5,1:0.5}"


def test_run_all_relations_without_query(tmp_path):
    prog = tmp_path / "p.dl"
    prog.write_text("type e(i64)\nrel f(x) :- e(x).\n")
    out = tmp_path / "out"
    assert cli.main(["run", str(prog), "--out", str(out)]) == 0
    assert sorted(os.listdir(out)) == ["e.tsv", "f.tsv"]
    assert lines(out / "f.tsv") == []


@pytest.mark.parametrize("extra", [
    ["--facts", "/nonexistent/dir"],
    ["--proof-cap", "3"],
    ["--occupancy", "0.5"],
    ["--facts", "FACTS", "--batch", "FACTS"],
    ["--threads", "0"],
])
def test_usage_errors_exit_2(pathfinder, extra, capsys):
    prog, facts = pathfinder
    extra = [str(facts) if a == "FACTS" else a for a in extra]
    assert cli.main(["run", str(prog)] + extra) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_missing_program_exit_2(tmp_path):
    assert cli.main(["run", str(tmp_path / "nope.dl")]) == 2


def test_syntax_error_exit_1(tmp_path, capsys):
    prog = tmp_path / "bad.dl"
    prog.write_text("type e(i64)\nrel f(x) :- e(x\n")
    assert cli.main(["run", str(prog)]) == 1
    assert "bad.dl:" in capsys.readouterr().err


def test_bad_fact_file_exit_1(pathfinder, capsys):
    prog, facts = pathfinder
    (facts / "edge.facts").write_text("0\tzero\n")
    assert cli.main(["run", str(prog), "--facts", str(facts)]) == 1
    assert "edge.facts:1" in capsys.readouterr().err


@pytest.mark.parametrize("batching", [True, False])
def test_batch_writes_per_sample_dirs(tmp_path, batching):
    prog = tmp_path / "tc.dl"
    prog.write_text(cli.TC_PROGRAM)
    batch = tmp_path / "batch"
    for name, edges in [("s0", "1\t2\n2\t3\n"), ("s1", "7\t8\n")]:
        (batch / name).mkdir(parents=True)
        (batch / name / "edge.facts").write_text(edges)
    out = tmp_path / "out"
    argv = ["run", str(prog), "--batch", str(batch), "--out", str(out)] + ([] if batching else ["--no-batching"])
    assert cli.main(argv) == 0
    assert lines(out / "s0" / "path.tsv") == ["1\t2", "1\t3", "2\t3"]
    assert lines(out / "s1" / "path.tsv") == ["7\t8"]


def test_empty_batch_dir_exit_2(tmp_path, pathfinder):
    prog, _ = pathfinder
    (tmp_path / "empty").mkdir()
    assert cli.main(["run", str(prog), "--batch", str(tmp_path / "empty")]) == 2


def test_stats_to_file_and_stdout(pathfinder, tmp_path, capsys):
    prog, facts = pathfinder
    path = tmp_path / "stats.json"
    assert cli.main(["run", str(prog), "--facts", str(facts), "--stats", str(path)]) == 0
    stats = json.loads(path.read_text())
    assert stats["total_iterations"] >= 2
    assert cli.main(["run", str(prog), "--facts", str(facts), "--stats", "-"]) == 0
    again = json.loads(capsys.readouterr().out)
    assert set(again) == set(stats)
    assert again["total_iterations"] == stats["total_iterations"]


def test_dump_ram_and_apm(tmp_path, capsys):
    prog = tmp_path / "tc.dl"
    prog.write_text(cli.TC_PROGRAM)
    assert cli.main(["dump", str(prog), "--stage", "ram"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("stratum 0 [path] recursive") and "(join 1" in text
    assert cli.main(["dump", str(prog)]) == 0
    text = capsys.readouterr().out
    for op in ("build", "count", "scan", "join", "gather<⊗>"):
        assert op in text


def test_dump_batched_has_sample_column(tmp_path, capsys):
    prog = tmp_path / "tc.dl"
    prog.write_text(cli.TC_PROGRAM)
    assert cli.main(["dump", str(prog), "--stage", "ram", "--batched"]) == 0
    assert "(join 2" in capsys.readouterr().out


def test_dump_empty_program(tmp_path, capsys):
    prog = tmp_path / "empty.dl"
    prog.write_text("")
    assert cli.main(["dump", str(prog)]) == 0
    assert capsys.readouterr().out == ""


# -- bench -----------------------------------------------------------------------------


@pytest.mark.parametrize("suite,edges,size", [
    ("tc", "0 1\n1 2\n2 0\n", 9),
    ("tc", "0 1\n1 2\n2 3\n", 6),
    ("sg", "0 1\n0 2\n1 3\n1 4\n2 5\n2 6\n", 14),
    ("tc", "# nothing here\n", 0),
])
def test_bench_result_sizes(tmp_path, suite, edges, size):
    g = tmp_path / "g.txt"
    g.write_text(edges)
    report = cli.cmd_bench(suite, str(g))
    assert report["result_size"] == size
    assert report["edges"] == len([ln for ln in edges.splitlines() if not ln.startswith("#")])
    if size == 0:
        assert report["iterations"] == 1


def test_bench_prints_json(tmp_path, capsys):
    g = tmp_path / "g.txt"
    g.write_text("0 1\n")
    assert cli.main(["bench", "tc", str(g)]) == 0
    assert set(json.loads(capsys.readouterr().out)) == {"suite", "edges", "result_size", "iterations", "wall_s",
                                                        "peak_rss_kb"}


@pytest.mark.parametrize("text", ["0 1 2\n", "a b\n"])
def test_bench_malformed_graph_exit_1(tmp_path, text):
    g = tmp_path / "g.txt"
    g.write_text(text)
    assert cli.main(["bench", "tc", str(g)]) == 1


def test_bench_missing_graph_exit_2(tmp_path):
    assert cli.main(["bench", "tc", str(tmp_path / "none")]) == 2


# -- corpus and reproducibility ----------------------------------------------------------


@pytest.mark.parametrize("name", sorted(os.listdir(CORPUS)))
def test_corpus_runs_reproducibly(tmp_path, name):
    prog = os.path.join(CORPUS, name, "program.dl")
    facts = os.path.join(CORPUS, name, "facts")
    outs = []
    for k, threads in enumerate(["1", "4"]):
        out = tmp_path / f"out{k}"
        argv = ["run", prog, "--out", str(out), "--threads", threads]
        if os.path.isdir(facts):
            argv += ["--facts", facts]
        assert cli.main(argv) == 0
        outs.append({f: (out / f).read_bytes() for f in sorted(os.listdir(out))})
    assert outs[0] == outs[1] and outs[0]


def test_console_entry_point(tmp_path):
    prog = tmp_path / "empty.dl"
    prog.write_text("")
    proc = subprocess.run([sys.executable, "-m", "apmdl.cli", "dump", str(prog)], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout == ""
