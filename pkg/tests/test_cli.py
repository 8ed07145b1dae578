import csv
import json
from pathlib import Path

import pytest

from evimerge.cli import COMMANDS, main
from evimerge.params import load_archive, to_bytes

TINY = str(Path(__file__).resolve().parent.parent / "scenarios" / "tiny.toml")
REPORT_FILES = ("report.csv", "accuracy_long.csv", "summary.json", "manifest.json")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert all(name in out for name in COMMANDS)


def test_unknown_subcommand(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 1 and "USAGE" in err and "usage:" in err


def test_missing_scenario_file(capsys, tmp_path):
    code, _, err = run(capsys, "generate", "--scenario", tmp_path / "nope.toml", "--out", tmp_path)
    assert code == 1 and "error: FILE_NOT_FOUND:" in err


def test_unknown_override_key(capsys, tmp_path):
    code, _, err = run(capsys, "generate", "--set", "router.speed=3", "--out", tmp_path)
    assert code == 1 and "UNKNOWN_KEY" in err


def test_bad_override_type(capsys, tmp_path):
    code, _, err = run(capsys, "generate", "--set", "router.eta=fast", "--out", tmp_path)
    assert code == 1 and "INVALID_CONFIG" in err


def test_missing_stage_input(capsys, tmp_path):
    code, _, err = run(capsys, "finetune", "--scenario", TINY, "--out", tmp_path)
    assert code == 1 and "FILE_NOT_FOUND" in err and "tasks.npz" in err


def test_invalid_archive(capsys, tmp_path):
    bad = tmp_path / "bad.evmg"
    bad.write_bytes(b"not an archive")
    code, _, err = run(capsys, "archive-inspect", bad)
    assert code == 1 and "INVALID_ARCHIVE" in err


def test_unknown_ablation_variant(capsys, tmp_path):
    code, _, err = run(capsys, "ablate", "--scenario", TINY, "--variants", "no-magic", "--out", tmp_path)
    assert code == 1 and "INVALID_ARGUMENT" in err


@pytest.fixture(scope="module")
def staged(tmp_path_factory):
    out = tmp_path_factory.mktemp("staged")
    common = ["--scenario", TINY, "--seed", "0", "--out", str(out)]
    for cmd in ("generate", "finetune", "train-head", "compute-ads", "train-router", "merge"):
        assert main([cmd, *common]) == 0, cmd
    return out


def test_staged_outputs(staged):
    for name in ("tasks.npz", "base.evmg", "finetuned_0.evmg", "task_vector_2.evmg", "head.evmg", "ads.csv",
                 "router.evmg", "router_trace.csv", "merged.evmg", "head_trace.csv"):
        assert (staged / name).is_file(), name
    with (staged / "ads.csv").open() as fh:
        assert next(csv.reader(fh)) == ["anchor", "neighbor", "sharp", "div", "conf", "ads", "partition"]
    assert load_archive(staged / "router.evmg").metadata["role"] == "router"


def test_evaluate_routed_merge(staged, tmp_path, capsys):
    code, out, _ = run(capsys, "evaluate", "--scenario", TINY, "--seed", 0, "--from", staged, "--out", tmp_path)
    assert code == 0
    assert "bd-merging" in out and "corrupted" in out
    rows = list(csv.DictReader((tmp_path / "report.csv").open()))
    assert {r["condition"] for r in rows} == {"clean", "corrupted", "corrupted-only"}


def test_evaluate_single_model(staged, tmp_path, capsys):
    code, out, _ = run(capsys, "evaluate", "--scenario", TINY, "--seed", 0, "--from", staged,
                       "--model", staged / "merged.evmg", "--condition", "clean", "--out", tmp_path)
    assert code == 0 and out.startswith("merged")


def test_merge_weight_count_checked(staged, tmp_path, capsys):
    code, _, err = run(capsys, "merge", "--scenario", TINY, "--from", staged, "--weights", "1,0",
                       "--out", tmp_path)
    assert code == 1 and "INVALID_ARGUMENT" in err


def test_stages_do_not_modify_inputs(staged, tmp_path):
    before = {p.name: p.read_bytes() for p in staged.iterdir() if p.is_file()}
    assert main(["train-router", "--scenario", TINY, "--seed", "0", "--from", str(staged), "--out",
                 str(tmp_path)]) == 0
    assert before == {p.name: p.read_bytes() for p in staged.iterdir() if p.is_file()}
    assert (tmp_path / "router.evmg").read_bytes() == before["router.evmg"]


def test_archive_inspect(staged, capsys):
    code, out, _ = run(capsys, "archive-inspect", staged / "base.evmg")
    assert code == 0 and "layer0.weight" in out
    code, out, _ = run(capsys, "archive-inspect", "--json", staged / "router.evmg")
    info = json.loads(out)
    assert info["metadata"]["role"] == "router"
    assert [e["name"] for e in info["entries"]][:2] == ["router.b1", "router.w1"]


def test_pipeline_is_bitwise_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["pipeline", "--scenario", TINY, "--set", "experiment.ablations=['no-Ldis']",
                     "--out", str(out)]) == 0
    for name in REPORT_FILES:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    for p in (a / "traces").iterdir():
        assert p.read_bytes() == (b / "traces" / p.name).read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["seeds"] == [0, 1]
    assert "timing.json" not in manifest["files"]
    assert "design_defaults" in manifest
    capsys.readouterr()


def check_report_schema(out):
    for name in REPORT_FILES:
        assert (out / name).stat().st_size > 0, name
    rows = list(csv.DictReader((out / "report.csv").open()))
    assert rows
    for r in rows:
        tasks = [float(v) for k, v in r.items() if k.startswith("task") and v != ""]
        assert all(0.0 <= t <= 1.0 for t in tasks)
        assert float(r["average"]) == pytest.approx(sum(tasks) / len(tasks))
    long = list(csv.DictReader((out / "accuracy_long.csv").open()))
    assert list(long[0]) == ["method", "condition", "severity", "accuracy", "seed"]
    assert len(long) == len(rows)
    summary = json.loads((out / "summary.json").read_text())
    assert all(set(s) == {"method", "condition", "severity", "mean", "std", "n"} for s in summary)
    manifest = json.loads((out / "manifest.json").read_text())
    assert {"config", "config_hash", "seeds", "versions", "files"} <= set(manifest)


def test_pipeline_report_schema_and_summary(tmp_path, capsys):
    assert main(["pipeline", "--scenario", TINY, "--seed", "1", "--out", str(tmp_path)]) == 0
    check_report_schema(tmp_path)
    before = {p.name: p.read_bytes() for p in tmp_path.iterdir() if p.is_file()}
    capsys.readouterr()
    code, out, _ = run(capsys, "report", "--json", tmp_path)
    assert code == 0
    rows = {(r["method"], r["condition"]): r for r in json.loads(out)}
    long = list(csv.DictReader((tmp_path / "accuracy_long.csv").open()))
    ta = [float(r["accuracy"]) for r in long if r["method"] == "task-arithmetic" and r["condition"] == "clean"]
    assert rows[("task-arithmetic", "clean")]["mean"] == pytest.approx(ta[0])
    assert before == {p.name: p.read_bytes() for p in tmp_path.iterdir() if p.is_file()}


def test_report_missing_run(tmp_path, capsys):
    code, _, err = run(capsys, "report", tmp_path)
    assert code == 1 and "FILE_NOT_FOUND" in err


def test_evaluate_missing_scenario(tmp_path, capsys):
    code, _, err = run(capsys, "evaluate", "--scenario", tmp_path / "missing.toml")
    assert code == 1 and "FILE_NOT_FOUND" in err


def test_single_task_pipeline_matches_individual(tmp_path, capsys):
    assert main(["pipeline", "--scenario", TINY, "--seed", "0", "--set", "tasks.num_tasks=1",
                 "--set", "experiment.methods=['individual','bd-merging']", "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    rows = list(csv.DictReader((tmp_path / "report.csv").open()))
    by = {(r["method"], r["condition"]): r["average"] for r in rows}
    for cond in ("clean", "corrupted", "corrupted-only"):
        assert by[("bd-merging", cond)] == by[("individual", cond)]


def test_zero_fraction_pipeline(tmp_path, capsys):
    assert main(["pipeline", "--scenario", TINY, "--seed", "0", "--set", "corruption.fraction=0.0",
                 "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    rows = list(csv.DictReader((tmp_path / "report.csv").open()))
    clean = {r["method"]: r["average"] for r in rows if r["condition"] == "clean"}
    corrupted = {r["method"]: r["average"] for r in rows if r["condition"] == "corrupted"}
    assert clean == corrupted


def test_ablate_writes_variant_rows(tmp_path, capsys):
    code, out, _ = run(capsys, "ablate", "--scenario", TINY, "--seed", 0, "--variants", "no-sharp,no-router",
                       "--out", tmp_path)
    assert code == 0
    methods = {r["method"] for r in csv.DictReader((tmp_path / "report.csv").open())}
    assert methods == {"ablation:no-sharp", "ablation:no-router"}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_divergence_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "pipeline", "--scenario", TINY, "--seed", 0, "--set", "pretrain.lr=1e308",
                       "--out", tmp_path)
    assert code == 2 and "TRAINING_DIVERGED" in err


def test_archive_bytes_are_stable(staged):
    arch = load_archive(staged / "base.evmg")
    assert to_bytes(arch) == (staged / "base.evmg").read_bytes()
