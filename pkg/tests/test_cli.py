import csv
import json

import pytest
import yaml

from flowforge.cli import dispatch

TINY = {
    "seed": 0,
    "data": {"n_samples": 1024},
    "model": {"hidden": 16},
    "sampling": {"n_samples": 64, "n_steps": 8},
    "stages": {
        "pretrain": {"steps": 30, "batch_size": 64},
        "sft": {"steps": 10, "batch_size": 64, "warmup_steps": 2},
        "dpo": {"steps": 10, "batch_size": 64},
        "nft": {"steps": 5, "batch_size": 64, "nft_sample_steps": 4},
    },
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


@pytest.fixture
def manifest(tmp_path):
    path = tmp_path / "m.jsonl"
    rows = [
        {"id": "a", "task": "edit", "refs": [[512, 512]], "target": [512, 512], "instruction": "Fig 1"},
        {"id": "b", "task": "edit", "refs": [[768, 512], [512, 512], [512, 512]], "target": [768, 512],
         "instruction": "Put Fig 1 on Fig 3"},
        {"id": "c", "task": "t2i", "target": [1024, 1024], "instruction": "a cat"},
    ]
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def run(capsys, *argv):
    code = dispatch([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_no_arguments_prints_usage(capsys):
    code, _, err = run(capsys)
    assert code == 1 and "usage:" in err


def test_unknown_subcommand(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 1 and "usage:" in err


def test_missing_required_flag(capsys):
    code, _, err = run(capsys, "plan-batches", "--batch-size", "2")
    assert code == 1 and "--manifest" in err


def test_malformed_manifest_exit_2_with_line(capsys, tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a", "task": "t2i", "target": [64, 64]}\n{"id": "b", "task": "edit"\n')
    code, _, err = run(capsys, "plan-batches", "--manifest", path, "--batch-size", "2")
    assert code == 2 and "line 2" in err


def test_missing_file_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "collate", "--manifest", tmp_path / "nope.jsonl", "--seed", "1")
    assert code == 2


def test_plan_batches(capsys, manifest):
    code, out, _ = run(capsys, "plan-batches", "--manifest", manifest, "--batch-size", "2",
                       "--capacity", "16384", "--seed", "3")
    assert code == 0
    plan = json.loads(out)
    assert plan["n_samples"] == 3
    assert sorted(i for b in plan["batches"] for i in b["sample_ids"]) == ["a", "b", "c"]


def test_plan_batches_uses_bucket_config(capsys, manifest, tmp_path):
    cfg = tmp_path / "b.yaml"
    cfg.write_text("buckets:\n  sizes: [[512, 512]]\n  capacity: 4096\n")
    code, out, _ = run(capsys, "plan-batches", "--manifest", manifest, "--buckets", cfg,
                       "--batch-size", "4", "--capacity", "4096")
    assert code == 0
    assert {tuple(b["bucket"]) for b in json.loads(out)["batches"]} == {(512, 512)}
    # capacity below one three-ref sample is a data error, not a crash
    code, _, err = run(capsys, "plan-batches", "--manifest", manifest, "--buckets", cfg,
                       "--batch-size", "4", "--capacity", "3000")
    assert code == 2


def test_collate(capsys, manifest):
    code, out, _ = run(capsys, "collate", "--manifest", manifest, "--drop-prob", "1", "--seed", "0")
    assert code == 0
    rows = [json.loads(line) for line in out.splitlines()]
    assert rows[1]["kept_refs"] == [1, 3] and rows[1]["instruction"] == "Put Fig 1 on Fig 2"
    assert rows[2] == {"id": "c", "kept_refs": [], "instruction": "a cat", "permutation": {}}


def test_collate_dangling_reference_is_data_error(capsys, tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"id": "a", "task": "edit", "refs": [[64, 64]], "target": [64, 64], "instruction": "Fig 4"}\n')
    code, _, err = run(capsys, "collate", "--manifest", path)
    assert code == 2 and "dangling" in err


def test_sample_timesteps(capsys):
    code, out, _ = run(capsys, "sample-timesteps", "--world-size", "4", "--period", "2",
                       "--seed", "1", "--steps", "6")
    assert code == 0
    rows = list(csv.DictReader(out.splitlines()))
    assert len(rows) == 24
    for r in rows:
        k = int(r["interval"])
        assert k / 4 <= float(r["t"]) < (k + 1) / 4
    by_step = {}
    for r in rows:
        by_step.setdefault(r["step"], []).append(int(r["interval"]))
    assert all(sorted(v) == [0, 1, 2, 3] for v in by_step.values())


def test_seed_env_fallback_and_override(capsys, monkeypatch):
    args = ("sample-timesteps", "--world-size", "2", "--steps", "3")
    monkeypatch.setenv("FLOWFORGE_SEED", "7")
    _, env_out, _ = run(capsys, *args)
    _, flag_out, _ = run(capsys, *args, "--seed", "7")
    _, other_out, _ = run(capsys, *args, "--seed", "8")
    assert env_out == flag_out != other_out
    monkeypatch.setenv("FLOWFORGE_SEED", "8")
    _, override_out, _ = run(capsys, *args, "--seed", "7")
    assert override_out == flag_out
    monkeypatch.setenv("FLOWFORGE_SEED", "abc")
    code, _, _ = run(capsys, *args)
    assert code == 1


def _glyph_file(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def test_score_ocr(capsys, tmp_path):
    g = [{"char": c, "cx": 0.1 + 0.2 * i, "cy": 0.5, "scale": 0.1} for i, c in enumerate("SALE")]
    big = [dict(x, scale=0.2) for x in g]
    tgt = _glyph_file(tmp_path / "t.jsonl", [{"id": "1", "text": "SALE", "glyphs": g},
                                             {"id": "2", "text": "SALE", "glyphs": g},
                                             {"id": "3", "text": "SALE", "glyphs": g}])
    pred = _glyph_file(tmp_path / "p.jsonl", [{"id": "1", "text": "SALE", "glyphs": g},
                                              {"id": "2", "text": "SALE", "glyphs": big}])
    code, out, _ = run(capsys, "score-ocr", "--pred", pred, "--target", tgt, "--w-text", "0.5",
                       "--w-layout", "0.5", "--gate", "0.8")
    assert code == 0
    rows = {r["id"]: r for r in csv.DictReader(out.splitlines())}
    assert float(rows["1"]["reward"]) == pytest.approx(1.0)
    assert float(rows["2"]["reward"]) == pytest.approx(0.75)
    assert float(rows["3"]["reward"]) == 0.0  # no prediction at all


def test_reward_json_array_and_lines(capsys, tmp_path):
    item = {"id": "q", "passes": [{"values": [1, 2, 3, 4, 5], "logits": [0, 0, 0, 0, 0]},
                                  {"values": [1, 2, 3, 4, 5], "logits": [0, 0, 0, 0, 0]}]}
    arr = tmp_path / "a.json"
    arr.write_text(json.dumps([item]))
    lines = tmp_path / "a.jsonl"
    lines.write_text(json.dumps(item) + "\n" + json.dumps(dict(item, id="r")) + "\n")
    code, out, _ = run(capsys, "reward", "--input", arr)
    assert code == 0 and out.splitlines() == ["id,reward", "q,3.0"]
    code, out, _ = run(capsys, "reward", "--input", lines, "--passes", "2")
    assert out.splitlines()[1:] == ["q,3.0", "r,3.0"]
    code, _, err = run(capsys, "reward", "--input", lines, "--passes", "3")
    assert code == 2 and "expected 3 passes" in err
    bad = tmp_path / "bad.json"
    bad.write_text('[{"id": "x"}]')
    code, _, _ = run(capsys, "reward", "--input", bad)
    assert code == 2


def test_mine(capsys, tmp_path):
    path = tmp_path / "r.csv"
    rows = ["instruction_id,reward"] + [f"A,{r}" for r in (0.7, 0.7) + (0.825,) * 8]
    rows += [f"B,{r}" for r in (0.2, 0.2) + (0.8875,) * 8]
    rows += [f"C,{r}" for r in (0.1, 0.1) + (0.35,) * 8]
    path.write_text("\n".join(rows) + "\n")
    code, out, _ = run(capsys, "mine", "--rewards", path, "--mean-min", "0.6", "--quantile-max", "0.4")
    assert code == 0 and out == "B\n"
    path.write_text("who,what\n1,2\n")
    code, _, _ = run(capsys, "mine", "--rewards", path)
    assert code == 2


def test_train_pipeline_and_report(capsys, tiny_config, tmp_path):
    pre, sft, dpo = tmp_path / "pre", tmp_path / "sft", tmp_path / "dpo"
    assert run(capsys, "train", "--stage", "pretrain", "--config", tiny_config, "--out", pre)[0] == 0
    for name in ("metrics.csv", "timesteps.csv", "samples.csv", "run.json",
                 "checkpoint/params.bin", "checkpoint/checkpoint.json"):
        assert (pre / name).exists(), name
    rows = list(csv.DictReader((pre / "metrics.csv").open()))
    assert len(rows) == 30 and rows[0]["stage"] == "pretrain"
    run_meta = json.loads((pre / "run.json").read_text())
    ck_meta = json.loads((pre / "checkpoint" / "checkpoint.json").read_text())
    assert run_meta["config_hash"] == ck_meta["config_hash"]

    assert run(capsys, "train", "--stage", "sft", "--config", tiny_config, "--out", sft,
               "--init", pre / "checkpoint")[0] == 0
    assert (sft / "checkpoint" / "ema.bin").exists()
    assert run(capsys, "train", "--stage", "dpo", "--config", tiny_config, "--out", dpo,
               "--init", sft / "checkpoint")[0] == 0

    code, _, _ = run(capsys, "report", pre, sft, dpo, "--out", tmp_path / "rep")
    assert code == 0
    summary = json.loads((tmp_path / "rep" / "summary.json").read_text())
    assert summary["n_runs"] == 3
    assert [r["stage"] for r in summary["runs"]] == ["pretrain", "sft", "dpo"]
    assert all(r["config_hash"] == run_meta["config_hash"] for r in summary["runs"])
    assert (tmp_path / "rep" / "figures" / "loss_curves.png").stat().st_size > 0


def test_train_preference_stage_needs_init(capsys, tiny_config, tmp_path):
    code, _, err = run(capsys, "train", "--stage", "dpo", "--config", tiny_config, "--out", tmp_path / "d")
    assert code == 1 and "--init" in err


def test_train_rejects_mismatched_checkpoint(capsys, tiny_config, tmp_path):
    assert run(capsys, "train", "--stage", "pretrain", "--config", tiny_config, "--out", tmp_path / "p")[0] == 0
    other = tmp_path / "o.yaml"
    other.write_text(yaml.safe_dump(dict(TINY, model={"hidden": 8})))
    code, _, err = run(capsys, "train", "--stage", "sft", "--config", other, "--out", tmp_path / "s",
                       "--init", tmp_path / "p" / "checkpoint")
    assert code == 2 and "does not match" in err


def test_train_bad_config_is_data_error(capsys, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("stages:\n  pretrain:\n    stepz: 3\n")
    code, _, err = run(capsys, "train", "--stage", "pretrain", "--config", cfg, "--out", tmp_path / "o")
    assert code == 2 and "stepz" in err


def test_report_empty_and_missing(capsys, tmp_path):
    code, _, _ = run(capsys, "report", "--out", tmp_path / "r")
    assert code == 0
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary == {"all_invariants_pass": True, "n_runs": 0, "n_steps_total": 0, "runs": []}
    code, _, err = run(capsys, "report", tmp_path / "missing.csv", "--out", tmp_path / "r2")
    assert code == 2 and "not found" in err


def test_report_on_timestep_audit(capsys, tmp_path):
    path = tmp_path / "ts.csv"
    code, out, _ = run(capsys, "sample-timesteps", "--world-size", "8", "--seed", "0", "--steps", "2000")
    path.write_text(out)
    code, _, _ = run(capsys, "report", path, "--out", tmp_path / "r")
    (entry,) = json.loads((tmp_path / "r" / "summary.json").read_text())["runs"]
    assert entry["kind"] == "timesteps"
    assert entry["stratification"]["partition_ok"] and entry["stratification"]["chi2_pass"]
    assert entry["invariants_pass"]
