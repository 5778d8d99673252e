import csv
import io
import json
import warnings

import pytest

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from fastapi.testclient import TestClient

from kadapt import cli
from kadapt import config as C
from kadapt.service.app import app

client = TestClient(app)

MICRO = {"preset": "vit-micro"}
FAST_TRAIN = {"lr_grid": [0.1], "wd_grid": [0.0], "epochs": 2, "seeds": [0]}

SMALL_CONFIG = """\
[common]
seed = 0
format = csv

[model]
preset = vit-micro

[data]
per_class = 20

[train]
lr_grid = 0.1
wd_grid = 0.0
epochs = 2
seeds = 0, 1

[adapt]
strategies = linear_probe; lora:r=2
"""


# ------------------------------------------------------------------ service


def test_health_and_strategies():
    assert client.get("/health").json()["status"] == "ok"
    body = client.get("/strategies").json()
    assert "kadaptation" in body["kinds"] and "linear_probe" in body["bench_defaults"]


def test_count_endpoint():
    body = client.post("/count", json={"model": {"preset": "vit-tiny"}, "adapt": {"strategy": "kadaptation:n=4,r=1"}}).json()
    (row,) = body["rows"]
    assert (row["head_params"], row["non_head_params"]) == (650, 1088)
    assert body["csv"].splitlines()[0] == "strategy,head_params,non_head_params,total_params,formula_count,gap"


def test_count_formula():
    body = client.post("/count", json={"model": {"d_model": 768}, "count": {"method": "lora", "L": 12, "r": 4}}).json()
    assert body["formula"]["count"] == 73_728


def test_train_endpoint_report():
    body = client.post("/train", json={"model": MICRO, "train": FAST_TRAIN, "adapt": {"strategy": "linear_probe"}}).json()
    rep = body["report"]
    assert rep["strategy"] == "linear_probe" and rep["seeds"] == [0]
    assert 0.0 <= rep["mean_accuracy"] <= 1.0 and rep["non_head_params"] == 0


@pytest.mark.parametrize(
    "route,body,code",
    [
        ("/count", {"adapt": {"strategy": "nonsense"}}, 400),
        ("/count", {"model": {"preset": "vit-huge"}}, 400),
        ("/count", {"count": {"method": "kadaptation", "L": 1, "r": 1}, "model": {"d_model": 768}}, 400),
        ("/count", {"adapt": {"bogus": 1}}, 422),
        ("/train", {"model": MICRO, "train": {**FAST_TRAIN, "lr_grid": [1e6]}, "adapt": {"strategy": "full_finetune"}}, 200),
        ("/merge", {"checkpoint": {"checkpoint": "/nonexistent.ckpt", "merged_out": "/tmp/x"}}, 400),
        ("/merge", {"checkpoint": {}}, 400),
    ],
)
def test_error_codes(route, body, code):
    assert client.post(route, json=body).status_code == code


def test_failed_train_reports_null_accuracy():
    body = client.post("/train", json={"model": MICRO, "train": {**FAST_TRAIN, "lr_grid": [1e6], "epochs": 5}, "adapt": {"strategy": "full_finetune"}}).json()
    assert body["report"]["mean_accuracy"] is None and body["report"]["errors"]


def test_merge_rejects_non_mergeable(tmp_path):
    ck = tmp_path / "a.ckpt"
    r = client.post("/train", json={"model": MICRO, "train": FAST_TRAIN, "adapt": {"strategy": "adapter:bottleneck=4"}, "checkpoint": {"checkpoint_out": str(ck)}})
    assert r.status_code == 200
    r = client.post("/merge", json={"checkpoint": {"checkpoint": str(ck), "merged_out": str(tmp_path / "m.ckpt")}})
    assert r.status_code == 400 and "NotMergeable" in r.json()["detail"]


# ------------------------------------------------------------------- config


def test_config_keys_unique_and_mirrored():
    keys = C.all_keys()
    parser = cli.build_parser()
    for cmd in cli.SUBCOMMANDS:
        args = parser.parse_args([cmd])
        assert all(hasattr(args, k) for k in keys)
    assert keys["seed"] == "common" and keys["lr_grid"] == "train"


def test_config_file_and_flag_override(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text(SMALL_CONFIG)
    args = cli.build_parser().parse_args(["bench", "--config", str(path), "--epochs", "7", "--seed", "3"])
    merged = C.resolve(args)
    assert merged["train"]["epochs"] == "7" and merged["train"]["lr_grid"] == "0.1"
    assert merged["common"]["seed"] == 3
    body = cli.build_request("bench", merged)
    assert body["seed"] == 3 and body["adapt"]["strategies"] == "linear_probe; lora:r=2"


@pytest.mark.parametrize(
    "text,match",
    [
        ("[train]\nnot_a_key = 1\n", "unknown key"),
        ("[train]\npreset = vit-tiny\n", r"belongs in \[model\]"),
        ("[nowhere]\nx = 1\n", "unknown section"),
    ],
)
def test_config_errors(tmp_path, text, match):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(C.ConfigError, match=match):
        C.read_file(str(path))


def test_cli_returns_2_on_bad_config(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[train]\nwat = 1\n")
    assert cli.main(["count", "--config", str(path)]) == 2
    assert "unknown key" in capsys.readouterr().err


# ---------------------------------------------------------------------- CLI


def test_cli_count_csv(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["count", "--preset", "vit-tiny", "--strategies", "linear_probe;lora:r=4,targets=attention_q", "--out-dir", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO((out / "counts.csv").read_text())))
    assert rows[0]["total_params"] == "650"
    assert rows[1]["gap"] == "0"


def test_cli_count_json(tmp_path):
    assert cli.main(["count", "--out-dir", str(tmp_path), "--format", "json", "--method", "compacter", "--L", "12", "--k", "768", "--d", "64", "--n", "4"]) == 0
    assert json.loads((tmp_path / "count.json").read_text())["formula"]["count"] == 10_048


def test_cli_train_then_merge(tmp_path):
    common = ["--out-dir", str(tmp_path), "--preset", "vit-micro", "--lr-grid", "0.1", "--wd-grid", "0", "--epochs", "2", "--seeds", "0"]
    assert cli.main(["train", *common, "--strategy", "lora:r=2", "--checkpoint-out", "lora.ckpt"]) == 0
    assert (tmp_path / "results.csv").exists() and (tmp_path / "lora.ckpt").exists()
    assert cli.main(["merge", "--out-dir", str(tmp_path), "--checkpoint", str(tmp_path / "lora.ckpt"), "--merged-out", "merged.ckpt"]) == 0
    report = json.loads((tmp_path / "merge.json").read_text())
    assert report["argmax_agree"] and report["max_abs_logit_deviation"] <= 1e-9
    assert (tmp_path / "merged.ckpt").exists()


def test_cli_bench_writes_both_tables(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(SMALL_CONFIG)
    assert cli.main(["bench", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 0
    results = list(csv.DictReader(io.StringIO((tmp_path / "results.csv").read_text())))
    timing = list(csv.DictReader(io.StringIO((tmp_path / "timing.csv").read_text())))
    assert [r["strategy"] for r in results] == ["linear_probe", "lora(r=2,targets=attention_qv)"]
    assert len(timing) == 4


def test_cli_measure_id_json(tmp_path):
    args = ["measure-id", "--out-dir", str(tmp_path), "--preset", "vit-micro", "--lr-grid", "0.1", "--wd-grid", "0", "--epochs", "2", "--grid", "0,8", "--module", "mlp"]
    assert cli.main(args) == 0
    report = json.loads((tmp_path / "measure_id.json").read_text())
    assert report["module"] == "mlp" and set(report["mean"]) >= {"grid", "accuracy", "d_t", "full_accuracy"}


def test_cli_http_error_exit_code(tmp_path, capsys):
    assert cli.main(["count", "--out-dir", str(tmp_path), "--strategy", "nonsense"]) == 1
    assert "error 400" in capsys.readouterr().err
