import csv
import json
import math
from pathlib import Path

import pytest

from nvt import cli
from nvt.config import RunConfig, load_run_config
from nvt.data import save_ppm, synth_dataset
from nvt.errors import ConfigError

QUICKSTART = Path(__file__).resolve().parents[1] / "configs" / "quickstart.json"


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr().out.strip().splitlines()
    return code, json.loads(out[-1])


def small_config(root, out, epochs=1, noise=None):
    return {
        "model": {"image_size": 16, "patch_size": 8, "embed_dim": 8, "depth": 2, "num_heads": 2,
                  "num_classes": 3},
        "noise": noise,
        "train": {"batch_size": 4, "base_lr": 1e-3, "epochs": epochs, "seed": 0},
        "data": {"root": str(root)},
        "output": {"dir": str(out)},
    }


@pytest.fixture
def synth(tmp_path, capsys):
    path = tmp_path / "synth.nvt"
    code, doc = run(capsys, "dataset", "synth", "--classes", "3", "--per-class", "4",
                    "--val-per-class", "2", "--size", "16", "--out", str(path))
    assert code == 0 and doc["splits"] == {"train": 12, "val": 6}
    return path


# config -------------------------------------------------------------------------


def test_quickstart_config_loads():
    rc = load_run_config(QUICKSTART)
    assert rc.noise.kind == "cyclic_shift_add" and rc.noise.layer_index == rc.model.depth - 1
    assert rc.resolve_path(rc.data.root) == QUICKSTART.parent / "../data/synth8.nvt"


def test_config_round_trip():
    rc = RunConfig.from_json(small_config("d", "o", noise={"kind": "cyclic_mix", "alpha": 0.25}))
    again = RunConfig.from_json(json.loads(json.dumps(rc.to_json())))
    assert again == rc


@pytest.mark.parametrize("mutate,field", [
    (lambda c: c["train"].update(momentum=0.9), "train"),
    (lambda c: c["model"].pop("depth"), "model"),
    (lambda c: c.update(extra=1), "<root>"),
    (lambda c: c["data"].update(norm="imagenet"), "data.norm"),
    (lambda c: c.update(noise={"kind": "cyclic_mix", "alpha": 0.5, "layer_index": 5}), "noise.layer_index"),
    (lambda c: c.update(noise={"kind": "cyclic_mix"}), "noise.alpha"),
])
def test_config_errors_name_the_field(mutate, field):
    cfg = small_config("d", "o")
    mutate(cfg)
    with pytest.raises(ConfigError) as info:
        RunConfig.from_json(cfg)
    assert info.value.field == field


# commands -----------------------------------------------------------------------


def test_train_missing_data_root(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(small_config("nowhere.nvt", "out")))
    code, doc = run(capsys, "train", "--config", str(cfg))
    assert code == 2 and doc["field"] == "data.root" and doc["exit_code"] == 2


def test_bad_arguments_exit_2(capsys):
    code, doc = run(capsys, "eval")
    assert code == 2 and doc["field"] == "argv"


def test_train_then_eval(tmp_path, synth, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(small_config(synth.name, "runs/a", epochs=2,
                                           noise={"kind": "cyclic_shift_add", "alpha": 0.5})))
    code, doc = run(capsys, "train", "--config", str(cfg))
    assert code == 0
    out = tmp_path / "runs" / "a"
    assert {p.name for p in out.iterdir()} == {"best.nvt", "history.jsonl", "run_config.json"}
    assert doc["noise"]["layer_index"] == 1
    csv_path = tmp_path / "per_class.csv"
    code, ev = run(capsys, "eval", "--checkpoint", str(out / "best.nvt"), "--data", str(synth),
                   "--per-class-csv", str(csv_path))
    assert code == 0
    assert ev["top1"] == doc["best_val_top1"]
    assert ev["k_top5"] == 3 and ev["notes"]
    rows = list(csv.reader(csv_path.open()))
    assert rows[0] == ["class_index", "class_name", "count", "top1"] and len(rows) == 4

    code, ins = run(capsys, "inspect-noise", "--checkpoint", str(out / "best.nvt"))
    assert code == 0 and ins["batch"] == 4 and ins["tokens"] == 5 and ins["channels"] == 8
    assert math.isclose(ins["delta_h"], 40 * math.log(1 - (-0.5) ** 4), rel_tol=1e-12)


def test_eval_corrupt_checkpoint(tmp_path, synth, capsys):
    bad = tmp_path / "bad.nvt"
    bad.write_bytes(b"XXXX" + bytes(20))
    code, doc = run(capsys, "eval", "--checkpoint", str(bad), "--data", str(synth))
    assert code == 4 and doc["offset"] == 0


def test_eval_missing_split(tmp_path, synth, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(small_config(synth.name, "o")))
    assert run(capsys, "train", "--config", str(cfg))[0] == 0
    code, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "o" / "best.nvt"), "--data", str(synth),
                  "--split", "test")
    assert code == 2


def test_inspect_noise_kind(capsys):
    code, doc = run(capsys, "inspect-noise", "--kind", "cyclic_shift_add", "--alpha", "0.5",
                    "--batch", "3", "--tokens", "2", "--dim", "1")
    assert code == 0 and abs(doc["delta_h"] - 2 * math.log(1.125)) < 1e-12
    assert doc["q"] == [[1.0, 0.5, 0.0], [0.0, 1.0, 0.5], [0.5, 0.0, 1.0]]


def test_inspect_noise_singular_and_empirical(capsys):
    code, doc = run(capsys, "inspect-noise", "--kind", "cyclic_mix", "--alpha", "0.5", "--batch", "2",
                    "--tokens", "1", "--dim", "1", "--empirical", "--trials", "2000")
    assert code == 0 and doc["singular"] and doc["delta_h"] == "-inf"
    assert doc["empirical"]["rank"] == 1


def test_inspect_noise_requires_alpha(capsys):
    code, doc = run(capsys, "inspect-noise", "--kind", "cyclic_mix", "--batch", "2", "--tokens", "1",
                    "--dim", "1")
    assert code == 2 and doc["field"] == "noise.alpha"


def test_dataset_scan_convert_stats(tmp_path, capsys):
    ds = synth_dataset(2, 3, 8, 0)
    for split in ("train", "val"):
        for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
            d = tmp_path / "tree" / split / ds.class_names[lab]
            d.mkdir(parents=True, exist_ok=True)
            save_ppm(d / f"{i}.ppm", img)
    code, scan = run(capsys, "dataset", "scan", "--root", str(tmp_path / "tree"))
    assert code == 0 and scan["class_names"] == ds.class_names and len(scan["entries"]) == 6
    code, conv = run(capsys, "dataset", "convert", "--root", str(tmp_path / "tree"),
                     "--out", str(tmp_path / "p.nvt"))
    assert code == 0 and conv["splits"] == {"train": 6, "val": 6}
    _, a = run(capsys, "dataset", "stats", "--root", str(tmp_path / "tree"))
    _, b = run(capsys, "dataset", "stats", "--root", str(tmp_path / "p.nvt"))
    assert a == b


def test_bench_schema(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(small_config("d", "o")))
    code, doc = run(capsys, "bench", "--config", str(cfg), "--resolution", "16", "32",
                    "--iterations", "10", "--warmup", "1")
    assert code == 0 and doc["statistic"] == "median" and doc["environment"]
    assert [r["resolution"] for r in doc["results"]] == [16, 32]
    assert all(r["median_ms"] > 0 and r["iterations"] == 10 for r in doc["results"])


def test_nvt_threads_must_be_integer(monkeypatch, capsys):
    monkeypatch.setenv("NVT_THREADS", "many")
    code, doc = run(capsys, "inspect-noise", "--kind", "identity", "--batch", "2", "--tokens", "1",
                    "--dim", "1")
    assert code == 2 and doc["field"] == "NVT_THREADS"

