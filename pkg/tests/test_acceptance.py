"""Acceptance criteria, each checked at its pinned tolerance.

Every test records one PASS/FAIL line, printed in the terminal summary.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from nvt import cli
from nvt.data import AugmentConfig, compute_norm_stats, synth_dataset
from nvt.evaluate import predict_logits, topk_accuracy
from nvt.model import VIT_B16, ViTConfig, init_params, load_checkpoint, param_count
from nvt.noise import NoiseConfig, build_quality_matrix, entropy_delta_empirical, entropy_delta_exact
from nvt.tensor import Tensor, label_smoothing_ce
from nvt.train import OptimizerState, TrainConfig, adamw_step, cosine_lr, train

pytestmark = pytest.mark.slow

QUICKSTART = Path(__file__).resolve().parents[1] / "configs" / "quickstart.json"

GRAD_TOL = 1e-4
GRAD_SECONDS = 60.0
ENTROPY_TOL = 1e-9
EMPIRICAL_REL = 0.05
EMPIRICAL_TRIALS = 100_000
EMPIRICAL_SECONDS = 120.0
PARAM_REL = 0.01
TRAIN_ACC = 0.90
VAL_CHANCE_MULTIPLE = 4
TRAIN_SECONDS = 600.0
METRIC_INSTANCES = 1000
LN2_TOL = 1e-12


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, json.loads(out[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Quickstart layout: configs/, data/synth8.nvt, and runs/ under one root."""
    root = tmp_path_factory.mktemp("accept")
    (root / "configs").mkdir()
    (root / "data").mkdir()
    assert cli.main(["dataset", "synth", "--out", str(root / "data" / "synth8.nvt")]) == 0
    return root


def write_config(workspace, name, **overrides):
    cfg = json.loads(QUICKSTART.read_text())
    cfg["output"]["dir"] = f"../runs/{name}"
    cfg.update(overrides)
    path = workspace / "configs" / f"{name}.json"
    path.write_text(json.dumps(cfg))
    return path


def test_gradient_suite(capsys, criterion):
    t0 = time.perf_counter()
    code, doc = run_cli(capsys, "gradcheck")
    seconds = time.perf_counter() - t0
    worst = max(r["max_rel_error"] for r in doc["results"].values())
    ok = code == 0 and worst <= GRAD_TOL and seconds < GRAD_SECONDS and len(doc["results"]) == 7
    criterion("gradient suite", ok,
              f"{len(doc['results'])} checks, worst rel err {worst:.2e} <= {GRAD_TOL:g}, {seconds:.1f}s < 60s")
    assert ok


def test_entropy_exactness(criterion):
    worst, cases, singular = 0.0, 0, []
    for kind in ("identity", "cyclic_mix", "cyclic_shift_add"):
        for b in range(1, 7):
            for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
                noise = NoiseConfig(kind, 0, None if kind == "identity" else alpha)
                c0, c1 = noise.coefficients()
                closed = abs(c0**b - (-c1) ** b)
                r = entropy_delta_exact(build_quality_matrix(noise, b), 3, 2)
                cases += 1
                if closed == 0.0:
                    assert r.singular and r.sign == 0 and r.effective_log_det == -math.inf
                    singular.append((kind, b, alpha))
                    continue
                assert not r.singular
                worst = max(worst, abs(math.exp(r.log_abs_det_q) - closed))
                assert r.effective_log_det == 6 * r.log_abs_det_q
    ok = worst <= ENTROPY_TOL and ("cyclic_mix", 2, 0.5) in singular
    criterion("entropy exactness", ok,
              f"{cases} cases, max |det| err {worst:.1e} <= {ENTROPY_TOL:g}, {len(singular)} singular flagged")
    assert ok


def test_entropy_empirical(criterion):
    q = build_quality_matrix(NoiseConfig("cyclic_shift_add", 0, 0.5), 3)
    t0 = time.perf_counter()
    r = entropy_delta_empirical(q, 2, 1, trials=EMPIRICAL_TRIALS, seed=0)
    seconds = time.perf_counter() - t0
    exact = 2 * math.log(1.125)
    rel = abs(r.empirical_delta - exact) / exact
    ok = rel <= EMPIRICAL_REL and seconds < EMPIRICAL_SECONDS and abs(r.effective_log_det - exact) < 1e-15
    criterion("entropy empiricism", ok,
              f"empirical {r.empirical_delta:.6f} vs exact {exact:.6f}, rel {rel:.2e} <= 5%, {seconds:.2f}s")
    assert ok


def test_fixed_layer_contract(tmp_path, criterion):
    train_ds, val_ds = synth_dataset(4, 8, 32, 0), synth_dataset(4, 5, 32, 1)
    norm = compute_norm_stats(train_ds.images)
    cfg = ViTConfig(32, 8, 16, 3, 2, 4)
    chosen = NoiseConfig("cyclic_shift_add", None, 0.5, selection_seed=11).resolve(cfg.depth)
    params = init_params(cfg, 0)
    ckpt, _ = train(params, cfg, chosen, train_ds, val_ds, TrainConfig(batch_size=8, epochs=1, base_lr=1e-3),
                    norm=norm, augment=AugmentConfig(), out_dir=tmp_path)
    in_process, _ = predict_logits(params, cfg, chosen, val_ds, 32, norm, 8)

    loaded, cfg2, noise2, meta = load_checkpoint(ckpt)
    fields_equal = all(getattr(noise2, f) == getattr(chosen, f)
                       for f in ("kind", "layer_index", "alpha", "custom", "selection_seed"))
    reloaded, _ = predict_logits(loaded, cfg2, noise2, val_ds, 32, norm, meta["eval_batch_size"])
    bit_equal = in_process.tobytes() == reloaded.tobytes()
    ok = fields_equal and noise2 == chosen and cfg2 == cfg and bit_equal
    criterion("fixed-layer contract", ok,
              f"noise {noise2.to_json()} round-trips, logits bit-equal={bit_equal}")
    assert ok


def test_parameter_count(criterion):
    n = param_count(ViTConfig(image_size=224, num_classes=1000, **VIT_B16))
    rel = abs(n - 86e6) / 86e6
    desks = [ViTConfig(32, 8, 16, 2, 2, 4), ViTConfig(32, 8, 32, 2, 2, 8), ViTConfig(224, 16, 32, 2, 2, 8)]
    exact = all(param_count(c) == sum(p.data.size for p in init_params(c, 0).values()) for c in desks)
    ok = rel <= PARAM_REL and exact
    criterion("parameter count", ok,
              f"ViT-B/16@224 = {n:,} ({rel:.2%} from 86M), {len(desks)} desk configs exact={exact}")
    assert ok


def test_training_sanity(workspace, capsys, criterion):
    rows = {}
    t0 = time.perf_counter()
    for name, noise in (("sanity_none", None), ("sanity_noisy", "keep")):
        overrides = {} if noise == "keep" else {"noise": None}
        code, doc = run_cli(capsys, "train", "--config", write_config(workspace, name, **overrides))
        assert code == 0
        hist = [json.loads(l) for l in (workspace / "runs" / name / "history.jsonl").read_text().splitlines()]
        rows[name] = (max(r["train_acc"] for r in hist), max(r["val_top1"] for r in hist), len(hist),
                      doc["noise"])
    seconds = time.perf_counter() - t0
    bar = VAL_CHANCE_MULTIPLE / 8
    ok = seconds < TRAIN_SECONDS and all(
        acc >= TRAIN_ACC and val >= bar and epochs <= 50 for acc, val, epochs, _ in rows.values())
    noisy = rows["sanity_noisy"][3]
    ok = ok and noisy["kind"] == "cyclic_shift_add" and noisy["layer_index"] == 1 and noisy["alpha"] == 0.5
    detail = ", ".join(f"{k[7:]}: train {a:.3f} val {v:.3f}" for k, (a, v, _, _) in rows.items())
    criterion("training sanity", ok, f"{detail} (bars {TRAIN_ACC}/{bar}), {seconds:.0f}s < 600s")
    assert ok


def test_metric_oracle(criterion):
    rng = np.random.default_rng(2024)
    for _ in range(METRIC_INSTANCES):
        b, c = int(rng.integers(1, 65)), int(rng.integers(1, 242))
        logits = rng.standard_normal((b, c))
        if rng.random() < 0.3:
            logits = np.round(logits)  # force ties
        labels = rng.integers(0, c, b)
        order = np.argsort(-logits, axis=1, kind="stable")
        rank = np.argmax(order == labels[:, None], axis=1)
        for k in (1, 5):
            assert topk_accuracy(logits, labels, k) == float(np.mean(rank < k))
        assert topk_accuracy(logits, labels, 5) >= topk_accuracy(logits, labels, 1)
        assert topk_accuracy(logits, labels, c) == 1.0
    criterion("metric oracle", True, f"{METRIC_INSTANCES} instances (B<=64, C<=241) match a full-sort oracle")


def test_recipe_fidelity(criterion):
    base = TrainConfig(batch_size=1).base_lr
    ends = cosine_lr(0, 1000, base) == 1e-5 and cosine_lr(1000, 1000, base) == 0.0
    ln2 = abs(label_smoothing_ce(Tensor([[0.0, 0.0]]), [1], 0.1).item() - math.log(2))
    theta = np.array([0.7, -1.3, 2.0, 1e-3])
    params = {"w": Tensor(theta.copy(), requires_grad=True)}
    lr, wd = 1e-3, 0.05
    adamw_step(params, {"w": np.zeros(4)}, OptimizerState.zeros_like(params), lr,
               TrainConfig(batch_size=1, weight_decay=wd))
    decay = np.array_equal(params["w"].data, theta * (1 - lr * wd))
    ok = ends and ln2 <= LN2_TOL and decay
    criterion("recipe fidelity", ok,
              f"cosine endpoints exact={ends}, |ce - ln2| = {ln2:.1e}, decoupled decay exact={decay}")
    assert ok


def test_determinism(workspace, capsys, criterion):
    blobs = []
    for name in ("det_a", "det_b"):
        code, _ = run_cli(capsys, "train", "--config", write_config(workspace, name))
        assert code == 0
        out = workspace / "runs" / name
        blobs.append(((out / "history.jsonl").read_bytes(), (out / "best.nvt").read_bytes()))
    same_hist = blobs[0][0] == blobs[1][0]
    same_ckpt = blobs[0][1] == blobs[1][1]
    ok = same_hist and same_ckpt
    criterion("determinism", ok, f"history identical={same_hist}, checkpoint identical={same_ckpt} "
                                 f"({len(blobs[0][1])} bytes)")
    assert ok


def test_latency_methodology(capsys, criterion):
    code, doc = run_cli(capsys, "bench", "--resolution", 224, 384, "--iterations", 10, "--warmup", 2)
    ms = {r["resolution"]: r["median_ms"] for r in doc["results"]}
    ok = code == 0 and doc["statistic"] == "median" and ms[384] > ms[224]
    criterion("latency methodology", ok, f"median 224: {ms[224]:.2f} ms, 384: {ms[384]:.2f} ms")
    assert ok
