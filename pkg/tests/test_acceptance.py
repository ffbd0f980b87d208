"""Acceptance criteria, one test each, at their stated tolerances.

Every test prints a single ``[ACCEPT n] PASS|FAIL`` line straight to the
terminal (also under ``pytest -q``) before asserting.
"""
import csv
import time

import numpy as np
import pytest

from tedmil import rng as rngmod
from tedmil.cli import main
from tedmil.data import AnnotationRecord, load_annotations, load_feature_file, validate_record, write_feature_file
from tedmil.errors import ValidationError
from tedmil.evaluation import evaluate, roc_auc
from tedmil.loss import BagScores, LossConfig, max_hinge_loss, mean_distance_loss
from tedmil.network import NetworkConfig, forward, init_params, load_checkpoint
from tedmil.trainer import gradcheck


@pytest.fixture
def report(capsys):
    def emit(n, title, ok, detail):
        with capsys.disabled():
            print(f"\n[ACCEPT {n}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        return ok
    return emit


def _run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    """Default fixed-seed synthetic dataset (d=32, 60+60 train, 20+20 test) and its trained model."""
    root = tmp_path_factory.mktemp("accept")
    assert _run("synth", "--out", root / "data", "--seed", 0) == 0
    manifest = root / "data" / "manifest.csv"
    t0 = time.perf_counter()
    assert _run("train", "--manifest", manifest, "--out", root / "train", "--seed", 0) == 0
    elapsed = time.perf_counter() - t0
    params, _ = load_checkpoint(root / "train" / "model.ckpt")
    return root, manifest, params, elapsed


# ---------------------------------------------------------------- 1


def test_criterion_1_gradcheck(report):
    net = NetworkConfig(input_dim=8, bag_size=8, encoder_filters=(8, 4))
    t0 = time.perf_counter()
    worst = {}
    for variant in ("mean_distance", "max_hinge"):
        worst[variant] = gradcheck(net, LossConfig(variant), seed=0).worst
    elapsed = time.perf_counter() - t0
    ok = all(w < 1e-5 for w in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} max rel err {v:.2e}" for k, v in worst.items()) + f", {elapsed:.1f}s"
    assert report(1, "gradient check d=8 F=[8,4] T=8", ok, detail)


# ---------------------------------------------------------------- 2


def test_criterion_2_loss_unit_values(report):
    ones, zeros, half = np.ones(32), np.zeros(32), np.full(32, 0.5)
    perfect = mean_distance_loss(BagScores(ones, "abnormal"), BagScores(zeros, "normal"), 8e-5)
    inverted = mean_distance_loss(BagScores(zeros, "abnormal"), BagScores(ones, "normal"), 8e-5)
    hinge = max_hinge_loss(BagScores(half, "abnormal"), BagScores(half, "normal"), 0.0, 0.0)
    errs = [abs(perfect - 2.56e-3), abs(inverted - 1.0), abs(hinge - 1.0)]
    ok = max(errs) <= 1e-12
    detail = f"perfect {perfect!r}, inverted {inverted!r}, equal-max hinge {hinge!r}"
    assert report(2, "loss closed forms within 1e-12", ok, detail)


# ---------------------------------------------------------------- 3


def _pairwise(s, y):
    pos, neg = s[y], s[~y]
    return ((pos[:, None] > neg).sum() + 0.5 * (pos[:, None] == neg).sum()) / (pos.size * neg.size)


def test_criterion_3_auc_oracle(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(100):
        n = int(rng.integers(2, 501))
        s = rng.uniform(size=n)
        if i % 2:
            s = np.round(s * rng.integers(2, 20)) / 20  # heavy ties
        y = rng.uniform(size=n) < rng.uniform(0.1, 0.9)
        y[0], y[-1] = True, False
        worst = max(worst, abs(roc_auc(s, y).auc - _pairwise(s, y)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 10
    assert report(3, "trapezoidal AUC vs pairwise on 100 pools", ok, f"max diff {worst:.1e}, {elapsed:.2f}s")


# ---------------------------------------------------------------- 4


def test_criterion_4_synthetic_end_to_end(synthetic, report):
    root, manifest, params, train_time = synthetic
    cfg = params.config
    assert (cfg.input_dim, cfg.kernel_length, cfg.encoder_filters) == (32, 4, (64, 16))
    echoed = (root / "train" / "config.ini").read_text()
    assert "iterations = 2000" in echoed and "learning_rate = 0.01" in echoed
    assert "lambda_sparsity = 8e-05" in echoed
    t0 = time.perf_counter()
    rep = evaluate(params, manifest)
    elapsed = train_time + time.perf_counter() - t0
    ok = rep.auc >= 0.95 and rep.false_alarm <= 0.05 and elapsed < 300
    detail = f"AUC {rep.auc:.4f}, false alarm {rep.false_alarm:.4f}, {elapsed:.0f}s"
    assert report(4, "synthetic end-to-end", ok, detail)


# ---------------------------------------------------------------- 5


def test_criterion_5_null_control(tmp_path, report):
    ini = tmp_path / "null.ini"
    ini.write_text("[synthetic]\nanomaly_offset_scale = 0\n")
    assert _run("synth", "--config", ini, "--out", tmp_path / "data") == 0
    manifest = tmp_path / "data" / "manifest.csv"
    assert "# null_signal=1" in manifest.read_text()
    assert _run("train", "--config", ini, "--manifest", manifest, "--out", tmp_path / "train") == 0
    params, _ = load_checkpoint(tmp_path / "train" / "model.ckpt")
    auc = evaluate(params, manifest).auc
    ok = 0.4 <= auc <= 0.6
    assert report(5, "null-signal control", ok, f"AUC {auc:.4f}")


# ---------------------------------------------------------------- 6


def test_criterion_6_causality(report):
    cfg = NetworkConfig(input_dim=32, encoder_filters=(64, 16))
    params = init_params(cfg, rngmod.stream(6, "init"))
    for _, t in params.named_tensors():
        if t.name.endswith(".bias"):
            t.value[:] = rngmod.stream(7, "init").normal(scale=0.1, size=t.value.shape)
    rng = np.random.default_rng(66)
    violations, checked = 0, 0
    for _ in range(20):
        bag = rng.normal(size=(32, 32))
        t = int(rng.integers(0, 32))
        probe = bag.copy()
        probe[t] += rng.normal(scale=3.0, size=32)
        base, pert = {}, {}
        forward(params, bag, trace=base)
        forward(params, probe, trace=pert)
        for key, a in base.items():
            factor = 32 // a.times  # entry j of a coarse layer is first used at input time factor * j
            early = np.arange(a.times) * factor < t
            checked += 1
            if not np.array_equal(a.value[early], pert[key].value[early]):
                violations += 1
    ok = violations == 0
    assert report(6, "causality probe", ok, f"{violations} violations in {checked} activation checks over 20 probes")


# ---------------------------------------------------------------- 7


def test_criterion_7_determinism_and_resume(synthetic, tmp_path, report):
    _, manifest, _, _ = synthetic
    common = ["--manifest", manifest, "--seed", 5]
    assert _run("train", *common, "--iterations", 40, "--out", tmp_path / "a") == 0
    assert _run("train", *common, "--iterations", 40, "--out", tmp_path / "b") == 0
    same_seed = (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    assert _run("train", *common, "--iterations", 15, "--out", tmp_path / "c") == 0
    assert _run("train", *common, "--iterations", 40, "--out", tmp_path / "c", "--resume") == 0
    resumed = (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "c" / "model.ckpt").read_bytes()
    ok = same_seed and resumed
    assert report(7, "determinism and resume", ok, f"same-seed identical {same_seed}, resume identical {resumed}")


# ---------------------------------------------------------------- 8


def test_criterion_8_ablation_harness(tmp_path, report):
    ini = tmp_path / "small.ini"
    ini.write_text("[synthetic]\nn_train_normal = 4\nn_train_abnormal = 4\nn_test = 3\n"
                   "[train]\nbatch_abnormal = 4\nbatch_normal = 4\n")
    assert _run("synth", "--config", ini, "--out", tmp_path / "data") == 0
    code = _run("ablate", "--config", ini, "--manifest", tmp_path / "data" / "manifest.csv",
                "--out", tmp_path / "abl", "--iterations", 3)
    rows = list(csv.DictReader(open(tmp_path / "abl" / "ablation.csv"))) if code == 0 else []
    cells = {(r["loss"], int(r["kernel_length"])) for r in rows}
    expect = {(v, k) for v in ("mean_distance", "max_hinge", "max_hinge_avg_mapping") for k in (2, 4, 6, 8, 16)}
    finite = all(np.isfinite(float(r["auc"])) and np.isfinite(float(r["false_alarm_rate"])) for r in rows)
    ok = code == 0 and len(rows) == 15 and cells == expect and finite
    assert report(8, "ablation CSV 3 losses x 5 kernel lengths", ok, f"{len(rows)} rows, exit {code}")


# ---------------------------------------------------------------- 9


MALFORMED = {
    "end beyond n_frames": "v,abnormal,100,50,150",
    "negative start": "v,abnormal,100,-5,10",
    "empty interval": "v,abnormal,100,40,40",
    "overlapping": "v,abnormal,100,10,30,20,40",
    "unsorted": "v,abnormal,100,50,60,10,20",
    "normal with interval": "v,normal,100,10,20",
    "unknown label": "v,odd,100",
    "zero frames": "v,abnormal,0",
    "unpaired bound": "v,abnormal,100,10",
    "non-integer": "v,abnormal,100,a,b",
}


def test_criterion_9_round_trips_and_validation(tmp_path, report):
    rng = np.random.default_rng(9)
    m = rng.normal(size=(37, 11)).astype(np.float32)
    m[0, 0] = np.float32(1e-30)
    m[1, 1] = np.float32(-3.4e38)
    exact = {}
    with pytest.warns(UserWarning):
        for suffix in (".tedf", ".csv"):
            write_feature_file(tmp_path / f"f{suffix}", m)
            back = load_feature_file(tmp_path / f"f{suffix}").matrix
            exact[suffix] = back.dtype == np.float64 and np.array_equal(back.astype(np.float32), m) \
                and np.array_equal(back, m.astype(np.float64))
    rejected = {}
    for name, row in MALFORMED.items():
        path = tmp_path / "ann.csv"
        path.write_text(row + "\n")
        try:
            load_annotations(path)
            rejected[name] = False
        except ValidationError:
            rejected[name] = True
    good = AnnotationRecord("ok", "abnormal", 100, [(0, 10), (10, 100)])
    validate_record(good)
    ok = all(exact.values()) and all(rejected.values())
    missed = [k for k, v in rejected.items() if not v]
    detail = f"TEDF exact {exact['.tedf']}, CSV exact {exact['.csv']}, rejected {sum(rejected.values())}/{len(rejected)}"
    if missed:
        detail += f" (accepted: {', '.join(missed)})"
    assert report(9, "format round-trips and annotation validation", ok, detail)


# ---------------------------------------------------------------- supplementary


def test_ablation_sanity_envelope(synthetic, tmp_path):
    """On the acceptance data, mean-distance AUC is not worse than max-hinge AUC by more than 0.05."""
    _, manifest, params, _ = synthetic
    md = evaluate(params, manifest).auc
    assert _run("train", "--manifest", manifest, "--out", tmp_path / "mh", "--loss", "max_hinge") == 0
    mh_params, _ = load_checkpoint(tmp_path / "mh" / "model.ckpt")
    mh = evaluate(mh_params, manifest).auc
    assert md >= mh - 0.05
