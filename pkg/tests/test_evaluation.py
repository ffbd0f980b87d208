import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tedmil import rng as rngmod
from tedmil.data import SyntheticSpec, generate_synthetic, load_manifest, segment_index
from tedmil.errors import ContractError, ValidationError
from tedmil.evaluation import evaluate, expand_scores, false_alarm_rate, roc_auc, write_report
from tedmil.network import NetworkConfig, init_params


def pairwise_auc(scores, labels):
    """Mann-Whitney statistic by brute force, ties counted as one half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    pos, neg = s[y], s[~y]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


# ---------------------------------------------------------------- expansion


def test_expand_identity_and_doubling():
    s = np.arange(32.0)
    np.testing.assert_array_equal(expand_scores(s, 32), s)
    np.testing.assert_array_equal(expand_scores(s, 64), np.repeat(s, 2))


def test_expand_uneven_partition():
    out = expand_scores(np.arange(32.0), 100)
    lengths = np.bincount(out.astype(int), minlength=32)
    assert lengths.sum() == 100 and set(lengths) <= {3, 4}
    assert np.all(np.diff(out) >= 0)


def test_expand_clip_aware():
    # 40 clips of 16 frames: frame f belongs to clip f // 16, whose instance is segment_index(40)
    out = expand_scores(np.arange(32.0), 640, 40)
    np.testing.assert_array_equal(out, segment_index(40)[np.arange(640) // 16])
    # with a clip count equal to the frame count both rules coincide
    np.testing.assert_array_equal(expand_scores(np.arange(32.0), 100, 100), expand_scores(np.arange(32.0), 100))


def test_expand_constant_within_instance(rng):
    s = rng.uniform(size=32)
    out = expand_scores(s, 333)
    seg = segment_index(333)
    for j in range(32):
        assert np.all(out[seg == j] == s[j])


def test_expand_errors():
    with pytest.raises(ContractError):
        expand_scores(np.zeros(32), 0)
    with pytest.raises(ContractError):
        expand_scores(np.zeros(32), 16, 0)


# ---------------------------------------------------------------- ROC


def test_roc_perfect_and_ties():
    assert roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]).auc == 1.0
    assert roc_auc([0.3] * 6, [1, 0, 1, 0, 0, 0]).auc == 0.5
    assert roc_auc([0.1, 0.9], [1, 0]).auc == 0.0


def test_roc_curve_shape(rng):
    s = np.round(rng.uniform(size=200), 2)
    y = rng.uniform(size=200) < 0.3
    roc = roc_auc(s, y)
    assert (roc.fpr[0], roc.tpr[0]) == (0.0, 0.0) and (roc.fpr[-1], roc.tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)
    assert roc.thresholds[0] == np.inf and np.all(np.diff(roc.thresholds) < 0)
    assert len(roc.thresholds) == len(np.unique(s)) + 1
    for thr, fpr, tpr in zip(roc.thresholds[1:], roc.fpr[1:], roc.tpr[1:]):
        assert tpr == np.mean(s[y] >= thr) and fpr == np.mean(s[~y] >= thr)


def test_roc_single_class():
    with pytest.raises(ContractError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ContractError):
        roc_auc([0.1, 0.2], [0, 0])
    with pytest.raises(ContractError):
        roc_auc([0.1, 0.2], [0, 1, 1])


def test_roc_matches_pairwise_on_random_pool(rng):
    s = rng.uniform(size=200)
    y = rng.uniform(size=200) < 0.4
    assert abs(roc_auc(s, y).auc - pairwise_auc(s, y)) <= 1e-9


@st.composite
def pools(draw):
    n = draw(st.integers(2, 300))
    levels = draw(st.integers(1, 40))
    s = np.array(draw(st.lists(st.integers(0, levels), min_size=n, max_size=n))) / levels
    y = np.array(draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    y[0], y[-1] = True, False
    return s, y


@given(pools())
@settings(max_examples=100, deadline=None)
def test_roc_equals_pairwise_oracle(pool):
    s, y = pool
    assert abs(roc_auc(s, y).auc - pairwise_auc(s, y)) <= 1e-9


@given(pools())
@settings(max_examples=50, deadline=None)
def test_auc_invariant_under_increasing_transform(pool):
    s, y = pool
    base = roc_auc(s, y).auc
    assert roc_auc(np.exp(3 * s) + 7, y).auc == pytest.approx(base, abs=1e-12)
    assert roc_auc(s ** 3, y).auc == pytest.approx(base, abs=1e-12)


# ---------------------------------------------------------------- false alarms


def test_false_alarm_examples():
    assert false_alarm_rate([0.1] * 10) == 0.0
    assert false_alarm_rate([0.6, 0.4, 0.5, 0.2]) == 0.5
    with pytest.raises(ContractError):
        false_alarm_rate([])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=100, deadline=None)
def test_false_alarm_monotone(scores, t1, t2):
    lo, hi = sorted((t1, t2))
    assert false_alarm_rate(scores, hi) <= false_alarm_rate(scores, lo)


# ---------------------------------------------------------------- end to end report


SMALL = dict(dim=6, n_train_normal=2, n_train_abnormal=2, n_test=3, clips_min=20, clips_max=70,
             anomaly_min=5, anomaly_max=15)


@pytest.fixture
def dataset(tmp_path):
    return generate_synthetic(SyntheticSpec(**SMALL, seed=4), tmp_path / "data")


def fresh_params(dim=6):
    return init_params(NetworkConfig(input_dim=dim, encoder_filters=(8, 4)), rngmod.stream(0, "init"))


def test_evaluate_report(dataset, tmp_path):
    report = evaluate(fresh_params(), dataset, per_video=True)
    entries, _ = load_manifest(dataset)
    test = [e for e in entries if e.split == "test"]
    assert report.n_videos == len(test) == 6
    assert report.n_frames == sum(e.n_frames for e in test)
    assert 0.0 <= report.auc <= 1.0 and 0.0 <= report.false_alarm <= 1.0
    assert len(report.per_video_auc) == 3
    for v in report.videos:
        assert np.all((v.frame_scores > 0) & (v.frame_scores < 1))
        assert v.mask.size == v.frame_scores.size

    write_report(report, tmp_path / "out")
    rows = (tmp_path / "out" / "frame_scores.csv").read_text().splitlines()
    assert rows[0] == "video_id,frame,score,label" and len(rows) == report.n_frames + 1
    metrics = dict(line.split(",") for line in (tmp_path / "out" / "metrics.csv").read_text().splitlines()[1:])
    assert float(metrics["auc"]) == report.auc
    roc_rows = (tmp_path / "out" / "roc_points.csv").read_text().splitlines()
    assert roc_rows[0] == "threshold,fpr,tpr" and len(roc_rows) == len(report.roc.fpr) + 1
    assert (tmp_path / "out" / "per_video_auc.csv").exists()


def test_fresh_model_is_near_chance(tmp_path):
    manifest = generate_synthetic(SyntheticSpec(n_train_normal=1, n_train_abnormal=1), tmp_path)
    cfg = NetworkConfig(input_dim=32, encoder_filters=(64, 16))
    report = evaluate(init_params(cfg, rngmod.stream(0, "init")), manifest)
    assert 0.35 <= report.auc <= 0.65


def test_evaluate_missing_annotation(dataset):
    ann = dataset.parent / "annotations.csv"
    lines = ann.read_text().splitlines()
    ann.write_text("\n".join(l for l in lines if not l.startswith("test_abnormal_001")) + "\n")
    with pytest.raises(ValidationError, match="test_abnormal_001"):
        evaluate(fresh_params(), dataset)


def test_evaluate_frame_count_mismatch(dataset):
    ann = dataset.parent / "annotations.csv"
    lines = ann.read_text().splitlines()
    fixed = []
    for line in lines:
        parts = line.split(",")
        if parts[0] == "test_normal_000":
            parts[2] = str(int(parts[2]) + 16)
        fixed.append(",".join(parts))
    ann.write_text("\n".join(fixed) + "\n")
    with pytest.raises(ValidationError, match="test_normal_000"):
        evaluate(fresh_params(), dataset)


def test_evaluate_errors(dataset, tmp_path):
    with pytest.raises(ValidationError):
        evaluate(fresh_params(), dataset, split="nothing")
    with pytest.raises(ValidationError):
        evaluate(fresh_params(), dataset, annotations_path=tmp_path / "none.csv")
