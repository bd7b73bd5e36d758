import json
from itertools import combinations

import numpy as np
import pytest

from affordmotion import metrics
from affordmotion.geometry import AffordanceMap, MotionSequence, PointCloud
from affordmotion.scene_synth import SceneObject, TaskConfig, generate_dataset
from affordmotion.skeleton import DEFAULT_LAYOUT

J = 22


def box_scene():
    """Floor grid on [-2, 2]^2 plus a closed 1 x 1 x 0.5 box spanning x, y in [0.5, 1.5]."""
    g = np.linspace(-2, 2, 81)
    floor = np.array([(x, y, 0.0) for x in g for y in g if not (0.5 <= x <= 1.5 and 0.5 <= y <= 1.5)])
    xs, zs = np.linspace(0.5, 1.5, 21), np.linspace(0, 0.5, 11)
    faces = [[(x, y, 0.5) for x in xs for y in xs]]
    for c in (0.5, 1.5):
        faces.append([(x, c, z) for x in xs for z in zs])
        faces.append([(c, y, z) for y in xs for z in zs])
    box = np.unique(np.round(np.concatenate([np.array(f) for f in faces]), 9), axis=0)
    pts = np.concatenate([floor, box])
    ids = np.r_[np.full(len(floor), -1), np.zeros(len(box), int)]
    target = SceneObject("desk", np.flatnonzero(ids == 0), np.array([1.0, 1.0, 0.25]),
                         boxes=np.array([[[0.5, 0.5, 0.0], [1.5, 1.5, 0.5]]]))
    return PointCloud(pts, object_ids=ids), target


SCENE, TARGET = box_scene()


def standing(xy=(-1.0, -1.0), height=0.0, frames=5):
    """Joints stacked vertically at one spot; feet at the sole offset above ``height``."""
    j = np.zeros((frames, J, 3))
    j[..., :2] = xy
    j[..., 2] = height + np.linspace(0.3, 1.6, J)
    for name in ("left_foot", "right_foot"):
        j[:, DEFAULT_LAYOUT.index(name), 2] = height + metrics.FOOT_OFFSET
    return j


# ---------------------------------------------------------------- goal distance


def test_goal_distance_cases(rng):
    m = np.zeros((3, J, 3))
    m[-1, 0] = [1.0, 1.0, 0.9]
    assert metrics.goal_distance(m, TARGET) == 0.0
    m[-1, 0] = [2.0, 1.0, 0.9]
    assert metrics.goal_distance(MotionSequence(m), TARGET) == pytest.approx(1.0)
    r = rng.normal(size=(7, J, 3))
    expect = np.hypot(r[6, 0, 0] - 1.0, r[6, 0, 1] - 1.0)
    assert metrics.goal_distance(r, TARGET) == pytest.approx(expect, abs=1e-12)


# ---------------------------------------------------------------- APD


def test_apd_trivial_cases(rng):
    a = rng.normal(size=(6, J, 3))
    assert metrics.apd([a, a.copy()]) == 0.0
    assert metrics.apd([a, a + [1.0, 0, 0]]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        metrics.apd([a])


@pytest.mark.parametrize("k", [2, 5, 10])
def test_apd_brute_force(rng, k):
    ms = [rng.normal(size=(4, J, 3)) for _ in range(k)]
    total, pairs = 0.0, 0
    for i in range(k):
        for j in range(i + 1, k):
            acc = 0.0
            for f in range(4):
                for q in range(J):
                    acc += np.sqrt(((ms[i][f, q] - ms[j][f, q]) ** 2).sum())
            total += acc / (4 * J)
            pairs += 1
    assert abs(metrics.apd(ms) - total / pairs) < 1e-6


# ---------------------------------------------------------------- contact


def test_contact_trivial_cases():
    grounded, floating = standing(), standing(height=2.0)
    assert metrics.contact_score([grounded], SCENE) == 100.0
    assert metrics.contact_score([floating], SCENE) == 0.0
    assert metrics.contact_score([grounded, floating], SCENE) == 50.0
    assert metrics.contact_score([standing(xy=(5.0, 5.0))], SCENE) == 0.0  # beyond the floor
    sitting = standing(xy=(1.0, 1.0), height=2.0)
    sitting[2, 0] = [1.0, 1.0, 0.53]
    assert metrics.contact_score([sitting], SCENE) == 100.0
    with pytest.raises(ValueError):
        metrics.contact_score([], SCENE)


# ---------------------------------------------------------------- non-collision


def test_non_collision_free_space():
    assert metrics.non_collision_score([standing()], SCENE) == 100.0


def test_non_collision_joint_below_floor():
    m = standing()
    m[:, 5, 2] = -0.5
    assert metrics.non_collision_score([m], SCENE) == pytest.approx((J - 1) / J * 100)
    m[:, 5, 2] = -0.01   # inside the margin
    assert metrics.non_collision_score([m], SCENE) == 100.0


def test_non_collision_box_interior_oracle(rng):
    # Well inside the box (>= 0.08 from every face) or well outside (> 0.15 away):
    # the ray-cover test must agree with analytic box membership.
    lo, hi = np.array([0.5, 0.5, 0.0]), np.array([1.5, 1.5, 0.5])
    q = rng.uniform([0.2, 0.2, 0.02], [1.8, 1.8, 0.9], size=(4000, 3))
    inner = ((q > lo + 0.08) & (q < hi - 0.08)).all(1)
    gap = np.linalg.norm(np.maximum(0, np.maximum(lo - q, q - hi)), axis=1)
    keep = inner | (gap > 0.15)
    q = q[keep][:J * 40]
    m = q.reshape(40, J, 3)
    mask = metrics.penetration_mask(m, SCENE)
    np.testing.assert_array_equal(mask.reshape(-1), inner[keep][:J * 40])
    assert metrics.non_collision_score([m], SCENE) == pytest.approx(100 * (1 - inner[keep][:J * 40].mean()))


def test_physics_bounds(rng):
    ms = [rng.uniform(-2, 2, size=(5, J, 3)) for _ in range(4)]
    for fn in (metrics.contact_score, metrics.non_collision_score):
        assert 0 <= fn(ms, SCENE) <= 100


# ---------------------------------------------------------------- affordance grounding


def peaked_map(anchor_idx):
    v = np.full((len(SCENE), 6), 1e-3)
    for j, i in enumerate(anchor_idx):
        v[i, j] = 1.0
    return AffordanceMap(v)


def test_grounding_on_target():
    tgt = TARGET.point_indices[:6]
    assert metrics.affordance_grounding(peaked_map(tgt), SCENE, TARGET) == (0.0, 0.0, 0.0)


def test_grounding_pelvis_offset():
    off = int(np.flatnonzero(np.all(np.isclose(SCENE.positions, [1.0, -0.5, 0.0]), 1))[0])
    idx = list(TARGET.point_indices[:6])
    idx[DEFAULT_LAYOUT.affordance_pelvis_slot] = off
    mn, pel, al = metrics.affordance_grounding(peaked_map(idx), SCENE, TARGET)
    assert mn == 0.0 and pel == pytest.approx(1.0) and al == pytest.approx(1.0 / 6)


def test_grounding_brute_force(rng):
    v = rng.random((len(SCENE), 6))
    tpts = SCENE.positions[TARGET.point_indices]
    d = []
    for j in range(6):
        a = SCENE.positions[np.argmax(v[:, j])]
        d.append(min(np.linalg.norm(a - p) for p in tpts))
    got = metrics.affordance_grounding(AffordanceMap(v), SCENE, TARGET)
    np.testing.assert_allclose(got, (min(d), d[DEFAULT_LAYOUT.affordance_pelvis_slot], np.mean(d)), atol=1e-12)


# ---------------------------------------------------------------- FID


def test_fid_identity_symmetry_offset(rng):
    x = rng.normal(size=(600, 8))
    assert abs(metrics.fid(x, x)) <= 1e-6
    y = rng.normal(size=(500, 8)) * 1.3
    assert metrics.fid(x, y) == pytest.approx(metrics.fid(y, x), rel=1e-9)
    e1 = np.eye(8)[0]
    assert metrics.fid(x, x + e1) == pytest.approx(1.0, abs=1e-3)
    assert metrics.fid(x, y) >= 0


def test_fid_matches_scipy_sqrtm(rng):
    from scipy.linalg import sqrtm
    a, b = rng.normal(size=(300, 5)), rng.normal(size=(300, 5)) @ rng.normal(size=(5, 5))
    ca, cb = np.cov(a, rowvar=False) + 1e-6 * np.eye(5), np.cov(b, rowvar=False) + 1e-6 * np.eye(5)
    expect = ((a.mean(0) - b.mean(0)) ** 2).sum() + np.trace(ca + cb - 2 * sqrtm(ca @ cb).real)
    assert metrics.fid(a, b) == pytest.approx(expect, rel=1e-6)


def test_fid_rejects_nonfinite():
    with pytest.raises(ValueError):
        metrics.fid(np.array([[np.nan, 1.0], [0, 0]]), np.zeros((2, 2)))


# ---------------------------------------------------------------- R-precision


def test_r_precision_perfect_and_nesting(rng):
    f = rng.normal(size=(50, 16))
    assert metrics.r_precision(f, f)[1] == 1.0
    r = metrics.r_precision(rng.normal(size=(50, 16)), rng.normal(size=(50, 16)))
    assert r[3] >= r[2] >= r[1]
    with pytest.raises(ValueError):
        metrics.r_precision(f[:10], f[:10], pool_size=16)


def test_r_precision_null_model(rng):
    n, p = 2000, 1 / 16
    r = metrics.r_precision(rng.normal(size=(n, 8)), rng.normal(size=(n, 8)))
    ci = 4 * np.sqrt(p * (1 - p) / n)
    assert abs(r[1] - p) <= ci


# ---------------------------------------------------------------- diversity family


def test_diversity_family_identical():
    f = np.ones((20, 4))
    assert metrics.diversity(f, 10) == 0.0
    assert metrics.multimodality([f[:5], f[5:10]], 4) == 0.0
    assert metrics.multimodal_dist(f, f) == 0.0


def test_diversity_exhaustive_enumeration():
    two = np.array([[0.0, 0.0], [1.0, 0.0]])
    assert metrics.diversity(two, subset_size=300) == 1.0
    three = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    expect = np.mean([np.linalg.norm(three[i] - three[j]) for i, j in combinations(range(3), 2)])
    assert metrics.diversity(three, subset_size=300) == pytest.approx(expect)


def test_random_pairs_unranking(rng):
    for n in (5, 17, 40):
        total = n * (n - 1) // 2
        p = metrics._random_pairs(n, total - 1, rng)
        assert (p[:, 0] < p[:, 1]).all() and p.max() < n
        assert len({tuple(x) for x in p}) == total - 1


def test_diversity_seed_determinism(rng):
    f = rng.normal(size=(100, 8))
    assert metrics.diversity(f, 50, seed=3) == metrics.diversity(f, 50, seed=3)
    with pytest.raises(ValueError):
        metrics.diversity(f[:1])
    with pytest.raises(ValueError):
        metrics.multimodality([f[:1]])


def test_multimodal_dist_oracle(rng):
    m, t = rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
    assert metrics.multimodal_dist(m, t) == pytest.approx(np.mean([np.linalg.norm(a - b) for a, b in zip(m, t)]))


# ---------------------------------------------------------------- reporting


def test_confidence_interval_formula():
    v = [1.0, 2.0, 3.0, 4.0, 5.0]
    assert metrics.confidence_interval(v) == pytest.approx(1.96 * np.std(v) / np.sqrt(5))


def test_report_formats():
    runs = [{"fid": 0.5 + 0.1 * i, "contact": 90.0} for i in range(5)]
    rep = metrics.MetricReport.from_repeats(runs)
    text = rep.to_text()
    assert "5 repeats" in text and "fid" in text and "0.700 ± 0.124" in text and "90.000 ± 0.000" in text
    data = json.loads(rep.to_json())
    assert data["repeats"] == 5 and data["metrics"]["fid"]["values"] == [r["fid"] for r in runs]
    rows = rep.to_csv().strip().splitlines()
    assert rows[0].startswith("metric,mean,ci95,repeat_0") and len(rows) == 3
    with pytest.raises(ValueError):
        metrics.MetricReport.from_repeats([{"fid": float("nan")}])


# ---------------------------------------------------------------- feature extractors


def test_extractor_overfit_and_width(small_samples):
    pairs = small_samples[:8]
    cfg = metrics.ExtractorConfig(steps=150, batch_size=8, hidden=64)
    ex = metrics.train_feature_extractors(pairs, cfg)
    assert ex.motion_features([s.motion for s in pairs]).shape == (8, 512)
    assert metrics.triplet_accuracy(ex, [s.motion for s in pairs], [s.prompt for s in pairs]) == 1.0
    again = metrics.train_feature_extractors(pairs, cfg)
    assert ex.history == again.history


def test_evaluate_generated_protocol(small_samples):
    ex = metrics.train_feature_extractors(small_samples, metrics.ExtractorConfig(steps=5, hidden=16))
    rounds = [[s.motion for s in small_samples] for _ in range(5)]
    maps = [s.affordance for s in small_samples]
    rep = metrics.evaluate_generated(small_samples, rounds, ex, repeats=5, affordances=maps, r_pool=4)
    assert rep.repeats == 5
    success = 100 * np.mean([metrics.goal_distance(s.motion, s.target) <= 0.5 for s in small_samples])
    assert rep.mean("fid") <= 1e-6 and rep.mean("goal_success_0.5m") == success
    for name in ("contact", "non_collision", "min_dist", "r_precision_top1", "diversity", "multimodal_dist"):
        assert np.isfinite(rep.mean(name))
    with pytest.raises(ValueError):
        metrics.evaluate_generated(small_samples, rounds[:2], repeats=5)


def test_extractor_held_out_triplets():
    data = generate_dataset(260, seed=11, task_config=TaskConfig(n_frames=24, frame_rate=10), n_points=64)
    train, held_out = data[:200], data[200:]
    ex = metrics.train_feature_extractors(train, metrics.ExtractorConfig(steps=300, hidden=64))
    assert metrics.triplet_accuracy(ex, [s.motion for s in held_out], [s.prompt for s in held_out]) >= 0.8
