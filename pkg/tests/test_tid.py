import math

import numpy as np
import pytest

from normbench.norm import MaskedBatch
from normbench.tid import (
    DENOM_GUARD, FeatureProbe, PopulationSnapshot, TIDReport, apply_snapshot, compute_tid,
    deviation_curves, estimate_population, measure_tid, tid_terms,
)

from oracles import tid_direct


def stream(rng, n_batches, batch, mean, scale=1.0):
    mean = np.asarray(mean, dtype=np.float64)
    return [mean + scale * rng.standard_normal((batch, len(mean))) for _ in range(n_batches)]


def probe(d=3, k=2, seed=0):
    r = np.random.default_rng(seed)
    return FeatureProbe(d, [None] + [r.standard_normal((d, d)) for _ in range(k - 1)])


def test_one_batch_snapshot_equals_its_statistics(rng):
    x = rng.standard_normal((32, 3)) * 2 + 1
    snap = estimate_population(FeatureProbe(3), [x])
    np.testing.assert_allclose(snap.means[0], x.mean(axis=0), atol=1e-14)
    np.testing.assert_allclose(snap.stds[0], x.std(axis=0), atol=1e-14)
    assert snap.provenance == "exact-average"


def test_duplicated_dataset_same_snapshot(rng):
    data = stream(rng, 5, 16, [0.0, 1.0, -1.0])
    a = estimate_population(probe(), data)
    b = estimate_population(probe(), data * 3)
    for m1, m2 in zip(a.means, b.means):
        np.testing.assert_allclose(m1, m2, rtol=0, atol=1e-14)
    for s1, s2 in zip(a.stds, b.stds):
        np.testing.assert_allclose(s1, s2, rtol=0, atol=1e-14)


def test_law_of_large_numbers_stream(rng):
    scale = 0.25
    se = scale / math.sqrt(200 * 64)
    snap = estimate_population(FeatureProbe(2), stream(rng, 200, 64, [0.0, 2.0], scale=scale))
    err = np.abs(snap.means[0] - [0.0, 2.0]).max()
    assert err < 3 * se and err < 1e-2


def test_estimation_leaves_ema_untouched(rng):
    p = FeatureProbe(3)
    before = p.layers[0].state.running_mean.copy(), p.layers[0].state.update_count
    estimate_population(p, stream(rng, 4, 8, [1, 2, 3]))
    np.testing.assert_array_equal(p.layers[0].state.running_mean, before[0])
    assert p.layers[0].state.update_count == before[1]
    assert p.mode == "train"


def test_empty_dataset():
    with pytest.raises(ValueError):
        estimate_population(FeatureProbe(2), [])


def test_single_full_batch_zero_tid(rng):
    x = rng.standard_normal((50, 3)) * 4 - 2
    rep = measure_tid(probe(), [x])
    for _, m, v in rep.per_layer:
        assert m < 1e-6 and v < 1e-6


def test_hand_case_matches_direct_formula():
    # batch mean [0.3, -0.4], batch std [1, 1]
    x = np.array([[1.3, 0.6], [-0.7, -1.4]])
    snap = PopulationSnapshot([np.zeros(2)], [np.ones(2)])
    rep = compute_tid(FeatureProbe(2), [x], snap)
    assert rep.per_layer[0][1] == pytest.approx(0.5 / math.sqrt(2), abs=1e-6)
    assert rep.per_layer[0][2] == pytest.approx(0.0, abs=1e-12)
    m, v = tid_direct([[0.3, -0.4]], [[1.0, 1.0]], [0.0, 0.0], [1.0, 1.0])
    assert rep.per_layer[0][1] == pytest.approx(m, abs=1e-12)


def test_multi_batch_matches_direct_formula(rng):
    data = stream(rng, 6, 10, [1.0, -1.0, 0.5], scale=2.0)
    snap = PopulationSnapshot([np.array([0.9, -1.1, 0.4])], [np.array([1.8, 2.1, 1.9])])
    rep = compute_tid(FeatureProbe(3), data, snap)
    m, v = tid_direct([b.mean(axis=0) for b in data], [b.std(axis=0) for b in data], snap.means[0], snap.stds[0])
    assert rep.per_layer[0][1] == pytest.approx(m, rel=1e-12)
    assert rep.per_layer[0][2] == pytest.approx(v, rel=1e-12)


@pytest.mark.parametrize("c", [10.0, 3.7, 100.0])
def test_scale_invariance(rng, c):
    # the 1e-8 denominator guard perturbs invariance by about 1e-8 / |sigma|
    data = stream(rng, 8, 16, [1.0, -2.0, 0.5], scale=3.0)
    a = measure_tid(probe(k=3), data)
    b = measure_tid(probe(k=3), [c * x for x in data])
    for (_, m1, v1), (_, m2, v2) in zip(a.per_layer, b.per_layer):
        assert abs(m1 - m2) < 1e-9 and abs(v1 - v2) < 1e-9


def test_scale_invariance_exact_without_guard(rng):
    bm, bv, mu, sd = rng.standard_normal(4), rng.uniform(0.1, 2, 4), rng.standard_normal(4), rng.uniform(0.1, 2, 4)
    for c in (1e-3, 10.0, 1e4):
        a = tid_terms(bm, bv, mu, sd, guard=0.0)
        b = tid_terms(c * bm, c * c * bv, c * mu, c * sd, guard=0.0)
        assert abs(a[0] - b[0]) < 1e-12 and abs(a[1] - b[1]) < 1e-12


def test_zero_law_repeated_batch(rng):
    x = rng.standard_normal((24, 3))
    rep = measure_tid(probe(k=3), [x] * 7)
    assert max(max(m, v) for _, m, v in rep.per_layer) < 1e-6


def test_layer_misalignment(rng):
    snap = PopulationSnapshot([np.zeros(3)] * 2, [np.ones(3)] * 2)
    with pytest.raises(ValueError):
        compute_tid(FeatureProbe(3), [rng.standard_normal((4, 3))], snap)


def test_report_invariants(rng):
    rep = measure_tid(probe(k=4), stream(rng, 5, 8, [0, 1, 2]))
    ms = [m for _, m, _ in rep.per_layer]
    vs = [v for _, _, v in rep.per_layer]
    assert all(t >= 0 for t in ms + vs)
    assert rep.avg_mean_tid == pytest.approx(np.mean(ms), rel=1e-15)
    assert rep.avg_var_tid == pytest.approx(np.mean(vs), rel=1e-15)
    assert rep.last_layer_total_tid == pytest.approx(ms[-1] + vs[-1], rel=1e-15)
    assert rep.total(1) == ms[1] + vs[1]


def test_tid_terms_guard():
    m, v = tid_terms([1.0], [0.0], [0.0], [0.0])
    assert m == pytest.approx(1 / DENOM_GUARD)


def test_monotone_in_batch_size():
    violations = 0
    for seed in range(20):
        r = np.random.default_rng(seed)
        pool = r.standard_normal((1024, 4)) * [1, 2, 3, 4] + [0, 1, 2, 3]
        tids = []
        for bs in (8, 32, 128):
            data = [pool[i:i + bs] for i in range(0, len(pool), bs)]
            tids.append(measure_tid(FeatureProbe(4), data).avg_mean_tid)
        violations += not (tids[0] >= tids[1] >= tids[2])
    assert violations <= 1


def test_apply_snapshot_installs_statistics(rng):
    p = probe(k=2)
    snap = estimate_population(p, stream(rng, 3, 8, [1, 2, 3]))
    apply_snapshot(p, snap)
    np.testing.assert_allclose(p.layers[1].state.running_var, snap.stds[1] ** 2)
    assert p.layers[1].state.initialized


def test_snapshot_provenance_checked():
    with pytest.raises(ValueError):
        PopulationSnapshot([np.zeros(1)], [np.ones(1)], provenance="guess")


# -- deviation curves -------------------------------------------------------

def test_deviation_single_batch_zero(rng):
    x = rng.standard_normal((20, 3))
    p = FeatureProbe(3)
    curves = deviation_curves(p, [x], estimate_population(p, [x]))
    assert np.all(curves.mean_dev < 1e-12) and np.all(curves.var_dev < 1e-12)


@pytest.mark.parametrize("delta", [0.1, 0.5, 2.0])
def test_deviation_two_point_closed_form(delta):
    base = np.array([[-1.0, -1.0], [1.0, 1.0]])  # mean 0, std 1 per feature
    data = [base + delta, base - delta]
    p = FeatureProbe(2)
    curves = deviation_curves(p, data, estimate_population(p, data))
    # both batches sit delta away from the population mean, whose std is 1
    assert curves.mean_dev[0] == pytest.approx(delta, rel=1e-6)
    assert curves.var_dev[0] == pytest.approx(0.0, abs=1e-12)


def test_deviation_non_negative(rng):
    p = probe(k=3)
    data = stream(rng, 6, 8, [0, 3, -1], scale=2)
    curves = deviation_curves(p, data, estimate_population(p, data))
    assert np.all(curves.mean_dev >= 0) and np.all(curves.var_dev >= 0)


def test_transformer_tid_zero_law():
    from normbench.model import ModelConfig, TransformerEncoder
    from normbench.tasks import TaskSpec, collate, make_task

    spec = TaskSpec("copy", n_train=16, n_valid=4)
    train, _ = make_task(spec, 0)
    model = TransformerEncoder(ModelConfig(max_seq_len=spec.seq_len, dtype="float64"), seed=0)
    rep = measure_tid(model, [collate(train)])
    assert max(max(m, v) for _, m, v in rep.per_layer) < 1e-6
    assert len(rep.per_layer) == 2 * 2 + 1
