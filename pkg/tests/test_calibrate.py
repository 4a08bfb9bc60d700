import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geocal import calibrate
from geocal.calibrate import GpclConfig, PrototypeSet, build_prototypes, build_sampler, draw_batch, gpcl_perturb
from geocal.fedstats import extract_shape
from geocal.synthdata import ClientDataset


def shape_of(cov, class_id=0, mean=None):
    cov = np.asarray(cov, float)
    return extract_shape(np.zeros(cov.shape[0]) if mean is None else mean, cov, 100, class_id)


def dataset(labels, dim=2, num_classes=None, seed=0):
    labels = np.asarray(labels, dtype=np.int64)
    x = np.random.default_rng(seed).standard_normal((labels.size, dim))
    return ClientDataset(0, 0, x, labels, np.zeros(labels.size, np.int64), num_classes or int(labels.max()) + 1)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


# --- GPCL ---------------------------------------------------------------------


def test_zero_spread_shape_is_identity():
    x = np.array([0.3, -1.2, 2.0])
    out = gpcl_perturb(x, shape_of(np.zeros((3, 3))), GpclConfig(), np.random.default_rng(0))
    assert np.array_equal(out, x)


def test_disabled_is_identity():
    x = np.array([0.3, -1.2])
    rng = np.random.default_rng(0)
    out = gpcl_perturb(x, shape_of(np.diag([4.0, 1.0])), GpclConfig(enabled=False), rng)
    assert np.array_equal(out, x)
    # no draws consumed
    assert rng.random() == np.random.default_rng(0).random()


def test_perturbations_follow_shape_covariance():
    shape = shape_of(np.diag([4.0, 1.0]))
    out = gpcl_perturb(np.zeros((50_000, 2)), shape, GpclConfig(), np.random.default_rng(1))
    assert rel(np.cov(out.T, bias=True), np.diag([4.0, 1.0])) < 0.05
    assert np.abs(out.mean(axis=0)).max() < 0.05


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), dim=st.integers(2, 6), scale=st.floats(0.25, 2.0), k=st.integers(1, 6))
def test_perturbation_distribution_property(seed, dim, scale, k):
    k = min(k, dim)
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((dim, dim))
    shape = shape_of(f @ f.T)
    n = 50_000
    out = gpcl_perturb(np.zeros((n, dim)), shape, GpclConfig(top_k=k, scale=scale), rng)
    u, lam = shape.eigenvectors[:, :k], shape.eigenvalues[:k]
    target = scale**2 * (u * lam) @ u.T
    assert rel(np.cov(out.T, bias=True), target) < 0.05
    sigma = np.sqrt(np.diag(target))
    assert (np.abs(out.mean(axis=0)) < 3 * sigma / np.sqrt(n) + 1e-12).all()


def test_stack_gets_independent_draws():
    out = gpcl_perturb(np.zeros((2, 2)), shape_of(np.eye(2)), GpclConfig(), np.random.default_rng(0))
    assert not np.array_equal(out[0], out[1])


def test_gpcl_errors():
    shape = shape_of(np.eye(3))
    with pytest.raises(ValueError):
        gpcl_perturb(np.zeros(2), shape, GpclConfig(), np.random.default_rng(0))
    bad = shape_of(np.eye(2))
    object.__setattr__(bad, "eigenvalues", np.array([np.inf, 1.0]))
    with pytest.raises(ValueError):
        gpcl_perturb(np.zeros(2), bad, GpclConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        GpclConfig(top_k=0)
    with pytest.raises(ValueError):
        GpclConfig(scale=0.0)
    with pytest.raises(ValueError):
        GpclConfig(top_k=5).rank_for(3)


# --- sampler ----------------------------------------------------------------------


def test_inverse_frequency_arithmetic():
    s = build_sampler({0: 10, 1: 5})
    assert s.class_weights == {0: 1.0, 1: 2.0}
    assert s.class_probs[0] == pytest.approx(1 / 3, abs=1e-15)
    assert s.class_probs[1] == pytest.approx(2 / 3, abs=1e-15)


def test_uniform_counts_uniform_probs():
    s = build_sampler({c: 7 for c in range(5)})
    assert all(p == pytest.approx(0.2, abs=1e-15) for p in s.class_probs.values())


@given(counts=st.dictionaries(st.integers(0, 30), st.integers(0, 500), min_size=1).filter(lambda d: any(d.values())))
def test_sampler_invariants(counts):
    s = build_sampler(counts)
    present = {c: n for c, n in counts.items() if n > 0}
    assert abs(sum(s.class_probs.values()) - 1) < 1e-12
    n_max = max(present.values())
    for c, n in present.items():
        assert s.class_weights[c] == n_max / n
    assert set(s.class_probs) == set(present)


def test_sampler_frequencies_converge():
    ds = dataset([0] * 100 + [1])
    s = calibrate.sampler_for(ds)
    _, y = calibrate.sample_sources(s, ds, None, 200_000, np.random.default_rng(0))
    for c in (0, 1):
        assert abs((y == c).mean() - s.class_probs[c]) < 0.01


def test_unbalanced_sampler_follows_counts():
    s = build_sampler({0: 30, 1: 10}, balanced=False)
    assert s.class_probs == {0: 0.75, 1: 0.25}


def test_prototypes_merge_as_single_samples():
    protos = PrototypeSet(0, np.array([1, 2, 2]), np.array([1, 1, 2]), np.zeros((3, 2)))
    s = build_sampler({0: 4, 1: 2}, protos)
    assert s.local_counts == {0: 4, 1: 2}
    assert s.proto_counts == {1: 1, 2: 2}
    # merged counts {0: 4, 1: 3, 2: 2}
    assert s.class_weights == {0: 1.0, 1: 4 / 3, 2: 2.0}


def test_prototype_only_class_gets_weight_n_max():
    protos = PrototypeSet(0, np.array([3]), np.array([1]), np.zeros((1, 2)))
    s = build_sampler({0: 6, 1: 2}, protos)
    assert s.class_weights[3] == 6.0


def test_sampler_needs_something():
    with pytest.raises(ValueError):
        build_sampler({0: 0})


# --- batches ------------------------------------------------------------------------


def test_empty_batch():
    ds = dataset([0, 1])
    x, y = draw_batch(calibrate.sampler_for(ds), ds, None, {}, GpclConfig(), 0, np.random.default_rng(0))
    assert x.shape == (0, 2) and y.shape == (0,)


def test_fully_degenerate_batch():
    ds = dataset([0])
    shapes = {0: shape_of(np.zeros((2, 2)))}
    x, y = draw_batch(calibrate.sampler_for(ds), ds, None, shapes, GpclConfig(), 16, np.random.default_rng(0))
    assert (x == ds.embeddings[0]).all() and (y == 0).all()


def test_batch_class_frequencies():
    ds = dataset([0] * 90 + [1] * 10)
    sampler = calibrate.sampler_for(ds)
    shapes = {c: shape_of(np.eye(2), c) for c in (0, 1)}
    rng = np.random.default_rng(3)
    ys = np.concatenate([draw_batch(sampler, ds, None, shapes, GpclConfig(), 32, rng)[1] for _ in range(10_000)])
    for c in (0, 1):
        assert abs((ys == c).mean() - sampler.class_probs[c]) < 0.01


def test_bypass_is_bit_identical_to_plain_sampling():
    ds = dataset([0] * 5 + [1] * 3 + [2], dim=3)
    sampler = calibrate.sampler_for(ds)
    shapes = {c: shape_of(np.eye(3), c) for c in range(3)}
    a = draw_batch(sampler, ds, None, shapes, GpclConfig(enabled=False), 64, np.random.default_rng(9))
    b = calibrate.sample_sources(sampler, ds, None, 64, np.random.default_rng(9))
    assert a[0].tobytes() == b[0].tobytes() and np.array_equal(a[1], b[1])


def test_batch_items_come_from_the_dataset_when_bypassed():
    ds = dataset([0, 0, 1, 1, 1])
    x, y = calibrate.sample_sources(calibrate.sampler_for(ds), ds, None, 100, np.random.default_rng(0))
    for row, c in zip(x, y):
        hits = np.flatnonzero((ds.embeddings == row).all(axis=1))
        assert hits.size == 1 and ds.labels[hits[0]] == c


def test_class_without_shape_passes_through():
    ds = dataset([0, 1])
    shapes = {1: shape_of(np.eye(2), 1)}
    x, y = draw_batch(calibrate.sampler_for(ds), ds, None, shapes, GpclConfig(), 50, np.random.default_rng(0))
    assert (x[y == 0] == ds.embeddings[0]).all()
    assert not (x[y == 1] == ds.embeddings[1]).all(axis=1).any()


def test_prototype_share_of_draws():
    ds = dataset([0] * 3)
    protos = PrototypeSet(0, np.array([0]), np.array([1]), np.full((1, 2), 7.0))
    s = calibrate.sampler_for(ds, protos)
    x, _ = calibrate.sample_sources(s, ds, protos, 40_000, np.random.default_rng(0))
    share = (x == 7.0).all(axis=1).mean()
    assert abs(share - 0.25) < 0.01


def test_prototypes_are_perturbed_too():
    ds = dataset([0])
    protos = PrototypeSet(0, np.array([1]), np.array([1]), np.full((1, 2), 7.0))
    shapes = {1: shape_of(np.eye(2), 1)}
    x, y = draw_batch(calibrate.sampler_for(ds, protos), ds, protos, shapes, GpclConfig(), 50, np.random.default_rng(0))
    assert (y == 1).any()
    assert not (x[y == 1] == 7.0).all(axis=1).any()


def test_missing_prototypes_detected():
    ds = dataset([0])
    protos = PrototypeSet(0, np.array([0]), np.array([1]), np.zeros((1, 2)))
    s = calibrate.sampler_for(ds, protos)
    with pytest.raises(ValueError):
        calibrate.sample_sources(s, ds, None, 200, np.random.default_rng(0))


# --- prototypes ------------------------------------------------------------------------


def test_prototype_set_rejects_own_domain():
    with pytest.raises(ValueError):
        PrototypeSet(1, np.array([0]), np.array([1]), np.zeros((1, 2)))


def test_build_prototypes_excludes_owner():
    means = {(c, d): np.full(2, 10.0 * d + c) for c in range(3) for d in range(4)}
    ps = build_prototypes(means, 2, 2)
    assert len(ps) == 9 and not (ps.domain_ids == 2).any()
    for c, d, v in zip(ps.class_ids, ps.domain_ids, ps.vectors):
        assert np.array_equal(v, means[(int(c), int(d))])


def test_prototype_codec_round_trip():
    rng = np.random.default_rng(0)
    ps = PrototypeSet(3, np.array([0, 5, 5]), np.array([0, 1, 2]), rng.standard_normal((3, 4)))
    back = calibrate.decode_prototypes(calibrate.encode_prototypes(ps), 4)
    assert back.owner_domain == 3
    assert np.array_equal(back.class_ids, ps.class_ids) and np.array_equal(back.domain_ids, ps.domain_ids)
    assert back.vectors.tobytes() == ps.vectors.tobytes()
    empty = build_prototypes({}, 0, 4)
    assert len(calibrate.decode_prototypes(calibrate.encode_prototypes(empty), 4)) == 0
    with pytest.raises(ValueError):
        calibrate.decode_prototypes(calibrate.encode_prototypes(ps)[:-1], 4)
