import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdtlearn.data import (
    DomainDataset,
    SynthConfig,
    augment,
    check_disjoint,
    dumps_binary,
    dumps_text,
    generate,
    load,
    loads_binary,
    loads_text,
    sample_triplets,
    store,
)
from cdtlearn.errors import ContractError, ParseError


def same_domains(a, b):
    return len(a) == len(b) and all(x.equals(y) for x, y in zip(a, b))


def test_config_validation():
    with pytest.raises(ContractError):
        SynthConfig(n_domains=0)
    with pytest.raises(ContractError):
        SynthConfig(identity_noise=-1)


def test_generate_shapes_and_disjoint_labels():
    doms = generate(SynthConfig())
    assert [d.domain_id for d in doms] == [0, 1, 2]
    for d in doms:
        assert d.features.shape == (200, 16)
        assert all(len(v) == 10 for v in d.index.values())
    check_disjoint(doms)


def test_check_disjoint_rejects_overlap():
    a = DomainDataset(0, np.zeros((2, 2)), [1, 2])
    b = DomainDataset(1, np.zeros((2, 2)), [2, 3])
    with pytest.raises(ContractError):
        check_disjoint([a, b])


def test_zero_noise_and_identity_transform():
    cfg = SynthConfig(identity_noise=0.0, rotate=False, domain_scale_range=(1.0, 1.0), domain_shift=0.0)
    for d in generate(cfg):
        for idx in d.index.values():
            assert np.all(d.features[idx] == d.features[idx[0]])


def test_generate_is_deterministic():
    a, b = generate(SynthConfig(seed=9)), generate(SynthConfig(seed=9))
    assert same_domains(a, b)
    assert dumps_text(a) == dumps_text(b)
    assert not same_domains(a, generate(SynthConfig(seed=10)))


def test_rotation_conjugates_covariance():
    # two domains share the raw distribution; the second applies a fixed rotation
    cfg = SynthConfig(n_domains=2, identities_per_domain=50, samples_per_identity=20, input_dim=3,
                      rotate=True, domain_scale_range=(1.0, 1.0), domain_shift=0.0, family_spread=0.0)
    doms, tfs = generate(cfg, return_transforms=True)
    c0 = np.cov(doms[0].features.T)
    c1 = np.cov(doms[1].features.T)
    r = tfs[1].matrix @ tfs[0].matrix.T  # maps domain 0 coordinates to domain 1
    assert np.max(np.abs(r @ c0 @ r.T - c1)) < 0.25 * np.max(np.abs(c0))


def test_families_are_shared_across_domains():
    cfg = SynthConfig(n_domains=2, identity_noise=0.0, family_spread=0.0, rotate=False,
                      domain_scale_range=(1.0, 1.0), domain_shift=0.0)
    a, b = generate(cfg)
    np.testing.assert_array_equal(a.features, b.features)
    assert not np.intersect1d(a.labels, b.labels).size


def test_augment_trivial_and_span(rng):
    x = rng.normal(size=8)
    np.testing.assert_array_equal(augment(x, rng, sigma=0.0, span=(0, 0)), x)
    out = augment(x, rng, sigma=0.0, span=(2, 5))
    assert np.all(out[2:5] == 0) and np.all(out[:2] == x[:2]) and np.all(out[5:] == x[5:])


def test_augment_default_differs(rng):
    x = rng.normal(size=8)
    assert all(not np.array_equal(augment(x, rng), x) for _ in range(100))


def test_sampler_full_batch_covers_every_identity(rng):
    ds = generate(SynthConfig(n_domains=1))[0]
    batch = sample_triplets(ds, 20, rng)
    assert sorted(batch.anchor_labels) == sorted(ds.identities)
    assert np.all(batch.anchor_labels != batch.negative_labels)
    assert np.all(batch.anchor_index != batch.positive_index)
    assert np.all(ds.labels[batch.positive_index] == batch.anchor_labels)
    assert np.all(ds.labels[batch.negative_index] == batch.negative_labels)
    x, y = batch.stacked()
    assert x.shape == (60, 16) and y.shape == (60,)


def test_sampler_shortfall_is_named(rng):
    ds = generate(SynthConfig(n_domains=1, identities_per_domain=5))[0]
    with pytest.raises(ContractError, match="3 short"):
        sample_triplets(ds, 8, rng)
    with pytest.raises(ContractError):
        sample_triplets(DomainDataset(0, np.zeros((3, 2)), [1, 1, 1]), 1, rng)


def test_single_sample_identity_gets_augmented_positive(rng):
    ds = DomainDataset(0, rng.normal(size=(3, 6)), [0, 1, 2])
    batch = sample_triplets(ds, 3, rng)
    assert np.all(batch.positive_index == -1)
    assert not np.any(np.all(batch.positives == batch.anchors, axis=1))


def test_sampler_is_class_uniform():
    ds = generate(SynthConfig(n_domains=1))[0]
    rng = np.random.default_rng(0)
    counts = np.zeros(20)
    n = 10_000
    for _ in range(n):
        for c in sample_triplets(ds, 4, rng).anchor_labels:
            counts[c] += 1
    p = 4 / 20
    bound = 3 * np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < bound)


def test_text_round_trip_and_empty(tmp_path):
    doms = generate(SynthConfig(identities_per_domain=3, samples_per_identity=2))
    store(tmp_path / "d.txt", doms)
    assert same_domains(load(tmp_path / "d.txt"), doms)
    assert loads_text(dumps_text([])) == []


def test_binary_round_trip(tmp_path):
    doms = generate(SynthConfig(identities_per_domain=3, samples_per_identity=2))
    store(tmp_path / "d.bin", doms)
    assert (tmp_path / "d.bin").read_bytes()[:4] == b"CDTB"
    assert same_domains(load(tmp_path / "d.bin"), doms)
    assert loads_binary(dumps_binary([])) == []


def test_hand_written_fixture():
    text = "CDTDATA 1 dim=2 domains=4\n4,7,0.5,-1.25\n4,7,1e-3,2\n"
    (ds,) = loads_text(text)
    assert ds.domain_id == 4
    np.testing.assert_array_equal(ds.features, [[0.5, -1.25], [0.001, 2.0]])
    np.testing.assert_array_equal(ds.labels, [7, 7])


@pytest.mark.parametrize("text, line", [
    ("", 1),
    ("HELLO 1 dim=2 domains=0\n", 1),
    ("CDTDATA 1 dim=2 domains=0\n0,1,0.5\n", 2),
    ("CDTDATA 1 dim=2 domains=0\n0,1,0.5,1\n0,1,abc,1\n", 3),
    ("CDTDATA 1 dim=2 domains=0\n5,1,0.5,1\n", 2),
])
def test_parse_errors_carry_line(text, line):
    with pytest.raises(ParseError) as info:
        loads_text(text)
    assert info.value.line == line


def test_parse_error_offset_points_at_bad_float():
    with pytest.raises(ParseError) as info:
        loads_text("CDTDATA 1 dim=2 domains=0\n0,1,0.5,zz\n")
    assert info.value.offset == len("0,1,0.5,") + 1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=2, max_size=12))
def test_text_round_trip_is_exact_for_any_float(values):
    x = np.array(values[: len(values) // 2 * 2]).reshape(-1, 2)
    ds = DomainDataset(3, x, np.arange(len(x)))
    (back,) = loads_text(dumps_text([ds]))
    assert back.equals(ds)
    (back,) = loads_binary(dumps_binary([ds]))
    assert back.equals(ds)
