import numpy as np
import pytest

from batchsoc.scenario import (
    DESIGN,
    TEST,
    UncertaintySpec,
    nominal_scenario,
    noise_covariance,
    read_scenarios_csv,
    sample_scenarios,
    split,
    write_scenarios_csv,
)


def test_degenerate_spec_reproduces_nominal(reactor):
    spec = UncertaintySpec(fraction=0.0, noise_std_conc=0, noise_std_vol=0, noise_std_u=0)
    nom = nominal_scenario(reactor)
    for s in sample_scenarios(spec, 5, reactor):
        assert np.all(s.param_offsets == 0)
        assert np.all(s.noise_y == 0) and np.all(s.noise_u == 0)
        assert np.array_equal(s.x0, nom.x0)


def test_offset_statistics(reactor):
    scs = sample_scenarios(UncertaintySpec(seed=7, noise_std_conc=0, noise_std_vol=0, noise_std_u=0), 10000, reactor)
    off = np.array([s.param_offsets for s in scs])
    for j in range(5):
        assert abs(off[:, j].mean()) <= 0.004
        assert 0.095 <= np.max(np.abs(off[:, j])) <= 0.105
    assert np.all(off[:, 5] == 0)  # inlet concentration not perturbed by default


def test_case1_split(reactor):
    scs = sample_scenarios(UncertaintySpec(), 200, reactor, n_design=100)
    design, test = split(scs)
    assert len(design) == len(test) == 100
    assert all(s.tag == DESIGN for s in scs[:100]) and all(s.tag == TEST for s in scs[100:])
    assert [s.id for s in scs] == list(range(1, 201))


def test_same_seed_same_draws_and_prefix_stability(reactor):
    a = sample_scenarios(UncertaintySpec(seed=3), 20, reactor)
    b = sample_scenarios(UncertaintySpec(seed=3), 10, reactor)
    for x, y in zip(a, b):
        assert np.array_equal(x.param_offsets, y.param_offsets)
        assert np.array_equal(x.noise_y, y.noise_y)
    c = sample_scenarios(UncertaintySpec(seed=4), 1, reactor)[0]
    assert not np.array_equal(a[0].param_offsets, c.param_offsets)


def test_noise_scales_per_channel(reactor):
    scs = sample_scenarios(UncertaintySpec(seed=1), 2000, reactor)
    ny = np.array([s.noise_y.reshape(20, 3) for s in scs]).reshape(-1, 3)
    nu = np.array([s.noise_u for s in scs]).ravel()
    assert np.allclose(ny.std(axis=0), [0.03, 0.03, 0.1], rtol=0.02)
    assert nu.std() == pytest.approx(2.5e-5, rel=0.02)


def test_noise_covariance_layout(reactor):
    w = noise_covariance(UncertaintySpec(), reactor)
    assert w.shape == (81,)
    assert w[0] == 0
    assert np.allclose(w[1:5], [0.03**2, 0.03**2, 0.1**2, 2.5e-5**2])
    assert np.array_equal(w[1:].reshape(20, 4), np.tile(w[1:5], (20, 1)))
    zero = noise_covariance(UncertaintySpec(noise_std_conc=0, noise_std_vol=0, noise_std_u=0), reactor)
    assert np.all(zero == 0)


def test_overrides_and_validation(reactor):
    names = ("c_A0", "c_B0", "V0", "k1", "k2", "c_B_in")
    spec = UncertaintySpec(perturbed_params=names, fraction=0.1, overrides={"c_B_in": 0.2}, seed=2)
    off = np.array([s.param_offsets for s in sample_scenarios(spec, 2000, reactor)])
    assert 0.15 < np.max(np.abs(off[:, 5])) <= 0.2
    assert np.max(np.abs(off[:, :5])) <= 0.1
    with pytest.raises(ValueError):
        UncertaintySpec(fraction=-0.1)
    with pytest.raises(ValueError):
        UncertaintySpec(noise_std_u=-1)
    with pytest.raises(ValueError):
        UncertaintySpec(overrides={"c_B_in": 0.2})
    with pytest.raises(ValueError):
        sample_scenarios(UncertaintySpec(), 0, reactor)


def test_csv_roundtrip_is_exact(reactor, tmp_path):
    scs = sample_scenarios(UncertaintySpec(seed=9), 4, reactor, n_design=2)
    path = tmp_path / "s.csv"
    write_scenarios_csv(path, scs, reactor)
    back = read_scenarios_csv(path, reactor)
    for a, b in zip(scs, back):
        assert a.id == b.id and a.tag == b.tag
        assert np.array_equal(a.param_offsets, b.param_offsets)
        assert np.array_equal(a.noise_y, b.noise_y) and np.array_equal(a.noise_u, b.noise_u)
        assert np.array_equal(a.x0, b.x0)
