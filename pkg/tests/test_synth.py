import numpy as np
import pytest

from refquery.errors import EmptyInputError
from refquery.synth import (
    ApplianceSpec,
    HomeSpec,
    default_appliances,
    synth_home,
    write_home_dir,
)
from refquery.timeseries import (
    activation_mask,
    clean_mask,
    extract_on_intervals,
    load_series,
)


def test_zero_appliances_zero_noise_is_base_load():
    spec = HomeSpec(appliances=[], base_load=42.0, noise_std=0.0,
                    duration_s=86400.0, seed=1)
    home = synth_home(spec)
    np.testing.assert_allclose(home.mains.values, 42.0)


def test_determinism_same_seed():
    a = synth_home(HomeSpec(seed=7, duration_s=86400.0))
    b = synth_home(HomeSpec(seed=7, duration_s=86400.0))
    np.testing.assert_array_equal(a.mains.values, b.mains.values)
    for name in a.appliances:
        np.testing.assert_array_equal(a.appliances[name].values,
                                      b.appliances[name].values)
    c = synth_home(HomeSpec(seed=8, duration_s=86400.0))
    assert not np.array_equal(a.mains.values, c.mains.values)


def test_duration_too_short():
    with pytest.raises(EmptyInputError):
        synth_home(HomeSpec(duration_s=100.0))


def test_additive_composition_exact():
    home = synth_home(HomeSpec(seed=3, duration_s=86400.0))
    total = np.zeros(len(home.mains))
    for series in home.appliances.values():
        total += series.values
    residual = home.mains.values - home.noise - home.base_load
    np.testing.assert_allclose(residual, total, rtol=1e-12, atol=1e-9)


def test_energy_conservation():
    home = synth_home(HomeSpec(seed=4, duration_s=86400.0))
    lhs = home.mains.values.sum()
    rhs = home.base_load * len(home.mains) + home.noise.sum() \
        + sum(s.values.sum() for s in home.appliances.values())
    assert abs(lhs - rhs) / abs(rhs) < 1e-3


def test_kettle_spikes_coincide_with_schedule():
    spec = HomeSpec(appliances=[ApplianceSpec("kettle", "spike-kettle",
                                              ((2400.0, 96.0),), 9600.0)],
                    base_load=50.0, noise_std=5.0, duration_s=86400.0, seed=5)
    home = synth_home(spec)
    spikes = home.mains.values > 1000.0
    on = np.zeros(len(home.mains), dtype=bool)
    for s, e in home.schedule["kettle"]:
        on[s:e] = True
    assert spikes.any()
    assert (spikes == on).all()


def test_schedule_roundtrip_through_mask_pipeline():
    home = synth_home(HomeSpec(seed=11, duration_s=2 * 86400.0))
    for name, series in home.appliances.items():
        cleaned = clean_mask(activation_mask(series))
        got = extract_on_intervals(cleaned).intervals
        assert got == home.schedule[name], f"schedule mismatch for {name}"


def test_on_samples_exceed_threshold_margin():
    home = synth_home(HomeSpec(seed=12, duration_s=86400.0))
    for name, series in home.appliances.items():
        for s, e in home.schedule[name]:
            assert series.values[s:e].min() >= 25.0
        off = np.ones(len(series), dtype=bool)
        for s, e in home.schedule[name]:
            off[s:e] = False
        assert series.values[off].max() == 0.0


def test_mains_never_below_max_single_contribution():
    home = synth_home(HomeSpec(seed=13, duration_s=86400.0))
    max_single = np.zeros(len(home.mains))
    for series in home.appliances.values():
        np.maximum(max_single, series.values, out=max_single)
    assert (home.mains.values >= max_single - 1e-9).all()


def test_csv_roundtrip_shared_ingestion_path(tmp_path):
    home = synth_home(HomeSpec(seed=14, duration_s=86400.0))
    write_home_dir(home, tmp_path)
    mains = load_series(tmp_path / "mains.csv", period=8)
    np.testing.assert_allclose(mains.values, home.mains.values)
    kettle = load_series(tmp_path / "kettle.csv", period=8)
    np.testing.assert_allclose(kettle.values, home.appliances["kettle"].values)


def test_default_appliances_cover_archetypes():
    specs = default_appliances()
    assert len(specs) == 5
    assert {s.archetype for s in specs} == {
        "cycling-fridge", "multi-state-washer", "spike-kettle",
        "pulse-microwave", "multi-phase-dishwasher"}


def test_appliance_spec_validation():
    with pytest.raises(ValueError):
        ApplianceSpec("bad", "spike-kettle", ((10.0, 96.0),), 9600.0)
    with pytest.raises(ValueError):
        ApplianceSpec("bad", "spike-kettle", ((100.0, 8.0),), 9600.0)
    with pytest.raises(ValueError):
        ApplianceSpec("bad", "toaster", ((100.0, 96.0),), 9600.0)
