from dataclasses import replace

import numpy as np
import pytest

from dpfb.data import (SMALL_SYNTH, DataError, SynthConfig, TimeSeriesDataset, denormalize, domain_split,
                       driver_schedule, fit_stats, load_csv, mfp_schema, normalize, normalize_for_training,
                       read_schema, simulate, synth_generate, window, with_domain, write_csv, write_schema)


def small(rng, L=30, n_x=2, n_y=3):
    return TimeSeriesDataset(rng.normal(size=(L, n_x)), rng.normal(size=(L, n_y)),
                             [f"a{i}" for i in range(n_x)], [f"b{i}" for i in range(n_y)],
                             aux={"setpoint": rng.choice([0.0208, 0.0278, 0.0347, 0.0417], L)})


# -- CSV ----------------------------------------------------------------------

def test_three_row_file_exact(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("u,v,w\n1.5,2,-3\n0,0.25,7\n1e-3,4,5\n")
    ds = load_csv(path, {"u": "data", "w": "label"})
    assert len(ds) == 3 and ds.x_names == ("u",) and ds.y_names == ("w",)
    np.testing.assert_array_equal(ds.x[:, 0], [1.5, 0.0, 1e-3])
    np.testing.assert_array_equal(ds.y[:, 0], [-3, 7, 5])


def test_missing_label_column_is_named(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("u,v\n1,2\n")
    with pytest.raises(DataError, match="PT312"):
        load_csv(path, {"u": "data", "PT312": "label"})


@pytest.mark.parametrize("body, where", [("1,x\n", ":2: column 'v'"), ("1,2\n3\n", ":3:"),
                                         ("1,nan\n", "not finite")])
def test_bad_cells_are_located(tmp_path, body, where):
    path = tmp_path / "d.csv"
    path.write_text("u,v\n" + body)
    with pytest.raises(DataError, match=where):
        load_csv(path, {"u": "data", "v": "label"})


def test_csv_round_trip(tmp_path, rng):
    ds = small(rng)
    ds.x *= 10.0 ** rng.integers(-8, 8, size=ds.x.shape)
    schema = write_csv(ds, tmp_path / "d.csv")
    write_schema(schema, tmp_path / "d.schema")
    back = load_csv(tmp_path / "d.csv", read_schema(tmp_path / "d.schema"))
    assert np.max(np.abs(back.x - ds.x)) <= 1e-12
    assert np.max(np.abs(back.y - ds.y)) <= 1e-12
    np.testing.assert_array_equal(back.aux["setpoint"], ds.aux["setpoint"])


def test_mfp_schema_shape():
    schema = mfp_schema()
    assert sum(r == "data" for r in schema.values()) == 7
    assert sum(r == "label" for r in schema.values()) == 13


def test_schema_rejects_unknown_role(tmp_path):
    (tmp_path / "s").write_text("a = data\nb = target\n")
    with pytest.raises(DataError):
        read_schema(tmp_path / "s")


# -- normalisation ------------------------------------------------------------

def test_normalized_columns_are_standard(rng):
    ds = normalize(small(rng, 200))
    np.testing.assert_allclose(ds.x.mean(0), 0, atol=1e-10)
    np.testing.assert_allclose(ds.x.std(0), 1, atol=1e-10)


def test_shift_moves_only_that_mean(rng):
    ds = small(rng)
    shifted = replace(ds, x=ds.x + np.array([5.0, 0.0]))
    a, b = fit_stats(ds.x, ds.x_names), fit_stats(shifted.x, ds.x_names)
    np.testing.assert_allclose(b.mean - a.mean, [5.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(b.std, a.std, atol=1e-12)


def test_normalize_inverts(rng):
    ds = small(rng)
    back = denormalize(normalize(ds))
    assert np.max(np.abs(back.x - ds.x)) <= 1e-12 and np.max(np.abs(back.y - ds.y)) <= 1e-12


def test_zero_variance_column_is_named(rng):
    ds = small(rng)
    ds.x[:, 1] = 2.0
    with pytest.raises(DataError, match="a1"):
        normalize(ds)


def test_training_label_stats_use_source_steps_only(rng):
    ds = with_domain(small(rng, 400), "setpoint", 0.0278, 0.0347)
    poisoned = replace(ds, y=np.where(ds.domain[:, None], ds.y, 1e6))
    out = normalize_for_training(poisoned)
    np.testing.assert_allclose(out.y_stats.mean, ds.y[ds.domain].mean(0), atol=1e-12)
    with pytest.raises(DataError):
        normalize_for_training(replace(ds, domain=np.zeros(len(ds), bool)))


# -- domain rule and windows --------------------------------------------------

def test_domain_rule_is_inclusive(rng):
    ds = small(rng, 4)
    ds.aux["setpoint"] = np.array([0.0278, 0.0347, 0.0208, 0.0417])
    np.testing.assert_array_equal(domain_split(ds, "setpoint", 0.0278, 0.0347), [True, True, False, False])
    assert domain_split(ds, "setpoint", 0.0, 1.0).all()


def test_domain_rule_reads_label_column(rng):
    ds = small(rng)
    mask = domain_split(ds, "b1", -0.5, 0.5)
    np.testing.assert_array_equal(mask, (ds.y[:, 1] >= -0.5) & (ds.y[:, 1] <= 0.5))
    with pytest.raises(DataError):
        domain_split(ds, "nope", 0, 1)


def test_window_count_and_prefix(rng):
    ds = with_domain(small(rng, 250), "setpoint", 0.0278, 0.0347)
    ws = window(ds, 100)
    assert len(ws) == 2
    np.testing.assert_array_equal(np.concatenate([w.x for w in ws]), ds.x[:200])
    np.testing.assert_array_equal(np.concatenate([w.y for w in ws]), ds.y[:200])
    np.testing.assert_array_equal(np.concatenate([w.mask for w in ws]), ds.domain[:200])
    with pytest.raises(DataError):
        window(ds, 251)


# -- synthetic process --------------------------------------------------------

def test_synth_is_deterministic():
    cfg = replace(SMALL_SYNTH, length=3000)
    a, b = synth_generate(cfg), synth_generate(cfg)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.domain, b.domain)
    c = synth_generate(replace(cfg, seed=1))
    assert not np.array_equal(a.x, c.x)


def test_noise_free_constant_drive_reaches_fixed_point():
    cfg = SynthConfig()
    d1 = np.full(300, cfg.driver1_setpoints[1])
    d2 = np.full(300, cfg.driver2_setpoints[3])
    states, _, _ = simulate(cfg, d1, d2, None, noise=False)
    steps = np.linalg.norm(np.diff(states, axis=0), axis=1)
    assert steps[-1] < 1e-12
    assert np.all(steps[150:] <= steps[149] + 1e-15)


def test_setpoint_switch_causes_transient():
    ds = synth_generate(replace(SMALL_SYNTH, length=8000))
    d1 = ds.aux["air_flow_setpoint"]
    switches = np.flatnonzero(np.diff(d1)) + 1
    dy = np.linalg.norm(np.diff(ds.y, axis=0), axis=1)
    transient = np.median([dy[s - 1:s + 9].max() for s in switches if s + 9 < len(dy)])
    settled = np.ones(len(dy), bool)
    for s in switches:
        settled[max(0, s - 1):s + 50] = False
    steady = np.median([dy[i:i + 10].max() for i in np.flatnonzero(settled)[::10] if settled[i:i + 10].all()])
    assert transient > steady


@pytest.mark.parametrize("seed", range(4))
def test_source_fraction_calibration(seed):
    ds = synth_generate(replace(SynthConfig(), seed=seed))
    assert 0.40 <= with_domain(ds, "air_flow_setpoint", 0.0278, 0.0347).source_fraction() <= 0.50


def test_domains_have_different_marginals():
    ds = synth_generate(SynthConfig())
    s, t = ds.x[ds.domain], ds.x[~ds.domain]
    se = np.sqrt(s.var(0, ddof=1) / len(s) + t.var(0, ddof=1) / len(t))
    assert np.max(np.abs(s.mean(0) - t.mean(0)) / se) > 5


def test_driver_schedule_respects_dwell_range(rng):
    cfg = replace(SMALL_SYNTH, length=5000)
    d1, d2 = driver_schedule(cfg, rng)
    for d in (d1, d2):
        runs = np.diff(np.flatnonzero(np.diff(np.r_[np.nan, d, np.nan]) != 0))
        assert runs[:-1].min() >= cfg.dwell_min  # the last run may be truncated


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(obs_noise=0.0)
    with pytest.raises(ValueError):
        SynthConfig(driver2_setpoints=(1.0,))


def test_overflowing_column_is_named(rng):
    ds = small(rng)
    ds.x[0, 0], ds.x[1, 0] = 1e300, -1e300
    with np.errstate(all="ignore"), pytest.raises(DataError, match="a0"):
        normalize(ds)
