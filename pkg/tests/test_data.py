import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmae.data import (DESK_FLEETS, SyntheticFleetConfig, cycle_number, end_of_life_cycle, fit_normalizer,
                       generate_synthetic_fleet, load_dataset, load_dataset_dir, make_cv_folds, ocv, write_dataset)
from fmae.errors import ContractError, IngestionError, ParseError
from fmae.types import ChannelSchema


def test_generator_is_deterministic():
    cfg = SyntheticFleetConfig(n_sources=2, snippets_per_source=3, seed=11)
    a, b = generate_synthetic_fleet(cfg), generate_synthetic_fleet(cfg)
    assert all(x.equals(y) for x, y in zip(a.snippets, b.snippets))
    assert a.labels == b.labels


def test_lab_fleet_channels(lab_fleet):
    schema = ChannelSchema()
    names = {schema.names[k] for k in np.flatnonzero(lab_fleet.snippets[0].present)}
    assert names == {"voltage", "current", "soc", "mileage"}
    assert all(lab.anomaly is None for lab in lab_fleet.labels.values())


def test_ev_fleet_has_all_channels_and_anomaly_flags(small_fleet):
    assert all(s.present.all() for s in small_fleet.snippets)
    flags = small_fleet.source_anomaly()
    assert sorted(flags.values()) == [False] * 3 + [True] * 3


def test_soh_fades_and_rul_counts_down(lab_fleet):
    for src, snips in lab_fleet.by_source().items():
        rul = [lab_fleet.labels[s.snippet_id].rul_cycles for s in snips]
        ir = [lab_fleet.labels[s.snippet_id].ir_mohm for s in snips]
        assert all(a - b == 5 or b == 0 for a, b in zip(rul, rul[1:]))
        assert all(a <= b for a, b in zip(ir, ir[1:]))


def test_rul_is_zero_at_end_of_life():
    cfg = SyntheticFleetConfig(n_sources=1, snippets_per_source=80, kind="lab", fade_rate=2e-3, fade_spread=0.0)
    ds = generate_synthetic_fleet(cfg)
    k_eol = end_of_life_cycle(2e-3, 1.0)
    for s in ds.snippets:
        rul = ds.labels[s.snippet_id].rul_cycles
        assert rul == max(0, round(k_eol) - s.cycle_or_mileage)


def test_anomalous_sources_have_wider_cell_spread(small_fleet):
    schema = ChannelSchema()
    hi, lo = schema.index("max_cell_voltage"), schema.index("min_cell_voltage")
    flags = small_fleet.source_anomaly()
    spread = {src: np.mean([np.mean(s.values[:, hi] - s.values[:, lo]) for s in snips])
              for src, snips in small_fleet.by_source().items()}
    assert min(v for k, v in spread.items() if flags[k]) > max(v for k, v in spread.items() if not flags[k])


def test_ocv_is_monotone():
    soc = np.linspace(0, 1, 1001)
    assert np.all(np.diff(ocv(soc)) > 0)
    assert ocv(0.0) == pytest.approx(3.0) and ocv(1.0) == pytest.approx(4.2)


def test_cycle_number_converts_mileage(small_fleet):
    s = small_fleet.snippets[3]
    assert cycle_number(s, "ev") == pytest.approx(s.cycle_or_mileage / 250.0)
    assert cycle_number(s, "lab") == s.cycle_or_mileage


def test_desk_fleets_are_valid_configs():
    assert set(DESK_FLEETS) == {"pretrain", "capacity", "rul", "anomaly"}
    assert (DESK_FLEETS["pretrain"].n_sources, DESK_FLEETS["pretrain"].snippets_per_source) == (8, 200)


def test_csv_round_trip(tmp_path, small_fleet, lab_fleet):
    for ds in (small_fleet, lab_fleet):
        out = tmp_path / ds.kind
        write_dataset(ds, out)
        back = load_dataset_dir(out)
        assert back.kind == ds.kind
        assert len(back.snippets) == len(ds.snippets)
        assert all(a.equals(b) for a, b in zip(ds.snippets, back.snippets))
        assert back.labels == ds.labels


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_parse_error_reports_line(tmp_path):
    bad = _write(tmp_path / "s.csv", "snippet_id,source_id,t_index,voltage\na,s,0,3.7\na,s,1,oops\n")
    with pytest.raises(ParseError) as info:
        load_dataset(bad)
    assert info.value.line == 3


def test_field_count_and_unknown_columns(tmp_path):
    with pytest.raises(ParseError) as info:
        load_dataset(_write(tmp_path / "a.csv", "snippet_id,source_id,t_index,voltage\na,s,0\n"))
    assert info.value.line == 2
    with pytest.raises(ParseError) as info:
        load_dataset(_write(tmp_path / "b.csv", "snippet_id,source_id,t_index,bogus\n"))
    assert info.value.line == 1


def test_duplicate_snippet_blocks_rejected(tmp_path):
    text = "snippet_id,source_id,t_index,voltage\na,s,0,1\na,s,1,2\nb,s,0,1\nb,s,1,2\na,s,2,3\n"
    with pytest.raises(IngestionError):
        load_dataset(_write(tmp_path / "d.csv", text))


def test_short_rows_are_resampled_and_missing_columns_absent(tmp_path):
    text = "snippet_id,source_id,t_index,voltage,current\na,s,1,4.0,\na,s,0,3.0,\n"
    ds = load_dataset(_write(tmp_path / "r.csv", text))
    s = ds.snippets[0]
    assert s.present.tolist() == [True] + [False] * 7
    np.testing.assert_allclose(s.values[[0, -1], 0], [3.0, 4.0])
    assert np.all(np.diff(s.values[:, 0]) > 0)


def test_label_errors(tmp_path):
    snip = _write(tmp_path / "s.csv", "snippet_id,source_id,t_index,voltage\na,s,0,3\na,s,1,4\n")
    lab = _write(tmp_path / "l.csv", "snippet_id,soh,anomaly\na,0.9,2\n")
    with pytest.raises(ParseError) as info:
        load_dataset(snip, lab)
    assert info.value.line == 2
    lab = _write(tmp_path / "l2.csv", "snippet_id,soh\na,1.7\n")
    with pytest.raises(ParseError):
        load_dataset(snip, lab)


def test_normalizer_zscores_present_channels(lab_fleet):
    norm = fit_normalizer(lab_fleet.snippets)
    z = np.stack([norm.apply(s).values for s in lab_fleet.snippets])
    present = lab_fleet.snippets[0].present
    np.testing.assert_allclose(z[:, :, present].mean(axis=(0, 1)), 0.0, atol=1e-9)
    # population std; clamping at 6 sigma does not bite on this data
    np.testing.assert_allclose(z[:, :, present].std(axis=(0, 1)), 1.0, rtol=1e-9)
    assert np.all(z[:, :, ~present] == 0.0)
    s = lab_fleet.snippets[4]
    np.testing.assert_allclose(norm.invert(norm.apply(s)).values, s.values, atol=1e-9)


def test_normalizer_needs_data():
    with pytest.raises(ContractError):
        fit_normalizer([])


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 30), st.integers(0, 1000))
def test_folds_partition_sources_without_leak(n, seed):
    sources = [f"s{i}" for i in range(n)]
    plan = make_cv_folds(sources, "capacity", k=5, seed=seed)
    evals = []
    for train, ev in plan.rounds():
        assert not set(train) & set(ev)
        assert sorted(train + ev) == sorted(sources)
        evals += ev
    assert sorted(evals) == sorted(sources)


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 20), st.integers(5, 20), st.integers(0, 1000))
def test_anomaly_rounds_train_on_four_normal_one_faulty(n_normal, n_faulty, seed):
    flags = {f"n{i}": False for i in range(n_normal)} | {f"f{i}": True for i in range(n_faulty)}
    plan = make_cv_folds(list(flags), "anomaly", flags, k=5, seed=seed)
    normal_of = {s: i for i, f in enumerate(plan.normal_folds) for s in f}
    faulty_of = {s: i for i, f in enumerate(plan.faulty_folds) for s in f}
    for train, ev in plan.rounds():
        assert not set(train) & set(ev)
        assert len({normal_of[s] for s in train if s in normal_of}) == 4
        assert len({faulty_of[s] for s in train if s in faulty_of}) == 1
        assert len({normal_of[s] for s in ev if s in normal_of}) == 1
        assert len({faulty_of[s] for s in ev if s in faulty_of}) == 4
        assert sorted(train + ev) == sorted(flags)


def test_anomaly_folds_need_both_classes():
    flags = {f"n{i}": False for i in range(6)} | {"f0": True}
    with pytest.raises(ContractError):
        make_cv_folds(list(flags), "anomaly", flags)
    with pytest.raises(ContractError):
        make_cv_folds(["a", "b"], "capacity")


def test_fleet_config_validation():
    with pytest.raises(ContractError):
        SyntheticFleetConfig(kind="phone")
    with pytest.raises(ContractError):
        dataclasses.replace(SyntheticFleetConfig(), anomaly_fraction=1.0)
