"""
Tests for fleet_data: generator, fault injection, CSV/manifest ingestion and
windowing.
"""

import numpy as np
import pytest

from fleet_data import (
    FleetDataset,
    SignalWindow,
    baseline_learnability,
    drop_labels,
    fleet_spec,
    generate_fleet,
    inject_fault,
    inject_faults,
    load_csv,
    make_windows,
    manifest_path_for,
    split_bounds,
    split_windows,
    subsample_windows,
    window_count,
    write_csv,
)
from fleet_errors import ConfigError, ContractError, DataParseError, InputTooShortError
from fleet_training import stream_rng


@pytest.fixture
def fleet_c():
    return fleet_spec("fleet_c")


# ============================================================================
# Generator
# ============================================================================


class TestGenerate:
    """Synthetic fleets are deterministic and learnable."""

    def test_same_seed_bitwise_identical(self, fleet_c):
        a = generate_fleet(fleet_c, 2000, seed=3)
        b = generate_fleet(fleet_c, 2000, seed=3)
        np.testing.assert_array_equal(a.values, b.values)

    def test_different_seed_differs(self, fleet_c):
        assert not np.array_equal(generate_fleet(fleet_c, 500, seed=1).values, generate_fleet(fleet_c, 500, seed=2).values)

    def test_desk_fleets_are_heterogeneous(self):
        counts = [fleet_spec(f).num_channels for f in ("fleet_a", "fleet_b", "fleet_c")]
        assert counts == [8, 6, 4]

    def test_baseline_is_learnable_from_covariates(self, fleet_c):
        assert baseline_learnability(generate_fleet(fleet_c, 20000, seed=0)) >= 0.8

    def test_too_short(self, fleet_c):
        with pytest.raises(InputTooShortError):
            generate_fleet(fleet_c, 100, seed=0, window_len=128)

    def test_unknown_fleet(self):
        with pytest.raises(ConfigError):
            fleet_spec("B747")


# ============================================================================
# Faults
# ============================================================================


class TestFaults:
    """Injected segments and their labels."""

    @pytest.fixture
    def clean_window(self, fleet_c):
        ds = generate_fleet(fleet_c, 256, seed=4)
        return SignalWindow(ds.values[:, :256].copy(), np.zeros(256, dtype=np.int8), "fleet_c")

    @pytest.mark.parametrize("fault_type", ["under_pressure", "over_pressure", "over_temperature"])
    def test_labels_mark_the_shifted_segment(self, clean_window, fault_type):
        out = inject_fault(clean_window, fault_type, seed=8, channel=0)
        changed = out.values[0] != clean_window.values[0]
        np.testing.assert_array_equal(changed, out.ad_labels == 1)
        seg = int(out.ad_labels.sum())
        assert int(np.ceil(0.05 * 256)) <= seg <= int(0.30 * 256)
        np.testing.assert_array_equal(out.values[1:], clean_window.values[1:])

    def test_deviation_is_at_least_two_sigma(self, clean_window):
        sigma = clean_window.values[0].std()
        for seed in range(5):
            out = inject_fault(clean_window, "over_temperature", seed=seed)
            dev = np.abs(out.values[0] - clean_window.values[0])[out.ad_labels == 1]
            assert dev.min() >= 2.0 * sigma * (1.0 - 1e-9)

    def test_already_faulted_window(self, clean_window):
        once = inject_fault(clean_window, "over_pressure", seed=1)
        with pytest.raises(ContractError):
            inject_fault(once, "over_pressure", seed=2)

    def test_dataset_labels_match_modified_samples(self, fleet_c):
        clean = generate_fleet(fleet_c, 4096, seed=0, window_len=256)
        faulted = inject_faults(clean, 256, seed=0)
        changed = (faulted.values != clean.values).any(axis=0)
        np.testing.assert_array_equal(changed, faulted.labels == 1)
        assert faulted.labels.any()

    def test_faults_draw_from_the_fleet_fault_stream(self, fleet_c):
        clean = generate_fleet(fleet_c, 4096, seed=0, window_len=256)
        faulted = inject_faults(clean, 256, seed=3)
        rng = stream_rng(3, "faults", fleet_c.fleet_id)
        hits = []
        for _ in range(4096 // 256):
            hits.append(bool(rng.random() < fleet_c.anomaly_rate))
            rng.integers(0, 2 ** 31 - 1)
        assert list(faulted.labels.reshape(-1, 256).any(axis=1)) == hits
        np.testing.assert_array_equal(inject_faults(clean, 256, seed=3).labels, faulted.labels)


# ============================================================================
# CSV + manifest
# ============================================================================


class TestCSV:
    """Round trip and parse errors."""

    def test_round_trip_is_bitwise(self, tmp_path, fleet_c):
        ds = inject_faults(generate_fleet(fleet_c, 600, seed=2, window_len=100), 100, seed=2)
        csv_path, manifest = write_csv(ds, str(tmp_path / "fleet_c.csv"))
        assert manifest == manifest_path_for(csv_path)
        back = load_csv(csv_path)
        np.testing.assert_array_equal(back.values, ds.values)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.spec.channel_names == ds.spec.channel_names
        assert back.spec.baseline_channel == ds.spec.baseline_channel

    def test_unlabeled_round_trip(self, tmp_path, fleet_c):
        ds = drop_labels(generate_fleet(fleet_c, 50, seed=2))
        path, _ = write_csv(ds, str(tmp_path / "u.csv"))
        assert load_csv(path).labels is None

    def test_all_zero_labels_are_valid(self, tmp_path, fleet_c):
        ds = generate_fleet(fleet_c, 50, seed=2)
        path, _ = write_csv(ds, str(tmp_path / "z.csv"))
        back = load_csv(path)
        assert back.has_labels and not back.labels.any()

    def test_header_only(self, tmp_path, fleet_c):
        path, _ = write_csv(generate_fleet(fleet_c, 10, seed=0), str(tmp_path / "h.csv"))
        with open(path, encoding="utf-8") as f:
            header = f.readline()
        with open(path, "w", encoding="utf-8") as f:
            f.write(header)
        with pytest.raises(DataParseError, match="empty"):
            load_csv(path)

    def test_non_numeric_value(self, tmp_path, fleet_c):
        path, _ = write_csv(generate_fleet(fleet_c, 10, seed=0), str(tmp_path / "n.csv"))
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        cells = lines[3].split(",")
        cells[1] = "oops"
        lines[3] = ",".join(cells)
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        with pytest.raises(DataParseError, match="row 2"):
            load_csv(path)

    def test_short_row_is_named(self, tmp_path, fleet_c):
        path, _ = write_csv(generate_fleet(fleet_c, 10, seed=0), str(tmp_path / "short.csv"))
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        lines[4] = ",".join(lines[4].split(",")[:2])
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        with pytest.raises(DataParseError, match="data row 3 has 2 field"):
            load_csv(path)

    def test_missing_manifest(self, tmp_path):
        path = tmp_path / "orphan.csv"
        path.write_text("t,a\n0,1\n")
        with pytest.raises(DataParseError):
            load_csv(str(path))


# ============================================================================
# Windowing
# ============================================================================


class TestWindows:
    """Window counts, splits and subsampling."""

    def test_two_windows(self, fleet_c):
        ds = FleetDataset(fleet_c, np.zeros((4, 4096)))
        assert len(make_windows(ds, 2048, 2048)) == 2

    def test_count_matches_enumeration(self):
        for T in (10, 33, 64, 100):
            for L in (1, 7, 10):
                for s in (1, 3, 10):
                    assert window_count(T, L, s) == len(range(0, T - L + 1, s))

    def test_no_window_crosses_a_split(self, fleet_c):
        ds = generate_fleet(fleet_c, 1000, seed=0)
        splits = split_windows(ds, 64, 16)
        for (lo, hi), name in zip(split_bounds(ds.length), ("train", "val", "test")):
            assert splits[name]
            assert all(lo <= w.start and w.start + w.length <= hi for w in splits[name])

    def test_unlabeled_windows(self, fleet_c):
        ds = drop_labels(generate_fleet(fleet_c, 200, seed=0))
        windows = make_windows(ds, 50)
        assert windows and not any(w.labeled for w in windows)

    def test_bad_split(self):
        with pytest.raises(ConfigError):
            split_bounds(100, (0.5, 0.5, 0.5))

    def test_subsample_keeps_order(self, fleet_c):
        windows = make_windows(generate_fleet(fleet_c, 1400, seed=0), 100)
        kept = subsample_windows(windows, 0.1, seed=3)
        assert len(kept) == 2
        starts = [w.start for w in kept]
        assert starts == sorted(starts)
        assert [w.start for w in subsample_windows(windows, 0.1, seed=3)] == starts
