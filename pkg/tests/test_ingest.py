"""Cleaning-op examples and a hand-enumerated window-split oracle."""
import numpy as np
import pytest

from urbanmorph import ingest
from urbanmorph.ingest import (
    CSV_COLUMNS, DEMOGRAPHIC_FEATURES, FEATURE_NAMES,
    ConstantFeatureError, IngestError, TractRecord, chronological_split,
    classify_window, enumerate_windows, iqr_fences, iqr_filter, load_csv,
    write_csv, zero_row_drop, zscore,
)


def make_record(tract_id="t1", year=2012, **overrides) -> TractRecord:
    base = {
        "pop": 4000.0, "pct_25_34": 15.0, "pct_35_50": 22.0, "pct_over_65": 12.0,
        "pct_white": 60.0, "pct_nonwhite": 40.0, "pct_black": 15.0,
        "pct_college": 30.0, "income": 55000.0,
        "travel_time": 25.0, "auto_users": 1200.0, "active_users": 150.0,
        "transit_users": 300.0, "other_users": 50.0,
    }
    base.update(overrides)
    return TractRecord(tract_id, year, np.array([base[n] for n in FEATURE_NAMES]))


def make_panel(n_tracts=4, years=range(2012, 2024), jitter=0.0, seed=0):
    """Stationary panel: bounded uniform jitter so IQR fences drop nothing."""
    rng = np.random.default_rng(seed)
    records = []
    for t in range(n_tracts):
        for year in years:
            def j():
                return float(rng.uniform(-jitter, jitter)) if jitter else 0.0

            records.append(make_record(
                f"tract{t:03d}", year,
                pop=4000.0 + 100 * t + j(),
                pct_25_34=15.0 + j(), pct_35_50=22.0 + j(), pct_over_65=12.0 + j(),
                pct_white=60.0 + j(), pct_nonwhite=40.0 + j(), pct_black=15.0 + j(),
                pct_college=30.0 + j(), income=50000.0 + 500 * t + j(),
                travel_time=25.0 + j(), auto_users=1000.0 + 5 * t + j(),
                active_users=150.0 + j(), transit_users=300.0 + j(),
                other_users=50.0 + j()))
    return records


class TestLoadCsv:
    def test_roundtrip(self, tmp_path):
        records = make_panel(2)
        path = tmp_path / "panel.csv"
        write_csv(path, records)
        loaded, report = load_csv(path)
        assert report.rows_read == len(records)
        assert report.rows_rejected == 0
        assert loaded[0].tract_id == "tract000"
        assert np.allclose(loaded[0].features, records[0].features)

    def test_header_mismatch_is_fatal(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("tract_id,year,pop\nx,2012,5\n")
        with pytest.raises(IngestError, match="header"):
            load_csv(path)

    def test_bad_rows_rejected_with_line_numbers(self, tmp_path):
        path = tmp_path / "panel.csv"
        rows = [",".join(CSV_COLUMNS)]
        good = ["t1", "2012"] + ["10"] * 14
        rows.append(",".join(good))
        bad_cell = ["t1", "2013"] + ["10"] * 13 + ["oops"]
        rows.append(",".join(bad_cell))
        bad_pct = ["t1", "2014"] + ["10"] * 14
        bad_pct[CSV_COLUMNS.index("pct_white")] = "150"
        rows.append(",".join(bad_pct))
        dup = ["t1", "2012"] + ["10"] * 14
        rows.append(",".join(dup))
        path.write_text("\n".join(rows) + "\n")
        loaded, report = load_csv(path)
        assert len(loaded) == 1
        assert report.rows_rejected == 3
        lines = [ln for ln, _ in report.reasons]
        assert lines == [3, 4, 5]

    def test_negative_count_rejected(self, tmp_path):
        path = tmp_path / "panel.csv"
        row = ["t1", "2012"] + ["10"] * 14
        row[CSV_COLUMNS.index("auto_users")] = "-5"
        path.write_text(",".join(CSV_COLUMNS) + "\n" + ",".join(row) + "\n")
        loaded, report = load_csv(path)
        assert not loaded and report.rows_rejected == 1


class TestCleaningOps:
    def test_iqr_five_point_example(self):
        keep = iqr_filter(np.array([1.0, 2.0, 3.0, 4.0, 100.0]))
        assert keep.tolist() == [True, True, True, True, False]
        lo, hi = iqr_fences(np.array([1.0, 2.0, 3.0, 4.0, 100.0]))
        assert (lo, hi) == (-1.0, 7.0)  # Q1=2, Q3=4 by linear interpolation

    def test_iqr_four_point_example_all_retained(self):
        assert iqr_filter(np.array([1.0, 2.0, 3.0, 4.0])).all()

    def test_zscore_round_trip(self):
        rng = np.random.default_rng(21)
        x = rng.normal(50, 12, size=(200, 3))
        z, mu, sigma = zscore(x)
        assert np.allclose(z.mean(axis=0), 0, atol=1e-12)
        assert np.allclose(z.std(axis=0), 1, atol=1e-12)  # population convention
        assert np.allclose(z * sigma + mu, x, atol=1e-9)

    def test_zscore_constant_column_flagged(self):
        x = np.column_stack([np.ones(10), np.arange(10.0)])
        with pytest.raises(ConstantFeatureError):
            zscore(x)

    def test_zero_row_drop(self):
        records = [
            make_record(year=2012),
            make_record(year=2013, pop=0.0),
            make_record(year=2014, travel_time=0.0, auto_users=0.0,
                        active_users=0.0, transit_users=0.0, other_users=0.0),
        ]
        kept, dropped = zero_row_drop(records)
        assert dropped == 2
        assert [r.year for r in kept] == [2012]


class TestWindowing:
    def test_twelve_year_series_hand_enumerated(self):
        # 2012..2023, input 3, horizon 3: starts 2012..2018
        #   2012 -> targets 2015-2017 train
        #   2013 -> targets 2016-2018 straddle
        #   2014 -> targets 2017-2019 straddle
        #   2015..2018 -> targets fully after 2017: test
        wins = list(enumerate_windows(range(2012, 2024), 3, 3, boundary=2017))
        labels = [label for _, _, label in wins]
        assert labels == ["train", "straddle", "straddle", "test", "test", "test", "test"]
        assert wins[0][0] == (2012, 2013, 2014)
        assert wins[0][1] == (2015, 2016, 2017)
        assert wins[3][1] == (2018, 2019, 2020)

    def test_classification_rule(self):
        assert classify_window((2015, 2016, 2017), 2017) == "train"
        assert classify_window((2018, 2019, 2020), 2017) == "test"
        assert classify_window((2016, 2017, 2018), 2017) == "straddle"

    def test_windows_never_span_gaps(self):
        years = [2012, 2013, 2014, 2016, 2017, 2018, 2019, 2020, 2021]
        wins = list(enumerate_windows(years, 3, 3, boundary=2017))
        for input_years, target_years, _ in wins:
            span = input_years + target_years
            assert all(b - a == 1 for a, b in zip(span, span[1:]))
        assert len(wins) == 1  # only the 2016-2021 run is long enough


class TestChronologicalSplit:
    # windowing-focused tests widen the fences (multiplier 10) so that
    # small-sample quartile skew cannot drop rows and perturb the counts
    def test_counts_match_oracle(self):
        ds = chronological_split(make_panel(4, jitter=1e-3), iqr_multiplier=10)
        assert ds.report["windows_train"] == 4
        assert ds.report["windows_test"] == 16
        assert ds.report["windows_straddle_dropped"] == 8
        assert len(ds.train) == 4 and len(ds.test) == 16

    def test_no_window_crosses_boundary(self):
        ds = chronological_split(make_panel(3, jitter=1e-3), iqr_multiplier=10)
        assert all(w.target_years[-1] <= 2017 for w in ds.train)
        assert all(w.target_years[0] >= 2018 for w in ds.test)

    def test_stats_are_train_only(self):
        base = make_panel(3, jitter=1e-3)
        shifted = [TractRecord(r.tract_id, r.year,
                               r.features * (10.0 if r.year > 2017 else 1.0))
                   for r in base]
        # post-boundary rows scaled 10x must not move the standardization stats
        ds_base = chronological_split(base, iqr_multiplier=10)
        ds_shift = chronological_split(shifted, iqr_multiplier=10)
        assert np.allclose(ds_base.input_mu, ds_shift.input_mu)
        assert np.allclose(ds_base.target_sigma, ds_shift.target_sigma)

    def test_outlier_rows_dropped_at_default_fences(self):
        records = make_panel(4, jitter=1e-3)
        spiked = records[7]
        spiked.features[FEATURE_NAMES.index("income")] = 10_000_000.0
        ds = chronological_split(records)
        assert ds.report["dropped_outlier_rows"] >= 1
        assert all(spiked.year not in w.input_years + w.target_years
                   for w in ds.train + ds.test if w.tract_id == spiked.tract_id)

    def test_window_tensor_shapes_and_destandardize(self):
        ds = chronological_split(make_panel(3, jitter=1e-3), iqr_multiplier=10)
        w = ds.test[0]
        assert w.x.shape == (3, len(ds.input_features))
        assert w.y.shape == (3, 5)
        assert np.allclose(ds.destandardize_targets(w.y), w.y_raw, atol=1e-9)

    def test_short_series_skipped_and_counted(self):
        records = make_panel(2, jitter=1e-3) + [
            make_record("shorty", year, pop=4000.0, income=50000.0, auto_users=1000.0)
            for year in (2012, 2013, 2014)]
        ds = chronological_split(records, iqr_multiplier=10)
        assert ds.report["series_too_short"] == 1
        assert all(w.tract_id != "shorty" for w in ds.train + ds.test)

    def test_constant_target_is_an_error(self):
        records = make_panel(3)  # travel features constant per tract
        with pytest.raises(IngestError, match="constant"):
            chronological_split(records)

    def test_constant_input_dropped_with_report(self):
        records = make_panel(3, jitter=1e-3)
        # force one demographic column constant across all rows
        idx = FEATURE_NAMES.index("pct_over_65")
        for r in records:
            r.features[idx] = 12.0
        ds = chronological_split(records, iqr_multiplier=10)
        assert "pct_over_65" not in ds.input_features
        assert ds.report["dropped_constant_inputs"] == ["pct_over_65"]
        assert len(ds.input_features) == len(DEMOGRAPHIC_FEATURES) - 1

    def test_split_report_text_renders(self):
        ds = chronological_split(make_panel(2, jitter=1e-3), iqr_multiplier=10)
        text = ingest.split_report_text(ds)
        assert "windows_train" in text and "boundary_year" in text
