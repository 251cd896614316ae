import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stratapc.core import GridSpec
from stratapc.data import (
    DataFormatError,
    GridWindow,
    RawSeries,
    aggregate,
    load_graph,
    read_series_csv,
    simulate_dataset,
    write_graph_csv,
    write_series_csv,
)
from stratapc.report import read_csv, write_csv


def make_raw(rows):
    return RawSeries(
        stratum=np.asarray([r[0] for r in rows], dtype=object),
        age=np.asarray([r[1] for r in rows], dtype=int),
        year=np.asarray([r[2] for r in rows], dtype=int),
        deaths=np.asarray([r[3] for r in rows], dtype=float),
        exposure=np.asarray([r[4] for r in rows], dtype=float),
    )


class TestGridWindow:
    def test_application_dimensions(self):
        # ages 0..80 inclusive bin starts, years [1925, 2015), width 5
        w = GridWindow(0, 80, 1925, 2015, 5)
        assert w.n_age == 17
        assert w.n_period == 18
        assert w.grid().n_cohort == 34

    def test_indivisible_ranges_rejected(self):
        with pytest.raises(ValueError, match="bin_width"):
            GridWindow(0, 80, 1925, 2015, 3)
        with pytest.raises(ValueError, match="bin_width"):
            GridWindow(0, 79, 1925, 2015, 5)


class TestRawSeries:
    def test_duplicate_key_rejected(self):
        with pytest.raises(DataFormatError, match="duplicate"):
            make_raw([("a", 0, 2000, 1, 10), ("a", 0, 2000, 2, 10)])

    def test_deaths_without_exposure_rejected(self):
        with pytest.raises(DataFormatError):
            make_raw([("a", 0, 2000, 3, 0.0)])

    def test_negative_values_rejected(self):
        with pytest.raises(DataFormatError):
            make_raw([("a", 0, 2000, -1, 10)])


class TestAggregate:
    def test_single_row_lands_in_first_cell(self):
        raw = make_raw([("x", 3, 1927, 2, 100.0)])
        # widen with far rows so the window is valid
        raw = make_raw(
            [("x", 3, 1927, 2, 100.0), ("x", 14, 1941, 0, 1.0), ("x", 7, 1934, 0, 1.0)]
        )
        window = GridWindow(0, 10, 1925, 1940, 5)
        ds, report = aggregate(raw, window)
        assert ds.counts[0, 0, 0] == 2.0
        assert ds.exposures[0, 0, 0] == 100.0
        assert report.n_dropped == 1  # the 1941 row is outside the window

    def test_rows_in_same_bin_sum(self):
        raw = make_raw(
            [
                ("x", 0, 1925, 2, 100.0),
                ("x", 1, 1926, 3, 50.0),
                ("x", 14, 1939, 0, 1.0),
            ]
        )
        window = GridWindow(0, 10, 1925, 1940, 5)
        ds, _ = aggregate(raw, window)
        assert ds.counts[0, 0, 0] == 5.0
        assert ds.exposures[0, 0, 0] == 150.0

    def test_empty_cells_marked_missing(self):
        raw = make_raw([("x", 0, 1925, 1, 10.0), ("x", 14, 1939, 1, 10.0)])
        window = GridWindow(0, 10, 1925, 1940, 5)
        ds, _ = aggregate(raw, window)
        assert ds.observed[0, 0, 0]
        assert not ds.observed[0, 1, 1]

    def test_partial_cells_flagged(self):
        raw = make_raw([("x", 0, 1925, 1, 10.0), ("x", 14, 1939, 1, 10.0)])
        window = GridWindow(0, 10, 1925, 1940, 5)
        _, report = aggregate(raw, window)
        assert ("x", 0, 0) in report.partial_cells

    def test_strata_sorted(self):
        raw = make_raw(
            [("b", 0, 1925, 1, 10.0), ("a", 0, 1925, 1, 10.0), ("b", 14, 1939, 0, 1.0)]
        )
        window = GridWindow(0, 10, 1925, 1940, 5)
        ds, _ = aggregate(raw, window)
        assert ds.strata == ("a", "b")

    @given(seed=st.integers(0, 10_000))
    def test_additivity(self, seed):
        rng = np.random.default_rng(seed)
        n = 60
        rows = []
        used = set()
        for _ in range(n):
            key = (
                "s" + str(rng.integers(2)),
                int(rng.integers(0, 15)),
                int(rng.integers(1925, 1940)),
            )
            if key in used:
                continue
            used.add(key)
            rows.append((*key, int(rng.integers(0, 5)), float(rng.uniform(1, 100))))
        raw = make_raw(rows)
        window = GridWindow(0, 10, 1925, 1940, 5)
        whole, _ = aggregate(raw, window)
        half = len(rows) // 2
        part1, _ = aggregate(make_raw(rows[:half]), window)
        part2, _ = aggregate(make_raw(rows[half:]), window)

        def padded(ds, strata):
            counts = np.zeros((len(strata), window.n_age, window.n_period))
            expo = np.zeros_like(counts)
            for r, s in enumerate(strata):
                if s in ds.strata:
                    i = ds.strata.index(s)
                    counts[r] = ds.counts[i]
                    expo[r] = ds.exposures[i]
            return counts, expo

        c1, e1 = padded(part1, whole.strata)
        c2, e2 = padded(part2, whole.strata)
        assert np.allclose(c1 + c2, whole.counts)
        assert np.allclose(e1 + e2, whole.exposures)


class TestSeriesCsv:
    def test_round_trip(self, tmp_path, rng):
        grid = GridSpec(4, 5)
        ds, _ = simulate_dataset(grid, 2, exposure=500.0, seed=4)
        window = GridWindow(0, 3, 0, 5, 1)
        path = tmp_path / "data.csv"
        write_series_csv(path, ds, window)
        raw = read_series_csv(path)
        ds2, _ = aggregate(raw, window)
        assert np.array_equal(ds.counts, ds2.counts)
        assert np.array_equal(ds.exposures, ds2.exposures)

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("stratum,age\na,1\n")
        with pytest.raises(DataFormatError, match="expected header"):
            read_series_csv(path)


class TestGraphIO:
    def test_component_report(self, tmp_path):
        path = tmp_path / "graph.csv"
        write_graph_csv(path, [("a", "b"), ("c", "d")])
        graph, report = load_graph(path)
        assert report.n_components_before == 2
        assert graph.n_components == 2

    def test_augmentation_connects(self, tmp_path):
        path = tmp_path / "graph.csv"
        # three isolated pairs plus a mainland, connected by augmented links
        base = [("uk", "ie"), ("se", "fi"), ("gr", "bg"), ("de", "fr"), ("fr", "es")]
        aug = [("uk", "fr"), ("se", "de"), ("gr", "de")]
        write_graph_csv(path, base, augmented=aug)
        graph, report = load_graph(path)
        assert report.n_components_before == 4
        assert report.n_components_after == 1
        assert len(report.augmented_edges) == 3

    def test_self_loop_rejected(self, tmp_path):
        path = tmp_path / "graph.csv"
        path.write_text("from,to\na,a\n")
        with pytest.raises(DataFormatError, match="self-loop"):
            load_graph(path)

    def test_unknown_stratum_rejected(self, tmp_path):
        path = tmp_path / "graph.csv"
        write_graph_csv(path, [("a", "b"), ("b", "z")])
        with pytest.raises(DataFormatError, match="unknown stratum"):
            load_graph(path, strata=("a", "b", "c"))

    def test_edge_order_invariance(self, tmp_path):
        p1, p2 = tmp_path / "g1.csv", tmp_path / "g2.csv"
        edges = [("a", "b"), ("b", "c"), ("c", "d")]
        write_graph_csv(p1, edges)
        write_graph_csv(p2, list(reversed(edges)))
        g1, _ = load_graph(p1)
        g2, _ = load_graph(p2)
        assert g1.edges == g2.edges


class TestCsvPrecision:
    def test_float64_round_trip_bit_exact(self, tmp_path, rng):
        values = np.concatenate([rng.normal(size=20) * 10.0 ** rng.integers(-8, 8, 20)])
        path = tmp_path / "x.csv"
        write_csv(path, ["v"], [(v,) for v in values])
        _, rows = read_csv(path)
        back = np.array([float(r[0]) for r in rows])
        assert np.array_equal(back, values)
