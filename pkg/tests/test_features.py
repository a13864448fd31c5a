import hashlib
import io
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roamwatch.dialogues import Dialogue, Procedure, Protocol, Result
from roamwatch.features import (
    BINS_PER_DAY,
    FEATURE_NAMES,
    LONGITUDINAL_NAMES,
    MATRIX_ROWS,
    METRIC_NAMES,
    N_FEATURES,
    Branch,
    DailyMetrics,
    FeatureVector,
    ScalerParams,
    build_matrix,
    clustering_features,
    clustering_matrix,
    daily_metrics,
    day_range,
    day_to_epoch,
    features_from_metrics_frame,
    fill_window,
    matrices_from_frame,
    metrics_frame,
    monthly_features,
    read_feature_vectors,
    read_matrix_day,
    standardize,
    write_feature_vectors,
    write_matrix_day,
)

DAY = "2022-10-01"
DAY_START = day_to_epoch(DAY)

GOLDEN = Path(__file__).parent / "data" / "feature_names_golden.txt"
GOLDEN_SHA256 = "181c53298425705964f7e897b3aa735f48787ff13a9422dec6d0e3fd3b95403d"


def mk(
    device="dev-1",
    ts=DAY_START,
    protocol=Protocol.MAP,
    procedure=Procedure.SAI,
    result=Result.SUCCESS,
    duration=100,
    node="vlr-1",
    operator="op-1",
    country="ES",
):
    return Dialogue(
        device_id=device,
        client_id="client1",
        country=country,
        timestamp=ts,
        protocol=protocol,
        procedure=procedure,
        result=result,
        duration_ms=duration,
        visited_operator=operator,
        visited_node=node,
        home_node="hlr-1",
    )


def random_day_dialogues(rng, device="dev-1", n=None):
    n = int(rng.integers(0, 60)) if n is None else n
    out = []
    for _ in range(n):
        proto = Protocol.MAP if rng.random() < 0.6 else Protocol.DIAMETER
        procs = (
            list(Procedure)
            if proto is Protocol.MAP
            else [Procedure.SAI, Procedure.UL, Procedure.CL]
        )
        out.append(
            mk(
                device=device,
                ts=DAY_START + int(rng.integers(0, 86400)),
                protocol=proto,
                procedure=procs[int(rng.integers(0, len(procs)))],
                result=Result.REJECT if rng.random() < 0.3 else Result.SUCCESS,
                duration=int(rng.integers(0, 10_000)),
                node=f"node-{int(rng.integers(0, 3))}",
                operator=f"op-{int(rng.integers(0, 2))}",
                country=["ES", "FR"][int(rng.integers(0, 2))],
            )
        )
    return out


class TestFeatureNamesFrozen:
    def test_golden_list_matches(self):
        golden = GOLDEN.read_text().splitlines()
        assert list(FEATURE_NAMES) == golden

    def test_checksum(self):
        text = "\n".join(FEATURE_NAMES) + "\n"
        assert hashlib.sha256(text.encode()).hexdigest() == GOLDEN_SHA256

    def test_structure(self):
        assert N_FEATURES == 95
        assert len(METRIC_NAMES) == 22
        assert len(LONGITUDINAL_NAMES) == 7
        assert FEATURE_NAMES[0] == "map_dialogues_mean"
        assert FEATURE_NAMES[87] == "total_dialogues_max"
        assert FEATURE_NAMES[88] == "active_days_map"


class TestBuildMatrix:
    def test_empty_day_all_zero(self):
        m = build_matrix([], "dev-1", DAY)
        assert m.values.shape == (13, 96)
        assert m.values.sum() == 0

    def test_single_dialogue_placement(self):
        d = mk(ts=DAY_START + 7 * 60, duration=3000)  # 00:07, unusual duration
        m = build_matrix([d], "dev-1", DAY)
        assert m.values[MATRIX_ROWS.index("MAP_SAI"), 0] == 1
        assert m.values[MATRIX_ROWS.index("SUCCESS"), 0] == 1
        assert m.values[MATRIX_ROWS.index("DUR_UNUSUAL"), 0] == 1
        assert m.values.sum() == 3

    def test_last_bin(self):
        d = mk(ts=DAY_START + 86399)
        m = build_matrix([d], "dev-1", DAY)
        assert m.values[MATRIX_ROWS.index("MAP_SAI"), BINS_PER_DAY - 1] == 1

    def test_wrong_day_rejected(self):
        with pytest.raises(ValueError):
            build_matrix([mk(ts=DAY_START - 1)], "dev-1", DAY)
        with pytest.raises(ValueError):
            build_matrix([mk(ts=DAY_START + 86400)], "dev-1", DAY)

    def test_wrong_device_rejected(self):
        with pytest.raises(ValueError):
            build_matrix([mk(device="other")], "dev-1", DAY)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_row_group_sums_reconcile(self, seed):
        rng = np.random.default_rng(seed)
        ds = random_day_dialogues(rng)
        m = build_matrix(ds, "dev-1", DAY)
        a, b, c = m.group_totals()
        assert a == b == c == len(ds)


class TestDailyMetrics:
    def test_empty(self):
        m = daily_metrics([])
        assert m.as_array().tolist() == [0.0] * 22

    def test_reject_ratio(self):
        ds = [
            mk(result=Result.REJECT if i < 2 else Result.SUCCESS, ts=DAY_START + i)
            for i in range(10)
        ]
        m = daily_metrics(ds)
        assert m.map_dialogues == 10
        assert m.map_rejects == 2
        assert m.map_reject_ratio == pytest.approx(0.2)
        assert m.dia_reject_ratio == 0.0

    def test_vlr_transition_count(self):
        nodes = ["A", "A", "B", "A"]
        ds = [mk(ts=DAY_START + i, node=n) for i, n in enumerate(nodes)]
        assert daily_metrics(ds).vlr_changes == 2

    def test_domain_split_for_transitions(self):
        # UL_GPRS rides the packet domain; its node changes are SGSN moves
        ds = [
            mk(ts=DAY_START + 0, procedure=Procedure.UL_GPRS, node="sgsn-1"),
            mk(ts=DAY_START + 1, procedure=Procedure.UL_GPRS, node="sgsn-2"),
            mk(ts=DAY_START + 2, procedure=Procedure.SAI, node="vlr-1"),
        ]
        m = daily_metrics(ds)
        assert m.sgsn_changes == 1
        assert m.vlr_changes == 0

    def test_lte_operator_changes(self):
        ds = [
            mk(ts=DAY_START + i, protocol=Protocol.DIAMETER, procedure=Procedure.UL,
               operator=op)
            for i, op in enumerate(["op-1", "op-2", "op-2", "op-1"])
        ]
        assert daily_metrics(ds).lte_operator_changes == 2

    def test_mean_duration_and_classes(self):
        ds = [
            mk(ts=DAY_START, duration=1000),
            mk(ts=DAY_START + 1, duration=3000),
            mk(ts=DAY_START + 2, duration=8000),
        ]
        m = daily_metrics(ds)
        assert m.mean_duration_ms == pytest.approx(4000.0)
        assert m.unusual_duration_count == 1
        assert m.rare_duration_count == 1

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_consistency_with_matrix(self, seed):
        rng = np.random.default_rng(seed)
        ds = random_day_dialogues(rng)
        m = daily_metrics(ds)
        mat = build_matrix(ds, "dev-1", DAY)
        assert m.total_dialogues == mat.values[0:8].sum()
        assert m.map_sai == mat.values[MATRIX_ROWS.index("MAP_SAI")].sum()
        assert m.dia_cl == mat.values[MATRIX_ROWS.index("DIA_CL")].sum()
        assert m.map_rejects + m.dia_rejects == mat.values[
            MATRIX_ROWS.index("REJECT")
        ].sum()
        assert m.unusual_duration_count == mat.values[
            MATRIX_ROWS.index("DUR_UNUSUAL")
        ].sum()


class TestMonthlyFeatures:
    def test_constant_metric(self):
        day = DailyMetrics(map_dialogues=5.0, total_dialogues=5.0)
        v = monthly_features("dev-1", [day] * 30)
        assert v.get("map_dialogues_mean") == 5.0
        assert v.get("map_dialogues_std") == 0.0
        assert v.get("map_dialogues_min") == 5.0
        assert v.get("map_dialogues_max") == 5.0

    def test_active_day_counts(self):
        active = DailyMetrics(map_dialogues=3.0, total_dialogues=3.0)
        days = [active] * 12 + [DailyMetrics()] * 18
        v = monthly_features("dev-1", days)
        assert v.get("active_days_map") == 12.0
        assert v.get("active_days_dia") == 0.0
        assert v.get("total_month_dialogues") == 36.0

    def test_inactivity_gap_and_first_active(self):
        active = DailyMetrics(total_dialogues=1.0)
        idle = DailyMetrics()
        days = [idle, idle, active, idle, idle, idle, active]
        v = monthly_features("dev-1", days)
        assert v.get("max_inactivity_gap_days") == 3.0
        assert v.get("first_active_day_index") == 2.0

    def test_never_active_sentinel(self):
        v = monthly_features("dev-1", [DailyMetrics()] * 10)
        assert v.get("first_active_day_index") == 10.0
        assert v.get("max_inactivity_gap_days") == 10.0

    def test_stationary_fraction(self):
        moving = DailyMetrics(vlr_changes=2.0, total_dialogues=1.0)
        still = DailyMetrics(total_dialogues=1.0)
        v = monthly_features("dev-1", [moving] * 6 + [still] * 18)
        assert v.get("stationary_day_fraction") == pytest.approx(18 / 24)

    def test_rejects_days(self):
        rej = DailyMetrics(map_rejects=1.0, total_dialogues=2.0)
        v = monthly_features("dev-1", [rej] * 4 + [DailyMetrics()] * 26)
        assert v.get("days_with_rejects") == 4.0

    @given(perm_seed=st.integers(0, 1_000))
    @settings(max_examples=20, deadline=None)
    def test_permutation_sensitivity(self, perm_seed):
        rng = np.random.default_rng(perm_seed)
        days = [
            DailyMetrics(
                map_dialogues=float(rng.integers(0, 5)),
                total_dialogues=float(rng.integers(0, 5)),
            )
            for _ in range(15)
        ]
        base = monthly_features("d", days).values
        shuffled = list(days)
        rng.shuffle(shuffled)
        perm = monthly_features("d", shuffled).values
        order_free = [
            i
            for i, name in enumerate(FEATURE_NAMES)
            if name not in ("max_inactivity_gap_days", "first_active_day_index")
        ]
        assert np.allclose(base[order_free], perm[order_free])

    def test_fill_window(self):
        by_day = {"2022-10-02": DailyMetrics(total_dialogues=4.0)}
        days = day_range("2022-10-01", 3)
        filled = fill_window(by_day, days)
        assert [m.total_dialogues for m in filled] == [0.0, 4.0, 0.0]

    def test_empty_window_rejected(self):
        with pytest.raises(ValueError):
            monthly_features("d", [])


class TestStandardize:
    def test_constant_column_floored_to_zero(self):
        X = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
        Xs, params = standardize(X)
        assert np.allclose(Xs[:, 1], 0.0)
        assert params.std[1] == ScalerParams.STD_FLOOR

    def test_fit_transform_centering(self):
        rng = np.random.default_rng(0)
        X = rng.normal(3.0, 2.0, size=(200, 5))
        Xs, _ = standardize(X)
        assert np.abs(Xs.mean(axis=0)).max() < 1e-9
        assert np.allclose(Xs.std(axis=0), 1.0)

    def test_shift_maps_to_shift_over_std(self):
        rng = np.random.default_rng(1)
        X = rng.normal(0.0, 4.0, size=(500, 3))
        _, params = standardize(X)
        shift = np.array([1.0, -2.0, 0.5])
        Xs, _ = standardize(X + shift, params)
        expected = X.mean(axis=0) * 0 + shift / params.std  # original mean cancels
        assert np.allclose(Xs.mean(axis=0) - (X.mean(axis=0) - params.mean) / params.std,
                           shift / params.std)
        assert np.allclose(Xs.mean(axis=0), shift / params.std, atol=1e-12)
        assert expected.shape == (3,)

    def test_column_mismatch_rejected(self):
        X = np.zeros((4, 3))
        _, params = standardize(X)
        with pytest.raises(ValueError):
            standardize(np.zeros((4, 5)), params)

    def test_params_round_trip(self):
        _, params = standardize(np.random.default_rng(2).normal(size=(50, 4)))
        again = ScalerParams.from_dict(params.to_dict())
        assert np.array_equal(again.mean, params.mean)
        assert np.array_equal(again.std, params.std)


class TestClusteringFeatures:
    def test_b1_map_only_device(self):
        days = [DailyMetrics(map_dialogues=4.0, total_dialogues=4.0)] * 30
        v = monthly_features("d", days)
        b1 = clustering_features(v, Branch.B1)
        assert b1.shape == (2,)
        assert b1[0] == 4.0 and b1[1] == 0.0

    def test_b1_from_daily_metrics(self):
        m = DailyMetrics(map_dialogues=3.0, dia_dialogues=7.0, total_dialogues=10.0)
        assert clustering_features(m, Branch.B1).tolist() == [3.0, 7.0]

    def test_b2_shape_and_shares(self):
        m = DailyMetrics(
            map_dialogues=6.0,
            dia_dialogues=4.0,
            map_sai=3.0,
            dia_sai=2.0,
            map_ul=2.0,
            dia_ul=1.0,
            map_cl=1.0,
            dia_cl=1.0,
            vlr_changes=2.0,
            sgsn_changes=1.0,
            lte_operator_changes=0.5,
            total_dialogues=10.0,
        )
        b2 = clustering_features(m, Branch.B2)
        assert b2.shape == (8,)
        assert b2[0] == 10.0
        assert b2[1] == pytest.approx(0.6)
        assert b2[2] == pytest.approx(0.4)
        assert b2[3] == 5.0   # sai across protocols
        assert b2[4] == 3.0   # ul across protocols
        assert b2[5] == 2.0   # cl across protocols
        assert b2[6] == 3.0   # circuit+packet node moves
        assert b2[7] == 0.5

    def test_inactive_device_shares_zero(self):
        b2 = clustering_features(DailyMetrics(), Branch.B2)
        assert b2.tolist() == [0.0] * 8

    def test_unknown_branch(self):
        with pytest.raises(ValueError):
            clustering_features(DailyMetrics(), "b3")

    @pytest.mark.parametrize("branch", [Branch.B1, Branch.B2])
    def test_bulk_matches_object_path(self, branch):
        rng = np.random.default_rng(9)
        frame = pd.DataFrame(
            rng.uniform(0, 20, size=(6, N_FEATURES)),
            index=pd.Index([f"d{i}" for i in range(6)], name="device_id"),
            columns=list(FEATURE_NAMES),
        )
        bulk = clustering_matrix(frame, branch)
        for i, dev in enumerate(frame.index):
            v = FeatureVector(device_id=dev, values=frame.iloc[i].to_numpy())
            assert np.allclose(bulk[i], clustering_features(v, branch))

    def test_bulk_zero_total_share(self):
        frame = pd.DataFrame(
            np.zeros((2, N_FEATURES)),
            index=pd.Index(["a", "b"], name="device_id"),
            columns=list(FEATURE_NAMES),
        )
        assert clustering_matrix(frame, Branch.B2).tolist() == [[0.0] * 8] * 2


class TestBulkPaths:
    def _frame(self, dialogues):
        return pd.DataFrame(
            {
                "device_id": [d.device_id for d in dialogues],
                "client_id": [d.client_id for d in dialogues],
                "country": [d.country for d in dialogues],
                "timestamp": [d.timestamp for d in dialogues],
                "protocol": [d.protocol.value for d in dialogues],
                "procedure": [d.procedure.value for d in dialogues],
                "result": [d.result.value for d in dialogues],
                "duration_ms": [d.duration_ms for d in dialogues],
                "visited_operator": [d.visited_operator for d in dialogues],
                "visited_node": [d.visited_node for d in dialogues],
                "home_node": [d.home_node for d in dialogues],
            }
        )

    @given(seed=st.integers(0, 5_000))
    @settings(max_examples=15, deadline=None)
    def test_metrics_frame_matches_object_path(self, seed):
        rng = np.random.default_rng(seed)
        dialogues = []
        for dev in ("dev-a", "dev-b", "dev-c"):
            dialogues += random_day_dialogues(rng, device=dev)
        if not dialogues:
            return
        frame = metrics_frame(self._frame(dialogues))
        for dev in ("dev-a", "dev-b", "dev-c"):
            subset = [d for d in dialogues if d.device_id == dev]
            if not subset:
                assert dev not in frame.index.get_level_values(0)
                continue
            expected = daily_metrics(subset).as_array()
            got = frame.loc[(dev, DAY)].to_numpy()
            assert np.allclose(got, expected)

    @given(seed=st.integers(0, 5_000))
    @settings(max_examples=15, deadline=None)
    def test_matrices_from_frame_matches_object_path(self, seed):
        rng = np.random.default_rng(seed)
        dialogues = random_day_dialogues(rng, device="dev-a", n=40)
        dialogues += random_day_dialogues(rng, device="dev-b", n=25)
        cubes = matrices_from_frame(self._frame(dialogues), DAY)
        for dev in ("dev-a", "dev-b"):
            subset = [d for d in dialogues if d.device_id == dev]
            expected = build_matrix(subset, dev, DAY).values
            assert np.array_equal(cubes[dev], expected)

    def test_features_from_metrics_frame_zero_fills(self):
        dialogues = [mk(device="dev-1", ts=DAY_START + 10)] * 3
        frame = metrics_frame(self._frame(dialogues))
        days = day_range(DAY, 5)
        feats = features_from_metrics_frame(frame, days, ["dev-1", "dev-2"])
        assert feats.loc["dev-1", "active_days_map"] == 1.0
        assert feats.loc["dev-2"].to_numpy()[:88].sum() == 0.0
        assert feats.loc["dev-2", "first_active_day_index"] == 5.0

    def test_empty_frame(self):
        frame = metrics_frame(self._frame([]))
        assert frame.empty


class TestStores:
    def test_matrix_store_round_trip(self):
        rng = np.random.default_rng(3)
        mats = {
            "dev-1": rng.integers(0, 5, size=(13, 96)),
            "dev-2": rng.integers(0, 5, size=(13, 96)),
        }
        buf = io.StringIO()
        write_matrix_day(mats, buf)
        text = buf.getvalue()
        header = text.splitlines()[0]
        assert header.startswith("device_id,row_name,c0,") and header.endswith(",c95")
        again = read_matrix_day(io.StringIO(text))
        for dev, m in mats.items():
            assert np.array_equal(again[dev], m)

    def test_feature_store_round_trip(self):
        rng = np.random.default_rng(4)
        frame = pd.DataFrame(
            rng.normal(size=(3, N_FEATURES)),
            index=pd.Index(["a", "b", "c"], name="device_id"),
            columns=list(FEATURE_NAMES),
        )
        buf = io.StringIO()
        write_feature_vectors(frame, buf)
        again = read_feature_vectors(io.StringIO(buf.getvalue()))
        assert np.allclose(again.to_numpy(), frame.to_numpy())
