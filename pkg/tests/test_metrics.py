import logging
from dataclasses import replace

import pytest

from wvasim.cluster import ClusterSim
from wvasim.domain import FaultProgram, InventoryRow, Outage, SourceSpec
from wvasim.harness import run_scenario
from wvasim.metrics import (
    SNAPSHOTS,
    CapacityError,
    FileSource,
    MetricsSourceError,
    RefreshSpec,
    RegistryError,
    SimSource,
    build_inventory,
    discover_capacity,
    file_source_refresh,
    read_inventory_csv,
    read_snapshot_csv,
    registry_build,
    sim_source_refresh,
    write_snapshot_csv,
)

from conftest import scenario, snap, variant


def two_variant_sim():
    cfg = scenario(variant("a100", initial=2), variant("h100", hw="H100", initial=1))
    return ClusterSim(cfg)


def test_no_outage_means_fresh_snapshots():
    sim = two_variant_sim()
    assert not any(s.stale for s in sim_source_refresh(sim, FaultProgram(), 10.0))


def test_global_outage_marks_everything_stale():
    faults = FaultProgram(outages=(Outage(100.0, 160.0),))
    sim = two_variant_sim()
    assert all(s.stale for s in sim_source_refresh(sim, faults, 130.0))
    assert not any(s.stale for s in sim_source_refresh(sim, faults, 160.0))


def test_scoped_outage_marks_only_that_variant():
    faults = FaultProgram(outages=(Outage(100.0, 160.0, "variant:a100"),))
    snaps = sim_source_refresh(two_variant_sim(), faults, 130.0)
    assert {s.variant_id for s in snaps if s.stale} == {"a100"}
    assert {s.variant_id for s in snaps if not s.stale} == {"h100"}


def test_get_returns_the_last_refresh_and_filters_by_variant():
    src = SimSource(two_variant_sim())
    src.refresh(RefreshSpec(5.0))
    hit = src.get(SNAPSHOTS, {"variant": "h100"})
    assert hit.fetched_at == 5.0 and [s.variant_id for s in hit.value] == ["h100"]
    assert src.get("unknown") is None


def test_registry_builds_named_sources():
    reg = registry_build([SourceSpec("primary", "sim")], sim=two_variant_sim())
    assert len(reg) == 1 and isinstance(reg.resolve("primary"), SimSource)


def test_registry_rejects_duplicates_and_unknown_kinds():
    with pytest.raises(RegistryError) as err:
        registry_build([SourceSpec("a"), SourceSpec("a")])
    assert err.value.code == "duplicate-name"
    with pytest.raises(RegistryError) as err:
        registry_build([SourceSpec("a", "prometheus")])
    assert err.value.code == "unknown-source-kind"


def test_missing_replay_file_fails_on_first_refresh_not_at_build(tmp_path):
    reg = registry_build([SourceSpec("replay", "file", str(tmp_path / "nope.csv"))])
    with pytest.raises(MetricsSourceError) as err:
        reg.resolve("replay").refresh(RefreshSpec(0.0))
    assert err.value.code == "missing-file"


def test_snapshot_csv_round_trip_and_latest_per_replica(tmp_path):
    path = tmp_path / "s.csv"
    rows = [snap("r1", 0.1, t=0.0), snap("r1", 0.2, t=30.0), snap("r2", 0.3, t=30.0, stale=True),
            snap("r1", 0.9, t=60.0)]
    write_snapshot_csv(rows, path)
    assert read_snapshot_csv(path) == rows
    latest = file_source_refresh(path, 45.0)
    assert [(s.replica_id, s.kv_usage, s.stale) for s in latest] == [("r1", 0.2, False), ("r2", 0.3, True)]


def test_empty_snapshot_file_yields_no_snapshots(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    assert file_source_refresh(path, 100.0) == []


def test_malformed_row_names_its_line(tmp_path):
    path = tmp_path / "bad.csv"
    write_snapshot_csv([snap("r1", 0.1)], path)
    with open(path, "a") as fh:
        fh.write("30.0,r1,va-a100,lots,0,0,false\n")
    with pytest.raises(MetricsSourceError) as err:
        FileSource(path).refresh(RefreshSpec(60.0))
    assert err.value.code == "parse-error" and ":3:" in str(err.value)


def test_inventory_budget_is_the_usable_sum():
    rows = [InventoryRow(f"n{i}", "A100", 4, 4) for i in range(3)]
    inv, budget = discover_capacity(rows)
    assert budget == 12
    assert inv.replica_cap(variant(hw="A100", gpus=2)) == 6


def test_budget_is_order_independent():
    rows = [InventoryRow("n1", "A100", 4, 3), InventoryRow("n2", "H100", 8, 8), InventoryRow("n1", "H100", 2, 2)]
    assert discover_capacity(rows)[1] == discover_capacity(list(reversed(rows)))[1] == 13


def test_missing_hardware_class_caps_at_zero():
    inv, _ = discover_capacity([InventoryRow("n1", "A100", 4, 4)])
    assert inv.replica_cap(variant("h100", hw="H100")) == 0


def test_empty_inventory_in_constrained_mode_is_an_error(caplog):
    with pytest.raises(CapacityError) as err:
        discover_capacity([], constrained=True)
    assert err.value.code == "budget-zero"
    with caplog.at_level(logging.WARNING):
        assert discover_capacity([], constrained=False)[1] == 0
    assert "zero GPU budget" in caplog.text


def test_malformed_inventory(tmp_path):
    with pytest.raises(CapacityError):
        build_inventory([InventoryRow("n1", "A100", 2, 5)])
    path = tmp_path / "inv.csv"
    path.write_text("node_id,gpu_model,count,gpus_usable\nn1,A100,four,4\n")
    with pytest.raises(CapacityError) as err:
        read_inventory_csv(path)
    assert err.value.code == "malformed-inventory"


def test_inventory_csv_round_trip(tmp_path):
    path = tmp_path / "inv.csv"
    path.write_text("node_id,gpu_model,count,gpus_usable\nn1,A100,4,4\nn2,H100,8,6\n")
    inv, budget = discover_capacity(path)
    assert budget == 10 and inv.usable_by_model() == {"A100": 4, "H100": 6}


def test_inventory_without_h100_means_no_h100_replicas(scenario_dir):
    from wvasim.domain import load_scenario
    cfg = load_scenario(scenario_dir / "exp2_cost_tiering.yaml")
    cfg = replace(cfg, inventory=(InventoryRow("n1", "A100", 4, 4),))
    result = run_scenario(cfg)
    assert all(c.variant_id != "va-h100" for c in result.commands)
    assert all(row["replicas_observed"] == 0 for row in result.timeseries if row["variant"] == "va-h100")


def test_replayed_snapshots_reproduce_the_decision_trace(tmp_path, scenario_dir):
    from wvasim.domain import load_scenario
    cfg = load_scenario(scenario_dir / "exp1_reactivity.yaml")
    first = run_scenario(cfg, out_dir=tmp_path / "live")
    replay = replace(cfg, metrics_sources=(SourceSpec("replay", "file", str(tmp_path / "live" / "snapshots.csv")),))
    second = run_scenario(replay)
    assert second.decision_trace == first.decision_trace
    assert second.outcome.event_log_hash == first.outcome.event_log_hash


def test_only_fresh_snapshots_are_ever_consumed(scenario_dir):
    from wvasim.domain import load_scenario
    result = run_scenario(load_scenario(scenario_dir / "exp4_metrics_outage.yaml"))
    ticks = {row["time"] for row in result.decision_trace}
    assert ticks
    assert all(s.tick_time in ticks for s in result.snapshots)
