import math
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from wvasim.domain import (
    BoundedNormal,
    HpaParams,
    InventoryRow,
    Outage,
    FaultProgram,
    SaturationParams,
    ScenarioError,
    TrafficProgram,
    check_scenario,
    config_digest,
    dump_scenario,
    load_scenario,
    scenario_from_dict,
    scenario_to_dict,
    validate_scenario,
)

from conftest import SCENARIO_DIR, scenario, variant


def test_published_thresholds_validate():
    cfg = scenario(variant())
    assert validate_scenario(cfg) is cfg
    p = cfg.variants[0].policy_params
    assert (p.tau_kv, p.tau_q, p.gamma_kv, p.min_nonsaturated_for_scaledown) == (0.8, 5, 0.3, 2)


def test_gamma_at_or_above_tau_is_rejected():
    bad = replace(variant(), policy_params=SaturationParams(gamma_kv=0.9, tau_kv=0.8))
    with pytest.raises(ScenarioError) as err:
        validate_scenario(scenario(bad))
    assert "gamma-not-below-tau" in err.value.codes


def test_duplicate_variant_ids_are_rejected():
    with pytest.raises(ScenarioError) as err:
        validate_scenario(scenario(variant("a100"), variant("a100", hw="H100")))
    assert "duplicate-variant-id" in err.value.codes


def test_every_violation_is_reported_with_its_path():
    cfg = scenario(variant(), phases=((5.0, 1.0),), duration=0.0, hard_queue_cap=0)
    paths = {v.path for v in check_scenario(cfg)}
    assert {"traffic_program.phases[0]", "duration", "hard_queue_cap"} <= paths


def test_scale_from_zero_interval_cannot_exceed_control_interval():
    cfg = scenario(variant(), scale_from_zero_interval=60.0)
    assert any(v.path == "scale_from_zero_interval" for v in check_scenario(cfg))


def test_bad_outage_and_duplicate_source_names():
    from wvasim.domain import SourceSpec
    cfg = scenario(variant(), faults=FaultProgram(outages=(Outage(10.0, 5.0),)),
                   metrics_sources=(SourceSpec("a"), SourceSpec("a")))
    codes = {v.code for v in check_scenario(cfg)}
    assert {"invalid-field", "duplicate-name"} <= codes


def test_unknown_keys_in_a_scenario_file_are_errors():
    data = scenario_to_dict(scenario(variant()))
    data["variants"][0]["gpu_count"] = 2
    with pytest.raises(ScenarioError) as err:
        scenario_from_dict(data)
    assert "variants[0]" in str(err.value)


@pytest.mark.parametrize("path", sorted(SCENARIO_DIR.glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_scenarios_load_and_round_trip(path):
    cfg = validate_scenario(load_scenario(path))
    assert scenario_from_dict(scenario_to_dict(cfg)) == cfg
    assert config_digest(cfg) == config_digest(load_scenario(path))


def test_null_drain_grace_means_wait_forever():
    cfg = load_scenario(SCENARIO_DIR / "exp1_reactivity.yaml")
    assert math.isinf(cfg.drain_grace)


def test_yaml_dump_round_trips(tmp_path):
    import yaml
    cfg = scenario(variant(), variant("va-h100", hw="H100", cost=2.5),
                   inventory=(InventoryRow("n1", "A100", 4, 4),), hpa_params=HpaParams(stabilization_window=60.0))
    text = dump_scenario(cfg)
    assert scenario_from_dict(yaml.safe_load(text)) == cfg


names = st.text("abcdefgh-0123456789", min_size=1, max_size=8)


@st.composite
def configs(draw):
    n = draw(st.integers(1, 3))
    ids = draw(st.lists(names, min_size=n, max_size=n, unique=True))
    variants = []
    for vid in ids:
        lo = draw(st.integers(0, 3))
        hi = draw(st.integers(max(lo, 1), 12))
        tau = draw(st.floats(0.2, 1.0))
        params = SaturationParams(
            tau_kv=tau, tau_q=draw(st.integers(1, 10)), gamma_kv=draw(st.floats(0.01, tau - 0.01)),
            gamma_q=draw(st.floats(0.0, 5.0)), min_replicas=lo, max_replicas=hi)
        variants.append(replace(variant(vid, cost=draw(st.floats(0.1, 10.0)),
                                        gpus=draw(st.integers(1, 8))), policy_params=params))
    starts = sorted(set(draw(st.lists(st.floats(1.0, 500.0), max_size=4))))
    phases = ((0.0, draw(st.floats(0.0, 10.0))),) + tuple((s, draw(st.floats(0.0, 10.0))) for s in starts)
    drain = draw(st.sampled_from([math.inf, 0.0, 12.5]))
    return scenario(*variants, phases=phases, drain_grace=drain, rng_seed=draw(st.integers(0, 2**63)),
                    cluster_gpu_budget=draw(st.none() | st.integers(1, 64)))


@given(configs())
def test_round_trip_through_the_file_format(cfg):
    import yaml
    assert not check_scenario(cfg)
    assert scenario_from_dict(yaml.safe_load(dump_scenario(cfg))) == cfg


@given(configs())
def test_validation_is_pure(cfg):
    assert check_scenario(cfg) == check_scenario(cfg)
    assert config_digest(cfg) == config_digest(cfg)


def test_bounded_normal_invariants_are_checked():
    tp = TrafficProgram(phases=((0.0, 1.0),), input_dist=BoundedNormal(0, 10, 20.0, 0.0))
    cfg = replace(scenario(variant()), traffic_program=tp)
    paths = {v.path for v in check_scenario(cfg)}
    assert {"traffic_program.input_dist.min", "traffic_program.input_dist.mean",
            "traffic_program.input_dist.stdev"} <= paths
