import json
from collections import Counter
from itertools import combinations_with_replacement
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from migperf import device_model as dm
from migperf.errors import (
    AlreadyEnabled,
    Busy,
    CatalogError,
    InvalidStart,
    ModeConflict,
    NoCapacity,
    NotFound,
    UnknownProfile,
)
from oracles import brute_force_configs, brute_force_placement

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="module")
def catalog():
    return {e.model_name: e for e in dm.load_catalog()}


@pytest.fixture
def a100(catalog):
    return catalog["A100-80GB"]


@pytest.fixture
def a30(catalog):
    return catalog["A30"]


def enabled(entry, device_id=0):
    return dm.enable_mig(dm.new_device(device_id, entry))


# catalog -------------------------------------------------------------------


def test_default_catalog_has_seven_slice_a100(a100):
    assert a100.total_compute_slices == 7
    assert [p.name for p in a100.profiles] == ["1g.10gb", "2g.20gb", "3g.40gb", "4g.40gb", "7g.80gb"]


def test_empty_catalog_file(tmp_path):
    path = tmp_path / "catalog.json"
    path.write_text("")
    assert dm.load_catalog(path) == []


def _doc_with_start(start):
    return {
        "devices": [
            {
                "model_name": "X",
                "total_compute_slices": 7,
                "total_memory_gib": 80,
                "profiles": [
                    {"name": "4g.40gb", "compute_slices": 4, "memory_gib": 40, "allowed_starts": [start]}
                ],
            }
        ]
    }


def test_start_past_end_rejected(tmp_path):
    path = tmp_path / "catalog.json"
    path.write_text(json.dumps(_doc_with_start(5)))
    with pytest.raises(CatalogError, match="4g.40gb"):
        dm.load_catalog(path)


def test_syntax_error_reports_line(tmp_path):
    path = tmp_path / "catalog.json"
    path.write_text('{\n  "devices": [\n    {"model_name": }\n  ]\n}')
    with pytest.raises(CatalogError, match="line 3"):
        dm.load_catalog(path)


@pytest.mark.parametrize(
    "patch, message",
    [
        ({"name": "3g.40gb"}, "name says 3"),
        ({"allowed_starts": []}, "empty"),
        ({"allowed_starts": [0, 0]}, "strictly increasing"),
        ({"compute_slices": "4"}, "expected integer"),
    ],
)
def test_profile_invariants(tmp_path, patch, message):
    doc = _doc_with_start(0)
    doc["devices"][0]["profiles"][0].update(patch)
    path = tmp_path / "catalog.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(CatalogError, match=message):
        dm.load_catalog(path)


def test_catalog_round_trips_through_dict(catalog):
    doc = {"devices": [e.to_dict() for e in catalog.values()]}
    assert dm.parse_catalog(json.loads(json.dumps(doc))) == list(catalog.values())


# mode transitions ----------------------------------------------------------


def test_enable_mig(a100):
    state = enabled(a100)
    assert state.mig_enabled and state.instances == ()
    with pytest.raises(AlreadyEnabled):
        dm.enable_mig(state)


def test_mps_blocks_mig(a100):
    state = dm.set_mps(dm.new_device(0, a100), True)
    with pytest.raises(ModeConflict):
        dm.enable_mig(state)
    with pytest.raises(ModeConflict):
        dm.set_mps(enabled(a100), True)


# GI lifecycle ----------------------------------------------------------------


def test_seven_small_instances_then_full(a100):
    state = enabled(a100)
    for _ in range(7):
        state, _ = dm.create_gi(state, "1g.10gb")
    assert [gi.start_slice for gi in state.instances] == list(range(7))
    with pytest.raises(NoCapacity):
        dm.create_gi(state, "1g.10gb")


def test_four_and_three_cannot_coexist(a100):
    state, _ = dm.create_gi(enabled(a100), "4g.40gb")
    with pytest.raises(NoCapacity):
        dm.create_gi(state, "3g.40gb")


def test_whole_gpu_instance(a100):
    state, _ = dm.create_gi(enabled(a100), "7g.80gb")
    assert state.instances[0].start_slice == 0
    for profile in a100.profiles:
        with pytest.raises(NoCapacity):
            dm.create_gi(state, profile.name)


def test_create_errors(a100):
    state = enabled(a100)
    with pytest.raises(UnknownProfile):
        dm.create_gi(state, "5g.50gb")
    with pytest.raises(InvalidStart):
        dm.create_gi(state, "2g.20gb", start=1)
    state, _ = dm.create_gi(state, "2g.20gb", start=2)
    with pytest.raises(NoCapacity):
        dm.create_gi(state, "1g.10gb", start=3)


def test_destroy(a100):
    state, gi = dm.create_gi(enabled(a100), "3g.40gb")
    assert dm.destroy_gi(state, gi).instances == ()
    with pytest.raises(NotFound):
        dm.destroy_gi(state, 999)


def test_recreate_uses_same_start(a100):
    state = enabled(a100)
    state, a = dm.create_gi(state, "1g.10gb")
    state, b = dm.create_gi(state, "1g.10gb")
    start = state.instance(a).start_slice
    state = dm.destroy_gi(state, a)
    state, c = dm.create_gi(state, "1g.10gb")
    assert state.instance(c).start_slice == start == 0


def test_create_destroy_is_identity(a100):
    base, _ = dm.create_gi(enabled(a100), "2g.20gb")
    state, gi = dm.create_gi(base, "1g.10gb")
    assert dm.destroy_gi(state, gi) == base


# compute instances -----------------------------------------------------------


def test_ci_capacity(a100):
    state, gi = dm.create_gi(enabled(a100), "4g.40gb")
    state, _ = dm.create_ci(state, gi, 2)
    state, _ = dm.create_ci(state, gi, 2)
    with pytest.raises(NoCapacity):
        dm.create_ci(state, gi, 1)


def test_ci_errors(a100):
    state, gi = dm.create_gi(enabled(a100), "4g.40gb")
    with pytest.raises(NoCapacity):
        dm.create_ci(state, gi, 0)
    with pytest.raises(NotFound):
        dm.destroy_ci(state, gi, 1234)
    state, ci = dm.create_ci(state, gi, 1)
    with pytest.raises(Busy):
        dm.destroy_gi(state, gi)
    assert dm.destroy_gi(dm.destroy_ci(state, gi, ci), gi).instances == ()


# feasibility -------------------------------------------------------------------


def test_validate_examples(a100):
    assert not dm.validate_config(a100, ["4g.40gb", "3g.40gb"])
    empty = dm.validate_config(a100, [])
    assert empty.feasible and empty.placement == ()
    with pytest.raises(UnknownProfile):
        dm.validate_config(a100, ["9g.90gb"])


def test_validate_witness_is_lexicographically_smallest(a100):
    names = ["4g.40gb", "1g.10gb", "2g.20gb"]
    result = dm.validate_config(a100, names)
    order = ["1g.10gb", "2g.20gb", "4g.40gb"]
    assert result.feasible
    assert [n for n, _ in result.placement] == order
    assert tuple(s for _, s in result.placement) == min(brute_force_placement(a100, order))


@pytest.mark.parametrize("model", ["A100-80GB", "A30"])
def test_validate_matches_brute_force(catalog, model):
    entry = catalog[model]
    truth = brute_force_configs(entry)
    names = [p.name for p in entry.profiles]
    for size in range(8):
        for combo in combinations_with_replacement(names, size):
            assert dm.validate_config(entry, combo).feasible == (tuple(sorted(combo)) in truth), combo


def test_enumerate_single_profile():
    profile = dm.GiProfile("1g.5gb", 1, 5, (0,), 1)
    entry = dm.DeviceCatalogEntry("tiny", 1, 5, (profile,))
    assert dm.enumerate_valid_configs(entry) == {(), ("1g.5gb",)}


def test_enumerate_a30_golden(a30):
    golden = json.loads((DATA / "a30_configs.json").read_text())
    assert dm.enumerate_valid_configs(a30) == {tuple(c) for c in golden["configs"]}


def test_enumerate_a100(a100):
    configs = dm.enumerate_valid_configs(a100)
    assert ("1g.10gb",) * 7 in configs
    assert not any("4g.40gb" in c and "3g.40gb" in c for c in configs)
    assert configs == brute_force_configs(a100)


@pytest.mark.parametrize("model", ["A100-80GB", "A30"])
def test_enumeration_downward_closed(catalog, model):
    configs = dm.enumerate_valid_configs(catalog[model])
    for config in configs:
        for i in range(len(config)):
            assert config[:i] + config[i + 1:] in configs


def test_equal_split(a30, a100):
    assert dm.equal_split_profile(a30, 4).name == "1g.6gb"
    assert dm.equal_split_profile(a30, 1).name == "4g.24gb"
    assert dm.equal_split_profile(a30, 3) is None
    assert dm.equal_split_profile(a100, 7).name == "1g.10gb"


# randomized state machine ---------------------------------------------------

ops = st.lists(
    st.tuples(
        st.sampled_from(["create", "create_at", "destroy", "ci", "ci_destroy"]),
        st.integers(0, 10),
        st.integers(0, 10),
    ),
    max_size=25,
)


@settings(max_examples=200, deadline=None)
@given(model=st.sampled_from(["A100-80GB", "A30"]), steps=ops)
def test_random_sequences_keep_intervals_disjoint(catalog, model, steps):
    entry = catalog[model]
    state = enabled(entry)
    for op, a, b in steps:
        profile = entry.profiles[a % len(entry.profiles)]
        try:
            if op == "create":
                before = state
                state, _ = dm.create_gi(state, profile.name)
                assert dm.validate_config(entry, list(state.profile_multiset().elements()))
                assert before.instances != state.instances
            elif op == "create_at":
                state, _ = dm.create_gi(state, profile.name, start=b % entry.total_compute_slices)
            elif op == "destroy" and state.instances:
                gi = state.instances[a % len(state.instances)]
                state = dm.destroy_gi(state, gi.gi_id)
            elif op == "ci" and state.instances:
                gi = state.instances[a % len(state.instances)]
                state, _ = dm.create_ci(state, gi.gi_id, 1 + b % 4)
            elif op == "ci_destroy" and state.instances:
                gi = state.instances[a % len(state.instances)]
                if gi.compute_instances:
                    state = dm.destroy_ci(state, gi.gi_id, gi.compute_instances[0].ci_id)
        except (NoCapacity, InvalidStart, Busy):
            pass
        spans = state.occupied_intervals()
        assert all(x[1] <= y[0] for x, y in zip(spans, spans[1:]))
        for gi in state.instances:
            assert gi.start_slice in gi.profile.allowed_starts
            assert gi.ci_slices_used <= gi.profile.compute_slices
        assert not _violates(entry, state.profile_multiset())


def _violates(entry, counts):
    return any(counts[p.name] > p.max_count for p in entry.profiles) or any(
        all(counts[n] for n in pair) for pair in entry.incompatible
    )


def test_state_dict_round_trip(a100):
    state, gi = dm.create_gi(enabled(a100), "2g.20gb")
    state, _ = dm.create_ci(state, gi, 1)
    back = dm.state_from_dict(json.loads(json.dumps(dm.state_to_dict(state))), a100)
    assert back == state and back.next_id == state.next_id
