import random

import pytest

from structdm.expert import ExpertConfig, ExpertPolicy
from structdm.ontology import sample_goal
from structdm.tracker import (
    DialogueState,
    SystemAct,
    TrackingError,
    UserAct,
    acts_from_dicts,
    apply_system_act,
    apply_user_acts,
    search_constraints,
    turn_to_dict,
)
from structdm.usersim import run_episode


def fresh(db):
    return DialogueState.initial(db)


def test_act_invariants():
    with pytest.raises(TrackingError):
        UserAct("inform", "restaurant", "food")
    with pytest.raises(TrackingError):
        UserAct("request", "restaurant")
    with pytest.raises(TrackingError):
        UserAct("request_book")
    with pytest.raises(TrackingError):
        UserAct("thank", slot="food")
    with pytest.raises(TrackingError):
        SystemAct("inform", "restaurant")
    with pytest.raises(TrackingError):
        SystemAct("offer")
    assert SystemAct("bye").domain is None


def test_inform_sets_constraint_and_count(db):
    s = apply_user_acts(fresh(db), [UserAct("inform", "restaurant", "food", "italian")], db)
    ds = s["restaurant"]
    assert ds.constraints == {"food": "italian"}
    assert ds.db_count == len(db.query("restaurant", {"food": "italian"}))
    assert s.active_domain == "restaurant"
    assert ds.last_user_slot_acts == {"food": {"inform"}}


def test_bye_only_terminates(db):
    before = apply_user_acts(fresh(db), [UserAct("inform", "hotel", "area", "north")], db)
    after = apply_user_acts(before, [UserAct("bye")], db)
    assert after.terminated
    assert after["hotel"].constraints == before["hotel"].constraints
    assert after["hotel"].db_count == before["hotel"].db_count
    assert after.active_domain == before.active_domain


def test_last_writer_wins(db):
    s = apply_user_acts(
        fresh(db),
        [UserAct("inform", "restaurant", "food", "italian"), UserAct("inform", "restaurant", "food", "thai")],
        db,
    )
    assert s["restaurant"].constraints["food"] == "thai"


def test_last_acts_replaced_each_turn(db):
    s = apply_user_acts(fresh(db), [UserAct("request", "restaurant", "phone")], db)
    s = apply_user_acts(s, [UserAct("thank")], db)
    assert s["restaurant"].last_user_slot_acts == {}
    assert s["restaurant"].last_user_general_acts == {"thank"}
    assert "phone" in s["restaurant"].requested


def test_unknown_references_raise(db):
    with pytest.raises(TrackingError):
        apply_user_acts(fresh(db), [UserAct("inform", "police", "area", "north")], db)
    with pytest.raises(TrackingError):
        apply_user_acts(fresh(db), [UserAct("inform", "restaurant", "colour", "red")], db)


def test_offer_picks_first_match(db):
    s = apply_user_acts(fresh(db), [UserAct("inform", "restaurant", "area", "north")], db)
    s = apply_system_act(s, SystemAct("offer", "restaurant"), db)
    first = db.query("restaurant", {"area": "north"})[0]
    assert s["restaurant"].offered == first.id
    assert s["restaurant"].value_known["phone"]


def test_offer_with_no_match_becomes_nooffer(db):
    s = fresh(db)
    # find an unsatisfiable pair
    for food in db.ontology.domain("restaurant").slot("food").values:
        for area in db.ontology.domain("restaurant").slot("area").values:
            if not db.query("restaurant", {"food": food, "area": area}):
                break
        else:
            continue
        break
    s = apply_user_acts(s, [UserAct("inform", "restaurant", "food", food), UserAct("inform", "restaurant", "area", area)], db)
    assert s["restaurant"].db_count == 0
    s = apply_system_act(s, SystemAct("offer", "restaurant"), db)
    assert s["restaurant"].offered is None
    assert s["restaurant"].last_sys_general_acts == {"nooffer"}
    assert s.warnings["offer_without_match"] == 1


def test_book_before_offer_is_noop(db):
    s = apply_system_act(fresh(db), SystemAct("book", "hotel"), db)
    assert not s["hotel"].booked
    assert s.warnings["book_before_offer"] == 1


def test_inform_value_from_offered_entity(db):
    from structdm.tracker import resolve_system_act

    s = apply_user_acts(fresh(db), [UserAct("inform", "restaurant", "food", "indian")], db)
    s = apply_system_act(s, SystemAct("offer", "restaurant"), db)
    act = resolve_system_act(s, SystemAct("inform", "restaurant", "phone"), db)
    assert act.value == db.entity(s["restaurant"].offered).assignments["phone"]


def test_booking_records_params(db):
    s = apply_user_acts(fresh(db), [UserAct("inform", "hotel", "area", "east"),
                                    UserAct("inform", "hotel", "book_stay", "2")], db)
    s = apply_system_act(s, SystemAct("offer", "hotel"), db)
    s = apply_system_act(s, SystemAct("book", "hotel"), db)
    assert s["hotel"].booked and s["hotel"].booking == {"book_stay": "2"}


def test_changing_search_drops_offer(db):
    s = apply_user_acts(fresh(db), [UserAct("inform", "hotel", "area", "east")], db)
    s = apply_system_act(s, SystemAct("offer", "hotel"), db)
    offered = db.entity(s["hotel"].offered)
    other = next(v for v in db.ontology.domain("hotel").slot("area").values if v != offered.assignments["area"])
    s = apply_user_acts(s, [UserAct("inform", "hotel", "area", other)], db)
    assert s["hotel"].offered is None and not s["hotel"].booked


def test_state_updates_are_pure(db):
    s0 = fresh(db)
    apply_user_acts(s0, [UserAct("inform", "train", "day", "monday")], db)
    assert s0["train"].constraints == {} and s0.turn == 0


def test_transcript_roundtrip():
    acts = [UserAct("inform", "hotel", "area", "north"), UserAct("bye")]
    row = turn_to_dict(0, "user", acts)
    assert row["speaker"] == "user" and acts_from_dicts("user", row["acts"]) == acts


def _check_episode_invariants(record, db):
    state = fresh(db)
    was_terminated = False
    for user_acts, sys_act in record.turns:
        state = apply_user_acts(state, user_acts, db)
        for d, ds in state.domains.items():
            oracle = [e for e in db.entities(d) if e.matches(search_constraints(ds, db.ontology, d))]
            assert ds.db_count == len(oracle)
        before = state
        state = apply_system_act(state, sys_act, db)
        ds = state.domains.get(sys_act.domain) if sys_act.domain else None
        if sys_act.intent == "offer":
            offered = db.entity(ds.offered)
            assert offered.matches(search_constraints(before[sys_act.domain], db.ontology, sys_act.domain))
        for d in state.domains.values():
            assert not d.booked or d.offered is not None
        assert state.terminated or not was_terminated
        was_terminated = state.terminated


@pytest.mark.parametrize("noise", [0.0, 0.5, 1.0])
def test_tracker_invariants_on_random_episodes(ont, db, noise):
    policy = ExpertPolicy(ExpertConfig(noise_rate=noise))
    rng = random.Random(noise)
    for i in range(30):
        record = run_episode(policy, sample_goal(ont, db, rng), db, seed=i)
        _check_episode_invariants(record, db)
