import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structdm.dip import (
    INDEPENDENT_DIM,
    SLOT_DIM,
    ActionCatalog,
    GlobalLayout,
    MappingError,
    featurize,
    valid_mask,
)
from structdm.expert import ExpertConfig, ExpertPolicy, select_active_domain
from structdm.ontology import sample_goal
from structdm.tracker import DialogueState, SystemAct, UserAct, apply_user_acts
from structdm.usersim import run_episode


def reference_featurize(state, domain, ont):
    """Independent re-coding of the feature layout, written from the layout table."""
    ds = state.domains[domain]
    user_gen = ["bye", "greet", "thank", "request_book", "affirm", "negate"]
    sys_gen = ["offer", "book", "reqmore", "nooffer", "bye", "pad"]
    ind = []
    ind += [1.0 if a in ds.last_user_general_acts else 0.0 for a in user_gen]
    ind += [1.0 if a in ds.last_sys_general_acts else 0.0 for a in sys_gen]
    bucket = ds.db_count if ds.db_count < 5 else 5
    ind += [1.0 if b == bucket else 0.0 for b in range(6)]
    ind += [float(state.terminated), float(ds.offered is not None), float(ds.booked)]
    rows = []
    for slot in ont.domain(domain).slots:
        u = ds.last_user_slot_acts.get(slot.name, set())
        s = ds.last_sys_slot_acts.get(slot.name, set())
        rows.append([
            "inform" in u, "request" in u,
            "inform" in s, "request" in s, "select" in s,
            ds.value_known.get(slot.name, False), slot.needed_for_find, slot.needed_for_book,
        ])
    return np.array(ind), np.array(rows, dtype=float)


def episode_states(ont, db, n_episodes=20, noise=0.4):
    states = []

    class Spy(ExpertPolicy):
        def act(self, state, db_, rng):
            states.append(state)
            return super().act(state, db_, rng)

    rng = random.Random(5)
    for i in range(n_episodes):
        run_episode(Spy(ExpertConfig(noise_rate=noise)), sample_goal(ont, db, rng), db, seed=i)
    return states


def test_fresh_state_features(ont, db):
    s = DialogueState.initial(db)
    for dom in ont.domains:
        dip = featurize(s, dom.name, ont)
        expected = np.zeros(INDEPENDENT_DIM)
        expected[12 + 5] = 1.0  # all 50 entities match: top bucket
        assert np.array_equal(dip.independent, expected)
        assert dip.per_slot.shape == (dom.n_slots, SLOT_DIM)
        for row, slot in zip(dip.per_slot, dom.slots):
            assert list(row) == [0, 0, 0, 0, 0, 0, slot.needed_for_find, slot.needed_for_book]


def test_db_bucket_three(ont, db):
    s = DialogueState.initial(db)
    s.domains["restaurant"].db_count = 3
    assert np.flatnonzero(featurize(s, "restaurant", ont).independent[12:18]).tolist() == [3]


def test_matches_reference_featurizer(ont, db):
    states = episode_states(ont, db)
    assert len(states) >= 100
    for state in states[:100]:
        for dom in ont.domain_names:
            dip = featurize(state, dom, ont)
            ind, rows = reference_featurize(state, dom, ont)
            assert np.array_equal(dip.independent, ind)
            assert np.array_equal(dip.per_slot, rows)
            assert set(np.unique(dip.independent)) <= {0.0, 1.0}


def test_unknown_domain(ont, db):
    with pytest.raises(Exception):
        featurize(DialogueState.initial(db), "police", ont)


def test_catalog_layout(ont):
    cat = ActionCatalog.for_domain(ont, "restaurant")
    assert len(cat) == 5 + 3 * ont.domain("restaurant").n_slots
    assert cat.act_index(SystemAct("offer", "restaurant")) == 0
    assert cat.act_index(SystemAct("request", "restaurant", "pricerange")) == 5 + 3 * 2 + 1 == 12
    assert cat.act_index(SystemAct("bye")) == 4


@pytest.mark.parametrize("domain", ["restaurant", "hotel", "attraction", "train"])
def test_catalog_bijection_and_roundtrip(ont, domain):
    cat = ActionCatalog.for_domain(ont, domain)
    acts = [cat.index_to_act(i) for i in range(len(cat))]
    assert len(set(acts)) == len(cat)
    assert [cat.act_index(a) for a in acts] == list(range(len(cat)))
    again = ActionCatalog.from_dict(cat.to_dict())
    assert again == cat and again.informable == cat.informable


def test_catalog_rejects_foreign_acts(ont):
    cat = ActionCatalog.for_domain(ont, "restaurant")
    with pytest.raises(MappingError):
        cat.act_index(SystemAct("request", "hotel", "area"))
    with pytest.raises(MappingError):
        cat.index_to_act(len(cat))


def test_mask_rules(ont, db):
    cat = ActionCatalog.for_domain(ont, "restaurant")
    m = valid_mask(DialogueState.initial(db), "restaurant", cat)
    assert m[0] and not m[1] and m[2] and m[3] and m[4]
    for i, slot in enumerate(ont.domain("restaurant").slots):
        assert not m[5 + 3 * i]  # nothing offered yet
        assert m[6 + 3 * i] == slot.informable == m[7 + 3 * i]
    s = DialogueState.initial(db)
    s.domains["restaurant"].db_count = 0
    m = valid_mask(s, "restaurant", cat)
    assert not m[0] and m[3]


def test_mask_always_live(ont, db):
    for state in episode_states(ont, db, 10):
        for dom in ont.domain_names:
            assert valid_mask(state, dom, ActionCatalog.for_domain(ont, dom))[4]


def test_dimensions_constant_across_domains(ont, db):
    s = DialogueState.initial(db)
    for dom in ont.domain_names:
        dip = featurize(s, dom, ont)
        assert dip.independent.shape == (21,) and dip.per_slot.shape[1] == 8


def test_global_layout(ont, db):
    layout = GlobalLayout(ont)
    assert layout.input_dim == 21 + 8 * ont.total_slots
    assert layout.n_actions == 5 + 3 * ont.total_slots
    s = apply_user_acts(DialogueState.initial(db), [UserAct("inform", "hotel", "area", "north")], db)
    x = layout.features(s, "hotel")
    dip = featurize(s, "hotel", ont)
    off = 21 + 8 * ont.domain("restaurant").n_slots
    assert np.array_equal(x[off: off + dip.per_slot.size], dip.per_slot.ravel())
    assert not x[21:off].any()
    for dom in ont.domain_names:
        for local in range(len(ActionCatalog.for_domain(ont, dom))):
            assert layout.to_local_index(dom, layout.to_global_index(dom, local)) == local


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_featurize_pure(seed):
    from structdm.ontology import default_ontology, generate_database

    ont = default_ontology()
    db = generate_database(ont, 0, 20)
    rng = random.Random(seed)
    dom = rng.choice(ont.domains)
    slot = rng.choice([s for s in dom.slots if s.informable])
    s = apply_user_acts(DialogueState.initial(db), [UserAct("inform", dom.name, slot.name, rng.choice(slot.values))], db)
    a, b = featurize(s, dom.name, ont), featurize(s.copy(), dom.name, ont)
    assert np.array_equal(a.independent, b.independent) and np.array_equal(a.per_slot, b.per_slot)
    assert select_active_domain(s) == dom.name
