import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structdm import nn
from structdm.dip import INDEPENDENT_DIM, N_GENERAL, N_SLOT_ACTIONS, SLOT_DIM, DipState
from structdm.expert import ExpertConfig, ExpertPolicy
from structdm.ontology import default_ontology, load_ontology, sample_goal
from structdm.policies import KINDS, FnnNet, GnnNet, Sample, StructuredPolicy, pack_dips
from structdm.tracker import DialogueState, UserAct, apply_user_acts
from structdm.usersim import run_episode


def toy_ontology(n_domains, n_slots):
    slot = lambda i: {"name": f"s{i}", "informable": True, "requestable": True, "needed_for_find": True,
                      "needed_for_book": False, "values": ["a", "b"]}
    return load_ontology({"domains": [{"name": f"d{d}", "slots": [slot(i) for i in range(n_slots)]}
                                      for d in range(n_domains)]})


def random_dip(rng, n, domain="restaurant"):
    return DipState(rng.integers(0, 2, INDEPENDENT_DIM).astype(float),
                    rng.integers(0, 2, (n, SLOT_DIM)).astype(float), domain)


def gnn_logits(net, dip):
    return net.forward(*pack_dips([dip]))[0][0]


def test_hand_computed_toy_graph():
    net = GnnNet(2, nn.make_rng(0))
    for name, p in net.params.items():
        net.assign(name, np.full(p.shape, 0.5) if name.endswith(".W") else np.zeros(p.shape))
    dip = DipState(np.ones(INDEPENDENT_DIM), np.ones((1, SLOT_DIM)), "x")
    logits, cache = net.forward(*pack_dips([dip]))
    h_i, h_s = cache[5], cache[7]
    # input layers: 21 * 0.5 and 8 * 0.5 per hidden unit
    assert np.allclose(h_i, 10.5) and np.allclose(h_s, 4.0)
    # I-node: (S2I 2*0.5*4 + self 2*0.5*10.5) / 2; S-node: (I2S 10.5 + self 4) / 2
    assert np.allclose(cache[11], 7.25) and np.allclose(cache[12], 7.25)
    assert logits.shape == (1, 8) and np.allclose(logits, 7.25)
    p = nn.masked_softmax(logits[0], np.ones(8, dtype=bool))
    assert np.allclose(p, 1 / 8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 9))
def test_permutation_equivariance(seed, n):
    g = nn.make_rng(seed)
    net = GnnNet(8, g)
    dip = random_dip(g, n)
    perm = g.permutation(n)
    a = gnn_logits(net, dip)
    b = gnn_logits(net, dip.permuted(perm))
    assert np.allclose(a[:N_GENERAL], b[:N_GENERAL], atol=1e-9)
    blocks = a[N_GENERAL:].reshape(n, N_SLOT_ACTIONS)
    assert np.allclose(blocks[perm], b[N_GENERAL:].reshape(n, N_SLOT_ACTIONS), atol=1e-9)


def test_identical_slots_identical_blocks():
    g = nn.make_rng(2)
    net = GnnNet(16, g)
    dip = random_dip(g, 5)
    dip.per_slot[3] = dip.per_slot[1]
    blocks = gnn_logits(net, dip)[N_GENERAL:].reshape(5, N_SLOT_ACTIONS)
    assert np.allclose(blocks[1], blocks[3], rtol=0, atol=1e-12)


def test_padding_does_not_change_logits():
    g = nn.make_rng(3)
    net = GnnNet(8, g)
    dips = [random_dip(g, 2), random_dip(g, 6)]
    batched = net.forward(*pack_dips(dips))[0]
    assert np.allclose(batched[0, : N_GENERAL + 6], gnn_logits(net, dips[0]))
    assert np.allclose(batched[1], gnn_logits(net, dips[1]))


def test_parameter_count_scaling():
    counts = {}
    for nd in (1, 2, 4):
        for ns in (2, 4, 8):
            ont = toy_ontology(nd, ns)
            counts[nd, ns] = {k: StructuredPolicy(kind=k, ontology=ont).n_parameters() for k in KINDS}
    uh = {c["uhgnn"] for c in counts.values()}
    assert len(uh) == 1
    per_domain = counts[1, 4]["hgnn"]
    assert counts[2, 4]["hgnn"] == 2 * per_domain and counts[4, 4]["hgnn"] == 4 * per_domain
    assert per_domain == uh.pop()
    # fnn grows linearly in total slots (input and output both linear)
    f = [counts[1, ns]["fnn"] for ns in (2, 4, 8)]
    assert f[2] - f[1] == 2 * (f[1] - f[0])
    assert f[0] < f[1] < f[2]
    assert counts[4, 4]["hfnn"] == 4 * counts[1, 4]["hfnn"]
    ont = default_ontology()
    assert StructuredPolicy(kind="fnn", ontology=ont).n_parameters() > StructuredPolicy(kind="uhgnn", ontology=ont).n_parameters()


def _check_net(net, forward, g):
    up = g.normal(size=forward()[0].shape)

    def f():
        return float(np.sum(forward()[0] * up))

    logits, cache = forward()
    grads = net.backward(cache, up)
    return nn.gradient_check(f, net.params, grads)


@pytest.mark.parametrize("seed", range(5))
def test_gnn_gradients(seed):
    g = nn.make_rng(seed)
    net = GnnNet(5, g)
    for p in net.params.values():
        p += g.normal(scale=0.1, size=p.shape)
    xi, xs, nm = pack_dips([random_dip(g, 3), random_dip(g, 4), random_dip(g, 1)])
    xi += g.normal(scale=0.1, size=xi.shape)
    xs += g.normal(scale=0.1, size=xs.shape) * nm[..., None]
    assert _check_net(net, lambda: net.forward(xi, xs, nm), g) <= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_fnn_gradients(seed):
    g = nn.make_rng(seed)
    net = FnnNet(12, 7, 6, g)
    for p in net.params.values():
        p += g.normal(scale=0.1, size=p.shape)
    x = g.normal(size=(4, 12))
    assert _check_net(net, lambda: net.forward(x), g) <= 1e-4


def states_from_episodes(ont, db, n=10):
    seen = []

    class Spy(ExpertPolicy):
        def act(self, state, db_, rng):
            seen.append(state)
            return super().act(state, db_, rng)

    rng = random.Random(1)
    for i in range(n):
        run_episode(Spy(ExpertConfig()), sample_goal(ont, db, rng), db, seed=i)
    return seen


@pytest.mark.parametrize("kind", KINDS)
def test_overfits_single_sample(kind, ont, small_db):
    state = apply_user_acts(DialogueState.initial(small_db), [UserAct("inform", "hotel", "area", "north")], small_db)
    pol = StructuredPolicy(kind=kind, ontology=ont, random_state=0).initialize()
    # a general act: slot acts on slots with identical features necessarily tie
    sample = pol.make_sample(state, "hotel", 2)
    assert sample.mask[sample.target]
    pol.max_steps = 500
    pol.fit([sample])
    assert pol.loss([sample]) < 0.01
    assert pol.predict([sample])[0] == sample.target


def test_twin_slots_tie_for_gnn(ont, small_db):
    state = apply_user_acts(DialogueState.initial(small_db), [UserAct("inform", "hotel", "area", "north")], small_db)
    pol = StructuredPolicy(kind="uhgnn", ontology=ont, max_steps=300).initialize()
    dip = pol.make_sample(state, "hotel").features
    rows = [tuple(r) for r in dip.per_slot]
    i = next(k for k, r in enumerate(rows) if rows.count(r) > 1)
    j = next(k for k, r in enumerate(rows) if r == rows[i] and k != i)
    mask = pol.make_sample(state, "hotel").mask
    target = N_GENERAL + N_SLOT_ACTIONS * i + 2
    assert mask[target]
    sample = Sample(dip, mask, target, "hotel")
    pol.fit([sample])
    p = pol.predict_proba([sample])[0]
    assert p[target] == pytest.approx(p[N_GENERAL + N_SLOT_ACTIONS * j + 2])
    assert pol.loss([sample]) >= np.log(2) - 1e-9


@pytest.mark.parametrize("kind", KINDS)
def test_duplicated_batch_equals_single(kind, ont, small_db):
    state = DialogueState.initial(small_db)
    ref = StructuredPolicy(kind=kind, ontology=ont, dropout=0.0).initialize()
    sample = ref.make_sample(state, "restaurant", 4 if kind != "fnn" else None)
    if kind == "fnn":
        sample = Sample(sample.features, sample.mask, int(np.flatnonzero(sample.mask)[0]), sample.domain)
    a = StructuredPolicy(kind=kind, ontology=ont, dropout=0.0).initialize()
    b = StructuredPolicy(kind=kind, ontology=ont, dropout=0.0).initialize()
    la = a.train_step([sample])
    lb = b.train_step([sample] * 64)
    assert la == pytest.approx(lb, rel=1e-12)
    for key in a.nets_:
        assert np.allclose(a.nets_[key].flat, b.nets_[key].flat, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_untrained_acts_are_valid(kind, ont, small_db):
    pol = StructuredPolicy(kind=kind, ontology=ont, random_state=4).initialize()
    for state in states_from_episodes(ont, small_db, 5):
        domain = state.active_domain or ont.domain_names[0]
        s = pol.make_sample(state, domain)
        assert s.mask[pol.predict([s])[0]]
        proba = pol.predict_proba([s])[0]
        assert proba.sum() == pytest.approx(1.0) and np.all(proba[~s.mask] == 0)


def test_shared_model_relabels_across_domains():
    ont = toy_ontology(2, 3)
    pol = StructuredPolicy(kind="uhgnn", ontology=ont).initialize()
    g = nn.make_rng(8)
    dip = random_dip(g, 3, "d0")
    mask = np.ones(N_GENERAL + 3 * N_SLOT_ACTIONS, dtype=bool)
    a = pol.decision_function([Sample(dip, mask, 0, "d0")])[0]
    b = pol.decision_function([Sample(DipState(dip.independent, dip.per_slot, "d1"), mask, 0, "d1")])[0]
    assert np.array_equal(a, b)
    hg = StructuredPolicy(kind="hgnn", ontology=ont).initialize()
    a = hg.decision_function([Sample(dip, mask, 0, "d0")])[0]
    b = hg.decision_function([Sample(DipState(dip.independent, dip.per_slot, "d1"), mask, 0, "d1")])[0]
    assert not np.array_equal(a, b)


def test_fit_is_deterministic(ont, small_db):
    from structdm.harness.demos import collect_demos, make_dataset

    data = make_dataset(collect_demos(small_db, ExpertConfig(), 3, 0), "uhgnn", ont, small_db)
    a = StructuredPolicy(ontology=ont, max_steps=20, random_state=3).fit(data)
    b = StructuredPolicy(ontology=ont, max_steps=20, random_state=3).fit(data)
    assert a.loss_curve_ == b.loss_curve_
    assert np.array_equal(a.nets_["shared"].flat, b.nets_["shared"].flat)


@pytest.mark.parametrize("kind", KINDS)
def test_save_load_roundtrip(kind, ont, small_db, tmp_path):
    from structdm.harness.demos import collect_demos, make_dataset

    data = make_dataset(collect_demos(small_db, ExpertConfig(), 2, 0), kind, ont, small_db)
    pol = StructuredPolicy(kind=kind, ontology=ont, max_steps=5).fit(data)
    path = tmp_path / "p.ckpt"
    pol.save(path)
    again = StructuredPolicy.load(path, ont)
    assert np.array_equal(pol.predict(data), again.predict(data))
    again.save(tmp_path / "q.ckpt")
    assert path.read_bytes() == (tmp_path / "q.ckpt").read_bytes()
    with pytest.raises(nn.CheckpointError):
        StructuredPolicy.load(path, toy_ontology(1, 2))


def test_sklearn_params_and_validation(ont):
    from sklearn.base import clone

    pol = StructuredPolicy(kind="hgnn", learning_rate=0.01)
    assert pol.get_params()["learning_rate"] == 0.01
    assert clone(pol).get_params()["kind"] == "hgnn"
    with pytest.raises(ValueError):
        StructuredPolicy(kind="rnn").initialize()
    with pytest.raises(Exception):
        pol.predict([])
    with pytest.raises(ValueError):
        StructuredPolicy(ontology=ont).fit([])
