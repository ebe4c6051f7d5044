"""Structured dialogue policies: FNN, HFNN, HGNN and UHGNN.

The GNN has one I-node (slot-independent features) and one S-node per slot.
Weights are shared per relation type, never per slot:

* input transforms ``in_I`` (21 -> H) and ``in_S`` (8 -> H),
* messages ``S2S``, ``I2S``, ``S2I`` plus self-loops ``self_I``/``self_S``,
* readouts ``out_I`` (H -> 5 general actions) and ``out_S`` (H -> 3 slot actions).

A node's incoming messages are averaged (self-loop included), passed through
ReLU and dropout, and read out. Without the self-loop the I-node readout could
not see the I-node's own features (there is a single I-node, so no I2I edge).
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from .dip import (
    INDEPENDENT_DIM,
    LAYOUT_VERSION,
    N_GENERAL,
    N_SLOT_ACTIONS,
    SLOT_DIM,
    ActionCatalog,
    DipState,
    GlobalLayout,
    featurize,
    flat_features,
    valid_mask,
)
from .expert import select_active_domain
from .ontology import Database, Ontology, default_ontology
from .tracker import DialogueState, SystemAct

KINDS = ("fnn", "hfnn", "hgnn", "uhgnn")
GNN_RELATIONS = ("S2S", "I2S", "S2I", "self_I", "self_S")


@dataclass
class Sample:
    """One behaviour-cloning pair, already shaped for a policy kind.

    ``features`` is a :class:`DipState` for the GNN kinds, a flat vector for
    HFNN and the global concatenation for FNN; ``mask`` and ``target`` live in
    the matching action space.
    """

    features: DipState | np.ndarray
    mask: np.ndarray
    target: int
    domain: str


class _FlatParams:
    """Parameters live as views into one contiguous buffer so Adam is a single vector op."""

    params: dict[str, np.ndarray]

    def _flatten(self) -> None:
        self.names = list(self.params)
        self.flat = np.concatenate([self.params[k].ravel() for k in self.names])
        offset = 0
        for k in self.names:
            size = self.params[k].size
            shape = self.params[k].shape
            self.params[k] = self.flat[offset:offset + size].reshape(shape)
            offset += size

    def flat_grad(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[k].ravel() for k in self.names])

    def assign(self, name: str, value: np.ndarray) -> None:
        if value.shape != self.params[name].shape:
            raise nn.DimensionError(f"{name}: shape {value.shape} != {self.params[name].shape}")
        self.params[name][...] = value


class GnnNet(_FlatParams):
    """Relation-typed GNN over one I-node and ``n`` S-nodes, batched with padding."""

    def __init__(self, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        layers = {
            "in_I": (INDEPENDENT_DIM, hidden),
            "in_S": (SLOT_DIM, hidden),
            **{rel: (hidden, hidden) for rel in GNN_RELATIONS},
            "out_I": (hidden, N_GENERAL),
            "out_S": (hidden, N_SLOT_ACTIONS),
        }
        self.params: dict[str, np.ndarray] = {}
        for name, (n_in, n_out) in layers.items():
            layer = nn.DenseLayer.init(rng, n_in, n_out)
            self.params[f"{name}.W"] = layer.weight
            self.params[f"{name}.b"] = layer.bias
        self._flatten()

    def _layer(self, name: str) -> nn.DenseLayer:
        return nn.DenseLayer(self.params[f"{name}.W"], self.params[f"{name}.b"])

    def forward(self, xi, xs, node_mask, dropout_rate=0.0, training=False, rng=None):
        """``xi`` (B, 21), ``xs`` (B, N, 8), ``node_mask`` (B, N) -> logits (B, 5 + 3N)."""
        P = self.params
        nm = node_mask[..., None]
        n = node_mask.sum(axis=1)
        a_i = nn.dense_forward(self._layer("in_I"), xi)
        h_i = nn.relu(a_i)
        a_s = nn.dense_forward(self._layer("in_S"), xs)
        h_s = nn.relu(a_s) * nm
        sum_s = h_s.sum(axis=1)
        # sum over j != i as total minus self (equal nodes agree up to BLAS rounding)
        others = sum_s[:, None, :] - h_s
        count = (n + 1.0)[:, None]
        m_s = (
            others @ P["S2S.W"].T + (n - 1.0)[:, None, None] * P["S2S.b"]
            + (h_i @ P["I2S.W"].T + P["I2S.b"])[:, None, :]
            + h_s @ P["self_S.W"].T + P["self_S.b"]
        ) / count[:, :, None]
        m_i = (
            sum_s @ P["S2I.W"].T + n[:, None] * P["S2I.b"]
            + h_i @ P["self_I.W"].T + P["self_I.b"]
        ) / count
        g_i, drop_i = nn.dropout(nn.relu(m_i), dropout_rate, training, rng)
        g_s, drop_s = nn.dropout(nn.relu(m_s), dropout_rate, training, rng)
        y_i = g_i @ P["out_I.W"].T + P["out_I.b"]
        y_s = g_s @ P["out_S.W"].T + P["out_S.b"]
        logits = np.concatenate([y_i, y_s.reshape(y_s.shape[0], -1)], axis=1)
        cache = (xi, xs, nm, n, a_i, h_i, a_s, h_s, sum_s, others, count, m_i, m_s, g_i, g_s, drop_i, drop_s)
        return logits, cache

    def backward(self, cache, dlogits):
        P = self.params
        xi, xs, nm, n, a_i, h_i, a_s, h_s, sum_s, others, count, m_i, m_s, g_i, g_s, drop_i, drop_s = cache
        B, N = xs.shape[0], xs.shape[1]
        grads = {}
        dy_i = dlogits[:, :N_GENERAL]
        dy_s = dlogits[:, N_GENERAL:].reshape(B, N, N_SLOT_ACTIONS)
        grads["out_I.W"] = dy_i.T @ g_i
        grads["out_I.b"] = dy_i.sum(axis=0)
        grads["out_S.W"] = dy_s.reshape(-1, N_SLOT_ACTIONS).T @ g_s.reshape(-1, self.hidden)
        grads["out_S.b"] = dy_s.sum(axis=(0, 1))
        d_mi = nn.relu_backward(m_i, nn.dropout_backward(dy_i @ P["out_I.W"], drop_i)) / count
        d_ms = nn.relu_backward(m_s, nn.dropout_backward(dy_s @ P["out_S.W"], drop_s)) / count[:, :, None]

        H = self.hidden
        flat_ms = d_ms.reshape(-1, H)
        grads["S2S.W"] = flat_ms.T @ others.reshape(-1, H)
        grads["S2S.b"] = ((n - 1.0)[:, None] * d_ms.sum(axis=1)).sum(axis=0)
        d_others = d_ms @ P["S2S.W"]
        d_ms_nodes = d_ms.sum(axis=1)
        grads["I2S.W"] = d_ms_nodes.T @ h_i
        grads["I2S.b"] = d_ms_nodes.sum(axis=0)
        grads["self_S.W"] = flat_ms.T @ h_s.reshape(-1, H)
        grads["self_S.b"] = flat_ms.sum(axis=0)
        grads["S2I.W"] = d_mi.T @ sum_s
        grads["S2I.b"] = (n[:, None] * d_mi).sum(axis=0)
        grads["self_I.W"] = d_mi.T @ h_i
        grads["self_I.b"] = d_mi.sum(axis=0)

        d_hi = d_ms_nodes @ P["I2S.W"] + d_mi @ P["self_I.W"]
        d_sum = d_others.sum(axis=1) + d_mi @ P["S2I.W"]
        d_hs = (d_sum[:, None, :] - d_others + d_ms @ P["self_S.W"]) * nm
        d_as = nn.relu_backward(a_s, d_hs)
        grads["in_S.W"] = d_as.reshape(-1, H).T @ xs.reshape(-1, SLOT_DIM)
        grads["in_S.b"] = d_as.sum(axis=(0, 1))
        d_ai = nn.relu_backward(a_i, d_hi)
        grads["in_I.W"] = d_ai.T @ xi
        grads["in_I.b"] = d_ai.sum(axis=0)
        return grads


class FnnNet(_FlatParams):
    """``n_in -> hidden -> hidden -> n_out`` with ReLU and dropout on both hidden layers."""

    def __init__(self, n_in: int, n_out: int, hidden: int, rng: np.random.Generator):
        self.params = {}
        for name, (a, b) in {"l1": (n_in, hidden), "l2": (hidden, hidden), "l3": (hidden, n_out)}.items():
            layer = nn.DenseLayer.init(rng, a, b)
            self.params[f"{name}.W"] = layer.weight
            self.params[f"{name}.b"] = layer.bias
        self._flatten()

    def _layer(self, name):
        return nn.DenseLayer(self.params[f"{name}.W"], self.params[f"{name}.b"])

    def forward(self, x, dropout_rate=0.0, training=False, rng=None):
        a1 = nn.dense_forward(self._layer("l1"), x)
        h1, d1 = nn.dropout(nn.relu(a1), dropout_rate, training, rng)
        a2 = nn.dense_forward(self._layer("l2"), h1)
        h2, d2 = nn.dropout(nn.relu(a2), dropout_rate, training, rng)
        logits = nn.dense_forward(self._layer("l3"), h2)
        return logits, (x, a1, h1, d1, a2, h2, d2)

    def backward(self, cache, dlogits):
        x, a1, h1, d1, a2, h2, d2 = cache
        grads = {}
        dh2, grads["l3.W"], grads["l3.b"] = nn.dense_backward(self._layer("l3"), h2, dlogits)
        da2 = nn.relu_backward(a2, nn.dropout_backward(dh2, d2))
        dh1, grads["l2.W"], grads["l2.b"] = nn.dense_backward(self._layer("l2"), h1, da2)
        da1 = nn.relu_backward(a1, nn.dropout_backward(dh1, d1))
        _, grads["l1.W"], grads["l1.b"] = nn.dense_backward(self._layer("l1"), x, da1)
        return grads


def pack_dips(dips: Sequence[DipState], n_max: int | None = None):
    """Stack DIP states into padded arrays ``(xi, xs, node_mask)``."""
    n_max = n_max or max(d.n_slots for d in dips)
    B = len(dips)
    xi = np.zeros((B, INDEPENDENT_DIM))
    xs = np.zeros((B, n_max, SLOT_DIM))
    node_mask = np.zeros((B, n_max))
    for b, d in enumerate(dips):
        xi[b] = d.independent
        xs[b, : d.n_slots] = d.per_slot
        node_mask[b, : d.n_slots] = 1.0
    return xi, xs, node_mask


def pad_mask(mask: np.ndarray, n_max: int) -> np.ndarray:
    out = np.zeros(N_GENERAL + N_SLOT_ACTIONS * n_max, dtype=bool)
    out[: mask.size] = mask
    return out


class _Packed:
    """Training data pre-stacked per model so a batch is an index gather."""

    def __init__(self, kind: str, samples: Sequence[Sample], model_of: Callable[[str], str]):
        self.kind = kind
        self.n = len(samples)
        self.model_keys = np.array([model_of(s.domain) for s in samples])
        self.local = np.zeros(self.n, dtype=int)
        self.groups: dict[str, dict[str, np.ndarray]] = {}
        by_key: dict[str, list[int]] = {}
        for i, k in enumerate(self.model_keys):
            by_key.setdefault(k, []).append(i)
        for key, idx in by_key.items():
            self.local[idx] = np.arange(len(idx))
            group = [samples[i] for i in idx]
            if kind in ("hgnn", "uhgnn"):
                n_max = max(s.features.n_slots for s in group)
                xi, xs, nmask = pack_dips([s.features for s in group], n_max)
                self.groups[key] = {
                    "xi": xi, "xs": xs, "node_mask": nmask,
                    "mask": np.stack([pad_mask(s.mask, n_max) for s in group]),
                }
            else:
                self.groups[key] = {
                    "x": np.stack([s.features for s in group]),
                    "mask": np.stack([s.mask for s in group]),
                }
            self.groups[key]["target"] = np.array([s.target for s in group], dtype=int)


class StructuredPolicy(ClassifierMixin, BaseEstimator):
    """Behaviour-cloned dialogue policy with a scikit-learn style interface.

    ``fit`` takes a list of :class:`Sample` (as produced by
    :func:`structdm.harness.demos.make_dataset` for the same ``kind``);
    ``predict`` returns greedy action indices; ``act`` plugs the fitted model
    into the episode runner.
    """

    def __init__(
        self,
        kind: str = "uhgnn",
        ontology: Ontology | None = None,
        gnn_hidden: int = 64,
        fnn_hidden: int = 128,
        learning_rate: float = 0.001,
        dropout: float = 0.1,
        batch_size: int = 64,
        max_steps: int = 1000,
        random_state: int = 0,
        temperature: float | None = None,
    ):
        self.kind = kind
        self.ontology = ontology
        self.gnn_hidden = gnn_hidden
        self.fnn_hidden = fnn_hidden
        self.learning_rate = learning_rate
        self.dropout = dropout
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.random_state = random_state
        self.temperature = temperature

    # construction ---------------------------------------------------------

    @property
    def ontology_(self) -> Ontology:
        if self.ontology is not None:
            return self.ontology
        if getattr(self, "_default_ont", None) is None:
            self._default_ont = default_ontology()
        return self._default_ont

    def _validate_params(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1 and max_steps >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def model_key(self, domain: str) -> str:
        return domain if self.kind in ("hfnn", "hgnn") else "shared"

    def initialize(self) -> "StructuredPolicy":
        """Fresh random parameters and optimiser state (called by ``fit``)."""
        self._validate_params()
        ont = self.ontology_
        init_rng = nn.make_rng([self.random_state, 0])
        self.train_rng_ = nn.make_rng([self.random_state, 1])
        self.layout_ = GlobalLayout(ont)
        if self.kind == "fnn":
            nets = {"shared": FnnNet(self.layout_.input_dim, self.layout_.n_actions, self.fnn_hidden, init_rng)}
        elif self.kind == "hfnn":
            nets = {
                d.name: FnnNet(INDEPENDENT_DIM + SLOT_DIM * d.n_slots, N_GENERAL + N_SLOT_ACTIONS * d.n_slots,
                               self.fnn_hidden, init_rng)
                for d in ont.domains
            }
        elif self.kind == "hgnn":
            nets = {d.name: GnnNet(self.gnn_hidden, init_rng) for d in ont.domains}
        else:
            nets = {"shared": GnnNet(self.gnn_hidden, init_rng)}
        self.nets_ = nets
        self.adam_ = {k: nn.AdamState(lr=self.learning_rate) for k in nets}
        self.step_ = 0
        return self

    def n_parameters(self) -> int:
        if not hasattr(self, "nets_"):
            self.initialize()
        return sum(p.size for net in self.nets_.values() for p in net.params.values())

    # featurisation ------------------------------------------------------------

    def make_sample(self, state: DialogueState, domain: str, target: int | None = None) -> Sample:
        """Shape ``state`` for this policy kind; ``target`` is a local catalog index."""
        ont = self.ontology_
        catalog = ActionCatalog.for_domain(ont, domain)
        dip = featurize(state, domain, ont)
        mask = valid_mask(state, domain, catalog)
        return shape_sample(self.kind, dip, mask, target, ont)

    # training -------------------------------------------------------------------

    def _forward(self, key, arrays, training):
        net = self.nets_[key]
        rate = self.dropout if training else 0.0
        rng = self.train_rng_ if training else None
        if isinstance(net, GnnNet):
            return net.forward(arrays["xi"], arrays["xs"], arrays["node_mask"], rate, training, rng)
        return net.forward(arrays["x"], rate, training, rng)

    def _step_on_groups(self, groups: dict[str, dict[str, np.ndarray]], total: int) -> float:
        loss_sum = 0.0
        for key in sorted(groups):
            arrays = groups[key]
            logits, cache = self._forward(key, arrays, training=True)
            loss, dlogits = nn.masked_softmax_xent(logits, arrays["mask"], arrays["target"])
            if not np.all(np.isfinite(loss)):
                raise nn.TrainingError(f"non-finite loss at step {self.step_ + 1}")
            loss_sum += float(loss.sum())
            net = self.nets_[key]
            grads = net.backward(cache, dlogits / total)
            nn.adam_step({"flat": net.flat}, {"flat": net.flat_grad(grads)}, self.adam_[key])
        self.step_ += 1
        return loss_sum / total

    def train_step(self, batch: Sequence[Sample]) -> float:
        """One Adam update per model touched by ``batch``; returns the mean loss."""
        check_is_fitted(self, "nets_")
        if not batch:
            raise ValueError("empty batch")
        packed = _Packed(self.kind, batch, self.model_key)
        return self._step_on_groups(packed.groups, len(batch))

    def _sample_batch(self, packed: _Packed) -> dict[str, dict[str, np.ndarray]]:
        idx = self.train_rng_.integers(0, packed.n, size=self.batch_size)
        groups = {}
        keys = packed.model_keys[idx]
        for key in np.unique(keys):
            local = packed.local[idx[keys == key]]
            groups[str(key)] = {name: arr[local] for name, arr in packed.groups[key].items()}
        return groups

    def fit(self, X: Sequence[Sample], y=None, callback: Callable[[int, "StructuredPolicy", float], None] | None = None):
        """Behaviour cloning by mini-batch Adam for ``max_steps`` steps.

        Batches are drawn uniformly with replacement. ``callback(step, self,
        loss)`` runs after every step (checkpointing hooks use it).
        """
        samples = check_samples(X, self.kind, y)
        self.initialize()
        packed = _Packed(self.kind, samples, self.model_key)
        self.loss_curve_ = []
        for _ in range(self.max_steps):
            loss = self._step_on_groups(self._sample_batch(packed), self.batch_size)
            self.loss_curve_.append(loss)
            if callback is not None:
                callback(self.step_, self, loss)
        return self

    # inference ----------------------------------------------------------------

    def decision_function(self, X: Sequence[Sample]) -> list[np.ndarray]:
        """Masked logits per sample (masked entries are ``-inf``)."""
        check_is_fitted(self, "nets_")
        out = []
        for s in X:
            key = self.model_key(s.domain)
            if self.kind in ("hgnn", "uhgnn"):
                xi, xs, nmask = pack_dips([s.features])
                logits, _ = self.nets_[key].forward(xi, xs, nmask)
            else:
                logits, _ = self.nets_[key].forward(np.asarray(s.features)[None])
            out.append(np.where(s.mask, logits[0], -np.inf))
        return out

    def predict_proba(self, X: Sequence[Sample]) -> list[np.ndarray]:
        return [nn.masked_softmax(z, np.isfinite(z)) for z in self.decision_function(X)]

    def predict(self, X: Sequence[Sample]) -> np.ndarray:
        return np.array([int(np.argmax(z)) for z in self.decision_function(X)], dtype=int)

    def loss(self, X: Sequence[Sample]) -> float:
        """Mean masked cross-entropy in inference mode."""
        check_is_fitted(self, "nets_")
        total = 0.0
        for z, s in zip(self.decision_function(X), X):
            total += nn.masked_softmax_xent(np.where(np.isfinite(z), z, 0.0), s.mask, s.target)[0]
        return total / len(X)

    def act(self, state: DialogueState, db: Database, rng: random.Random | None = None) -> SystemAct:
        return policy_act(self, state, db, self.ontology_, rng)

    # persistence ----------------------------------------------------------

    def save(self, path) -> None:
        check_is_fitted(self, "nets_")
        tensors = {f"{k}/{name}": p for k, net in self.nets_.items() for name, p in net.params.items()}
        params = {k: v for k, v in self.get_params().items() if k != "ontology"}
        meta = {
            "kind": self.kind,
            "layout": LAYOUT_VERSION,
            "ontology": self.ontology_.digest(),
            "params": params,
            "step": self.step_,
        }
        nn.save_checkpoint(path, tensors, meta, self.adam_)

    @classmethod
    def load(cls, path, ontology: Ontology | None = None) -> "StructuredPolicy":
        tensors, meta, adam = nn.load_checkpoint(path)
        if meta.get("layout") != LAYOUT_VERSION:
            raise nn.CheckpointError(f"feature layout {meta.get('layout')!r} != {LAYOUT_VERSION!r}")
        ontology = ontology or default_ontology()
        if meta.get("ontology") != ontology.digest():
            raise nn.CheckpointError("checkpoint was trained against a different ontology")
        policy = cls(ontology=ontology, **meta["params"]).initialize()
        for key, net in policy.nets_.items():
            for name in net.params:
                net.assign(name, tensors[f"{key}/{name}"])
        for key, st in adam.items():
            policy.adam_[key] = st
        policy.step_ = meta["step"]
        return policy


def shape_sample(kind: str, dip: DipState, mask: np.ndarray, target: int | None, ont: Ontology) -> Sample:
    """Convert a DIP state + local mask/target into the input space of ``kind``."""
    t = -1 if target is None else int(target)
    if kind in ("hgnn", "uhgnn"):
        return Sample(dip, mask, t, dip.domain)
    if kind == "hfnn":
        return Sample(flat_features(dip), mask, t, dip.domain)
    if kind == "fnn":
        layout = ont.memo.get("global_layout")
        if layout is None:
            layout = ont.memo["global_layout"] = GlobalLayout(ont)
        gt = -1 if target is None else layout.to_global_index(dip.domain, t)
        return Sample(layout.embed(dip), layout.embed_mask(dip.domain, mask), gt, dip.domain)
    raise ValueError(f"unknown policy kind {kind!r}")


def check_samples(X, kind: str, y=None) -> list[Sample]:
    """Validate training samples for ``kind``; ``y`` optionally overrides targets."""
    samples = list(X)
    if not samples:
        raise ValueError("need at least one training sample")
    if y is not None:
        y = np.asarray(y, dtype=int)
        if y.shape != (len(samples),):
            raise ValueError("y must have one target per sample")
        samples = [Sample(s.features, s.mask, int(t), s.domain) for s, t in zip(samples, y)]
    gnn = kind in ("hgnn", "uhgnn")
    for i, s in enumerate(samples):
        if not isinstance(s, Sample):
            raise TypeError(f"sample {i} is {type(s).__name__}, expected Sample")
        if gnn != isinstance(s.features, DipState):
            raise ValueError(f"sample {i} is not shaped for kind {kind!r}")
        if not 0 <= s.target < s.mask.size or not s.mask[s.target]:
            raise ValueError(f"sample {i}: target {s.target} is masked or out of range")
    return samples


def policy_act(
    policy: StructuredPolicy,
    state: DialogueState,
    db: Database,
    ont: Ontology,
    rng: random.Random | None = None,
) -> SystemAct:
    """Hand-crafted domain selection, then the (sub-)policy's greedy choice."""
    active = select_active_domain(state, default=ont.domain_names[0])
    sample = policy.make_sample(state, active)
    logits = policy.decision_function([sample])[0]
    if policy.temperature:
        p = nn.masked_softmax(logits / policy.temperature, np.isfinite(logits))
        r = (rng or random.Random(0)).random()
        index = int(min(np.searchsorted(np.cumsum(p), r, side="right"), p.size - 1))
    else:
        index = int(np.argmax(logits))
    if policy.kind == "fnn":
        index = policy.layout_.to_local_index(active, index)
    return ActionCatalog.for_domain(ont, active).index_to_act(index)
