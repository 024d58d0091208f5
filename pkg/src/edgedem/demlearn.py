"""Personalised local training, hierarchical model averaging and regrouping.

Models are flat weight vectors paired with a :class:`ModelLayout` that names
the slices. A :class:`GroupTree` holds the three model levels: personal
(level 0), group (level 1) and regional (level 2).
"""

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage as scipy_linkage
from scipy.spatial.distance import pdist
from scipy.special import log_softmax

from .exceptions import DivergenceDetected, EmptyDataset, EmptyGroup, MissingAncestor

LINKAGES = ("single", "complete", "average")
REGULARIZERS = (None, "l1", "l2")


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class ModelLayout:
    """Ordered (name, shape) slices of a flat weight vector."""

    kind: str
    slices: tuple

    @property
    def size(self) -> int:
        return int(sum(np.prod(shape) for _, shape in self.slices))

    def unflatten(self, w) -> dict:
        out, start = {}, 0
        for name, shape in self.slices:
            n = int(np.prod(shape))
            out[name] = w[start:start + n].reshape(shape)
            start += n
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "slices": [[name, list(shape)] for name, shape in self.slices]}

    @classmethod
    def from_dict(cls, doc) -> "ModelLayout":
        return cls(doc["kind"], tuple((name, tuple(shape)) for name, shape in doc["slices"]))


def logistic_layout(n_features: int, n_classes: int) -> ModelLayout:
    return ModelLayout("logistic", (("W", (n_features, n_classes)), ("b", (n_classes,))))


def mlp_layout(n_features: int, n_hidden: int, n_classes: int) -> ModelLayout:
    return ModelLayout("mlp", (("W1", (n_features, n_hidden)), ("b1", (n_hidden,)),
                               ("W2", (n_hidden, n_classes)), ("b2", (n_classes,))))


@dataclass
class ModelParams:
    weights: np.ndarray
    layout: ModelLayout

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.layout.size,):
            raise ValueError(f"weights have shape {self.weights.shape}, layout needs ({self.layout.size},)")
        if not np.all(np.isfinite(self.weights)):
            raise DivergenceDetected("model weights are not finite")

    def copy(self) -> "ModelParams":
        return ModelParams(self.weights.copy(), self.layout)

    def to_json(self) -> str:
        return json.dumps({"layout": self.layout.to_dict(), "weights": self.weights.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        doc = json.loads(text)
        return cls(np.asarray(doc["weights"], dtype=float), ModelLayout.from_dict(doc["layout"]))

    def to_bytes(self) -> bytes:
        """Little-endian float64 vector; the layout travels separately."""
        return self.weights.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, layout: ModelLayout) -> "ModelParams":
        return cls(np.frombuffer(raw, dtype="<f8").copy(), layout)


def init_model(layout: ModelLayout, rng=None, scale: float = 0.01) -> ModelParams:
    """Small random weights (zeros when ``rng`` is None); biases start at zero."""
    w = np.zeros(layout.size)
    if rng is not None:
        parts = layout.unflatten(w)
        for name, arr in parts.items():
            if arr.ndim == 2:
                arr[...] = scale * rng.standard_normal(arr.shape)
    return ModelParams(w, layout)


def _xy(data):
    if isinstance(data, tuple):
        x, y = data
    else:
        x, y = data.features, data.labels
    return np.asarray(x, dtype=float), np.asarray(y, dtype=int)


def logits(w, layout: ModelLayout, x) -> np.ndarray:
    p = layout.unflatten(w)
    if layout.kind == "logistic":
        return x @ p["W"] + p["b"]
    h = np.tanh(x @ p["W1"] + p["b1"])
    return h @ p["W2"] + p["b2"]


def predict_labels(model: ModelParams, x) -> np.ndarray:
    return np.argmax(logits(model.weights, model.layout, np.asarray(x, dtype=float)), axis=1)


def accuracy(model: ModelParams, data) -> float:
    x, y = _xy(data)
    if y.size == 0:
        return float("nan")
    return float(np.mean(predict_labels(model, x) == y))


def _data_loss_grad(w, layout: ModelLayout, x, y, want_grad=True):
    """Mean cross-entropy and its gradient with respect to the flat weights."""
    m = y.shape[0]
    p = layout.unflatten(w)
    if layout.kind == "logistic":
        z = x @ p["W"] + p["b"]
    else:
        h = np.tanh(x @ p["W1"] + p["b1"])
        z = h @ p["W2"] + p["b2"]
    logp = log_softmax(z, axis=1)
    loss = -float(np.mean(logp[np.arange(m), y]))
    if not want_grad:
        return loss, None
    dz = np.exp(logp)
    dz[np.arange(m), y] -= 1.0
    dz /= m
    g = np.zeros_like(w)
    gp = layout.unflatten(g)
    if layout.kind == "logistic":
        gp["W"][...] = x.T @ dz
        gp["b"][...] = dz.sum(axis=0)
    else:
        gp["W2"][...] = h.T @ dz
        gp["b2"][...] = dz.sum(axis=0)
        dh = (dz @ p["W2"].T) * (1.0 - h * h)
        gp["W1"][...] = x.T @ dh
        gp["b1"][...] = dh.sum(axis=0)
    return loss, g


def _regularizer(w, reg):
    if reg is None:
        return 0.0, np.zeros_like(w)
    if reg == "l2":
        return float(w @ w), 2.0 * w
    if reg == "l1":
        return float(np.abs(w).sum()), np.sign(w)
    raise ValueError(f"unknown regularizer {reg!r}")


def local_loss(model: ModelParams, data, eta: float = 0.0, reg=None) -> float:
    """Mean cross-entropy on ``data`` plus ``eta`` times the L1/L2 penalty."""
    x, y = _xy(data)
    if y.size == 0:
        raise EmptyDataset("local loss needs at least one sample")
    loss, _ = _data_loss_grad(model.weights, model.layout, x, y, want_grad=False)
    return loss + eta * _regularizer(model.weights, reg)[0]


# ---------------------------------------------------------------------------
# group tree


@dataclass
class GroupTree:
    """Two-level hierarchy over N personal models.

    ``groups`` partitions the UE indices into level-1 groups; the regional model
    sits above all of them. ``group_models`` and ``regional`` are None until
    the first aggregation.
    """

    personal: np.ndarray  # (N, d)
    groups: list
    layout: ModelLayout
    group_models: Optional[np.ndarray] = None  # (G, d)
    regional: Optional[np.ndarray] = None  # (d,)
    dendrogram: Optional[dict] = field(default=None, repr=False)

    def __post_init__(self):
        self.personal = np.asarray(self.personal, dtype=float)
        self.groups = [tuple(sorted(int(n) for n in g)) for g in self.groups]
        members = sorted(n for g in self.groups for n in g)
        if any(len(g) == 0 for g in self.groups):
            raise EmptyGroup("every group needs at least one UE")
        if members != list(range(self.personal.shape[0])):
            raise ValueError("groups must partition the UE set")
        self._group_of = np.empty(self.personal.shape[0], dtype=int)
        for g, mem in enumerate(self.groups):
            self._group_of[list(mem)] = g

    @property
    def n_ues(self) -> int:
        return self.personal.shape[0]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_of(self, ue: int) -> int:
        return int(self._group_of[ue])

    def counts(self, level: int) -> np.ndarray:
        """Member counts per node at ``level`` (0: personal, 1: groups, 2: region)."""
        if level == 0:
            return np.ones(self.n_ues, dtype=int)
        if level == 1:
            return np.array([len(g) for g in self.groups], dtype=int)
        if level == 2:
            return np.array([self.n_ues])
        raise ValueError("levels are 0, 1 and 2")

    def ancestors(self, ue: int) -> list:
        """[(model, member count)] for the group and regional levels of ``ue``."""
        if self.group_models is None or self.regional is None:
            raise MissingAncestor(f"UE {ue} has no aggregated ancestors yet")
        g = self.group_of(ue)
        return [(self.group_models[g], len(self.groups[g])), (self.regional, self.n_ues)]

    def with_personal(self, personal) -> "GroupTree":
        return GroupTree(np.asarray(personal, dtype=float), self.groups, self.layout,
                         self.group_models, self.regional, self.dendrogram)


def initial_tree(model: ModelParams, n_ues: int, n_groups: int) -> GroupTree:
    """Every UE starts from ``model``; groups are contiguous index blocks."""
    if not 1 <= n_groups <= n_ues:
        raise ValueError("need 1 <= n_groups <= n_ues")
    personal = np.tile(model.weights, (n_ues, 1))
    groups = [tuple(b.tolist()) for b in np.array_split(np.arange(n_ues), n_groups)]
    return GroupTree(personal, groups, model.layout, np.tile(model.weights, (n_groups, 1)), model.weights.copy())


# ---------------------------------------------------------------------------
# personalised objective and training


def personalized_objective_grad(w, layout: ModelLayout, data, ancestors, eta: float, reg=None, reg_weight=0.0):
    """Value and gradient of data loss plus ``eta * sum_k ||w - w_k||^2 / N_k``.

    ``ancestors`` is a list of (model vector, member count). An empty dataset
    contributes nothing, leaving the proximal terms alone.
    """
    x, y = _xy(data)
    if y.size:
        val, g = _data_loss_grad(w, layout, x, y)
    else:
        val, g = 0.0, np.zeros_like(w)
    if reg is not None:
        r, rg = _regularizer(w, reg)
        val += reg_weight * r
        g = g + reg_weight * rg
    for anc, count in ancestors:
        diff = w - anc
        val += eta / count * float(diff @ diff)
        g = g + 2.0 * eta / count * diff
    return val, g


def personalized_objective(model: ModelParams, data, group_tree: GroupTree, ue: int, eta: float,
                           reg=None, reg_weight=0.0) -> float:
    return personalized_objective_grad(model.weights, model.layout, data, group_tree.ancestors(ue), eta,
                                       reg, reg_weight)[0]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    eta: float = 20.0
    tau: int = 1
    local_epochs: int = 10
    batch_size: Optional[int] = 16
    rounds: int = 30
    reg: Optional[str] = None
    reg_weight: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0 or self.eta < 0 or self.reg_weight < 0:
            raise ValueError("learning_rate, eta and reg_weight must be non-negative")
        if self.tau < 1 or self.local_epochs < 1 or self.rounds < 1:
            raise ValueError("tau, local_epochs and rounds must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.reg not in REGULARIZERS:
            raise ValueError(f"reg must be one of {REGULARIZERS}")


def sgd(w, layout: ModelLayout, data, ancestors, cfg: TrainConfig, rng=None, eta=None) -> np.ndarray:
    """Mini-batch SGD on the personalised objective; returns the new weight vector.

    The step is capped at ``1 / (2 * eta * sum_k 1/N_k)``, the inverse curvature
    of the proximal terms. Without the cap a small group and a large ``eta``
    make the explicit step overshoot its ancestor and diverge; below it the
    configured learning rate is used unchanged.
    """
    eta = cfg.eta if eta is None else eta
    curvature = 2.0 * eta * sum(1.0 / count for _, count in ancestors)
    lr = cfg.learning_rate if curvature == 0 else min(cfg.learning_rate, 1.0 / curvature)
    x, y = _xy(data)
    w = np.array(w, dtype=float, copy=True)
    m = y.size
    batch = m if cfg.batch_size is None or m == 0 else min(cfg.batch_size, m)
    for _ in range(cfg.local_epochs):
        order = np.arange(m) if rng is None else rng.permutation(m)
        starts = range(0, m, batch) if m else [0]
        for s in starts:
            idx = order[s:s + batch]
            val, g = personalized_objective_grad(w, layout, (x[idx], y[idx]), ancestors, eta, cfg.reg, cfg.reg_weight)
            if not np.isfinite(val) or not np.all(np.isfinite(g)):
                raise DivergenceDetected("training loss became non-finite")
            w -= lr * g
    if not np.all(np.isfinite(w)):
        raise DivergenceDetected("weights became non-finite")
    return w


def local_train(model: ModelParams, data, group_tree: GroupTree, ue: int, cfg: TrainConfig, rng=None) -> ModelParams:
    return ModelParams(sgd(model.weights, model.layout, data, group_tree.ancestors(ue), cfg, rng), model.layout)


# ---------------------------------------------------------------------------
# aggregation


def partial_group_aggregate(sbs: int, assignment, tree: GroupTree) -> dict:
    """Per-group (sum of member weights, member count) over the UEs served by ``sbs``."""
    members = np.flatnonzero(np.asarray(assignment) == sbs)
    out = {}
    for n in members:
        g = tree.group_of(int(n))
        if g in out:
            s, c = out[g]
            out[g] = (s + tree.personal[n], c + 1)
        else:
            out[g] = (tree.personal[n].copy(), 1)
    return out


def combine_partials(partials, n_groups: int, dim: int):
    """Merge SBS partial sums into per-group (sum, count) arrays.

    Each UE contributes exactly one partial, so the sums are added with
    ``math.fsum`` per coordinate to make the result independent of the order.
    """
    parts = {}
    for p in partials:
        for g, (s, c) in p.items():
            parts.setdefault(g, []).append((s, c))
    sums = np.zeros((n_groups, dim))
    counts = np.zeros(n_groups, dtype=int)
    for g, items in parts.items():
        stack = np.stack([s for s, _ in items])
        sums[g] = _exact_sum(stack)
        counts[g] = sum(c for _, c in items)
    return sums, counts


def _exact_sum(stack):
    if stack.shape[0] == 1:
        return stack[0]
    return np.array([math.fsum(col) for col in stack.T])


def hierarchical_average(tree: GroupTree, assignment=None) -> GroupTree:
    """Group models as member means, then the regional model as the size-weighted group mean.

    When ``assignment`` (UE -> serving node) is given the group sums are built
    from per-node partial sums, mimicking the SBS/MBS split; the result is the
    same whatever the assignment.
    """
    n, d = tree.personal.shape
    if assignment is None:
        assignment = np.zeros(n, dtype=int)
    assignment = np.asarray(assignment)
    nodes = np.unique(assignment)
    partials = [partial_group_aggregate(int(s), assignment, tree) for s in nodes]
    sums, counts = combine_partials(partials, tree.n_groups, d)
    if np.any(counts == 0):
        raise EmptyGroup("a group received no member models")
    group_models = sums / counts[:, None]
    weights = counts / counts.sum()
    regional = weights @ group_models
    return GroupTree(tree.personal, tree.groups, tree.layout, group_models, regional, tree.dendrogram)


def regional_objective(tree: GroupTree, group_datasets, eta: float) -> float:
    """Size-weighted group losses plus (eta/2)-weighted distances to the regional model."""
    if tree.group_models is None or tree.regional is None:
        raise MissingAncestor("tree has no aggregated models")
    counts = tree.counts(1)
    total = 0.0
    for i, data in enumerate(group_datasets):
        model = ModelParams(tree.group_models[i], tree.layout)
        x, y = _xy(data)
        loss = local_loss(model, (x, y)) if y.size else 0.0
        diff = tree.group_models[i] - tree.regional
        total += counts[i] / counts.sum() * (loss + 0.5 * eta * float(diff @ diff))
    return total


def fedavg_round(models, data_sizes) -> np.ndarray:
    """Data-size weighted mean of client weight vectors."""
    models = np.asarray(models, dtype=float)
    sizes = np.asarray(data_sizes, dtype=float)
    if models.ndim != 2 or models.shape[0] == 0:
        raise EmptyGroup("fedavg needs at least one model")
    if sizes.shape != (models.shape[0],) or np.any(sizes < 0) or sizes.sum() <= 0:
        raise ValueError("data_sizes must be non-negative with a positive total")
    return (sizes / sizes.sum()) @ models


# ---------------------------------------------------------------------------
# regrouping


def _relabel(labels) -> list:
    """Groups ordered by their lowest member."""
    groups = {}
    for n, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(n)
    return sorted((tuple(g) for g in groups.values()), key=lambda g: g[0])


def recluster(level0_models, n_groups: int, linkage: str = "average", layout: Optional[ModelLayout] = None,
              features=None) -> GroupTree:
    """Agglomerative clustering of personal models cut into exactly ``n_groups`` groups.

    Distances are Euclidean on ``features`` (the weight vectors by default).
    Group and regional models of the returned tree are the plain averages of
    the new groups. ``tree.dendrogram`` records every merge with its height.
    """
    models = np.asarray(level0_models, dtype=float)
    n = models.shape[0]
    if not 1 <= n_groups <= n:
        raise ValueError(f"need 1 <= n_groups <= {n}")
    if linkage not in LINKAGES:
        raise ValueError(f"linkage must be one of {LINKAGES}")
    feats = models if features is None else np.asarray(features, dtype=float)
    layout = layout or ModelLayout("flat", (("w", (models.shape[1],)),))
    if n == 1:
        tree = GroupTree(models, [(0,)], layout)
        tree.dendrogram = {"merges": [], "heights": []}
        return hierarchical_average(tree)
    z = scipy_linkage(feats, method=linkage, metric="euclidean")
    labels = cut_tree(z, n_clusters=n_groups).ravel()
    tree = GroupTree(models, _relabel(labels), layout)
    tree.dendrogram = {
        "merges": [[int(a), int(b), float(h), int(c)] for a, b, h, c in z],
        "heights": [float(h) for h in z[:, 2]],
    }
    return hierarchical_average(tree)


def mean_pairwise_distance(models) -> float:
    models = np.asarray(models, dtype=float)
    if models.shape[0] < 2:
        return 0.0
    return float(pdist(models).mean())
