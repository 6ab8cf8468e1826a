"""Learned scoring components for cardinality-constrained label prediction.

Four pieces share one parameter store:

* a feature network mapping a sparse input to per-label unary coefficients
  ``c``, so the unary part of the score is the linear form ``c . y``;
* a global potential, a one-hidden-layer ReLU network over the label vector
  alone, independent of the input by construction;
* a cardinality predictor, a one-hidden-layer ReLU network whose softmax
  output is a distribution over label-set sizes ``{0, ..., Z}``;
* optional per-bucket weights for the sigmoid-indicator cardinality score
  used by the soft-cardinality ascent variant.

``ScoreModel`` owns plain float64 buffers.  Forward passes never touch the
buffers directly: bind the model to a tape with ``TapedModel`` and call the
operation functions, which build differentiable graphs and leave gradients
in the bound leaves after a backward sweep.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import diffgraph as dg
from .diffgraph import Tape, Var

CHECKPOINT_FORMAT = "cardproj-checkpoint-v1"

__all__ = [
    "ModelConfig",
    "ScoreModel",
    "TapedModel",
    "CHECKPOINT_FORMAT",
    "unary_scores",
    "global_score",
    "grad_global_score",
    "cardinality_logits",
    "cardinality_distribution",
    "predict_cardinality",
    "sc_cardinality_score",
    "grad_sc_score",
    "save_model",
    "load_model",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture sizes, fixed at construction.

    ``max_cardinality`` is the largest representable label-set size; the
    cardinality predictor emits ``max_cardinality + 1`` probabilities so the
    empty set is representable too.
    """

    input_dim: int
    label_count: int
    max_cardinality: int
    feature_hidden: int = 150
    feature_dim: int = 150
    global_hidden: int = 150
    cardinality_hidden: int = 150
    with_sc: bool = False
    seed: int = 0

    def __post_init__(self):
        sizes = (
            "input_dim",
            "label_count",
            "max_cardinality",
            "feature_hidden",
            "feature_dim",
            "global_hidden",
            "cardinality_hidden",
        )
        for name in sizes:
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ValueError(f"{name} must be an integer, got {value!r}")
            if value < 1:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.max_cardinality > self.label_count:
            raise ValueError(
                f"max_cardinality {self.max_cardinality} exceeds "
                f"label_count {self.label_count}"
            )


def _init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    # He scaling before each ReLU, inverse fan-in for linear outputs,
    # zero biases.  Draw order is fixed so a seed pins every buffer.
    rng = np.random.default_rng(config.seed)
    d, l = config.input_dim, config.label_count
    h1, f = config.feature_hidden, config.feature_dim
    h2, h3 = config.global_hidden, config.cardinality_hidden
    buckets = config.max_cardinality + 1

    def he(rows, cols):
        return rng.normal(0.0, np.sqrt(2.0 / cols), size=(rows, cols))

    def lin(rows, cols):
        return rng.normal(0.0, np.sqrt(1.0 / cols), size=(rows, cols))

    params = {
        "feature.w1": he(h1, d),
        "feature.b1": np.zeros(h1),
        "feature.w2": lin(f, h1),
        "feature.b2": np.zeros(f),
        "unary.w": lin(l, f),
        "unary.b": np.zeros(l),
        "global.w1": he(h2, l),
        "global.b1": np.zeros(h2),
        "global.w2": lin(1, h2)[0],
        "global.b2": np.zeros(()),
        "cardinality.w1": he(h3, d),
        "cardinality.b1": np.zeros(h3),
        "cardinality.w2": lin(buckets, h3),
        "cardinality.b2": np.zeros(buckets),
    }
    if config.with_sc:
        params["sc.weights"] = np.zeros(config.max_cardinality)
    return params


class ScoreModel:
    """Parameter container.  Forward passes go through :class:`TapedModel`."""

    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config
        self.params = _init_params(config) if params is None else params
        for name, buf in self.params.items():
            if not np.all(np.isfinite(buf)):
                raise ValueError(f"parameter buffer {name} contains non-finite values")

    def copy(self) -> "ScoreModel":
        return ScoreModel(
            self.config, {k: np.array(v) for k, v in self.params.items()}
        )


class TapedModel:
    """One model bound to one tape: every buffer becomes a leaf node.

    A fresh binding is needed per tape; leaves from one tape cannot mix
    with nodes of another.  After ``tape.backward`` the per-buffer
    gradients are read off with :meth:`grads`.
    """

    def __init__(self, model: ScoreModel, tape: Tape):
        self.config = model.config
        self.tape = tape
        self.vars = {name: tape.leaf(buf) for name, buf in model.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {name: np.array(v.adjoint) for name, v in self.vars.items()}


def _check_sparse_input(tm: TapedModel, indices, values):
    idx = np.asarray(indices, dtype=np.intp)
    vals = np.asarray(values, dtype=np.float64)
    if idx.shape != vals.shape or idx.ndim != 1:
        raise ValueError("indices and values must be equal-length vectors")
    if idx.size:
        if idx.min() < 0 or idx.max() >= tm.config.input_dim:
            raise ValueError(
                f"feature index out of range for input_dim {tm.config.input_dim}"
            )
        if np.unique(idx).size != idx.size:
            raise ValueError("duplicate feature indices")
    return idx, vals


# ---------------------------------------------------------------------------
# score components


def unary_scores(tm: TapedModel, feature_indices, feature_values) -> Var:
    """Per-label unary coefficients c(x), shape (label_count,)."""
    idx, vals = _check_sparse_input(tm, feature_indices, feature_values)
    p = tm.vars
    hidden = dg.relu(dg.add(dg.matvec_sparse(p["feature.w1"], idx, vals), p["feature.b1"]))
    feats = dg.add(dg.matvec(p["feature.w2"], hidden), p["feature.b2"])
    return dg.add(dg.matvec(p["unary.w"], feats), p["unary.b"])


def global_score(tm: TapedModel, y: Var) -> Var:
    """Input-independent potential over the label vector, a scalar node."""
    p = tm.vars
    hidden = dg.relu(dg.add(dg.matvec(p["global.w1"], y), p["global.b1"]))
    return dg.add(dg.dot(p["global.w2"], hidden), p["global.b2"])


def grad_global_score(tm: TapedModel, y: Var) -> Var:
    """Gradient of the global potential with respect to ``y``, on the tape.

    For a one-hidden-layer ReLU network the gradient is
    W1' (w2 * step(W1 y + b1)).  The step mask enters as a detached
    constant: the potential's second derivative in ``y`` is zero almost
    everywhere, so a constant mask is exact away from kinks, while the
    returned node stays differentiable with respect to the parameters.
    """
    p = tm.vars
    pre = p["global.w1"].value @ y.value + p["global.b1"].value
    mask = tm.tape.constant((pre > 0.0).astype(np.float64))
    return dg.matvec_t(p["global.w1"], dg.mul(p["global.w2"], mask))


def cardinality_logits(tm: TapedModel, feature_indices, feature_values) -> Var:
    """Unnormalized scores over label-set sizes {0, ..., max_cardinality}."""
    idx, vals = _check_sparse_input(tm, feature_indices, feature_values)
    p = tm.vars
    hidden = dg.relu(
        dg.add(dg.matvec_sparse(p["cardinality.w1"], idx, vals), p["cardinality.b1"])
    )
    return dg.add(dg.matvec(p["cardinality.w2"], hidden), p["cardinality.b2"])


def cardinality_distribution(tm: TapedModel, feature_indices, feature_values) -> Var:
    return dg.softmax(cardinality_logits(tm, feature_indices, feature_values))


def predict_cardinality(tm: TapedModel, feature_indices, feature_values, mode="expected"):
    """Predicted label-set size.

    ``expected`` returns the distribution mean as a scalar node, so the
    budget stays differentiable; ``argmax`` returns the modal size as a
    plain int, detached from the graph.
    """
    probs = cardinality_distribution(tm, feature_indices, feature_values)
    if mode == "expected":
        support = tm.tape.constant(
            np.arange(tm.config.max_cardinality + 1, dtype=np.float64)
        )
        return dg.dot(probs, support)
    if mode == "argmax":
        return int(np.argmax(probs.value))
    raise ValueError(f"unknown cardinality mode {mode!r}")


# ---------------------------------------------------------------------------
# sigmoid-indicator cardinality score (soft-cardinality ascent variant)


def _require_sc(tm: TapedModel) -> Var:
    if "sc.weights" not in tm.vars:
        raise ValueError("model was built without sc weights (with_sc=False)")
    return tm.vars["sc.weights"]


def _soft_indicators(y: Var, count: int) -> list[Var]:
    # indicator k (1-based) is sigmoid(sum(y) - k); returns k = 1 .. count
    total = dg.vsum(y)
    return [dg.sigmoid(dg.shift(total, -float(k))) for k in range(1, count + 1)]


def sc_cardinality_score(tm: TapedModel, y: Var) -> Var:
    """Weighted soft bucket score: sum_k w_k I_k (1 - I_{k+1}).

    I_k = sigmoid(sum(y) - k) softly tests whether at least k labels are
    active, so I_k (1 - I_{k+1}) peaks when the total mass sits near k.
    """
    w = _require_sc(tm)
    z = tm.config.max_cardinality
    ind = _soft_indicators(y, z + 1)
    score = None
    for k in range(1, z + 1):
        term = dg.mul(dg.mul(dg.pick(w, k - 1), ind[k - 1]), 1.0 - ind[k])
        score = term if score is None else dg.add(score, term)
    return score


def grad_sc_score(tm: TapedModel, y: Var) -> Var:
    """Gradient of the bucket score with respect to ``y``, on the tape.

    The score depends on ``y`` only through its sum, so the gradient is a
    constant vector: d(score)/d(total) broadcast over coordinates.  Unlike
    the ReLU case the derivative here is built from sigmoid nodes, keeping
    it smooth in ``y``; second-order terms survive backpropagation through
    the unrolled ascent.
    """
    w = _require_sc(tm)
    z = tm.config.max_cardinality
    ind = _soft_indicators(y, z + 1)
    slope = None
    for k in range(1, z + 1):
        ik, ik1 = ind[k - 1], ind[k]
        dik = dg.mul(ik, 1.0 - ik)
        dik1 = dg.mul(ik1, 1.0 - ik1)
        term = dg.mul(
            dg.pick(w, k - 1),
            dg.sub(dg.mul(dik, 1.0 - ik1), dg.mul(ik, dik1)),
        )
        slope = term if slope is None else dg.add(slope, term)
    ones = y.tape.constant(np.ones(len(y)))
    return dg.mul(ones, slope)


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: ScoreModel, path) -> None:
    """Write parameters plus architecture metadata to an .npz container."""
    meta = json.dumps(
        {"format": CHECKPOINT_FORMAT, "config": asdict(model.config)}
    )
    arrays = dict(model.params)
    arrays["__meta__"] = np.array(meta)
    np.savez(path, **arrays)


def load_model(path) -> ScoreModel:
    with np.load(path, allow_pickle=False) as archive:
        if "__meta__" not in archive:
            raise ValueError(f"{path} is not a model checkpoint (missing metadata)")
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(
                f"unsupported checkpoint format {meta.get('format')!r}, "
                f"expected {CHECKPOINT_FORMAT!r}"
            )
        config = ModelConfig(**meta["config"])
        expected = _init_params(config)
        params = {}
        for name, template in expected.items():
            if name not in archive:
                raise ValueError(f"checkpoint missing parameter buffer {name}")
            buf = np.asarray(archive[name], dtype=np.float64)
            if buf.shape != template.shape:
                raise ValueError(
                    f"buffer {name} has shape {buf.shape}, expected {template.shape}"
                )
            params[name] = buf
    return ScoreModel(config, params)
