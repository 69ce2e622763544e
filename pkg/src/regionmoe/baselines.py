"""Fusion baselines: concatenation MLP, late-fusion MLPs, multinomial logistic regression."""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from .data import FeatureSchema
from .errors import NoAvailableExpertsError
from .nn import DenseLayer, MlpParams, init_params, mlp_backward, mlp_forward, params_from_dict, params_to_dict, stable_softmax
from .objectives import LossConfig, total_loss
from .optim import TrainConfig, TrainTrace, train


def concat_inputs(X: np.ndarray, avail: np.ndarray, with_flags: bool) -> np.ndarray:
    """Zero-imputed features, plus one availability flag per modality when requested."""
    return np.hstack([X, avail.astype(np.float64)]) if with_flags else X


def wants_flags(schema: FeatureSchema) -> bool:
    # with a single modality the flag is constant 1 and carries nothing
    return len(schema.modalities) > 1


def _ce_step(net: MlpParams, inputs, y, loss_cfg, class_weights, need_grads):
    logits, cache = mlp_forward(net, inputs)
    pred = SimpleNamespace(class_probs=stable_softmax(logits))
    breakdown, lg = total_loss(pred, y, loss_cfg, class_weights)
    if not need_grads:
        return breakdown, None
    return breakdown, mlp_backward(net, cache, lg.fused)[0].arrays()


@dataclass
class ConcatMlpModel:
    schema: FeatureSchema
    num_classes: int
    net: MlpParams
    flags: bool = True

    @classmethod
    def build(cls, schema, num_classes, hidden=(64, 32), seed=0) -> "ConcatMlpModel":
        flags = wants_flags(schema)
        in_dim = schema.n_features + (len(schema.modalities) if flags else 0)
        return cls(schema, num_classes, init_params(in_dim, hidden, num_classes, [seed, 4, 0]), flags)

    def parameters(self):
        return self.net.tensors()

    def predict_proba(self, X, avail) -> np.ndarray:
        return stable_softmax(mlp_forward(self.net, concat_inputs(X, avail, self.flags))[0])

    def loss_and_grads(self, X, avail, y, loss_cfg, class_weights, need_grads=True):
        return _ce_step(self.net, concat_inputs(X, avail, self.flags), y, loss_cfg, class_weights, need_grads)


@dataclass
class ModalityMlp:
    """One late-fusion branch: an MLP over a single modality's columns."""

    schema: FeatureSchema
    modality_index: int
    net: MlpParams

    def inputs(self, X):
        return X[:, self.schema.modality_slice(self.modality_index)]

    def parameters(self):
        return self.net.tensors()

    def predict_proba(self, X, avail=None) -> np.ndarray:
        return stable_softmax(mlp_forward(self.net, self.inputs(X))[0])

    def loss_and_grads(self, X, avail, y, loss_cfg, class_weights, need_grads=True):
        return _ce_step(self.net, self.inputs(X), y, loss_cfg, class_weights, need_grads)


@dataclass
class LateFusionModel:
    schema: FeatureSchema
    num_classes: int
    branches: list[ModalityMlp]

    @classmethod
    def build(cls, schema, num_classes, hidden=(64, 32), seed=0) -> "LateFusionModel":
        branches = [
            ModalityMlp(schema, k, init_params(len(m.columns), hidden, num_classes, [seed, 4, k]))
            for k, m in enumerate(schema.modalities)
        ]
        return cls(schema, num_classes, branches)

    def branch_probs(self, X) -> np.ndarray:
        return np.stack([b.predict_proba(X) for b in self.branches], axis=1)  # (n, M, C)

    def predict_proba(self, X, avail) -> np.ndarray:
        """Mean of the softmax outputs of the available modalities."""
        X = np.atleast_2d(X)
        avail = np.atleast_2d(np.asarray(avail, dtype=bool))
        counts = avail.sum(axis=1)
        if np.any(counts == 0):
            raise NoAvailableExpertsError("late fusion: subject with no available modality")
        probs = self.branch_probs(X)
        return (probs * avail[:, :, None]).sum(axis=1) / counts[:, None]

    def fit(self, X, avail, y, cfg: TrainConfig, loss_cfg: LossConfig) -> list[TrainTrace]:
        """Each branch is trained on its own, on the rows where its modality is present."""
        traces = []
        for k, branch in enumerate(self.branches):
            rows = avail[:, k]
            _, trace = train(branch, X[rows], avail[rows], y[rows], cfg, loss_cfg, self.num_classes)
            traces.append(trace)
        return traces


@dataclass
class LogRegModel:
    """Multinomial logistic regression: one linear layer + softmax."""

    schema: FeatureSchema
    num_classes: int
    layer: DenseLayer
    flags: bool = True

    @classmethod
    def build(cls, schema, num_classes, hidden=None, seed=0) -> "LogRegModel":
        flags = wants_flags(schema)
        in_dim = schema.n_features + (len(schema.modalities) if flags else 0)
        return cls(schema, num_classes, DenseLayer(np.zeros((num_classes, in_dim)), np.zeros(num_classes), "id"), flags)

    def parameters(self):
        return [(self.layer.w, True), (self.layer.b, False)]

    def logits(self, X, avail):
        return concat_inputs(X, avail, self.flags) @ self.layer.w.T + self.layer.b

    def predict_proba(self, X, avail) -> np.ndarray:
        return stable_softmax(self.logits(X, avail))

    def loss_and_grads(self, X, avail, y, loss_cfg, class_weights, need_grads=True):
        inputs = concat_inputs(X, avail, self.flags)
        pred = SimpleNamespace(class_probs=stable_softmax(inputs @ self.layer.w.T + self.layer.b))
        breakdown, lg = total_loss(pred, y, loss_cfg, class_weights)
        if not need_grads:
            return breakdown, None
        return breakdown, [lg.fused.T @ inputs, lg.fused.sum(axis=0)]


def concat_predict(model: ConcatMlpModel, X, avail) -> np.ndarray:
    return model.predict_proba(np.atleast_2d(X), np.atleast_2d(avail))


def late_fusion_predict(model: LateFusionModel, X, avail) -> np.ndarray:
    return model.predict_proba(X, avail)


def logreg_train_predict(X, avail, y, schema, num_classes, cfg: TrainConfig, loss_cfg: LossConfig):
    model = LogRegModel.build(schema, num_classes)
    _, trace = train(model, X, avail, y, cfg, loss_cfg, num_classes)
    return model, model.predict_proba(X, avail), trace


# -- serialization -------------------------------------------------------------


def concat_to_dict(m: ConcatMlpModel) -> dict:
    return {"num_classes": m.num_classes, "flags": m.flags, "net": params_to_dict(m.net)}


def concat_from_dict(doc: dict, schema) -> ConcatMlpModel:
    return ConcatMlpModel(schema, doc["num_classes"], params_from_dict(doc["net"]), doc["flags"])


def late_to_dict(m: LateFusionModel) -> dict:
    return {
        "num_classes": m.num_classes,
        "branches": {m.schema.modalities[b.modality_index].name: params_to_dict(b.net) for b in m.branches},
    }


def late_from_dict(doc: dict, schema) -> LateFusionModel:
    branches = [ModalityMlp(schema, k, params_from_dict(doc["branches"][mod.name])) for k, mod in enumerate(schema.modalities)]
    return LateFusionModel(schema, doc["num_classes"], branches)


def logreg_to_dict(m: LogRegModel) -> dict:
    return {"num_classes": m.num_classes, "flags": m.flags, "w": m.layer.w.tolist(), "b": m.layer.b.tolist()}


def logreg_from_dict(doc: dict, schema) -> LogRegModel:
    b = np.array(doc["b"], dtype=np.float64)
    w = np.array(doc["w"], dtype=np.float64).reshape(len(b), -1)
    return LogRegModel(schema, doc["num_classes"], DenseLayer(w, b, "id"), doc["flags"])
