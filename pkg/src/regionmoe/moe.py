"""Regional mixture of experts with flat or two-level (modality x region) gating.

Every function works on batches: ``X`` is ``(n, D)`` normalized features with
zeros in unavailable modalities and ``avail`` is ``(n, M)`` boolean.

Pipeline per subject: expert logits ``h`` (N x C), raw gate weights on the
simplex, mask unavailable experts and renormalize, optional top-k, then
``fused = sum_m g_m h_m`` and ``probs = softmax(fused)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Cohort, FeatureSchema, SubjectRecord
from .errors import ConfigError, DimensionError, NoAvailableExpertsError
from .objectives import LossConfig, total_loss
from .nn import (
    ForwardCache,
    MlpParams,
    init_params,
    mlp_backward,
    mlp_forward,
    params_from_dict,
    params_to_dict,
    softmax_backward,
    stable_softmax,
)

GATE_MODES = ("flat", "hier", "modality", "region")


@dataclass
class ExpertSlot:
    modality: str
    region: str | None
    in_dim: int
    net: MlpParams


@dataclass
class ExpertGroup:
    """Consecutive experts with identical layer shapes, stored stacked so a
    single batched matmul serves them all. Each expert's ``MlpParams`` holds
    views into these arrays."""

    start: int
    stop: int
    cols: np.ndarray  # (E, d) feature columns of each expert
    w: list[np.ndarray]  # per layer, (E, out, in)
    b: list[np.ndarray]  # per layer, (E, out)
    acts: list[str]

    def tensors(self) -> list[tuple[np.ndarray, bool]]:
        return [t for w, b in zip(self.w, self.b) for t in ((w, True), (b, False))]


def _layer_shapes(net: MlpParams):
    return tuple((l.w.shape, l.act) for l in net.layers)


def _build_groups(blocks: list[ExpertSlot], layout) -> list[ExpertGroup]:
    groups, m = [], 0
    while m < len(blocks):
        shape = _layer_shapes(blocks[m].net)
        e = m + 1
        while e < len(blocks) and _layer_shapes(blocks[e].net) == shape:
            e += 1
        members = blocks[m:e]
        w = [np.stack([s.net.layers[i].w for s in members]) for i in range(3)]
        b = [np.stack([s.net.layers[i].b for s in members]) for i in range(3)]
        for j, s in enumerate(members):
            for i, layer in enumerate(s.net.layers):
                layer.w, layer.b = w[i][j], b[i][j]
        cols = np.stack([np.arange(layout[q].start, layout[q].stop) for q in range(m, e)])
        groups.append(ExpertGroup(m, e, cols, w, b, [l.act for l in members[0].net.layers]))
        m = e
    return groups


@dataclass
class MoeConfig:
    num_classes: int
    schema: FeatureSchema
    blocks: list[ExpertSlot]
    gate_mode: str = "hier"
    top_k: int | None = None

    def __post_init__(self):
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")
        layout = self.schema.blocks
        if len(self.blocks) != len(layout) or not self.blocks:
            raise DimensionError("number of experts", len(layout), len(self.blocks))
        for slot, b in zip(self.blocks, layout):
            if slot.in_dim != b.dim or slot.net.in_dim != b.dim:
                raise DimensionError(f"expert {b.label} input dim", b.dim, slot.net.in_dim)
            if slot.net.out_dim != self.num_classes:
                raise DimensionError(f"expert {b.label} output dim", self.num_classes, slot.net.out_dim)
        if self.top_k is not None and not 1 <= self.top_k <= len(self.blocks):
            raise ConfigError(f"top_k must be in [1, {len(self.blocks)}], got {self.top_k}")
        # own the nets: experts are re-homed into stacked group storage
        self.blocks = [ExpertSlot(b.modality, b.region, b.in_dim, b.net.copy()) for b in self.blocks]
        self.groups = _build_groups(self.blocks, layout)
        self.block_modality = np.array([b.modality_index for b in layout], dtype=np.intp)
        self.modality_blocks = []
        for k in range(len(self.schema.modalities)):
            idx = np.flatnonzero(self.block_modality == k)
            self.modality_blocks.append((int(idx[0]), int(idx[-1]) + 1))

    @property
    def n_experts(self) -> int:
        return len(self.blocks)

    @property
    def n_modalities(self) -> int:
        return len(self.schema.modalities)

    def n_regions(self, k: int) -> int:
        b0, b1 = self.modality_blocks[k]
        return b1 - b0


@dataclass
class GateTree:
    flat: MlpParams | None = None
    modality: MlpParams | None = None
    regions: dict[str, MlpParams] = field(default_factory=dict)

    def nets(self) -> list[MlpParams]:
        out = [n for n in (self.flat, self.modality) if n is not None]
        return out + list(self.regions.values())


@dataclass
class GateOutput:
    weights: np.ndarray  # (n, N)
    modality_weights: np.ndarray  # (n, M)
    region_weights: list[np.ndarray]  # per modality, (n, R_k), sums to 1 where the modality has weight
    active_mask: np.ndarray  # (n, N) expert availability
    selected_mask: np.ndarray  # (n, N) experts surviving masking and top-k


@dataclass
class Prediction:
    class_probs: np.ndarray  # (n, C)
    fused_logits: np.ndarray  # (n, C)
    gate: GateOutput
    expert_logits: np.ndarray  # (n, N, C)


@dataclass
class MoeModel:
    config: MoeConfig
    tree: GateTree

    def nets(self) -> list[MlpParams]:
        return [s.net for s in self.config.blocks] + self.tree.nets()

    def parameters(self) -> list[tuple[np.ndarray, bool]]:
        """Stacked expert-group tensors, then gate tensors (flat, modality, regions)."""
        experts = [t for g in self.config.groups for t in g.tensors()]
        return experts + [t for net in self.tree.nets() for t in net.tensors()]

    def copy(self) -> "MoeModel":
        cfg = self.config
        blocks = [ExpertSlot(s.modality, s.region, s.in_dim, s.net.copy()) for s in cfg.blocks]
        tree = GateTree(
            self.tree.flat.copy() if self.tree.flat else None,
            self.tree.modality.copy() if self.tree.modality else None,
            {k: v.copy() for k, v in self.tree.regions.items()},
        )
        return MoeModel(MoeConfig(cfg.num_classes, cfg.schema, blocks, cfg.gate_mode, cfg.top_k), tree)

    def predict(self, X, avail) -> Prediction:
        return fuse_predict(self.config, self.tree, X, avail)

    def predict_proba(self, X, avail) -> np.ndarray:
        return self.predict(X, avail).class_probs

    def loss_and_grads(self, X, avail, y, loss_cfg: LossConfig, class_weights, need_grads: bool = True):
        pred, cache = moe_forward(self.config, self.tree, X, avail)
        breakdown, lg = total_loss(pred, y, loss_cfg, class_weights, need_grads)
        if not need_grads:
            return breakdown, None
        return breakdown, moe_backward(self, cache, lg.fused, lg.gate, lg.experts)


def gate_input_dim(schema: FeatureSchema) -> int:
    return schema.n_features + len(schema.modalities)


def build_moe(
    schema: FeatureSchema,
    num_classes: int,
    gate_mode: str = "hier",
    top_k: int | None = None,
    hidden=(64, 32),
    seed: int = 0,
) -> MoeModel:
    blocks = [
        ExpertSlot(b.modality, b.region, b.dim, init_params(b.dim, hidden, num_classes, [seed, 1, m]))
        for m, b in enumerate(schema.blocks)
    ]
    config = MoeConfig(num_classes, schema, blocks, gate_mode, top_k)
    gin = gate_input_dim(schema)
    tree = GateTree()
    if gate_mode == "flat":
        tree.flat = init_params(gin, hidden, config.n_experts, [seed, 2, 0])
    if gate_mode in ("hier", "modality"):
        tree.modality = init_params(gin, hidden, config.n_modalities, [seed, 2, 1])
    if gate_mode in ("hier", "region"):
        for k, mod in enumerate(schema.modalities):
            # a singleton modality's region weight is identically 1: no net
            if config.n_regions(k) > 1:
                tree.regions[mod.name] = init_params(len(mod.columns), hidden, config.n_regions(k), [seed, 3, k])
    return MoeModel(config, tree)


# -- inputs --------------------------------------------------------------------


def _as_batch(X, avail) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    avail = np.asarray(avail, dtype=bool)
    if X.ndim == 1:
        X = X[None, :]
    if avail.ndim == 1:
        avail = avail[None, :]
    return X, avail


def records_to_batch(schema: FeatureSchema, records: list[SubjectRecord]) -> tuple[np.ndarray, np.ndarray]:
    X = np.zeros((len(records), schema.n_features))
    avail = np.zeros((len(records), len(schema.modalities)), dtype=bool)
    for i, rec in enumerate(records):
        for b in schema.blocks:
            x = np.asarray(rec.blocks[(b.modality, b.region)], dtype=np.float64)
            if x.shape != (b.dim,):
                raise DimensionError(f"block {b.label} of subject {rec.id}", b.dim, x.shape)
            X[i, b.start : b.stop] = x
        avail[i] = [rec.availability[m] for m in schema.modality_names]
    return X, avail


def cohort_batch(cohort: Cohort) -> tuple[np.ndarray, np.ndarray]:
    return cohort.features(), cohort.avail


def gate_features(X: np.ndarray, avail: np.ndarray) -> np.ndarray:
    """Input to the modality-level (and flat) gate: features plus availability flags."""
    return np.hstack([X, avail.astype(np.float64)])


# -- experts -------------------------------------------------------------------


def _group_forward(group: ExpertGroup, X: np.ndarray):
    a = X[:, group.cols].transpose(1, 0, 2)  # (E, n, d)
    inputs, pres = [], []
    for w, b, act in zip(group.w, group.b, group.acts):
        inputs.append(a)
        z = a @ w.transpose(0, 2, 1) + b[:, None, :]
        pres.append(z)
        a = np.maximum(z, 0.0) if act == "relu" else z
    return a, (inputs, pres)


def _group_backward(group: ExpertGroup, cache, dh: np.ndarray) -> list[np.ndarray]:
    inputs, pres = cache
    G = dh.transpose(1, 0, 2)  # (E, n, C)
    out: list[np.ndarray] = [None] * 6  # type: ignore[list-item]
    for i in (2, 1, 0):
        if group.acts[i] == "relu":
            G = G * (pres[i] > 0.0)
        out[2 * i] = G.transpose(0, 2, 1) @ inputs[i]
        out[2 * i + 1] = G.sum(axis=1)
        if i:
            G = G @ group.w[i]
    return out


def _experts_forward(config: MoeConfig, X: np.ndarray) -> tuple[np.ndarray, list]:
    if X.shape[1] != config.schema.n_features:
        raise DimensionError("feature vector length", config.schema.n_features, X.shape[1])
    h = np.empty((X.shape[0], config.n_experts, config.num_classes))
    caches = []
    for group in config.groups:
        out, cache = _group_forward(group, X)
        h[:, group.start : group.stop, :] = out.transpose(1, 0, 2)
        caches.append(cache)
    return h, caches


def expert_logits(config: MoeConfig, X) -> np.ndarray:
    """(n, N, C) logits; unavailable blocks are computed on their zero placeholders."""
    X, _ = _as_batch(X, np.ones(1, dtype=bool))
    return _experts_forward(config, X)[0]


# -- gates ---------------------------------------------------------------------


def _summaries(config: MoeConfig, g: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    mod_w = np.stack([g[:, b0:b1].sum(axis=1) for b0, b1 in config.modality_blocks], axis=1)
    reg_w = []
    for k, (b0, b1) in enumerate(config.modality_blocks):
        denom = mod_w[:, k : k + 1]
        with np.errstate(invalid="ignore", divide="ignore"):
            reg_w.append(np.where(denom > 0, g[:, b0:b1] / denom, 0.0))
    return mod_w, reg_w


@dataclass
class _GateCache:
    gin: np.ndarray
    g_raw: np.ndarray
    P: np.ndarray | None = None
    Q: list[np.ndarray] | None = None
    flat: ForwardCache | None = None
    modality: ForwardCache | None = None
    regions: dict[int, ForwardCache] = field(default_factory=dict)


def _gate_forward(config: MoeConfig, tree: GateTree, X: np.ndarray, avail: np.ndarray) -> tuple[GateOutput, _GateCache]:
    n, N, M = X.shape[0], config.n_experts, config.n_modalities
    gin = gate_features(X, avail)
    everyone = np.ones((n, N), dtype=bool)
    if config.gate_mode == "flat":
        z, fc = mlp_forward(tree.flat, gin)
        g = stable_softmax(z)
        mod_w, reg_w = _summaries(config, g)
        return GateOutput(g, mod_w, reg_w, everyone, everyone.copy()), _GateCache(gin, g, flat=fc)

    cache = _GateCache(gin, None)  # type: ignore[arg-type]
    if config.gate_mode in ("hier", "modality"):
        z, cache.modality = mlp_forward(tree.modality, gin)
        P = stable_softmax(z)
    else:
        P = np.full((n, M), 1.0 / M)
    Q = []
    for k, mod in enumerate(config.schema.modalities):
        R = config.n_regions(k)
        if config.gate_mode in ("hier", "region") and R > 1:
            z, cache.regions[k] = mlp_forward(tree.regions[mod.name], X[:, config.schema.modality_slice(k)])
            Q.append(stable_softmax(z))
        else:
            Q.append(np.full((n, R), 1.0 / R))
    g = P[:, config.block_modality] * np.concatenate(Q, axis=1)
    cache.g_raw, cache.P, cache.Q = g, P, Q
    return GateOutput(g, P, Q, everyone, everyone.copy()), cache


def gate_flat(config: MoeConfig, tree: GateTree, X, avail) -> GateOutput:
    if config.gate_mode != "flat":
        raise ConfigError(f"gate_flat needs gate_mode 'flat', model has {config.gate_mode!r}")
    X, avail = _as_batch(X, avail)
    return _gate_forward(config, tree, X, avail)[0]


def gate_hierarchical(config: MoeConfig, tree: GateTree, X, avail) -> GateOutput:
    if config.gate_mode == "flat":
        raise ConfigError("gate_hierarchical needs a two-level gate_mode (hier, modality or region)")
    X, avail = _as_batch(X, avail)
    return _gate_forward(config, tree, X, avail)[0]


def mask_renormalize(config: MoeConfig, gate: GateOutput, expert_avail) -> GateOutput:
    """Zero unavailable experts and rescale the survivors to sum to one.

    Rows whose unavailable entries are already zero pass through untouched,
    which makes the operation exactly idempotent.
    """
    a = np.asarray(expert_avail, dtype=bool)
    if a.ndim == 1:
        a = a[None, :]
    g = gate.weights
    if a.shape != g.shape:
        raise DimensionError("availability mask shape", g.shape, a.shape)
    if not a.any(axis=1).all():
        raise NoAvailableExpertsError()
    rows = np.flatnonzero(((g != 0) & ~a).any(axis=1))
    if rows.size == 0:
        return GateOutput(g, gate.modality_weights, gate.region_weights, a, gate.selected_mask & a)
    out = g.copy()
    u = g[rows] * a[rows]
    out[rows] = u / u.sum(axis=1, keepdims=True)
    return _with_rows(config, gate, out, rows, a, gate.selected_mask & a)


def _with_rows(config, gate: GateOutput, out, rows, active, selected) -> GateOutput:
    mod_w = gate.modality_weights.copy()
    reg_w = [r.copy() for r in gate.region_weights]
    mw, rw = _summaries(config, out[rows])
    mod_w[rows] = mw
    for k in range(len(reg_w)):
        reg_w[k][rows] = rw[k]
    return GateOutput(out, mod_w, reg_w, active, selected)


def topk_sparsify(config: MoeConfig, gate: GateOutput, k: int) -> GateOutput:
    """Keep the k largest surviving weights (ties to the lowest expert index)
    and renormalize. Rows with at most k survivors are returned unchanged."""
    if k < 1:
        raise ConfigError("top-k needs k >= 1")
    g, sel = gate.weights, gate.selected_mask
    rows = np.flatnonzero(sel.sum(axis=1) > k)
    if rows.size == 0:
        return gate
    key = np.where(sel[rows], g[rows], -np.inf)
    order = np.argsort(-key, axis=1, kind="stable")
    keep = np.zeros_like(key, dtype=bool)
    np.put_along_axis(keep, order[:, :k], True, axis=1)
    new_sel = sel.copy()
    new_sel[rows] = keep
    out = g.copy()
    u = g[rows] * keep
    out[rows] = u / u.sum(axis=1, keepdims=True)
    return _with_rows(config, gate, out, rows, gate.active_mask, new_sel)


# -- fusion --------------------------------------------------------------------


@dataclass
class MoeCache:
    X: np.ndarray
    expert_caches: list
    gate_cache: _GateCache
    prediction: Prediction


def moe_forward(config: MoeConfig, tree: GateTree, X, avail) -> tuple[Prediction, MoeCache]:
    X, avail = _as_batch(X, avail)
    if avail.shape != (X.shape[0], config.n_modalities):
        raise DimensionError("availability flags", (X.shape[0], config.n_modalities), avail.shape)
    h, ecaches = _experts_forward(config, X)
    gate, gcache = _gate_forward(config, tree, X, avail)
    gate = mask_renormalize(config, gate, avail[:, config.block_modality])
    if config.top_k is not None:
        gate = topk_sparsify(config, gate, config.top_k)
    fused = np.einsum("nm,nmc->nc", gate.weights, h)
    pred = Prediction(stable_softmax(fused), fused, gate, h)
    return pred, MoeCache(X, ecaches, gcache, pred)


def fuse_predict(config: MoeConfig, tree: GateTree, X, avail) -> Prediction:
    return moe_forward(config, tree, X, avail)[0]


def moe_backward(
    model: MoeModel,
    cache: MoeCache,
    grad_fused,
    grad_gate=None,
    grad_experts=None,
) -> list[np.ndarray]:
    """Reverse pass. ``grad_gate`` (n, N) and ``grad_experts`` (n, N, C) are extra
    loss gradients w.r.t. the final weights and expert logits. The top-k
    selection is treated as a constant mask. Returns gradients aligned with
    ``model.parameters()``."""
    config, tree = model.config, model.tree
    pred = cache.prediction
    g, h = pred.gate.weights, pred.expert_logits
    dF = np.asarray(grad_fused, dtype=np.float64).reshape(pred.fused_logits.shape)

    dh = g[:, :, None] * dF[:, None, :]
    if grad_experts is not None:
        dh = dh + grad_experts
    dg = np.einsum("nc,nmc->nm", dF, h)
    if grad_gate is not None:
        dg = dg + grad_gate

    # g = g_raw * b / sum(g_raw * b) on rows that were masked or sparsified
    gc = cache.gate_cache
    b = pred.gate.selected_mask
    dg_raw = dg.copy()
    rows = np.flatnonzero((g != gc.g_raw).any(axis=1))
    if rows.size:
        S = (gc.g_raw[rows] * b[rows]).sum(axis=1, keepdims=True)
        proj = (g[rows] * dg[rows]).sum(axis=1, keepdims=True)
        dg_raw[rows] = b[rows] * (dg[rows] - proj) / S

    grads: list[np.ndarray] = []
    for group, ec in zip(config.groups, cache.expert_caches):
        grads.extend(_group_backward(group, ec, dh[:, group.start : group.stop, :]))

    if config.gate_mode == "flat":
        dz = softmax_backward(gc.g_raw, dg_raw)
        grads.extend(mlp_backward(tree.flat, gc.flat, dz)[0].arrays())
        return grads

    Qcat = np.concatenate(gc.Q, axis=1)
    dP_full = dg_raw * Qcat
    dP = np.stack([dP_full[:, b0:b1].sum(axis=1) for b0, b1 in config.modality_blocks], axis=1)
    dQ = dg_raw * gc.P[:, config.block_modality]
    if tree.modality is not None:
        dz = softmax_backward(gc.P, dP)
        grads.extend(mlp_backward(tree.modality, gc.modality, dz)[0].arrays())
    for k, mod in enumerate(config.schema.modalities):
        if mod.name in tree.regions:
            b0, b1 = config.modality_blocks[k]
            dz = softmax_backward(gc.Q[k], dQ[:, b0:b1])
            grads.extend(mlp_backward(tree.regions[mod.name], gc.regions[k], dz)[0].arrays())
    return grads


# -- serialization -------------------------------------------------------------


def moe_to_dict(model: MoeModel) -> dict:
    cfg = model.config
    return {
        "num_classes": cfg.num_classes,
        "gate_mode": cfg.gate_mode,
        "top_k": cfg.top_k,
        "experts": [
            {"modality": s.modality, "region": s.region, "in_dim": s.in_dim, "net": params_to_dict(s.net)} for s in cfg.blocks
        ],
        "gates": {
            "flat": params_to_dict(model.tree.flat) if model.tree.flat else None,
            "modality": params_to_dict(model.tree.modality) if model.tree.modality else None,
            "regions": {k: params_to_dict(v) for k, v in model.tree.regions.items()},
        },
    }


def moe_from_dict(doc: dict, schema: FeatureSchema) -> MoeModel:
    blocks = [ExpertSlot(e["modality"], e["region"], e["in_dim"], params_from_dict(e["net"])) for e in doc["experts"]]
    for slot, b in zip(blocks, schema.blocks):
        if (slot.modality, slot.region) != (b.modality, b.region):
            raise ConfigError(f"bundle expert {slot.modality}:{slot.region} does not match schema block {b.label}")
    config = MoeConfig(doc["num_classes"], schema, blocks, doc["gate_mode"], doc["top_k"])
    gates = doc["gates"]
    tree = GateTree(
        params_from_dict(gates["flat"]) if gates.get("flat") else None,
        params_from_dict(gates["modality"]) if gates.get("modality") else None,
        {k: params_from_dict(v) for k, v in gates.get("regions", {}).items()},
    )
    return MoeModel(config, tree)
