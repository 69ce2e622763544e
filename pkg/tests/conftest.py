from __future__ import annotations

import numpy as np

from regionmoe.data import FeatureSchema, Modality, Region


def central_diff(f, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def grad_close(analytic, numeric, rel=1e-4, abs_=1e-7) -> bool:
    """Entrywise |a - n| <= max(rel * max(|a|, |n|), abs)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    tol = np.maximum(rel * np.maximum(np.abs(a), np.abs(n)), abs_)
    return bool(np.all(np.abs(a - n) <= tol))


def small_schema(region_dims: list[list[int]], names=None) -> FeatureSchema:
    """Schema with one modality per inner list; each int is a region's column count."""
    mods = []
    for k, dims in enumerate(region_dims):
        name = names[k] if names else f"M{k}"
        regions = tuple(Region(f"R{r}", tuple(f"{name}_r{r}_c{j}" for j in range(d))) for r, d in enumerate(dims))
        mods.append(Modality(name, regions))
    return FeatureSchema(tuple(mods))


def random_moe_instance(rng: np.random.Generator, gate_mode: str, n: int = 3, C: int = 3, max_experts: int = 5,
                        max_dim: int = 4, hidden=(3, 3), top_k_prob: float = 0.3):
    """A small random MoE with random biases, zero-imputed missing modalities and labels."""
    from regionmoe.moe import build_moe

    M = int(rng.integers(1, 4))
    N = int(rng.integers(M, max_experts + 1))
    counts = np.ones(M, dtype=int)
    for _ in range(N - M):
        counts[rng.integers(M)] += 1
    dims = [[int(rng.integers(1, max_dim + 1)) for _ in range(c)] for c in counts]
    schema = small_schema(dims)
    top_k = int(rng.integers(1, N + 1)) if rng.random() < top_k_prob else None
    model = build_moe(schema, C, gate_mode, top_k, hidden, int(rng.integers(1 << 30)))
    for net in model.nets():
        for layer in net.layers:
            layer.b[...] = rng.normal(scale=0.3, size=layer.b.shape)
    avail = rng.random((n, M)) < 0.75
    avail[np.arange(n), rng.integers(M, size=n)] = True
    X = rng.normal(size=(n, schema.n_features))
    X[~avail[:, schema.column_modality()]] = 0.0
    y = rng.integers(C, size=n)
    return model, X, avail, y


def model_gradient_ok(model, X, avail, y, loss_cfg, class_weights, h: float = 1e-6) -> bool:
    """Every analytic parameter gradient of the batch objective vs central differences."""
    _, grads = model.loss_and_grads(X, avail, y, loss_cfg, class_weights)

    def f():
        return model.loss_and_grads(X, avail, y, loss_cfg, class_weights, need_grads=False)[0].total

    params = model.parameters()
    assert len(params) == len(grads)
    return all(grad_close(g, central_diff(f, p, h)) for (p, _), g in zip(params, grads))
