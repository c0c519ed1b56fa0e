"""Shared test utilities: finite-difference oracles and tiny scene builders."""

import numpy as np

from sceneseg import autodiff as ad
from sceneseg import scenegen


def finite_diff(f, x, h=1e-4):
    """Central-difference gradient of scalar f w.r.t. the array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        hi = f()
        x[idx] = orig - h
        lo = f()
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * h)
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


def check_param_grad(loss_fn, tensor, entries, h=1e-4, tol=1e-3, structure_fn=None):
    """Compare reverse-mode grads of selected entries against central differences.

    loss_fn() must rebuild the graph and return the loss Tensor. Entries where
    the discrete structure (structure_fn) changes under the perturbation are
    skipped: the loss is not differentiable there. Returns the number checked.
    """
    loss = loss_fn()
    ad.backward(loss)
    grad = tensor.grad if tensor.grad is not None else np.zeros(tensor.shape)
    grad = grad.copy()
    checked = 0
    for idx in entries:
        orig = tensor.value[idx]
        base_struct = structure_fn() if structure_fn else None

        tensor.value[idx] = orig + h
        hi = float(loss_fn().value[0, 0])
        s_hi = structure_fn() if structure_fn else None
        tensor.value[idx] = orig - h
        lo = float(loss_fn().value[0, 0])
        s_lo = structure_fn() if structure_fn else None
        tensor.value[idx] = orig

        if structure_fn and (s_hi != base_struct or s_lo != base_struct):
            continue
        fd = (hi - lo) / (2 * h)
        g = grad[idx]
        err = abs(fd - g) / max(abs(fd), abs(g), 1e-6)
        assert err < tol, f"grad mismatch at {tensor.name}{idx}: ad={g} fd={fd} rel={err}"
        checked += 1
    return checked


def micro_scene(seed=3, n_points=120, n_objects=1):
    spec = scenegen.SceneSpec(n_objects=n_objects, n_points=n_points, room_extent=3.0)
    return scenegen.generate_scene(seed, spec)


def micro_model(seed=0, k=4, d=16, layers=2):
    """Smallest config that still exercises every sub-block."""
    from sceneseg import aggregation, backbone, decoder, model

    cfg = model.ModelConfig(
        backbone=backbone.BackboneConfig(base_voxel=0.3, channels=8, levels=1),
        agg=aggregation.AggregationConfig(cap=8, k_cand=6, width=8),
        dec=decoder.DecoderConfig(k=k, d=d, layers=layers, heads=4),
        coarse_size=0.6,
        seed=seed,
    )
    return model.SegModel(cfg)
