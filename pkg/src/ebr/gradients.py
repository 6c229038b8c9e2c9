"""Reverse-mode gradients of the prior-weighted logit, the BP baselines.

Unlike the probability propagation in :mod:`ebr.eb`, these maps are plain
derivatives: signed, not conserved, and computed from the same cached
forward pass. ``through_time=True`` differentiates through the unrolled
temporal head (BP-R); otherwise every frame is treated as its own
one-step clip (BP). Raw gradients are returned by default; ``absolute``
takes elementwise magnitudes for callers that only rank locations.
"""

from __future__ import annotations

import numpy as np

from .forward import ActivationCache, Clip, col2im, forward_clip
from .model import ModelManifest


def _grad_layer_backward(cache: ActivationCache, t: int, layer_index: int, g: np.ndarray):
    """Gradient on the output of CNN-stack layer ``layer_index`` -> its input."""
    spec = cache.model.cnn_stack()[layer_index]
    x_in = cache.layer_input(t, layer_index)
    if spec.kind == "relu":
        out = cache.per_frame[t][spec.name]
        return g * (out > 0.0)
    if spec.kind == "flatten":
        return g.reshape(x_in.shape)
    if spec.kind == "maxpool2d":
        rows, cols = cache.pool_winners[t][spec.name]
        gx = np.zeros(x_in.shape, dtype=np.float64)
        c_idx = np.broadcast_to(np.arange(x_in.shape[0])[:, None, None], rows.shape)
        np.add.at(gx, (c_idx, rows, cols), g)
        return gx
    if spec.kind == "conv2d":
        w = cache.model.weight(spec, "weight")
        oc = w.shape[0]
        out_hw = g.shape[1:]
        col_g = w.reshape(oc, -1).T @ g.reshape(oc, -1)
        return col2im(col_g, x_in.shape, w.shape[2:], spec.stride, spec.padding, out_hw)
    if spec.kind == "fully-connected":
        return cache.model.weight(spec, "weight").T @ g
    raise ValueError(f"cannot differentiate through {spec.kind}")


def _descend_grads(cache: ActivationCache, frame_grads: np.ndarray, target_layer: str):
    stack = cache.model.cnn_stack()
    names = [s.name for s in stack]
    stop = -1 if target_layer == "input" else names.index(target_layer)
    top = stack[-1].name
    maps = []
    for t in range(cache.length):
        g = frame_grads[t].reshape(cache.per_frame[t][top].shape)
        for i in range(len(stack) - 1, stop, -1):
            g = _grad_layer_backward(cache, t, i, g)
        maps.append(g)
    return maps


def bp_saliency(
    model: ModelManifest,
    clip: Clip,
    prior,
    target_layer: str,
    through_time: bool,
    absolute: bool = False,
):
    """Gradient of ``prior.mass @ logits`` w.r.t. the target layer's output.

    Returns one array per frame. With ``through_time`` the logit is the one
    at ``prior.step`` and gradients flow back through the recurrence (or
    split uniformly through a temporal mean-pool); frames after the prior
    step get exact zeros. Without it, each frame's own one-step logit is
    differentiated, so ``prior.step`` does not select anything.
    """
    cache = forward_clip(model, clip)
    T = clip.length
    n = prior.step
    if not 0 <= n < T:
        raise ValueError(f"prior step {n} outside 0..{T - 1}")
    cls = model.classifier()
    w_cls = model.weight(cls, "weight")
    agg_idx = model.aggregator_index()
    agg = model.layers[agg_idx] if agg_idx is not None else None
    g_feat = np.zeros_like(cache.features)
    g_out = w_cls.T @ prior.mass
    if through_time:
        if agg is None:
            raise ValueError("BP-R needs a temporal aggregator layer")
        if agg.kind == "recurrent-relu":
            wx = model.weight(agg, "input")
            wh = model.weight(agg, "hidden")
            g_h = g_out
            for t in range(n, -1, -1):
                g_pre = g_h * (cache.states[t + 1] > 0.0)
                g_feat[t] = wx.T @ g_pre
                g_h = wh.T @ g_pre
        else:  # temporal-mean-pool
            g_feat[:] = g_out[None, :] / T
    else:
        if agg is not None and agg.kind == "recurrent-relu":
            wx = model.weight(agg, "input")
            b = model.bias(agg)
            for t in range(T):
                pre = wx @ cache.features[t]
                if b is not None:
                    pre = pre + b
                g_feat[t] = wx.T @ (g_out * (pre > 0.0))
        else:
            # mean-pool over one frame and CNN-only heads are both identity
            g_feat[:] = g_out[None, :]
    maps = _descend_grads(cache, g_feat, target_layer)
    if absolute:
        maps = [np.abs(m) for m in maps]
    return maps
