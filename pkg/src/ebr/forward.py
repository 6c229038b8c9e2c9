"""Deterministic forward pass over a clip, caching what the backward needs.

All kernels run in float64 with a fixed reduction order, so repeated runs
on the same input produce bitwise-identical caches. Maxpool records the
winning input coordinate of every window (ties broken by the first index
in row-major order) because the backward passes route mass and gradients
to that exact cell.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .model import AGGREGATOR_KINDS, LayerSpec, ModelManifest, ManifestError
from .tensorfile import load_tensor, save_tensor


@dataclass
class Clip:
    """A [T, C, H, W] stack of frames with values in [0, 1]."""

    frames: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4:
            raise ValueError(f"clip must be [T, C, H, W], got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("clip contains non-finite values")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValueError("clip values must lie in [0, 1]")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


def save_clip(clip: Clip, path) -> None:
    """Write frames as .ebt plus a .json sidecar holding the metadata."""
    save_tensor(clip.frames, path)
    sidecar = os.fspath(path) + ".json"
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump(clip.meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_clip(path) -> Clip:
    frames = load_tensor(path)
    sidecar = os.fspath(path) + ".json"
    meta = {}
    if os.path.exists(sidecar):
        with open(sidecar, "r", encoding="utf-8") as f:
            meta = json.load(f)
    return Clip(frames=frames, meta=meta)


# ---------------------------------------------------------------------------
# kernels


def im2col(x: np.ndarray, kernel, stride, padding) -> tuple[np.ndarray, tuple[int, int]]:
    """Unroll [C, H, W] into a [C*kh*kw, oh*ow] patch matrix (zero padding)."""
    kh, kw = kernel
    sy, sx = stride
    py, px = padding
    if py or px:
        x = np.pad(x, ((0, 0), (py, py), (px, px)))
    C, H, W = x.shape
    oh = (H - kh) // sy + 1
    ow = (W - kw) // sx + 1
    col = np.empty((C, kh, kw, oh, ow), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            col[:, ky, kx] = x[:, ky : ky + sy * oh : sy, kx : kx + sx * ow : sx]
    return col.reshape(C * kh * kw, oh * ow), (oh, ow)


def col2im(
    col: np.ndarray,
    x_shape: tuple[int, int, int],
    kernel,
    stride,
    padding,
    out_hw: tuple[int, int],
) -> np.ndarray:
    """Scatter-add a patch matrix back onto the (unpadded) input grid."""
    kh, kw = kernel
    sy, sx = stride
    py, px = padding
    C, H, W = x_shape
    oh, ow = out_hw
    acc = np.zeros((C, H + 2 * py, W + 2 * px), dtype=np.float64)
    col = col.reshape(C, kh, kw, oh, ow)
    for ky in range(kh):
        for kx in range(kw):
            acc[:, ky : ky + sy * oh : sy, kx : kx + sx * ow : sx] += col[:, ky, kx]
    if py or px:
        acc = acc[:, py : py + H, px : px + W]
    return acc


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride, padding) -> np.ndarray:
    """Direct convolution (cross-correlation) of [C, H, W] with [OC, C, kh, kw]."""
    oc = w.shape[0]
    col, (oh, ow) = im2col(x, w.shape[2:], stride, padding)
    out = w.reshape(oc, -1) @ col
    if b is not None:
        out += b[:, None]
    return out.reshape(oc, oh, ow)


def maxpool_forward(x: np.ndarray, window, stride) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Maxpool [C, H, W]; also returns the winner's input row/col per window."""
    wh, ww = window
    sy, sx = stride
    C, H, W = x.shape
    oh = (H - wh) // sy + 1
    ow = (W - ww) // sx + 1
    patches = np.empty((C, wh * ww, oh, ow), dtype=np.float64)
    for ky in range(wh):
        for kx in range(ww):
            patches[:, ky * ww + kx] = x[:, ky : ky + sy * oh : sy, kx : kx + sx * ow : sx]
    k = patches.argmax(axis=1)  # first max wins, i.e. row-major within the window
    out = np.take_along_axis(patches, k[:, None], axis=1)[:, 0]
    oy = np.arange(oh)[:, None] * sy
    ox = np.arange(ow)[None, :] * sx
    rows = oy[None] + k // ww
    cols = ox[None] + k % ww
    return out, rows, cols


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    out = w @ x
    if b is not None:
        out = out + b
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Stable softmax of a 1-d logit vector."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError(f"softmax_probs expects a 1-d vector, got shape {logits.shape}")
    z = np.exp(logits - logits.max())
    return z / z.sum()


# ---------------------------------------------------------------------------
# whole-model forward


@dataclass
class ActivationCache:
    """Everything the backward passes read: per-frame layer outputs,
    maxpool winner coordinates, recurrent states and per-step logits."""

    model: ModelManifest
    clip_frames: np.ndarray  # [T, C, H, W]
    per_frame: list[dict[str, np.ndarray]]  # t -> layer name -> output
    pool_winners: list[dict[str, tuple[np.ndarray, np.ndarray]]]  # t -> name -> (rows, cols)
    features: np.ndarray  # [T, D] CNN-stack outputs feeding the head
    states: np.ndarray | None = None  # [T+1, D] recurrent states, h_0 first
    pooled: np.ndarray | None = None  # [D] temporal mean-pool output
    logits: np.ndarray | None = None  # [T, K] per step, or [1, K] after mean-pool

    @property
    def length(self) -> int:
        return self.clip_frames.shape[0]

    def layer_input(self, t: int, layer_index: int) -> np.ndarray:
        """Input activation of CNN-stack layer *layer_index* at frame t."""
        if layer_index == 0:
            return self.clip_frames[t]
        prev = self.model.cnn_stack()[layer_index - 1]
        return self.per_frame[t][prev.name]


def forward_frame(model: ModelManifest, frame: np.ndarray):
    """Run one frame through the frame-level CNN stack.

    Returns ``(feature, activations, pool_winners)`` where *feature* is the
    output of the last layer before the temporal aggregator / classifier.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != model.input_shape:
        raise ManifestError(
            f"frame shape {frame.shape} does not match model input {model.input_shape}"
        )
    acts: dict[str, np.ndarray] = {}
    winners: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    x = frame
    for spec in model.cnn_stack():
        if spec.kind == "conv2d":
            x = conv2d_forward(x, model.weight(spec, "weight"), model.bias(spec), spec.stride, spec.padding)
        elif spec.kind == "relu":
            x = relu(x)
        elif spec.kind == "maxpool2d":
            x, rows, cols = maxpool_forward(x, spec.window, spec.stride)
            winners[spec.name] = (rows, cols)
        elif spec.kind == "flatten":
            x = x.reshape(-1)
        elif spec.kind == "fully-connected":
            x = fc_forward(x, model.weight(spec, "weight"), model.bias(spec))
        else:
            raise ManifestError(f"layer {spec.name!r} ({spec.kind}) inside the CNN stack")
        acts[spec.name] = x
    return x, acts, winners


def forward_clip(model: ModelManifest, clip: Clip, enforce_length: bool = True) -> ActivationCache:
    """Forward a whole clip, returning the complete activation cache.

    Recurrent models scan ``h_t = relu(Wx x_t + Wh h_{t-1} + b)`` from
    ``h_0 = 0`` and evaluate the classifier at every step. Mean-pool models
    average the frame features and evaluate the classifier once. CNN-only
    chains apply the classifier per frame. ``enforce_length=False`` admits
    clips shorter or longer than the manifest's nominal length (used by the
    frame-independent saliency modes).
    """
    if enforce_length and clip.length != model.clip_length:
        raise ManifestError(
            f"clip has {clip.length} frames, model expects {model.clip_length}"
        )
    T = clip.length
    per_frame = []
    pool_winners = []
    feats = []
    for t in range(T):
        f, acts, winners = forward_frame(model, clip.frames[t])
        feats.append(f.reshape(-1))
        per_frame.append(acts)
        pool_winners.append(winners)
    features = np.stack(feats)
    cache = ActivationCache(
        model=model,
        clip_frames=clip.frames,
        per_frame=per_frame,
        pool_winners=pool_winners,
        features=features,
    )
    cls = model.classifier()
    w_cls = model.weight(cls, "weight")
    b_cls = model.bias(cls)
    agg_idx = model.aggregator_index()
    agg = model.layers[agg_idx] if agg_idx is not None else None
    if agg is not None and agg.kind == "recurrent-relu":
        wx = model.weight(agg, "input")
        wh = model.weight(agg, "hidden")
        b = model.bias(agg)
        D = agg.out_dim
        states = np.zeros((T + 1, D), dtype=np.float64)
        logits = np.zeros((T, cls.out_dim), dtype=np.float64)
        h = states[0]
        for t in range(T):
            pre = wx @ features[t] + wh @ h
            if b is not None:
                pre = pre + b
            h = relu(pre)
            states[t + 1] = h
            logits[t] = fc_forward(h, w_cls, b_cls)
        cache.states = states
        cache.logits = logits
    elif agg is not None and agg.kind == "temporal-mean-pool":
        pooled = features.mean(axis=0)
        cache.pooled = pooled
        cache.logits = fc_forward(pooled, w_cls, b_cls)[None, :]
    else:
        cache.logits = np.stack([fc_forward(features[t], w_cls, b_cls) for t in range(T)])
    return cache
