import numpy as np
import pytest

from ebr.forward import Clip
from ebr.model import LayerSpec, ModelManifest


def fc_chain_model(rng, width=3, hidden=3, state=3, num_classes=3, clip_length=2):
    """Tiny flatten/fc/relu chain with a recurrent head; random weights."""
    tensors = {
        "fc_w": rng.normal(size=(hidden, width)),
        "rnn_wx": rng.normal(size=(state, hidden)),
        "rnn_wh": rng.normal(size=(state, state)),
        "cls_w": rng.normal(size=(num_classes, state)),
    }
    layers = [
        LayerSpec(kind="flatten", name="flat"),
        LayerSpec(kind="fully-connected", name="fc", in_dim=width, out_dim=hidden,
                  weights={"weight": "fc_w"}),
        LayerSpec(kind="relu", name="relu_fc"),
        LayerSpec(kind="recurrent-relu", name="rnn", in_dim=hidden, out_dim=state,
                  weights={"input": "rnn_wx", "hidden": "rnn_wh"}),
        LayerSpec(kind="classifier", name="cls", in_dim=state, out_dim=num_classes,
                  weights={"weight": "cls_w"}),
    ]
    return ModelManifest(
        layers=layers,
        input_shape=(1, 1, width),
        clip_length=clip_length,
        labels=[f"c{k}" for k in range(num_classes)],
        tensors=tensors,
    )


def conv_chain_model(rng, hw=6, channels=2, hidden=4, state=3, num_classes=3,
                     clip_length=3, aggregator="recurrent-relu", with_pool=True):
    """Small conv model exercising every layer kind."""
    conv_out = hw  # stride 1, padding keeps the size (kernel 3, pad 1)
    pooled = conv_out // 2 if with_pool else conv_out
    flat = channels * pooled * pooled
    tensors = {
        "conv_w": rng.normal(size=(channels, 1, 3, 3)),
        "conv_b": rng.normal(size=(channels,)) * 0.1,
        "fc_w": rng.normal(size=(hidden, flat)),
        "fc_b": rng.normal(size=(hidden,)) * 0.1,
        "cls_w": rng.normal(size=(num_classes, state)),
    }
    layers = [
        LayerSpec(kind="conv2d", name="conv1", in_channels=1, out_channels=channels,
                  kernel=(3, 3), stride=(1, 1), padding=(1, 1),
                  weights={"weight": "conv_w", "bias": "conv_b"}),
        LayerSpec(kind="relu", name="relu1"),
    ]
    if with_pool:
        layers.append(LayerSpec(kind="maxpool2d", name="pool1", window=(2, 2), stride=(2, 2)))
    layers += [
        LayerSpec(kind="flatten", name="flat1"),
        LayerSpec(kind="fully-connected", name="fc1", in_dim=flat, out_dim=hidden,
                  weights={"weight": "fc_w", "bias": "fc_b"}),
        LayerSpec(kind="relu", name="relu2"),
    ]
    if aggregator == "recurrent-relu":
        tensors["rnn_wx"] = rng.normal(size=(state, hidden))
        tensors["rnn_wh"] = rng.normal(size=(state, state))
        layers.append(LayerSpec(kind="recurrent-relu", name="rnn1", in_dim=hidden,
                                out_dim=state, weights={"input": "rnn_wx", "hidden": "rnn_wh"}))
        cls_in = state
    elif aggregator == "temporal-mean-pool":
        layers.append(LayerSpec(kind="temporal-mean-pool", name="tpool", in_dim=hidden,
                                out_dim=hidden))
        cls_in = hidden
        tensors["cls_w"] = rng.normal(size=(num_classes, hidden))
    else:
        cls_in = hidden
        tensors["cls_w"] = rng.normal(size=(num_classes, hidden))
    layers.append(LayerSpec(kind="classifier", name="cls", in_dim=cls_in,
                            out_dim=num_classes, weights={"weight": "cls_w"}))
    return ModelManifest(
        layers=layers,
        input_shape=(1, hw, hw),
        clip_length=clip_length,
        labels=[f"c{k}" for k in range(num_classes)],
        tensors=tensors,
    )


def random_clip(rng, model, low=0.0, high=1.0):
    shape = (model.clip_length, *model.input_shape)
    return Clip(frames=rng.uniform(low, high, size=shape))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
