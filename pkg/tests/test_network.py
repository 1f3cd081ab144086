import struct

import numpy as np
import pytest

import oracles
from smoothlab.imagecore import Image, make_rng
from smoothlab.network import (FORMAT_VERSION, ModelFormatError, ModelVersionError, Network,
                               build_network, forward_smooth, load_model, model_bytes, model_from_bytes,
                               receptive_field, save_model)


def pre_norm_biases(net):
    """Biases of convs that feed a normalization layer; their gradient is 0 in training mode."""
    out = []
    last_conv = max(i for i, l in enumerate(net.layers) if l.kind == "conv")
    for li, layer in enumerate(net.layers):
        if layer.kind in ("conv", "strided_conv", "deconv") and li != last_conv:
            out.append((li, "b"))
        elif layer.kind == "residual_block":
            out += [(li, "b1"), (li, "b2")]
    return out


def test_architecture_presets():
    toy = build_network("TOY8")
    assert toy.conv_layer_count == 8
    big = build_network("PAPER26", width=4)
    assert big.conv_layer_count == 26
    kinds = [l.kind for l in big.layers if l.kind in ("conv", "strided_conv", "deconv", "residual_block")]
    assert kinds[2] == "strided_conv" and kinds[-3] == "deconv"
    assert [l.dilation for l in big.layers if l.kind == "residual_block"] == [1, 1, 2, 2, 4, 4, 8, 8, 16, 1]
    assert build_network("PAPER26").layers[0].out_ch == 64
    assert toy.layers[0].out_ch == 16
    with pytest.raises(ValueError):
        build_network("BIG")


def test_toy_dilation_schedule():
    toy = build_network("TOY8")
    per_conv = []
    for layer in toy.layers:
        if layer.kind == "conv":
            per_conv.append(layer.dilation)
        elif layer.kind == "residual_block":
            per_conv += [layer.dilation] * 2
    assert per_conv == [1, 1, 2, 2, 4, 4, 1, 1]


@pytest.mark.parametrize("preset,width", [("TOY8", None), ("PAPER26", 4)])
def test_fresh_network_is_identity(preset, width):
    net = build_network(preset, seed=3, width=width)
    img = Image(make_rng(1).random((3, 8, 10)))
    out = forward_smooth(net, img)
    assert out.shape == img.shape and out.unclamped
    assert np.array_equal(out.data, img.data)


def test_paper26_needs_even_size():
    with pytest.raises(ValueError):
        forward_smooth(build_network("PAPER26", width=4), np.zeros((3, 7, 8)))


def test_backward_before_forward():
    with pytest.raises(RuntimeError):
        build_network("TOY8").backward(np.zeros((1, 3, 4, 4)))


@pytest.mark.parametrize("training", [False, True])
def test_toy_gradients_match_finite_differences(training):
    rng = make_rng(4)
    net = oracles.randomize_final_layer(build_network("TOY8", seed=5), rng)
    x = rng.random((1, 3, 8, 8))
    G = rng.normal(size=(1, 3, 8, 8))
    skip = pre_norm_biases(net) if training else ()
    rows = oracles.network_fd_check(net, x, G, 20, rng, training, skip=skip)
    assert max(oracles.relative_errors(rows, floor=1e-7)) < 1e-3
    if training:
        grads = dict(zip(net.parameter_refs(), net.backward(G)))
        for ref in skip:
            assert np.max(np.abs(grads[ref])) < 1e-9


def test_zero_loss_gradient_gives_zero_parameter_gradients():
    rng = make_rng(5)
    net = oracles.randomize_final_layer(build_network("TOY8", seed=1), rng)
    net.forward(rng.random((1, 3, 6, 6)), training=True)
    assert all(not g.any() for g in net.backward(np.zeros((1, 3, 6, 6))))


def test_model_round_trip_bit_exact(tmp_path):
    rng = make_rng(6)
    net = oracles.randomize_final_layer(build_network("TOY8", seed=2), rng)
    net.round_parameters()
    net.forward(rng.random((1, 3, 8, 8)), training=True)
    path = tmp_path / "m.usis"
    save_model(net, path)
    back = load_model(path)
    assert model_bytes(back) == model_bytes(net)
    x = rng.random((1, 3, 8, 8))
    assert np.array_equal(back.forward(x), net.forward(x))


def test_model_header_layout():
    raw = model_bytes(build_network("TOY8"))
    assert raw[:4] == b"USIS"
    version, tag, n_layers = struct.unpack("<III", raw[4:16])
    assert version == FORMAT_VERSION and tag == 1 and n_layers == len(build_network("TOY8").layers)


def test_model_corruption_errors():
    raw = model_bytes(build_network("TOY8"))
    with pytest.raises(ModelFormatError):
        model_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ModelVersionError):
        model_from_bytes(raw[:4] + struct.pack("<I", FORMAT_VERSION + 1) + raw[8:])
    with pytest.raises(ModelFormatError):
        model_from_bytes(raw[:-3])
    with pytest.raises(ModelFormatError):
        model_from_bytes(raw + b"\0")


def test_receptive_field_recurrence():
    toy = build_network("TOY8")
    assert receptive_field(toy) == 1 + 2 * (1 + 1 + 2 + 2 + 4 + 4 + 1 + 1)
    big = build_network("PAPER26", width=2)
    deconv = next(i for i, l in enumerate(big.layers) if l.kind == "deconv")
    assert receptive_field(big, deconv) == 383
    with pytest.raises(ValueError):
        receptive_field(big)


def test_paper26_receptive_field_measured_by_gradient_support():
    rng = make_rng(7)
    full = build_network("PAPER26", seed=0, width=2)
    deconv = next(i for i, l in enumerate(full.layers) if l.kind == "deconv")
    # positive weights, positive inputs and fresh running stats keep every ReLU open
    for layer in full.layers[:deconv]:
        for name, arr in layer.params.items():
            if name.startswith("w"):
                arr[...] = np.abs(rng.normal(0.1, 0.02, arr.shape))
    head = Network("PAPER26", full.layers[:deconv])
    x = rng.random((1, 3, 416, 4)) + 0.5
    out = head.forward(x, training=False)
    G = np.zeros_like(out)
    G[0, 0, out.shape[2] // 2, 0] = 1.0
    head.backward(G)
    rows = np.nonzero(np.abs(head.input_gradient()[0]).sum(axis=(0, 2)))[0]
    assert rows.max() - rows.min() + 1 == receptive_field(full, deconv) == 383


def test_copy_is_independent():
    net = build_network("TOY8")
    dup = net.copy()
    dup.layers[0].params["w"][...] = 0
    assert net.layers[0].params["w"].any()
    assert dup.digest() != net.digest()
