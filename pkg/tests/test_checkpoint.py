import json
import struct

import numpy as np
import pytest

from gcgrelu.checkpoint import MAGIC, load_checkpoint, read_checkpoint, save_checkpoint
from gcgrelu.errors import CheckpointFormatError
from gcgrelu.gcnet import build_smallnet, build_toy, gcnet_forward


def _perturb(net, seed=0):
    rng = np.random.default_rng(seed)
    for _, layer in net.named_layers():
        for w in layer.params.values():
            w += 0.01 * rng.standard_normal(w.shape) * (0 if w.size <= 4 else 1)
        for b in layer.buffers().values():
            b += rng.uniform(0, 0.1, b.shape)
    for layer in net.grelu_layers():
        layer.sets[0].slopes += [0.01, -0.02, 0.03, 0.04]


def test_round_trip_preserves_outputs(tmp_path):
    net = build_smallnet("grelu", "gc", seed=1)
    _perturb(net)
    path = str(tmp_path / "c.bin")
    save_checkpoint(net, path, {"epoch": 7})
    loaded, meta = load_checkpoint(path)
    assert meta == {"epoch": 7}
    x = np.random.default_rng(0).uniform(-1, 1, (2, 1, 28, 28))
    np.testing.assert_array_equal(gcnet_forward(net, x, train=False)[0],
                                  gcnet_forward(loaded, x, train=False)[0])
    for (_, a), (_, b) in zip(net.named_layers(), loaded.named_layers()):
        for key in a.params:
            np.testing.assert_array_equal(a.params[key], b.params[key])
        for key in a.buffers():
            np.testing.assert_array_equal(a.buffers()[key], b.buffers()[key])


def test_layout(tmp_path):
    net = build_toy(widths=(3, 4))
    path = str(tmp_path / "c.bin")
    save_checkpoint(net, path)
    blob = open(path, "rb").read()
    assert blob[:8] == MAGIC
    version, mlen = struct.unpack("<II", blob[8:16])
    assert version == 1
    manifest = json.loads(blob[16:16 + mlen])
    grelu = [e for e in manifest["entries"] if e["type"] == "grelu"]
    assert len(grelu) == 2 and grelu[0]["shape"] == [9]
    manifest2, arrays = read_checkpoint(path)
    idx = manifest2["entries"].index(grelu[0])
    np.testing.assert_array_equal(arrays[idx], [2, -0.6, -0.2, 0.2, 0.6, 0.01, 0.2, 1.5, 3.0])
    total = sum(int(np.prod(e["shape"])) for e in manifest["entries"])
    assert len(blob) == 16 + mlen + 8 * total


def test_bad_magic(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(build_toy(), str(path))
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(str(path))


@pytest.mark.parametrize("cut", [10, 200, -8])
def test_truncation(tmp_path, cut):
    path = tmp_path / "c.bin"
    save_checkpoint(build_toy(), str(path))
    blob = path.read_bytes()
    path.write_bytes(blob[:cut])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(str(path))


def test_trailing_bytes(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(build_toy(), str(path))
    path.write_bytes(path.read_bytes() + b"\0" * 8)
    with pytest.raises(CheckpointFormatError, match="trailing"):
        load_checkpoint(str(path))


def test_unordered_grelu_payload_rejected(tmp_path):
    net = build_toy()
    net.grelu_layers()[0].sets[0].endpoints[:] = [-0.6, -0.2, 0.2, 0.6]
    path = tmp_path / "c.bin"
    save_checkpoint(net, str(path))
    manifest, arrays = read_checkpoint(str(path))
    blob = bytearray(path.read_bytes())
    mlen = struct.unpack("<I", blob[12:16])[0]
    off = 16 + mlen
    for e, a in zip(manifest["entries"], arrays):
        if e["type"] == "grelu":
            struct.pack_into("<d", blob, off + 8 * 1, 5.0)  # l_{-2} above l_2
            break
        off += 8 * a.size
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(str(path))
