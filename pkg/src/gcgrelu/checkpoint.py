"""Binary checkpoint format.

Layout (all integers little-endian)::

    8 bytes   magic  b"GCGRELU\\x00"
    uint32    format version
    uint32    manifest length in bytes
    ...       manifest, UTF-8 JSON: {"arch": {...}, "meta": {...},
              "entries": [{"layer", "type", "name", "shape", "trainable"}, ...]}
    ...       float64 payloads, one per manifest entry, in manifest order

A GReLU layer stores one entry per parameter set, laid out as ``n``, the
``2n`` endpoints negative-to-positive, then the ``2n`` slopes
negative-to-positive.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointFormatError
from .gcnet import GCNet, build_from_arch
from .grelu import GReluParams
from .layers import GReLU

MAGIC = b"GCGRELU\x00"
VERSION = 1


def _entries(net: GCNet):
    for name, layer in net.named_layers():
        if isinstance(layer, GReLU):
            for c, p in enumerate(layer.sets):
                key = f"set{c}" if layer.per_channel else "params"
                yield name, layer.kind, key, p.to_vector(), True
            continue
        for key, arr in layer.params.items():
            yield name, layer.kind, key, arr, True
        for key, arr in layer.buffers().items():
            yield name, layer.kind, key, arr, False


def save_checkpoint(net: GCNet, path: str, meta: dict | None = None) -> None:
    entries, payloads = [], []
    for layer, kind, key, arr, trainable in _entries(net):
        entries.append({"layer": layer, "type": kind, "name": key,
                        "shape": list(arr.shape), "trainable": trainable})
        payloads.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    manifest = json.dumps({"arch": net.arch, "meta": meta or {}, "entries": entries},
                          sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(manifest)))
        f.write(manifest)
        for p in payloads:
            f.write(p)


def read_checkpoint(path: str) -> tuple[dict, list[np.ndarray]]:
    """Parse a checkpoint into its manifest and the list of payload arrays."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:8]!r}")
    if len(blob) < 16:
        raise CheckpointFormatError(f"{path}: truncated header")
    version, mlen = struct.unpack("<II", blob[8:16])
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    try:
        manifest = json.loads(blob[16:16 + mlen].decode())
        entries = manifest["entries"]
    except (UnicodeDecodeError, ValueError, KeyError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable manifest ({exc})") from None
    arrays, off = [], 16 + mlen
    for e in entries:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = off + 8 * count
        if end > len(blob):
            raise CheckpointFormatError(f"{path}: payload truncated at {e['layer']}.{e['name']}")
        arrays.append(np.frombuffer(blob[off:end], dtype="<f8").reshape(e["shape"]).copy())
        off = end
    if off != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - off} trailing bytes")
    return manifest, arrays


def load_checkpoint(path: str) -> tuple[GCNet, dict]:
    """Rebuild the network stored in ``path``; returns ``(net, meta)``."""
    manifest, arrays = read_checkpoint(path)
    try:
        net = build_from_arch(manifest["arch"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: bad architecture record ({exc})") from None
    expected = list(_entries(net))
    if len(expected) != len(arrays):
        raise CheckpointFormatError(f"{path}: manifest has {len(arrays)} entries, "
                                    f"architecture needs {len(expected)}")
    layers = dict(net.named_layers())
    for e, arr, (name, _, key, target, _) in zip(manifest["entries"], arrays, expected):
        if (e["layer"], e["name"]) != (name, key) or arr.shape != target.shape:
            raise CheckpointFormatError(f"{path}: entry {e['layer']}.{e['name']} does not "
                                        f"match architecture slot {name}.{key}")
        layer = layers[name]
        if isinstance(layer, GReLU):
            idx = int(key[3:]) if key.startswith("set") else 0
            try:
                p = GReluParams.from_vector(arr)
            except ValueError as exc:
                raise CheckpointFormatError(f"{path}: {name}: {exc}") from None
            np.copyto(layer.sets[idx].endpoints, p.endpoints)
            np.copyto(layer.sets[idx].slopes, p.slopes)
        else:
            np.copyto(target, arr)
    return net, manifest.get("meta", {})
