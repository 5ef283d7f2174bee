#!/usr/bin/env python3
"""Independent float64 reference forward pass for the tiny encoder fixture.

Reads a safetensors container, builds a deterministic input image, and writes
the input plus every tap (patch tokens only) as raw little-endian float32 with
a JSON manifest of shapes.

    python3 vit_reference.py tests/data/tiny_encoder.safetensors tests/data
"""
import json
import math
import struct
import sys
from pathlib import Path

import numpy as np

DTYPES = {"F32": np.float32, "F64": np.float64, "F16": np.float16}


def read_safetensors(path):
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + n])
    meta = header.pop("__metadata__", {})
    data = raw[8 + n :]
    tensors = {}
    for name, info in header.items():
        begin, end = info["data_offsets"]
        arr = np.frombuffer(data[begin:end], dtype=DTYPES[info["dtype"]])
        tensors[name.removeprefix("vit.")] = arr.reshape(info["shape"]).astype(np.float64)
    return tensors, meta


def layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def gelu(x):
    erf = np.vectorize(math.erf)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def forward(t, meta, image):
    p = int(meta["patch_size"])
    heads = int(meta["num_attention_heads"])
    layers = int(meta["num_hidden_layers"])
    eps = float(meta["layer_norm_eps"])
    _, s, _ = image.shape
    g = s // p

    # Patch embedding: a stride-p convolution.
    w = t["embeddings.patch_embeddings.projection.weight"]
    patches = []
    for gy in range(g):
        for gx in range(g):
            block = image[:, gy * p : (gy + 1) * p, gx * p : (gx + 1) * p]
            patches.append(np.tensordot(w, block, axes=([1, 2, 3], [0, 1, 2])))
    x = np.stack(patches) + t["embeddings.patch_embeddings.projection.bias"]
    x = np.concatenate([t["embeddings.cls_token"][0], x], axis=0)
    x = x + t["embeddings.position_embeddings"][0]

    taps = [x[1:].copy()]
    for i in range(layers):
        pre = f"encoder.layer.{i}."

        def lin(name, v):
            return v @ t[pre + name + ".weight"].T + t[pre + name + ".bias"]

        h = layer_norm(x, t[pre + "layernorm_before.weight"], t[pre + "layernorm_before.bias"], eps)
        q = lin("attention.attention.query", h)
        k = lin("attention.attention.key", h)
        v = lin("attention.attention.value", h)
        n, d = q.shape
        hd = d // heads
        ctx = np.zeros_like(q)
        for a in range(heads):
            sl = slice(a * hd, (a + 1) * hd)
            att = softmax(q[:, sl] @ k[:, sl].T / math.sqrt(hd))
            ctx[:, sl] = att @ v[:, sl]
        x = x + lin("attention.output.dense", ctx)
        h = layer_norm(x, t[pre + "layernorm_after.weight"], t[pre + "layernorm_after.bias"], eps)
        x = x + lin("output.dense", gelu(lin("intermediate.dense", h)))
        taps.append(x[1:].copy())
    return np.stack(taps)


def main():
    container, out = Path(sys.argv[1]), Path(sys.argv[2])
    tensors, meta = read_safetensors(container)
    size = int(meta["image_size"])
    rng = np.random.default_rng(20240501)
    image = rng.uniform(-1.0, 1.0, size=(3, size, size))
    image = image.astype(np.float32).astype(np.float64)
    taps = forward(tensors, meta, image)

    out.mkdir(parents=True, exist_ok=True)
    image.astype("<f4").tofile(out / "tiny_input.f32")
    taps.astype("<f4").tofile(out / "tiny_taps.f32")
    manifest = {
        "container": container.name,
        "input": {"file": "tiny_input.f32", "shape": list(image.shape)},
        "taps": {"file": "tiny_taps.f32", "shape": list(taps.shape)},
    }
    (out / "golden.json").write_text(json.dumps(manifest, indent=2) + "\n")


if __name__ == "__main__":
    main()
