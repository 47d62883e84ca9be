"""Writes golden fixtures for the neural fine backend.

Generates seeded weights in the engine's weights-directory layout, a test
image, and the expected descriptor, reliability and keypoint-logit maps
computed with an independent float64 PyTorch forward pass.

    python tools/neural_reference.py crates/core/tests/fixtures/neural
"""

import json
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

import glft

LAYERS = [
    ("block1", 8, 1, 3),
    ("block2", 16, 8, 3),
    ("block3", 24, 16, 3),
    ("block4", 64, 24, 3),
    ("block5", 128, 64, 3),
    ("proj1", 64, 24, 1),
    ("proj2", 64, 64, 1),
    ("proj3", 64, 128, 1),
    ("fusion", 64, 64, 1),
    ("rel1", 64, 64, 1),
    ("rel2", 1, 64, 1),
    ("kp1", 64, 64, 1),
    ("kp2", 64, 64, 1),
    ("kp3", 64, 64, 1),
    ("kp4", 65, 64, 1),
]
SIDE = 64


def make_weights(rng):
    weights = {}
    for name, o, i, k in LAYERS:
        a = 1.0 / np.sqrt(i * k * k)
        w = rng.uniform(-a, a, size=(o, i, k, k)).astype(np.float32)
        b = rng.uniform(-0.1, 0.1, size=o).astype(np.float32)
        weights[name] = (w, b)
    return weights


def make_image(rng):
    y, x = np.mgrid[0:SIDE, 0:SIDE] / SIDE
    img = 0.5 + 0.25 * np.sin(9 * x + 4 * y) * np.cos(7 * y - 3 * x)
    img += 0.1 * rng.standard_normal((SIDE, SIDE))
    img[20:36, 12:30] += 0.3
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def forward(img, weights):
    t = torch.from_numpy(img.astype(np.float64))
    t = (t - t.mean()) / (t.std(unbiased=False) + 1e-6)
    x = t[None, None]

    def conv(inp, name, stride=1):
        w, b = weights[name]
        w = torch.from_numpy(w.astype(np.float64))
        b = torch.from_numpy(b.astype(np.float64))
        return F.conv2d(inp, w, b, stride=stride, padding=w.shape[-1] // 2)

    s = x
    stages = []
    for n in range(1, 6):
        s = F.relu(conv(s, f"block{n}", stride=2))
        stages.append(s)
    s8, s16, s32 = stages[2], stages[3], stages[4]
    size = s8.shape[-2:]
    up = lambda v: F.interpolate(v, size=size, mode="bilinear", align_corners=False)
    fused = conv(s8, "proj1") + up(conv(s16, "proj2")) + up(conv(s32, "proj3"))
    desc = conv(fused, "fusion")
    rel = torch.sigmoid(conv(F.relu(conv(desc, "rel1")), "rel2"))
    kp = F.pixel_unshuffle(x, 8)
    for name in ("kp1", "kp2", "kp3"):
        kp = F.relu(conv(kp, name))
    logits = conv(kp, "kp4")
    hwc = lambda v: v[0].permute(1, 2, 0).numpy()
    return hwc(desc), rel[0, 0].numpy(), hwc(logits)


def main(out):
    out = Path(out)
    weights_dir = out / "weights"
    weights_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240617)
    weights = make_weights(rng)
    entries = []
    for name, *_ in LAYERS:
        w, b = weights[name]
        glft.write(weights_dir / f"{name}.glft", w, {"layer": name, "bias": b.tolist()})
        entries.append({"name": name, "file": f"{name}.glft"})
    manifest = {"kind": "fine-neural", "layers": entries}
    (weights_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))

    img = make_image(rng)
    glft.write(out / "input.glft", img)
    desc, rel, logits = forward(img, weights)
    glft.write(out / "descriptors.glft", desc)
    glft.write(out / "reliability.glft", rel)
    glft.write(out / "logits.glft", logits)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures/neural")
