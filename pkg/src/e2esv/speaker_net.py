"""Frame-level speaker networks mapping a 3x31x12 context window to 64 dims.

The network is described by a layer list (the architecture descriptor) so the
same code builds the VGG-style CNN and the frame DNN used for ablations.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .features import CONTEXT, N_STATIC

INPUT_SHAPE = (3, CONTEXT, N_STATIC)
EMBED_DIM = 64
CNN_CHANNELS = (32, 32, 64, 64)
DNN_HIDDEN = (256, 64)
MAGIC = b"E2EC"
# frames per forward chunk in inference
INFER_CHUNK = 2048


def cnn_descriptor(channels=CNN_CHANNELS, embed_dim: int = EMBED_DIM) -> dict:
    c1, c2, c3, c4 = channels
    layers = []
    H, W = INPUT_SHAPE[1:]
    prev = INPUT_SHAPE[0]
    for i, (c, pool) in enumerate(((c1, False), (c2, True), (c3, False), (c4, True)), start=1):
        layers += [{"type": "conv", "name": f"conv{i}", "in": prev, "out": c},
                   {"type": "bn", "name": f"bn{i}", "channels": c},
                   {"type": "relu"}]
        if pool:
            layers.append({"type": "maxpool2"})
            H, W = -(-H // 2), -(-W // 2)
        prev = c
    layers += [{"type": "flatten"},
               {"type": "linear", "name": "proj", "in": prev * H * W, "out": embed_dim}]
    return {"kind": "cnn", "input": list(INPUT_SHAPE), "layers": layers}


def dnn_descriptor(hidden=DNN_HIDDEN, embed_dim: int = EMBED_DIM) -> dict:
    prev = int(np.prod(INPUT_SHAPE))
    layers: list[dict] = [{"type": "flatten"}]
    for i, n in enumerate(hidden, start=1):
        layers += [{"type": "linear", "name": f"fc{i}", "in": prev, "out": n},
                   {"type": "bn", "name": f"bn{i}", "channels": n},
                   {"type": "relu"}]
        prev = n
    layers.append({"type": "linear", "name": "proj", "in": prev, "out": embed_dim})
    return {"kind": "dnn", "input": list(INPUT_SHAPE), "layers": layers}


@dataclass
class SpeakerNet:
    descriptor: dict
    params: nn.ParamStore
    bn: dict[str, nn.BatchNormState] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.descriptor["kind"]

    @property
    def output_dim(self) -> int:
        return self.descriptor["layers"][-1]["out"]

    def forward(self, windows, mode: str = "train", update_stats: bool = True) -> nn.Tensor:
        x = nn.as_tensor(windows)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.descriptor["input"]):
            raise nn.ShapeError(
                f"speaker net expects (T, {', '.join(map(str, self.descriptor['input']))}) windows, "
                f"got {x.shape}")
        T = x.shape[0]
        for layer in self.descriptor["layers"]:
            kind = layer["type"]
            if kind == "conv":
                x = nn.conv2d(x, self.params[f"{layer['name']}.K"])
            elif kind == "bn":
                x = nn.batchnorm(x, self.bn[layer["name"]], mode, update_stats)
            elif kind == "relu":
                x = nn.relu(x)
            elif kind == "maxpool2":
                x = nn.maxpool2(x)
            elif kind == "flatten":
                x = x.reshape(T, -1)
            elif kind == "linear":
                x = nn.linear(x, self.params[f"{layer['name']}.W"], self.params[f"{layer['name']}.b"])
            else:
                raise ValueError(f"unknown layer type {kind!r}")
        return x

    def infer(self, windows: np.ndarray) -> np.ndarray:
        """Inference-mode features without recording gradients."""
        out = [self.forward(windows[s:s + INFER_CHUNK], "infer").data
               for s in range(0, len(windows), INFER_CHUNK)]
        return np.vstack(out) if out else np.zeros((0, self.output_dim))

    def calibrate(self, windows: np.ndarray) -> None:
        """Set running statistics from one train-mode pass (no gradients)."""
        self.forward(windows, "train")

    @property
    def stats_ready(self) -> bool:
        return all(s.initialized for s in self.bn.values())


SpeakerCnnModel = SpeakerNet


def build(descriptor: dict, seed: int = 0) -> SpeakerNet:
    """Initialise weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero."""
    rng = np.random.default_rng(seed)
    store = nn.ParamStore()
    bn: dict[str, nn.BatchNormState] = {}
    for layer in descriptor["layers"]:
        kind = layer["type"]
        if kind == "conv":
            cin, cout = layer["in"], layer["out"]
            store.add(f"{layer['name']}.K",
                      nn.glorot_uniform(rng, (cout, cin, 3, 3), cin * 9, cout * 9))
        elif kind == "linear":
            fin, fout = layer["in"], layer["out"]
            store.add(f"{layer['name']}.W", nn.glorot_uniform(rng, (fout, fin), fin, fout))
            store.add(f"{layer['name']}.b", np.zeros(fout))
        elif kind == "bn":
            state = nn.BatchNormState.create(layer["channels"], layer["name"])
            store.add(f"{layer['name']}.scale", state.scale)
            store.add(f"{layer['name']}.shift", state.shift)
            bn[layer["name"]] = state
    return SpeakerNet(descriptor, store, bn)


def init_speaker_cnn(seed: int = 0, channels=CNN_CHANNELS) -> SpeakerNet:
    return build(cnn_descriptor(channels), seed)


def init_speaker_dnn(seed: int = 0, hidden=DNN_HIDDEN) -> SpeakerNet:
    return build(dnn_descriptor(hidden), seed)


def extract_frame_features(model: SpeakerNet, windows, mode: str = "infer") -> nn.Tensor:
    """T x 64 frame features; train mode normalises with this call's batch statistics."""
    return model.forward(windows, mode)


# ---------------------------------------------------------------------------
# persistence


def to_bytes(model: SpeakerNet) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    nn.write_u32(buf, 1)
    nn.write_str(buf, json.dumps(model.descriptor, separators=(",", ":")))
    tensors = [(k, t.data) for k, t in model.params.items()]
    for name, state in model.bn.items():
        tensors += [(f"{name}.running_mean", state.running_mean),
                    (f"{name}.running_var", state.running_var),
                    (f"{name}.initialized", np.array([float(state.initialized)]))]
    nn.write_named(buf, tensors)
    return buf.getvalue()


def from_stream(fh) -> SpeakerNet:
    nn.expect_magic(fh, MAGIC)
    descriptor = json.loads(nn.read_str(fh))
    tensors = nn.read_named(fh)
    model = build(descriptor)
    for k, t in model.params.items():
        t.data = tensors[k]
    for name, state in model.bn.items():
        state.running_mean = tensors[f"{name}.running_mean"]
        state.running_var = tensors[f"{name}.running_var"]
        state.initialized = bool(tensors[f"{name}.initialized"][0])
    return model


def save(model: SpeakerNet, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load(path) -> SpeakerNet:
    with open(path, "rb") as fh:
        return from_stream(fh)
