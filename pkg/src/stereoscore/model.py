"""
Three-branch multi-score network.

Each branch (left, right, stereo) runs the same trunk::

    LBconv1   conv3x3(in->32)  + ReLU + maxpool   32x32 -> 16x16
    LBconv2   conv3x3(32->64)  + ReLU + maxpool   16x16 -> 8x8
    PlainConv conv3x3(64->128) + ReLU             8x8
    PlainConv conv3x3(128->128)+ ReLU             8x8
    LBconv3   conv3x3(128->128)+ ReLU + maxpool   8x8 -> 4x4   (128*4*4 = 2048)
    LBflat    flatten -> FC(2048->1024) + ReLU
    LBFcr     FC(1024->512) + ReLU                 branch feature vector
    score     FC(512->1)                           per-branch quality

The left and right branches take 3-channel patches, the stereo branch
takes their channel-wise concatenation (6 channels). The three 512-d
feature vectors are concatenated (1536) and fed to LBconct:
FC(1536->512) + ReLU + FC(512->1), the global quality.
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import (
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    DimensionError,
)

PATCH_SIZE = 32
BRANCHES = ("left", "right", "stereo")
ACTIVATION = ad.relu

# (block name, out channels, pool after)
CONV_PLAN: Tuple[Tuple[str, int, bool], ...] = (
    ("LBconv1", 32, True),
    ("LBconv2", 64, True),
    ("PlainConv1", 128, False),
    ("PlainConv2", 128, False),
    ("LBconv3", 128, True),
)
TRUNK_SHAPE = (128, 4, 4)
FLAT_DIM = 2048
FLAT_OUT = 1024
FEATURE_DIM = 512
GLOBAL_DIM = FEATURE_DIM * len(BRANCHES)
GLOBAL_HIDDEN = 512

MAGIC = b"MSQA"
VERSION = 1


def _branch_shapes(in_channels: int) -> List[Tuple[str, tuple]]:
    shapes = []
    c = in_channels
    for block, c_out, _ in CONV_PLAN:
        shapes.append((f"{block}/conv/weight", (c_out, c, 3, 3)))
        shapes.append((f"{block}/conv/bias", (c_out,)))
        c = c_out
    shapes += [
        ("LBflat/fc/weight", (FLAT_OUT, FLAT_DIM)),
        ("LBflat/fc/bias", (FLAT_OUT,)),
        ("LBFcr/fc/weight", (FEATURE_DIM, FLAT_OUT)),
        ("LBFcr/fc/bias", (FEATURE_DIM,)),
        ("score/fc/weight", (1, FEATURE_DIM)),
        ("score/fc/bias", (1,)),
    ]
    return shapes


def canonical_shapes() -> List[Tuple[str, tuple]]:
    """Ordered (name, shape) list defining the network topology."""
    out = []
    for branch in BRANCHES:
        in_ch = 6 if branch == "stereo" else 3
        out += [(f"{branch}/{n}", s) for n, s in _branch_shapes(in_ch)]
    out += [
        ("global/LBconct/fc1/weight", (GLOBAL_HIDDEN, GLOBAL_DIM)),
        ("global/LBconct/fc1/bias", (GLOBAL_HIDDEN,)),
        ("global/LBconct/fc2/weight", (1, GLOBAL_HIDDEN)),
        ("global/LBconct/fc2/bias", (1,)),
    ]
    return out


class ScoreTensors(NamedTuple):
    """Per-sample outputs of one forward pass, each [N, 1]."""

    q_left: Tensor
    q_right: Tensor
    q_stereo: Tensor
    q_global: Optional[Tensor]


@dataclass(frozen=True)
class ScoreQuad:
    q_left: float
    q_right: float
    q_stereo: float
    q_global: float

    def as_dict(self) -> dict:
        return {"q_left": self.q_left, "q_right": self.q_right,
                "q_stereo": self.q_stereo, "q_global": self.q_global}


class MultiScoreNet:
    def __init__(self, params: Dict[str, Parameter]):
        expected = canonical_shapes()
        if [n for n, _ in expected] != list(params):
            raise CheckpointShapeError("parameter names do not follow the canonical topology")
        for name, shape in expected:
            if params[name].shape != shape:
                raise CheckpointShapeError(f"tensor {name!r} has shape {params[name].shape}, expected {shape}")
        self.params = params

    def parameters(self, prefix: str = "") -> List[Parameter]:
        return [p for n, p in self.params.items() if n.startswith(prefix)]

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "MultiScoreNet":
        return MultiScoreNet({n: Parameter(n, p.data.copy()) for n, p in self.params.items()})

    def digest(self) -> str:
        """SHA-256 over all parameter names and bytes."""
        h = hashlib.sha256()
        for n, p in self.params.items():
            h.update(n.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()

    def _p(self, name: str) -> Tensor:
        return self.params[name].tensor

    # -- forward pieces --------------------------------------------------------

    def trunk(self, branch: str, x: Tensor) -> Tensor:
        """Convolutional trunk of one branch: [N, C, 32, 32] -> [N, 128, 4, 4]."""
        h = x
        for block, _, pool in CONV_PLAN:
            pre = f"{branch}/{block}/conv"
            h = ACTIVATION(ad.conv2d(h, self._p(pre + "/weight"), self._p(pre + "/bias"), stride=1, padding=1))
            if pool:
                h = ad.maxpool2d(h)
        return h

    def features(self, branch: str, x: Tensor) -> Tensor:
        """Branch trunk + LBflat + LBFcr: [N, C, 32, 32] -> [N, 512]."""
        h = ad.flatten(self.trunk(branch, x))
        h = ACTIVATION(ad.fully_connected(h, self._p(f"{branch}/LBflat/fc/weight"), self._p(f"{branch}/LBflat/fc/bias")))
        return ACTIVATION(ad.fully_connected(h, self._p(f"{branch}/LBFcr/fc/weight"), self._p(f"{branch}/LBFcr/fc/bias")))

    def score_head(self, branch: str, feat: Tensor) -> Tensor:
        return ad.fully_connected(feat, self._p(f"{branch}/score/fc/weight"), self._p(f"{branch}/score/fc/bias"))

    def global_head(self, joint: Tensor) -> Tensor:
        h = ACTIVATION(ad.fully_connected(joint, self._p("global/LBconct/fc1/weight"), self._p("global/LBconct/fc1/bias")))
        return ad.fully_connected(h, self._p("global/LBconct/fc2/weight"), self._p("global/LBconct/fc2/bias"))

    def forward(self, left, right, with_global: bool = True) -> ScoreTensors:
        left = _as_input(left, "left")
        right = _as_input(right, "right")
        if left.shape != right.shape:
            raise DimensionError(f"left patches {left.shape} and right patches {right.shape} differ")
        stereo = ad.concat([left, right], axis=1)
        f_l = self.features("left", left)
        f_r = self.features("right", right)
        f_s = self.features("stereo", stereo)
        q_g = self.global_head(ad.concat([f_l, f_r, f_s], axis=1)) if with_global else None
        return ScoreTensors(self.score_head("left", f_l), self.score_head("right", f_r),
                            self.score_head("stereo", f_s), q_g)

    __call__ = forward

    def predict(self, left: np.ndarray, right: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Inference without graph recording; returns float64 array [N, 4]
        with columns (q_left, q_right, q_stereo, q_global)."""
        n = left.shape[0]
        out = np.empty((n, 4), dtype=np.float64)
        with ad.no_grad():
            for s in range(0, n, chunk):
                q = self.forward(left[s:s + chunk], right[s:s + chunk])
                for j, t in enumerate(q):
                    out[s:s + chunk, j] = t.data[:, 0]
        return out


def _as_input(x, label: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    if t.ndim != 4 or t.shape[1] != 3:
        raise DimensionError(f"{label} input must be [N, 3, 32, 32], got {t.shape}")
    if t.shape[2:] != (PATCH_SIZE, PATCH_SIZE):
        raise DimensionError(f"{label} input spatial size {t.shape[2:]} != (32, 32); tile images into patches first")
    return t


def forward(net: MultiScoreNet, left, right) -> ScoreTensors:
    return net.forward(left, right)


def _fan_in(shape: tuple) -> int:
    return int(np.prod(shape[1:]))


def build_network(seed: int) -> MultiScoreNet:
    """Canonical network; weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)), biases 0."""
    rng = np.random.default_rng(seed)
    params: Dict[str, Parameter] = {}
    for name, shape in canonical_shapes():
        if name.endswith("/bias"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            bound = np.sqrt(1.0 / _fan_in(shape))
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        params[name] = Parameter(name, data)
    return MultiScoreNet(params)


def parameter_count() -> int:
    return sum(int(np.prod(s)) for _, s in canonical_shapes())


# ---------------------------------------------------------------------------
# MSQA checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(net: MultiScoreNet, path) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(net.params))]
    for name, p in net.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", p.data.ndim))
        parts.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(p.data.astype("<f4", copy=False).tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"{self.path}: truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> MultiScoreNet:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, path)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r.pos = 4
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}, expected {VERSION}")
    count = r.u32("tensor count")
    expected = dict(canonical_shapes())
    params: Dict[str, Parameter] = {}
    for i in range(count):
        name_len = r.u32(f"name length of tensor {i}")
        name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        rank = r.u32(f"rank of {name!r}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name!r}"))
        if name not in expected:
            raise CheckpointShapeError(f"{path}: unknown tensor {name!r}")
        if tuple(dims) != expected[name]:
            raise CheckpointShapeError(f"{path}: tensor {name!r} has shape {tuple(dims)}, expected {expected[name]}")
        size = int(np.prod(dims))
        data = np.frombuffer(r.take(4 * size, f"data of {name!r}"), dtype="<f4").astype(np.float32).reshape(dims)
        params[name] = Parameter(name, data)
    if r.pos != len(buf):
        raise CheckpointShapeError(f"{path}: {len(buf) - r.pos} trailing bytes after last tensor")
    missing = [n for n in expected if n not in params]
    if missing:
        raise CheckpointShapeError(f"{path}: missing tensor {missing[0]!r} ({len(missing)} missing)")
    return MultiScoreNet({n: params[n] for n in expected})
