"""Shared frame-stacking encoder with per-segment and per-frame heads.

Per-segment mode pools encoder outputs (mean ++ std) and projects the pooled
vector to one embedding. Per-frame mode drops the pooling, projects every
encoder output (one per 80 ms) and adds VAD/OSD logit heads.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, replace

import numpy as np

from .autodiff import (
    ParameterSet,
    Tensor,
    add,
    concatenate,
    frame_stack,
    matmul,
    mean_time,
    primitive,
    relu,
    sigmoid,
    std_time,
)
from .features import EmptyInputError, FeatureMatrix

SEGMENT = "per-segment"
FRAME = "per-frame"

CHECKPOINT_MAGIC = b"JDMX"
CHECKPOINT_VERSION = 1


class ModeError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 64
    context_frames: int = 12
    hidden_dims: tuple = (256, 256, 512)
    subsample_factor: int = 8
    embed_dim: int = 256
    frame_shift_ms: float = 10.0
    num_classes: int = 0
    seed: int = 0
    head_init_range: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.subsample_factor * self.frame_shift_ms != 80:
            raise ValueError("subsample_factor * frame_shift_ms must equal 80 ms")
        if self.embed_dim < 1 or self.context_frames < 0 or not self.hidden_dims:
            raise ValueError("invalid encoder configuration")

    @property
    def period_ms(self) -> float:
        return self.subsample_factor * self.frame_shift_ms

    @property
    def stacked_dim(self) -> int:
        return (2 * self.context_frames + 1) * self.input_dim


def output_frame_count(T: int, subsample_factor: int = 8) -> int:
    """One output per ``subsample_factor`` input frames; the remainder is dropped."""
    if T < 0:
        raise ValueError("frame count must be non-negative")
    return T // subsample_factor


@dataclass
class PerFrameOutput:
    embeddings: np.ndarray
    vad_prob: np.ndarray
    osd_prob: np.ndarray
    origin_ms: float = 40.0
    period_ms: float = 80.0

    def __post_init__(self):
        n = len(self.embeddings)
        if len(self.vad_prob) != n or len(self.osd_prob) != n:
            raise ValueError("embeddings, vad_prob and osd_prob must share length")

    def __len__(self):
        return len(self.embeddings)

    @property
    def timestamps(self) -> np.ndarray:
        """Centre time of each output frame in seconds."""
        return (self.origin_ms + self.period_ms * np.arange(len(self))) / 1000.0


def _dense_init(rng, fan_in, fan_out):
    # He-normal for ReLU layers
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


class JointModel:
    def __init__(self, config: EncoderConfig, mode: str = FRAME, params: ParameterSet | None = None,
                 norm_mean=None, norm_std=None):
        if mode not in (SEGMENT, FRAME):
            raise ValueError(f"unknown mode {mode!r}")
        self.config = config
        self.mode = mode
        self.norm_mean = np.zeros(config.input_dim) if norm_mean is None else np.asarray(norm_mean, float)
        self.norm_std = np.ones(config.input_dim) if norm_std is None else np.asarray(norm_std, float)
        self.encoder_calls = 0
        if params is None:
            params = self._init_params(np.random.default_rng(config.seed))
        self.params = params

    # -- construction -----------------------------------------------------

    @property
    def encoder_names(self) -> list[str]:
        names = []
        for i in range(len(self.config.hidden_dims)):
            names += [f"enc{i}.w", f"enc{i}.b"]
        return names

    @property
    def head_names(self) -> list[str]:
        return ["vad.w", "vad.b", "osd.w", "osd.b"] if self.mode == FRAME else []

    @property
    def projection_names(self) -> list[str]:
        return ["proj.w", "proj.b"]

    def _init_params(self, rng) -> ParameterSet:
        cfg = self.config
        params = ParameterSet()
        fan_in = cfg.stacked_dim
        for i, width in enumerate(cfg.hidden_dims):
            params[f"enc{i}.w"] = _dense_init(rng, fan_in, width)
            params[f"enc{i}.b"] = np.zeros(width)
            fan_in = width
        self._init_projection_and_heads(params, rng)
        if cfg.num_classes > 0:
            params["cls.w"] = rng.normal(0.0, 1.0, size=(cfg.num_classes, cfg.embed_dim))
        return params

    def _init_projection_and_heads(self, params: ParameterSet, rng) -> None:
        cfg = self.config
        last = cfg.hidden_dims[-1]
        proj_in = 2 * last if self.mode == SEGMENT else last
        params["proj.w"] = rng.normal(0.0, math.sqrt(1.0 / proj_in), size=(proj_in, cfg.embed_dim))
        params["proj.b"] = np.zeros(cfg.embed_dim)
        if self.mode == FRAME:
            r = cfg.head_init_range
            for head in ("vad", "osd"):
                params[f"{head}.w"] = rng.uniform(-r, r, size=(cfg.embed_dim, 1))
                params[f"{head}.b"] = np.zeros(1)

    def copy(self) -> "JointModel":
        return JointModel(self.config, self.mode, self.params.copy(), self.norm_mean.copy(), self.norm_std.copy())

    # -- forward ----------------------------------------------------------

    def _stacked_input(self, values: np.ndarray) -> Tensor:
        cfg = self.config
        normed = (values - self.norm_mean) / self.norm_std
        return frame_stack(Tensor(normed), cfg.context_frames, cfg.subsample_factor)

    def encode(self, chunks) -> Tensor:
        """Run the encoder once over one or more equally long feature arrays
        (each T x input_dim); returns (n_chunks * T') x hidden activations."""
        if isinstance(chunks, np.ndarray):
            chunks = [chunks]
        lengths = {len(c) for c in chunks}
        if len(lengths) != 1:
            raise ValueError("chunks must share a length")
        if output_frame_count(lengths.pop(), self.config.subsample_factor) == 0:
            raise EmptyInputError("input shorter than one output frame")
        for c in chunks:
            if c.shape[1] != self.config.input_dim:
                raise ValueError(f"expected {self.config.input_dim}-dim features, got {c.shape[1]}")
        self.encoder_calls += 1
        stacked = [self._stacked_input(c) for c in chunks]
        h = stacked[0] if len(stacked) == 1 else concatenate(stacked, axis=0)
        for i in range(len(self.config.hidden_dims)):
            h = relu(add(matmul(h, self.params[f"enc{i}.w"]), self.params[f"enc{i}.b"]))
        return h

    def frame_heads(self, hidden: Tensor):
        """Projection and VAD/OSD logits (N x 1) for encoder outputs."""
        self._require(FRAME)
        emb = add(matmul(hidden, self.params["proj.w"]), self.params["proj.b"])
        vad = add(matmul(emb, self.params["vad.w"]), self.params["vad.b"])
        osd = add(matmul(emb, self.params["osd.w"]), self.params["osd.b"])
        return emb, vad, osd

    def pooled_embedding(self, hidden: Tensor, groups: int = 1) -> Tensor:
        """Mean ++ std pooling over each of ``groups`` sequences, then projection."""
        self._require(SEGMENT)
        pooled = concatenate([mean_time(hidden, groups), std_time(hidden, groups)], axis=-1)
        if groups == 1:
            pooled = _as_row(pooled)
        return add(matmul(pooled, self.params["proj.w"]), self.params["proj.b"])

    def _require(self, mode: str) -> None:
        if self.mode != mode:
            raise ModeError(f"model is in {self.mode} mode, operation needs {mode}")

    def output_origin_ms(self, features: FeatureMatrix) -> float:
        return features.audio_start_ms + self.config.period_ms / 2.0

    def forward_per_frame(self, features: FeatureMatrix) -> PerFrameOutput:
        """Embeddings plus VAD/OSD probabilities for the whole recording in a
        single encoder pass."""
        self._require(FRAME)
        if output_frame_count(features.num_frames, self.config.subsample_factor) == 0:
            raise EmptyInputError("recording shorter than one output frame")
        emb, vad, osd = self.frame_heads(self.encode(features.values))
        return PerFrameOutput(
            embeddings=emb.data,
            vad_prob=sigmoid(vad).data[:, 0],
            osd_prob=sigmoid(osd).data[:, 0],
            origin_ms=self.output_origin_ms(features),
            period_ms=self.config.period_ms,
        )

    def forward_per_segment(self, features: FeatureMatrix, start_s: float, end_s: float) -> np.ndarray:
        """One embedding for frames whose centres fall in ``[start_s, end_s)``."""
        self._require(SEGMENT)
        shift = features.frame_shift_ms
        first = max(0, math.ceil((start_s * 1000.0 - features.origin_offset_ms) / shift - 1e-9))
        stop = min(features.num_frames, math.ceil((end_s * 1000.0 - features.origin_offset_ms) / shift - 1e-9))
        if output_frame_count(max(stop - first, 0), self.config.subsample_factor) == 0:
            raise EmptyInputError(f"segment [{start_s}, {end_s}) holds fewer than one output frame")
        hidden = self.encode(features.values[first:stop])
        return self.pooled_embedding(hidden).data[0]

    def classify(self, embeddings: np.ndarray) -> np.ndarray:
        """Cosine scores against the (training-only) speaker classifier."""
        w = self.params["cls.w"].data
        e = embeddings / np.linalg.norm(embeddings, axis=-1, keepdims=True)
        return e @ (w / np.linalg.norm(w, axis=1, keepdims=True)).T


def _as_row(vec: Tensor) -> Tensor:
    # 1 x D view of a D-vector that stays on the tape
    return primitive(vec.data[None, :], (vec,), lambda g: (g[0],))


def convert_per_segment_to_per_frame(model: JointModel, seed: int | None = None) -> JointModel:
    """Drop pooling: keep the encoder (and classifier) verbatim, re-initialise
    the projection and create VAD/OSD heads from ``seed``."""
    if model.mode != SEGMENT:
        raise ModeError("model is already per-frame")
    cfg = model.config
    seed = cfg.seed + 1 if seed is None else seed
    params = ParameterSet()
    for name in model.encoder_names:
        params[name] = model.params[name].data.copy()
    if "cls.w" in model.params:
        params["cls.w"] = model.params["cls.w"].data.copy()
    out = JointModel(replace(cfg, seed=seed), FRAME, params, model.norm_mean.copy(), model.norm_std.copy())
    out._init_projection_and_heads(out.params, np.random.default_rng(seed))
    return out


# -- checkpoint I/O ---------------------------------------------------------


def _config_dict(model: JointModel) -> dict:
    d = asdict(model.config)
    d["hidden_dims"] = list(d["hidden_dims"])
    return {"mode": model.mode, "encoder": d}


def dumps_checkpoint(model: JointModel) -> bytes:
    """Serialise as ``JDMX`` | u32 version | u32 len + JSON config |
    u32 count | per tensor: u16 name len, name, u8 ndim, u32 dims, f64 data."""
    config = json.dumps(_config_dict(model), sort_keys=True).encode("utf-8")
    tensors = [("norm.mean", model.norm_mean), ("norm.std", model.norm_std)]
    tensors += [(name, t.data) for name, t in model.params.items()]
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(config)), config,
           struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def loads_checkpoint(blob: bytes) -> JointModel:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a JDMX checkpoint")
    version, clen = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(blob[pos : pos + clen].decode("utf-8"))
    pos += clen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    enc = meta["encoder"]
    enc["hidden_dims"] = tuple(enc["hidden_dims"])
    cfg = EncoderConfig(**enc)
    norm_mean = arrays.pop("norm.mean")
    norm_std = arrays.pop("norm.std")
    return JointModel(cfg, meta["mode"], ParameterSet(arrays), norm_mean, norm_std)


def save_checkpoint(path, model: JointModel) -> None:
    _atomic_write(path, dumps_checkpoint(model))


def load_checkpoint(path) -> JointModel:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())


def _atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
