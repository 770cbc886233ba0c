"""Frozen-encoder boundary: feature-map geometry, a seeded stand-in encoder,
global average pooling, and the BMFM interchange format.

BMFM layout (little-endian)::

    "BMFM" | u16 version=1
    per record: u16 id_len | id (UTF-8) | u16 H | u16 W | u32 D | H*W*D f32
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .frontend import N_MELS, TARGET_FRAMES, Spectrogram

PATCH = 16
MAGIC = b"BMFM"
VERSION = 1


class FormatError(ValueError):
    """A BMFM or label file is malformed."""


@dataclass(frozen=True)
class FeatureMap:
    values: np.ndarray  # (H, W, D)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"feature map must be H x W x D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def H(self) -> int:
        return self.values.shape[0]

    @property
    def W(self) -> int:
        return self.values.shape[1]

    @property
    def D(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class ToyEncoderSpec:
    seed: int = 0
    D: int = 768
    patch: int = PATCH
    positional: bool = True


def patchify(spec: Spectrogram | np.ndarray, patch: int = PATCH):
    """Row-major 16 x 16 blocks -> ((rows*cols, patch*patch) array, [(row, col), ...])."""
    v = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec, dtype=np.float64)
    if v.shape != (N_MELS, TARGET_FRAMES):
        raise ValueError(f"expected a {N_MELS} x {TARGET_FRAMES} spectrogram, got {v.shape}")
    rows, cols = v.shape[0] // patch, v.shape[1] // patch
    blocks = v.reshape(rows, patch, cols, patch).transpose(0, 2, 1, 3).reshape(rows * cols, patch * patch)
    index = [(r, c) for r in range(rows) for c in range(cols)]
    return blocks, index


def sincos_2d(rows: int, cols: int, D: int) -> np.ndarray:
    """2-D sine/cosine positional table (rows, cols, D): half the channels
    encode the row, half the column."""
    if D % 4:
        raise ValueError(f"positional encoding needs D divisible by 4, got {D}")
    quarter = D // 4
    omega = 1.0 / 10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter)

    def axis_code(n):
        ang = np.arange(n, dtype=np.float64)[:, None] * omega[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    r = axis_code(rows)[:, None, :].repeat(cols, axis=1)
    c = axis_code(cols)[None, :, :].repeat(rows, axis=0)
    return np.concatenate([r, c], axis=2)


def layer_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def projection(enc: ToyEncoderSpec) -> np.ndarray:
    rng = np.random.default_rng(enc.seed)
    k = enc.patch * enc.patch
    return rng.standard_normal((enc.D, k)) / np.sqrt(k)


def toy_encode(spec: Spectrogram | np.ndarray, enc: ToyEncoderSpec = ToyEncoderSpec()) -> FeatureMap:
    """Seeded random patch projection + positional code + per-patch layer norm."""
    blocks, _ = patchify(spec, enc.patch)
    rows, cols = N_MELS // enc.patch, TARGET_FRAMES // enc.patch
    emb = (blocks @ projection(enc).T).reshape(rows, cols, enc.D)
    if enc.positional:
        emb = emb + sincos_2d(rows, cols, enc.D)
    return FeatureMap(layer_norm(emb))


def global_average(fm: FeatureMap | np.ndarray) -> np.ndarray:
    v = fm.values if isinstance(fm, FeatureMap) else np.asarray(fm, dtype=np.float64)
    return v.reshape(-1, v.shape[-1]).mean(axis=0)


# -- BMFM -----------------------------------------------------------------------


def write_fmap(path, batch: Iterable[tuple[str, FeatureMap]]) -> int:
    n = 0
    dim = None
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<H", VERSION))
        for rid, fm in batch:
            if dim is None:
                dim = fm.D
            elif fm.D != dim:
                raise FormatError(f"record {rid!r} has D={fm.D}, file uses D={dim}")
            key = rid.encode("utf-8")
            if len(key) > 0xFFFF or fm.H > 0xFFFF or fm.W > 0xFFFF:
                raise FormatError(f"record {rid!r} does not fit the format limits")
            fh.write(struct.pack("<H", len(key)) + key + struct.pack("<HHI", fm.H, fm.W, fm.D))
            fh.write(np.ascontiguousarray(fm.values, dtype="<f4").tobytes())
            n += 1
    return n


def read_fmap(path) -> list[tuple[str, FeatureMap]]:
    raw = Path(path).read_bytes()
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a BMFM file (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported BMFM version {version}")
    pos = 6
    out: list[tuple[str, FeatureMap]] = []
    dim = None
    while pos < len(raw):
        try:
            (klen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            rid = raw[pos : pos + klen].decode("utf-8")
            if pos + klen > len(raw):
                raise struct.error("id")
            pos += klen
            H, W, D = struct.unpack_from("<HHI", raw, pos)
            pos += 8
        except (struct.error, UnicodeDecodeError):
            raise FormatError(f"{path}: truncated record header at byte {pos}") from None
        count = H * W * D
        if pos + 4 * count > len(raw):
            raise FormatError(f"{path}: truncated values for record {rid!r}")
        if dim is None:
            dim = D
        elif D != dim:
            raise FormatError(f"{path}: record {rid!r} has D={D}, file uses D={dim}")
        vals = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(H, W, D)
        pos += 4 * count
        out.append((rid, FeatureMap(vals.astype(np.float64))))
    return out


def write_labels(path, rows: Iterable[tuple[str, Sequence[int]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rid, labels in rows:
            fh.write(json.dumps({"id": rid, "labels": [int(c) for c in labels]}) + "\n")


def read_labels(path) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out[str(obj["id"])] = [int(c) for c in obj["labels"]]
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad label record ({exc})") from None
    return out


def multi_hot(labels: Sequence[int], C: int) -> np.ndarray:
    y = np.zeros(C, dtype=np.float64)
    for c in labels:
        if not 0 <= c < C:
            raise FormatError(f"class index {c} outside [0, {C})")
        y[c] = 1.0
    return y
