"""Probe heads over frozen feature maps, their losses, and checkpoint I/O.

Four heads share one small protocol: ``parameters()`` yields ``(name, Tensor)``
pairs in declaration order, ``forward`` maps a batch to ``(B, C)`` logits as an
ndgrad graph, and ``predict`` does the same on plain arrays without recording
one. Linear and MLP heads read globally averaged ``(B, D)`` vectors; attentive
and prototypical heads read ``(B, H, W, D)`` (or ``(B, N, D)``) feature maps.
"""

from __future__ import annotations

import io
import math
import struct
from typing import Iterator

import numpy as np

from . import kernels
from . import ndgrad as nd
from .ndgrad import Tensor

KINDS = ("linear", "mlp", "attentive", "proto")

# Asymmetric loss defaults.
GAMMA_POS = 0.0
GAMMA_NEG = 4.0
ASL_CLIP = 0.05
LOG_FLOOR = 1e-8


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _tokens(x: Tensor) -> Tensor:
    """Flatten a (B, H, W, D) grid to (B, H*W, D) tokens."""
    if x.ndim == 4:
        b, h, w, d = x.shape
        return nd.reshape(x, (b, h * w, d))
    if x.ndim != 3:
        raise nd.ShapeError(f"expected (B, H, W, D) or (B, N, D) feature maps, got {x.shape}")
    return x


def _affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    y = nd.matmul(x, nd.transpose(weight))
    return nd.add(y, nd.broadcast_to(bias, y.shape))


class Head:
    kind: str = ""
    # Parameter names exempt from weight decay.
    no_decay: tuple[str, ...] = ()

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(Tensor(x)).data

    def dims(self) -> dict[str, int]:
        raise NotImplementedError

    def num_params(self) -> int:
        return int(sum(p.data.size for _, p in self.parameters()))

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    def project(self) -> None:
        """Re-establish parameter constraints after an optimizer step."""

    def extra_loss(self) -> Tensor | None:
        return None


class LinearHead(Head):
    kind = "linear"
    no_decay = ("bias",)

    def __init__(self, D: int, C: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.D, self.C = D, C
        self.weight = _uniform(rng, (C, D), D)
        self.bias = _uniform(rng, (C,), D)

    def parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def dims(self):
        return {"D": self.D, "C": self.C}

    def forward(self, x: Tensor) -> Tensor:
        return _affine(x, self.weight, self.bias)


class MlpHead(Head):
    kind = "mlp"
    no_decay = ("hidden_bias", "out_bias")

    def __init__(self, D: int, C: int, H: int = 512, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.D, self.C, self.H = D, C, H
        self.hidden_weight = _uniform(rng, (H, D), D)
        self.hidden_bias = _uniform(rng, (H,), D)
        self.out_weight = _uniform(rng, (C, H), H)
        self.out_bias = _uniform(rng, (C,), H)

    def parameters(self):
        yield "hidden_weight", self.hidden_weight
        yield "hidden_bias", self.hidden_bias
        yield "out_weight", self.out_weight
        yield "out_bias", self.out_bias

    def dims(self):
        return {"D": self.D, "C": self.C, "H": self.H}

    def forward(self, x: Tensor) -> Tensor:
        h = nd.gelu(_affine(x, self.hidden_weight, self.hidden_bias))
        return _affine(h, self.out_weight, self.out_bias)


class AttentiveHead(Head):
    """One learned query attends over all patch tokens; multi-head, no output
    projection, then a linear classifier on the pooled vector."""

    kind = "attentive"
    no_decay = ("bias",)

    def __init__(self, D: int, C: int, heads: int = 12, seed: int = 0):
        if heads < 1 or D % heads:
            raise ValueError(f"embedding dim {D} is not divisible by {heads} heads")
        rng = np.random.default_rng(seed)
        self.D, self.C, self.heads = D, C, heads
        self.query = Tensor(rng.normal(0.0, 0.02, size=(D,)), requires_grad=True)
        self.key = _uniform(rng, (D, D), D)
        self.value = _uniform(rng, (D, D), D)
        self.weight = _uniform(rng, (C, D), D)
        self.bias = _uniform(rng, (C,), D)

    def parameters(self):
        yield "query", self.query
        yield "key", self.key
        yield "value", self.value
        yield "weight", self.weight
        yield "bias", self.bias

    def dims(self):
        return {"D": self.D, "C": self.C, "heads": self.heads}

    def attention(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (attention weights (B, N, heads), pooled (B, D))."""
        tok = _tokens(x)
        b, n, d = tok.shape
        if d != self.D:
            raise nd.ShapeError(f"feature dim {d} does not match head dim {self.D}")
        nh, dh = self.heads, d // self.heads
        k = nd.reshape(nd.matmul(tok, nd.transpose(self.key)), (b, n, nh, dh))
        v = nd.reshape(nd.matmul(tok, nd.transpose(self.value)), (b, n, nh, dh))
        q = nd.broadcast_to(nd.reshape(self.query, (nh, dh)), (b, n, nh, dh))
        scores = nd.scale(nd.sum(nd.mul(k, q), axis=-1), 1.0 / math.sqrt(dh))
        attn = nd.softmax(scores, axis=1)
        w = nd.broadcast_to(nd.reshape(attn, (b, n, nh, 1)), (b, n, nh, dh))
        pooled = nd.reshape(nd.sum(nd.mul(w, v), axis=1), (b, d))
        return attn, pooled

    def forward(self, x: Tensor) -> Tensor:
        _, pooled = self.attention(x)
        return _affine(pooled, self.weight, self.bias)


def random_prototypes(rng: np.random.Generator, C: int, J: int, D: int) -> np.ndarray:
    """Gaussian-scale prototypes whose J rows per class are mutually orthogonal.

    Each row still points in a uniformly random direction. In high dimension
    plain Gaussian rows are nearly orthogonal anyway; orthogonalizing makes
    small D behave the same way instead of starting with a large
    orthogonality penalty. Falls back to plain Gaussian rows when J > D.
    """
    g = rng.standard_normal((C, J, D))
    if J > D:
        return g
    q, r = np.linalg.qr(np.swapaxes(g, 1, 2))  # (C, D, J)
    q *= np.sign(np.diagonal(r, axis1=1, axis2=2))[:, None, :]
    return np.ascontiguousarray(np.swapaxes(q, 1, 2) * np.linalg.norm(g, axis=2, keepdims=True))


class PrototypicalHead(Head):
    """Per-class prototype bank scored by max-pooled patch cosine similarity.

    Class ``c`` has ``J`` prototypes of dimension ``D``; its logit is a
    non-negative weighted sum of its own ``J`` similarity scores plus a bias,
    so no class ever sees another class's evidence.
    """

    kind = "proto"
    no_decay = ("head_bias",)

    def __init__(self, D: int, C: int, J: int = 20, focal: bool = True, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.D, self.C, self.J = D, C, J
        self.focal = focal
        self.prototypes = Tensor(random_prototypes(rng, C, J, D), requires_grad=True)
        self.head_weights = Tensor(np.ones((C, J)), requires_grad=True)
        self.head_bias = Tensor(np.full(C, -2.0), requires_grad=True)

    def parameters(self):
        yield "prototypes", self.prototypes
        yield "head_weights", self.head_weights
        yield "head_bias", self.head_bias

    def dims(self):
        return {"D": self.D, "C": self.C, "J": self.J, "focal": int(self.focal)}

    def similarities(self, x: Tensor) -> Tensor:
        """(B, C, J) max (or max - mean, when focal) patch cosine per prototype."""
        tok = _tokens(x)
        b, n, d = tok.shape
        if d != self.D:
            raise nd.ShapeError(f"feature dim {d} does not match prototype dim {self.D}")
        k = self.C * self.J
        hn = nd.normalize(tok)
        pn = nd.normalize(nd.reshape(self.prototypes, (k, d)))
        field = nd.matmul(hn, nd.transpose(pn))
        s = nd.max(field, axis=1)
        if self.focal:
            s = nd.sub(s, nd.mean(field, axis=1))
        return nd.reshape(s, (b, self.C, self.J))

    def logits_from_scores(self, s: Tensor) -> Tensor:
        w = nd.broadcast_to(self.head_weights, s.shape)
        z = nd.sum(nd.mul(s, w), axis=-1)
        return nd.add(z, nd.broadcast_to(self.head_bias, z.shape))

    def forward(self, x: Tensor) -> Tensor:
        return self.logits_from_scores(self.similarities(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 4:
            x = x.reshape(x.shape[0], -1, x.shape[-1])
        protos = self.prototypes.data.reshape(self.C * self.J, self.D)
        smax, _, smean = kernels.max_cosine_pool(x, protos)
        s = smax - smean if self.focal else smax
        s = s.reshape(-1, self.C, self.J)
        return (s * self.head_weights.data).sum(axis=-1) + self.head_bias.data

    def project(self) -> None:
        np.maximum(self.head_weights.data, 0.0, out=self.head_weights.data)

    def extra_loss(self) -> Tensor:
        return orthogonality_loss(self)


def proto_similarities(fm, bank: PrototypicalHead) -> np.ndarray:
    """Scores for a single (H, W, D) feature map -> (C, J)."""
    fm = np.asarray(fm, dtype=np.float64)
    return bank.similarities(Tensor(fm[None])).data[0]


def proto_logits(scores, bank: PrototypicalHead) -> np.ndarray:
    s = Tensor(np.asarray(scores, dtype=np.float64)[None])
    return bank.logits_from_scores(s).data[0]


def asymmetric_loss(
    logits: Tensor,
    labels,
    gamma_pos: float = GAMMA_POS,
    gamma_neg: float = GAMMA_NEG,
    clip: float = ASL_CLIP,
) -> Tensor:
    """Mean over all entries of the asymmetric multi-label loss.

    Negatives use the shifted probability max(p - clip, 0); ``0 * log 0`` is 0.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise nd.ShapeError(f"labels {y.shape} do not match logits {logits.shape}")
    if not 0.0 <= clip < 1.0:
        raise ValueError(f"clip must be in [0, 1), got {clip}")
    pos = Tensor(y)
    neg = Tensor(1.0 - y)
    p = nd.sigmoid(logits)
    one_minus_p = nd.scale(nd.sub(p, 1.0), -1.0)
    pos_term = nd.mul(nd.power(one_minus_p, gamma_pos), nd.log(p, floor=LOG_FLOOR))
    pm = nd.relu(nd.sub(p, clip)) if clip > 0 else p
    one_minus_pm = nd.scale(nd.sub(pm, 1.0), -1.0)
    neg_term = nd.mul(nd.power(pm, gamma_neg), nd.log(one_minus_pm, floor=LOG_FLOOR))
    total = nd.add(nd.mul(pos, pos_term), nd.mul(neg, neg_term))
    return nd.scale(nd.mean(total), -1.0)


def orthogonality_loss(bank: PrototypicalHead) -> Tensor:
    """(1/C) sum_c ||P_c P_c^T - I||_F^2 with row-normalised P_c (J x D)."""
    pn = nd.normalize(bank.prototypes)
    gram = nd.matmul(pn, nd.transpose(pn))
    eye = Tensor(np.broadcast_to(np.eye(bank.J), gram.shape).copy())
    dev = nd.square(nd.sub(gram, eye))
    per_class = nd.sum(nd.sum(dev, axis=-1), axis=-1)
    return nd.mean(per_class)


def param_count(kind: str, D: int, C: int, H: int = 512, J: int = 20) -> int:
    if min(D, C) < 1:
        raise ValueError("D and C must be positive")
    if kind == "linear":
        return C * (D + 1)
    if kind == "mlp":
        return H * (D + 1) + C * (H + 1)
    if kind == "attentive":
        return 2 * D * D + (C + 1) * D + C
    if kind == "proto":
        return C * (J * (D + 1) + 1)
    raise ValueError(f"unknown probe kind {kind!r}; expected one of {', '.join(KINDS)}")


def build_head(kind: str, D: int, C: int, *, H: int = 512, J: int = 20, heads: int = 12,
               focal: bool = True, seed: int = 0) -> Head:
    if kind == "linear":
        return LinearHead(D, C, seed=seed)
    if kind == "mlp":
        return MlpHead(D, C, H=H, seed=seed)
    if kind == "attentive":
        return AttentiveHead(D, C, heads=heads, seed=seed)
    if kind == "proto":
        return PrototypicalHead(D, C, J=J, focal=focal, seed=seed)
    raise ValueError(f"unknown probe kind {kind!r}; expected one of {', '.join(KINDS)}")


# -- BMPH checkpoints ----------------------------------------------------------
#
# magic "BMPH" | u8 kind | u32 D, C, H, J, heads | u8 focal | u32 n_params
# | f64 little-endian parameters, declaration order, row-major

MAGIC = b"BMPH"
_HEADER = struct.Struct("<4sB5IBI")


class CheckpointError(ValueError):
    pass


def save_head(head: Head, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_head(head))


def dumps_head(head: Head) -> bytes:
    d = head.dims()
    buf = io.BytesIO()
    buf.write(
        _HEADER.pack(
            MAGIC,
            KINDS.index(head.kind),
            d["D"],
            d["C"],
            d.get("H", 0),
            d.get("J", 0),
            d.get("heads", 0),
            d.get("focal", 0),
            head.num_params(),
        )
    )
    for _, p in head.parameters():
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return buf.getvalue()


def load_head(path) -> Head:
    with open(path, "rb") as fh:
        return loads_head(fh.read())


def loads_head(raw: bytes) -> Head:
    if len(raw) < _HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    magic, kind_id, D, C, H, J, heads, focal, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if kind_id >= len(KINDS):
        raise CheckpointError(f"unknown head kind byte {kind_id}")
    head = build_head(KINDS[kind_id], D, C, H=H, J=J, heads=heads or 12, focal=bool(focal))
    if head.num_params() != n or len(raw) != _HEADER.size + 8 * n:
        raise CheckpointError("parameter block does not match header dimensions")
    offset = _HEADER.size
    for _, p in head.parameters():
        size = p.data.size
        p.data[...] = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(p.shape)
        offset += 8 * size
    return head
