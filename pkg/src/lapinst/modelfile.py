"""Trained pipeline bundle and its versioned binary file format.

Layout (little-endian)::

    magic   b"LSC1"
    version u32
    length  u64          payload byte count
    payload              see _encode_payload
    crc     u32          zlib.crc32 of payload

Payload: three forests (segmentation, stage 1, stage 2), the PCA model,
the vocabulary, beta and background threshold (f64 each), then a
length-prefixed JSON block of detection parameters. A forest is
``num_classes u32, feature_dim u32, num_trees u32`` followed by, per tree,
``n_nodes u32`` and packed node records
``feature u32, threshold f64, left i32, right i32, dist f64 x num_classes``.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .boxes import BoxConfig
from .errors import BadMagic, CorruptPayload, InvalidModel, UnsupportedVersion
from .features import PcaModel, Vocabulary
from .forest import RandomForest, Tree
from .segment import FEATURE_DIM
from .surf import DEFAULT_HESSIAN_THRESHOLD

MAGIC = b"LSC1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_CRC = struct.Struct("<I")


@dataclass(frozen=True)
class DetectionParams:
    boxes: BoxConfig = BoxConfig()
    hessian_threshold: float = DEFAULT_HESSIAN_THRESHOLD

    def to_dict(self) -> dict:
        return {
            "boxes.close_kernel": self.boxes.close_kernel,
            "boxes.min_area": self.boxes.min_area,
            "boxes.proximity_px": self.boxes.proximity_px,
            "boxes.angle_deg": self.boxes.angle_deg,
            "surf.hessian_threshold": self.hessian_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionParams":
        return cls(
            BoxConfig(int(d["boxes.close_kernel"]), int(d["boxes.min_area"]),
                      float(d["boxes.proximity_px"]), float(d["boxes.angle_deg"])),
            float(d["surf.hessian_threshold"]),
        )


@dataclass(frozen=True, eq=False)
class PipelineModel:
    segmentation_forest: RandomForest
    stage1_forest: RandomForest
    stage2_forest: RandomForest
    pca: PcaModel
    vocabulary: Vocabulary
    beta: float = 0.6
    background_threshold: float = 0.6
    params: DetectionParams = field(default_factory=DetectionParams)
    format_version: int = FORMAT_VERSION

    def validate(self) -> None:
        if self.vocabulary.dim != self.pca.m_hat:
            raise InvalidModel(
                f"vocabulary dimension {self.vocabulary.dim} != PCA retained dimension {self.pca.m_hat}")
        if not 0 < self.beta < 1:
            raise InvalidModel(f"beta must lie in (0, 1), got {self.beta}")
        if not 0 < self.background_threshold <= 1:
            raise InvalidModel("background threshold must lie in (0, 1]")
        seg = self.segmentation_forest
        if seg.num_classes != 2 or seg.feature_dim != FEATURE_DIM:
            raise InvalidModel("segmentation forest must be 2-class over 7 pixel features")
        if self.stage1_forest.num_classes != 2 or self.stage1_forest.feature_dim != 20:
            raise InvalidModel("stage-1 forest must be 2-class over 20 colour features")
        expected = 30 + self.vocabulary.k
        if self.stage2_forest.feature_dim != expected:
            raise InvalidModel(f"stage-2 forest expects {self.stage2_forest.feature_dim} features, "
                               f"vocabulary implies {expected}")
        if not (1 <= self.pca.m_hat <= self.pca.dim):
            raise InvalidModel("PCA retained dimension out of range")

    def __eq__(self, other):
        if not isinstance(other, PipelineModel):
            return NotImplemented
        return (self.segmentation_forest == other.segmentation_forest
                and self.stage1_forest == other.stage1_forest
                and self.stage2_forest == other.stage2_forest
                and self.pca == other.pca
                and self.vocabulary == other.vocabulary
                and self.beta == other.beta
                and self.background_threshold == other.background_threshold
                and self.params == other.params
                and self.format_version == other.format_version)


def _node_dtype(num_classes: int) -> np.dtype:
    return np.dtype([("feature", "<u4"), ("threshold", "<f8"), ("left", "<i4"),
                     ("right", "<i4"), ("dist", "<f8", (num_classes,))])


def _write_forest(buf: io.BytesIO, forest: RandomForest) -> None:
    buf.write(struct.pack("<III", forest.num_classes, forest.feature_dim, forest.num_trees))
    dt = _node_dtype(forest.num_classes)
    for tree in forest.trees:
        rec = np.zeros(tree.n_nodes, dtype=dt)
        rec["feature"] = tree.feature
        rec["threshold"] = tree.threshold
        rec["left"] = tree.left
        rec["right"] = tree.right
        rec["dist"] = tree.value
        buf.write(struct.pack("<I", tree.n_nodes))
        buf.write(rec.tobytes())


def _f64(values) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


def _encode_payload(model: PipelineModel) -> bytes:
    buf = io.BytesIO()
    for forest in (model.segmentation_forest, model.stage1_forest, model.stage2_forest):
        _write_forest(buf, forest)
    pca = model.pca
    buf.write(struct.pack("<IId", pca.dim, pca.m_hat, pca.alpha))
    buf.write(_f64(pca.mean))
    buf.write(_f64(pca.eigenvalues))
    buf.write(_f64(pca.rotation))
    voc = model.vocabulary
    buf.write(struct.pack("<II", voc.k, voc.dim))
    buf.write(_f64(voc.centers))
    buf.write(struct.pack("<dd", model.beta, model.background_threshold))
    params = json.dumps(model.params.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(params)))
    buf.write(params)
    return buf.getvalue()


def encode_model(model: PipelineModel) -> bytes:
    model.validate()
    payload = _encode_payload(model)
    return (_HEADER.pack(MAGIC, FORMAT_VERSION, len(payload)) + payload
            + _CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF))


def save_model(model: PipelineModel, destination) -> int:
    """Write ``model`` to a path or binary file object; returns the byte count."""
    data = encode_model(model)
    if hasattr(destination, "write"):
        destination.write(data)
    else:
        with open(destination, "wb") as fh:
            fh.write(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptPayload("payload ends prematurely")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def _read_forest(r: _Reader) -> RandomForest:
    num_classes, feature_dim, num_trees = r.unpack("<III")
    if num_classes < 1 or num_trees < 1:
        raise CorruptPayload("forest header is invalid")
    dt = _node_dtype(num_classes)
    trees = []
    for _ in range(num_trees):
        (n_nodes,) = r.unpack("<I")
        rec = np.frombuffer(r.take(n_nodes * dt.itemsize), dtype=dt)
        trees.append(Tree(
            feature=rec["feature"].astype(np.uint32),
            threshold=rec["threshold"].astype(np.float64),
            left=rec["left"].astype(np.int32),
            right=rec["right"].astype(np.int32),
            value=rec["dist"].astype(np.float64).reshape(n_nodes, num_classes),
        ))
        _check_tree(trees[-1], feature_dim)
    return RandomForest(tuple(trees), num_classes, feature_dim)


def _check_tree(tree: Tree, feature_dim: int) -> None:
    n = tree.n_nodes
    if n == 0:
        raise CorruptPayload("empty tree")
    internal = tree.left >= 0
    if np.any(tree.left >= n) or np.any(tree.right >= n) or np.any((tree.right >= 0) != internal):
        raise CorruptPayload("tree child index out of range")
    if np.any(tree.feature[internal] >= feature_dim):
        raise CorruptPayload("tree feature index out of range")


def decode_model(data: bytes) -> PipelineModel:
    if len(data) < _HEADER.size:
        if data[:4] != MAGIC[:len(data[:4])]:
            raise BadMagic("not a model file")
        raise CorruptPayload("truncated header")
    magic, version, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"model format version {version} is not supported")
    end = _HEADER.size + length
    if len(data) < end + _CRC.size:
        raise CorruptPayload("truncated payload")
    payload = data[_HEADER.size:end]
    (crc,) = _CRC.unpack_from(data, end)
    if crc != zlib.crc32(payload) & 0xFFFFFFFF:
        raise CorruptPayload("checksum mismatch")

    r = _Reader(payload)
    seg, s1, s2 = _read_forest(r), _read_forest(r), _read_forest(r)
    dim, m_hat, alpha = r.unpack("<IId")
    mean = r.f64(dim)
    eig = r.f64(dim)
    rot = r.f64(dim * dim).reshape(dim, dim)
    k, vdim = r.unpack("<II")
    centers = r.f64(k * vdim).reshape(k, vdim)
    beta, bg = r.unpack("<dd")
    (plen,) = r.unpack("<I")
    try:
        params = DetectionParams.from_dict(json.loads(r.take(plen).decode("utf-8")))
    except (ValueError, KeyError) as exc:
        raise CorruptPayload(f"bad parameter block: {exc}") from None
    if r.pos != len(payload):
        raise CorruptPayload("trailing bytes in payload")
    model = PipelineModel(seg, s1, s2, PcaModel(mean, eig, rot, m_hat, alpha), Vocabulary(centers),
                          beta, bg, params, version)
    try:
        model.validate()
    except InvalidModel as exc:
        raise CorruptPayload(str(exc)) from None
    return model


def load_model(source) -> PipelineModel:
    """Read a model from a path, bytes, or binary file object."""
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    elif hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    return decode_model(data)
