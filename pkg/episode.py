"""
Episode bundles of precomputed embeddings and the CCFB binary format.

A bundle holds one K-way N-shot episode: class text features, support samples with
(A+1) patch views each (view 0 is the original image) and query samples with their
original view only. Feature payloads are kept exactly as stored (float32) so a
load/save round trip is byte-identical, and unit-normalized float64 copies are built
at construction for all computation.
"""
import json
import logging
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from errors import (
    BadMagic,
    DimensionMismatch,
    IoFailure,
    MalformedMetadata,
    NonFiniteValue,
    UnsupportedVersion,
)
from linalg import DEFAULT_EPS, normalize_rows

MAGIC = b"CCFB"
VERSION = 1
_HEADER = struct.Struct("<4s7I")
_U32 = struct.Struct("<I")

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SampleEmbedding:
    """One support image: label, global feature (d,) and patch views (A+1, M, d)."""

    label: int
    global_feature: np.ndarray
    views: np.ndarray


@dataclass(frozen=True)
class QuerySample:
    """One query image: label, global feature (d,) and original-view patches (M, d)."""

    label: int
    global_feature: np.ndarray
    patches: np.ndarray


def _normalize_block(arr: np.ndarray, eps: float, validate: bool) -> np.ndarray:
    flat = np.asarray(arr, dtype=np.float64).reshape(-1, arr.shape[-1])
    if flat.shape[0] == 0:
        return flat.reshape(arr.shape)
    if validate:
        return normalize_rows(flat, eps).reshape(arr.shape)
    norms = np.maximum(np.linalg.norm(flat, axis=1), eps)
    return (flat / norms[:, None]).reshape(arr.shape)


class EpisodeBundle:
    """
    A K-way N-shot episode of precomputed embeddings.

    Attributes:
        text_raw, support_globals_raw, support_views_raw, query_globals_raw,
        query_patches_raw (np.ndarray): float32 payloads exactly as stored.
        text (np.ndarray): (C, d) normalized float64 class text features.
        support_labels (np.ndarray): (|S|,) labels.
        support_globals (np.ndarray): (|S|, d) normalized global features.
        support_views (np.ndarray): (|S|, A+1, M, d) normalized patch features.
        query_labels (np.ndarray): (Q,) labels.
        query_globals (np.ndarray): (Q, d) normalized global features.
        query_patches (np.ndarray): (Q, M, d) normalized patch features.
        metadata (dict): JSON-serializable metadata (class names, provenance, planted positions).
    """

    def __init__(
        self,
        text,
        support_labels,
        support_globals,
        support_views,
        query_labels=None,
        query_globals=None,
        query_patches=None,
        metadata: Optional[dict] = None,
        eps: float = DEFAULT_EPS,
        validate: bool = True,
    ) -> None:
        """
        Build and validate a bundle.

        Args:
            text: (C, d) class text features.
            support_labels: (|S|,) integer labels in [0, C).
            support_globals: (|S|, d) global features.
            support_views: (|S|, A+1, M, d) patch features, view 0 = original image.
            query_labels: (Q,) labels, may be empty.
            query_globals: (Q, d) global features.
            query_patches: (Q, M, d) original-view patch features.
            metadata (dict, optional): Free-form JSON metadata.
            eps (float): Smallest accepted feature norm.
            validate (bool): Run every check; only disable to build deliberately broken fixtures.

        Raises:
            DimensionMismatch, NonFiniteValue, NearZeroNorm, MalformedMetadata
        """
        self.text_raw = np.ascontiguousarray(text, dtype="<f4")
        self.support_globals_raw = np.ascontiguousarray(support_globals, dtype="<f4")
        self.support_views_raw = np.ascontiguousarray(support_views, dtype="<f4")
        self.support_labels = np.asarray(support_labels, dtype=np.int64).reshape(-1)

        if self.text_raw.ndim != 2 or self.support_views_raw.ndim != 4:
            raise DimensionMismatch("text must be (C, d) and support views (|S|, A+1, M, d)")
        n_classes, d = self.text_raw.shape
        n_support, n_views, n_patches, _ = self.support_views_raw.shape

        if query_labels is None:
            query_labels = np.zeros(0, dtype=np.int64)
            query_globals = np.zeros((0, d), dtype="<f4")
            query_patches = np.zeros((0, n_patches, d), dtype="<f4")
        self.query_labels = np.asarray(query_labels, dtype=np.int64).reshape(-1)
        self.query_globals_raw = np.ascontiguousarray(query_globals, dtype="<f4").reshape(-1, d)
        self.query_patches_raw = np.ascontiguousarray(query_patches, dtype="<f4").reshape(-1, n_patches, d)
        if metadata is not None and not isinstance(metadata, dict):
            raise MalformedMetadata(f"metadata must be a JSON object, got {type(metadata).__name__}")
        self.metadata = dict(metadata or {})
        self.eps = eps

        self._check_shapes(n_classes, d, n_support, n_views, n_patches)
        if validate:
            self.check_finite()
            if n_support == 0:
                raise DimensionMismatch("support set must not be empty")
            labels = np.concatenate([self.support_labels, self.query_labels])
            if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
                raise DimensionMismatch(f"labels must lie in [0, {n_classes})")

        self.text = _normalize_block(self.text_raw, eps, validate)
        self.support_globals = _normalize_block(self.support_globals_raw, eps, validate)
        self.support_views = _normalize_block(self.support_views_raw, eps, validate)
        self.query_globals = _normalize_block(self.query_globals_raw, eps, validate)
        self.query_patches = _normalize_block(self.query_patches_raw, eps, validate)

    def _check_shapes(self, n_classes: int, d: int, n_support: int, n_views: int, n_patches: int) -> None:
        if n_classes < 1 or d < 1 or n_views < 1 or n_patches < 1:
            raise DimensionMismatch("C, d, A+1 and M must all be at least 1")
        if self.support_globals_raw.shape != (n_support, d):
            raise DimensionMismatch(f"support globals shape {self.support_globals_raw.shape} != {(n_support, d)}")
        if self.support_views_raw.shape[-1] != d:
            raise DimensionMismatch("support views dimension does not match text dimension")
        if self.support_labels.shape[0] != n_support:
            raise DimensionMismatch("one label per support sample is required")
        n_query = self.query_labels.shape[0]
        if self.query_globals_raw.shape[0] != n_query or self.query_patches_raw.shape[0] != n_query:
            raise DimensionMismatch("query labels, globals and patches disagree in count")

    def check_finite(self) -> None:
        """Raise NonFiniteValue if any stored payload holds NaN or infinity."""
        for name in ("text_raw", "support_globals_raw", "support_views_raw", "query_globals_raw", "query_patches_raw"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteValue(f"{name} contains non-finite values")

    @classmethod
    def from_samples(
        cls,
        text,
        support: Sequence[SampleEmbedding],
        query: Sequence[QuerySample] = (),
        metadata: Optional[dict] = None,
        eps: float = DEFAULT_EPS,
    ) -> "EpisodeBundle":
        """Build a bundle from per-sample records."""
        assert len(support) > 0, "support must not be empty."
        text = np.asarray(text)
        d = text.shape[1]
        n_patches = np.asarray(support[0].views).shape[1]
        return cls(
            text=text,
            support_labels=[s.label for s in support],
            support_globals=np.stack([s.global_feature for s in support]),
            support_views=np.stack([s.views for s in support]),
            query_labels=[q.label for q in query],
            query_globals=np.stack([q.global_feature for q in query]) if query else np.zeros((0, d)),
            query_patches=np.stack([q.patches for q in query]) if query else np.zeros((0, n_patches, d)),
            metadata=metadata,
            eps=eps,
        )

    @property
    def C(self) -> int:
        return self.text_raw.shape[0]

    @property
    def d(self) -> int:
        return self.text_raw.shape[1]

    @property
    def M(self) -> int:
        return self.support_views_raw.shape[2]

    @property
    def A(self) -> int:
        return self.support_views_raw.shape[1] - 1

    @property
    def n_support(self) -> int:
        return self.support_views_raw.shape[0]

    @property
    def n_query(self) -> int:
        return self.query_labels.shape[0]

    @property
    def H(self) -> int:
        return self.n_support * (self.A + 1) * self.M

    @property
    def class_names(self) -> list:
        return list(self.metadata.get("class_names", [f"class_{j}" for j in range(self.C)]))

    def support_sample(self, i: int) -> SampleEmbedding:
        """Normalized view of support sample `i`."""
        return SampleEmbedding(int(self.support_labels[i]), self.support_globals[i], self.support_views[i])

    def with_support_order(self, order: Sequence[int]) -> "EpisodeBundle":
        """Return a copy whose support samples are reordered by `order`."""
        order = np.asarray(order, dtype=np.int64)
        assert sorted(order.tolist()) == list(range(self.n_support)), "order must be a permutation."
        metadata = json.loads(json.dumps(self.metadata))
        if "planted" in metadata:
            support_planted = metadata["planted"]["support"]
            metadata["planted"]["support"] = [support_planted[i] for i in order]
        return EpisodeBundle(
            self.text_raw,
            self.support_labels[order],
            self.support_globals_raw[order],
            self.support_views_raw[order],
            self.query_labels,
            self.query_globals_raw,
            self.query_patches_raw,
            metadata=metadata,
            eps=self.eps,
        )

    def __repr__(self) -> str:
        return (
            f"EpisodeBundle(C={self.C}, d={self.d}, M={self.M}, A={self.A}, "
            f"n_support={self.n_support}, n_query={self.n_query})"
        )


class PatchCorpus:
    """
    The flattened support patch matrix with its flat-index bookkeeping.

    Flat index i enumerates sample-major, then view (original first), then patch,
    so i = (sample * (A+1) + view) * M + patch. Image-view block b = sample * (A+1) + view
    owns columns [b*M, (b+1)*M).
    """

    def __init__(self, raw: np.ndarray, n_support: int, n_views: int, n_patches: int) -> None:
        assert raw.shape[0] == n_support * n_views * n_patches, "raw row count must equal |S|(A+1)M."
        self.raw = raw
        self.n_support = n_support
        self.n_views = n_views
        self.M = n_patches
        flat = np.arange(raw.shape[0])
        self.sample_of, self.view_of, self.patch_of = np.unravel_index(flat, (n_support, n_views, n_patches))

    @property
    def H(self) -> int:
        return self.raw.shape[0]

    @property
    def n_blocks(self) -> int:
        return self.n_support * self.n_views

    @property
    def original_mask(self) -> np.ndarray:
        """Boolean mask of view-0 rows."""
        return self.view_of == 0

    def locate(self, i: int) -> tuple:
        """Flat index -> (sample, view, patch)."""
        assert 0 <= i < self.H, f"flat index {i} out of range."
        return int(self.sample_of[i]), int(self.view_of[i]), int(self.patch_of[i])

    def flat_index(self, sample: int, view: int, patch: int) -> int:
        """(sample, view, patch) -> flat index."""
        assert 0 <= sample < self.n_support and 0 <= view < self.n_views and 0 <= patch < self.M, "location out of range."
        return (sample * self.n_views + view) * self.M + patch

    def block_range(self, b: int) -> range:
        return range(b * self.M, (b + 1) * self.M)

    def sample_range(self, sample: int) -> range:
        start = sample * self.n_views * self.M
        return range(start, start + self.n_views * self.M)

    def original_range(self, sample: int) -> range:
        start = sample * self.n_views * self.M
        return range(start, start + self.M)


def flatten_support(bundle: EpisodeBundle) -> PatchCorpus:
    """
    Flatten the support views of a bundle into the H x d patch corpus.

    Args:
        bundle (EpisodeBundle): Source episode.

    Returns:
        PatchCorpus: Normalized patch matrix in canonical order plus index map.
    """
    raw = bundle.support_views.reshape(bundle.H, bundle.d)
    return PatchCorpus(raw, bundle.n_support, bundle.A + 1, bundle.M)


def _record_dtypes(d: int, n_views: int, n_patches: int) -> tuple:
    support = np.dtype([("label", "<u4"), ("global", "<f4", (d,)), ("views", "<f4", (n_views, n_patches, d))])
    query = np.dtype([("label", "<u4"), ("global", "<f4", (d,)), ("patches", "<f4", (n_patches, d))])
    return support, query


def encode_bundle(bundle: EpisodeBundle) -> bytes:
    """Serialize a bundle to CCFB bytes."""
    bundle.check_finite()
    n_views = bundle.A + 1
    support_dtype, query_dtype = _record_dtypes(bundle.d, n_views, bundle.M)

    support = np.zeros(bundle.n_support, dtype=support_dtype)
    support["label"] = bundle.support_labels
    support["global"] = bundle.support_globals_raw
    support["views"] = bundle.support_views_raw
    query = np.zeros(bundle.n_query, dtype=query_dtype)
    query["label"] = bundle.query_labels
    query["global"] = bundle.query_globals_raw
    query["patches"] = bundle.query_patches_raw

    meta = json.dumps(bundle.metadata, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    header = _HEADER.pack(MAGIC, VERSION, bundle.C, bundle.d, bundle.M, bundle.A, bundle.n_support, bundle.n_query)
    return b"".join(
        [header, bundle.text_raw.tobytes(), support.tobytes(), query.tobytes(), _U32.pack(len(meta)), meta]
    )


def decode_bundle(buf: bytes, eps: float = DEFAULT_EPS) -> EpisodeBundle:
    """
    Parse CCFB bytes into a validated bundle.

    Raises:
        BadMagic, UnsupportedVersion, DimensionMismatch, NonFiniteValue, NearZeroNorm, MalformedMetadata
    """
    if len(buf) < _HEADER.size:
        raise DimensionMismatch(f"file too short for header ({len(buf)} bytes)")
    magic, version, n_classes, d, n_patches, n_aug, n_support, n_query = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"CCFB version {version} is not supported")

    support_dtype, query_dtype = _record_dtypes(d, n_aug + 1, n_patches)
    offset = _HEADER.size
    text_size = n_classes * d * 4
    expected = offset + text_size + n_support * support_dtype.itemsize + n_query * query_dtype.itemsize + _U32.size
    if len(buf) < expected:
        raise DimensionMismatch(f"payload truncated: {len(buf)} bytes, header requires at least {expected}")

    text = np.frombuffer(buf, dtype="<f4", count=n_classes * d, offset=offset).reshape(n_classes, d)
    offset += text_size
    support = np.frombuffer(buf, dtype=support_dtype, count=n_support, offset=offset)
    offset += n_support * support_dtype.itemsize
    query = np.frombuffer(buf, dtype=query_dtype, count=n_query, offset=offset)
    offset += n_query * query_dtype.itemsize
    (meta_len,) = _U32.unpack_from(buf, offset)
    offset += _U32.size
    if len(buf) != offset + meta_len:
        raise DimensionMismatch(f"metadata length {meta_len} disagrees with remaining {len(buf) - offset} bytes")
    try:
        metadata = json.loads(buf[offset:].decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, ValueError) as e:
        raise MalformedMetadata(f"metadata block is not UTF-8 JSON: {e}") from e
    if not isinstance(metadata, dict):
        raise MalformedMetadata(f"metadata block must hold a JSON object, got {type(metadata).__name__}")

    return EpisodeBundle(
        text=text.copy(),
        support_labels=support["label"].astype(np.int64),
        support_globals=support["global"].copy(),
        support_views=support["views"].copy(),
        query_labels=query["label"].astype(np.int64),
        query_globals=query["global"].copy(),
        query_patches=query["patches"].copy(),
        metadata=metadata,
        eps=eps,
    )


def load_bundle(path: str, eps: float = DEFAULT_EPS) -> EpisodeBundle:
    """
    Load and validate a CCFB bundle file.

    Args:
        path (str): Bundle file path.
        eps (float): Smallest accepted feature norm.

    Returns:
        EpisodeBundle: Validated bundle with normalized features.
    """
    assert isinstance(path, str), "path must be a string."
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        logger.error(f"Error reading bundle file {path}: {e}")
        raise IoFailure(f"cannot read {path}: {e}") from e
    bundle = decode_bundle(buf, eps)
    logger.info(f"Loaded {bundle} from {path}")
    return bundle


def save_bundle(bundle: EpisodeBundle, path: str) -> None:
    """
    Write a bundle in CCFB format; output bytes depend only on the bundle.

    Raises:
        NonFiniteValue: If any payload is non-finite.
        IoFailure: If the file cannot be written.
    """
    assert isinstance(bundle, EpisodeBundle), "bundle must be an EpisodeBundle."
    assert isinstance(path, str), "path must be a string."
    data = encode_bundle(bundle)
    try:
        with open(path, "wb") as f:
            f.write(data)
    except OSError as e:
        logger.error(f"Error writing bundle file {path}: {e}")
        raise IoFailure(f"cannot write {path}: {e}") from e
    logger.info(f"Saved {bundle} to {path} ({len(data)} bytes)")
