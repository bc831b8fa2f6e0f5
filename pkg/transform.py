"""
Trainable parameters: the two-layer patch MLP L = ReLU(L' W1) W2 and the residual
global adapter g -> normalize(g + g Wa), with hand-written reverse-mode passes and the
CCPM checkpoint format.
"""
import logging
import struct
from dataclasses import dataclass

import numpy as np

from errors import BadMagic, DimensionMismatch, IoFailure, NearZeroNorm, NonFiniteValue, UnsupportedVersion
from linalg import DEFAULT_EPS, as_matrix, normalize_backward

MAGIC = b"CCPM"
VERSION = 1
_HEADER = struct.Struct("<4s3I")

logger = logging.getLogger(__name__)


@dataclass
class ModelParams:
    """
    Trainable state.

    Attributes:
        W1 (np.ndarray): (d, h) first MLP layer.
        W2 (np.ndarray): (h, d) second MLP layer.
        Wa (np.ndarray): (d, d) residual global adapter.
    """

    W1: np.ndarray
    W2: np.ndarray
    Wa: np.ndarray

    def __post_init__(self) -> None:
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        self.Wa = np.asarray(self.Wa, dtype=np.float64)
        d, h = self.W1.shape
        if self.W2.shape != (h, d) or self.Wa.shape != (d, d):
            raise DimensionMismatch(f"inconsistent shapes W1{self.W1.shape} W2{self.W2.shape} Wa{self.Wa.shape}")
        for name in ("W1", "W2", "Wa"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteValue(f"{name} contains non-finite values")

    @property
    def d(self) -> int:
        return self.W1.shape[0]

    @property
    def h(self) -> int:
        return self.W1.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(self.W1.copy(), self.W2.copy(), self.Wa.copy())

    def as_dict(self) -> dict:
        return {"W1": self.W1, "W2": self.W2, "Wa": self.Wa}


@dataclass
class GradBundle:
    """Gradients matching ModelParams shapes."""

    dW1: np.ndarray
    dW2: np.ndarray
    dWa: np.ndarray

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "GradBundle":
        return cls(np.zeros_like(params.W1), np.zeros_like(params.W2), np.zeros_like(params.Wa))

    def __add__(self, other: "GradBundle") -> "GradBundle":
        return GradBundle(self.dW1 + other.dW1, self.dW2 + other.dW2, self.dWa + other.dWa)

    def scale(self, factor: float) -> "GradBundle":
        return GradBundle(factor * self.dW1, factor * self.dW2, factor * self.dWa)

    def as_dict(self) -> dict:
        return {"W1": self.dW1, "W2": self.dW2, "Wa": self.dWa}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in (self.dW1, self.dW2, self.dWa))


def init_params(d: int, h: int, seed: int) -> ModelParams:
    """
    Glorot-uniform MLP weights and a zero adapter.

    Args:
        d (int): Embedding dimension.
        h (int): Hidden width.
        seed (int): RNG seed.

    Returns:
        ModelParams: W1, W2 ~ U[-sqrt(6/(d+h)), +sqrt(6/(d+h))], Wa = 0.
    """
    assert isinstance(d, (int, np.integer)) and d >= 1, "d must be a positive integer."
    assert isinstance(h, (int, np.integer)) and h >= 1, "h must be a positive integer."
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (d + h))
    W1 = rng.uniform(-bound, bound, size=(d, h))
    W2 = rng.uniform(-bound, bound, size=(h, d))
    return ModelParams(W1, W2, np.zeros((d, d)))


class PatchMLP:
    """
    Forward/backward of the bias-free patch MLP followed by row normalization.

    Rows whose MLP output norm falls below eps are passed through as their
    (normalized) input row and flagged dead; they receive no gradient.
    """

    def __init__(self, params: ModelParams, eps: float = DEFAULT_EPS) -> None:
        self.params = params
        self.eps = eps
        self.memory = None

    def forward(self, raw: np.ndarray) -> np.ndarray:
        """
        Args:
            raw (np.ndarray): (H, d) normalized input patches.

        Returns:
            np.ndarray: (H, d) unit-norm transformed patches.
        """
        x = as_matrix(raw)
        if x.shape[1] != self.params.d:
            raise DimensionMismatch(f"corpus dimension {x.shape[1]} != params dimension {self.params.d}")
        z1 = x @ self.params.W1
        a1 = np.maximum(z1, 0.0)
        u = a1 @ self.params.W2
        norm = np.linalg.norm(u, axis=1)
        dead = norm < self.eps
        safe = np.where(dead, 1.0, norm)
        out = np.where(dead[:, None], x / np.linalg.norm(x, axis=1, keepdims=True), u / safe[:, None])
        if dead.any():
            logger.warning(f"{int(dead.sum())} of {x.shape[0]} MLP rows fell below eps and pass through")
        self.memory = (x, z1, a1, out, safe, dead)
        return out

    def backward(self, grad_out: np.ndarray) -> tuple:
        """
        Args:
            grad_out (np.ndarray): (H, d) gradient with respect to the forward output.

        Returns:
            tuple: (dW1, dW2)
        """
        assert self.memory is not None, "forward must run before backward."
        x, z1, a1, out, safe, dead = self.memory
        du = normalize_backward(out, safe, grad_out)
        du[dead] = 0.0
        dW2 = a1.T @ du
        da1 = du @ self.params.W2.T
        dz1 = da1 * (z1 > 0)
        dW1 = x.T @ dz1
        return dW1, dW2


def mlp_forward(corpus_raw: np.ndarray, params: ModelParams, eps: float = DEFAULT_EPS) -> tuple:
    """
    Transform patch features with the two-layer MLP.

    Args:
        corpus_raw (np.ndarray): (H, d) normalized patches.
        params (ModelParams): Current parameters.
        eps (float): Dead-row threshold.

    Returns:
        tuple: ((H, d) normalized output, (H,) bool mask of pass-through rows)
    """
    mlp = PatchMLP(params, eps)
    out = mlp.forward(corpus_raw)
    return out, mlp.memory[-1]


class GlobalAdapter:
    """Forward/backward of g -> normalize(g + g Wa) over a batch of globals."""

    def __init__(self, params: ModelParams, eps: float = DEFAULT_EPS) -> None:
        self.params = params
        self.eps = eps
        self.memory = None

    def forward(self, globals_: np.ndarray) -> np.ndarray:
        g = as_matrix(globals_)
        q = g + g @ self.params.Wa
        norm = np.linalg.norm(q, axis=1)
        bad = np.flatnonzero(norm < self.eps)
        if bad.size:
            raise NearZeroNorm(f"adapted global {int(bad[0])} has norm {norm[bad[0]]:.3e}")
        out = q / norm[:, None]
        self.memory = (g, out, norm)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Return dWa for the given gradient with respect to the adapted globals."""
        assert self.memory is not None, "forward must run before backward."
        g, out, norm = self.memory
        dq = normalize_backward(out, norm, grad_out)
        return g.T @ dq


def adapt_global(g, params: ModelParams, eps: float = DEFAULT_EPS) -> np.ndarray:
    """
    Apply the residual adapter to one normalized global feature.

    Raises:
        NearZeroNorm: If ||g + g Wa|| < eps.
    """
    return GlobalAdapter(params, eps).forward(np.asarray(g, dtype=np.float64)[None, :])[0]


def adapt_globals(globals_: np.ndarray, params: ModelParams, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Batched `adapt_global` over the rows of `globals_`."""
    return GlobalAdapter(params, eps).forward(globals_)


def encode_params(params: ModelParams) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, params.d, params.h)
    return b"".join(
        [header] + [np.ascontiguousarray(w, dtype="<f8").tobytes() for w in (params.W1, params.W2, params.Wa)]
    )


def decode_params(buf: bytes) -> ModelParams:
    """
    Parse CCPM bytes.

    Raises:
        BadMagic, UnsupportedVersion, DimensionMismatch, NonFiniteValue
    """
    if len(buf) < _HEADER.size:
        raise DimensionMismatch("checkpoint too short for header")
    magic, version, d, h = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"CCPM version {version} is not supported")
    expected = _HEADER.size + 8 * (2 * d * h + d * d)
    if len(buf) != expected:
        raise DimensionMismatch(f"checkpoint has {len(buf)} bytes, header requires {expected}")
    offset = _HEADER.size
    W1 = np.frombuffer(buf, dtype="<f8", count=d * h, offset=offset).reshape(d, h)
    offset += 8 * d * h
    W2 = np.frombuffer(buf, dtype="<f8", count=h * d, offset=offset).reshape(h, d)
    offset += 8 * h * d
    Wa = np.frombuffer(buf, dtype="<f8", count=d * d, offset=offset).reshape(d, d)
    return ModelParams(W1.copy(), W2.copy(), Wa.copy())


def save_params(params: ModelParams, path: str) -> None:
    """Write a CCPM checkpoint."""
    assert isinstance(path, str), "path must be a string."
    try:
        with open(path, "wb") as f:
            f.write(encode_params(params))
    except OSError as e:
        logger.error(f"Error writing checkpoint {path}: {e}")
        raise IoFailure(f"cannot write {path}: {e}") from e
    logger.info(f"Saved checkpoint (d={params.d}, h={params.h}) to {path}")


def load_params(path: str) -> ModelParams:
    """Read a CCPM checkpoint."""
    assert isinstance(path, str), "path must be a string."
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        logger.error(f"Error reading checkpoint {path}: {e}")
        raise IoFailure(f"cannot read {path}: {e}") from e
    params = decode_params(buf)
    logger.info(f"Loaded checkpoint (d={params.d}, h={params.h}) from {path}")
    return params
