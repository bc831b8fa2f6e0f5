"""
Synthetic episode generator with planted class-signal patches.

Every image gets `signal_patches_per_image` patches that point (noisily) at its class
text direction; the remaining patches are isotropic noise. Planted positions are
written to the bundle metadata under "planted" so anchor selection can be scored.
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np

from episode import EpisodeBundle
from errors import SpecInfeasible

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthSpec:
    """
    Parameters of a synthetic episode.

    Attributes:
        C (int): Number of classes (the K of a K-way task).
        d (int): Embedding dimension.
        M (int): Patches per view.
        A (int): Augmented views per support image.
        N_support (int): Support shots per class.
        N_query (int): Query samples per class.
        signal_patches_per_image (int): Planted signal patches per image, < M.
        signal_strength (float): Weight of the class direction in a signal patch, in (0, 1].
        noise_sigma (float): Expected norm of the noise added to a signal patch.
        distractor_overlap (float): Cosine between distinct class text directions, in [0, 1).
        view_jitter_sigma (float): Expected norm of the per-patch jitter creating augmented views.
        seed (int): RNG seed.
    """

    C: int = 5
    d: int = 64
    M: int = 16
    A: int = 2
    N_support: int = 5
    N_query: int = 15
    signal_patches_per_image: int = 2
    signal_strength: float = 0.8
    noise_sigma: float = 0.5
    distractor_overlap: float = 0.3
    view_jitter_sigma: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        """Raise SpecInfeasible if the spec cannot be realised."""
        if min(self.C, self.d, self.M, self.N_support) < 1 or self.A < 0 or self.N_query < 0:
            raise SpecInfeasible("C, d, M, N_support must be >= 1 and A, N_query >= 0")
        if not 0 <= self.signal_patches_per_image < self.M:
            raise SpecInfeasible(f"signal patches ({self.signal_patches_per_image}) must be in [0, M={self.M})")
        if not 0 < self.signal_strength <= 1:
            raise SpecInfeasible("signal_strength must lie in (0, 1]")
        if self.noise_sigma < 0 or self.view_jitter_sigma < 0:
            raise SpecInfeasible("noise and jitter sigmas must be non-negative")
        if not 0 <= self.distractor_overlap < 1:
            raise SpecInfeasible("distractor_overlap must lie in [0, 1)")
        if self.C > self.d:
            raise SpecInfeasible(f"cannot build {self.C} class directions in {self.d} dimensions")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def class_directions(C: int, d: int, overlap: float, rng: np.random.Generator) -> np.ndarray:
    """
    Unit vectors with pairwise cosine `overlap`.

    The Gram matrix (1 - overlap) I + overlap 11^T is factored and mapped onto a
    random orthonormal frame of R^d.
    """
    gram = (1.0 - overlap) * np.eye(C) + overlap * np.ones((C, C))
    coeffs = np.linalg.cholesky(gram)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return _unit_rows(coeffs @ q.T[:C])


class SyntheticEpisodeGenerator:
    """Draws images with planted signal patches for a fixed SynthSpec."""

    def __init__(self, spec: SynthSpec) -> None:
        assert isinstance(spec, SynthSpec), "spec must be a SynthSpec."
        spec.validate()
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.text = class_directions(spec.C, spec.d, spec.distractor_overlap, self.rng)

    def _noise(self, shape: tuple, sigma: float) -> np.ndarray:
        return sigma * self.rng.standard_normal(shape) / np.sqrt(self.spec.d)

    def draw_image(self, label: int) -> tuple:
        """
        Draw the original view of one image.

        Returns:
            tuple: (patches (M, d), global (d,), planted positions list)
        """
        spec = self.spec
        planted = np.sort(self.rng.choice(spec.M, size=spec.signal_patches_per_image, replace=False))
        patches = _unit_rows(self.rng.standard_normal((spec.M, spec.d)))
        if planted.size:
            signal = spec.signal_strength * self.text[label] + self._noise((planted.size, spec.d), spec.noise_sigma)
            patches[planted] = _unit_rows(signal)
        global_feature = patches.mean(axis=0)
        global_feature /= np.linalg.norm(global_feature)
        return patches, global_feature, planted.tolist()

    def augment(self, patches: np.ndarray) -> np.ndarray:
        """Stack the original view with A jittered copies -> (A+1, M, d)."""
        views = [patches]
        for _ in range(self.spec.A):
            views.append(_unit_rows(patches + self._noise(patches.shape, self.spec.view_jitter_sigma)))
        return np.stack(views)

    def generate(self) -> EpisodeBundle:
        spec = self.spec
        support_labels = np.repeat(np.arange(spec.C), spec.N_support)
        query_labels = np.repeat(np.arange(spec.C), spec.N_query)

        support_globals, support_views, support_planted = [], [], []
        for label in support_labels:
            patches, global_feature, planted = self.draw_image(int(label))
            support_globals.append(global_feature)
            support_views.append(self.augment(patches))
            support_planted.append(planted)

        query_globals, query_patches, query_planted = [], [], []
        for label in query_labels:
            patches, global_feature, planted = self.draw_image(int(label))
            query_globals.append(global_feature)
            query_patches.append(patches)
            query_planted.append(planted)

        metadata = {
            "class_names": [f"class_{j}" for j in range(spec.C)],
            "planted": {"support": support_planted, "query": query_planted},
            "provenance": {"generator": "synthetic", "spec": asdict(spec)},
        }
        return EpisodeBundle(
            text=self.text,
            support_labels=support_labels,
            support_globals=np.stack(support_globals),
            support_views=np.stack(support_views),
            query_labels=query_labels,
            query_globals=np.stack(query_globals) if len(query_globals) else np.zeros((0, spec.d)),
            query_patches=np.stack(query_patches) if len(query_patches) else np.zeros((0, spec.M, spec.d)),
            metadata=metadata,
        )


def gen_synthetic(spec: SynthSpec) -> EpisodeBundle:
    """
    Generate a reproducible synthetic episode.

    Args:
        spec (SynthSpec): Generator parameters.

    Returns:
        EpisodeBundle: Bundle with planted positions under metadata["planted"].

    Raises:
        SpecInfeasible: If the dimensions cannot hold the requested episode.
    """
    bundle = SyntheticEpisodeGenerator(spec).generate()
    logger.info(
        f"Generated synthetic {bundle} with {spec.signal_patches_per_image} planted patches per image (seed {spec.seed})"
    )
    return bundle


def planted_support_mask(bundle: EpisodeBundle) -> np.ndarray:
    """
    Boolean (H,) mask of corpus rows that are planted signal patches (all views).

    Raises:
        KeyError: If the bundle carries no planted metadata.
    """
    planted = bundle.metadata["planted"]["support"]
    mask = np.zeros((bundle.n_support, bundle.A + 1, bundle.M), dtype=bool)
    for sample, positions in enumerate(planted):
        mask[sample, :, positions] = True
    return mask.reshape(-1)
