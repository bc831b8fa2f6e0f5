"""
Cycle-consistency objective.

Text-to-image-to-text (T-I-T) cycle, Semantic Anchor shrinking, image-to-text-to-image
(I-T-I) cycle with three retrieval scopes, cross-entropy on adapted globals, and the
total objective with its exact gradient. Selections (argmax, top-k, anchor membership)
are constants of the gradient; it flows through the similarities of the selected pairs.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from episode import EpisodeBundle, PatchCorpus, flatten_support
from errors import ConfigError, EmptyAnchorSet
from linalg import DEFAULT_EPS, cosine_sim_matrix, normalize_backward, row_argmax, softmax
from transform import GlobalAdapter, GradBundle, ModelParams, PatchMLP

RETRIEVAL_MODES = ("cross_view", "intra_image", "all_images")
TIT_MODES = ("soft", "hard_metric_only")

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CycleConfig:
    """
    Objective hyperparameters.

    Attributes:
        lambda1 (float): Weight of the T-I-T loss.
        lambda2 (float): Weight of the I-T-I loss.
        k (int): Per image-view, per class top-k budget of the shrinking phase.
        tau_ce (float): Temperature of the classification softmax.
        tau_soft (float): Temperature of the soft T-I-T reconstruction.
        retrieval (str): I-T-I search scope, one of RETRIEVAL_MODES.
        tit_mode (str): "soft" trains on the soft reconstruction, "hard_metric_only"
            uses the argmax reconstruction (no gradient).
        semantic_anchor (bool): False skips augmentation and shrinking (ablation).
        eps (float): Normalization floor.
    """

    lambda1: float = 3.0
    lambda2: float = 2.0
    k: int = 10
    tau_ce: float = 0.01
    tau_soft: float = 0.07
    retrieval: str = "cross_view"
    tit_mode: str = "soft"
    semantic_anchor: bool = True
    eps: float = DEFAULT_EPS

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be non-negative")
        if not isinstance(self.k, (int, np.integer)) or self.k < 1:
            raise ConfigError("k must be a positive integer")
        if not (self.tau_ce > 0 and self.tau_soft > 0):
            raise ConfigError("temperatures must be positive")
        if self.retrieval not in RETRIEVAL_MODES:
            raise ConfigError(f"retrieval must be one of {RETRIEVAL_MODES}, got {self.retrieval!r}")
        if self.tit_mode not in TIT_MODES:
            raise ConfigError(f"tit_mode must be one of {TIT_MODES}, got {self.tit_mode!r}")


@dataclass
class AnchorSet:
    """
    Patches surviving the shrinking phase.

    Attributes:
        indices (np.ndarray): Sorted unique flat corpus indices.
        topk (np.ndarray | None): (C, n_blocks, k') local top-k positions per class and
            image-view block, None when anchors were not produced by shrinking.
        M (int): Patches per block.
    """

    indices: np.ndarray
    topk: Optional[np.ndarray] = None
    M: int = 0

    @property
    def V(self) -> int:
        return int(self.indices.shape[0])

    @property
    def provenance(self) -> dict:
        """Flat index -> list of (image-view block b, class j) whose top-k contained it."""
        prov = {int(i): [] for i in self.indices}
        if self.topk is None:
            return prov
        n_classes, n_blocks, _ = self.topk.shape
        for b in range(n_blocks):
            for j in range(n_classes):
                for local in self.topk[j, b]:
                    prov[b * self.M + int(local)].append((b, j))
        return prov


@dataclass
class LossBreakdown:
    """Loss components and diagnostics of one objective evaluation."""

    ce: float
    cyc_txt: float
    cyc_img: float
    total: float
    hard_cycle_rate: float
    V: int
    cyc_txt_hard: float = 0.0
    dead_rows: int = 0

    def as_dict(self) -> dict:
        return {
            "ce": self.ce,
            "cyc_txt": self.cyc_txt,
            "cyc_img": self.cyc_img,
            "total": self.total,
            "hard_cycle_rate": self.hard_cycle_rate,
            "V": self.V,
            "cyc_txt_hard": self.cyc_txt_hard,
            "dead_rows": self.dead_rows,
        }

    def is_finite(self) -> bool:
        return all(np.isfinite([self.ce, self.cyc_txt, self.cyc_img, self.total]))


@dataclass
class Selections:
    """Every discrete choice of one evaluation; freezing them makes the objective smooth."""

    tit: np.ndarray
    anchors: AnchorSet
    mid: np.ndarray
    retrieved: np.ndarray


@dataclass
class ObjectiveResult:
    """Breakdown, selections and intermediate values of one evaluation."""

    breakdown: LossBreakdown
    selections: Selections
    features: np.ndarray
    similarity: np.ndarray
    reverse: np.ndarray
    soft_similarity: np.ndarray
    retrieved_similarity: np.ndarray
    grads: Optional[GradBundle] = None
    grad_parts: dict = field(default_factory=dict)


def tit_similarity(text: np.ndarray, corpus: np.ndarray) -> np.ndarray:
    """D[j, i] = T_j . L_i for row-normalized text (C, d) and corpus (H, d)."""
    return cosine_sim_matrix(text, corpus)


def tit_select(D: np.ndarray, candidates: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Most similar corpus row per class, searched over the whole corpus.

    Args:
        D (np.ndarray): (C, H) text-to-patch similarities.
        candidates (np.ndarray, optional): (H,) bool mask restricting the search.

    Returns:
        np.ndarray: (C,) flat indices, lowest index on ties.
    """
    if candidates is not None:
        D = np.where(candidates[None, :], D, -np.inf)
    return row_argmax(D)


def _soft_reconstruction(text: np.ndarray, E: np.ndarray, tau_soft: float, eps: float) -> tuple:
    P = softmax(E, tau_soft)
    R = P @ text
    norm = np.linalg.norm(R, axis=1)
    degenerate = norm < eps
    if degenerate.any():
        logger.warning(f"{int(degenerate.sum())} soft reconstructions have near-zero norm")
    safe = np.where(degenerate, 1.0, norm)
    Rn = np.where(degenerate[:, None], 0.0, R / safe[:, None])
    return P, Rn, safe, degenerate


def tit_loss(text: np.ndarray, Lstar: np.ndarray, cfg: CycleConfig) -> tuple:
    """
    T-I-T cycle loss on the selected patches.

    Args:
        text (np.ndarray): (C, d) normalized text features.
        Lstar (np.ndarray): (C, d) patches selected by `tit_select`.
        cfg (CycleConfig): Supplies tit_mode and tau_soft.

    Returns:
        tuple: (loss, hard_rate)
    """
    E = Lstar @ text.T
    recon = row_argmax(E)
    n_classes = text.shape[0]
    hard_rate = float(np.mean(recon == np.arange(n_classes)))
    if cfg.tit_mode == "hard_metric_only":
        return 1.0 - float(np.mean(np.sum(text * text[recon], axis=1))), hard_rate
    _, Rn, _, _ = _soft_reconstruction(text, E, cfg.tau_soft, cfg.eps)
    return 1.0 - float(np.mean(np.sum(text * Rn, axis=1))), hard_rate


def anchor_select(D: np.ndarray, corpus: PatchCorpus, k: int) -> AnchorSet:
    """
    Semantic Anchor shrinking: per image-view block and class keep the top-k patches,
    then merge and deduplicate.

    Args:
        D (np.ndarray): (C, H) text-to-patch similarities.
        corpus (PatchCorpus): Supplies the block layout.
        k (int): Budget per (block, class).

    Returns:
        AnchorSet: Sorted unique anchors with provenance.
    """
    assert k >= 1, "k must be positive."
    n_classes = D.shape[0]
    blocks = D.reshape(n_classes, corpus.n_blocks, corpus.M)
    topk = np.argsort(-blocks, axis=2, kind="stable")[:, :, : min(k, corpus.M)]
    flat = topk + (np.arange(corpus.n_blocks) * corpus.M)[None, :, None]
    return AnchorSet(np.unique(flat), topk, corpus.M)


def original_view_anchors(corpus: PatchCorpus) -> AnchorSet:
    """Every view-0 patch as an anchor (shrinking phase disabled)."""
    return AnchorSet(np.flatnonzero(corpus.original_mask), None, corpus.M)


def retrieval_scope(corpus: PatchCorpus, anchors: np.ndarray, mode: str) -> np.ndarray:
    """
    (V, H) bool mask of the patches each anchor may retrieve.

    cross_view: all views of the anchor's sample; intra_image: view 0 of the anchor's
    sample; all_images: the whole corpus.
    """
    anchors = np.asarray(anchors, dtype=np.int64)
    if mode == "all_images":
        return np.ones((anchors.shape[0], corpus.H), dtype=bool)
    same_sample = corpus.sample_of[anchors][:, None] == corpus.sample_of[None, :]
    if mode == "cross_view":
        return same_sample
    if mode == "intra_image":
        return same_sample & corpus.original_mask[None, :]
    raise ConfigError(f"unknown retrieval mode {mode!r}")


def iti_retrieve_all(anchors: np.ndarray, text: np.ndarray, L: np.ndarray, corpus: PatchCorpus, mode: str) -> tuple:
    """
    Vectorized I-T-I retrieval.

    Returns:
        tuple: ((V,) intermediary classes, (V,) retrieved flat indices)
    """
    anchors = np.asarray(anchors, dtype=np.int64)
    mid = row_argmax(L[anchors] @ text.T)
    scores = text[mid] @ L.T
    scores = np.where(retrieval_scope(corpus, anchors, mode), scores, -np.inf)
    return mid, np.argmax(scores, axis=1)


def iti_retrieve(n: int, text: np.ndarray, L: np.ndarray, corpus: PatchCorpus, mode: str) -> int:
    """
    Retrieve the patch closest to the text feature nearest to anchor `n`.

    Args:
        n (int): Anchor flat index.
        text (np.ndarray): (C, d) text features.
        L (np.ndarray): (H, d) transformed corpus.
        corpus (PatchCorpus): Index map.
        mode (str): One of RETRIEVAL_MODES.

    Returns:
        int: Retrieved flat index m*.
    """
    _, retrieved = iti_retrieve_all(np.array([n]), text, L, corpus, mode)
    return int(retrieved[0])


def iti_loss(anchors: AnchorSet, L: np.ndarray, text: np.ndarray, corpus: PatchCorpus, mode: str) -> float:
    """
    I-T-I cycle loss 1 - mean_n x_n . x_hat_n.

    Raises:
        EmptyAnchorSet: If there are no anchors.
    """
    if anchors.V == 0:
        raise EmptyAnchorSet("I-T-I loss needs at least one anchor")
    _, retrieved = iti_retrieve_all(anchors.indices, text, L, corpus, mode)
    return 1.0 - float(np.mean(np.sum(L[anchors.indices] * L[retrieved], axis=1)))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def ce_loss(global_adapted, text: np.ndarray, label, tau_ce: float) -> float:
    """
    Cross-entropy of temperature-scaled cosine logits, averaged over samples.

    Args:
        global_adapted: (d,) or (n, d) normalized adapted globals.
        text (np.ndarray): (C, d) text features.
        label: Class index or (n,) labels.
        tau_ce (float): Temperature.
    """
    G = np.atleast_2d(np.asarray(global_adapted, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    logp = _log_softmax(G @ text.T / tau_ce)
    return float(-np.mean(logp[np.arange(G.shape[0]), labels]))


class CycleObjective:
    """
    The total objective L_CE + lambda1 L_cyc_txt + lambda2 L_cyc_img on one episode.

    Holds the episode-constant pieces (corpus, text, labels) so repeated evaluations
    during training only redo the parameter-dependent work.
    """

    def __init__(self, bundle: EpisodeBundle, cfg: CycleConfig) -> None:
        assert isinstance(bundle, EpisodeBundle), "bundle must be an EpisodeBundle."
        assert isinstance(cfg, CycleConfig), "cfg must be a CycleConfig."
        cfg.validate()
        self.bundle = bundle
        self.cfg = cfg
        self.corpus = flatten_support(bundle)
        self.text = bundle.text

    def select(self, L: np.ndarray, D: np.ndarray) -> Selections:
        """Compute every selection on the current transformed corpus."""
        cfg = self.cfg
        if cfg.semantic_anchor:
            tit = tit_select(D)
            anchors = anchor_select(D, self.corpus, cfg.k)
        else:
            tit = tit_select(D, self.corpus.original_mask)
            anchors = original_view_anchors(self.corpus)
        if anchors.V == 0:
            raise EmptyAnchorSet("shrinking phase selected no anchors")
        mid, retrieved = iti_retrieve_all(anchors.indices, self.text, L, self.corpus, cfg.retrieval)
        return Selections(tit, anchors, mid, retrieved)

    def evaluate(self, params: ModelParams, frozen: Optional[Selections] = None, need_grad: bool = False) -> ObjectiveResult:
        """
        Evaluate the objective.

        Args:
            params (ModelParams): Current parameters.
            frozen (Selections, optional): Reuse these selections instead of recomputing them.
            need_grad (bool): Also run the reverse pass.

        Returns:
            ObjectiveResult: Breakdown, selections, intermediates and (optionally) gradients.
        """
        cfg, text = self.cfg, self.text
        n_classes = text.shape[0]

        mlp = PatchMLP(params, cfg.eps)
        L = mlp.forward(self.corpus.raw)
        dead = mlp.memory[-1]
        D = tit_similarity(text, L)
        sel = frozen if frozen is not None else self.select(L, D)

        # T-I-T
        Lstar = L[sel.tit]
        E = Lstar @ text.T
        recon = row_argmax(E)
        hard_rate = float(np.mean(recon == np.arange(n_classes)))
        cyc_txt_hard = 1.0 - float(np.mean(np.sum(text * text[recon], axis=1)))
        P, Rn, R_norm, degenerate = _soft_reconstruction(text, E, cfg.tau_soft, cfg.eps)
        soft_sim = np.sum(text * Rn, axis=1)
        cyc_txt = 1.0 - float(np.mean(soft_sim)) if cfg.tit_mode == "soft" else cyc_txt_hard

        # I-T-I
        X = L[sel.anchors.indices]
        X_hat = L[sel.retrieved]
        retrieved_sim = np.sum(X * X_hat, axis=1)
        V = sel.anchors.V
        cyc_img = 1.0 - float(np.mean(retrieved_sim))

        # CE on adapted support globals
        adapter = GlobalAdapter(params, cfg.eps)
        G = adapter.forward(self.bundle.support_globals)
        logits = G @ text.T / cfg.tau_ce
        logp = _log_softmax(logits)
        labels = self.bundle.support_labels
        n_support = G.shape[0]
        ce = float(-np.mean(logp[np.arange(n_support), labels]))

        total = ce + cfg.lambda1 * cyc_txt + cfg.lambda2 * cyc_img
        breakdown = LossBreakdown(
            ce=ce,
            cyc_txt=cyc_txt,
            cyc_img=cyc_img,
            total=total,
            hard_cycle_rate=hard_rate,
            V=V,
            cyc_txt_hard=cyc_txt_hard,
            dead_rows=int(dead.sum()),
        )
        result = ObjectiveResult(breakdown, sel, L, D, E, soft_sim, retrieved_sim)
        if not need_grad:
            return result

        dW1_zero, dW2_zero = np.zeros_like(params.W1), np.zeros_like(params.W2)
        zero_a = np.zeros_like(params.Wa)

        # T-I-T backward (soft surrogate only; the hard loss is piecewise constant)
        if cfg.tit_mode == "soft":
            dRn = -text / n_classes
            dR = normalize_backward(Rn, R_norm, dRn)
            dR[degenerate] = 0.0
            dP = dR @ text.T
            dE = P * (dP - np.sum(P * dP, axis=1, keepdims=True)) / cfg.tau_soft
            dL_txt = np.zeros_like(L)
            np.add.at(dL_txt, sel.tit, dE @ text)
            txt = GradBundle(*mlp.backward(dL_txt), zero_a.copy())
        else:
            txt = GradBundle(dW1_zero.copy(), dW2_zero.copy(), zero_a.copy())

        # I-T-I backward
        dL_img = np.zeros_like(L)
        np.add.at(dL_img, sel.anchors.indices, -X_hat / V)
        np.add.at(dL_img, sel.retrieved, -X / V)
        img = GradBundle(*mlp.backward(dL_img), zero_a.copy())

        # CE backward
        onehot = np.zeros_like(logits)
        onehot[np.arange(n_support), labels] = 1.0
        dlogits = (np.exp(logp) - onehot) / n_support
        dG = dlogits @ text / cfg.tau_ce
        ce_grad = GradBundle(dW1_zero.copy(), dW2_zero.copy(), adapter.backward(dG))

        result.grad_parts = {"ce": ce_grad, "cyc_txt": txt, "cyc_img": img}
        result.grads = ce_grad + txt.scale(cfg.lambda1) + img.scale(cfg.lambda2)
        return result


def total_loss(bundle: EpisodeBundle, params: ModelParams, cfg: CycleConfig) -> LossBreakdown:
    """
    Evaluate the total objective on the support set.

    Returns:
        LossBreakdown: ce, cyc_txt, cyc_img, total and diagnostics.
    """
    return CycleObjective(bundle, cfg).evaluate(params).breakdown


def grad_total(
    bundle: EpisodeBundle, params: ModelParams, cfg: CycleConfig, frozen: Optional[Selections] = None
) -> tuple:
    """
    Exact gradient of the total objective with selections held constant.

    Args:
        bundle (EpisodeBundle): Episode.
        params (ModelParams): Parameters.
        cfg (CycleConfig): Objective configuration.
        frozen (Selections, optional): Selections to hold fixed; recomputed when None.

    Returns:
        tuple: (LossBreakdown, GradBundle)
    """
    result = CycleObjective(bundle, cfg).evaluate(params, frozen=frozen, need_grad=True)
    return result.breakdown, result.grads
