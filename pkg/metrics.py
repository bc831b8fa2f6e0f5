"""
Alignment scores, query classification, prototype classification and interpretability
traces of the two cycles, including similarity-map export.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from csvhandler import CSVHandler
from cycle import CycleConfig, CycleObjective, ObjectiveResult
from episode import EpisodeBundle, PatchCorpus, flatten_support
from errors import EmptyQuerySet, IoFailure, MissingClassSupport, NonPositiveTemperature
from linalg import DEFAULT_EPS, normalize_rows, row_argmax
from transform import ModelParams, adapt_globals, mlp_forward

logger = logging.getLogger(__name__)


@dataclass
class AlignmentReport:
    """
    Mean cosine alignment with the true-class text over the support set.

    Attributes:
        A_g (float): Adapted global features.
        A_l (float): Raw view-0 patch features.
        A_l_transformed (float): MLP-transformed view-0 patch features.
        per_class (dict): class index -> {"A_g", "A_l", "A_l_transformed"}.
    """

    A_g: float
    A_l: float
    A_l_transformed: float
    per_class: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def alignment_scores(bundle: EpisodeBundle, params: ModelParams, eps: float = DEFAULT_EPS) -> AlignmentReport:
    """
    Global and local alignment scores of the support set.

    Args:
        bundle (EpisodeBundle): Episode.
        params (ModelParams): Parameters (adapter for A_g, MLP for A_l_transformed).

    Returns:
        AlignmentReport
    """
    labels = bundle.support_labels
    own_text = bundle.text[labels]
    g = np.sum(adapt_globals(bundle.support_globals, params, eps) * own_text, axis=1)

    original = bundle.support_views[:, 0]
    local = np.einsum("smd,sd->sm", original, own_text)
    transformed, _ = mlp_forward(original.reshape(-1, bundle.d), params, eps)
    local_t = np.einsum("smd,sd->sm", transformed.reshape(original.shape), own_text)

    per_class = {}
    for j in np.unique(labels):
        rows = labels == j
        per_class[int(j)] = {
            "A_g": float(g[rows].mean()),
            "A_l": float(local[rows].mean()),
            "A_l_transformed": float(local_t[rows].mean()),
        }
    return AlignmentReport(float(g.mean()), float(local.mean()), float(local_t.mean()), per_class)


def classify(query_global, params: ModelParams, text: np.ndarray, tau_ce: float = 1.0) -> int:
    """
    Predict the class whose text is most similar to the adapted query global.

    A positive temperature does not change the argmax; it is accepted so the signature
    mirrors `ce_loss` and is only checked for sign.

    Raises:
        NonPositiveTemperature: If tau_ce <= 0 (a negative scale would invert the ranking).
    """
    if tau_ce <= 0:
        raise NonPositiveTemperature(f"tau_ce must be positive, got {tau_ce}")
    q = np.asarray(query_global, dtype=np.float64)
    q = q / np.linalg.norm(q)
    adapted = adapt_globals(q[None, :], params)
    return int(row_argmax(adapted @ text.T)[0])


def predict_queries(bundle: EpisodeBundle, params: ModelParams) -> np.ndarray:
    """Vectorized `classify` over every query of the bundle."""
    return row_argmax(adapt_globals(bundle.query_globals, params) @ bundle.text.T)


def episode_accuracy(bundle: EpisodeBundle, params: ModelParams, cfg: Optional[CycleConfig] = None) -> float:
    """
    Fraction of queries classified correctly.

    Args:
        bundle (EpisodeBundle): Episode with at least one query.
        params (ModelParams): Parameters (only the adapter is used).
        cfg (CycleConfig, optional): Accepted so callers can pass their objective
            configuration; the prediction is a temperature-free argmax and reads no field of it.

    Raises:
        EmptyQuerySet: If the bundle has no queries.
    """
    if bundle.n_query == 0:
        raise EmptyQuerySet("episode has no query samples")
    return float(np.mean(predict_queries(bundle, params) == bundle.query_labels))


def class_prototypes(bundle: EpisodeBundle, params: ModelParams) -> np.ndarray:
    """
    (C, d) normalized means of adapted support globals per class.

    Raises:
        MissingClassSupport: If some class has no support sample.
    """
    adapted = adapt_globals(bundle.support_globals, params)
    protos = []
    for j in range(bundle.C):
        rows = bundle.support_labels == j
        if not rows.any():
            raise MissingClassSupport(f"class {j} has no support samples")
        protos.append(adapted[rows].mean(axis=0))
    return normalize_rows(np.stack(protos))


def prototype_accuracy(bundle: EpisodeBundle, params: ModelParams) -> float:
    """Nearest-prototype (cosine) accuracy of the queries."""
    if bundle.n_query == 0:
        raise EmptyQuerySet("episode has no query samples")
    protos = class_prototypes(bundle, params)
    predicted = row_argmax(adapt_globals(bundle.query_globals, params) @ protos.T)
    return float(np.mean(predicted == bundle.query_labels))


@dataclass
class CycleTrace:
    """Recorded selections of the T-I-T and I-T-I cycles."""

    tit: list = field(default_factory=list)
    iti: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"tit": self.tit, "iti": self.iti}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CycleTrace":
        data = json.loads(text)
        return cls(data.get("tit", []), data.get("iti", []))


def _location(corpus: PatchCorpus, i: int) -> dict:
    sample, view, patch = corpus.locate(int(i))
    return {"sample": sample, "view": view, "idx": patch}


def _tit_records(result: ObjectiveResult, corpus: PatchCorpus, text: np.ndarray) -> list:
    records = []
    recon = row_argmax(result.reverse)
    for j, i in enumerate(result.selections.tit):
        r = int(recon[j])
        records.append(
            {
                "class": j,
                "patch": _location(corpus, i),
                "flat": int(i),
                "sim": float(result.similarity[j, i]),
                "recon_class": r,
                "recon_sim": float(result.reverse[j, r]),
                "cycle_sim": float(text[j] @ text[r]),
                "soft_cycle_sim": float(result.soft_similarity[j]),
            }
        )
    return records


def _iti_records(result: ObjectiveResult, corpus: PatchCorpus, text: np.ndarray) -> list:
    sel = result.selections
    records = []
    for v, n in enumerate(sel.anchors.indices):
        mid = int(sel.mid[v])
        records.append(
            {
                "anchor": _location(corpus, n),
                "flat": int(n),
                "mid_class": mid,
                "mid_sim": float(result.features[n] @ text[mid]),
                "retrieved": _location(corpus, sel.retrieved[v]),
                "retrieved_flat": int(sel.retrieved[v]),
                "sim": float(result.retrieved_similarity[v]),
            }
        )
    return records


def cycle_trace(bundle: EpisodeBundle, params: ModelParams, cfg: CycleConfig) -> tuple:
    """
    Both traces from a single objective evaluation.

    Returns:
        tuple: (CycleTrace, ObjectiveResult)
    """
    objective = CycleObjective(bundle, cfg)
    result = objective.evaluate(params)
    trace = CycleTrace(
        _tit_records(result, objective.corpus, bundle.text),
        _iti_records(result, objective.corpus, bundle.text),
    )
    return trace, result


def tit_trace(bundle: EpisodeBundle, params: ModelParams, cfg: CycleConfig) -> CycleTrace:
    """Per class: selected patch, its similarity, and the reconstructed class."""
    trace, _ = cycle_trace(bundle, params, cfg)
    return CycleTrace(tit=trace.tit)


def iti_trace(bundle: EpisodeBundle, params: ModelParams, cfg: CycleConfig) -> CycleTrace:
    """Per anchor: intermediary class, retrieved patch and cosine(anchor, retrieved)."""
    trace, _ = cycle_trace(bundle, params, cfg)
    return CycleTrace(iti=trace.iti)


def losses_from_trace(trace: CycleTrace, tit_mode: str = "soft") -> dict:
    """Recompute the cycle losses and hard cycle rate from recorded selections."""
    out = {}
    if trace.tit:
        key = "soft_cycle_sim" if tit_mode == "soft" else "cycle_sim"
        out["cyc_txt"] = 1.0 - float(np.mean([r[key] for r in trace.tit]))
        out["hard_cycle_rate"] = float(np.mean([r["recon_class"] == r["class"] for r in trace.tit]))
    if trace.iti:
        out["cyc_img"] = 1.0 - float(np.mean([r["sim"] for r in trace.iti]))
    return out


def patch_grid(M: int) -> tuple:
    """(rows, cols) layout of M patches: square when possible, else one row."""
    side = int(round(np.sqrt(M)))
    return (side, side) if side * side == M else (1, M)


def encode_pgm(values: np.ndarray, shape: tuple) -> bytes:
    """Binary greyscale PGM (P5, maxval 255) of similarities in [-1, 1]."""
    levels = np.clip(np.round(255.0 * (np.asarray(values, dtype=np.float64) + 1.0) / 2.0), 0, 255).astype(np.uint8)
    rows, cols = shape
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + levels.reshape(rows, cols).tobytes()


def _write_artifact(path: str, payload) -> None:
    """Write str or bytes to `path`, logging and raising IoFailure on failure."""
    mode, encoding = ("wb", None) if isinstance(payload, bytes) else ("w", "utf-8")
    try:
        with open(path, mode, encoding=encoding) as f:
            f.write(payload)
    except OSError as e:
        logger.error(f"Error writing {path}: {e}")
        raise IoFailure(f"cannot write {path}: {e}") from e


def export_trace(
    bundle: EpisodeBundle, params: ModelParams, cfg: CycleConfig, out_dir: str, pgm: bool = False
) -> dict:
    """
    Write trace.json, one similarity map per (class, support sample) and anchors.json.

    Similarity maps hold D[j, i] over the view-0 patches of each support sample, computed
    on the transformed corpus.

    Returns:
        dict: Summary with written file counts.
    """
    assert isinstance(out_dir, str), "out_dir must be a string."
    trace, result = cycle_trace(bundle, params, cfg)
    corpus = flatten_support(bundle)
    simmap_dir = os.path.join(out_dir, "simmaps")
    try:
        os.makedirs(simmap_dir, exist_ok=True)
    except OSError as e:
        logger.error(f"Error creating trace directory {simmap_dir}: {e}")
        raise IoFailure(f"cannot create {simmap_dir}: {e}") from e
    _write_artifact(os.path.join(out_dir, "trace.json"), trace.to_json())

    shape = patch_grid(bundle.M)
    n_maps = 0
    for j in range(bundle.C):
        for s in range(bundle.n_support):
            cols = corpus.original_range(s)
            values = result.similarity[j, cols.start : cols.stop]
            rows_idx, cols_idx = np.unravel_index(np.arange(bundle.M), shape)
            df = pd.DataFrame({"patch": np.arange(bundle.M), "row": rows_idx, "col": cols_idx, "similarity": values})
            stem = os.path.join(simmap_dir, f"class{j}_sample{s}")
            CSVHandler(stem + ".csv").save_csv(df)
            if pgm:
                _write_artifact(stem + ".pgm", encode_pgm(values, shape))
            n_maps += 1

    overlay = anchor_overlay(result, corpus, cfg.k)
    _write_artifact(os.path.join(out_dir, "anchors.json"), json.dumps(overlay, indent=2, sort_keys=True))
    logger.info(f"Wrote trace, {n_maps} similarity maps and anchor overlay to {out_dir}")
    return {"simmaps": n_maps, "tit": len(trace.tit), "iti": len(trace.iti), "V": result.breakdown.V}


def anchor_overlay(result: ObjectiveResult, corpus: PatchCorpus, k: int) -> dict:
    """
    Anchor positions grouped by support sample.

    Each sample lists its per-class top-k view-0 proposals and every anchor located in
    any of its views with the classes that proposed it.
    """
    anchors = result.selections.anchors
    provenance = anchors.provenance
    samples = []
    for s in range(corpus.n_support):
        top = {}
        if anchors.topk is not None:
            b = s * corpus.n_views
            for j in range(anchors.topk.shape[0]):
                top[str(j)] = [int(p) for p in anchors.topk[j, b]]
        members = []
        for i in anchors.indices[corpus.sample_of[anchors.indices] == s]:
            _, view, patch = corpus.locate(int(i))
            members.append(
                {"flat": int(i), "view": view, "patch": patch, "classes": sorted({j for _, j in provenance[int(i)]})}
            )
        samples.append({"sample": s, "topk_original_view": top, "anchors": members})
    return {"k": k, "V": anchors.V, "samples": samples}


def evaluation_report(bundle: EpisodeBundle, params: ModelParams, prototype: bool = False) -> dict:
    """Accuracy plus alignment scores as a JSON-ready dict."""
    report = alignment_scores(bundle, params)
    out = {
        "accuracy": episode_accuracy(bundle, params),
        "A_g": report.A_g,
        "A_l": report.A_l,
        "A_l_transformed": report.A_l_transformed,
        "per_class": {str(j): v for j, v in report.per_class.items()},
    }
    if prototype:
        out["prototype_accuracy"] = prototype_accuracy(bundle, params)
    return out
