"""
Per-episode optimisation of ModelParams and the seeded benchmark / grid-search harness.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from csvhandler import CSVHandler
from cycle import CycleConfig, CycleObjective
from episode import EpisodeBundle
from errors import ConfigError, DivergenceDetected
from metrics import alignment_scores, episode_accuracy
from synth import SynthSpec, gen_synthetic, planted_support_mask
from transform import ModelParams, init_params

HISTORY_COLUMNS = ["epoch", "ce", "cyc_txt", "cyc_img", "total", "hard_rate", "A_g", "A_l_transformed"]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimiser settings for one episode.

    Attributes:
        epochs (int): Full-batch gradient steps.
        lr (float): Learning rate.
        momentum (float): Heavy-ball momentum in [0, 1).
        cycle (CycleConfig): Objective configuration.
        A (int | None): Expected augmentation count; checked against the bundle when set.
        hidden (int | None): MLP hidden width, defaults to d.
        seed (int): Parameter initialisation seed.
        log_every (int): Epoch interval of INFO progress lines.
    """

    epochs: int = 100
    lr: float = 0.01
    momentum: float = 0.9
    cycle: CycleConfig = field(default_factory=CycleConfig)
    A: Optional[int] = None
    hidden: Optional[int] = None
    seed: int = 0
    log_every: int = 10

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.hidden is not None and self.hidden < 1:
            raise ConfigError("hidden width must be positive")
        if self.log_every < 1:
            raise ConfigError("log_every must be positive")
        self.cycle.validate()


class TrainHistory:
    """Per-epoch loss breakdowns and alignment diagnostics."""

    def __init__(self) -> None:
        self.records = []

    def append(self, epoch: int, breakdown, A_g: float, A_l_transformed: float) -> None:
        self.records.append(
            {
                "epoch": epoch,
                "ce": breakdown.ce,
                "cyc_txt": breakdown.cyc_txt,
                "cyc_img": breakdown.cyc_img,
                "total": breakdown.total,
                "hard_rate": breakdown.hard_cycle_rate,
                "A_g": A_g,
                "A_l_transformed": A_l_transformed,
                "V": breakdown.V,
            }
        )

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=HISTORY_COLUMNS)

    def save_csv(self, path: str) -> None:
        CSVHandler(path).save_csv(self.to_dataframe())


def train_episode(bundle: EpisodeBundle, cfg: TrainConfig, params: Optional[ModelParams] = None) -> tuple:
    """
    Full-batch gradient descent with momentum on the total objective.

    Selections and anchors are recomputed every epoch on the current transformed corpus.
    History entry e holds the objective at the parameters before step e.

    Args:
        bundle (EpisodeBundle): Episode (support set is the training data).
        cfg (TrainConfig): Optimiser and objective settings.
        params (ModelParams, optional): Starting point; freshly initialised when None.

    Returns:
        tuple: (ModelParams, TrainHistory)

    Raises:
        DivergenceDetected: On a non-finite loss, carrying the history so far.
    """
    assert isinstance(bundle, EpisodeBundle), "bundle must be an EpisodeBundle."
    assert isinstance(cfg, TrainConfig), "cfg must be a TrainConfig."
    cfg.validate()
    if cfg.A is not None and cfg.A != bundle.A:
        logger.warning(f"bundle has A={bundle.A} augmented views, configuration expects {cfg.A}")

    params = params.copy() if params is not None else init_params(bundle.d, cfg.hidden or bundle.d, cfg.seed)
    objective = CycleObjective(bundle, cfg.cycle)
    velocity = {name: np.zeros_like(w) for name, w in params.as_dict().items()}
    history = TrainHistory()

    for epoch in range(cfg.epochs):
        result = objective.evaluate(params, need_grad=True)
        breakdown = result.breakdown
        if not (breakdown.is_finite() and result.grads.is_finite()):
            logger.error(f"Non-finite objective at epoch {epoch}: {breakdown.as_dict()}")
            raise DivergenceDetected(f"non-finite loss at epoch {epoch}", history=history, params=params)
        report = alignment_scores(bundle, params)
        history.append(epoch, breakdown, report.A_g, report.A_l_transformed)
        if epoch % cfg.log_every == 0 or epoch == cfg.epochs - 1:
            logger.info(
                f"epoch {epoch}: total={breakdown.total:.5f} ce={breakdown.ce:.5f} "
                f"cyc_txt={breakdown.cyc_txt:.5f} cyc_img={breakdown.cyc_img:.5f} "
                f"hard_rate={breakdown.hard_cycle_rate:.2f} V={breakdown.V}"
            )

        grads = result.grads.as_dict()
        updated = {}
        for name, w in params.as_dict().items():
            velocity[name] = cfg.momentum * velocity[name] - cfg.lr * grads[name]
            updated[name] = w + velocity[name]
        if not all(np.all(np.isfinite(w)) for w in updated.values()):
            logger.error(f"Parameter update overflowed at epoch {epoch}")
            raise DivergenceDetected(f"non-finite parameters after epoch {epoch}", history=history, params=params)
        params = ModelParams(**updated) if cfg.lr > 0 else params

    return params, history


def anchor_quality(bundle: EpisodeBundle, params: ModelParams, cfg: CycleConfig) -> dict:
    """
    Overlap of the current anchors with planted signal patches.

    Returns:
        dict: anchor_recall = |planted & anchors| / |planted| and
        anchor_precision = |planted & anchors| / V.
    """
    planted = planted_support_mask(bundle)
    anchors = CycleObjective(bundle, cfg).evaluate(params).selections.anchors.indices
    hits = int(planted[anchors].sum())
    n_planted = int(planted.sum())
    return {
        "anchor_recall": hits / n_planted if n_planted else 0.0,
        "anchor_precision": hits / len(anchors) if len(anchors) else 0.0,
    }


def mean_ci(values: Sequence[float]) -> tuple:
    """Mean and 95% normal-approximation half-width (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        return float(arr.mean()), 0.0
    return float(arr.mean()), float(1.96 * arr.std(ddof=1) / np.sqrt(arr.size))


@dataclass
class BenchmarkSummary:
    """Per-episode rows and aggregate statistics of a benchmark run."""

    rows: pd.DataFrame
    stats: dict

    def table(self) -> str:
        lines = [f"{'metric':<28}{'mean':>10}{'±95% CI':>12}"]
        for name, (mean, ci) in self.stats.items():
            lines.append(f"{name:<28}{mean:>10.4f}{ci:>12.4f}")
        return "\n".join(lines)


def _episode_row(index: int, bundle: EpisodeBundle, cfg: TrainConfig, compare: bool) -> dict:
    episode_cfg = replace(cfg, seed=cfg.seed + index)
    params, _ = train_episode(bundle, episode_cfg)
    report = alignment_scores(bundle, params)
    row = {
        "episode": index,
        "accuracy": episode_accuracy(bundle, params),
        "A_l_transformed": report.A_l_transformed,
    }
    if "planted" in bundle.metadata:
        row.update(anchor_quality(bundle, params, cfg.cycle))
    if compare:
        baseline_cfg = replace(episode_cfg, cycle=replace(cfg.cycle, lambda1=0.0, lambda2=0.0))
        base_params, _ = train_episode(bundle, baseline_cfg)
        row["accuracy_ce_only"] = episode_accuracy(bundle, base_params)
        row["A_l_transformed_ce_only"] = alignment_scores(bundle, base_params).A_l_transformed
        row["accuracy_delta"] = row["accuracy"] - row["accuracy_ce_only"]
        row["A_l_transformed_delta"] = row["A_l_transformed"] - row["A_l_transformed_ce_only"]
    return row


def run_benchmark(
    source,
    cfg: TrainConfig,
    episodes: int,
    compare: bool = False,
    workers: int = 1,
) -> BenchmarkSummary:
    """
    Train and evaluate independent episodes.

    Args:
        source: A SynthSpec (episode i uses seed spec.seed + i) or a sequence of bundles
            (episode i uses bundle i modulo the sequence length).
        cfg (TrainConfig): Training settings; episode i trains with seed cfg.seed + i.
        episodes (int): Number of episodes.
        compare (bool): Also train a CE-only baseline and report paired deltas.
        workers (int): Episodes trained concurrently.

    Returns:
        BenchmarkSummary: Rows ordered by episode and mean/CI per metric.
    """
    assert isinstance(episodes, int) and episodes >= 1, "episodes must be a positive integer."
    assert isinstance(workers, int) and workers >= 1, "workers must be a positive integer."
    cfg.validate()

    def bundle_for(i: int) -> EpisodeBundle:
        if isinstance(source, SynthSpec):
            return gen_synthetic(replace(source, seed=source.seed + i))
        return source[i % len(source)]

    def job(i: int) -> dict:
        return _episode_row(i, bundle_for(i), cfg, compare)

    if workers == 1:
        rows = [job(i) for i in range(episodes)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(job, range(episodes)))

    df = pd.DataFrame(rows)
    stats = {name: mean_ci(df[name]) for name in df.columns if name != "episode"}
    if compare:
        wins = int((df["A_l_transformed_delta"] > 0).sum())
        logger.info(f"full method raises A_l_transformed over CE-only in {wins}/{episodes} episodes")
    logger.info(f"Benchmark over {episodes} episodes: accuracy {stats['accuracy'][0]:.4f} ± {stats['accuracy'][1]:.4f}")
    return BenchmarkSummary(df, stats)


def run_grid_search(
    source,
    cfg: TrainConfig,
    lambda1_grid: Sequence[float],
    lambda2_grid: Sequence[float],
    episodes: int,
    workers: int = 1,
) -> pd.DataFrame:
    """
    Benchmark every (lambda1, lambda2) pair on the same episodes.

    Returns:
        DataFrame: One row per pair with mean accuracy, its CI and mean A_l_transformed.
    """
    rows = []
    for lambda1 in lambda1_grid:
        for lambda2 in lambda2_grid:
            grid_cfg = replace(cfg, cycle=replace(cfg.cycle, lambda1=float(lambda1), lambda2=float(lambda2)))
            summary = run_benchmark(source, grid_cfg, episodes, workers=workers)
            acc, ci = summary.stats["accuracy"]
            rows.append(
                {
                    "lambda1": float(lambda1),
                    "lambda2": float(lambda2),
                    "accuracy": acc,
                    "accuracy_ci": ci,
                    "A_l_transformed": summary.stats["A_l_transformed"][0],
                }
            )
    best = max(rows, key=lambda r: (r["accuracy"], -r["lambda1"], -r["lambda2"]))
    logger.info(f"Best grid point: lambda1={best['lambda1']}, lambda2={best['lambda2']} (accuracy {best['accuracy']:.4f})")
    return pd.DataFrame(rows)
