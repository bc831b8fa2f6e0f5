import math
from dataclasses import replace

import numpy as np
import pytest

from cycle import (
    RETRIEVAL_MODES,
    AnchorSet,
    CycleConfig,
    CycleObjective,
    anchor_select,
    ce_loss,
    iti_loss,
    iti_retrieve,
    iti_retrieve_all,
    tit_loss,
    tit_select,
    tit_similarity,
    total_loss,
)
from episode import EpisodeBundle, PatchCorpus, flatten_support
from errors import ConfigError, EmptyAnchorSet
from tests.conftest import identity_params, random_bundle, random_params
from tests.reference import reference_objective
from transform import mlp_forward

WORKED_D = np.array([[0.8, 0.6, 1.0], [0.6, 0.8, 0.0]])


def test_tit_similarity_examples():
    text = np.eye(2)
    corpus = np.array([[0.8, 0.6], [0.6, 0.8], [1.0, 0.0]])
    np.testing.assert_allclose(tit_similarity(text, corpus), WORKED_D, atol=1e-15)
    np.testing.assert_allclose(tit_similarity(np.eye(3), np.eye(3)[[2, 0, 1]]), np.eye(3)[:, [2, 0, 1]])


def test_tit_select_examples():
    assert tit_select(WORKED_D).tolist() == [2, 1]
    assert tit_select(np.array([[0.3, 0.3], [0.5, 0.5]])).tolist() == [0, 0]
    assert tit_select(np.array([[0.1]])).tolist() == [0]


def test_tit_loss_fixed_point():
    text = np.eye(2)
    Lstar = np.array([[1.0, 0.0], [0.6, 0.8]])
    loss, rate = tit_loss(text, Lstar, CycleConfig(tit_mode="hard_metric_only"))
    assert loss == 0.0 and rate == 1.0
    soft, _ = tit_loss(text, Lstar, CycleConfig(tau_soft=1e-4))
    assert soft < 1e-3


def test_tit_loss_single_class():
    text = np.array([[0.6, 0.8]])
    loss, rate = tit_loss(text, np.array([[1.0, 0.0]]), CycleConfig(tit_mode="hard_metric_only"))
    assert loss == 0.0 and rate == 1.0


def test_anchor_select_worked_example():
    corpus = PatchCorpus(np.zeros((6, 2)), n_support=1, n_views=2, n_patches=3)
    D = np.array([[0.1, 0.2, 0.9, 0.8, 0.3, 0.1]])
    anchors = anchor_select(D, corpus, 1)
    assert anchors.indices.tolist() == [2, 3]
    assert anchors.provenance == {2: [(0, 0)], 3: [(1, 0)]}
    assert anchor_select(3.0 * D, corpus, 1).indices.tolist() == [2, 3]


def test_anchor_select_saturates(toy_bundle):
    corpus = flatten_support(toy_bundle)
    D = tit_similarity(toy_bundle.text, corpus.raw)
    assert anchor_select(D, corpus, toy_bundle.M).indices.tolist() == list(range(corpus.H))
    anchors = anchor_select(D, corpus, 1)
    assert np.all(np.diff(anchors.indices) > 0)
    assert anchors.V <= min(corpus.H, corpus.n_blocks * toy_bundle.C)


@pytest.mark.parametrize("mode", RETRIEVAL_MODES)
def test_singleton_scope_retrieves_anchor(mode):
    bundle = random_bundle(2, C=2, n_support=1, M=1, A=0, d=4)
    corpus = flatten_support(bundle)
    assert iti_retrieve(0, bundle.text, corpus.raw, corpus, mode) == 0


@pytest.mark.parametrize("mode", ["cross_view", "intra_image"])
def test_per_sample_scope_with_one_patch(mode):
    bundle = random_bundle(3, C=2, n_support=4, M=1, A=0, d=4)
    corpus = flatten_support(bundle)
    for n in range(corpus.H):
        assert iti_retrieve(n, bundle.text, corpus.raw, corpus, mode) == n


def test_better_match_in_other_sample_only_reached_by_all_images():
    text = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    L = np.array(
        [
            [0.9, math.sqrt(0.19), 0.0],  # sample 0, view 0: the anchor
            [0.0, 0.0, 1.0],
            [0.95, 0.0, math.sqrt(0.0975)],  # sample 0, view 1: best match inside sample 0
            [0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],  # sample 1, view 0: best match overall
            [0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    corpus = PatchCorpus(L, n_support=2, n_views=2, n_patches=2)
    expected = {"intra_image": 0, "cross_view": 2, "all_images": 4}
    for mode, index in expected.items():
        assert iti_retrieve(0, text, L, corpus, mode) == index
        scope = [m for m in range(corpus.H) if mode == "all_images" or corpus.sample_of[m] == 0]
        if mode == "intra_image":
            scope = [m for m in scope if corpus.original_mask[m]]
        assert max(scope, key=lambda m: L[m] @ text[0]) == index
    assert corpus.sample_of[iti_retrieve(0, text, L, corpus, "cross_view")] == 0
    assert corpus.sample_of[iti_retrieve(0, text, L, corpus, "all_images")] == 1


def test_iti_loss_examples():
    text = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    L = np.array([[1.0, 0.0, 0.0], [0.5, 0.0, math.sqrt(0.75)]])
    corpus = PatchCorpus(L, n_support=1, n_views=1, n_patches=2)
    assert iti_loss(AnchorSet(np.array([0, 1])), L, text, corpus, "cross_view") == pytest.approx(0.25, abs=1e-15)
    assert iti_loss(AnchorSet(np.array([0])), L, text, corpus, "cross_view") == 0.0

    orthogonal = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    corpus = PatchCorpus(orthogonal, n_support=1, n_views=1, n_patches=2)
    assert iti_loss(AnchorSet(np.array([1])), orthogonal, text, corpus, "cross_view") == 1.0
    with pytest.raises(EmptyAnchorSet):
        iti_loss(AnchorSet(np.zeros(0, dtype=np.int64)), orthogonal, text, corpus, "cross_view")


def test_ce_loss_examples():
    text = np.eye(6)[1:]
    assert ce_loss(np.eye(6)[0], text, 3, 0.01) == pytest.approx(math.log(5), abs=1e-12)
    assert ce_loss([1.0, 0.0], np.array([[1.0, 0.0], [-1.0, 0.0]]), 0, 0.01) < 1e-6
    text = np.array([[0.8, 0.6], [0.2, math.sqrt(0.96)]])
    assert ce_loss([1.0, 0.0], text, 0, 1.0) == pytest.approx(0.437488, abs=1e-5)


def test_config_validation():
    for bad in (
        {"lambda1": -1.0},
        {"k": 0},
        {"tau_ce": 0.0},
        {"tau_soft": -1.0},
        {"retrieval": "nearest"},
        {"tit_mode": "hard"},
    ):
        with pytest.raises(ConfigError):
            CycleConfig(**bad).validate()


def test_ce_only_total_equals_ce(toy_bundle, toy_params, toy_cfg):
    breakdown = total_loss(toy_bundle, toy_params, replace(toy_cfg, lambda1=0.0, lambda2=0.0))
    assert breakdown.total == breakdown.ce


def test_noise_free_planted_cycle_closes(clean_bundle):
    breakdown = total_loss(clean_bundle, identity_params(clean_bundle.d), CycleConfig(k=2))
    assert breakdown.hard_cycle_rate == 1.0
    assert breakdown.cyc_txt_hard == pytest.approx(0.0, abs=1e-12)


def test_breakdown_additivity_and_bounds():
    rng = np.random.default_rng(0)
    for trial in range(100):
        bundle = random_bundle(trial, C=int(rng.integers(1, 5)), n_support=4, M=3, A=1, d=6)
        params = random_params(trial, d=6, h=int(rng.integers(2, 9)))
        cfg = CycleConfig(
            lambda1=float(rng.uniform(0, 5)),
            lambda2=float(rng.uniform(0, 5)),
            k=int(rng.integers(1, 5)),
            tau_ce=float(rng.uniform(0.01, 1)),
            tit_mode=str(rng.choice(["soft", "hard_metric_only"])),
            retrieval=str(rng.choice(RETRIEVAL_MODES)),
        )
        b = total_loss(bundle, params, cfg)
        assert abs(b.total - (b.ce + cfg.lambda1 * b.cyc_txt + cfg.lambda2 * b.cyc_img)) <= 1e-12
        assert -1e-12 <= b.cyc_txt <= 2.0 + 1e-12 and -1e-12 <= b.cyc_img <= 2.0 + 1e-12
        assert b.ce >= 0.0 and 0.0 <= b.hard_cycle_rate <= 1.0


def _oracle_instance(trial: int) -> tuple:
    """Small random episode whose transformed corpus has no collinear rows (no exact ties)."""
    rng = np.random.default_rng(100 + trial)
    for attempt in range(50):
        C, S, M = int(rng.integers(1, 5)), int(rng.integers(1, 7)), int(rng.integers(1, 6))
        A, d, h = int(rng.integers(0, 3)), int(rng.integers(2, 9)), int(rng.integers(4, 9))
        seed = 1000 * trial + attempt
        bundle = random_bundle(seed, C=C, n_support=S, M=M, A=A, d=d)
        params = random_params(seed, d=d, h=h)
        L, _ = mlp_forward(flatten_support(bundle).raw, params)
        gram = L @ L.T
        np.fill_diagonal(gram, 0.0)
        if gram.max() < 1.0 - 1e-9:
            return bundle, params, M
    raise AssertionError(f"no tie-free instance for trial {trial}")


@pytest.mark.parametrize("trial", range(100))
def test_matches_loop_reference(trial):
    bundle, params, M = _oracle_instance(trial)
    rng = np.random.default_rng(trial)
    cfg = CycleConfig(
        k=int(rng.integers(1, M + 2)),
        tau_ce=0.2,
        tau_soft=0.3,
        retrieval=RETRIEVAL_MODES[trial % 3],
    )
    result = CycleObjective(bundle, cfg).evaluate(params)
    expected = reference_objective(bundle, params, cfg)
    sel, b = result.selections, result.breakdown

    assert sel.tit.tolist() == expected["tit"]
    assert sel.anchors.indices.tolist() == expected["anchors"]
    assert sel.retrieved.tolist() == expected["retrieved"]
    assert b.hard_cycle_rate == expected["hard_rate"]
    assert b.cyc_txt == pytest.approx(expected["cyc_txt_soft"], abs=1e-12)
    assert b.cyc_txt_hard == pytest.approx(expected["cyc_txt_hard"], abs=1e-12)
    assert b.cyc_img == pytest.approx(expected["cyc_img"], abs=1e-12)
    assert b.ce == pytest.approx(expected["ce"], abs=1e-12)


def test_selections_invariant_to_positive_rescaling(toy_bundle, toy_params, toy_cfg):
    rng = np.random.default_rng(5)
    factors = 2.0 ** rng.integers(-3, 4, size=toy_bundle.support_views_raw.shape[:-1] + (1,))
    scaled = EpisodeBundle(
        toy_bundle.text_raw * 4.0,
        toy_bundle.support_labels,
        toy_bundle.support_globals_raw,
        toy_bundle.support_views_raw * factors,
    )
    before = CycleObjective(toy_bundle, toy_cfg).evaluate(toy_params).selections
    after = CycleObjective(scaled, toy_cfg).evaluate(toy_params).selections
    assert before.tit.tolist() == after.tit.tolist()
    assert before.anchors.indices.tolist() == after.anchors.indices.tolist()
    assert before.retrieved.tolist() == after.retrieved.tolist()


def test_support_permutation_equivariance(toy_bundle, toy_cfg):
    toy_params = random_params(0, d=8, h=16)
    order = np.array([4, 2, 0, 5, 1, 3])
    inverse = np.argsort(order)
    permuted = toy_bundle.with_support_order(order)
    base = CycleObjective(toy_bundle, toy_cfg)
    first = base.evaluate(toy_params)
    second = CycleObjective(permuted, toy_cfg).evaluate(toy_params)

    def moved(i):
        s, v, p = base.corpus.locate(int(i))
        return base.corpus.flat_index(int(inverse[s]), v, p)

    assert sorted(moved(i) for i in first.selections.anchors.indices) == second.selections.anchors.indices.tolist()
    assert [moved(i) for i in first.selections.tit] == second.selections.tit.tolist()
    for key in ("ce", "cyc_txt", "cyc_img", "total"):
        assert getattr(second.breakdown, key) == pytest.approx(getattr(first.breakdown, key), abs=1e-12)


def test_soft_loss_approaches_hard_loss():
    checked = 0
    for seed in range(40):
        bundle = random_bundle(seed, C=3, n_support=3, M=3, A=1, d=6)
        params = random_params(seed, d=6, h=6)
        L, _ = mlp_forward(flatten_support(bundle).raw, params)
        Lstar = L[tit_select(tit_similarity(bundle.text, L))]
        E = np.sort(Lstar @ bundle.text.T, axis=1)
        if np.min(E[:, -1] - E[:, -2]) < 1e-2:
            continue
        hard, _ = tit_loss(bundle.text, Lstar, CycleConfig(tit_mode="hard_metric_only"))
        soft, _ = tit_loss(bundle.text, Lstar, CycleConfig(tau_soft=1e-4))
        assert abs(soft - hard) <= 1e-3
        checked += 1
    assert checked > 0


def test_retrieval_similarity_grows_with_scope(toy_bundle, toy_params):
    corpus = flatten_support(toy_bundle)
    L, _ = mlp_forward(corpus.raw, toy_params)
    anchors = np.arange(corpus.H)
    values = []
    for mode in ("intra_image", "cross_view", "all_images"):
        mid, retrieved = iti_retrieve_all(anchors, toy_bundle.text, L, corpus, mode)
        values.append(np.sum(toy_bundle.text[mid] * L[retrieved], axis=1))
    assert np.all(values[0] <= values[1]) and np.all(values[1] <= values[2])


def test_without_semantic_anchor_uses_original_views(toy_bundle, toy_params, toy_cfg):
    result = CycleObjective(toy_bundle, replace(toy_cfg, semantic_anchor=False)).evaluate(toy_params)
    corpus = flatten_support(toy_bundle)
    assert np.all(corpus.view_of[result.selections.tit] == 0)
    assert result.selections.anchors.indices.tolist() == np.flatnonzero(corpus.original_mask).tolist()
    assert result.breakdown.V == toy_bundle.n_support * toy_bundle.M
