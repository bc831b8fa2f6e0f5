import json
import math
import os
from dataclasses import replace

import numpy as np
import pytest

from cycle import CycleConfig
from episode import EpisodeBundle
from errors import EmptyQuerySet, IoFailure, MissingClassSupport, NonPositiveTemperature
from metrics import (
    CycleTrace,
    alignment_scores,
    class_prototypes,
    classify,
    cycle_trace,
    encode_pgm,
    episode_accuracy,
    evaluation_report,
    export_trace,
    iti_trace,
    losses_from_trace,
    patch_grid,
    prototype_accuracy,
    tit_trace,
)
from synth import gen_synthetic, planted_support_mask
from tests.conftest import identity_params, random_bundle, random_params
from transform import ModelParams, init_params


def _unit_at(cos: float) -> list:
    return [cos, math.sqrt(1.0 - cos * cos), 0.0]


def text_bundle(labels, query_labels, query_from=None) -> EpisodeBundle:
    """Three orthonormal classes whose support globals and patches equal their text."""
    text = np.eye(3)
    labels = np.asarray(labels, dtype=np.int64)
    query_labels = np.asarray(query_labels, dtype=np.int64)
    query_from = query_labels if query_from is None else np.asarray(query_from, dtype=np.int64)
    return EpisodeBundle(
        text=text,
        support_labels=labels,
        support_globals=text[labels],
        support_views=np.repeat(text[labels][:, None, None, :], 2, axis=2),
        query_labels=query_labels,
        query_globals=text[query_from],
        query_patches=np.repeat(text[query_from][:, None, :], 2, axis=1),
    )


def test_alignment_worked_example():
    bundle = EpisodeBundle(
        text=[[1.0, 0.0, 0.0]],
        support_labels=[0, 0],
        support_globals=[_unit_at(1.0), _unit_at(0.5)],
        support_views=[[[_unit_at(0.2), _unit_at(0.4)]], [[_unit_at(0.6), _unit_at(0.8)]]],
    )
    report = alignment_scores(bundle, init_params(3, 3, 0))
    assert report.A_g == pytest.approx(0.75, abs=1e-6)
    assert report.A_l == pytest.approx(0.5, abs=1e-6)
    assert set(report.per_class) == {0}


def test_alignment_extremes():
    bundle = text_bundle([0, 1, 2], [0, 1, 2])
    assert alignment_scores(bundle, init_params(3, 3, 0)).A_g == pytest.approx(1.0, abs=1e-12)

    orthogonal = EpisodeBundle(
        text=[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        support_labels=[0, 1],
        support_globals=[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        support_views=[[[[0.0, 0.0, 1.0]]], [[[0.0, 0.0, -1.0]]]],
    )
    assert alignment_scores(orthogonal, init_params(3, 3, 0)).A_l == 0.0


def test_alignment_bounded(toy_bundle, toy_params):
    report = alignment_scores(toy_bundle, toy_params)
    for value in (report.A_g, report.A_l, report.A_l_transformed):
        assert -1.0 <= value <= 1.0


def test_classify_examples():
    params = init_params(3, 3, 0)
    text = np.eye(3)
    assert classify(text[2], params, text) == 2
    assert classify(np.ones(3) / math.sqrt(3), params, text) == 0
    q = np.array([0.2, 0.9, 0.1])
    assert classify(q, params, text) == classify(7.5 * q, params, text) == 1
    assert classify(q, params, text, tau_ce=0.01) == 1
    for tau in (0.0, -1.0):
        with pytest.raises(NonPositiveTemperature):
            classify(q, params, text, tau_ce=tau)


def test_episode_accuracy_extremes():
    params = init_params(3, 3, 0)
    assert episode_accuracy(text_bundle([0, 1, 2], [0, 1, 2, 2]), params) == 1.0
    mislabeled = text_bundle([0, 1, 2], [1, 2, 0], query_from=[0, 1, 2])
    assert episode_accuracy(mislabeled, params) == 0.0
    assert episode_accuracy(mislabeled, params, CycleConfig(tau_ce=0.5)) == 0.0
    with pytest.raises(EmptyQuerySet):
        episode_accuracy(text_bundle([0, 1, 2], []), params)


def test_noise_free_queries_are_classified(clean_spec):
    bundle = gen_synthetic(replace(clean_spec, M=4, signal_patches_per_image=3, N_query=20))
    assert episode_accuracy(bundle, init_params(bundle.d, bundle.d, 0)) == 1.0


def test_prototypes():
    params = init_params(3, 3, 0)
    assert prototype_accuracy(text_bundle([0, 1, 2], [0, 1, 2]), params) == 1.0
    with pytest.raises(MissingClassSupport):
        class_prototypes(text_bundle([0, 0, 1], [0]), params)


def test_prototypes_match_brute_force(toy_bundle, toy_params):
    protos = class_prototypes(toy_bundle, toy_params)
    shuffled = class_prototypes(toy_bundle.with_support_order([5, 3, 1, 0, 2, 4]), toy_params)
    np.testing.assert_allclose(protos, shuffled, atol=1e-12)
    for j in range(toy_bundle.C):
        adapted = []
        for g in toy_bundle.support_globals[toy_bundle.support_labels == j]:
            q = g + g @ toy_params.Wa
            adapted.append(q / np.linalg.norm(q))
        mean = np.mean(adapted, axis=0)
        np.testing.assert_allclose(protos[j], mean / np.linalg.norm(mean), atol=1e-12)


def test_trace_indices_are_valid(toy_bundle, toy_params, toy_cfg):
    trace, result = cycle_trace(toy_bundle, toy_params, toy_cfg)
    assert len(trace.tit) == toy_bundle.C
    assert len(trace.iti) == result.breakdown.V
    for record in trace.tit + trace.iti:
        location = record["patch"] if "patch" in record else record["anchor"]
        assert 0 <= location["sample"] < toy_bundle.n_support
        assert 0 <= location["view"] <= toy_bundle.A
        assert 0 <= location["idx"] < toy_bundle.M
    for record in trace.iti:
        assert 0 <= record["mid_class"] < toy_bundle.C
        assert 0 <= record["retrieved"]["idx"] < toy_bundle.M
    again = CycleTrace.from_json(trace.to_json())
    assert again.tit == trace.tit and again.iti == trace.iti
    assert tit_trace(toy_bundle, toy_params, toy_cfg).tit == trace.tit
    assert iti_trace(toy_bundle, toy_params, toy_cfg).iti == trace.iti


@pytest.mark.parametrize("tit_mode", ["soft", "hard_metric_only"])
def test_losses_recomputed_from_trace(tit_mode):
    for seed in range(20):
        bundle = random_bundle(seed, C=3, n_support=4, M=4, A=1, d=8)
        params = random_params(seed)
        cfg = CycleConfig(k=2, tau_ce=0.1, tau_soft=0.5, tit_mode=tit_mode)
        trace, result = cycle_trace(bundle, params, cfg)
        recomputed = losses_from_trace(trace, tit_mode)
        assert recomputed["cyc_txt"] == pytest.approx(result.breakdown.cyc_txt, abs=1e-12)
        assert recomputed["cyc_img"] == pytest.approx(result.breakdown.cyc_img, abs=1e-12)
        assert recomputed["hard_cycle_rate"] == result.breakdown.hard_cycle_rate


def test_noise_free_selections_land_on_planted_patches(clean_bundle):
    trace, _ = cycle_trace(clean_bundle, identity_params(clean_bundle.d), CycleConfig(k=2))
    planted = planted_support_mask(clean_bundle)
    assert all(planted[record["flat"]] for record in trace.tit)
    assert all(record["recon_class"] == record["class"] for record in trace.tit)


def test_patch_grid_and_pgm():
    assert patch_grid(16) == (4, 4)
    assert patch_grid(6) == (1, 6)
    data = encode_pgm(np.array([-1.0, 0.0, 1.0, 0.5]), (2, 2))
    header = b"P5\n2 2\n255\n"
    assert data.startswith(header)
    assert list(data[len(header):]) == [0, 128, 255, 191]


def test_export_trace_writes_every_file(tmp_path, toy_bundle, toy_params, toy_cfg):
    out = str(tmp_path / "trace")
    summary = export_trace(toy_bundle, toy_params, toy_cfg, out, pgm=True)
    maps = os.listdir(os.path.join(out, "simmaps"))
    n_maps = toy_bundle.C * toy_bundle.n_support
    assert summary["simmaps"] == n_maps
    assert len([m for m in maps if m.endswith(".csv")]) == n_maps
    assert len([m for m in maps if m.endswith(".pgm")]) == n_maps
    with open(os.path.join(out, "trace.json"), encoding="utf-8") as f:
        assert len(json.load(f)["tit"]) == toy_bundle.C
    with open(os.path.join(out, "anchors.json"), encoding="utf-8") as f:
        overlay = json.load(f)
    assert overlay["V"] == summary["V"] == summary["iti"]
    assert len(overlay["samples"]) == toy_bundle.n_support


@pytest.mark.parametrize("blocked", ["simmaps/class0_sample0.pgm", "anchors.json"])
def test_export_trace_write_failure_is_logged(tmp_path, caplog, toy_bundle, toy_params, toy_cfg, blocked):
    out = tmp_path / "trace"
    (out / blocked).mkdir(parents=True)
    with caplog.at_level("ERROR", logger="metrics"):
        with pytest.raises(IoFailure):
            export_trace(toy_bundle, toy_params, toy_cfg, str(out), pgm=True)
    assert any(r.levelname == "ERROR" and blocked.split("/")[-1] in r.getMessage() for r in caplog.records)


def test_evaluation_report_keys(toy_bundle, toy_params):
    report = evaluation_report(toy_bundle, toy_params, prototype=True)
    assert {"accuracy", "A_g", "A_l", "A_l_transformed", "per_class", "prototype_accuracy"} <= set(report)
    assert 0.0 <= report["accuracy"] <= 1.0
    json.dumps(report)


def test_zero_adapter_alignment_matches_raw_globals(clean_bundle):
    params = ModelParams(np.eye(clean_bundle.d), np.eye(clean_bundle.d), np.zeros((clean_bundle.d,) * 2))
    direct = np.mean(np.sum(clean_bundle.support_globals * clean_bundle.text[clean_bundle.support_labels], axis=1))
    assert alignment_scores(clean_bundle, params).A_g == pytest.approx(direct, abs=1e-12)
