import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridlens import causal as ca
from gridlens import gridworld as gw
from gridlens.evaluation import evaluate, examples_from_scenes, query_inputs
from gridlens.model import prompts


@pytest.fixture(scope="module")
def examples():
    return examples_from_scenes(gw.generate_scenes(40, 55))


# -------------------------------------------------------------- MF


def test_mf_identities():
    assert ca.mediation_fraction(10.0, 2.0, 2.0) == 1.0
    assert ca.mediation_fraction(10.0, 2.0, 10.0) == 0.0
    assert ca.mediation_fraction(10.0, 2.0, 4.0) == 0.75
    with pytest.raises(ca.UndefinedMediation):
        ca.mediation_fraction(3.0, 3.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(1.0, 50.0), st.floats(1.0, 50.0), st.floats(1.0, 50.0))
def test_log_mf_matches_direct(pb, ps, pp):
    if abs(pb - ps) < 1e-3:
        return
    got = ca.mediation_fraction_log(np.log(pb), np.log(ps), np.log(pp))
    assert got == pytest.approx(ca.mediation_fraction(pb, ps, pp), rel=1e-9, abs=1e-9)


def _full_inputs(weights, pairs, task):
    template = prompts.LOCALIZE if task == "localization" else prompts.CLASSIFY_BINARY
    vocab = weights.config.vocab
    if task == "localization":
        answers = [prompts.box_answer(p.source.find(p.target_class).box) for p in pairs]
    else:
        answers = [prompts.binary_answer(True)] * len(pairs)
    ids = np.array([vocab.encode(a) for a in answers])
    classes = [p.target_class for p in pairs]
    src = query_inputs(weights, [p.source for p in pairs], classes, template)
    base = query_inputs(weights, [p.base for p in pairs], classes, template)
    P = src.seq_len
    mask = np.array(prompts.template_mask(answers[0]))
    return (src.with_tokens(np.concatenate([src.tokens, ids], 1)),
            base.with_tokens(np.concatenate([base.tokens, ids], 1)), P, mask)


@pytest.mark.parametrize("task", ca.TASKS)
def test_self_patching_every_head_gives_zero_mf(planted_weights, control_pairs, task):
    src, base, P, mask = _full_inputs(planted_weights, control_pairs[:6], task)
    mf, _, _ = ca.mediation_matrix(planted_weights, src, base, P, mask, patch_from=base)
    assert np.abs(mf).max() < 1e-9


def test_self_pairs_are_excluded(planted_weights):
    s = gw.generate_scenes(3, 1)
    pairs = [gw.ScenePair(x, x, x.objects[0].class_id) for x in s]
    with pytest.raises(ca.EmptyInputError):
        ca.cma_sweep(planted_weights, pairs, "localization", apply_filter=False)


def test_unknown_task(planted_weights, control_pairs):
    with pytest.raises(ca.ContractError):
        ca.cma_sweep(planted_weights, control_pairs[:2], "captioning")


def test_cma_localization_finds_planted_heads(planted, cma_reports):
    man = planted[1]
    rep = cma_reports["localization"]
    assert rep.n_examples == 50 and rep.n_filtered == 0
    top4 = set(ca.HeadRanking.from_report(rep).top(4))
    assert top4 == set(man.loc_head_list)
    assert all(rep.mf[h] > 0.5 for h in man.loc_head_list)
    assert np.mean(np.abs(rep.mf) < 0.05) >= 0.9
    assert np.all(np.isfinite(rep.mf))


def test_cma_classification_top1_is_cls_head(planted, cma_reports):
    rep = cma_reports["classification_binary"]
    assert ca.HeadRanking.from_report(rep).top(1) == [planted[1].cls_head]
    assert np.mean(np.abs(rep.mf) < 0.05) >= 0.9


def test_patch_locality_for_heads_not_reading_image(planted, cma_reports):
    man = planted[1]
    for rep in cma_reports.values():
        for layer, head in (man.mover_head, man.slot_mover_head):
            assert np.abs(rep.per_example[:, layer, head]).max() < 0.05
        # layers past the circuit are empty
        assert np.abs(rep.per_example[:, man.aggregation_layer + 1:]).max() < 0.05


def test_report_metadata(cma_reports):
    meta = cma_reports["localization"].metadata
    assert meta["source_traces"].startswith("clean")
    assert set(meta["masked_answer_tokens"]) == {"[", ",", "]", "<end>"}


# -------------------------------------------------------------- ranking


def test_ranking_order_and_tie_break():
    mf = np.array([[0.1, 0.5, 0.0], [0.5, 0.0, -0.2]])
    r = ca.HeadRanking.from_matrix(mf)
    assert r.task_critical == ((0, 1), (1, 0), (0, 0), (0, 2), (1, 1), (1, 2))
    assert r == ca.HeadRanking.from_matrix(mf.copy())
    # median |MF| is 0.15; ascending |MF|, ties from the bottom of the ranking
    assert r.low_importance == ((1, 1), (0, 2), (0, 0))


def test_normalized_auc():
    f = [0, 0.25, 0.5, 1.0]
    assert ca.normalized_auc(f, [1, 1, 1, 1]) == 1.0
    assert ca.normalized_auc(f, [0, 0.25, 0.5, 1.0]) == pytest.approx(0.5)
    assert ca.normalized_auc([0, 0.5], [1, 0]) == pytest.approx(0.5)


# -------------------------------------------------------------- head ablation


def test_curve_fraction_zero_is_baseline_and_bad_fraction(planted_weights, cma_reports, examples):
    r = ca.HeadRanking.from_report(cma_reports["localization"])
    curve = ca.head_ablation_curve(planted_weights, examples, r, "task_critical", (0.0, 1 / 64))
    base = evaluate(planted_weights, examples)
    assert (curve.loc_acc[0], curve.cls_acc[0]) == (base.loc_score, base.cls_acc)
    with pytest.raises(ca.ContractError):
        ca.head_ablation_curve(planted_weights, examples, r, "task_critical", (1.5,))
    with pytest.raises(ca.ContractError):
        ca.head_ablation_curve(planted_weights, examples, r, "random", (0.0, 0.5))


def test_zeroing_loc_heads_kills_localization_not_classification(planted, examples):
    weights, man = planted
    specs = ca.zero_head_specs(man.loc_head_list)
    r = evaluate(weights, examples, specs=lambda inp, chunk: specs)
    assert r.loc_score < 0.05
    assert r.cls_acc == 1.0


def test_low_importance_equal_count_is_harmless(planted_weights, cma_reports, examples):
    r = ca.HeadRanking.from_report(cma_reports["localization"])
    curve = ca.head_ablation_curve(planted_weights, examples, r, "low_importance", (0.0, 4 / 64, 8 / 64))
    assert min(curve.loc_acc) >= curve.loc_acc[0] - 0.10


def test_cross_task_identification_head(planted, cma_reports, examples):
    weights, man = planted
    cls_rank = ca.HeadRanking.from_report(cma_reports["classification_binary"])
    loc_rank = ca.HeadRanking.from_report(cma_reports["localization"])
    res = ca.cross_task_ablation(weights, examples, cls_rank, loc_rank, (0.0, 1 / 64))
    assert res.curve.loc_acc[1] < 0.05
    assert res.overlap_top10 == len(res.shared_heads) <= 10


# -------------------------------------------------------------- knockout


def test_knockout_planted_pattern(planted, examples):
    weights, man = planted
    spec = ca.KnockoutSpec(((), (0, 1, 2, 3), (4, 5, 6, 7)))
    base_loc, base_cls, rows = ca.attention_knockout_sweep(weights, examples, spec)
    by = {r.group: r for r in rows}
    assert (by["none"].loc_acc, by["none"].cls_acc) == (base_loc, base_cls)
    assert by["layers 0-3"].loc_acc < 0.05
    assert abs(by["layers 4-7"].loc_delta) < 0.02
    assert all(by["all layers"].loc_acc <= r.loc_acc for r in rows)


def test_knockout_spec_validation():
    with pytest.raises(ca.ContractError):
        ca.KnockoutSpec(((0, 1), (1, 2))).validate(8)
    with pytest.raises(ca.ContractError):
        ca.KnockoutSpec(((7, 8),)).validate(8)
    assert ca.KnockoutSpec.consecutive(8, 6).layer_groups == ((0, 1, 2, 3, 4, 5), (6, 7))
