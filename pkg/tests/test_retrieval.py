import json

import numpy as np
import pytest

from taskimpedance.errors import PipelineError
from taskimpedance.impedance import ArmId
from taskimpedance.perception import MappingVlm, TaskLabel
from taskimpedance.retrieval import (RetrievalConfig, Retriever, build_indexes,
                                     evaluate_retrieval, gripper_query, retrieve_gripper,
                                     retrieve_impedance)
from taskimpedance.vecindex import HashingEmbedder, cosine, embed_text


def test_indexes_cover_knowledge_base(kb, provider):
    s_idx, g_idx = build_indexes(kb, provider)
    assert s_idx.ids == kb.task_ids
    assert set(g_idx.ids) == {g.object_class for g in kb.grippers}


def test_descriptions_retrieve_themselves(kb, retriever, provider):
    for s in kb.scenarios:
        got, score = retrieve_impedance(TaskLabel(s.task_id, s.description), retriever.scenario_index,
                                        kb, provider)
        assert got.task_id == s.task_id and score == pytest.approx(1.0)


def test_scenario_descriptions_not_near_duplicates(kb, provider):
    vecs = [embed_text(provider, s.description) for s in kb.scenarios]
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            assert cosine(vecs[i], vecs[j]) < 0.95


@pytest.mark.parametrize("leaf_index", range(9))
def test_every_leaf_label_maps_to_its_scenario_and_object(tree, kb, retriever, leaf_index):
    leaf, _ = tree.leaves()[leaf_index]
    params = retriever.parameters_for(TaskLabel(leaf.task_id, leaf.label))
    assert params.scenario.task_id == leaf.task_id
    assert params.gripper.object_class in params.scenario.object_classes


def test_gripper_query_concatenation(kb):
    s = kb.scenarios[0]
    assert gripper_query(s, TaskLabel(s.task_id, "abc")) == f"{s.description} abc"


def test_gripper_stage_uses_scenario_context(kb, retriever, provider):
    # the same short label lands on different objects depending on the scenario
    label = TaskLabel("x", "place it down")
    egg = next(s for s in kb.scenarios if s.task_id == "dual_placement_egg")
    bottle = next(s for s in kb.scenarios if s.task_id == "dual_placement_bottle")
    g1, _ = retrieve_gripper(egg, label, retriever.gripper_index, kb, provider)
    g2, _ = retrieve_gripper(bottle, label, retriever.gripper_index, kb, provider)
    assert (g1.object_class, g2.object_class) == ("egg", "sauce_bottle")


def test_control_parameters_dict(retriever, tree):
    leaf = tree.leaf("follow_surface")
    params = retriever.parameters_for(TaskLabel(leaf.task_id, leaf.label))
    d = params.to_dict()
    assert d["task_id"] == "follow_surface" and d["arm"] == "R"
    assert d["stiffness"][2] == 3.0 and d["damping"][2] == 2.0
    assert d["gripper"]["action"] == "open"
    assert d["gripper"]["angle"] == params.gripper.angle_open
    json.dumps(d)


def test_bimanual_returns_both_arms(retriever, fixtures, client):
    fx = next(f for f in fixtures if f.expected_task_id == "dual_placement_egg")
    out = retriever.run(fx.image_uri, client)
    assert [p.scenario.task_id for p in out] == ["dual_placement_egg", "dual_placement_bottle"]
    assert [p.arm for p in out] == [ArmId.RIGHT, ArmId.LEFT]


def test_unmapped_image_is_perception_error(retriever, client):
    with pytest.raises(PipelineError) as info:
        retriever.run("unknown.png", client)
    assert info.value.stage == "perception"
    assert str(info.value).startswith("perception: ")


def test_unsure_answer_is_perception_error(retriever):
    with pytest.raises(PipelineError, match="^perception"):
        retriever.run("img", MappingVlm({}))


def test_evaluation_on_shipped_suite(fixtures, retriever, client):
    report = evaluate_retrieval(fixtures, retriever, client)
    assert (report.correct_count, report.total) == (13, 14)
    wrong = [r for r in report.records if not r.correct]
    assert wrong[0].expected_task == "grasp_from_table"
    assert report.to_csv() == "category,count\ncorrect,13\nincorrect,1\n"
    assert json.loads(report.to_json())["correct"] == 13


def test_evaluation_is_deterministic(fixtures, retriever, client):
    a = evaluate_retrieval(fixtures, retriever, client).to_json()
    b = evaluate_retrieval(list(reversed(fixtures)), retriever, client).to_json()
    assert a == b


def test_evaluation_records_pipeline_errors(fixtures, kb, tree):
    class Broken:
        def ask(self, image, question):
            return "unsure"
    r = Retriever(kb, HashingEmbedder(), tree, RetrievalConfig())
    report = evaluate_retrieval(fixtures[:2], r, Broken())
    assert report.correct_count == 0
    assert all(rec.error.startswith("perception") for rec in report.records)


def test_low_score_warns(kb, retriever, caplog):
    with caplog.at_level("WARNING"):
        retriever.parameters_for(TaskLabel("x", "zebra quantum"))
    assert "low-confidence" in caplog.text


def test_retrieval_invariant_to_provider_dimension(kb, tree, fixtures, client):
    r = Retriever(kb, HashingEmbedder(1024), tree, RetrievalConfig())
    report = evaluate_retrieval(fixtures, r, client)
    assert report.correct_count == 13
    assert np.isclose(report.accuracy, 13 / 14)
