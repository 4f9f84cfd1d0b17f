import pytest

from taskimpedance.config import data_path
from taskimpedance.impedance import ArmId
from taskimpedance.kinematics import load_chain
from taskimpedance.knowledgebase import load_knowledge_base
from taskimpedance.perception import load_decision_tree, load_fixtures, scripted_vlm_from_fixture
from taskimpedance.retrieval import RetrievalConfig, Retriever
from taskimpedance.vecindex import HashingEmbedder

GRIPPER_ACTIONS = {"follow_surface": "open"}
BIMANUAL = (("dual_placement_egg", "dual_placement_bottle"),)


@pytest.fixture(scope="session")
def kb():
    return load_knowledge_base(data_path("impedance_db.json"), data_path("gripper_db.json"))


@pytest.fixture(scope="session")
def tree(kb):
    return load_decision_tree(data_path("decision_tree.json"), kb.task_ids)


@pytest.fixture(scope="session")
def provider():
    return HashingEmbedder()


@pytest.fixture(scope="session")
def fixtures():
    return load_fixtures(data_path("fixtures.json"))


@pytest.fixture(scope="session")
def client():
    return scripted_vlm_from_fixture(data_path("fixtures.json"))


@pytest.fixture(scope="session")
def retrieval_config():
    return RetrievalConfig(gripper_actions=GRIPPER_ACTIONS, bimanual_groups=BIMANUAL)


@pytest.fixture(scope="session")
def retriever(kb, provider, tree, retrieval_config):
    return Retriever(kb, provider, tree, retrieval_config)


@pytest.fixture(scope="session")
def chains():
    return {ArmId.RIGHT: load_chain(data_path("right_arm_chain.json")),
            ArmId.LEFT: load_chain(data_path("left_arm_chain.json"))}
