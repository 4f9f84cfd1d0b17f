import numpy as np
import pytest

from taskimpedance.errors import EmptyTrace, NonFiniteState, SimulationAborted, ValidationError
from taskimpedance.impedance import ArmId, ImpedanceParams
from taskimpedance.kinematics import forward_kinematics
from taskimpedance.simulation import (TABLE_TASKS, TASK_ARMS, Environment, SimConfig, Trace,
                                      compute_metrics, contact_force, default_environment,
                                      load_heightfield, manifest, plan_trajectory, run_scenario,
                                      settled_contact_force, sinusoid_profile, steady_state_force)
from taskimpedance.config import data_path


def test_contact_force_unilateral():
    env = Environment(table_height=0.0, contact_stiffness=500, contact_damping=5)
    assert contact_force(env, (0, 0, 0.01), (0, 0, -1)).tolist() == [0, 0, 0]
    assert contact_force(env, (0, 0, -0.002), (0, 0, 0))[2] == pytest.approx(1.0)
    # damping cannot make the surface pull
    assert contact_force(env, (0, 0, -0.001), (0, 0, 1.0))[2] == 0.0
    assert contact_force(env.without_contact(), (0, 0, -1), (0, 0, 0)).tolist() == [0, 0, 0]


def test_environment_validation():
    with pytest.raises(ValidationError):
        Environment(contact_stiffness=0.0)
    with pytest.raises(ValidationError):
        Environment(contact_damping=-1.0)


def test_profile_interpolation():
    prof = sinusoid_profile(amplitude=0.02, wavelength=0.3, length=0.3, origin=0.0, direction=1.0)
    assert prof.at((0, 0.075, 0)) == pytest.approx(0.02, abs=1e-4)
    assert prof.at((0, -1.0, 0)) == pytest.approx(0.0)


def test_shipped_heightfield_loads():
    prof = load_heightfield(data_path("surface_profile.csv"))
    assert prof.arc_length.size == 61


def test_heightfield_rejects_garbage(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("s,h\n0,0\nx,y\n")
    with pytest.raises(Exception, match="h.csv:3"):
        load_heightfield(p)


def test_steady_state_force_formula():
    assert steady_state_force(3.0, 500.0, 0.01) == pytest.approx(3 * 500 * 0.01 / 503)


@pytest.mark.parametrize("k", [2.0, 3.0, 4.0, 5.0, 6.0])
def test_settled_contact_force(k):
    env = Environment(table_height=0.0)
    f = settled_contact_force(ImpedanceParams.from_gains(k, 1.5), env, 0.01)
    assert f == pytest.approx(steady_state_force(k, 500.0, 0.01), rel=0.01)


def test_trace_csv_roundtrip():
    tr = Trace("t", ArmId.RIGHT)
    for i in range(3):
        tr.append(0.02 * i, [0.1, 0.2, 0.3 + i], [0.1, 0.2, 0.29], [0, 0, 0.01 * i], [0, 0, 0],
                  [0, 0, 0.1 / 3], [0, 0, 0], [0.1, -0.2])
    back = Trace.from_csv(tr.to_csv())
    assert back.to_csv() == tr.to_csv()
    assert back.header()[-1] == "q_1"


def test_metrics_empty_trace():
    with pytest.raises(EmptyTrace):
        compute_metrics(Trace("t", ArmId.RIGHT))


@pytest.mark.parametrize("task_id", sorted(TASK_ARMS))
def test_trajectories_sampled_at_rate(task_id):
    env = default_environment(task_id)
    traj = plan_trajectory(task_id, env)
    assert traj.sample_rate == 50
    assert np.allclose(np.diff(traj.times), 0.02)
    assert np.all(np.isfinite(traj.positions))


def test_reference_descends_below_surface_when_pressing():
    env = default_environment("apply_pressure")
    traj = plan_trajectory("apply_pressure", env)
    assert traj.positions[:, 2].min() == pytest.approx(env.table_height - 0.01)


def test_grasp_emits_close_event():
    traj = plan_trajectory("grasp_from_table", default_environment("grasp_from_table"))
    assert "close" in [name for _, name in traj.events] or "close" in dict(traj.events).values()


def test_initial_state_on_reference(chains, kb):
    params = kb.scenarios[0].impedance_params()
    env = default_environment("follow_surface")
    tr = run_scenario("follow_surface", params, chains[ArmId.RIGHT], env)
    assert np.linalg.norm(tr.x[0] - tr.x_ref[0]) <= 1e-6
    q0 = tr.q[0]
    assert np.allclose(forward_kinematics(chains[ArmId.RIGHT], q0).position, tr.x[0])


@pytest.mark.parametrize("task_id", ["press_button", "wipe_surface", "handover"])
def test_placeholder_tasks_run(chains, kb, task_id):
    s = next(s for s in kb.scenarios if s.task_id == task_id)
    tr = run_scenario(task_id, s.impedance_params(), chains[s.arm], default_environment(task_id))
    m = compute_metrics(tr)
    assert np.isfinite(m.max_abs_e_z)


def test_unstable_dt_aborts_with_non_finite(chains):
    params = ImpedanceParams.from_gains(1e6, 1.0)
    with pytest.raises(SimulationAborted) as info:
        run_scenario("follow_surface", params, chains[ArmId.RIGHT],
                     default_environment("follow_surface"), SimConfig(dt=10.0))
    assert isinstance(info.value.cause, NonFiniteState)


def test_contact_free_run_tracks_reference(chains, kb):
    s = next(s for s in kb.scenarios if s.task_id == "apply_pressure")
    env = default_environment("apply_pressure").without_contact()
    tr = run_scenario("apply_pressure", s.impedance_params(), chains[ArmId.RIGHT], env)
    assert compute_metrics(tr).max_abs_e_z <= 1e-3


def test_manifest_contents(kb):
    s = kb.scenarios[0]
    text = manifest(s.task_id, s.impedance_params(), SimConfig(), "abc")
    assert '"config_hash": "abc"' in text and '"task_id": "follow_surface"' in text


def test_table_tasks_order():
    assert TABLE_TASKS[0] == "follow_surface" and len(TABLE_TASKS) == 6
