import time
from importlib import resources

import numpy as np
import pytest

from rewardcert.cli import parse_config
from rewardcert.core import Box, NoiseSpec
from rewardcert.env import Discrete, EnvModel, GridPolicy, make_builtin_env
from rewardcert.learn import certify_loop

DATA = resources.files("rewardcert") / "data"


def _shift_dynamics(s, a, P, ops):
    (x,) = s
    return [P["gain"] * x + P["step"] * (a - 0.5)]


def _unit_reward(s, a, s2, P):
    return np.full(s.shape[0], P["reward"])


def shift_env(reward=1.0, gain=0.5, step=0.2):
    """1-D system ``x' = gain*x + step*(a - 1/2)`` with two actions and goal [0.9, 1]."""
    return EnvModel("shift", Box([-1.0], [1.0]), Box([-0.5], [-0.4]), [Box([0.9], [1.0])], Discrete(2),
                    _shift_dynamics, _unit_reward, reward, reward,
                    {"gain": gain, "step": step, "reward": reward})


def two_cell_policy():
    """Action 0 on [-1, 0], action 1 on (0, 1]."""
    return GridPolicy([[-1.0], [0.0]], [[0.0], [1.0]], [0, 1], Discrete(2))


def toy_env(**kw):
    return make_builtin_env("contract1d", **kw)


def toy_policy(env):
    return GridPolicy([env.state_box.lo], [env.state_box.hi], [0], env.action_space)


TOY_NOISE = NoiseSpec.uniform(0.1)
TOY_S0 = np.array([0.7])
TOY_RUN = parse_config(DATA / "contract1d_run.json")
DESK_RUN = parse_config(DATA / "mountaincar_desk_run.json")


def toy_config(kind):
    return TOY_RUN.train_config(kind)


def _certify_all(rc, seed_base):
    env = rc.make_env()
    pol = rc.make_policy(env)
    noise = rc.make_noise(env)
    out = {"env": env, "policy": pol, "noise": noise, "seconds": {}}
    for i, kind in enumerate(("URS", "LRS", "RSM")):
        t0 = time.monotonic()
        out[kind] = certify_loop(env, pol, noise, kind, rc.train_config(kind), rng=seed_base + i)
        out["seconds"][kind] = time.monotonic() - t0
    return out


@pytest.fixture(scope="session")
def toy_certs():
    """URS, LRS and RSM certificates for the contracting toy, trained once per session."""
    return _certify_all(TOY_RUN, TOY_RUN.seed)


@pytest.fixture(scope="session")
def desk_certs():
    """URS, LRS and RSM certificates for the desk MountainCar variant."""
    return _certify_all(DESK_RUN, DESK_RUN.seed)
