from __future__ import annotations

import pytest

from wmar.config import loads_config

# Small enough that a full two-task run takes a couple of seconds.
TINY = """
suite = distinct4
task_order = grid,chain
seeds = 0,1
budget.N = 400
budget.steps_per_iteration = 100
budget.eval_interval = 200
budget.prefill_steps = 100
budget.train_ratio = 0.03
budget.eval_episodes = 2
budget.random_episodes = 5
budget.dream_starts = 8
buffer.fifo_steps = 128
buffer.ltdm_chunks = 4
buffer.chunk_size = 16
buffer.batch_size = 2
buffer.batch_length = 8
model.deter = 8
model.embed = 8
model.hidden = 8
agent.hidden = 8
agent.horizon = 4
reward_scale.grid = 1
reward_scale.chain = 1
reward_scale.bandit = 0.001
reward_scale.keydoor = 0.2
"""


@pytest.fixture
def tiny_cfg():
    return loads_config(TINY)


@pytest.fixture
def tiny_cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p
