"""Augmented replay: spliced chunks, a FIFO buffer and a reservoir buffer.

Episodes are laid end to end and cut into fixed-length chunks; ``is_first``
marks where a new episode starts inside a chunk. Every chunk goes to both the
short-term FIFO (bounded in steps) and the long-term reservoir (bounded in
chunks, keeps the highest random keys ever seen). Minibatches come from one
of the two, picked uniformly.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Step:
    """One transition as stored in replay.

    ``action`` is the action that led to ``observation`` (0 on reset steps),
    ``reward`` the (scaled) reward received on that transition.
    """

    observation: np.ndarray
    action: int
    reward: float
    is_first: bool
    is_terminal: bool = False


@dataclass
class Chunk:
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    is_first: np.ndarray
    is_terminal: np.ndarray
    reservoir_key: float
    source_task: int = -1

    def __len__(self) -> int:
        return len(self.action)

    @property
    def steps(self) -> list[Step]:
        return [
            Step(self.obs[i], int(self.action[i]), float(self.reward[i]), bool(self.is_first[i]), bool(self.is_terminal[i]))
            for i in range(len(self))
        ]

    def equals(self, other: "Chunk") -> bool:
        return (
            self.reservoir_key == other.reservoir_key
            and self.source_task == other.source_task
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("obs", "action", "reward", "is_first", "is_terminal")
            )
        )


def _pack(steps: list[Step], key: float, task: int) -> Chunk:
    return Chunk(
        obs=np.stack([np.asarray(s.observation, dtype=np.float32) for s in steps]),
        action=np.array([s.action for s in steps], dtype=np.int64),
        reward=np.array([s.reward for s in steps], dtype=np.float32),
        is_first=np.array([s.is_first for s in steps], dtype=bool),
        is_terminal=np.array([s.is_terminal for s in steps], dtype=bool),
        reservoir_key=float(key),
        source_task=task,
    )


class Splicer:
    """Streaming splicer; ``carry`` holds the steps of the unfinished chunk."""

    def __init__(self, chunk_size: int, key_rng: np.random.Generator):
        if chunk_size < 2:
            raise ValueError("chunk_size must be at least 2")
        self.chunk_size = chunk_size
        self.key_rng = key_rng
        self.carry: list[Step] = []
        self.carry_task = -1

    def add(self, step: Step, task: int = -1) -> Chunk | None:
        if not self.carry:
            self.carry_task = task
        self.carry.append(step)
        if len(self.carry) < self.chunk_size:
            return None
        chunk = _pack(self.carry, self.key_rng.random(), self.carry_task)
        self.carry = []
        return chunk


def splice(
    episodes: list[list[Step]],
    chunk_size: int,
    carry: list[Step] | None = None,
    key_rng: np.random.Generator | None = None,
    task: int = -1,
) -> tuple[list[Chunk], list[Step]]:
    """Cut a list of episodes into chunks; returns (chunks, new carry)."""
    if chunk_size < 2:
        raise ValueError("chunk_size must be at least 2")
    sp = Splicer(chunk_size, key_rng or np.random.default_rng())
    sp.carry = list(carry or [])
    chunks = []
    for ep in episodes:
        if ep and not ep[0].is_first:
            raise ValueError("each episode must start with an is_first step")
        for s in ep:
            c = sp.add(s, task)
            if c is not None:
                chunks.append(c)
    return chunks, sp.carry


class FifoBuffer:
    def __init__(self, capacity_steps: int):
        self.capacity_steps = capacity_steps
        self.chunks: deque[Chunk] = deque()
        self.stored_steps = 0

    def __len__(self) -> int:
        return len(self.chunks)

    def insert(self, chunk: Chunk) -> list[Chunk]:
        self.chunks.append(chunk)
        self.stored_steps += len(chunk)
        evicted = []
        while self.stored_steps > self.capacity_steps:
            old = self.chunks.popleft()
            self.stored_steps -= len(old)
            evicted.append(old)
        return evicted

    def items(self) -> list[Chunk]:
        return list(self.chunks)


class ReservoirBuffer:
    """Keeps the ``capacity_chunks`` chunks with the highest keys seen so far."""

    def __init__(self, capacity_chunks: int):
        self.capacity_chunks = capacity_chunks
        self._heap: list[tuple[float, int, Chunk]] = []
        self._seq = 0
        self.offered = 0

    def __len__(self) -> int:
        return len(self._heap)

    @property
    def stored_steps(self) -> int:
        return sum(len(c) for _, _, c in self._heap)

    def insert(self, chunk: Chunk) -> Chunk | None:
        """Insert; returns whichever chunk was dropped, or None."""
        self.offered += 1
        if self.capacity_chunks <= 0:
            return chunk
        item = (chunk.reservoir_key, self._seq, chunk)
        self._seq += 1
        if len(self._heap) < self.capacity_chunks:
            heapq.heappush(self._heap, item)
            return None
        if chunk.reservoir_key > self._heap[0][0]:
            return heapq.heapreplace(self._heap, item)[2]
        return chunk

    def items(self) -> list[Chunk]:
        return [c for _, _, c in self._heap]

    def keys(self) -> list[float]:
        return sorted(k for k, _, _ in self._heap)


@dataclass
class Batch:
    """Windows stacked batch-major: ``obs`` is [batch, length, obs_dim]."""

    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    is_first: np.ndarray
    is_terminal: np.ndarray
    source: str = "fifo"
    origins: list[tuple[int, int]] = field(default_factory=list)


class AugmentedBuffer:
    """Short-term FIFO plus long-term distribution-matching reservoir.

    With ``ltdm_chunks == 0`` this degenerates to a plain FIFO buffer.
    """

    def __init__(self, fifo_steps: int, ltdm_chunks: int, chunk_size: int, key_rng: np.random.Generator):
        self.chunk_size = chunk_size
        self.fifo = FifoBuffer(fifo_steps)
        self.ltdm = ReservoirBuffer(ltdm_chunks)
        self.splicer = Splicer(chunk_size, key_rng)
        self.steps_added = 0
        self.chunks_added = 0

    @property
    def capacity_steps(self) -> int:
        return self.fifo.capacity_steps + self.ltdm.capacity_chunks * self.chunk_size

    def stored_steps(self) -> int:
        return self.fifo.stored_steps + self.ltdm.stored_steps

    def add_step(self, step: Step, task: int = -1) -> Chunk | None:
        self.steps_added += 1
        chunk = self.splicer.add(step, task)
        if chunk is not None:
            self.add_chunk(chunk)
        return chunk

    def add_chunk(self, chunk: Chunk) -> None:
        self.chunks_added += 1
        self.fifo.insert(chunk)
        self.ltdm.insert(chunk)

    def __len__(self) -> int:
        return len(self.fifo) + len(self.ltdm)

    def state_dict(self) -> dict:
        return {
            "chunk_size": self.chunk_size,
            "fifo_steps": self.fifo.capacity_steps,
            "fifo": list(self.fifo.chunks),
            "ltdm_chunks": self.ltdm.capacity_chunks,
            "ltdm_heap": list(self.ltdm._heap),
            "ltdm_offered": self.ltdm.offered,
            "ltdm_seq": self.ltdm._seq,
            "carry": list(self.splicer.carry),
            "carry_task": self.splicer.carry_task,
            "key_rng": self.splicer.key_rng.bit_generator.state,
            "steps_added": self.steps_added,
            "chunks_added": self.chunks_added,
        }

    @classmethod
    def from_state(cls, state: dict) -> "AugmentedBuffer":
        rng = np.random.default_rng()
        rng.bit_generator.state = state["key_rng"]
        buf = cls(state["fifo_steps"], state["ltdm_chunks"], state["chunk_size"], rng)
        for c in state["fifo"]:
            buf.fifo.chunks.append(c)
            buf.fifo.stored_steps += len(c)
        buf.ltdm._heap = list(state["ltdm_heap"])
        buf.ltdm.offered = state["ltdm_offered"]
        buf.ltdm._seq = state["ltdm_seq"]
        buf.splicer.carry = list(state["carry"])
        buf.splicer.carry_task = state["carry_task"]
        buf.steps_added = state["steps_added"]
        buf.chunks_added = state["chunks_added"]
        return buf


def sample_minibatch(
    aug: AugmentedBuffer, batch_size: int, batch_length: int, rng: np.random.Generator
) -> Batch:
    """Pick FIFO or LTDM uniformly, then draw windows uniformly from it.

    Falls back to the FIFO while the reservoir holds fewer than
    ``batch_size`` chunks.
    """
    fifo, ltdm = aug.fifo.items(), aug.ltdm.items()
    if not fifo and not ltdm:
        raise ValueError("cannot sample from an empty buffer")
    if batch_length > aug.chunk_size:
        raise ValueError("batch_length exceeds chunk_size")
    if len(ltdm) < batch_size:
        source, pool = "fifo", fifo
    else:
        source, pool = ("fifo", fifo) if rng.random() < 0.5 else ("ltdm", ltdm)
    if not pool:
        source, pool = ("ltdm", ltdm) if source == "fifo" else ("fifo", fifo)
    which = rng.integers(0, len(pool), size=batch_size)
    starts = rng.integers(0, aug.chunk_size - batch_length + 1, size=batch_size)
    sl = [(pool[i], s) for i, s in zip(which, starts)]

    def gather(attr):
        return np.stack([getattr(c, attr)[s : s + batch_length] for c, s in sl])

    return Batch(
        obs=gather("obs"),
        action=gather("action"),
        reward=gather("reward"),
        is_first=gather("is_first"),
        is_terminal=gather("is_terminal"),
        source=source,
        origins=[(int(i), int(s)) for i, s in zip(which, starts)],
    )
