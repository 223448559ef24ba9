"""Ring replay buffer with eviction-protected demo rows.

Demo originals are written first and never evicted; everything added later
(rollouts and relabellings) lives in a ring over the remaining capacity.
"""

from __future__ import annotations

import numpy as np

from .agent import Batch


class ReplayBuffer:
    def __init__(self, capacity: int, state_dim: int, goal_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.state = np.zeros((capacity, state_dim))
        self.a_cont = np.zeros((capacity, 2))
        self.a_stamp = np.zeros(capacity, dtype=np.int8)
        self.next_state = np.zeros((capacity, state_dim))
        self.goal = np.zeros((capacity, goal_dim))
        self.reward = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.demo = np.zeros(capacity, dtype=bool)
        self.success = np.zeros(capacity, dtype=bool)
        self.t = np.zeros(capacity, dtype=np.int32)
        self.horizon = np.zeros(capacity, dtype=np.int32)
        self.n_protected = 0
        self.size = 0
        self._write = 0

    def add_many(
        self,
        state: np.ndarray,
        a_cont: np.ndarray,
        a_stamp: np.ndarray,
        next_state: np.ndarray,
        goal: np.ndarray,
        reward: np.ndarray,
        done: np.ndarray,
        demo: bool,
        success: bool,
        t: np.ndarray,
        horizon: np.ndarray,
        protected: bool = False,
    ) -> None:
        """Append a block of transitions; protected rows must come first."""
        n = len(reward)
        if protected:
            if self.size != self.n_protected:
                raise RuntimeError("protected rows must be added before any others")
            if self.n_protected + n > self.capacity:
                raise RuntimeError("capacity too small for protected transitions")
            rows = np.arange(self.n_protected, self.n_protected + n)
            self.n_protected += n
            self._write = self.n_protected
        else:
            rows = np.empty(n, dtype=np.int64)
            free = self.capacity - self.n_protected
            if n > free:
                raise RuntimeError("block larger than unprotected capacity")
            for i in range(n):
                if self._write >= self.capacity:
                    self._write = self.n_protected
                rows[i] = self._write
                self._write += 1
        self.state[rows] = state
        self.a_cont[rows] = a_cont
        self.a_stamp[rows] = a_stamp
        self.next_state[rows] = next_state
        self.goal[rows] = goal
        self.reward[rows] = reward
        self.done[rows] = done
        self.demo[rows] = demo
        self.success[rows] = success
        self.t[rows] = t
        self.horizon[rows] = horizon
        self.size = max(self.size, int(rows.max()) + 1)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(
            state=self.state[idx],
            a_cont=self.a_cont[idx],
            a_stamp=self.a_stamp[idx],
            next_state=self.next_state[idx],
            goal=self.goal[idx],
            reward=self.reward[idx],
            demo=self.demo[idx],
            success=self.success[idx],
            t=self.t[idx],
            horizon=self.horizon[idx],
        )

    def __len__(self) -> int:
        return self.size
