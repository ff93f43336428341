"""Tracking MDP: 334-d state construction, alignment reward, and episode
termination (step cap, mask exit, sharp angle).

State layout: 45 SH coefficients at the current position and its 6 axis
neighbors (315), last 4 tracking directions newest-first (12, zero-padded),
and the interpolated mask value at the same 7 positions (7).

`BatchTracker` steps many episodes in lockstep with numpy; `TrackingEnv`
is the single-episode wrapper around it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .phantom import sample_field

STATE_DIM = 334
N_HISTORY = 4

REASON_NONE = "none"
REASON_MAX_STEPS = "max_steps"
REASON_LEFT_MASK = "left_mask"
REASON_SHARP_ANGLE = "sharp_angle"


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    step_size: float = 0.5
    max_steps: int = 530
    max_angle_deg: float = 60.0
    neighbor_offset: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.step_size <= 1.0):
            raise ValueError(f"step_size must be in (0, 1], got {self.step_size}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")


@dataclass
class StepOutcome:
    next_state: np.ndarray
    reward: float
    done: bool
    reason: str


_OFFSET_SIGNS = np.array([
    [0, 0, 0],
    [1, 0, 0], [-1, 0, 0],
    [0, 1, 0], [0, -1, 0],
    [0, 0, 1], [0, 0, -1],
], dtype=np.float64)


def build_states(phantom, mask_values, positions, histories, neighbor_offset=1.0):
    """334-d states for a batch: positions (N,3), histories (N,4,3) newest-first."""
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    probe = pos[:, None, :] + neighbor_offset * _OFFSET_SIGNS[None, :, :]
    flat = probe.reshape(-1, 3)
    sh_feat = sample_field(phantom.sh, flat).reshape(n, 7 * 45)
    mask_feat = sample_field(mask_values, flat).reshape(n, 7)
    dir_feat = np.asarray(histories, dtype=np.float64).reshape(n, 3 * N_HISTORY)
    return np.concatenate([sh_feat, dir_feat, mask_feat], axis=1).astype(np.float32)


def reward(action, prev_dir, peaks):
    """Alignment reward: |max_i p_i . a| * (a . u_prev); u factor is 1 when
    there is no previous direction; empty peaks give 0."""
    a = np.asarray(action, dtype=np.float64)
    norm = np.linalg.norm(a)
    if norm == 0:
        raise EnvError("zero-norm action has no direction")
    a = a / norm
    peaks = np.asarray(peaks, dtype=np.float64).reshape(-1, 3)
    if peaks.shape[0] == 0:
        return 0.0
    align = np.abs(peaks @ a).max()
    if prev_dir is None:
        u_factor = 1.0
    else:
        u = np.asarray(prev_dir, dtype=np.float64)
        u_factor = float(a @ (u / np.linalg.norm(u)))
    return float(align * u_factor)


class BatchTracker:
    """Lockstep batch of tracking episodes over one phantom bundle."""

    def __init__(self, phantom, bundle_name, config):
        self.phantom = phantom
        self.config = config
        self.mask = phantom.mask_for(bundle_name).values
        self.bundle_name = bundle_name
        self._cos_limit = np.cos(np.deg2rad(config.max_angle_deg))
        self.n = 0

    def reset(self, seeds, dir_hints=None):
        """Start episodes at `seeds` (N,3); optional unit hints enter the
        direction history so policies can be steered at the seed."""
        seeds = np.atleast_2d(np.asarray(seeds, dtype=np.float64))
        mask_vals = sample_field(self.mask, seeds)
        if np.any(mask_vals < 0.5):
            bad = np.argmax(mask_vals < 0.5)
            raise EnvError(f"seed {seeds[bad]} lies outside the '{self.bundle_name}' mask")
        n = seeds.shape[0]
        self.n = n
        self.pos = seeds.copy()
        self.history = np.zeros((n, N_HISTORY, 3))
        self.prev_dir = np.zeros((n, 3))
        self.has_prev = np.zeros(n, dtype=bool)
        if dir_hints is not None:
            hints = np.atleast_2d(np.asarray(dir_hints, dtype=np.float64))
            norms = np.linalg.norm(hints, axis=1, keepdims=True)
            ok = norms[:, 0] > 0
            self.history[ok, 0] = hints[ok] / norms[ok]
        self.steps = np.zeros(n, dtype=np.int64)
        self.active = np.ones(n, dtype=bool)
        self.reasons = np.array([REASON_NONE] * n, dtype=object)
        self.points = np.zeros((n, self.config.max_steps + 1, 3), dtype=np.float32)
        self.points[:, 0] = seeds
        return self.states()

    def states(self):
        return build_states(self.phantom, self.mask, self.pos, self.history,
                            self.config.neighbor_offset)

    def _peak_alignment(self, actions):
        idx = np.clip(np.rint(self.pos).astype(int), 0,
                      np.asarray(self.phantom.grid.dims) - 1)
        counts = self.phantom.peak_counts[idx[:, 0], idx[:, 1], idx[:, 2]]
        dirs = self.phantom.peak_dirs[idx[:, 0], idx[:, 1], idx[:, 2]]
        dots = np.abs(np.einsum("nkj,nj->nk", dirs.astype(np.float64), actions))
        valid = np.arange(dirs.shape[1])[None, :] < counts[:, None]
        dots = np.where(valid, dots, -np.inf)
        align = dots.max(axis=1)
        return np.where(counts > 0, align, 0.0)

    def step(self, actions):
        """Advance every active episode one step.

        Returns (rewards, done, reasons) over the full batch; inactive
        episodes report reward 0 and keep their terminal reason.
        """
        if not self.active.any():
            raise EnvError("step on a batch with no active episodes")
        acts = np.asarray(actions, dtype=np.float64)
        norms = np.linalg.norm(acts, axis=1, keepdims=True)
        if np.any(norms[self.active] == 0):
            raise EnvError("zero-norm action has no direction")
        a = np.divide(acts, norms, out=np.zeros_like(acts), where=norms > 0)

        act = self.active
        rewards = np.zeros(self.n)
        align = self._peak_alignment(a)
        u_factor = np.where(self.has_prev, np.einsum("nj,nj->n", a, self.prev_dir), 1.0)
        rewards[act] = (align * u_factor)[act]

        cos_ang = np.einsum("nj,nj->n", a, self.prev_dir)
        done_angle = act & self.has_prev & (cos_ang < self._cos_limit)

        new_pos = self.pos + self.config.step_size * a
        mask_val = sample_field(self.mask, new_pos)
        done_mask = act & ~done_angle & (mask_val < 0.5)

        new_steps = self.steps + act.astype(np.int64)
        done_steps = act & ~done_angle & ~done_mask & (new_steps >= self.config.max_steps)

        self.pos[act] = new_pos[act]
        self.steps = new_steps
        self.points[act, new_steps[act]] = new_pos[act].astype(np.float32)
        self.history[act] = np.roll(self.history[act], 1, axis=1)
        self.history[act, 0] = a[act]
        self.prev_dir[act] = a[act]
        self.has_prev |= act

        self.reasons[done_angle] = REASON_SHARP_ANGLE
        self.reasons[done_mask] = REASON_LEFT_MASK
        self.reasons[done_steps] = REASON_MAX_STEPS
        done = done_angle | done_mask | done_steps
        self.active = act & ~done
        return rewards, done, self.reasons.copy()

    def streamlines(self):
        """Emitted streamlines so far, one (steps+1, 3) array per episode."""
        return [self.points[i, : self.steps[i] + 1].copy() for i in range(self.n)]


class TrackingEnv:
    """Single-episode convenience wrapper over BatchTracker."""

    def __init__(self, phantom, bundle_name, config=None):
        self.tracker = BatchTracker(phantom, bundle_name, config or EnvConfig())
        self._episode_open = False

    def reset(self, seed_position, initial_dir_hint=None):
        hints = None if initial_dir_hint is None else np.asarray(initial_dir_hint)[None, :]
        state = self.tracker.reset(np.asarray(seed_position)[None, :], hints)
        self._episode_open = True
        return state[0]

    def step(self, action):
        if not self._episode_open:
            raise EnvError("step on a finished episode")
        rewards, done, reasons = self.tracker.step(np.asarray(action)[None, :])
        if done[0]:
            self._episode_open = False
        reason = reasons[0] if done[0] else REASON_NONE
        return StepOutcome(next_state=self.tracker.states()[0], reward=float(rewards[0]),
                           done=bool(done[0]), reason=reason)

    @property
    def streamline(self):
        return self.tracker.streamlines()[0]
