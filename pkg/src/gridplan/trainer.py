"""Off-policy actor-critic training on replayed grid-world transitions.

Transitions are n-step: each stores the discounted reward sum over up to
n_step consecutive environment steps plus the state reached at the end of
that window (absent when the window runs into episode termination).  They
carry the full behavior-policy probability vector of the first step;
updates re-weight each replayed sample by the capped ratio of current to
behavior probability of that first action.  One RMSProp step per update
period sums three objective terms over the minibatch:

  * policy ascent on the capped-importance-weighted n-step advantage,
  * a regularizer pulling the current policy toward the behavior
    probabilities (gradient vanishes when they agree),
  * critic descent on the squared n-step bootstrap error, weighted down
    so the critic's effective learning rate is a fraction of the policy's
    (the two share the embedding weights, so the ratio matters).

Bootstrapping multiplies gamma**n_actual times the value of the window-end
state by one exactly when that state is non-terminal.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .actions import N_ACTIONS
from .planners import PlannerConfig, PlannerParams, choose_depth, fast_policy_logits, plan, value_maps
from .world import (WIN, CurriculumState, MapGenerationError, curriculum_filter,
                    generate, observe, resample_start_goal, step)


class TrainingDiverged(RuntimeError):
    """A parameter went non-finite after an update."""


@dataclass
class Hyperparams:
    gamma: float = 0.99
    importance_cap: float = 10.0
    lr: float = 1e-3             # RMSProp base rate = policy learning rate
    critic_scale: float = 0.01   # critic rate as a fraction of lr
    reg_scale: float = 1.0       # behavior-anchor weight as a fraction of lr
    n_step: int = 24             # reward-aggregation window per transition
    batch_size: int = 128
    buffer_capacity: int = 50000
    update_period: int = 32
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 1e-8

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(**d)


@dataclass
class Transition:
    obs: np.ndarray            # uint8 [5,h,w] at s
    pos: tuple
    action: int
    reward: float              # discounted sum over the n_actual-step window
    probs: np.ndarray          # full behavior distribution at s, float32 [8]
    next_obs: np.ndarray | None  # state after n_actual steps; None iff terminal
    next_pos: tuple | None
    terminal: bool             # window ran into episode termination
    n_actual: int = 1          # environment steps the window spans


def nstep_transition(pending: list, gamma: float, nxt, terminal: bool) -> Transition:
    """Fold raw (obs, pos, action, reward, probs) steps into one transition.

    `pending` is the window in time order; `nxt` is the (obs, pos) pair at
    the window's end, or None when the episode terminated there.
    """
    obs, pos, action, _, probs = pending[0]
    reward = 0.0
    for k, raw in enumerate(pending):
        reward += gamma ** k * raw[3]
    nobs, npos = nxt if nxt is not None else (None, None)
    return Transition(obs=obs, pos=pos, action=action, reward=reward,
                      probs=probs, next_obs=nobs, next_pos=npos,
                      terminal=terminal, n_actual=len(pending))


class ReplayBuffer:
    """Fixed-capacity ring; sampling is uniform with replacement."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("ReplayBuffer: capacity must be positive")
        self.capacity = capacity
        self._data: list = []
        self._next = 0

    def add(self, tr: Transition) -> None:
        if len(self._data) < self.capacity:
            self._data.append(tr)
        else:
            self._data[self._next] = tr
        self._next = (self._next + 1) % self.capacity

    def sample(self, rng: np.random.Generator, n: int) -> list:
        if not self._data:
            return []
        idx = rng.integers(0, len(self._data), size=n)
        return [self._data[int(k)] for k in idx]

    def __len__(self) -> int:
        return len(self._data)


def importance_weights(pi: np.ndarray, behavior: np.ndarray, cap: float) -> np.ndarray:
    """min(pi / behavior, cap), elementwise; behavior must be positive."""
    if np.any(behavior <= 0):
        raise ValueError("importance_weights: behavior probabilities must be positive")
    return np.minimum(np.asarray(pi, np.float64) / np.asarray(behavior, np.float64), cap)


# ---------------------------------------------------------------------------
# acting


class EpisodePolicy:
    """Per-episode forward cache.

    On static worlds (no entities) the observation is constant, so the
    embedding and value rollout are computed once and reused until an
    update changes the parameters; dynamic worlds recompute every step.
    """

    def __init__(self, params: PlannerParams, depth: int, static: bool):
        self.params = params
        self.depth = depth
        self.static = static
        self._maps = None

    def invalidate(self) -> None:
        self._maps = None

    def _forward(self, obs: np.ndarray):
        if self.static and self._maps is not None:
            return self._maps
        maps = value_maps(self.params, obs[None], self.depth)
        if self.static:
            self._maps = maps
        return maps

    def logits(self, obs: np.ndarray, pos) -> np.ndarray:
        v, q = self._forward(obs)
        head = q[0] if self.params.cfg.variant == "vin" else v[0]
        return fast_policy_logits(head, pos, self.params)

    def distribution(self, obs: np.ndarray, pos) -> np.ndarray:
        z = self.logits(obs, pos).astype(np.float64)
        z -= z.max()
        e = np.exp(z)
        return e / e.sum()

    def greedy(self, obs: np.ndarray, pos) -> int:
        return int(np.argmax(self.logits(obs, pos)))


def greedy_episode(params: PlannerParams, world, depth: int):
    """Run one greedy episode to termination; returns (outcome, steps, reward)."""
    policy = EpisodePolicy(params, depth, static=not world.entities)
    obs, pos = observe(world)
    total = 0.0
    while True:
        _, res, nxt = step(world, policy.greedy(obs, pos))
        total += res.reward
        if res.terminal:
            return world.outcome, world.step_count, total
        obs, pos = nxt


# ---------------------------------------------------------------------------
# the update


def update(batch: list, params: PlannerParams, opt: T.RmsProp, hp: Hyperparams) -> float:
    """One combined actor-critic RMSProp step over a replayed minibatch.

    Returns the summed surrogate loss.  An empty batch is a no-op.  The
    batch is grouped by map size; gradients accumulate across groups into
    one optimizer step.
    """
    if not batch:
        return 0.0
    groups: dict = {}
    for tr in batch:
        groups.setdefault(tr.obs.shape[-2:], []).append(tr)

    total_loss = 0.0
    for (h, w), trs in groups.items():
        depth = choose_depth(w, h)
        n = len(trs)
        obs = np.stack([tr.obs for tr in trs]).astype(np.float32)
        pos = np.array([tr.pos for tr in trs])
        actions = np.array([tr.action for tr in trs])
        rewards = np.array([tr.reward for tr in trs], dtype=np.float64)
        behavior = np.stack([tr.probs for tr in trs]).astype(np.float64)
        nonterm = np.array([not tr.terminal for tr in trs])
        boot = hp.gamma ** np.array([tr.n_actual for tr in trs], dtype=np.float64)

        v_next = np.zeros(n, dtype=np.float64)
        if nonterm.any():
            nidx = np.flatnonzero(nonterm)
            nobs = np.stack([trs[k].next_obs for k in nidx]).astype(np.float32)
            npos = np.array([trs[k].next_pos for k in nidx])
            _, nval, _ = plan(params, nobs, npos, depth, want_value=True)
            v_next[nidx] = nval.data.astype(np.float64)

        with T.Tape() as tape:
            logits, value, _ = plan(params, obs, pos, depth, want_value=True)
            logp = T.softmax_logp(logits)
            bidx = np.arange(n)
            pi_a = np.exp(logp.data[bidx, actions].astype(np.float64))
            rho = importance_weights(pi_a, behavior[bidx, actions], hp.importance_cap)
            target = rewards + boot * v_next * nonterm
            adv = target - value.data.astype(np.float64)

            picked = T.select_index(logp, actions)
            policy_term = T.wsum(picked, -(rho * adv))
            reg_term = T.wsum(logp, -hp.reg_scale * behavior)
            diff = T.sub(value, T.constant(target, dtype=value.dtype))
            critic_term = T.wsum(T.mul(diff, diff), 0.5 * hp.critic_scale * rho)
            loss = T.add(T.add(policy_term, reg_term), critic_term)
            tape.backward(loss)
        total_loss += float(loss.data[0])

    opt.step()
    for name in sorted(params.arrays):
        if not np.isfinite(params.arrays[name].data).all():
            raise TrainingDiverged(
                f"parameter {name} went non-finite after an update; batch: "
                f"{len(batch)} transitions, rewards "
                f"[{min(tr.reward for tr in batch):.3f}, {max(tr.reward for tr in batch):.3f}], "
                f"sizes {sorted({tr.obs.shape[-2:] for tr in batch})}")
    return total_loss


# ---------------------------------------------------------------------------
# the training loop


METRICS_HEADER = "episode,steps,reward,win,curriculum_bound,wall_clock_s"


def _sample_training_world(kind: str, size: int, rng, curriculum):
    for _ in range(200):
        world = generate(kind, (size, size), rng)
        if curriculum is None or curriculum_filter(world, curriculum):
            return world
        if resample_start_goal(world, curriculum.bound, rng):
            return world
    raise MapGenerationError(
        f"no {kind} map of size {size} satisfied curriculum bound")


def greedy_win_rate(params: PlannerParams, kind: str, size: int, episodes: int,
                    seed: int) -> float:
    """Greedy success rate over `episodes` fresh seeded maps of one size."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    depth = choose_depth(size, size)
    wins = 0
    for _ in range(episodes):
        world = generate(kind, (size, size), rng)
        outcome, _, _ = greedy_episode(params, world, depth)
        wins += outcome == WIN
    return wins / episodes


def train(cfg, params: PlannerParams | None = None):
    """Run the full training loop described by a RunConfig.

    Returns (params, metrics_rows).  With cfg.keep_best, the returned
    parameters are the periodic-evaluation snapshot whose worst per-size
    greedy rate was highest, not the final ones.  When cfg.outdir is set,
    also writes metrics.csv, config.json and checkpoint.vprp there.  The
    run is fully determined
    by (cfg, initial params): two runs with the same config produce the
    same transitions, updates and metrics (wall-clock column aside).
    """
    hp = cfg.hyperparams
    ss = np.random.SeedSequence(cfg.seed)
    s_init, s_maps, s_act, s_sample, s_eval = ss.spawn(5)
    if params is None:
        params = PlannerParams.create(PlannerConfig(variant=cfg.variant),
                                      seed=int(s_init.generate_state(1)[0]))
    opt = T.RmsProp(params.parameters(), lr=hp.lr, decay=hp.rmsprop_decay,
                    eps=hp.rmsprop_eps)
    buffer = ReplayBuffer(hp.buffer_capacity)
    map_rng = np.random.default_rng(s_maps)
    act_rng = np.random.default_rng(s_act)
    sample_rng = np.random.default_rng(s_sample)
    eval_seed = int(s_eval.generate_state(1)[0])

    curriculum = None
    if cfg.curriculum:
        top = max(cfg.train_sizes)
        curriculum = CurriculumState.for_dims(top, top,
                                              period=cfg.curriculum_period)

    sizes = list(cfg.train_sizes)
    rows = []
    env_steps = 0
    best_score, best_arrays = -1.0, None
    t0 = time.monotonic()
    for episode in range(cfg.episodes):
        size = sizes[int(map_rng.integers(len(sizes)))]
        world = _sample_training_world(cfg.env_kind, size, map_rng, curriculum)
        depth = choose_depth(*world.dims)
        policy = EpisodePolicy(params, depth, static=not world.entities)
        obs, pos = observe(world)
        ep_reward, won = 0.0, False
        pending: list = []
        while True:
            probs = policy.distribution(obs, pos)
            action = int(act_rng.choice(N_ACTIONS, p=probs))
            _, res, nxt = step(world, action)
            pending.append((obs, pos, action, res.reward,
                            probs.astype(np.float32)))
            if len(pending) == hp.n_step:
                buffer.add(nstep_transition(pending, hp.gamma, nxt, res.terminal))
                pending.pop(0)
            if res.terminal:
                while pending:
                    buffer.add(nstep_transition(pending, hp.gamma, None, True))
                    pending.pop(0)
            ep_reward += res.reward
            env_steps += 1
            if env_steps % hp.update_period == 0 and len(buffer) >= hp.batch_size:
                update(buffer.sample(sample_rng, hp.batch_size), params, opt, hp)
                policy.invalidate()
            if res.terminal:
                won = world.outcome == WIN
                break
            obs, pos = nxt

        rows.append({
            "episode": episode,
            "steps": world.step_count,
            "reward": ep_reward,
            "win": int(won),
            "curriculum_bound": curriculum.bound if curriculum else 0,
            "wall_clock_s": time.monotonic() - t0,
        })
        if curriculum:
            curriculum.advance()
        if cfg.log_every and (episode + 1) % cfg.log_every == 0:
            recent = rows[-cfg.log_every:]
            print(f"episode {episode + 1}: train-win "
                  f"{sum(r['win'] for r in recent) / len(recent):.3f} "
                  f"bound {rows[-1]['curriculum_bound']} "
                  f"elapsed {rows[-1]['wall_clock_s']:.1f}s", flush=True)
        if cfg.eval_every and (episode + 1) % cfg.eval_every == 0:
            eval_sizes = cfg.eval_sizes or (max(sizes),)
            rates = [greedy_win_rate(params, cfg.env_kind, s,
                                     cfg.eval_episodes, eval_seed + episode)
                     for s in eval_sizes]
            if cfg.log_every:
                detail = " ".join(f"{s}:{r:.3f}" for s, r in zip(eval_sizes, rates))
                print(f"episode {episode + 1}: greedy eval win {detail}", flush=True)
            if cfg.keep_best and min(rates) > best_score:
                best_score = min(rates)
                best_arrays = {k: a.data.copy() for k, a in params.arrays.items()}
            if (cfg.early_stop_win_rate is not None
                    and min(rates) >= cfg.early_stop_win_rate):
                break

    if cfg.keep_best and best_arrays is not None:
        params.load_arrays(best_arrays)
    if cfg.outdir:
        from .harness import save_run_artifacts  # deferred: harness builds on trainer
        save_run_artifacts(cfg, params, rows)
    return params, rows


def format_metrics(rows) -> str:
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(f"{r['episode']},{r['steps']},{r['reward']:.10g},{r['win']},"
                     f"{r['curriculum_bound']},{r['wall_clock_s']:.3f}")
    return "\n".join(lines) + "\n"
