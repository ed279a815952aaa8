"""Run configuration, checkpoints, evaluation, rendering, gradient checks.

The checkpoint container is a single binary blob: magic ``VPRP``, a u32
format version, a u32 tensor count, the tensors sorted by name (u16 name
length + utf-8 name, u8 rank, u32 dims, float32 little-endian payload),
and a trailing u64 FNV-1a checksum over everything before it.  Loading
refuses bad magic, unknown versions and checksum mismatches outright.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .actions import ACTION_OFFSETS, N_ACTIONS
from .oracle import astar_next_move, shortest_path
from .planners import (VARIANTS, PlannerConfig, PlannerParams, choose_depth,
                       fast_policy_logits, mvprop_rollout, value_maps, vprop_rollout)
from .trainer import EpisodePolicy, Hyperparams, format_metrics
from .world import KINDS, WIN, generate, observe, step


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Everything a training run needs; serializes to canonical JSON."""

    variant: str = "mvprop"
    env_kind: str = "static"
    train_sizes: tuple = (8, 12)
    episodes: int = 20000
    seed: int = 0
    curriculum: bool = True
    curriculum_period: int = 2500
    eval_every: int = 0            # 0 disables periodic greedy evaluation
    eval_sizes: tuple = ()         # () falls back to max(train_sizes)
    eval_episodes: int = 40
    early_stop_win_rate: float | None = None  # stop once every eval size passes
    keep_best: bool = False        # return the eval-best parameter snapshot
    log_every: int = 0             # 0 keeps training silent
    outdir: str | None = None
    hyperparams: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        self.train_sizes = tuple(int(s) for s in self.train_sizes)
        self.eval_sizes = tuple(int(s) for s in self.eval_sizes)
        if self.variant not in VARIANTS:
            raise ValueError(f"RunConfig: unknown variant {self.variant!r}")
        if self.env_kind not in KINDS:
            raise ValueError(f"RunConfig: unknown env kind {self.env_kind!r}")
        if not self.train_sizes or min(self.train_sizes) < 6:
            raise ValueError("RunConfig: train_sizes must all be >= 6")
        if self.episodes < 1:
            raise ValueError("RunConfig: episodes must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_sizes"] = list(self.train_sizes)
        d["eval_sizes"] = list(self.eval_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        hp = d.pop("hyperparams", None)
        if hp is not None and not isinstance(hp, Hyperparams):
            hp = Hyperparams.from_dict(hp)
        return cls(hyperparams=hp or Hyperparams(), **d)

    def to_json(self) -> str:
        """Canonical form: keys sorted, two-space indent, trailing newline."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_MAGIC = b"VPRP"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint blob fails validation (magic, version, checksum, layout)."""


def _fnv1a(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def checkpoint_bytes(named: dict) -> bytes:
    """Serialize name -> array to the VPRP container (float32, little-endian)."""
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(named))
    for name in sorted(named):
        arr = np.ascontiguousarray(np.asarray(named[name], dtype="<f4"))
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += struct.pack("<Q", _fnv1a(bytes(buf)))
    return bytes(buf)


def parse_checkpoint(blob: bytes) -> dict:
    """Inverse of :func:`checkpoint_bytes`; refuses anything malformed."""
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 + 8:
        raise CheckpointError("checkpoint: truncated blob")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"checkpoint: bad magic {blob[:4]!r}")
    (stored,) = struct.unpack("<Q", blob[-8:])
    if _fnv1a(blob[:-8]) != stored:
        raise CheckpointError("checkpoint: checksum mismatch")
    try:
        off = 4
        version, count = struct.unpack_from("<II", blob, off)
        off += 8
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint: unsupported version {version}")
        named = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            end = off + 4 * n
            if end > len(blob) - 8:
                raise CheckpointError("checkpoint: tensor payload overruns blob")
            named[name] = np.frombuffer(blob, dtype="<f4", count=n,
                                        offset=off).reshape(shape).copy()
            off = end
        if off != len(blob) - 8:
            raise CheckpointError("checkpoint: trailing bytes after tensors")
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"checkpoint: malformed blob ({e})") from e
    return named


def save_checkpoint(path, params: PlannerParams) -> None:
    named = {k: v.data for k, v in params.arrays.items()}
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(named))


def _config_from_arrays(named: dict) -> PlannerConfig:
    try:
        c1, c2 = named["embed.conv1.w"], named["embed.conv2.w"]
    except KeyError as e:
        raise CheckpointError(f"checkpoint: missing tensor {e}") from e
    hidden, obs_ch = int(c1.shape[0]), int(c1.shape[1])
    fields = int(c2.shape[0])
    if "vin.pv" in named:
        return PlannerConfig("vin", obs_ch, hidden, reward_channels=fields)
    if fields == 2:
        return PlannerConfig("mvprop", obs_ch, hidden)
    if fields == 3:
        return PlannerConfig("vprop", obs_ch, hidden)
    raise CheckpointError(f"checkpoint: cannot infer variant from {fields} field channels")


def load_checkpoint(path) -> PlannerParams:
    """Read a VPRP file back into parameters; the variant is inferred."""
    with open(path, "rb") as fh:
        named = parse_checkpoint(fh.read())
    params = PlannerParams.create(_config_from_arrays(named), seed=0)
    try:
        params.load_arrays(named)
    except ValueError as e:
        raise CheckpointError(f"checkpoint: {e}") from e
    return params


def save_run_artifacts(cfg: RunConfig, params: PlannerParams, rows) -> None:
    """Write config.json, metrics.csv and checkpoint.vprp under cfg.outdir."""
    os.makedirs(cfg.outdir, exist_ok=True)
    with open(os.path.join(cfg.outdir, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    with open(os.path.join(cfg.outdir, "metrics.csv"), "w") as fh:
        fh.write(format_metrics(rows))
    save_checkpoint(os.path.join(cfg.outdir, "checkpoint.vprp"), params)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class SizeStats:
    size: int
    episodes: int
    wins: int
    win_rate: float
    mean_extra_steps: float | None   # steps beyond oracle-optimal, wins only
    reward_min: float
    reward_mean: float
    reward_max: float


@dataclass
class EvalReport:
    env_kind: str
    policy: str
    stats: list

    def by_size(self) -> dict:
        return {s.size: s for s in self.stats}

    def to_dict(self) -> dict:
        return {"env_kind": self.env_kind, "policy": self.policy,
                "stats": [asdict(s) for s in self.stats]}


def greedy_policy(params: PlannerParams):
    """Per-episode greedy actor; static maps reuse one forward pass."""
    def factory(world):
        ep = EpisodePolicy(params, choose_depth(*world.dims),
                           static=not world.entities)
        return lambda w, obs, pos: ep.greedy(obs, pos)
    return factory, "greedy"


def oracle_policy():
    """Walks an exact shortest path over the static walls, ignoring entities."""
    def factory(world):
        def act(w, obs, pos):
            nxt = astar_next_move(w.walls, set(), tuple(pos), w.goal)
            if nxt is None:
                return 0
            return ACTION_OFFSETS.index((nxt[0] - pos[0], nxt[1] - pos[1]))
        return act
    return factory, "oracle"


def random_policy(seed: int):
    rng = np.random.default_rng(np.random.PCG64(seed))

    def factory(world):
        return lambda w, obs, pos: int(rng.integers(N_ACTIONS))
    return factory, "random"


def run_episode(world, act) -> tuple:
    """Drive one episode with act(world, obs, pos); returns (outcome, steps, reward)."""
    obs, pos = observe(world)
    total = 0.0
    while True:
        _, res, nxt = step(world, act(world, obs, pos))
        total += res.reward
        if res.terminal:
            return world.outcome, world.step_count, total
        obs, pos = nxt


def evaluate(params, sizes, episodes_per_size: int, seed: int,
             env_kind: str = "static", policy=None) -> EvalReport:
    """Win rate, optimality gap and reward stats on fresh seeded maps.

    `policy` overrides the default greedy actor with a (factory, name) pair
    as produced by :func:`oracle_policy` / :func:`random_policy`; the
    optimality gap is measured against the walls-only shortest path.
    """
    factory, name = policy if policy is not None else greedy_policy(params)
    children = np.random.SeedSequence(seed).spawn(len(sizes))
    stats = []
    for size, child in zip(sizes, children):
        rng = np.random.default_rng(child)
        wins, extras, rewards = 0, [], []
        for _ in range(episodes_per_size):
            world = generate(env_kind, (size, size), rng)
            optimal = shortest_path(world.walls, world.agent, world.goal, "hops").steps
            outcome, steps, reward = run_episode(world, factory(world))
            rewards.append(reward)
            if outcome == WIN:
                wins += 1
                extras.append(steps - optimal)
        stats.append(SizeStats(
            size=size, episodes=episodes_per_size, wins=wins,
            win_rate=wins / episodes_per_size,
            mean_extra_steps=(float(np.mean(extras)) if extras else None),
            reward_min=float(np.min(rewards)), reward_mean=float(np.mean(rewards)),
            reward_max=float(np.max(rewards)),
        ))
    return EvalReport(env_kind=env_kind, policy=name, stats=stats)


# ---------------------------------------------------------------------------
# rendering


ARROW_CHARS = ("^", "7", ">", "J", "v", "L", "<", "F")  # one per action, N clockwise


def render_pgm(v: np.ndarray, walls: np.ndarray, goal) -> bytes:
    """Binary PGM (P5) of a value map, linearly scaled to 0..255.

    A uniform map renders mid-gray; wall cells are forced to 0 and the goal
    cell to 255 after scaling.
    """
    v = np.asarray(v, dtype=np.float64)
    h, w = v.shape
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < 1e-12:
        img = np.full((h, w), 128, dtype=np.uint8)
    else:
        img = np.clip(np.rint(255.0 * (v - lo) / (hi - lo)), 0, 255).astype(np.uint8)
    img[np.asarray(walls, dtype=bool)] = 0
    img[goal] = 255
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def render_arrows(params: PlannerParams, world, depth: int | None = None) -> str:
    """Per-cell greedy-action glyphs: walls '#', goal 'G', agent 'A'."""
    if depth is None:
        depth = choose_depth(*world.dims)
    obs, _ = observe(world)
    v, q = value_maps(params, obs[None], depth)
    head = q[0] if params.cfg.variant == "vin" else v[0]
    h, w = world.walls.shape
    lines = []
    for i in range(h):
        row = []
        for j in range(w):
            if world.walls[i, j]:
                row.append("#")
            elif (i, j) == world.goal:
                row.append("G")
            elif (i, j) == world.agent:
                row.append("A")
            else:
                row.append(ARROW_CHARS[int(np.argmax(
                    fast_policy_logits(head, (i, j), params)))])
        lines.append("".join(row))
    return "\n".join(lines) + "\n"


def render_value_pgm(params: PlannerParams, world, depth: int | None = None) -> bytes:
    if depth is None:
        depth = choose_depth(*world.dims)
    obs, _ = observe(world)
    v, _ = value_maps(params, obs[None], depth)
    return render_pgm(v[0], world.walls, world.goal)


# ---------------------------------------------------------------------------
# gradient-check suite


GRADCHECK_TOLERANCE = 1e-4


def run_gradcheck_suite(instances: int = 50, seed: int = 0) -> dict:
    """Max finite-difference error per differentiable building block.

    Every case draws fresh float64 inputs and a fixed random readout vector
    (the checked function must be scalar-valued), repeated `instances`
    times; the reported number is the worst coordinate over all draws.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    results = {}

    def p64(a):
        return T.param(np.asarray(a, dtype=np.float64), dtype=np.float64)

    def c64(a):
        return T.constant(np.asarray(a, dtype=np.float64), dtype=np.float64)

    def readout(shape):
        return rng.uniform(-1.0, 1.0, size=shape)

    def run(name, draw, step=1e-3):
        worst = 0.0
        for _ in range(instances):
            x, f = draw()
            worst = max(worst, T.grad_check(f, x, step=step))
        results[name] = worst

    # convolution, each leaf in turn
    def conv_case(leaf):
        def draw():
            x = rng.uniform(-1, 1, (2, 3, 4, 4))
            w = rng.uniform(-1, 1, (2, 3, 3, 3)) / 3.0
            b = rng.uniform(-0.5, 0.5, (2,))
            wv = readout((2, 2, 4, 4))
            parts = {"x": x, "w": w, "b": b}
            var = p64(parts.pop(leaf))
            consts = {k: c64(v) for k, v in parts.items()}

            def f(t):
                args = dict(consts)
                args[leaf] = t
                return T.wsum(T.conv2d(args["x"], args["w"], args["b"], padding=1), wv)
            return var, f
        return draw

    run("conv2d/input", conv_case("x"))
    run("conv2d/weight", conv_case("w"))
    run("conv2d/bias", conv_case("b"))

    def sigmoid_case():
        x = p64(rng.uniform(-3, 3, (4, 5)))
        wv = readout((4, 5))
        return x, lambda t: T.wsum(T.sigmoid(t), wv)
    run("sigmoid", sigmoid_case)

    def softmax_case():
        x = p64(rng.uniform(-2, 2, (3, 8)))
        wv = readout((3, 8))
        return x, lambda t: T.wsum(T.softmax_logp(t), wv)
    run("softmax_logp", softmax_case)

    def chmax_case():
        x = p64(rng.uniform(-1, 1, (2, 3, 4, 4)))
        wv = readout((2, 4, 4))
        return x, lambda t: T.wsum(T.channel_max(t), wv)
    run("channel_max", chmax_case)

    def mvprop_case(leaf):
        def draw():
            r = rng.uniform(0.05, 0.95, (4, 4))
            p = rng.uniform(0.05, 0.95, (4, 4))
            wv = readout((4, 4))
            fields = {"r": r, "p": p}
            var = p64(fields.pop(leaf))
            const = {k: c64(v) for k, v in fields.items()}

            def f(t):
                args = dict(const)
                args[leaf] = t
                return T.wsum(mvprop_rollout(args, depth=3), wv)
            return var, f
        return draw

    # The rollouts are piecewise smooth with max kinks between pieces; a small
    # step keeps finite differences inside one piece almost surely, and the
    # step-scaled gate in grad_check skips any coordinate still straddling.
    run("mvprop_rollout/r", mvprop_case("r"), step=1e-5)
    run("mvprop_rollout/p", mvprop_case("p"), step=1e-5)

    def vprop_case(leaf):
        def draw():
            fields = {"rin": rng.uniform(0.0, 0.3, (4, 4)),
                      "rout": rng.uniform(0.0, 0.3, (4, 4)),
                      "p": rng.uniform(0.3, 0.95, (4, 4))}
            wv = readout((4, 4))
            var = p64(fields.pop(leaf))
            const = {k: c64(v) for k, v in fields.items()}

            def f(t):
                args = dict(const)
                args[leaf] = t
                return T.wsum(vprop_rollout(args, depth=3), wv)
            return var, f
        return draw

    run("vprop_rollout/rin", vprop_case("rin"), step=1e-5)
    run("vprop_rollout/rout", vprop_case("rout"), step=1e-5)
    run("vprop_rollout/p", vprop_case("p"), step=1e-5)

    def value_head_case(leaf):
        def draw():
            parts = {"x": rng.uniform(-1, 1, (4, 12)),
                     "w": rng.uniform(-1, 1, (12,)),
                     "b": rng.uniform(-0.5, 0.5, (1,))}
            wv = readout((4,))
            var = p64(parts.pop(leaf))
            const = {k: c64(v) for k, v in parts.items()}

            def f(t):
                args = dict(const)
                args[leaf] = t
                return T.wsum(T.affine_vec(args["x"], args["w"], args["b"]), wv)
            return var, f
        return draw

    run("value_head/input", value_head_case("x"))
    run("value_head/weight", value_head_case("w"))
    run("value_head/bias", value_head_case("b"))

    return results
