"""Differentiable planners: shared embedding, three value recurrences, heads.

All three variants share the same shape of pipeline: a small convolutional
embedding turns the observation into per-cell fields, K iterations of a
local 3x3 recurrence propagate value across the grid with weights shared
over every iteration, and small heads read the neighborhood of the agent
cell into action logits and a scalar state value.

The recurrences accept fields shaped [h, w] or batched [B, h, w] (for the
convolutional variant, [d, h, w] / [B, d, h, w]); heads are batched-only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .actions import ACTION_OFFSETS, N_ACTIONS

VARIANTS = ("vin", "vprop", "mvprop")

_OOB_LOGIT_OFFSET = -10.0
_VPROP_EXCLUDED = -1e9  # inner-max fill: out-of-grid neighbors never win


@dataclass
class PlannerConfig:
    variant: str = "mvprop"
    obs_channels: int = 5
    hidden_channels: int = 8
    reward_channels: int = 1   # reward-map depth of the convolutional variant

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"PlannerConfig: unknown variant {self.variant!r}")

    @property
    def field_channels(self) -> int:
        if self.variant == "vin":
            return self.reward_channels
        return 3 if self.variant == "vprop" else 2


def choose_depth(dx: int, dy: int) -> int:
    """Recurrence depth that lets value cross the whole map: dx + dy."""
    return dx + dy


# value-head input: 8 neighbor values plus the flattened 3x3 observation patch
def _value_head_width(cfg: PlannerConfig) -> int:
    return N_ACTIONS + cfg.obs_channels * 9


class PlannerParams:
    """Named parameter arrays for one planner variant."""

    def __init__(self, cfg: PlannerConfig, arrays: dict):
        self.cfg = cfg
        self.arrays = arrays

    @classmethod
    def create(cls, cfg: PlannerConfig, seed: int, dtype=np.float32):
        rng = np.random.default_rng(np.random.PCG64(seed))

        def normal(shape, fan_in):
            return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

        c_obs, c_hid, c_out = cfg.obs_channels, cfg.hidden_channels, cfg.field_channels
        # Start the propagation field open (sigmoid(+2) ~ 0.88) and the reward
        # floor very low: a freshly created planner then turns its first
        # learned reward spike into a map-wide value gradient instead of
        # having to escape a flat-field equilibrium.  The floor matters twice:
        # training drifts it upward toward ~0.07 wherever it starts, and the
        # greedy signal on maps larger than the training sizes survives only
        # until the propagated goal value sinks below it, so a low start
        # buys the widest usable planning radius after training.
        field_bias = np.zeros(c_out)
        if cfg.variant == "mvprop":
            field_bias[:] = (-4.0, 2.0)
        elif cfg.variant == "vprop":
            field_bias[:] = (-2.0, -2.0, 2.0)
        arrays = {
            "embed.conv1.w": normal((c_hid, c_obs, 3, 3), fan_in=c_obs * 9),
            "embed.conv1.b": np.zeros(c_hid),
            "embed.conv2.w": normal((c_out, c_hid, 1, 1), fan_in=c_hid),
            "embed.conv2.b": field_bias,
            "value.w": np.zeros(_value_head_width(cfg)),
            "value.b": np.zeros(1),
        }
        if cfg.variant == "vin":
            d = cfg.reward_channels
            arrays["vin.pv"] = normal((N_ACTIONS, 1, 3, 3), fan_in=(1 + d) * 9)
            arrays["vin.pr"] = normal((N_ACTIONS, d, 3, 3), fan_in=(1 + d) * 9)
        else:
            # Neighbor values live in (0,1), so unit scale would leave the
            # softmax nearly uniform no matter how sharp the value map is;
            # starting at scale 10 lets the sampling policy exploit value
            # contrast as soon as it appears.
            arrays["policy.log_scale"] = np.full(1, np.log(10.0))
            arrays["policy.bias"] = np.zeros(1)
        return cls(cfg, {k: T.param(v, dtype=dtype) for k, v in arrays.items()})

    def __getitem__(self, name: str) -> T.DiffArray:
        return self.arrays[name]

    @property
    def dtype(self):
        return self.arrays["embed.conv1.w"].dtype

    def parameters(self):
        return [self.arrays[k] for k in sorted(self.arrays)]

    def load_arrays(self, named: dict) -> None:
        """Overwrite parameter values from plain arrays; names/shapes must match."""
        if set(named) != set(self.arrays):
            missing = set(self.arrays) ^ set(named)
            raise ValueError(f"load_arrays: name mismatch on {sorted(missing)}")
        for k, v in named.items():
            v = np.asarray(v, dtype=self.arrays[k].dtype)
            if v.shape != self.arrays[k].data.shape:
                raise ValueError(f"load_arrays: {k} has shape {v.shape}, "
                                 f"expected {self.arrays[k].data.shape}")
            self.arrays[k].data = v.copy()


# ---------------------------------------------------------------------------
# embedding


def embed(obs: T.DiffArray, params: PlannerParams) -> dict:
    """Map observation channels to per-cell propagation fields.

    3x3 padded conv to hidden channels, pointwise conv to the field
    channels, sigmoid-squashed into (0,1) for the propagation variants and
    left unsquashed as a reward map for the convolutional one.
    """
    cfg = params.cfg
    if obs.data.shape[-3] != cfg.obs_channels:
        raise T.ShapeError(
            f"embed: observation has {obs.data.shape[-3]} channels, "
            f"config expects {cfg.obs_channels}")
    hidden = T.conv2d(obs, params["embed.conv1.w"], params["embed.conv1.b"], padding=1)
    out = T.conv2d(hidden, params["embed.conv2.w"], params["embed.conv2.b"], padding=0)
    if cfg.variant == "vin":
        return {"r": out}
    squashed = T.sigmoid(out)
    if cfg.variant == "mvprop":
        return {"r": T.take_channel(squashed, 0), "p": T.take_channel(squashed, 1)}
    return {"rin": T.take_channel(squashed, 0), "rout": T.take_channel(squashed, 1),
            "p": T.take_channel(squashed, 2)}


# ---------------------------------------------------------------------------
# recurrences


def mvprop_rollout(fields: dict, depth: int) -> T.DiffArray:
    """K steps of max-propagation; v0 = r, values only ever grow.

    Each step maxes, over the 9-neighborhood, r + p * (v[neighbor] - r),
    which factorizes as p * (neighborhood max of v) + r * (1 - p) because
    p >= 0; out-of-grid neighbors contribute value 0.
    """
    r, p = fields["r"], fields["p"]
    rp = T.mul(r, T.affine_scalar(p, -1.0, 1.0))  # r * (1 - p), loop-invariant
    v = r
    for _ in range(depth):
        nmax = T.amax(T.shift_stack(v, fill=0.0), axis=0)
        v = T.emax(v, T.add(T.mul(p, nmax), rp))
    return v


def vprop_rollout(fields: dict, depth: int) -> T.DiffArray:
    """K steps of in/out value propagation; v0 = 0.

    Each step maxes p[c] * v[n] + rin[n] over the in-grid 9-neighborhood,
    subtracts rout[c], and keeps the running max with the previous v.
    Out-of-grid neighbors are excluded from the inner max.
    """
    rin, rout, p = fields["rin"], fields["rout"], fields["p"]
    rin9 = T.shift_stack(rin, fill=_VPROP_EXCLUDED)
    p9 = T.tile_leading(p, rin9.data.shape[0])
    v = T.constant(np.zeros_like(rin.data))
    for _ in range(depth):
        cand = T.add(T.mul(p9, T.shift_stack(v, fill=0.0)), rin9)
        v = T.emax(v, T.sub(T.amax(cand, axis=0), rout))
    return v


def vin_rollout(reward: T.DiffArray, params: PlannerParams, depth: int):
    """K alternations of a 3x3 conv over [v, r] and a channel max.

    Returns (v, q) after the final step; kernels are shared across steps
    and there is no conv bias.
    """
    rd = reward.data
    batched = rd.ndim == 4
    h, w = rd.shape[-2:]
    v_ch_shape = (rd.shape[0], 1, h, w) if batched else (1, h, w)
    kernel = T.concat((params["vin.pv"], params["vin.pr"]), axis=1)
    zero_bias = T.constant(np.zeros(N_ACTIONS, dtype=rd.dtype))
    v = T.constant(np.zeros((rd.shape[0], h, w) if batched else (h, w), dtype=rd.dtype))
    q = None
    ch_axis = 1 if batched else 0
    for _ in range(depth):
        v_ch = T.reshape(v, v_ch_shape)
        x = T.concat((v_ch, reward), axis=ch_axis)
        q = T.conv2d(x, kernel, zero_bias, padding=1)
        v = T.channel_max(q)
    return v, q


def rollout(fields: dict, params: PlannerParams, depth: int):
    """Run the variant's recurrence; returns (v, q-or-None)."""
    variant = params.cfg.variant
    if depth < 1:
        raise ValueError("rollout: depth must be >= 1")
    if variant == "mvprop":
        return mvprop_rollout(fields, depth), None
    if variant == "vprop":
        return vprop_rollout(fields, depth), None
    return vin_rollout(fields["r"], params, depth)


# ---------------------------------------------------------------------------
# heads


def _oob_mask(positions, h, w):
    pos = np.asarray(positions)
    mask = np.zeros((pos.shape[0], N_ACTIONS), dtype=bool)
    for k, (di, dj) in enumerate(ACTION_OFFSETS):
        r, c = pos[:, 0] + di, pos[:, 1] + dj
        mask[:, k] = (r < 0) | (r >= h) | (c < 0) | (c >= w)
    return mask


def policy_logits(v: T.DiffArray, q, positions, params: PlannerParams) -> T.DiffArray:
    """Action logits at the agent cell, [B, 8].

    The propagation variants apply a shared positive-scale affine to the 8
    neighbor values of v (so greedy follows the best neighbor); the
    convolutional variant reads its q column directly.  Out-of-grid
    neighbors read value 0 and get a fixed -10 logit offset.
    """
    if params.cfg.variant == "vin":
        return T.gather_cell_vector(q, positions)
    nb = T.gather_neighbors(v, positions)
    scale = T.exp(params["policy.log_scale"])
    logits = T.scalar_affine(nb, scale, params["policy.bias"])
    mask = _oob_mask(positions, *v.data.shape[-2:])
    if mask.any():
        logits = T.add(logits, T.constant(mask * _OOB_LOGIT_OFFSET, dtype=logits.dtype))
    return logits


def extract_patches(obs: np.ndarray, positions) -> np.ndarray:
    """Flattened zero-padded 3x3 observation patches around each position."""
    pos = np.asarray(positions)
    b, c = obs.shape[0], obs.shape[1]
    padded = np.pad(obs, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.empty((b, c * 9), dtype=obs.dtype)
    for n in range(b):
        i, j = pos[n]
        out[n] = padded[n, :, i:i + 3, j:j + 3].reshape(-1)
    return out


def state_value(v: T.DiffArray, q, positions, obs: np.ndarray,
                params: PlannerParams) -> T.DiffArray:
    """Scalar value of each state: linear in [neighbor values, obs patch]."""
    if params.cfg.variant == "vin":
        nb = T.gather_cell_vector(q, positions)
    else:
        nb = T.gather_neighbors(v, positions)
    patch = T.constant(extract_patches(obs, positions), dtype=nb.dtype)
    x = T.concat((nb, patch), axis=1)
    return T.affine_vec(x, params["value.w"], params["value.b"])


# ---------------------------------------------------------------------------
# full forward passes


def plan(params: PlannerParams, obs: np.ndarray, positions, depth: int,
         want_value: bool = True):
    """Forward a batch of observations [B,5,h,w] to (logits, value, v-map)."""
    obs = np.asarray(obs)
    if obs.ndim != 4:
        raise T.ShapeError(f"plan: batched observations required, got shape {obs.shape}")
    obs_da = T.constant(obs.astype(params.dtype, copy=False))
    fields = embed(obs_da, params)
    v, q = rollout(fields, params, depth)
    logits = policy_logits(v, q, positions, params)
    value = state_value(v, q, positions, obs, params) if want_value else None
    return logits, value, v


def action_distribution(params: PlannerParams, obs: np.ndarray, pos, depth: int) -> np.ndarray:
    """Softmax policy at a single state, as float64 probabilities summing to 1."""
    logits, _, _ = plan(params, obs[None], np.asarray(pos)[None], depth, want_value=False)
    logp = T.softmax_logp(logits)
    probs = np.exp(logp.data[0].astype(np.float64))
    return probs / probs.sum()


def greedy_action(params: PlannerParams, obs: np.ndarray, pos, depth: int) -> int:
    """Argmax action at a single state; ties break to the lowest index."""
    logits, _, _ = plan(params, obs[None], np.asarray(pos)[None], depth, want_value=False)
    return int(np.argmax(logits.data[0]))


def value_map(params: PlannerParams, obs: np.ndarray, depth: int) -> np.ndarray:
    """Forward a single observation [5,h,w] to its value map [h,w]."""
    obs_da = T.constant(obs[None].astype(params.dtype, copy=False))
    fields = embed(obs_da, params)
    v, _ = rollout(fields, params, depth)
    return np.asarray(v.data[0])


def value_maps(params: PlannerParams, obs: np.ndarray, depth: int):
    """Forward a batch [B,5,h,w] to plain arrays (v [B,h,w], q [B,8,h,w] or None).

    Acting-time helper: call it outside any tape and feed the results to
    fast_policy_logits per step.
    """
    obs_da = T.constant(np.asarray(obs).astype(params.dtype, copy=False))
    fields = embed(obs_da, params)
    v, q = rollout(fields, params, depth)
    return np.asarray(v.data), (None if q is None else np.asarray(q.data))


def fast_policy_logits(head: np.ndarray, pos, params: PlannerParams) -> np.ndarray:
    """Logits [8] at one cell from a precomputed map, matching policy_logits.

    `head` is the q map [8,h,w] for the convolutional variant and the value
    map [h,w] otherwise.
    """
    i, j = int(pos[0]), int(pos[1])
    if params.cfg.variant == "vin":
        return head[:, i, j].copy()
    h, w = head.shape
    nb = np.zeros(N_ACTIONS, dtype=head.dtype)
    for k, (di, dj) in enumerate(ACTION_OFFSETS):
        r, c = i + di, j + dj
        if 0 <= r < h and 0 <= c < w:
            nb[k] = head[r, c]
    scale = np.exp(params["policy.log_scale"].data)
    logits = nb * scale + params["policy.bias"].data
    for k, (di, dj) in enumerate(ACTION_OFFSETS):
        r, c = i + di, j + dj
        if not (0 <= r < h and 0 <= c < w):
            logits[k] += _OOB_LOGIT_OFFSET
    return logits.astype(head.dtype)
