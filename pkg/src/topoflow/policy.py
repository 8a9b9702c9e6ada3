"""Velocity-field transformer over observation and action tokens.

The token sequence is ``[vision, language, state, action_0 .. action_{H-1}]``.
Observation tokens are linear projections of the occupancy grid, the task
one-hot and the proprioceptive vector; action tokens embed the current noisy
action rows plus factored positional embeddings (primitive index and offset
within the primitive) and a learned direction scaled by the path parameter
tau.  Blocks are wired with residual multi-head attention and a tanh
feed-forward; there is no normalisation layer, the op vocabulary is kept
deliberately small.

The transition mask enters attention through a flat-index gather from an
augmented value vector (mask cells plus one constant neutral slot), so a
taped forward pass routes gradients back onto exactly the mask cells that
were consulted.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .attention import MODE_HARD, MODE_LITERAL, blockwise_structural_mask, topo_attention
from .blockworld import N_TYPES, decode_actions, decode_types
from .flow import integrate

N_CONTEXT = 3  # vision, language, state
GRID_SIZE = 64  # flattened 8x8 occupancy image


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    horizon: int = 20
    d_action: int = 4
    n_prims: int = 4
    n_tasks: int = 3
    n_types: int = N_TYPES
    mode: str = MODE_HARD

    def __post_init__(self):
        if min(self.d_model, self.n_heads, self.n_layers, self.horizon,
               self.d_action, self.n_prims, self.n_tasks, self.n_types) < 1:
            raise ValueError("all config dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                "d_model=%d is not divisible by n_heads=%d" % (self.d_model, self.n_heads)
            )
        if self.horizon % self.n_prims != 0:
            raise ValueError(
                "horizon=%d is not divisible by n_prims=%d" % (self.horizon, self.n_prims)
            )
        if self.mode not in (MODE_LITERAL, MODE_HARD):
            raise ValueError("unknown attention mode %r" % (self.mode,))

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    @property
    def d_ff(self):
        return 2 * self.d_model

    @property
    def prim_len(self):
        return self.horizon // self.n_prims

    @property
    def n_tokens(self):
        return N_CONTEXT + self.horizon


@dataclass
class PolicyParams:
    cfg: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def items(self):
        return sorted(self.tensors.items())

    @property
    def param_count(self):
        return sum(t.size for t in self.tensors.values())

    def replace(self, name, tensor):
        if name not in self.tensors:
            raise KeyError(name)
        self.tensors[name] = tensor


def init_params(cfg, rng, head_init="zero"):
    """Fresh parameters; the output head starts at zero unless asked not to."""
    def normal(*shape):
        return nc.Tensor(rng.standard_normal(shape) * 0.02)

    def zeros(*shape):
        return nc.Tensor(np.zeros(shape))

    t = {
        "embed.w_vis": normal(GRID_SIZE, cfg.d_model),
        "embed.b_vis": zeros(1, cfg.d_model),
        "embed.w_lang": normal(cfg.n_tasks, cfg.d_model),
        "embed.w_state": normal(4, cfg.d_model),
        "embed.b_state": zeros(1, cfg.d_model),
        "embed.w_act": normal(cfg.d_action, cfg.d_model),
        "embed.b_act": zeros(1, cfg.d_model),
        "embed.w_tau": normal(1, cfg.d_model),
        "embed.prim": normal(cfg.n_prims, cfg.d_model),
        "embed.within": normal(cfg.prim_len, cfg.d_model),
    }
    for i in range(cfg.n_layers):
        t["layer%d.w_q" % i] = normal(cfg.d_model, cfg.d_model)
        t["layer%d.w_k" % i] = normal(cfg.d_model, cfg.d_model)
        t["layer%d.w_v" % i] = normal(cfg.d_model, cfg.d_model)
        t["layer%d.w_o" % i] = normal(cfg.d_model, cfg.d_model)
        t["layer%d.w_ff1" % i] = normal(cfg.d_model, cfg.d_ff)
        t["layer%d.b_ff1" % i] = zeros(1, cfg.d_ff)
        t["layer%d.w_ff2" % i] = normal(cfg.d_ff, cfg.d_model)
        t["layer%d.b_ff2" % i] = zeros(1, cfg.d_model)
    if head_init == "zero":
        t["head.w"] = zeros(cfg.d_model, cfg.d_action)
    elif head_init == "normal":
        t["head.w"] = normal(cfg.d_model, cfg.d_action)
    else:
        raise ValueError("head_init must be 'zero' or 'normal'")
    t["head.b"] = zeros(1, cfg.d_action)
    return PolicyParams(cfg=cfg, tensors=t)


def augment_mask(values):
    """Flat mask values with one trailing constant slot fixed at 1.0."""
    values = np.asarray(values, dtype=np.float64)
    return np.append(values.reshape(-1), 1.0)


def mask_position_indices(token_types, cfg):
    """Flat indices into an augmented mask vector for every token pair.

    Action-action pairs read the cell (earlier token's type, later token's
    type); everything else, including the diagonal and all context pairs,
    reads the trailing neutral slot.
    """
    types = np.asarray(token_types, dtype=int)
    if types.shape != (cfg.horizon,):
        raise ValueError(
            "need %d token types, got shape %s" % (cfg.horizon, types.shape)
        )
    n = cfg.n_types
    t_total = cfg.n_tokens
    idx = np.full((t_total, t_total), n * n, dtype=np.int64)
    for s in range(cfg.horizon):
        for t in range(cfg.horizon):
            if s == t:
                continue
            row_type = types[min(s, t)]
            col_type = types[max(s, t)]
            idx[N_CONTEXT + s, N_CONTEXT + t] = row_type * n + col_type
    return idx


def structural_mask(cfg):
    """Vision+language, then state, then actions; blocks see themselves and
    everything earlier."""
    return blockwise_structural_mask([2, 1, cfg.horizon])


def _one_hot(i, n):
    if not 0 <= i < n:
        raise ValueError("task id %r outside [0, %d)" % (i, n))
    v = np.zeros((1, n))
    v[0, i] = 1.0
    return v


def encode_tokens(params, obs, a_tau, tau):
    """Embed observation and noisy actions into the (T, d_model) sequence."""
    cfg = params.cfg
    a_tau = a_tau if isinstance(a_tau, nc.Tensor) else nc.Tensor(np.asarray(a_tau, dtype=np.float64))
    if a_tau.shape != (cfg.horizon, cfg.d_action):
        raise nc.ShapeError(
            "action block shape %s, expected %s"
            % (a_tau.shape, (cfg.horizon, cfg.d_action))
        )
    grid = np.asarray(obs.grid, dtype=np.float64).reshape(1, -1)
    if grid.size != GRID_SIZE:
        raise nc.ShapeError("grid must flatten to %d values" % GRID_SIZE)
    vis = nc.add(nc.matmul(nc.Tensor(grid), params["embed.w_vis"]), params["embed.b_vis"])
    lang = nc.matmul(nc.Tensor(_one_hot(obs.task_id, cfg.n_tasks)), params["embed.w_lang"])
    proprio = np.asarray(obs.proprio, dtype=np.float64).reshape(1, 4)
    state = nc.add(nc.matmul(nc.Tensor(proprio), params["embed.w_state"]), params["embed.b_state"])

    act = nc.add(nc.matmul(a_tau, params["embed.w_act"]), params["embed.b_act"])
    prim_idx = np.arange(cfg.horizon) // cfg.prim_len
    within_idx = np.arange(cfg.horizon) % cfg.prim_len
    act = nc.add(act, nc.gather_rows(params["embed.prim"], prim_idx))
    act = nc.add(act, nc.gather_rows(params["embed.within"], within_idx))

    x = nc.concat([vis, lang, state, act], axis=0)
    return nc.add(x, nc.scale(params["embed.w_tau"], float(tau)))


def forward(params, obs, a_tau, tau, mask_aug, token_types, mode=None):
    """Predicted velocity field over the action block, shape (H, d_action).

    mask_aug : Tensor of length n_types**2 + 1 (see :func:`augment_mask`),
        or None for a fully neutral mask.
    token_types : per-action-token type ids used to site mask cells.
    """
    cfg = params.cfg
    mode = cfg.mode if mode is None else mode
    x = encode_tokens(params, obs, a_tau, tau)
    t_total = cfg.n_tokens

    if mask_aug is None:
        m_pos = nc.Tensor(np.ones((t_total, t_total)))
    else:
        idx = mask_position_indices(token_types, cfg)
        m_pos = nc.take(mask_aug, idx)
    structural = structural_mask(cfg)

    for i in range(cfg.n_layers):
        q = nc.matmul(x, params["layer%d.w_q" % i])
        k = nc.matmul(x, params["layer%d.w_k" % i])
        v = nc.matmul(x, params["layer%d.w_v" % i])
        heads = []
        for h in range(cfg.n_heads):
            lo = h * cfg.d_head
            out, _ = topo_attention(
                nc.narrow(q, 1, lo, cfg.d_head),
                nc.narrow(k, 1, lo, cfg.d_head),
                nc.narrow(v, 1, lo, cfg.d_head),
                m_pos,
                structural=structural,
                mode=mode,
            )
            heads.append(out)
        attn = nc.matmul(nc.concat(heads, axis=1), params["layer%d.w_o" % i])
        x = nc.add(x, attn)
        ff = nc.tanh(nc.add(nc.matmul(x, params["layer%d.w_ff1" % i]), params["layer%d.b_ff1" % i]))
        ff = nc.add(nc.matmul(ff, params["layer%d.w_ff2" % i]), params["layer%d.b_ff2" % i])
        x = nc.add(x, ff)

    act_rows = nc.narrow(x, 0, N_CONTEXT, cfg.horizon)
    return nc.add(nc.matmul(act_rows, params["head.w"]), params["head.b"])


def split_primitives(block, cfg):
    """Rows of an (H, d) block grouped into the model's primitive segments."""
    if isinstance(block, nc.Tensor):
        return [
            nc.narrow(block, 0, k * cfg.prim_len, cfg.prim_len)
            for k in range(cfg.n_prims)
        ]
    block = np.asarray(block)
    return [
        block[k * cfg.prim_len:(k + 1) * cfg.prim_len] for k in range(cfg.n_prims)
    ]


@dataclass(frozen=True)
class SampledSequence:
    actions: list
    labels: np.ndarray
    raw: np.ndarray  # integrated (H, d_action) block before decoding
    fn_evals: int


def sample_actions(params, obs, mask, spec, rng, mode=None):
    """Integrate the learned field from noise and decode an action sequence.

    Token types for mask placement are re-decoded from the current block at
    every field evaluation; the final block is decoded under the same mask,
    so type transitions honour its zero pattern by construction.
    """
    cfg = params.cfg
    values = mask.values if hasattr(mask, "values") else np.asarray(mask, dtype=np.float64)
    aug = nc.Tensor(augment_mask(values))
    # Decode against the structural zero pattern, not the evolved weights:
    # projected mask updates may clip an allowed transition's soft weight to
    # exactly 0, and that is an attention statement, not a grammar change.
    if hasattr(mask, "hard_zeros"):
        pattern = np.where(mask.hard_zeros, 0.0, 1.0)
    else:
        pattern = values

    def field(x, t):
        types = decode_types(x)
        v = forward(params, obs, x, t, aug, types, mode=mode)
        return v.to_numpy()

    a0 = rng.standard_normal((cfg.horizon, cfg.d_action))
    final, evals = integrate(field, a0, spec)
    actions, labels = decode_actions(final, pattern)
    return SampledSequence(actions=actions, labels=labels, raw=final, fn_evals=evals)
