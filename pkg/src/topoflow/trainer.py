"""Training loop, optimizer, checkpoint container, and evaluation.

One tape spans each mini-batch.  The transition mask participates in the
graph through a single augmented leaf vector, so its gradient accumulates
alongside the parameter gradients; every few batches the accumulated mask
direction is applied through the consistency projection, which keeps the
mask inside its feasible set (box bounds, hard zeros, pentagon residual).

Checkpoints use a small binary container ("OPLC"): magic, version, a
sorted-keys JSON header, then the named float64 arrays in name order.  The
writer is fully deterministic, wall-clock timings live only in reports.
"""

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .blockworld import (
    atp,
    d_phys,
    enumerate_legal_pairs,
    invariant_profile,
    observe,
    transition_violations,
    violation_rate,
)
from .flow import (
    LossWeights,
    loss_flow,
    loss_smooth,
    loss_task,
    loss_topo,
    noise_sample,
    ot_target,
    sample_tau,
)
from .numcore import Rng
from .policy import (
    N_CONTEXT,
    ModelConfig,
    PolicyParams,
    augment_mask,
    forward,
    init_params,
    mask_position_indices,
    sample_actions,
)
from .topomask import TopoMask, expand_mask, project_mask

CHECKPOINT_MAGIC = b"OPLC"
CHECKPOINT_VERSION = 1


class TrainDivergedError(RuntimeError):
    """Raised when a non-finite value surfaces; carries the last good state."""

    def __init__(self, message, params, mask, report, epoch, batch):
        super().__init__(message)
        self.params = params
        self.mask = mask
        self.report = report
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    eps_pd: float = 1e-2
    mask_every: int = 4  # batches between mask projections; 0 freezes the mask
    mask_eta: float = 0.05
    tau_beta: tuple = (1.5, 1.0)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ValueError("lr and grad_clip must be positive")
        if self.mask_every < 0:
            raise ValueError("mask_every must be >= 0")
        pair = tuple(float(x) for x in self.tau_beta)
        if len(pair) != 2 or pair[0] <= 0 or pair[1] <= 0:
            raise ValueError("tau_beta must be a pair of positive shape parameters")
        object.__setattr__(self, "tau_beta", pair)


def train_config_from_dict(d):
    d = dict(d)
    if isinstance(d.get("weights"), dict):
        d["weights"] = LossWeights(**d["weights"])
    if isinstance(d.get("tau_beta"), str):
        d["tau_beta"] = tuple(float(p) for p in d["tau_beta"].split(","))
    return TrainConfig(**d)


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    wall_ms: float = 0.0

    def final(self, key):
        return self.rows[-1][key]

    def first(self, key):
        return self.rows[0][key]

    def to_dict(self):
        return {"rows": self.rows, "wall_ms": self.wall_ms}


REPORT_CSV_COLUMNS = (
    "epoch", "loss", "loss_flow", "loss_task", "loss_smooth", "loss_topo",
    "grad_norm", "mask_residual",
)


def report_csv_lines(report, comments=()):
    """Deterministic CSV lines for a training report.

    Wall-clock columns are deliberately omitted; they belong in the JSON
    report only.  ``comments`` become leading '#' provenance lines.
    """
    lines = ["# %s" % c for c in comments]
    lines.append(",".join(REPORT_CSV_COLUMNS))
    for row in report.rows:
        lines.append(",".join(repr(row[c]) if c != "epoch" else str(row[c])
                              for c in REPORT_CSV_COLUMNS))
    return lines


@dataclass
class TrainResult:
    params: PolicyParams
    mask: TopoMask
    report: TrainReport


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_init(params):
    return AdamState(
        m={k: np.zeros(t.shape) for k, t in params.tensors.items()},
        v={k: np.zeros(t.shape) for k, t in params.tensors.items()},
    )


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, tensor in list(params.tensors.items()):
        g = grads.get(name)
        if g is None:
            g = np.zeros(tensor.shape)
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        new = tensor.array - lr * m_hat / (np.sqrt(v_hat) + eps)
        params.replace(name, nc.Tensor(new))


def clip_gradients(grads, max_norm):
    """Scale the gradient dict to a global norm bound; returns the raw norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        for k in grads:
            grads[k] = grads[k] * factor
    return total


# ---------------------------------------------------------------------------
# training


def flow_jitter(mask_values, labels, eps_pd):
    """Diagonal shift making the lifted position coupling positive definite.

    Matches the jitter computed by the norm lift on the expanded mask: the
    identity-block Kronecker lift shares the symmetrised coupling's spectrum,
    so only the (H, H) eigenproblem is needed.
    """
    m_pos = expand_mask(mask_values, labels)
    s = 0.5 * (m_pos + m_pos.T)
    lam_min = float(np.linalg.eigvalsh(s)[0])
    return eps_pd + max(0.0, -lam_min)


def _sector_basis(fs, cfg):
    proj = fs.projector_for(0)
    basis = proj.basis.T
    if basis.shape[1] != cfg.horizon * cfg.d_action:
        raise ValueError(
            "sector basis covers %d entries, model flattens to %d"
            % (basis.shape[1], cfg.horizon * cfg.d_action)
        )
    return basis


def _snapshot(params):
    return PolicyParams(cfg=params.cfg, tensors=dict(params.tensors))


def train(episodes, fs, mask, model_cfg, train_cfg, head_init="zero", start=None):
    """Fit the velocity field on demo episodes; returns params, mask, report.

    The mask evolves only when ``train_cfg.mask_every`` is positive: the
    accumulated mask gradient is applied as a projected descent step.  A
    non-finite value anywhere aborts with the state from the last completed
    epoch attached to the raised error.

    ``start`` warm-starts from existing parameters (for example a previous
    phase's result or a loaded checkpoint) instead of fresh initialization;
    optimizer moments still start at zero.
    """
    if not episodes:
        raise ValueError("no episodes to train on")
    for ep in episodes:
        if ep.tokens.shape != (model_cfg.horizon, model_cfg.d_action):
            raise ValueError(
                "episode %d tokens %s do not match model (%d, %d)"
                % (ep.index, ep.tokens.shape, model_cfg.horizon, model_cfg.d_action)
            )
        if ep.task_id >= model_cfg.n_tasks:
            raise ValueError("episode task id %d outside model range" % ep.task_id)

    rng = Rng(train_cfg.seed)
    if start is not None:
        params = _snapshot(start)
    else:
        params = init_params(model_cfg, rng.stream(1), head_init=head_init)
    shuffle_rng = rng.stream(2)
    tau_rng = rng.stream(3)
    noise_rng = rng.stream(4)
    basis = _sector_basis(fs, model_cfg)
    state = adam_init(params)
    w = train_cfg.weights

    idx_cache = [
        mask_position_indices(ep.labels, model_cfg)[N_CONTEXT:, N_CONTEXT:]
        for ep in episodes
    ]

    report = TrainReport()
    good_params, good_mask = _snapshot(params), mask
    n_mask = mask.values.shape[0]
    mask_acc = np.zeros((n_mask, n_mask))
    acc_count = 0
    batch_counter = 0
    t_start = time.perf_counter()

    for epoch in range(train_cfg.epochs):
        order = list(range(len(episodes)))
        shuffle_rng.shuffle(order)
        sums = {k: 0.0 for k in REPORT_CSV_COLUMNS if k != "epoch"}
        n_batches = 0
        epoch_t0 = time.perf_counter()
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = [episodes[i] for i in order[lo:lo + train_cfg.batch_size]]
            try:
                stats, mask_grad = _batch_step(
                    params, mask, batch,
                    [idx_cache[i] for i in order[lo:lo + train_cfg.batch_size]],
                    basis, model_cfg, train_cfg, state, tau_rng, noise_rng, w,
                )
            except ValueError as exc:
                raise TrainDivergedError(
                    "non-finite value in epoch %d batch %d: %s"
                    % (epoch, n_batches, exc),
                    params=good_params, mask=good_mask, report=report,
                    epoch=epoch, batch=n_batches,
                ) from exc
            for k, val in stats.items():
                sums[k] += val
            n_batches += 1
            batch_counter += 1
            if mask_grad is not None:
                mask_acc += mask_grad
                acc_count += 1
            if (
                train_cfg.mask_every > 0
                and acc_count > 0
                and batch_counter % train_cfg.mask_every == 0
            ):
                update = -mask_acc / acc_count
                mask = project_mask(mask, fs, update, train_cfg.mask_eta)
                mask_acc[:] = 0.0
                acc_count = 0
        row = {"epoch": epoch}
        for k in sums:
            row[k] = sums[k] / max(n_batches, 1)
        row["mask_residual"] = mask.residual()
        row["wall_ms"] = (time.perf_counter() - epoch_t0) * 1000.0
        report.rows.append(row)
        good_params, good_mask = _snapshot(params), mask

    report.wall_ms = (time.perf_counter() - t_start) * 1000.0
    return TrainResult(params=params, mask=mask, report=report)


def _batch_step(params, mask, batch, idx_blocks, basis, model_cfg, train_cfg,
                state, tau_rng, noise_rng, w):
    mask_leaf = nc.Tensor(augment_mask(mask.values))
    comps = {"loss_flow": 0.0, "loss_task": 0.0, "loss_smooth": 0.0, "loss_topo": 0.0}
    with nc.Tape() as tape:
        total = None
        for ep, idx_block in zip(batch, idx_blocks):
            tau = sample_tau(tau_rng, alpha=train_cfg.tau_beta[0],
                             beta=train_cfg.tau_beta[1])
            ns = noise_sample(ep.tokens, tau, rng=noise_rng)
            u = ot_target(ep.tokens, ns.a_tau, tau)
            v = forward(params, ep.observation, ns.a_tau, tau, mask_leaf, ep.labels)
            m_act = nc.take(mask_leaf, idx_block)
            s = nc.scale(nc.add(m_act, nc.transpose(m_act)), 0.5)
            jitter = flow_jitter(mask.values, ep.labels, train_cfg.eps_pd)
            lf = loss_flow(v, nc.Tensor(u), s, jitter)
            lt = loss_task(v, nc.Tensor(ep.tokens), nc.Tensor(ns.a_tau), tau)
            ls = loss_smooth(v)
            lo_ = loss_topo(nc.sub(v, nc.Tensor(u)), basis)
            sample_loss = nc.add(
                nc.add(lf, nc.scale(lt, w.lambda_task)),
                nc.add(nc.scale(ls, w.lambda_smooth), nc.scale(lo_, w.lambda_topo)),
            )
            total = sample_loss if total is None else nc.add(total, sample_loss)
            comps["loss_flow"] += lf.item()
            comps["loss_task"] += lt.item()
            comps["loss_smooth"] += ls.item()
            comps["loss_topo"] += lo_.item()
        batch_loss = nc.scale(total, 1.0 / len(batch))
    grads = nc.backward(tape, batch_loss)

    param_grads = {}
    for name, tensor in params.tensors.items():
        g = grads.get(tensor)
        if g is not None:
            param_grads[name] = g
    norm = clip_gradients(param_grads, train_cfg.grad_clip)
    adam_step(params, param_grads, state, train_cfg.lr,
              train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)

    n = mask.values.shape[0]
    mask_grad = None
    g_mask = grads.get(mask_leaf)
    if g_mask is not None:
        mask_grad = g_mask[:-1].reshape(n, n) / len(batch)

    b = len(batch)
    stats = {k: val / b for k, val in comps.items()}
    stats["loss"] = (
        stats["loss_flow"]
        + w.lambda_task * stats["loss_task"]
        + w.lambda_smooth * stats["loss_smooth"]
        + w.lambda_topo * stats["loss_topo"]
    )
    stats["grad_norm"] = norm
    return stats, mask_grad


# ---------------------------------------------------------------------------
# checkpoint container


def _array_payload(params, mask):
    arrays = {"param.%s" % k: t.array for k, t in params.tensors.items()}
    arrays["mask.values"] = mask.values
    arrays["mask.hard_zeros"] = mask.hard_zeros.astype(np.float64)
    arrays["mask.channel_weights"] = mask.channel_weights
    return arrays


def write_checkpoint(path, params, mask, train_cfg=None, extra=None):
    arrays = _array_payload(params, mask)
    names = sorted(arrays)
    header = {
        "schema": CHECKPOINT_VERSION,
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
        "model_config": asdict(params.cfg),
        "train_config": asdict(train_cfg) if train_cfg is not None else None,
        "mask_meta": {
            "tol_consistency": mask.tol_consistency,
            "cell_tol": mask.cell_tol,
            "mode": mask.mode,
        },
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def read_checkpoint(path):
    """Returns (params, mask, header) from an OPLC container."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic %r)" % magic)
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint version %d" % version)
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        arrays = {}
        for meta in header["arrays"]:
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            arrays[meta["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    cfg = ModelConfig(**header["model_config"])
    tensors = {
        name[len("param."):]: nc.Tensor(arr)
        for name, arr in arrays.items()
        if name.startswith("param.")
    }
    params = PolicyParams(cfg=cfg, tensors=tensors)
    mm = header["mask_meta"]
    mask = TopoMask(
        values=arrays["mask.values"],
        hard_zeros=arrays["mask.hard_zeros"] != 0.0,
        tol_consistency=float(mm["tol_consistency"]),
        cell_tol=float(mm["cell_tol"]),
        mode=mm["mode"],
        channel_weights=arrays["mask.channel_weights"],
    )
    return params, mask, header


# ---------------------------------------------------------------------------
# evaluation


def evaluate(params, mask, tasks, n_episodes, spec, seed, variant="full",
             reference_mask=None, invariants=False):
    """Sample rollouts per task and score them against the simulator.

    Transition violations are counted against ``reference_mask`` (defaults
    to the enumerated legality table) regardless of the mask used for
    sampling, so permissive variants are charged for the transitions the
    environment actually forbids.
    """
    if reference_mask is None:
        reference_mask = enumerate_legal_pairs()
    base = Rng(seed)
    rows = []
    for task in tasks:
        scores = {"atp": [], "violation_rate": [], "d_phys": [], "transition_violations": []}
        profile_hits = {"progress_monotone": 0, "object_count_conserved": 0}
        fn_evals = 0
        t0 = time.perf_counter()
        for i in range(n_episodes):
            r = base.stream(task.task_id * 100003 + i)
            start = task.sample_start(r)
            obs = observe(start, task)
            out = sample_actions(params, obs, mask, spec, r)
            fn_evals = out.fn_evals
            scores["atp"].append(atp(task, start, out.actions))
            scores["violation_rate"].append(violation_rate(task, start, out.actions))
            scores["d_phys"].append(d_phys(task, start, out.actions))
            scores["transition_violations"].append(
                transition_violations(out.labels, reference_mask)
            )
            if invariants:
                prof = invariant_profile(task, start, out.actions)
                profile_hits["progress_monotone"] += int(prof["progress_monotone"])
                profile_hits["object_count_conserved"] += int(prof["object_count_conserved"])
        row = {
            "task": task.name,
            "variant": variant,
            "n_episodes": n_episodes,
            "fn_evals": fn_evals,
            "wall_ms": (time.perf_counter() - t0) * 1000.0,
        }
        for key, vals in scores.items():
            row[key] = float(np.mean(vals)) if vals else 0.0
        if invariants:
            row["invariants"] = {
                k: v / max(n_episodes, 1) for k, v in profile_hits.items()
            }
        rows.append(row)
    return rows
