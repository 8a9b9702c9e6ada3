"""Command-line surface: data generation, training, evaluation, ablations.

Every command reads an optional flat ``key = value`` config file; explicit
flags win over config values, and the OPAL_SEED environment variable is the
fallback for any unset seed.  Output files are written atomically (tmp file
+ rename), so a failing command leaves no partial artifacts.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 tolerance breach
reported by check-fusion.
"""

import argparse
import csv
import io
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .blockworld import (
    TOKEN_TYPES,
    build_fusion_system,
    file_digest,
    gen_episodes,
    list_tasks,
    load_task,
    observe,
    read_episodes,
    write_episodes,
)
from .flow import IntegratorSpec, integrate
from .fusion import hexagon_residual, parse_fusion_spec, pentagon_residual
from .numcore import Rng
from .policy import ModelConfig, sample_actions
from .topomask import build_mask, neutral_mask
from .trainer import (
    TrainConfig,
    evaluate,
    read_checkpoint,
    report_csv_lines,
    train,
    write_checkpoint,
)

VERSION_STRING = "topoflow %s" % __version__

EVAL_COLUMNS = (
    "task", "model_variant", "atp_mean", "violation_rate", "d_phys_mean",
    "fn_evals", "wall_ms",
)


class UsageError(Exception):
    """Bad flags, bad config keys, or malformed inputs; exits with code 1."""


# ---------------------------------------------------------------------------
# config plumbing


class Opt:
    def __init__(self, name, type_, default, help_, flag=None):
        self.name = name
        self.type = type_
        self.default = default
        self.help = help_
        self.flag = flag or "--" + name.replace("_", "-")


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError("not a boolean: %r" % text)


def add_options(sub, opts):
    for o in opts:
        if o.type is bool:
            sub.add_argument(o.flag, dest=o.name, action="store_const",
                             const=True, default=None, help=o.help)
        else:
            sub.add_argument(o.flag, dest=o.name, type=o.type, default=None,
                             help=o.help)
    sub.add_argument("--config", default=None,
                     help="flat key = value config file; flags override it")


def parse_config(path):
    data = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise UsageError("cannot read config %s: %s" % (path, exc)) from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError("%s:%d: expected key = value" % (path, lineno))
        key, _, value = line.partition("=")
        data[key.strip()] = value.strip()
    return data


def resolve_options(args, opts):
    """Merge flags, config file, OPAL_SEED, and defaults; flags win."""
    cfg = parse_config(args.config) if args.config else {}
    valid = {o.name for o in opts}
    unknown = sorted(set(cfg) - valid)
    if unknown:
        raise UsageError(
            "unknown config keys: %s (valid keys: %s)"
            % (", ".join(unknown), ", ".join(sorted(valid)))
        )
    out = {}
    for o in opts:
        value = getattr(args, o.name, None)
        if value is None and o.name in cfg:
            caster = _parse_bool if o.type is bool else o.type
            try:
                value = caster(cfg[o.name])
            except ValueError as exc:
                raise UsageError(
                    "config key %s: cannot parse %r" % (o.name, cfg[o.name])
                ) from exc
        if value is None and o.name == "seed":
            env = os.environ.get("OPAL_SEED")
            if env is not None:
                try:
                    value = int(env)
                except ValueError as exc:
                    raise UsageError("OPAL_SEED=%r is not an integer" % env) from exc
        if value is None:
            value = o.default
        out[o.name] = value
    return argparse.Namespace(**out)


def provenance_pairs(resolved, skip=("config",)):
    pairs = []
    for key in sorted(vars(resolved)):
        if key in skip:
            continue
        pairs.append("%s=%r" % (key, getattr(resolved, key)))
    return pairs


# ---------------------------------------------------------------------------
# atomic output helpers


def write_text_atomic(path, text):
    tmp = "%s.tmp" % path
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_checkpoint_atomic(path, params, mask, train_cfg, extra):
    tmp = "%s.tmp" % path
    write_checkpoint(tmp, params, mask, train_cfg, extra=extra)
    os.replace(tmp, path)


def csv_text(columns, rows, comments):
    buf = io.StringIO()
    for c in comments:
        buf.write("# %s\n" % c)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def eval_rows_to_csv(rows):
    out = []
    for r in rows:
        out.append([
            r["task"], r["variant"], repr(r["atp"]), repr(r["violation_rate"]),
            repr(r["d_phys"]), r["fn_evals"], "%.3f" % r["wall_ms"],
        ])
    return out


# ---------------------------------------------------------------------------
# shared option groups

MODEL_OPTS = [
    Opt("d_model", int, 64, "model width"),
    Opt("n_heads", int, 4, "attention heads"),
    Opt("n_layers", int, 2, "attention blocks"),
    Opt("n_prims", int, 4, "primitive segments per sequence"),
    Opt("mode", str, "hard", "mask mode: hard or literal"),
]

TRAIN_OPTS = [
    Opt("epochs", int, 10, "training epochs"),
    Opt("batch_size", int, 32, "examples per optimizer step"),
    Opt("lr", float, 3e-4, "Adam learning rate"),
    Opt("seed", int, 0, "seed (flag > config > OPAL_SEED > default)"),
    Opt("mask_project_every", int, 4, "batches between mask projections; 0 freezes"),
    Opt("mask_eta", float, 0.05, "mask update step size"),
    Opt("tau_beta", str, "1.5,1.0", "Beta(a,b) shape parameters for the noise-level prior"),
    Opt("paper_scale", bool, False, "use the published batch size (256) instead of desk scale"),
    Opt("neutral_mask", bool, False, "train with an all-ones literal mask (NT variant)"),
]

INTEGRATOR_OPTS = [
    Opt("integrator", str, "rk4", "integration method: rk4 or euler"),
    Opt("n_steps", int, 4, "integration steps"),
]


def _load_tasks(spec_text):
    names = list_tasks() if spec_text == "all" else [
        t.strip() for t in spec_text.split(",") if t.strip()
    ]
    if not names:
        raise UsageError("no tasks given")
    return [load_task(name) for name in names]


def _derive_model_config(episodes, o):
    horizon = episodes[0].tokens.shape[0]
    n_tasks = max(ep.task_id for ep in episodes) + 1
    return ModelConfig(
        d_model=o.d_model, n_heads=o.n_heads, n_layers=o.n_layers,
        horizon=horizon, n_prims=o.n_prims, n_tasks=n_tasks,
        mode="literal" if o.neutral_mask else o.mode,
    )


def _train_config(o):
    return TrainConfig(
        epochs=o.epochs,
        batch_size=256 if o.paper_scale else o.batch_size,
        lr=o.lr,
        seed=o.seed,
        mask_every=0 if o.neutral_mask else o.mask_project_every,
        mask_eta=o.mask_eta,
        tau_beta=tuple(float(p) for p in o.tau_beta.split(",")),
    )


def _run_training(episodes, o, digest):
    model_cfg = _derive_model_config(episodes, o)
    fs = build_fusion_system(horizon=model_cfg.horizon)
    if o.neutral_mask:
        mask = neutral_mask(model_cfg.n_types, mode="literal")
    else:
        mask = build_mask(fs, mode=o.mode)
    train_cfg = _train_config(o)
    result = train(episodes, fs, mask, model_cfg, train_cfg)
    extra = {
        "version": VERSION_STRING,
        "seed": o.seed,
        "dataset_sha256": digest,
        "n_episodes": len(episodes),
        "neutral_mask": bool(o.neutral_mask),
    }
    return result, model_cfg, train_cfg, extra


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    o = resolve_options(args, args.opts)
    if not o.out:
        raise UsageError("gen-data requires --out")
    tasks = _load_tasks(o.task)
    episodes = []
    counts = {}
    for task in tasks:
        eps = gen_episodes(task, o.n, seed=o.seed + 7919 * task.task_id)
        episodes.extend(eps)
        counts[task.name] = len(eps)

    tmp = "%s.tmp" % o.out
    write_episodes(tmp, episodes)
    digest = file_digest(tmp)
    os.replace(tmp, o.out)

    manifest = {
        "schema_version": 1,
        "version": VERSION_STRING,
        "file": os.path.basename(o.out),
        "sha256": digest,
        "episodes": len(episodes),
        "tasks": counts,
        "config": {k: getattr(o, k) for k in ("task", "n", "seed")},
    }
    manifest_path = _sibling(o.out, ".manifest.json")
    write_text_atomic(
        manifest_path,
        json.dumps(manifest, sort_keys=True, indent=2) + "\n",
    )
    print("wrote %d episodes to %s (sha256 %s...)" % (len(episodes), o.out, digest[:12]))
    return 0


def _sibling(path, suffix):
    root, ext = os.path.splitext(path)
    return root + suffix


def cmd_train(args):
    o = resolve_options(args, args.opts)
    if not o.data or not o.out:
        raise UsageError("train requires --data and --out")
    episodes = read_episodes(o.data)
    digest = file_digest(o.data)
    result, model_cfg, train_cfg, extra = _run_training(episodes, o, digest)

    write_checkpoint_atomic(o.out, result.params, result.mask, train_cfg, extra)
    comments = [VERSION_STRING, "command: train", "dataset_sha256: %s" % digest]
    comments += provenance_pairs(o, skip=("config", "data", "out", "loss_csv", "report_json"))
    if o.loss_csv:
        write_text_atomic(o.loss_csv, "\n".join(report_csv_lines(result.report, comments)) + "\n")
    if o.report_json:
        payload = {
            "version": VERSION_STRING,
            "dataset_sha256": digest,
            "model_config": vars(o),
            "report": result.report.to_dict(),
        }
        payload["model_config"].pop("config", None)
        write_text_atomic(o.report_json, json.dumps(payload, sort_keys=True, indent=2) + "\n")
    final = result.report.rows[-1] if result.report.rows else {}
    print("trained %d epochs on %d episodes -> %s" % (train_cfg.epochs, len(episodes), o.out))
    if final:
        print("final loss %.6f (flow %.6f), mask residual %.3e"
              % (final["loss"], final["loss_flow"], final["mask_residual"]))
    return 0


def cmd_sample(args):
    o = resolve_options(args, args.opts)
    if not o.model:
        raise UsageError("sample requires --model")
    params, mask, _ = read_checkpoint(o.model)
    task = load_task(o.task)
    spec = IntegratorSpec(o.integrator, o.n_steps)
    lines = []
    for i in range(o.n):
        rng = Rng(o.seed).stream(i)
        start = task.sample_start(rng)
        obs = observe(start, task)
        seq = sample_actions(params, obs, mask, spec, rng)
        record = {
            "index": i,
            "task": task.name,
            "labels": [int(t) for t in seq.labels],
            "types": [TOKEN_TYPES[t] for t in seq.labels],
            "params": [[float(v) for v in a.params] for a in seq.actions],
            "fn_evals": seq.fn_evals,
        }
        lines.append(json.dumps(record, sort_keys=True))
        if not o.out:
            names = " ".join(TOKEN_TYPES[t] for t in seq.labels)
            print("%d: %s" % (i, names))
    if o.out:
        write_text_atomic(o.out, "\n".join(lines) + "\n")
        print("wrote %d sequences to %s" % (o.n, o.out))
    return 0


def cmd_eval(args):
    o = resolve_options(args, args.opts)
    if not o.model:
        raise UsageError("eval requires --model")
    params, mask, _ = read_checkpoint(o.model)
    tasks = _load_tasks(o.tasks)
    spec = IntegratorSpec(o.integrator, o.n_steps)
    rows = evaluate(params, mask, tasks, o.episodes, spec, o.seed, variant=o.variant)
    comments = [VERSION_STRING, "command: eval"]
    comments += provenance_pairs(o, skip=("config", "out"))
    text = csv_text(EVAL_COLUMNS, eval_rows_to_csv(rows), comments)
    if o.out:
        write_text_atomic(o.out, text)
    print(render_table(list(EVAL_COLUMNS), [
        [str(c) for c in row] for row in eval_rows_to_csv(rows)
    ]))
    return 0


def cmd_ablate(args):
    o = resolve_options(args, args.opts)
    if not o.data or not o.out:
        raise UsageError("ablate requires --data and --out")
    if o.neutral_mask:
        raise UsageError("ablate trains its own NT variant; drop --neutral-mask")
    episodes = read_episodes(o.data)
    digest = file_digest(o.data)
    tasks = _load_tasks(o.tasks)
    spec = IntegratorSpec(o.integrator, o.n_steps)
    euler10 = IntegratorSpec("euler", 10)

    variants = {}
    full, _, full_train_cfg, full_extra = _run_training(episodes, o, digest)
    variants["full"] = (full, full_train_cfg, full_extra)

    nt_opts = argparse.Namespace(**{**vars(o), "neutral_mask": True})
    nt, _, nt_train_cfg, nt_extra = _run_training(episodes, nt_opts, digest)
    variants["NT"] = (nt, nt_train_cfg, nt_extra)

    nh_opts = argparse.Namespace(**{**vars(o), "n_prims": 1})
    nh, _, nh_train_cfg, nh_extra = _run_training(episodes, nh_opts, digest)
    variants["NH"] = (nh, nh_train_cfg, nh_extra)

    by_variant = {
        "full": evaluate(full.params, full.mask, tasks, o.episodes, spec, o.seed, "full"),
        "NT": evaluate(nt.params, nt.mask, tasks, o.episodes, spec, o.seed, "NT"),
        "NR": evaluate(full.params, full.mask, tasks, o.episodes, euler10, o.seed, "NR"),
        "NH": evaluate(nh.params, nh.mask, tasks, o.episodes, spec, o.seed, "NH"),
    }
    rows = []
    for t_index in range(len(tasks)):
        for variant in ("full", "NT", "NR", "NH"):
            rows.append(by_variant[variant][t_index])

    comments = [VERSION_STRING, "command: ablate", "dataset_sha256: %s" % digest]
    comments += provenance_pairs(o, skip=("config", "data", "out", "save_models"))
    write_text_atomic(o.out, csv_text(EVAL_COLUMNS, eval_rows_to_csv(rows), comments))

    if o.save_models:
        os.makedirs(o.save_models, exist_ok=True)
        for name, (result, t_cfg, extra) in variants.items():
            path = os.path.join(o.save_models, "%s.oplc" % name.lower())
            write_checkpoint_atomic(path, result.params, result.mask, t_cfg,
                                    {**extra, "variant": name})
    print(render_table(list(EVAL_COLUMNS), [
        [str(c) for c in row] for row in eval_rows_to_csv(rows)
    ]))
    return 0


DECAY_FIELD_SPECS = (("euler", 10), ("rk4", 4))


def cmd_bench_integrators(args):
    o = resolve_options(args, args.opts)
    comments = [VERSION_STRING, "command: bench-integrators"]
    comments += provenance_pairs(o, skip=("config", "out", "model"))
    if o.analytic:
        columns = ["method", "n_steps", "fn_evals", "endpoint", "abs_error", "wall_ms"]
        rows = []
        target = math.exp(-1.0)
        for method, n_steps in DECAY_FIELD_SPECS:
            spec = IntegratorSpec(method, n_steps)
            t0 = time.perf_counter()
            x, evals = integrate(lambda x, t: -x, np.array([1.0]), spec)
            wall = (time.perf_counter() - t0) * 1000.0
            endpoint = float(x[0])
            rows.append([method, n_steps, evals, repr(endpoint),
                         repr(abs(endpoint - target)), "%.3f" % wall])
    else:
        if not o.model:
            raise UsageError("bench-integrators needs --analytic or --model")
        params, mask, _ = read_checkpoint(o.model)
        task = load_task(o.task)
        columns = ["method", "n_steps", "fn_evals", "atp_mean", "wall_ms"]
        rows = []
        for method, n_steps in DECAY_FIELD_SPECS:
            spec = IntegratorSpec(method, n_steps)
            out = evaluate(params, mask, [task], o.episodes, spec, o.seed)
            r = out[0]
            rows.append([method, n_steps, r["fn_evals"], repr(r["atp"]),
                         "%.3f" % r["wall_ms"]])
    text = csv_text(columns, rows, comments)
    if o.out:
        write_text_atomic(o.out, text)
    print(render_table(columns, [[str(c) for c in row] for row in rows]))
    return 0


def cmd_dump_mask(args):
    o = resolve_options(args, args.opts)
    if o.model:
        _, mask, _ = read_checkpoint(o.model)
        source = o.model
    else:
        mask = build_mask(build_fusion_system(), mode=o.mode)
        source = "built-in transition system"
    comments = [
        VERSION_STRING,
        "command: dump-mask",
        "source: %s" % source,
        "mode: %s" % mask.mode,
        "tol_consistency: %r" % mask.tol_consistency,
        "pentagon_residual: %r" % mask.residual(),
        "hard_zeros: %d" % int(mask.hard_zeros.sum()),
    ]
    columns = ["type"] + list(TOKEN_TYPES)
    rows = [
        [TOKEN_TYPES[i]] + [repr(float(v)) for v in mask.values[i]]
        for i in range(mask.n_types)
    ]
    text = csv_text(columns, rows, comments)
    if o.out:
        write_text_atomic(o.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_check_fusion(args):
    o = resolve_options(args, args.opts)
    if o.spec:
        with open(o.spec) as fh:
            fs = parse_fusion_spec(fh.read())
        source = o.spec
    else:
        fs = build_fusion_system()
        source = "built-in transition system"
    pentagon = pentagon_residual(fs.f)
    hexagon = hexagon_residual(fs)
    tol = o.tol if o.tol is not None else fs.tol
    print("source: %s" % source)
    print("n_types: %d" % fs.f.shape[0])
    print("pentagon residual: %.6e" % pentagon)
    print("hexagon residual:  %.6e" % hexagon)
    print("tolerance:         %.6e" % tol)
    if pentagon > tol:
        print("BREACH: pentagon residual exceeds tolerance", file=sys.stderr)
        return 3
    print("ok")
    return 0


def _read_metrics_csv(path):
    try:
        with open(path) as fh:
            raw_lines = fh.readlines()
    except OSError as exc:
        raise UsageError("cannot read %s: %s" % (path, exc)) from exc
    reader = csv.reader(
        (line for line in raw_lines if not line.startswith("#")),
        lineterminator="\n",
    )
    table = list(reader)
    if not table:
        raise UsageError("%s: no header row" % path)
    header, rows = table[0], table[1:]
    for i, row in enumerate(rows, 2):
        if len(row) != len(header):
            raise UsageError(
                "%s: row %d has %d columns, expected %d"
                % (path, i, len(row), len(header))
            )
    return header, rows


def render_table(header, rows):
    widths = [len(h) for h in header]
    for row in rows:
        for j, cell in enumerate(row):
            widths[j] = max(widths[j], len(cell))
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(header), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines)


def _variant_averages(header, rows):
    """Mean of each numeric column grouped by model_variant."""
    vcol = header.index("model_variant")
    numeric = []
    for j, name in enumerate(header):
        if j == vcol:
            continue
        try:
            for row in rows:
                float(row[j])
        except ValueError:
            continue
        numeric.append(j)
    groups = {}
    for row in rows:
        groups.setdefault(row[vcol], []).append(row)
    out_header = ["model_variant"] + [header[j] for j in numeric]
    out_rows = []
    for variant in sorted(groups):
        members = groups[variant]
        means = [
            "%.6g" % (sum(float(r[j]) for r in members) / len(members))
            for j in numeric
        ]
        out_rows.append([variant] + means)
    return out_header, out_rows


def _plot_metrics(header, rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    if "atp_mean" in header and "model_variant" in header:
        tcol, vcol, acol = (header.index(c) for c in ("task", "model_variant", "atp_mean"))
        tasks = sorted({r[tcol] for r in rows})
        variants = sorted({r[vcol] for r in rows})
        width = 0.8 / max(len(variants), 1)
        for k, variant in enumerate(variants):
            xs, ys = [], []
            for i, task in enumerate(tasks):
                match = [r for r in rows if r[tcol] == task and r[vcol] == variant]
                if match:
                    xs.append(i + k * width)
                    ys.append(float(match[0][acol]))
            ax.bar(xs, ys, width=width, label=variant)
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(tasks))])
        ax.set_xticklabels(tasks)
        ax.set_ylabel("atp_mean")
        ax.legend()
    elif "epoch" in header:
        ecol = header.index("epoch")
        for j, name in enumerate(header):
            if name.startswith("loss"):
                ax.plot([float(r[ecol]) for r in rows],
                        [float(r[j]) for r in rows], label=name)
        ax.set_xlabel("epoch")
        ax.legend()
    else:
        plt.close(fig)
        raise UsageError("no plottable columns (need atp_mean or epoch)")
    fig.tight_layout()
    tmp = "%s.tmp" % path
    fig.savefig(tmp, format="svg")
    plt.close(fig)
    os.replace(tmp, path)


def cmd_report(args):
    o = resolve_options(args, args.opts)
    if not o.in_csv:
        raise UsageError("report requires --in")
    header, rows = _read_metrics_csv(o.in_csv)
    text = render_table(header, rows)
    if rows and "model_variant" in header:
        avg_header, avg_rows = _variant_averages(header, rows)
        if avg_rows:
            text += "\n\naverages by model_variant\n"
            text += render_table(avg_header, avg_rows)
    text += "\n"
    if o.out:
        write_text_atomic(o.out, text)
    sys.stdout.write(text)
    if o.plot:
        _plot_metrics(header, rows, o.plot)
        print("wrote plot to %s" % o.plot)
    return 0


# ---------------------------------------------------------------------------
# parser assembly


COMMANDS = (
    ("gen-data", cmd_gen_data, "generate scripted demo episodes",
     [Opt("task", str, "all", "task name, comma list, or 'all'"),
      Opt("n", int, 100, "episodes per task"),
      Opt("seed", int, 0, "seed"),
      Opt("out", str, None, "output JSONL path")]),
    ("train", cmd_train, "train a policy on demo episodes",
     MODEL_OPTS + TRAIN_OPTS + [
      Opt("data", str, None, "episode JSONL"),
      Opt("out", str, None, "checkpoint output path"),
      Opt("loss_csv", str, None, "per-epoch loss CSV"),
      Opt("report_json", str, None, "training report JSON")]),
    ("sample", cmd_sample, "sample action sequences from a checkpoint",
     INTEGRATOR_OPTS + [
      Opt("model", str, None, "checkpoint path"),
      Opt("task", str, "stack-2", "task for start states"),
      Opt("n", int, 1, "number of sequences"),
      Opt("seed", int, 0, "seed"),
      Opt("out", str, None, "JSONL output")]),
    ("eval", cmd_eval, "roll out a checkpoint and score it",
     INTEGRATOR_OPTS + [
      Opt("model", str, None, "checkpoint path"),
      Opt("tasks", str, "stack-2,sort-3", "tasks to evaluate"),
      Opt("episodes", int, 10, "rollouts per task"),
      Opt("seed", int, 0, "seed"),
      Opt("variant", str, "full", "model_variant label"),
      Opt("out", str, None, "metrics CSV path")]),
    ("ablate", cmd_ablate, "run the full/NT/NR/NH variant grid",
     MODEL_OPTS + TRAIN_OPTS + INTEGRATOR_OPTS + [
      Opt("data", str, None, "episode JSONL"),
      Opt("tasks", str, "stack-2,sort-3", "tasks to evaluate"),
      Opt("episodes", int, 10, "rollouts per task and variant"),
      Opt("out", str, None, "CSV output"),
      Opt("save_models", str, None, "directory for variant checkpoints")]),
    ("bench-integrators", cmd_bench_integrators, "Euler vs RK4 accuracy and cost",
     INTEGRATOR_OPTS + [
      Opt("analytic", bool, False, "use the closed-form decay field"),
      Opt("model", str, None, "checkpoint for model benchmark"),
      Opt("task", str, "stack-2", "task (model mode)"),
      Opt("episodes", int, 3, "rollouts per integrator"),
      Opt("seed", int, 0, "seed"),
      Opt("out", str, None, "CSV output")]),
    ("dump-mask", cmd_dump_mask, "write the transition mask as CSV",
     [Opt("model", str, None, "checkpoint (default: fresh build)"),
      Opt("mode", str, "hard", "mode for a fresh build"),
      Opt("out", str, None, "CSV output (default: stdout)")]),
    ("check-fusion", cmd_check_fusion, "residual report, exit 3 on breach",
     [Opt("spec", str, None, "fusion spec file"),
      Opt("tol", float, None, "residual tolerance")]),
    ("report", cmd_report, "render a metrics CSV as a table (and plot)",
     [Opt("in_csv", str, None, "metrics CSV", flag="--in"),
      Opt("out", str, None, "text output path"),
      Opt("plot", str, None, "SVG plot path")]),
)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="topoflow",
        description="Transition-masked flow policies on a tabletop block world.",
    )
    parser.add_argument("--version", action="version", version=VERSION_STRING)
    subs = parser.add_subparsers(dest="command")
    for name, func, help_, opts in COMMANDS:
        sub = subs.add_parser(name, help=help_)
        add_options(sub, opts)
        sub.set_defaults(func=func, opts=opts)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 0
        return 0 if code == 0 else 1
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return int(args.func(args) or 0)
    except UsageError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
