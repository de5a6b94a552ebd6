"""Command-line surface: gen / train / eval / gradcheck / infer / inspect.

Runs are driven by a JSON config file with flag overrides (flags win,
then the AVU_SEED environment variable, then the file).  Machine-readable
results go to files; stdout carries a short human summary.  Any
validation failure exits nonzero with a single parseable error line.
"""

import argparse
import concurrent.futures
import dataclasses
import json
import os
import sys

import numpy as np

from .bundle import Bundle, read_bundle, validate_bundle, write_bundle
from .config import ModelConfig
from .errors import AvuError, ConfigError
from .gradcheck import run_gradcheck
from .model import UnifiedModel
from .reporting import (save_heatmap_figure, save_loss_figure,
                        save_mask_figure, save_metric_figure,
                        write_gain_dump, write_pgm, write_program_text,
                        write_report_json)
from .synth import SceneGenerator
from .tokens import Task
from .train import (TrainConfig, evaluate, load_model, train, write_curve)

_TOP_KEYS = {"model", "train", "seed", "world_seed", "sigma",
             "n_train", "n_eval"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def load_run_config(path):
    """Read and validate the run config file; defaults when path is None."""
    raw = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            raw = json.load(fh)
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = {"model": ModelConfig.from_dict(raw.get("model", {})),
           "train": dict(raw.get("train", {})),
           "seed": int(raw.get("seed", 0)),
           "world_seed": int(raw.get("world_seed", 0)),
           "sigma": float(raw.get("sigma", 0.1)),
           "n_train": int(raw.get("n_train", 64)),
           "n_eval": int(raw.get("n_eval", 32))}
    bad = set(cfg["train"]) - _TRAIN_KEYS
    if bad:
        raise ConfigError(f"unknown train keys: {sorted(bad)}")
    return cfg


def _parse_mix(mix):
    if mix is None:
        return None
    out = {}
    for name, w in mix.items():
        try:
            out[Task[name]] = float(w)
        except KeyError:
            raise ConfigError(f"unknown task in mix: {name}") from None
    return out


def build_train_config(train_dict, seed):
    fields = dict(train_dict)
    fields["task_mix"] = _parse_mix(fields.get("task_mix"))
    fields.setdefault("seed", seed)
    return TrainConfig(**fields)


def resolve_seed(flag_seed, cfg):
    if flag_seed is not None:
        return int(flag_seed)
    env = os.environ.get("AVU_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"AVU_SEED is not an integer: {env!r}") \
                from None
    return cfg["seed"]


def _parse_tasks(spec):
    if not spec:
        return list(Task)
    out = []
    for name in spec.split(","):
        try:
            out.append(Task[name.strip()])
        except KeyError:
            raise ConfigError(f"unknown task: {name.strip()}") from None
    return out


def load_pools(data_dir, tasks=None):
    """Read per-task bundle directories written by `gen`."""
    if not os.path.isdir(data_dir):
        raise ConfigError(f"data directory not found: {data_dir}")
    pools = {}
    for task in (tasks or list(Task)):
        task_dir = os.path.join(data_dir, task.name)
        if not os.path.isdir(task_dir):
            continue
        names = sorted(n for n in os.listdir(task_dir)
                       if n.endswith(".avuf"))
        bundles = []
        for name in names:
            b = read_bundle(os.path.join(task_dir, name))
            if b.task != int(task):
                raise ConfigError(
                    f"{name} holds task {b.task}, found under {task.name}")
            bundles.append(b)
        if bundles:
            pools[task] = bundles
    if not pools:
        raise ConfigError(f"no bundles under {data_dir}")
    return pools


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args):
    cfg = load_run_config(args.config)
    seed = resolve_seed(args.seed, cfg)
    n = args.n if args.n is not None else cfg["n_train"]
    sigma = args.sigma if args.sigma is not None else cfg["sigma"]
    world = (args.world_seed if args.world_seed is not None
             else cfg["world_seed"])
    tasks = _parse_tasks(args.tasks)
    gen = SceneGenerator(cfg["model"], world_seed=world, sigma=sigma)
    os.makedirs(args.out, exist_ok=True)
    manifest = {"model": cfg["model"].to_dict(), "sigma": sigma,
                "world_seed": world, "seed": seed, "tasks": {}}
    jobs = []
    for task in tasks:
        task_dir = os.path.join(args.out, task.name)
        os.makedirs(task_dir, exist_ok=True)
        bundles, _ = gen.make_dataset(task, n, seed0=1_000 * seed)
        files = []
        for i, b in enumerate(bundles):
            name = f"{i:05d}.avuf"
            jobs.append((os.path.join(task_dir, name), b))
            files.append(f"{task.name}/{name}")
        manifest["tasks"][task.name] = {"count": n, "files": files}
    if args.threads > 1:
        with concurrent.futures.ThreadPoolExecutor(args.threads) as pool:
            list(pool.map(lambda j: write_bundle(*j), jobs))
    else:
        for path, b in jobs:
            write_bundle(path, b)
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(jobs)} bundles for {len(tasks)} tasks to {args.out}")
    return 0


def cmd_train(args):
    cfg = load_run_config(args.config)
    seed = resolve_seed(args.seed, cfg)
    pools = load_pools(args.data)
    model = UnifiedModel(cfg["model"], seed=seed)
    tc = build_train_config(cfg["train"], seed)
    result = train(model, pools, tc, checkpoint_path=args.out)
    curve_path = args.curve or os.path.join(
        os.path.dirname(os.path.abspath(args.out)), "curves.csv")
    write_curve(curve_path, result.curve)
    if args.report_dir:
        os.makedirs(args.report_dir, exist_ok=True)
        save_loss_figure(os.path.join(args.report_dir, "loss.png"),
                         result.curve)
    last = {}
    for _, tid, loss in result.curve:
        last[tid] = loss
    print(f"trained {result.iterations} iterations; checkpoint {args.out}")
    for tid in sorted(last):
        print(f"  final {Task(tid).name} loss {last[tid]:.4f}")
    return 0


def cmd_eval(args):
    model = load_model(args.checkpoint)
    pools = load_pools(args.data)
    report = evaluate(model, pools)
    write_report_json(args.out, report,
                      meta={"checkpoint": os.path.basename(args.checkpoint),
                            "n": {t.name: len(v) for t, v in pools.items()}})
    if args.report_dir:
        os.makedirs(args.report_dir, exist_ok=True)
        save_metric_figure(os.path.join(args.report_dir, "metrics.png"),
                           report)
        _eval_exports(model, pools, args.report_dir)
    print(f"evaluated {sum(len(v) for v in pools.values())} bundles")
    for line in report.lines(sep="  "):
        print("  " + line)
    return 0


def _eval_exports(model, pools, out_dir):
    """Render one qualitative example for the pixel-output tasks."""
    if Task.AVS in pools:
        b = pools[Task.AVS][0]
        pred = model.predict(b)
        save_mask_figure(os.path.join(out_dir, "avs_example.png"),
                         pred["masks"], truth=b.labels["masks"][0])
        write_pgm(os.path.join(out_dir, "avs_example_t00.pgm"),
                  pred["masks"][0], maxval=1)
    if Task.SSL in pools:
        b = pools[Task.SSL][0]
        pred = model.predict(b)
        save_heatmap_figure(os.path.join(out_dir, "ssl_example.png"),
                            pred["heatmap"], model.config.grid)


def cmd_gradcheck(args):
    results = run_gradcheck(seeds=args.seeds)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_infer(args):
    model = load_model(args.checkpoint)
    bundle = read_bundle(args.bundle)
    if bundle.task == 255:
        if args.task is None:
            raise ConfigError("unlabeled bundle: pass --task")
        bundle = dataclasses.replace(bundle, task=int(Task[args.task]),
                                     labels=None)
    elif args.task is not None and int(Task[args.task]) != bundle.task:
        raise ConfigError("--task disagrees with the bundle's own task")
    validate_bundle(bundle, model.config)
    os.makedirs(args.out_dir, exist_ok=True)
    task = Task(bundle.task)
    pred = model.predict(bundle)
    write_program_text(os.path.join(args.out_dir, "program.txt"),
                       pred["program"], model.vocab)
    ctx = model.encode_bundles([bundle])
    write_gain_dump(os.path.join(args.out_dir, "gains.tsv"),
                    ctx["gain_temporal"].data, ctx["gain_spatial"].data)
    summary = [f"task {task.name}", f"program {len(pred['program'])} tokens"]
    if task == Task.AVE:
        np.savetxt(os.path.join(args.out_dir, "events.txt"),
                   pred["events"][None], fmt="%d")
        summary.append(f"events {pred['events'].tolist()}")
    elif task == Task.AVVP:
        np.savetxt(os.path.join(args.out_dir, "audible.txt"),
                   pred["audible"], fmt="%d")
        np.savetxt(os.path.join(args.out_dir, "visible.txt"),
                   pred["visible"], fmt="%d")
        summary.append(f"audible tags {int(pred['audible'].sum())}")
    elif task == Task.SSL:
        save_heatmap_figure(os.path.join(args.out_dir, "heatmap.png"),
                            pred["heatmap"], model.config.grid)
        for t, region in enumerate(pred["regions"]):
            write_pgm(os.path.join(args.out_dir, f"region_t{t:02d}.pgm"),
                      region, maxval=1)
        summary.append(f"bins {pred['bins'].tolist()}")
    elif task == Task.AVS:
        save_mask_figure(os.path.join(args.out_dir, "masks.png"),
                         pred["masks"])
        for t, mask in enumerate(pred["masks"]):
            write_pgm(os.path.join(args.out_dir, f"mask_t{t:02d}.pgm"),
                      mask, maxval=1)
        on = int(pred["masks"][0].sum())
        summary.append(f"mask t=0 foreground {on} px")
    else:
        with open(os.path.join(args.out_dir, "answer.txt"), "w") as fh:
            fh.write(f"{pred['answer']}\n")
        summary.append(f"answer {pred['answer']}")
    print("; ".join(summary))
    return 0


def cmd_inspect(args):
    b = read_bundle(args.bundle)
    validate_bundle(b)
    task = "UNLABELED" if b.task == 255 else Task(b.task).name
    T, D_a = b.audio.shape
    M = b.patches.shape[1]
    print(f"task={task} T={T} M={M} D_a={D_a} D_v={b.patches.shape[2]} "
          f"D_t={b.d_text} mask_hw={b.mask_hw[0]}x{b.mask_hw[1]}")
    raw = "yes" if b.prompt_raw is not None else "no"
    print(f"prompt template={b.prompt_template} raw_vector={raw}")
    if b.labels is None:
        print("labels: none")
        return 0
    if b.task == int(Task.AVE):
        events = b.labels["events"]
        bg = b.labels["n_classes"]
        print(f"labels: events per segment {events.tolist()} "
              f"(background={bg})")
    elif b.task == int(Task.AVVP):
        print(f"labels: audible tags {int(b.labels['audible'].sum())}, "
              f"visible tags {int(b.labels['visible'].sum())}")
    elif b.task == int(Task.SSL):
        bins = b.labels["bins"]
        print(f"labels: sounding segments "
              f"{int((bins >= 0).sum())}/{len(bins)}")
    elif b.task == int(Task.AVS):
        masks = b.labels["masks"]
        print(f"labels: {masks.shape[0]} mask(s), "
              f"foreground {int(masks[0].sum())} px")
    else:
        print(f"labels: answer={b.labels['answer']} "
              f"question_template={b.labels['template']}")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="avu",
        description="Unified audio-visual task model: data, training, "
                    "evaluation, inference.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int, default=None,
                        help="overrides AVU_SEED and the config file")

    g = sub.add_parser("gen", help="write synthetic bundle pools")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=None, help="bundles per task")
    g.add_argument("--tasks", default=None, help="comma list, default all")
    g.add_argument("--sigma", type=float, default=None)
    g.add_argument("--world-seed", type=int, default=None)
    g.add_argument("--threads", type=int, default=1)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train on a generated pool")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--curve", default=None, help="loss curve CSV path")
    t.add_argument("--report-dir", default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a pool")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--report-dir", default=None)
    e.set_defaults(fn=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference audit")
    gc.add_argument("--seeds", type=int, default=20)
    gc.set_defaults(fn=cmd_gradcheck)

    i = sub.add_parser("infer", help="run one bundle through the model")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--bundle", required=True)
    i.add_argument("--out-dir", required=True)
    i.add_argument("--task", default=None,
                   help="task name for unlabeled bundles")
    i.set_defaults(fn=cmd_infer)

    ins = sub.add_parser("inspect", help="print a bundle's header")
    ins.add_argument("--bundle", required=True)
    ins.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except AvuError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: OSError: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
