"""``fuse-depth`` command line: data generation, training stages, evaluation and benchmarks.

Every subcommand accepts ``--seed``, ``--config FILE`` (``key = value`` lines,
flags win) and ``--from-manifest RUN.json`` (replay a previous run's
settings, flags still win), and writes a run manifest next to its primary
output.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, check_keys, parse_config

log = logging.getLogger("fuse_depth")

# argparse dests that steer the CLI itself rather than the run
CONTROL = {"command", "config", "from_manifest", "manifest", "verbose", "func"}


class UsageError(Exception):
    """Bad invocation: reported with exit code 2."""


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    version: str = ""
    duration_s: float = 0.0

    def write(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)

    @classmethod
    def read(cls, path: str | os.PathLike) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def default_manifest_path(output: str) -> str:
    return str(output).rstrip("/\\") + ".run.json"


# -- argument helpers ------------------------------------------------------


def _parser(sub, name: str, help: str) -> argparse.ArgumentParser:
    p = sub.add_parser(name, help=help, description=help, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--seed", type=int, default=0, help="seed for every random draw in the run")
    p.add_argument("--config", default=None, help="key = value file; command-line flags override it")
    p.add_argument("--from-manifest", default=None, help="reuse the settings recorded in a run manifest")
    p.add_argument("--manifest", default=None, help="run manifest path; None means <output>.run.json")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def _train_args(p, steps=500, lr=5e-5):
    p.add_argument("--steps", type=int, default=steps, help="optimizer steps")
    p.add_argument("--lr", type=float, default=lr, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, default=8, help="samples per step")
    p.add_argument("--bins", type=int, default=3, help="voxel time bins")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    p.add_argument("--check-frozen", action="store_true", help="verify frozen groups after every step")


def _degradation_args(p, default="on"):
    p.add_argument("--degradation", choices=["on", "off"], default=default, help="corrupt training pairs")
    p.add_argument("--brightness-min", type=float, default=0.5, help="lower brightness factor")
    p.add_argument("--brightness-max", type=float, default=1.5, help="upper brightness factor")
    p.add_argument("--local-prob", type=float, default=0.5, help="probability of a local degradation")
    p.add_argument("--region-frac", type=float, default=0.2, help="local region side as a fraction of the image side")


def _degradation(args):
    from .degradation import DegradationConfig

    if args.degradation == "off":
        return None
    return DegradationConfig(
        brightness_range=(args.brightness_min, args.brightness_max),
        local_prob=args.local_prob,
        region_frac=args.region_frac,
        rng_seed=args.seed,
    )


def _train_config(args, **kw):
    from .pipelines import TrainConfig

    return TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        steps=args.steps,
        seed=args.seed,
        threads=args.threads,
        check_frozen=args.check_frozen,
        **kw,
    )


def _save_losses(losses, path):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v!r}\n")


def _training_outputs(args, result, label):
    result.checkpoint.save(args.out)
    outputs = [args.out]
    if args.losses:
        _save_losses(result.losses, args.losses)
        outputs.append(args.losses)
    print(f"{label}: loss {result.initial_loss:.6g} -> {result.final_loss:.6g} ({result.reduction:.1%} lower)")
    return outputs


# -- subcommands -------------------------------------------------------------


def cmd_synth(args):
    from .synthdata import generate_triplets, write_dataset

    triplets = generate_triplets(args.samples, args.seed, args.height, args.width, args.frames, args.theta)
    meta = {"seed": args.seed, "theta": args.theta, "frames": args.frames}
    write_dataset(triplets, args.out, meta)
    counts = [len(t.events) for t in triplets]
    print(f"wrote {len(triplets)} samples to {args.out} ({min(counts)}-{max(counts)} events each)")
    return [], [args.out]


def cmd_voxelize(args):
    from .events import parse_events, voxelize
    from .io import write_voxel

    width, height = args.width, args.height
    if width is None or height is None:
        # geometry not given: take the smallest sensor that holds every event
        probe = parse_events(args.events, 2**31 - 1, 2**31 - 1)
        width = width or (int(probe.x.max()) + 1 if len(probe) else 1)
        height = height or (int(probe.y.max()) + 1 if len(probe) else 1)
    stream = parse_events(args.events, width, height)
    grid = voxelize(stream, args.bins)
    write_voxel(args.out, grid.astype(np.float32))
    print(f"{len(stream)} events -> {height}x{width}x{args.bins} voxel grid")
    return [args.events], [args.out, args.out + ".txt"]


def cmd_degrade(args):
    from .degradation import DegradationConfig, degrade_pair
    from .events import parse_events, voxelize
    from .io import read_pgm, write_pgm, write_voxel

    image = read_pgm(args.image)
    h, w = image.shape
    voxel = voxelize(parse_events(args.events, w, h), args.bins).astype(np.float32)
    cfg = DegradationConfig(
        brightness_range=(args.brightness_min, args.brightness_max),
        local_prob=args.local_prob,
        region_frac=args.region_frac,
        rng_seed=args.seed,
    )
    out_img, out_vox, record = degrade_pair(image, voxel, cfg, args.seed)
    write_pgm(args.out_image, out_img)
    write_voxel(args.out_voxel, out_vox)
    with open(args.record, "w", encoding="ascii") as fh:
        fh.write(record.to_json() + "\n")
    print(record.to_json())
    return [args.image, args.events], [args.out_image, args.out_voxel, args.out_voxel + ".txt", args.record]


def cmd_pretrain_teacher(args):
    from .encoders import EncoderConfig
    from .pipelines import pretrain_teacher
    from .synthdata import load_dataset

    data = load_dataset(args.data, args.bins)
    enc = EncoderConfig(
        image_size=tuple(data.images.shape[1:]),
        patch_size=args.patch_size,
        embed_dim=args.embed_dim,
        depth=args.depth,
        heads=args.heads,
        mlp_ratio=args.mlp_ratio,
    )
    result = pretrain_teacher(data, _train_config(args), enc)
    return [args.data], _training_outputs(args, result, "teacher SiLog")


def cmd_stage1(args):
    from .checkpoint import ModelCheckpoint
    from .pipelines import run_stage1
    from .synthdata import load_dataset

    data = load_dataset(args.data, args.bins)
    cfg = _train_config(args, lora_rank=args.lora_rank, align_alpha=args.align_alpha, align_beta=args.align_beta)
    result = run_stage1(data, ModelCheckpoint.load(args.teacher), cfg)
    return [args.data, args.teacher], _training_outputs(args, result, "stage I alignment")


def cmd_stage2(args):
    from .checkpoint import ModelCheckpoint
    from .pipelines import run_stage2
    from .synthdata import load_dataset

    data = load_dataset(args.data, args.bins)
    cfg = _train_config(args, align_alpha=args.align_alpha, align_beta=args.align_beta)
    result = run_stage2(data, ModelCheckpoint.load(args.stage1), cfg, _degradation(args), fusion=args.fusion)
    return [args.data, args.stage1], _training_outputs(args, result, "stage II alignment")


def cmd_finetune(args):
    from .checkpoint import ModelCheckpoint
    from .pipelines import finetune
    from .synthdata import load_dataset

    data = load_dataset(args.data, args.bins)
    ckpt = ModelCheckpoint.load(args.joint)
    result = finetune(data, ckpt, _train_config(args), _degradation(args), args.mode, args.resume)
    return [args.data, args.joint], _training_outputs(args, result, "finetune SiLog")


def cmd_eval(args):
    from .metrics import evaluate

    if args.pred:
        from .io import read_pfm

        if not args.gt:
            raise UsageError("eval: --pred needs --gt")
        pred, gt = read_pfm(args.pred), read_pfm(args.gt)
        inputs = [args.pred, args.gt]
    else:
        if not (args.checkpoint and args.data):
            raise UsageError("eval: give --pred/--gt, or --checkpoint with --data")
        from .checkpoint import ModelCheckpoint
        from .degradation import DegradationConfig, occlude_image
        from .pipelines import deterministic, predict
        from .synthdata import load_dataset

        deterministic(args.seed)
        data = load_dataset(args.data, args.bins)
        model = ModelCheckpoint.load(args.checkpoint).build_model()
        images = None
        if args.occlude > 0:
            rng = np.random.default_rng(args.seed)
            images = np.stack([occlude_image(im, args.occlude, rng)[0] for im in data.images])
        deg = DegradationConfig(rng_seed=args.seed) if args.degradation == "on" else None
        pred = predict(model, data, args.mode, deg, args.seed, images=images).double().numpy()
        gt = data.depths
        inputs = [args.checkpoint, args.data]
    rng_ = None if args.depth_min is None else (args.depth_min, args.depth_max)
    report = evaluate(pred, gt, depth_range=rng_)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return inputs, [args.out] if args.out else []


def cmd_ablate(args):
    from .ablation import AblationConfig, run_ablation

    seeds = tuple(int(s) for s in str(args.seeds).split(",") if s.strip())
    cfg = AblationConfig(
        seeds=seeds,
        foundation_samples=args.foundation_samples,
        pair_samples=args.pair_samples,
        labeled_samples=args.labeled_samples,
        test_samples=args.test_samples,
        teacher_steps=args.teacher_steps,
        stage1_steps=args.stage1_steps,
        stage2_steps=args.stage2_steps,
        finetune_steps=args.finetune_steps,
        scratch_steps=args.scratch_steps,
        learning_rate=args.lr,
        batch_size=args.batch_size,
    )
    summary = run_ablation(cfg)
    Path(args.out).write_text(summary.to_csv())
    for v in ("baseline1", "baseline2", "baseline3", "fuse", "image_only"):
        print(f"{v:>10}: median degraded Abs.Rel {summary.median(v):.4f}, "
              f"occlusion degradation {summary.occlusion_degradation(v):+.1%}")
    print(f"FUSE vs Baseline-2: {summary.gap('fuse', 'baseline2'):+.1%}; "
          f"Baseline-2 vs Baseline-1: {summary.gap('baseline2', 'baseline1'):+.1%}")
    return [], [args.out]


def cmd_bench(args):
    from .bench import run_bench

    rows = run_bench(batch=args.batch, repeats=args.repeats, seed=args.seed, threads=args.threads)
    header = "config,params_m,gflops,latency_ms\n"
    text = header + "".join(f"{r.name},{r.params_m:.4f},{r.gflops:.4f},{r.latency_ms:.3f}\n" for r in rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return [], [args.out] if args.out else []


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fuse-depth",
        description="Image + event depth estimation at toy scale.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = _parser(sub, "synth", "generate a synthetic image/event/depth dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--samples", type=int, default=64, help="number of scenes")
    p.add_argument("--height", type=int, default=32, help="image height")
    p.add_argument("--width", type=int, default=32, help="image width")
    p.add_argument("--frames", type=int, default=8, help="rendered frames per scene")
    p.add_argument("--theta", type=float, default=0.15, help="event contrast threshold")
    p.set_defaults(func=cmd_synth)

    p = _parser(sub, "voxelize", "convert an event CSV into a stacked-PFM voxel grid")
    p.add_argument("--events", required=True, help="event CSV (t_us,x,y,p)")
    p.add_argument("--out", required=True, help="output PFM (bins stacked vertically, plus .txt sidecar)")
    p.add_argument("--bins", type=int, default=3, help="time bins")
    p.add_argument("--width", type=int, default=None, help="sensor width (default: from the events)")
    p.add_argument("--height", type=int, default=None, help="sensor height (default: from the events)")
    p.set_defaults(func=cmd_voxelize)

    p = _parser(sub, "degrade", "apply the random degradation to one image/event pair")
    p.add_argument("--image", required=True, help="input PGM")
    p.add_argument("--events", required=True, help="input event CSV")
    p.add_argument("--out-image", required=True, help="degraded PGM")
    p.add_argument("--out-voxel", required=True, help="degraded voxel grid PFM")
    p.add_argument("--record", required=True, help="JSON-lines file receiving the degradation record")
    p.add_argument("--bins", type=int, default=3, help="voxel time bins")
    p.add_argument("--brightness-min", type=float, default=0.5, help="lower brightness factor")
    p.add_argument("--brightness-max", type=float, default=1.5, help="upper brightness factor")
    p.add_argument("--local-prob", type=float, default=0.5, help="probability of a local degradation")
    p.add_argument("--region-frac", type=float, default=0.2, help="region side as a fraction of the image side")
    p.set_defaults(func=cmd_degrade)

    p = _parser(sub, "pretrain-teacher", "train the image-only teacher on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory from `synth`")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--losses", default=None, help="optional per-step loss CSV")
    _train_args(p)
    p.add_argument("--patch-size", type=int, default=8, help="ViT patch size")
    p.add_argument("--embed-dim", type=int, default=64, help="token channels")
    p.add_argument("--depth", type=int, default=4, help="transformer blocks")
    p.add_argument("--heads", type=int, default=4, help="attention heads")
    p.add_argument("--mlp-ratio", type=float, default=4.0, help="MLP hidden width / channels")
    p.set_defaults(func=cmd_pretrain_teacher)

    p = _parser(sub, "pst-stage1", "align a LoRA-adapted event encoder with the teacher")
    p.add_argument("--data", required=True, help="dataset directory (depth unused)")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--losses", default=None, help="optional per-step loss CSV")
    _train_args(p)
    p.add_argument("--lora-rank", type=int, default=4, help="adapter rank")
    p.add_argument("--align-alpha", type=float, default=0.2, help="lower cosine gate")
    p.add_argument("--align-beta", type=float, default=0.85, help="upper cosine gate")
    p.set_defaults(func=cmd_stage1)

    p = _parser(sub, "pst-stage2", "train only the fusion module on degraded pairs")
    p.add_argument("--data", required=True, help="dataset directory (depth unused)")
    p.add_argument("--stage1", required=True, help="stage I checkpoint")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--losses", default=None, help="optional per-step loss CSV")
    p.add_argument("--fusion", choices=["fredfuse", "attention"], default="fredfuse", help="fusion module")
    _train_args(p)
    p.add_argument("--align-alpha", type=float, default=0.2, help="lower cosine gate")
    p.add_argument("--align-beta", type=float, default=0.85, help="upper cosine gate")
    _degradation_args(p, "on")
    p.set_defaults(func=cmd_stage2)

    p = _parser(sub, "finetune", "fit the depth head on labelled data with encoders frozen")
    p.add_argument("--data", required=True, help="labelled dataset directory")
    p.add_argument("--joint", required=True, help="checkpoint to fine-tune (stage II, or teacher with --mode image)")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--losses", default=None, help="optional per-step loss CSV")
    p.add_argument("--mode", choices=["fused", "image"], default="fused", help="which branch feeds the head")
    p.add_argument("--resume", action="store_true", help="continue from the optimizer state stored in --joint")
    _train_args(p)
    _degradation_args(p, "off")
    p.set_defaults(func=cmd_finetune)

    p = _parser(sub, "eval", "depth metrics as a one-row CSV")
    p.add_argument("--pred", default=None, help="predicted depth PFM")
    p.add_argument("--gt", default=None, help="ground-truth depth PFM")
    p.add_argument("--checkpoint", default=None, help="model checkpoint (instead of --pred)")
    p.add_argument("--data", default=None, help="dataset directory evaluated with --checkpoint")
    p.add_argument("--mode", choices=["fused", "image", "event"], default="fused", help="model branch")
    p.add_argument("--bins", type=int, default=3, help="voxel time bins")
    p.add_argument("--degradation", choices=["on", "off"], default="off", help="degrade test pairs")
    p.add_argument("--occlude", type=float, default=0.0, help="black out one region of this side fraction in each image")
    p.add_argument("--depth-min", type=float, default=None, help="evaluate only ground truth >= this")
    p.add_argument("--depth-max", type=float, default=None, help="evaluate only ground truth <= this")
    p.add_argument("--out", default=None, help="output CSV (always echoed to stdout)")
    p.set_defaults(func=cmd_eval)

    p = _parser(sub, "ablate", "train baselines and FUSE on synthetic data and compare them")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--foundation-samples", type=int, default=512, help="image-depth pairs for the teacher")
    p.add_argument("--pair-samples", type=int, default=256, help="unlabelled image-event pairs for transfer")
    p.add_argument("--labeled-samples", type=int, default=32, help="labelled image-event-depth triplets")
    p.add_argument("--test-samples", type=int, default=128, help="held-out test triplets")
    p.add_argument("--teacher-steps", type=int, default=3000, help="teacher steps")
    p.add_argument("--stage1-steps", type=int, default=500, help="stage I steps")
    p.add_argument("--stage2-steps", type=int, default=1500, help="stage II steps")
    p.add_argument("--finetune-steps", type=int, default=500, help="head fine-tune steps")
    p.add_argument("--scratch-steps", type=int, default=2500, help="steps for the from-scratch baselines")
    p.add_argument("--lr", type=float, default=2e-4, help="learning rate for every variant")
    p.add_argument("--batch-size", type=int, default=8, help="samples per step")
    p.set_defaults(func=cmd_ablate)

    p = _parser(sub, "bench", "parameters, FLOPs and latency of the toy models")
    p.add_argument("--out", default=None, help="output CSV (always echoed to stdout)")
    p.add_argument("--batch", type=int, default=1, help="batch size")
    p.add_argument("--repeats", type=int, default=20, help="timed forward passes")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    p.set_defaults(func=cmd_bench)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _coerce(action: argparse.Action, key: str, value):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return text in ("true", "1", "yes")
    if value is None or (isinstance(value, str) and value.lower() == "none" and action.default is None):
        return None
    if action.type is not None and isinstance(value, str):
        try:
            value = action.type(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    if action.choices is not None and value not in action.choices:
        raise ConfigError(f"{key}: {value!r} not in {sorted(action.choices)}")
    return value


def _apply_defaults(sub: argparse.ArgumentParser, values: dict) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in CONTROL and a.dest != "help"}
    check_keys(values, actions)
    typed = {k: _coerce(actions[k], k, v) for k, v in values.items()}
    for dest in typed:
        # a value from the file satisfies a required flag
        actions[dest].required = False
    sub.set_defaults(**typed)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse_lenient(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"fuse-depth: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        inputs, outputs = args.func(args)
    except UsageError as exc:
        print(f"fuse-depth {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: diagnostic and exit code 1
        if args.verbose:
            log.exception("run failed")
        print(f"fuse-depth {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    config = {k: v for k, v in vars(args).items() if k not in CONTROL}
    manifest = RunManifest(
        subcommand=args.command,
        config=config,
        seed=args.seed,
        inputs=[str(p) for p in inputs],
        outputs=[str(p) for p in outputs],
        version=version_string(),
        duration_s=round(time.perf_counter() - started, 3),
    )
    target = args.manifest or (default_manifest_path(outputs[0]) if outputs else None)
    if target:
        manifest.write(target)
    return 0


def _parse_lenient(argv) -> argparse.Namespace:
    """Parse, letting values from --config/--from-manifest satisfy required flags."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    probe.add_argument("--from-manifest", default=None)
    known, _ = probe.parse_known_args(argv)
    if known.config is None and known.from_manifest is None:
        return build_parser().parse_args(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    parser = build_parser()
    if command not in _subparser_names(parser):
        return parser.parse_args(argv)  # exits with usage
    sub = _subparser(parser, command)
    values = {}
    if known.from_manifest:
        manifest = RunManifest.read(known.from_manifest)
        if manifest.subcommand != command:
            raise UsageError(f"manifest records `{manifest.subcommand}`, not `{command}`")
        values.update(manifest.config)
    if known.config:
        values.update(parse_config(known.config))
    _apply_defaults(sub, values)
    return parser.parse_args(argv)


def _subparser_names(parser) -> set[str]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return set(action.choices)
    return set()


if __name__ == "__main__":
    sys.exit(main())
