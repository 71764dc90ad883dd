"""Command-line entry points: gen-data, train, sample, eval.

Exit codes:
  0  success
  2  bad arguments, config, input files or an empty dataset
  3  data generation exhausted its retries
  4  training hit a non-finite loss
  5  instruction could not be parsed against the scene
  6  sampling produced only degenerate rotations
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

from shapely.geometry import MultiPoint

from . import __version__
from .errors import (
    ConfigError,
    EmptyResults,
    FormatError,
    GenerationExhausted,
    NonFiniteLoss,
    SamplingDegenerate,
    UnknownCategory,
    UnparseableInstruction,
)

log = logging.getLogger("sport")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_GENERATION = 3
EXIT_NONFINITE = 4
EXIT_UNPARSEABLE = 5
EXIT_DEGENERATE = 6


def resolve_seed(seed: int | None, default: int = 0) -> int:
    """Explicit flag, else ``SPORT_SEED``, else ``default``."""
    if seed is not None:
        return seed
    env = os.environ.get("SPORT_SEED")
    if env is None or env.strip() == "":
        return default
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"SPORT_SEED is not an integer: {env!r}") from exc


def parse_relations(text: str):
    from .scene import Relation

    out = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        try:
            out.append(Relation.parse(token))
        except ValueError as exc:
            raise ConfigError(f"unknown relation {token!r}") from exc
    if not out:
        raise ConfigError("no relations given")
    return out


# --- rendering ----------------------------------------------------------------

_ROLE_STROKE = {"movable": "#d62728", "reference": "#1f77b4", "irrelevant": "#7f7f7f"}


def render_svg(before, after, scale: float = 500.0) -> str:
    """Top-down view of two scenes side by side, one ``<g>`` per object."""
    ws = before.workspace
    w, h = (ws.x_max - ws.x_min) * scale, (ws.y_max - ws.y_min) * scale
    pad = 10.0

    def pts(box, x0):
        hull = MultiPoint([tuple(p) for p in box.vertices()[:, :2]]).convex_hull
        return " ".join(f"{x0 + (x - ws.x_min) * scale:.2f},{pad + (ws.y_max - y) * scale:.2f}" for x, y in hull.exterior.coords[:-1])

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * w + 3 * pad:.0f}" height="{h + 2 * pad + 16:.0f}">',
        f'<rect x="{pad}" y="{pad}" width="{w:.2f}" height="{h:.2f}" fill="#f4f1ea" stroke="#333"/>',
        f'<rect x="{2 * pad + w:.2f}" y="{pad}" width="{w:.2f}" height="{h:.2f}" fill="#f4f1ea" stroke="#333"/>',
        f'<text x="{pad}" y="{h + 2 * pad + 10:.0f}" font-size="12">before</text>',
        f'<text x="{2 * pad + w:.2f}" y="{h + 2 * pad + 10:.0f}" font-size="12">after</text>',
    ]
    for i, (a, b) in enumerate(zip(before.objects, after.objects)):
        fill = "#%02x%02x%02x" % tuple(int(round(255 * c)) for c in a.model.color)
        stroke = _ROLE_STROKE[a.role.value]
        parts.append(f'<g id="object-{i}" class="{a.role.value}"><title>{a.model.descriptor}</title>')
        for box, x0 in ((a.box, pad), (b.box, 2 * pad + w)):
            parts.append(f'<polygon points="{pts(box, x0)}" fill="{fill}" fill-opacity="0.7" stroke="{stroke}" stroke-width="2"/>')
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --- subcommands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .datagen import default_catalog, generate_dataset, resolve_jobs, write_dataset

    seed = resolve_seed(args.seed)
    relations = parse_relations(args.relations)
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    if not 2 <= args.objects_min <= args.objects_max <= 10:
        raise ConfigError("need 2 <= --objects-min <= --objects-max <= 10")
    log.info("gen-data out=%s count=%d seed=%d relations=%s objects=%d..%d balanced=%s",
             args.out, args.count, seed, ",".join(r.value for r in relations), args.objects_min, args.objects_max, args.balanced)
    catalog = default_catalog()
    instances = generate_dataset(catalog, args.count, relations, seed, args.balanced,
                                 (args.objects_min, args.objects_max), resolve_jobs(args.jobs))
    manifest = write_dataset(args.out, instances, catalog, seed, args.split)
    for rel, n in manifest["per_relation"].items():
        print(f"{rel}\t{n}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .datagen import read_dataset
    from .diffusion import DiffusionConfig, TrainState, dump_config_text, parse_config_pairs, train

    pairs = parse_config_pairs(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    if args.seed is not None or ("seed" not in pairs and os.environ.get("SPORT_SEED")):
        pairs["seed"] = str(resolve_seed(args.seed))
    if args.epochs is not None:
        pairs["epochs"] = str(args.epochs)
    cfg = DiffusionConfig.from_dict(pairs)
    instances = read_dataset(args.data)
    if not instances:
        raise ConfigError(f"{args.data}: empty dataset")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if args.resume:
        state = TrainState.load(args.resume)
        log.info("resuming from %s at epoch %d, step %d", args.resume, state.epoch, state.step)
    log.info("train config:\n%s", dump_config_text(cfg))
    (out / "config.txt").write_text(dump_config_text(cfg), encoding="utf-8")
    state = train(instances, cfg, state, on_epoch=lambda e, l: log.info("epoch %d loss %.6f", e, l))
    state.save(out / "model.spck")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "mean_loss"])
    for e, loss in enumerate(state.losses, 1):
        w.writerow([e, repr(float(loss))])
    (out / "loss.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(f"{out / 'model.spck'}\tepochs={state.epoch}\tstep={state.step}")
    return EXIT_OK


def cmd_sample(args) -> int:
    from .datagen import parse_instruction, scene_clouds
    from .diffusion import NoiseSchedule, TrainState, sample_scene
    from .encoder import build_conditioning
    from .scene import Role, dumps_json, load_catalog, load_scene

    seed = resolve_seed(args.seed)
    state = TrainState.load(args.model)
    cfg = state.config
    catalog_path = Path(args.catalog) if args.catalog else Path(args.scene).with_name("catalog.json")
    scene = load_scene(args.scene, load_catalog(catalog_path))
    descriptors = [o.model.descriptor for o in scene.objects]
    movable, refs, relation = parse_instruction(args.instruction, descriptors)
    if len(set(descriptors)) != len(descriptors):
        raise UnparseableInstruction("scene objects must have distinct descriptors")
    roles = [Role.MOVABLE if d == movable else Role.REFERENCE if d in refs else Role.IRRELEVANT for d in descriptors]
    scene = scene.with_roles(roles)
    log.info("sample relation=%s movable=%r references=%r seed=%d", relation.value, movable, refs, seed)
    clouds = scene_clouds(scene, args.cloud_samples, seed)
    cond = build_conditioning(scene, clouds, args.instruction, state.text_encoder(), cfg.cloud_points, seed)
    goal = sample_scene(state.model, scene, cond, NoiseSchedule.from_config(cfg), seed, cfg.strict_paper_update)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "goal_scene.json").write_text(dumps_json(goal.to_dict()), encoding="utf-8")
    (out / "render.svg").write_text(render_svg(scene, goal), encoding="utf-8")
    print(" ".join(repr(float(x)) for x in goal.objects[cond.movable].pose.to_list()))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .datagen import read_dataset, resolve_jobs
    from .diffusion import TrainState
    from .evaluation import aggregate, evaluate, results_csv, summary_table

    seed = resolve_seed(args.seed)
    state = TrainState.load(args.model)
    instances = read_dataset(args.data)
    if not instances:
        raise ConfigError(f"{args.data}: empty dataset")
    results, per_sample = evaluate(state, instances, seed, args.batch_size, resolve_jobs(args.jobs), args.samples)
    meta = {"seed": seed, "step": state.step, "epoch": state.epoch, "config": state.config.to_dict(), "samples": args.samples}
    report = aggregate(results, meta, per_sample)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(report.to_json(), encoding="utf-8")
    if args.csv:
        Path(args.csv).write_text(results_csv(results), encoding="utf-8")
    if not report.check():
        log.error("metric invariant violated: %s", report.to_dict())
    sys.stdout.write(summary_table(report))
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sport", description="Language-conditioned goal-pose generation for tabletop rearrangement.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=None, help="master seed (default: $SPORT_SEED or 0)")
    g.add_argument("--relations", default="left,right,front,behind,on_top_of,between")
    g.add_argument("--objects-min", type=int, default=3)
    g.add_argument("--objects-max", type=int, default=6)
    g.add_argument("--balanced", action=argparse.BooleanOptionalAction, default=True)
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--split", default="train")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the pose denoiser")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="flat key = value config file")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None, help="override the config's epoch count")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample a goal pose for one scene and instruction")
    s.add_argument("--model", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--instruction", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--catalog", default=None, help="catalog.json (default: next to the scene file)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--cloud-samples", type=int, default=512)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--csv", default=None)
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--batch-size", type=int, default=64)
    e.add_argument("--samples", type=int, default=1, help="samples per instance (best-of-k reported separately)")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    codes = [
        (GenerationExhausted, EXIT_GENERATION),
        (NonFiniteLoss, EXIT_NONFINITE),
        (UnparseableInstruction, EXIT_UNPARSEABLE),
        (SamplingDegenerate, EXIT_DEGENERATE),
        ((ConfigError, FormatError, EmptyResults, UnknownCategory, OSError, KeyError, ValueError), EXIT_CONFIG),
    ]
    try:
        return args.func(args)
    except (GenerationExhausted, NonFiniteLoss, UnparseableInstruction, SamplingDegenerate,
            ConfigError, FormatError, EmptyResults, UnknownCategory, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return next(code for cls, code in codes if isinstance(exc, cls))

if __name__ == "__main__":
    sys.exit(main())
