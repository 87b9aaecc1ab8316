"""Command-line entry point: ``trafficdiff VERB --config PATH [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import io
from .autoencoder import DivergenceError
from .diffusion import NonFiniteStateError
from .geometry import RasterSpec
from .metrics import scene_mmd, scene_stats
from .nn import ShapeError
from .raster import GenerationError, synth_scene
from .render import write_svg

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

logger = logging.getLogger("trafficdiff")


def _path(args, name, cfg, key=None):
    val = getattr(args, name, None) or cfg.data.get(key or name)
    if not val:
        raise io.ConfigError(f"no {name} path given (flag or data.{key or name} in the config)")
    return Path(val)


def _seed(args, cfg) -> int:
    return cfg.seed if args.seed is None else args.seed


def scene_seeds(seed: int, count: int) -> list[int]:
    """Independent per-scene generator seeds derived from one run seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def synth_dataset(cfg, count: int, seed: int):
    scenes = []
    for i, s in enumerate(scene_seeds(seed, count)):
        tpl = cfg.templates[i % len(cfg.templates)]
        scene = synth_scene(s, tpl, cfg.density, region_tag=cfg.regions[tpl])
        scenes.append(type(scene)(scene.road_map, scene.agents, scene.region_tag, scene.seed,
                                  scene.template, scene.density, f"{tpl}-{s}", ""))
    return scenes


def cmd_synth(args, cfg):
    out = Path(args.out)
    io.write_scenes(out, synth_dataset(cfg, args.count, _seed(args, cfg)))
    print(f"wrote {args.count} scenes to {out}")


def _write_log(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(f"{int(r[0])} {float(r[1])!r} {float(r[2])!r} {float(r[3])!r}\n")


def cmd_train_ae(args, cfg):
    scenes = io.read_scenes(_path(args, "data", cfg, "train"))
    out = Path(args.out)
    if args.resume:
        ae = io.load_autoencoder(args.resume)
        ae.set_params(warm_start=True, n_steps=cfg.autoencoder.get("n_steps", ae.n_steps))
    else:
        ae = cfg.make_autoencoder(random_state=_seed(args, cfg))
    ae.fit(scenes)
    io.save_autoencoder(ae, out)
    _write_log(args.log or out.with_suffix(out.suffix + ".log"), ae.loss_log_)
    last = ae.loss_log_[-1] if ae.loss_log_ else (0, float("nan"), float("nan"), float("nan"))
    print(f"autoencoder: {ae.n_steps_done_} steps, rec {last[1]:.5f} kl {last[2]:.3f} -> {out}")


def cmd_train_diff(args, cfg):
    scenes = io.read_scenes(_path(args, "data", cfg, "train"))
    ae_path = _path(args, "ae", cfg, "autoencoder")
    ae = io.load_autoencoder(ae_path)
    out = Path(args.out)
    if args.resume:
        model = io.load_diffusion(args.resume, ae, ae_path)
        model.set_params(warm_start=True, n_steps=cfg.diffusion.get("n_steps", model.n_steps))
    else:
        model = cfg.make_diffusion(ae, random_state=_seed(args, cfg))
    model.fit(scenes)
    io.save_diffusion(model, out, ae_path)
    _write_log(args.log or out.with_suffix(out.suffix + ".log"), model.loss_log_)
    print(f"denoiser: {model.n_steps_done_} steps, tag {model.model_tag_!r} -> {out}")


def cmd_sample(args, cfg):
    ae_path = _path(args, "ae", cfg, "autoencoder")
    ae = io.load_autoencoder(ae_path)
    model = io.load_diffusion(_path(args, "denoiser", cfg), ae, ae_path)
    model.p_min = cfg.p_min
    maps = io.read_scenes(_path(args, "maps", cfg))
    seed = _seed(args, cfg)
    per_map = max(args.count, 0)
    sources = [m for m in maps for _ in range(per_map)]
    seeds = scene_seeds(seed, len(sources))
    generated = model.sample(sources, seeds=seeds) if sources else []
    io.write_scenes(args.out, generated)
    if args.svg_dir:
        svg_dir = Path(args.svg_dir)
        svg_dir.mkdir(parents=True, exist_ok=True)
        for k, g in enumerate(generated):
            write_svg(svg_dir / f"{k:04d}-{g.scene_id}.svg", g, ae.raster_spec, g.scene_id)
    print(f"wrote {len(generated)} sampled scenes to {args.out}")


def pair_by_map(generated, reference):
    """Pair each generated scene with the reference sharing its map id."""
    refs = {r.scene_id: r for r in reference}
    missing = sorted({g.scene_id for g in generated if g.scene_id not in refs})
    if missing:
        raise io.DataError("generated scenes without a reference map: " + ", ".join(missing))
    return [(g, refs[g.scene_id]) for g in generated]


def evaluate(generated, reference, spec=None):
    """Per (model tag, region tag) MMD^2 records plus scene statistics."""
    groups = defaultdict(list)
    for g, r in pair_by_map(generated, reference):
        groups[(g.model_tag, r.region_tag)].append((g, r))
    records = []
    for (model, region), pairs in sorted(groups.items()):
        res = scene_mmd(pairs)
        stats = [scene_stats(g, spec) for g, _ in pairs]
        records.append({
            "model": model, "region": region, "pairs": res.n_pairs, "skipped": res.n_skipped,
            "position_mmd2": res.position, "heading_mmd2": res.heading,
            "mean_agents": float(np.mean([s.agent_count for s in stats])),
            "mean_overlaps": float(np.mean([s.overlap_count for s in stats])),
            "off_drivable": float(np.mean([s.off_drivable_fraction for s in stats])),
        })
    return records


def format_table(records, metric="position_mmd2") -> str:
    """Models as rows, evaluation regions as columns."""
    models = sorted({r["model"] for r in records})
    regions = sorted({r["region"] for r in records})
    cell = {(r["model"], r["region"]): r[metric] for r in records}
    width = max([len("model"), *(len(m) for m in models)]) + 2
    head = "model".ljust(width) + "".join(f"{reg:>12}" for reg in regions)
    lines = [f"{metric}", head, "-" * len(head)]
    for m in models:
        vals = "".join(f"{cell[(m, reg)]:>12.4f}" if (m, reg) in cell else f"{'-':>12}"
                       for reg in regions)
        lines.append(m.ljust(width) + vals)
    return "\n".join(lines)


def cmd_eval(args, cfg):
    reference = io.read_scenes(_path(args, "reference", cfg))
    gen_paths = args.generated or [cfg.data.get("generated")]
    if not gen_paths or not gen_paths[0]:
        raise io.ConfigError("no generated dataset given")
    generated = [s for p in gen_paths for s in io.read_scenes(p)]
    spec = RasterSpec(cfg.autoencoder.get("raster_size", 64), cfg.autoencoder.get("raster_size", 64),
                      float(cfg.autoencoder.get("extent_m", 64.0)))
    records = evaluate(generated, reference, spec)
    print(format_table(records, "position_mmd2"))
    print()
    print(format_table(records, "heading_mmd2"))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def cmd_render(args, cfg):
    scenes = io.read_scenes(_path(args, "data", cfg, "train"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = len(scenes) if args.count is None else min(args.count, len(scenes))
    spec = RasterSpec(cfg.autoencoder.get("raster_size", 64), cfg.autoencoder.get("raster_size", 64),
                      float(cfg.autoencoder.get("extent_m", 64.0)))
    for k, s in enumerate(scenes[:n]):
        write_svg(out / f"{k:04d}-{s.scene_id}.svg", s, spec, s.scene_id)
    print(f"rendered {n} scenes into {out}")


COMMANDS = {"synth": cmd_synth, "train-ae": cmd_train_ae, "train-diff": cmd_train_diff,
            "sample": cmd_sample, "eval": cmd_eval, "render": cmd_render}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trafficdiff")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in COMMANDS:
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=verb != "eval", help="output path")
        p.add_argument("--count", type=int, default=None if verb == "render" else 1)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("-v", "--verbose", action="store_true")
        if verb in ("train-ae", "train-diff", "render"):
            p.add_argument("--data", help="input dataset")
        if verb in ("train-ae", "train-diff"):
            p.add_argument("--log", help="loss log path (default: <out>.log)")
            p.add_argument("--resume", help="checkpoint to continue training from")
        if verb in ("train-diff", "sample"):
            p.add_argument("--ae", help="autoencoder checkpoint")
        if verb == "sample":
            p.add_argument("--denoiser", help="denoiser checkpoint")
            p.add_argument("--maps", help="dataset whose maps condition sampling")
            p.add_argument("--svg-dir", help="also write one SVG per sample here")
        if verb == "eval":
            p.add_argument("--generated", nargs="+", help="generated dataset(s)")
            p.add_argument("--reference", help="reference dataset")
    return parser


def _set_threads(n: int) -> None:
    import warnings

    import numba

    with warnings.catch_warnings():
        # numba complains about an old TBB even when it falls back to another layer
        warnings.simplefilter("ignore", numba.NumbaWarning)
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = io.load_config(args.config)
        if args.count is not None and args.count < 0:
            raise io.ConfigError("--count must be non-negative")
        _set_threads(args.threads)
        COMMANDS[args.verb](args, cfg)
    except io.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteStateError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (io.DataError, GenerationError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
