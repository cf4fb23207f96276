"""Command-line front end: ``latent-nerf {synth,train,render,eval,bench}``.

Every path argument is resolved relative to ``--out`` unless absolute.
Exit status is 0 only when the requested artifacts were fully written; usage
errors exit with status 2 and runtime failures with status 1.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class CLIError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _resolve(out, path):
    if path is None:
        return None
    return path if os.path.isabs(path) else os.path.join(out, path)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _parse_overrides(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise CLIError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


# -- synth ---------------------------------------------------------------------------

def cmd_synth(args):
    from . import sceneio

    if args.res <= 0 or args.res % 8:
        raise CLIError(f"--res {args.res} must be a positive multiple of 8")
    if args.views < 1:
        raise CLIError("--views must be at least 1")
    spec = sceneio.desk_scene_spec(resolution=args.res, views=args.views, seed=args.seed)
    if args.test_every is not None:
        spec.test_every = args.test_every
    scene = sceneio.generate_synthetic_scene(spec)
    path = sceneio.save_scene(scene, args.out)
    print(path)
    return EXIT_OK


# -- train ---------------------------------------------------------------------------

def _checkpoint_name(phase):
    return f"phase_{phase.lower()}.ckpt"


def cmd_train(args):
    from . import pipeline, sceneio
    from .errors import DivergenceError, UsageError

    dataset = sceneio.load_dataset(_resolve(args.out, args.manifest))
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.jsonl")
    snapshot = os.path.join(args.out, "divergence.ckpt")
    if args.resume:
        meta, arrays = sceneio.load_checkpoint(_resolve(args.out, args.resume))
        trainer = pipeline.Trainer.from_state(dataset, meta, arrays, log_path=log_path,
                                              deterministic=args.deterministic,
                                              snapshot_path=snapshot)
    else:
        try:
            config = pipeline.get_preset(args.preset, args.seed)
            overrides = _parse_overrides(args.set)
            if overrides:
                config = config.replace(**overrides)
        except (UsageError, TypeError, ValueError) as exc:
            raise CLIError(str(exc)) from exc
        if os.path.exists(log_path):
            os.remove(log_path)
        trainer = pipeline.Trainer(dataset, config, log_path=log_path,
                                   deterministic=args.deterministic, snapshot_path=snapshot)
    _write_json(os.path.join(args.out, "config.json"), {
        "version": 1, "config": trainer.config.to_dict(),
        "skip_phase_a": args.skip_phase_a, "skip_phase_c": args.skip_phase_c,
        "deterministic": args.deterministic, "resumed_from": args.resume,
    })
    phases = [("A", trainer.phase_a, args.skip_phase_a), ("B", trainer.phase_b, False),
              ("C", trainer.phase_c, args.skip_phase_c)]
    written = []
    try:
        for name, run, skip in phases:
            if skip or name in trainer.completed:
                continue
            run()
            trainer.mark_completed(name)
            path = os.path.join(args.out, _checkpoint_name(name))
            sceneio.save_checkpoint(path, *trainer.state_dict())
            written.append(path)
    except DivergenceError as exc:
        raise CLIError(f"{exc} (diagnostic snapshot: {exc.snapshot_path})", EXIT_FAILURE) from exc
    for path in written:
        print(path)
    return EXIT_OK


# -- render --------------------------------------------------------------------------

def _render_cameras(models, args):
    from . import metrics

    if args.spiral is not None:
        train = [c for c, s in zip(models.cameras, models.splits) if s == "train"] or models.cameras
        cams = metrics.spiral_path(train, args.spiral)
        return cams, [None] * len(cams)
    sel = [i for i, s in enumerate(models.splits) if args.split in (s, "all")]
    return [models.cameras[i] for i in sel], [models.ids[i] for i in sel]


def _upsample_depth(depth, valid, factor):
    import numpy as np

    from . import diffmath as dm

    with dm.no_grad():
        d = depth
        for _ in range(int(np.log2(factor))):
            d = dm.bilinear_resize(d[None].astype(np.float32), 2.0).data[0]
    v = np.repeat(np.repeat(valid, factor, axis=0), factor, axis=1)
    return d, v


def cmd_render(args):
    import numpy as np

    from . import diffmath as dm
    from . import pipeline, renderer, sceneio

    meta, arrays = sceneio.load_checkpoint(_resolve(args.out, args.checkpoint))
    models = pipeline.models_from_checkpoint(meta, arrays)
    if args.mode == "latent" and "B" not in models.completed:
        raise CLIError("latent mode needs a checkpoint from phase B or later", EXIT_FAILURE)
    cams, ref_ids = _render_cameras(models, args)
    if args.res:
        cams = [c.scaled(args.res / c.width) for c in cams]
    n = args.samples or models.config.samples
    out_dir = _resolve(args.out, args.render_dir)
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)
    records = []
    for k, cam in enumerate(cams):
        if args.mode == "rgb":
            img, dmap = renderer.render_rgb_image(cam, models.field, n, models.near, models.far)
            depth, valid = dmap.depth, dmap.valid
        else:
            lat, dmap = renderer.render_latent_image(cam, models.field, n, models.near, models.far)
            with dm.no_grad():
                img = models.ae.decode(lat.values.astype(np.float32)).data
            depth, valid = _upsample_depth(dmap.depth, dmap.valid, renderer.LATENT_DOWNSAMPLE)
        frame = f"frames/{k:04d}.png"
        dpth = f"depth/{k:04d}.dpth"
        sceneio.write_frame(os.path.join(out_dir, frame), np.clip(img, 0, 1))
        sceneio.save_depth(os.path.join(out_dir, dpth), depth, valid)
        records.append({"frame": frame, "depth": dpth, "camera": cam.to_dict(), "ref_id": ref_ids[k]})
    _write_json(os.path.join(out_dir, "render.json"), {
        "version": 1, "mode": args.mode, "samples": n, "frames": records,
    })
    print(f"{len(records)} frames -> {out_dir}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------------

def _load_render_dir(path):
    from . import sceneio
    from .camera import Camera

    index = os.path.join(path, "render.json")
    if not os.path.exists(index):
        raise CLIError(f"{path} has no render.json", EXIT_FAILURE)
    with open(index, encoding="utf-8") as fh:
        info = json.load(fh)
    frames, depths, cams, refs = [], [], [], []
    for rec in info["frames"]:
        frames.append(sceneio.read_frame(os.path.join(path, rec["frame"])))
        d_path = os.path.join(path, rec["depth"]) if rec.get("depth") else None
        depths.append(sceneio.load_depth(d_path) if d_path and os.path.exists(d_path) else None)
        cams.append(Camera.from_dict(rec["camera"]) if rec.get("camera") else None)
        refs.append(rec.get("ref_id"))
    return frames, depths, cams, refs


def cmd_eval(args):
    import numpy as np

    from . import metrics, sceneio

    frames, depths, cams, refs = _load_render_dir(_resolve(args.out, args.renders))
    if args.reference:
        references = _load_render_dir(_resolve(args.out, args.reference))[0]
    elif args.manifest:
        ds = sceneio.load_dataset(_resolve(args.out, args.manifest))
        by_id = dict(zip(ds.ids, ds.images))
        if any(r not in by_id for r in refs):
            raise CLIError("render frames do not map onto manifest frame ids", EXIT_FAILURE)
        references = [by_id[r] for r in refs]
    else:
        references = None
    records = []
    if references is not None:
        if len(references) != len(frames):
            raise CLIError(f"frame count mismatch: {len(frames)} renders vs "
                           f"{len(references)} references", EXIT_FAILURE)
        scores = [metrics.psnr(f, r) for f, r in zip(frames, references)]
        for k, s in enumerate(scores):
            records.append(metric_frame(metrics, k, s))
        finite = [s for s in scores if np.isfinite(s)]
        mean = float(np.mean(finite)) if len(finite) == len(scores) and scores else (
            float("inf") if scores else None)
        records.append(metrics.metric_record("psnr_mean", mean, frames=[0, len(frames)]))
    if len(frames) >= 2 and all(d is not None for d in depths) and all(c is not None for c in cams):
        res = metrics.rcc(frames, depths, cams, occlusion_mask=not args.rcc_no_occlusion_mask)
        records.append(res.record())
    else:
        print("warning: depths or cameras missing (or fewer than 2 frames); RCC skipped",
              file=sys.stderr)
    report = _resolve(args.out, args.report)
    os.makedirs(os.path.dirname(os.path.abspath(report)), exist_ok=True)
    with open(report, "w", encoding="utf-8") as fh:
        for rec in records:
            line = json.dumps(rec, sort_keys=True)
            fh.write(line + "\n")
            print(line)
    return EXIT_OK


def metric_frame(metrics, k, value):
    return metrics.metric_record("psnr", value, frames=[k, k + 1])


# -- bench ---------------------------------------------------------------------------

def cmd_bench(args):
    from . import metrics, pipeline, sceneio

    meta, arrays = sceneio.load_checkpoint(_resolve(args.out, args.checkpoint))
    models = pipeline.models_from_checkpoint(meta, arrays)
    train = [c for c, s in zip(models.cameras, models.splits) if s == "train"] or models.cameras
    cams = metrics.spiral_path(train, args.frames) if args.frames > 0 else []
    if args.res:
        cams = [c.scaled(args.res / c.width) for c in cams]
    report = metrics.bench(models.field, models.ae, cams, args.samples, models.near, models.far,
                           warmup=not args.no_warmup)
    os.makedirs(args.out, exist_ok=True)
    path = _resolve(args.out, args.report)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    print(report.table())
    print(path)
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="latent-nerf", description=__doc__.splitlines()[0])
    p.add_argument("--out", default=".", help="output directory; relative paths resolve here")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--deterministic", action="store_true",
                   help="seeded, wall-clock-free artifacts")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the analytic oracle scene")
    s.add_argument("--views", type=int, default=20)
    s.add_argument("--res", type=int, default=64)
    s.add_argument("--test-every", type=int, default=None)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run phases A, B and C")
    t.add_argument("--manifest", default="manifest.json")
    t.add_argument("--preset", choices=["paper", "desk"], default="desk")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a TrainConfig field (value parsed as JSON)")
    t.add_argument("--skip-phase-a", action="store_true")
    t.add_argument("--skip-phase-c", action="store_true")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render test views or a spiral")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--mode", choices=["rgb", "latent"], default="latent")
    r.add_argument("--spiral", type=int, default=None, metavar="FRAMES")
    r.add_argument("--split", default="test", help="train, test or all (ignored with --spiral)")
    r.add_argument("--samples", type=int, default=None)
    r.add_argument("--res", type=int, default=None, help="override output width (square scale)")
    r.add_argument("--render-dir", default="renders")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR against references and RCC over the sequence")
    e.add_argument("--renders", required=True)
    e.add_argument("--reference", default=None, help="render directory used as reference")
    e.add_argument("--manifest", default=None, help="manifest providing reference frames")
    e.add_argument("--report", default="eval_report.jsonl")
    e.add_argument("--rcc-no-occlusion-mask", action="store_true")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time RGB against latent+decode rendering")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--frames", type=int, default=120)
    b.add_argument("--samples", type=int, default=128)
    b.add_argument("--res", type=int, default=None)
    b.add_argument("--no-warmup", action="store_true")
    b.add_argument("--report", default="bench.json")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads:
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    from .errors import LatentNerfError

    try:
        if args.command != "synth":
            os.makedirs(args.out, exist_ok=True)
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (LatentNerfError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
