"""Command-line pipeline: data generation, training, rendering, evaluation,
ablation, benchmarking, viewer fixtures and a static file server.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid model file.
CLIPGS_THREADS caps the worker count used by the numeric kernels.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_BAD_MODEL = 3


def _apply_thread_cap():
    cap = os.environ.get("CLIPGS_THREADS")
    if cap:
        import numba
        numba.set_num_threads(max(1, int(cap)))


def _save_trained(cloud, aam, dataset, config, path):
    from .model_io import save_model
    from .truncation import init_trunc_values

    extent = float(np.max(dataset.bounds_max - dataset.bounds_min))
    # Keep the stored m consistent with the trained visibility semantics so
    # every consumer (render/eval/viewer) can apply the single m < z rule.
    if config.truncation_mode == "hard":
        init_trunc_values(cloud, dataset.plane_normal)
    elif config.truncation_mode == "none":
        cloud.trunc_values[:] = float(dataset.bounds_min[2]) - 1e3 * extent
    meta = {
        "scene": {"bounds_min": [float(v) for v in dataset.bounds_min],
                  "bounds_max": [float(v) for v in dataset.bounds_max],
                  "extent": extent},
        "plane_normal": [float(v) for v in dataset.plane_normal],
        "train_config": {k: v for k, v in asdict(config).items()
                         if not k.startswith("checkpoint")},
    }
    meta["train_config"]["background"] = [float(v) for v in dataset.background]
    meta["train_config"]["z_range"] = list(dataset.meta.get("z_range", (0.0, 0.0)))
    return save_model(cloud, aam, meta, path)


def cmd_gen_data(args) -> int:
    from .datagen import generate_dataset, make_volume

    vol = make_volume(args.preset, dims=(args.dims,) * 3, seed=args.seed)
    z_range = None
    if args.z_min is not None or args.z_max is not None:
        if args.z_min is None or args.z_max is None:
            print("error: --z-min and --z-max must be given together", file=sys.stderr)
            return EXIT_USAGE
        z_range = (args.z_min, args.z_max)
    manifest = generate_dataset(vol, args.n_train, args.n_test, args.size,
                                z_range, args.seed, args.out, steps=args.steps)
    print(f"wrote {len(manifest['frames'])} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .datagen import load_dataset
    from .trainer import desk_config, paper_config, train_full

    dataset = load_dataset(args.data)
    config = paper_config() if args.preset == "paper" else desk_config()
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        config = replace(config, **overrides)
    updates = {"seed": args.seed}
    if args.iters1 is not None:
        updates["iters_stage1"] = args.iters1
    if args.iters2 is not None:
        updates["iters_stage2"] = args.iters2
    if args.init_points is not None:
        updates["init_points"] = args.init_points
    if args.no_aam:
        updates["use_aam"] = False
    if args.hard_truncation:
        updates["truncation_mode"] = "hard"
    if args.densify:
        updates["densify"] = True
    config = replace(config, **updates)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cloud, aam, log = train_full(dataset, config)
    with open(out / "metrics.jsonl", "w") as fh:
        for entry in log.entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    written = _save_trained(cloud, aam, dataset, config, out / "model.cgs")
    last = log.last_loss()
    print(f"model: {out / 'model.cgs'} ({written} bytes, {cloud.count} primitives)"
          + (f", final loss {last:.5f}" if last is not None else ""))
    return 0


def _load_model_or_exit(path):
    from .model_io import ModelFormatError, load_model

    try:
        return load_model(path)
    except ModelFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        raise SystemExit(EXIT_BAD_MODEL)


def cmd_render(args) -> int:
    from PIL import Image

    from .datagen import camera_from_angles
    from .evalbench import render_model

    cloud, aam, header = _load_model_or_exit(args.model)
    scene = header.get("scene", {})
    bmin = np.array(scene.get("bounds_min", [-0.5, -0.5, -0.5]))
    bmax = np.array(scene.get("bounds_max", [0.5, 0.5, 0.5]))
    center = 0.5 * (bmin + bmax)
    mode = header.get("train_config", {}).get("truncation_mode", "learnable")
    background = header.get("train_config", {}).get("background", [0.0, 0.0, 0.0])
    cam = camera_from_angles(args.azimuth, args.elevation, args.radius, center,
                             args.size, args.size)
    img = render_model(cloud, aam, cam, args.plane_z, header["plane_normal"],
                       background, mode)
    arr = np.clip(img * 255.0 + 0.5, 0.0, 255.0).astype(np.uint8)
    Image.fromarray(arr).save(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .datagen import load_dataset
    from .evalbench import evaluate

    cloud, aam, header = _load_model_or_exit(args.model)
    dataset = load_dataset(args.data)
    mode = header.get("train_config", {}).get("truncation_mode", "learnable")
    if not dataset.split(args.split):
        print(f"error: dataset split {args.split!r} is empty", file=sys.stderr)
        return EXIT_USAGE
    report = evaluate(cloud, aam, dataset, split=args.split, mode=mode)
    print(report.summary())
    if args.out:
        payload = {"split": report.split, "n_frames": report.n_frames,
                   "psnr_mean": report.psnr_mean, "psnr_std": report.psnr_std,
                   "ssim_mean": report.ssim_mean, "ssim_std": report.ssim_std,
                   "per_frame": report.per_frame}
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True))
        print(f"wrote {args.out}")
    return 0


def cmd_ablate(args) -> int:
    from .datagen import load_dataset
    from .evalbench import ablate, format_ablation_table
    from .trainer import desk_config

    dataset = load_dataset(args.data)
    cfg = desk_config(iters_stage1=args.iters1, iters_stage2=args.iters2,
                      init_points=args.init_points)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    rows = ablate(dataset, cfg, seeds=seeds, bench_duration=args.bench_duration,
                  save_dir=args.save_models)
    table = format_ablation_table(rows)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.txt").write_text(table + "\n")
        payload = [{**{k: getattr(r, k) for k in
                       ("variant", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std",
                        "train_time_s", "fps_median", "storage_bytes", "aam_bytes")},
                    "per_seed": r.per_seed} for r in rows]
        (out / "ablation.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
        print(f"wrote {out / 'ablation.json'}")
    return 0


def cmd_bench(args) -> int:
    from .evalbench import bench_fps

    cloud, aam, header = _load_model_or_exit(args.model)
    scene = header.get("scene", {})
    bmin = np.array(scene.get("bounds_min", [-0.5, -0.5, -0.5]))
    bmax = np.array(scene.get("bounds_max", [0.5, 0.5, 0.5]))
    center = 0.5 * (bmin + bmax)
    radius = 2.4 * 0.5 * float(np.linalg.norm(bmax - bmin))
    z_range = header.get("train_config", {}).get("z_range", [float(bmin[2]), float(bmax[2])])
    mode = header.get("train_config", {}).get("truncation_mode", "learnable")
    stats = bench_fps(cloud, aam, args.size, center, radius, z_range,
                      header["plane_normal"], args.duration, mode=mode)
    print(f"median {stats['fps_median']:.1f} FPS, p5 {stats['fps_p5']:.1f} FPS "
          f"({stats['frames']} frames at {args.size}x{args.size})")
    return 0


def cmd_serve(args) -> int:
    import functools
    from http.server import SimpleHTTPRequestHandler, ThreadingHTTPServer

    handler = functools.partial(SimpleHTTPRequestHandler, directory=args.dir)
    with ThreadingHTTPServer(("127.0.0.1", args.port), handler) as httpd:
        print(f"serving {args.dir} at http://127.0.0.1:{args.port}/")
        try:
            httpd.serve_forever()
        except KeyboardInterrupt:
            pass
    return 0


def cmd_export_fixtures(args) -> int:
    """Parity fixtures for the browser viewer's test suite."""
    from PIL import Image

    from .aam import aam_forward, positional_encoding
    from .core import ClipPlane
    from .datagen import camera_from_angles
    from .evalbench import model_visibility, render_model

    cloud, aam, header = _load_model_or_exit(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    normal = np.array(header["plane_normal"], dtype=np.float64)

    m = cloud.trunc_values
    z_values = [float(np.quantile(m, q)) for q in (0.1, 0.5, 0.9)]
    vis_fixture = []
    for z in z_values:
        mask = model_visibility(cloud, ClipPlane(normal, z), "learnable")
        vis_fixture.append({"z": z, "visible_count": int(mask.sum()),
                            "mask": [int(v) for v in mask]})

    pe_samples = [0.0, 0.5, -0.25, 1.75]
    pe_fixture = []
    if aam is not None:
        for v in pe_samples:
            pe_fixture.append({"value": v, "levels": aam.pe_levels_z,
                               "encoding": [float(x) for x in
                                            positional_encoding(v, aam.pe_levels_z)]})

    deform_fixture = []
    if aam is not None:
        for z in z_values:
            mask = model_visibility(cloud, ClipPlane(normal, z), "learnable")
            visible = np.flatnonzero(mask)
            deform, _ = aam_forward(aam, cloud.positions[visible], z)
            deform_fixture.append({
                "z": z, "visible_indices": [int(i) for i in visible],
                "d_mu": [[float(v) for v in row] for row in deform.d_mu],
                "d_rot": [[float(v) for v in row] for row in deform.d_rot],
                "d_scale": [[float(v) for v in row] for row in deform.d_scale],
            })

    # reference renders for the in-browser screenshot comparison
    scene = header.get("scene", {})
    bmin = np.array(scene.get("bounds_min", [-0.5, -0.5, -0.5]))
    bmax = np.array(scene.get("bounds_max", [0.5, 0.5, 0.5]))
    center = 0.5 * (bmin + bmax)
    radius = 2.2 * 0.5 * float(np.linalg.norm(bmax - bmin))
    background = header.get("train_config", {}).get("background", [0.0, 0.0, 0.0])
    mode = header.get("train_config", {}).get("truncation_mode", "learnable")
    (out / "renders").mkdir(exist_ok=True)
    render_fixture = []
    cameras = [(30.0, 20.0), (120.0, -15.0), (210.0, 45.0), (300.0, 5.0), (75.0, 70.0)]
    size = 256
    for i, (az, el) in enumerate(cameras):
        z = z_values[i % len(z_values)]
        cam = camera_from_angles(az, el, radius, center, size, size)
        img = render_model(cloud, aam, cam, z, normal, background, mode)
        rel = f"renders/render_{i}.png"
        Image.fromarray(np.clip(img * 255.0 + 0.5, 0, 255).astype(np.uint8)).save(out / rel)
        render_fixture.append({"azimuth": az, "elevation": el, "radius": radius,
                               "z": z, "size": size, "fov_deg": 50.0,
                               "center": [float(v) for v in center],
                               "background": [float(v) for v in background],
                               "file": rel})

    fixture = {"model_file": Path(args.model).name,
               "visibility": vis_fixture,
               "positional_encoding": pe_fixture,
               "deformation": deform_fixture,
               "renders": render_fixture}
    (out / "parity.json").write_text(json.dumps(fixture, indent=2, sort_keys=True))
    import shutil
    shutil.copy(args.model, out / Path(args.model).name)
    print(f"wrote {out / 'parity.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clipgs",
                                description="Clippable Gaussian splatting pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic clip-plane dataset")
    g.add_argument("--preset", required=True)
    g.add_argument("--dims", type=int, default=64)
    g.add_argument("--n-train", type=int, default=120)
    g.add_argument("--n-test", type=int, default=20)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--z-min", type=float, default=None)
    g.add_argument("--z-max", type=float, default=None)
    g.add_argument("--steps", type=int, default=192)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="two-stage training run")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--preset", choices=["desk", "paper"], default="desk")
    t.add_argument("--config", help="JSON file of TrainConfig overrides")
    t.add_argument("--iters1", type=int, default=None)
    t.add_argument("--iters2", type=int, default=None)
    t.add_argument("--init-points", type=int, default=None)
    t.add_argument("--no-aam", action="store_true")
    t.add_argument("--hard-truncation", action="store_true")
    t.add_argument("--densify", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render one frame from a model")
    r.add_argument("--model", required=True)
    r.add_argument("--azimuth", type=float, default=30.0)
    r.add_argument("--elevation", type=float, default=20.0)
    r.add_argument("--radius", type=float, default=2.1)
    r.add_argument("--plane-z", type=float, required=True)
    r.add_argument("--size", type=int, default=256)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="evaluate a model on a dataset split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare scheme variants")
    a.add_argument("--data", required=True)
    a.add_argument("--out", default=None)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--iters1", type=int, default=300)
    a.add_argument("--iters2", type=int, default=600)
    a.add_argument("--init-points", type=int, default=1000)
    a.add_argument("--bench-duration", type=float, default=2.0)
    a.add_argument("--save-models", default=None)
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench", help="orbit + plane-sweep FPS benchmark")
    b.add_argument("--model", required=True)
    b.add_argument("--duration", type=float, default=5.0)
    b.add_argument("--size", type=int, default=256)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("serve", help="static file server for the viewer")
    s.add_argument("--dir", default=".")
    s.add_argument("--port", type=int, default=8080)
    s.set_defaults(func=cmd_serve)

    x = sub.add_parser("export-fixtures", help="write viewer parity fixtures")
    x.add_argument("--model", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_fixtures)
    return p


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
