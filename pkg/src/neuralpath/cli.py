"""``neuralpath`` command line: data prep, VAE training, sampling, generation, evaluation."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig, apply_seed, dump_config, load_config
from .errors import ConfigError, NeuralPathError, StructuralError
from .geometry import BezierPath, K_MAX

log = logging.getLogger("neuralpath")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_vae(path):
    from .vae import load_checkpoint

    if not path:
        raise ConfigError("a VAE checkpoint is required (config generate.checkpoint or --checkpoint)")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------- commands


def cmd_prepare_data(corpus_dir, out, seed: int = 0, workers: int = 0, synthetic: int = 0, k_max: int = K_MAX,
                     val_fraction: float = 0.1) -> dict:
    from .corpus import make_corpus
    from .dataset import build_dataset

    if synthetic:
        make_corpus(corpus_dir, n_files=synthetic, seed=seed)
    ds = build_dataset(corpus_dir, k_max=k_max, seed=seed, val_fraction=val_fraction, workers=workers)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    _write_json(out.with_suffix(".manifest.json"), ds.manifest)
    return ds.manifest


def cmd_train_vae(dataset, config: RunConfig, out_dir, epochs: int | None = None) -> dict:
    from .dataset import PathDataset
    from .train import train
    from .vae import VaeConfig

    if not Path(dataset).exists():
        raise ConfigError(f"dataset not found: {dataset}")
    ds = PathDataset.load(dataset)
    vcfg = config.vae if epochs is None else VaeConfig(**{**config.vae.__dict__, "epochs": epochs})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, rows = train(ds, vcfg, log_path=out / "training-log.jsonl", checkpoint_path=out / "vae.pt")
    summary = {"checkpoint": str(out / "vae.pt"), "epochs": vcfg.epochs, "final": rows[-1] if rows else None}
    _write_json(out / "train-manifest.json", summary)
    return summary


def _grid_document(points: list, cell: float = 100.0):
    from .svgio import SvgDocument, SvgPath

    side = max(1, math.ceil(math.sqrt(len(points))))
    doc = SvgDocument(cell * side, cell * max(1, math.ceil(len(points) / side)))
    for i, p in enumerate(points):
        r, c = divmod(i, side)
        doc.paths.append(SvgPath(np.asarray(p) * cell + [c * cell, r * cell], True, (0.0, 0.0, 0.0, 1.0)))
    return doc


@torch.no_grad()
def cmd_sample_paths(checkpoint, count: int, seed: int, out_svg) -> list:
    from .svgio import write_svg
    from .vae import decoded_to_path, sample_prior

    vae, _ = _load_vae(checkpoint)
    z = sample_prior(seed, count, vae.cfg.d_latent)
    paths = [decoded_to_path(p) for p in vae.decode_points(z)]
    for p in paths:
        p.validate(check_range=True)
    Path(out_svg).parent.mkdir(parents=True, exist_ok=True)
    write_svg(_grid_document([p.valid for p in paths]), out_svg)
    return paths


def _svg_latent(vae, path):
    from .stage2 import canonicalize, reencode
    from .svgio import read_svg

    doc = read_svg(path)
    if not doc.paths:
        raise StructuralError(f"{path} contains no paths")
    first = doc.paths[0]
    if len(first.points) > K_MAX:
        raise StructuralError(f"{path}: first path has {len(first.points)} points (max {K_MAX})")
    bp = BezierPath.from_points(first.normalized(doc.width, doc.height), closed=first.closed)
    if not bp.closed:
        raise StructuralError(f"{path}: interpolation needs a closed path")
    canon, _ = canonicalize(bp)
    return reencode([canon], vae)[0].z


@torch.no_grad()
def cmd_interpolate(checkpoint, z1_svg, z2_svg, steps: int, out) -> list:
    from .svgio import SvgDocument, SvgPath, write_svg
    from .vae import decoded_to_path, interpolate

    if steps < 2:
        raise ConfigError("steps must be >= 2")
    vae, _ = _load_vae(checkpoint)
    z1, z2 = _svg_latent(vae, z1_svg), _svg_latent(vae, z2_svg)
    zs = torch.stack([interpolate(z1, z2, i / (steps - 1)) for i in range(steps)])
    paths = [decoded_to_path(p) for p in vae.decode_points(zs)]
    doc = SvgDocument(100.0 * steps, 100.0)
    for i, p in enumerate(paths):
        doc.paths.append(SvgPath(p.valid * 100 + [100.0 * i, 0.0], True, (0.0, 0.0, 0.0, 1.0)))
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_svg(doc, out)
    return paths


def make_backend(cfg: RunConfig):
    from .guidance import ToyBackend
    from .render import disk_scene

    g = cfg.generate
    if g.backend == "toy":
        try:
            disks = [(float(cx), float(cy), float(r), tuple(float(v) for v in col)) for cx, cy, r, col in g.toy_target]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"generate.toy_target must be a list of [cx, cy, r, [r, g, b]]: {exc}") from exc
        return ToyBackend(disk_scene(disks, g.toy_size), size=g.toy_size)
    if g.backend == "latent-diffusion":
        from .diffusion import LatentDiffusionBackend

        return LatentDiffusionBackend.from_pretrained(g.model_id)
    raise ConfigError(f"unknown generate.backend {g.backend!r}")


def _feature_backend(cfg: RunConfig):
    from .features import get_feature_backend

    name = cfg.stage2.feature_backend
    return get_feature_backend(name, model_id=cfg.eval.clip_model) if name == "clip" else get_feature_backend(name)


def cmd_generate(prompt: str, config: RunConfig, out_dir, resume: bool = False) -> dict:
    """init -> stage 1 -> simplify -> guidance -> stage 2 -> final.svg + run-manifest.json."""
    from .render import get_rasterizer, svg_from_dict, svg_to_dict, to_document
    from .stage1 import init_svg, optimize_stage1
    from .stage2 import make_guidance, optimize_stage2, simplify
    from .svgio import serialize_svg, write_svg

    prompt = prompt or config.generate.prompt
    if not prompt:
        raise ConfigError("a prompt is required")
    g = config.generate
    vae, vae_meta = _load_vae(g.checkpoint)
    backend = make_backend(config)
    rasterizer = get_rasterizer(g.rasterizer)
    features = _feature_backend(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    state_file = out / "stage1-state.json"
    config_hash = hashlib.sha256((dump_config(config) + prompt).encode()).hexdigest()
    svg0, s1_manifest, trace = None, None, None
    if resume and state_file.exists():
        state = json.loads(state_file.read_text(encoding="utf-8"))
        if state.get("config_hash") == config_hash:
            svg0, s1_manifest, trace = svg_from_dict(state["svg"]), state["manifest"], state["trace"]
            log.info("resuming from %s", state_file)
    if svg0 is None:
        init = init_svg(g.m, config.seed, config.stage1.render_size, vae, vae.cfg.d_latent)
        write_svg(to_document(init, vae), out / "init.svg")
        res1 = optimize_stage1(init, prompt, vae, backend, config.stage1, rasterizer=rasterizer, out_dir=out)
        svg0, s1_manifest, trace = res1.svg, res1.manifest, res1.trace
        _write_json(state_file, {"config_hash": config_hash, "svg": svg_to_dict(svg0), "manifest": s1_manifest,
                                 "trace": trace})
    write_svg(to_document(svg0, vae), out / "stage1.svg")

    simple, simplify_report = simplify(svg0, vae, config.stage2)
    write_svg(to_document(simple, vae), out / "simplified.svg")
    bundle = make_guidance(simple, vae, s1_manifest["full_prompt"], backend, config.stage2, rasterizer)
    np.save(out / "guidance.npy", bundle.image.detach().float().numpy())
    res2 = optimize_stage2(simple, bundle, vae, config.stage2, features, rasterizer, out_dir=out)
    final_text = serialize_svg(to_document(res2.svg, vae))
    (out / "final.svg").write_text(final_text, encoding="utf-8")

    manifest = {
        "version": __version__,
        "prompt": prompt,
        "seed": config.seed,
        "config": config.to_dict(),
        "config_yaml": dump_config(config),
        "checkpoint": {"path": str(g.checkpoint), "sha256": _sha256(g.checkpoint), **vae_meta},
        "backend": getattr(backend, "name", g.backend),
        "rasterizer": g.rasterizer,
        "stage1": s1_manifest,
        "stage1_trace": trace,
        "simplify": simplify_report,
        "stage2": {**res2.manifest, "log_tail": res2.log[-len(res2.schedule):] if res2.log else []},
        "path_counts": {"m": g.m, "after_simplify": len(simple), "final": len(res2.svg)},
        "final_svg_sha256": hashlib.sha256(final_text.encode()).hexdigest(),
        "torch": torch.__version__,
        "numpy": np.__version__,
    }
    _write_json(out / "run-manifest.json", manifest)
    _write_json(out / "final-theta.json", svg_to_dict(res2.svg))
    return manifest


def _read_prompts(path) -> dict:
    import yaml

    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"prompts file not found: {p}")
    text = p.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = yaml.safe_load(text)
    if isinstance(data, str):
        return {"*": data}
    if not isinstance(data, dict):
        raise ConfigError("prompts file must map SVG file stems to prompts")
    return {str(k): str(v) for k, v in data.items()}


def cmd_eval(svg_dir, prompts_file, out_report, config: RunConfig | None = None, reference_dir=None) -> dict:
    from .metrics import evaluate

    config = config or RunConfig()
    if not Path(svg_dir).is_dir():
        raise ConfigError(f"not a directory: {svg_dir}")
    backend = None
    if config.eval.backend == "clip":
        from .features import ClipFeatures

        backend = ClipFeatures.from_pretrained(config.eval.clip_model)
    elif config.eval.backend != "pixel":
        raise ConfigError(f"unknown eval.backend {config.eval.backend!r}")
    report = evaluate(svg_dir, _read_prompts(prompts_file), backend, reference_dir, config.eval.trials,
                      config.eval.drop, config.seed)
    Path(out_report).parent.mkdir(parents=True, exist_ok=True)
    _write_json(out_report, report)
    return report


# ---------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neuralpath", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="build the path dataset from a directory of SVG icons")
    p.add_argument("corpus_dir")
    p.add_argument("out", help="dataset container (.npz)")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--synthetic", type=int, default=0, metavar="N",
                   help="first write N synthetic icon SVGs into corpus_dir")

    p = sub.add_parser("train-vae", help="train the path VAE")
    p.add_argument("dataset")
    p.add_argument("out_dir")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("sample-paths", help="decode prior samples into an SVG grid")
    p.add_argument("checkpoint")
    p.add_argument("out_svg")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("generate", help="text-to-SVG generation")
    p.add_argument("out_dir")
    p.add_argument("--prompt")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--backend", choices=["toy", "latent-diffusion"])
    p.add_argument("--seed", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--resume", action="store_true", help="reuse a finished stage-1 state in out_dir")

    p = sub.add_parser("eval", help="metrics report over a directory of SVGs")
    p.add_argument("svg_dir")
    p.add_argument("out_report")
    p.add_argument("--prompts")
    p.add_argument("--config")
    p.add_argument("--reference-dir")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("interpolate", help="decode a latent interpolation between two single-path SVGs")
    p.add_argument("checkpoint")
    p.add_argument("z1_svg")
    p.add_argument("z2_svg")
    p.add_argument("out")
    p.add_argument("--steps", type=int, default=8)
    return ap


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        apply_seed(cfg, args.seed)
    return cfg


def run(args) -> object:
    if args.command == "prepare-data":
        cfg = _config(args)
        return cmd_prepare_data(args.corpus_dir, args.out, cfg.seed, cfg.data.workers, args.synthetic,
                                cfg.data.k_max, cfg.data.val_fraction)
    if args.command == "train-vae":
        cfg = _config(args)
        if args.seed is not None:
            cfg.vae.seed = args.seed
        return cmd_train_vae(args.dataset, cfg, args.out_dir, args.epochs)
    if args.command == "sample-paths":
        return len(cmd_sample_paths(args.checkpoint, args.count, args.seed, args.out_svg))
    if args.command == "generate":
        cfg = _config(args)
        if args.checkpoint:
            cfg.generate.checkpoint = args.checkpoint
        if args.backend:
            cfg.generate.backend = args.backend
        if args.m is not None:
            cfg.generate.m = args.m
        return cmd_generate(args.prompt, cfg, args.out_dir, args.resume)["path_counts"]
    if args.command == "eval":
        cfg = _config(args)
        return cmd_eval(args.svg_dir, args.prompts, args.out_report, cfg, args.reference_dir)["aggregate"]
    if args.command == "interpolate":
        return len(cmd_interpolate(args.checkpoint, args.z1_svg, args.z2_svg, args.steps, args.out))
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except NeuralPathError as exc:
        record = {"status": "error", "error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        print(json.dumps(record), file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        record = {"status": "error", "error": type(exc).__name__, "message": str(exc), "exit_code": 1}
        print(json.dumps(record), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, "result": result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
