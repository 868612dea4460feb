"""Command-line entry point: ``deshadow <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 invalid config, 4 runtime failure.
Heavy modules are imported lazily so ``DESHADOW_THREADS`` can cap BLAS
threads before numpy loads.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import subprocess
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

log = logging.getLogger("deshadow")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4
ABLATION_ROWS = ("Joint", "w/o Harmo", "w/o Up", "Full")


@dataclass
class PipelineConfig:
    seed: int = 0
    resolution: int = 64
    n_lights: int = 160
    env_library_size: int = 24
    env_res: int = 32
    angular_sigma: float = 0.4
    harmonization_n: int = 2000
    deshadow_n: int = 2000
    test_n: int = 32
    bootstrap_n: int = 0
    lightstage_frac: float = 0.5
    external_frac: float = 0.5
    schedule_T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lr_harmonize: float = 4e-4
    lr_deshadow: float = 2e-4
    lr_joint: float = 4e-4
    steps_harmonize: int = 2000
    steps_deshadow: int = 2000
    steps_joint: int = 4000
    batch: int = 4
    ema_decay: float = 0.995
    grad_clip: float = 1.0
    augment: bool = True
    sample_steps: int = 50
    refine_sigma: float | None = None  # None -> scaled from the 256-pixel default
    refine_mode: str = "baseline"

    def validate(self) -> None:
        if self.resolution < 16 or self.resolution % 4:
            raise ValueError("resolution must be >= 16 and divisible by 4")
        if abs(self.lightstage_frac + self.external_frac - 1.0) > 1e-9:
            raise ValueError("lightstage_frac + external_frac must equal 1")
        if not self.lr_deshadow < self.lr_harmonize:
            raise ValueError("lr_deshadow must be smaller than lr_harmonize")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        if not 1 <= self.sample_steps <= self.schedule_T:
            raise ValueError("sample_steps must lie in [1, schedule_T]")
        if self.env_library_size < 2:
            raise ValueError("env_library_size must be >= 2")
        if self.refine_mode not in ("baseline", "learned"):
            raise ValueError("refine_mode must be 'baseline' or 'learned'")
        for f in ("harmonization_n", "deshadow_n", "test_n", "bootstrap_n", "steps_harmonize",
                  "steps_deshadow", "steps_joint"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")

    @property
    def effective_refine_sigma(self) -> float:
        from .guidedup import default_sigma

        return self.refine_sigma if self.refine_sigma is not None else default_sigma(self.resolution)


TOY_OVERRIDES = {
    "resolution": 32, "env_library_size": 8, "harmonization_n": 24, "deshadow_n": 24, "test_n": 4,
    "steps_harmonize": 20, "steps_deshadow": 20, "steps_joint": 40, "sample_steps": 10,
}


class ConfigError(ValueError):
    pass


class RuntimeFailure(RuntimeError):
    pass


def load_config(path: str | None, toy: bool = False, seed: int | None = None) -> PipelineConfig:
    """Defaults, then ``--toy`` overrides, then the JSON file, then ``--seed``."""
    values = dict(TOY_OVERRIDES) if toy else {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        known = {f.name for f in fields(PipelineConfig)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values.update(data)
    if seed is not None:
        values["seed"] = seed
    try:
        cfg = PipelineConfig(**values)
        for f in fields(PipelineConfig):
            v = getattr(cfg, f.name)
            default = f.default
            if default is None or v is None:
                continue
            if isinstance(default, bool) != isinstance(v, bool) or not isinstance(v, (int, float, str)):
                raise ValueError(f"{f.name} has invalid value {v!r}")
            if isinstance(default, int) and not isinstance(default, bool) and not isinstance(v, int):
                raise ValueError(f"{f.name} must be an integer")
            if isinstance(default, str) != isinstance(v, str):
                raise ValueError(f"{f.name} has invalid value {v!r}")
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


@contextlib.contextmanager
def step(name: str):
    """Re-raise failures as RuntimeFailure naming ``module.operation``."""
    try:
        yield
    except (ConfigError, RuntimeFailure):
        raise
    except Exception as exc:  # noqa: BLE001 - surfaced with context, exit code 4
        raise RuntimeFailure(f"{name}: {type(exc).__name__}: {exc}") from exc


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name("." + path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True))
    os.replace(tmp, path)


def freeze_run(out: Path, cfg: PipelineConfig, command: str, manifests: list[str | Path] = ()) -> None:
    from .metrics import file_sha256

    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", asdict(cfg))
    hashes = {}
    for m in manifests:
        p = Path(m)
        p = p / "manifest.json" if p.is_dir() else p
        with step("metrics.file_sha256"):
            hashes[p.parent.name] = file_sha256(p)
    _write_json(out / "provenance.json", {"command": command, "git_describe": git_describe(),
                                         "manifest_sha256": hashes})


# --------------------------------------------------------------------------- I/O helpers


def read_ldr(path: str | Path):
    """Display-referred [0, 1] values: PFM as stored, PNG as its encoded code values."""
    import numpy as np

    from .imagecore import as_image, read_image, srgb_encode

    p = Path(path)
    img = read_image(p)
    if p.suffix.lower() == ".png":
        img = srgb_encode(img)
    img = as_image(img, np.float32)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def write_ldr(path: str | Path, img) -> None:
    from .imagecore import srgb_decode, write_image

    p = Path(path)
    if p.suffix.lower() == ".png":
        write_image(p, srgb_decode(img), "png")
    else:
        write_image(p, img, "pfm")


def _schedule(cfg: PipelineConfig):
    from .diffusion.schedule import make_schedule

    return make_schedule(cfg.schedule_T, cfg.beta_start, cfg.beta_end)


def _train_config(cfg: PipelineConfig, stage: str, steps: int | None = None, seed_offset: int = 0,
                  allow_scratch: bool = False):
    from .diffusion.train import TrainConfig

    lr = {"harmonize": cfg.lr_harmonize, "deshadow": cfg.lr_deshadow, "joint": cfg.lr_joint}[stage]
    default_steps = {"harmonize": cfg.steps_harmonize, "deshadow": cfg.steps_deshadow,
                     "joint": cfg.steps_joint}[stage]
    return TrainConfig(stage=stage, lr=lr, steps=default_steps if steps is None else steps,
                       batch=cfg.batch, seed=cfg.seed + seed_offset, resolution=cfg.resolution,
                       ema_decay=cfg.ema_decay, grad_clip=cfg.grad_clip, augment=cfg.augment,
                       allow_scratch=allow_scratch)


# --------------------------------------------------------------------------- subcommands


def gen_data(cfg: PipelineConfig, out: Path) -> dict[str, Path]:
    from . import dataset as ds
    from .imagecore import write_pfm

    data = out / "data"
    paths = {}
    with step("dataset.make_env_library"):
        envs = ds.make_env_library(cfg.env_library_size, cfg.seed, cfg.env_res)
        held_out = ds.make_env_library(max(2, cfg.env_library_size // 3), cfg.seed + 1, cfg.env_res)
        (out / "envs").mkdir(parents=True, exist_ok=True)
        for i, e in enumerate(envs):
            write_pfm(out / "envs" / f"env_{i:03d}.pfm", e.radiance)
    mix = {"lightstage_frac": cfg.lightstage_frac, "external_frac": cfg.external_frac}
    with step("dataset.build_harmonization_set"):
        ds.build_harmonization_set(cfg.harmonization_n, cfg.seed * 10 + 1, envs, data / "harmonization",
                                   cfg.resolution)
        paths["harmonization"] = data / "harmonization"
    with step("dataset.build_deshadow_set"):
        ds.build_deshadow_set(cfg.deshadow_n, cfg.seed * 10 + 2, envs, mix, data / "deshadow",
                              cfg.resolution, cfg.angular_sigma)
        paths["deshadow"] = data / "deshadow"
        ds.build_deshadow_set(cfg.test_n, cfg.seed * 10 + 3, held_out, mix, data / "test",
                              cfg.resolution, cfg.angular_sigma, split="test")
        paths["test"] = data / "test"
    return paths


def _load_arrays(manifests: list[str]):
    from .dataset import PairArrays

    with step("dataset.Manifest.load"):
        arrays = [PairArrays.from_manifest(m) for m in manifests]
    by_kind: dict[str, list] = {}
    for a in arrays:
        by_kind.setdefault(a.kind, []).append(a)
    return {k: PairArrays.concat(v) for k, v in by_kind.items()}


def run_training(cfg: PipelineConfig, stage: str, data: dict, out: Path, init=None,
                 steps: int | None = None, allow_scratch: bool = False, tag: str | None = None):
    from .diffusion.train import train_stage
    from .diffusion.unet import UNetConfig

    tag = tag or stage
    stages = ["harmonize", "deshadow"] if stage == "compositional" else [stage]
    params = init
    for i, st in enumerate(stages):
        need = {"harmonize": ["harmonization"], "deshadow": ["deshadow"],
                "joint": ["harmonization", "deshadow"]}[st]
        missing = [k for k in need if k not in data]
        if missing:
            raise ConfigError(f"stage {st!r} needs {' and '.join(missing)} manifest(s)")
        src = data[need[0]] if len(need) == 1 else tuple(data[k] for k in need)
        tc = _train_config(cfg, st, steps, seed_offset=i, allow_scratch=allow_scratch)
        with step(f"diffusion.train_stage[{st}]"):
            params = train_stage(tc, src, init=params, sched=_schedule(cfg), unet=UNetConfig(),
                                 log_path=out / f"{tag}_{st}_log.csv",
                                 checkpoint_path=out / f"{tag}_{st}.ckpt")
    return params


def generate(cfg: PipelineConfig, params, inputs, masks, lighting, seed: int):
    from .diffusion.sampler import sample

    with step("diffusion.sample"):
        return sample(params, inputs, masks, lighting, _schedule(cfg), cfg.sample_steps, seed)


def evaluate_arrays(cfg: PipelineConfig, arrays, preds, method: str, manifest_hash: str,
                    use_refine: bool, refiner=None):
    from .guidedup import RefineConfig, refine
    from .metrics import EvalReport, composite_then_score

    rcfg = RefineConfig(cfg.effective_refine_sigma, "learned" if refiner is not None else "baseline", refiner)
    report = EvalReport(method, manifest_hash, metadata={"resolution": cfg.resolution,
                                                          "refine": use_refine})
    for i, rid in enumerate(arrays.ids):
        pred = preds[i]
        if use_refine:
            with step("guidedup.refine"):
                pred = refine(arrays.inputs[i], pred, arrays.masks[i], rcfg)
        bg = arrays.backgrounds[i] if arrays.backgrounds is not None else arrays.targets[i]
        with step("metrics.composite_then_score"):
            pred_c, gt = composite_then_score(pred, arrays.targets[i], bg, arrays.masks[i])
            report.add(rid, pred_c, gt)
    return report


def run_ablation(cfg: PipelineConfig, data_paths: dict, out: Path) -> list[dict]:
    """Four variants on one held-out set; seeds fixed so only the controlled factor differs."""
    from .metrics import file_sha256

    data = _load_arrays([str(data_paths["harmonization"]), str(data_paths["deshadow"])])
    test = _load_arrays([str(data_paths["test"])])["deshadow"]
    mhash = file_sha256(Path(data_paths["test"]) / "manifest.json")
    budget = cfg.steps_harmonize + cfg.steps_deshadow
    full = run_training(cfg, "compositional", data, out, tag="full")
    joint = run_training(cfg, "joint", data, out, steps=budget, tag="joint")
    scratch = run_training(cfg, "deshadow", data, out, steps=budget, allow_scratch=True, tag="scratch")
    seed = cfg.seed + 1000
    gen = {name: generate(cfg, p, test.inputs, test.masks, test.lighting, seed)
           for name, p in (("full", full), ("joint", joint), ("scratch", scratch))}
    variants = {"Joint": (gen["joint"], True), "w/o Harmo": (gen["scratch"], True),
                "w/o Up": (gen["full"], False), "Full": (gen["full"], True)}
    rows = []
    for name in ABLATION_ROWS:
        preds, up = variants[name]
        rep = evaluate_arrays(cfg, test, preds, name, mhash, up)
        agg = rep.aggregates()
        rows.append({"method": name, "ssim": agg["ssim"]["mean"], "gradient_proxy": agg["proxy"]["mean"]})
        rep.write(out / "reports", name.replace("/", "").replace(" ", "_").lower())
    base_rep = evaluate_arrays(cfg, test, test.inputs, "input", mhash, False)
    base_rep.write(out / "reports", "input")
    base = base_rep.aggregates()
    summary = {"rows": rows, "input_baseline": {"ssim": base["ssim"]["mean"],
                                                "gradient_proxy": base["proxy"]["mean"]},
               "budget_steps": budget, "test_records": len(test),
               "note": "gradient_proxy is a gradient-magnitude distance, not a learned perceptual metric"}
    _write_json(out / "ablation.json", summary)
    lines = ["| method | SSIM | gradient proxy |", "|---|---|---|"]
    lines += [f"| {r['method']} | {r['ssim']:.4f} | {r['gradient_proxy']:.4f} |" for r in rows]
    (out / "ablation.md").write_text("\n".join(lines) + "\n")
    with open(out / "ablation.csv", "w") as fh:
        fh.write("method,ssim,gradient_proxy\n")
        for r in rows:
            fh.write(f"{r['method']},{r['ssim']!r},{r['gradient_proxy']!r}\n")
    return rows


# --------------------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deshadow", description="Portrait shadow removal toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of PipelineConfig keys")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", required=True, help="run directory (created)")
    common.add_argument("--toy", action="store_true", help="tiny sizes for smoke runs")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="build harmonization, deshadow and test manifests")

    t = sub.add_parser("train", parents=[common], help="train one stage or the two-stage chain")
    t.add_argument("--stage", required=True, choices=["harmonize", "deshadow", "joint", "compositional"])
    t.add_argument("--manifest", action="append", required=True, help="repeat for joint/compositional")
    t.add_argument("--checkpoint", help="initial weights (required for deshadow)")
    t.add_argument("--steps", type=int)
    t.add_argument("--allow-scratch", action="store_true", help="deshadow without a harmonize init")

    i = sub.add_parser("infer", parents=[common], help="sample a shadow-free generation")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--mask")
    i.add_argument("--steps", type=int, help="sampling steps (default from config)")

    r = sub.add_parser("refine", parents=[common], help="guided refinement of a generation")
    r.add_argument("--input", required=True)
    r.add_argument("--generation", required=True)
    r.add_argument("--mask")
    r.add_argument("--checkpoint", help="learned refiner weights")

    e = sub.add_parser("evaluate", parents=[common], help="score predictions over a manifest")
    e.add_argument("--manifest", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--predictions", help="directory of <record id>.pfm predictions")
    src.add_argument("--checkpoint", help="denoiser to sample predictions with")
    e.add_argument("--refine", action="store_true", help="apply guided refinement to sampled outputs")
    e.add_argument("--method", default="model")

    a = sub.add_parser("ablate", parents=[common], help="Joint / w/o Harmo / w/o Up / Full matrix")
    a.add_argument("--data", help="existing gen-data run directory to reuse")
    return p


def _mask_or_ones(path, shape):
    import numpy as np

    if path is None:
        log.warning("no mask given; using an all-ones foreground mask")
        return np.ones(shape[:2] + (1,), np.float32)
    m = read_ldr(path)[..., :1]
    return m


def _dispatch(args, cfg: PipelineConfig, out: Path) -> None:
    from .metrics import file_sha256

    cmd = args.command
    if cmd == "gen-data":
        paths = gen_data(cfg, out)
        freeze_run(out, cfg, cmd, list(paths.values()))
    elif cmd == "train":
        freeze_run(out, cfg, cmd, args.manifest)
        data = _load_arrays(args.manifest)
        init = None
        if args.checkpoint:
            from .diffusion.train import load_denoiser

            with step("diffusion.load_denoiser"):
                init = load_denoiser(args.checkpoint)
        final = run_training(cfg, args.stage, data, out, init=init, steps=args.steps,
                             allow_scratch=args.allow_scratch)
        from .diffusion.train import save_denoiser

        with step("diffusion.save_denoiser"):
            save_denoiser(out / "checkpoint.ckpt", final)
    elif cmd == "infer":
        import numpy as np

        from .diffusion.train import load_denoiser
        from .envmap import lighting_map

        freeze_run(out, cfg, cmd)
        with step("imagecore.read_image"):
            img = read_ldr(args.input)
            mask = _mask_or_ones(args.mask, img.shape)
        with step("diffusion.load_denoiser"):
            params = load_denoiser(args.checkpoint)
        if args.steps is not None:
            cfg.sample_steps = args.steps
        with step("envmap.lighting_map"):
            light = lighting_map(np.clip(img, 0.0, 1.0))
        gen = generate(cfg, params, img, mask, light, cfg.seed)
        with step("imagecore.write_image"):
            write_ldr(out / "generation.pfm", gen)
            write_ldr(out / "generation.png", gen)
    elif cmd == "refine":
        from .guidedup import RefineConfig, load_refiner, refine

        freeze_run(out, cfg, cmd)
        with step("imagecore.read_image"):
            inp = read_ldr(args.input)
            gen = read_ldr(args.generation)
            mask = _mask_or_ones(args.mask, inp.shape)
        learned = None
        if args.checkpoint:
            with step("guidedup.load_refiner"):
                learned = load_refiner(args.checkpoint)
        rcfg = RefineConfig(cfg.effective_refine_sigma, "learned" if learned else "baseline", learned)
        with step("guidedup.refine"):
            refined = refine(inp, gen, mask, rcfg)
        with step("imagecore.write_image"):
            write_ldr(out / "refined.pfm", refined)
            write_ldr(out / "refined.png", refined)
    elif cmd == "evaluate":
        import numpy as np

        from .imagecore import read_pfm

        freeze_run(out, cfg, cmd, [args.manifest])
        arrays = _load_arrays([args.manifest])
        (kind, arr), = arrays.items()
        mpath = Path(args.manifest)
        mhash = file_sha256(mpath / "manifest.json" if mpath.is_dir() else mpath)
        if args.predictions:
            with step("imagecore.read_pfm"):
                preds = np.stack([read_pfm(Path(args.predictions) / f"{rid}.pfm") for rid in arr.ids])
        else:
            from .diffusion.train import load_denoiser

            with step("diffusion.load_denoiser"):
                params = load_denoiser(args.checkpoint)
            preds = generate(cfg, params, arr.inputs, arr.masks, arr.lighting, cfg.seed)
        report = evaluate_arrays(cfg, arr, preds, args.method, mhash, args.refine)
        report.write(out, "report")
    elif cmd == "ablate":
        if args.data:
            base = Path(args.data) / "data"
            paths = {k: base / k for k in ("harmonization", "deshadow", "test")}
        else:
            paths = gen_data(cfg, out)
        freeze_run(out, cfg, cmd, list(paths.values()))
        run_ablation(cfg, paths, out)


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("DESHADOW_THREADS")
    if threads:
        if not threads.isdigit() or int(threads) < 1:
            print("deshadow: DESHADOW_THREADS must be a positive integer", file=sys.stderr)
            return EXIT_CONFIG
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.toy, args.seed)
        out = Path(args.out)
        _dispatch(args, cfg, out)
    except ConfigError as exc:
        print(f"deshadow: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeFailure as exc:
        print(f"deshadow: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
