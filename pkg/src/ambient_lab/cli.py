"""Command-line driver: ``ambient-lab <command> --config cfg.json [flags]``.

Every command writes its artifacts plus ``<command>.summary.json`` into the
output directory.  Exit status is 0 on success, 1 on a runtime failure and
2 on a usage or configuration error; failures print one diagnostic line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import dataio
from .config import ExperimentConfig
from .corruption import CorruptionProcess, Mask, apply, conditional_second_moment, estimate_second_moment
from .denoiser import ModelRestorer, deserialize
from .errors import CheckpointError, ConfigurationError
from .evaluation import MetricReport, energy_distance, memorization_stat, psnr, sliced_wasserstein
from .oracle import GMMDistribution, restorer_for, tweedie_consistency
from .sampler import SamplerConfig, draw_masks, restore, sample
from .training import OracleProbe, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

TRAIN_FILE = "train.ambd"
REFERENCE_FILE = "reference.ambr"
SAMPLES_FILE = "samples.ambs"
MODEL_FILE = "model.ckpt"
SAMPLER_NAMES = {"fixed": "fixed_mask", "guided": "reconstruction_guidance"}
TWEEDIE_TOL = 1e-6


class UsageError(Exception):
    pass


class RefusedError(Exception):
    """Artifacts from different configurations were mixed."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--seed", type=_u64, help="seed for this command's randomness")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--steps", type=_nonneg, help="training steps")
    common.add_argument("--sampler", choices=sorted(SAMPLER_NAMES))
    common.add_argument("--objective", choices=("ambient", "naive", "clean"))
    parser = _Parser(prog="ambient-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in [
        ("gen-data", "draw and corrupt a synthetic dataset"),
        ("train", "train a restorer on the corrupted dataset"),
        ("sample", "generate samples with the trained (or oracle) restorer"),
        ("restore", "one-step restoration of noisy masked data"),
        ("eval", "compare generated samples with the reference"),
        ("oracle-check", "Tweedie consistency of the closed-form oracle"),
        ("diagnose-moment", "Monte-Carlo vs closed-form E[A^T A | A_tilde]"),
    ]:
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _u64(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _nonneg(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("steps must be nonnegative")
    return v


# ---------------------------------------------------------------------------

def _resolve(args) -> tuple:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.out is not None:
        cfg = cfg.override("output.dir", str(args.out))
    if args.steps is not None:
        cfg = cfg.override("optimizer.steps", args.steps)
    if args.objective is not None:
        cfg = cfg.override("training.objective", args.objective)
    if args.sampler is not None:
        cfg = cfg.override("sampler.kind", SAMPLER_NAMES[args.sampler])
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _seed(args, cfg, which):
    return args.seed if args.seed is not None else int(cfg["seeds"][which])


def _same_digest(cfg, digest, what):
    if digest != cfg.digest():
        raise RefusedError(f"{what} was produced under config {digest[:12]}, "
                           f"current config is {cfg.digest()[:12]}")


def _load_model(cfg, out):
    path = out / MODEL_FILE
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}; run train first")
    model = deserialize(path.read_bytes())
    _same_digest(cfg, model.config_digest, "checkpoint")
    return model


def _restorer(cfg, out):
    if cfg["sampler"]["restorer"] == "oracle":
        return restorer_for(cfg.distribution())
    return ModelRestorer(_load_model(cfg, out))


# -- commands ---------------------------------------------------------------

def cmd_gen_data(args, cfg, out):
    seed = _seed(args, cfg, "data")
    cfg = cfg.override("seeds.data", seed)
    ds, x0 = dataio.generate_dataset(cfg, np.random.default_rng(seed))
    dataio.write_dataset(out / TRAIN_FILE, ds, overwrite=args.overwrite)
    dataio.write_reference(out / REFERENCE_FILE, x0, ds.digest, seed, overwrite=args.overwrite)
    cfg.save(out / "config.json")
    observed = float(np.mean(ds.operators.diag)) if isinstance(ds.operators, Mask) else None
    return {"records": ds.count, "n": ds.n, "m": ds.m, "kind": ds.kind,
            "observed_fraction": observed, "files": [TRAIN_FILE, REFERENCE_FILE]}


def cmd_train(args, cfg, out):
    ds = dataio.read_dataset(out / TRAIN_FILE)
    _same_digest(cfg, ds.digest, "dataset")
    proc = cfg.process()
    settings = cfg.train_settings()
    settings.seed = _seed(args, cfg, "train")
    t = cfg["training"]
    probe = None
    if cfg["data"].get("family", "gmm") in ("gmm", "finite"):
        probe = OracleProbe.build(cfg.distribution(), proc, t["eval_sigmas"],
                                  int(t["eval_size"]), int(t["eval_seed"]))
    start = time.perf_counter()
    result = train(ds.y, ds.operators, proc, cfg.schedule(), settings, probe=probe,
                   config_digest=cfg.digest(), out_dir=out)
    gaps = probe.gap(result.model.forward, by_sigma=True) if probe else {}
    return {"steps": settings.steps, "objective": settings.objective,
            "oracle_gap_by_sigma": {str(k): v for k, v in gaps.items()},
            "final": result.metrics[-1] if result.metrics else None,
            "seconds": time.perf_counter() - start, "checkpoint": MODEL_FILE}


def cmd_sample(args, cfg, out):
    s = cfg["sampler"]
    sc = SamplerConfig(_restorer(cfg, out), kind=s["kind"], schedule=cfg.schedule(),
                       guidance_weight=float(s["guidance_weight"]),
                       num_guidance_masks=int(s["num_guidance_masks"]))
    seed = _seed(args, cfg, "sample")
    x = sample(sc, cfg.process(), np.random.default_rng(seed), int(s["num_samples"]))
    dataio.write_samples(out / SAMPLES_FILE, x, cfg.digest(), seed, overwrite=True)
    return {"samples": len(x), "kind": s["kind"], "restorer": s["restorer"], "file": SAMPLES_FILE}


def restoration_benchmark(dist, restorers: dict, n_cases, mask_p, sigma, peak, rng):
    """PSNR of each restorer on fresh noisy Bernoulli-masked cases.

    Two reference points are scored as well: ``"prior_mean_fill"`` predicts
    the data mean everywhere, ``"observed_keep_fill"`` keeps the noisy
    observed coordinates and puts the mean only where the mask erased.
    """
    x0 = dist.sample(n_cases, rng)
    A = Mask((rng.random((n_cases, dist.n)) >= mask_p).astype(np.uint8))
    y = apply(A, x0 + sigma * rng.standard_normal(x0.shape))
    mu = np.broadcast_to(dist.mean(), x0.shape)
    scores = {"prior_mean_fill": psnr(mu, x0, peak),
              "observed_keep_fill": psnr(np.where(A.diag == 1, y, mu), x0, peak)}
    for name, r in restorers.items():
        scores[name] = psnr(restore(r, A, y, np.full(n_cases, sigma)), x0, peak)
    return scores


def cmd_restore(args, cfg, out):
    r = cfg["restore"]
    dist = cfg.distribution()
    restorers = {"oracle": restorer_for(dist)}
    if (out / MODEL_FILE).exists():
        restorers["trained"] = ModelRestorer(_load_model(cfg, out))
    scores = restoration_benchmark(dist, restorers, int(r["num_cases"]), float(r["mask_p"]),
                                   float(r["sigma"]), float(r["peak"]),
                                   np.random.default_rng(_seed(args, cfg, "sample")))
    return {"psnr_db": scores, "cases": int(r["num_cases"])}


def cmd_eval(args, cfg, out):
    x, d1 = dataio.read_samples(out / SAMPLES_FILE)
    ref, d2 = dataio.read_reference(out / REFERENCE_FILE)
    _same_digest(cfg, d1, "sample file")
    _same_digest(cfg, d2, "reference file")
    rng = np.random.default_rng(_seed(args, cfg, "sample"))
    k = min(len(x), len(ref), 5000)
    mem = memorization_stat(x[:k], ref)
    report = MetricReport(
        sliced_wasserstein=sliced_wasserstein(x, ref, int(cfg["eval"]["num_projections"]), rng),
        energy_distance=energy_distance(x[:k], ref[:k]),
        nn_similarity_quantiles=mem.quantiles, n_generated=len(x), n_reference=len(ref),
        config_digest=cfg.digest(), histogram=mem.histogram.tolist(),
        bin_edges=mem.bin_edges.tolist())
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.csv_row())
    (out / "nn_histogram.svg").write_text(report.histogram_svg())
    return {"sliced_wasserstein": report.sliced_wasserstein,
            "energy_distance": report.energy_distance, "nn_quantiles": mem.quantiles,
            "files": ["report.json", "report.csv", "nn_histogram.svg"]}


def cmd_oracle_check(args, cfg, out):
    dist = cfg.distribution()
    if not isinstance(dist, GMMDistribution):
        raise ConfigurationError("oracle-check needs a gmm data family")
    rng = np.random.default_rng(_seed(args, cfg, "sample"))
    pts = dist.sample(100, rng) + 2.0 * rng.standard_normal((100, dist.n))
    err = tweedie_consistency(dist, pts, cfg.schedule().sigma_grid())
    print(f"tweedie max relative error {err:.3e}")
    return {"max_rel_err": err, "tolerance": TWEEDIE_TOL, "passed": err < TWEEDIE_TOL}


def moment_check(proc: CorruptionProcess, A_tilde, num_samples, rng, z=3.0):
    """Monte-Carlo second moment against the closed form for one A_tilde."""
    mc, se = estimate_second_moment(proc, A_tilde, num_samples, rng)
    exact = conditional_second_moment(proc, A_tilde, rng=rng)
    dev = np.abs(mc - exact)
    ok = dev <= z * se
    ok |= (se == 0) & (dev <= 1e-12)
    return {"max_abs_dev": float(dev.max()), "max_z": float(np.max(dev / np.maximum(se, 1e-300))),
            "passed": bool(np.all(ok)), "exact_diag": np.diag(exact).tolist()}


def cmd_diagnose_moment(args, cfg, out):
    proc = cfg.process()
    if proc.kind == "block_inpainting":
        raise ConfigurationError("block inpainting has no closed-form moment to compare against")
    rng = np.random.default_rng(_seed(args, cfg, "sample"))
    A_tilde = draw_masks(proc, rng, 1)[0]
    res = moment_check(proc, A_tilde, 100_000, rng)
    print(f"moment check max |MC - exact| = {res['max_abs_dev']:.3e} ({res['max_z']:.2f} SE)")
    return res


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample,
    "restore": cmd_restore, "eval": cmd_eval, "oracle-check": cmd_oracle_check,
    "diagnose-moment": cmd_diagnose_moment,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
        args.overwrite = False
        cfg, out = _resolve(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        summary = COMMANDS[args.command](args, cfg, out)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RefusedError, CheckpointError, FileExistsError, FileNotFoundError,
            ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # still one line, but name the type
        print(f"{args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    summary = {"command": args.command, "config_digest": cfg.digest(), **summary}
    (out / f"{args.command}.summary.json").write_text(
        json.dumps(summary, indent=2, default=_jsonable) + "\n")
    if summary.get("passed") is False:
        print(f"{args.command}: check failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


if __name__ == "__main__":
    sys.exit(main())
