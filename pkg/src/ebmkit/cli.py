"""Command-line surface.

Subcommands: train, eval, calibrate, ood, attack, hist-egm, sample.
Every command reads a JSON experiment config (schema below, unknown
keys rejected), writes its artifacts plus a reproducibility manifest
into the output directory, and exits 0 on success, 1 on usage/config
errors, 2 on runtime failures.

Environment: EBMKIT_OUT overrides the output directory, EBMKIT_THREADS
caps BLAS threads (best effort; recorded in the manifest).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import attacks
from . import data as datamod
from . import energy as en
from . import losses
from . import metrics
from . import nn
from . import sampler as smp
from . import trainer

__all__ = ["main", "entrypoint"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we want 1
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config schema

_SCHEMA = {
    "": {"seed", "out_dir", "model", "data", "ood_data", "train",
         "metrics", "attack", "sample", "hist"},
    "model": {"kind", "input_dim", "hidden", "classes", "input_shape",
              "channels", "kernel", "dim"},
    "data": {"kind", "n_per_class", "centers", "std", "seed", "label_noise",
             "train_files", "test_files", "path", "classes"},
    "ood_data": None,   # same keys as data
    "train": {"mode", "epochs", "batch_size", "lr", "milestones", "decay_factor",
              "beta", "gamma", "literal_sign", "checkpoint_interval",
              "divergence_policy", "sampler"},
    "sampler": {"n_steps", "step_size", "decay_exponent", "init", "noise",
                "noise_scale", "divergence_bound", "convergence_eta"},
    "metrics": {"ece_bins"},
    "attack": {"norm", "epsilons", "n_steps", "step_size", "random_start"},
    "sample": {"n", "sampler"},
    "hist": {"bins"},
}


def _check_keys(section: dict, name: str) -> None:
    allowed = _SCHEMA["data"] if name == "ood_data" else _SCHEMA[name]
    unknown = set(section) - allowed
    if unknown:
        where = f"section {name!r}" if name else "config"
        raise losses.ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")
    for key, value in section.items():
        if isinstance(value, dict) and key in _SCHEMA:
            _check_keys(value, key)


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            config = json.load(fh)
    except OSError as exc:
        raise losses.ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise losses.ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise losses.ConfigError("config root must be a JSON object")
    _check_keys(config, "")
    return config


# ---------------------------------------------------------------------------
# builders

def build_model(section: dict):
    kind = section.get("kind", "mlp")
    if kind == "mlp":
        return nn.ModelSpec.mlp(section["input_dim"], section.get("hidden", [32, 32]),
                                section["classes"])
    if kind == "conv":
        return nn.ModelSpec.small_conv(tuple(section["input_shape"]),
                                       section.get("channels", [8, 8]),
                                       section["classes"],
                                       kernel=section.get("kernel", 3))
    if kind == "quadratic_bowl":
        return smp.QuadraticBowlEnergy()
    if kind == "concave_bowl":
        return smp.ConcaveBowlEnergy()
    raise losses.ConfigError(f"unknown model kind {kind!r}")


def build_dataset(section: dict, split_seed_offset: int = 1000):
    """Returns (train, test) datasets for the configured source."""
    kind = section.get("kind", "gaussian_mixture")
    if kind == "gaussian_mixture":
        seed = section.get("seed", 0)
        train = datamod.gen_gaussian_mixture_2d(
            section["n_per_class"], section["centers"], section["std"], seed=seed)
        test = datamod.gen_gaussian_mixture_2d(
            section["n_per_class"], section["centers"], section["std"],
            seed=seed + split_seed_offset, split="test")
        noise = section.get("label_noise", 0.0)
        if noise:
            train = datamod.with_label_noise(train, noise, seed=seed + 1)
        return train, test
    if kind in ("cifar10", "cifar100"):
        def read_all(paths, split):
            parts = [datamod.read_cifar_binary(p, kind, split) for p in paths]
            return datamod.Dataset(np.concatenate([p.x for p in parts]),
                                   np.concatenate([p.y for p in parts]),
                                   classes=parts[0].classes, split=split,
                                   provenance=";".join(p.provenance for p in parts))
        train = read_all(section["train_files"], "train") if section.get("train_files") else None
        test = read_all(section["test_files"], "test") if section.get("test_files") else None
        return train, test
    if kind == "csv":
        ds = datamod.dataset_from_csv(section["path"], classes=section["classes"])
        return ds, ds
    raise losses.ConfigError(f"unknown data kind {kind!r}")


def build_sampler(section: dict) -> smp.SgldConfig:
    init = section.get("init", [-1.0, 1.0])
    return smp.SgldConfig(
        n_steps=section.get("n_steps", 20),
        step_size=section.get("step_size", 1.0),
        decay_exponent=section.get("decay_exponent", 0.0),
        init_lo=init[0], init_hi=init[1],
        noise=section.get("noise", True),
        noise_scale=section.get("noise_scale"),
        divergence_bound=section.get("divergence_bound"),
        convergence_eta=section.get("convergence_eta", 1e-3))


def build_train_config(config: dict, model) -> trainer.TrainConfig:
    section = config.get("train", {})
    mode_name = section.get("mode", "ce")
    try:
        mode = losses.Mode(mode_name)
    except ValueError:
        raise losses.ConfigError(f"unknown training mode {mode_name!r}") from None
    sampler_cfg = build_sampler(section["sampler"]) if "sampler" in section else None
    if mode is losses.Mode.JEM and sampler_cfg is None:
        sampler_cfg = smp.SgldConfig()
    loss_cfg = losses.LossConfig(mode=mode,
                                 beta=section.get("beta", 0.5),
                                 gamma=section.get("gamma", 0.5),
                                 sampler=sampler_cfg,
                                 literal_sign=section.get("literal_sign", False))
    return trainer.TrainConfig(
        model=model, loss=loss_cfg,
        epochs=section.get("epochs", 150),
        batch_size=section.get("batch_size", 64),
        seed=config.get("seed", 0),
        schedule=nn.LrSchedule(section.get("lr", 1e-4),
                               tuple(section.get("milestones", [])),
                               section.get("decay_factor", 0.1)),
        checkpoint_interval=section.get("checkpoint_interval", 0),
        checkpoint_dir=None,
        divergence_policy=section.get("divergence_policy", "skip-batch"))


# ---------------------------------------------------------------------------
# manifest

def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed,
                   checkpoint_path=None) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "versions": {"ebmkit": __version__, "numpy": np.__version__},
        "threads": os.environ.get("EBMKIT_THREADS"),
    }
    if checkpoint_path is not None:
        manifest["checkpoint_sha256"] = _sha256(checkpoint_path)
    with open(out_dir / f"manifest_{command}.json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def _out_dir(args, config) -> Path:
    out = args.out or os.environ.get("EBMKIT_OUT") or config.get("out_dir")
    if not out:
        raise losses.ConfigError("no output directory (config out_dir, --out, or EBMKIT_OUT)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require_model_spec(model):
    if not isinstance(model, nn.ModelSpec):
        raise losses.ConfigError("this command requires a trainable model (mlp or conv)")
    return model


def _load_checkpoint(args) -> trainer.Checkpoint:
    if not args.checkpoint:
        raise losses.ConfigError("this command requires --checkpoint")
    return trainer.checkpoint_load(args.checkpoint)


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    out = _out_dir(args, config)
    model = _require_model_spec(build_model(config["model"]))
    train_ds, test_ds = build_dataset(config["data"])
    tc = build_train_config(config, model)
    if tc.checkpoint_interval:
        tc.checkpoint_dir = str(out)
    ckpt, log = trainer.train(tc, train_ds, test_ds)
    ckpt_path = out / "checkpoint_final.npz"
    trainer.checkpoint_save(ckpt, ckpt_path)
    trainer.runlog_to_csv(log, out / "runlog.csv")
    write_manifest(out, "train", config, tc.seed, ckpt_path)
    last = log.records[-1] if log.records else None
    if last:
        print(f"trained {tc.epochs} epochs: eval accuracy {last.eval_accuracy:.4f}, "
              f"mean EGM {last.mean_egm:.4g}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args, config)
    ckpt = _load_checkpoint(args)
    _, test_ds = build_dataset(config["data"])
    n_bins = config.get("metrics", {}).get("ece_bins", metrics.DEFAULT_ECE_BINS)
    result = trainer.evaluate(ckpt, test_ds, n_bins=n_bins)
    with open(out / "eval.csv", "w") as fh:
        fh.write("accuracy,mean_confidence,ece\n")
        fh.write(f"{result.accuracy:.12g},{result.mean_confidence:.12g},"
                 f"{result.ece_report.value:.12g}\n")
    write_manifest(out, "eval", config, config.get("seed", 0), args.checkpoint)
    print(f"accuracy {result.accuracy:.4f}, confidence {result.mean_confidence:.4f}, "
          f"ECE {result.ece_report.value:.4f}")
    return 0


def cmd_calibrate(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args, config)
    ckpt = _load_checkpoint(args)
    _, test_ds = build_dataset(config["data"])
    n_bins = config.get("metrics", {}).get("ece_bins", metrics.DEFAULT_ECE_BINS)
    result = trainer.evaluate(ckpt, test_ds, n_bins=n_bins)
    metrics.ece_to_csv(result.ece_report, out / "calibration_bins.csv")
    write_manifest(out, "calibrate", config, config.get("seed", 0), args.checkpoint)
    print(f"ECE {result.ece_report.value:.4f} over {n_bins} bins "
          f"-> {out / 'calibration_bins.csv'}")
    return 0


def cmd_ood(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args, config)
    ckpt = _load_checkpoint(args)
    if "ood_data" not in config:
        raise losses.ConfigError("ood command requires an ood_data section")
    _, in_ds = build_dataset(config["data"])
    _, out_ds = build_dataset(config["ood_data"])
    kind = en.ScoreKind(args.score)
    scores_in = metrics.score_dataset(ckpt.model, ckpt.params, in_ds, kind)
    scores_out = metrics.score_dataset(ckpt.model, ckpt.params, out_ds, kind)
    roc = metrics.auroc(scores_in, scores_out)

    with open(out / "ood_scores.csv", "w") as fh:
        fh.write("split,score\n")
        for s in scores_in:
            fh.write(f"in,{s:.12g}\n")
        for s in scores_out:
            fh.write(f"out,{s:.12g}\n")
    bins = config.get("hist", {}).get("bins", 30)
    value_range = (float(min(scores_in.min(), scores_out.min())),
                   float(max(scores_in.max(), scores_out.max())))
    if value_range[0] == value_range[1]:
        value_range = None
    metrics.histogram_to_csv(metrics.histogram(scores_in, bins, value_range),
                             out / "ood_hist_in.csv")
    metrics.histogram_to_csv(metrics.histogram(scores_out, bins, value_range),
                             out / "ood_hist_out.csv")
    metrics.roc_to_csv(roc, out / "ood_roc.csv")
    with open(out / "ood_auroc.csv", "w") as fh:
        fh.write("score_kind,auroc,n_in,n_out\n")
        fh.write(f"{kind.value},{roc.auroc:.12g},{len(scores_in)},{len(scores_out)}\n")
    write_manifest(out, "ood", config, config.get("seed", 0), args.checkpoint)
    print(f"AUROC[{kind.value}] = {roc.auroc:.4f}")
    return 0


def cmd_attack(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args, config)
    ckpt = _load_checkpoint(args)
    _, test_ds = build_dataset(config["data"])
    section = config.get("attack", {})
    norm = attacks.Norm(args.norm or section.get("norm", "linf"))
    epsilons = args.epsilons or section.get("epsilons", [0.0, 0.1, 0.2])
    base = attacks.AttackConfig(norm=norm,
                                n_steps=section.get("n_steps", 40),
                                step_size=section.get("step_size"),
                                random_start=section.get("random_start", True))
    report = attacks.attack_sweep(ckpt.model, ckpt.params, test_ds, norm,
                                  epsilons, config=base,
                                  seed=config.get("seed", 0))
    attacks.attack_report_to_csv(report, out / "attack.csv")
    write_manifest(out, "attack", config, config.get("seed", 0), args.checkpoint)
    for eps, acc in zip(report.epsilons, report.adversarial_accuracy):
        print(f"{norm.value} eps={eps:g}: adversarial accuracy {acc:.4f} "
              f"(clean {report.clean_accuracy:.4f})")
    return 0


def cmd_hist_egm(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args, config)
    ckpt = _load_checkpoint(args)
    train_ds, _ = build_dataset(config["data"])
    grads = en.energy_grad_input(ckpt.model, ckpt.params, train_ds.x)
    egm = np.linalg.norm(grads.reshape(grads.shape[0], -1), axis=1)
    bins = config.get("hist", {}).get("bins", 30)
    metrics.histogram_to_csv(metrics.histogram(egm, bins), out / "egm_hist.csv")
    write_manifest(out, "hist-egm", config, config.get("seed", 0), args.checkpoint)
    print(f"mean EGM {egm.mean():.6g} over {egm.size} examples -> {out / 'egm_hist.csv'}")
    return 0


def cmd_sample(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args, config)
    section = config.get("sample", {})
    n = args.n or section.get("n", 64)
    sampler_cfg = build_sampler(section.get("sampler", {}))
    if args.checkpoint:
        ckpt = trainer.checkpoint_load(args.checkpoint)
        model, params = ckpt.model, ckpt.params
        shape = ckpt.model.input_shape
    else:
        model = build_model(config["model"])
        if isinstance(model, nn.ModelSpec):
            raise losses.ConfigError(
                "sample without --checkpoint needs a test-energy model "
                "(quadratic_bowl or concave_bowl)")
        params = {}
        shape = (config["model"].get("dim", 2),)
    rng = np.random.default_rng(config.get("seed", 0))
    x0 = rng.uniform(sampler_cfg.init_lo, sampler_cfg.init_hi, size=(n,) + tuple(shape))
    result = smp.sgld_chain(model, params, x0, sampler_cfg,
                            rng=np.random.default_rng([config.get("seed", 0), 1]),
                            _trace_egm=not sampler_cfg.noise)
    ok = ~result.report.diverged_mask
    flat_dim = int(np.prod(result.samples.shape[1:]))
    survivors = result.samples[ok].reshape(int(ok.sum()), flat_dim)
    with open(out / "samples.csv", "w") as fh:
        fh.write(",".join(f"x{i}" for i in range(survivors.shape[1])) + "\n")
        for row in survivors:
            fh.write(",".join(f"{v:.12g}" for v in row) + "\n")
    stats = {
        "n_requested": int(n),
        "n_diverged": int((~ok).sum()),
        "diverged": bool(result.report.diverged),
        "step": result.report.step,
        "reason": result.report.reason,
        "converged": result.converged,
        "final_mean_egm": result.egm_trace[-1] if result.egm_trace else None,
    }
    with open(out / "divergence.json", "w") as fh:
        json.dump(stats, fh, indent=2)
    write_manifest(out, "sample", config, config.get("seed", 0),
                   args.checkpoint if args.checkpoint else None)
    print(f"{survivors.shape[0]} samples written ({stats['n_diverged']} diverged)")
    return 0


# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="ebmkit", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--threads", type=int, help="BLAS thread cap (best effort)")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint .npz path")

    common(sub.add_parser("train", help="train a model"))
    common(sub.add_parser("eval", help="accuracy/confidence/ECE"), checkpoint=True)
    common(sub.add_parser("calibrate", help="reliability-diagram bins"), checkpoint=True)
    ood = sub.add_parser("ood", help="out-of-distribution scoring")
    common(ood, checkpoint=True)
    ood.add_argument("--score", default="approximate_mass",
                     choices=[k.value for k in en.ScoreKind])
    attack = sub.add_parser("attack", help="PGD accuracy-vs-epsilon sweep")
    common(attack, checkpoint=True)
    attack.add_argument("--norm", choices=["l2", "linf"])
    attack.add_argument("--epsilons", type=float, nargs="+")
    common(sub.add_parser("hist-egm", help="energy-derivative histogram"),
           checkpoint=True)
    sample = sub.add_parser("sample", help="run sampler chains")
    common(sample, checkpoint=True)
    sample.add_argument("--n", type=int, help="number of chains")
    return parser


_COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "calibrate": cmd_calibrate,
    "ood": cmd_ood, "attack": cmd_attack, "hist-egm": cmd_hist_egm,
    "sample": cmd_sample,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    if getattr(args, "threads", None):
        os.environ["EBMKIT_THREADS"] = str(args.threads)
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(args.threads))
    try:
        return _COMMANDS[args.command](args)
    except (losses.ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - surface as runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())
