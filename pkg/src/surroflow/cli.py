"""Command line pipeline: generate datasets, train, evaluate, propagate.

Only the standard library is imported at module level. BLAS thread pools size
themselves from environment variables when numpy first loads, so the thread
count is resolved and pinned before any package module is touched; everything
heavy is imported inside the command functions.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import warnings
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; this contract reserves 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _pin_threads(n: int) -> None:
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _early_threads(args) -> int:
    """Thread count from flag, environment or config file, before numpy loads.

    Errors here stay silent on purpose: the full config resolution repeats the
    parse with real diagnostics once the package is imported.
    """
    if getattr(args, "deterministic", False):
        return 1
    if getattr(args, "threads", None) is not None:
        return args.threads
    env = os.environ.get("SURROFLOW_THREADS")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            return 1
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text())
            return int(raw["threads"])
        except (OSError, ValueError, TypeError, KeyError):
            return 1
    return 1


_FLAG_FIELDS = {
    "seed": "seed",
    "epochs": "epochs",
    "batch": "batch_size",
    "threads": "threads",
    "realizations": "uq_realizations",
}


def resolve_config(args):
    """Layer the configuration sources: preset < file < environment < flags."""
    from .config import RunConfig, apply_env_overrides, preset
    from .errors import ConfigError

    data = preset(args.preset).to_dict()
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            file_data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(file_data, dict):
            raise ConfigError(f"{path}: config JSON must be an object")
        data.update(file_data)
    data = apply_env_overrides(data)
    for flag, field in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[field] = value
    if getattr(args, "deterministic", False):
        data["threads"] = 1
    return RunConfig.from_dict(data)


def _prepare_out(args, cfg) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    return out


def _write_tsv(path, columns, rows) -> None:
    """Delimited text with full-precision floats, one header line."""

    def cell(v):
        if isinstance(v, float):
            return repr(v)
        return str(v)

    lines = ["\t".join(columns)]
    lines.extend("\t".join(cell(v) for v in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n")


def _sha256(path: Path) -> str:
    import hashlib

    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---- checkpoint plumbing ----


def _save_training_checkpoint(path, net, adam, scheduler, epoch, mode, norm_dict, cfg):
    from .checkpoint import save_checkpoint

    tensors = dict(net.state_tensors())
    for name, arr in adam.m.items():
        tensors[f"adam.m.{name}"] = arr
    for name, arr in adam.v.items():
        tensors[f"adam.v.{name}"] = arr
    meta = {
        "kind": "surrogate-training",
        "mode": mode,
        "epoch": epoch,
        "network": dataclasses.asdict(net.config),
        "adam": {
            "t": adam.t,
            "lr": adam.lr,
            "betas": [adam.beta1, adam.beta2],
            "eps": adam.eps,
        },
        "scheduler": scheduler.state(),
        "normalization": norm_dict,
        "run_config": cfg.to_dict(),
    }
    save_checkpoint(path, tensors, meta)


def load_trained_network(path):
    """Rebuild a network from a training checkpoint.

    Returns ``(net, tensors, meta)``; optimizer tensors stay in ``tensors``
    for callers that resume.
    """
    from .checkpoint import load_checkpoint
    from .errors import DataError
    from .network import NetworkConfig, build_network

    tensors, meta = load_checkpoint(path)
    if "network" not in meta:
        raise DataError(f"{path}: not a training checkpoint (no network entry)")
    try:
        net_cfg = NetworkConfig(**meta["network"])
    except TypeError as exc:
        raise DataError(f"{path}: malformed network entry: {exc}") from exc
    net = build_network(net_cfg)
    state = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    net.load_state_tensors(state)
    return net, tensors, meta


def _restore_optimizer(net, tensors, meta, train_cfg):
    from .errors import DataError
    from .training import Adam, PlateauScheduler

    try:
        adam_meta = meta["adam"]
        scheduler_state = meta["scheduler"]
    except KeyError as exc:
        raise DataError(f"checkpoint lacks optimizer state: {exc}") from exc
    params = net.named_parameters()
    adam = Adam(
        params,
        lr=adam_meta["lr"],
        betas=tuple(adam_meta["betas"]),
        eps=adam_meta["eps"],
    )
    adam.t = int(adam_meta["t"])
    for name in params:
        try:
            adam.m[name][...] = tensors[f"adam.m.{name}"]
            adam.v[name][...] = tensors[f"adam.v.{name}"]
        except KeyError as exc:
            raise DataError(f"checkpoint lacks Adam moments for {name}") from exc
    scheduler = PlateauScheduler(
        lr=train_cfg.learning_rate,
        factor=train_cfg.scheduler_factor,
        patience=train_cfg.scheduler_patience,
        min_delta=train_cfg.scheduler_min_delta,
        min_lr=train_cfg.scheduler_min_lr,
    )
    scheduler.load_state(scheduler_state)
    return adam, scheduler


# ---- commands ----


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args, cfg)
    from .dataset import generate_split

    for split in args.splits:
        manifest = generate_split(out, cfg, split)
        note = f", {len(manifest.skipped_seeds)} skipped" if manifest.skipped_seeds else ""
        print(
            f"{split}: {manifest.n_samples} samples x {manifest.n_times} times "
            f"-> {out / split}{note}"
        )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args, cfg)
    from .dataset import FlowDataset
    from .errors import DataError
    from .figures import training_curves
    from .network import build_network
    from .training import TrainRecord, mse_only_train, train_two_stage

    data_dir = Path(args.data)
    train_ds = FlowDataset.load(data_dir / "train")
    train_arrays = train_ds.records("all")[:3]
    eval_arrays = None
    if (data_dir / "test" / "manifest.json").exists():
        eval_arrays = FlowDataset.load(data_dir / "test").records("all")[:3]

    mode = args.mode
    trainer = train_two_stage if mode == "mse-bce" else mse_only_train
    tc = cfg.train_config()
    norm_dict = train_ds.manifest.normalization.to_dict()

    prior_rows = []
    if args.resume:
        net, tensors, meta = load_trained_network(args.resume)
        if meta.get("mode") != mode:
            raise DataError(
                f"checkpoint was trained with mode {meta.get('mode')!r}, "
                f"cannot resume with {mode!r}"
            )
        adam, scheduler = _restore_optimizer(net, tensors, meta, tc)
        start_epoch = int(meta["epoch"]) + 1
        if start_epoch >= tc.epochs:
            raise DataError(
                f"checkpoint already covers epoch {meta['epoch']}; "
                f"raise --epochs beyond {tc.epochs} to continue"
            )
        record_path = out / "record.tsv"
        if record_path.exists():
            prior_rows = [
                r for r in TrainRecord.from_tsv(record_path).rows if r.epoch < start_epoch
            ]
    else:
        net = build_network(cfg.network_config())
        adam = scheduler = None
        start_epoch = 0

    if (train_ds.manifest.height, train_ds.manifest.width) != (
        net.config.height,
        net.config.width,
    ):
        raise DataError(
            f"dataset geometry {train_ds.manifest.height}x{train_ds.manifest.width} "
            f"does not match network {net.config.height}x{net.config.width}"
        )

    def hook(epoch, net_, adam_, scheduler_, stats):
        hook.adam, hook.scheduler = adam_, scheduler_
        print(
            f"epoch {epoch + 1}/{tc.epochs} train_rmse={stats.train_rmse:.5f} "
            f"test_rmse={stats.test_rmse:.5f} lr={stats.lr:.2e}",
            flush=True,
        )
        last_epoch = epoch + 1 == tc.epochs
        if cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0 and not last_epoch:
            _save_training_checkpoint(
                out / f"checkpoint_{epoch + 1:04d}.ckpt",
                net_, adam_, scheduler_, epoch, mode, norm_dict, cfg,
            )

    record = trainer(
        net,
        train_arrays,
        tc,
        eval_arrays=eval_arrays,
        adam=adam,
        scheduler=scheduler,
        start_epoch=start_epoch,
        epoch_hook=hook,
    )

    merged = TrainRecord(prior_rows + record.rows)
    merged.to_tsv(out / "record.tsv")
    _save_training_checkpoint(
        out / "checkpoint.ckpt",
        net, hook.adam, hook.scheduler, record.last.epoch, mode, norm_dict, cfg,
    )
    training_curves(merged, out / "figures" / "training_curves.png")
    print(f"final train_rmse={record.last.train_rmse:.5f} -> {out / 'checkpoint.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args, cfg)
    import numpy as np

    from .dataset import FlowDataset
    from .errors import DataError
    from .figures import field_panels, per_time_metric_bars
    from .training import mask_iou, metrics_r2_rmse, predict

    net, _, meta = load_trained_network(args.checkpoint)
    ds = FlowDataset.load(Path(args.data) / args.split)
    if args.split == "train":
        warnings.warn("evaluating on the training split; metrics are optimistic")
    if (ds.manifest.height, ds.manifest.width) != (net.config.height, net.config.width):
        raise DataError(
            f"dataset geometry {ds.manifest.height}x{ds.manifest.width} does not "
            f"match checkpoint {net.config.height}x{net.config.width}"
        )
    ckpt_norm = meta.get("normalization", {})
    ds_norm = ds.manifest.normalization.to_dict()
    if ckpt_norm and ckpt_norm != ds_norm:
        raise DataError(
            f"normalization mismatch between checkpoint ({ckpt_norm}) and "
            f"dataset ({ds_norm})"
        )

    x, t, y, sample_idx, time_idx = ds.records("all")
    pred = predict(net, x, t)
    overall_r2, overall_rmse = metrics_r2_rmse(pred[:, :2], y[:, :2])
    tau = cfg.eval_mask_threshold

    trained = set(ds.manifest.train_times_s)
    per_time_rows = []
    for j, time_s in enumerate(ds.manifest.times_s):
        sel = time_idx == j
        r2, rmse = metrics_r2_rmse(pred[sel][:, :2], y[sel][:, :2])
        ious = [
            mask_iou(pred[m, 1] > tau, y[m, 2] > 0.5) for m in np.flatnonzero(sel)
        ]
        per_time_rows.append(
            (
                time_s / 86400.0,
                int(time_s in trained),
                r2,
                rmse,
                float(np.mean(ious)),
            )
        )

    _write_tsv(
        out / "metrics.tsv",
        ("split", "records", "r2", "rmse", "mask_threshold"),
        [(args.split, pred.shape[0], overall_r2, overall_rmse, tau)],
    )
    _write_tsv(
        out / "per_time.tsv",
        ("time_d", "trained", "r2", "rmse", "iou"),
        per_time_rows,
    )

    times_s = [row[0] * 86400.0 for row in per_time_rows]
    per_time_metric_bars(
        times_s, [row[2] for row in per_time_rows], sorted(trained),
        out / "figures" / "per_time_r2.png", ylabel="R²",
    )
    per_time_metric_bars(
        times_s, [row[4] for row in per_time_rows], sorted(trained),
        out / "figures" / "per_time_iou.png", ylabel="front IoU",
    )
    for m in range(min(args.panels, pred.shape[0])):
        field_panels(
            y[m], pred[m],
            out / "figures" / f"record_{m:04d}.png",
            title=f"sample {sample_idx[m]}, {ds.manifest.times_s[time_idx[m]] / 86400.0:g} d",
        )

    print(f"{args.split}: R²={overall_r2:.4f} RMSE={overall_rmse:.5f} over {pred.shape[0]} records")
    print("time_d\ttrained\tR²\tRMSE\tIoU")
    for row in per_time_rows:
        print(f"{row[0]:g}\t{row[1]}\t{row[2]:.4f}\t{row[3]:.5f}\t{row[4]:.4f}")
    return EXIT_OK


def cmd_uq(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args, cfg)
    from .checkpoint import save_checkpoint
    from .dataset import Normalization, derive_field_seed
    from .errors import DataError, NumericalError
    from .figures import moment_maps, pdf_overlays
    from .grf import FieldSampler
    from .uq import (
        FIELD_NAMES,
        compare_uq,
        ensemble_pass,
        estimate_pdf,
        pdf_l1_distance,
        simulator_evaluator,
        surrogate_evaluator,
    )

    net, _, meta = load_trained_network(args.checkpoint)
    if (cfg.grid_height, cfg.grid_width) != (net.config.height, net.config.width):
        raise DataError(
            f"config grid {cfg.grid_height}x{cfg.grid_width} does not match "
            f"checkpoint {net.config.height}x{net.config.width}"
        )
    norm = Normalization.from_dict(meta["normalization"]) if meta.get("normalization") else None
    if norm is None:
        raise DataError(f"{args.checkpoint}: checkpoint lacks normalization constants")
    if norm.time_scale_s != cfg.time_scale_s:
        raise DataError(
            f"checkpoint time scale {norm.time_scale_s} s disagrees with the "
            f"config ({cfg.time_scale_s} s); pass the training config"
        )

    sampler = FieldSampler(cfg.grid(), cfg.grf_params(), cfg.k_ref)
    fields = [
        sampler.sample(derive_field_seed(cfg.seed, "uq", i))
        for i in range(cfg.uq_realizations)
    ]
    times_s = cfg.uq_times_s
    grid_shape = (cfg.grid_height, cfg.grid_width)

    failed: set[int] = set()
    raw_oracle = simulator_evaluator(cfg)

    def oracle_eval(realization, ts):
        try:
            return raw_oracle(realization, ts)
        except NumericalError:
            failed.add(realization.seed)
            raise

    print(f"oracle pass over {len(fields)} realizations...", flush=True)
    oracle_m, oracle_probes = ensemble_pass(
        oracle_eval, fields, times_s, probes=cfg.uq_probes, grid_shape=grid_shape
    )
    survivors = [f for f in fields if f.seed not in failed]
    print(f"surrogate pass over {len(survivors)} realizations...", flush=True)
    surrogate_m, surrogate_probes = ensemble_pass(
        surrogate_evaluator(net, norm), survivors, times_s,
        probes=cfg.uq_probes, grid_shape=grid_shape,
    )
    tag = f"uq(seed={cfg.seed}, drawn={cfg.uq_realizations}, used={oracle_m.count})"
    oracle_m.realization_tag = tag
    surrogate_m.realization_tag = tag

    def build_pdfs(probe_samples):
        pdfs = {}
        for loc in cfg.uq_probes:
            for j, t in enumerate(times_s):
                for c, name in enumerate(FIELD_NAMES):
                    pdfs[(loc, t, name)] = estimate_pdf(
                        probe_samples[loc][j, c], loc, t, name
                    )
        return pdfs

    oracle_pdfs = build_pdfs(oracle_probes)
    surrogate_pdfs = build_pdfs(surrogate_probes)
    comparison = compare_uq(surrogate_m, oracle_m)

    for label, moments in (("oracle", oracle_m), ("surrogate", surrogate_m)):
        save_checkpoint(
            out / f"moments_{label}.bin",
            {"mean": moments.mean, "variance": moments.variance},
            meta={
                "times_s": list(moments.times_s),
                "fields": list(FIELD_NAMES),
                "count": moments.count,
                "failures": moments.failures,
                "realization_tag": moments.realization_tag,
            },
        )
    for label, pdfs in (("oracle", oracle_pdfs), ("surrogate", surrogate_pdfs)):
        rows = []
        for (loc, t, name), est in pdfs.items():
            for b in range(est.density.size):
                rows.append(
                    (loc[0], loc[1], t, name,
                     float(est.edges[b]), float(est.edges[b + 1]), float(est.density[b]))
                )
        _write_tsv(
            out / f"pdfs_{label}.tsv",
            ("row", "col", "time_s", "field", "bin_lo", "bin_hi", "density"),
            rows,
        )

    comparison_rows = []
    for name in FIELD_NAMES:
        for j, t in enumerate(times_s):
            comparison_rows.append(("mean_rel_l2", name, t, "", comparison.mean_rel_l2[name][j]))
            comparison_rows.append(
                ("variance_rel_l2", name, t, "", comparison.variance_rel_l2[name][j])
            )
    bimodal_hits = []
    for (loc, t, name), est in oracle_pdfs.items():
        distance = pdf_l1_distance(surrogate_pdfs[(loc, t, name)], est)
        comparison_rows.append(("pdf_l1", name, t, f"{loc[0]},{loc[1]}", distance))
        both = est.bimodal and surrogate_pdfs[(loc, t, name)].bimodal
        comparison_rows.append(
            ("bimodal_both", name, t, f"{loc[0]},{loc[1]}", float(both))
        )
        if name == "saturation" and both:
            bimodal_hits.append((loc, t))
    _write_tsv(
        out / "comparison.tsv",
        ("metric", "field", "time_s", "probe", "value"),
        comparison_rows,
    )

    bundle = ["config.json", "moments_oracle.bin", "moments_surrogate.bin",
              "pdfs_oracle.tsv", "pdfs_surrogate.tsv", "comparison.tsv"]
    manifest = {
        "realization_tag": tag,
        "config_sha256": cfg.digest(),
        "files": {name: _sha256(out / name) for name in bundle},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    for c, name in enumerate(FIELD_NAMES):
        moment_maps(surrogate_m, oracle_m, name, c, out / "figures" / f"moments_{name}.png")
    sat_keys = {k: v for k, v in surrogate_pdfs.items() if k[2] == "saturation"}
    pdf_overlays(
        sat_keys,
        {k: v for k, v in oracle_pdfs.items() if k[2] == "saturation"},
        out / "figures" / "saturation_pdfs.png",
    )

    for name in FIELD_NAMES:
        worst_mean = max(comparison.mean_rel_l2[name])
        worst_var = max(comparison.variance_rel_l2[name])
        print(f"{name}: worst mean rel L2 = {worst_mean:.4f}, worst variance rel L2 = {worst_var:.4f}")
    if bimodal_hits:
        locs = ", ".join(f"{loc}@{t / 86400.0:g}d" for loc, t in bimodal_hits)
        print(f"bimodal saturation densities (both estimators): {locs}")
    else:
        print("no probe shows bimodal saturation density in both estimators")
    print(f"bundle -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="surroflow", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file layered over the preset")
    common.add_argument(
        "--preset", choices=("desk", "paper"), default="desk",
        help="base configuration (default: desk)",
    )
    common.add_argument("--seed", type=int, help="run seed override")
    common.add_argument("--threads", type=int, help="BLAS/OpenMP thread count")
    common.add_argument(
        "--deterministic", action="store_true",
        help="pin all thread pools to one thread for bit-stable output",
    )
    common.add_argument("--out", required=True, help="output directory")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="simulate dataset splits")
    p.add_argument(
        "--splits", nargs="+", choices=("train", "test", "uq"),
        default=["train", "test"], help="splits to generate",
    )
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="fit the surrogate")
    p.add_argument("--data", required=True, help="dataset directory (holds train/, test/)")
    p.add_argument(
        "--mode", choices=("mse", "mse-bce"), default="mse-bce",
        help="single-stage distance baseline or the two-stage objective",
    )
    p.add_argument("--epochs", type=int, help="epoch count override")
    p.add_argument("--batch", type=int, help="minibatch size override")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True, help="training checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument(
        "--panels", type=int, default=0,
        help="render field comparison panels for the first N records",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("uq", parents=[common], help="Monte Carlo moment comparison")
    p.add_argument("--checkpoint", required=True, help="training checkpoint")
    p.add_argument("--realizations", type=int, help="ensemble size override")
    p.set_defaults(func=cmd_uq)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _pin_threads(_early_threads(args))
    from .errors import (
        ArchitectureError,
        ConfigError,
        DataError,
        GeometryError,
        NumericalError,
    )

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GeometryError, ArchitectureError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
