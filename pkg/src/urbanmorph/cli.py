"""Command-line pipeline driver.

Subcommands::

    synth             build a synthetic tract panel, image corpus and truth file
    train-forecaster  fit temporal models on a tract CSV, emit checkpoints
    forecast          roll a trained forecaster forward, emit forecast CSVs
    train-gan         fit the conditional image model on a paired corpus
    generate          render one image per forecast row from a trained GAN
    evaluate          score predictions against references (CSV or image dirs)

Common flags: --config (key=value file; explicit flags win), --seed, --out,
--log-level.  Exit codes: 0 success, 2 I/O or config, 3 data or schema,
4 model compatibility.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import forecaster as fc
from . import ingest, metrics, spatialgen, synthdata
from .checkpoint import CheckpointError, CompatibilityError
from .imagedir import (CorpusError, image_to_unit, load_image_corpus,
                       save_image, save_image_grid)
from .manifest import start_manifest
from .runconfig import ConfigError, load_config, resolve
from .seeds import stream
from .tensor import ShapeMismatch

EXIT_OK = 0
EXIT_IO = 2
EXIT_DATA = 3
EXIT_COMPAT = 4

log = logging.getLogger("urbanmorph")


class DataError(ValueError):
    """Malformed or misaligned run inputs (exit code 3)."""


# ---------------------------------------------------------------------------
# plumbing


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="master seed (default 0)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])


def _setup(args) -> tuple:
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(levelname)s %(message)s", force=True)
    config = load_config(args.config) if args.config else {}
    seed = resolve("seed", args.seed, config, 0, int)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return config, seed, out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_jsonl(path: Path, entries: list) -> None:
    with path.open("w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    config, seed, out = _setup(args)
    world = synthdata.WorldConfig(
        n_tracts=resolve("n_tracts", args.n_tracts, config, 200, int),
        start_year=resolve("start_year", args.start_year, config, 2012, int),
        end_year=resolve("end_year", args.end_year, config, 2023, int),
        seed=seed,
        travel_noise=resolve("travel_noise", args.travel_noise, config, 0.1, float),
        image_size=resolve("image_size", args.image_size, config, 32, int),
        shock_year=resolve("shock_year", args.shock_year, config, None, int),
    )
    max_images = resolve("max_images", args.max_images, config, -1, int)
    manifest = start_manifest("synth", seed, {**config, "world": asdict(world)})

    records, truth = synthdata.generate_tracts(world)
    csv_path = out / "data.csv"
    ingest.write_csv(csv_path, records)
    truth_path = out / "truth.json"
    truth_path.write_text(truth.to_json())
    log.info("wrote %d rows for %d tracts to %s",
             len(records), world.n_tracts, csv_path)

    image_records = records if max_images < 0 else records[:max_images]
    if image_records:
        corpus_dir = out / "images"
        synthdata.generate_image_corpus(image_records, world, corpus_dir)
        manifest.add_artifact(corpus_dir / "index.json", base=out)
        log.info("rendered %d corpus images to %s", len(image_records), corpus_dir)

    manifest.add_artifact(csv_path, base=out)
    manifest.add_artifact(truth_path, base=out)
    manifest.write(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-forecaster


def _forecaster_config(kind: str, args, config, seed) -> fc.ForecastConfig:
    overrides = {"seed": seed}
    for field, flag in [("epochs", args.epochs), ("batch_size", args.batch_size),
                        ("lr", args.lr), ("hidden", args.hidden),
                        ("layers", args.layers), ("heads", args.heads),
                        ("dropout", args.dropout), ("input_len", args.input_len),
                        ("horizon", args.horizon)]:
        kind_ = float if field in ("lr", "dropout") else int
        value = resolve(field, flag, config, None, kind_)
        if value is not None:
            overrides[field] = value
    return fc.default_config(kind, **overrides)


def _load_split(args, config):
    records, report = ingest.load_csv(args.data)
    if report.rows_rejected:
        log.warning("rejected %d of %d rows", report.rows_rejected,
                    report.rows_read)
        for line, reason in report.reasons:
            log.warning("  line %d: %s", line, reason)
    dataset = ingest.chronological_split(
        records,
        boundary=resolve("boundary_year", args.boundary_year, config, 2017, int),
        input_len=resolve("input_len", args.input_len, config, 3, int),
        horizon=resolve("horizon", args.horizon, config, 3, int),
        iqr_multiplier=resolve("iqr_multiplier", args.iqr_multiplier,
                               config, 1.5, float))
    return dataset


def cmd_train_forecaster(args) -> int:
    config, seed, out = _setup(args)
    manifest = start_manifest("train-forecaster", seed, config)
    manifest.add_input("data", args.data)

    dataset = _load_split(args, config)
    split_path = out / "split_report.txt"
    split_path.write_text(ingest.split_report_text(dataset))
    manifest.add_artifact(split_path, base=out)

    kinds = resolve("models", args.models, config, "tft").split(",")
    kinds = [k.strip() for k in kinds if k.strip()]
    for kind in kinds:
        if kind not in fc.MODEL_KINDS:
            raise DataError(f"unknown model kind {kind!r}; "
                            f"choose from {fc.MODEL_KINDS}")

    epochs = resolve("epochs", args.epochs, config, None, int)
    if epochs == 0:
        log.info("epochs=0: split report and manifest only")
        manifest.write(out)
        return EXIT_OK

    report = metrics.MetricsReport()
    for kind in kinds:
        cfg = _forecaster_config(kind, args, config, seed)
        log.info("training %s (%d epochs, hidden %d)", kind, cfg.epochs, cfg.hidden)
        model, train_log = fc.train_forecaster(dataset, cfg)
        scores = fc.evaluate_forecaster(model, dataset)

        ckpt_path = out / f"{kind}.umck"
        fc.save_forecaster(ckpt_path, model, dataset)
        log_path = out / f"{kind}_log.jsonl"
        _write_jsonl(log_path, train_log.epochs)
        metrics_path = out / f"{kind}_metrics.json"
        _write_json(metrics_path, _jsonable(scores))
        for path in (ckpt_path, log_path, metrics_path):
            manifest.add_artifact(path, base=out)

        report.forecast_rows.append({
            "model": kind, "rmse": scores["rmse_mean"],
            "r2": scores["r2_mean"], "dtw": scores["dtw_mean"]})
        log.info("%s: rmse %.4f  r2 %.4f  dtw %.4f", kind,
                 scores["rmse_mean"], scores["r2_mean"], scores["dtw_mean"])

    if len(kinds) > 1:
        cmp_json = out / "comparison.json"
        cmp_json.write_text(report.to_json() + "\n")
        cmp_txt = out / "comparison.txt"
        cmp_txt.write_text(report.to_text())
        manifest.add_artifact(cmp_json, base=out)
        manifest.add_artifact(cmp_txt, base=out)

    manifest.write(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# forecast


def _latest_windows(records, input_len: int, input_features):
    """Per tract: the most recent contiguous input_len-year block."""
    idx = [ingest.FEATURE_NAMES.index(n) for n in input_features]
    by_tract = {}
    for rec in records:
        by_tract.setdefault(rec.tract_id, []).append(rec)
    windows, skipped = [], []
    for tract_id in sorted(by_tract):
        rows = sorted(by_tract[tract_id], key=lambda r: r.year)
        run = [rows[-1]]
        for rec in reversed(rows[:-1]):
            if rec.year == run[0].year - 1:
                run.insert(0, rec)
            else:
                break
        if len(run) < input_len:
            skipped.append(tract_id)
            continue
        run = run[-input_len:]
        x = np.stack([r.features[idx] for r in run])
        windows.append((tract_id, run[-1].year, x))
    return windows, skipped


def cmd_forecast(args) -> int:
    config, seed, out = _setup(args)
    manifest = start_manifest("forecast", seed, config)
    manifest.add_input("checkpoint", args.checkpoint)
    manifest.add_input("data", args.data)

    model, meta = fc.load_forecaster(args.checkpoint)
    records, _ = ingest.load_csv(args.data)
    scaler = meta["scaler"]
    cfg = model.cfg

    windows, skipped = _latest_windows(records, cfg.input_len,
                                       meta["input_features"])
    if not windows:
        raise DataError(f"{args.data}: no tract has {cfg.input_len} "
                        "contiguous years to forecast from")
    for tract_id in skipped:
        log.warning("skipping %s: fewer than %d contiguous years",
                    tract_id, cfg.input_len)

    x = np.stack([w[2] for w in windows])
    x_std = (x - scaler["input_mu"]) / scaler["input_sigma"]
    pred_std, attn = fc.predict(model, x_std)
    pred_raw = pred_std * scaler["target_sigma"] + scaler["target_mu"]

    forecast_path = out / "forecasts.csv"
    target_features = meta["target_features"]
    with forecast_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tract_id", "year"] + list(target_features))
        for (tract_id, last_year, _), horizon_pred in zip(windows, pred_raw):
            for step, row in enumerate(horizon_pred, start=1):
                writer.writerow([tract_id, last_year + step]
                                + [f"{v:.6f}" for v in row])
    manifest.add_artifact(forecast_path, base=out)
    log.info("wrote %d forecast rows for %d tracts to %s",
             len(windows) * cfg.horizon, len(windows), forecast_path)

    if attn is not None:
        attn_path = out / "attention.csv"
        with attn_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tract_id", "step"]
                            + [f"enc_t{j}" for j in range(attn.shape[-1])])
            for (tract_id, _, _), mat in zip(windows, attn):
                for step, row in enumerate(mat):
                    writer.writerow([tract_id, step]
                                    + [f"{v:.10f}" for v in row])
        manifest.add_artifact(attn_path, base=out)

    report = {"tracts": len(windows), "skipped": skipped,
              "horizon": cfg.horizon, "model_kind": cfg.model_kind}
    _write_json(out / "forecast_report.json", report)
    manifest.add_artifact(out / "forecast_report.json", base=out)
    manifest.write(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-gan


def _standardize_conditions(conditions: np.ndarray):
    mu = conditions.mean(axis=0)
    sigma = conditions.std(axis=0)
    degenerate = sigma < 1e-12
    if degenerate.any():
        log.warning("constant condition columns %s; using unit scale",
                    np.where(degenerate)[0].tolist())
        sigma = np.where(degenerate, 1.0, sigma)
    return (conditions - mu) / sigma, mu, sigma


def _gan_config(args, config, image_size: int, latent_dim: int) -> spatialgen.GanConfig:
    return spatialgen.GanConfig(
        latent_dim=latent_dim,
        image_size=image_size,
        iterations=resolve("iterations", args.iterations, config, 2000, int),
        batch_size=resolve("batch_size", args.batch_size, config, 16, int),
        lr_g=resolve("lr_g", args.lr_g, config, 8e-5, float),
        lr_d=resolve("lr_d", args.lr_d, config, 3e-5, float),
        regularizer_kind=resolve("regularizer", args.regularizer, config, "r1"),
        gp_lambda=resolve("gp_lambda", args.gp_lambda, config, 10.0, float),
        r1_gamma=resolve("r1_gamma", args.r1_gamma, config, 10.0, float),
        path_length_weight=resolve("pl_weight", args.pl_weight, config, 2.0, float),
        snapshot_interval=resolve("snapshot_interval", args.snapshot_interval,
                                  config, 500, int),
    )


def _train_one_gan(images, conds_std, stats, cfg, seed, out_dir, manifest, base):
    out_dir.mkdir(parents=True, exist_ok=True)
    model, train_log = spatialgen.train_gan(
        images, conds_std, cfg, seed,
        snapshot_dir=out_dir / "snapshots", condition_stats=stats)
    if train_log.diverged_at >= 0:
        log.warning("training aborted at iteration %d; last finite "
                    "parameters kept", train_log.diverged_at)

    ckpt_path = out_dir / "gan.umck"
    spatialgen.save_gan(ckpt_path, model, stats)
    log_path = out_dir / "gan_log.jsonl"
    _write_jsonl(log_path, train_log.entries)

    n_prev = min(16, len(images))
    z = stream(seed, "final-grid").standard_normal((n_prev, cfg.latent_dim))
    fake = spatialgen.generate(model, conds_std[:n_prev], z,
                               stream(seed, "final-grid-noise")).data
    grid_path = out_dir / "samples_final.png"
    save_image_grid(grid_path, fake)

    for path in (ckpt_path, log_path, grid_path):
        manifest.add_artifact(path, base=base)
    return model, train_log


def cmd_train_gan(args) -> int:
    config, seed, out = _setup(args)
    manifest = start_manifest("train-gan", seed, config)

    images, conditions, _ = load_image_corpus(args.corpus)
    index_path = Path(args.corpus) / "index.json"
    feature_names = []
    if index_path.exists():
        manifest.add_input("corpus_index", index_path)
        feature_names = json.loads(index_path.read_text()).get(
            "condition_features", [])
    conds_std, mu, sigma = _standardize_conditions(conditions)
    stats = {"mu": mu, "sigma": sigma, "features": feature_names}
    image_size = images.shape[-1]

    raw_dims = resolve("latent_dim", args.latent_dim, config, "128")
    dims = [int(d) for d in str(raw_dims).split(",") if d.strip()]
    for dim in dims:
        if dim not in spatialgen.LATENT_CHOICES:
            raise DataError(f"latent dim {dim} not in "
                            f"{spatialgen.LATENT_CHOICES}")

    if len(dims) == 1:
        _train_one_gan(images, conds_std, stats,
                       _gan_config(args, config, image_size, dims[0]),
                       seed, out, manifest, base=out)
        manifest.write(out)
        return EXIT_OK

    # latent sweep: train per dim, score FID + best-match SSIM against corpus
    report = metrics.MetricsReport()
    n_eval = min(len(images), 256)
    real_feats = metrics.extract_features(images[:n_eval])
    for dim in dims:
        cfg = _gan_config(args, config, image_size, dim)
        model, _ = _train_one_gan(images, conds_std, stats, cfg, seed,
                                  out / f"ld{dim}", manifest, base=out)
        rng = stream(seed, f"sweep-eval:{dim}")
        idx = rng.integers(0, len(images), size=n_eval)
        z = rng.standard_normal((n_eval, dim))
        fake = _generate_batched(model, conds_std[idx], z,
                                 stream(seed, f"sweep-noise:{dim}"))
        fid = metrics.frechet_distance(real_feats,
                                       metrics.extract_features(fake))
        pair_ssim = float(np.mean([
            max(metrics.ssim(f, r) for r in images[:min(64, len(images))])
            for f in fake[:32]]))
        report.image_rows.append(
            {"latent_dim": dim, "fid": fid, "ssim": pair_ssim})
        log.info("latent %d: fid %.4f  best-match ssim %.4f", dim, fid, pair_ssim)

    (out / "sweep.json").write_text(report.to_json() + "\n")
    (out / "sweep.txt").write_text(report.to_text())
    manifest.add_artifact(out / "sweep.json", base=out)
    manifest.add_artifact(out / "sweep.txt", base=out)
    manifest.write(out)
    return EXIT_OK


def _generate_batched(model, conds, z, noise_rng, batch: int = 32) -> np.ndarray:
    chunks = []
    for start in range(0, len(conds), batch):
        chunk = spatialgen.generate(model, conds[start:start + batch],
                                    z[start:start + batch], noise_rng)
        chunks.append(chunk.data)
    return np.concatenate(chunks)


# ---------------------------------------------------------------------------
# generate


def _read_forecast_csv(path) -> tuple:
    """Returns (header feature names, rows of (tract_id, year, values))."""
    path = Path(path)
    if not path.is_file():
        raise OSError(f"forecast CSV not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty forecast CSV")
        if header[:2] != ["tract_id", "year"] or len(header) < 3:
            raise DataError(f"{path}: expected header tract_id,year,<features>, "
                            f"got {header}")
        features = header[2:]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: {len(row)} fields, "
                                f"expected {len(header)}")
            try:
                rows.append((row[0], int(row[1]),
                             np.array([float(v) for v in row[2:]])))
            except ValueError:
                raise DataError(f"{path}:{lineno}: unparseable numeric value")
    if not rows:
        raise DataError(f"{path}: no forecast rows")
    return features, rows


def cmd_generate(args) -> int:
    config, seed, out = _setup(args)
    manifest = start_manifest("generate", seed, config)
    manifest.add_input("checkpoint", args.checkpoint)
    manifest.add_input("forecasts", args.forecasts)

    model, meta = spatialgen.load_gan(args.checkpoint)
    features, rows = _read_forecast_csv(args.forecasts)
    stored = list(meta["scaler"]["features"])
    if stored and stored != features:
        raise CompatibilityError(
            f"forecast features {features} do not match the checkpoint's "
            f"training conditions {stored}")
    if len(features) != model.cfg.condition_dim:
        raise CompatibilityError(
            f"forecast CSV has {len(features)} feature columns; checkpoint "
            f"expects {model.cfg.condition_dim}")

    conds = np.stack([r[2] for r in rows])
    conds_std = (conds - meta["scaler"]["mu"]) / meta["scaler"]["sigma"]
    z = stream(seed, "generate").standard_normal(
        (len(rows), model.cfg.latent_dim))
    images = _generate_batched(model, conds_std, z,
                               stream(seed, "generate-noise"))

    entries = []
    for i, ((tract_id, year, _), img) in enumerate(zip(rows, images)):
        name = f"{i:04d}"
        save_image(out / f"{name}.png", img)
        entries.append({"image": f"{name}.png", "tract_id": tract_id,
                        "year": year})
    _write_json(out / "index.json", {"count": len(entries), "entries": entries})
    manifest.add_artifact(out / "index.json", base=out)
    manifest.write(out)
    log.info("rendered %d images to %s", len(entries), out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _read_forecast_table(path):
    features, rows = _read_forecast_csv(path)
    table = {(tract_id, year): values for tract_id, year, values in rows}
    if len(table) != len(rows):
        raise DataError(f"{path}: duplicate (tract_id, year) rows")
    return features, table


def _evaluate_forecasts(pred_path, ref_path) -> metrics.MetricsReport:
    pred_feats, pred = _read_forecast_table(pred_path)
    ref_feats, ref = _read_forecast_table(ref_path)
    if pred_feats != ref_feats:
        raise DataError(f"feature columns differ: {pred_feats} vs {ref_feats}")
    if set(pred) != set(ref):
        raise DataError(
            f"misaligned rows: {len(pred)} predictions vs {len(ref)} "
            f"references with {len(set(pred) & set(ref))} shared keys")
    keys = sorted(pred)
    y_pred = np.stack([pred[k] for k in keys])
    y_true = np.stack([ref[k] for k in keys])
    r2_mean, _ = metrics.r_squared(y_true, y_pred)

    by_tract = {}
    for (tract_id, year), p in pred.items():
        by_tract.setdefault(tract_id, []).append((year, p, ref[(tract_id, year)]))
    dtw_values = []
    for rows in by_tract.values():
        rows.sort()
        seq_p = np.stack([r[1] for r in rows])
        seq_t = np.stack([r[2] for r in rows])
        dtw_values.append(metrics.dtw(seq_p, seq_t))

    report = metrics.MetricsReport()
    report.forecast_rows.append({
        "model": Path(pred_path).stem,
        "rmse": metrics.rmse(y_true, y_pred),
        "r2": r2_mean,
        "dtw": float(np.mean(dtw_values)),
    })
    return report


def _load_image_dir(path) -> np.ndarray:
    from PIL import Image
    path = Path(path)
    if not path.is_dir():
        raise OSError(f"image directory not found: {path}")
    pngs = sorted(path.glob("*.png"))
    if not pngs:
        raise DataError(f"{path}: no .png files")
    out = []
    for png in pngs:
        with Image.open(png) as im:
            out.append(image_to_unit(np.asarray(im.convert("RGB"))))
    return np.stack(out)


def _evaluate_images(pred_path, ref_path) -> metrics.MetricsReport:
    pred = _load_image_dir(pred_path)
    ref = _load_image_dir(ref_path)
    if len(pred) != len(ref):
        raise DataError(f"misaligned counts: {len(pred)} generated vs "
                        f"{len(ref)} reference images")
    ssim_mean = float(np.mean([metrics.ssim(p, r) for p, r in zip(pred, ref)]))
    fid = metrics.frechet_distance(metrics.extract_features(ref),
                                   metrics.extract_features(pred))
    report = metrics.MetricsReport()
    report.image_rows.append(
        {"latent_dim": 0, "fid": fid, "ssim": ssim_mean})
    report.notes.append("latent_dim 0 = not applicable (directory comparison)")
    return report


def cmd_evaluate(args) -> int:
    config, seed, out = _setup(args)
    manifest = start_manifest("evaluate", seed, config)
    for label, src in (("predictions", args.predictions),
                       ("reference", args.reference)):
        if Path(src).is_file():
            manifest.add_input(label, src)

    mode = args.mode
    if mode == "auto":
        pred_is_dir = Path(args.predictions).is_dir()
        ref_is_dir = Path(args.reference).is_dir()
        if pred_is_dir != ref_is_dir:
            raise DataError("prediction and reference must both be CSV files "
                            "or both be image directories")
        mode = "images" if pred_is_dir else "forecasts"

    if mode == "forecasts":
        report = _evaluate_forecasts(args.predictions, args.reference)
    else:
        report = _evaluate_images(args.predictions, args.reference)

    payload = {
        "report": json.loads(report.to_json()),
        "config_digest": manifest.config_digest,
        "input_digests": manifest.input_digests,
    }
    _write_json(out / "report.json", payload)
    digest_lines = "".join(
        f"input {label}: sha256 {digest}\n"
        for label, digest in manifest.input_digests.items())
    (out / "report.txt").write_text(
        report.to_text() + "\n" + digest_lines
        + f"config: sha256 {manifest.config_digest}\n")
    manifest.add_artifact(out / "report.json", base=out)
    manifest.add_artifact(out / "report.txt", base=out)
    manifest.write(out)
    print(report.to_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="urbanmorph",
        description="Demographics-to-travel forecasting and "
                    "condition-driven image synthesis pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="build a synthetic tract panel + corpus")
    _add_common(p)
    p.add_argument("--n-tracts", type=int)
    p.add_argument("--start-year", type=int)
    p.add_argument("--end-year", type=int)
    p.add_argument("--travel-noise", type=float)
    p.add_argument("--image-size", type=int)
    p.add_argument("--shock-year", type=int)
    p.add_argument("--max-images", type=int,
                   help="cap corpus images; 0 skips, negative means all")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-forecaster", help="fit temporal models on a CSV")
    _add_common(p)
    p.add_argument("--data", required=True, help="tract panel CSV")
    p.add_argument("--models", help="comma list: rnn,lstm,lstm_attn,tft")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--input-len", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--boundary-year", type=int)
    p.add_argument("--iqr-multiplier", type=float)
    p.set_defaults(func=cmd_train_forecaster)

    p = sub.add_parser("forecast", help="roll a trained forecaster forward")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="tract panel CSV")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("train-gan", help="fit the conditional image model")
    _add_common(p)
    p.add_argument("--corpus", required=True, help="paired image directory")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--latent-dim",
                   help="128, 256 or 512; a comma list runs a sweep")
    p.add_argument("--lr-g", type=float)
    p.add_argument("--lr-d", type=float)
    p.add_argument("--regularizer", choices=["r1", "wgan_gp"])
    p.add_argument("--gp-lambda", type=float)
    p.add_argument("--r1-gamma", type=float)
    p.add_argument("--pl-weight", type=float)
    p.add_argument("--snapshot-interval", type=int)
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("generate", help="render images from forecast rows")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="trained image model")
    p.add_argument("--forecasts", required=True, help="forecast CSV")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score predictions against references")
    _add_common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--mode", choices=["auto", "forecasts", "images"],
                   default="auto")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (ingest.IngestError, CorpusError, DataError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except (CompatibilityError, CheckpointError, ShapeMismatch) as exc:
        log.error("%s", exc)
        return EXIT_COMPAT


if __name__ == "__main__":
    sys.exit(main())
