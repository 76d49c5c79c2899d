"""Release gate: ten product-level criteria, one test per criterion.

Each test prints a single ``[criterion NN] PASS/FAIL`` line with the measured
numbers before asserting, so a full run reads as a ten-line scorecard:

    pytest tests/test_acceptance.py -v -s

The slow criteria (5-8) train real models on the built-in synthetic world;
the full gate takes roughly fifteen minutes on a desktop CPU.
"""
from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from urbanmorph import cli
from urbanmorph import forecaster as fc
from urbanmorph import ingest, metrics, spatialgen as sg, synthdata
from urbanmorph.gradcheck import grad_check
from urbanmorph.imagedir import load_image_corpus
from urbanmorph.manifest import log_digest
from urbanmorph.seeds import stream
from urbanmorph.tensor import Tensor
import urbanmorph.tensor as T


def report(number: int, ok: bool, detail: str) -> None:
    print(f"\n[criterion {number:02d}] {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"criterion {number:02d}: {detail}"


def sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# shared synthetic worlds


@pytest.fixture(scope="module")
def oracle_split():
    """200-tract panel with known response and noise floor (criteria 5, 6)."""
    world = synthdata.WorldConfig(n_tracts=200, start_year=2008,
                                  travel_noise=0.1, seed=0)
    records, truth = synthdata.generate_tracts(world)
    dataset = ingest.chronological_split(records)
    floor = float(np.mean(truth.noise_std / dataset.target_sigma))
    return dataset, floor


def build_corpus(tmp_path_factory, label: str, world: synthdata.WorldConfig,
                 records):
    out = tmp_path_factory.mktemp(label)
    synthdata.generate_image_corpus(records, world, out)
    images, conditions, _ = load_image_corpus(out)
    sigma = conditions.std(axis=0)
    sigma = np.where(sigma < 1e-12, 1.0, sigma)
    conds_std = (conditions - conditions.mean(axis=0)) / sigma
    return images, conds_std


# ---------------------------------------------------------------------------
# criterion 1: recorded gradients match central differences on every block


def tiny_gan(seed: int) -> sg.GanModel:
    cfg = sg.GanConfig(latent_dim=8, image_size=8, base_channels=8,
                       fusion_dim=8, tab_hidden=8)
    return sg.GanModel.initialise(cfg, stream(seed, "init"))


def lstm_block_case(rng):
    b, d, m = 2, 3, 4
    x = Tensor(rng.standard_normal((b, d)))
    h = Tensor(rng.standard_normal((b, m)))
    c = Tensor(rng.standard_normal((b, m)))
    leaves = {
        "wx": Tensor(rng.standard_normal((d, 4 * m)) * 0.4),
        "wh": Tensor(rng.standard_normal((m, 4 * m)) * 0.4),
        "b": Tensor(rng.standard_normal(4 * m) * 0.4),
    }

    def run(p):
        h2, c2 = fc.lstm_cell_step(x, h, c, p["wx"], p["wh"], p["b"])
        return T.add(T.sum_(h2), T.sum_(c2))

    return leaves, run


def attention_block_case(rng):
    b, t, m = 2, 3, 8
    q = Tensor(rng.standard_normal((b, t, m)))
    kv = Tensor(rng.standard_normal((b, t, m)))
    leaves = {n: Tensor(rng.standard_normal((m, m)) * 0.4)
              for n in ("wq", "wk", "wv", "wo")}

    def run(p):
        out, _ = fc.multi_head_attention(q, kv, kv, p["wq"], p["wk"],
                                         p["wv"], p["wo"], heads=2)
        return T.sum_(out)

    return leaves, run


def ffn_block_case(rng):
    b, m, f, k = 2, 4, 6, 3
    h = Tensor(rng.standard_normal((b, m)))
    leaves = {
        "ffn.w1": Tensor(rng.standard_normal((m, f)) * 0.4),
        "ffn.b1": Tensor(rng.standard_normal(f) * 0.4),
        "ffn.w2": Tensor(rng.standard_normal((f, f)) * 0.4),
        "ffn.b2": Tensor(rng.standard_normal(f) * 0.4),
        "ffn.wout": Tensor(rng.standard_normal((f, k)) * 0.4),
        "ffn.bout": Tensor(rng.standard_normal(k) * 0.4),
    }

    def run(p):
        return T.sum_(fc.ffn_head(h, p))

    return leaves, run


def encoder_block_case(rng):
    seed = int(rng.integers(0, 2**31))
    model = tiny_gan(seed)
    x = rng.standard_normal((2, 5))
    z = rng.standard_normal((2, model.cfg.latent_dim))
    leaves = {n: model.params[n] for n in
              ("enc.w1", "enc.b1", "enc.w2", "enc.b2")}

    def run(_):
        return T.sum_(sg.encode_condition(model, x, z))

    return leaves, run


def generator_block_case(rng):
    seed = int(rng.integers(0, 2**31))
    model = tiny_gan(seed)
    cfg = model.cfg
    w = Tensor(rng.standard_normal((2, cfg.latent_dim)))
    noises = sg.draw_block_noises(cfg, 2, rng)
    leaves = {n: model.params[n] for n in
              ("gen.const", "gen.block0.conv.w", "gen.block0.conv.b",
               "gen.block0.alpha", "gen.block0.adain.w",
               "gen.block0.adain.b", "gen.rgb.w")}

    def run(_):
        return T.sum_(sg.generate_from_w(model, w, noises))

    return leaves, run


def discriminator_block_case(rng):
    seed = int(rng.integers(0, 2**31))
    model = tiny_gan(seed)
    images = rng.uniform(-1, 1, (3, 3, 8, 8))
    x = rng.standard_normal((3, 5))
    names = [n for n in model.params if n.startswith("disc.")]

    def run(_):
        return T.sum_(sg.score(model, images, x))

    return {n: model.params[n] for n in names}, run


def test_criterion_01_block_gradients_match_finite_differences():
    cases = {
        "lstm_cell": lstm_block_case,
        "attention": attention_block_case,
        "ffn": ffn_block_case,
        "condition_encoder": encoder_block_case,
        "generator": generator_block_case,
        "discriminator": discriminator_block_case,
    }
    t0 = time.time()
    worst = {}
    for name, case in cases.items():
        errs = []
        for point in range(10):
            rng = np.random.default_rng(900 + point)
            leaves, run = case(rng)
            names = sorted(leaves)
            leaf = leaves[names[point % len(names)]]
            # eps small enough that normalization-layer curvature does not
            # dominate the central-difference truncation term
            errs.append(grad_check(lambda t, _r=run, _p=leaves: _r(_p),
                                   leaf, eps=1e-6))
        worst[name] = max(errs)
    elapsed = time.time() - t0
    detail = (", ".join(f"{k} {v:.2e}" for k, v in worst.items())
              + f"; {elapsed:.0f}s")
    report(1, max(worst.values()) < 1e-4 and elapsed < 120, detail)


# ---------------------------------------------------------------------------
# criterion 2: warping distance equals exhaustive path enumeration


def exhaustive_alignment_cost(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum L1 alignment cost over every monotone path, by recursion."""
    a = np.atleast_2d(a.T).T
    b = np.atleast_2d(b.T).T
    n, m = len(a), len(b)
    best = [np.inf]

    def walk(i, j, total):
        total += np.abs(a[i] - b[j]).sum()
        if total >= best[0]:
            return
        if i == n - 1 and j == m - 1:
            best[0] = total
            return
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, total)
        if i + 1 < n:
            walk(i + 1, j, total)
        if j + 1 < m:
            walk(i, j + 1, total)

    walk(0, 0, 0.0)
    return best[0]


def test_criterion_02_warping_distance_is_exact():
    # integer-valued sequences keep both summation orders exact in floats,
    # which is what makes bit-for-bit equality a meaningful check
    rng = np.random.default_rng(1234)
    t0 = time.time()
    checked = 0
    for case in range(200):
        n, m = rng.integers(1, 7, size=2)
        d = int(rng.integers(1, 4))
        a = rng.integers(-8, 9, size=(n, d)).astype(np.float64)
        b = rng.integers(-8, 9, size=(m, d)).astype(np.float64)
        got = metrics.dtw(a, b)
        want = exhaustive_alignment_cost(a, b)
        assert got == want, f"pair {case}: {got} != {want}"
        checked += 1
    elapsed = time.time() - t0
    report(2, checked == 200 and elapsed < 10,
           f"200 pairs exactly equal; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: metric identities


def test_criterion_03_metric_identities():
    rng = np.random.default_rng(7)
    y = rng.standard_normal((50, 5)) * 3 + 1
    rmse_same = metrics.rmse(y, y)

    r2_perfect, _ = metrics.r_squared(y, y)
    mean_pred = np.broadcast_to(y.mean(axis=0), y.shape)
    r2_mean, _ = metrics.r_squared(y, mean_pred)

    img = rng.uniform(-1, 1, (3, 32, 32))
    ssim_same = metrics.ssim(img, img)

    feats = rng.standard_normal((64, 8))
    fd_same = metrics.frechet_distance(feats, feats)

    a = rng.standard_normal((400, 1)) * 1.7 + 0.3
    b = rng.standard_normal((400, 1)) * 0.9 - 1.1
    fd_1d = metrics.frechet_distance(a, b)
    closed = (a.mean() - b.mean()) ** 2 + (a.std(ddof=1) - b.std(ddof=1)) ** 2

    checks = {
        "rmse(y,y)=0": rmse_same == 0.0,
        "r2(perfect)=1": abs(r2_perfect - 1.0) < 1e-12,
        "r2(mean)=0": abs(r2_mean) < 1e-12,
        "ssim(I,I)=1": abs(ssim_same - 1.0) < 1e-9,
        "frechet(X,X)=0": abs(fd_same) < 1e-6,
        "frechet 1-D closed form": abs(fd_1d - closed) < 1e-10,
    }
    failed = [k for k, ok in checks.items() if not ok]
    report(3, not failed,
           "all six identities hold" if not failed else f"failed: {failed}")


# ---------------------------------------------------------------------------
# criterion 4: loss-formula spot values


def test_criterion_04_loss_spot_values():
    half = fc.smooth_l1(Tensor(np.full((4, 3), 0.5)), Tensor(np.zeros((4, 3))))
    two = fc.smooth_l1(Tensor(np.full((4, 3), 2.0)), Tensor(np.zeros((4, 3))))

    model = tiny_gan(11)
    model.params["disc.out.w"].data[:] = 0.0
    model.params["disc.out.b"].data[:] = 0.0
    rng = np.random.default_rng(3)
    real = rng.uniform(-1, 1, (4, 3, 8, 8))
    fake = rng.uniform(-1, 1, (4, 3, 8, 8))
    x = rng.standard_normal((4, 5))
    d_loss = sg.loss_discriminator(model, real, fake, x)

    v = rng.standard_normal((3, 8, 8))
    v /= np.linalg.norm(v)

    def linear_score(scale):
        direction = Tensor(v * scale)

        def score_fn(_model, images, _x):
            return T.sum_(T.mul(images, direction), axis=(1, 2, 3))

        return score_fn

    u_rng = np.random.default_rng(5)
    gp_unit = sg.gradient_penalty(model, real, fake, x, lam=10.0,
                                  u_rng=u_rng, score_fn=linear_score(1.0))
    gp_norm3 = sg.gradient_penalty(model, real, fake, x, lam=10.0,
                                   u_rng=u_rng, score_fn=linear_score(3.0))

    checks = {
        "smooth-L1(0.5)=0.125": abs(float(half.data) - 0.125) < 1e-12,
        "smooth-L1(2)=1.5": abs(float(two.data) - 1.5) < 1e-12,
        "D-loss at 0.5 = 2 log 0.5":
            abs(float(d_loss.data) - 2 * np.log(0.5)) < 1e-6,
        "penalty(unit-norm)=0": abs(float(gp_unit.data)) < 1e-6,
        "penalty(norm 3)=4*lambda":
            abs(float(gp_norm3.data) - 40.0) < 1e-6,
    }
    failed = [k for k, ok in checks.items() if not ok]
    report(4, not failed,
           "all five spot values exact" if not failed else f"failed: {failed}")


# ---------------------------------------------------------------------------
# criterion 5: forecaster learns the oracle response


def test_criterion_05_forecaster_learns_oracle(oracle_split):
    dataset, floor = oracle_split
    t0 = time.time()
    r2s, ratios = [], []
    for seed in range(5):
        model, _ = fc.train_forecaster(dataset, fc.default_config("tft",
                                                                  seed=seed))
        scores = fc.evaluate_forecaster(model, dataset)
        r2s.append(scores["r2_mean"])
        ratios.append(scores["rmse_std_units"] / floor)
    elapsed = time.time() - t0
    r2_med = float(np.median(r2s))
    ratio_med = float(np.median(ratios))
    report(5, r2_med >= 0.85 and ratio_med <= 1.5 and elapsed < 600,
           f"median held-out R2 {r2_med:.4f} (need >= 0.85), RMSE at "
           f"{ratio_med:.2f}x noise floor (need <= 1.5x); {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 6: architecture ordering under a fixed budget


def test_criterion_06_model_ordering(oracle_split):
    dataset, _ = oracle_split
    t0 = time.time()
    medians = {}
    for kind in ("tft", "lstm_attn", "rnn"):
        vals = []
        for seed in range(5):
            cfg = fc.default_config(kind, seed=seed, hidden=64, layers=2,
                                    epochs=30)
            model, _ = fc.train_forecaster(dataset, cfg)
            vals.append(fc.evaluate_forecaster(model, dataset)
                        ["rmse_std_units"])
        medians[kind] = float(np.median(vals))
    elapsed = time.time() - t0
    ok = medians["tft"] <= medians["lstm_attn"] <= medians["rnn"]
    report(6, ok,
           f"median RMSE tft {medians['tft']:.4f} <= lstm_attn "
           f"{medians['lstm_attn']:.4f} <= rnn {medians['rnn']:.4f}; "
           f"{elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 7: adversarial pair memorises a tiny image set


def test_criterion_07_gan_overfits_eight_images(tmp_path_factory):
    world = synthdata.WorldConfig(n_tracts=8, travel_noise=0.1,
                                  image_size=32, seed=1)
    records, _ = synthdata.generate_tracts(world)
    records = [r for r in records if r.year == 2020][:8]
    images, conds_std = build_corpus(tmp_path_factory, "overfit",
                                     world, records)

    cfg = sg.GanConfig(latent_dim=128, image_size=32, batch_size=8,
                       iterations=2000, lr_g=2e-3, lr_d=1e-3,
                       regularizer_kind="r1", r1_gamma=1.0, r1_interval=16,
                       path_length_interval=10**9, snapshot_interval=10**9)
    t0 = time.time()
    model, train_log = sg.train_gan(images, conds_std, cfg, seed=0)
    elapsed = time.time() - t0

    finite = all(np.isfinite([e["loss_d"], e["loss_g"]]).all()
                 for e in train_log.entries)
    in_range = all(0.0 < e["d_real"] < 1.0 and 0.0 < e["d_fake"] < 1.0
                   for e in train_log.entries)
    z = stream(0, "overfit-eval").standard_normal((8, cfg.latent_dim))
    fake = sg.generate(model, conds_std, z, stream(0, "overfit-noise")).data
    best = [max(metrics.ssim(f, r) for r in images) for f in fake]
    report(7,
           min(best) >= 0.6 and finite and in_range
           and train_log.diverged_at < 0 and elapsed < 900,
           f"best-match SSIM min {min(best):.3f} (need >= 0.6 on all 8), "
           f"losses finite: {finite}, D in (0,1): {in_range}; "
           f"{elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 8: larger latent space scores no worse on feature distance


def test_criterion_08_latent_sweep_direction(tmp_path_factory):
    world = synthdata.WorldConfig(n_tracts=32, start_year=2012, end_year=2019,
                                  travel_noise=0.1, image_size=32, seed=2)
    records, _ = synthdata.generate_tracts(world)
    images, conds_std = build_corpus(tmp_path_factory, "sweep",
                                     world, records)
    assert len(images) == 256
    real_feats = metrics.extract_features(images)

    def run_fid(dim: int, seed: int) -> float:
        cfg = sg.GanConfig(latent_dim=dim, image_size=32, batch_size=8,
                           iterations=200, lr_g=2e-4, lr_d=1e-4,
                           regularizer_kind="r1", r1_gamma=10.0,
                           r1_interval=16, path_length_interval=10**9,
                           snapshot_interval=10**9)
        model, _ = sg.train_gan(images, conds_std, cfg, seed=seed)
        z = stream(seed, f"sweep-eval:{dim}").standard_normal((256, dim))
        noise_rng = stream(seed, f"sweep-noise:{dim}")
        fakes = [sg.generate(model, conds_std[s:s + 32], z[s:s + 32],
                             noise_rng).data
                 for s in range(0, 256, 32)]
        return metrics.frechet_distance(
            real_feats, metrics.extract_features(np.concatenate(fakes)))

    t0 = time.time()
    fid_small = [run_fid(128, seed) for seed in range(3)]
    fid_large = [run_fid(512, seed) for seed in range(3)]
    elapsed = time.time() - t0
    med_small = float(np.median(fid_small))
    med_large = float(np.median(fid_large))
    report(8, med_large <= med_small,
           f"median FID latent 512: {med_large:.4f} <= latent 128: "
           f"{med_small:.4f} at equal iterations; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 9: bit-identical training runs


def test_criterion_09_training_is_deterministic(tmp_path_factory):
    world_dir = tmp_path_factory.mktemp("det-world")
    code = cli.main(["synth", "--out", str(world_dir), "--seed", "9",
                     "--n-tracts", "8", "--start-year", "2012",
                     "--end-year", "2021", "--image-size", "16",
                     "--max-images", "16", "--log-level", "warning"])
    assert code == 0

    def forecaster_run(out: Path):
        assert cli.main(["train-forecaster", "--data",
                         str(world_dir / "data.csv"), "--out", str(out),
                         "--seed", "4", "--models", "tft", "--epochs", "2",
                         "--hidden", "16", "--layers", "1",
                         "--log-level", "warning"]) == 0
        entries = [json.loads(line)
                   for line in (out / "tft_log.jsonl").open()]
        return sha(out / "tft.umck"), log_digest(entries)

    def gan_run(out: Path):
        assert cli.main(["train-gan", "--corpus", str(world_dir / "images"),
                         "--out", str(out), "--seed", "4",
                         "--iterations", "3", "--batch-size", "4",
                         "--latent-dim", "128", "--snapshot-interval", "1000",
                         "--log-level", "warning"]) == 0
        entries = [json.loads(line)
                   for line in (out / "gan_log.jsonl").open()]
        return sha(out / "gan.umck"), log_digest(entries)

    f1 = forecaster_run(tmp_path_factory.mktemp("det-f1"))
    f2 = forecaster_run(tmp_path_factory.mktemp("det-f2"))
    g1 = gan_run(tmp_path_factory.mktemp("det-g1"))
    g2 = gan_run(tmp_path_factory.mktemp("det-g2"))
    report(9, f1 == f2 and g1 == g2,
           f"forecaster ckpt+log digests equal: {f1 == f2}; "
           f"gan ckpt+log digests equal: {g1 == g2}")


# ---------------------------------------------------------------------------
# criterion 10: one-config pipeline runs end to end


def test_criterion_10_pipeline_end_to_end(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    conf = root / "run.conf"
    conf.write_text(
        "seed = 21\n"
        "n_tracts = 6\n"
        "start_year = 2012\n"
        "end_year = 2021\n"
        "image_size = 16\n"
        "max_images = 12\n"
        "models = tft\n"
        "epochs = 2\n"
        "hidden = 16\n"
        "layers = 1\n"
        "iterations = 3\n"
        "batch_size = 4\n"
        "latent_dim = 128\n"
        "snapshot_interval = 1000\n")
    base = ["--config", str(conf), "--log-level", "warning"]

    steps = [
        ["synth", "--out", str(root / "world")],
        ["train-forecaster", "--data", str(root / "world" / "data.csv"),
         "--out", str(root / "fc")],
        ["forecast", "--checkpoint", str(root / "fc" / "tft.umck"),
         "--data", str(root / "world" / "data.csv"),
         "--out", str(root / "pred")],
        ["train-gan", "--corpus", str(root / "world" / "images"),
         "--out", str(root / "gan")],
        ["generate", "--checkpoint", str(root / "gan" / "gan.umck"),
         "--forecasts", str(root / "pred" / "forecasts.csv"),
         "--out", str(root / "gen")],
    ]
    codes = [cli.main(step + base) for step in steps]

    with (root / "pred" / "forecasts.csv").open() as fh:
        n_rows = sum(1 for _ in fh) - 1
    n_pngs = len(list((root / "gen").glob("*.png")))
    report(10, codes == [0] * 5 and n_pngs == n_rows and n_rows > 0,
           f"exit codes {codes}, {n_pngs} rendered images for "
           f"{n_rows} forecast rows")
