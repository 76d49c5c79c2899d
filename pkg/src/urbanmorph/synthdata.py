"""Synthetic tract panels with a known demographics-to-travel response.

The corpus exists so model quality can be judged against ground truth:
demographics evolve as per-tract random walks with drift, travel features
are a fixed lagged response g(demographics) plus Gaussian noise of known
scale, and images are rendered procedurally so pixel statistics encode
the conditioning values.  The response constants, reference scalers and
per-feature noise floors ship with the corpus.

Design constraints baked in:
  - lag-3 dominant response, so every forecast target year has its main
    driver inside a 3-year input window;
  - walk innovations much smaller than travel noise, so the exported
    noise floor is the effective prediction floor;
  - value headroom >= 4 sigma above zero, so positivity clamps are rare
    enough (<0.1%) not to distort the floor.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .ingest import FEATURE_NAMES, TRAVEL_FEATURES, TractRecord
from .seeds import stream

# constants of the travel response; fixed across worlds so learnability
# does not swing with the corpus seed
RELATION_SEED = 424242
LAG_COUNT = 3

DEMO_CENTER = np.array([5000.0, 16.0, 22.0, 16.0, 55.0, 45.0, 15.0, 35.0, 60000.0])
DEMO_SCALE = np.array([2500.0, 5.0, 5.0, 6.0, 22.0, 22.0, 9.0, 15.0, 22000.0])
TRAVEL_CENTER = np.array([30.0, 2600.0, 420.0, 980.0, 170.0])
TRAVEL_SCALE = np.array([6.0, 600.0, 90.0, 220.0, 35.0])

ROAD_COLOR = np.array([58, 58, 60], dtype=np.uint8)
_VEGETATION = np.array([44.0, 86.0, 40.0])
_ROOF = np.array([126.0, 118.0, 110.0])


def _relation_matrices():
    rng = np.random.default_rng(RELATION_SEED)

    def rows(norm):
        a = rng.normal(size=(5, 9))
        return a * (norm / np.linalg.norm(a, axis=1, keepdims=True))

    return rows(0.22), rows(1.0), rows(0.72)


@dataclass
class GroundTruth:
    """The exact response used to synthesise travel features."""

    a_lag1: np.ndarray
    a_lag2: np.ndarray
    a_lag3: np.ndarray
    tanh_gain: float
    demo_center: np.ndarray
    demo_scale: np.ndarray
    travel_center: np.ndarray
    travel_scale: np.ndarray
    travel_noise: float

    @property
    def noise_std(self) -> np.ndarray:
        """Per-feature additive noise floor in raw units."""
        return self.travel_noise * self.travel_scale

    def signal(self, demo_lag1, demo_lag2, demo_lag3) -> np.ndarray:
        """Standardized-space response for one tract-year."""
        phi1 = (demo_lag1 - self.demo_center) / self.demo_scale
        phi2 = (demo_lag2 - self.demo_center) / self.demo_scale
        phi3 = (demo_lag3 - self.demo_center) / self.demo_scale
        return (self.a_lag1 @ phi1
                + self.tanh_gain * np.tanh(self.a_lag2 @ phi2)
                + self.a_lag3 @ phi3)

    def predict_travel(self, demo_lag1, demo_lag2, demo_lag3) -> np.ndarray:
        """Noise-free travel response in raw units."""
        return self.travel_center + self.travel_scale * self.signal(
            demo_lag1, demo_lag2, demo_lag3)

    def to_json(self) -> str:
        payload = {
            "a_lag1": self.a_lag1.tolist(), "a_lag2": self.a_lag2.tolist(),
            "a_lag3": self.a_lag3.tolist(), "tanh_gain": self.tanh_gain,
            "demo_center": self.demo_center.tolist(),
            "demo_scale": self.demo_scale.tolist(),
            "travel_center": self.travel_center.tolist(),
            "travel_scale": self.travel_scale.tolist(),
            "travel_noise": self.travel_noise,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        d = json.loads(text)
        return cls(
            a_lag1=np.array(d["a_lag1"]), a_lag2=np.array(d["a_lag2"]),
            a_lag3=np.array(d["a_lag3"]), tanh_gain=d["tanh_gain"],
            demo_center=np.array(d["demo_center"]), demo_scale=np.array(d["demo_scale"]),
            travel_center=np.array(d["travel_center"]),
            travel_scale=np.array(d["travel_scale"]), travel_noise=d["travel_noise"])


@dataclass
class WorldConfig:
    n_tracts: int = 200
    start_year: int = 2012
    end_year: int = 2023
    seed: int = 0
    travel_noise: float = 0.1
    image_size: int = 32
    # optional regime break: from this year on, population drops 10% and
    # income 5%, and travel responds through the lag structure
    shock_year: int | None = None


def make_ground_truth(travel_noise: float) -> GroundTruth:
    a1, a2, a3 = _relation_matrices()
    return GroundTruth(
        a_lag1=a1, a_lag2=a2, a_lag3=a3, tanh_gain=0.3,
        demo_center=DEMO_CENTER.copy(), demo_scale=DEMO_SCALE.copy(),
        travel_center=TRAVEL_CENTER.copy(), travel_scale=TRAVEL_SCALE.copy(),
        travel_noise=travel_noise)


def _walk_demographics(rng, n_years: int) -> np.ndarray:
    """(n_years, 9) demographic trajectory for one tract."""
    pop = rng.uniform(1500, 9000)
    pop_drift = rng.uniform(-0.005, 0.015)
    income = rng.uniform(25000, 95000)
    income_drift = rng.uniform(0.0, 0.02)
    pct25 = rng.uniform(8, 25)
    pct35 = rng.uniform(15, 30)
    pct65 = rng.uniform(8, 25)
    white = rng.uniform(20, 90)
    black_frac = rng.uniform(0.2, 0.7)
    college = rng.uniform(10, 60)
    pct_drifts = rng.uniform(-0.15, 0.15, size=5)

    out = np.empty((n_years, 9))
    for i in range(n_years):
        nonwhite = 100.0 - white
        out[i] = [pop, pct25, pct35, pct65, white, nonwhite,
                  black_frac * nonwhite, college, income]
        pop *= 1.0 + pop_drift + rng.normal(0, 0.004)
        income *= 1.0 + income_drift + rng.normal(0, 0.006)
        pct25 = np.clip(pct25 + pct_drifts[0] + rng.normal(0, 0.12), 0.5, 99.5)
        pct35 = np.clip(pct35 + pct_drifts[1] + rng.normal(0, 0.12), 0.5, 99.5)
        pct65 = np.clip(pct65 + pct_drifts[2] + rng.normal(0, 0.12), 0.5, 99.5)
        white = np.clip(white + pct_drifts[3] + rng.normal(0, 0.12), 0.5, 99.5)
        college = np.clip(college + pct_drifts[4] + rng.normal(0, 0.12), 0.5, 99.5)
    return out


def generate_tracts(cfg: WorldConfig):
    """Synthesise the panel; returns (records, GroundTruth).

    Demographics warm up LAG_COUNT years before start_year so every
    emitted year has its full lag history.
    """
    truth = make_ground_truth(cfg.travel_noise)
    years = list(range(cfg.start_year - LAG_COUNT, cfg.end_year + 1))
    records = []
    for t in range(cfg.n_tracts):
        rng = stream(cfg.seed, f"world:{t}")
        demo = _walk_demographics(rng, len(years))
        if cfg.shock_year is not None:
            hit = np.array(years) >= cfg.shock_year
            demo[hit, 0] *= 0.90   # pop
            demo[hit, 8] *= 0.95   # income
        tract_id = f"synth{t:04d}"
        for i, year in enumerate(years):
            if year < cfg.start_year:
                continue
            signal = truth.signal(demo[i - 1], demo[i - 2], demo[i - 3])
            noise = rng.normal(0, 1, size=5) if cfg.travel_noise else np.zeros(5)
            travel = truth.travel_center + truth.travel_scale * (
                signal + cfg.travel_noise * noise)
            travel = np.maximum(travel, 1.0)  # positivity clamp, rare by design
            features = np.concatenate([demo[i], travel])
            records.append(TractRecord(tract_id, year, features))
    return records, truth


# ---------------------------------------------------------------------------
# procedural images


def render_image(features: np.ndarray, rng, size: int = 32) -> np.ndarray:
    """Render one (size, size, 3) uint8 tile from a record's features.

    Vegetation background; built blocks whose count is monotone in
    population; horizontal/vertical roads of the exact ROAD_COLOR whose
    pixel count is monotone in auto_users (nested placements, so a larger
    value can only add road pixels).  Zero population renders near-empty.
    """
    img = _VEGETATION + rng.uniform(-12, 12, size=(size, size, 3))
    pop = features[FEATURE_NAMES.index("pop")]
    auto = features[FEATURE_NAMES.index("auto_users")]

    cell = 4
    n_cells = (size // cell) ** 2
    if pop > 0:
        coverage = min(0.15 + 0.5 * pop / 8000.0, 0.9)
        n_built = int(round(coverage * n_cells))
        order = rng.permutation(n_cells)
        per_row = size // cell
        for idx in order[:n_built]:
            r, c = (int(idx) // per_row) * cell, (int(idx) % per_row) * cell
            shade = rng.uniform(-18, 18)
            img[r:r + cell - 1, c:c + cell - 1] = _ROOF + shade

        road_rows = rng.permutation(np.arange(1, size, 3))
        road_cols = rng.permutation(np.arange(2, size, 3))
        strength = max(auto, 0.0) / 4500.0 * 6.0
        n_roads = min(int(strength) + 1, len(road_rows) + len(road_cols))
        frac = min(strength + 1 - n_roads, 1.0)
        lanes = []  # (orientation, position), alternating for a grid look
        for i in range(n_roads + 1):
            if i % 2 == 0 and i // 2 < len(road_rows):
                lanes.append(("h", int(road_rows[i // 2])))
            elif i // 2 < len(road_cols):
                lanes.append(("v", int(road_cols[i // 2])))
        for orientation, pos in lanes[:n_roads]:
            if orientation == "h":
                img[pos, :] = ROAD_COLOR
            else:
                img[:, pos] = ROAD_COLOR
        if frac > 0 and n_roads < len(lanes):
            orientation, pos = lanes[n_roads]
            length = int(round(frac * size))
            if orientation == "h":
                img[pos, :length] = ROAD_COLOR
            else:
                img[:length, pos] = ROAD_COLOR
    return np.clip(img, 0, 255).astype(np.uint8)


def road_pixel_count(img: np.ndarray) -> int:
    return int(np.all(img == ROAD_COLOR, axis=-1).sum())


def generate_image_corpus(records, cfg: WorldConfig, out_dir) -> dict:
    """Write NNNN.png + NNNN.cond pairs and an index.json manifest.

    Conditions are the record's 5 travel features in raw units, one
    comma-separated line.  Rendering draws from a per-record stream, so
    any subset regenerates byte-identically.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    travel_idx = [FEATURE_NAMES.index(n) for n in TRAVEL_FEATURES]
    for n, rec in enumerate(records):
        rng = stream(cfg.seed, f"image:{rec.tract_id}:{rec.year}")
        img = render_image(rec.features, rng, cfg.image_size)
        name = f"{n:04d}"
        Image.fromarray(img).save(out_dir / f"{name}.png")
        cond = ",".join(f"{rec.features[i]:.6f}" for i in travel_idx)
        (out_dir / f"{name}.cond").write_text(cond + "\n")
        entries.append({"image": f"{name}.png", "cond": f"{name}.cond",
                        "tract_id": rec.tract_id, "year": rec.year})
    manifest = {
        "count": len(entries), "image_size": cfg.image_size,
        "condition_features": list(TRAVEL_FEATURES), "seed": cfg.seed,
        "entries": entries,
    }
    (out_dir / "index.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def noiseless_twin(cfg: WorldConfig) -> WorldConfig:
    return replace(cfg, travel_noise=0.0)
