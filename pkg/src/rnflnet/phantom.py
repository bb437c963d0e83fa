"""Synthetic optic-disc phantoms with known ground-truth thickness.

Each rendered eye is a grayscale frame containing a bright disc annulus
with a paler central cup, a striated band around the disc, a handful of
dark vessel arcs, a smooth illumination ramp, and optional Gaussian
noise. Ground truth enters the image through two redundant channels:

- the cup diameter grows as truth falls (rim thinning), and
- the striation band's sine-wave contrast is affine in truth:
  amplitude = CONTRAST_OFFSET + CONTRAST_SLOPE * truth_um,

so a noiseless render can be inverted in closed form back to truth (a
least-squares fit of the band against [1, x, y, sin, cos] recovers the
amplitude exactly; the affine map does the rest).

Cohorts are longitudinal: patients have two eyes, eyes have visits, and
per-eye truth never increases over time (disease only progresses).
Diagnosis labels follow baseline truth cutoffs (normal > 90, suspect
80-90, glaucoma < 80 by default; phantom conventions, not clinical
claims). Baselines are drawn from per-group mixtures tuned so the
glaucoma pool lands near 68.8 +/- 16.0 um with the normal pool near
97.6 +/- 9.3 um.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from . import dataio, imagefiles

log = logging.getLogger(__name__)

# image composition constants
BACKGROUND = 0.35
RIM_LEVEL = 0.78
CUP_LEVEL = 0.92          # pixel value at the disc center when noise/vessels are off
VESSEL_DEPTH = 0.25
STRIATION_WAVES = 24
CONTRAST_OFFSET = 0.01
CONTRAST_SLOPE = 0.0015

# diagnosis cutoffs on baseline truth (phantom conventions)
NORMAL_CUTOFF_UM = 90.0
GLAUCOMA_CUTOFF_UM = 80.0

TRUTH_RANGE = (40.0, 130.0)


def striation_amplitude(truth_um):
    """Contrast of the striation band; affine and invertible in truth."""
    return CONTRAST_OFFSET + CONTRAST_SLOPE * truth_um


def truth_from_amplitude(amplitude):
    """Closed-form inverse of the contrast-vs-truth map."""
    return (amplitude - CONTRAST_OFFSET) / CONTRAST_SLOPE


def cup_ratio_for_truth(truth_um):
    """Monotone coupling: thinner nerves get bigger cups."""
    ratio = 0.92 - (truth_um - 40.0) * (0.67 / 90.0)
    return float(np.clip(ratio, 0.2, 0.95))


@dataclass
class PhantomParams:
    truth_um: float
    disc_radius_frac: float = 0.22
    cup_ratio: float | None = None     # None: derived from truth
    vessel_count: int = 3
    noise_sd: float = 0.02
    illumination_gradient: float = 0.08
    seed: int = 0
    size: int = 64

    def __post_init__(self):
        lo, hi = TRUTH_RANGE
        if not lo <= self.truth_um <= hi:
            raise ValueError(f"truth_um {self.truth_um} outside [{lo}, {hi}]")
        if not 0.0 < self.disc_radius_frac < 1.0:
            raise ValueError("disc_radius_frac must be in (0, 1)")
        if self.cup_ratio is None:
            self.cup_ratio = cup_ratio_for_truth(self.truth_um)
        if not 0.2 <= self.cup_ratio <= 0.95:
            raise ValueError("cup_ratio must be in [0.2, 0.95]")


@dataclass
class RenderedEye:
    image: np.ndarray          # (size, size) float64 in [0, 1]
    truth_um: float
    center: tuple              # (cy, cx) in pixels
    disc_radius_px: float


def _smoothstep(x):
    t = np.clip(x, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def render_eye(params: PhantomParams) -> RenderedEye:
    """Render one phantom; deterministic in ``params.seed``."""
    rng = np.random.default_rng(params.seed)
    size = params.size
    radius = params.disc_radius_frac * size
    cy = size / 2.0 + rng.uniform(-0.12, 0.12) * size
    cx = size / 2.0 + rng.uniform(-0.12, 0.12) * size
    illum_angle = rng.uniform(0.0, 2.0 * math.pi)
    phase = rng.uniform(0.0, 2.0 * math.pi)

    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    dy = yy - cy
    dx = xx - cx
    r = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)

    # ramp is zero at the disc center, so the cup stays at CUP_LEVEL
    img = BACKGROUND + params.illumination_gradient * (
        dx * math.cos(illum_angle) + dy * math.sin(illum_angle)) / size

    # striated band: plateau between 1.2R and 1.8R, feathered to zero at R and 2R
    window = _smoothstep((r - radius) / (0.2 * radius)) * _smoothstep((2.0 * radius - r) / (0.2 * radius))
    img += striation_amplitude(params.truth_um) * np.sin(STRIATION_WAVES * theta + phase) * window

    # disc: bright rim with a paler cup, edges feathered over ~0.8 px
    disc_mask = _smoothstep((radius - r) / 0.8)
    cup_mask = _smoothstep((params.cup_ratio * radius - r) / 0.8)
    disc_value = RIM_LEVEL * (1.0 - cup_mask) + CUP_LEVEL * cup_mask
    img = img * (1.0 - disc_mask) + disc_value * disc_mask

    # dark vessel arcs spiralling outward from the disc; darkening follows
    # the distance to the nearest curve point of any vessel
    if params.vessel_count:
        vessel_width = max(0.9, 0.015 * size)
        t = np.linspace(0.0, 1.0, 64)
        px, py = [], []
        for _ in range(params.vessel_count):
            start = rng.uniform(0.0, 2.0 * math.pi)
            bend = rng.uniform(-0.8, 0.8)
            vr = (0.15 + 2.6 * t) * radius
            va = start + bend * t
            px.append(cx + vr * np.cos(va))
            py.append(cy + vr * np.sin(va))
        px = np.concatenate(px)
        py = np.concatenate(py)
        gx = xx.ravel()
        gy = yy.ravel()
        d2min = np.full(gx.size, np.inf)
        for lo in range(0, px.size, 128):
            chunk = ((gx[:, None] - px[None, lo:lo + 128]) ** 2
                     + (gy[:, None] - py[None, lo:lo + 128]) ** 2).min(axis=1)
            np.minimum(d2min, chunk, out=d2min)
        img -= VESSEL_DEPTH * np.exp(-d2min / (2.0 * vessel_width ** 2)).reshape(size, size)

    if params.noise_sd > 0:
        img += rng.normal(0.0, params.noise_sd, size=img.shape)

    return RenderedEye(np.clip(img, 0.0, 1.0), params.truth_um, (cy, cx), radius)


# ---------------------------------------------------------------------------
# cohort generation


@dataclass
class CohortSpec:
    n_patients: int
    eyes_per_patient: int = 2
    visits_per_eye: int | tuple = 3     # exact count, or (lo, hi) inclusive
    image_size: int = 64
    noise_sd: float = 0.02
    vessel_count: int = 3
    stereo: bool = False
    quality_db_range: tuple = (16.0, 35.0)
    # P(normal), P(suspect), P(glaucoma) per patient
    diagnosis_mix: tuple = (0.28, 0.35, 0.37)

    def __post_init__(self):
        if self.n_patients < 3:
            raise ValueError("a cohort needs at least 3 patients")
        if self.eyes_per_patient not in (1, 2):
            raise ValueError("eyes_per_patient must be 1 or 2")


# Baseline-truth mixtures per intended diagnosis: (weight, mean, sd) rows,
# rejection-sampled into the group's cutoff range. Tuned so that pooled
# visit truths land near normal 97.6 +/- 9.3, suspect mean 87.1, and
# glaucoma 68.8 +/- 16.0 (the suspect SD is support-limited by its
# 80-90 um cutoff range and is not a target).
_BASELINE_MIXTURES = {
    "normal": ((0.62, 92.8, 1.8), (0.38, 104.8, 9.0)),
    "suspect": ((1.0, 88.5, 3.5),),
    "glaucoma": ((0.23, 40.5, 2.0), (0.77, 83.0, 3.0)),
}

_GROUP_RANGES = {
    "normal": (NORMAL_CUTOFF_UM + 1e-6, TRUTH_RANGE[1]),
    "suspect": (GLAUCOMA_CUTOFF_UM, NORMAL_CUTOFF_UM),
    "glaucoma": (TRUTH_RANGE[0], GLAUCOMA_CUTOFF_UM - 1e-6),
}

_SLOPE_RANGES = {  # um per year, negated when applied
    "normal": (0.0, 0.4),
    "suspect": (0.2, 1.0),
    "glaucoma": (0.8, 2.5),
}


def _sample_baseline(group, rng):
    # choose the component once, then truncate within it; re-drawing the
    # component on rejection would silently reweight the mixture
    weights = np.array([w for w, _, _ in _BASELINE_MIXTURES[group]])
    lo, hi = _GROUP_RANGES[group]
    _, mean, sd = _BASELINE_MIXTURES[group][rng.choice(len(weights), p=weights)]
    for _ in range(10000):
        value = rng.normal(mean, sd)
        if lo <= value <= hi:
            return value
    raise RuntimeError(f"baseline sampling for {group} failed to land in [{lo}, {hi}]")


def _assign_normative(rows):
    healthy = [r.oct_avg_rnfl_um for r in rows if r.diagnosis == "normal"]
    p1, p5 = np.percentile(healthy, [1, 5])
    for r in rows:
        if r.oct_avg_rnfl_um < p1:
            r.normative_class = "outside"
        elif r.oct_avg_rnfl_um < p5:
            r.normative_class = "borderline"
        else:
            r.normative_class = "within"


@dataclass
class CohortSummary:
    manifest_path: Path
    n_rows: int
    n_patients: int
    diagnosis_counts: dict = field(default_factory=dict)


def gen_cohort(spec: CohortSpec, seed: int, out_dir) -> CohortSummary:
    """Write a longitudinal phantom cohort: PGM images plus manifest.csv.

    Per patient: one diagnosis intent, two eyes, each with its own
    baseline truth from the intent's mixture and a non-positive
    progression slope; visits step forward 150-400 days at a time. OCT
    dates jitter within +/-60 days of the photo date. Synthetic SAP MD is
    0.2 * (truth - 95) + N(0, 1), floored at -30 dB.
    """
    out = Path(out_dir)
    images_dir = out / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    groups = ("normal", "suspect", "glaucoma")
    rows = []
    for p in range(spec.n_patients):
        rng = np.random.default_rng([seed, p])
        pid = f"P{p + 1:04d}"
        group = groups[rng.choice(3, p=np.asarray(spec.diagnosis_mix))]
        for eye in ("OD", "OS")[: spec.eyes_per_patient]:
            baseline = _sample_baseline(group, rng)
            slope = -rng.uniform(*_SLOPE_RANGES[group])
            cup_jitter = rng.uniform(-0.04, 0.04)
            label = ("normal" if baseline > NORMAL_CUTOFF_UM
                     else "suspect" if baseline >= GLAUCOMA_CUTOFF_UM
                     else "glaucoma")
            if isinstance(spec.visits_per_eye, tuple):
                n_visits = int(rng.integers(spec.visits_per_eye[0], spec.visits_per_eye[1] + 1))
            else:
                n_visits = spec.visits_per_eye
            visit_date = date(2015, 1, 1) + timedelta(days=int(rng.integers(0, 730)))
            elapsed_days = 0
            for visit in range(1, n_visits + 1):
                if visit > 1:
                    step = int(rng.integers(150, 401))
                    elapsed_days += step
                    visit_date = visit_date + timedelta(days=step)
                truth = max(TRUTH_RANGE[0], baseline + slope * elapsed_days / 365.25)
                params = PhantomParams(
                    truth_um=truth,
                    cup_ratio=float(np.clip(cup_ratio_for_truth(truth) + cup_jitter, 0.2, 0.95)),
                    vessel_count=spec.vessel_count,
                    noise_sd=spec.noise_sd,
                    seed=int(rng.integers(0, 2 ** 63 - 1)),
                    size=spec.image_size,
                )
                rendered = render_eye(params)
                if spec.stereo:
                    second = render_eye(PhantomParams(
                        truth_um=truth, cup_ratio=params.cup_ratio,
                        vessel_count=spec.vessel_count, noise_sd=spec.noise_sd,
                        seed=int(rng.integers(0, 2 ** 63 - 1)), size=spec.image_size))
                    frame = np.concatenate([rendered.image, second.image], axis=1)
                else:
                    frame = rendered.image
                rel_path = f"images/{pid}_{eye}_v{visit}.pgm"
                imagefiles.write_pgm(out / rel_path, frame)

                oct_date = visit_date + timedelta(days=int(rng.integers(-60, 61)))
                md = max(-30.0, 0.2 * (truth - 95.0) + rng.normal(0.0, 1.0))
                psd = float(np.clip(1.6 + 0.13 * max(0.0, 95.0 - truth) + rng.normal(0.0, 0.4),
                                    0.5, 16.0))
                rows.append(dataio.ManifestRow(
                    patient_id=pid, eye=eye, photo_path=rel_path,
                    photo_date=visit_date, oct_date=oct_date,
                    oct_avg_rnfl_um=float(truth),
                    oct_quality_db=float(rng.uniform(*spec.quality_db_range)),
                    diagnosis=label, sap_md_db=float(md), sap_psd_db=psd,
                ))

    _assign_normative(rows)
    manifest_path = out / "manifest.csv"
    dataio.write_manifest(manifest_path, rows)
    counts = {g: sum(1 for r in rows if r.diagnosis == g) for g in groups}
    log.info("cohort: %d rows from %d patients (%s)", len(rows), spec.n_patients, counts)
    return CohortSummary(manifest_path, len(rows), spec.n_patients, counts)
