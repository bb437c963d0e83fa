"""Manifest ingestion, photo/OCT pairing, patient-level splits,
preprocessing, and augmentation.

The manifest is a CSV whose columns match ``ManifestRow`` field names.
Rows with OCT signal strength below 15 dB are excluded at load time with
a logged reason; structurally broken rows (bad dates, out-of-range
thickness) are errors, reported with their row number.

Splits are assigned per patient: every row of a patient lands in the
same fold, so no patient can leak across train/valid/test.

Stereo photographs are side-by-side double-width frames; preprocessing
splits them at the horizontal midpoint into two independent views, then
area-averages each view down to the configured square size with values
in [0, 1].
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from . import imagefiles

log = logging.getLogger(__name__)

MIN_OCT_QUALITY_DB = 15.0
MAX_PAIRING_DAYS = 183  # "within 6 months"

DIAGNOSES = ("normal", "suspect", "glaucoma")
NORMATIVE_CLASSES = ("within", "borderline", "outside")

REQUIRED_COLUMNS = (
    "patient_id", "eye", "photo_path", "photo_date", "oct_date",
    "oct_avg_rnfl_um", "oct_quality_db", "diagnosis", "sap_md_db", "sap_psd_db",
)


class ManifestError(ValueError):
    """Structurally invalid manifest content."""


@dataclass
class ManifestRow:
    patient_id: str
    eye: str                      # OD | OS
    photo_path: str
    photo_date: date
    oct_date: date
    oct_avg_rnfl_um: float
    oct_quality_db: float
    diagnosis: str                # normal | suspect | glaucoma
    sap_md_db: float
    sap_psd_db: float
    normative_class: str | None = None   # within | borderline | outside


@dataclass
class SamplePair:
    image: np.ndarray             # (C, S, S) float64 in [0, 1]
    target_um: float
    patient_id: str
    eye: str
    view: str                     # left | right | mono
    split: str                    # train | valid | test
    diagnosis: str = ""
    sap_md_db: float = float("nan")
    abnormal: float | None = None  # 1.0 if normative_class == outside


# ---------------------------------------------------------------------------
# manifest loading


def _parse_row(raw, line_no):
    def fail(msg):
        raise ManifestError(f"manifest row {line_no}: {msg}")

    try:
        photo_date = date.fromisoformat(raw["photo_date"].strip())
        oct_date = date.fromisoformat(raw["oct_date"].strip())
    except ValueError:
        fail(f"malformed date ({raw['photo_date']!r} / {raw['oct_date']!r})")
    try:
        rnfl = float(raw["oct_avg_rnfl_um"])
        quality = float(raw["oct_quality_db"])
        md = float(raw["sap_md_db"])
        psd = float(raw["sap_psd_db"])
    except ValueError as exc:
        fail(f"unparsable number ({exc})")
    eye = raw["eye"].strip()
    if eye not in ("OD", "OS"):
        fail(f"eye must be OD or OS, got {eye!r}")
    diagnosis = raw["diagnosis"].strip()
    if diagnosis not in DIAGNOSES:
        fail(f"unknown diagnosis {diagnosis!r}")
    if not 20.0 < rnfl < 200.0:
        fail(f"oct_avg_rnfl_um {rnfl} outside the plausible (20, 200) range")
    normative = (raw.get("normative_class") or "").strip() or None
    if normative is not None and normative not in NORMATIVE_CLASSES:
        fail(f"unknown normative_class {normative!r}")
    return ManifestRow(
        patient_id=raw["patient_id"].strip(),
        eye=eye,
        photo_path=raw["photo_path"].strip(),
        photo_date=photo_date,
        oct_date=oct_date,
        oct_avg_rnfl_um=rnfl,
        oct_quality_db=quality,
        diagnosis=diagnosis,
        sap_md_db=md,
        sap_psd_db=psd,
        normative_class=normative,
    )


def load_manifest_detailed(path):
    """Parse a manifest CSV. Returns (rows, excluded) where ``excluded``
    is a list of (line_number, reason) for rows dropped by exclusion
    rules (currently: OCT signal strength below 15 dB)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(f"{path}: empty file, expected a CSV header")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ManifestError(f"{path}: missing required columns {missing}")
        rows = []
        excluded = []
        seen_keys = set()
        for line_no, raw in enumerate(reader, start=2):
            row = _parse_row(raw, line_no)
            if row.oct_quality_db < MIN_OCT_QUALITY_DB:
                excluded.append((line_no, "low signal"))
                log.info("manifest row %d excluded: low signal (%.1f dB)",
                         line_no, row.oct_quality_db)
                continue
            key = (row.patient_id, row.eye, row.photo_date, row.oct_date)
            if key in seen_keys:
                log.warning("manifest row %d: duplicate %s, keeping the first", line_no, key)
                continue
            seen_keys.add(key)
            rows.append(row)
    return rows, excluded


def load_manifest(path):
    """Parsed manifest rows after exclusion rules; see load_manifest_detailed."""
    rows, _ = load_manifest_detailed(path)
    return rows


def write_manifest(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(REQUIRED_COLUMNS) + ["normative_class"])
        for r in rows:
            writer.writerow([
                r.patient_id, r.eye, r.photo_path,
                r.photo_date.isoformat(), r.oct_date.isoformat(),
                repr(r.oct_avg_rnfl_um), repr(r.oct_quality_db), r.diagnosis,
                repr(r.sap_md_db), repr(r.sap_psd_db), r.normative_class or "",
            ])


# ---------------------------------------------------------------------------
# photo <-> OCT pairing


@dataclass(frozen=True)
class PhotoRecord:
    patient_id: str
    eye: str
    photo_path: str
    photo_date: date


@dataclass(frozen=True)
class OctRecord:
    patient_id: str
    eye: str
    oct_date: date
    oct_avg_rnfl_um: float
    oct_quality_db: float = 30.0


def pair_photos_to_oct(photos, octs, max_days=MAX_PAIRING_DAYS):
    """Match each photo to the closest OCT of the same (patient, eye).

    The OCT minimizing |date difference| wins; ties go to the earlier
    scan; photos whose nearest OCT is more than ``max_days`` away are
    dropped with a log line. The result is sorted by (patient, eye,
    photo date), so input ordering is irrelevant.
    """
    by_eye = {}
    for oct_rec in octs:
        by_eye.setdefault((oct_rec.patient_id, oct_rec.eye), []).append(oct_rec)
    for group in by_eye.values():
        group.sort(key=lambda o: o.oct_date)

    pairs = []
    for photo in sorted(photos, key=lambda p: (p.patient_id, p.eye, p.photo_date)):
        candidates = by_eye.get((photo.patient_id, photo.eye), [])
        best = None
        best_gap = None
        for cand in candidates:
            gap = abs((cand.oct_date - photo.photo_date).days)
            # strict < keeps the earlier scan on equidistant ties, since
            # candidates arrive in ascending date order
            if best is None or gap < best_gap:
                best, best_gap = cand, gap
        if best is None or best_gap > max_days:
            log.info("photo %s (%s %s) left unpaired: nearest OCT %s days away",
                     photo.photo_path, photo.patient_id, photo.eye,
                     "inf" if best is None else best_gap)
            continue
        pairs.append((photo, best))
    return pairs


# ---------------------------------------------------------------------------
# patient-level splitting

SPLIT_NAMES = ("train", "valid", "test")


def split_by_patient(rows, ratios, seed):
    """Assign every patient to train/valid/test, deterministically in seed.

    Returns {patient_id: split}. All rows of a patient share one split;
    achieved counts differ from ``ratio * n_patients`` by less than one
    patient (largest-remainder rounding).
    """
    if len(ratios) != 3:
        raise ValueError("ratios must be (train, valid, test)")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    if any(r < 0 for r in ratios):
        raise ValueError("ratios must be non-negative")
    patients = sorted({row.patient_id for row in rows})
    n_splits = sum(1 for r in ratios if r > 0)
    if len(patients) < n_splits:
        raise ValueError(f"{len(patients)} patients cannot fill {n_splits} splits")

    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]

    n = len(patients)
    exact = [r * n for r in ratios]
    counts = [math.floor(e) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    while sum(counts) < n:
        # ties resolved in train, valid, test order
        i = max(range(3), key=lambda k: (remainders[k], -k))
        counts[i] += 1
        remainders[i] = -1.0

    assignment = {}
    cursor = 0
    for split, count in zip(SPLIT_NAMES, counts):
        for pid in order[cursor:cursor + count]:
            assignment[pid] = split
        cursor += count
    return assignment


def write_split_csv(path, assignment):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "split"])
        for pid in sorted(assignment):
            writer.writerow([pid, assignment[pid]])


def read_split_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or {"patient_id", "split"} - set(reader.fieldnames):
            raise ManifestError(f"{path}: expected columns patient_id, split")
        assignment = {}
        for raw in reader:
            split = raw["split"].strip()
            if split not in SPLIT_NAMES:
                raise ManifestError(f"{path}: unknown split {split!r}")
            assignment[raw["patient_id"].strip()] = split
    return assignment


# ---------------------------------------------------------------------------
# image preprocessing


def _resize_matrix(n_in, n_out):
    """Row-stochastic area-overlap weights mapping n_in pixels to n_out."""
    scale = n_in / n_out
    weights = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = i * scale
        hi = (i + 1) * scale
        j0 = int(math.floor(lo))
        j1 = min(n_in, int(math.ceil(hi)))
        for j in range(j0, j1):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                weights[i, j] = overlap
        weights[i] /= scale
    return weights


def resize_area(img, size):
    """Exact area-average resampling of (H, W) to (size, size)."""
    rows = _resize_matrix(img.shape[0], size)
    cols = _resize_matrix(img.shape[1], size)
    return rows @ img @ cols.T


def to_channels(img, channels):
    """Adapt a decoded (H, W) or (H, W, 3) image to the requested channel
    count, returning (C, H, W): gray replicates, RGB averages down."""
    if img.ndim == 2:
        stack = img[None] if channels == 1 else np.repeat(img[None], channels, axis=0)
    else:
        stack = img.mean(axis=2)[None] if channels == 1 else img.transpose(2, 0, 1)
    if stack.shape[0] != channels:
        raise ManifestError(f"cannot map image with {stack.shape[0]} channels to {channels}")
    return stack


def preprocess(photo_path, input_size, channels=1, stereo="auto"):
    """Decode, split stereo frames, resize, and scale to [0, 1].

    Returns a list of (view_name, array) with arrays shaped
    (channels, input_size, input_size). ``stereo`` is True, False, or
    "auto" (double-width frames are treated as stereo).
    """
    img = imagefiles.read_pnm(photo_path)
    h, w = img.shape[:2]
    if stereo == "auto":
        stereo = (w == 2 * h)
    if stereo:
        if w % 2:
            raise ManifestError(f"{photo_path}: odd width {w}, cannot split a stereo frame")
        views = [("left", img[:, : w // 2]), ("right", img[:, w // 2:])]
    else:
        views = [("mono", img)]

    out = []
    for name, view in views:
        stack = to_channels(view, channels)
        resized = np.stack([resize_area(plane, input_size) for plane in stack])
        out.append((name, np.clip(resized, 0.0, 1.0)))
    return out


# ---------------------------------------------------------------------------
# augmentation


def _rotate_bilinear(img, degrees):
    """Rotate (C, H, W) about the image center; border pixels clamp to the
    edge value so rotation never introduces dark wedges."""
    c, h, w = img.shape
    theta = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy = yy - cy
    dx = xx - cx
    # inverse mapping: sample the source at the un-rotated location
    src_y = cy + dy * math.cos(theta) - dx * math.sin(theta)
    src_x = cx + dy * math.sin(theta) + dx * math.cos(theta)
    src_y = np.clip(src_y, 0.0, h - 1)
    src_x = np.clip(src_x, 0.0, w - 1)
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = src_y - y0
    fx = src_x - x0
    out = np.empty_like(img)
    for k in range(c):
        plane = img[k]
        out[k] = (plane[y0, x0] * (1 - fy) * (1 - fx)
                  + plane[y0, x1] * (1 - fy) * fx
                  + plane[y1, x0] * fy * (1 - fx)
                  + plane[y1, x1] * fy * fx)
    return out


def augment(image, rng):
    """Randomized lighting, rotation, and flips; each applied with
    probability 1/2 from the supplied generator, output clamped to [0, 1].

    - lighting: brightness shift U(-0.1, 0.1) plus contrast scale
      U(0.9, 1.1) about 0.5
    - rotation: U(-10, 10) degrees, bilinear, edge fill
    - horizontal and/or vertical flip
    """
    img = image
    if rng.random() < 0.5:
        shift = rng.uniform(-0.1, 0.1)
        scale = rng.uniform(0.9, 1.1)
        img = (img - 0.5) * scale + 0.5 + shift
    if rng.random() < 0.5:
        img = _rotate_bilinear(img, rng.uniform(-10.0, 10.0))
    if rng.random() < 0.5:
        img = img[:, :, ::-1]
    if rng.random() < 0.5:
        img = img[:, ::-1, :]
    return np.ascontiguousarray(np.clip(img, 0.0, 1.0))


# ---------------------------------------------------------------------------
# sample assembly


def build_samples(rows, assignment, input_size, channels=1, base_dir=".",
                  stereo="auto", splits=None):
    """Load and preprocess every manifest row into SamplePairs.

    ``assignment`` maps patient_id -> split; rows of unassigned patients
    are an error. ``splits``, when given, keeps only those split names.
    Both views of a stereo frame inherit the row's target and split.
    """
    base = Path(base_dir)
    samples = []
    for row in rows:
        split = assignment.get(row.patient_id)
        if split is None:
            raise ManifestError(f"patient {row.patient_id} missing from the split assignment")
        if splits is not None and split not in splits:
            continue
        abnormal = None
        if row.normative_class is not None:
            abnormal = 1.0 if row.normative_class == "outside" else 0.0
        for view, image in preprocess(base / row.photo_path, input_size, channels, stereo):
            samples.append(SamplePair(
                image=image,
                target_um=row.oct_avg_rnfl_um,
                patient_id=row.patient_id,
                eye=row.eye,
                view=view,
                split=split,
                diagnosis=row.diagnosis,
                sap_md_db=row.sap_md_db,
                abnormal=abnormal,
            ))
    return samples
