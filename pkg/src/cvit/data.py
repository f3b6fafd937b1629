"""Image preprocessing, a synthetic radiograph generator, and manifest ingestion.

The generator draws every geometric quantity in normalized [0,1] coordinates
before rasterizing, so the same seed produces the same semantic sample at any
image size. Class rules: "normal" has no focal lesions, "other" exactly one
anywhere in the lung mask, "covid" two or more placed peripherally in the
middle/lower zones of both lungs. A zone's severity bit is 1 iff at least one
lesion center falls inside it. Finding labels mark which archetypes were
rendered; index 0 ("no_finding") is set when nothing else is.

External formats: binary portable graymaps (P5, 8- or 16-bit) for images,
P5 with 0/255 for masks, and a UTF-8 CSV manifest with header
`id,image_path,mask_path,view,class,f1..fK,sev_ru,sev_rm,sev_rl,sev_lu,sev_lm,sev_ll`
where an empty field means the label is absent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .heads import zone_bit, zone_partition

FINDINGS = (
    "no_finding",
    "cardiomegaly",
    "opacity",
    "edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "pleural_effusion",
    "support_device",
)
CLASSES = ("normal", "other", "covid")
VIEWS = ("PA", "AP")
SEV_COLUMNS = ("sev_ru", "sev_rm", "sev_rl", "sev_lu", "sev_lm", "sev_ll")

# focal blob archetypes: finding name -> (radius range, amplitude range, bump count)
BLOB_STYLES = {
    "opacity": ((0.07, 0.10), (35.0, 55.0), 1),
    "consolidation": ((0.030, 0.045), (90.0, 120.0), 1),
    "pneumonia": ((0.022, 0.030), (55.0, 75.0), 3),
}
GLOBAL_FINDINGS = ("cardiomegaly", "edema", "atelectasis", "pneumothorax", "pleural_effusion", "support_device")


# ---------------------------------------------------------------------------
# portable graymap I/O


def read_pgm(path) -> np.ndarray:
    """Binary P5 graymap -> uint8 or uint16 array (16-bit is big-endian)."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise DataError(f"{path}: not a binary P5 graymap")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise DataError(f"{path}: malformed P5 header") from None
    if maxval < 256:
        img = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    else:
        img = np.frombuffer(raw, dtype=">u2", count=width * height, offset=pos).astype(np.uint16)
    if img.size != width * height:
        raise DataError(f"{path}: truncated pixel payload")
    return img.reshape(height, width).copy()


def write_pgm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.ndim != 2:
        raise DataError(f"graymap must be 2-d, got {img.shape}")
    if img.dtype == np.uint16:
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode()
        payload = img.astype(">u2").tobytes()
    else:
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
        payload = img.astype(np.uint8).tobytes()
    Path(path).write_bytes(header + payload)


def write_mask_pgm(path, mask: np.ndarray):
    write_pgm(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_mask_pgm(path) -> np.ndarray:
    return read_pgm(path) > 127


# ---------------------------------------------------------------------------
# preprocessing


def equalize(img: np.ndarray) -> np.ndarray:
    """256-bin histogram equalization onto [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.full(img.shape, 1.0)
    bins = np.clip(((img - lo) / (hi - lo) * 256).astype(np.int64), 0, 255)
    hist = np.bincount(bins.reshape(-1), minlength=256)
    cdf = np.cumsum(hist) / img.size
    return cdf[bins]


def binomial_blur(img: np.ndarray) -> np.ndarray:
    """Separable 3x3 [1,2,1] blur with edge replication (constants stay constant)."""
    img = np.asarray(img, dtype=np.float64)
    padded = np.pad(img, 1, mode="edge")
    horiz = (padded[:, :-2] + 2.0 * padded[:, 1:-1] + padded[:, 2:]) / 4.0
    return (horiz[:-2] + 2.0 * horiz[1:-1] + horiz[2:]) / 4.0


def standardize(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    sigma = max(float(img.std()), 1e-6)
    return (img - img.mean()) / sigma


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Resize to size x size; pixel centers map to half-integer source grid."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (size, size):
        return img.copy()
    out = img
    for axis, n in ((0, h), (1, w)):
        src = (np.arange(size) + 0.5) * n / size - 0.5
        lo = np.clip(np.floor(src).astype(np.int64), 0, n - 1)
        hi = np.clip(lo + 1, 0, n - 1)
        frac = np.clip(src - lo, 0.0, 1.0)
        if axis == 0:
            out = out[lo] * (1 - frac)[:, None] + out[hi] * frac[:, None]
        else:
            out = out[:, lo] * (1 - frac)[None, :] + out[:, hi] * frac[None, :]
    return out


def resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(np.int64), w - 1)
    return img[rows][:, cols]


def preprocess(img: np.ndarray, size: int) -> np.ndarray:
    """Histogram equalization, 3x3 binomial blur, per-image standardization,
    then bilinear resize to `size`. Returns float32."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise DataError(f"images must be single-channel 2-d, got shape {img.shape}")
    if min(img.shape) < 16:
        raise DataError(f"image extent too small: {img.shape}")
    out = resize_bilinear(standardize(binomial_blur(equalize(img))), size)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# samples and synthetic generation


@dataclass
class Sample:
    id: str
    image: np.ndarray  # uint8/uint16 (H, W)
    view: str = "PA"
    mask: np.ndarray | None = None  # bool (H, W)
    class_label: str | None = None
    findings: np.ndarray | None = None  # (K,) of {0,1}
    severity: np.ndarray | None = None  # (3, 2) of {0,1}
    lesion_centers: list = field(default_factory=list)  # (row, col) pixels
    lesion_radii: list = field(default_factory=list)  # pixels
    source: str = "synth"


@dataclass
class SynthSpec:
    """Synthetic dataset recipe; all geometry in normalized [0,1] units."""

    image_size: int = 64
    seed: int = 0
    class_mix: tuple = (1 / 3, 1 / 3, 1 / 3)
    covid_lesions: tuple = (2, 4)
    lung_center_y: float = 0.48
    lung_centers_x: tuple = (0.30, 0.70)
    lung_axes: tuple = (0.155, 0.30)
    noise_amp: float = 12.0
    global_finding_prob: float = 0.12
    view_pa_prob: float = 0.5

    def validate(self):
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if abs(sum(self.class_mix) - 1.0) > 1e-9 or any(p < 0 for p in self.class_mix):
            raise ConfigError(f"class_mix must be non-negative and sum to 1, got {self.class_mix}")
        max_r = max(hi for (_, hi), _, _ in BLOB_STYLES.values())
        if max_r >= min(self.lung_axes):
            raise ConfigError(
                f"largest lesion radius {max_r} does not fit inside lung axes {self.lung_axes}"
            )
        if not 0 <= self.global_finding_prob <= 1:
            raise ConfigError(f"global_finding_prob outside [0,1]: {self.global_finding_prob}")


def _grid(size):
    r = (np.arange(size) + 0.5) / size
    return np.meshgrid(r, r, indexing="ij")  # rows, cols in [0,1]


def _ellipse(rows, cols, cx, cy, ax, ay):
    return ((cols - cx) / ax) ** 2 + ((rows - cy) / ay) ** 2 <= 1.0


def _bump(rows, cols, cy, cx, radius, amp):
    d2 = (rows - cy) ** 2 + (cols - cx) ** 2
    return amp * np.exp(-d2 / (2.0 * radius**2))


def _sample_in_lung(rng, spec, side, peripheral_lower=False):
    """Normalized (y, x) inside the lung ellipse; optionally restricted to the
    peripheral band of the middle/lower vertical range."""
    cx = spec.lung_centers_x[side]
    ax, ay = spec.lung_axes
    for _ in range(1000):
        if peripheral_lower:
            # vertical fraction below the 5/12 line of the lung extent
            v = rng.uniform(5 / 12, 0.95)
            u_mag = rng.uniform(0.45, 0.92)
            u = u_mag if side == 1 else -u_mag  # outer edge: left lung -> +x
            if rng.random() < 0.35:
                u = -u  # some medial-peripheral spread
        else:
            v = rng.uniform(0.03, 0.97)
            u = rng.uniform(-0.92, 0.92)
        y = (spec.lung_center_y - ay) + v * (2 * ay)
        x = cx + u * ax
        if ((x - cx) / ax) ** 2 + ((y - spec.lung_center_y) / ay) ** 2 <= 0.92:
            return y, x
    raise ConfigError("could not place a lesion inside the lung ellipse")


def _render_global_finding(img, rows, cols, name, rng, spec):
    s = img.shape[0]
    cy, cxs = spec.lung_center_y, spec.lung_centers_x
    ax, ay = spec.lung_axes
    side = int(rng.integers(0, 2))
    if name == "cardiomegaly":
        img += 45.0 * _ellipse(rows, cols, 0.52, cy + 0.13, 0.20, 0.16)
    elif name == "edema":
        for cx in cxs:
            lung = _ellipse(rows, cols, cx, cy, ax, ay)
            img += 26.0 * lung * np.clip((rows - cy) / ay, 0.0, 1.0)
    elif name == "atelectasis":
        cx = cxs[side]
        band_y = rng.uniform(cy - 0.5 * ay, cy + 0.5 * ay)
        band = np.abs(rows - band_y) < 1.3 / s
        img += 70.0 * (band & _ellipse(rows, cols, cx, cy, ax, ay))
    elif name == "pneumothorax":
        cx = cxs[side]
        rho = ((cols - cx) / ax) ** 2 + ((rows - cy) / ay) ** 2
        img -= 40.0 * ((rho > 0.60) & (rho <= 1.0))
    elif name == "pleural_effusion":
        cx = cxs[side]
        lung = _ellipse(rows, cols, cx, cy, ax, ay)
        img += 55.0 * (lung & (rows > cy + 0.55 * ay))
    elif name == "support_device":
        x0, x1 = rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)
        t = rows  # line from top to bottom
        line_x = x0 + (x1 - x0) * t
        img += 90.0 * (np.abs(cols - line_x) < 1.0 / s)
    return img


def generate_one(spec: SynthSpec, index: int) -> Sample:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(index,)))
    s = spec.image_size
    rows, cols = _grid(s)
    cy, (cx_r, cx_l) = spec.lung_center_y, spec.lung_centers_x
    ax, ay = spec.lung_axes

    # body + smooth texture
    img = 150.0 + 25.0 * (rows - 0.5)
    coarse = rng.uniform(-1.0, 1.0, size=(9, 9))
    img = img + spec.noise_amp * resize_bilinear(coarse, s)
    lungs = _ellipse(rows, cols, cx_r, cy, ax, ay) | _ellipse(rows, cols, cx_l, cy, ax, ay)
    img = img - 55.0 * lungs
    mask = lungs

    label = rng.choice(len(CLASSES), p=spec.class_mix)
    class_label = CLASSES[label]
    findings = np.zeros(len(FINDINGS), dtype=np.uint8)

    # focal lesions (the class signal)
    centers_norm = []
    if class_label == "other":
        side = int(rng.integers(0, 2))
        centers_norm.append((side, _sample_in_lung(rng, spec, side)))
    elif class_label == "covid":
        count = int(rng.integers(spec.covid_lesions[0], spec.covid_lesions[1] + 1))
        order = [0, 1] + [int(rng.integers(0, 2)) for _ in range(count - 2)]
        for side in order:
            centers_norm.append((side, _sample_in_lung(rng, spec, side, peripheral_lower=True)))

    lesion_centers, lesion_radii = [], []
    for _, (y, x) in centers_norm:
        style = list(BLOB_STYLES)[int(rng.integers(0, len(BLOB_STYLES)))]
        (r_lo, r_hi), (a_lo, a_hi), bumps = BLOB_STYLES[style]
        radius = rng.uniform(r_lo, r_hi)
        amp = rng.uniform(a_lo, a_hi)
        for b in range(bumps):
            jitter = 0.0 if bumps == 1 else 0.8 * radius * (b + 1)
            angle = rng.uniform(0, 2 * np.pi)
            img = img + _bump(rows, cols, y + jitter * np.sin(angle), x + jitter * np.cos(angle), radius, amp)
        findings[FINDINGS.index(style)] = 1
        lesion_centers.append((min(int(y * s), s - 1), min(int(x * s), s - 1)))
        lesion_radii.append(radius * s)

    # class-independent global findings
    for name in GLOBAL_FINDINGS:
        if rng.random() < spec.global_finding_prob:
            img = _render_global_finding(img, rows, cols, name, rng, spec)
            findings[FINDINGS.index(name)] = 1
    if findings.sum() == 0:
        findings[0] = 1  # no_finding

    severity = np.zeros((3, 2), dtype=np.uint8)
    zones = zone_partition(mask)
    for r, c in lesion_centers:
        pos = zone_bit(zones, r, c)
        if pos is not None:
            severity[pos] = 1

    view = "PA" if rng.random() < spec.view_pa_prob else "AP"
    image_u8 = np.clip(binomial_blur(img), 0, 255).astype(np.uint8)
    return Sample(
        id=f"synth-{index:06d}",
        image=image_u8,
        view=view,
        mask=mask,
        class_label=class_label,
        findings=findings,
        severity=severity,
        lesion_centers=lesion_centers,
        lesion_radii=lesion_radii,
    )


def generate(spec: SynthSpec, n: int) -> list[Sample]:
    """Deterministic synthetic dataset: sample i depends only on (seed, i)."""
    if n < 1:
        raise ConfigError(f"need n >= 1 samples, got {n}")
    spec.validate()
    return [generate_one(spec, i) for i in range(n)]


def lesion_support(sample: Sample) -> np.ndarray:
    """Boolean disk union around each lesion center (generator ground truth)."""
    s = sample.image.shape[0]
    rows, cols = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    out = np.zeros((s, s), dtype=bool)
    for (r, c), rad in zip(sample.lesion_centers, sample.lesion_radii):
        out |= (rows - r) ** 2 + (cols - c) ** 2 <= (1.8 * rad) ** 2
    return out


# ---------------------------------------------------------------------------
# manifests


def manifest_header(k: int) -> list[str]:
    return ["id", "image_path", "mask_path", "view", "class"] + [f"f{i+1}" for i in range(k)] + list(SEV_COLUMNS)


def write_dataset(samples: list[Sample], out_dir, k: int = len(FINDINGS), write_lesions: bool = True) -> Path:
    """Write images, masks, optional lesion-support maps, and manifest.csv."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(manifest_header(k))
        for sample in samples:
            image_path = f"images/{sample.id}.pgm"
            write_pgm(out / image_path, sample.image)
            mask_path = ""
            if sample.mask is not None:
                mask_path = f"masks/{sample.id}.pgm"
                write_mask_pgm(out / mask_path, sample.mask)
            if write_lesions and sample.lesion_centers:
                write_mask_pgm(out / "images" / f"{sample.id}.lesion.pgm", lesion_support(sample))
            findings = [""] * k if sample.findings is None else [str(int(v)) for v in sample.findings]
            severity = [""] * 6 if sample.severity is None else [str(int(v)) for v in sample.severity.T.reshape(-1)]
            writer.writerow(
                [sample.id, image_path, mask_path, sample.view, sample.class_label or ""] + findings + severity
            )
    return manifest


def _parse_bit(value: str, line: int, column: str) -> int:
    if value not in ("0", "1"):
        raise DataError(f"manifest line {line}: column {column} must be 0/1, got {value!r}")
    return int(value)


def load_manifest(path, k: int = len(FINDINGS)) -> list[Sample]:
    """Parse a manifest and load referenced graymaps. Missing optional labels
    stay absent (None), never zero-filled."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    expected = manifest_header(k)
    samples = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise DataError(f"manifest header mismatch: expected {expected}, got {header}")
        for line, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise DataError(f"manifest line {line}: expected {len(expected)} fields, got {len(row)}")
            sid, image_path, mask_path, view, cls = row[:5]
            if view not in VIEWS:
                raise DataError(f"manifest line {line}: view must be PA or AP, got {view!r}")
            if cls and cls not in CLASSES:
                raise DataError(f"manifest line {line}: unknown class {cls!r}")
            image_file = base / image_path
            if not image_file.exists():
                raise DataError(f"manifest line {line}: missing image file {image_file}")
            image = read_pgm(image_file)
            mask = None
            if mask_path:
                mask_file = base / mask_path
                if not mask_file.exists():
                    raise DataError(f"manifest line {line}: missing mask file {mask_file}")
                mask = read_mask_pgm(mask_file)
            finding_cells = row[5 : 5 + k]
            findings = None
            if any(cell != "" for cell in finding_cells):
                findings = np.array(
                    [_parse_bit(cell, line, f"f{i+1}") for i, cell in enumerate(finding_cells)], dtype=np.uint8
                )
            sev_cells = row[5 + k :]
            severity = None
            if any(cell != "" for cell in sev_cells):
                if any(cell == "" for cell in sev_cells):
                    raise DataError(f"manifest line {line}: severity bits must be all present or all absent")
                if mask is None:
                    raise DataError(f"manifest line {line}: severity bits require a mask")
                bits = [_parse_bit(cell, line, col) for cell, col in zip(sev_cells, SEV_COLUMNS)]
                severity = np.array(bits, dtype=np.uint8).reshape(2, 3).T  # columns-major in the file
            samples.append(
                Sample(
                    id=sid,
                    image=image,
                    view=view,
                    mask=mask,
                    class_label=cls or None,
                    findings=findings,
                    severity=severity,
                    source=str(path),
                )
            )
    return samples


# ---------------------------------------------------------------------------
# splitting


def split(samples: list[Sample], fractions, seed: int):
    """Stratified-by-class, deterministic (train, val, test) split."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ConfigError(f"split fractions must be 3 non-negative values summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    strata: dict[str, list[int]] = {}
    for i, sample in enumerate(samples):
        strata.setdefault(sample.class_label or "", []).append(i)
    parts: tuple[list[int], ...] = ([], [], [])
    for key in sorted(strata):
        idx = np.array(strata[key])
        rng.shuffle(idx)
        counts = _largest_remainder(len(idx), fractions)
        start = 0
        for part, count in zip(parts, counts):
            part.extend(idx[start : start + count].tolist())
            start += count
    return tuple([samples[i] for i in sorted(part)] for part in parts)


def _largest_remainder(n: int, fractions) -> list[int]:
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    remainder = n - sum(counts)
    order = np.argsort([c - r for c, r in zip(counts, raw)])  # largest fractional part first
    for j in range(remainder):
        counts[order[j]] += 1
    return counts
