"""Deterministic synthetic motion corpora standing in for real mocap datasets.

Motion feature layout (H = 263 channels per frame)::

    0:3      root (hip) position x, y, z in meters, absolute
    3:66     positions of joints 1..21 relative to the root (21 x 3)
    66:132   per-joint velocities of all 22 joints, m/s (22 x 3)
    132:259  fixed random linear mix of the relative positions (rotation stand-in)
    259:263  soft foot-contact signals for l/r ankle and l/r foot

Frames are sampled at 20 fps.  Joint order follows the usual 22-joint body
(pelvis, hips, spine, knees, ankles, feet, neck, collars, head, shoulders,
elbows, wrists).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

FPS = 20.0
N_JOINTS = 22
FEATURE_DIM = 263
ROOT_POS = slice(0, 3)
LOCAL_POS = slice(3, 66)
VELOCITY = slice(66, 132)
AUX = slice(132, 259)
CONTACT = slice(259, 263)

# x lateral (left +), y up, z forward; meters relative to the pelvis
REST_POSE = np.array(
    [
        [0.00, 0.00, 0.00],  # pelvis
        [0.09, -0.08, 0.00],  # l_hip
        [-0.09, -0.08, 0.00],  # r_hip
        [0.00, 0.12, 0.00],  # spine1
        [0.10, -0.48, 0.01],  # l_knee
        [-0.10, -0.48, 0.01],  # r_knee
        [0.00, 0.25, 0.00],  # spine2
        [0.10, -0.88, -0.02],  # l_ankle
        [-0.10, -0.88, -0.02],  # r_ankle
        [0.00, 0.30, 0.01],  # spine3
        [0.11, -0.93, 0.10],  # l_foot
        [-0.11, -0.93, 0.10],  # r_foot
        [0.00, 0.50, 0.00],  # neck
        [0.07, 0.42, 0.00],  # l_collar
        [-0.07, 0.42, 0.00],  # r_collar
        [0.00, 0.62, 0.03],  # head
        [0.18, 0.45, 0.00],  # l_shoulder
        [-0.18, 0.45, 0.00],  # r_shoulder
        [0.44, 0.45, 0.00],  # l_elbow
        [-0.44, 0.45, 0.00],  # r_elbow
        [0.68, 0.45, 0.00],  # l_wrist
        [-0.68, 0.45, 0.00],  # r_wrist
    ]
)
PELVIS_HEIGHT = 0.95
L_LEG = (1, 4, 7, 10)
R_LEG = (2, 5, 8, 11)
UPPER = (3, 6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21)
L_ARM = (18, 20)
R_ARM = (19, 21)
FEET = (7, 8, 10, 11)

# (family, variant) -> caption; captions use high-frequency bank vocabulary
CAPTIONS: dict[str, dict[str, str]] = {
    "walk": {
        "forward_slow": "a person walks forward slowly",
        "forward_fast": "a person walks forward quickly",
        "backward": "a person walks backwards slowly",
        "left": "a person walks to the left",
    },
    "circle": {
        "cw": "a person walks clockwise in a circle",
        "ccw": "a person walks counterclockwise in a circle",
        "small": "a person walks in a small circle",
    },
    "squat_jump": {
        "low": "a person squats down a little and then jumps",
        "high": "a person squats low and jumps high",
    },
    "arm_raise": {
        "right": "a person raises their right arm",
        "left": "a person raises their left arm",
        "both": "a person raises both arms overhead",
    },
    "oscillation": {
        "sway": "a person sways side to side",
        "bounce": "a person bounces up and down in place",
        "twist": "a person twists their torso left and right",
        "wave": "a person waves their right hand",
    },
}
FAMILIES = tuple(CAPTIONS)

STYLE_CAPTION_SUFFIX = {
    "base": "",
    "amplitude": " with big exaggerated motion",
    "offset": " while leaning forward",
    "tempo": " in a quick rhythm",
}


@dataclass(frozen=True)
class StyleOp:
    """A labeled style transform applied to a generated clip."""

    label: str
    amplitude: float = 1.0
    lean: float = 0.0
    tempo: float = 1.0


BASE_STYLE = StyleOp("base")
STYLE_PRESETS = {
    "base": BASE_STYLE,
    "amplitude": StyleOp("amplitude", amplitude=1.8),
    "offset": StyleOp("offset", lean=0.25),
    "tempo": StyleOp("tempo", tempo=1.8),
}


@dataclass
class SyntheticDatasetSpec:
    families: tuple[str, ...] = FAMILIES
    per_family: int = 8
    length_range: tuple[int, int] = (40, 40)
    styles: tuple[str, ...] = ("base",)
    seed: int = 1234
    jitter: float = 0.05
    style_captions: bool = False  # append a style phrase to styled captions

    def __post_init__(self):
        for fam in self.families:
            if fam not in CAPTIONS:
                raise DataError(f"unknown motion family {fam!r}")
        for s in self.styles:
            if s not in STYLE_PRESETS:
                raise DataError(f"unknown style {s!r}")
        if self.per_family <= 0 or not self.families or not self.styles:
            raise DataError("synthetic dataset spec has zero counts")
        lo, hi = self.length_range
        if not 1 <= lo <= hi <= 196:
            raise DataError(f"bad length range {self.length_range}")


@dataclass
class MotionClip:
    motion: np.ndarray  # (L, 263)
    caption: str
    family: str
    variant: str
    style: str
    hip: np.ndarray  # (L, 3)

    @property
    def length(self) -> int:
        return self.motion.shape[0]


@dataclass
class MotionDataset:
    clips: list[MotionClip] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.clips)

    def __getitem__(self, i):
        return self.clips[i]

    def motions(self) -> list[np.ndarray]:
        return [c.motion for c in self.clips]

    def captions(self) -> list[str]:
        return [c.caption for c in self.clips]

    def subset(self, idx) -> "MotionDataset":
        return MotionDataset([self.clips[i] for i in idx])

    def digest(self) -> str:
        h = hashlib.sha256()
        for c in self.clips:
            h.update(np.ascontiguousarray(c.motion).tobytes())
            h.update(f"{c.caption}|{c.family}|{c.variant}|{c.style}".encode())
        return h.hexdigest()


def _aux_matrix() -> np.ndarray:
    rng = np.random.default_rng(263)
    return rng.standard_normal((63, AUX.stop - AUX.start)) / math.sqrt(63.0)


_AUX = _aux_matrix()


def _animate(family: str, variant: str, t: np.ndarray, p: dict, style: StyleOp):
    """Return root track (L, 3) and per-joint offsets from the rest pose (L, 22, 3)."""
    L = t.shape[0]
    tempo = style.tempo * p["tempo"]
    amp = style.amplitude * p["amp"]
    offs = np.zeros((L, N_JOINTS, 3))
    root = np.zeros((L, 3))
    root[:, 1] = PELVIS_HEIGHT
    gait = 2.0 * math.pi * 1.2 * tempo * t + p["phase"]

    def legs_swing(scale: float):
        s = np.sin(gait)
        for j, w in zip(L_LEG, (0.0, 0.15, 0.3, 0.32)):
            offs[:, j, 2] += scale * w * s
        for j, w in zip(R_LEG, (0.0, 0.15, 0.3, 0.32)):
            offs[:, j, 2] -= scale * w * s
        for j in L_ARM:
            offs[:, j, 2] -= scale * 0.2 * s
        for j in R_ARM:
            offs[:, j, 2] += scale * 0.2 * s
        root[:, 1] += scale * 0.02 * np.cos(2 * gait)

    if family == "walk":
        speed = {"forward_slow": 0.6, "forward_fast": 1.4, "backward": 0.5, "left": 0.8}[variant]
        heading = {"forward_slow": 0.0, "forward_fast": 0.0, "backward": math.pi, "left": math.pi / 2}[variant]
        heading += p["heading"]
        dist = speed * tempo * t
        root[:, 0] = p["x0"] + dist * math.sin(heading)
        root[:, 2] = p["z0"] + dist * math.cos(heading)
        legs_swing(amp * (1.3 if variant == "forward_fast" else 1.0))
    elif family == "circle":
        radius = {"cw": 1.5, "ccw": 1.5, "small": 0.7}[variant] * p["radius"]
        sign = -1.0 if variant == "cw" else 1.0
        ang = p["phase"] + sign * 0.9 * tempo * t / radius
        root[:, 0] = p["x0"] + radius * np.cos(ang)
        root[:, 2] = p["z0"] + radius * np.sin(ang)
        legs_swing(amp)
    elif family == "squat_jump":
        height = {"low": 0.25, "high": 0.55}[variant]
        u = np.clip(tempo * t / 2.0, 0.0, 1.0)
        squat = -0.35 * np.sin(math.pi * np.clip(u / 0.5, 0, 1)) * amp
        jump = height * amp * np.clip(np.sin(math.pi * (u - 0.5) / 0.3), 0, None) * (u > 0.5) * (u < 0.8)
        root[:, 0] = p["x0"]
        root[:, 2] = p["z0"]
        root[:, 1] += squat + jump
        for j in (4, 5):
            offs[:, j, 2] += -0.6 * squat
        for j in (7, 8, 10, 11):
            offs[:, j, 1] += -squat
        for j in UPPER:
            offs[:, j, 2] += 0.4 * squat
    elif family == "arm_raise":
        u = 0.5 - 0.5 * np.cos(math.pi * np.clip(tempo * t / 1.5, 0, 1))
        arms = {"right": (R_ARM,), "left": (L_ARM,), "both": (L_ARM, R_ARM)}[variant]
        root[:, 0] = p["x0"]
        root[:, 2] = p["z0"]
        for arm in arms:
            for j, reach in zip(arm, (0.26, 0.5)):
                offs[:, j, 1] += amp * reach * u
                offs[:, j, 0] -= np.sign(REST_POSE[j, 0]) * amp * 0.6 * reach * u
    elif family == "oscillation":
        w = 2.0 * math.pi * 0.8 * tempo * t + p["phase"]
        root[:, 0] = p["x0"]
        root[:, 2] = p["z0"]
        if variant == "sway":
            root[:, 0] += 0.12 * amp * np.sin(w)
            for j in UPPER:
                offs[:, j, 0] += 0.15 * amp * np.sin(w) * max(REST_POSE[j, 1], 0) / 0.6
        elif variant == "bounce":
            root[:, 1] += 0.1 * amp * np.sin(2 * w)
            for j in (4, 5):
                offs[:, j, 2] += 0.15 * amp * np.sin(2 * w)
        elif variant == "twist":
            for j in UPPER:
                x, _, z = REST_POSE[j]
                a = 0.5 * amp * np.sin(w)
                offs[:, j, 0] += x * (np.cos(a) - 1) - z * np.sin(a)
                offs[:, j, 2] += x * np.sin(a) + z * (np.cos(a) - 1)
        else:  # wave
            offs[:, 19, 1] += 0.35
            offs[:, 21, 1] += 0.55 + 0.1 * amp
            offs[:, 21, 0] += 0.25 * amp * np.sin(3 * w)
    else:
        raise DataError(f"unknown family {family!r}")

    if style.lean:
        for j in UPPER:
            offs[:, j, 2] += style.lean * max(REST_POSE[j, 1], 0.0)
    return root, offs


def features_from_joints(root: np.ndarray, local: np.ndarray) -> np.ndarray:
    """Assemble the 263-channel representation from root track and relative joints."""
    L = root.shape[0]
    rel = local[:, 1:, :].reshape(L, 63)
    glob = local + root[:, None, :]
    if L > 1:
        vel = np.gradient(glob, axis=0) * FPS
    else:
        vel = np.zeros_like(glob)
    feet_h = glob[:, FEET, 1]
    contact = 1.0 / (1.0 + np.exp((feet_h - 0.08) / 0.02))
    out = np.zeros((L, FEATURE_DIM))
    out[:, ROOT_POS] = root
    out[:, LOCAL_POS] = rel
    out[:, VELOCITY] = vel.reshape(L, 66)
    out[:, AUX] = rel @ _AUX
    out[:, CONTACT] = contact
    return out


def joints_from_features(m: np.ndarray) -> np.ndarray:
    """Global joint positions ``(L, 22, 3)`` read back from the feature layout."""
    m = np.asarray(m)
    L = m.shape[0]
    root = m[:, ROOT_POS]
    rel = m[:, LOCAL_POS].reshape(L, 21, 3)
    joints = np.concatenate([np.zeros((L, 1, 3)), rel], axis=1)
    return joints + root[:, None, :]


def hip_track(m: np.ndarray) -> np.ndarray:
    return np.asarray(m)[:, ROOT_POS].copy()


def render_clip(
    family: str,
    variant: str,
    length: int,
    params: dict,
    style: StyleOp = BASE_STYLE,
    style_caption: bool = False,
) -> MotionClip:
    t = np.arange(length) / FPS
    root, offs = _animate(family, variant, t, params, style)
    local = REST_POSE[None] + offs
    local[:, 0] = 0.0
    motion = features_from_joints(root, local)
    caption = CAPTIONS[family][variant]
    if style_caption:
        caption += STYLE_CAPTION_SUFFIX.get(style.label, "")
    return MotionClip(motion, caption, family, variant, style.label, root.copy())


def default_params() -> dict:
    return {"amp": 1.0, "tempo": 1.0, "phase": 0.0, "heading": 0.0, "radius": 1.0, "x0": 0.0, "z0": 0.0}


def _draw_params(rng: np.random.Generator, jitter: float) -> dict:
    p = default_params()
    if jitter > 0:
        p["amp"] = 1.0 + jitter * rng.uniform(-1, 1)
        p["tempo"] = 1.0 + jitter * rng.uniform(-1, 1)
        p["phase"] = jitter * rng.uniform(-math.pi, math.pi)
        p["heading"] = jitter * rng.uniform(-0.5, 0.5)
        p["radius"] = 1.0 + jitter * rng.uniform(-1, 1)
        p["x0"] = jitter * rng.uniform(-1, 1)
        p["z0"] = jitter * rng.uniform(-1, 1)
    return p


def generate_synthetic_dataset(spec: SyntheticDatasetSpec) -> MotionDataset:
    """Expand ``spec`` into clips; identical specs give byte-identical datasets."""
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.length_range
    clips = []
    for style_name in spec.styles:
        style = STYLE_PRESETS[style_name]
        for fam in spec.families:
            variants = list(CAPTIONS[fam])
            for i in range(spec.per_family):
                variant = variants[i % len(variants)]
                length = int(rng.integers(lo, hi + 1))
                params = _draw_params(rng, spec.jitter)
                clips.append(render_clip(fam, variant, length, params, style, spec.style_captions))
    return MotionDataset(clips)


def distinct_pairs(n: int = 16, length: int = 40) -> MotionDataset:
    """``n`` caption/motion pairs with pairwise distinct captions (one per variant)."""
    combos = [(f, v) for f in FAMILIES for v in CAPTIONS[f]]
    if n > len(combos):
        raise DataError(f"only {len(combos)} distinct captions available")
    return MotionDataset([render_clip(f, v, length, default_params()) for f, v in combos[:n]])


def amplitude_statistic(m: np.ndarray) -> float:
    """Mean temporal std of the relative joint positions (motion energy of the pose)."""
    return float(np.asarray(m)[:, LOCAL_POS].std(axis=0).mean())


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, motions, floor: float = 1e-2) -> "Normalizer":
        cat = np.concatenate([np.asarray(m) for m in motions], axis=0)
        return cls(cat.mean(axis=0), np.maximum(cat.std(axis=0), floor))

    def normalize(self, m):
        return (m - self.mean) / self.std

    def denormalize(self, m):
        return m * self.std + self.mean
