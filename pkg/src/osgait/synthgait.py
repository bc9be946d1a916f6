"""Parametric walking-body simulator emitting radar-like point-cloud recordings.

A subject is a stick figure (torso, head, two arms, two legs) whose limbs swing
sinusoidally at the gait frequency while the body centre follows a smooth
random walk inside the room. Each frame, a Poisson number of points is
scattered over the body segments; every point carries the radial velocity seen
from a fixed sensor in a room corner.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .dataio import Modality, PointFrame, RecordingSegment

ROOM = (7.8, 7.3)
ROOM_HEIGHT = 2.5
SENSOR = np.array([0.0, 0.0, 1.0])
WALL_MARGIN = 1.0
TURN_NOISE = 0.25           # rad/s heading jitter of the random walk
PHONE_SPEED_FACTOR = 0.85
PHONE_ARM_FACTOR = 0.1      # swing left on the arm holding the phone
POCKET_ARM_FACTOR = 0.1

# Deliberately exaggerated ranges: with 32 points per frame and per-frame
# centering, realistic adult spreads leave too little identity signal.
PARAM_RANGES = {
    "height": (1.20, 2.20),
    "torso_speed_mean": (0.4, 1.6),
    "gait_frequency": (0.5, 2.2),
    "arm_swing_amplitude": (0.0, 0.80),
    "leg_swing_amplitude": (0.05, 0.80),
    "point_rate_mean": (30.0, 90.0),
    "noise_sigma": (0.01, 0.03),
    "shoulder_width": (0.20, 0.80),
    "limb_point_share": (0.20, 0.90),
}

# relative share of points per body segment, before the subject's limb share
SEGMENT_WEIGHTS = {"torso": 0.35, "head": 0.07, "leg_l": 0.17, "leg_r": 0.17,
                   "arm_l": 0.12, "arm_r": 0.12}
_LIMBS = ("leg_l", "leg_r", "arm_l", "arm_r")


def segment_probabilities(limb_point_share: float) -> np.ndarray:
    w = np.array(list(SEGMENT_WEIGHTS.values()))
    limb = np.array([k in _LIMBS for k in SEGMENT_WEIGHTS])
    w[limb] *= limb_point_share / w[limb].sum()
    w[~limb] *= (1.0 - limb_point_share) / w[~limb].sum()
    return w


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: int
    height: float
    torso_speed_mean: float
    gait_frequency: float
    arm_swing_amplitude: float
    leg_swing_amplitude: float
    point_rate_mean: float
    noise_sigma: float
    seed: int
    velocity_noise_sigma: float = 0.05
    shoulder_width: float = 0.40
    limb_point_share: float = 0.58

    def __post_init__(self):
        for name in ("height", "point_rate_mean"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("torso_speed_mean", "arm_swing_amplitude", "leg_swing_amplitude",
                     "noise_sigma", "velocity_noise_sigma", "shoulder_width"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.limb_point_share < 1.0:
            raise ValueError("limb_point_share must lie in (0, 1)")
        if not 0.5 <= self.gait_frequency <= 2.5:
            raise ValueError("gait_frequency must lie in [0.5, 2.5] Hz")

    def as_vector(self) -> np.ndarray:
        """Parameters normalised to [0, 1] by their generator ranges."""
        return np.array([(getattr(self, k) - lo) / (hi - lo) for k, (lo, hi) in PARAM_RANGES.items()])

    def to_dict(self) -> dict:
        return asdict(self)


def generate_profiles(M: int, seed: int, separability: float = 1.0) -> list[SubjectProfile]:
    """Latin-hypercube profiles: every parameter axis is cut into M cells and
    each subject owns a distinct cell per axis. ``separability`` shrinks the
    spread of cell centres toward the middle of each range."""
    if M < 2:
        raise ValueError("need at least 2 subjects")
    if not 0 < separability <= 1:
        raise ValueError("separability must be in (0, 1]")
    rng = np.random.default_rng(seed)
    cols = {}
    for name, (lo, hi) in PARAM_RANGES.items():
        cell = rng.permutation(M)
        u = (cell + 0.5) / M
        u = 0.5 + separability * (u - 0.5)
        cols[name] = lo + (hi - lo) * u
    seeds = rng.integers(0, 2**31 - 1, size=M)
    return [
        SubjectProfile(subject_id=i + 1, seed=int(seeds[i]),
                       **{k: float(v[i]) for k, v in cols.items()})
        for i in range(M)
    ]


def _trajectory(profile, modality, n, dt, rng):
    speed = profile.torso_speed_mean * (PHONE_SPEED_FACTOR if modality == Modality.smartphone else 1.0)
    W, D = ROOM
    lo = np.array([WALL_MARGIN, WALL_MARGIN])
    hi = np.array([W - WALL_MARGIN, D - WALL_MARGIN])
    pos = lo + rng.uniform(size=2) * (hi - lo)
    theta = rng.uniform(0, 2 * np.pi)
    turn = 0.0
    centres = np.zeros((n, 2))
    headings = np.zeros(n)
    for t in range(n):
        centres[t], headings[t] = pos, theta
        turn = 0.8 * turn + rng.normal(0.0, TURN_NOISE)
        theta += turn * dt * 4
        step = speed * dt * np.array([np.cos(theta), np.sin(theta)])
        nxt = pos + step
        if np.any(nxt < lo) or np.any(nxt > hi):
            # turn back toward the room centre
            to_c = (lo + hi) / 2 - pos
            theta = np.arctan2(to_c[1], to_c[0]) + rng.normal(0.0, 0.3)
            turn = 0.0
            nxt = np.clip(pos + speed * dt * np.array([np.cos(theta), np.sin(theta)]), lo, hi)
        pos = nxt
    return centres, headings, speed


def simulate_recording(profile: SubjectProfile, duration_s: float, frame_rate_hz: float = 10.0,
                       modality: Modality | int = Modality.free_walk,
                       segment_id: int = 0) -> RecordingSegment:
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    modality = Modality(modality)
    rng = np.random.default_rng([profile.seed, int(modality)])
    n = int(round(duration_s * frame_rate_hz))
    dt = 1.0 / frame_rate_hz
    centres, headings, speed = _trajectory(profile, modality, n, dt, rng)
    H = profile.height
    omega = 2 * np.pi * profile.gait_frequency
    phase0 = rng.uniform(0, 2 * np.pi)
    a_leg = profile.leg_swing_amplitude
    a_arm = {"l": profile.arm_swing_amplitude, "r": profile.arm_swing_amplitude}
    if modality == Modality.smartphone:
        a_arm["r"] *= PHONE_ARM_FACTOR
    elif modality == Modality.hands_in_pockets:
        a_arm = {"l": POCKET_ARM_FACTOR * a_arm["l"], "r": POCKET_ARM_FACTOR * a_arm["r"]}
    names = list(SEGMENT_WEIGHTS)
    probs = segment_probabilities(profile.limb_point_share)
    half_w = profile.shoulder_width / 2
    sigma = profile.noise_sigma

    frames = []
    for t in range(n):
        phi = omega * t * dt + phase0
        h = np.array([np.cos(headings[t]), np.sin(headings[t]), 0.0])
        lat = np.array([-h[1], h[0], 0.0])
        up = np.array([0.0, 0.0, 1.0])
        base = np.array([centres[t, 0], centres[t, 1], 0.0])
        body_vel = speed * h
        bob = 0.04 * a_leg * np.cos(2 * phi)
        bob_rate = -0.08 * a_leg * omega * np.sin(2 * phi)
        hip = base + (0.53 * H + bob) * up
        shoulder = base + (0.82 * H + bob) * up

        count = rng.poisson(profile.point_rate_mean)
        seg_idx = rng.choice(len(names), size=count, p=probs)
        frac = rng.uniform(size=count)
        pts = np.zeros((count, 3))
        vel = np.tile(body_vel + bob_rate * up, (count, 1))
        for k, name in enumerate(names):
            sel = seg_idx == k
            m = int(sel.sum())
            if m == 0:
                continue
            s = frac[sel][:, None]
            if name == "torso":
                spread = rng.uniform(-half_w, half_w, size=(m, 1)) * lat + rng.uniform(-0.08, 0.08, size=(m, 1)) * h
                pts[sel] = hip + s * (shoulder - hip) + spread
            elif name == "head":
                pts[sel] = base + (0.93 * H + bob) * up + rng.uniform(-0.08, 0.08, size=(m, 3))
            else:
                side = 1.0 if name.endswith("l") else -1.0
                ph = phi if side > 0 else phi + np.pi
                if name.startswith("leg"):
                    root = hip + 0.5 * half_w * side * lat
                    tip = root + a_leg * np.sin(ph) * h - 0.5 * H * up
                    tip_rate = a_leg * omega * np.cos(ph) * h
                else:
                    amp = a_arm["l" if side > 0 else "r"]
                    root = shoulder + half_w * side * lat
                    if modality == Modality.smartphone and side < 0:
                        tip = root + 0.3 * h - 0.25 * H * up
                    elif modality == Modality.hands_in_pockets:
                        tip = root - 0.05 * side * lat - 0.3 * H * up - amp * np.sin(ph) * h
                    else:
                        tip = root - amp * np.sin(ph) * h - 0.35 * H * up
                    tip_rate = -amp * omega * np.cos(ph) * h
                    if modality == Modality.smartphone and side < 0:
                        tip_rate = np.zeros(3)
                pts[sel] = root + s * (tip - root)
                vel[sel] += s * tip_rate
        los = pts - SENSOR
        radial = np.einsum("ij,ij->i", vel, los) / np.linalg.norm(los, axis=1)
        noise = np.clip(rng.standard_normal((count, 3)), -3, 3) * sigma
        radial = radial + profile.velocity_noise_sigma * rng.standard_normal(count)
        frame = np.column_stack([pts + noise, radial]).astype(np.float32)
        frames.append(PointFrame(frame, t))
    return RecordingSegment(profile.subject_id, modality, frames, frame_rate_hz, segment_id)


def static_variant(profile: SubjectProfile) -> SubjectProfile:
    return replace(profile, torso_speed_mean=0.0, arm_swing_amplitude=0.0,
                   leg_swing_amplitude=0.0, velocity_noise_sigma=0.0)


def generate_dataset(M: int = 10, seed: int = 0, separability: float = 0.8, duration_s: float = 60.0,
                     frame_rate_hz: float = 10.0, modalities=(0, 1, 2)):
    """Profiles plus one recording per (subject, modality), segment ids in that order."""
    profiles = generate_profiles(M, seed, separability)
    segments = []
    for p in profiles:
        for mod in modalities:
            segments.append(simulate_recording(p, duration_s, frame_rate_hz, mod, len(segments)))
    return profiles, segments


PROFILE_FIELDS = [f.name for f in fields(SubjectProfile)]
