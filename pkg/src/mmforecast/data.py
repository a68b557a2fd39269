"""Procedural semantic clips with controlled multimodality.

Each clip shows a road scene where a car occludes a patch of road in all
input frames and has driven past it by the target frame. The revealed
patch contains pedestrians with probability p_mode, otherwise clear road;
everything else is identical between the two futures. Clips are a pure
function of (params, seed).

On-disk layout:
    root/manifest.json
    root/{train,val,test}/clip_<id>/frame_<t>.png   8-bit class indices
    root/{train,val,test}/clip_<id>/clip.json
"""

import hashlib
import json
import os
from dataclasses import dataclass, asdict, field

import numpy as np
from PIL import Image

from .core import ClassTable, SegMap, default_class_table

ROAD, SIDEWALK, BUILDING, SKY, CAR, PEDESTRIAN, VOID = range(7)

MODE_CLEAR = "clear_road"
MODE_PEDESTRIAN = "pedestrian_revealed"

FORMAT_VERSION = 1

# seed offsets keeping split seeds disjoint
SPLIT_SEED_OFFSETS = {"train": 0, "val": 10_000_000, "test": 20_000_000}


class DatasetError(Exception):
    pass


class ParseError(DatasetError):
    """Malformed clip file; message names the offending field/file."""


@dataclass(frozen=True)
class ScenarioParams:
    image_size: tuple = (64, 128)
    n_input_frames: int = 3
    input_stride: int = 3
    horizon: int = 9
    p_mode: float = 0.5
    occluder_speed: int = 3
    rng_seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.p_mode <= 1.0):
            raise ValueError(f"p_mode must be in [0, 1], got {self.p_mode}")
        if self.horizon not in (3, 9):
            raise ValueError("horizon must be 3 or 9")
        if self.n_input_frames < 1 or self.input_stride < 1:
            raise ValueError("need at least one input frame and positive stride")
        if self.occluder_speed < 1:
            raise ValueError("occluder_speed must be >= 1")

    def params_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def input_times(self):
        s = self.input_stride
        return [-s * (self.n_input_frames - i) for i in range(self.n_input_frames)]


@dataclass(frozen=True)
class ModeDescriptor:
    mode_id: str
    revealed_region: tuple  # (y0, y1, x0, x1), half-open


@dataclass
class SequenceClip:
    input_frames: list
    target_frame: SegMap
    last_input_seg: SegMap
    mode: str
    clip_id: str
    descriptor: ModeDescriptor = None
    times: list = field(default_factory=list)
    target_time: int = 0


def _scene_geometry(params, rng):
    """Static layout plus occluder trajectory for one clip. Raises if the
    image cannot contain the full trajectory."""
    h, w = params.image_size
    sky_top = 1  # top row is void (unlabeled border)
    building_top = max(2, int(0.20 * h))
    sidewalk_top = int(0.45 * h)
    road_top = int(0.55 * h)

    speed = params.occluder_speed
    span_in = (params.n_input_frames - 1) * params.input_stride * speed
    region_w = 10
    car_w = span_in + region_w + 2
    car_h = min(14, h - road_top - 2)
    # region must be clear of the car at target time
    if region_w > (params.input_stride + params.horizon) * speed:
        raise DatasetError("occluder too slow to reveal the region by the target frame")

    x_min = span_in  # car left edge at t-9 must stay inside
    x_max = w - car_w - (params.input_stride + params.horizon) * speed
    if x_max <= x_min:
        raise DatasetError(
            f"image width {w} too small to contain occluder trajectory "
            f"(car width {car_w}, speed {speed})")

    x_c = int(rng.integers(x_min, x_max))  # car left edge at t-3
    car_y0 = road_top + 1
    skyline = building_top + rng.integers(0, 3, size=8)

    return {
        "h": h, "w": w, "sky_top": sky_top, "building_top": building_top,
        "sidewalk_top": sidewalk_top, "road_top": road_top,
        "speed": speed, "car_w": car_w, "car_h": car_h, "x_c": x_c,
        "car_y0": car_y0, "region_w": region_w, "skyline": skyline,
    }


def _render_frame(geo, params, time, table, pedestrians=None):
    h, w = geo["h"], geo["w"]
    f = np.empty((h, w), dtype=np.int64)
    f[:] = SKY
    f[0:geo["sky_top"], :] = VOID
    seg_w = max(1, w // len(geo["skyline"]))
    for i, top in enumerate(geo["skyline"]):
        f[int(top):geo["sidewalk_top"], i * seg_w:(i + 1) * seg_w] = BUILDING
    f[geo["sidewalk_top"]:geo["road_top"], :] = SIDEWALK
    f[geo["road_top"]:, :] = ROAD

    if pedestrians is not None:
        for (y0, y1, x0, x1) in pedestrians:
            f[y0:y1, x0:x1] = PEDESTRIAN

    # occluder car; moving right, left edge at x_c when time == -input_stride
    x = geo["x_c"] + (time + params.input_stride) * geo["speed"]
    y0 = geo["car_y0"]
    f[y0:y0 + geo["car_h"], max(0, x):min(w, x + geo["car_w"])] = CAR
    return SegMap(data=f, table=table)


def _pedestrian_layout(geo, rng):
    """Pedestrian rectangles inside the revealed region. Two wide figures
    (a small group) rather than thin columns, so they stay visible after
    feature downsampling."""
    y0, y1 = geo["car_y0"], geo["car_y0"] + geo["car_h"]
    x0 = geo["x_c"]
    peds = []
    for i in range(2):
        px = x0 + 1 + i * 4
        top = y0 + int(rng.integers(0, 2))
        peds.append((top, min(y1, top + geo["car_h"] - 2), px, px + 4))
    return peds


def generate_clip(params: ScenarioParams, seed: int, mode=None,
                  table: ClassTable = None) -> SequenceClip:
    """Deterministic clip from (params, seed). `mode` overrides the random
    mode draw (used for counterfactual pairs); the past is unaffected."""
    table = table or default_class_table()
    rng = np.random.default_rng(np.random.SeedSequence([params.rng_seed, seed]))
    geo = _scene_geometry(params, rng)
    ped_layout = _pedestrian_layout(geo, rng)  # drawn before the mode coin
    realized = MODE_PEDESTRIAN if rng.random() < params.p_mode else MODE_CLEAR
    if mode is not None:
        realized = mode

    inputs = [_render_frame(geo, params, t, table) for t in params.input_times]
    peds = ped_layout if realized == MODE_PEDESTRIAN else None
    target = _render_frame(geo, params, params.horizon, table, pedestrians=peds)

    region = (geo["car_y0"], geo["car_y0"] + geo["car_h"],
              geo["x_c"], geo["x_c"] + geo["region_w"])
    return SequenceClip(
        input_frames=inputs,
        target_frame=target,
        last_input_seg=inputs[-1],
        mode=realized,
        clip_id=f"{seed:08d}",
        descriptor=ModeDescriptor(mode_id=realized, revealed_region=region),
        times=list(params.input_times),
        target_time=params.horizon,
    )


def generate_counterfactual_pair(params, seed, table=None):
    """Both futures of the same past; never placed in training splits."""
    clear = generate_clip(params, seed, mode=MODE_CLEAR, table=table)
    ped = generate_clip(params, seed, mode=MODE_PEDESTRIAN, table=table)
    return clear, ped


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _write_frame_png(path, seg: SegMap):
    Image.fromarray(seg.data.astype(np.uint8), mode="L").save(path)


def _read_frame_png(path, table):
    arr = np.asarray(Image.open(path), dtype=np.int64)
    return SegMap(data=arr, table=table)


def write_clip(clip: SequenceClip, params, clip_dir):
    os.makedirs(clip_dir, exist_ok=True)
    for t, frame in zip(clip.times, clip.input_frames):
        _write_frame_png(os.path.join(clip_dir, f"frame_{t}.png"), frame)
    _write_frame_png(os.path.join(clip_dir, f"frame_{clip.target_time}.png"),
                     clip.target_frame)
    meta = {
        "clip_id": clip.clip_id,
        "mode": clip.mode,
        "input_times": clip.times,
        "target_time": clip.target_time,
        "revealed_region": list(clip.descriptor.revealed_region),
        "params_hash": params.params_hash(),
    }
    with open(os.path.join(clip_dir, "clip.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_clip(clip_dir, table=None) -> SequenceClip:
    table = table or default_class_table()
    meta_path = os.path.join(clip_dir, "clip.json")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise ParseError(f"{clip_dir}: missing clip.json")
    except json.JSONDecodeError as e:
        raise ParseError(f"{meta_path}: invalid JSON ({e})")
    for key in ("clip_id", "mode", "input_times", "target_time", "revealed_region"):
        if key not in meta:
            raise ParseError(f"{meta_path}: missing field '{key}'")
    if meta["mode"] not in (MODE_CLEAR, MODE_PEDESTRIAN):
        raise ParseError(f"{meta_path}: invalid field 'mode' = {meta['mode']!r}")

    def read(t):
        p = os.path.join(clip_dir, f"frame_{t}.png")
        try:
            return _read_frame_png(p, table)
        except FileNotFoundError:
            raise ParseError(f"{clip_dir}: missing frame_{t}.png")
        except (OSError, ValueError) as e:
            raise ParseError(f"{p}: unreadable frame ({e})")

    inputs = [read(t) for t in meta["input_times"]]
    target = read(meta["target_time"])
    return SequenceClip(
        input_frames=inputs,
        target_frame=target,
        last_input_seg=inputs[-1],
        mode=meta["mode"],
        clip_id=meta["clip_id"],
        descriptor=ModeDescriptor(mode_id=meta["mode"],
                                  revealed_region=tuple(meta["revealed_region"])),
        times=list(meta["input_times"]),
        target_time=meta["target_time"],
    )


def write_dataset(params: ScenarioParams, n_train, n_val, n_test, root,
                  overwrite=False, table=None):
    """Writes disjoint-seeded splits plus a manifest; refuses a non-empty
    target directory unless overwrite is set."""
    table = table or default_class_table()
    if os.path.isdir(root) and os.listdir(root) and not overwrite:
        raise DatasetError(f"{root} exists and is not empty (pass overwrite)")
    counts = {"train": n_train, "val": n_val, "test": n_test}
    os.makedirs(root, exist_ok=True)
    for split, n in counts.items():
        split_dir = os.path.join(root, split)
        os.makedirs(split_dir, exist_ok=True)
        off = SPLIT_SEED_OFFSETS[split]
        for i in range(n):
            seed = off + i
            clip = generate_clip(params, seed, table=table)
            write_clip(clip, params, os.path.join(split_dir, f"clip_{clip.clip_id}"))
    manifest = {
        "format_version": FORMAT_VERSION,
        "params": asdict(params),
        "params_hash": params.params_hash(),
        "counts": counts,
        "split_seed_offsets": SPLIT_SEED_OFFSETS,
    }
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def read_manifest(root):
    with open(os.path.join(root, "manifest.json")) as fh:
        return json.load(fh)


def iterate_split(root, split, table=None):
    """Yields clips of one split in clip-id order; empty dir yields nothing."""
    split_dir = os.path.join(root, split)
    if not os.path.isdir(split_dir):
        return
    for name in sorted(os.listdir(split_dir)):
        d = os.path.join(split_dir, name)
        if os.path.isdir(d) and name.startswith("clip_"):
            yield load_clip(d, table=table)
