"""Synthetic layered scenes with exact flow and occlusion ground truth.

A scene is a stack of layers: a background that always covers the frame
(its texture lives on an extended canvas so translation reveals no
holes) plus a few rectangular sprites, later sprites in front. Every
layer moves by its own integer translation between the two frames, so
ground-truth flow is exact and a pixel is occluded iff its destination
leaves the frame (occ_out) or is covered there by a different, nearer
layer (occ_in).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class SceneConfig:
    """Knobs for the scene sampler. Sizes and shifts are in pixels."""

    height: int = 64
    width: int = 64
    sprite_count: tuple[int, int] = (2, 4)
    sprite_size: tuple[int, int] = (16, 32)
    sprite_shift: int = 12
    background_shift: int = 4
    texture: str = "smooth_noise"
    smoothing: int = 2
    align: int = 1
    seed: int = 0

    def validate(self):
        h, w = self.height, self.width
        if h % 8 or w % 8 or h < 16 or w < 16:
            raise ConfigError(f"scene size must be multiples of 8 and at least 16, got {h}x{w}")
        lo, hi = self.sprite_count
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad sprite_count range {self.sprite_count}")
        slo, shi = self.sprite_size
        if slo < 1 or shi < slo or shi > min(h, w):
            raise ConfigError(f"bad sprite_size range {self.sprite_size} for {h}x{w}")
        limit = min(h, w) // 2
        if not (0 <= self.sprite_shift < limit) or not (0 <= self.background_shift < limit):
            raise ConfigError(f"translation bounds must lie in [0, {limit}), got sprite={self.sprite_shift} background={self.background_shift}")
        if hi == 0 and self.background_shift == 0:
            raise ConfigError("degenerate config: no sprites and a static background")
        if self.texture != "smooth_noise":
            raise ConfigError(f"unknown texture kind {self.texture!r}")
        if self.align < 1:
            raise ConfigError(f"align must be >= 1, got {self.align}")


@dataclass
class SceneLayout:
    """Geometry only: rects are (x0, y0, w, h); translations[0] is the background."""

    height: int
    width: int
    rects: list
    translations: np.ndarray  # [n_layers, 2] int, (dx, dy)


@dataclass
class SceneSample:
    frame0: np.ndarray  # [3,H,W] float32 in [0,1]
    frame1: np.ndarray  # [3,H,W] float32 in [0,1]
    flow_gt: np.ndarray  # [2,H,W] float32, (dx, dy) of each frame0 pixel's layer
    occ_gt: np.ndarray  # [H,W] uint8, occ_in | occ_out
    occ_in: np.ndarray  # [H,W] uint8, destination covered by a nearer layer
    occ_out: np.ndarray  # [H,W] uint8, destination outside the frame
    zorder: np.ndarray  # [H,W] uint8, frame0 top layer index (0 = background)

    # field order is also the on-disk payload order
    FIELD_SPECS = (
        ("frame0", 3, np.float32),
        ("frame1", 3, np.float32),
        ("flow_gt", 2, np.float32),
        ("occ_gt", 0, np.uint8),
        ("occ_in", 0, np.uint8),
        ("occ_out", 0, np.uint8),
        ("zorder", 0, np.uint8),
    )


def _snap(value: int, align: int) -> int:
    return (value // align) * align


def _sample_translation(rng, bound: int, align: int) -> tuple[int, int]:
    if bound == 0:
        return (0, 0)
    k = bound // align
    if k == 0:
        return (0, 0)
    return (int(rng.integers(-k, k + 1)) * align, int(rng.integers(-k, k + 1)) * align)


def sample_layout(cfg: SceneConfig, rng: np.random.Generator) -> SceneLayout:
    """Draw sprite rects and pairwise-distinct integer translations."""
    cfg.validate()
    h, w, al = cfg.height, cfg.width, cfg.align
    count = int(rng.integers(cfg.sprite_count[0], cfg.sprite_count[1] + 1))
    rects = []
    for _ in range(count):
        sw = max(al, _snap(int(rng.integers(cfg.sprite_size[0], cfg.sprite_size[1] + 1)), al))
        sh = max(al, _snap(int(rng.integers(cfg.sprite_size[0], cfg.sprite_size[1] + 1)), al))
        sw, sh = min(sw, w), min(sh, h)
        x0 = _snap(int(rng.integers(0, w - sw + 1)), al)
        y0 = _snap(int(rng.integers(0, h - sh + 1)), al)
        rects.append((x0, y0, sw, sh))

    # distinct motions: same-motion overlaps would hide real occlusions
    translations = []
    for layer in range(count + 1):
        bound = cfg.background_shift if layer == 0 else cfg.sprite_shift
        for attempt in range(1000):
            t = _sample_translation(rng, bound, al)
            if t not in translations:
                translations.append(t)
                break
        else:
            raise ConfigError(f"cannot draw {count + 1} distinct translations with shift {bound}, align {al}")
    return SceneLayout(h, w, rects, np.asarray(translations, dtype=np.int64))


def layer_maps(layout: SceneLayout) -> tuple[np.ndarray, np.ndarray]:
    """Top-layer index per pixel for frame0 and frame1 (0 = background)."""
    h, w = layout.height, layout.width
    z0 = np.zeros((h, w), dtype=np.uint8)
    z1 = np.zeros((h, w), dtype=np.uint8)
    for k, (x0, y0, sw, sh) in enumerate(layout.rects):
        z0[y0 : y0 + sh, x0 : x0 + sw] = k + 1
        dx, dy = layout.translations[k + 1]
        xa, xb = max(0, x0 + dx), min(w, x0 + sw + dx)
        ya, yb = max(0, y0 + dy), min(h, y0 + sh + dy)
        if xa < xb and ya < yb:
            z1[ya:yb, xa:xb] = k + 1
    return z0, z1


def compute_occlusion_gt(layout: SceneLayout) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(occ_gt, occ_in, occ_out) from layer geometry alone.

    occ_out: the pixel's destination p + t(layer) falls outside the
    frame. occ_in: the destination stays inside but frame1's top layer
    there is not the pixel's own layer (a strictly nearer layer moved in
    front; the own layer always covers its own destination).
    """
    h, w = layout.height, layout.width
    z0, z1 = layer_maps(layout)
    t = layout.translations[z0]  # [H,W,2]
    ys, xs = np.mgrid[0:h, 0:w]
    destx = xs + t[..., 0]
    desty = ys + t[..., 1]
    inb = (destx >= 0) & (destx < w) & (desty >= 0) & (desty < h)
    occ_out = (~inb).astype(np.uint8)
    dxc = np.clip(destx, 0, w - 1)
    dyc = np.clip(desty, 0, h - 1)
    occ_in = (inb & (z1[dyc, dxc] != z0)).astype(np.uint8)
    occ = (occ_in | occ_out).astype(np.uint8)
    return occ, occ_in, occ_out


def backward_flow_gt(layout: SceneLayout) -> np.ndarray:
    """Exact frame1->frame0 flow: minus the frame1 top layer's translation."""
    _, z1 = layer_maps(layout)
    t = layout.translations[z1]
    return -np.moveaxis(t, -1, 0).astype(np.float32)


def _box1d(x: np.ndarray, k: int, axis: int) -> np.ndarray:
    x = np.moveaxis(x, axis, 0)
    p = k // 2
    xp = np.pad(x, [(p, k - 1 - p)] + [(0, 0)] * (x.ndim - 1), mode="edge")
    c = np.cumsum(xp, axis=0)
    out = np.empty_like(x)
    out[0] = c[k - 1]
    out[1:] = c[k:] - c[:-k]
    return np.moveaxis(out / k, 0, axis)


def _smooth_noise(rng, shape, passes: int) -> np.ndarray:
    tex = rng.random(shape)
    for _ in range(passes):
        tex = _box1d(tex, 5, -1)
        tex = _box1d(tex, 5, -2)
    mu = tex.mean(axis=(-2, -1), keepdims=True)
    sd = tex.std(axis=(-2, -1), keepdims=True)
    z = (tex - mu) / np.maximum(sd, 1e-8)
    level = rng.uniform(0.3, 0.7)
    amp = rng.uniform(0.12, 0.3)
    return np.clip(level + amp * z, 0.0, 1.0)


def generate_scene(cfg: SceneConfig, seed: int | None = None) -> SceneSample:
    sample, _ = generate_scene_with_layout(cfg, seed)
    return sample


def generate_scene_with_layout(cfg: SceneConfig, seed: int | None = None) -> tuple[SceneSample, SceneLayout]:
    """Render one scene; also hand back the layout for exact re-derivations."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    layout = sample_layout(cfg, rng)
    h, w = layout.height, layout.width

    margin = int(np.abs(layout.translations).max()) if len(layout.translations) else 0
    bg = _smooth_noise(rng, (3, h + 2 * margin, w + 2 * margin), cfg.smoothing)
    sprites = [_smooth_noise(rng, (3, sh, sw), cfg.smoothing) for (_, _, sw, sh) in layout.rects]

    ys, xs = np.mgrid[0:h, 0:w]
    bx, by = layout.translations[0]
    frame0 = bg[:, margin + ys, margin + xs]
    frame1 = bg[:, margin + ys - by, margin + xs - bx]
    for k, (x0, y0, sw, sh) in enumerate(layout.rects):
        frame0[:, y0 : y0 + sh, x0 : x0 + sw] = sprites[k]
        dx, dy = layout.translations[k + 1]
        xa, xb = max(0, x0 + dx), min(w, x0 + sw + dx)
        ya, yb = max(0, y0 + dy), min(h, y0 + sh + dy)
        if xa < xb and ya < yb:
            frame1[:, ya:yb, xa:xb] = sprites[k][:, ya - (y0 + dy) : yb - (y0 + dy), xa - (x0 + dx) : xb - (x0 + dx)]

    z0, _ = layer_maps(layout)
    flow = np.moveaxis(layout.translations[z0], -1, 0).astype(np.float32)
    occ, occ_in, occ_out = compute_occlusion_gt(layout)
    sample = SceneSample(
        frame0=frame0.astype(np.float32),
        frame1=frame1.astype(np.float32),
        flow_gt=flow,
        occ_gt=occ,
        occ_in=occ_in,
        occ_out=occ_out,
        zorder=z0,
    )
    return sample, layout


def generate_dataset(cfg: SceneConfig, count: int, seed: int | None = None) -> list[SceneSample]:
    """count scenes from consecutive seeds starting at cfg.seed (or seed)."""
    base = cfg.seed if seed is None else seed
    return [generate_scene(cfg, base + i) for i in range(count)]
