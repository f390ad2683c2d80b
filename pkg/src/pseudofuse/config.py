"""Pipeline configuration and its ``key: value`` text format.

Tuple values are whitespace separated, booleans are ``true``/``false`` and
scene settings use a ``scene.`` prefix, e.g.::

    keypoint_count: 2048
    radii: 0.4 0.8 1.2 2.4 4.8
    caaf: false
    scene.n_boxes: 1
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .prconv import SOURCES
from .scene import SceneConfig

TABLE3_ROWS = {"a": (False, False), "b": (True, False), "c": (True, True)}
TABLE4_ROWS = {key: SOURCES[: i + 1] for i, key in enumerate("abcde")}


@dataclass
class PipelineConfig:
    seed: int = 0
    keypoint_count: int = 2048
    fps_space: str = "raw"  # or "union" (raw + pseudo)
    voxel_size: tuple[float, float, float] = (0.2, 0.2, 0.2)
    range_min: tuple[float, float, float] = (0.0, -12.8, -1.5)
    range_max: tuple[float, float, float] = (25.6, 12.8, 1.7)
    radii: tuple[float, ...] = (0.4, 0.8, 1.2, 2.4, 4.8)
    max_neighbors: int = 16
    level_widths: tuple[int, ...] = (16, 16, 16, 16)
    kp_widths: tuple[int, ...] = (64, 32)  # hidden widths then D_kp
    d_m: int = 32
    head_hidden: int = 32
    pool_mode: str = "max"
    stride: int = 1
    dilation_kernel: int = 5
    alpha: float = 0.5
    beta: float = 0.5
    pseudo: bool = True
    prconv: bool = True
    caaf: bool = True
    sources: tuple[str, ...] = SOURCES
    top_n: int = 8
    nominal_size: tuple[float, float, float] = (3.9, 1.6, 1.56)
    roi_center_z: float = -0.95
    gt_rois: bool = True
    gt_roi_copies: int = 3
    match_scale: float = 0.5
    smooth_l1_delta: float = 1.0
    optimizer: str = "sgd"  # or "adam"
    lr: float = 0.05
    steps: int = 500
    divergence: float = 1e6
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("keypoint_count", "max_neighbors", "d_m", "head_hidden", "stride", "top_n", "gt_roi_copies", "dilation_kernel"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if len(self.radii) != 5 or any(r <= 0 for r in self.radii):
            raise ValueError("radii needs five positive values (point, conv1..conv4)")
        if len(self.level_widths) != 4 or any(w < 1 for w in self.level_widths):
            raise ValueError("level_widths needs four positive widths")
        if not self.kp_widths or any(w < 1 for w in self.kp_widths):
            raise ValueError("kp_widths must be positive")
        if any(s <= 0 for s in self.voxel_size) or any(a >= b for a, b in zip(self.range_min, self.range_max)):
            raise ValueError("bad voxel size or range")
        if not self.sources or set(self.sources) - set(SOURCES):
            raise ValueError(f"sources must be a non-empty subset of {SOURCES}")
        if self.pool_mode not in ("max", "avg"):
            raise ValueError("pool_mode must be max or avg")
        if self.fps_space not in ("raw", "union"):
            raise ValueError("fps_space must be raw or union")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be sgd or adam")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("auxiliary weights must be non-negative")

    @property
    def table3_row(self) -> str:
        for key, flags in TABLE3_ROWS.items():
            if (self.prconv, self.caaf) == flags:
                return key
        return "custom"

    @property
    def table4_row(self) -> str:
        for key, srcs in TABLE4_ROWS.items():
            if tuple(self.sources) == srcs:
                return key
        return "custom"

    def with_table3(self, row: str) -> "PipelineConfig":
        prconv, caaf = TABLE3_ROWS[row]
        return replace(self, prconv=prconv, caaf=caaf)

    def with_table4(self, row: str) -> "PipelineConfig":
        return replace(self, sources=TABLE4_ROWS[row])

    def as_dict(self) -> dict:
        return asdict(self)


def _parse_value(text: list[str], default):
    if isinstance(default, bool):
        if len(text) != 1 or text[0].lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {' '.join(text)!r}")
        return text[0].lower() in ("true", "1", "yes")
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(x) for x in text)
    if len(text) != 1:
        raise ValueError(f"expected one value, got {' '.join(text)!r}")
    if isinstance(default, int):
        return int(text[0])
    if isinstance(default, float):
        return float(text[0])
    return text[0]


def _apply(obj, key: str, values: list[str]):
    known = {f.name for f in fields(obj)}
    if key not in known:
        raise ValueError(f"unknown config key {key!r}")
    return replace(obj, **{key: _parse_value(values, getattr(obj, key))})


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = base if base is not None else PipelineConfig()
    scene = cfg.scene
    top: dict[str, list[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = ":" if ":" in line else "=" if "=" in line else None
        if sep is None:
            raise ValueError(f"line {lineno}: expected 'key: value'")
        key, value = (s.strip() for s in line.split(sep, 1))
        try:
            if key.startswith("scene."):
                scene = _apply(scene, key[len("scene."):], value.split())
            else:
                top[key] = value.split()
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    for key, values in top.items():
        cfg = _apply(cfg, key, values)
    return replace(cfg, scene=scene)


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: PipelineConfig) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return " ".join(str(x) for x in v)
        return str(v)

    lines = [f"{f.name}: {fmt(getattr(cfg, f.name))}" for f in fields(cfg) if f.name != "scene"]
    lines += [f"scene.{f.name}: {fmt(getattr(cfg.scene, f.name))}" for f in fields(cfg.scene)]
    return "\n".join(lines) + "\n"
