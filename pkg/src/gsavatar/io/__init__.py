"""File formats, configuration and synthetic scenes."""
from .bundle import SceneBundle, load_bundle, make_synthetic_scene
from .config import ConfigError, PipelineConfig, SceneSpec, default_config, dumps, load_config, loads
from .frames import list_frames, load_frame, load_png, save_frame, save_png, to_uint8
from .gsav import GsavFormatError, load_avatar, load_gsav, save_avatar, save_gsav
from .mesh import MeshFormatError, load_mesh, save_mesh
from .reports import load_split_reports, load_trace, save_trace, split_reports_to_json
from .tracks import Track, read_track, write_track

__all__ = [
    "ConfigError",
    "GsavFormatError",
    "MeshFormatError",
    "PipelineConfig",
    "SceneBundle",
    "SceneSpec",
    "Track",
    "default_config",
    "dumps",
    "list_frames",
    "load_avatar",
    "load_bundle",
    "load_config",
    "load_frame",
    "load_gsav",
    "load_mesh",
    "load_png",
    "load_split_reports",
    "load_trace",
    "loads",
    "make_synthetic_scene",
    "read_track",
    "save_avatar",
    "save_frame",
    "save_gsav",
    "save_mesh",
    "save_png",
    "save_trace",
    "split_reports_to_json",
    "to_uint8",
    "write_track",
]
